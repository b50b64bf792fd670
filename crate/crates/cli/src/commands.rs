use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use serde_json::json;

use igvlm::bench::dataset::{load_dataset, read_records, write_dataset, DATASET_FILE};
use igvlm::bench::{diversity_matrix, generate_dataset, pair_similarity_stats, validate_dataset, GenConfig, ValidateOptions};
use igvlm::config::RunConfig;
use igvlm::eval::{category_breakdown, category_csv, grade_predictions, mm4_score, predict_dataset, random_baseline, PredictionSet, QUESTIONS_PER_IMAGE};
use igvlm::experiment::with_backbone;
use igvlm::export::{write_ppm, write_text};
use igvlm::model::{gradcheck_model, perturb_zero_init, saliency_map, Example, Model, CLIP_PREFIX, NUM_OPTIONS};
use igvlm::rng::named_seed;
use igvlm::training::{
    load_checkpoint, metrics_csv, pretrain_contrastive, save_checkpoint, threads_from_env, train_stage, Checkpoint,
    OptimizerState, StepMetrics, TrainOptions,
};
use igvlm::visenc::{Branch, VIS_PREFIX};
use igvlm::{Error, Result};

use crate::manifest::{path_str, read_provenance, sibling, sidecar, Manifest};
use crate::{BranchArg, DiversityArgs, EvalArgs, GenArgs, GradcheckArgs, SaliencyArgs, ScoreArgs, StageArgs, TrainArgs, ValidateArgs};

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{what} {} does not exist", path.display())))
    }
}

fn config_value(run: &RunConfig) -> serde_json::Value {
    serde_json::to_value(run).expect("config serialises")
}

pub fn gen(a: &GenArgs) -> Result<ExitCode> {
    let mut run = a.cfg.resolve()?;
    if let Some(n) = a.images {
        run.dataset.images = n;
    }
    if run.dataset.images == 0 {
        return Err(Error::Parameter("--images must be at least 1".into()));
    }
    let ds = generate_dataset(&run.dataset)?;
    write_dataset(&ds, &a.out)?;
    Manifest::new("gen", run.hash(), run.seed)
        .with("dataset_seed", run.dataset.seed)
        .with("images", ds.len())
        .with("questions", ds.question_count())
        .with("dataset", DATASET_FILE)
        .with("config", config_value(&run))
        .write(&a.out.join("manifest.json"))?;
    println!("wrote {} images / {} questions to {}", ds.len(), ds.question_count(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn dataset_file(path: &Path) -> std::path::PathBuf {
    if path.is_dir() {
        path.join(DATASET_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn validate(a: &ValidateArgs) -> Result<ExitCode> {
    require(&a.dataset, "dataset")?;
    let records = read_records(&dataset_file(&a.dataset))?;
    let r = validate_dataset(&records, ValidateOptions::default());
    println!(
        "{} records, {} questions, answer histogram {:?}",
        r.records, r.questions, r.answer_histogram
    );
    for v in &r.violations {
        println!("{}: {} ({})", v.image_id.as_deref().unwrap_or("-"), v.kind, v.detail);
    }
    if r.is_clean() {
        println!("ok");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{} violations", r.violations.len());
        Ok(ExitCode::from(1))
    }
}

fn stage_config(a: &TrainArgs, stage: u8) -> Result<RunConfig> {
    let mut run = a.cfg.resolve()?;
    let st = run.training.stage_mut(stage)?;
    if let Some(v) = a.steps {
        st.total_steps = v;
    }
    if let Some(v) = a.lr {
        st.peak_lr = v;
    }
    if let Some(v) = a.batch_size {
        st.batch_size = v;
    }
    run.validate()?;
    Ok(run)
}

fn resume(path: &Path, stage: u8, run: &RunConfig) -> Result<(Model, OptimizerState)> {
    require(path, "checkpoint")?;
    let ck = load_checkpoint(path)?;
    if ck.meta.stage != stage {
        return Err(Error::Parameter(format!(
            "{} is a stage-{} checkpoint, cannot resume stage {stage}",
            path.display(),
            ck.meta.stage
        )));
    }
    if ck.meta.config_hash != run.hash() {
        return Err(Error::Parameter(format!(
            "{} was written under config {}, current config is {}",
            path.display(),
            ck.meta.config_hash,
            run.hash()
        )));
    }
    let state = ck
        .optimizer
        .clone()
        .ok_or_else(|| Error::Parameter(format!("{} carries no optimizer state", path.display())))?;
    Ok((ck.to_model()?, state))
}

fn finish(
    command: &'static str,
    run: &RunConfig,
    stage: u8,
    model: &Model,
    state: &OptimizerState,
    hist: &[StepMetrics],
    a: &TrainArgs,
    init: Option<&Path>,
) -> Result<ExitCode> {
    let hash = run.hash();
    let ck = Checkpoint::new(model, Some(state), stage, state.step, &hash, run.seed);
    save_checkpoint(&ck, &a.out)?;
    let metrics = sibling(&a.out, "metrics.csv");
    write_text(&metrics, &metrics_csv(hist))?;
    let total = run.training.stage(stage)?.total_steps;
    let mut m = Manifest::new(command, hash, run.seed)
        .with("stage", stage)
        .with("step", state.step)
        .with("complete", state.step as usize >= total)
        .with("dataset", path_str(&a.dataset))
        .with("metrics", path_str(&metrics))
        .with("config", config_value(run));
    if let Some(p) = init {
        m = m.with("init", path_str(p));
    }
    if let Some(p) = &a.resume {
        m = m.with("resumed_from", path_str(p));
    }
    m.write(&sidecar(&a.out))?;
    if let Some(last) = hist.last() {
        println!(
            "stage {stage}: step {} loss {:.4} accuracy {:.3}",
            last.step + 1,
            last.loss,
            last.accuracy
        );
    }
    println!("checkpoint {} (step {}/{total})", a.out.display(), state.step);
    Ok(ExitCode::SUCCESS)
}

fn options(stop_after: Option<usize>) -> TrainOptions {
    TrainOptions {
        threads: threads_from_env(),
        stop_after,
    }
}

pub fn pretrain(a: &TrainArgs) -> Result<ExitCode> {
    let run = stage_config(a, 0)?;
    require(&a.dataset, "dataset")?;
    let ds = load_dataset(&a.dataset)?;
    if ds.captions.len() != ds.len() || ds.captions.iter().any(String::is_empty) {
        return Err(Error::Data(format!("{} has no captions for pretraining", a.dataset.display())));
    }
    let (mut model, mut state) = match &a.resume {
        Some(p) => resume(p, 0, &run)?,
        None => (Model::init(&run.model, run.seed)?, OptimizerState::default()),
    };
    let hist = pretrain_contrastive(
        &mut model,
        &ds.images,
        &ds.captions,
        &run.training.pretrain,
        &mut state,
        &options(a.stop_after),
    )?;
    finish("pretrain", &run, 0, &model, &state, &hist, a, None)
}

fn init_from(path: Option<&Path>, stage: u8, run: &RunConfig) -> Result<Model> {
    let prev = stage - 1;
    let path = path.ok_or_else(|| {
        Error::Prerequisite(format!(
            "stage {stage} needs a stage-{prev} checkpoint: pass --init{}",
            if prev == 0 { " (written by `igvlm pretrain`)" } else { "" }
        ))
    })?;
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "stage-{prev} checkpoint {} not found",
            path.display()
        )));
    }
    let ck = load_checkpoint(path)?;
    if ck.meta.stage != prev {
        return Err(Error::Prerequisite(format!(
            "stage {stage} needs a stage-{prev} checkpoint, {} is stage {}",
            path.display(),
            ck.meta.stage
        )));
    }
    let prior = ck.to_model()?;
    if stage == 1 {
        if !prior.params.frozen().iter().any(|n| n.starts_with(VIS_PREFIX)) {
            return Err(Error::Prerequisite(format!(
                "stage-0 checkpoint {} is unfinished; resume pretraining first",
                path.display()
            )));
        }
        return with_backbone(&run.model, run.seed, &prior);
    }
    let mut expected = prior.config.clone();
    expected.train_text_in_stage2 = run.model.train_text_in_stage2;
    if expected != run.model {
        return Err(Error::Parameter(format!(
            "model config differs from the one stored in {}",
            path.display()
        )));
    }
    let mut model = prior;
    model.config = expected;
    Ok(model)
}

pub fn train(a: &StageArgs) -> Result<ExitCode> {
    let s = a.stage;
    let run = stage_config(&a.train, s)?;
    require(&a.train.dataset, "dataset")?;
    let (mut model, mut state) = match &a.train.resume {
        Some(p) => resume(p, s, &run)?,
        None => (init_from(a.init.as_deref(), s, &run)?, OptimizerState::default()),
    };
    let ds = load_dataset(&a.train.dataset)?;
    let hist = train_stage(&mut model, &ds, run.training.stage(s)?, &mut state, &options(a.train.stop_after))?;
    finish("train", &run, s, &model, &state, &hist, &a.train, a.init.as_deref())
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.dataset, "dataset")?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.to_model()?;
    let ds = load_dataset(&a.dataset)?;
    let preds = predict_dataset(&model, &ds, threads_from_env())?;
    let mut w = BufWriter::new(fs::File::create(&a.out)?);
    preds.write_jsonl(&mut w)?;
    w.flush()?;
    let acc = grade_predictions(&preds, &ds.records).matrix.question_accuracy();
    Manifest::new("eval", ck.meta.config_hash.clone(), ck.meta.seed)
        .with("checkpoint", path_str(&a.checkpoint))
        .with("stage", ck.meta.stage)
        .with("step", ck.meta.step)
        .with("dataset", path_str(&a.dataset))
        .with("predictions", preds.len())
        .with("question_accuracy", acc)
        .write(&sidecar(&a.out))?;
    println!("{} predictions, question accuracy {acc:.4}", preds.len());
    Ok(ExitCode::SUCCESS)
}

pub fn score(a: &ScoreArgs) -> Result<ExitCode> {
    require(&a.predictions, "predictions")?;
    require(&a.dataset, "dataset")?;
    let records = read_records(&dataset_file(&a.dataset))?;
    let preds = PredictionSet::read_jsonl(BufReader::new(fs::File::open(&a.predictions)?))?;
    let graded = grade_predictions(&preds, &records);
    for w in &graded.warnings {
        eprintln!("warning: {w}");
    }
    let m = &graded.matrix;
    let mut csv = String::from("n,score,random_baseline\n");
    for &n in &a.n {
        let s = mm4_score(m, n)?;
        let b = random_baseline(n, m.num_images(), NUM_OPTIONS, QUESTIONS_PER_IMAGE)?;
        let _ = writeln!(csv, "{n},{s},{b}");
    }
    print!("{csv}");
    let acc = m.question_accuracy();
    println!("question accuracy {acc}");
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
        let cats = sibling(out, "categories.csv");
        write_text(&cats, &category_csv(&category_breakdown(m, &records)))?;
        let (hash, seed) = read_provenance(&a.predictions)?.unwrap_or_else(|| ("unknown".into(), 0));
        Manifest::new("score", hash, seed)
            .with("predictions", path_str(&a.predictions))
            .with("dataset", path_str(&a.dataset))
            .with("images", m.num_images())
            .with("question_accuracy", acc)
            .with("categories", path_str(&cats))
            .with("warnings", graded.warnings.clone())
            .write(&sidecar(out))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let run = a.cfg.resolve()?;
    let mut model = Model::init(&run.model, run.seed)?;
    // Zero-initialised adapters would leave structurally zero gradients
    // upstream of them; check at a generic point instead.
    perturb_zero_init(&mut model.params, 0.1, named_seed(run.seed, "gradcheck.perturb"));
    let ds = generate_dataset(&GenConfig {
        images: 1,
        ..run.dataset.clone()
    })?;
    let q = &ds.records[0].questions[0];
    let ex = Example {
        image: &ds.images[0],
        question: &q.text,
        options: &q.options,
    };
    let r = gradcheck_model(&model, &ex, q.answer_index, a.per_tensor, a.h, run.seed)?;
    let names: Vec<&str> = model.params.names().filter(|n| !n.starts_with(CLIP_PREFIX)).collect();
    let worst = r
        .worst
        .map(|(t, i)| format!("{}[{i}]", names[t]))
        .unwrap_or_else(|| "-".into());
    println!("config {} seed {}", run.hash(), run.seed);
    println!(
        "max relative error {:.3e} over {} coordinates (worst {worst})",
        r.max_rel_error, r.checked
    );
    if r.max_rel_error.is_finite() && r.max_rel_error <= a.tolerance {
        Ok(ExitCode::SUCCESS)
    } else {
        println!("exceeds tolerance {:e}", a.tolerance);
        Ok(ExitCode::from(1))
    }
}

pub fn saliency(a: &SaliencyArgs) -> Result<ExitCode> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.dataset, "dataset")?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.to_model()?;
    let ds = load_dataset(&a.dataset)?;
    let r = ds
        .records
        .iter()
        .position(|r| r.image_id == a.image_id)
        .ok_or_else(|| Error::Parameter(format!("no image {} in the dataset", a.image_id)))?;
    let rec = &ds.records[r];
    let q = rec.questions.get(a.question).ok_or_else(|| {
        Error::Parameter(format!("question {} out of range for {}", a.question, a.image_id))
    })?;
    let target = a.target.unwrap_or(q.answer_index);
    if target >= NUM_OPTIONS {
        return Err(Error::Parameter(format!("target {target} out of range")));
    }
    let branches: Vec<Branch> = match a.branch {
        BranchArg::Static => vec![Branch::Static],
        BranchArg::Conditioned => vec![Branch::Conditioned],
        BranchArg::Both => vec![Branch::Static, Branch::Conditioned],
    };
    if branches.contains(&Branch::Conditioned) && !model.config.dynamic_branch {
        return Err(Error::Parameter("checkpoint has no conditioned branch".into()));
    }
    fs::create_dir_all(&a.out)?;
    write_ppm(&a.out.join(format!("{}.ppm", a.image_id)), &ds.images[r])?;
    let mut files = Vec::new();
    for b in branches {
        let name = match b {
            Branch::Static => "static",
            _ => "conditioned",
        };
        let map = saliency_map(&model, &ds.images[r], &q.text, &q.options, target, b)?;
        let comments = vec![
            format!("config_hash {}", ck.meta.config_hash),
            format!("seed {}", ck.meta.seed),
            format!("branch {name}"),
            format!("question {}", q.text),
            format!("target {target} {}", q.options[target]),
        ];
        let stem = format!("{}_q{}_{name}", a.image_id, a.question);
        let pgm = a.out.join(format!("{stem}.pgm"));
        let csv = a.out.join(format!("{stem}.csv"));
        write_text(&pgm, &map.to_pgm(&comments)?)?;
        write_text(&csv, &map.to_csv(None)?)?;
        let (row, col) = map.argmax();
        println!("{name}: peak at row {row}, col {col} -> {}", pgm.display());
        files.push(json!({ "branch": name, "pgm": path_str(&pgm), "csv": path_str(&csv), "peak": [row, col] }));
    }
    Manifest::new("saliency", ck.meta.config_hash.clone(), ck.meta.seed)
        .with("checkpoint", path_str(&a.checkpoint))
        .with("image_id", a.image_id.clone())
        .with("question", a.question)
        .with("target", target)
        .with("files", files)
        .write(&a.out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

pub fn diversity(a: &DiversityArgs) -> Result<ExitCode> {
    require(&a.dataset, "dataset")?;
    let (model, hash, seed) = match &a.checkpoint {
        Some(p) => {
            require(p, "checkpoint")?;
            let ck = load_checkpoint(p)?;
            (ck.to_model()?, ck.meta.config_hash.clone(), ck.meta.seed)
        }
        None => {
            let run = a.cfg.resolve()?;
            (Model::init(&run.model, run.seed)?, run.hash(), run.seed)
        }
    };
    let records = read_records(&dataset_file(&a.dataset))?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("image_id,within_pair,across_pair\n");
    let mut gaps = Vec::new();
    for rec in records.iter().filter(|r| r.questions.len() == QUESTIONS_PER_IMAGE) {
        let qs: Vec<String> = rec.questions.iter().map(|q| q.text.clone()).collect();
        let m = diversity_matrix(&qs, &model.params, &model.vocab, &model.config)?;
        let (w, x) = pair_similarity_stats(&m);
        let _ = writeln!(csv, "{},{w},{x}", rec.image_id);
        gaps.push(w - x);
        if a.image_id.as_deref() == Some(rec.image_id.as_str()) {
            let p = a.out.join(format!("matrix_{}.csv", rec.image_id));
            write_text(&p, &igvlm::export::matrix_csv(&m, Some("q0,q1,q2,q3"))?)?;
        }
    }
    if gaps.is_empty() {
        return Err(Error::Data("no four-question records".into()));
    }
    let pairs = a.out.join("diversity.csv");
    write_text(&pairs, &csv)?;
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    let frac = gaps.iter().filter(|&&g| g > 0.0).count() as f64 / gaps.len() as f64;
    println!("median within-minus-across similarity {median:.4}; within > across for {:.1}% of images", 100.0 * frac);
    Manifest::new("diversity", hash, seed)
        .with("dataset", path_str(&a.dataset))
        .with("pairs", path_str(&pairs))
        .with("median_gap", median)
        .with("fraction_within_greater", frac)
        .write(&a.out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}
