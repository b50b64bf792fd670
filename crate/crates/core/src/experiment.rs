//! End-to-end experiments: the full model against the static baseline on a
//! seed-split train/test pair, and the ablation comparison.

use std::fmt::Write as _;

use crate::bench::{generate_dataset, Dataset, GenConfig};
use crate::config::{FusionStrategy, ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{grade_predictions, mm4_score, predict_dataset, random_baseline, CorrectnessMatrix};
use crate::model::{Model, CLIP_PREFIX, NUM_OPTIONS};
use crate::rng::named_seed;
use crate::textenc::TEXT_PREFIX;
use crate::training::{pretrain_contrastive, train_stage, OptimizerState, StepMetrics, TrainOptions};
use crate::visenc::VIS_PREFIX;

/// Train and test sets drawn from independent generator seeds.
pub fn split_datasets(base: &GenConfig, seed: u64, train_images: usize, test_images: usize) -> Result<(Dataset, Dataset)> {
    let train = generate_dataset(&GenConfig {
        images: train_images,
        seed: named_seed(seed, "split.train"),
        ..base.clone()
    })?;
    let test = generate_dataset(&GenConfig {
        images: test_images,
        seed: named_seed(seed, "split.test"),
        ..base.clone()
    })?;
    Ok((train, test))
}

/// Stage-0 contrastive pretraining on the training images and captions.
pub fn pretrain_backbone(run: &RunConfig, train: &Dataset, opts: &TrainOptions) -> Result<(Model, Vec<StepMetrics>)> {
    let mut model = Model::init(&run.model, run.seed)?;
    let mut state = OptimizerState::default();
    let hist = pretrain_contrastive(
        &mut model,
        &train.images,
        &train.captions,
        &run.training.pretrain,
        &mut state,
        opts,
    )?;
    Ok((model, hist))
}

/// Fresh model for `cfg` whose text encoder, backbone and temperature are
/// copied from `backbone`.
pub fn with_backbone(cfg: &ModelConfig, seed: u64, backbone: &Model) -> Result<Model> {
    let mut m = Model::init(cfg, seed)?;
    for (name, t) in backbone.params.iter() {
        if [TEXT_PREFIX, VIS_PREFIX, CLIP_PREFIX].iter().any(|p| name.starts_with(p)) {
            let slot = m.params.get_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(Error::Parameter(format!(
                    "backbone tensor {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
    }
    m.params.set_frozen(backbone.params.frozen().iter().cloned());
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelScores {
    pub name: String,
    pub config_hash: String,
    /// Mean batch accuracy over the last tenth of training.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `mm4_score` for n = 1..4 on the test set.
    pub mm4: [usize; 4],
    pub final_loss: f64,
}

fn tail_mean(h: &[StepMetrics], f: impl Fn(&StepMetrics) -> f64) -> f64 {
    let k = (h.len() / 10).max(1).min(h.len());
    if k == 0 {
        return f64::NAN;
    }
    h[h.len() - k..].iter().map(f).sum::<f64>() / k as f64
}

fn score(model: &Model, test: &Dataset, threads: usize) -> Result<CorrectnessMatrix> {
    let preds = predict_dataset(model, test, threads)?;
    Ok(grade_predictions(&preds, &test.records).matrix)
}

/// Stage-1 training of `cfg` on top of `backbone`, scored on `test`.
pub fn train_and_score(
    name: &str,
    cfg: &ModelConfig,
    run: &RunConfig,
    backbone: &Model,
    train: &Dataset,
    test: &Dataset,
    opts: &TrainOptions,
) -> Result<(Model, ModelScores)> {
    let mut model = with_backbone(cfg, run.seed, backbone)?;
    let mut state = OptimizerState::default();
    let hist = train_stage(&mut model, train, &run.training.stage1, &mut state, opts)?;
    let m = score(&model, test, opts.threads)?;
    let mut mm4 = [0; 4];
    for (n, slot) in mm4.iter_mut().enumerate() {
        *slot = mm4_score(&m, n + 1)?;
    }
    let variant = RunConfig {
        model: cfg.clone(),
        ..run.clone()
    };
    Ok((
        model,
        ModelScores {
            name: name.to_string(),
            config_hash: variant.hash(),
            train_accuracy: tail_mean(&hist, |s| s.accuracy),
            test_accuracy: m.question_accuracy(),
            mm4,
            final_loss: tail_mean(&hist, |s| s.loss),
        },
    ))
}

/// Static baseline: identical configuration with the dynamic branch off.
pub fn baseline_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        dynamic_branch: false,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityOutcome {
    pub seed: u64,
    pub pretrain_final_loss: f64,
    pub full: ModelScores,
    pub baseline: ModelScores,
}

/// One seed of the full-versus-static comparison.
pub fn sensitivity_seed(
    run: &RunConfig,
    seed: u64,
    train_images: usize,
    test_images: usize,
    opts: &TrainOptions,
) -> Result<SensitivityOutcome> {
    let mut run = run.clone();
    run.reseed(seed);
    let (train, test) = split_datasets(&run.dataset, seed, train_images, test_images)?;
    let (backbone, pre) = pretrain_backbone(&run, &train, opts)?;
    let (_, full) = train_and_score("full", &run.model, &run, &backbone, &train, &test, opts)?;
    let (_, baseline) = train_and_score("static", &baseline_config(&run.model), &run, &backbone, &train, &test, opts)?;
    Ok(SensitivityOutcome {
        seed,
        pretrain_final_loss: tail_mean(&pre, |s| s.loss),
        full,
        baseline,
    })
}

/// Named model variants of the ablation table.
pub fn ablation_variants(cfg: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut out = vec![("full".to_string(), cfg.clone())];
    let mut v = cfg.clone();
    v.adaln = false;
    out.push(("w/o-adaln".into(), v));
    let mut v = cfg.clone();
    v.fusion.zero_ffn = !cfg.fusion.zero_ffn;
    out.push((if v.fusion.zero_ffn { "zero-ffn" } else { "linear-z" }.into(), v));
    let mut v = cfg.clone();
    v.static_branch = false;
    out.push(("w/o-pure".into(), v));
    for (name, s) in [("mof", FusionStrategy::Mof), ("cross", FusionStrategy::Cross)] {
        if cfg.fusion.strategy != s {
            let mut v = cfg.clone();
            v.fusion.strategy = s;
            out.push((name.into(), v));
        }
    }
    out.push(("static".into(), baseline_config(cfg)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seed: u64,
    pub test_images: usize,
    pub rows: Vec<ModelScores>,
}

impl AblationReport {
    /// One CSV row per variant: scores for n = 1..4 and the random baseline
    /// of each level in the header comment.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("variant,config_hash,train_accuracy,test_accuracy,mm4_n1,mm4_n2,mm4_n3,mm4_n4\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.name, r.config_hash, r.train_accuracy, r.test_accuracy, r.mm4[0], r.mm4[1], r.mm4[2], r.mm4[3]
            );
        }
        let b: Vec<String> = (1..=4)
            .map(|n| random_baseline(n, self.test_images, NUM_OPTIONS, 4).map(|v| v.to_string()))
            .collect::<Result<_>>()?;
        let _ = writeln!(s, "random,-,0.25,0.25,{}", b.join(","));
        Ok(s)
    }
}

/// Train every ablation variant on one shared pretrained backbone.
pub fn ablation(
    run: &RunConfig,
    train_images: usize,
    test_images: usize,
    opts: &TrainOptions,
) -> Result<AblationReport> {
    let (train, test) = split_datasets(&run.dataset, run.seed, train_images, test_images)?;
    let (backbone, _) = pretrain_backbone(run, &train, opts)?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(&run.model) {
        let (_, s) = train_and_score(&name, &cfg, run, &backbone, &train, &test, opts)?;
        rows.push(s);
    }
    Ok(AblationReport {
        seed: run.seed,
        test_images,
        rows,
    })
}
