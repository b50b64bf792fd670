//! Randomised invariants across modules.

use proptest::prelude::*;

use igvlm::bench::{generate_dataset, grammar_words, validate_dataset, GenConfig, ValidateOptions};
use igvlm::config::{FusionStrategy, ModelConfig};
use igvlm::model::{trainable_params, Model};
use igvlm::rng::SplitMix64;
use igvlm::training::{train_stage, OptimizerState, TrainOptions};
use igvlm::visenc::ImageTensor;
use igvlm::{Tape, Tensor, Var};

fn small() -> ModelConfig {
    ModelConfig {
        vis_layers: 1,
        text_layers: 1,
        d_vis: 16,
        d_text: 16,
        head_hidden: 16,
        ..ModelConfig::default()
    }
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..=6, 1usize..=6, any::<u64>(), 0.1f64..20.0).prop_map(|(r, c, seed, std)| {
        Tensor::randn(&[r, c], std, &mut SplitMix64::new(seed))
    })
}

fn image() -> impl Strategy<Value = ImageTensor> {
    any::<u64>().prop_map(|seed| {
        let t = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut SplitMix64::new(seed));
        ImageTensor::from_tensor(t).unwrap()
    })
}

fn instruction() -> impl Strategy<Value = String> {
    let words = grammar_words();
    proptest::collection::vec(proptest::sample::select(words), 0..12).prop_map(|w| w.join(" "))
}

/// Five-point central differences against reverse mode. Each coordinate
/// takes the best of three step sizes, since rows that are nearly constant
/// make layer norm vary on a scale of sqrt(eps). Relative error is floored
/// at a thousandth of the largest gradient so that near-zero coordinates
/// are judged on absolute error.
fn relative_fd_error(f: impl Fn(&mut Tape, &[Var]) -> igvlm::Result<Var>, params: &[Tensor]) -> f64 {
    let eval = |ps: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&mut t, &vars).unwrap();
        t.backward(l).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| t.grad(v).unwrap().clone()).collect();
        (t.value(l).item(), grads)
    };
    let (_, grads) = eval(params);
    let scale = grads.iter().flat_map(|g| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let an = g.data()[j];
            let err = [1e-3, 1e-4, 1e-5]
                .iter()
                .map(|&h| {
                    let at = |k: f64| {
                        let mut p = params.to_vec();
                        p[i].data_mut()[j] += k * h;
                        eval(&p).0
                    };
                    let fd = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h);
                    let denom = an.abs().max(fd.abs()).max(1e-3 * scale).max(1e-8);
                    (an - fd).abs() / denom
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(err);
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix()) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_last(v).unwrap();
        let out = tape.value(s);
        for r in 0..out.rows() {
            prop_assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(x in matrix()) {
        prop_assume!(x.cols() > 1);
        let eps = 1e-5;
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let n = tape.layer_norm_raw(v, eps).unwrap();
        let out = tape.value(n);
        for r in 0..out.rows() {
            let c = out.cols() as f64;
            let mean = out.row(r).iter().sum::<f64>() / c;
            let var = out.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let xm = x.row(r).iter().sum::<f64>() / c;
            let xv = x.row(r).iter().map(|v| (v - xm).powi(2)).sum::<f64>() / c;
            prop_assert!(mean.abs() <= 1e-10);
            // Standardising by sqrt(var + eps) leaves variance var / (var + eps).
            prop_assert!((var - xv / (xv + eps)).abs() <= 1e-10);
            prop_assert!(1.0 - var <= eps / xv + 1e-10);
        }
    }

    #[test]
    fn primitive_ops_match_finite_differences(
        (r, c, k) in (1usize..=6, 2usize..=6, 1usize..=6),
        seed in any::<u64>(),
        op in 0usize..6,
    ) {
        let mut rng = SplitMix64::new(seed);
        let x = Tensor::randn(&[r, c], 1.0, &mut rng);
        let y = Tensor::randn(&[r, c], 1.0, &mut rng);
        let b = Tensor::randn(&[c, k], 1.0, &mut rng);
        // A random weighting keeps the loss from being flat along
        // directions the op normalises away.
        let wk = Tensor::randn(&[r, k], 1.0, &mut rng);
        let wc = Tensor::randn(&[r, c], 1.0, &mut rng);
        let params = match op {
            0 => vec![x, b],
            1 => vec![x, y],
            _ => vec![x],
        };
        let f = |t: &mut Tape, v: &[Var]| -> igvlm::Result<Var> {
            let (h, w) = match op {
                0 => (t.matmul(v[0], v[1])?, &wk),
                1 => (t.mul(v[0], v[1])?, &wc),
                2 => (t.gelu(v[0]), &wc),
                3 => (t.softmax_last(v[0])?, &wc),
                4 => (t.layer_norm_raw(v[0], 1e-5)?, &wc),
                _ => (t.l2_normalize_rows(v[0])?, &wc),
            };
            let w = t.constant(w.clone());
            let h = t.mul(h, w)?;
            Ok(t.sum(h))
        };
        let err = relative_fd_error(f, &params);
        prop_assert!(err <= 1e-5, "op {op}: relative error {err}");
    }

    #[test]
    fn tape_evaluation_is_bitwise_deterministic(x in matrix()) {
        let run = || {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let h = t.gelu(v);
            let h = t.softmax_last(h).unwrap();
            let l = t.sum(h);
            let l2 = t.mul(l, l).unwrap();
            t.backward(l2).unwrap();
            (t.value(h).clone(), t.grad(v).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert!(a.bit_eq(&b));
        prop_assert!(ga.bit_eq(&gb));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Freshly initialised adapters and fusion leave the static path
    /// untouched, for any image and any instruction.
    #[test]
    fn fresh_model_reduces_to_static_path(img in image(), q in instruction(), seed in any::<u64>(), s in 0usize..4) {
        let mut cfg = small();
        let (strategy, ffn) = [
            (FusionStrategy::Adaln, false),
            (FusionStrategy::Adaln, true),
            (FusionStrategy::Cross, false),
            (FusionStrategy::Mof, false),
        ][s];
        cfg.fusion.strategy = strategy;
        cfg.fusion.zero_ffn = ffn;
        let m = Model::init(&cfg, seed).unwrap();
        let (y0, yct, yi) = m.features(&img, &q).unwrap();
        prop_assert!(yct.unwrap().bit_eq(&y0));
        if strategy != FusionStrategy::Mof {
            prop_assert!(yi.bit_eq(&y0));
        }
        let opts: Vec<String> = ["red", "blue", "green", "yellow"].iter().map(|s| s.to_string()).collect();
        let mut off = m.config.clone();
        off.dynamic_branch = false;
        if strategy != FusionStrategy::Mof {
            prop_assert!(m.logits(&img, &q, &opts).unwrap().bit_eq(&m.logits_with(&off, &img, &q, &opts).unwrap()));
        }
    }

    #[test]
    fn generated_datasets_are_clean(seed in any::<u64>(), images in 1usize..24) {
        let ds = generate_dataset(&GenConfig { images, seed, ..GenConfig::default() }).unwrap();
        let r = validate_dataset(&ds.records, ValidateOptions::default());
        prop_assert!(r.is_clean(), "{:?}", r.violations);
        for q in ds.records.iter().flat_map(|r| &r.questions) {
            let mut o = q.options.clone();
            o.sort();
            o.dedup();
            prop_assert_eq!(o.len(), q.options.len());
            let answer = &q.options[q.answer_index];
            prop_assert_eq!(q.options.iter().filter(|x| *x == answer).count(), 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn frozen_tensors_never_move(seed in any::<u64>(), stage in 1u8..=2, steps in 1usize..4) {
        let cfg = small();
        let mut m = Model::init(&cfg, seed).unwrap();
        let ds = generate_dataset(&GenConfig { images: 3, seed, ..GenConfig::default() }).unwrap();
        let before = m.params.clone();
        let mut st = igvlm::config::RunConfig::default().training.stage(stage).unwrap().clone();
        st.total_steps = steps;
        st.batch_size = 4;
        let mut state = OptimizerState::default();
        train_stage(&mut m, &ds, &st, &mut state, &TrainOptions::default()).unwrap();
        let part = trainable_params(&m.params, stage, &cfg).unwrap();
        for name in &part.frozen {
            prop_assert!(m.params.get(name).unwrap().bit_eq(before.get(name).unwrap()), "{name}");
        }
    }
}
