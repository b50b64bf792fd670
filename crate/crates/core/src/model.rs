//! End-to-end assembly: image + instruction + four options → four logits.
//!
//! The answer head pools the fused tokens with one learned query, mixes the
//! pooled vector with the projected instruction embedding through a
//! two-layer MLP, and scores each option by a dot product with the option
//! text's projected feature.

use std::collections::{BTreeSet, HashMap};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::export::{matrix_csv, pgm_string};
use crate::fusion::{self, FUSION_PREFIX};
use crate::nn;
use crate::params::{Binder, ParamStore};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{finite_diff_check_coords, GradCheckReport, Tape, Tensor, Var};
use crate::textenc::{self, tokenize_truncate, Vocabulary, COND_PREFIX, TEXT_PREFIX};
use crate::visenc::{self, Branch, ImageTensor, ADALN_PREFIX, VIS_PREFIX};

pub const HEAD_PREFIX: &str = "head.";
pub const CLIP_PREFIX: &str = "clip.";
pub const NUM_OPTIONS: usize = 4;

/// Configuration, vocabulary and named parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// `c_t` (`1×D_T`) per text, valid only while the text encoder is frozen.
pub type TextCache = HashMap<String, Tensor>;

impl Model {
    /// Fresh model. Each component draws from its own substream so that
    /// switching e.g. the fusion strategy leaves the backbone unchanged.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::grammar();
        let mut params = ParamStore::new();
        let sub = |name| SplitMix64::named(seed, name);
        textenc::init_text_encoder(&mut params, config, vocab.len(), &mut sub("init.text"));
        textenc::init_condition_projection(&mut params, config, &mut sub("init.cond"));
        visenc::init_backbone(&mut params, config, &mut sub("init.vis"));
        visenc::init_adapters(&mut params, config);
        fusion::init_fusion(&mut params, config, &mut sub("init.fusion"));
        init_head(&mut params, config, &mut sub("init.head"));
        params.insert("clip.logit_scale", Tensor::vector(vec![(1.0f64 / 0.07).ln()]));
        Ok(Self {
            config: config.clone(),
            vocab,
            params,
        })
    }

    /// The four option logits.
    pub fn logits(&self, image: &ImageTensor, question: &str, options: &[String]) -> Result<Tensor> {
        self.logits_with(&self.config, image, question, options)
    }

    /// Logits under an alternative configuration sharing these parameters,
    /// e.g. with the dynamic branch switched off.
    pub fn logits_with(
        &self,
        cfg: &ModelConfig,
        image: &ImageTensor,
        question: &str,
        options: &[String],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::inference(&self.params);
        let ex = Example {
            image,
            question,
            options,
        };
        let out = forward(&mut tape, &mut binder, cfg, &self.vocab, &ex, &Cached::default(), Tap::None)?;
        tape.value(out.logits).reshape(&[NUM_OPTIONS])
    }

    /// Static, conditioned and fused token matrices for one instruction.
    pub fn features(&self, image: &ImageTensor, question: &str) -> Result<(Tensor, Option<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let mut binder = Binder::inference(&self.params);
        let c_t = text_feature(&mut tape, &mut binder, &self.config, &self.vocab, question, None)?;
        let hat_c = textenc::project_condition(&mut tape, &mut binder, c_t, &self.config)?;
        let b = branches(&mut tape, &mut binder, &self.config, image, hat_c, None, Tap::None)?;
        Ok((
            tape.value(b.y_0).clone(),
            b.y_ct.map(|v| tape.value(v).clone()),
            tape.value(b.y_i).clone(),
        ))
    }

    pub fn text_cache<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Result<TextCache> {
        let mut cache = TextCache::new();
        for t in texts {
            if cache.contains_key(t) {
                continue;
            }
            let mut tape = Tape::new();
            let mut binder = Binder::inference(&self.params);
            let v = text_feature(&mut tape, &mut binder, &self.config, &self.vocab, t, None)?;
            cache.insert(t.to_string(), tape.value(v).clone());
        }
        Ok(cache)
    }
}

fn init_head(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut SplitMix64) {
    let d = cfg.d_vis;
    store.insert("head.query", Tensor::randn(&[1, d], 1.0 / (d as f64).sqrt(), rng));
    nn::init_linear(store, "head.fc1", 2 * d, cfg.head_hidden, rng);
    nn::init_linear(store, "head.fc2", cfg.head_hidden, d, rng);
    // A bias here would shift all four logits equally.
    nn::init_linear_no_bias(store, "head.opt", cfg.d_text, d, rng);
}

/// One multiple-choice query.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub image: &'a ImageTensor,
    pub question: &'a str,
    pub options: &'a [String],
}

/// Precomputed inputs that stand in for frozen sub-networks.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cached<'a> {
    pub text: Option<&'a TextCache>,
    pub y_0: Option<&'a Tensor>,
}

/// Re-enter a branch output as a fresh gradient leaf so that its gradient
/// can be read back after `backward`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    None,
    Static,
    Conditioned,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `1×4`.
    pub logits: Var,
    pub y_0: Var,
    pub y_ct: Option<Var>,
    pub y_i: Var,
    pub hat_c: Var,
}

struct Branches {
    y_0: Var,
    y_ct: Option<Var>,
    y_i: Var,
}

fn text_feature(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    text: &str,
    cache: Option<&TextCache>,
) -> Result<Var> {
    if let Some(t) = cache.and_then(|c| c.get(text)) {
        return Ok(tape.constant(t.clone()));
    }
    let seq = tokenize_truncate(vocab, text, cfg.max_len)?;
    textenc::encode_text(tape, binder, &seq, cfg)
}

fn tap(tape: &mut Tape, v: Var) -> Var {
    let t = tape.value(v).clone();
    tape.leaf(t, true)
}

fn branches(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    image: &ImageTensor,
    hat_c: Var,
    y_0_cached: Option<&Tensor>,
    t: Tap,
) -> Result<Branches> {
    let mut y_0 = match y_0_cached {
        Some(y) => tape.constant(y.clone()),
        None => visenc::encode_static(tape, binder, image, cfg)?,
    };
    if t == Tap::Static {
        y_0 = tap(tape, y_0);
    }
    if !cfg.dynamic_branch {
        if t == Tap::Conditioned {
            return Err(Error::Contract(
                "conditioned branch requested with the dynamic branch disabled".into(),
            ));
        }
        return Ok(Branches {
            y_0,
            y_ct: None,
            y_i: y_0,
        });
    }
    // Without adapters the dynamic branch reproduces the static one.
    let mut y_ct = if cfg.adaln {
        visenc::encode_conditioned(tape, binder, image, hat_c, cfg)?
    } else {
        y_0
    };
    if t == Tap::Conditioned {
        y_ct = tap(tape, y_ct);
    }
    let base = if cfg.static_branch {
        y_0
    } else {
        tape.constant(Tensor::zeros(tape.shape(y_0)))
    };
    let y_i = fusion::fuse_with(tape, binder, y_ct, base, cfg)?;
    Ok(Branches {
        y_0,
        y_ct: Some(y_ct),
        y_i,
    })
}

/// Attention pooling, MLP and option scoring; returns `1×4` logits.
fn answer_head(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    y_i: Var,
    hat_c: Var,
    option_feats: &[Var],
) -> Result<Var> {
    let d = cfg.d_vis;
    let q = binder.var(tape, "head.query")?;
    let yt = tape.transpose(y_i)?;
    let s = tape.matmul(q, yt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let a = tape.softmax_last(s)?;
    let pooled = tape.matmul(a, y_i)?;
    let hat_c = tape.reshape(hat_c, &[1, d])?;
    let h = tape.concat_cols(&[pooled, hat_c])?;
    let h = nn::linear(tape, binder, "head.fc1", h)?;
    let h = tape.gelu(h);
    let answer = nn::linear(tape, binder, "head.fc2", h)?;
    let mut rows = Vec::with_capacity(option_feats.len());
    for &o in option_feats {
        let n = tape.layer_norm_raw(o, cfg.eps)?;
        rows.push(nn::linear_no_bias(tape, binder, "head.opt", n)?);
    }
    let opts = tape.concat_rows(&rows)?;
    let ot = tape.transpose(opts)?;
    tape.matmul(answer, ot)
}

/// Full forward pass on `tape`.
pub fn forward(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    ex: &Example,
    cached: &Cached,
    t: Tap,
) -> Result<ForwardOut> {
    if ex.options.len() != NUM_OPTIONS {
        return Err(Error::Contract(format!(
            "expected {NUM_OPTIONS} options, got {}",
            ex.options.len()
        )));
    }
    let c_t = text_feature(tape, binder, cfg, vocab, ex.question, cached.text)?;
    let hat_c = textenc::project_condition(tape, binder, c_t, cfg)?;
    let b = branches(tape, binder, cfg, ex.image, hat_c, cached.y_0, t)?;
    let opts = ex
        .options
        .iter()
        .map(|o| text_feature(tape, binder, cfg, vocab, o, cached.text))
        .collect::<Result<Vec<_>>>()?;
    let logits = answer_head(tape, binder, cfg, b.y_i, hat_c, &opts)?;
    Ok(ForwardOut {
        logits,
        y_0: b.y_0,
        y_ct: b.y_ct,
        y_i: b.y_i,
        hat_c,
    })
}

/// Index of the largest logit, lowest index on ties.
pub fn predict(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Contract("no logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Trainable and frozen parameter names for one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

/// Stage 0 trains the text encoder and backbone contrastively; stage 1
/// trains adapters, condition projection, fusion and head on top of frozen
/// encoders; stage 2 trains everything except the text encoder body
/// (unless configured otherwise) and the contrastive temperature.
pub fn trainable_params(params: &ParamStore, stage: u8, cfg: &ModelConfig) -> Result<Partition> {
    let prefixes: &[&str] = match stage {
        0 => &[TEXT_PREFIX, VIS_PREFIX, CLIP_PREFIX],
        1 => &[ADALN_PREFIX, COND_PREFIX, FUSION_PREFIX, HEAD_PREFIX],
        2 if cfg.train_text_in_stage2 => &[
            TEXT_PREFIX,
            VIS_PREFIX,
            ADALN_PREFIX,
            COND_PREFIX,
            FUSION_PREFIX,
            HEAD_PREFIX,
        ],
        2 => &[VIS_PREFIX, ADALN_PREFIX, COND_PREFIX, FUSION_PREFIX, HEAD_PREFIX],
        s => return Err(Error::Parameter(format!("unknown stage {s}"))),
    };
    let mut p = Partition {
        trainable: BTreeSet::new(),
        frozen: BTreeSet::new(),
    };
    for name in params.names() {
        if prefixes.iter().any(|pre| name.starts_with(pre)) {
            p.trainable.insert(name.to_string());
        } else {
            p.frozen.insert(name.to_string());
        }
    }
    Ok(p)
}

/// Patch-grid relevance map, max-normalised to `[0, 1]` when nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub branch: Branch,
    pub grid: Tensor,
}

impl SaliencyMap {
    /// `(row, col)` of the largest value, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let d = self.grid.data();
        let i = predict(d).unwrap_or(0);
        (i / self.grid.cols(), i % self.grid.cols())
    }

    pub fn to_pgm(&self, comments: &[String]) -> Result<String> {
        pgm_string(&self.grid, 0.0, 1.0, comments)
    }

    pub fn to_csv(&self, header: Option<&str>) -> Result<String> {
        matrix_csv(&self.grid, header)
    }
}

/// Gradient-times-activation relevance of the chosen branch's final tokens
/// for option `target`: `ReLU(⟨∂logit/∂y_token, y_token⟩)` per patch.
pub fn saliency_map(
    model: &Model,
    image: &ImageTensor,
    question: &str,
    options: &[String],
    target: usize,
    branch: Branch,
) -> Result<SaliencyMap> {
    if target >= NUM_OPTIONS {
        return Err(Error::Index {
            index: target,
            len: NUM_OPTIONS,
        });
    }
    let t = match branch {
        Branch::Static => Tap::Static,
        Branch::Conditioned => Tap::Conditioned,
        Branch::Fused => {
            return Err(Error::Parameter(
                "saliency is defined for the static or conditioned branch".into(),
            ))
        }
    };
    let mut tape = Tape::new();
    let mut binder = Binder::inference(&model.params);
    let ex = Example {
        image,
        question,
        options,
    };
    let out = forward(&mut tape, &mut binder, &model.config, &model.vocab, &ex, &Cached::default(), t)?;
    let logit = tape.slice_cols(out.logits, target, 1)?;
    let logit = tape.sum(logit);
    tape.backward(logit)?;
    let act = match branch {
        Branch::Static => out.y_0,
        _ => out.y_ct.expect("conditioned branch computed"),
    };
    let a = tape.value(act);
    let zeros = Tensor::zeros(a.shape());
    let g = tape.grad(act).unwrap_or(&zeros);
    let rel: Vec<f64> = (0..a.rows())
        .map(|r| {
            let dot: f64 = a.row(r).iter().zip(g.row(r)).map(|(x, y)| x * y).sum();
            dot.max(0.0)
        })
        .collect();
    let max = rel.iter().cloned().fold(0.0, f64::max);
    let rel = if max > 0.0 {
        rel.iter().map(|v| v / max).collect()
    } else {
        rel
    };
    let grid = model.config.grid();
    Ok(SaliencyMap {
        branch,
        grid: Tensor::new(vec![grid, grid], rel)?,
    })
}

/// Zero the head rows that read the pooled visual vector, making every
/// logit independent of the image.
pub fn zero_visual_path(params: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let w = params.get_mut("head.fc1.w")?;
    let cols = w.cols();
    for v in &mut w.data_mut()[..cfg.d_vis * cols] {
        *v = 0.0;
    }
    Ok(())
}

/// Fill every zero-initialised adapter and fusion tensor with small
/// random values so that all paths carry gradient.
pub fn perturb_zero_init(params: &mut ParamStore, std: f64, seed: u64) {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(ADALN_PREFIX) || n.starts_with(FUSION_PREFIX))
        .map(str::to_string)
        .collect();
    for (i, n) in names.iter().enumerate() {
        let mut rng = SplitMix64::new(derive_seed(seed, i as u64));
        let t = params.get_mut(n).expect("listed name");
        if t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::randn(t.shape(), std, &mut rng);
        }
    }
}

/// Cross-entropy of one example against `target`, gradient-checked at
/// `per_tensor` random coordinates of every parameter tensor.
pub fn gradcheck_model(
    model: &Model,
    ex: &Example,
    target: usize,
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| !n.starts_with(CLIP_PREFIX))
        .map(str::to_string)
        .collect();
    let tensors: Vec<Tensor> = names
        .iter()
        .map(|n| model.params.get(n).cloned())
        .collect::<Result<_>>()?;
    let mut rng = SplitMix64::named(seed, "gradcheck");
    let mut coords = Vec::new();
    for (t, p) in tensors.iter().enumerate() {
        for _ in 0..per_tensor.min(p.len()) {
            coords.push((t, rng.below(p.len() as u64) as usize));
        }
    }
    let empty = ParamStore::new();
    finite_diff_check_coords(
        |tape, vars| {
            let mut binder = Binder::inference(&empty);
            for (n, &v) in names.iter().zip(vars) {
                binder.bind(n, v);
            }
            let out = forward(tape, &mut binder, &model.config, &model.vocab, ex, &Cached::default(), Tap::None)?;
            tape.cross_entropy(out.logits, &[target])
        },
        &tensors,
        h,
        &coords,
    )
}
