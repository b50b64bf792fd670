//! Vision transformer evaluated as the static branch and as the
//! instruction-conditioned branch over one shared weight set.
//!
//! The conditioned branch replaces both norm sites of every block with
//! `gain ⊙ ((1 + γ) ⊙ LN(x) + β) + bias`, where `(γ, β)` come from a
//! per-block linear map of the conditioning vector. The maps start at zero,
//! so a fresh conditioned branch computes exactly what the static one does.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, BlockModulation, Modulation};
use crate::params::{Binder, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

pub const VIS_PREFIX: &str = "vis.";
pub const ADALN_PREFIX: &str = "adaln.";

/// `channels × height × width` image with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![channels, height, width], data)?)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Shape(format!(
                "image must be channels×height×width, got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Static,
    Conditioned,
    Fused,
}

/// `N_I × D_I` token matrix tagged with the branch that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub tokens: Tensor,
    pub branch: Branch,
}

/// Per-block modulation parameters `(γ_attn, β_attn, γ_mlp, β_mlp)`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionParams {
    pub gamma_attn: Var,
    pub beta_attn: Var,
    pub gamma_mlp: Var,
    pub beta_mlp: Var,
}

pub fn init_backbone(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut SplitMix64) {
    let d = cfg.d_vis;
    nn::init_linear(store, "vis.patch", cfg.patch_dim(), d, rng);
    store.insert("vis.pos", Tensor::randn(&[cfg.num_patches(), d], 1.0, rng));
    for l in 0..cfg.vis_layers {
        nn::init_block(store, &format!("vis.blocks.{l}"), d, d * cfg.mlp_ratio, rng);
    }
    nn::init_layer_norm(store, "vis.ln_f", d);
}

/// Zero-initialised adapters: one `D_I → 4·D_I` map per block, plus one
/// `D_I → 2·D_I` map for the final norm when it is modulated.
pub fn init_adapters(store: &mut ParamStore, cfg: &ModelConfig) {
    let d = cfg.d_vis;
    for l in 0..cfg.vis_layers {
        nn::init_zero_linear(store, &format!("adaln.{l}"), d, 4 * d);
    }
    if cfg.modulate_final_norm {
        nn::init_zero_linear(store, "adaln.final", d, 2 * d);
    }
}

/// Flatten non-overlapping `P×P` patches (row-major over patches, channel
/// fastest within a pixel) into an `N_I × P²C` matrix.
pub fn patch_matrix(image: &ImageTensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}×{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        data.push(image.at(ch, py * patch + y, px * patch + x));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data)
}

/// Patch embedding plus learned positional embedding.
pub fn patchify(
    tape: &mut Tape,
    binder: &mut Binder,
    image: &ImageTensor,
    patch: usize,
) -> Result<Var> {
    let patches = tape.constant(patch_matrix(image, patch)?);
    let x = nn::linear(tape, binder, "vis.patch", patches)?;
    let pos = binder.var(tape, "vis.pos")?;
    if tape.shape(pos) != tape.shape(x) {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(pos).to_vec(),
        });
    }
    tape.add(x, pos)
}

/// `(1 + γ) ⊙ LN(x) + β` over the last axis.
pub fn adaln_modulate(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let y = tape.layer_norm_raw(x, eps)?;
    let scale = tape.add_scalar(gamma, 1.0);
    let y = tape.mul_row(y, scale)?;
    tape.add_row(y, beta)
}

/// Split block `block`'s adapter output on `cond` (`1×D_I`) into its four
/// modulation vectors.
pub fn condition_params(
    tape: &mut Tape,
    binder: &mut Binder,
    cond: Var,
    block: usize,
) -> Result<ConditionParams> {
    let d = tape.value(cond).cols();
    let out = nn::linear(tape, binder, &format!("adaln.{block}"), cond)?;
    if tape.value(out).cols() != 4 * d {
        return Err(Error::Dimension {
            op: "condition_params",
            lhs: tape.shape(cond).to_vec(),
            rhs: tape.shape(out).to_vec(),
        });
    }
    Ok(ConditionParams {
        gamma_attn: tape.slice_cols(out, 0, d)?,
        beta_attn: tape.slice_cols(out, d, d)?,
        gamma_mlp: tape.slice_cols(out, 2 * d, d)?,
        beta_mlp: tape.slice_cols(out, 3 * d, d)?,
    })
}

fn to_modulation(tape: &mut Tape, gamma: Var, beta: Var) -> Modulation {
    Modulation {
        scale: tape.add_scalar(gamma, 1.0),
        shift: beta,
    }
}

fn encode(
    tape: &mut Tape,
    binder: &mut Binder,
    image: &ImageTensor,
    cfg: &ModelConfig,
    cond: Option<Var>,
) -> Result<Var> {
    if let Some(c) = cond {
        if tape.value(c).len() != cfg.d_vis {
            return Err(Error::Dimension {
                op: "encode_conditioned",
                lhs: vec![cfg.d_vis],
                rhs: tape.shape(c).to_vec(),
            });
        }
    }
    let cond = match cond {
        Some(c) => Some(tape.reshape(c, &[1, cfg.d_vis])?),
        None => None,
    };
    let mut x = patchify(tape, binder, image, cfg.patch)?;
    for l in 0..cfg.vis_layers {
        let modulation = match cond {
            Some(c) => {
                let p = condition_params(tape, binder, c, l)?;
                Some(BlockModulation {
                    attn: to_modulation(tape, p.gamma_attn, p.beta_attn),
                    mlp: to_modulation(tape, p.gamma_mlp, p.beta_mlp),
                })
            }
            None => None,
        };
        x = nn::block_forward(
            tape,
            binder,
            &format!("vis.blocks.{l}"),
            x,
            cfg.vis_heads,
            cfg.eps,
            modulation,
        )?;
    }
    let final_mod = match cond {
        Some(c) if cfg.modulate_final_norm => {
            let out = nn::linear(tape, binder, "adaln.final", c)?;
            let g = tape.slice_cols(out, 0, cfg.d_vis)?;
            let b = tape.slice_cols(out, cfg.d_vis, cfg.d_vis)?;
            Some(to_modulation(tape, g, b))
        }
        _ => None,
    };
    nn::norm_site(tape, binder, "vis.ln_f", x, cfg.eps, final_mod)
}

/// Static branch `y_0`: the plain pre-norm ViT.
pub fn encode_static(
    tape: &mut Tape,
    binder: &mut Binder,
    image: &ImageTensor,
    cfg: &ModelConfig,
) -> Result<Var> {
    encode(tape, binder, image, cfg, None)
}

/// Conditioned branch `y_ct`: the same weights with every block's norm
/// sites modulated by the adapters applied to `cond` (length `D_I`).
pub fn encode_conditioned(
    tape: &mut Tape,
    binder: &mut Binder,
    image: &ImageTensor,
    cond: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    encode(tape, binder, image, cfg, Some(cond))
}

/// Untracked static features.
pub fn static_features(
    params: &ParamStore,
    image: &ImageTensor,
    cfg: &ModelConfig,
) -> Result<VisualFeatures> {
    let mut tape = Tape::new();
    let mut binder = Binder::inference(params);
    let y = encode_static(&mut tape, &mut binder, image, cfg)?;
    Ok(VisualFeatures {
        tokens: tape.value(y).clone(),
        branch: Branch::Static,
    })
}

/// Untracked conditioned features for conditioning vector `cond`.
pub fn conditioned_features(
    params: &ParamStore,
    image: &ImageTensor,
    cond: &Tensor,
    cfg: &ModelConfig,
) -> Result<VisualFeatures> {
    let mut tape = Tape::new();
    let mut binder = Binder::inference(params);
    let c = tape.constant(cond.clone());
    let y = encode_conditioned(&mut tape, &mut binder, image, c, cfg)?;
    Ok(VisualFeatures {
        tokens: tape.value(y).clone(),
        branch: Branch::Conditioned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn setup() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        init_backbone(&mut store, &cfg, &mut rng);
        init_adapters(&mut store, &cfg);
        (cfg, store)
    }

    fn random_image(seed: u64) -> ImageTensor {
        let mut rng = SplitMix64::new(seed);
        ImageTensor::from_tensor(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn patch_count_and_divisibility() {
        let img = ImageTensor::new(1, 8, 8, vec![0.5; 64]).unwrap();
        assert_eq!(patch_matrix(&img, 4).unwrap().shape(), &[4, 16]);
        let bad = ImageTensor::new(1, 9, 8, vec![0.5; 72]).unwrap();
        assert!(matches!(patch_matrix(&bad, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn patch_layout_is_channel_fastest() {
        let mut data = vec![0.0; 2 * 4 * 4];
        // channel 1, pixel (0, 1) sits at flat position (0*2+1)*2+1 = 3 of patch 0
        data[16 + 1] = 7.0;
        let img = ImageTensor::new(2, 4, 4, data).unwrap();
        let m = patch_matrix(&img, 2).unwrap();
        assert_eq!(m.row(0)[3], 7.0);
    }

    #[test]
    fn zero_image_gives_projection_bias() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        init_backbone(&mut store, &cfg, &mut rng);
        *store.get_mut("vis.pos").unwrap() = Tensor::zeros(&[16, 32]);
        let bias = Tensor::randn(&[32], 1.0, &mut rng);
        *store.get_mut("vis.patch.b").unwrap() = bias.clone();
        let img = ImageTensor::new(3, 16, 16, vec![0.0; 768]).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::inference(&store);
        let x = patchify(&mut tape, &mut b, &img, 4).unwrap();
        for r in 0..16 {
            assert_eq!(tape.value(x).row(r), bias.data());
        }
    }

    #[test]
    fn adaln_modulate_examples() {
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(3);
        let x = tape.constant(Tensor::randn(&[5, 6], 1.0, &mut rng));
        let zero = tape.constant(Tensor::zeros(&[6]));
        let y = adaln_modulate(&mut tape, x, zero, zero, 1e-5).unwrap();
        let ln = tape.layer_norm_raw(x, 1e-5).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(ln)));

        let minus_one = tape.constant(Tensor::full(&[6], -1.0));
        let b = tape.constant(Tensor::randn(&[6], 1.0, &mut rng));
        let y = adaln_modulate(&mut tape, x, minus_one, b, 1e-5).unwrap();
        for r in 0..5 {
            assert_eq!(tape.value(y).row(r), tape.value(b).data());
        }

        let x3 = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let one = tape.constant(Tensor::ones(&[3]));
        let z3 = tape.constant(Tensor::zeros(&[3]));
        let y = adaln_modulate(&mut tape, x3, one, z3, 1e-12).unwrap();
        let expect = [-2.4495, 0.0, 2.4495];
        for (a, e) in tape.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-3);
        }
    }

    #[test]
    fn condition_params_zero_init_linear_and_shapes() {
        let (_cfg, mut store) = setup();
        let mut rng = SplitMix64::new(4);
        let c = Tensor::randn(&[1, 32], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut b = Binder::inference(&store);
        let cv = tape.constant(c.clone());
        let p = condition_params(&mut tape, &mut b, cv, 0).unwrap();
        for v in [p.gamma_attn, p.beta_attn, p.gamma_mlp, p.beta_mlp] {
            assert_eq!(tape.shape(v), &[1, 32]);
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }

        *store.get_mut("adaln.1.w").unwrap() = Tensor::randn(&[32, 128], 0.1, &mut rng);
        let mut tape = Tape::new();
        let mut b = Binder::inference(&store);
        let c1 = tape.constant(c.clone());
        let c2 = tape.constant(c.map(|v| 2.0 * v));
        let p1 = condition_params(&mut tape, &mut b, c1, 1).unwrap();
        let p2 = condition_params(&mut tape, &mut b, c2, 1).unwrap();
        for (a, b2) in [(p1.gamma_attn, p2.gamma_attn), (p1.beta_mlp, p2.beta_mlp)] {
            let (va, vb) = (tape.value(a), tape.value(b2));
            for (x, y) in va.data().iter().zip(vb.data()) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conditioned_equals_static_at_init() {
        let (cfg, store) = setup();
        let mut rng = SplitMix64::new(5);
        for s in 0..3 {
            let img = random_image(s);
            let y0 = static_features(&store, &img, &cfg).unwrap();
            assert_eq!(y0.tokens.shape(), &[16, 32]);
            let c = Tensor::randn(&[32], 1.0, &mut rng);
            let yc = conditioned_features(&store, &img, &c, &cfg).unwrap();
            assert!(yc.tokens.bit_eq(&y0.tokens));
            assert_eq!(yc.branch, Branch::Conditioned);
        }
    }

    #[test]
    fn static_branch_deterministic_and_ignores_adapters() {
        let (cfg, mut store) = setup();
        let img = random_image(9);
        let a = static_features(&store, &img, &cfg).unwrap();
        let b = static_features(&store, &img, &cfg).unwrap();
        assert!(a.tokens.bit_eq(&b.tokens));
        let mut rng = SplitMix64::new(10);
        *store.get_mut("adaln.0.w").unwrap() = Tensor::randn(&[32, 128], 1.0, &mut rng);
        let c = static_features(&store, &img, &cfg).unwrap();
        assert!(a.tokens.bit_eq(&c.tokens));
    }

    #[test]
    fn nonzero_adapters_make_features_instruction_dependent() {
        let (cfg, mut store) = setup();
        let mut rng = SplitMix64::new(11);
        for l in 0..cfg.vis_layers {
            *store.get_mut(&format!("adaln.{l}.w")).unwrap() =
                Tensor::randn(&[32, 128], 0.05, &mut rng);
        }
        let img = random_image(12);
        let c1 = Tensor::randn(&[32], 1.0, &mut rng);
        let c2 = Tensor::randn(&[32], 1.0, &mut rng);
        let y1 = conditioned_features(&store, &img, &c1, &cfg).unwrap();
        let y2 = conditioned_features(&store, &img, &c2, &cfg).unwrap();
        assert!(y1.tokens.max_abs_diff(&y2.tokens) > 0.0);
    }

    #[test]
    fn gradient_flows_to_adapters_not_frozen_backbone() {
        let (cfg, mut store) = setup();
        let mut rng = SplitMix64::new(13);
        for l in 0..cfg.vis_layers {
            *store.get_mut(&format!("adaln.{l}.w")).unwrap() =
                Tensor::randn(&[32, 128], 0.05, &mut rng);
        }
        let trainable: BTreeSet<String> = store
            .names()
            .filter(|n| n.starts_with(ADALN_PREFIX))
            .map(str::to_string)
            .collect();
        let mut tape = Tape::new();
        let mut b = Binder::training(&store, &trainable);
        let c = tape.constant(Tensor::randn(&[32], 1.0, &mut rng));
        let y = encode_conditioned(&mut tape, &mut b, &random_image(14), c, &cfg).unwrap();
        let w = tape.constant(Tensor::randn(&[16, 32], 1.0, &mut rng));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let grads = b.grads(&tape);
        assert_eq!(grads.len(), trainable.len());
        assert!(grads["adaln.0.w"].norm() > 0.0);
        assert!(grads["adaln.3.b"].norm() > 0.0);
        assert!(grads.keys().all(|k| k.starts_with(ADALN_PREFIX)));
    }

    #[test]
    fn wrong_condition_width_is_rejected() {
        let (cfg, store) = setup();
        let r = conditioned_features(&store, &random_image(1), &Tensor::zeros(&[7]), &cfg);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
