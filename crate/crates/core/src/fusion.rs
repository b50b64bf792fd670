//! Dual-branch fusion of static and conditioned tokens.
//!
//! Every strategy starts as an exact identity on the static tokens: the
//! default projection `Z` is zero, the Zero-FFN form has a zero output
//! layer, and the cross-attention variant has a zero output projection.

use crate::config::{FusionConfig, FusionStrategy, ModelConfig};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binder, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Var};

pub const FUSION_PREFIX: &str = "fusion.";

pub fn init_fusion(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut SplitMix64) {
    let d = cfg.d_vis;
    let f = &cfg.fusion;
    if f.zero_ffn {
        nn::init_linear(store, "fusion.z1", d, f.zero_ffn_hidden, rng);
        nn::init_zero_linear(store, "fusion.z2", f.zero_ffn_hidden, d);
    } else {
        nn::init_zero_linear(store, "fusion.z", d, d);
    }
    if f.strategy == FusionStrategy::Cross {
        nn::init_linear(store, "fusion.cross.q", d, d, rng);
        nn::init_linear_no_bias(store, "fusion.cross.k", d, d, rng);
        nn::init_linear(store, "fusion.cross.v", d, d, rng);
        nn::init_zero_linear(store, "fusion.cross.out", d, d);
    }
}

fn check_pair(tape: &Tape, y_ct: Var, y_0: Var) -> Result<()> {
    if tape.shape(y_ct) != tape.shape(y_0) || tape.value(y_0).rank() != 2 {
        return Err(Error::Dimension {
            op: "fuse",
            lhs: tape.shape(y_ct).to_vec(),
            rhs: tape.shape(y_0).to_vec(),
        });
    }
    Ok(())
}

/// `Z(LN(y_ct))` with the linear or Zero-FFN form of `Z`.
pub fn project_conditioned(
    tape: &mut Tape,
    binder: &mut Binder,
    y_ct: Var,
    fusion: &FusionConfig,
    eps: f64,
) -> Result<Var> {
    let n = tape.layer_norm_raw(y_ct, eps)?;
    if fusion.zero_ffn {
        let h = nn::linear(tape, binder, "fusion.z1", n)?;
        let h = tape.gelu(h);
        nn::linear(tape, binder, "fusion.z2", h)
    } else {
        nn::linear(tape, binder, "fusion.z", n)
    }
}

/// `y_I = Z(LN(y_ct)) + y_0`. With `static_branch = false` the static term
/// is dropped, giving `Z(LN(y_ct))`.
pub fn fuse(
    tape: &mut Tape,
    binder: &mut Binder,
    y_ct: Var,
    y_0: Var,
    fusion: &FusionConfig,
    eps: f64,
    static_branch: bool,
) -> Result<Var> {
    check_pair(tape, y_ct, y_0)?;
    let z = project_conditioned(tape, binder, y_ct, fusion, eps)?;
    if static_branch {
        tape.add(z, y_0)
    } else {
        Ok(z)
    }
}

/// Interleave static tokens with projected conditioned tokens:
/// `[y_0[0], Z(LN(y_ct[0])), y_0[1], …]`, `2·N_I` rows.
pub fn fuse_mof(
    tape: &mut Tape,
    binder: &mut Binder,
    y_ct: Var,
    y_0: Var,
    fusion: &FusionConfig,
    eps: f64,
) -> Result<Var> {
    check_pair(tape, y_ct, y_0)?;
    let n = tape.shape(y_0)[0];
    let z = project_conditioned(tape, binder, y_ct, fusion, eps)?;
    let both = tape.concat_rows(&[y_0, z])?;
    let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    tape.gather_rows(both, &order)
}

/// `y_I = y_0 + W_out · CrossAttn(q = y_0, kv = y_ct) + b_out`.
pub fn fuse_cross(
    tape: &mut Tape,
    binder: &mut Binder,
    y_ct: Var,
    y_0: Var,
    heads: usize,
) -> Result<Var> {
    check_pair(tape, y_ct, y_0)?;
    let q = nn::linear(tape, binder, "fusion.cross.q", y_0)?;
    let k = nn::linear_no_bias(tape, binder, "fusion.cross.k", y_ct)?;
    let v = nn::linear(tape, binder, "fusion.cross.v", y_ct)?;
    let a = nn::attend(tape, q, k, v, heads)?;
    let o = nn::linear(tape, binder, "fusion.cross.out", a)?;
    tape.add(y_0, o)
}

/// Dispatch on the configured strategy.
pub fn fuse_with(
    tape: &mut Tape,
    binder: &mut Binder,
    y_ct: Var,
    y_0: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    match cfg.fusion.strategy {
        FusionStrategy::Adaln => fuse(tape, binder, y_ct, y_0, &cfg.fusion, cfg.eps, cfg.static_branch),
        FusionStrategy::Mof => fuse_mof(tape, binder, y_ct, y_0, &cfg.fusion, cfg.eps),
        FusionStrategy::Cross => fuse_cross(tape, binder, y_ct, y_0, cfg.vis_heads),
    }
}
