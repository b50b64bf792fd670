//! Transformer building blocks shared by the text and vision encoders.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Scale and shift applied after a raw layer norm, as tape variables.
/// `scale` already holds `1 + γ`.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub scale: Var,
    pub shift: Var,
}

/// Modulation for the two norm sites of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockModulation {
    pub attn: Modulation,
    pub mlp: Modulation,
}

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut SplitMix64,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// Weight-only linear layer.
pub fn init_linear_no_bias(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut SplitMix64,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
}

pub fn init_zero_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

/// Pre-norm transformer block parameters under `prefix`.
pub fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    mlp_hidden: usize,
    rng: &mut SplitMix64,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    // Keys carry no bias: softmax is invariant to the per-query shift it adds.
    init_linear(store, &format!("{prefix}.attn.q"), d, d, rng);
    init_linear_no_bias(store, &format!("{prefix}.attn.k"), d, d, rng);
    init_linear(store, &format!("{prefix}.attn.v"), d, d, rng);
    init_linear(store, &format!("{prefix}.attn.out"), d, d, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, mlp_hidden, rng);
    init_linear(store, &format!("{prefix}.mlp.fc2"), mlp_hidden, d, rng);
}

/// `x · W + b` for the linear layer stored under `prefix`.
pub fn linear(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = binder.var(tape, &format!("{prefix}.w"))?;
    let b = binder.var(tape, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn linear_no_bias(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = binder.var(tape, &format!("{prefix}.w"))?;
    tape.matmul(x, w)
}

/// Layer norm site: `gain ⊙ LN(x) + bias`, or with a modulation
/// `gain ⊙ ((1 + γ) ⊙ LN(x) + β) + bias`.
pub fn norm_site(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    x: Var,
    eps: f64,
    modulation: Option<Modulation>,
) -> Result<Var> {
    let mut y = tape.layer_norm_raw(x, eps)?;
    if let Some(m) = modulation {
        y = tape.mul_row(y, m.scale)?;
        y = tape.add_row(y, m.shift)?;
    }
    let g = binder.var(tape, &format!("{prefix}.g"))?;
    let b = binder.var(tape, &format!("{prefix}.b"))?;
    let y = tape.mul_row(y, g)?;
    tape.add_row(y, b)
}

/// Scaled dot-product attention over `heads` column groups of already
/// projected queries (`Nq×D`), keys and values (`Nk×D`).
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.value(q).cols();
    if d % heads != 0 {
        return Err(Error::Parameter(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax_last(s)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

pub fn self_attention(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, binder, &format!("{prefix}.q"), x)?;
    let k = linear_no_bias(tape, binder, &format!("{prefix}.k"), x)?;
    let v = linear(tape, binder, &format!("{prefix}.v"), x)?;
    let a = attend(tape, q, k, v, heads)?;
    linear(tape, binder, &format!("{prefix}.out"), a)
}

pub fn mlp(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, binder, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, binder, &format!("{prefix}.fc2"), h)
}

/// `x += Attn(norm1(x)); x += MLP(norm2(x))`.
pub fn block_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    x: Var,
    heads: usize,
    eps: f64,
    modulation: Option<BlockModulation>,
) -> Result<Var> {
    let h = norm_site(
        tape,
        binder,
        &format!("{prefix}.ln1"),
        x,
        eps,
        modulation.map(|m| m.attn),
    )?;
    let a = self_attention(tape, binder, &format!("{prefix}.attn"), h, heads)?;
    let x = tape.add(x, a)?;
    let h = norm_site(
        tape,
        binder,
        &format!("{prefix}.ln2"),
        x,
        eps,
        modulation.map(|m| m.mlp),
    )?;
    let m = mlp(tape, binder, &format!("{prefix}.mlp"), h)?;
    tape.add(x, m)
}
