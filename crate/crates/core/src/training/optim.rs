use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per trainable tensor plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW update of `p` in place. `t` is the 1-based step used for bias
/// correction; decay is decoupled: `p ← p − lr·wd·p`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    hp: &AdamHyper,
    wd: f64,
) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
        return Err(Error::Dimension {
            op: "adamw_step",
            lhs: p.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    if t == 0 {
        return Err(Error::Parameter("adam step counter starts at 1".into()));
    }
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    let (pd, gd) = (p.data_mut(), g.data());
    let (md, vd) = (m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gd[i];
        vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gd[i] * gd[i];
        let mh = md[i] / c1;
        let vh = vd[i] / c2;
        pd[i] -= lr * wd * pd[i];
        pd[i] -= lr * mh / (vh.sqrt() + hp.eps);
    }
    Ok(())
}

impl OptimizerState {
    /// Advance the step counter and update every tensor in `grads`.
    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        wd: f64,
        hp: &AdamHyper,
    ) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            adamw_step(p, g, m, v, self.step, lr, hp, wd)?;
        }
        Ok(())
    }

    pub fn shapes_match(&self, params: &ParamStore) -> bool {
        self.m.iter().chain(&self.v).all(|(n, t)| {
            params.get(n).map(|p| p.shape() == t.shape()).unwrap_or(false)
        })
    }
}
