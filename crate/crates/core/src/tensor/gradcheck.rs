use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), track))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    if !v.item().is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    Ok((tape, vars, loss))
}

/// Compare reverse-mode gradients of `f` against central differences on
/// every coordinate of every parameter tensor. Returns the maximum of
/// `|a − b| / max(|a|, |b|, 1e−8)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    Ok(finite_diff_check_coords(f, params, h, &coords)?.max_rel_error)
}

/// Same as [`finite_diff_check`] restricted to the listed
/// `(tensor index, flat coordinate)` pairs.
pub fn finite_diff_check_coords<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step h must be > 0, got {h}")));
    }
    let (mut tape, vars, loss) = eval(&f, params, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.grad(v).cloned()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = params.to_vec();
    for &(t, i) in coords {
        if t >= params.len() {
            return Err(Error::Index {
                index: t,
                len: params.len(),
            });
        }
        if i >= params[t].len() {
            return Err(Error::Index {
                index: i,
                len: params[t].len(),
            });
        }
        let orig = params[t].data()[i];
        work[t].data_mut()[i] = orig + h;
        let (tp, _, lp) = eval(&f, &work, false)?;
        let fp = tp.value(lp).item();
        work[t].data_mut()[i] = orig - h;
        let (tm, _, lm) = eval(&f, &work, false)?;
        let fm = tm.value(lm).item();
        work[t].data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[t].as_ref().map_or(0.0, |g| g.data()[i]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((t, i));
        }
    }
    Ok(report)
}
