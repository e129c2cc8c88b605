//! Finite-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    /// (tensor index, coordinate) of the worst disagreement
    pub worst: Option<(usize, usize)>,
    /// coordinates where a perturbed evaluation came out non-finite
    pub non_finite: Vec<(usize, usize)>,
}

/// Compare analytic gradients of a scalar function against central differences.
///
/// `f` is evaluated once on a tape for the analytic gradient and twice per
/// coordinate (at x +- h) without tracking for the numeric one.
pub fn grad_check<F>(f: F, points: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("grad_check step must be > 0".into()));
    }
    let tape = Tape::new();
    let leaves: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&leaves)?;
    if y.value().numel() != 1 {
        return Err(Error::InvalidShape {
            op: "grad_check",
            shape: y.value().shape().to_vec(),
            reason: "function must be scalar-valued".into(),
        });
    }
    let grads = y.backward()?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.wrt_or_zeros(l)).collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let vars: Vec<Var> = pts.iter().map(|t| Var::constant(t.clone())).collect();
        Ok(f(&vars)?.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        non_finite: Vec::new(),
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (ti, t) in points.iter().enumerate() {
        for ci in 0..t.numel() {
            let base = t.data().to_vec();
            let mut plus = base.clone();
            plus[ci] += h;
            let mut minus = base;
            minus[ci] -= h;
            work[ti] = Tensor::from_raw(plus, t.shape().to_vec());
            let fp = eval(&work)?;
            work[ti] = Tensor::from_raw(minus, t.shape().to_vec());
            let fm = eval(&work)?;
            work[ti] = t.clone();
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite.push((ti, ci));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}
