//! Loss terms: distillation cosine loss, masked l1 reconstruction, closed
//! form KL, cross-entropy, and goal-regression MSEs, plus the weighted
//! total with its per-term breakdown.

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Loss weights (training objective defaults).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rot: f64,
    pub pose: f64,
    pub mesh: f64,
    pub kl: f64,
    pub action: f64,
    pub center: f64,
    pub bbox: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rot: 1.0,
            pose: 10.0,
            mesh: 10.0,
            kl: 0.1,
            action: 0.5,
            center: 0.1,
            bbox: 0.1,
            class: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rot, self.pose, self.mesh, self.kl, self.action, self.center, self.bbox,
            self.class,
        ];
        if all.iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-term values of one total-loss evaluation. The translation term is
/// unweighted; every other term is reported unweighted with its lambda
/// applied only in `total`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub trans: f64,
    pub rot: f64,
    pub pose: f64,
    pub mesh: f64,
    pub kl: f64,
    pub action: f64,
    pub center: f64,
    pub bbox: f64,
    pub class: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 10] = [
        "total", "trans", "rot", "pose", "mesh", "kl", "action", "center", "bbox", "class",
    ];

    pub fn as_row(&self) -> [f64; 10] {
        [
            self.total, self.trans, self.rot, self.pose, self.mesh, self.kl, self.action,
            self.center, self.bbox, self.class,
        ]
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        for (a, b) in [
            (&mut self.total, other.total),
            (&mut self.trans, other.trans),
            (&mut self.rot, other.rot),
            (&mut self.pose, other.pose),
            (&mut self.mesh, other.mesh),
            (&mut self.kl, other.kl),
            (&mut self.action, other.action),
            (&mut self.center, other.center),
            (&mut self.bbox, other.bbox),
            (&mut self.class, other.class),
        ] {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.total *= s;
        self.trans *= s;
        self.rot *= s;
        self.pose *= s;
        self.mesh *= s;
        self.kl *= s;
        self.action *= s;
        self.center *= s;
        self.bbox *= s;
        self.class *= s;
    }
}

/// Distillation loss: mean over covered points of (1 - cos(student, target)).
pub fn loss_distill(student: &Var, targets: &Var, coverage: &[bool]) -> Result<Var> {
    if student.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_distill",
            lhs: student.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    if !coverage.iter().any(|&c| c) {
        return Err(Error::InvalidArgument(
            "loss_distill: no covered points".into(),
        ));
    }
    let s = student.masked_select_rows(coverage)?;
    let t = targets.masked_select_rows(coverage)?;
    s.cosine_rows(&t)?.mean_all()?.neg()?.add_scalar(1.0)
}

/// Mean absolute error over valid rows (masked l1; average over frame and
/// feature dims equally).
pub fn l1_masked(pred: &Var, target: &Var, valid: &[bool]) -> Result<Var> {
    if !valid.iter().any(|&v| v) {
        return Err(Error::InvalidArgument("l1_masked: empty mask".into()));
    }
    let p = pred.masked_select_rows(valid)?;
    let t = target.masked_select_rows(valid)?;
    p.sub(&t)?.abs()?.mean_all()
}

/// Closed-form KL of N(mu, diag sigma^2) against the standard normal:
/// 0.5 * sum(sigma^2 + mu^2 - 1 - log sigma^2).
pub fn loss_kl(mu: &Var, logvar: &Var) -> Result<Var> {
    let var = logvar.exp()?;
    var.add(&mu.mul(mu)?)?
        .add_scalar(-1.0)?
        .sub(logvar)?
        .sum_all()?
        .scale(0.5)
}

/// Cross-entropy of a single-row logit tensor against a class index.
pub fn cross_entropy(logits: &Var, target: usize) -> Result<Var> {
    let n = logits.shape()[1];
    if target >= n {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy target {target} out of range 0..{n}"
        )));
    }
    logits
        .log_softmax()?
        .slice(&[(0, 1), (target, target + 1)])?
        .sum_all()?
        .neg()
}

/// Mean squared error between equal-shape rows.
pub fn mse(pred: &Var, target: &Var) -> Result<Var> {
    let d = pred.sub(target)?;
    d.mul(&d)?.mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use rand::Rng;

    #[test]
    fn distill_examples() {
        let a = Var::constant(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap());
        // identical features -> 0
        let l = loss_distill(&a, &a, &[true, true]).unwrap();
        assert!(l.value().item().abs() < 1e-12);
        // orthogonal -> 1
        let b = Var::constant(Tensor::new(vec![0.0, 1.0, 1.0, 0.0], &[2, 2]).unwrap());
        let l = loss_distill(&a, &b, &[true, true]).unwrap();
        assert!((l.value().item() - 1.0).abs() < 1e-12);
        // negated -> 2
        let c = Var::constant(Tensor::new(vec![-1.0, 0.0, 0.0, -1.0], &[2, 2]).unwrap());
        let l = loss_distill(&a, &c, &[true, true]).unwrap();
        assert!((l.value().item() - 2.0).abs() < 1e-12);
        // no coverage rejected
        assert!(loss_distill(&a, &b, &[false, false]).is_err());
    }

    #[test]
    fn kl_closed_form_examples() {
        // Z=1, mu=1, sigma^2=1 -> 0.5
        let mu = Var::constant(Tensor::new(vec![1.0], &[1, 1]).unwrap());
        let lv = Var::constant(Tensor::zeros(&[1, 1]));
        assert!((loss_kl(&mu, &lv).unwrap().value().item() - 0.5).abs() < 1e-12);
        // mu=0, sigma^2=e -> (e - 2) / 2
        let mu = Var::constant(Tensor::zeros(&[1, 1]));
        let lv = Var::constant(Tensor::ones(&[1, 1]));
        let expect = 0.5 * (std::f64::consts::E - 2.0);
        assert!((loss_kl(&mu, &lv).unwrap().value().item() - expect).abs() < 1e-12);
        // zero iff mu=0, logvar=0
        let z = loss_kl(
            &Var::constant(Tensor::zeros(&[1, 4])),
            &Var::constant(Tensor::zeros(&[1, 4])),
        )
        .unwrap();
        assert_eq!(z.value().item(), 0.0);
    }

    #[test]
    fn kl_nonnegative_property() {
        let mut rng = crate::rng::stream(3, "klprop", &[]);
        for _ in 0..100 {
            let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let l = loss_kl(
                &Var::constant(Tensor::from_raw(mu, vec![1, 4])),
                &Var::constant(Tensor::from_raw(lv, vec![1, 4])),
            )
            .unwrap();
            assert!(l.value().item() >= -1e-12);
        }
    }

    #[test]
    fn kl_grad_check() {
        let mut rng = crate::rng::stream(5, "klgrad", &[]);
        for _ in 0..5 {
            let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
            let lv: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
            let report = grad_check(
                |v| loss_kl(&v[0], &v[1]),
                &[
                    Tensor::from_raw(mu.clone(), vec![1, 6]),
                    Tensor::from_raw(lv.clone(), vec![1, 6]),
                ],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // uniform over 4 -> ln 4; over 9 -> ln 9
        let l4 = cross_entropy(&Var::constant(Tensor::zeros(&[1, 4])), 2).unwrap();
        assert!((l4.value().item() - 4f64.ln()).abs() < 1e-12);
        let l9 = cross_entropy(&Var::constant(Tensor::zeros(&[1, 9])), 0).unwrap();
        assert!((l9.value().item() - 9f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&Var::constant(Tensor::zeros(&[1, 4])), 4).is_err());
    }

    #[test]
    fn l1_masked_ignores_padded_rows() {
        let p = Var::constant(Tensor::new(vec![1.0, 2.0, 100.0, 200.0], &[2, 2]).unwrap());
        let t = Var::constant(Tensor::new(vec![0.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap());
        let l = l1_masked(&p, &t, &[true, false]).unwrap();
        assert!((l.value().item() - 1.5).abs() < 1e-12);
        assert!(l1_masked(&p, &t, &[false, false]).is_err());
    }
}
