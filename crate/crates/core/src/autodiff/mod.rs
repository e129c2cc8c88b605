//! Reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shapes, Tensor};

pub(crate) use tape::aa_to_mat_forward;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::Rng;

    fn randt(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_raw(data, shape.to_vec())
    }

    /// Keep entries away from relu/abs kinks by at least `margin`.
    fn randt_away_from_zero(shape: &[usize], rng: &mut impl Rng, margin: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let mut v: f64 = rng.random_range(-2.0..2.0);
                if v.abs() < margin {
                    v = margin.copysign(if rng.random_bool(0.5) { 1.0 } else { -1.0 });
                }
                v
            })
            .collect();
        Tensor::from_raw(data, shape.to_vec())
    }

    #[test]
    fn square_gradient() {
        // d(x^2)/dx at x=3 is 6
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_dead_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = x.relu().unwrap().sum_all().unwrap();
        assert_eq!(y.value().item(), 0.0);
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn shared_parent_accumulates() {
        // f(x) = x + x has gradient exactly 2
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let y = x.add(&x).unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().item(), 2.0);
    }

    #[test]
    fn cross_entropy_analytic_identity() {
        // d(CE(softmax(l), onehot_c))/dl = softmax(l) - onehot_c
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![0.3, -1.2, 2.0, 0.7], &[1, 4]).unwrap());
        let lsm = logits.log_softmax().unwrap();
        let c = 2usize;
        let loss = lsm.slice(&[(0, 1), (c, c + 1)]).unwrap().sum_all().unwrap().neg().unwrap();
        let g = loss.backward().unwrap();
        let got = g.wrt(&logits).unwrap();
        let sm = logits.softmax().unwrap();
        for i in 0..4 {
            let expect = sm.value().data()[i] - if i == c { 1.0 } else { 0.0 };
            assert!((got.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let a = Var::constant(Tensor::scalar(2.0));
        let b = Var::constant(Tensor::scalar(3.0));
        let c = a.mul(&b).unwrap();
        assert!(!c.is_tracked());
        assert_eq!(c.value().item(), 6.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = x.relu().unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn matmul_identity_case() {
        let eye = Var::constant(Tensor::new(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        )
        .unwrap());
        let a = Var::constant(Tensor::new((0..9).map(|v| v as f64 - 4.0).collect(), &[3, 3]).unwrap());
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.value(), a.value());
    }

    #[test]
    fn cosine_self_is_one() {
        let v = Var::constant(Tensor::new(vec![0.3, -1.0, 2.5], &[3]).unwrap());
        let c = v.cosine(&v).unwrap();
        assert!((c.value().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn determinism_bit_identical() {
        let mut rng = crate::rng::stream(11, "det", &[]);
        let a = randt(&[4, 4], &mut rng);
        let b = randt(&[4, 4], &mut rng);
        let run = || -> (Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let x = tape.leaf(a.clone());
            let w = tape.leaf(b.clone());
            let y = x.matmul(&w).unwrap().tanh().unwrap().mean_all().unwrap();
            let g = y.backward().unwrap();
            (
                y.value().data().to_vec(),
                g.wrt(&x).unwrap().data().to_vec(),
            )
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }

    /// grad_check on every primitive at 10 random points, rel err < 1e-6.
    #[test]
    fn primitives_pass_grad_check() {
        type Case = (
            &'static str,
            Vec<Vec<usize>>,
            fn(&[Var]) -> Result<Var>,
            bool, // needs kink margin
        );
        let cases: Vec<Case> = vec![
            ("add", vec![vec![2, 3], vec![2, 3]], |v| v[0].add(&v[1])?.sum_all(), false),
            ("add_bcast", vec![vec![2, 3], vec![3]], |v| v[0].add(&v[1])?.sum_all(), false),
            ("sub", vec![vec![2, 3], vec![2, 3]], |v| v[0].sub(&v[1])?.mean_all(), false),
            ("mul", vec![vec![2, 3], vec![2, 3]], |v| v[0].mul(&v[1])?.sum_all(), false),
            ("mul_bcast", vec![vec![2, 3], vec![1, 3]], |v| v[0].mul(&v[1])?.sum_all(), false),
            ("div", vec![vec![2, 2], vec![2, 2]], |v| v[0].div(&v[1])?.sum_all(), true),
            ("neg", vec![vec![4]], |v| v[0].neg()?.sum_all(), false),
            ("scale", vec![vec![4]], |v| v[0].scale(2.5)?.sum_all(), false),
            ("add_scalar", vec![vec![4]], |v| v[0].add_scalar(0.7)?.sum_all(), false),
            ("matmul", vec![vec![2, 3], vec![3, 2]], |v| v[0].matmul(&v[1])?.sum_all(), false),
            ("bmm", vec![vec![2, 2, 3], vec![2, 3, 2]], |v| v[0].bmm(&v[1])?.sum_all(), false),
            ("bmm_bcast_rhs", vec![vec![2, 2, 3], vec![3, 2]], |v| v[0].bmm(&v[1])?.sum_all(), false),
            ("bmm_bcast_lhs", vec![vec![2, 3], vec![2, 3, 2]], |v| v[0].bmm(&v[1])?.sum_all(), false),
            ("relu", vec![vec![8]], |v| v[0].relu()?.sum_all(), true),
            ("abs", vec![vec![8]], |v| v[0].abs()?.sum_all(), true),
            ("exp", vec![vec![6]], |v| v[0].exp()?.sum_all(), false),
            ("log", vec![vec![6]], |v| v[0].abs()?.add_scalar(0.5)?.log()?.sum_all(), true),
            ("sqrt", vec![vec![6]], |v| v[0].abs()?.add_scalar(0.5)?.sqrt()?.sum_all(), true),
            ("sin", vec![vec![6]], |v| v[0].sin()?.sum_all(), false),
            ("cos", vec![vec![6]], |v| v[0].cos()?.sum_all(), false),
            ("sigmoid", vec![vec![6]], |v| v[0].sigmoid()?.sum_all(), false),
            ("tanh", vec![vec![6]], |v| v[0].tanh()?.sum_all(), false),
            ("sum_all", vec![vec![3, 2]], |v| v[0].sum_all(), false),
            ("mean_all", vec![vec![3, 2]], |v| v[0].mean_all(), false),
            ("sum_axis", vec![vec![3, 2]], |v| v[0].sum_axis(0)?.mul(v.last().unwrap())?.sum_all(), false),
            ("mean_axis", vec![vec![2, 3]], |v| v[0].mean_axis(1)?.l2_norm(), false),
            ("softmax", vec![vec![2, 4]], |v| {
                let s = v[0].softmax()?;
                s.mul(&s)?.sum_all()
            }, false),
            ("log_softmax", vec![vec![2, 4]], |v| v[0].log_softmax()?.mean_all(), false),
            ("concat", vec![vec![2, 2], vec![2, 3]], |v| {
                Var::concat(&[&v[0], &v[1]], 1)?.tanh()?.sum_all()
            }, false),
            ("slice", vec![vec![3, 4]], |v| v[0].slice(&[(1, 3), (0, 2)])?.sum_all(), false),
            ("reshape", vec![vec![2, 6]], |v| v[0].reshape(&[3, 4])?.tanh()?.sum_all(), false),
            ("permute", vec![vec![2, 3, 2]], |v| v[0].permute(&[2, 0, 1])?.tanh()?.sum_all(), false),
            ("gather_rows", vec![vec![4, 3]], |v| v[0].gather_rows(&[2, 0, 2, 3])?.tanh()?.sum_all(), false),
            ("masked_select", vec![vec![4, 3]], |v| {
                v[0].masked_select_rows(&[true, false, true, false])?.sum_all()
            }, false),
            ("l2_norm", vec![vec![5]], |v| v[0].l2_norm(), false),
            ("cosine", vec![vec![5], vec![5]], |v| v[0].cosine(&v[1]), false),
            ("cosine_rows", vec![vec![3, 4], vec![3, 4]], |v| v[0].cosine_rows(&v[1])?.sum_all(), false),
            ("aa_to_mat", vec![vec![3, 3]], |v| v[0].aa_to_mat()?.tanh()?.sum_all(), false),
        ];
        for (name, shapes, f, kink) in cases {
            for trial in 0..10u64 {
                let mut rng = crate::rng::stream(1000 + trial, name, &[]);
                let points: Vec<Tensor> = shapes
                    .iter()
                    .map(|s| {
                        if kink {
                            randt_away_from_zero(s, &mut rng, 1e-3)
                        } else {
                            randt(s, &mut rng)
                        }
                    })
                    .collect();
                let report = grad_check(f, &points, DEFAULT_STEP).unwrap();
                assert!(
                    report.max_rel_err < 1e-6,
                    "{name} trial {trial}: rel err {} at {:?}",
                    report.max_rel_err,
                    report.worst
                );
            }
        }
    }

    #[test]
    fn knn_attention_grad_check() {
        for trial in 0..10u64 {
            let mut rng = crate::rng::stream(7 + trial, "knn_attn", &[]);
            let q = randt(&[4, 3], &mut rng);
            let k = randt(&[5, 3], &mut rng);
            let v = randt(&[5, 3], &mut rng);
            let idx = vec![0, 1, 2, 1, 3, 4, 0, 4];
            let f = move |vars: &[Var]| -> Result<Var> {
                vars[0]
                    .knn_attention(&vars[1], &vars[2], &[0, 1, 2, 1, 3, 4, 0, 4], 2)?
                    .tanh()?
                    .sum_all()
            };
            let _ = idx;
            let report = grad_check(f, &[q, k, v], DEFAULT_STEP).unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "knn_attention trial {trial}: rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn aa_to_mat_near_zero_branch() {
        let mut rng = crate::rng::stream(5, "aa_small", &[]);
        let n: Vec<f64> = (0..3).map(|_| rng.random_range(-1e-10..1e-10)).collect();
        let t = Tensor::from_raw(n, vec![1, 3]);
        let report = grad_check(
            |v| v[0].aa_to_mat()?.sum_all(),
            std::slice::from_ref(&t),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "near-zero rel err {}", report.max_rel_err);
        // rotation at exactly zero is the identity
        let z = Var::constant(Tensor::zeros(&[1, 3]));
        let r = z.aa_to_mat().unwrap();
        assert!(r.value().allclose(
            &Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[1, 3, 3]).unwrap(),
            1e-15
        ));
    }

    #[test]
    fn aa_to_mat_is_rotation() {
        let mut rng = crate::rng::stream(6, "aa_rot", &[]);
        for _ in 0..50 {
            let t = randt(&[1, 3], &mut rng);
            let r = Var::constant(t).aa_to_mat().unwrap();
            let m = r.value().data();
            // R R^T = I
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|c| m[i * 3 + c] * m[j * 3 + c]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
            // det = +1
            let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }
}
