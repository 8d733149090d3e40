//! Minimal reverse-mode automatic differentiation over dense tensors.

pub mod ftns;
pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use tape::{selu, Extreme, Gradients, Tape, Var, SELU_ALPHA, SELU_LAMBDA};
pub use tensor::{broadcast_shape, Float, Tensor};

#[cfg(test)]
pub(crate) use tape::softmax_in_place;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = Rng::new(seed).stream("ad-test");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| s.normal()).collect()).unwrap()
    }

    fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
        random(shape, seed).map(|v| 0.5 + v.abs())
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = random(&[3, 3], 1);
        let i = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);

        let x = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.constant(t64(&[2, 1], &[5.0, 6.0]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[17.0, 39.0]);
        assert_eq!(tape.shape(z), &[2, 1]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_and_domain_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.add(a, b), Err(crate::Error::Shape { op: "add", .. })));
        assert!(matches!(tape.matmul(a, a), Err(crate::Error::Shape { op: "matmul", .. })));
        let neg = tape.constant(t64(&[1], &[-1.0]));
        assert!(matches!(tape.log(neg), Err(crate::Error::Domain { op: "log", .. })));
        let zero = tape.constant(t64(&[1], &[0.0]));
        assert!(matches!(tape.div(neg, zero), Err(crate::Error::Domain { op: "div", .. })));
    }

    #[test]
    fn linear_form_gradient_is_x() {
        let x = t64(&[4], &[1.0, -2.0, 0.5, 3.0]);
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t64(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let xv = tape.constant(x.clone());
        let p = tape.mul(w, xv).unwrap();
        let loss = tape.sum(p, None).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w), x);
    }

    #[test]
    fn constant_graph_leaves_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let unused = tape.param(t64(&[2], &[1.0, 2.0]));
        let c = tape.constant(t64(&[2], &[3.0, 4.0]));
        let s = tape.exp(c);
        let loss = tape.sum(s, None).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn backward_twice_needs_reset() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t64(&[2], &[1.0, 2.0]));
        let loss = tape.sum(w, None).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(crate::Error::Backward(_))));
        tape.reset();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t64(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(crate::Error::Backward(_))));
        assert!(Tape::<f64>::new().backward(w).is_err());
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_onehot() {
        let logits = t64(&[1, 4], &[0.3, -1.2, 2.0, 0.7]);
        let onehot = t64(&[1, 4], &[0.0, 0.0, 1.0, 0.0]);
        let ce = |t: &mut Tape<f64>, x: Var| {
            let ls = t.log_softmax(x)?;
            let oh = t.constant(onehot.clone());
            let picked = t.mul(ls, oh)?;
            let s = t.sum(picked, None)?;
            Ok(t.neg(s))
        };
        let mut tape = Tape::<f64>::new();
        let x = tape.param(logits.clone());
        let loss = ce(&mut tape, x).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        let mut p = logits.data().to_vec();
        softmax_in_place(&mut p);
        for j in 0..4 {
            assert!((g.data()[j] - (p[j] - onehot.data()[j])).abs() < 1e-12);
        }
        let r = grad_check(ce, &logits, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn fan_out_accumulates() {
        // d/dx (f(x) + f(x)) == 2 d/dx f(x)
        let x0 = random(&[5], 3);
        let grad = |twice: bool| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(x0.clone());
            let f = |t: &mut Tape<f64>| {
                let e = t.exp(x);
                let s = t.mul(e, x).unwrap();
                t.sum(s, None).unwrap()
            };
            let a = f(&mut tape);
            let loss = if twice {
                let b = f(&mut tape);
                tape.add(a, b).unwrap()
            } else {
                a
            };
            tape.backward(loss).unwrap().wrt(x)
        };
        let one = grad(false);
        let two = grad(true);
        for (a, b) in one.data().iter().zip(two.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn selu_constants() {
        assert_eq!(selu(0.0f64), 0.0);
        assert_eq!(selu(1.0f64), SELU_LAMBDA);
        assert!((selu(-50.0f64) + SELU_LAMBDA * SELU_ALPHA).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = random(&[7, 9], 11).cast::<f32>();
        let b = random(&[9, 5], 12).cast::<f32>();
        let run = || {
            let mut tape = Tape::<f32>::new();
            let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let z = tape.matmul(x, y).unwrap();
            let s = tape.softmax(z).unwrap();
            let m = tape.sum(s, Some(0)).unwrap();
            tape.value(m).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    type Prim = fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>;

    /// Every primitive composed into a scalar and checked against central
    /// differences at many random points.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let cases: Vec<(&str, Vec<Vec<usize>>, bool, Prim)> = vec![
            ("add_broadcast", vec![vec![3, 4], vec![4]], false, |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, y)?;
                t.sum(y, None)
            }),
            ("sub", vec![vec![2, 3], vec![2, 1]], false, |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.exp(y);
                t.sum(y, None)
            }),
            ("mul", vec![vec![2, 3], vec![1, 3]], false, |t, v| {
                let y = t.mul(v[0], v[1])?;
                let y = t.sigmoid(y);
                t.sum(y, None)
            }),
            ("div", vec![vec![3], vec![3]], true, |t, v| {
                let y = t.div(v[0], v[1])?;
                t.sum(y, None)
            }),
            ("log_pow", vec![vec![4]], true, |t, v| {
                let l = t.log(v[0])?;
                let p = t.powf(v[0], 1.7)?;
                let s = t.add(l, p)?;
                t.sum(s, None)
            }),
            ("matmul", vec![vec![3, 4], vec![4, 2]], false, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.selu(y);
                t.sum(y, None)
            }),
            ("batched_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], false, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.mul(y, y)?;
                t.sum(y, None)
            }),
            ("matmul_3x2", vec![vec![2, 3, 4], vec![4, 2]], false, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.sigmoid(y);
                t.sum(y, None)
            }),
            ("transpose", vec![vec![2, 3, 4]], false, |t, v| {
                let y = t.transpose(v[0])?;
                let w = t.constant(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
                let y = t.mul(y, w)?;
                let y = t.exp(y);
                t.sum(y, None)
            }),
            ("reductions", vec![vec![3, 4]], false, |t, v| {
                let a = t.sum(v[0], Some(1))?;
                let b = t.mean(v[0], Some(0))?;
                let m = t.max(v[0], 1)?;
                let aa = t.mul(a, a)?;
                let bb = t.exp(b);
                let mm = t.mul(m, m)?;
                let s1 = t.sum(aa, None)?;
                let s2 = t.sum(bb, None)?;
                let s3 = t.mean(mm, None)?;
                let s = t.add(s1, s2)?;
                t.add(s, s3)
            }),
            ("softmax", vec![vec![3, 5]], false, |t, v| {
                let y = t.softmax(v[0])?;
                let w = t.constant(Tensor::from_f64(&[5], &[1.0, 2.0, 3.0, -1.0, 0.5]).unwrap());
                let y = t.mul(y, w)?;
                let y = t.mul(y, y)?;
                t.sum(y, None)
            }),
            ("log_softmax", vec![vec![2, 4]], false, |t, v| {
                let y = t.log_softmax(v[0])?;
                let y = t.mul(y, y)?;
                t.sum(y, None)
            }),
            ("concat_slice", vec![vec![2, 3], vec![2, 2]], false, |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 1, 4)?;
                let e = t.exp(s);
                t.sum(e, None)
            }),
            ("gather_broadcast", vec![vec![3, 2], vec![2]], false, |t, v| {
                let g = t.gather(v[0], &[2, 0, 2, 1])?;
                let b = t.broadcast_to(v[1], &[4, 2])?;
                let y = t.mul(g, b)?;
                let y = t.mul(y, y)?;
                t.sum(y, None)
            }),
            ("segments", vec![vec![5, 2]], false, |t, v| {
                let ids = [0, 2, 0, 2, 2];
                let s = t.segment_sum(v[0], &ids, 3)?;
                let mx = t.segment_extreme(v[0], &ids, 3, Extreme::Max)?;
                let mn = t.segment_extreme(v[0], &ids, 3, Extreme::Min)?;
                let a = t.mul(s, mx)?;
                let b = t.mul(a, mn)?;
                let r = t.reshape(b, &[6])?;
                t.sum(r, None)
            }),
            ("relu_neg_scale", vec![vec![6]], false, |t, v| {
                let r = t.relu(v[0]);
                let n = t.neg(r);
                let s = t.scale(n, 3.0);
                let a = t.add_scalar(s, 1.0);
                let y = t.mul(a, a)?;
                t.sum(y, None)
            }),
        ];
        for (name, shapes, pos, f) in cases {
            let mut worst: f64 = 0.0;
            for trial in 0..100u64 {
                let inputs: Vec<Tensor<f64>> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let seed = trial * 31 + i as u64;
                        if pos { positive(s, seed) } else { random(s, seed) }
                    })
                    .collect();
                let r = grad_check_many(f, &inputs, 1e-6).unwrap();
                worst = worst.max(r.max_rel_error);
            }
            assert!(worst < 1e-4, "{name}: max rel error {worst}");
        }
    }
}
