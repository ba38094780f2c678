//! Dense tensors, a reverse-mode tape, and Adam.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{HeadLayout, Tape, Var, GELU_C, GELU_CUBIC};
pub use tensor::Tensor;

pub(crate) use tape::softmax_into;

use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Eager matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

/// Eager row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = tape.softmax_rows(v)?;
    Ok(tape.value(out).clone())
}

/// Eager layer normalization.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.leaf(x.clone()), tape.leaf(gain.clone()), tape.leaf(bias.clone()));
    let out = tape.layer_norm(vx, vg, vb, eps)?;
    Ok(tape.value(out).clone())
}

/// Eager masked cross-entropy sum.
pub fn cross_entropy_masked(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone());
    let out = tape.cross_entropy_masked(v, targets, mask)?;
    tape.value(out).item()
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_inputs, check_params};
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, p) = b.dims2().unwrap();
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..k {
                    out[i * p + j] += a.get2(i, t) * b.get2(t, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let r = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(vec![3, 4], &mut rng);
        let b = random(vec![4, 2], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1000.0, 0.0, 0.0],
            vec![1f64.ln(), 2f64.ln(), 3f64.ln()],
        ])
        .unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!((y.get2(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.get2(1, 0) - 1.0).abs() < 1e-15 && y.get2(1, 1) < 1e-300);
        for (j, want) in [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0].iter().enumerate() {
            assert!((y.get2(2, j) - want).abs() < 1e-15);
        }
        let half = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(half.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::new(vec![2], vec![1.0; 2]).unwrap();
        let zeros = Tensor::zeros(vec![2]);
        let constant = Tensor::from_rows(&[vec![3.0, 3.0]]).unwrap();
        let y = layer_norm(&constant, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let pm = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&pm, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        // variance 1, so the result is 1/sqrt(1 + eps)
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
        assert!((y.data()[1] + expect).abs() < 1e-12);

        let b = Tensor::new(vec![2], vec![0.25, 0.25]).unwrap();
        let y = layer_norm(&pm, &zeros, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::zeros(vec![3, 9]);
        let uniform = cross_entropy_masked(&logits, &[0, 4, 8], &[true, false, true]).unwrap();
        assert!((uniform - 2.0 * 9f64.ln()).abs() < 1e-12);

        let mut narrow = Tensor::zeros(vec![1, 4]);
        narrow.data_mut()[2] = 20.0;
        let sure = cross_entropy_masked(&narrow, &[2], &[true]).unwrap();
        assert!(sure < 1e-8 && sure > 0.0);

        assert_eq!(cross_entropy_masked(&logits, &[0, 0, 0], &[false; 3]).unwrap(), 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.gradients(x), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_of_linear_map_has_hand_derived_gradient() {
        // L = sum(x W) => dL/dW[i][j] = sum over rows of x[r][i]
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store.add_normal("w", vec![3, 2], 1.0, &mut rng);
        let x = random(vec![4, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.param(&store, w);
        let y = tape.matmul(xv, wv).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        for i in 0..3 {
            let col_sum: f64 = (0..4).map(|r| x.get2(r, i)).sum();
            for j in 0..2 {
                assert!((store.grad(w)[i * 2 + j] - col_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_loss_and_unreachable_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(2.0));
        let unused = store.add("unused", Tensor::scalar(5.0));
        store.accumulate_grad(unused, &[9.0]);
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::scalar(3.0));
        let u = tape.param(&store, used);
        let zero = tape.scale(u, 0.0);
        let loss = tape.add(c, zero).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(used), &[0.0]);
        assert_eq!(store.grad(unused), &[0.0]);
    }

    fn assert_grad_ok(report: gradcheck::GradReport, what: &str) {
        assert!(
            report.max_rel_error <= 1e-4,
            "{what}: rel error {} at input {} index {}",
            report.max_rel_error,
            report.worst_input,
            report.worst_index
        );
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(vec![3, 4], &mut rng);
        let b = random(vec![4, 2], &mut rng);
        let w2 = random(vec![3, 2], &mut rng);
        // A fixed random projection turns a matrix output into a scalar.
        let proj = |t: &mut Tape, x: Var, w: &Tensor| -> Result<Var> {
            let wv = t.leaf(w.clone());
            let m = t.mul(x, wv)?;
            Ok(t.sum(m))
        };

        let r = check_inputs(&[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            proj(t, y, &w2)
        })
        .unwrap();
        assert_grad_ok(r, "matmul");

        let w34 = random(vec![3, 4], &mut rng);
        let a2 = random(vec![3, 4], &mut rng);
        let r = check_inputs(&[a.clone(), a2.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[1])?;
            let g = t.gelu(m);
            let sp = t.softplus(g);
            let sc = t.scale(sp, 0.7);
            proj(t, sc, &w34)
        })
        .unwrap();
        assert_grad_ok(r, "add/mul/gelu/softplus/scale");

        let bias = random(vec![4], &mut rng);
        let s = random(vec![1], &mut rng);
        let r = check_inputs(&[a.clone(), bias, s], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let z = t.add_scalar(y, v[2])?;
            let p = t.softmax_rows(z)?;
            proj(t, p, &w34)
        })
        .unwrap();
        assert_grad_ok(r, "add_bias/add_scalar/softmax");

        let gain = random(vec![4], &mut rng);
        let lb = random(vec![4], &mut rng);
        let r = check_inputs(&[a.clone(), gain, lb], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            proj(t, y, &w34)
        })
        .unwrap();
        assert_grad_ok(r, "layer_norm");

        let table = random(vec![5, 4], &mut rng);
        let r = check_inputs(&[table], |t, v| {
            let y = t.embedding(v[0], &[4, 0, 4])?;
            proj(t, y, &w34)
        })
        .unwrap();
        assert_grad_ok(r, "embedding");

        let logits = random(vec![3, 4], &mut rng);
        let r = check_inputs(&[logits], |t, v| {
            t.cross_entropy_masked(v[0], &[1, 3, 0], &[true, false, true])
        })
        .unwrap();
        assert_grad_ok(r, "cross_entropy_masked");

        let target: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let weight: Vec<f64> = (0..12).map(|i| (i % 3) as f64 * 0.5).collect();
        let r = check_inputs(&[a], |t, v| t.weighted_sse(v[0], &target, &weight)).unwrap();
        assert_grad_ok(r, "weighted_sse");
    }

    #[test]
    fn finite_differences_attention_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = HeadLayout {
            groups: 2,
            seq: 3,
            heads: 2,
        };
        let q = random(vec![6, 4], &mut rng);
        let k = random(vec![6, 4], &mut rng);
        let v = random(vec![6, 4], &mut rng);
        let w = random(vec![6, 4], &mut rng);
        let r = check_inputs(&[q.clone(), k, v], |t, x| {
            let s = t.attn_scores(x[0], x[1], layout, 0.5)?;
            let p = t.softmax_rows(s)?;
            let o = t.attn_mix(p, x[2], layout)?;
            let wv = t.leaf(w.clone());
            let m = t.mul(o, wv)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert_grad_ok(r, "attention");

        // Shared operand, as used by the pairwise MI head.
        let single = HeadLayout {
            groups: 2,
            seq: 3,
            heads: 1,
        };
        let ws = random(vec![6, 3], &mut rng);
        let r = check_inputs(&[q], |t, x| {
            let s = t.attn_scores(x[0], x[0], single, 0.3)?;
            let wv = t.leaf(ws.clone());
            let m = t.mul(s, wv)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert_grad_ok(r, "attn_scores shared operand");
    }

    #[test]
    fn finite_differences_through_param_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = store.add_normal("w", vec![3, 3], 0.5, &mut rng);
        let b = store.add_normal("b", vec![3], 0.5, &mut rng);
        let x = random(vec![2, 3], &mut rng);
        let r = check_params(&mut store, |t, s| {
            let xv = t.leaf(x.clone());
            let wv = t.param(s, w);
            let bv = t.param(s, b);
            let h = t.matmul(xv, wv)?;
            let h = t.add_bias(h, bv)?;
            t.cross_entropy_masked(h, &[0, 2], &[true, true])
        })
        .unwrap();
        assert_grad_ok(r, "param store");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_normalized_and_shift_invariant(
                row in proptest::collection::vec(-30.0f64..30.0, 1..12),
                shift in -50.0f64..50.0,
            ) {
                let x = Tensor::new(vec![1, row.len()], row.clone()).unwrap();
                let shifted = Tensor::new(vec![1, row.len()], row.iter().map(|v| v + shift).collect()).unwrap();
                let y = softmax_rows(&x).unwrap();
                let ys = softmax_rows(&shifted).unwrap();
                prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(y.data().iter().all(|&p| p >= 0.0));
                for (a, b) in y.data().iter().zip(ys.data()) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }
}
