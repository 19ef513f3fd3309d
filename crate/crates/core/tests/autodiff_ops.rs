mod common;

use common::{grad_error, matmul, max_abs_diff, rng, softmax, uniform};
use dhicm_core::{Mask, Tape, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[4, 2], -2.0, 2.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), [3, 2]);
    assert!(max_abs_diff(tape.value(c).data(), &matmul(a.data(), b.data(), 3, 4, 2)) < 1e-12);
}

#[test]
fn bmm_matches_per_batch_loops() {
    let mut r = rng(2);
    let a = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[2, 4, 5], -2.0, 2.0);
    let bt = uniform(&mut r, &[2, 5, 4], -2.0, 2.0);
    let mut tape = Tape::new();
    let (va, vb, vbt) = (tape.constant(a.clone()), tape.constant(b.clone()), tape.constant(bt.clone()));
    let c = tape.bmm(va, vb, false).unwrap();
    let ct = tape.bmm(va, vbt, true).unwrap();
    for i in 0..2 {
        let ai = &a.data()[i * 12..(i + 1) * 12];
        let want = matmul(ai, &b.data()[i * 20..(i + 1) * 20], 3, 4, 5);
        assert!(max_abs_diff(&tape.value(c).data()[i * 15..(i + 1) * 15], &want) < 1e-12);
        let bti = &bt.data()[i * 20..(i + 1) * 20];
        let mut tr = vec![0.0; 20];
        for p in 0..5 {
            for q in 0..4 {
                tr[q * 5 + p] = bti[p * 4 + q];
            }
        }
        let want = matmul(ai, &tr, 3, 4, 5);
        assert!(max_abs_diff(&tape.value(ct).data()[i * 15..(i + 1) * 15], &want) < 1e-12);
    }
}

#[test]
fn softmax_closed_form() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap());
    let s = tape.softmax(x, 1, None).unwrap();
    assert!(max_abs_diff(tape.value(s).data(), &[2.0 / 3.0, 1.0 / 3.0]) < 1e-15);
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(3);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let pos = uniform(&mut r, &[3, 4], 0.5, 2.0);
    let row = uniform(&mut r, &[4], -2.0, 2.0);
    assert!(grad_error(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])) < TOL);
    assert!(grad_error(&[a.clone(), row.clone()], |t, v| t.add(v[0], v[1])) < TOL);
    assert!(grad_error(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])) < TOL);
    assert!(grad_error(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])) < TOL);
    assert!(grad_error(&[a.clone(), pos.clone()], |t, v| t.div(v[0], v[1])) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| Ok(t.scale(v[0], -1.7))) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3))) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| t.mul_const(v[0], &b)) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| Ok(t.exp(v[0]))) < TOL);
    assert!(grad_error(&[pos.clone()], |t, v| Ok(t.ln(v[0]))) < TOL);
    // Keep inputs away from the kink.
    let away = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v }).collect()).unwrap();
    assert!(grad_error(&[away], |t, v| Ok(t.relu(v[0]))) < TOL);
}

#[test]
fn structural_gradients() {
    let mut r = rng(4);
    let a = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
    let m = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let n = uniform(&mut r, &[4, 5], -2.0, 2.0);
    let b = uniform(&mut r, &[2, 4, 3], -2.0, 2.0);
    let bt = uniform(&mut r, &[2, 5, 4], -2.0, 2.0);
    assert!(grad_error(&[m.clone(), n.clone()], |t, v| t.matmul(v[0], v[1])) < TOL);
    assert!(grad_error(&[a.clone(), b.clone()], |t, v| t.bmm(v[0], v[1], false)) < TOL);
    assert!(grad_error(&[a.clone(), bt.clone()], |t, v| t.bmm(v[0], v[1], true)) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| t.reshape(v[0], &[6, 4])) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| t.permute(v[0], &[2, 0, 1])) < TOL);
    assert!(grad_error(&[m.clone()], |t, v| t.transpose(v[0])) < TOL);
    assert!(grad_error(&[m.clone()], |t, v| t.select_rows(v[0], &[2, 0, 2])) < TOL);
    assert!(grad_error(&[m.clone()], |t, v| t.embedding(v[0], &[1, 1, 0, 2])) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| Ok(t.sum(v[0]))) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| Ok(t.mean(v[0]))) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| t.sum_axis(v[0], 1)) < TOL);
}

#[test]
fn normalization_gradients() {
    let mut r = rng(5);
    let a = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
    let g = uniform(&mut r, &[4], 0.5, 1.5);
    let b = uniform(&mut r, &[4], -0.5, 0.5);
    let mask = Mask::new(
        vec![2, 1, 4],
        vec![true, false, true, true, true, true, false, false],
    )
    .unwrap();
    assert!(grad_error(&[a.clone()], |t, v| t.softmax(v[0], 2, None)) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| t.softmax(v[0], 1, None)) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| t.softmax(v[0], 2, Some(&mask))) < TOL);
    assert!(grad_error(&[a.clone()], |t, v| t.log_softmax(v[0], 2)) < TOL);
    assert!(grad_error(&[a.clone(), g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)) < TOL);
}

#[test]
fn dropout_gradient_uses_the_same_mask() {
    let a = uniform(&mut rng(6), &[4, 5], -2.0, 2.0);
    assert!(grad_error(&[a], |t, v| t.dropout(v[0], 0.3, true, 17)) < TOL);
}

#[test]
fn dropout_scales_survivors() {
    let a = uniform(&mut rng(7), &[50, 40], 0.5, 2.0);
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = tape.dropout(x, 0.25, true, 3).unwrap();
    let mut kept = 0;
    for (o, i) in tape.value(y).data().iter().zip(a.data()) {
        if *o != 0.0 {
            kept += 1;
            assert!((o - i / 0.75).abs() < 1e-12);
        }
    }
    let frac = kept as f64 / a.numel() as f64;
    assert!((frac - 0.75).abs() < 0.05, "kept fraction {frac}");
    assert_eq!(tape.seed(y), Some(3));
}

#[test]
fn backward_twice_needs_reset() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0, -2.0, 0.5]);
    assert!(tape.backward(loss).is_err());
    tape.reset();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0, -2.0, 0.5]);
}

fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 1..12)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(row in row_strategy(), shift in -50.0f64..50.0) {
        let n = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, n], row.clone()).unwrap());
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let xs = tape.constant(Tensor::new(vec![1, n], shifted).unwrap());
        let p = tape.softmax(x, 1, None).unwrap();
        let ps = tape.softmax(xs, 1, None).unwrap();
        let p = tape.value(p).data().to_vec();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!(max_abs_diff(&p, tape.value(ps).data()) < 1e-9);
        prop_assert!(max_abs_diff(&p, &softmax(&row)) < 1e-12);
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        prop_assert_eq!(argmax(&p), argmax(&row));
    }

    #[test]
    fn masked_entries_are_exactly_zero(row in row_strategy(), bits in prop::collection::vec(any::<bool>(), 12)) {
        let n = row.len();
        let allowed: Vec<bool> = bits[..n].to_vec();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, n], row).unwrap());
        let mask = Mask::new(vec![1, n], allowed.clone()).unwrap();
        let p = tape.softmax(x, 1, Some(&mask)).unwrap();
        let p = tape.value(p).data();
        for (v, ok) in p.iter().zip(&allowed) {
            if !ok {
                prop_assert_eq!(*v, 0.0);
            }
        }
        let total: f64 = p.iter().sum();
        if allowed.iter().any(|&b| b) {
            prop_assert!((total - 1.0).abs() < 1e-6);
        } else {
            prop_assert_eq!(total, 0.0);
        }
    }

    #[test]
    fn dropout_identity_cases(vals in prop::collection::vec(-5.0f64..5.0, 1..20), seed in any::<u64>(), p in 0.0f64..0.9) {
        let n = vals.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n], vals.clone()).unwrap());
        let zero_rate = tape.dropout(x, 0.0, true, seed).unwrap();
        let eval = tape.dropout(x, p, false, seed).unwrap();
        prop_assert_eq!(tape.value(zero_rate).data(), &vals[..]);
        prop_assert_eq!(tape.value(eval).data(), &vals[..]);
    }
}
