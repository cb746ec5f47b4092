use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;

fn vec1(v: &[f64]) -> Array<f64> {
    Array::from_f64(&[v.len()], v).unwrap()
}

#[test]
fn relu_forward_eval() {
    let mut t = Tape::new();
    let x = t.input("x", vec1(&[-1.0, 2.0])).unwrap();
    let y = t.relu(x).unwrap();
    let out = t.forward_eval(&BTreeMap::new(), &[y]).unwrap();
    assert_eq!(out[0].data(), &[0.0, 2.0]);
}

#[test]
fn l2_normalize_three_four_five() {
    let mut t = Tape::new();
    let x = t.input("x", vec1(&[3.0, 4.0])).unwrap();
    let y = t.l2_normalize_rows(x).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
}

#[test]
fn identity_tape_returns_input() {
    let mut t = Tape::new();
    let x = t.input("x", vec1(&[0.0])).unwrap();
    let mut inputs = BTreeMap::new();
    inputs.insert("x".to_string(), vec1(&[1.5]));
    assert_eq!(t.forward_eval(&inputs, &[x]).unwrap()[0].data(), &[1.5]);
}

#[test]
fn replay_shape_mismatch_and_unknown_leaf() {
    let mut t = Tape::new();
    let x = t.input("x", vec1(&[1.0, 2.0])).unwrap();
    let mut inputs = BTreeMap::new();
    inputs.insert("x".to_string(), vec1(&[1.0]));
    assert!(matches!(t.forward_eval(&inputs, &[x]), Err(crate::Error::Shape(_))));
    let mut inputs = BTreeMap::new();
    inputs.insert("nope".to_string(), vec1(&[1.0]));
    assert!(t.forward_eval(&inputs, &[x]).is_err());
}

#[test]
fn non_finite_reports_node() {
    let mut t = Tape::new();
    let x = t.input("x", vec1(&[1e300])).unwrap();
    let err = t.mul(x, x).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { node: 1, op: "mul" }));
    assert!(t.input("y", vec1(&[f64::NAN])).is_err());
}

#[test]
fn square_gradient() {
    let mut t = Tape::new();
    let x = t.param("x", vec1(&[3.0])).unwrap();
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.param("x").unwrap().data(), &[6.0]);
}

#[test]
fn relu_gradient_inactive_and_at_zero() {
    let mut t = Tape::new();
    let x = t.param("x", vec1(&[-1.0, 0.0, 2.0])).unwrap();
    let y = t.relu(x).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.param("x").unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn unused_param_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.param("x", vec1(&[1.0])).unwrap();
    t.param("unused", Array::from_f64(&[2, 2], &[1.0; 4]).unwrap()).unwrap();
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.param("unused").unwrap(), &Array::zeros(&[2, 2]));
}

#[test]
fn backward_errors() {
    let t: Tape<f64> = Tape::new();
    assert!(matches!(t.backward(unsafe_var0()), Err(crate::Error::Empty(_))));
    let mut t = Tape::new();
    let x = t.param("x", vec1(&[1.0, 2.0])).unwrap();
    assert!(matches!(t.backward(x), Err(crate::Error::Shape(_))));
}

#[test]
fn duplicate_leaf_rejected() {
    let mut t = Tape::new();
    t.param("w", vec1(&[1.0])).unwrap();
    assert!(t.param("w", vec1(&[1.0])).is_err());
}

#[test]
fn finite_diff_examples() {
    let x = vec1(&[0.3, -1.0, 2.0]);
    let g = finite_diff_grad(|a| Ok(a.sum()), &x, 1e-5).unwrap();
    for v in g.data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    let g = finite_diff_grad(|a| Ok(a.data()[0] * a.data()[0]), &vec1(&[3.0]), 1e-5).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-9);
    assert!(finite_diff_grad(|a| Ok(a.sum()), &x, 0.0).is_err());
    assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
}

#[test]
fn softmax_entropy_matches_finite_differences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x0 = Array::from_f64(&[2, 3], &x0).unwrap();
    // entropy -sum p log p, written directly on values for the numeric side
    let entropy = |x: &Array<f64>| -> crate::Result<f64> {
        let mut h = 0.0;
        for r in 0..2 {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for v in row {
                let p = (v - m).exp() / z;
                h -= p * p.ln();
            }
        }
        Ok(h)
    };
    let numeric = finite_diff_grad(entropy, &x0, 1e-5).unwrap();
    // reverse mode: -sum p * log p with log p = x - logsumexp is not a primitive,
    // so route through softmax and an elementwise product with a constant log p.
    let mut t = Tape::new();
    let x = t.param("x", x0.clone()).unwrap();
    let p = t.softmax_rows(x).unwrap();
    let logp: Vec<f64> = t.value(p).data().iter().map(|v| v.ln()).collect();
    let logp = t.constant(Array::from_f64(&[2, 3], &logp).unwrap()).unwrap();
    let plogp = t.mul(p, logp).unwrap();
    let s = t.sum(plogp).unwrap();
    let h = t.affine(s, -1.0, 0.0).unwrap();
    // d/dp of -p log p is -(log p + 1); the "+1" term vanishes through softmax
    // because softmax rows sum to one.
    let g = t.backward(h).unwrap();
    assert!(relative_error(g.param("x").unwrap(), &numeric) < 1e-4);
}

#[test]
fn report_passes_and_is_deterministic() {
    let a = grad_check_report(10, 1).unwrap();
    let b = grad_check_report(10, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.entries.len(), primitive_names().len());
    assert!(a.passes(1e-4), "{}", a.to_text(1e-4));
    assert!(grad_check_report(0, 1).is_err());
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let mut m = BTreeMap::new();
    m.insert("a.w".to_string(), Array::<f32>::from_f64(&[2, 1, 1, 3], &[1.0, -2.5, 3.25, 0.1, 1e-7, -0.0]).unwrap());
    m.insert("b".to_string(), Array::<f32>::scalar(0.5));
    let bytes = checkpoint::encode_tensors(&m);
    assert_eq!(&bytes[..4], b"SCK1");
    assert_eq!(checkpoint::decode_tensors(&bytes).unwrap(), m);
    let err = checkpoint::decode_tensors(&bytes[..bytes.len() - 2]).unwrap_err();
    assert!(matches!(err, crate::Error::Format(_)));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode_tensors(&bad).is_err());
    let mut bad = bytes;
    bad[4] = 9;
    assert!(checkpoint::decode_tensors(&bad).unwrap_err().to_string().contains("version"));
}

proptest! {
    #[test]
    fn gradient_of_sum_is_sum_of_gradients(vals in proptest::collection::vec(-2.0f64..2.0, 6)) {
        let build = |which: u8| {
            let mut t = Tape::<f64>::new();
            let w = t.param("w", Array::from_f64(&[2, 3], &vals).unwrap()).unwrap();
            let n = t.l2_normalize_rows(w).unwrap();
            let s1 = t.sum(n).unwrap();
            let sm = t.softmax_rows(w).unwrap();
            let sq = t.mul(sm, w).unwrap();
            let s2 = t.sum(sq).unwrap();
            let out = match which {
                0 => s1,
                1 => s2,
                _ => t.add(s1, s2).unwrap(),
            };
            t.backward(out).unwrap().param("w").unwrap().clone()
        };
        prop_assume!(vals.chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let (g1, g2, g12) = (build(0), build(1), build(2));
        for i in 0..6 {
            prop_assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_is_pure(vals in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let mut t = Tape::<f64>::new();
        let x = t.input("x", Array::from_f64(&[2, 2], &vals).unwrap()).unwrap();
        let w = t.param("w", Array::from_f64(&[2, 2], &[0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap();
        let y = t.matmul(x, w).unwrap();
        let y = t.relu(y).unwrap();
        let before = t.value(y).clone();
        let a = t.forward_eval(&BTreeMap::new(), &[y]).unwrap();
        let b = t.forward_eval(&BTreeMap::new(), &[y]).unwrap();
        prop_assert_eq!(&a[0], &before);
        prop_assert_eq!(&a[0], &b[0]);
        prop_assert_eq!(t.value(x).to_f64_vec(), vals);
    }
}

fn unsafe_var0() -> Var {
    let mut t = Tape::<f64>::new();
    t.constant(Array::scalar(0.0)).unwrap()
}
