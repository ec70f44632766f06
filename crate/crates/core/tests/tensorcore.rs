use cag_core::tensor::{
    finite_diff_check, softmax_slice, topk_indices, Axis, GradCheckConfig, ParamStore, Tape,
    Tensor, TensorError, TensorResult, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[3, 4]);
    let t = Tape::new();
    let i = t.constant(Tensor::eye(3).unwrap());
    let xv = t.constant(x.clone());
    let y = t.matmul(i, xv).unwrap();
    assert_eq!(*t.value(y), x);
}

#[test]
fn hadamard_and_broadcast() {
    let t = Tape::new();
    let a = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let b = t.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
    let h = t.mul(a, b).unwrap();
    assert_eq!(t.value(h).data(), &[4.0, 10.0, 18.0]);

    let q = t.constant(Tensor::column(&[1.0, 2.0]).unwrap());
    let bq = t.broadcast_cols(q, 3).unwrap();
    assert_eq!(
        t.value(bq).to_rows(),
        vec![vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]
    );
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = t.constant(Tensor::zeros(&[2, 3]).unwrap());
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    let c = t.constant(Tensor::zeros(&[3, 2]).unwrap());
    assert!(t.add(a, c).unwrap_err().to_string().contains("[3, 2]"));
}

#[test]
fn dropout_eval_is_identity_and_keep_prob_validated() {
    let t = Tape::new();
    let a = t.constant(Tensor::filled(&[2, 2], 3.0).unwrap());
    let same = t.dropout::<ChaCha8Rng>(a, 0.7, None).unwrap();
    assert_eq!(same, a);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(t.dropout(a, 0.0, Some(&mut rng)).is_err());
    assert!(t.dropout(a, 1.5, Some(&mut rng)).is_err());
    let d = t.dropout(a, 0.5, Some(&mut rng)).unwrap();
    for v in t.value(d).data() {
        assert!(*v == 0.0 || (*v - 6.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_empty_axis() {
    let t = Tape::new();
    let a = t.constant(Tensor::row(&[1.0, 2.0]).unwrap());
    let err = t.masked_softmax(a, Axis(1), &[false, false]).unwrap_err();
    assert!(matches!(err, TensorError::EmptyAxis { .. }));
}

#[test]
fn backward_requires_scalar() {
    let t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 2]).unwrap(), true);
    assert!(matches!(
        t.backward(a).unwrap_err(),
        TensorError::NonScalarLoss(_)
    ));
}

#[test]
fn linear_map_gradient_is_outer_product() {
    // loss = sum(W x) => dW[i][j] = x[j]
    let t = Tape::new();
    let w = t.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.1, 4.0]]).unwrap(), true);
    let x = t.constant(Tensor::column(&[2.0, -1.0, 3.0]).unwrap());
    let y = t.matmul(w, x).unwrap();
    let loss = t.sum_all(y).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(w).unwrap(), &[2.0, -1.0, 3.0, 2.0, -1.0, 3.0]);
    // constant input gets no gradient
    assert!(g.wrt(x).is_none());
}

#[test]
fn tanh_squared_stationary_at_zero() {
    let t = Tape::new();
    let w = t.leaf(Tensor::scalar(0.0), true);
    let th = t.tanh(w).unwrap();
    let sq = t.mul(th, th).unwrap();
    let g = t.backward(sq).unwrap();
    assert_eq!(g.wrt(w).unwrap(), &[0.0]);
}

#[test]
fn diamond_graph_accumulates() {
    // s = x * y with x = 3a, y = a + 1  =>  ds/da = 3(a+1) + 3a = 6a + 3
    let t = Tape::new();
    let a = t.leaf(Tensor::scalar(1.7), true);
    let x = t.scale(a, 3.0).unwrap();
    let one = t.constant(Tensor::scalar(1.0));
    let y = t.add(a, one).unwrap();
    let s = t.mul(x, y).unwrap();
    let g = t.backward(s).unwrap();
    assert!((g.wrt(a).unwrap()[0] - (6.0 * 1.7 + 3.0)).abs() < 1e-12);

    // shared parameter used twice: loss = sum(W x) + sum(W z)
    let mut store = ParamStore::new();
    let wid = store.insert("w", Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap()).unwrap();
    let t = Tape::new();
    let w1 = t.param(&store, wid);
    let w2 = t.param(&store, wid);
    assert_eq!(w1, w2);
    let x = t.constant(Tensor::column(&[1.0, 2.0]).unwrap());
    let z = t.constant(Tensor::column(&[-3.0, 5.0]).unwrap());
    let a = t.matmul(w1, x).unwrap();
    let b = t.matmul(w2, z).unwrap();
    let l = t.add(a, b).unwrap();
    let l = t.sum_all(l).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.param(wid).unwrap(), &[-2.0, 7.0]);
}

#[test]
fn unreachable_param_gets_zero_grad_in_store() {
    let mut store = ParamStore::new();
    let used = store.insert("used", Tensor::scalar(2.0)).unwrap();
    let unused = store.insert("unused", Tensor::scalar(5.0)).unwrap();
    let grads = {
        let t = Tape::new();
        let u = t.param(&store, used);
        let l = t.mul(u, u).unwrap();
        t.backward(l).unwrap()
    };
    store.accumulate_grads(&grads);
    assert_eq!(store.get(used).grad().unwrap(), &[4.0]);
    assert_eq!(store.get(unused).grad().unwrap(), &[0.0]);
}

/// Builds a store holding random inputs, then checks a primitive via a
/// random linear readout `sum(R ⊙ op(inputs))`.
fn check_primitive<F>(shapes: &[&[usize]], out_shape: &[usize], seed: u64, op: F)
where
    F: for<'s> Fn(&Tape<'s>, &[Var]) -> TensorResult<Var> + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.insert(format!("x{i}"), random(&mut rng, s)).unwrap())
        .collect();
    let readout = random(&mut rng, out_shape);
    let cfg = GradCheckConfig {
        step: 1e-5,
        tol: 1e-6,
        abs_floor: 1e-6,
    };
    let report = finite_diff_check(
        &store,
        |t, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
            let y = op(t, &vars)?;
            let r = t.constant(readout.clone());
            let prod = t.mul(y, r)?;
            t.sum_all(prod)
        },
        &cfg,
    )
    .unwrap();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn primitive_gradients_match_central_differences() {
    for seed in 0..5 {
        check_primitive(&[&[3, 4], &[4, 2]], &[3, 2], seed, |t, v| t.matmul(v[0], v[1]));
        check_primitive(&[&[3, 4]], &[4, 3], seed, |t, v| t.transpose(v[0]));
        check_primitive(&[&[2, 3], &[4, 3]], &[6, 3], seed, |t, v| t.concat(v, Axis(0)));
        check_primitive(&[&[2, 3], &[2, 1]], &[2, 4], seed, |t, v| t.concat(v, Axis(1)));
        check_primitive(&[&[2, 3], &[2, 3]], &[2, 3], seed, |t, v| t.add(v[0], v[1]));
        check_primitive(&[&[2, 3], &[2, 3]], &[2, 3], seed, |t, v| t.sub(v[0], v[1]));
        check_primitive(&[&[2, 3], &[2, 3]], &[2, 3], seed, |t, v| t.mul(v[0], v[1]));
        check_primitive(&[&[2, 3]], &[2, 3], seed, |t, v| t.scale(v[0], -1.7));
        check_primitive(&[&[3, 1]], &[3, 4], seed, |t, v| t.broadcast_cols(v[0], 4));
        check_primitive(&[&[2, 3]], &[2, 3], seed, |t, v| t.tanh(v[0]));
        check_primitive(&[&[2, 3]], &[2, 3], seed, |t, v| t.sigmoid(v[0]));
        check_primitive(&[&[2, 3]], &[1, 3], seed, |t, v| t.sum(v[0], Axis(0)));
        check_primitive(&[&[2, 3]], &[2, 1], seed, |t, v| t.sum(v[0], Axis(1)));
        check_primitive(&[&[3, 4]], &[3, 4], seed, |t, v| t.softmax(v[0], Axis(0)));
        check_primitive(&[&[3, 4]], &[3, 4], seed, |t, v| t.softmax(v[0], Axis(1)));
        check_primitive(&[&[1, 4]], &[1, 4], seed, |t, v| {
            t.masked_softmax(v[0], Axis(1), &[true, false, true, true])
        });
        check_primitive(&[&[3, 4]], &[3, 4], seed, |t, v| t.l2_normalize(v[0], Axis(0)));
        check_primitive(&[&[3, 4]], &[3, 4], seed, |t, v| t.l2_normalize(v[0], Axis(1)));
        check_primitive(&[&[5, 2]], &[2, 2], seed, |t, v| t.slice_rows(v[0], 1, 2));
        check_primitive(&[&[2, 5]], &[2, 3], seed, |t, v| t.slice_cols(v[0], 2, 3));
        check_primitive(&[&[3, 3]], &[3, 2], seed, |t, v| {
            t.gather(v[0], &[vec![0, 2], vec![1, 2], vec![0, 1]])
        });
        check_primitive(&[&[3, 2]], &[3, 4], seed, |t, v| {
            t.scatter(v[0], &[vec![0, 3], vec![1, 2], vec![2, 0]], 4)
        });
        check_primitive(&[&[5, 3]], &[3, 4], seed, |t, v| {
            t.embed(v[0], &[4, 0, 2, 4], Some(0))
        });
        check_primitive(&[&[1, 4]], &[1, 1], seed, |t, v| t.softmax_cross_entropy(v[0], 2));
    }
}

#[test]
fn dropout_gradient_uses_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = Tape::new();
    let a = t.leaf(Tensor::filled(&[4, 4], 1.0).unwrap(), true);
    let d = t.dropout(a, 0.5, Some(&mut rng)).unwrap();
    let l = t.sum_all(d).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(a).unwrap(), t.value(d).data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax_slice(&row, None).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let q = softmax_slice(&shifted, None).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_matches_brute_force_sort(
        row in prop::collection::vec(0u8..6, 1..16),
        k in 1usize..20,
    ) {
        // Small integer range forces duplicated values.
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let got = topk_indices(&row, k);
        let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
        // Descending value, ascending index among equals.
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expected: Vec<usize> = pairs.iter().take(k.min(row.len())).map(|p| p.1).collect();
        expected.sort_unstable();
        prop_assert_eq!(got, expected);
    }
}
