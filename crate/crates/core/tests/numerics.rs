use factgcn::numerics::{
    activation, binary_cross_entropy, dropout, finite_difference_check, glorot_uniform,
    softmax_cross_entropy, Activation, BatchNormIds, BnMode, CoordinateSelection, Gradients,
    Mode, NumericsError, ParamStore, Rng, Tape, Tensor, BCE_CLIP,
};
use proptest::prelude::*;

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, d, k) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut s = 0.0;
            for t in 0..d {
                s += a.get(i, t) * b.get(t, j);
            }
            out[i * k + j] = s;
        }
    }
    out
}

fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let eps = 1e-6;
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

#[test]
fn affine_identity_input_returns_weights() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = store.add("b", Tensor::zeros(1, 2));
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::identity(2));
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.affine(x, wv, bv).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn affine_zero_input_rows_equal_bias() {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::new();
    let w = store.add("w", random_matrix(4, 5, &mut rng));
    let b = store.add("b", random_matrix(1, 5, &mut rng));
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::zeros(3, 4));
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.affine(x, wv, bv).unwrap();
    for r in 0..3 {
        assert_eq!(tape.value(y).row(r), store.value(b).data());
    }
}

#[test]
fn affine_matches_triple_loop_oracle() {
    let mut rng = Rng::new(11);
    let a = random_matrix(3, 4, &mut rng);
    let wt = random_matrix(4, 2, &mut rng);
    let bias = random_matrix(1, 2, &mut rng);
    let mut store = ParamStore::new();
    let w = store.add("w", wt.clone());
    let b = store.add("b", bias.clone());
    let mut tape = Tape::new(&store);
    let x = tape.constant(a.clone());
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.affine(x, wv, bv).unwrap();
    let oracle = triple_loop(&a, &wt);
    for i in 0..3 {
        for j in 0..2 {
            let expect = oracle[i * 2 + j] + bias.data()[j];
            assert!((tape.value(y).get(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn affine_shape_mismatch_names_both_shapes() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(3, 2));
    let b = store.add("b", Tensor::zeros(1, 2));
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::zeros(2, 4));
    let (wv, bv) = (tape.param(w), tape.param(b));
    let err = tape.affine(x, wv, bv).unwrap_err();
    match &err {
        NumericsError::ShapeMismatch { left, right, .. } => {
            assert_eq!(left, &vec![2, 4]);
            assert_eq!(right, &vec![3, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("[2, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn activations_pointwise() {
    let x = Tensor::row_vector(vec![-1.0, 0.0, 2.0]);
    assert_eq!(activation(Activation::Relu, &x).data(), &[0.0, 0.0, 2.0]);
    let s = activation(Activation::Sigmoid, &Tensor::row_vector(vec![0.0]));
    assert_eq!(s.data(), &[0.5]);
}

fn scalar_grad(kind: Activation, x: f64) -> f64 {
    let mut store = ParamStore::new();
    let p = store.add("x", Tensor::row_vector(vec![x]));
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let y = tape.activation(v, kind);
    let s = tape.sum(y);
    let mut g = Gradients::zeros_like(&store);
    tape.backward(s, &mut g).unwrap();
    g.get(p).data()[0]
}

#[test]
fn tanh_gradient_matches_finite_difference() {
    let analytic = scalar_grad(Activation::Tanh, 0.3);
    let numeric = central_difference(f64::tanh, 0.3);
    assert!((analytic - numeric).abs() < 1e-7);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    assert_eq!(scalar_grad(Activation::Relu, 0.0), 0.0);
    assert_eq!(scalar_grad(Activation::Relu, 0.5), 1.0);
    let sig = scalar_grad(Activation::Sigmoid, 0.7);
    let numeric = central_difference(factgcn::numerics::sigmoid, 0.7);
    assert!((sig - numeric).abs() < 1e-9);
}

#[test]
fn softmax_cross_entropy_uniform_logits() {
    let loss = softmax_cross_entropy(&[0.25; 13], 4).unwrap();
    assert!((loss - 13f64.ln()).abs() < 1e-12);
    assert!((loss - 2.5649).abs() < 1e-4);
}

#[test]
fn softmax_cross_entropy_saturated() {
    let loss = softmax_cross_entropy(&[100.0, 0.0, 0.0], 0).unwrap();
    assert!(loss >= 0.0 && loss < 1e-40);
}

#[test]
fn softmax_cross_entropy_matches_direct_formula() {
    let mut rng = Rng::new(5);
    let logits: Vec<f64> = (0..13).map(|_| 3.0 * rng.normal()).collect();
    for target in 0..13 {
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let direct = -(logits[target].exp() / z).ln();
        let loss = softmax_cross_entropy(&logits, target).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }
}

#[test]
fn softmax_cross_entropy_rejects_bad_target() {
    assert!(matches!(
        softmax_cross_entropy(&[0.0; 13], 13),
        Err(NumericsError::IndexOutOfRange { .. })
    ));
}

#[test]
fn binary_cross_entropy_values() {
    assert!((binary_cross_entropy(0.5, 0.0) - 2f64.ln()).abs() < 1e-15);
    assert!((binary_cross_entropy(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
    assert!(binary_cross_entropy(1.0 - BCE_CLIP, 1.0) <= 1e-11);
    assert!(binary_cross_entropy(1.0, 0.0).is_finite());
    assert!(binary_cross_entropy(0.0, 1.0).is_finite());
}

#[test]
fn binary_cross_entropy_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::row_vector(vec![0.3]));
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let l = tape.binary_cross_entropy(v, &[1.0], 1.0).unwrap();
    let mut g = Gradients::zeros_like(&store);
    tape.backward(l, &mut g).unwrap();
    let analytic = g.get(p).data()[0];
    let numeric = central_difference(|x| binary_cross_entropy(x, 1.0), 0.3);
    assert!((analytic - numeric).abs() < 1e-7);
    assert!((analytic + 1.0 / 0.3).abs() < 1e-12);
}

#[test]
fn backward_on_constant_leaf_gives_zero_grads() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::ones(2, 2));
    let mut tape = Tape::new(&store);
    let _unused = tape.param(w);
    let c = tape.constant(Tensor::full(1, 1, 3.0));
    let mut g = Gradients::zeros_like(&store);
    tape.backward(c, &mut g).unwrap();
    assert!(g.get(w).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_of_summed_affine_gives_row_count_bias_grad() {
    let mut rng = Rng::new(9);
    let mut store = ParamStore::new();
    let w = store.add("w", random_matrix(4, 3, &mut rng));
    let b = store.add("b", Tensor::zeros(1, 3));
    let mut tape = Tape::new(&store);
    let x = tape.constant(random_matrix(5, 4, &mut rng));
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.affine(x, wv, bv).unwrap();
    let s = tape.sum(y);
    let mut g = Gradients::zeros_like(&store);
    tape.backward(s, &mut g).unwrap();
    assert_eq!(g.get(b).data(), &[5.0, 5.0, 5.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let c = tape.constant(Tensor::zeros(2, 2));
    let mut g = Gradients::zeros_like(&store);
    assert!(matches!(
        tape.backward(c, &mut g),
        Err(NumericsError::Contract(_))
    ));
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row_vector(vec![2.0]));
    let mut tape = Tape::new(&store);
    let v = tape.param(w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let mut g = Gradients::zeros_like(&store);
    tape.backward(s, &mut g).unwrap();
    assert_eq!(g.get(w).data(), &[4.0]);
    tape.backward(s, &mut g).unwrap();
    assert_eq!(g.get(w).data(), &[8.0]);
}

#[test]
fn var_used_twice_accumulates_both_paths() {
    // f = sum(w * w + 3 w) => df/dw = 2w + 3.
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row_vector(vec![1.5, -2.0]));
    let mut tape = Tape::new(&store);
    let v = tape.param(w);
    let sq = tape.mul(v, v).unwrap();
    let lin = tape.scale(v, 3.0);
    let s = tape.add(sq, lin).unwrap();
    let l = tape.sum(s);
    let mut g = Gradients::zeros_like(&store);
    tape.backward(l, &mut g).unwrap();
    assert_eq!(g.get(w).data(), &[6.0, -1.0]);
}

/// Two-layer net touching every tape operation used by the models.
fn composite_loss(store: &ParamStore, ids: &CompositeIds, grads: Option<&mut Gradients>) -> f64 {
    let mut tape = Tape::new(store);
    let x = tape.constant(ids.input.clone());
    let emb = tape.param(ids.emb);
    let rows = tape.gather_rows(emb, &[2, 0, 2]).unwrap();
    let h0 = tape.concat_cols(&[x, rows]).unwrap();
    let w1 = tape.param(ids.w1);
    let b1 = tape.param(ids.b1);
    let z1 = tape.affine(h0, w1, b1).unwrap();
    let n1 = tape.batch_norm(z1, &ids.bn, ids.bn_mode).unwrap();
    let a1 = tape.tanh(n1);
    let m = tape.mul_const(a1, ids.mask.clone()).unwrap();
    let first = tape.slice_rows(m, 0, 1).unwrap();
    let rep = tape.repeat_rows(first, 3).unwrap();
    let mixed = tape.sub(m, rep).unwrap();
    let mixed = tape.add(mixed, m).unwrap();
    let adj = tape.constant(ids.adj.clone());
    let prop = tape.matmul(adj, mixed).unwrap();
    let w2 = tape.param(ids.w2);
    let b2 = tape.param(ids.b2);
    let z2 = tape.affine(prop, w2, b2).unwrap();
    let r = tape.relu(z2);
    let stacked = tape.concat_rows(&[r, z2]).unwrap();
    let w3 = tape.param(ids.w3);
    let b3 = tape.param(ids.b3);
    let logits = tape.affine(stacked, w3, b3).unwrap();
    let ce = tape.softmax_cross_entropy(logits, &[0, 1, 2, 1, 0, 2]).unwrap();
    let col = tape.param(ids.w4);
    let b4 = tape.param(ids.b4);
    let p_logit = tape.affine(r, col, b4).unwrap();
    let p = tape.sigmoid(p_logit);
    let bce = tape.binary_cross_entropy(p, &[1.0, 0.0, 0.0], 2.0).unwrap();
    let total = tape.add(ce, bce).unwrap();
    let out = tape.value(total).data()[0];
    if let Some(g) = grads {
        tape.backward(total, g).unwrap();
    }
    out
}

struct CompositeIds {
    input: Tensor,
    adj: Tensor,
    mask: Tensor,
    emb: factgcn::numerics::ParamId,
    w1: factgcn::numerics::ParamId,
    b1: factgcn::numerics::ParamId,
    bn: BatchNormIds,
    bn_mode: BnMode,
    w2: factgcn::numerics::ParamId,
    b2: factgcn::numerics::ParamId,
    w3: factgcn::numerics::ParamId,
    b3: factgcn::numerics::ParamId,
    w4: factgcn::numerics::ParamId,
    b4: factgcn::numerics::ParamId,
}

fn composite_setup(bn_mode: BnMode) -> (ParamStore, CompositeIds) {
    let mut rng = Rng::new(2024);
    let mut store = ParamStore::new();
    let emb = store.add("emb", random_matrix(4, 2, &mut rng));
    let w1 = store.add("w1", random_matrix(5, 4, &mut rng));
    let b1 = store.add("b1", random_matrix(1, 4, &mut rng));
    let bn = BatchNormIds {
        gamma: store.add("bn.gamma", Tensor::row_vector(vec![1.1, 0.9, 1.3, 0.7])),
        beta: store.add("bn.beta", Tensor::row_vector(vec![0.1, -0.2, 0.05, 0.3])),
        running_mean: store.add_buffer("bn.mean", Tensor::row_vector(vec![0.2, -0.1, 0.0, 0.4])),
        running_var: store.add_buffer("bn.var", Tensor::row_vector(vec![1.5, 0.8, 2.0, 1.1])),
    };
    let w2 = store.add("w2", random_matrix(4, 3, &mut rng));
    let b2 = store.add("b2", random_matrix(1, 3, &mut rng));
    let w3 = store.add("w3", random_matrix(3, 3, &mut rng));
    let b3 = store.add("b3", random_matrix(1, 3, &mut rng));
    let w4 = store.add("w4", random_matrix(3, 1, &mut rng));
    let b4 = store.add("b4", random_matrix(1, 1, &mut rng));
    let mut drop_rng = Rng::new(1);
    let mask = factgcn::numerics::dropout(&Tensor::ones(3, 4), 0.3, Mode::Train, &mut drop_rng).unwrap();
    let adj = Tensor::matrix(3, 3, vec![0.5, 0.5, 0.0, 0.5, 0.25, 0.25, 0.0, 0.25, 0.75]).unwrap();
    let ids = CompositeIds {
        input: random_matrix(3, 3, &mut rng),
        adj,
        mask,
        emb,
        w1,
        b1,
        bn,
        bn_mode,
        w2,
        b2,
        w3,
        b3,
        w4,
        b4,
    };
    (store, ids)
}

#[test]
fn composite_gradients_match_finite_differences() {
    for mode in [BnMode::Running, BnMode::Batch] {
        let (mut store, ids) = composite_setup(mode);
        let mut grads = Gradients::zeros_like(&store);
        composite_loss(&store, &ids, Some(&mut grads));
        let report = finite_difference_check(
            &mut store,
            &grads,
            1e-6,
            CoordinateSelection::All,
            |s| Ok::<_, ()>(composite_loss(s, &ids, None)),
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "{mode:?}: {:#?}",
            report.groups
        );
    }
}

#[test]
fn gradcheck_quadratic_is_exact() {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::row_vector(vec![0.5, -1.5, 2.0, 3.25]));
    let mut grads = Gradients::zeros_like(&store);
    let f = |s: &ParamStore, g: Option<&mut Gradients>| {
        let mut tape = Tape::new(s);
        let v = tape.param(id);
        let sq = tape.mul(v, v).unwrap();
        let l = tape.sum(sq);
        if let Some(g) = g {
            tape.backward(l, g).unwrap();
        }
        tape.value(l).data()[0]
    };
    f(&store, Some(&mut grads));
    let report = finite_difference_check(&mut store, &grads, 1e-6, CoordinateSelection::All, |s| {
        Ok::<_, ()>(f(s, None))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn gradcheck_detects_corrupted_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::row_vector(vec![0.5, -1.5, 2.0]));
    let mut grads = Gradients::zeros_like(&store);
    let f = |s: &ParamStore, g: Option<&mut Gradients>| {
        let mut tape = Tape::new(s);
        let v = tape.param(id);
        let sq = tape.mul(v, v).unwrap();
        let l = tape.sum(sq);
        if let Some(g) = g {
            tape.backward(l, g).unwrap();
        }
        tape.value(l).data()[0]
    };
    f(&store, Some(&mut grads));
    // Double the analytic gradient: relative error |2a - a| / |2a| = 0.5 per
    // coordinate, i.e. the detector reports an O(1) error.
    let mut doubled = grads.clone();
    f(&store, Some(&mut doubled));
    let report = finite_difference_check(&mut store, &doubled, 1e-6, CoordinateSelection::All, |s| {
        Ok::<_, ()>(f(s, None))
    })
    .unwrap();
    assert!((report.max_rel_error - 0.5).abs() < 1e-6, "{report:?}");
}

#[test]
fn dropout_infer_and_zero_rate_are_identity() {
    let mut rng = Rng::new(4);
    let x = random_matrix(3, 5, &mut rng);
    assert_eq!(dropout(&x, 0.5, Mode::Infer, &mut rng).unwrap(), x);
    assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
    assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = Rng::new(77);
    let ones = Tensor::ones(1, 1);
    let mut total = 0.0;
    let trials = 10_000;
    for _ in 0..trials {
        total += dropout(&ones, 0.5, Mode::Train, &mut rng).unwrap().data()[0];
    }
    let mean = total / trials as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
}

fn bn_store(d: usize) -> (ParamStore, BatchNormIds) {
    let mut store = ParamStore::new();
    let ids = BatchNormIds {
        gamma: store.add("g", Tensor::ones(1, d)),
        beta: store.add("b", Tensor::zeros(1, d)),
        running_mean: store.add_buffer("m", Tensor::zeros(1, d)),
        running_var: store.add_buffer("v", Tensor::ones(1, d)),
    };
    (store, ids)
}

#[test]
fn batch_norm_standardizes_columns() {
    let mut rng = Rng::new(8);
    let (store, ids) = bn_store(3);
    // Column variances well above 10 so var / (var + 1e-5) is within 1e-6 of 1.
    let x = random_matrix(64, 3, &mut rng).map(|v| 40.0 * v + 7.0);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y = tape.batch_norm(xv, &ids, BnMode::Batch).unwrap();
    let out = tape.value(y);
    for c in 0..3 {
        let col: Vec<f64> = (0..64).map(|r| out.get(r, c)).collect();
        let mean = col.iter().sum::<f64>() / 64.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn batch_norm_constant_column_is_zero() {
    let (store, ids) = bn_store(2);
    let x = Tensor::matrix(3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap();
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y = tape.batch_norm(xv, &ids, BnMode::Batch).unwrap();
    for r in 0..3 {
        assert_eq!(tape.value(y).get(r, 0), 0.0);
    }
}

#[test]
fn batch_norm_running_mode_matches_hand_formula() {
    let mut store = ParamStore::new();
    let ids = BatchNormIds {
        gamma: store.add("g", Tensor::row_vector(vec![2.0, 0.5])),
        beta: store.add("b", Tensor::row_vector(vec![1.0, -1.0])),
        running_mean: store.add_buffer("m", Tensor::row_vector(vec![1.0, 4.0])),
        running_var: store.add_buffer("v", Tensor::row_vector(vec![4.0, 0.25])),
    };
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::row_vector(vec![3.0, 5.0]));
    let y = tape.batch_norm(x, &ids, BnMode::Running).unwrap();
    let expect0 = 2.0 * (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() + 1.0;
    let expect1 = 0.5 * (5.0 - 4.0) / (0.25f64 + 1e-5).sqrt() - 1.0;
    assert!((tape.value(y).data()[0] - expect0).abs() < 1e-14);
    assert!((tape.value(y).data()[1] - expect1).abs() < 1e-14);
}

#[test]
fn batch_norm_batch_mode_needs_two_rows() {
    let (store, ids) = bn_store(2);
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::row_vector(vec![1.0, 2.0]));
    assert!(matches!(
        tape.batch_norm(x, &ids, BnMode::Batch),
        Err(NumericsError::Contract(_))
    ));
}

#[test]
fn batch_norm_running_update_uses_momentum() {
    let (mut store, ids) = bn_store(1);
    let updates = {
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        tape.batch_norm(x, &ids, BnMode::Batch).unwrap();
        tape.take_running_updates()
    };
    store.apply_running_updates(&updates, 0.9);
    assert!((store.value(ids.running_mean).data()[0] - 0.2).abs() < 1e-15);
    assert!((store.value(ids.running_var).data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
}

#[test]
fn glorot_bounds_and_determinism() {
    let limit = (6.0f64 / (30.0 + 70.0)).sqrt();
    let a = glorot_uniform(30, 70, &mut Rng::new(5));
    let b = glorot_uniform(30, 70, &mut Rng::new(5));
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| v.abs() <= limit));
}

#[test]
fn glorot_mean_is_centered() {
    let t = glorot_uniform(1000, 1000, &mut Rng::new(12));
    let n = t.len() as f64;
    let mean = t.sum() / n;
    // Uniform on ±L has standard deviation L / sqrt(3).
    let limit = (6.0f64 / 2000.0).sqrt();
    let se = limit / 3f64.sqrt() / n.sqrt();
    assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
}

proptest! {
    #[test]
    fn seeded_dropout_is_reproducible(seed in any::<u64>(), p in 0.0f64..0.95) {
        let x = Tensor::ones(4, 6);
        let a = dropout(&x, p, Mode::Train, &mut Rng::new(seed)).unwrap();
        let b = dropout(&x, p, Mode::Train, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn activation_gradients_match_finite_differences(x in -4.0f64..4.0) {
        prop_assume!(x.abs() > 1e-3);
        for (kind, f) in [
            (Activation::Tanh, f64::tanh as fn(f64) -> f64),
            (Activation::Sigmoid, factgcn::numerics::sigmoid),
            (Activation::Relu, |v: f64| v.max(0.0)),
        ] {
            let a = scalar_grad(kind, x);
            let n = central_difference(f, x);
            prop_assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-5);
        }
    }
}
