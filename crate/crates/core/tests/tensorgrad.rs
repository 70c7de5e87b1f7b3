mod common;

use std::sync::Arc;

use common::{grad_check, rand_tensor};
use iglab::tensor::{Adam, AdamConfig, AdamState, ParamStore, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weighted(tape: &Tape, v: Var, seed: u64) -> iglab::tensor::Result<Var> {
    let shape = tape.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &shape, 1.0);
    let w = tape.constant(w)?;
    tape.sum_all(tape.mul(v, w)?)
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for trial in 0..8u64 {
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let a = rand_tensor(&mut rng, &[m, k], 1.0);
        let b = rand_tensor(&mut rng, &[k, n], 1.0);
        let c = rand_tensor(&mut rng, &[m, k], 1.0);
        let row = rand_tensor(&mut rng, &[k], 1.0);
        let col = rand_tensor(&mut rng, &[m, 1], 1.0);
        let pos = Tensor::new(vec![m, k], (0..m * k).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap();
        let kinked = away_from_zero(&mut rng, &[m, k]);
        let s = trial;
        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&Tape, &[Var]) -> iglab::tensor::Result<Var>>)> = vec![
            ("matmul", vec![a.clone(), b.clone()], Box::new(move |t, v| weighted(t, t.matmul(v[0], v[1])?, s))),
            ("transpose", vec![a.clone()], Box::new(move |t, v| weighted(t, t.transpose(v[0])?, s))),
            ("add", vec![a.clone(), c.clone()], Box::new(move |t, v| weighted(t, t.add(v[0], v[1])?, s))),
            ("add_row", vec![a.clone(), row.clone()], Box::new(move |t, v| weighted(t, t.add(v[0], v[1])?, s))),
            ("sub_col", vec![a.clone(), col.clone()], Box::new(move |t, v| weighted(t, t.sub(v[0], v[1])?, s))),
            ("mul", vec![a.clone(), c.clone()], Box::new(move |t, v| weighted(t, t.mul(v[0], v[1])?, s))),
            ("mul_col", vec![a.clone(), col.clone()], Box::new(move |t, v| weighted(t, t.mul(v[0], v[1])?, s))),
            ("scale", vec![a.clone()], Box::new(move |t, v| weighted(t, t.scale(v[0], -1.7)?, s))),
            ("relu", vec![kinked.clone()], Box::new(move |t, v| weighted(t, t.relu(v[0])?, s))),
            ("leaky_relu", vec![kinked.clone()], Box::new(move |t, v| weighted(t, t.leaky_relu(v[0], 0.2)?, s))),
            ("sigmoid", vec![a.clone()], Box::new(move |t, v| weighted(t, t.sigmoid(v[0])?, s))),
            ("exp", vec![a.clone()], Box::new(move |t, v| weighted(t, t.exp(v[0])?, s))),
            ("log", vec![pos.clone()], Box::new(move |t, v| weighted(t, t.log(v[0])?, s))),
            ("softmax0", vec![a.clone()], Box::new(move |t, v| weighted(t, t.softmax(v[0], 0)?, s))),
            ("softmax1", vec![a.clone()], Box::new(move |t, v| weighted(t, t.softmax(v[0], 1)?, s))),
            ("log_softmax", vec![a.clone()], Box::new(move |t, v| weighted(t, t.log_softmax(v[0], 1)?, s))),
            ("concat0", vec![a.clone(), c.clone()], Box::new(move |t, v| weighted(t, t.concat(&[v[0], v[1]], 0)?, s))),
            ("concat1", vec![a.clone(), col.clone()], Box::new(move |t, v| weighted(t, t.concat(&[v[0], v[1]], 1)?, s))),
            ("sum", vec![a.clone()], Box::new(move |t, v| weighted(t, t.sum(v[0], 1)?, s))),
            ("mean", vec![a.clone()], Box::new(move |t, v| weighted(t, t.mean(v[0], 0)?, s))),
            ("mean_all", vec![a.clone()], Box::new(move |t, v| t.mean_all(t.exp(v[0])?))),
            ("reshape", vec![a.clone()], Box::new(move |t, v| weighted(t, t.reshape(v[0], vec![m * k])?, s))),
            ("l2_normalize", vec![kinked.clone()], Box::new(move |t, v| weighted(t, t.l2_normalize(v[0], 1)?, s))),
            ("dot", vec![a.clone(), c.clone()], Box::new(move |t, v| t.dot(v[0], v[1]))),
            ("cosine", vec![kinked.clone(), c.clone()], Box::new(move |t, v| t.cosine(v[0], v[1]))),
        ];
        for (name, inputs, f) in cases {
            let err = grad_check(&inputs, H, f);
            assert!(err <= TOL, "{name} trial {trial}: relative error {err:e}");
            checked += 1;
        }
        // row indexing ops
        let idx: Arc<[usize]> = (0..6).map(|_| rng.gen_range(0..m)).collect();
        let seg: Arc<[usize]> = (0..m * k).map(|_| rng.gen_range(0..3)).collect();
        let flat: Arc<[usize]> = (0..5).map(|_| rng.gen_range(0..m * k)).collect();
        let (i1, i2, i3, i4) = (idx.clone(), idx.clone(), seg.clone(), flat.clone());
        let index_cases: Vec<(&str, Box<dyn Fn(&Tape, &[Var]) -> iglab::tensor::Result<Var>>)> = vec![
            ("gather_rows", Box::new(move |t, v| weighted(t, t.gather_rows(v[0], i1.clone())?, s))),
            ("scatter_add_rows", Box::new(move |t, v| {
                let g = t.gather_rows(v[0], i2.clone())?;
                weighted(t, t.scatter_add_rows(g, i2.clone(), m + 1)?, s)
            })),
            ("segment_softmax", Box::new(move |t, v| weighted(t, t.segment_softmax(v[0], i3.clone())?, s))),
            ("slice_rows", Box::new(move |t, v| weighted(t, t.slice_rows(v[0], 0, m.max(1))?, s))),
            ("take", Box::new(move |t, v| weighted(t, t.take(v[0], i4.clone())?, s))),
        ];
        for (name, f) in index_cases {
            let err = grad_check(std::slice::from_ref(&a), H, f);
            assert!(err <= TOL, "{name} trial {trial}: relative error {err:e}");
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} instances");
}

#[test]
fn linear_and_quadratic_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad()).unwrap();
    let l = tape.sum_all(x).unwrap();
    assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![2.0]).with_grad()).unwrap();
    let l = tape.dot(x, x).unwrap();
    assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[4.0]);
}

#[test]
fn cross_entropy_uniform_gradient_matches_difference_oracle() {
    // oracle: central differences with h = 1e-6 of -log softmax(z)[0]
    let ce = |z: &[f64]| {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - z[0]
    };
    let z0 = [0.0, 0.0, 0.0];
    let h = 1e-6;
    let oracle: Vec<f64> = (0..3)
        .map(|j| {
            let (mut p, mut q) = (z0, z0);
            p[j] += h;
            q[j] -= h;
            (ce(&p) - ce(&q)) / (2.0 * h)
        })
        .collect();
    let tape = Tape::new();
    let z = tape.leaf(Tensor::new(vec![1, 3], z0.to_vec()).unwrap().with_grad()).unwrap();
    let lsm = tape.log_softmax(z, 1).unwrap();
    let picked = tape.take(lsm, Arc::from(vec![0usize])).unwrap();
    let loss = tape.scale(tape.sum_all(picked).unwrap(), -1.0).unwrap();
    let g = tape.backward(loss).unwrap().get(z).unwrap().to_vec();
    for j in 0..3 {
        assert!((g[j] - oracle[j]).abs() < 1e-8, "{g:?} vs {oracle:?}");
    }
    assert!((g[0] + 2.0 / 3.0).abs() < 1e-12);
    assert!((g[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn forward_examples() {
    let tape = Tape::new();
    let s = tape.softmax(tape.constant(Tensor::vector(vec![0.0; 3])).unwrap(), 0).unwrap();
    for v in tape.data(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let e0 = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
    let e1 = tape.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
    assert_eq!(tape.item(tape.cosine(e0, e1).unwrap()), 0.0);
    let v = tape.constant(Tensor::vector(vec![0.3, -2.0, 5.0])).unwrap();
    assert!((tape.item(tape.cosine(v, v).unwrap()) - 1.0).abs() < 1e-15);
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
    let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), vec![2, 1]);
    assert_eq!(tape.data(c), vec![3.0, 7.0]);
}

#[test]
fn structured_errors() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
    match tape.matmul(a, b) {
        Err(TensorError::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let z = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let o = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
    assert!(matches!(tape.cosine(z, o), Err(TensorError::Domain { .. })));
    let big = tape.constant(Tensor::vector(vec![1000.0])).unwrap();
    assert!(matches!(tape.exp(big), Err(TensorError::NonFinite { .. })));
    let not_scalar = tape.add(a, b).unwrap();
    assert!(matches!(tape.backward(not_scalar), Err(TensorError::NotScalar { .. })));
    let other = Tape::new();
    let foreign = other.leaf(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(Tape::new().backward(foreign), Err(TensorError::EmptyTape)));
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![1.0]));
    let mut st = AdamState::new(&store, AdamConfig::default());
    assert!(matches!(Adam::step(&mut store, &mut st), Err(TensorError::MissingGrads { .. })));
}

#[test]
fn log_is_floored() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0])).unwrap();
    let l = tape.log(x).unwrap();
    assert!((tape.item(l) - 1e-12f64.ln()).abs() < 1e-12);
}

#[test]
fn gradients_accumulate_until_reset() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![3.0]));
    for round in 1..=2 {
        let tape = Tape::new();
        let v = tape.param(&store, w);
        let l = tape.dot(v, v).unwrap();
        tape.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[6.0 * round as f64]);
    }
    store.zero_grad();
    assert_eq!(store.get(w).grad().unwrap(), &[0.0]);
}

#[test]
fn adam_first_step_closed_form() {
    // w1 = w0 - lr * m_hat / (sqrt(v_hat) + eps) with m_hat = g, v_hat = g^2
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0]));
    store.get_mut(w).accumulate_grad(&[1.0]);
    let mut st = AdamState::new(&store, AdamConfig::default());
    Adam::step(&mut store, &mut st).unwrap();
    let oracle = 1.0 - 1e-3 * 1.0 / (1.0f64.sqrt() + 1e-8);
    assert_eq!(store.get(w).data()[0], oracle);
    assert!((store.get(w).data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
    assert_eq!(st.step, 1);
}

fn rows_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-30.0f64..30.0, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in rows_strategy()) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![r, c], data).unwrap()).unwrap();
        let s = tape.data(tape.softmax(x, 1).unwrap());
        for row in s.chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows((r, c, data) in rows_strategy()) {
        let norms_ok: Vec<bool> = data
            .chunks(c)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt() >= 1e-9)
            .collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![r, c], data).unwrap()).unwrap();
        let n = tape.data(tape.l2_normalize(x, 1).unwrap());
        for (row, ok) in n.chunks(c).zip(norms_ok) {
            if ok {
                prop_assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ops_are_deterministic((r, c, data) in rows_strategy()) {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![r, c], data.clone()).unwrap().with_grad()).unwrap();
            let y = tape.log_softmax(tape.matmul(x, tape.transpose(x).unwrap()).unwrap(), 1).unwrap();
            let l = tape.sum_all(y).unwrap();
            let v = tape.item(l);
            let g = tape.backward(l).unwrap().get(x).unwrap().to_vec();
            (v.to_bits(), g.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
