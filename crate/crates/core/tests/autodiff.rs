//! Tape gradients against central finite differences, one primitive at a
//! time, plus algebraic properties of the cross-entropy and of `backward`.

use mtl_core::tensor::{ParamId, ParamStore, Tape, Tensor, Var, IGNORE_LABEL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId]) -> Var + 'a;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `y` to a scalar through a fixed random weighting so that every
/// output element carries a distinct upstream gradient.
fn weigh(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = random(&mut rng, t.shape(y));
    let w = t.constant(w);
    let p = t.mul(y, w).unwrap();
    t.sum(p).unwrap()
}

/// Largest relative error between tape gradients and central differences
/// over every scalar of every input.
fn max_grad_error(shapes: &[&[usize]], seed: u64, build: &Build<'_>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), random(&mut rng, s), true).unwrap())
        .collect();
    let eval = |store: &ParamStore<f64>| {
        let mut t = Tape::new();
        let out = build(&mut t, store, &ids);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let out = build(&mut t, &store, &ids);
    t.backward(out, &mut store).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let grad = store.get(id).grad().unwrap().clone();
        for k in 0..grad.len() {
            let v = store.get(id).value().data()[k];
            store.get_mut(id).value_mut().data_mut()[k] = v + h;
            let up = eval(&store);
            store.get_mut(id).value_mut().data_mut()[k] = v - h;
            let down = eval(&store);
            store.get_mut(id).value_mut().data_mut()[k] = v;
            let num = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    worst
}

fn check(name: &str, shapes: &[&[usize]], build: &Build<'_>) {
    for seed in 0..3 {
        let err = max_grad_error(shapes, seed, build);
        assert!(err < 1e-6, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul_variants() {
    check("matmul", &[&[3, 4], &[4, 5]], &|t, s, p| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.matmul(a, b).unwrap();
        weigh(t, y, 1)
    });
    check("matmul_bt", &[&[3, 4], &[5, 4]], &|t, s, p| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.matmul_bt(a, b).unwrap();
        weigh(t, y, 2)
    });
}

#[test]
fn elementwise_ops() {
    check("add", &[&[3, 4], &[3, 4]], &|t, s, p| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.add(a, b).unwrap();
        weigh(t, y, 3)
    });
    check("add_bias", &[&[3, 4], &[4]], &|t, s, p| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.add_bias(a, b).unwrap();
        weigh(t, y, 4)
    });
    check("mul", &[&[3, 4], &[3, 4]], &|t, s, p| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.mul(a, b).unwrap();
        weigh(t, y, 5)
    });
    check("scale", &[&[2, 3]], &|t, s, p| {
        let a = t.param(s, p[0]);
        let y = t.scale(a, -1.7).unwrap();
        weigh(t, y, 6)
    });
    check("silu", &[&[3, 5]], &|t, s, p| {
        let a = t.param(s, p[0]);
        let y = t.silu(a).unwrap();
        weigh(t, y, 7)
    });
}

#[test]
fn shape_ops() {
    check("concat_cols", &[&[3, 2], &[3, 4]], &|t, s, p| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.concat_cols(&[a, b]).unwrap();
        weigh(t, y, 8)
    });
    check("concat_rows", &[&[2, 3], &[4, 3]], &|t, s, p| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.concat_rows(&[a, b]).unwrap();
        weigh(t, y, 9)
    });
    check("embedding", &[&[6, 3]], &|t, s, p| {
        let a = t.param(s, p[0]);
        let y = t.embedding(a, &[4, 0, 4, 2]).unwrap();
        weigh(t, y, 10)
    });
    check("slice_cols", &[&[3, 6]], &|t, s, p| {
        let a = t.param(s, p[0]);
        let y = t.slice_cols(a, 2, 3).unwrap();
        weigh(t, y, 11)
    });
    check("select_row", &[&[4, 3]], &|t, s, p| {
        let a = t.param(s, p[0]);
        let y = t.select_row(a, 2).unwrap();
        weigh(t, y, 12)
    });
}

#[test]
fn normalization_and_attention_ops() {
    check("softmax", &[&[3, 5]], &|t, s, p| {
        let a = t.param(s, p[0]);
        let y = t.softmax_lastdim(a).unwrap();
        weigh(t, y, 13)
    });
    check("rms_norm", &[&[3, 4], &[4]], &|t, s, p| {
        let (a, g) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.rms_norm(a, g).unwrap();
        weigh(t, y, 14)
    });
    check("masked softmax", &[&[4, 4]], &|t, s, p| {
        let a = t.param(s, p[0]);
        let m = t.causal_mask(a).unwrap();
        let y = t.softmax_lastdim(m).unwrap();
        weigh(t, y, 15)
    });
}

#[test]
fn cross_entropy_with_ignored_rows() {
    check("cross_entropy", &[&[5, 4]], &|t, s, p| {
        let a = t.param(s, p[0]);
        t.cross_entropy_masked(a, &[3, IGNORE_LABEL, 0, 1, IGNORE_LABEL]).unwrap()
    });
}

fn ce(logits: &Tensor<f64>, targets: &[i64]) -> f64 {
    let mut t = Tape::new();
    let x = t.constant(logits.clone());
    let l = t.cross_entropy_masked(x, targets).unwrap();
    t.value(l).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_ignores_row_shifts(
        seed in any::<u64>(),
        rows in 1usize..6,
        classes in 2usize..7,
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, &[rows, classes]);
        let targets: Vec<i64> = (0..rows).map(|_| rng.random_range(0..classes as i64)).collect();
        let shifted = Tensor::new(
            vec![rows, classes],
            logits.data().iter().map(|v| v + shift).collect(),
        ).unwrap();
        prop_assert!((ce(&logits, &targets) - ce(&shifted, &targets)).abs() < 1e-12);
    }

    #[test]
    fn second_backward_doubles_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[3, 4]), true).unwrap();
        let b = store.add("b", random(&mut rng, &[4, 2]), true).unwrap();
        let mut t = Tape::new();
        let (av, bv) = (t.param(&store, a), t.param(&store, b));
        let y = t.matmul(av, bv).unwrap();
        let y = t.silu(y).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l, &mut store).unwrap();
        let once: Vec<f64> = store.get(a).grad().unwrap().data().to_vec();
        t.backward(l, &mut store).unwrap();
        let twice = store.get(a).grad().unwrap().data();
        for (x, y) in once.iter().zip(twice) {
            prop_assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn frozen_parameters_receive_no_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let frozen = store.add("w", random(&mut rng, &[3, 3]), false).unwrap();
        let live = store.add("x", random(&mut rng, &[2, 3]), true).unwrap();
        let mut t = Tape::new();
        let (w, x) = (t.param(&store, frozen), t.param(&store, live));
        let y = t.matmul(x, w).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l, &mut store).unwrap();
        prop_assert!(store.get(frozen).grad().is_none());
        prop_assert!(store.get(live).grad().is_some());
    }
}
