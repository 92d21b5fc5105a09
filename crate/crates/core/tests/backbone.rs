//! Structural properties of the frozen decoder and its quantized weights.

use mtl_core::backbone::{
    attach_adapters, dequantize_nf4, quantize_nf4, AdapterSet, AdapterSpec, BackboneConfig, FrozenBackbone,
};
use mtl_core::tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(seed: u64) -> BackboneConfig {
    BackboneConfig {
        max_seq_len: 32,
        seed,
        ..BackboneConfig::tiny(16, 2, 2, 260)
    }
}

fn hidden(bb: &FrozenBackbone<f64>, store: &ParamStore<f64>, adapters: &AdapterSet, ids: &[u32]) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = bb.bind(&mut tape, store, adapters);
    let h = bound.encode(&mut tape, ids).unwrap();
    tape.value(h).clone()
}

/// Adapters with every `B` filled with noise, so they change the output.
fn live_adapters(bb: &FrozenBackbone<f64>, seed: u64) -> (ParamStore<f64>, AdapterSet) {
    let mut store = ParamStore::new();
    let spec = AdapterSpec {
        rank: 2,
        alpha: 4.0,
        ..AdapterSpec::default()
    };
    let set = attach_adapters(bb, &spec, &mut store, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in &set.adapters {
        for v in store.get_mut(a.b).value_mut().data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    (store, set)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_tokens_do_not_change_earlier_states(
        seed in 0u64..4,
        ids in prop::collection::vec(0u32..260, 2..32),
        cut in 1usize..31,
        replacement in 0u32..260,
    ) {
        let cut = cut.min(ids.len() - 1);
        let bb = FrozenBackbone::<f64>::init(&cfg(seed), false).unwrap();
        let (store, adapters) = live_adapters(&bb, seed);
        let mut changed = ids.clone();
        changed[cut] = replacement;
        let a = hidden(&bb, &store, &adapters, &ids);
        let b = hidden(&bb, &store, &adapters, &changed);
        for row in 0..cut {
            prop_assert_eq!(a.row(row), b.row(row));
        }
        // A prefix on its own gives the same states as inside the sequence.
        let prefix = hidden(&bb, &store, &adapters, &ids[..cut]);
        for row in 0..cut {
            for (x, y) in prefix.row(row).iter().zip(a.row(row)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_adapters_leave_the_forward_unchanged(
        seed in 0u64..4,
        ids in prop::collection::vec(0u32..260, 1..32),
    ) {
        let bb = FrozenBackbone::<f64>::init(&cfg(seed), false).unwrap();
        let mut store = ParamStore::new();
        let set = attach_adapters(&bb, &AdapterSpec { rank: 4, alpha: 8.0, ..AdapterSpec::default() }, &mut store, seed).unwrap();
        prop_assert_eq!(
            hidden(&bb, &store, &set, &ids),
            hidden(&bb, &store, &AdapterSet::default(), &ids)
        );
    }

    #[test]
    fn requantizing_a_dequantized_matrix_is_idempotent(
        seed in any::<u64>(),
        rows in 1usize..8,
        cols in 1usize..80,
        block in 2usize..100,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::<f64>::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect(),
        ).unwrap();
        let q = quantize_nf4(&w, block).unwrap();
        let once = dequantize_nf4(&q);
        let q2 = quantize_nf4(&once, block).unwrap();
        prop_assert_eq!(q.codes(), q2.codes());
        prop_assert_eq!(dequantize_nf4(&q2), once);
    }
}

#[test]
fn same_seed_same_states_other_seed_different() {
    let ids: Vec<u32> = b"deterministic decoder".iter().map(|&b| u32::from(b)).collect();
    let run = |seed| {
        let bb = FrozenBackbone::<f64>::init(&cfg(seed), false).unwrap();
        let (store, adapters) = live_adapters(&bb, seed);
        hidden(&bb, &store, &adapters, &ids)
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn single_and_double_precision_agree() {
    let ids: Vec<u32> = (0..20).map(|i| (i * 13) % 256).collect();
    let wide = FrozenBackbone::<f64>::init(&cfg(1), false).unwrap();
    let narrow = FrozenBackbone::<f32>::init(&cfg(1), false).unwrap();
    let a = hidden(&wide, &ParamStore::new(), &AdapterSet::default(), &ids);
    let mut tape = Tape::new();
    let bound = narrow.bind(&mut tape, &ParamStore::new(), &AdapterSet::default());
    let h = bound.encode(&mut tape, &ids).unwrap();
    let b = tape.value(h).to_f64_vec();
    let worst = a.data().iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn quantized_backbone_stays_close_to_dense() {
    let ids: Vec<u32> = b"quantized".iter().map(|&b| u32::from(b)).collect();
    let dense = FrozenBackbone::<f64>::init(&cfg(2), false).unwrap();
    let quant = FrozenBackbone::<f64>::init(&cfg(2), true).unwrap();
    assert!(quant.is_quantized());
    let a = hidden(&dense, &ParamStore::new(), &AdapterSet::default(), &ids);
    let b = hidden(&quant, &ParamStore::new(), &AdapterSet::default(), &ids);
    assert_ne!(a, b);
    let scale = a.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 0.5 * scale, "{worst} vs {scale}");
}
