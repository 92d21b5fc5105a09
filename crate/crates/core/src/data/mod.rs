//! Datasets, tokenization, prompt formatting, mixed batching and synthetic
//! data.

pub mod batch;
pub mod encode;
pub mod prompts;
mod schema;
pub mod synth;
pub mod tokenizer;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::{make_mixed_batches, MixedBatch, TokenMatrix};
pub use encode::{encode_examples, EncodedExample, EncodedInput, Encoding};
pub use schema::{
    file_labels, load_dataset, to_json_line, write_dataset, ClaimExample, Example, RerankExample,
    Stance, StanceExample,
};

use crate::error::{Error, Result};
use crate::task::{Task, TaskMap};

/// Train, validation and test examples for every task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: TaskMap<Vec<Example>>,
    pub validation: TaskMap<Vec<Example>>,
    pub test: TaskMap<Vec<Example>>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

/// `{dir}/{task}_{split}.jsonl`, e.g. `data/cd_train.jsonl`.
pub fn dataset_path(dir: &Path, task: Task, split: &str) -> PathBuf {
    dir.join(format!("{}_{split}.jsonl", task.code().to_ascii_lowercase()))
}

impl Splits {
    pub fn split(&self, name: &str) -> Option<&TaskMap<Vec<Example>>> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Loads every split of `tasks` from `dir`; other tasks stay empty.
    pub fn load(dir: &Path, tasks: &[Task]) -> Result<Self> {
        let mut out = Splits::default();
        for &task in tasks {
            out.train[task] = load_dataset(&dataset_path(dir, task, "train"), task)?;
            out.validation[task] = load_dataset(&dataset_path(dir, task, "validation"), task)?;
            out.test[task] = load_dataset(&dataset_path(dir, task, "test"), task)?;
        }
        Ok(out)
    }
}

/// Derives an independent seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    // FNV-1a over the purpose, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splits `total` into integer parts proportional to `weights` using the
/// largest-remainder method. Ties go to the earlier index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified subsample keeping `fraction` of the examples. Per class, a
/// seeded permutation decides which examples are kept, so smaller fractions
/// select subsets of larger ones. Kept examples stay in their original order.
pub fn subsample_fraction(examples: &[Example], fraction: f64, seed: u64) -> Result<Vec<Example>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "training fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 || examples.is_empty() {
        return Ok(examples.to_vec());
    }
    let classes = examples.iter().map(|e| e.class()).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, e) in examples.iter().enumerate() {
        by_class[e.class()].push(i);
    }
    let keep_total = ((examples.len() as f64) * fraction).round().max(1.0) as usize;
    let sizes: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
    let quota = largest_remainder(keep_total, &sizes);
    let mut keep = vec![false; examples.len()];
    for (c, idx) in by_class.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subsample", c as u64));
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(quota[c]) {
            keep[i] = true;
        }
    }
    Ok(examples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn largest_remainder_table_priors() {
        assert_eq!(largest_remainder(1000, &[0.241, 0.759]), vec![241, 759]);
        assert_eq!(largest_remainder(200, &[0.158, 0.212, 0.136, 0.494]), vec![32, 42, 27, 99]);
        assert_eq!(largest_remainder(3, &[1.0, 1.0]), vec![2, 1]);
        assert_eq!(largest_remainder(5, &[]), Vec::<usize>::new());
    }

    #[test]
    fn derive_seed_separates_purposes() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_eq!(derive_seed(7, "x", 3), derive_seed(7, "x", 3));
    }

    #[test]
    fn subsample_nests_and_keeps_priors() {
        let ex = synth::synth_generate(Task::ClaimDetection, 400, None, 3).unwrap();
        let small = subsample_fraction(&ex, 0.1, 9).unwrap();
        let big = subsample_fraction(&ex, 0.5, 9).unwrap();
        assert_eq!(small.len(), 40);
        assert_eq!(big.len(), 200);
        assert!(small.iter().all(|e| big.contains(e)));
        let trues = small.iter().filter(|e| e.class() == 0).count();
        assert_eq!(trues, 10); // 96 of 400 are checkworthy
        assert_eq!(subsample_fraction(&ex, 1.0, 9).unwrap(), ex);
        assert!(subsample_fraction(&ex, 0.0, 9).is_err());
        assert!(subsample_fraction(&ex, 1.5, 9).is_err());
    }

    proptest! {
        #[test]
        fn largest_remainder_sums_to_total(total in 0usize..500, w in prop::collection::vec(0.01f64..1.0, 1..6)) {
            let c = largest_remainder(total, &w);
            prop_assert_eq!(c.iter().sum::<usize>(), total);
            let sum: f64 = w.iter().sum();
            for (ci, wi) in c.iter().zip(&w) {
                let q = wi / sum * total as f64;
                prop_assert!((*ci as f64 - q).abs() < 1.0);
            }
        }

        #[test]
        fn dataset_round_trip(seed in 0u64..50, n in 0usize..30) {
            let dir = tempfile::tempdir().unwrap();
            for task in Task::ALL {
                let ex = synth::synth_generate(task, n, None, seed).unwrap();
                let path = dir.path().join("x.jsonl");
                write_dataset(&path, &ex).unwrap();
                prop_assert_eq!(load_dataset(&path, task).unwrap(), ex);
            }
        }
    }
}
