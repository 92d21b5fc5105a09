//! Synthetic datasets with a learnable label signal.
//!
//! Each text is a handful of random lowercase words. One word is replaced by
//! a 3-byte uppercase marker that identifies the label (see [`marker`]), so a
//! small model can fit the data perfectly. For pair tasks the marker is placed
//! in the second segment; the first segment is distractors only. Class counts
//! follow the priors exactly under largest-remainder rounding, and label
//! order is shuffled.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, largest_remainder, Example, Splits, SPLIT_NAMES};
use crate::error::{Error, Result};
use crate::task::Task;

/// Training-split class priors of every task, in class order.
pub fn default_priors(task: Task) -> Vec<f64> {
    split_priors(task, "train").expect("train split exists")
}

/// Class priors of the reference corpus per split. The stance test row sums
/// to 1.001 in the source and is renormalised.
pub fn split_priors(task: Task, split: &str) -> Option<Vec<f64>> {
    let raw: &[f64] = match (task, split) {
        (Task::ClaimDetection, "train") => &[0.241, 0.759],
        (Task::ClaimDetection, "validation") => &[0.231, 0.769],
        (Task::ClaimDetection, "test") => &[0.340, 0.660],
        (Task::EvidenceRanking, "train") => &[0.080, 0.920],
        (Task::EvidenceRanking, "validation") => &[0.081, 0.919],
        (Task::EvidenceRanking, "test") => &[0.079, 0.921],
        (Task::StanceDetection, "train") => &[0.158, 0.212, 0.136, 0.494],
        (Task::StanceDetection, "validation") => &[0.169, 0.206, 0.177, 0.448],
        (Task::StanceDetection, "test") => &[0.164, 0.204, 0.127, 0.506],
        _ => return None,
    };
    let sum: f64 = raw.iter().sum();
    Some(if (sum - 1.0).abs() > 1e-9 {
        raw.iter().map(|p| p / sum).collect()
    } else {
        raw.to_vec()
    })
}

/// Label marker for `class` of `task`. Markers of one task share no bytes.
pub fn marker(task: Task, class: usize) -> &'static str {
    const CD: [&str; 2] = ["TQX", "FZK"];
    const ER: [&str; 2] = ["RJW", "NVY"];
    const SD: [&str; 4] = ["SBH", "PGM", "ADC", "ELO"];
    match task {
        Task::ClaimDetection => CD[class],
        Task::EvidenceRanking => ER[class],
        Task::StanceDetection => SD[class],
    }
}

fn random_words(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    (0..count)
        .map(|_| {
            let len = rng.random_range(2..=6);
            (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
        })
        .collect()
}

fn text_with_marker(rng: &mut ChaCha8Rng, m: &str) -> String {
    let count = rng.random_range(3..=6);
    let mut words = random_words(rng, count);
    let at = rng.random_range(0..=words.len());
    words.insert(at, m.to_string());
    words.join(" ")
}

fn plain_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..=6);
    random_words(rng, n).join(" ")
}

/// `n` examples of `task`; `priors` default to the training-split priors.
pub fn synth_generate(task: Task, n: usize, priors: Option<&[f64]>, seed: u64) -> Result<Vec<Example>> {
    let priors = priors.map(<[f64]>::to_vec).unwrap_or_else(|| default_priors(task));
    if priors.len() != task.num_classes() {
        return Err(Error::Config(format!(
            "{task} needs {} priors, got {}",
            task.num_classes(),
            priors.len()
        )));
    }
    let sum: f64 = priors.iter().sum();
    if priors.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{task} priors must be nonnegative and sum to 1")));
    }
    let counts = largest_remainder(n, &priors);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, task.code(), 0));
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|class| {
            let m = marker(task, class);
            let (first, second) = if task.is_pair() {
                (plain_text(&mut rng), text_with_marker(&mut rng, m))
            } else {
                (text_with_marker(&mut rng, m), String::new())
            };
            Example::from_parts(task, class, first, second)
        })
        .collect()
}

/// Synthetic train, validation and test sets for every task, `sizes` in
/// split order. Each split follows its own priors unless
/// `train_priors_everywhere` is set.
pub fn synth_splits(sizes: [usize; 3], train_priors_everywhere: bool, seed: u64) -> Result<Splits> {
    let mut out = Splits::default();
    for task in Task::ALL {
        for (k, split) in SPLIT_NAMES.iter().enumerate() {
            let priors = if train_priors_everywhere {
                default_priors(task)
            } else {
                split_priors(task, split).expect("known split")
            };
            let examples = synth_generate(
                task,
                sizes[k],
                Some(&priors),
                derive_seed(seed, split, task.index() as u64),
            )?;
            match k {
                0 => out.train[task] = examples,
                1 => out.validation[task] = examples,
                _ => out.test[task] = examples,
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(ex: &[Example], classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for e in ex {
            c[e.class()] += 1;
        }
        c
    }

    #[test]
    fn default_priors_reproduce_reference_shares() {
        let cd = synth_generate(Task::ClaimDetection, 1000, None, 0).unwrap();
        assert_eq!(counts(&cd, 2), vec![241, 759]);
        let er = synth_generate(Task::EvidenceRanking, 1000, None, 0).unwrap();
        assert_eq!(counts(&er, 2), vec![80, 920]);
        let sd = synth_generate(Task::StanceDetection, 1000, None, 0).unwrap();
        assert_eq!(counts(&sd, 4), vec![158, 212, 136, 494]);
    }

    #[test]
    fn test_split_priors_are_normalised() {
        let p = split_priors(Task::StanceDetection, "test").unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(split_priors(Task::StanceDetection, "dev").is_none());
    }

    #[test]
    fn markers_identify_labels() {
        for task in Task::ALL {
            let ex = synth_generate(task, 60, None, 5).unwrap();
            for e in &ex {
                let text = match e.segments() {
                    (a, None) => a.to_string(),
                    (_, Some(b)) => b.to_string(),
                };
                for c in 0..task.num_classes() {
                    assert_eq!(text.contains(marker(task, c)), c == e.class());
                }
                if let (a, Some(_)) = e.segments() {
                    assert!(a.bytes().all(|b| b == b' ' || b.is_ascii_lowercase()));
                }
            }
        }
    }

    #[test]
    fn seeded_and_validated() {
        let a = synth_generate(Task::StanceDetection, 50, None, 1).unwrap();
        assert_eq!(a, synth_generate(Task::StanceDetection, 50, None, 1).unwrap());
        assert_ne!(a, synth_generate(Task::StanceDetection, 50, None, 2).unwrap());
        assert!(synth_generate(Task::ClaimDetection, 5, Some(&[0.5, 0.6]), 0).is_err());
        assert!(synth_generate(Task::ClaimDetection, 5, Some(&[1.0]), 0).is_err());
    }
}
