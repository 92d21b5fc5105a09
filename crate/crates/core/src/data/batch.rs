//! Mixed-task batches.
//!
//! Every sample in a [`MixedBatch`] belongs to exactly one task. Each task has
//! a label vector as long as the batch; slots of samples that belong to other
//! tasks hold [`IGNORE_LABEL`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encode::{EncodedExample, EncodedInput};
use super::tokenizer::PAD;
use crate::error::{Error, Result};
use crate::task::{Task, TaskMap};
use crate::tensor::IGNORE_LABEL;

/// Right-padded token rows with a mask marking real tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenMatrix {
    ids: Vec<u32>,
    mask: Vec<bool>,
    rows: usize,
    width: usize,
}

impl TokenMatrix {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        let mut mask = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, width - r.len()));
            mask.extend(std::iter::repeat_n(true, r.len()));
            mask.extend(std::iter::repeat_n(false, width - r.len()));
        }
        Self {
            ids,
            mask,
            rows: rows.len(),
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self, row: usize) -> &[u32] {
        &self.ids[row * self.width..(row + 1) * self.width]
    }

    pub fn pad_mask(&self, row: usize) -> &[bool] {
        &self.mask[row * self.width..(row + 1) * self.width]
    }

    /// Tokens of `row` without padding.
    pub fn tokens(&self, row: usize) -> &[u32] {
        let n = self.pad_mask(row).iter().take_while(|&&m| m).count();
        &self.ids(row)[..n]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    /// Owning task of each sample.
    pub tasks: Vec<Task>,
    /// Single input, first pair segment, or `prompt ++ response`.
    pub first: TokenMatrix,
    /// Second pair segment; empty rows for other inputs.
    pub second: TokenMatrix,
    /// Number of prompt tokens per row of `first` in generative modes
    /// (targets before it carry no loss); `None` for classification inputs.
    pub prompt_lens: Vec<Option<usize>>,
    pub labels: TaskMap<Vec<i64>>,
    /// Samples per task.
    pub composition: TaskMap<usize>,
}

impl MixedBatch {
    pub fn from_examples(examples: &[&EncodedExample]) -> Self {
        let n = examples.len();
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        let mut prompt_lens = Vec::with_capacity(n);
        let mut labels = TaskMap::from_fn(|_| vec![IGNORE_LABEL; n]);
        let mut composition = TaskMap::default();
        for (i, e) in examples.iter().enumerate() {
            match &e.input {
                EncodedInput::Single(a) => {
                    first.push(a.clone());
                    second.push(Vec::new());
                    prompt_lens.push(None);
                }
                EncodedInput::Pair(a, b) => {
                    first.push(a.clone());
                    second.push(b.clone());
                    prompt_lens.push(None);
                }
                EncodedInput::Prompted { prompt, response } => {
                    first.push([prompt.as_slice(), response.as_slice()].concat());
                    second.push(Vec::new());
                    prompt_lens.push(Some(prompt.len()));
                }
            }
            labels[e.task][i] = e.class as i64;
            composition[e.task] += 1;
        }
        Self {
            tasks: examples.iter().map(|e| e.task).collect(),
            first: TokenMatrix::from_rows(&first),
            second: TokenMatrix::from_rows(&second),
            prompt_lens,
            labels,
            composition,
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Indices of samples whose label for `task` is not ignored.
    pub fn active(&self, task: Task) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[task][i] != IGNORE_LABEL)
            .collect()
    }

    /// Sets every label of `task` to [`IGNORE_LABEL`].
    pub fn mask_task(&mut self, task: Task) {
        for l in &mut self.labels[task] {
            *l = IGNORE_LABEL;
        }
    }

    /// Loss mask over the targets of row `i` of `first` in generative modes.
    pub fn loss_mask(&self, i: usize) -> Option<Vec<bool>> {
        let p = self.prompt_lens[i]?;
        let n = self.first.tokens(i).len();
        Some((0..n).map(|t| t >= p).collect())
    }
}

/// Seeded mixed batches covering every example of every task with nonzero
/// proportion exactly once. Each slot draws its task with probability
/// proportional to `proportions` among tasks that still have examples, so
/// batch composition follows the proportions in expectation until a task
/// runs out.
pub fn make_mixed_batches(
    data: &TaskMap<Vec<EncodedExample>>,
    batch_size: usize,
    seed: u64,
    proportions: [f64; 3],
) -> Result<Vec<MixedBatch>> {
    if proportions.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::Config("task proportions must be finite and nonnegative".into()));
    }
    let active: Vec<Task> = Task::ALL
        .into_iter()
        .filter(|t| proportions[t.index()] > 0.0)
        .collect();
    if active.is_empty() {
        return Err(Error::Config("no task has a nonzero proportion".into()));
    }
    if batch_size < active.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} is smaller than the {} mixed tasks",
            active.len()
        )));
    }
    for &t in &active {
        if data[t].is_empty() {
            return Err(Error::Config(format!("{t} has a nonzero proportion but no examples")));
        }
        if let Some(bad) = data[t].iter().find(|e| e.task != t) {
            return Err(Error::Input(format!("{} example in the {t} dataset", bad.task)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: TaskMap<Vec<usize>> = TaskMap::default();
    for &t in &active {
        let mut idx: Vec<usize> = (0..data[t].len()).collect();
        idx.shuffle(&mut rng);
        idx.reverse();
        queues[t] = idx;
    }
    let mut order: Vec<&EncodedExample> = Vec::new();
    loop {
        let total: f64 = active
            .iter()
            .filter(|t| !queues[**t].is_empty())
            .map(|t| proportions[t.index()])
            .sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for &t in &active {
            if queues[t].is_empty() {
                continue;
            }
            pick = Some(t);
            r -= proportions[t.index()];
            if r < 0.0 {
                break;
            }
        }
        let t = pick.expect("some queue is non-empty");
        let i = queues[t].pop().expect("non-empty queue");
        order.push(&data[t][i]);
    }
    Ok(order.chunks(batch_size).map(MixedBatch::from_examples).collect())
}
