//! Task heads and their losses.
//!
//! - [`ClsHead`]: `softmax(W·h + b)` on one pooled sequence.
//! - [`PairClsHead`]: the same on the concatenation `[h_a; h_b]` of two
//!   independently encoded segments.
//! - [`LmHead`]: next-token distribution over the vocabulary, used for plain
//!   causal-LM training, instruction tuning and constrained label scoring.
//!
//! Losses take rows whose target is [`IGNORE_LABEL`] as inactive: they add
//! nothing to the loss and receive zero gradient.

mod verbalizer;

use serde::{Deserialize, Serialize};

pub use verbalizer::{default_label_strings, VerbalizedLabel, Verbalizer};

use crate::backbone::{AdapterSet, BoundBackbone, FrozenBackbone};
use crate::error::{Error, Result};
use crate::task::{Task, TaskMap};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var, IGNORE_LABEL};

/// How tasks are supervised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadMode {
    /// Classification heads on pooled hidden states.
    #[default]
    #[serde(rename = "CLS")]
    Cls,
    /// One causal-LM head per task over a joint `input SEP label` sequence.
    #[serde(rename = "CLM")]
    Clm,
    /// One shared causal-LM head trained on instruction/response pairs.
    #[serde(rename = "IT")]
    It,
}

impl HeadMode {
    pub fn name(self) -> &'static str {
        match self {
            HeadMode::Cls => "CLS",
            HeadMode::Clm => "CLM",
            HeadMode::It => "IT",
        }
    }

    pub fn is_generative(self) -> bool {
        !matches!(self, HeadMode::Cls)
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CLS" => Ok(HeadMode::Cls),
            "CLM" => Ok(HeadMode::Clm),
            "IT" => Ok(HeadMode::It),
            _ => Err(Error::Config(format!("unknown head mode {s:?}"))),
        }
    }
}

/// Weight and bias of an affine head recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    /// `x·Wᵀ + b` for `x: n×in`, `W: out×in`.
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let z = tape.matmul_bt(x, self.weight)?;
        tape.add_bias(z, self.bias)
    }
}

fn add_linear<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    out: usize,
    input: usize,
) -> Result<(ParamId, ParamId)> {
    let w = store.add(format!("{name}.weight"), Tensor::zeros(&[out, input]), true)?;
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true)?;
    Ok((w, b))
}

#[derive(Clone, Debug)]
pub struct ClsHead {
    pub task: Task,
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl ClsHead {
    /// Zero-initialised `C×d` head.
    pub fn new<F: Real>(store: &mut ParamStore<F>, task: Task, model_dim: usize) -> Result<Self> {
        let classes = task.num_classes();
        let (weight, bias) = add_linear(store, &format!("head.{task}"), classes, model_dim)?;
        Ok(Self {
            task,
            weight,
            bias,
            classes,
        })
    }

    pub fn bind<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> BoundLinear {
        BoundLinear {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairClsHead {
    pub task: Task,
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl PairClsHead {
    /// Zero-initialised `C×2d` head.
    pub fn new<F: Real>(store: &mut ParamStore<F>, task: Task, model_dim: usize) -> Result<Self> {
        let classes = task.num_classes();
        let (weight, bias) = add_linear(store, &format!("head.{task}"), classes, 2 * model_dim)?;
        Ok(Self {
            task,
            weight,
            bias,
            classes,
        })
    }

    pub fn bind<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> BoundLinear {
        BoundLinear {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmHead {
    /// `None` when tied to the (frozen) token embedding.
    pub weight: Option<ParamId>,
    pub bias: ParamId,
    pub tied: bool,
}

impl LmHead {
    /// Untied heads start at zero; a tied head reuses the embedding matrix and
    /// only trains its bias.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        vocab_size: usize,
        model_dim: usize,
        tied: bool,
    ) -> Result<Self> {
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[vocab_size]), true)?;
        let weight = if tied {
            None
        } else {
            Some(store.add(
                format!("{name}.weight"),
                Tensor::zeros(&[vocab_size, model_dim]),
                true,
            )?)
        };
        Ok(Self { weight, bias, tied })
    }

    pub fn bind<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        backbone: &BoundBackbone<F>,
    ) -> BoundLinear {
        let weight = match self.weight {
            Some(id) => tape.param(store, id),
            None => backbone.embedding(),
        };
        BoundLinear {
            weight,
            bias: tape.param(store, self.bias),
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        self.weight.into_iter().chain(std::iter::once(self.bias))
    }
}

/// The heads of one model, by supervision mode.
#[derive(Clone, Debug)]
pub enum HeadSet {
    Cls {
        cd: ClsHead,
        er: PairClsHead,
        sd: PairClsHead,
    },
    Clm {
        lm: TaskMap<LmHead>,
    },
    It {
        lm: LmHead,
    },
}

impl HeadSet {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        mode: HeadMode,
        model_dim: usize,
        vocab_size: usize,
        tied_lm: bool,
    ) -> Result<Self> {
        Ok(match mode {
            HeadMode::Cls => HeadSet::Cls {
                cd: ClsHead::new(store, Task::ClaimDetection, model_dim)?,
                er: PairClsHead::new(store, Task::EvidenceRanking, model_dim)?,
                sd: PairClsHead::new(store, Task::StanceDetection, model_dim)?,
            },
            HeadMode::Clm => HeadSet::Clm {
                lm: TaskMap::new(
                    LmHead::new(store, "lm.CD", vocab_size, model_dim, tied_lm)?,
                    LmHead::new(store, "lm.ER", vocab_size, model_dim, tied_lm)?,
                    LmHead::new(store, "lm.SD", vocab_size, model_dim, tied_lm)?,
                ),
            },
            HeadMode::It => HeadSet::It {
                lm: LmHead::new(store, "lm", vocab_size, model_dim, tied_lm)?,
            },
        })
    }

    pub fn mode(&self) -> HeadMode {
        match self {
            HeadSet::Cls { .. } => HeadMode::Cls,
            HeadSet::Clm { .. } => HeadMode::Clm,
            HeadSet::It { .. } => HeadMode::It,
        }
    }

    /// Parameters that only `task` updates. Empty in IT mode, where the head
    /// is shared.
    pub fn task_param_ids(&self, task: Task) -> Vec<ParamId> {
        match self {
            HeadSet::Cls { cd, er, sd } => match task {
                Task::ClaimDetection => vec![cd.weight, cd.bias],
                Task::EvidenceRanking => vec![er.weight, er.bias],
                Task::StanceDetection => vec![sd.weight, sd.bias],
            },
            HeadSet::Clm { lm } => lm[task].param_ids().collect(),
            HeadSet::It { .. } => Vec::new(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            HeadSet::Cls { .. } | HeadSet::Clm { .. } => Task::ALL
                .iter()
                .flat_map(|&t| self.task_param_ids(t))
                .collect(),
            HeadSet::It { lm } => lm.param_ids().collect(),
        }
    }

    /// The language-model head used for `task`, if the mode has one.
    pub fn lm_head(&self, task: Task) -> Option<&LmHead> {
        match self {
            HeadSet::Cls { .. } => None,
            HeadSet::Clm { lm } => Some(&lm[task]),
            HeadSet::It { lm } => Some(lm),
        }
    }
}

/// Cross-entropy of `softmax(W·pooled + b)` against `labels` (one per row of
/// `pooled`).
pub fn cls_loss<F: Real>(
    tape: &mut Tape<F>,
    head: &BoundLinear,
    pooled: Var,
    labels: &[i64],
) -> Result<Var> {
    let logits = head.apply(tape, pooled)?;
    tape.cross_entropy_masked(logits, labels)
}

/// Cross-entropy of `softmax(W·[a; b] + bias)`.
pub fn pair_loss<F: Real>(
    tape: &mut Tape<F>,
    head: &BoundLinear,
    pooled_a: Var,
    pooled_b: Var,
    labels: &[i64],
) -> Result<Var> {
    let joint = tape.concat_cols(&[pooled_a, pooled_b])?;
    cls_loss(tape, head, joint, labels)
}

/// Mean next-token negative log-likelihood over positions `t >= 1` with
/// `loss_mask[t]` set. Returns 0 when no position is selected.
pub fn clm_loss<F: Real>(
    tape: &mut Tape<F>,
    lm: &BoundLinear,
    hiddens: Var,
    token_ids: &[u32],
    loss_mask: &[bool],
) -> Result<Var> {
    let n = token_ids.len();
    if loss_mask.len() != n || tape.shape(hiddens).first() != Some(&n) {
        return Err(Error::Dimension {
            op: "clm_loss",
            lhs: tape.shape(hiddens).to_vec(),
            rhs: vec![n, loss_mask.len()],
        });
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for t in 1..n {
        if loss_mask[t] {
            rows.push(t - 1);
            targets.push(token_ids[t] as i64);
        }
    }
    if rows.is_empty() {
        log::debug!("clm_loss: no target positions selected");
        let zero = tape.constant(Tensor::scalar(F::zero()));
        return Ok(zero);
    }
    let picked = tape.embedding(hiddens, &rows)?;
    let logits = lm.apply(tape, picked)?;
    tape.cross_entropy_masked(logits, &targets)
}

/// Loss mask for `prompt ++ response` that selects only response targets.
pub fn response_mask(prompt_len: usize, response_len: usize) -> Vec<bool> {
    let mut m = vec![false; prompt_len + response_len];
    for v in &mut m[prompt_len..] {
        *v = true;
    }
    m
}

/// Causal-LM loss on `prompt ++ response`, counting response tokens only.
pub fn instruction_loss<F: Real>(
    tape: &mut Tape<F>,
    backbone: &BoundBackbone<F>,
    lm: &BoundLinear,
    prompt_ids: &[u32],
    response_ids: &[u32],
) -> Result<Var> {
    if prompt_ids.is_empty() || response_ids.is_empty() {
        return Err(Error::Input("instruction prompt and response must be non-empty".into()));
    }
    let len = prompt_ids.len() + response_ids.len();
    let max = backbone.config().max_seq_len;
    if len > max {
        return Err(Error::Truncation {
            len,
            max,
            what: "instruction prompt + response",
        });
    }
    let ids: Vec<u32> = prompt_ids.iter().chain(response_ids).copied().collect();
    let mask = response_mask(prompt_ids.len(), response_ids.len());
    let h = backbone.encode(tape, &ids)?;
    clm_loss(tape, lm, h, &ids, &mask)
}

/// `Σ_i log softmax(logits_i)[targets_i]`, computed in `f64`.
pub fn sequence_log_likelihood<F: Real>(logits: &Tensor<F>, targets: &[u32]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += row[t as usize] - lse;
    }
    total
}

/// Total log-probability of each verbalized label (with its EOS) appended to
/// `prompt_ids`. The predicted class is the argmax.
#[allow(clippy::too_many_arguments)]
pub fn score_labels<F: Real>(
    backbone: &FrozenBackbone<F>,
    adapters: &AdapterSet,
    store: &ParamStore<F>,
    lm: &LmHead,
    prompt_ids: &[u32],
    verbalizer: &Verbalizer,
    task: Task,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, store, adapters);
    let head = lm.bind(&mut tape, store, &bound);
    let mut scores = Vec::with_capacity(task.num_classes());
    for class in 0..task.num_classes() {
        let response = verbalizer.response_ids(task, class);
        let ids: Vec<u32> = prompt_ids.iter().chain(&response).copied().collect();
        if ids.len() > backbone.config().max_seq_len {
            return Err(Error::Truncation {
                len: ids.len(),
                max: backbone.config().max_seq_len,
                what: "scoring prompt + label",
            });
        }
        let h = bound.encode(&mut tape, &ids)?;
        let rows: Vec<usize> = (prompt_ids.len() - 1..ids.len() - 1).collect();
        let picked = tape.embedding(h, &rows)?;
        let logits = head.apply(&mut tape, picked)?;
        scores.push(sequence_log_likelihood(tape.value(logits), &response));
    }
    Ok(scores)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is a usable target for `classes` classes.
pub fn check_label(label: i64, classes: usize) -> Result<()> {
    if label == IGNORE_LABEL || (0..classes as i64).contains(&label) {
        Ok(())
    } else {
        Err(Error::Label {
            index: 0,
            label,
            classes,
        })
    }
}
