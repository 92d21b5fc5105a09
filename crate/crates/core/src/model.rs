//! A frozen backbone with adapters, task heads and a verbalizer, plus the
//! per-task losses of a mixed batch.
//!
//! Every task loss has the same shape: cross-entropy of `W·x + b` against
//! integer targets. What differs is the feature matrix `x`:
//!
//! - CLS, single input: pooled hidden state of each active sample (`n×d`).
//! - CLS, pair input: pooled states of both segments side by side (`n×2d`).
//! - CLM / IT: hidden states at every position preceding a response token,
//!   stacked over the active samples; targets are the next tokens.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    attach_adapters, pool, AdapterSet, AdapterSpec, BackboneConfig, BoundBackbone, FrozenBackbone,
};
use crate::data::{EncodedExample, EncodedInput, MixedBatch};
use crate::error::{Error, Result};
use crate::heads::{argmax, score_labels, BoundLinear, HeadMode, HeadSet, Verbalizer};
use crate::task::{Task, TaskMap};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

/// Everything needed to build a fresh model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub adapter: AdapterSpec,
    pub head_mode: HeadMode,
    pub tied_lm_head: bool,
    pub quantize_frozen: bool,
    /// Seed of the adapter initialisation.
    pub seed: u64,
}

pub struct Model<F> {
    pub backbone: FrozenBackbone<F>,
    pub adapters: AdapterSet,
    pub heads: HeadSet,
    /// Trainable tensors only: adapters and heads.
    pub store: ParamStore<F>,
    pub verbalizer: Verbalizer,
    spec: ModelSpec,
}

/// A model recorded on one tape.
pub struct BoundModel<F> {
    pub backbone: BoundBackbone<F>,
    pub heads: TaskMap<BoundLinear>,
}

/// Inputs and targets of one task's loss.
#[derive(Clone, Copy, Debug)]
pub struct TaskFeatures<'a> {
    pub features: Var,
    pub targets: &'a [i64],
}

impl<F: Real> Model<F> {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let backbone = FrozenBackbone::init(&spec.backbone, spec.quantize_frozen)?;
        Self::with_backbone(spec, backbone)
    }

    /// Fresh adapters and heads on an existing backbone.
    pub fn with_backbone(spec: &ModelSpec, backbone: FrozenBackbone<F>) -> Result<Self> {
        if backbone.config() != &spec.backbone {
            return Err(Error::Config("backbone does not match the model spec".into()));
        }
        let mut store = ParamStore::new();
        let adapters = attach_adapters(&backbone, &spec.adapter, &mut store, spec.seed)?;
        let cfg = backbone.config();
        let heads = HeadSet::new(
            &mut store,
            spec.head_mode,
            cfg.model_dim,
            cfg.vocab_size,
            spec.tied_lm_head,
        )?;
        Ok(Self {
            backbone,
            adapters,
            heads,
            store,
            verbalizer: Verbalizer::default(),
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> HeadMode {
        self.heads.mode()
    }

    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        self.adapters.param_ids().collect()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundModel<F> {
        let backbone = self.backbone.bind(tape, &self.store, &self.adapters);
        let heads = match &self.heads {
            HeadSet::Cls { cd, er, sd } => TaskMap::new(
                cd.bind(tape, &self.store),
                er.bind(tape, &self.store),
                sd.bind(tape, &self.store),
            ),
            HeadSet::Clm { lm } => TaskMap::new(
                lm.cd.bind(tape, &self.store, &backbone),
                lm.er.bind(tape, &self.store, &backbone),
                lm.sd.bind(tape, &self.store, &backbone),
            ),
            HeadSet::It { lm } => {
                let shared = lm.bind(tape, &self.store, &backbone);
                TaskMap::new(shared, shared, shared)
            }
        };
        BoundModel { backbone, heads }
    }

    /// Features of the samples active for `task`, or `None` when there are
    /// none. `targets` receives the matching target ids.
    pub fn task_features<'t>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundModel<F>,
        batch: &MixedBatch,
        task: Task,
        targets: &'t mut Vec<i64>,
    ) -> Result<Option<TaskFeatures<'t>>> {
        let active = batch.active(task);
        targets.clear();
        if active.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(active.len());
        for &i in &active {
            let label = batch.labels[task][i];
            let first = batch.first.tokens(i);
            if self.mode().is_generative() {
                let mask = batch.loss_mask(i).ok_or_else(|| {
                    Error::Input(format!("sample {i} has no response for a generative head"))
                })?;
                let h = bound.backbone.encode(tape, first)?;
                let picked: Vec<usize> = (1..first.len()).filter(|&t| mask[t]).map(|t| t - 1).collect();
                if picked.is_empty() {
                    continue;
                }
                targets.extend(picked.iter().map(|&t| i64::from(first[t + 1])));
                rows.push(tape.embedding(h, &picked)?);
            } else {
                if batch.prompt_lens[i].is_some() {
                    return Err(Error::Input(format!(
                        "sample {i} is a prompt but the model has classification heads"
                    )));
                }
                let a = self.pooled(tape, bound, first)?;
                let x = if task.is_pair() {
                    let second = batch.second.tokens(i);
                    if second.is_empty() {
                        return Err(Error::Input(format!("{task} sample {i} lacks a second segment")));
                    }
                    let b = self.pooled(tape, bound, second)?;
                    tape.concat_cols(&[a, b])?
                } else {
                    a
                };
                targets.push(label);
                rows.push(x);
            }
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let features = if rows.len() == 1 {
            rows[0]
        } else {
            tape.concat_rows(&rows)?
        };
        Ok(Some(TaskFeatures {
            features,
            targets: targets.as_slice(),
        }))
    }

    fn pooled(&self, tape: &mut Tape<F>, bound: &BoundModel<F>, ids: &[u32]) -> Result<Var> {
        let h = bound.backbone.encode(tape, ids)?;
        pool(tape, h, &vec![true; ids.len()])
    }

    /// Mean cross-entropy of each task in `tasks` that has active samples.
    pub fn task_losses(
        &self,
        tape: &mut Tape<F>,
        batch: &MixedBatch,
        tasks: &[Task],
    ) -> Result<TaskMap<Option<Var>>> {
        let bound = self.bind(tape);
        let mut out = TaskMap::default();
        let mut targets = Vec::new();
        for &task in tasks {
            if let Some(f) = self.task_features(tape, &bound, batch, task, &mut targets)? {
                out[task] = Some(head_loss(tape, &bound.heads[task], f)?);
            }
        }
        Ok(out)
    }

    /// Predicted class of each example.
    pub fn predict(&self, examples: &[EncodedExample]) -> Result<Vec<usize>> {
        examples.iter().map(|e| self.predict_one(e)).collect()
    }

    pub fn predict_one(&self, example: &EncodedExample) -> Result<usize> {
        Ok(argmax(&self.class_scores(example)?))
    }

    /// Log-likelihood of each label: log-softmax of the logits for
    /// classification heads, summed token log-probabilities otherwise.
    pub fn label_log_likelihoods(&self, example: &EncodedExample) -> Result<Vec<f64>> {
        let scores = self.class_scores(example)?;
        if self.mode().is_generative() {
            return Ok(scores);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        Ok(scores.iter().map(|s| s - lse).collect())
    }

    /// Class logits (CLS) or label log-likelihoods (CLM/IT).
    pub fn class_scores(&self, example: &EncodedExample) -> Result<Vec<f64>> {
        let task = example.task;
        match (&example.input, self.heads.lm_head(task)) {
            (EncodedInput::Prompted { prompt, .. }, Some(lm)) => score_labels(
                &self.backbone,
                &self.adapters,
                &self.store,
                lm,
                prompt,
                &self.verbalizer,
                task,
            ),
            (EncodedInput::Prompted { .. }, None) => Err(Error::Config(
                "prompted examples need a model with a language-model head".into(),
            )),
            (_, Some(_)) => Err(Error::Config(
                "a language-model head scores prompted examples only".into(),
            )),
            (input, None) => {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape);
                let x = match input {
                    EncodedInput::Single(a) if !task.is_pair() => self.pooled(&mut tape, &bound, a)?,
                    EncodedInput::Pair(a, b) if task.is_pair() => {
                        let a = self.pooled(&mut tape, &bound, a)?;
                        let b = self.pooled(&mut tape, &bound, b)?;
                        tape.concat_cols(&[a, b])?
                    }
                    _ => return Err(Error::Input(format!("wrong input shape for {task}"))),
                };
                let logits = bound.heads[task].apply(&mut tape, x)?;
                Ok(tape.value(logits).to_f64_vec())
            }
        }
    }
}

/// Cross-entropy of `W·features + b` against the targets.
pub fn head_loss<F: Real>(tape: &mut Tape<F>, head: &BoundLinear, f: TaskFeatures<'_>) -> Result<Var> {
    let logits = head.apply(tape, f.features)?;
    tape.cross_entropy_masked(logits, f.targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode::{encode_examples, Encoding};
    use crate::data::synth::synth_generate;
    use crate::data::make_mixed_batches;

    pub(crate) fn spec(mode: HeadMode) -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig::tiny(8, 1, 2, 260),
            adapter: AdapterSpec {
                rank: 2,
                alpha: 4.0,
                ..AdapterSpec::default()
            },
            head_mode: mode,
            tied_lm_head: false,
            quantize_frozen: false,
            seed: 0,
        }
    }

    fn batch(model: &Model<f64>, n: usize) -> MixedBatch {
        let enc = Encoding {
            mode: model.mode(),
            max_seq_len: 256,
            verbalizer: &model.verbalizer,
            demonstrations: &[],
        };
        let data = TaskMap::from_fn(|t| {
            encode_examples(&synth_generate(t, n, None, 1).unwrap(), &enc).unwrap().0
        });
        make_mixed_batches(&data, 3 * n, 0, [1.0; 3]).unwrap().remove(0)
    }

    #[test]
    fn zero_heads_give_uniform_losses() {
        for mode in [HeadMode::Cls, HeadMode::Clm] {
            let model = Model::<f64>::new(&spec(mode)).unwrap();
            let b = batch(&model, 2);
            let mut tape = Tape::new();
            let losses = model.task_losses(&mut tape, &b, &Task::ALL).unwrap();
            for t in Task::ALL {
                let v = tape.value(losses[t].unwrap()).item();
                let want = match mode {
                    HeadMode::Cls => (t.num_classes() as f64).ln(),
                    _ => 260f64.ln(),
                };
                assert!((v - want).abs() < 1e-12, "{mode:?} {t}: {v}");
            }
        }
    }

    #[test]
    fn masked_task_has_no_loss() {
        let model = Model::<f64>::new(&spec(HeadMode::Cls)).unwrap();
        let mut b = batch(&model, 2);
        b.mask_task(Task::ClaimDetection);
        let mut tape = Tape::new();
        let losses = model.task_losses(&mut tape, &b, &Task::ALL).unwrap();
        assert!(losses.cd.is_none());
        assert!(losses.er.is_some() && losses.sd.is_some());
    }

    #[test]
    fn predictions_cover_modes() {
        for mode in [HeadMode::Cls, HeadMode::Clm] {
            let model = Model::<f64>::new(&spec(mode)).unwrap();
            let enc = Encoding {
                mode,
                max_seq_len: 256,
                verbalizer: &model.verbalizer,
                demonstrations: &[],
            };
            let ex = encode_examples(&synth_generate(Task::StanceDetection, 3, None, 0).unwrap(), &enc)
                .unwrap()
                .0;
            let preds = model.predict(&ex).unwrap();
            assert_eq!(preds.len(), 3);
            assert!(preds.iter().all(|&p| p < 4));
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cls = Model::<f64>::new(&spec(HeadMode::Cls)).unwrap();
        let prompted = EncodedExample {
            task: Task::ClaimDetection,
            class: 0,
            input: EncodedInput::Prompted {
                prompt: vec![257, 1],
                response: vec![84, 258],
            },
        };
        assert!(matches!(cls.predict_one(&prompted), Err(Error::Config(_))));
        let single_for_pair = EncodedExample {
            task: Task::StanceDetection,
            class: 0,
            input: EncodedInput::Single(vec![257, 1, 258]),
        };
        assert!(cls.predict_one(&single_for_pair).is_err());
    }
}
