//! Multi-task training: weighted total loss, AdamW updates on adapters and
//! heads, validation-based model selection, task-order schedules and sweeps.

mod config;
mod optim;
mod sweep;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    default_weight_grid, DataSpec, GenerateSpec, LrSchedule, ModelPoint, ScheduleMode,
    ScheduleSpec, SweepSpec, TaskOrder, TrainConfig,
};
pub use optim::{AdamWConfig, Moments, OptimizerState};
pub use sweep::{
    sweep_loss_weights, sweep_order, sweep_scale, ScaleAxis, ScalePoint, SweepRow,
};

use crate::data::encode::demonstrations_for;
use crate::data::{
    derive_seed, encode_examples, make_mixed_batches, subsample_fraction, EncodedExample, Encoding,
    Example, MixedBatch, Splits,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::Model;
use crate::task::{Task, TaskMap};
use crate::tensor::{Precision, Real, Tape, Tensor, Var};

/// `Σ_t λ_t · L_t` over the tasks that have a loss. Tasks with `λ_t = 0` are
/// left off the tape. Returns `None` when nothing contributes.
pub fn compose_total_loss<F: Real>(
    tape: &mut Tape<F>,
    losses: &TaskMap<Option<Var>>,
    lambda: [f64; 3],
) -> Result<Option<Var>> {
    if let Some(l) = lambda.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Config(format!("loss weight must be finite and >= 0, got {l}")));
    }
    let mut total: Option<Var> = None;
    for task in Task::ALL {
        let (Some(loss), w) = (losses[task], lambda[task.index()]) else {
            continue;
        };
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { loss } else { tape.scale(loss, F::of(w))? };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total)
}

/// Losses of one step, read off the tape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub total_loss: f64,
    pub task_losses: TaskMap<Option<f64>>,
    pub composition: TaskMap<usize>,
}

fn abort_on_non_finite(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::NumericalAbort { step, op },
        e => e,
    }
}

/// Zeroes the gradients of `model`, then runs forward and backward of the
/// weighted loss on `batch`, leaving `∂L_total/∂θ` in the store.
pub fn accumulate_gradients<F: Real>(
    model: &mut Model<F>,
    batch: &MixedBatch,
    lambda: [f64; 3],
    step: usize,
) -> Result<StepReport> {
    model.store.zero_grads();
    let tasks: Vec<Task> = Task::ALL
        .into_iter()
        .filter(|t| lambda[t.index()] > 0.0)
        .collect();
    let mut tape = Tape::new();
    let losses = model
        .task_losses(&mut tape, batch, &tasks)
        .map_err(|e| abort_on_non_finite(step, e))?;
    let total = compose_total_loss(&mut tape, &losses, lambda).map_err(|e| abort_on_non_finite(step, e))?;
    let mut report = StepReport {
        step,
        total_loss: 0.0,
        task_losses: losses.map(|_, l| l.map(|v| tape.value(v).item().as_f64())),
        composition: batch.composition.clone(),
    };
    if let Some(total) = total {
        let value = tape.value(total).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                op: "total_loss",
            });
        }
        report.total_loss = value;
        tape.backward(total, &mut model.store)
            .map_err(|e| abort_on_non_finite(step, e))?;
    }
    Ok(report)
}

/// One epoch's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub tasks: Vec<Task>,
    pub steps: usize,
    /// Mean total loss over the epoch's steps.
    pub total_loss: f64,
    /// Mean loss per task over the steps where the task was present.
    pub task_losses: TaskMap<Option<f64>>,
    pub validation: TaskMap<Option<MetricsReport>>,
    /// Mean validation macro-F1 over the weighted tasks.
    pub validation_macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, by validation macro-F1.
    pub best_epoch: Option<usize>,
    pub steps: usize,
    pub test: TaskMap<Option<MetricsReport>>,
    /// Training examples over the weighted tasks, after subsampling.
    pub train_examples: usize,
    /// Scalars in adapters and heads.
    pub trainable_scalars: usize,
    pub truncated_inputs: usize,
    pub wall_clock_secs: f64,
}

impl RunResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Datasets after tokenization for a model's head mode.
#[derive(Clone, Debug, Default)]
pub struct EncodedSplits {
    pub train: TaskMap<Vec<EncodedExample>>,
    pub validation: TaskMap<Vec<EncodedExample>>,
    pub test: TaskMap<Vec<EncodedExample>>,
    pub truncated: usize,
}

/// Encodes `splits` for `model`, after subsampling the training sets to
/// `config.data.train_fraction`.
pub fn encode_splits<F: Real>(model: &Model<F>, config: &TrainConfig, splits: &Splits) -> Result<EncodedSplits> {
    let mut out = EncodedSplits::default();
    for task in Task::ALL {
        let train: Vec<Example> = subsample_fraction(
            &splits.train[task],
            config.data.train_fraction,
            derive_seed(config.seed, "train_fraction", task.index() as u64),
        )?;
        let demos = demonstrations_for(task, &train, config.few_shot);
        let enc = Encoding {
            mode: model.mode(),
            max_seq_len: model.backbone.config().max_seq_len,
            verbalizer: &model.verbalizer,
            demonstrations: &demos,
        };
        let mut encode = |ex: &[Example]| -> Result<Vec<EncodedExample>> {
            let (e, cut) = encode_examples(ex, &enc)?;
            out.truncated += cut;
            Ok(e)
        };
        out.train[task] = encode(&train)?;
        out.validation[task] = encode(&splits.validation[task])?;
        out.test[task] = encode(&splits.test[task])?;
    }
    Ok(out)
}

/// Training state: model, optimizer and progress counters.
pub struct Trainer<F> {
    pub model: Model<F>,
    pub optimizer: OptimizerState<F>,
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    /// Steps the learning-rate schedule spans.
    pub planned_steps: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestEpoch<F>>,
}

/// Parameters of the best epoch so far, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct BestEpoch<F> {
    pub epoch: usize,
    pub score: Option<f64>,
    pub params: Vec<Tensor<F>>,
}

impl<F: Real> Trainer<F> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != F::PRECISION {
            return Err(Error::Config(format!(
                "config asks for {} but the trainer runs in {}",
                config.precision.name(),
                F::PRECISION.name()
            )));
        }
        let model = Model::new(&config.model_spec())?;
        Ok(Self::from_model(config, model))
    }

    pub fn from_model(config: &TrainConfig, model: Model<F>) -> Self {
        Self {
            model,
            optimizer: OptimizerState::new(config.optimizer_config()),
            config: config.clone(),
            epoch: 0,
            step: 0,
            planned_steps: None,
            history: Vec::new(),
            best: None,
        }
    }

    fn learning_rate(&self) -> f64 {
        let lr = self.config.learning_rate;
        match (self.config.lr_schedule, self.planned_steps) {
            (LrSchedule::Linear, Some(total)) if total > 0 => {
                lr * (1.0 - self.step as f64 / total as f64).max(0.0)
            }
            _ => lr,
        }
    }

    fn steps_exhausted(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Forward, backward and one optimizer update on adapters and heads.
    /// On error the parameters are left as they were before the step.
    pub fn train_step(&mut self, batch: &MixedBatch, lambda: [f64; 3]) -> Result<StepReport> {
        let report = accumulate_gradients(&mut self.model, batch, lambda, self.step)?;
        let lr = self.learning_rate();
        self.optimizer.step(&mut self.model.store, lr)?;
        self.model.store.zero_grads();
        self.step += 1;
        Ok(report)
    }

    /// Task proportions for mixed batches of `tasks`.
    fn proportions(&self, train: &TaskMap<Vec<EncodedExample>>, tasks: &[Task]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for &t in tasks {
            p[t.index()] = match self.config.proportions {
                Some(given) => given[t.index()],
                None => train[t].len() as f64,
            };
        }
        p
    }

    /// One pass over the training sets of `tasks`. The batch order depends
    /// only on the seed and the epoch counter.
    pub fn train_epoch(
        &mut self,
        train: &TaskMap<Vec<EncodedExample>>,
        tasks: &[Task],
    ) -> Result<(usize, f64, TaskMap<Option<f64>>)> {
        let mut lambda = [0.0; 3];
        for &t in tasks {
            lambda[t.index()] = self.config.lambda[t.index()];
        }
        let batches = make_mixed_batches(
            train,
            self.config.batch_size,
            derive_seed(self.config.seed, "batches", self.epoch as u64),
            self.proportions(train, tasks),
        )?;
        let mut steps = 0;
        let mut total = 0.0;
        let mut sums: TaskMap<(f64, usize)> = TaskMap::default();
        for batch in &batches {
            if self.steps_exhausted() {
                break;
            }
            let r = self.train_step(batch, lambda)?;
            steps += 1;
            total += r.total_loss;
            for t in Task::ALL {
                if let Some(l) = r.task_losses[t] {
                    sums[t].0 += l;
                    sums[t].1 += 1;
                }
            }
        }
        self.epoch += 1;
        let means = sums.map(|_, &(s, n)| (n > 0).then(|| s / n as f64));
        Ok((steps, if steps > 0 { total / steps as f64 } else { 0.0 }, means))
    }

    /// Metrics on every non-empty dataset of `tasks`.
    pub fn evaluate_tasks(
        &self,
        data: &TaskMap<Vec<EncodedExample>>,
        tasks: &[Task],
    ) -> Result<TaskMap<Option<MetricsReport>>> {
        let mut out = TaskMap::default();
        for &t in tasks {
            if !data[t].is_empty() {
                out[t] = Some(evaluate(&self.model, &data[t], t)?);
            }
        }
        Ok(out)
    }

    fn snapshot(&self) -> Vec<Tensor<F>> {
        self.model.store.iter().map(|(_, p)| p.value().clone()).collect()
    }

    fn restore(&mut self, snap: &[Tensor<F>]) {
        for ((_, p), v) in self.model.store.iter_mut().zip(snap) {
            *p.value_mut() = v.clone();
        }
    }

    /// [`fit_with`](Self::fit_with) without a per-epoch callback.
    pub fn fit(&mut self, splits: &Splits) -> Result<RunResult> {
        self.fit_with(splits, |_| Ok(()))
    }

    /// Trains through every stage, validating after each epoch, then keeps
    /// the parameters of the epoch with the best mean validation macro-F1
    /// (the last epoch when there is no validation data) and scores the test
    /// sets. `on_epoch` runs after every completed epoch, e.g. to write a
    /// checkpoint. A trainer restored from such a checkpoint continues with
    /// the next epoch and follows the same trajectory.
    pub fn fit_with(
        &mut self,
        splits: &Splits,
        mut on_epoch: impl FnMut(&Self) -> Result<()>,
    ) -> Result<RunResult> {
        let start = Instant::now();
        let data = encode_splits(&self.model, &self.config, splits)?;
        let stages = self.config.stages()?;
        let weighted = self.config.weighted_tasks();
        for &t in &weighted {
            if data.train[t].is_empty() {
                return Err(Error::Config(format!("{t} has a positive weight but no training data")));
            }
        }
        self.planned_steps = Some(planned_steps(&self.config, &data.train, &stages));

        let mut epoch_index = 0;
        for (stage, (tasks, budget)) in stages.iter().enumerate() {
            for _ in 0..*budget {
                epoch_index += 1;
                if epoch_index <= self.epoch {
                    continue;
                }
                if self.steps_exhausted() {
                    break;
                }
                let (steps, total_loss, task_losses) = self.train_epoch(&data.train, tasks)?;
                let validation = self.evaluate_tasks(&data.validation, &weighted)?;
                let scores: Vec<f64> = weighted
                    .iter()
                    .filter_map(|&t| validation[t].as_ref().map(|r| r.macro_f1))
                    .collect();
                let validation_macro_f1 =
                    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
                let epoch = self.epoch - 1;
                log::info!(
                    "epoch {epoch} stage {stage} steps {steps} loss {total_loss:.6} val macro-F1 {validation_macro_f1:?}"
                );
                let improved = match (&self.best, validation_macro_f1) {
                    (None, _) | (_, None) => true,
                    (Some(b), Some(score)) => b.score.is_none_or(|s| score > s),
                };
                if improved {
                    self.best = Some(BestEpoch {
                        epoch,
                        score: validation_macro_f1,
                        params: self.snapshot(),
                    });
                }
                self.history.push(EpochRecord {
                    epoch,
                    stage,
                    tasks: tasks.clone(),
                    steps,
                    total_loss,
                    task_losses,
                    validation,
                    validation_macro_f1,
                });
                on_epoch(self)?;
            }
        }
        let best = self.best.take();
        let best_epoch = best.as_ref().map(|b| {
            self.restore(&b.params);
            b.epoch
        });
        self.best = best;
        let test = self.evaluate_tasks(&data.test, &weighted)?;
        Ok(RunResult {
            config: self.config.clone(),
            seed: self.config.seed,
            epochs: self.history.clone(),
            best_epoch,
            steps: self.step,
            test,
            train_examples: weighted.iter().map(|&t| data.train[t].len()).sum(),
            trainable_scalars: self.model.store.num_scalars(),
            truncated_inputs: data.truncated,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        })
    }
}

fn planned_steps(config: &TrainConfig, train: &TaskMap<Vec<EncodedExample>>, stages: &[(Vec<Task>, usize)]) -> usize {
    let steps: usize = stages
        .iter()
        .map(|(tasks, epochs)| {
            let n: usize = tasks.iter().map(|&t| train[t].len()).sum();
            n.div_ceil(config.batch_size) * epochs
        })
        .sum();
    config.max_steps.map_or(steps, |m| steps.min(m))
}

/// Trains a fresh model per `config` and returns its result. The precision
/// is taken from the config.
pub fn run(config: &TrainConfig, splits: &Splits) -> Result<RunResult> {
    match config.precision {
        Precision::F32 => Trainer::<f32>::new(config)?.fit(splits),
        Precision::F64 => Trainer::<f64>::new(config)?.fit(splits),
    }
}

/// [`run`] with a staged schedule; a `mixed` config is run cumulatively.
pub fn run_schedule(config: &TrainConfig, splits: &Splits) -> Result<RunResult> {
    let mut config = config.clone();
    if config.schedule.mode == ScheduleMode::Mixed {
        config.schedule.mode = ScheduleMode::Cumulative;
    }
    run(&config, splits)
}

#[cfg(test)]
mod tests;
