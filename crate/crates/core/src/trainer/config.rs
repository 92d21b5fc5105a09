//! Experiment configuration, read from and written to TOML.
//!
//! ```toml
//! seed = 0
//! head_mode = "CLS"
//! lambda = [1.0, 1.0, 1.0]   # CD, ER, SD
//! learning_rate = 2e-4
//! batch_size = 32
//! epochs = 5
//!
//! [adapter]
//! rank = 64
//! alpha = 16.0
//!
//! [schedule]
//! mode = "cumulative"
//! order = "C-S-R"
//! ```
//!
//! Every field has a default; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbone::{AdapterSpec, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::HeadMode;
use crate::model::ModelSpec;
use crate::task::Task;
use crate::tensor::Precision;

use super::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// All weighted tasks in every batch.
    #[default]
    Mixed,
    /// Stage `k` trains only the `k`-th task of the order.
    Sequential,
    /// Stage `k` trains the first `k` tasks of the order jointly.
    Cumulative,
}

/// A permutation of the three tasks, written with task letters as `C-S-R`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TaskOrder(pub [Task; 3]);

impl TaskOrder {
    /// The six orders in the order they are reported.
    pub fn all() -> [TaskOrder; 6] {
        ["C-S-R", "C-R-S", "S-R-C", "S-C-R", "R-C-S", "R-S-C"].map(|s| s.parse().expect("valid order"))
    }
}

impl Default for TaskOrder {
    fn default() -> Self {
        TaskOrder([Task::ClaimDetection, Task::StanceDetection, Task::EvidenceRanking])
    }
}

impl fmt::Display for TaskOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0.map(Task::letter);
        write!(f, "{a}-{b}-{c}")
    }
}

impl FromStr for TaskOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("task order {s:?} is not a permutation of C, R, S"));
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut tasks = [Task::ClaimDetection; 3];
        for (slot, p) in tasks.iter_mut().zip(&parts) {
            let mut chars = p.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(bad());
            };
            *slot = Task::from_letter(c).ok_or_else(bad)?;
        }
        if tasks[0] == tasks[1] || tasks[0] == tasks[2] || tasks[1] == tasks[2] {
            return Err(bad());
        }
        Ok(TaskOrder(tasks))
    }
}

impl Serialize for TaskOrder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskOrder {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub mode: ScheduleMode,
    pub order: TaskOrder,
    /// Epochs per stage; when absent the run's epochs are split equally,
    /// earlier stages taking the remainder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_epochs: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero over the planned number of steps.
    Linear,
}

/// Where datasets live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub dir: PathBuf,
    /// Share of each training set used, stratified by class.
    pub train_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train_fraction: 1.0,
        }
    }
}

/// Synthetic data sizes per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Use the training-split priors for every split instead of each split's
    /// own priors.
    pub train_priors_everywhere: bool,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            train: 1000,
            validation: 200,
            test: 200,
            train_priors_everywhere: false,
        }
    }
}

/// One point of the model-scale axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPoint {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub weights: Vec<[f64; 3]>,
    pub orders: Vec<TaskOrder>,
    pub model_points: Vec<ModelPoint>,
    pub data_fractions: Vec<f64>,
    pub workers: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            weights: default_weight_grid(),
            orders: TaskOrder::all().to_vec(),
            model_points: vec![
                ModelPoint {
                    num_layers: 1,
                    model_dim: 16,
                    ffn_dim: 32,
                },
                ModelPoint {
                    num_layers: 2,
                    model_dim: 32,
                    ffn_dim: 64,
                },
                ModelPoint {
                    num_layers: 4,
                    model_dim: 64,
                    ffn_dim: 128,
                },
            ],
            data_fractions: vec![0.1, 0.25, 0.5, 1.0],
            workers: 1,
        }
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// The loss-weight triples compared by default, as `(λ_CD, λ_ER, λ_SD)`.
pub fn default_weight_grid() -> Vec<[f64; 3]> {
    vec![
        [1.0, 1.0, 1.0],
        [1.0, 2.0, 4.0],
        [1.0, 4.0, 2.0],
        [2.0, 1.0, 4.0],
        [4.0, 1.0, 2.0],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub head_mode: HeadMode,
    /// Loss weights `(λ_CD, λ_ER, λ_SD)`, used as given.
    pub lambda: [f64; 3],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Stop after this many optimizer steps in total.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Relative task frequencies in mixed batches; defaults to dataset sizes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportions: Option<[f64; 3]>,
    pub precision: Precision,
    pub quantize_frozen: bool,
    pub tied_lm_head: bool,
    /// Prepend one training demonstration per label to instruction prompts.
    pub few_shot: bool,
    pub backbone: BackboneConfig,
    pub adapter: AdapterSpec,
    pub schedule: ScheduleSpec,
    pub data: DataSpec,
    pub generate: GenerateSpec,
    pub sweep: SweepSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            head_mode: HeadMode::Cls,
            lambda: [1.0, 1.0, 1.0],
            learning_rate: 2e-4,
            batch_size: 32,
            epochs: 5,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Constant,
            max_steps: None,
            proportions: None,
            precision: Precision::F32,
            quantize_frozen: true,
            tied_lm_head: false,
            few_shot: false,
            backbone: BackboneConfig::default(),
            adapter: AdapterSpec::default(),
            schedule: ScheduleSpec::default(),
            data: DataSpec::default(),
            generate: GenerateSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: `d = 32`, two layers, rank 4, batch 8, and a
    /// learning rate large enough to fit small synthetic sets in a few
    /// hundred steps. Sequences up to 1280 tokens fit few-shot instruction
    /// templates.
    pub fn toy() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 8,
            epochs: 20,
            backbone: BackboneConfig {
                max_seq_len: 1280,
                ..BackboneConfig::tiny(32, 2, 2, crate::data::tokenizer::VOCAB_SIZE)
            },
            adapter: AdapterSpec {
                rank: 4,
                alpha: 16.0,
                ..AdapterSpec::default()
            },
            generate: GenerateSpec {
                train: 200,
                validation: 50,
                test: 50,
                train_priors_everywhere: false,
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Reads `s` on top of `base`: keys present in `s` replace the base
    /// values (tables merge key by key), everything else is kept.
    pub fn from_toml_over(base: &TrainConfig, s: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(s)?;
        let mut merged = toml::Table::try_from(base)?;
        merge_tables(&mut merged, overlay);
        let cfg: Self = merged.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {:?}", self.lambda)));
        }
        if self.lambda.iter().all(|&l| l == 0.0) {
            return Err(Error::Config("at least one lambda must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(Error::Config("data.train_fraction must be in (0, 1]".into()));
        }
        if let Some(stages) = &self.schedule.stage_epochs {
            if stages.len() != 3 || stages.contains(&0) {
                return Err(Error::Config("schedule.stage_epochs needs three positive budgets".into()));
            }
        }
        self.adapter.projections()?;
        Ok(())
    }

    /// Tasks with a positive loss weight.
    pub fn weighted_tasks(&self) -> Vec<Task> {
        Task::ALL
            .into_iter()
            .filter(|t| self.lambda[t.index()] > 0.0)
            .collect()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            adapter: self.adapter.clone(),
            head_mode: self.head_mode,
            tied_lm_head: self.tied_lm_head,
            quantize_frozen: self.quantize_frozen,
            seed: self.seed,
        }
    }

    pub fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// `(tasks, epochs)` of each training stage.
    pub fn stages(&self) -> Result<Vec<(Vec<Task>, usize)>> {
        let weighted = self.weighted_tasks();
        let order = self.schedule.order.0;
        let mode = self.schedule.mode;
        if mode == ScheduleMode::Mixed {
            return Ok(vec![(weighted, self.epochs)]);
        }
        let budgets = match &self.schedule.stage_epochs {
            Some(b) => b.clone(),
            None => {
                if self.epochs < 3 {
                    return Err(Error::Config(format!(
                        "{} epochs cannot be split over three stages",
                        self.epochs
                    )));
                }
                (0..3).map(|k| self.epochs / 3 + usize::from(k < self.epochs % 3)).collect()
            }
        };
        let mut stages = Vec::new();
        for (k, &epochs) in budgets.iter().enumerate() {
            let tasks: Vec<Task> = match mode {
                ScheduleMode::Sequential => vec![order[k]],
                _ => order[..=k].to_vec(),
            };
            let tasks: Vec<Task> = tasks.into_iter().filter(|t| weighted.contains(t)).collect();
            if !tasks.is_empty() {
                stages.push((tasks, epochs));
            }
        }
        Ok(stages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 2e-4);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.epochs, 5);
        assert_eq!(c.lambda, [1.0, 1.0, 1.0]);
        assert_eq!((c.adapter.rank, c.adapter.alpha), (64, 16.0));
        assert!(c.quantize_frozen);
        let toy = TrainConfig::toy();
        assert_eq!((toy.backbone.model_dim, toy.backbone.num_layers, toy.adapter.rank, toy.batch_size), (32, 2, 4, 8));
    }

    #[test]
    fn orders_are_the_six_permutations() {
        let all = TaskOrder::all();
        let names: Vec<String> = all.iter().map(ToString::to_string).collect();
        assert_eq!(names, ["C-S-R", "C-R-S", "S-R-C", "S-C-R", "R-C-S", "R-S-C"]);
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
        for bad in ["C-C-R", "C-R", "C-R-S-C", "X-R-S", "CR-S-C"] {
            assert!(bad.parse::<TaskOrder>().is_err(), "{bad}");
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let mut c = TrainConfig::toy();
        c.schedule.mode = ScheduleMode::Sequential;
        c.schedule.order = "R-S-C".parse().unwrap();
        c.max_steps = Some(40);
        let text = c.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);

        let err = TrainConfig::from_toml_str("learning_rat = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = TrainConfig::from_toml_str("[adapter]\nrnk = 3").unwrap_err();
        assert!(err.to_string().contains("rnk"), "{err}");
        assert!(TrainConfig::from_toml_str("lambda = [1.0, -1.0, 0.0]").is_err());
        assert!(TrainConfig::from_toml_str("lambda = [0.0, 0.0, 0.0]").is_err());
        let c = TrainConfig::from_toml_str("head_mode = \"IT\"\n[schedule]\norder = \"S-C-R\"").unwrap();
        assert_eq!(c.head_mode, HeadMode::It);
        assert_eq!(c.schedule.order.to_string(), "S-C-R");
    }

    #[test]
    fn overlay_keeps_unset_base_values() {
        let c = TrainConfig::from_toml_over(&TrainConfig::toy(), "seed = 9\n[backbone]\nnum_layers = 1\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.backbone.num_layers, 1);
        assert_eq!(c.backbone.model_dim, 32);
        assert_eq!(c.learning_rate, TrainConfig::toy().learning_rate);
        let err = TrainConfig::from_toml_over(&TrainConfig::toy(), "[adapter]\nrnak = 2\n").unwrap_err();
        assert!(err.to_string().contains("rnak"), "{err}");
    }

    #[test]
    fn stage_budgets() {
        let mut c = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        assert_eq!(c.stages().unwrap(), vec![(Task::ALL.to_vec(), 5)]);
        c.schedule.mode = ScheduleMode::Sequential;
        c.schedule.order = "R-S-C".parse().unwrap();
        let s = c.stages().unwrap();
        assert_eq!(
            s,
            vec![
                (vec![Task::EvidenceRanking], 2),
                (vec![Task::StanceDetection], 2),
                (vec![Task::ClaimDetection], 1)
            ]
        );
        c.schedule.mode = ScheduleMode::Cumulative;
        let s = c.stages().unwrap();
        assert_eq!(s[2].0.len(), 3);
        c.epochs = 2;
        assert!(c.stages().is_err());
        c.schedule.stage_epochs = Some(vec![1, 1, 1]);
        assert_eq!(c.stages().unwrap().len(), 3);
    }
}
