use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run, run_schedule, ModelPoint, RunResult, ScheduleMode, TaskOrder, TrainConfig};
use crate::data::Splits;
use crate::error::{Error, Result};

/// Which scale knob a scale sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleAxis {
    Model,
    Data,
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePoint {
    Weights([f64; 3]),
    Order(TaskOrder),
    Model(ModelPoint),
    DataFraction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: ScalePoint,
    pub result: RunResult,
}

/// Runs `configs` on a pool of `workers` threads. Results come back in input
/// order and each run depends only on its own config.
fn run_all<G>(points: Vec<(ScalePoint, TrainConfig)>, splits: &Splits, workers: usize, go: G) -> Result<Vec<SweepRow>>
where
    G: Fn(&TrainConfig, &Splits) -> Result<RunResult> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| {
        points
            .into_par_iter()
            .map(|(point, config)| {
                log::info!("sweep point {point:?}");
                go(&config, splits).map(|result| SweepRow { point, result })
            })
            .collect()
    })
}

/// One mixed-batch run per loss-weight vector.
pub fn sweep_loss_weights(base: &TrainConfig, splits: &Splits, grid: &[[f64; 3]], workers: usize) -> Result<Vec<SweepRow>> {
    let points = grid
        .iter()
        .map(|&w| {
            let mut c = base.clone();
            c.lambda = w;
            c.schedule.mode = ScheduleMode::Mixed;
            c.validate()?;
            Ok((ScalePoint::Weights(w), c))
        })
        .collect::<Result<Vec<_>>>()?;
    run_all(points, splits, workers, run)
}

/// One staged run per task order. A mixed base schedule is run cumulatively.
pub fn sweep_order(base: &TrainConfig, splits: &Splits, orders: &[TaskOrder], workers: usize) -> Result<Vec<SweepRow>> {
    let points = orders
        .iter()
        .map(|&o| {
            let mut c = base.clone();
            c.schedule.order = o;
            c.validate()?;
            Ok((ScalePoint::Order(o), c))
        })
        .collect::<Result<Vec<_>>>()?;
    run_all(points, splits, workers, run_schedule)
}

/// Varies backbone size or training-set fraction along `axis`, using the
/// points listed in the base config's sweep section.
pub fn sweep_scale(base: &TrainConfig, splits: &Splits, axis: ScaleAxis, workers: usize) -> Result<Vec<SweepRow>> {
    let points: Vec<(ScalePoint, TrainConfig)> = match axis {
        ScaleAxis::Model => base
            .sweep
            .model_points
            .iter()
            .map(|p| {
                let mut c = base.clone();
                c.backbone.num_layers = p.num_layers;
                c.backbone.model_dim = p.model_dim;
                c.backbone.ffn_dim = p.ffn_dim;
                c.validate()?;
                Ok((ScalePoint::Model(*p), c))
            })
            .collect::<Result<_>>()?,
        ScaleAxis::Data => base
            .sweep
            .data_fractions
            .iter()
            .map(|&f| {
                let mut c = base.clone();
                c.data.train_fraction = f;
                c.validate()?;
                Ok((ScalePoint::DataFraction(f), c))
            })
            .collect::<Result<_>>()?,
    };
    if points.is_empty() {
        return Err(Error::Config(format!("no {axis:?} points to sweep")));
    }
    run_all(points, splits, workers, run)
}
