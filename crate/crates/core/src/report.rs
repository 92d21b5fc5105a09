//! Comma-separated result tables. Every table is computed from persisted
//! [`RunResult`]s and contains no timing, so repeated runs with the same
//! seeds produce identical files.

use crate::error::Result;
use crate::eval::MetricsReport;
use crate::task::{Task, TaskMap};
use crate::trainer::{RunResult, ScalePoint, SweepRow};

/// Decimal places of every metric cell.
pub const DECIMALS: usize = 4;

fn class_column(task: Task, class: usize) -> &'static str {
    match task {
        Task::ClaimDetection => ["T-F1", "F-F1"][class],
        Task::EvidenceRanking => ["Rel-F1", "NRel-F1"][class],
        Task::StanceDetection => ["Sup-F1", "P-Sup-F1", "P-Ref-F1", "Ref-F1"][class],
    }
}

/// Per-class F1 columns followed by `Mac-F1` and `Wei-F1`.
pub fn task_columns(task: Task) -> Vec<String> {
    let mut cols: Vec<String> = (0..task.num_classes())
        .map(|c| class_column(task, c).to_string())
        .collect();
    cols.push("Mac-F1".into());
    cols.push("Wei-F1".into());
    cols
}

fn fmt(x: f64) -> String {
    format!("{x:.DECIMALS$}")
}

fn task_cells(task: Task, report: Option<&MetricsReport>) -> Vec<String> {
    match report {
        Some(r) => r
            .classes
            .iter()
            .map(|c| fmt(c.f1))
            .chain([fmt(r.macro_f1), fmt(r.weighted_f1)])
            .collect(),
        None => vec![String::new(); task.num_classes() + 2],
    }
}

fn summary_cells(test: &TaskMap<Option<MetricsReport>>) -> Vec<String> {
    Task::ALL
        .iter()
        .flat_map(|&t| match &test[t] {
            Some(r) => [fmt(r.macro_f1), fmt(r.weighted_f1)],
            None => [String::new(), String::new()],
        })
        .collect()
}

fn summary_columns() -> Vec<String> {
    Task::ALL
        .iter()
        .flat_map(|t| [format!("{} Mac-F1", t.code()), format!("{} Wei-F1", t.code())])
        .collect()
}

fn to_csv(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One task's metrics, one row per labelled report.
pub fn task_table(task: Task, rows: &[(String, &MetricsReport)]) -> Result<String> {
    let mut header = vec!["Model".to_string()];
    header.extend(task_columns(task));
    let body = rows
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.clone()];
            row.extend(task_cells(task, Some(r)));
            row
        })
        .collect();
    to_csv(header, body)
}

/// Test metrics of whole runs: per-class and averaged F1 for every task,
/// columns prefixed with the task code.
pub fn runs_table(rows: &[(String, &RunResult)]) -> Result<String> {
    let mut header = vec!["Model".to_string(), "Mode".to_string()];
    for t in Task::ALL {
        header.extend(task_columns(t).into_iter().map(|c| format!("{} {c}", t.code())));
    }
    let body = rows
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.clone(), r.config.head_mode.name().to_string()];
            for t in Task::ALL {
                row.extend(task_cells(t, r.test[t].as_ref()));
            }
            row
        })
        .collect();
    to_csv(header, body)
}

/// Loss-weight sweep: the three weights, then macro and weighted F1 per task.
pub fn weights_table(rows: &[SweepRow]) -> Result<String> {
    let mut header: Vec<String> = Task::ALL.iter().map(|t| t.code().to_string()).collect();
    header.extend(summary_columns());
    let body = rows
        .iter()
        .map(|row| {
            let w = row.result.config.lambda;
            let mut cells: Vec<String> = w.iter().map(|x| format!("{x}")).collect();
            cells.extend(summary_cells(&row.result.test));
            cells
        })
        .collect();
    to_csv(header, body)
}

/// Task-order sweep: one row per order such as `C-S-R`.
pub fn order_table(rows: &[SweepRow]) -> Result<String> {
    let mut header = vec!["Order".to_string(), "Schedule".to_string()];
    header.extend(summary_columns());
    let body = rows
        .iter()
        .map(|row| {
            let s = &row.result.config.schedule;
            let mut cells = vec![s.order.to_string(), format!("{:?}", s.mode).to_lowercase()];
            cells.extend(summary_cells(&row.result.test));
            cells
        })
        .collect();
    to_csv(header, body)
}

/// Scale sweep curve data: the point, then per-task F1.
pub fn scale_table(rows: &[SweepRow]) -> Result<String> {
    let model_axis = rows.iter().any(|r| matches!(r.point, ScalePoint::Model(_)));
    let mut header: Vec<String> = if model_axis {
        vec!["Layers".into(), "Dim".into(), "FFN".into(), "Trainable".into()]
    } else {
        vec!["Fraction".into(), "Train".into()]
    };
    header.extend(summary_columns());
    let body = rows
        .iter()
        .map(|row| {
            let c = &row.result.config;
            let mut cells = if model_axis {
                vec![
                    c.backbone.num_layers.to_string(),
                    c.backbone.model_dim.to_string(),
                    c.backbone.ffn_dim.to_string(),
                    row.result.trainable_scalars.to_string(),
                ]
            } else {
                vec![format!("{}", c.data.train_fraction), row.result.train_examples.to_string()]
            };
            cells.extend(summary_cells(&row.result.test));
            cells
        })
        .collect();
    to_csv(header, body)
}

/// Per-epoch training curve of one run.
pub fn epochs_table(result: &RunResult) -> Result<String> {
    let mut header = vec!["Epoch".to_string(), "Stage".into(), "Tasks".into(), "Steps".into(), "Loss".into()];
    for t in Task::ALL {
        header.push(format!("{} Loss", t.code()));
    }
    for t in Task::ALL {
        header.push(format!("{} Val Mac-F1", t.code()));
    }
    let body = result
        .epochs
        .iter()
        .map(|e| {
            let mut row = vec![
                e.epoch.to_string(),
                e.stage.to_string(),
                e.tasks.iter().map(|t| t.letter()).collect(),
                e.steps.to_string(),
                format!("{:.6}", e.total_loss),
            ];
            for t in Task::ALL {
                row.push(e.task_losses[t].map(|l| format!("{l:.6}")).unwrap_or_default());
            }
            for t in Task::ALL {
                row.push(e.validation[t].as_ref().map(|r| fmt(r.macro_f1)).unwrap_or_default());
            }
            row
        })
        .collect();
    to_csv(header, body)
}
