use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mtl_core::checkpoint::{checkpoint_dir, load_trainer, read_manifest, save_trainer};
use mtl_core::data::encode::{demonstrations_for, encode_example};
use mtl_core::data::synth::synth_splits;
use mtl_core::data::{dataset_path, file_labels, write_dataset, Encoding, Example, Splits, SPLIT_NAMES};
use mtl_core::eval::{evaluate, MetricsReport};
use mtl_core::report;
use mtl_core::tensor::{Precision, Real};
use mtl_core::trainer::{
    encode_splits, sweep_loss_weights, sweep_order, sweep_scale, RunResult, ScaleAxis, SweepRow,
    TrainConfig, Trainer,
};
use mtl_core::{Error, Result, Task, TaskMap};

use crate::{Cli, Command};

/// Resolved config: toy profile or defaults, then the config file, then
/// command-line overrides.
fn resolve_config(cli: &Cli) -> Result<TrainConfig> {
    let base = if cli.toy { TrainConfig::toy() } else { TrainConfig::default() };
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::from_toml_over(&base, &text)?
        }
        None => base,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.data {
        config.data.dir = dir.clone();
    }
    if let Some(w) = cli.workers {
        config.sweep.workers = w;
    }
    config.validate()?;
    Ok(config)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::GenData { size, force } => gen_data(&config, *size, *force),
        Command::Train => train(&config, &cli.out),
        Command::Eval {
            checkpoint,
            split,
            task,
        } => {
            let dir = checkpoint.clone().unwrap_or_else(|| checkpoint_dir(&cli.out));
            eval(&config.data.dir, &dir, split, task, &cli.out)
        }
        Command::SweepWeights => {
            let rows = sweep_loss_weights(
                &config,
                &load_splits(&config.data.dir, &Task::ALL)?,
                &config.sweep.weights,
                config.sweep.workers,
            )?;
            write_sweep(&cli.out, "sweep_weights", &rows, report::weights_table(&rows)?)
        }
        Command::SweepOrder { orders } => {
            let orders = if orders.is_empty() { config.sweep.orders.clone() } else { orders.clone() };
            let rows = sweep_order(
                &config,
                &load_splits(&config.data.dir, &config.weighted_tasks())?,
                &orders,
                config.sweep.workers,
            )?;
            write_sweep(&cli.out, "sweep_order", &rows, report::order_table(&rows)?)
        }
        Command::SweepScale { axis } => {
            let axis = ScaleAxis::from(*axis);
            let rows = sweep_scale(
                &config,
                &load_splits(&config.data.dir, &config.weighted_tasks())?,
                axis,
                config.sweep.workers,
            )?;
            let name = match axis {
                ScaleAxis::Model => "sweep_scale_model",
                ScaleAxis::Data => "sweep_scale_data",
            };
            write_sweep(&cli.out, name, &rows, report::scale_table(&rows)?)
        }
        Command::Score {
            checkpoint,
            task,
            text,
            second,
        } => {
            let dir = checkpoint.clone().unwrap_or_else(|| checkpoint_dir(&cli.out));
            score(&config.data.dir, &dir, *task, text, second.as_deref())
        }
    }
}

fn load_splits(dir: &Path, tasks: &[Task]) -> Result<Splits> {
    for &task in tasks {
        for split in SPLIT_NAMES {
            let path = dataset_path(dir, task, split);
            if !path.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing dataset {}", path.display()),
                )));
            }
        }
    }
    Splits::load(dir, tasks)
}

fn gen_data(config: &TrainConfig, size: Option<usize>, force: bool) -> Result<()> {
    let dir = &config.data.dir;
    let g = &config.generate;
    let sizes = size.map_or([g.train, g.validation, g.test], |n| [n; 3]);
    let paths: Vec<PathBuf> = Task::ALL
        .iter()
        .flat_map(|&t| SPLIT_NAMES.iter().map(move |s| dataset_path(dir, t, s)))
        .collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", p.display())));
        }
    }
    fs::create_dir_all(dir)?;
    let splits = synth_splits(sizes, g.train_priors_everywhere, config.seed)?;
    let mut counts = serde_json::Map::new();
    for task in Task::ALL {
        let mut per_split = serde_json::Map::new();
        for split in SPLIT_NAMES {
            let examples = &splits.split(split).expect("known split")[task];
            write_dataset(&dataset_path(dir, task, split), examples)?;
            let mut by_label = serde_json::Map::new();
            for (c, label) in file_labels(task).iter().enumerate() {
                let n = examples.iter().filter(|e| e.class() == c).count();
                by_label.insert(label.to_string(), n.into());
            }
            per_split.insert(split.to_string(), by_label.into());
        }
        counts.insert(task.code().to_lowercase(), per_split.into());
    }
    let manifest = serde_json::json!({
        "seed": config.seed,
        "sizes": { "train": sizes[0], "validation": sizes[1], "test": sizes[2] },
        "train_priors_everywhere": g.train_priors_everywhere,
        "counts": counts,
    });
    write(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    println!("wrote {} files to {}", paths.len(), dir.display());
    Ok(())
}

fn train(config: &TrainConfig, out: &Path) -> Result<()> {
    let splits = load_splits(&config.data.dir, &config.weighted_tasks())?;
    fs::create_dir_all(out)?;
    write(&out.join("config.toml"), &config.to_toml_string()?)?;
    let result = match config.precision {
        Precision::F32 => train_in::<f32>(config, &splits, out)?,
        Precision::F64 => train_in::<f64>(config, &splits, out)?,
    };
    write_run(out, &result)?;
    let summary: Vec<String> = Task::ALL
        .iter()
        .filter_map(|&t| result.test[t].as_ref().map(|r| format!("{t} Mac-F1 {:.4}", r.macro_f1)))
        .collect();
    println!("trained {} steps; test {}", result.steps, summary.join(", "));
    Ok(())
}

fn train_in<F: Real>(config: &TrainConfig, splits: &Splits, out: &Path) -> Result<RunResult> {
    let ckpt = checkpoint_dir(out);
    // A fresh run replaces any checkpoint left by an earlier one.
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt)?;
    }
    let mut trainer = Trainer::<F>::new(config)?;
    let result = trainer.fit_with(splits, |t| save_trainer(&ckpt, t))?;
    save_trainer(&ckpt, &trainer)?;
    Ok(result)
}

fn write_run(out: &Path, result: &RunResult) -> Result<()> {
    write(&out.join("run.json"), &(result.to_json()? + "\n"))?;
    write(&out.join("metrics.csv"), &report::runs_table(&[("run".into(), result)])?)?;
    write(&out.join("epochs.csv"), &report::epochs_table(result)?)?;
    for task in Task::ALL {
        if let Some(r) = &result.test[task] {
            let label = result.config.head_mode.name().to_string();
            write(
                &out.join(format!("metrics_{}.csv", task.code().to_lowercase())),
                &report::task_table(task, &[(label, r)])?,
            )?;
        }
    }
    let mut log = String::new();
    writeln!(log, "# resolved config").unwrap();
    log.push_str(&result.config.to_toml_string()?);
    writeln!(log, "\n# epochs").unwrap();
    for e in &result.epochs {
        writeln!(
            log,
            "epoch {} stage {} steps {} loss {:.6} val_macro_f1 {}",
            e.epoch,
            e.stage,
            e.steps,
            e.total_loss,
            e.validation_macro_f1.map_or("-".into(), |v| format!("{v:.4}"))
        )
        .unwrap();
    }
    writeln!(
        log,
        "best_epoch {:?} steps {} truncated_inputs {} wall_clock_secs {:.3}",
        result.best_epoch, result.steps, result.truncated_inputs, result.wall_clock_secs
    )
    .unwrap();
    write(&out.join("run.log"), &log)
}

fn write_sweep(out: &Path, name: &str, rows: &[SweepRow], table: String) -> Result<()> {
    // Timings go to the log so the table and JSON are reproducible byte for
    // byte.
    let mut log = String::new();
    let mut stable = rows.to_vec();
    for row in &mut stable {
        writeln!(log, "{:?} wall_clock_secs {:.3}", row.point, row.result.wall_clock_secs).unwrap();
        row.result.wall_clock_secs = 0.0;
    }
    write(&out.join(format!("{name}.csv")), &table)?;
    write(&out.join(format!("{name}.json")), &(serde_json::to_string_pretty(&stable)? + "\n"))?;
    write(&out.join(format!("{name}.log")), &log)?;
    println!("wrote {} rows to {}", rows.len(), out.join(format!("{name}.csv")).display());
    Ok(())
}

fn checkpoint_precision(dir: &Path) -> Result<Precision> {
    Ok(read_manifest(dir)?.precision)
}

fn eval(data: &Path, ckpt: &Path, split: &str, tasks: &[Task], out: &Path) -> Result<()> {
    if !SPLIT_NAMES.contains(&split) {
        return Err(Error::Config(format!("unknown split {split:?}")));
    }
    let reports = match checkpoint_precision(ckpt)? {
        Precision::F32 => eval_in::<f32>(data, ckpt, split, tasks)?,
        Precision::F64 => eval_in::<f64>(data, ckpt, split, tasks)?,
    };
    fs::create_dir_all(out)?;
    for task in Task::ALL {
        if let Some((label, r)) = &reports[task] {
            let path = out.join(format!("eval_{split}_{}.csv", task.code().to_lowercase()));
            write(&path, &report::task_table(task, &[(label.clone(), r)])?)?;
            println!("{task} {split}: Mac-F1 {:.4} Wei-F1 {:.4} -> {}", r.macro_f1, r.weighted_f1, path.display());
        }
    }
    let json = reports.map(|_, r| r.as_ref().map(|(_, r)| r.clone()));
    write(&out.join(format!("eval_{split}.json")), &(serde_json::to_string_pretty(&json)? + "\n"))
}

fn eval_in<F: Real>(
    data: &Path,
    ckpt: &Path,
    split: &str,
    tasks: &[Task],
) -> Result<TaskMap<Option<(String, MetricsReport)>>> {
    let trainer = load_trainer::<F>(ckpt)?;
    let config = &trainer.config;
    let tasks = if tasks.is_empty() { config.weighted_tasks() } else { tasks.to_vec() };
    let splits = load_splits(data, &tasks)?;
    let encoded = encode_splits(&trainer.model, config, &splits)?;
    let set = match split {
        "train" => &encoded.train,
        "validation" => &encoded.validation,
        _ => &encoded.test,
    };
    let mut out = TaskMap::default();
    for task in tasks {
        out[task] = Some((
            config.head_mode.name().to_string(),
            evaluate(&trainer.model, &set[task], task)?,
        ));
    }
    Ok(out)
}

fn score(data: &Path, ckpt: &Path, task: Task, text: &str, second: Option<&str>) -> Result<()> {
    let scores = match checkpoint_precision(ckpt)? {
        Precision::F32 => score_in::<f32>(data, ckpt, task, text, second)?,
        Precision::F64 => score_in::<f64>(data, ckpt, task, text, second)?,
    };
    for (label, ll) in scores {
        println!("{label}\t{ll:.6}");
    }
    Ok(())
}

fn score_in<F: Real>(
    data: &Path,
    ckpt: &Path,
    task: Task,
    text: &str,
    second: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    let trainer = load_trainer::<F>(ckpt)?;
    let model = &trainer.model;
    if task.is_pair() && second.is_none() {
        return Err(Error::Config(format!("{task} needs --second")));
    }
    let pool = if trainer.config.few_shot {
        load_splits(data, &[task])?.train[task].clone()
    } else {
        Vec::new()
    };
    let demonstrations = demonstrations_for(task, &pool, trainer.config.few_shot);
    let enc = Encoding {
        mode: model.mode(),
        max_seq_len: model.backbone.config().max_seq_len,
        verbalizer: &model.verbalizer,
        demonstrations: &demonstrations,
    };
    let example = Example::from_parts(task, 0, text.to_string(), second.unwrap_or_default().to_string())?;
    let (encoded, _) = encode_example(&example, &enc)?;
    let ll = model.label_log_likelihoods(&encoded)?;
    Ok((0..task.num_classes())
        .map(|c| (model.verbalizer.label(task, c).to_string(), ll[c]))
        .collect())
}
