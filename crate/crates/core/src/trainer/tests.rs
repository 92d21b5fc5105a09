use super::*;
use crate::backbone::{AdapterSpec, BackboneConfig};
use crate::data::synth::synth_splits;
use crate::data::tokenizer::VOCAB_SIZE;
use crate::tensor::Tensor;

fn small_config() -> TrainConfig {
    TrainConfig {
        precision: Precision::F64,
        learning_rate: 1e-2,
        batch_size: 8,
        epochs: 3,
        backbone: BackboneConfig {
            max_seq_len: 64,
            ..BackboneConfig::tiny(16, 1, 2, VOCAB_SIZE)
        },
        adapter: AdapterSpec {
            rank: 4,
            alpha: 16.0,
            ..AdapterSpec::default()
        },
        ..TrainConfig::default()
    }
}

fn small_splits() -> Splits {
    synth_splits([24, 8, 8], true, 5).unwrap()
}

#[test]
fn total_loss_is_weighted_sum() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::scalar(0.5));
    let b = tape.constant(Tensor::scalar(2.0));
    let losses = TaskMap::new(Some(a), None, Some(b));
    let total = compose_total_loss(&mut tape, &losses, [2.0, 7.0, 0.25]).unwrap().unwrap();
    assert!((tape.value(total).item() - (2.0 * 0.5 + 0.25 * 2.0)).abs() < 1e-15);
}

#[test]
fn zero_weight_task_stays_off_the_tape() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::scalar(0.5));
    let b = tape.constant(Tensor::scalar(2.0));
    let before = tape.len();
    let total = compose_total_loss(&mut tape, &TaskMap::new(Some(a), Some(b), None), [1.0, 0.0, 1.0])
        .unwrap()
        .unwrap();
    assert_eq!(total, a);
    assert_eq!(tape.len(), before);
    assert!(compose_total_loss(&mut tape, &TaskMap::new(Some(a), None, None), [0.0, 1.0, 1.0])
        .unwrap()
        .is_none());
}

#[test]
fn negative_weight_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::scalar(0.5));
    let r = compose_total_loss(&mut tape, &TaskMap::new(Some(a), None, None), [-1.0, 1.0, 1.0]);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn training_lowers_the_loss() {
    let config = small_config();
    let splits = small_splits();
    let mut trainer = Trainer::<f64>::new(&config).unwrap();
    let data = encode_splits(&trainer.model, &config, &splits).unwrap();
    let batches = make_mixed_batches(&data.train, 72, 1, [1.0; 3]).unwrap();
    let batch = &batches[0];
    let first = trainer.train_step(batch, config.lambda).unwrap().total_loss;
    let mut last = first;
    for _ in 0..30 {
        last = trainer.train_step(batch, config.lambda).unwrap().total_loss;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert_eq!(trainer.step, 31);
}

#[test]
fn zero_weight_task_head_is_untouched() {
    let mut config = small_config();
    config.lambda = [1.0, 0.0, 1.0];
    config.weight_decay = 0.1;
    let mut trainer = Trainer::<f64>::new(&config).unwrap();
    let ids = trainer.model.heads.task_param_ids(Task::EvidenceRanking);
    let before: Vec<Tensor<f64>> = ids.iter().map(|&i| trainer.model.store.get(i).value().clone()).collect();
    trainer.fit(&small_splits()).unwrap();
    for (&id, b) in ids.iter().zip(&before) {
        assert_eq!(trainer.model.store.get(id).value(), b);
        assert!(trainer.optimizer.moments(id).is_none());
    }
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let config = small_config();
    let mut trainer = Trainer::<f64>::new(&config).unwrap();
    let data = encode_splits(&trainer.model, &config, &small_splits()).unwrap();
    let batch = &make_mixed_batches(&data.train, 16, 1, [1.0; 3]).unwrap()[0];
    let id = trainer.model.heads.task_param_ids(Task::ClaimDetection)[0];
    trainer.model.store.get_mut(id).value_mut().data_mut()[0] = f64::NAN;
    let before: Vec<Tensor<f64>> = trainer.model.store.iter().map(|(_, p)| p.value().clone()).collect();
    match trainer.train_step(batch, config.lambda) {
        Err(Error::NumericalAbort { step: 0, .. }) => {}
        other => panic!("expected abort, got {other:?}"),
    }
    for ((_, p), b) in trainer.model.store.iter().zip(&before) {
        let same = p.value().data().iter().zip(b.data()).all(|(x, y)| x == y || (x.is_nan() && y.is_nan()));
        assert!(same);
    }
    assert_eq!(trainer.step, 0);
}

#[test]
fn runs_are_reproducible() {
    let config = small_config();
    let splits = small_splits();
    let mut a = run(&config, &splits).unwrap();
    let mut b = run(&config, &splits).unwrap();
    a.wall_clock_secs = 0.0;
    b.wall_clock_secs = 0.0;
    assert_eq!(a, b);
    assert_eq!(a.epochs.len(), 3);
    assert!(a.best_epoch.is_some());
    assert!(Task::ALL.iter().all(|&t| a.test[t].is_some()));
}

#[test]
fn max_steps_caps_training() {
    let mut config = small_config();
    config.max_steps = Some(4);
    let r = run(&config, &small_splits()).unwrap();
    assert_eq!(r.steps, 4);
    assert_eq!(r.epochs.iter().map(|e| e.steps).sum::<usize>(), 4);
}

#[test]
fn sequential_schedule_visits_one_task_per_stage() {
    let mut config = small_config();
    config.schedule.mode = ScheduleMode::Sequential;
    config.schedule.order = "S-R-C".parse().unwrap();
    let r = run(&config, &small_splits()).unwrap();
    let tasks: Vec<Vec<Task>> = r.epochs.iter().map(|e| e.tasks.clone()).collect();
    assert_eq!(
        tasks,
        vec![vec![Task::StanceDetection], vec![Task::EvidenceRanking], vec![Task::ClaimDetection]]
    );
    // Validation covers every weighted task after each stage.
    assert!(r.epochs.iter().all(|e| Task::ALL.iter().all(|&t| e.validation[t].is_some())));
}

#[test]
fn precision_mismatch_rejected() {
    let config = small_config();
    assert!(matches!(Trainer::<f32>::new(&config), Err(Error::Config(_))));
}

#[test]
fn sweeps_keep_input_order_across_workers() {
    let mut config = small_config();
    config.epochs = 1;
    config.max_steps = Some(2);
    let splits = small_splits();
    let grid = [[1.0, 1.0, 1.0], [1.0, 2.0, 4.0], [4.0, 1.0, 2.0]];
    let one = sweep_loss_weights(&config, &splits, &grid, 1).unwrap();
    let three = sweep_loss_weights(&config, &splits, &grid, 3).unwrap();
    assert_eq!(one.len(), 3);
    for ((a, b), w) in one.iter().zip(&three).zip(grid) {
        assert_eq!(a.point, ScalePoint::Weights(w));
        assert_eq!(a.point, b.point);
        assert_eq!(a.result.test, b.result.test);
    }
}

#[test]
fn order_sweep_runs_cumulatively() {
    let mut config = small_config();
    config.max_steps = Some(3);
    let orders = ["C-S-R".parse().unwrap(), "R-C-S".parse().unwrap()];
    let rows = sweep_order(&config, &small_splits(), &orders, 2).unwrap();
    assert_eq!(rows[1].point, ScalePoint::Order(orders[1]));
    assert_eq!(rows[1].result.config.schedule.mode, ScheduleMode::Cumulative);
    assert_eq!(rows[1].result.epochs[0].tasks, vec![Task::EvidenceRanking]);
}
