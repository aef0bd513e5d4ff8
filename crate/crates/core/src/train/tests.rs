use super::*;
use crate::env::{generate_demos, ScriptedExpert, TaskKind};
use crate::policy::PolicyConfig;

fn tiny_config() -> PolicyConfig {
    PolicyConfig {
        n_points: 8,
        channel_plan: [6, 4, 4, 4],
        d_k: 4,
        head_hidden: 8,
        ..PolicyConfig::default()
    }
}

fn tiny_dataset() -> DemoDataset {
    let spec = TaskSpec::new(TaskKind::ToyFill);
    DemoDataset::from_file(generate_demos(&spec, 2, 0, 8, 500).unwrap())
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        batch_size: 10,
        sim_steps: 100,
        max_train_steps: 6,
        eval_interval: 3,
        eval_episodes: 2,
        ..TrainConfig::default()
    }
}

fn no_hook() -> impl FnMut(&MetricsRow, Option<&Checkpoint>) -> Result<(), TrainError> {
    |_, _| Ok(())
}

#[test]
fn bc_loss_examples() {
    let t = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    assert_eq!(bc_loss(&t, &t).unwrap(), 0.0);
    let p = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    assert_eq!(bc_loss(&p, &Tensor::zeros(&[1, 2])).unwrap(), 0.5);
    let p = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
    assert_eq!(bc_loss(&p, &Tensor::zeros(&[2, 1])).unwrap(), 5.0);
    assert!(bc_loss(&p, &Tensor::zeros(&[1, 2])).is_err());
}

#[test]
fn schedule_examples() {
    let sched = StageSchedule::default();
    let base = TrainConfig::default();
    let s2 = finetune_schedule(&base, &sched);
    assert_eq!((s2.batch_size, s2.sim_steps), (205, 450));
    assert_eq!(s2.learning_rate, base.learning_rate);
    let s3 = finetune_schedule(&s2, &sched);
    assert_eq!((s3.batch_size, s3.sim_steps), (164, 405));
    let one = TrainConfig {
        batch_size: 1,
        sim_steps: 1,
        ..base
    };
    let s = finetune_schedule(&one, &sched);
    assert_eq!((s.batch_size, s.sim_steps), (1, 1));
}

#[test]
fn chunked_gradient_matches_single_tape() {
    let policy = Policy::new(tiny_config(), 3).unwrap();
    let data = tiny_dataset();
    let batch = data.batch((0..11).map(|i| i % data.len()).collect()).unwrap();
    let (loss, grads) = batch_gradient(&policy, &batch).unwrap();

    let mut tape = Tape::new();
    let bp = policy.params.bind(&mut tape);
    let acts: Vec<_> = batch
        .observations
        .iter()
        .map(|o| forward_on_tape(&mut tape, o, &bp, &policy.config).unwrap().action)
        .collect();
    let pred = tape.concat_rows(&acts).unwrap();
    let target = tape.constant(batch.actions.clone());
    let l = tape.mse(pred, target).unwrap();
    let whole = tape.value(l).item();
    let reference = tape.backward(l).unwrap();
    assert!((loss - whole).abs() < 1e-12);
    for (name, g) in reference.iter() {
        let c = grads.get(name).unwrap();
        for (a, b) in g.data().iter().zip(c.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{name}");
        }
    }
}

#[test]
fn single_final_evaluation_when_interval_exceeds_steps() {
    let cfg = TrainConfig {
        eval_interval: 100,
        ..quick_config()
    };
    let task = TaskSpec::new(TaskKind::ToyFill);
    let out = train_stage(
        &cfg,
        1,
        0,
        &tiny_dataset(),
        &task,
        Policy::new(tiny_config(), 1).unwrap(),
        &mut no_hook(),
    )
    .unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].step, 6);
}

#[test]
fn training_is_deterministic() {
    let task = TaskSpec::new(TaskKind::ToyFill);
    let data = tiny_dataset();
    let run = || {
        let out = train_stage(
            &quick_config(),
            1,
            0,
            &data,
            &task,
            Policy::new(tiny_config(), 1).unwrap(),
            &mut no_hook(),
        )
        .unwrap();
        let bytes = metrics_to_csv(&out.rows).unwrap();
        (bytes, out.last.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert!(pa.bit_eq(&pb));
}

#[test]
fn two_stage_reloads_best_and_scales() {
    let task = TaskSpec::new(TaskKind::ToyFill);
    let data = tiny_dataset();
    let cfg = TrainConfig {
        batch_size: 20,
        sim_steps: 50,
        ..quick_config()
    };
    let mut seen = Vec::new();
    let mut hook = |row: &MetricsRow, _: Option<&Checkpoint>| {
        seen.push((row.stage, row.step));
        Ok(())
    };
    let out = run_two_stage(
        &cfg,
        &StageSchedule::default(),
        &data,
        &task,
        Policy::new(tiny_config(), 2).unwrap(),
        &mut hook,
    )
    .unwrap();
    assert_eq!(seen, vec![(1, 3), (1, 6), (2, 9), (2, 12)]);
    let rows = out.rows();
    assert!(rows[..2].iter().all(|r| (r.batch_size, r.sim_steps) == (20, 50)));
    assert!(rows[2..].iter().all(|r| (r.batch_size, r.sim_steps) == (16, 45)));
    assert!(out.stage2.start.bit_eq(&out.stage1.best.params));

    let probe = &data.get(0).0.clone();
    let a = Policy::from_parts(tiny_config(), out.stage2.start.clone())
        .unwrap()
        .forward(probe)
        .unwrap();
    let b = Policy::from_parts(tiny_config(), out.stage1.best.params.clone())
        .unwrap()
        .forward(probe)
        .unwrap();
    assert!(a.bit_eq(&b));

    let max = rows.iter().map(|r| r.success).fold(0.0, f64::max);
    assert_eq!(out.best.best_success, max);
    assert!(out.best.best_success >= out.stage1.best.best_success);
}

#[test]
fn expert_scores_perfectly_and_null_policy_fails() {
    let task = TaskSpec::new(TaskKind::ToyFill);
    let expert = evaluate_with(
        || ScriptedExpert { spec: task.clone() },
        &task,
        20,
        500,
        500,
        8,
    )
    .unwrap();
    assert_eq!(expert, 1.0);

    let mut null = Policy::new(tiny_config(), 0).unwrap();
    let names: Vec<String> = null.params.names().cloned().collect();
    for n in names {
        let t = null.params.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
    let before = null.params.clone();
    let rate = evaluate(&null, &task, 4, 500, 100).unwrap();
    assert_eq!(rate, 0.0);
    assert!(null.params.bit_eq(&before));
    assert_eq!(evaluate(&null, &task, 4, 500, 100).unwrap(), rate);
}

#[test]
fn empty_dataset_is_refused() {
    let task = TaskSpec::new(TaskKind::ToyFill);
    let err = train_stage(
        &quick_config(),
        1,
        0,
        &DemoDataset::new(Vec::new()),
        &task,
        Policy::new(tiny_config(), 0).unwrap(),
        &mut no_hook(),
    );
    assert!(matches!(err, Err(TrainError::EmptyDataset)));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(StageSchedule {
        batch_scale: 1.2,
        sim_scale: 0.9
    }
    .validate()
    .is_err());
}
