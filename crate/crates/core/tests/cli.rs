use std::path::Path;
use std::process::{Command, Output};

use gp2e::train::read_metrics;

const TINY: &str = "\
[run]
task = ToyFill
demo_count = 3

[paths]
demos = demos.gp2d
checkpoint = best.ckpt
metrics = metrics.csv
plot = curve.svg

[policy]
n_points = 16
channel_plan = 6,8,8,8
d_k = 8
head_hidden = 8

[train]
batch_size = 256
sim_steps = 500
max_train_steps = 4
eval_interval = 2
eval_episodes = 2
";

fn gp2e(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gp2e"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn single_error_line(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    dir
}

#[test]
fn gen_demos_is_deterministic_and_atomic() {
    let dir = setup();
    let d = dir.path();
    let out = stdout(&gp2e(d, &["gen-demos", "--config", "run.cfg"]));
    assert!(out.contains("3 episodes"), "{out}");
    let first = std::fs::read(d.join("demos.gp2d")).unwrap();
    stdout(&gp2e(d, &["gen-demos", "--config", "run.cfg"]));
    assert_eq!(first, std::fs::read(d.join("demos.gp2d")).unwrap());

    let bad = TINY.replace("demos = demos.gp2d", "demos = missing/dir/demos.gp2d");
    std::fs::write(d.join("bad.cfg"), bad).unwrap();
    single_error_line(&gp2e(d, &["gen-demos", "--config", "bad.cfg"]));
    assert!(!d.join("missing").exists());
}

#[test]
fn train_eval_plot_round() {
    let dir = setup();
    let d = dir.path();
    stdout(&gp2e(d, &["gen-demos", "--config", "run.cfg"]));
    let out = stdout(&gp2e(d, &["train", "--config", "run.cfg"]));
    assert!(out.contains("best success rate"), "{out}");
    let rows = read_metrics(&d.join("metrics.csv")).unwrap();
    let stages: Vec<u32> = rows.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [1, 1, 2, 2]);
    assert_eq!((rows[0].batch_size, rows[0].sim_steps), (256, 500));
    assert_eq!((rows[2].batch_size, rows[2].sim_steps), (205, 450));
    assert_eq!(rows[3].step, 8);

    let metrics = std::fs::read(d.join("metrics.csv")).unwrap();
    stdout(&gp2e(d, &["train", "--config", "run.cfg"]));
    assert_eq!(metrics, std::fs::read(d.join("metrics.csv")).unwrap());

    let rate = stdout(&gp2e(d, &["eval", "--config", "run.cfg"]));
    assert_eq!(rate.trim().len(), 5, "{rate}");
    assert_eq!(rate, stdout(&gp2e(d, &["eval", "--config", "run.cfg"])));
    let expert = stdout(&gp2e(d, &["eval", "--config", "run.cfg", "--expert"]));
    assert_eq!(expert.trim(), "1.000");

    let summary = stdout(&gp2e(d, &["plot", "--config", "run.cfg"]));
    assert!(summary.starts_with("best success"), "{summary}");
    let svg = std::fs::read(d.join("curve.svg")).unwrap();
    assert!(String::from_utf8_lossy(&svg).contains("stage-boundary"));
    stdout(&gp2e(d, &["plot", "--config", "run.cfg"]));
    assert_eq!(svg, std::fs::read(d.join("curve.svg")).unwrap());

    let single = stdout(&gp2e(
        d,
        &["train", "--config", "run.cfg", "--single-stage", "--no-attention"],
    ));
    assert!(single.contains("stage 1"), "{single}");
    let rows = read_metrics(&d.join("metrics.csv")).unwrap();
    assert!(rows.iter().all(|r| r.stage == 1));

    stdout(&gp2e(d, &["train", "--config", "run.cfg", "--no-finetune"]));
    let rows = read_metrics(&d.join("metrics.csv")).unwrap();
    assert_eq!((rows[2].batch_size, rows[2].sim_steps), (256, 500));
}

#[test]
fn bad_inputs_exit_nonzero_with_one_line() {
    let dir = setup();
    let d = dir.path();
    let err = single_error_line(&gp2e(d, &["eval", "--config", "run.cfg"]));
    assert!(err.contains("best.ckpt"), "{err}");
    std::fs::write(d.join("best.ckpt"), b"GP2Ejunk").unwrap();
    single_error_line(&gp2e(d, &["eval", "--config", "run.cfg"]));

    std::fs::write(
        d.join("metrics.csv"),
        "stage,step,loss,success,batch_size,sim_steps,grad_norm\n1,2,0.1,0.5,8,10,1.0\n1,x,0.1,0.5,8,10,1.0\n",
    )
    .unwrap();
    let err = single_error_line(&gp2e(d, &["plot", "--config", "run.cfg"]));
    assert!(err.contains("line 3"), "{err}");

    std::fs::write(d.join("neg.cfg"), "[train]\nbatch_size = -1\n").unwrap();
    let err = single_error_line(&gp2e(d, &["train", "--config", "neg.cfg"]));
    assert!(err.contains("line 2") && err.contains("batch_size"), "{err}");

    let err = single_error_line(&gp2e(d, &["train", "--config", "run.cfg"]));
    assert!(err.contains("demos.gp2d"), "{err}");
}

#[test]
fn gradcheck_reports_one_similarity_matrix() {
    let dir = setup();
    let out = stdout(&gp2e(dir.path(), &["gradcheck", "--config", "run.cfg"]));
    assert!(out.contains("similarity matrices per forward: 1"), "{out}");
    assert!(!out.contains("FAIL"));
}
