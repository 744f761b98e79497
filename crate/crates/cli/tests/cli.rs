use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
ablation_seeds = [0]
expert_counts = [1, 2]

[gen]
entities = 3
length = 300
seed = 1
noise_std = 0.1
coupling = [[1.0, 0.5, 0.0], [0.0, 1.0, 0.5], [0.5, 0.0, 1.0]]
base = [
  { freq = 0.05, amp = 1.0, phase = 0.0 },
  { freq = 0.03, amp = 1.0, phase = 0.5 },
  { freq = 0.02, amp = 1.0, phase = 1.0 },
]
anomalies = [
  { kind = "spike", start = 60, length = 4, magnitude = 1.5, entities = [0] },
  { kind = "level-shift", start = 200, length = 15, magnitude = 2.0, entities = [1] },
  { kind = "spike", start = 250, length = 4, magnitude = 1.5, entities = [2] },
]

[train]
stride = 4
batch_size = 8
epochs = 2
lr = 0.01

[train.model]
window = 12
hidden = 4
attn_dim = 4
layers = 2
ff_mult = 2
memory_slots = 2
memory_dim = 4
flow_hidden = 8

[paths]
data = "data.csv"
out_dir = "out"
"#;

fn graphmoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphmoe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

#[test]
fn gen_train_eval_plot() {
    let dir = setup();
    let d = dir.path();
    ok(&graphmoe(d, &["gen-data", "-c", "run.toml"]));
    ok(&graphmoe(d, &["train", "-c", "run.toml"]));
    assert!(d.join("out/model.ckpt").exists());
    let trace = fs::read_to_string(d.join("out/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(trace.starts_with("epoch,train_nll,val_nll\n"));

    let eval = graphmoe(d, &["eval", "-c", "run.toml"]);
    ok(&eval);
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("auroc "));
    for f in ["scores.csv", "routes.csv", "adjacency.csv", "report/metrics.csv", "report/roc.csv", "report/histogram.csv"] {
        assert!(d.join("out").join(f).exists(), "missing {f}");
    }
    let scores = fs::read_to_string(d.join("out/scores.csv")).unwrap();
    assert!(scores.starts_with("window_index,start_index,score,label\n"));
    let routes = fs::read_to_string(d.join("out/routes.csv")).unwrap();
    assert!(routes.starts_with("window_index,r_1,r_2\n"));

    fs::remove_dir_all(d.join("out/report")).unwrap();
    ok(&graphmoe(d, &["plot", "-c", "run.toml"]));
    let svg = fs::read_to_string(d.join("out/report/histogram.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn outputs_are_reproducible() {
    let dir = setup();
    let d = dir.path();
    ok(&graphmoe(d, &["gen-data", "-c", "run.toml"]));
    let data = fs::read(d.join("data.csv")).unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        ok(&graphmoe(d, &["gen-data", "-c", "run.toml"]));
        ok(&graphmoe(d, &["train", "-c", "run.toml"]));
        ok(&graphmoe(d, &["score", "-c", "run.toml"]));
        runs.push((
            fs::read(d.join("out/loss_trace.csv")).unwrap(),
            fs::read(d.join("out/scores.csv")).unwrap(),
            fs::read(d.join("out/model.ckpt")).unwrap(),
        ));
    }
    assert_eq!(fs::read(d.join("data.csv")).unwrap(), data);
    assert!(runs[0] == runs[1]);
}

#[test]
fn eval_without_checkpoint_names_the_path() {
    let dir = setup();
    let d = dir.path();
    ok(&graphmoe(d, &["gen-data", "-c", "run.toml"]));
    let out = graphmoe(d, &["eval", "-c", "run.toml", "--set", "paths.checkpoint=nowhere/model.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("nowhere/model.ckpt"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn missing_config_and_data_exit_2() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(graphmoe(d, &["train", "-c", "absent.toml"]).status.code(), Some(2));
    let out = graphmoe(d, &["train", "-c", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.csv"));
}

#[test]
fn config_errors_exit_3() {
    let dir = setup();
    let d = dir.path();
    let bad_key = graphmoe(d, &["train", "-c", "run.toml", "--set", "train.learning_rate=0.1"]);
    assert_eq!(bad_key.status.code(), Some(3), "{}", stderr(&bad_key));
    let bad_value = graphmoe(d, &["gen-data", "-c", "run.toml", "--set", "train.lr=-1.0"]);
    assert_eq!(bad_value.status.code(), Some(3));
    fs::write(d.join("broken.toml"), "[train\n").unwrap();
    assert_eq!(graphmoe(d, &["gen-data", "-c", "broken.toml"]).status.code(), Some(3));
}

#[test]
fn ablate_writes_both_tables() {
    let dir = setup();
    let d = dir.path();
    ok(&graphmoe(d, &["gen-data", "-c", "run.toml"]));
    ok(&graphmoe(d, &["ablate", "-c", "run.toml", "--set", "train.epochs=1"]));
    let grid = fs::read_to_string(d.join("out/ablation.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "moe,mar,auroc_mean,auroc_std");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("false,false,"));
    assert!(lines[4].starts_with("true,true,"));
    let sweep = fs::read_to_string(d.join("out/expert_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("experts,auroc"));
    assert_eq!(sweep.lines().count(), 3);
}
