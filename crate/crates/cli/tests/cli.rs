use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn surprisenet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surprisenet"))
        .args(args)
        .current_dir(cwd)
        .env("SURPRISENET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn demo_run_is_fast_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = surprisenet(
        &["run", "--dataset", "synth", "--n-tasks", "2", "--classes-per-task", "2", "--variant", "ae", "--prune", "eqprune", "--seed", "1", "--out", "runs/demo"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let run = dir.path().join("runs/demo");
    for f in ["report.json", "accuracy_matrix.csv", "summary.csv", "task_log.jsonl", "checkpoint-task0.bin", "checkpoint-task1.bin"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let logs = std::fs::read_to_string(run.join("task_log.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 2);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["prune"], "eqprune");
    assert_eq!(report["config"]["epochs"], 134);
    assert_eq!(report["config"]["retrain-epochs"], 66);
    assert!(report["final_accuracy"].as_f64().unwrap() >= 0.9);

    let o = surprisenet(&["inspect", "runs/demo/checkpoint-task1.bin"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("tasks frozen 2 of 2"), "{text}");
}

#[test]
fn vae_and_fixed_schedule_flags_route() {
    let dir = tempfile::tempdir().unwrap();
    let o = surprisenet(
        &["run", "--n-tasks", "2", "--epochs", "3", "--variant", "vae", "--kl-weight", "0.001", "--prune", "fixed:0.5", "--out", "r"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["variant"], "vae");
    assert_eq!(report["schedule"], "fixed:0.5");
    assert_eq!(report["model"]["kl_weight"], 0.001);
    let log = std::fs::read_to_string(dir.path().join("r/task_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["prune_proportion"], "1/2");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["baseline", "ewc", "--out", "x"],
        vec!["run", "--variant", "gan", "--out", "x"],
        vec!["run", "--prune", "fixed:1.0", "--out", "x"],
        vec!["run", "--n-tasks", "2"],
        vec!["run", "--dataset", "idx", "--idx-dir", "nowhere", "--out", "x"],
        vec!["run", "--n-tasks", "9", "--synth-classes", "4", "--out", "x"],
        vec!["run", "--bogus-flag"],
        vec!["inspect", "missing.bin"],
    ] {
        let o = surprisenet(&args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
}

#[test]
fn capacity_exhaustion_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = surprisenet(&["run", "--n-tasks", "2", "--epochs", "1", "--prune", "fixed:0", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn config_file_and_flags_agree() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "n-tasks = 2\nepochs = 2\nseed = 4\nprune = \"fixed:0.5\"\nhidden = [16, 8]\nlatent = 4\nout = \"from-file\"\n",
    )
    .unwrap();
    let a = surprisenet(&["run", "--config", "c.toml"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let b = surprisenet(
        &["run", "--n-tasks", "2", "--epochs", "2", "--seed", "4", "--prune", "fixed:0.5", "--hidden", "16,8", "--latent", "4", "--out", "from-flags"],
        dir.path(),
    );
    assert!(b.status.success(), "{}", stderr(&b));
    let ckpt = |d: &str| std::fs::read(dir.path().join(d).join("checkpoint-task1.bin")).unwrap();
    assert_eq!(ckpt("from-file"), ckpt("from-flags"));

    // the echoed config reproduces the run
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("from-file/report.json")).unwrap()).unwrap();
    let mut echo = report["config"].clone();
    echo["out"] = "from-echo".into();
    std::fs::write(dir.path().join("echo.json"), echo.to_string()).unwrap();
    let c = surprisenet(&["run", "--config", "echo.json"], dir.path());
    assert!(c.status.success(), "{}", stderr(&c));
    assert_eq!(ckpt("from-file"), ckpt("from-echo"));

    // flags override the file
    let d = surprisenet(&["run", "--config", "c.toml", "--seed", "5", "--out", "override"], dir.path());
    assert!(d.status.success());
    assert_ne!(ckpt("from-file"), ckpt("override"));
}

fn summary_rows(path: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "dataset,strategy,variant,schedule,seed,final_accuracy,task_id_accuracy");
    lines.map(|l| l.split(',').nth(5).unwrap().parse().unwrap()).collect()
}

fn aggregate(stdout: &[u8]) -> (f64, f64) {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().find(|l| l.starts_with("final accuracy over")).expect("aggregate line");
    let nums: Vec<f64> = line
        .split(|c: char| c == ':' || c == '±')
        .skip(1)
        .map(|s| s.trim().parse().unwrap())
        .collect();
    (nums[0], nums[1])
}

#[test]
fn sweep_writes_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = surprisenet(
        &["sweep", "--seeds", "1,2,3,4,5", "--n-tasks", "2", "--epochs", "2", "--hidden", "16,8", "--latent", "4", "--out", "sw"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = summary_rows(&dir.path().join("sw/summary.csv"));
    assert_eq!(rows.len(), 5);
    for s in 1..=5 {
        assert!(dir.path().join(format!("sw/seed-{s}/report.json")).exists());
    }
    let mean = rows.iter().sum::<f64>() / 5.0;
    let (printed, _) = aggregate(&o.stdout);
    assert!((printed - mean).abs() < 5e-5, "{printed} vs {mean}");

    // the library value is exact
    let cfg = surprisenet_cli::RunConfig {
        n_tasks: Some(2),
        epochs: Some(2),
        hidden: Some(vec![16, 8]),
        latent: Some(4),
        out: Some(dir.path().join("lib")),
        ..Default::default()
    };
    let s = surprisenet_cli::cmd_sweep(&cfg, &[1, 2, 3, 4, 5], None).unwrap();
    let rows = summary_rows(&dir.path().join("lib/summary.csv"));
    assert!((s.mean - rows.iter().sum::<f64>() / 5.0).abs() < 1e-9);
}

#[test]
fn single_seed_sweep_reports_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let o = surprisenet(&["sweep", "--seeds", "7", "--baseline", "naive", "--n-tasks", "2", "--epochs", "2", "--out", "one"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(aggregate(&o.stdout).1, 0.0);
    assert_eq!(summary_rows(&dir.path().join("one/summary.csv")).len(), 1);
}

#[test]
fn joint_baseline_on_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let o = surprisenet(&["baseline", "joint", "--epochs", "30", "--out", "j"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("j/report.json")).unwrap()).unwrap();
    assert_eq!(report["strategy"], "joint");
    assert!(report["final_accuracy"].as_f64().unwrap() >= 0.95);
}

#[test]
fn csv_dataset_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = surprisenet::data::synth_clusters(4, 6, 60, 8.0, 3).unwrap();
    surprisenet::data::write_csv(&dir.path().join("train.csv"), &ds.train, "activity").unwrap();
    surprisenet::data::write_csv(&dir.path().join("test.csv"), &ds.test, "activity").unwrap();
    let o = surprisenet(
        &["run", "--dataset", "csv", "--train-csv", "train.csv", "--test-csv", "test.csv", "--label-col", "activity", "--n-tasks", "2", "--epochs", "20", "--out", "c"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("c/report.json")).unwrap()).unwrap();
    assert_eq!(report["dataset"], "train");
    assert!(report["final_accuracy"].as_f64().unwrap() >= 0.9);
    let o = surprisenet(
        &["run", "--dataset", "csv", "--train-csv", "train.csv", "--test-csv", "test.csv", "--n-tasks", "2", "--out", "c2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}
