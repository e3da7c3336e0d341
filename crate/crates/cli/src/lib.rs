//! Command implementations behind the `surprisenet` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use surprisenet::metrics::{self, RunReport, Strategy};
use surprisenet::trainer::{self, TaskLog};
use surprisenet::{checkpoint, Error, HybridModel, Real};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidProportion(_) | Error::Data(_) | Error::Scenario(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Evaluation threads: `SURPRISENET_THREADS` if set, else all cores.
pub fn eval_threads() -> usize {
    std::env::var("SURPRISENET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn echo(config: &RunConfig) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_task_logs(dir: &Path, logs: &[TaskLog]) -> Result<(), CliError> {
    let path = dir.join("task_log.jsonl");
    let mut text = String::new();
    for log in logs {
        let line = serde_json::to_string(log).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(text, "{line}").expect("writing to a String");
    }
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn append_task_log(dir: &Path, log: &TaskLog) -> Result<(), Error> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("task_log.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(log)?)?;
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let log = dir.join("task_log.jsonl");
    if log.exists() {
        fs::remove_file(&log).map_err(|e| io_err(&log, e))?;
    }
    Ok(())
}

/// Train and evaluate SurpriseNet on the configured scenario.
pub fn cmd_run(config: &RunConfig) -> Result<RunReport, CliError> {
    let config = config.resolve()?;
    let (dataset, scenario) = config.load()?;
    let model_config = config.model_config(&dataset)?;
    let plan = config.plan()?;
    let dir = config.out_dir();
    prepare_dir(&dir)?;
    eprintln!(
        "run: {} tasks of {:?} on {} ({} train / {} test), {} {}",
        scenario.len(),
        scenario.task_classes,
        dataset.name,
        dataset.train.len(),
        dataset.test.len(),
        model_config.variant,
        plan.prune_schedule
    );
    let start = Instant::now();
    let model = HybridModel::<Real>::new(model_config, scenario.len())?;
    let run = trainer::run_scenario(model, &dataset, &scenario, &plan, eval_threads(), |t, m, log| {
        checkpoint::save(m, &dir.join(format!("checkpoint-task{t}.bin")))?;
        append_task_log(&dir, log)?;
        let last = log.epochs.last().map_or(f64::NAN, |e| e.loss.total);
        eprintln!(
            "task {t}: classes {:?}, λ = {}, loss {last:.5}, free capacity {:.3}",
            log.classes, log.prune_proportion, log.capacity_remaining
        );
        Ok(())
    })?;
    let report = RunReport::new(
        Strategy::SurpriseNet,
        echo(&config)?,
        &scenario,
        &plan,
        &run.model,
        run.matrix,
        start.elapsed().as_secs_f64(),
    );
    metrics::write_report(&report, &dir)?;
    println!(
        "{} final accuracy {:.4}, task-id accuracy {:.4}",
        dir.display(),
        report.final_accuracy,
        report.final_task_id_accuracy
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Naive,
    Joint,
}

impl std::str::FromStr for BaselineKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "naive" => Ok(BaselineKind::Naive),
            "joint" => Ok(BaselineKind::Joint),
            other => Err(CliError::Config(format!("unknown baseline {other:?} (expected naive or joint)"))),
        }
    }
}

pub fn cmd_baseline(config: &RunConfig, kind: BaselineKind) -> Result<RunReport, CliError> {
    let config = config.resolve()?;
    let (dataset, scenario) = config.load()?;
    let model_config = config.model_config(&dataset)?;
    let plan = config.plan()?;
    let dir = config.out_dir();
    prepare_dir(&dir)?;
    let (report, logs) = match kind {
        BaselineKind::Naive => metrics::naive_baseline::<Real>(model_config, &dataset, &scenario, &plan, echo(&config)?)?,
        BaselineKind::Joint => metrics::joint_baseline::<Real>(model_config, &dataset, &scenario, &plan, echo(&config)?)?,
    };
    write_task_logs(&dir, &logs)?;
    metrics::write_report(&report, &dir)?;
    println!("{} {} final accuracy {:.4}", dir.display(), report.strategy, report.final_accuracy);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub reports: Vec<RunReport>,
    pub mean: f64,
    pub std: f64,
}

/// One run per seed in `<out>/seed-<s>`, each appended to `<out>/summary.csv`.
/// A failing seed stops the sweep; rows already written are kept.
pub fn cmd_sweep(config: &RunConfig, seeds: &[u64], baseline: Option<BaselineKind>) -> Result<SweepSummary, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one seed".into()));
    }
    let base = config.resolve()?;
    let root = base.out_dir();
    fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let summary = root.join("summary.csv");
    if !summary.exists() {
        fs::write(&summary, format!("{}\n", RunReport::summary_header())).map_err(|e| io_err(&summary, e))?;
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = config.clone();
        c.seed = Some(seed);
        c.out = Some(seed_dir(&root, seed));
        let report = match baseline {
            None => cmd_run(&c)?,
            Some(kind) => cmd_baseline(&c, kind)?,
        };
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&summary)
            .map_err(|e| io_err(&summary, e))?;
        writeln!(f, "{}", report.summary_line()).map_err(|e| io_err(&summary, e))?;
        reports.push(report);
    }
    let finals: Vec<f64> = reports.iter().map(|r| r.final_accuracy).collect();
    let (mean, std) = metrics::mean_std(&finals);
    println!("final accuracy over {} seeds: {mean:.4} ± {std:.4}", seeds.len());
    Ok(SweepSummary { reports, mean, std })
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Human-readable description of a checkpoint.
pub fn cmd_inspect(path: &Path) -> Result<String, CliError> {
    let model: HybridModel<Real> = checkpoint::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = model.config();
    let reg = model.registry();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{}: {} model, input {}, hidden {:?}, latent {}, {} classes, {} parameters",
        path.display(),
        cfg.variant,
        cfg.input_dim,
        cfg.hidden_dims,
        cfg.latent_dim,
        cfg.class_count,
        model.param_count()
    );
    let _ = writeln!(
        s,
        "tasks frozen {} of {} planned, free fraction {:.4}",
        model.frozen_tasks(),
        reg.total_tasks_planned,
        model.free_fraction()
    );
    for (i, c) in model.layer_counts().iter().enumerate() {
        let l = &model.layers()[i];
        let _ = writeln!(
            s,
            "layer {i} {:?} {}x{}: per task {:?}, free {}",
            model.layer_role(i),
            l.out_dim(),
            l.in_dim(),
            c.per_task,
            c.free
        );
    }
    Ok(s)
}
