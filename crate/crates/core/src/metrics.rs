//! Accuracy bookkeeping, reference baselines and run reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Scenario};
use crate::error::{Error, Result};
use crate::inference::infer_parallel;
use crate::masked::{LayerCounts, Phase};
use crate::model::{HybridModel, ModelConfig};
use crate::rng::PRNG_NAME;
use crate::scalar::Scalar;
use crate::trainer::{train_unmasked, TaskLog, TrainPlan, TrainRngs};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Evaluation after one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    /// Class-IL accuracy on each seen task's test rows.
    pub per_task: Vec<f64>,
    pub task_id: f64,
    /// Micro-averaged over the union of seen tasks' test rows.
    pub overall: f64,
    pub counts: Vec<usize>,
}

/// `accuracy[t][u]`: accuracy on task `u`'s test set after training
/// through task `t` (`u ≤ t`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub accuracy: Vec<Vec<f64>>,
    pub task_id_accuracy: Vec<f64>,
    pub overall_accuracy: Vec<f64>,
    /// Test instances per task.
    pub test_counts: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn push(&mut self, step: StepEval) {
        self.accuracy.push(step.per_task);
        self.task_id_accuracy.push(step.task_id);
        self.overall_accuracy.push(step.overall);
        self.test_counts = step.counts;
    }

    pub fn steps(&self) -> usize {
        self.accuracy.len()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.overall_accuracy.last().copied().unwrap_or(0.0)
    }

    pub fn final_task_id_accuracy(&self) -> f64 {
        self.task_id_accuracy.last().copied().unwrap_or(0.0)
    }

    /// Instance-weighted mean of the last row.
    pub fn weighted_final(&self) -> f64 {
        let Some(last) = self.accuracy.last() else { return 0.0 };
        let n: usize = self.test_counts.iter().take(last.len()).sum();
        last.iter()
            .zip(&self.test_counts)
            .map(|(a, &c)| a * c as f64)
            .sum::<f64>()
            / n as f64
    }

    /// One row per step, one column per task; cells above the diagonal empty.
    pub fn to_csv(&self) -> String {
        let tasks = self.accuracy.last().map_or(0, Vec::len);
        let mut s = String::from("step");
        for u in 0..tasks {
            let _ = write!(s, ",task_{u}");
        }
        s.push_str(",overall,task_id\n");
        for (t, row) in self.accuracy.iter().enumerate() {
            let _ = write!(s, "{t}");
            for u in 0..tasks {
                match row.get(u) {
                    Some(a) => {
                        let _ = write!(s, ",{a}");
                    }
                    None => s.push(','),
                }
            }
            let _ = writeln!(s, ",{},{}", self.overall_accuracy[t], self.task_id_accuracy[t]);
        }
        s
    }
}

fn split_by_task(scenario: &Scenario, labels: &[usize], seen: usize, predicted_class: &[usize], predicted_task: &[Option<usize>]) -> Result<StepEval> {
    let mut hits = vec![0usize; seen];
    let mut counts = vec![0usize; seen];
    let mut task_hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let t = scenario
            .task_of(label)
            .filter(|&t| t < seen)
            .ok_or_else(|| Error::Invariant(format!("label {label} not in a seen task")))?;
        counts[t] += 1;
        let task_ok = predicted_task[i] == Some(t);
        let class_ok = predicted_class[i] == label;
        if class_ok && !task_ok {
            return Err(Error::Invariant(format!(
                "instance {i} classified correctly under the wrong task"
            )));
        }
        hits[t] += usize::from(class_ok);
        task_hits += usize::from(task_ok);
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Scenario("no test rows for the seen tasks".into()));
    }
    let step = StepEval {
        per_task: hits.iter().zip(&counts).map(|(&h, &c)| h as f64 / c.max(1) as f64).collect(),
        task_id: task_hits as f64 / total as f64,
        overall: hits.iter().sum::<usize>() as f64 / total as f64,
        counts,
    };
    if step.overall > step.task_id {
        return Err(Error::Invariant(format!(
            "class-IL accuracy {} exceeds task-ID accuracy {}",
            step.overall, step.task_id
        )));
    }
    Ok(step)
}

/// Task-label-free evaluation on the test rows of the first `seen` tasks.
pub fn evaluate_step<S: Scalar>(model: &HybridModel<S>, dataset: &Dataset, scenario: &Scenario, seen: usize, threads: usize) -> Result<StepEval> {
    let sets = &scenario.task_classes[..seen];
    let classes: Vec<usize> = sets.concat();
    let part = dataset.test.select_classes(&classes);
    let x = part.to_tensor::<S>()?;
    let results = infer_parallel(model, &x, sets, threads)?;
    for r in &results {
        if !sets[r.predicted_task].contains(&r.predicted_class) {
            return Err(Error::Invariant("prediction outside the chosen task's classes".into()));
        }
    }
    let pc: Vec<usize> = results.iter().map(|r| r.predicted_class).collect();
    let pt: Vec<Option<usize>> = results.iter().map(|r| Some(r.predicted_task)).collect();
    split_by_task(scenario, &part.labels, seen, &pc, &pt)
}

/// Micro-averaged class-IL accuracy over the union of all tasks' test sets.
pub fn final_accuracy<S: Scalar>(model: &HybridModel<S>, dataset: &Dataset, scenario: &Scenario, threads: usize) -> Result<f64> {
    if model.frozen_tasks() < scenario.len() {
        return Err(Error::UnfrozenTasks(format!(
            "{} of {} tasks frozen",
            model.frozen_tasks(),
            scenario.len()
        )));
    }
    Ok(evaluate_step(model, dataset, scenario, scenario.len(), threads)?.overall)
}

/// Evaluation of an unmasked model: arg-max over the whole output head, the
/// predicted task being whichever seen task owns the predicted class.
pub fn evaluate_unmasked<S: Scalar>(model: &HybridModel<S>, dataset: &Dataset, scenario: &Scenario, seen: usize) -> Result<StepEval> {
    let classes: Vec<usize> = scenario.task_classes[..seen].concat();
    let part = dataset.test.select_classes(&classes);
    let mut pc = Vec::with_capacity(part.len());
    let idx: Vec<usize> = (0..part.len()).collect();
    for chunk in idx.chunks(1024) {
        let (x, _) = part.batch::<S>(chunk)?;
        let r = model.forward(&x, 0, Phase::Eval, None)?;
        for i in 0..chunk.len() {
            let row = r.logits.row(i);
            let all: Vec<usize> = (0..row.len()).collect();
            pc.push(crate::inference::restricted_argmax(row, &all));
        }
    }
    let pt: Vec<Option<usize>> = pc
        .iter()
        .map(|&c| scenario.task_of(c).filter(|&t| t < seen))
        .collect();
    split_by_task(scenario, &part.labels, seen, &pc, &pt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    SurpriseNet,
    Naive,
    Joint,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::SurpriseNet => "surprisenet",
            Strategy::Naive => "naive",
            Strategy::Joint => "joint",
        })
    }
}

/// Everything needed to reproduce and compare a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    /// Caller-supplied echo of the full run configuration.
    pub config: serde_json::Value,
    pub dataset: String,
    pub variant: String,
    pub schedule: String,
    pub seed: u64,
    pub prng: String,
    pub averaging: String,
    pub scenario: Scenario,
    pub plan: TrainPlan,
    pub model: ModelConfig,
    pub matrix: AccuracyMatrix,
    pub final_accuracy: f64,
    pub final_task_id_accuracy: f64,
    pub capacity: Vec<LayerCounts>,
    pub param_count: usize,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        strategy: Strategy,
        config: serde_json::Value,
        scenario: &Scenario,
        plan: &TrainPlan,
        model: &HybridModel<S>,
        matrix: AccuracyMatrix,
        wall_clock_seconds: f64,
    ) -> Self {
        let schedule = match strategy {
            Strategy::SurpriseNet => plan.prune_schedule.to_string(),
            _ => "none".to_string(),
        };
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            strategy,
            config,
            dataset: scenario.dataset.clone(),
            variant: model.config().variant.to_string(),
            schedule,
            seed: plan.seed,
            prng: PRNG_NAME.to_string(),
            averaging: "micro".to_string(),
            scenario: scenario.clone(),
            plan: plan.clone(),
            model: model.config().clone(),
            final_accuracy: matrix.final_accuracy(),
            final_task_id_accuracy: matrix.final_task_id_accuracy(),
            matrix,
            capacity: model.layer_counts(),
            param_count: model.param_count(),
            wall_clock_seconds,
        }
    }

    pub fn summary_header() -> &'static str {
        "dataset,strategy,variant,schedule,seed,final_accuracy,task_id_accuracy"
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dataset,
            self.strategy,
            self.variant,
            self.schedule,
            self.seed,
            self.final_accuracy,
            self.final_task_id_accuracy
        )
    }
}

/// Sequential training of one unmasked network with the per-task budget of
/// the main method and no protection against forgetting.
pub fn naive_baseline<S: Scalar>(
    config: ModelConfig,
    dataset: &Dataset,
    scenario: &Scenario,
    plan: &TrainPlan,
    echo: serde_json::Value,
) -> Result<(RunReport, Vec<TaskLog>)> {
    scenario.validate(dataset)?;
    let start = Instant::now();
    let mut rngs = TrainRngs::new(plan.seed);
    let mut model = HybridModel::<S>::plain(config, &mut rngs.init)?;
    let mut matrix = AccuracyMatrix::default();
    let mut logs = Vec::new();
    for (t, classes) in scenario.task_classes.iter().enumerate() {
        let data = dataset.train.select_classes(classes);
        logs.push(train_unmasked(&mut model, &data, classes, plan, plan.total_epochs(), t, &mut rngs)?);
        matrix.push(evaluate_unmasked(&model, dataset, scenario, t + 1)?);
    }
    let report = RunReport::new(Strategy::Naive, echo, scenario, plan, &model, matrix, start.elapsed().as_secs_f64());
    Ok((report, logs))
}

/// All of the scenario's classes learned at once: the non-continual reference.
pub fn joint_baseline<S: Scalar>(
    config: ModelConfig,
    dataset: &Dataset,
    scenario: &Scenario,
    plan: &TrainPlan,
    echo: serde_json::Value,
) -> Result<(RunReport, Vec<TaskLog>)> {
    scenario.validate(dataset)?;
    let start = Instant::now();
    let joint = scenario.joint(scenario.len());
    let mut rngs = TrainRngs::new(plan.seed);
    let mut model = HybridModel::<S>::plain(config, &mut rngs.init)?;
    let classes = &joint.task_classes[0];
    let data = dataset.train.select_classes(classes);
    let log = train_unmasked(&mut model, &data, classes, plan, plan.total_epochs(), 0, &mut rngs)?;
    let mut matrix = AccuracyMatrix::default();
    matrix.push(evaluate_unmasked(&model, dataset, &joint, 1)?);
    let report = RunReport::new(Strategy::Joint, echo, &joint, plan, &model, matrix, start.elapsed().as_secs_f64());
    Ok((report, vec![log]))
}

/// Write `report.json`, `accuracy_matrix.csv` and `summary.csv` into `run_dir`.
pub fn write_report(report: &RunReport, run_dir: &Path) -> Result<()> {
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(run_dir.join("accuracy_matrix.csv"), report.matrix.to_csv())?;
    fs::write(
        run_dir.join("summary.csv"),
        format!("{}\n{}\n", RunReport::summary_header(), report.summary_line()),
    )?;
    Ok(())
}

pub fn read_report(run_dir: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&fs::read_to_string(run_dir.join("report.json"))?)?)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
