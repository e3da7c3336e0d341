//! The per-task lifecycle: train on free weights, prune, retrain what was
//! kept, freeze. Repeated over a scenario with evaluation after every task.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{Dataset, Partition, Scenario};
use crate::error::{Error, Result, TensorError};
use crate::masked::{eqprune_lambda, proportion_from_f64, LayerCounts, Phase, Proportion};
use crate::metrics::{evaluate_step, AccuracyMatrix};
use crate::model::{hybrid_loss, HybridModel, LossParts, Variant};
use crate::rng::{SeededRng, Stream};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How much of each task's candidate weights is released after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PruneSchedule {
    Fixed(f64),
    /// Equal share of every layer per planned task.
    EqPrune,
}

impl PruneSchedule {
    /// Proportion for task `position` (1-based) of `total`.
    pub fn lambda(&self, position: usize, total: usize) -> Result<Proportion> {
        match *self {
            PruneSchedule::Fixed(l) => proportion_from_f64(l),
            PruneSchedule::EqPrune => eqprune_lambda(position, total),
        }
    }
}

impl fmt::Display for PruneSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruneSchedule::Fixed(l) => write!(f, "fixed:{l}"),
            PruneSchedule::EqPrune => f.write_str("eqprune"),
        }
    }
}

impl FromStr for PruneSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("eqprune") {
            return Ok(PruneSchedule::EqPrune);
        }
        let value = s
            .strip_prefix("fixed:")
            .ok_or_else(|| Error::Config(format!("prune schedule {s:?}: expected eqprune or fixed:<λ>")))?;
        let l: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("prune proportion {value:?} is not a number")))?;
        if !(0.0..1.0).contains(&l) {
            return Err(Error::InvalidProportion(value.to_string()));
        }
        Ok(PruneSchedule::Fixed(l))
    }
}

impl TryFrom<String> for PruneSchedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PruneSchedule> for String {
    fn from(p: PruneSchedule) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs_per_task: usize,
    pub retrain_epochs: usize,
    pub prune_schedule: PruneSchedule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainPlan {
    /// Retrain budget is half the initial budget, rounded up.
    pub fn new(epochs_per_task: usize, prune_schedule: PruneSchedule, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs_per_task,
            retrain_epochs: epochs_per_task.div_ceil(2),
            prune_schedule,
            learning_rate,
            batch_size: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_task == 0 {
            return Err(Error::Config("epochs_per_task must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let PruneSchedule::Fixed(l) = self.prune_schedule {
            if !(0.0..1.0).contains(&l) {
                return Err(Error::InvalidProportion(l.to_string()));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_per_task + self.retrain_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossParts,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub train_seconds: f64,
    pub prune_seconds: f64,
    pub retrain_seconds: f64,
}

/// What happened while learning one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub classes: Vec<usize>,
    pub train_instances: usize,
    pub epochs: Vec<EpochRecord>,
    pub prune_proportion: String,
    pub pruned_per_layer: Vec<usize>,
    pub counts_per_layer: Vec<LayerCounts>,
    /// Fraction of all weights still free after the task was frozen.
    pub capacity_remaining: f64,
    pub wall_clock: PhaseTimes,
}

/// Independent random streams for one run.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub init: SeededRng,
    pub batch: SeededRng,
    pub noise: SeededRng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            init: SeededRng::new(seed, Stream::WeightInit),
            batch: SeededRng::new(seed, Stream::BatchOrder),
            noise: SeededRng::new(seed, Stream::Noise),
        }
    }
}

fn phase_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Eval => "eval",
        Phase::Train => "train",
        Phase::Retrain => "retrain",
    }
}

/// Run `epochs` passes of minibatch Adam over `data` at the current task.
#[allow(clippy::too_many_arguments)]
fn run_epochs<S: Scalar>(
    model: &mut HybridModel<S>,
    data: &Partition,
    plan: &TrainPlan,
    phase: Phase,
    epochs: usize,
    optimizer: &mut AdamState<S>,
    rngs: &mut TrainRngs,
    records: &mut Vec<EpochRecord>,
) -> Result<()> {
    let task = model.current_task();
    let (variant, kl_weight, latent) = {
        let c = model.config();
        (c.variant, c.kl_weight, c.latent_dim)
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::new();
    for epoch in 0..epochs {
        rngs.batch.shuffle(&mut order);
        let mut sum = LossParts::default();
        let mut batches = 0usize;
        let diverged = |e: Error| match e {
            Error::Tensor(TensorError::NonFinite(_)) => Error::Divergence {
                task,
                phase: phase_name(phase),
                epoch,
            },
            other => other,
        };
        for idx in order.chunks(plan.batch_size) {
            let (x, labels) = data.batch::<S>(idx)?;
            let noise = (variant == Variant::Vae).then(|| {
                let v = (0..idx.len() * latent).map(|_| S::of(rngs.noise.normal())).collect();
                Tensor::new(vec![idx.len(), latent], v).expect("noise shape")
            });
            tape.clear();
            let step = (|| -> Result<_> {
                let vars = model.forward_taped(&mut tape, &x, task, phase, noise.as_ref(), true)?;
                let loss = hybrid_loss(&mut tape, &vars, &labels, variant, kl_weight)?;
                let parts = loss.values(&tape);
                let grads = tape.backward(loss.total)?;
                Ok((parts, grads))
            })();
            let (parts, grads) = step.map_err(diverged)?;
            model.apply_gradients(grads, optimizer).map_err(diverged)?;
            sum.total += parts.total;
            sum.reconstruction += parts.reconstruction;
            sum.classification += parts.classification;
            sum.kl += parts.kl;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        records.push(EpochRecord {
            phase: phase_name(phase).to_string(),
            epoch,
            loss: LossParts {
                total: sum.total / b,
                reconstruction: sum.reconstruction / b,
                classification: sum.classification / b,
                kl: sum.kl / b,
            },
        });
    }
    Ok(())
}

/// Learn the model's current task from `data` (rows of this task's classes
/// only): train on free weights, prune every layer by the schedule's
/// proportion, retrain the survivors, freeze. `position` is 1-based.
pub fn train_task<S: Scalar>(
    model: &mut HybridModel<S>,
    data: &Partition,
    classes: &[usize],
    plan: &TrainPlan,
    position: usize,
    total: usize,
    rngs: &mut TrainRngs,
) -> Result<TaskLog> {
    plan.validate()?;
    if model.current_task() + 1 != position {
        return Err(Error::Invariant(format!(
            "task position {position} but model is at task {}",
            model.current_task()
        )));
    }
    if data.is_empty() {
        return Err(Error::Data(format!("task {} has no training rows", position - 1)));
    }
    let lambda = plan.prune_schedule.lambda(position, total)?;
    let task = model.current_task();
    let mut records = Vec::new();

    let t0 = Instant::now();
    model.begin_task(&mut rngs.init)?;
    let mut optimizer = model.new_optimizer(AdamConfig::with_learning_rate(plan.learning_rate));
    run_epochs(model, data, plan, Phase::Train, plan.epochs_per_task, &mut optimizer, rngs, &mut records)?;
    model.mark_trained();

    let t1 = Instant::now();
    let pruned_per_layer = model.prune(lambda)?;

    let t2 = Instant::now();
    optimizer.reset();
    run_epochs(model, data, plan, Phase::Retrain, plan.retrain_epochs, &mut optimizer, rngs, &mut records)?;
    model.freeze()?;
    let t3 = Instant::now();

    Ok(TaskLog {
        task,
        classes: classes.to_vec(),
        train_instances: data.len(),
        epochs: records,
        prune_proportion: format_ratio(lambda),
        pruned_per_layer,
        counts_per_layer: model.layer_counts(),
        capacity_remaining: model.free_fraction(),
        wall_clock: PhaseTimes {
            train_seconds: (t1 - t0).as_secs_f64(),
            prune_seconds: (t2 - t1).as_secs_f64(),
            retrain_seconds: (t3 - t2).as_secs_f64(),
        },
    })
}

fn format_ratio(r: Ratio<u64>) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Train a conventional (fully owned, never frozen) model for `epochs`
/// passes over `data`. Used by the reference baselines.
pub fn train_unmasked<S: Scalar>(
    model: &mut HybridModel<S>,
    data: &Partition,
    classes: &[usize],
    plan: &TrainPlan,
    epochs: usize,
    task: usize,
    rngs: &mut TrainRngs,
) -> Result<TaskLog> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::Data(format!("task {task} has no training rows")));
    }
    let t0 = Instant::now();
    let mut optimizer = model.new_optimizer(AdamConfig::with_learning_rate(plan.learning_rate));
    let mut records = Vec::new();
    run_epochs(model, data, plan, Phase::Retrain, epochs, &mut optimizer, rngs, &mut records)?;
    model.mark_trained();
    Ok(TaskLog {
        task,
        classes: classes.to_vec(),
        train_instances: data.len(),
        epochs: records,
        prune_proportion: "0/1".into(),
        pruned_per_layer: vec![0; model.layers().len()],
        counts_per_layer: model.layer_counts(),
        capacity_remaining: model.free_fraction(),
        wall_clock: PhaseTimes {
            train_seconds: t0.elapsed().as_secs_f64(),
            ..PhaseTimes::default()
        },
    })
}

/// Outcome of a sequential run over a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioRun<S> {
    pub model: HybridModel<S>,
    pub logs: Vec<TaskLog>,
    pub matrix: AccuracyMatrix,
}

/// Train each task of `scenario` in order, calling `on_freeze` after every
/// freeze, and evaluate all tasks seen so far (without task labels) after each.
pub fn run_scenario<S: Scalar>(
    mut model: HybridModel<S>,
    dataset: &Dataset,
    scenario: &Scenario,
    plan: &TrainPlan,
    threads: usize,
    mut on_freeze: impl FnMut(usize, &HybridModel<S>, &TaskLog) -> Result<()>,
) -> Result<ScenarioRun<S>> {
    scenario.validate(dataset)?;
    plan.validate()?;
    let total = scenario.len();
    if model.registry().total_tasks_planned < total {
        return Err(Error::Scenario(format!(
            "model planned for {} tasks, scenario has {total}",
            model.registry().total_tasks_planned
        )));
    }
    if model.current_task() != 0 {
        return Err(Error::Scenario("model has already learned tasks".into()));
    }
    let mut rngs = TrainRngs::new(plan.seed);
    let mut logs = Vec::with_capacity(total);
    let mut matrix = AccuracyMatrix::default();
    for (t, classes) in scenario.task_classes.iter().enumerate() {
        let data = dataset.train.select_classes(classes);
        let log = train_task(&mut model, &data, classes, plan, t + 1, total, &mut rngs)?;
        on_freeze(t, &model, &log)?;
        logs.push(log);
        matrix.push(evaluate_step(&model, dataset, scenario, t + 1, threads)?);
    }
    Ok(ScenarioRun { model, logs, matrix })
}
