//! Per-weight task ownership: the mechanism that isolates each task's
//! parameters.
//!
//! Every weight carries a [`TaskId`] or [`FREE`]. A task trains on free
//! weights while reading (never writing) the weights of earlier tasks, then
//! releases its smallest-magnitude weights back to the free pool, retrains
//! what it kept, and freezes it. The network as it existed when task `k`
//! froze is recovered exactly by masking out everything owned by later
//! tasks or still free, and using task `k`'s bias snapshot.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Position of a task in the training sequence.
pub type TaskId = u8;

/// Assignment marker for weights owned by no task.
pub const FREE: TaskId = u8::MAX;

/// Tasks representable in an assignment map.
pub const MAX_TASKS: usize = FREE as usize;

/// Exact fraction of candidate weights to release when pruning.
pub type Proportion = Ratio<u64>;

/// How a layer is being used by a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Read-only view of task `k`'s subset.
    Eval,
    /// Initial training of the current task: free weights are candidates.
    Train,
    /// Post-prune training: only weights already owned by the current task move.
    Retrain,
}

impl Phase {
    pub fn is_training(self) -> bool {
        !matches!(self, Phase::Eval)
    }
}

/// Converts a decimal proportion like `0.45` into `45/100` using its
/// shortest round-trip representation.
pub fn proportion_from_f64(x: f64) -> Result<Proportion> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidProportion(x.to_string()));
    }
    let text = format!("{x}");
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    if frac_part.len() <= 18 {
        let den = 10u64.pow(frac_part.len() as u32);
        let digits = format!("{int_part}{frac_part}");
        let num: u64 = digits
            .parse()
            .map_err(|_| Error::InvalidProportion(text.clone()))?;
        return Ok(Ratio::new(num, den));
    }
    let den = 1_000_000_000_000_000_000u64;
    Ok(Ratio::new((x * den as f64).round() as u64, den))
}

/// ⌊λ·n⌋ in exact arithmetic.
pub fn prune_count(lambda: Proportion, n: usize) -> usize {
    let num = *lambda.numer() as u128 * n as u128;
    (num / *lambda.denom() as u128) as usize
}

/// Proportion that leaves every one of `total` tasks the same share of a
/// layer: before task `position` (1-based) the free share is
/// `(T − t + 1)/T`, so keeping `1/T` means releasing `(T − t)/(T − t + 1)`.
pub fn eqprune_lambda(position: usize, total: usize) -> Result<Proportion> {
    if position == 0 || position > total {
        return Err(Error::InvalidTaskPosition { position, total });
    }
    Ok(Ratio::new((total - position) as u64, (total - position + 1) as u64))
}

/// Fully connected layer whose weights are owned per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLinear<S> {
    weights: Tensor<S>,
    assignment: Vec<TaskId>,
    live_bias: Tensor<S>,
    bias_snapshots: Vec<Tensor<S>>,
}

impl<S: Scalar> MaskedLinear<S> {
    /// All weights free and zero, zero bias.
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[out_dim, in_dim]),
            assignment: vec![FREE; out_dim * in_dim],
            live_bias: Tensor::zeros(&[out_dim]),
            bias_snapshots: Vec::new(),
        }
    }

    pub(crate) fn from_parts(
        weights: Tensor<S>,
        assignment: Vec<TaskId>,
        live_bias: Tensor<S>,
        bias_snapshots: Vec<Tensor<S>>,
    ) -> Result<Self> {
        let (out, _) = weights.matrix_dims("masked layer")?;
        if assignment.len() != weights.len()
            || live_bias.len() != out
            || bias_snapshots.iter().any(|b| b.len() != out)
        {
            return Err(Error::Checkpoint("layer parts have inconsistent sizes".into()));
        }
        let frozen = bias_snapshots.len();
        if assignment.iter().any(|&a| a != FREE && a as usize > frozen) {
            return Err(Error::Checkpoint("assignment refers to a future task".into()));
        }
        Ok(Self {
            weights,
            assignment,
            live_bias,
            bias_snapshots,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weight_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    pub fn assignment(&self) -> &[TaskId] {
        &self.assignment
    }

    pub fn live_bias(&self) -> &Tensor<S> {
        &self.live_bias
    }

    pub fn bias_snapshot(&self, task: usize) -> Option<&Tensor<S>> {
        self.bias_snapshots.get(task)
    }

    pub fn bias_snapshots(&self) -> &[Tensor<S>] {
        &self.bias_snapshots
    }

    /// Number of frozen tasks, which is also the id of the task in progress.
    pub fn current_task(&self) -> usize {
        self.bias_snapshots.len()
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Tensor<S>, &mut Tensor<S>) {
        (&mut self.weights, &mut self.live_bias)
    }

    /// Test hook: overwrite weights and ownership directly.
    #[doc(hidden)]
    pub fn set_state(&mut self, weights: Vec<S>, assignment: Vec<TaskId>) {
        assert_eq!(weights.len(), self.weights.len());
        assert_eq!(assignment.len(), self.assignment.len());
        self.weights.data_mut().copy_from_slice(&weights);
        self.assignment = assignment;
    }

    #[doc(hidden)]
    pub fn set_live_bias(&mut self, bias: Vec<S>) {
        self.live_bias.data_mut().copy_from_slice(&bias);
    }

    fn check_view(&self, task: usize, phase: Phase) -> Result<()> {
        let current = self.current_task();
        if task > current {
            return Err(Error::TaskNotVisible {
                requested: task,
                current,
            });
        }
        if phase.is_training() && task != current {
            return Err(Error::NotCurrentTask {
                requested: task,
                current,
            });
        }
        Ok(())
    }

    /// 0/1 entries selecting the weights that participate in a forward pass.
    pub fn visibility_mask(&self, task: usize, phase: Phase) -> Result<Vec<S>> {
        self.check_view(task, phase)?;
        let include_free = phase == Phase::Train;
        Ok(self
            .assignment
            .iter()
            .map(|&a| {
                // FREE sorts above every task id, so `a <= task` never admits it
                if (a as usize) <= task || (include_free && a == FREE) {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .collect())
    }

    /// Bias used when viewing `task`: its snapshot once frozen, else the live bias.
    pub fn bias_for(&self, task: usize) -> Result<&Tensor<S>> {
        self.check_view(task, Phase::Eval)?;
        Ok(self.bias_snapshots.get(task).unwrap_or(&self.live_bias))
    }

    /// Record `x · W_effᵀ + b` on `tape`. With `ids` the live weights and bias
    /// are registered as trainable parameters.
    pub fn forward_visible(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        task: usize,
        phase: Phase,
        ids: Option<(ParamId, ParamId)>,
    ) -> Result<Var> {
        let mask = self.visibility_mask(task, phase)?;
        let (w, b) = match ids {
            Some((wid, bid)) if phase.is_training() => (
                tape.param(self.weights.clone(), wid),
                tape.param(self.live_bias.clone(), bid),
            ),
            _ => (
                tape.constant(self.weights.clone()),
                tape.constant(self.bias_for(task)?.clone()),
            ),
        };
        let w_eff = tape.mask(w, mask)?;
        Ok(tape.linear(x, w_eff, b)?)
    }

    /// Untaped convenience wrapper around [`MaskedLinear::forward_visible`].
    pub fn apply(&self, x: &Tensor<S>, task: usize, phase: Phase) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward_visible(&mut tape, xv, task, phase, None)?;
        Ok(tape.value(y).clone())
    }

    /// Zero the gradient of every weight owned by an earlier (frozen) task.
    pub fn gate_gradients(&self, grad: &mut Tensor<S>) {
        let current = self.current_task();
        for (g, &a) in grad.data_mut().iter_mut().zip(&self.assignment) {
            if a != FREE && (a as usize) < current {
                *g = S::zero();
            }
        }
    }

    /// Release the ⌊λ·n⌋ smallest-magnitude candidates (free or owned by the
    /// current task) and hand the rest to the current task. Ties go to the
    /// lower flat index first. Returns the number released.
    pub fn prune(&mut self, lambda: Proportion) -> Result<usize> {
        if lambda > Ratio::from_integer(1) {
            return Err(Error::InvalidProportion(lambda.to_string()));
        }
        let current = self.current_task();
        if current >= MAX_TASKS {
            return Err(Error::TooManyTasks(MAX_TASKS));
        }
        let owner = current as TaskId;
        let mut candidates: Vec<usize> = (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == FREE || self.assignment[i] == owner)
            .collect();
        let n_prune = prune_count(lambda, candidates.len());
        let w = self.weights.data();
        candidates.sort_by(|&i, &j| w[i].abs().partial_cmp(&w[j].abs()).unwrap().then(i.cmp(&j)));
        let (released, kept) = candidates.split_at(n_prune);
        let data = self.weights.data_mut();
        for &i in released {
            self.assignment[i] = FREE;
            data[i] = S::zero();
        }
        for &i in kept {
            self.assignment[i] = owner;
        }
        Ok(n_prune)
    }

    /// Snapshot the live bias as the current task's bias and zero any free weights.
    pub(crate) fn freeze(&mut self) {
        let data = self.weights.data_mut();
        for (w, &a) in data.iter_mut().zip(&self.assignment) {
            if a == FREE {
                *w = S::zero();
            }
        }
        self.bias_snapshots.push(self.live_bias.clone());
    }

    /// Draw free weights from U(−a, a), a = √(6 / (fan_in + fan_out)).
    pub fn reinit_free(&mut self, rng: &mut SeededRng) {
        let bound = (6.0 / (self.in_dim() + self.out_dim()) as f64).sqrt();
        let data = self.weights.data_mut();
        for (w, &a) in data.iter_mut().zip(&self.assignment) {
            if a == FREE {
                *w = S::of(rng.uniform_in(-bound, bound));
            }
        }
    }

    pub fn free_count(&self) -> usize {
        self.assignment.iter().filter(|&&a| a == FREE).count()
    }

    pub fn counts(&self) -> LayerCounts {
        let mut per_task = vec![0usize; self.current_task() + 1];
        let mut free = 0;
        for &a in &self.assignment {
            if a == FREE {
                free += 1;
            } else {
                per_task[a as usize] += 1;
            }
        }
        if per_task.last() == Some(&0) {
            per_task.pop();
        }
        LayerCounts { per_task, free }
    }
}

/// Ownership tally of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    /// `per_task[k]` weights owned by task `k`.
    pub per_task: Vec<usize>,
    pub free: usize,
}

impl LayerCounts {
    pub fn total(&self) -> usize {
        self.per_task.iter().sum::<usize>() + self.free
    }
}

/// Which task is in progress and whether it has been trained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub current_task: usize,
    pub total_tasks_planned: usize,
    pub trained_since_freeze: bool,
}

impl TaskRegistry {
    pub fn new(total_tasks_planned: usize) -> Self {
        Self {
            current_task: 0,
            total_tasks_planned,
            trained_since_freeze: false,
        }
    }

    pub fn mark_trained(&mut self) {
        self.trained_since_freeze = true;
    }

    pub fn counts<S: Scalar>(&self, layers: &[MaskedLinear<S>]) -> Vec<LayerCounts> {
        layers.iter().map(MaskedLinear::counts).collect()
    }
}

/// Make the current task's weights and bias immutable and advance the registry.
pub fn freeze_current<S: Scalar>(registry: &mut TaskRegistry, layers: &mut [MaskedLinear<S>]) -> Result<()> {
    if !registry.trained_since_freeze {
        return Err(Error::FreezeWithoutTraining(registry.current_task));
    }
    if registry.current_task >= MAX_TASKS {
        return Err(Error::TooManyTasks(MAX_TASKS));
    }
    for layer in layers.iter_mut() {
        if layer.current_task() != registry.current_task {
            return Err(Error::Invariant(format!(
                "layer at task {} but registry at {}",
                layer.current_task(),
                registry.current_task
            )));
        }
        layer.freeze();
    }
    registry.current_task += 1;
    registry.trained_since_freeze = false;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn layer_with(weights: &[f64], assignment: &[TaskId], out: usize) -> MaskedLinear<f64> {
        let mut l = MaskedLinear::new(weights.len() / out, out);
        l.set_state(weights.to_vec(), assignment.to_vec());
        l
    }

    #[test]
    fn prune_two_smallest() {
        let mut l = layer_with(&[0.9, -0.1, 0.5, 0.05], &[FREE; 4], 1);
        let n = l.prune(Ratio::new(1, 2)).unwrap();
        assert_eq!(n, 2);
        assert_eq!(l.assignment(), &[0, FREE, 0, FREE]);
        assert_eq!(l.weights().data(), &[0.9, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn prune_zero_keeps_everything() {
        let mut l = layer_with(&[0.9, -0.1, 0.5, 0.05], &[FREE; 4], 2);
        assert_eq!(l.prune(Ratio::from_integer(0)).unwrap(), 0);
        assert!(l.assignment().iter().all(|&a| a == 0));
    }

    #[test]
    fn prune_ties_release_lowest_index() {
        let mut l = layer_with(&[0.3, -0.3, 0.3, 0.3], &[FREE; 4], 1);
        l.prune(Ratio::new(1, 2)).unwrap();
        assert_eq!(l.assignment(), &[FREE, FREE, 0, 0]);
    }

    #[test]
    fn prune_rejects_bad_lambda() {
        let mut l = layer_with(&[1.0, 2.0], &[FREE; 2], 1);
        assert!(matches!(l.prune(Ratio::new(3, 2)), Err(Error::InvalidProportion(_))));
        assert!(proportion_from_f64(-0.1).is_err());
        assert!(proportion_from_f64(1.5).is_err());
        assert!(proportion_from_f64(f64::NAN).is_err());
    }

    #[test]
    fn proportion_parsing_is_decimal_exact() {
        assert_eq!(proportion_from_f64(0.5).unwrap(), Ratio::new(1, 2));
        assert_eq!(proportion_from_f64(0.45).unwrap(), Ratio::new(9, 20));
        assert_eq!(proportion_from_f64(1.0).unwrap(), Ratio::from_integer(1));
        assert_eq!(prune_count(proportion_from_f64(0.3).unwrap(), 10), 3);
    }

    #[test]
    fn fixed_half_two_tasks_counts() {
        let mut rng = SeededRng::new(0, Stream::WeightInit);
        let mut layers = vec![MaskedLinear::<f32>::new(10, 10)];
        let mut reg = TaskRegistry::new(2);
        for _ in 0..2 {
            layers[0].reinit_free(&mut rng);
            reg.mark_trained();
            layers[0].prune(Ratio::new(1, 2)).unwrap();
            freeze_current(&mut reg, &mut layers).unwrap();
        }
        let c = &reg.counts(&layers)[0];
        assert_eq!(c.per_task, vec![50, 25]);
        assert_eq!(c.free, 25);
    }

    #[test]
    fn eqprune_examples() {
        assert_eq!(eqprune_lambda(1, 5).unwrap(), Ratio::new(4, 5));
        assert_eq!(eqprune_lambda(5, 5).unwrap(), Ratio::from_integer(0));
        assert_eq!(eqprune_lambda(1, 2).unwrap(), Ratio::new(1, 2));
        assert!(eqprune_lambda(6, 5).is_err());
        assert!(eqprune_lambda(0, 5).is_err());
    }

    #[test]
    fn all_free_eval_is_bias_only() {
        let mut l = MaskedLinear::<f64>::new(3, 2);
        l.set_state(vec![1.0; 6], vec![FREE; 6]);
        l.set_live_bias(vec![0.25, -4.0]);
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let y = l.apply(&x, 0, Phase::Eval).unwrap();
        assert_eq!(y.data(), &[0.25, -4.0]);
    }

    #[test]
    fn all_owned_is_plain_affine() {
        let mut l = MaskedLinear::<f64>::new(2, 2);
        l.set_state(vec![1.0, 2.0, 3.0, 4.0], vec![0; 4]);
        l.set_live_bias(vec![0.5, 0.5]);
        let x = Tensor::from_rows(&[[1.0, 1.0], [2.0, 0.0]]).unwrap();
        let y = l.apply(&x, 0, Phase::Eval).unwrap();
        assert_eq!(y.data(), &[3.5, 7.5, 2.5, 6.5]);
    }

    #[test]
    fn future_task_is_not_visible() {
        let l = MaskedLinear::<f32>::new(2, 2);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            l.apply(&x, 1, Phase::Eval),
            Err(Error::TaskNotVisible { requested: 1, current: 0 })
        ));
    }

    #[test]
    fn gate_examples() {
        let mut l = layer_with(&[1.0; 4], &[0, 0, 0, 0], 2);
        let mut reg = TaskRegistry::new(2);
        reg.mark_trained();
        freeze_current(&mut reg, std::slice::from_mut(&mut l)).unwrap();
        let mut g = Tensor::filled(&[2, 2], 3.0);
        l.gate_gradients(&mut g);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let l = layer_with(&[1.0; 4], &[FREE; 4], 2);
        let mut g = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let before = g.clone();
        l.gate_gradients(&mut g);
        assert_eq!(g, before);
    }

    #[test]
    fn freeze_requires_training() {
        let mut layers = vec![MaskedLinear::<f32>::new(2, 2)];
        let mut reg = TaskRegistry::new(2);
        assert!(matches!(
            freeze_current(&mut reg, &mut layers),
            Err(Error::FreezeWithoutTraining(0))
        ));
        reg.mark_trained();
        freeze_current(&mut reg, &mut layers).unwrap();
        assert_eq!(reg.current_task, 1);
        assert!(freeze_current(&mut reg, &mut layers).is_err());
    }

    #[test]
    fn training_view_must_be_current_task() {
        let mut layers = vec![MaskedLinear::<f32>::new(2, 2)];
        let mut reg = TaskRegistry::new(2);
        reg.mark_trained();
        freeze_current(&mut reg, &mut layers).unwrap();
        assert!(matches!(
            layers[0].visibility_mask(0, Phase::Train),
            Err(Error::NotCurrentTask { .. })
        ));
        assert!(layers[0].visibility_mask(1, Phase::Retrain).is_ok());
    }
}
