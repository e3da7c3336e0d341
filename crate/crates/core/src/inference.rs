//! Task-agnostic prediction: choose the frozen subset that reconstructs an
//! instance best, then classify among that task's classes.

use crate::error::{Error, Result};
use crate::masked::Phase;
use crate::model::HybridModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult<S> {
    pub predicted_task: usize,
    pub predicted_class: usize,
    /// Reconstruction MSE of this instance under each task's subset.
    pub per_task_rec_loss: Vec<S>,
    pub logits_of_chosen: Vec<S>,
}

/// Index of the smallest loss; the lowest index wins ties.
pub fn select_task<S: Scalar>(losses: &[S]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

/// Arg-max of `logits` over the given class ids; the first listed wins ties.
pub fn restricted_argmax<S: Scalar>(logits: &[S], classes: &[usize]) -> usize {
    let mut best = classes[0];
    for &c in &classes[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1024;

fn check_ready<S: Scalar>(model: &HybridModel<S>, task_classes: &[Vec<usize>]) -> Result<()> {
    let frozen = model.frozen_tasks();
    if model.registry().trained_since_freeze {
        return Err(Error::UnfrozenTasks(format!("task {frozen} trained but not frozen")));
    }
    if task_classes.is_empty() || task_classes.len() > frozen {
        return Err(Error::UnfrozenTasks(format!(
            "{} tasks requested, {frozen} frozen",
            task_classes.len()
        )));
    }
    if let Some(c) = task_classes
        .iter()
        .flatten()
        .find(|&&c| c >= model.config().class_count)
    {
        return Err(Error::Scenario(format!("class {c} outside the output head")));
    }
    if task_classes.iter().any(Vec::is_empty) {
        return Err(Error::Scenario("empty class set".into()));
    }
    Ok(())
}

/// Evaluate every instance of `x` under each of the first
/// `task_classes.len()` frozen subsets.
pub fn infer<S: Scalar>(model: &HybridModel<S>, x: &Tensor<S>, task_classes: &[Vec<usize>]) -> Result<Vec<InferenceResult<S>>> {
    check_ready(model, task_classes)?;
    let n = x.rows();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = Tensor::new(
            vec![end - start, x.cols()],
            x.data()[start * x.cols()..end * x.cols()].to_vec(),
        )?;
        out.extend(infer_chunk(model, &chunk, task_classes)?);
    }
    Ok(out)
}

fn infer_chunk<S: Scalar>(model: &HybridModel<S>, x: &Tensor<S>, task_classes: &[Vec<usize>]) -> Result<Vec<InferenceResult<S>>> {
    let n = x.rows();
    let per_task: Vec<_> = (0..task_classes.len())
        .map(|k| model.forward(x, k, Phase::Eval, None))
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|i| {
            let losses: Vec<S> = per_task.iter().map(|r| r.per_instance_rec_loss[i]).collect();
            let task = select_task(&losses);
            let logits = per_task[task].logits.row(i).to_vec();
            InferenceResult {
                predicted_task: task,
                predicted_class: restricted_argmax(&logits, &task_classes[task]),
                per_task_rec_loss: losses,
                logits_of_chosen: logits,
            }
        })
        .collect())
}

/// [`infer`] split across up to `threads` scoped threads by instance.
pub fn infer_parallel<S: Scalar>(
    model: &HybridModel<S>,
    x: &Tensor<S>,
    task_classes: &[Vec<usize>],
    threads: usize,
) -> Result<Vec<InferenceResult<S>>> {
    let n = x.rows();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return infer(model, x, task_classes);
    }
    check_ready(model, task_classes)?;
    let per = n.div_ceil(threads);
    let cols = x.cols();
    let parts: Vec<Result<Vec<InferenceResult<S>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(per)
            .map(|start| {
                let end = (start + per).min(n);
                scope.spawn(move || {
                    let chunk = Tensor::new(vec![end - start, cols], x.data()[start * cols..end * cols].to_vec())?;
                    infer(model, &chunk, task_classes)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("inference thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of instances whose task was identified correctly.
pub fn task_id_accuracy<S>(results: &[InferenceResult<S>], true_tasks: &[usize]) -> Result<f64> {
    if results.len() != true_tasks.len() {
        return Err(Error::LengthMismatch(results.len(), true_tasks.len()));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results
        .iter()
        .zip(true_tasks)
        .filter(|(r, &t)| r.predicted_task == t)
        .count();
    Ok(hits as f64 / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_example_and_ties() {
        assert_eq!(select_task(&[0.5f32, 0.1, 0.3]), 1);
        assert_eq!(select_task(&[0.2f64, 0.2, 0.3]), 0);
        assert_eq!(select_task(&[0.7f64]), 0);
    }

    #[test]
    fn restriction_ignores_other_classes() {
        let logits = [9.0f32, 1.0, 2.0, 8.0];
        assert_eq!(restricted_argmax(&logits, &[1, 2]), 2);
        assert_eq!(restricted_argmax(&logits, &[3, 1]), 3);
    }

    fn result(task: usize) -> InferenceResult<f32> {
        InferenceResult {
            predicted_task: task,
            predicted_class: 0,
            per_task_rec_loss: vec![],
            logits_of_chosen: vec![],
        }
    }

    #[test]
    fn task_accuracy_all_correct_and_mismatch() {
        let rs: Vec<_> = [0, 1, 2].into_iter().map(result).collect();
        assert_eq!(task_id_accuracy(&rs, &[0, 1, 2]).unwrap(), 1.0);
        assert!(task_id_accuracy(&rs, &[0, 1]).is_err());
    }

    #[test]
    fn uniform_random_chooser_is_chance() {
        let mut rng = crate::rng::SeededRng::new(9, crate::rng::Stream::Noise);
        let truth: Vec<usize> = (0..10_000).map(|i| i % 5).collect();
        let rs: Vec<_> = truth.iter().map(|_| result(rng.below(5) as usize)).collect();
        let acc = task_id_accuracy(&rs, &truth).unwrap();
        assert!((acc - 0.2).abs() < 0.015, "{acc}");
    }
}
