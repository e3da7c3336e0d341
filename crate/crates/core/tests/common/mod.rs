#![allow(dead_code)]

use surprisenet::data::{self, Dataset, Scenario};
use surprisenet::rng::{SeededRng, Stream};
use surprisenet::{ModelConfig, PruneSchedule, Tensor, TrainPlan, Variant};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed, Stream::Noise);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        hidden_dims: vec![5],
        latent_dim: 3,
        class_count: 4,
        variant,
        kl_weight: 0.1,
    }
}

pub fn synth_config(dim: usize, classes: usize, variant: Variant) -> ModelConfig {
    ModelConfig {
        input_dim: dim,
        hidden_dims: vec![32, 16],
        latent_dim: 8,
        class_count: classes,
        variant,
        kl_weight: 0.001,
    }
}

/// Separable clusters split into `tasks` tasks of two classes.
pub fn synth_setup(tasks: usize, seed: u64) -> (Dataset, Scenario) {
    let ds = data::synth_clusters(2 * tasks, 16, 100, 8.0, seed).unwrap();
    let sc = data::make_scenario(&ds, tasks, 2, seed).unwrap();
    (ds, sc)
}

pub fn quick_plan(epochs: usize, schedule: PruneSchedule, seed: u64) -> TrainPlan {
    TrainPlan {
        batch_size: 32,
        ..TrainPlan::new(epochs, schedule, 3e-3, seed)
    }
}
