#![allow(dead_code)]

use era_core::data::{generate, Dataset, SyntheticSpec};
use era_core::distill::{BranchFeed, EraModel, TeacherTopology, Topology, TrainConfig};
use era_core::losses::LossWeights;
use era_core::seed;
use era_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn topology(
    input: usize,
    classes: usize,
    c_s: usize,
    c_t: usize,
    k: usize,
    feed: BranchFeed,
) -> Topology {
    Topology {
        teacher: TeacherTopology {
            input_dim: input,
            num_classes: classes,
            widths: vec![c_t + 2, c_t],
        },
        student_widths: vec![c_s],
        branches: k,
        blocks_per_branch: 2,
        branch_width: 0,
        branch_feed: feed,
    }
}

pub fn small(k: usize) -> Topology {
    topology(5, 3, 4, 6, k, BranchFeed::Cascaded)
}

pub fn normal(seed: u64, label: &str, rows: usize, cols: usize) -> Tensor {
    let mut rng = seed::rng(seed, label);
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Model with every trainable parameter moved off its initial value so
/// branches produce non-zero output.
pub fn jittered(topo: Topology, seed: u64) -> EraModel {
    let mut m = EraModel::new(topo, seed).unwrap();
    m.store.jitter(seed ^ 0x5eed, 0.3);
    m
}

pub fn data(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> (Dataset, Dataset) {
    generate(&SyntheticSpec::with_random_means(
        classes, dim, per_class, spread, 1.0, 0.0, seed,
    ))
    .unwrap()
}

pub fn config(k: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.01,
        weights: LossWeights {
            branches: k,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    }
}
