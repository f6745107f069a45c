//! Shared fixtures for the benchmarks.

use hahe_core::config::TrainConfig;
use hahe_core::hkg::Dataset;
use hahe_core::synthetic::{synthetic_dataset, SyntheticSpec};

/// 200 facts over 300 entities.
pub fn bench_dataset() -> Dataset {
    synthetic_dataset(&SyntheticSpec::default()).expect("valid spec")
}

/// A small model sized for repeated timing.
pub fn bench_config(dim: usize) -> TrainConfig {
    TrainConfig {
        embedding_dim: dim,
        global_layers: 1,
        global_heads: 4,
        local_layers: 2,
        local_heads: 4,
        hidden_size: 2 * dim,
        batch_size: 128,
        learning_rate: 5e-3,
        weight_decay: 0.0,
        soft_label_entity: 0.1,
        ..TrainConfig::default()
    }
}
