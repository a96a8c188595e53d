//! Shared fixtures for the criterion benchmarks.

use exitlane_core::{Model, ModelConfig, Workload, WorkloadSpec};

pub fn bench_model(n_layers: usize, d_model: usize) -> Model {
    Model::seeded(ModelConfig {
        n_layers,
        d_model,
        vocab_size: 256,
        seed: 7,
    })
    .expect("valid bench model")
}

pub fn bench_workload(n_requests: usize, seed: u64) -> Workload {
    exitlane_core::workload::gen_workload(&WorkloadSpec {
        n_requests,
        mean_interarrival: 0.0,
        prompt_len: (4, 8),
        output_len: (8, 16),
        vocab_size: 256,
        seed,
    })
    .expect("valid bench workload")
}
