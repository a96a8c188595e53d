//! Batched inference for early-exit transformer decoders.
//!
//! * [`numerics`]: deterministic f64 kernels and the SplitMix64 weight PRNG
//! * [`model`]: a seeded toy decoder exposing hidden states and K/V projections
//! * [`exit_policy`]: softmax-response, state-similarity and classifier confidence
//! * [`kv_cache`]: paged K/V storage with fill-forward of skipped layers
//! * [`engine`]: iteration-level batching with batch-wide early exit
//! * [`layer_sched`]: the layer-level scheduling MDP and its policies
//! * [`workload`], [`metrics`], [`compare`]: benchmark inputs and outputs
//! * [`oracle`]: independent reference decoder and exact value iteration

pub mod compare;
pub mod engine;
pub mod error;
pub mod exit_policy;
pub mod kv_cache;
pub mod layer_sched;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod workload;

pub use engine::{CostModel, Engine, EngineConfig, Transcript};
pub use error::{Error, Result};
pub use exit_policy::{ExitTechnique, ThresholdSchedule};
pub use kv_cache::{KvConfig, KvStore};
pub use metrics::{MetricsReport, ReportFormat};
pub use model::{Model, ModelConfig};
pub use workload::{Workload, WorkloadSpec};

/// Sequence identifier; assigned in arrival order by the engine.
pub type SeqId = usize;
