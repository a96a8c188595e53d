//! Argument groups shared across subcommands.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use exitlane_core::layer_sched::{estimate_exit_probs, MdpParams, StartState};
use exitlane_core::workload::{gen_workload, load_trace};
use exitlane_core::{
    CostModel, EngineConfig, ExitTechnique, Model, ModelConfig, ThresholdSchedule, Transcript, Workload, WorkloadSpec,
};

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Decoder layers
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    /// Seed for the weight generator
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    /// Load weights from a JSON file instead (dimensions come from the file)
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

impl ModelArgs {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            d_model: self.d_model,
            vocab_size: self.vocab,
            seed: self.model_seed,
        }
    }

    pub fn build(&self) -> Result<Model> {
        match &self.weights {
            Some(path) => Model::load(path).with_context(|| format!("loading weights from {}", path.display())),
            None => Ok(Model::seeded(self.config())?),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct WorkloadArgs {
    /// CSV (arrival_time,prompt_len,max_new_tokens) or JSON trace; replaces the generator
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub requests: usize,
    /// Mean exponential gap between arrivals, simulated seconds (0: all at once)
    #[arg(long, default_value_t = 0.005)]
    pub mean_interarrival: f64,
    #[arg(long, default_value_t = 4)]
    pub prompt_min: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_max: usize,
    #[arg(long, default_value_t = 8)]
    pub output_min: usize,
    #[arg(long, default_value_t = 32)]
    pub output_max: usize,
    #[arg(long, default_value_t = 0)]
    pub workload_seed: u64,
}

impl WorkloadArgs {
    pub fn build(&self, vocab_size: usize) -> Result<Workload> {
        match &self.trace {
            Some(path) => load_trace(path, vocab_size).with_context(|| format!("loading trace {}", path.display())),
            None => Ok(gen_workload(&WorkloadSpec {
                n_requests: self.requests,
                mean_interarrival: self.mean_interarrival,
                prompt_len: (self.prompt_min, self.prompt_max),
                output_len: (self.output_min, self.output_max),
                vocab_size,
                seed: self.workload_seed,
            })?),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    #[arg(long, default_value_t = 8)]
    pub max_batch: usize,
    /// KV pool size in blocks
    #[arg(long, default_value_t = 1024)]
    pub kv_blocks: usize,
    /// Token positions per KV block
    #[arg(long, default_value_t = 16)]
    pub block_size: usize,
    /// Force every sequence to accept at this layer while still charging exit checks
    #[arg(long)]
    pub force_exit: Option<usize>,
    /// End-of-sequence token id
    #[arg(long, default_value_t = 0)]
    pub eos: usize,
    /// Disable end-of-sequence stopping
    #[arg(long)]
    pub no_eos: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub c_layer_fixed: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub c_layer_per_seq: f64,
    #[arg(long, default_value_t = 2e-5)]
    pub c_fill: f64,
    #[arg(long, default_value_t = 5e-5)]
    pub c_check_softmax: f64,
    #[arg(long, default_value_t = 5e-5)]
    pub c_check_classifier: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub c_check_state: f64,
    /// Prompt prefill cost per token per layer
    #[arg(long, default_value_t = 1e-4)]
    pub c_prefill: f64,
}

impl EngineArgs {
    pub fn config(&self, technique: ExitTechnique, schedule: ThresholdSchedule) -> EngineConfig {
        EngineConfig {
            technique,
            schedule,
            max_batch: self.max_batch,
            kv_blocks: self.kv_blocks,
            block_size: self.block_size,
            cost: CostModel {
                c_layer_fixed: self.c_layer_fixed,
                c_layer_per_seq: self.c_layer_per_seq,
                c_fill_per_seq_layer: self.c_fill,
                c_check_softmax: self.c_check_softmax,
                c_check_classifier: self.c_check_classifier,
                c_check_state: self.c_check_state,
                c_prefill_per_token_layer: self.c_prefill,
            },
            eos_token: (!self.no_eos).then_some(self.eos),
            forced_exit_layer: self.force_exit,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    /// Initial threshold (defaults to the technique's calibrated value)
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Per-layer threshold decay
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Threshold floor
    #[arg(long, default_value_t = 0.0)]
    pub lambda_min: f64,
}

impl ScheduleArgs {
    pub fn schedule(&self, technique: ExitTechnique) -> ThresholdSchedule {
        ThresholdSchedule {
            lambda0: self.lambda0.unwrap_or(ThresholdSchedule::calibrated(technique).lambda0),
            decay: self.gamma,
            floor: self.lambda_min,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MdpArgs {
    /// Layers in the scheduling MDP
    #[arg(long = "mdp-layers", default_value_t = 3)]
    pub layers: usize,
    /// Sequences in flight
    #[arg(long, default_value_t = 2)]
    pub population: u32,
    /// Uniform per-layer exit probability
    #[arg(long, default_value_t = 0.5)]
    pub exit_prob: f64,
    /// Comma-separated per-layer exit probabilities (overrides --exit-prob)
    #[arg(long, value_delimiter = ',')]
    pub exit_probs: Option<Vec<f64>>,
    /// Estimate exit probabilities from an engine transcript (JSONL)
    #[arg(long)]
    pub from_transcript: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    pub discount: f64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Per-pair step size alpha * tau / (tau + visits)
    #[arg(long)]
    pub alpha_decay: Option<f64>,
}

impl MdpArgs {
    pub fn params(&self) -> Result<MdpParams> {
        let mut params = MdpParams::uniform(self.layers, self.population, self.exit_prob, self.discount);
        params.alpha = self.alpha;
        params.epsilon = self.epsilon;
        params.alpha_decay = self.alpha_decay;
        if let Some(path) = &self.from_transcript {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            params.exit_prob = estimate_exit_probs(&Transcript::from_jsonl(&text)?);
            params.n_layers = params.exit_prob.len();
        } else if let Some(p) = &self.exit_probs {
            if p.len() != self.layers {
                bail!(
                    "--exit-probs has {} entries but --mdp-layers is {}",
                    p.len(),
                    self.layers
                );
            }
            params.exit_prob = p.clone();
        }
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EpisodeArgs {
    #[arg(long, default_value_t = 10_000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Episode start: `first` (all at layer 1) or `uniform`
    #[arg(long, default_value = "first", value_parser = parse_start)]
    pub start: StartState,
}

fn parse_start(s: &str) -> Result<StartState, String> {
    match s {
        "first" => Ok(StartState::FirstLayer),
        "uniform" => Ok(StartState::Uniform),
        other => Err(format!("unknown start `{other}` (expected first or uniform)")),
    }
}

pub fn parse_tokens(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad token `{t}`: {e}")))
        .collect()
}
