use std::collections::HashMap;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{greedy_policy, reward, transition, LinearQ, MdpParams, OccupancyState, QTable};
use crate::error::{Error, Result};

pub trait SchedulingPolicy {
    /// Layer to execute next (1-based).
    fn choose(&self, v: &OccupancyState) -> Result<usize>;

    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyPolicy;

impl SchedulingPolicy for GreedyPolicy {
    fn choose(&self, v: &OccupancyState) -> Result<usize> {
        greedy_policy(v)
    }

    fn kind(&self) -> &'static str {
        "greedy"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Greedy,
    QTable,
    Linear,
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "q-table" => Ok(Self::QTable),
            "linear" => Ok(Self::Linear),
            other => Err(Error::InvalidConfig(format!("unknown policy kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrainedPolicy {
    Greedy,
    QTable { table: QTable },
    Linear { q: LinearQ },
}

impl SchedulingPolicy for TrainedPolicy {
    fn choose(&self, v: &OccupancyState) -> Result<usize> {
        match self {
            Self::Greedy => greedy_policy(v),
            Self::QTable { table } => Ok(table.best_action(v)),
            Self::Linear { q } => q.best_action(v),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::QTable { .. } => "q-table",
            Self::Linear { .. } => "linear",
        }
    }
}

impl TrainedPolicy {
    /// Q estimate for `(v, a)`; greedy reads as the initial table.
    pub fn q_value(&self, v: &OccupancyState, action: usize) -> Result<f64> {
        match self {
            Self::Greedy => Ok(super::q_init(v, action)),
            Self::QTable { table } => Ok(table.get(v, action)),
            Self::Linear { q } => q.predict(v, action),
        }
    }
}

/// Where each episode starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartState {
    /// Every sequence at layer 1.
    FirstLayer,
    /// Uniform over all occupancy vectors with the configured population.
    Uniform,
    Fixed(OccupancyState),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    pub start: StartState,
}

/// Uniform composition of `population` into `n_layers` parts (stars and bars).
pub fn sample_start_state<R: Rng + ?Sized>(start: &StartState, params: &MdpParams, rng: &mut R) -> OccupancyState {
    let (l, n) = (params.n_layers, params.population);
    match start {
        StartState::FirstLayer => OccupancyState::all_at_first(l, n),
        StartState::Fixed(v) => v.clone(),
        StartState::Uniform => {
            let slots = n as usize + l - 1;
            let mut bars = index::sample(rng, slots, l - 1).into_vec();
            bars.sort_unstable();
            let mut counts = Vec::with_capacity(l);
            let mut prev = 0usize;
            for b in bars {
                counts.push((b - prev) as u32);
                prev = b + 1;
            }
            counts.push((slots - prev) as u32);
            OccupancyState::new(counts)
        }
    }
}

fn check_start(start: &StartState, params: &MdpParams) -> Result<()> {
    if let StartState::Fixed(v) = start {
        if v.n_layers() != params.n_layers {
            return Err(Error::DimensionMismatch {
                what: "start state",
                expected: params.n_layers,
                got: v.n_layers(),
            });
        }
    }
    Ok(())
}

/// ε-greedy Q-learning (tabular or linear) over simulated episodes.
pub fn train_policy(kind: PolicyKind, params: &MdpParams, config: &TrainConfig) -> Result<TrainedPolicy> {
    params.validate()?;
    check_start(&config.start, params)?;
    if params.population == 0 {
        return Err(Error::InvalidConfig("training needs a positive population".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let l = params.n_layers;
    match kind {
        PolicyKind::Greedy => Ok(TrainedPolicy::Greedy),
        PolicyKind::QTable => {
            let mut table = QTable::new(l);
            let mut visits: HashMap<(OccupancyState, usize), u64> = HashMap::new();
            for _ in 0..config.episodes {
                let mut s = sample_start_state(&config.start, params, &mut rng);
                for _ in 0..config.horizon {
                    let a = explore(&mut rng, params, || table.best_action(&s));
                    let r = f64::from(reward(&s, a)?);
                    let next = transition(&s, a, params, &mut rng)?;
                    let n = visits.entry((s.clone(), a)).or_insert(0);
                    let alpha = params.step_size(*n);
                    *n += 1;
                    super::q_learn_step(&mut table, &s, a, r, &next, alpha, params.discount);
                    s = next;
                }
            }
            Ok(TrainedPolicy::QTable { table })
        }
        PolicyKind::Linear => {
            let mut q = LinearQ::identity(l);
            let mut visits = vec![0u64; l];
            for _ in 0..config.episodes {
                let mut s = sample_start_state(&config.start, params, &mut rng);
                for _ in 0..config.horizon {
                    let best = q.best_action(&s)?;
                    let a = explore(&mut rng, params, || best);
                    let r = f64::from(reward(&s, a)?);
                    let next = transition(&s, a, params, &mut rng)?;
                    let max_next = q.predictions(&next)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
                    let alpha = params.step_size(visits[a - 1]);
                    visits[a - 1] += 1;
                    q.update(&s, a, r + params.discount * max_next, alpha)?;
                    s = next;
                }
            }
            Ok(TrainedPolicy::Linear { q })
        }
    }
}

fn explore(rng: &mut ChaCha8Rng, params: &MdpParams, greedy: impl FnOnce() -> usize) -> usize {
    if rng.random::<f64>() < params.epsilon {
        rng.random_range(1..=params.n_layers)
    } else {
        greedy()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    pub start: StartState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_return: f64,
    /// Fraction of decisions that picked each layer.
    pub action_frequencies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub params: MdpParams,
    pub policy_kind: String,
    pub mean_return: f64,
    pub action_frequencies: Vec<f64>,
}

/// Monte-Carlo mean of `Σ_t discount^t R_t` over `episodes` rollouts.
pub fn evaluate_policy(policy: &dyn SchedulingPolicy, params: &MdpParams, config: &EvalConfig) -> Result<Evaluation> {
    params.validate()?;
    check_start(&config.start, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut counts = vec![0u64; params.n_layers];
    let mut total = 0.0;
    for _ in 0..config.episodes {
        let mut s = sample_start_state(&config.start, params, &mut rng);
        let mut ret = 0.0;
        let mut weight = 1.0;
        for _ in 0..config.horizon {
            let a = policy.choose(&s)?;
            counts[a - 1] += 1;
            ret += weight * f64::from(reward(&s, a)?);
            weight *= params.discount;
            s = transition(&s, a, params, &mut rng)?;
        }
        total += ret;
    }
    let decisions: u64 = counts.iter().sum();
    let freq = |c: u64| {
        if decisions > 0 {
            c as f64 / decisions as f64
        } else {
            0.0
        }
    };
    Ok(Evaluation {
        mean_return: if config.episodes > 0 {
            total / config.episodes as f64
        } else {
            0.0
        },
        action_frequencies: counts.into_iter().map(freq).collect(),
    })
}
