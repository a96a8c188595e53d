//! Layer-level scheduling as a Markov decision process.
//!
//! A batch of `N` sequences is summarized by how many of them wait at each
//! layer. An action picks one layer to execute; the reward is how many
//! sequences run in it. Each engaged sequence then exits with the layer's
//! probability (returning to layer 1 for its next token) or advances to the
//! next layer. At layer `L` exit is forced. Populations are conserved, so a
//! run started with `N` sequences stays on the `sum == N` slice of the
//! `C(N+L, N)` states with `sum <= N`.

mod qlearn;
mod train;

pub use qlearn::{q_init, q_learn_step, LinearQ, QTable};
pub use train::{
    evaluate_policy, sample_start_state, train_policy, EvalConfig, Evaluation, EvaluationReport, GreedyPolicy,
    PolicyKind, SchedulingPolicy, StartState, TrainConfig, TrainedPolicy,
};

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Transcript;
use crate::error::{Error, Result};

/// `v[i]` = number of sequences whose next layer is `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OccupancyState(Vec<u32>);

impl OccupancyState {
    pub fn new(counts: Vec<u32>) -> Self {
        Self(counts)
    }

    /// Every sequence waiting at layer 1.
    pub fn all_at_first(n_layers: usize, population: u32) -> Self {
        let mut v = vec![0; n_layers];
        if let Some(first) = v.first_mut() {
            *first = population;
        }
        Self(v)
    }

    pub fn n_layers(&self) -> usize {
        self.0.len()
    }

    pub fn population(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    /// Count at 1-based `layer`.
    pub fn at(&self, layer: usize) -> u32 {
        self.0[layer - 1]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| f64::from(c)).collect()
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action == 0 || action > self.0.len() {
            return Err(Error::LayerOutOfRange {
                layer: action,
                n_layers: self.0.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for OccupancyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpParams {
    pub n_layers: usize,
    pub population: u32,
    /// Exit probability per layer, index `i - 1` for layer `i`.
    pub exit_prob: Vec<f64>,
    pub discount: f64,
    pub alpha: f64,
    pub epsilon: f64,
    /// When set to `τ`, the step size for the n-th update of an entry is
    /// `alpha · τ / (τ + n)`; otherwise it stays `alpha`.
    #[serde(default)]
    pub alpha_decay: Option<f64>,
}

impl MdpParams {
    pub fn uniform(n_layers: usize, population: u32, p: f64, discount: f64) -> Self {
        Self {
            n_layers,
            population,
            exit_prob: vec![p; n_layers],
            discount,
            alpha: 0.1,
            epsilon: 0.1,
            alpha_decay: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 {
            return bad("scheduler needs at least one layer".into());
        }
        if self.exit_prob.len() != self.n_layers {
            return bad(format!(
                "exit_prob has {} entries for {} layers",
                self.exit_prob.len(),
                self.n_layers
            ));
        }
        if self.exit_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("exit probabilities must lie in [0, 1]".into());
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount must lie in (0, 1), got {}", self.discount));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if self.alpha_decay.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return bad("alpha_decay must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn step_size(&self, prior_visits: u64) -> f64 {
        match self.alpha_decay {
            Some(tau) => self.alpha * tau / (tau + prior_visits as f64),
            None => self.alpha,
        }
    }

    /// Upper bound on any discounted return: `N / (1 - discount)`.
    pub fn return_bound(&self) -> f64 {
        f64::from(self.population) / (1.0 - self.discount)
    }
}

/// Counts next-layer indices (1-based) into an occupancy vector.
pub fn encode_state(next_layers: &[usize], n_layers: usize) -> Result<OccupancyState> {
    let mut v = vec![0u32; n_layers];
    for &l in next_layers {
        if l == 0 || l > n_layers {
            return Err(Error::LayerOutOfRange { layer: l, n_layers });
        }
        v[l - 1] += 1;
    }
    Ok(OccupancyState(v))
}

/// Sequences engaged by running `action`.
pub fn reward(v: &OccupancyState, action: usize) -> Result<u32> {
    v.check_action(action)?;
    Ok(v.at(action))
}

/// Samples the successor state after executing `action`.
pub fn transition<R: Rng + ?Sized>(
    v: &OccupancyState,
    action: usize,
    params: &MdpParams,
    rng: &mut R,
) -> Result<OccupancyState> {
    v.check_action(action)?;
    let engaged = v.at(action);
    let exited = if action == v.n_layers() {
        engaged
    } else {
        let p = params.exit_prob[action - 1];
        (0..engaged).filter(|_| rng.random::<f64>() < p).count() as u32
    };
    Ok(apply_move(v, action, exited))
}

/// State after `exited` of the sequences at `action` return to layer 1 and
/// the rest advance.
pub(crate) fn apply_move(v: &OccupancyState, action: usize, exited: u32) -> OccupancyState {
    let engaged = v.at(action);
    let mut next = v.0.clone();
    next[action - 1] -= engaged;
    next[0] += exited;
    if action < next.len() {
        next[action] += engaged - exited;
    }
    OccupancyState(next)
}

/// Layer holding the most sequences; ties go to the lowest layer.
pub fn greedy_policy(v: &OccupancyState) -> Result<usize> {
    if v.population() == 0 {
        return Err(Error::Empty("occupancy state"));
    }
    Ok(argmax_lowest(v.counts().iter().map(|&c| f64::from(c))))
}

/// 1-based argmax, lowest index on ties.
pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (1, f64::NEG_INFINITY);
    for (i, x) in values.enumerate() {
        if x > best.1 {
            best = (i + 1, x);
        }
    }
    best.0
}

/// `C(N + L, N)`: occupancy vectors over `L` layers with at most `N`
/// sequences in total.
pub fn state_space_size(n_layers: usize, population: usize) -> Result<u64> {
    if n_layers == 0 {
        return Err(Error::InvalidConfig("state space needs at least one layer".into()));
    }
    let k = n_layers.min(population) as u128;
    let n = (n_layers + population) as u128;
    let mut acc: u128 = 1;
    for i in 1..=k {
        acc = acc.checked_mul(n - k + i).ok_or(Error::Overflow("state_space_size"))? / i;
    }
    u64::try_from(acc).map_err(|_| Error::Overflow("state_space_size"))
}

/// All occupancy vectors over `n_layers` with total population `<= max_population`,
/// in lexicographic order.
pub fn enumerate_states(n_layers: usize, max_population: u32) -> Vec<OccupancyState> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; n_layers];
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<OccupancyState>) {
        if i == cur.len() {
            out.push(OccupancyState(cur.clone()));
            return;
        }
        for c in 0..=left {
            cur[i] = c;
            rec(i + 1, left - c, cur, out);
        }
        cur[i] = 0;
    }
    rec(0, max_population, &mut cur, &mut out);
    out
}

/// Per-layer exit hazards estimated from an engine transcript: among tokens
/// that had not accepted before layer `i`, the fraction whose first accept
/// was at `i`. Layer `L` is always 1; a layer no token reaches gets 0.
pub fn estimate_exit_probs(transcript: &Transcript) -> Vec<f64> {
    let n_layers = transcript.header.n_layers;
    let mut accepted_at = vec![0u64; n_layers];
    let mut total = 0u64;
    for step in transcript.iterations.iter().flat_map(|it| &it.per_seq) {
        total += 1;
        if let Some(l) = step.accept_layer.filter(|l| (1..=n_layers).contains(l)) {
            accepted_at[l - 1] += 1;
        }
    }
    let mut at_risk = total;
    let mut probs = Vec::with_capacity(n_layers);
    for (i, &a) in accepted_at.iter().enumerate() {
        if i + 1 == n_layers {
            probs.push(1.0);
        } else {
            probs.push(if at_risk > 0 { a as f64 / at_risk as f64 } else { 0.0 });
            at_risk -= a;
        }
    }
    probs
}
