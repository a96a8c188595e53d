//! Independent reference computations used to check the engine and the
//! scheduler.
//!
//! [`ReferenceDecoder`] decodes one sequence at a time with plain per-layer
//! `Vec` caches and its own block arithmetic, sharing only the weights and
//! the dense kernels with the engine. [`value_iteration`] solves the
//! scheduling MDP exactly from closed-form binomial transition
//! probabilities rather than by sampling.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::layer_sched::{enumerate_states, MdpParams, OccupancyState, TrainedPolicy};
use crate::model::Model;
use crate::numerics::{self, matvec};

#[derive(Debug, Clone)]
pub struct ReferenceDecoder<'m> {
    model: &'m Model,
    /// `cache[layer - 1][position] = (k, v)`
    cache: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl<'m> ReferenceDecoder<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            cache: vec![Vec::new(); model.n_layers()],
        }
    }

    pub fn positions(&self) -> usize {
        self.cache.last().map_or(0, Vec::len)
    }

    pub fn kv(&self, layer: usize, position: usize) -> Option<(&[f64], &[f64])> {
        self.cache
            .get(layer.checked_sub(1)?)?
            .get(position)
            .map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    /// Feeds one token, computes layers `1..=exit_layer`, fills the rest
    /// from the exit state, and returns that state.
    pub fn feed(&mut self, token: usize, exit_layer: usize) -> Result<Vec<f64>> {
        let n_layers = self.model.n_layers();
        if exit_layer == 0 || exit_layer > n_layers {
            return Err(Error::LayerOutOfRange {
                layer: exit_layer,
                n_layers,
            });
        }
        let d = self.model.d_model();
        let scale = 1.0 / (d as f64).sqrt();
        let mut h = self.model.embed(token)?;
        for layer in 1..=exit_layer {
            let w = self.model.layer(layer)?;
            let q = matvec(&w.w_q, &h)?;
            let k = matvec(&w.w_k, &h)?;
            let v = matvec(&w.w_v, &h)?;
            let slot = &mut self.cache[layer - 1];
            slot.push((k, v));

            let mut scores = Vec::with_capacity(slot.len());
            for (k, _) in slot.iter() {
                scores.push(numerics::dot(&q, k)? * scale);
            }
            let probs = numerics::softmax(&scores)?;
            let mut ctx = vec![0.0; d];
            for (p, (_, v)) in probs.iter().zip(slot.iter()) {
                for c in 0..d {
                    ctx[c] += p * v[c];
                }
            }
            let attn = matvec(&w.w_o, &ctx)?;
            let resid: Vec<f64> = (0..d).map(|c| h[c] + attn[c]).collect();
            let hidden: Vec<f64> = matvec(&w.w_up, &resid)?.into_iter().map(|x| x.max(0.0)).collect();
            let mlp = matvec(&w.w_down, &hidden)?;
            h = (0..d).map(|c| resid[c] + mlp[c]).collect();
        }
        for layer in exit_layer + 1..=n_layers {
            let w = self.model.layer(layer)?;
            self.cache[layer - 1].push((matvec(&w.w_k, &h)?, matvec(&w.w_v, &h)?));
        }
        Ok(h)
    }

    /// Next token from a hidden state (argmax, lowest index on ties).
    pub fn emit(&self, h: &[f64]) -> Result<usize> {
        let logits = self.model.lm_head(h)?;
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Full-depth greedy decode of one prompt.
    pub fn generate(&mut self, prompt: &[usize], max_new_tokens: usize, eos: Option<usize>) -> Result<Vec<usize>> {
        let exits = vec![self.model.n_layers(); max_new_tokens];
        self.replay(prompt, &exits, eos)
    }

    /// Decodes one prompt, forcing the exit layer of each generated token.
    /// Stops at EOS or when `exit_layers` runs out.
    pub fn replay(&mut self, prompt: &[usize], exit_layers: &[usize], eos: Option<usize>) -> Result<Vec<usize>> {
        let (&last, prefix) = prompt.split_last().ok_or(Error::Empty("prompt"))?;
        let n_layers = self.model.n_layers();
        for &tok in prefix {
            self.feed(tok, n_layers)?;
        }
        let mut input = last;
        let mut out = Vec::with_capacity(exit_layers.len());
        for &exit in exit_layers {
            let h = self.feed(input, exit)?;
            let tok = self.emit(&h)?;
            out.push(tok);
            if eos == Some(tok) {
                break;
            }
            input = tok;
        }
        Ok(out)
    }
}

fn binomial_pmf(n: u32, k: u32, p: f64) -> f64 {
    let mut comb = 1.0;
    for i in 0..k {
        comb = comb * f64::from(n - i) / f64::from(i + 1);
    }
    comb * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Exact successor distribution of `(v, action)`.
pub fn transition_distribution(
    v: &OccupancyState,
    action: usize,
    params: &MdpParams,
) -> Result<Vec<(OccupancyState, f64)>> {
    let l = v.n_layers();
    if action == 0 || action > l {
        return Err(Error::LayerOutOfRange {
            layer: action,
            n_layers: l,
        });
    }
    let engaged = v.at(action);
    let outcomes: Vec<(u32, f64)> = if action == l {
        vec![(engaged, 1.0)]
    } else {
        let p = params.exit_prob[action - 1];
        (0..=engaged)
            .map(|e| (e, binomial_pmf(engaged, e, p)))
            .filter(|&(_, pr)| pr > 0.0)
            .collect()
    };
    Ok(outcomes
        .into_iter()
        .map(|(exited, pr)| {
            let mut next = v.counts().to_vec();
            next[action - 1] -= engaged;
            next[0] += exited;
            if action < l {
                next[action] += engaged - exited;
            }
            (OccupancyState::new(next), pr)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ValueIteration {
    pub q: BTreeMap<OccupancyState, Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl ValueIteration {
    pub fn q_value(&self, v: &OccupancyState, action: usize) -> Option<f64> {
        self.q.get(v).map(|row| row[action - 1])
    }

    pub fn optimal_action(&self, v: &OccupancyState) -> Option<usize> {
        let row = self.q.get(v)?;
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        Some(best + 1)
    }
}

/// Synchronous Bellman-optimality sweeps over every state with population
/// `<= N` until the max-norm change drops below `tol`.
pub fn value_iteration(params: &MdpParams, tol: f64, max_iterations: usize) -> Result<ValueIteration> {
    params.validate()?;
    let states = enumerate_states(params.n_layers, params.population);
    let l = params.n_layers;
    let model: Vec<Vec<Vec<(usize, f64)>>> = {
        let index: BTreeMap<&OccupancyState, usize> = states.iter().enumerate().map(|(i, s)| (s, i)).collect();
        states
            .iter()
            .map(|s| {
                (1..=l)
                    .map(|a| {
                        Ok(transition_distribution(s, a, params)?
                            .into_iter()
                            .map(|(t, p)| (index[&t], p))
                            .collect())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut q: Vec<Vec<f64>> = states.iter().map(|s| s.as_f64()).collect();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iterations && residual >= tol {
        let v: Vec<f64> = q
            .iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        residual = 0.0;
        for (si, s) in states.iter().enumerate() {
            for a in 1..=l {
                let expect: f64 = model[si][a - 1].iter().map(|&(t, p)| p * v[t]).sum();
                let updated = f64::from(s.at(a)) + params.discount * expect;
                residual = residual.max((updated - q[si][a - 1]).abs());
                q[si][a - 1] = updated;
            }
        }
        iterations += 1;
    }
    Ok(ValueIteration {
        q: states.into_iter().zip(q).collect(),
        iterations,
        converged: residual < tol,
        residual,
    })
}

/// States reachable from `start` under any sequence of actions.
pub fn reachable_states(params: &MdpParams, start: &OccupancyState) -> Result<Vec<OccupancyState>> {
    let mut seen = BTreeSet::from([start.clone()]);
    let mut queue = VecDeque::from([start.clone()]);
    while let Some(s) = queue.pop_front() {
        for a in 1..=params.n_layers {
            for (t, _) in transition_distribution(&s, a, params)? {
                if seen.insert(t.clone()) {
                    queue.push_back(t);
                }
            }
        }
    }
    Ok(seen.into_iter().collect())
}

/// Max-norm gap between a trained policy's Q estimates and the exact Q* over
/// `states` and every action.
pub fn max_q_error(policy: &TrainedPolicy, exact: &ValueIteration, states: &[OccupancyState]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in states {
        for a in 1..=s.n_layers() {
            let truth = exact
                .q_value(s, a)
                .ok_or_else(|| Error::InvalidConfig(format!("state {s} outside the solved space")))?;
            worst = worst.max((policy.q_value(s, a)? - truth).abs());
        }
    }
    Ok(worst)
}
