//! Drives an engine step by step against per-sequence reference decoders.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use exitlane_core::oracle::ReferenceDecoder;
use exitlane_core::{Engine, EngineConfig, Model, ModelConfig, Result, Transcript, Workload, WorkloadSpec};

#[derive(Debug, Default, Clone)]
pub struct OracleStats {
    pub iterations: usize,
    pub early_iterations: usize,
    pub tokens: usize,
    pub token_mismatches: usize,
    pub exit_state_mismatches: usize,
    pub filled_checked: usize,
    pub nonfilled_checked: usize,
    pub max_fill_err: f64,
    pub max_nonfill_err: f64,
    pub completeness_checks: usize,
    pub completeness_violations: usize,
}

impl OracleStats {
    pub fn absorb(&mut self, o: &OracleStats) {
        self.iterations += o.iterations;
        self.early_iterations += o.early_iterations;
        self.tokens += o.tokens;
        self.token_mismatches += o.token_mismatches;
        self.exit_state_mismatches += o.exit_state_mismatches;
        self.filled_checked += o.filled_checked;
        self.nonfilled_checked += o.nonfilled_checked;
        self.max_fill_err = self.max_fill_err.max(o.max_fill_err);
        self.max_nonfill_err = self.max_nonfill_err.max(o.max_nonfill_err);
        self.completeness_checks += o.completeness_checks;
        self.completeness_violations += o.completeness_violations;
    }
}

pub fn model(n_layers: usize, d_model: usize, vocab_size: usize, seed: u64) -> Model {
    Model::seeded(ModelConfig {
        n_layers,
        d_model,
        vocab_size,
        seed,
    })
    .expect("model")
}

/// Seeded workload with at most 16 requests and 32 new tokens each.
pub fn corpus_workload(seed: u64, vocab_size: usize) -> Workload {
    exitlane_core::workload::gen_workload(&WorkloadSpec {
        n_requests: 4 + (seed as usize * 5) % 13,
        mean_interarrival: if seed.is_multiple_of(2) { 0.0 } else { 0.004 },
        prompt_len: (1, 12),
        output_len: (4, 32),
        vocab_size,
        seed,
    })
    .expect("workload")
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Shadow<'m> {
    decoder: ReferenceDecoder<'m>,
    input: usize,
    generated: usize,
    max_new: usize,
    filled: HashSet<(usize, usize)>,
}

/// Runs `workload` to completion, checking after every iteration:
/// tokens and exit states against the reference decoder, each filled
/// `(K, V)` against `compute_kv_pair`, non-filled entries against the
/// reference cache, and that every live `(sequence, layer)` is viewable up
/// to the committed length.
pub fn check_run(model: &Model, workload: &Workload, config: &EngineConfig) -> Result<(OracleStats, Transcript)> {
    let n_layers = model.n_layers();
    let mut sorted = workload.clone();
    sorted.sort_by_arrival();
    let mut engine = Engine::new(model, config.clone())?;
    engine.submit(workload)?;
    let mut shadows: HashMap<usize, Shadow> = HashMap::new();
    let mut stats = OracleStats::default();

    while let Some(rec) = engine.step()?.cloned() {
        stats.iterations += 1;
        if rec.output_layer < n_layers {
            stats.early_iterations += 1;
        }
        for &id in &rec.prefilled_ids {
            let req = &sorted.requests[id];
            let mut decoder = ReferenceDecoder::new(model);
            let (&last, prefix) = req.prompt.split_last().expect("prompt");
            for &tok in prefix {
                decoder.feed(tok, n_layers)?;
            }
            shadows.insert(
                id,
                Shadow {
                    decoder,
                    input: last,
                    generated: 0,
                    max_new: req.max_new_tokens,
                    filled: HashSet::new(),
                },
            );
        }
        let cache = engine.cache();
        for (k, step) in rec.per_seq.iter().enumerate() {
            let sh = shadows.get_mut(&step.id).expect("admitted sequence");
            let h = sh.decoder.feed(sh.input, rec.output_layer)?;
            stats.tokens += 1;
            if h != rec.exit_states[k] {
                stats.exit_state_mismatches += 1;
            }
            let tok = sh.decoder.emit(&h)?;
            if tok != step.token {
                stats.token_mismatches += 1;
            }
            sh.input = step.token;
            sh.generated += 1;

            let p = sh.decoder.positions() - 1;
            for layer in rec.output_layer + 1..=n_layers {
                let (ks, vs) = cache.view(step.id, layer, p + 1)?;
                let (ek, ev) = model.compute_kv_pair(layer, &rec.exit_states[k])?;
                stats.max_fill_err = stats.max_fill_err.max(max_abs(ks[p], &ek)).max(max_abs(vs[p], &ev));
                stats.filled_checked += 1;
                sh.filled.insert((layer, p));
            }
            // Fresh entries every step; the whole history once the sequence ends.
            let done = config.eos_token == Some(step.token) || sh.generated >= sh.max_new;
            let positions: Vec<usize> = if done || rec.prefilled_ids.contains(&step.id) {
                (0..=p).collect()
            } else {
                vec![p]
            };
            for &pos in &positions {
                for layer in 1..=n_layers {
                    if sh.filled.contains(&(layer, pos)) {
                        continue;
                    }
                    let (ks, vs) = cache.view(step.id, layer, pos + 1)?;
                    let (rk, rv) = sh.decoder.kv(layer, pos).expect("reference entry");
                    stats.max_nonfill_err = stats
                        .max_nonfill_err
                        .max(max_abs(ks[pos], rk))
                        .max(max_abs(vs[pos], rv));
                    stats.nonfilled_checked += 1;
                }
            }
        }
        for seq in engine.running() {
            let committed = cache.committed_len(seq.id)?;
            let expected = shadows[&seq.id].decoder.positions();
            for layer in 1..=n_layers {
                stats.completeness_checks += 1;
                let ok = committed == expected
                    && cache.len(seq.id, layer)? == committed
                    && cache
                        .view(seq.id, layer, committed)
                        .is_ok_and(|(k, v)| k.len() == committed && v.len() == committed);
                if !ok {
                    stats.completeness_violations += 1;
                }
            }
        }
    }
    Ok((stats, engine.into_transcript()))
}
