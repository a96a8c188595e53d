//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{check_run, corpus_workload, model, OracleStats};
use exitlane_core::compare::compare;
use exitlane_core::engine::{
    self, resolve_output_layer, Charge, ExitStatusVector, IterationRecord, SeqStep, SequenceRecord, TranscriptHeader,
};
use exitlane_core::layer_sched::{
    enumerate_states, evaluate_policy, state_space_size, train_policy, EvalConfig, GreedyPolicy, MdpParams,
    OccupancyState, PolicyKind, StartState, TrainConfig,
};
use exitlane_core::metrics::{compute_metrics, early_exit_rate_from_histogram};
use exitlane_core::oracle::{max_q_error, reachable_states, value_iteration, ReferenceDecoder};
use exitlane_core::workload::{gen_workload, Request};
use exitlane_core::{CostModel, EngineConfig, ExitTechnique, ThresholdSchedule, Transcript, Workload, WorkloadSpec};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

const CORPUS_SEEDS: u64 = 24;
const VOCAB: usize = 256;

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 full-layer equivalence", full_layer_equivalence),
        ("2 kv fill oracle", kv_fill_oracle),
        ("3 all-layers completeness", completeness),
        ("4 status semantics", status_semantics),
        ("5 scheduler oracle", scheduler_oracle),
        ("6 greedy baseline", greedy_baseline),
        ("7 state-space formula", state_space_formula),
        ("8 cost-model speedup", cost_model_speedup),
        ("9 metric formulas", metric_formulas),
        ("10 technique cost ordering", technique_cost_ordering),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !ok {
            failed += 1;
        }
        println!("criterion {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn corpus_model() -> exitlane_core::Model {
    model(8, 64, VOCAB, 42)
}

/// Early-exiting configurations run over the corpus for criteria 2 and 3.
fn exiting_configs() -> Vec<EngineConfig> {
    let mut out: Vec<EngineConfig> = [
        ExitTechnique::SoftmaxResponse,
        ExitTechnique::StateSimilarity,
        ExitTechnique::Classifier,
        ExitTechnique::AlwaysAt(3),
    ]
    .into_iter()
    .map(EngineConfig::with_technique)
    .collect();
    // Lower thresholds so the confidence techniques exit on this model.
    out.push(EngineConfig {
        schedule: ThresholdSchedule {
            lambda0: 0.9,
            decay: 0.9,
            floor: 0.1,
        },
        ..EngineConfig::with_technique(ExitTechnique::StateSimilarity)
    });
    out.push(EngineConfig {
        schedule: ThresholdSchedule::constant(0.05),
        ..EngineConfig::with_technique(ExitTechnique::SoftmaxResponse)
    });
    out.push(EngineConfig {
        forced_exit_layer: Some(5),
        ..EngineConfig::with_technique(ExitTechnique::Classifier)
    });
    out
}

fn corpus_stats() -> OracleStats {
    let m = corpus_model();
    let mut total = OracleStats::default();
    for seed in 0..CORPUS_SEEDS {
        let w = corpus_workload(seed, VOCAB);
        let mut configs = vec![EngineConfig::default()];
        configs.extend(exiting_configs());
        for cfg in configs {
            let (stats, _) = check_run(&m, &w, &cfg).expect("oracle run");
            total.absorb(&stats);
        }
    }
    total
}

fn full_layer_equivalence() -> Outcome {
    let started = Instant::now();
    let m = corpus_model();
    let mut streams = 0;
    let mut mismatched = 0;
    for seed in 0..CORPUS_SEEDS {
        let w = corpus_workload(seed, VOCAB);
        assert!(w.len() <= 16 && w.requests.iter().all(|r| r.max_new_tokens <= 32));
        let (transcript, _) = engine::run(&m, &w, &EngineConfig::default()).expect("engine run");
        let mut sorted = w.clone();
        sorted.sort_by_arrival();
        for (req, seq) in sorted.requests.iter().zip(&transcript.sequences) {
            let expected = ReferenceDecoder::new(&m)
                .generate(&req.prompt, req.max_new_tokens, Some(0))
                .expect("reference decode");
            streams += 1;
            if expected != seq.tokens {
                mismatched += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    (
        mismatched == 0 && elapsed < Duration::from_secs(60),
        format!(
            "{CORPUS_SEEDS} workloads, {streams} streams, {mismatched} mismatched, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn kv_fill_oracle() -> Outcome {
    let s = corpus_stats();
    let ok = s.early_iterations > 0
        && s.filled_checked > 0
        && s.max_fill_err <= 1e-12
        && s.max_nonfill_err <= 1e-9
        && s.token_mismatches == 0
        && s.exit_state_mismatches == 0;
    (
        ok,
        format!(
            "{} early-exit iterations, {} filled pairs max err {:.3e}, {} non-filled pairs max err {:.3e}, {} token mismatches",
            s.early_iterations, s.filled_checked, s.max_fill_err, s.nonfilled_checked, s.max_nonfill_err, s.token_mismatches
        ),
    )
}

fn completeness() -> Outcome {
    let mut total = corpus_stats();
    // Randomized pools, block sizes, and batch limits on a smaller model.
    let m = model(4, 16, 64, 9);
    let techniques = [
        ExitTechnique::Never,
        ExitTechnique::StateSimilarity,
        ExitTechnique::SoftmaxResponse,
        ExitTechnique::Classifier,
        ExitTechnique::AlwaysAt(1),
        ExitTechnique::AlwaysAt(2),
    ];
    let strategy = (
        any::<u64>(),
        1usize..6,
        0usize..150,
        1usize..7,
        0usize..techniques.len(),
        0.0f64..0.5,
    );
    let mut runner = TestRunner::new(PtConfig {
        cases: 48,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let prop_stats = std::cell::RefCell::new(OracleStats::default());
    let result = runner.run(&strategy, |(seed, block_size, extra_blocks, max_batch, t, lambda)| {
        let w = gen_workload(&WorkloadSpec {
            n_requests: 6,
            mean_interarrival: 0.002,
            prompt_len: (1, 6),
            output_len: (1, 8),
            vocab_size: 64,
            seed,
        })
        .unwrap();
        // Enough blocks for the largest single reservation.
        let largest: usize = 6 + 8 - 1;
        let kv_blocks = largest.div_ceil(block_size) * 4 + extra_blocks;
        let cfg = EngineConfig {
            technique: techniques[t],
            schedule: ThresholdSchedule::constant(lambda),
            max_batch,
            kv_blocks,
            block_size,
            ..EngineConfig::default()
        };
        let (stats, _) = check_run(&m, &w, &cfg).unwrap();
        prop_assert_eq!(stats.completeness_violations, 0);
        prop_stats.borrow_mut().absorb(&stats);
        Ok(())
    });
    total.absorb(&prop_stats.into_inner());
    let ok = result.is_ok() && total.completeness_violations == 0 && total.completeness_checks > 0;
    (
        ok,
        format!(
            "{} checks, {} violations{}",
            total.completeness_checks,
            total.completeness_violations,
            result.err().map(|e| format!(", proptest: {e}")).unwrap_or_default()
        ),
    )
}

fn status_semantics() -> Outcome {
    // Worked example: one sequence accepts at 2, the other at 5.
    let l = 8;
    let mut sv = ExitStatusVector::new(2);
    let mut exit = l;
    for layer in 1..l {
        let accepted = [layer == 2, layer == 5];
        if sv.update(layer, &accepted).unwrap() {
            exit = layer;
            break;
        }
    }
    let example_ok =
        exit == 5 && sv.first_accept() == [Some(2), Some(5)] && resolve_output_layer(sv.first_accept(), l) == 5;

    let strategy = (2usize..12, 1usize..9).prop_flat_map(|(l, b)| {
        (
            Just(l),
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), b), l - 1),
        )
    });
    let mut runner = TestRunner::new(PtConfig {
        cases: 512,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let result = runner.run(&strategy, |(l, pattern)| {
        let b = pattern[0].len();
        let mut sv = ExitStatusVector::new(b);
        let mut prev = vec![false; b];
        let mut exit = l;
        for (i, accepted) in pattern.iter().enumerate() {
            let layer = i + 1;
            let all = sv.update(layer, accepted).unwrap();
            for j in 0..b {
                prop_assert!(!prev[j] || sv.status()[j], "status went true -> false");
                prop_assert_eq!(sv.status()[j], prev[j] || accepted[j]);
            }
            prev = sv.status().to_vec();
            if all {
                exit = layer;
                break;
            }
        }
        // Independent first-accept computation.
        let first: Vec<Option<usize>> = (0..b)
            .map(|j| pattern[..exit.min(l - 1)].iter().position(|a| a[j]).map(|i| i + 1))
            .collect();
        prop_assert_eq!(sv.first_accept(), first.as_slice());
        let expected = if first.iter().all(Option::is_some) {
            first.iter().map(|f| f.unwrap()).max().unwrap()
        } else {
            l
        };
        prop_assert_eq!(exit, expected);
        prop_assert_eq!(resolve_output_layer(sv.first_accept(), l), expected);
        Ok(())
    });
    (
        example_ok && result.is_ok(),
        format!(
            "accepts at 2 and 5 exit at {exit}; 512 random patterns{}",
            result.err().map(|e| format!(", proptest: {e}")).unwrap_or_default()
        ),
    )
}

fn criterion5_params() -> MdpParams {
    MdpParams::uniform(3, 2, 0.5, 0.9)
}

fn scheduler_oracle() -> Outcome {
    let started = Instant::now();
    let params = criterion5_params();
    assert_eq!(params.alpha, 0.1);
    assert_eq!(params.epsilon, 0.1);
    assert!(params.alpha_decay.is_none());
    let exact = value_iteration(&params, 1e-12, 100_000).expect("value iteration");
    let start = OccupancyState::all_at_first(3, 2);
    let reachable = reachable_states(&params, &start).expect("reachable");
    let config = TrainConfig {
        episodes: 100_000,
        horizon: 10,
        seed: 5,
        start: StartState::Uniform,
    };
    let steps = config.episodes * config.horizon;
    let policy = train_policy(PolicyKind::QTable, &params, &config).expect("training");
    let err = max_q_error(&policy, &exact, &reachable).expect("q error");
    let elapsed = started.elapsed();
    (
        exact.converged && exact.q.len() == 10 && steps >= 50_000 && err <= 0.05 && elapsed < Duration::from_secs(30),
        format!(
            "value iteration over {} states converged={} in {} sweeps; Q-learning {steps} steps max error {err:.4} on {} reachable states (tolerance 0.05); {:.2}s",
            exact.q.len(),
            exact.converged,
            exact.iterations,
            reachable.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn greedy_baseline() -> Outcome {
    let params = criterion5_params();
    let policy = train_policy(
        PolicyKind::QTable,
        &params,
        &TrainConfig {
            episodes: 5_000,
            horizon: 100,
            seed: 17,
            start: StartState::Uniform,
        },
    )
    .expect("training");
    let eval = EvalConfig {
        episodes: 10_000,
        horizon: 100,
        seed: 23,
        start: StartState::FirstLayer,
    };
    let trained = evaluate_policy(&policy, &params, &eval).expect("evaluate").mean_return;
    let greedy = evaluate_policy(&GreedyPolicy, &params, &eval)
        .expect("evaluate")
        .mean_return;
    let margin = 0.01 * f64::from(params.population);
    (
        trained >= greedy - margin,
        format!("trained {trained:.4} vs greedy {greedy:.4} (margin {margin})"),
    )
}

fn binomial(n: u64, k: u64) -> u64 {
    (1..=k).fold(1u64, |acc, i| acc * (n - k + i) / i)
}

fn state_space_formula() -> Outcome {
    let headline = state_space_size(8, 4).unwrap();
    let mut mismatches = Vec::new();
    for l in 1..=5usize {
        for n in 0..=5u32 {
            let states = enumerate_states(l, n);
            // Brute force over (N+1)^L count vectors.
            let mut brute = 0u64;
            for code in 0..(n as u64 + 1).pow(l as u32) {
                let mut c = code;
                let mut sum = 0;
                for _ in 0..l {
                    sum += c % (n as u64 + 1);
                    c /= n as u64 + 1;
                }
                if sum <= n as u64 {
                    brute += 1;
                }
            }
            let distinct: std::collections::BTreeSet<_> = states.iter().collect();
            let formula = binomial(n as u64 + l as u64, n as u64);
            let ok = states.len() as u64 == formula
                && brute == formula
                && distinct.len() == states.len()
                && states.iter().all(|s| s.n_layers() == l && s.population() <= n)
                && state_space_size(l, n as usize).unwrap() == formula;
            if !ok {
                mismatches.push((l, n));
            }
        }
    }
    (
        headline == 495 && mismatches.is_empty(),
        format!("state_space_size(8,4)={headline}; 30 (L,N) pairs, mismatches {mismatches:?}"),
    )
}

fn cost_model_speedup() -> Outcome {
    let settings = [(8usize, 1e-4, 2e-5), (4, 1e-3, 0.0), (12, 5e-4, 1e-4)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (l, c_layer, c_fill) in settings {
        let m = model(l, 16, 64, 3);
        let w = gen_workload(&WorkloadSpec {
            n_requests: 12,
            mean_interarrival: 0.0,
            prompt_len: (1, 6),
            output_len: (4, 16),
            vocab_size: 64,
            seed: l as u64,
        })
        .unwrap();
        let cost = CostModel {
            c_layer_per_seq: c_layer,
            c_fill_per_seq_layer: c_fill,
            ..CostModel::zero()
        };
        let base = EngineConfig {
            cost,
            ..EngineConfig::default()
        };
        let half = EngineConfig {
            technique: ExitTechnique::AlwaysAt(l / 2),
            ..base.clone()
        };
        let never = engine::run(&m, &w, &base).unwrap().1.throughput_tps;
        let early = engine::run(&m, &w, &half).unwrap().1.throughput_tps;
        let measured = early / never;
        let half_l = (l / 2) as f64;
        let expected = l as f64 / (half_l + half_l * (c_fill / c_layer));
        let rel = (measured - expected).abs() / expected;
        ok &= rel <= 0.01;
        parts.push(format!("L={l} ratio {measured:.4} vs {expected:.4}"));
    }
    (ok, parts.join("; "))
}

fn record(index: usize, clock: f64, output_layer: usize, ids: &[usize], accept: Option<usize>) -> IterationRecord {
    IterationRecord {
        index,
        clock,
        idle: 0.0,
        charge: Charge {
            layers: 0.0,
            ..Charge::default()
        },
        batch_ids: ids.to_vec(),
        prefilled_ids: Vec::new(),
        output_layer,
        per_seq: ids
            .iter()
            .map(|&id| SeqStep {
                id,
                accept_layer: accept,
                token: 1,
            })
            .collect(),
        status: Vec::new(),
        exit_states: Vec::new(),
    }
}

fn seq(id: usize, first: f64, finish: f64, n: usize) -> SequenceRecord {
    SequenceRecord {
        id,
        arrival: 0.0,
        first_token: Some(first),
        finish: Some(finish),
        prompt_len: 1,
        tokens: vec![1; n],
        exit_layers: Vec::new(),
        accept_layers: Vec::new(),
    }
}

fn metric_formulas() -> Outcome {
    let mut failures = Vec::new();
    // Two sequences over four iterations on a 4-layer model; iterations 1
    // and 2 exit early.
    let t = Transcript {
        header: TranscriptHeader {
            n_layers: 4,
            technique: ExitTechnique::StateSimilarity,
            pool_blocks: 8,
            high_water_blocks: 4,
        },
        iterations: vec![
            record(0, 1.0, 4, &[0, 1], None),
            record(1, 2.0, 2, &[0, 1], Some(2)),
            record(2, 3.0, 1, &[0], Some(1)),
            record(3, 4.0, 4, &[0], None),
        ],
        sequences: vec![seq(0, 1.0, 4.0, 4), seq(1, 1.0, 2.0, 2)],
    };
    let r = compute_metrics(&t).unwrap();
    // 6 tokens in 4 s; latency (3 + 1) / 6; 3 of 6 tokens exited early;
    // layers (4+4+2+2+1+4) / 6.
    let checks = [
        ("throughput", r.throughput_tps, 6.0 / 4.0),
        ("latency", r.inner_token_latency_s, 4.0 / 6.0),
        ("exit rate", r.early_exit_rate_pct, 50.0),
        ("mean layers", r.mean_layers_per_token, 17.0 / 6.0),
        (
            "hist rate",
            early_exit_rate_from_histogram(&r.exit_layer_histogram),
            50.0,
        ),
    ];
    for (name, got, want) in checks {
        if got != want {
            failures.push(format!("{name} {got} != {want}"));
        }
    }
    if r.exit_layer_histogram != [1, 2, 0, 3] {
        failures.push(format!("histogram {:?}", r.exit_layer_histogram));
    }

    // Static-half analogue on a real run: every token exits at L/2.
    let l = 8;
    let m = model(l, 16, 64, 4);
    let w = Workload {
        requests: (0..6)
            .map(|i| Request {
                arrival_time: 0.001 * i as f64,
                prompt: vec![1 + i, 2 + i],
                max_new_tokens: 5,
            })
            .collect(),
    };
    let cfg = EngineConfig {
        eos_token: None,
        ..EngineConfig::with_technique(ExitTechnique::AlwaysAt(l / 2))
    };
    let (_, half) = engine::run(&m, &w, &cfg).unwrap();
    if half.early_exit_rate_pct != 100.0 {
        failures.push(format!("always-at rate {}", half.early_exit_rate_pct));
    }
    if half.mean_layers_per_token != (l / 2) as f64 {
        failures.push(format!("always-at mean layers {}", half.mean_layers_per_token));
    }
    if half.total_tokens != 30 || half.exit_layer_histogram[l / 2 - 1] != 30 {
        failures.push(format!("always-at histogram {:?}", half.exit_layer_histogram));
    }
    (
        failures.is_empty(),
        if failures.is_empty() {
            "hand transcript and always-at(L/2) run".into()
        } else {
            failures.join("; ")
        },
    )
}

fn technique_cost_ordering() -> Outcome {
    let m = corpus_model();
    let w = corpus_workload(7, VOCAB);
    let base = EngineConfig {
        forced_exit_layer: Some(4),
        ..EngineConfig::default()
    };
    let techniques: Vec<_> = [
        ExitTechnique::SoftmaxResponse,
        ExitTechnique::Classifier,
        ExitTechnique::StateSimilarity,
    ]
    .into_iter()
    .map(|t| (t, ThresholdSchedule::calibrated(t)))
    .collect();
    let report = compare(&m, &w, &base, &techniques).unwrap();
    let thr = |name: &str| report.row(name).unwrap().throughput_tps;
    let (state, softmax, classifier) = (thr("state"), thr("softmax"), thr("classifier"));
    let same_tokens = report
        .reports
        .windows(2)
        .all(|p| p[0].total_tokens == p[1].total_tokens);
    (
        state >= softmax && state >= classifier && same_tokens,
        format!("tokens/s state {state:.2}, softmax {softmax:.2}, classifier {classifier:.2}"),
    )
}
