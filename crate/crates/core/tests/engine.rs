mod common;

use common::{check_run, model};
use exitlane_core::engine::{self, Transcript};
use exitlane_core::metrics::{compute_metrics, early_exit_rate_from_histogram};
use exitlane_core::workload::{gen_workload, load_trace};
use exitlane_core::{EngineConfig, Error, ExitTechnique, ThresholdSchedule, WorkloadSpec};
use proptest::prelude::*;

fn spec(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        n_requests: 8,
        mean_interarrival: 0.003,
        prompt_len: (1, 8),
        output_len: (2, 12),
        vocab_size: 64,
        seed,
    }
}

#[test]
fn runs_are_deterministic() {
    let m = model(6, 16, 64, 2);
    let w = gen_workload(&spec(4)).unwrap();
    let cfg = EngineConfig::with_technique(ExitTechnique::StateSimilarity);
    let (a, mut ra) = engine::run(&m, &w, &cfg).unwrap();
    let (b, mut rb) = engine::run(&m, &w, &cfg).unwrap();
    assert_eq!(a, b);
    ra.wall_clock_info_seconds = 0.0;
    rb.wall_clock_info_seconds = 0.0;
    assert_eq!(ra, rb);
}

#[test]
fn tight_pool_defers_admission_without_changing_tokens() {
    let m = model(4, 16, 64, 5);
    let w = gen_workload(&spec(9)).unwrap();
    let roomy = EngineConfig::default();
    let tight = EngineConfig {
        kv_blocks: 4 * 5,
        block_size: 4,
        ..EngineConfig::default()
    };
    let (a, _) = engine::run(&m, &w, &roomy).unwrap();
    let (stats, b) = check_run(&m, &w, &tight).unwrap();
    assert_eq!(stats.completeness_violations, 0);
    let tokens = |t: &Transcript| t.sequences.iter().map(|s| s.tokens.clone()).collect::<Vec<_>>();
    assert_eq!(tokens(&a), tokens(&b));
    assert!(b.header.high_water_blocks <= 20);
    assert!(b.iterations.len() >= a.iterations.len());
}

#[test]
fn request_larger_than_pool_is_unschedulable() {
    let m = model(4, 16, 64, 5);
    let w = gen_workload(&spec(1)).unwrap();
    let cfg = EngineConfig {
        kv_blocks: 4,
        block_size: 1,
        ..EngineConfig::default()
    };
    assert!(matches!(engine::run(&m, &w, &cfg), Err(Error::Unschedulable(_))));
}

#[test]
fn transcript_file_round_trip_reproduces_metrics() {
    let m = model(4, 16, 64, 6);
    let w = gen_workload(&spec(2)).unwrap();
    let (t, report) = engine::run(&m, &w, &EngineConfig::with_technique(ExitTechnique::AlwaysAt(2))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    std::fs::write(&path, t.to_jsonl().unwrap()).unwrap();
    let back = Transcript::from_jsonl(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let mut again = compute_metrics(&back).unwrap();
    again.wall_clock_info_seconds = report.wall_clock_info_seconds;
    assert_eq!(again, report);
}

#[test]
fn csv_trace_drives_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    std::fs::write(
        &path,
        "arrival_time,prompt_len,max_new_tokens\n0.0,3,4\n0.01,5,2\n0.5,1,3\n",
    )
    .unwrap();
    let w = load_trace(&path, 64).unwrap();
    assert_eq!(w.len(), 3);
    let (t, report) = engine::run(&model(4, 16, 64, 1), &w, &EngineConfig::default()).unwrap();
    assert_eq!(t.sequences.len(), 3);
    assert!(report.idle_time_s > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn clock_and_histogram_identities(seed in any::<u64>(), t in 0usize..5, lambda in 0.0f64..1.0, max_batch in 1usize..6) {
        let technique = [
            ExitTechnique::Never,
            ExitTechnique::SoftmaxResponse,
            ExitTechnique::StateSimilarity,
            ExitTechnique::Classifier,
            ExitTechnique::AlwaysAt(2),
        ][t];
        let m = model(4, 16, 64, 3);
        let w = gen_workload(&spec(seed)).unwrap();
        let cfg = EngineConfig { technique, schedule: ThresholdSchedule::constant(lambda), max_batch, ..EngineConfig::default() };
        let (t, r) = engine::run(&m, &w, &cfg).unwrap();
        let total: f64 = t.iterations.iter().map(|it| it.idle + it.charge.total()).sum();
        prop_assert!((total - t.final_clock()).abs() <= 1e-9 * t.final_clock().max(1.0));
        prop_assert!((r.idle_time_s + r.compute_time_s - r.total_time_s).abs() <= 1e-9);
        prop_assert_eq!(r.exit_layer_histogram.iter().sum::<u64>(), r.total_tokens);
        prop_assert!((early_exit_rate_from_histogram(&r.exit_layer_histogram) - r.early_exit_rate_pct).abs() < 1e-9);
        prop_assert!(t.iterations.iter().all(|it| it.per_seq.len() <= max_batch));
        prop_assert!(t.sequences.iter().all(|s| s.first_token.unwrap() <= s.finish.unwrap()));
    }

    #[test]
    fn shallow_exit_never_slower(seed in any::<u64>()) {
        let m = model(6, 16, 64, 8);
        let w = gen_workload(&WorkloadSpec { mean_interarrival: 0.0, ..spec(seed) }).unwrap();
        let never = engine::run(&m, &w, &EngineConfig::default()).unwrap().1;
        let shallow = engine::run(&m, &w, &EngineConfig::with_technique(ExitTechnique::AlwaysAt(1))).unwrap().1;
        prop_assert!(shallow.throughput_tps >= never.throughput_tps);
        prop_assert_eq!(shallow.mean_layers_per_token, 1.0);
    }
}
