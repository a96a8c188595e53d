//! Runs one workload under several exit techniques and reports each against
//! the full-depth (`never`) baseline.

use serde::{Deserialize, Serialize};

use crate::engine::{self, EngineConfig};
use crate::error::Result;
use crate::exit_policy::{ExitTechnique, ThresholdSchedule};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::workload::Workload;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub technique: String,
    pub lambda0: f64,
    pub throughput_tps: f64,
    pub inner_token_latency_s: f64,
    pub early_exit_rate_pct: f64,
    pub mean_layers_per_token: f64,
    /// `throughput / throughput(never)`
    pub throughput_ratio_vs_never: f64,
    /// `latency(never) / latency`
    pub latency_reduction_vs_never: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: MetricsReport,
    pub rows: Vec<CompareRow>,
    pub reports: Vec<MetricsReport>,
}

impl CompareReport {
    pub fn row(&self, technique: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.technique == technique)
    }

    /// Plain-text ratio table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>14} {:>14} {:>10} {:>12} {:>12}\n",
            "technique", "lambda0", "tokens/s", "latency s/tok", "exit %", "thr ratio", "lat reduct"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>8.3} {:>14.3} {:>14.6} {:>10.2} {:>12.4} {:>12.4}\n",
                r.technique,
                r.lambda0,
                r.throughput_tps,
                r.inner_token_latency_s,
                r.early_exit_rate_pct,
                r.throughput_ratio_vs_never,
                r.latency_reduction_vs_never
            ));
        }
        out
    }
}

/// Each run gets its own engine and cache; runs execute on scoped threads
/// and share the immutable model.
pub fn compare(
    model: &Model,
    workload: &Workload,
    base: &EngineConfig,
    techniques: &[(ExitTechnique, ThresholdSchedule)],
) -> Result<CompareReport> {
    let mut configs = vec![EngineConfig {
        technique: ExitTechnique::Never,
        schedule: ThresholdSchedule::calibrated(ExitTechnique::Never),
        ..base.clone()
    }];
    configs.extend(
        techniques
            .iter()
            .filter(|(t, _)| *t != ExitTechnique::Never)
            .map(|&(technique, schedule)| EngineConfig {
                technique,
                schedule,
                ..base.clone()
            }),
    );

    let results: Vec<Result<MetricsReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| scope.spawn(move || engine::run(model, workload, cfg).map(|(_, r)| r)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("engine thread panicked"))
            .collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    let baseline = reports[0].clone();
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let rows = reports
        .iter()
        .zip(&configs)
        .map(|(r, cfg)| CompareRow {
            technique: r.technique.clone(),
            lambda0: cfg.schedule.lambda0,
            throughput_tps: r.throughput_tps,
            inner_token_latency_s: r.inner_token_latency_s,
            early_exit_rate_pct: r.early_exit_rate_pct,
            mean_layers_per_token: r.mean_layers_per_token,
            throughput_ratio_vs_never: ratio(r.throughput_tps, baseline.throughput_tps),
            latency_reduction_vs_never: ratio(baseline.inner_token_latency_s, r.inner_token_latency_s),
        })
        .collect();
    Ok(CompareReport {
        baseline,
        rows,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::workload::{gen_workload, WorkloadSpec};

    #[test]
    fn compare_includes_baseline_and_ratios() {
        let model = Model::seeded(ModelConfig {
            n_layers: 4,
            d_model: 8,
            vocab_size: 32,
            seed: 1,
        })
        .unwrap();
        let w = gen_workload(&WorkloadSpec {
            n_requests: 4,
            vocab_size: 32,
            ..Default::default()
        })
        .unwrap();
        let techs = [
            (ExitTechnique::AlwaysAt(2), ThresholdSchedule::constant(1.0)),
            (
                ExitTechnique::StateSimilarity,
                ThresholdSchedule::calibrated(ExitTechnique::StateSimilarity),
            ),
        ];
        let report = compare(&model, &w, &EngineConfig::default(), &techs).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].technique, "never");
        assert_eq!(report.rows[0].throughput_ratio_vs_never, 1.0);
        assert!(report.row("always-at=2").unwrap().throughput_ratio_vs_never > 1.0);
        assert!(report.table().contains("state"));
    }
}
