//! Throughput, inner-token latency, and early-exit rate over a transcript,
//! plus report serialization.
//!
//! * throughput = generated tokens / final simulated clock
//! * inner-token latency = Σ (finish − first token) / generated tokens
//! * early-exit rate = % of tokens emitted by an iteration whose output layer
//!   is below `L`
//!
//! The latency denominator counts every generated token, including each
//! sequence's first, whose own latency the numerator excludes.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::Transcript;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub technique: String,
    pub n_layers: usize,
    pub n_sequences: usize,
    pub total_tokens: u64,
    pub total_time_s: f64,
    pub compute_time_s: f64,
    pub idle_time_s: f64,
    pub throughput_tps: f64,
    pub inner_token_latency_s: f64,
    pub early_exit_rate_pct: f64,
    pub mean_layers_per_token: f64,
    /// Tokens per output layer; index `l - 1` is layer `l`.
    pub exit_layer_histogram: Vec<u64>,
    /// Tokens per sequence-level first accepting layer.
    pub accept_layer_histogram: Vec<u64>,
    pub never_accepted_tokens: u64,
    pub pool_blocks: usize,
    pub high_water_blocks: usize,
    /// Host wall time; informational only and not deterministic.
    pub wall_clock_info_seconds: f64,
}

pub fn compute_metrics(transcript: &Transcript) -> Result<MetricsReport> {
    let n_layers = transcript.header.n_layers;
    if let Some(s) = transcript
        .sequences
        .iter()
        .find(|s| s.finish.is_none() || s.first_token.is_none())
    {
        return Err(Error::Unfinished(s.id));
    }
    let total_tokens: u64 = transcript.sequences.iter().map(|s| s.tokens.len() as u64).sum();
    let latency_sum: f64 = transcript
        .sequences
        .iter()
        .map(|s| s.finish.unwrap_or(0.0) - s.first_token.unwrap_or(0.0))
        .sum();

    let mut exit_hist = vec![0u64; n_layers];
    let mut accept_hist = vec![0u64; n_layers];
    let mut never_accepted = 0u64;
    let mut exited = 0u64;
    let mut decoded = 0u64;
    let mut layer_sum = 0u64;
    for it in &transcript.iterations {
        let n = it.per_seq.len() as u64;
        if it.output_layer == 0 || it.output_layer > n_layers {
            return Err(Error::LayerOutOfRange {
                layer: it.output_layer,
                n_layers,
            });
        }
        exit_hist[it.output_layer - 1] += n;
        decoded += n;
        layer_sum += n * it.output_layer as u64;
        if it.output_layer < n_layers {
            exited += n;
        }
        for step in &it.per_seq {
            match step.accept_layer {
                Some(l) if (1..=n_layers).contains(&l) => accept_hist[l - 1] += 1,
                _ => never_accepted += 1,
            }
        }
    }

    let total_time = transcript.final_clock();
    let idle: f64 = transcript.iterations.iter().map(|it| it.idle).sum();
    let compute: f64 = transcript.iterations.iter().map(|it| it.charge.total()).sum();
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    Ok(MetricsReport {
        technique: transcript.header.technique.to_string(),
        n_layers,
        n_sequences: transcript.sequences.len(),
        total_tokens,
        total_time_s: total_time,
        compute_time_s: compute,
        idle_time_s: idle,
        throughput_tps: ratio(total_tokens as f64, total_time),
        inner_token_latency_s: ratio(latency_sum, total_tokens as f64),
        early_exit_rate_pct: 100.0 * ratio(exited as f64, decoded as f64),
        mean_layers_per_token: ratio(layer_sum as f64, decoded as f64),
        exit_layer_histogram: exit_hist,
        accept_layer_histogram: accept_hist,
        never_accepted_tokens: never_accepted,
        pool_blocks: transcript.header.pool_blocks,
        high_water_blocks: transcript.header.high_water_blocks,
        wall_clock_info_seconds: 0.0,
    })
}

/// Early-exit rate recomputed from an output-layer histogram alone.
pub fn early_exit_rate_from_histogram(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let below: u64 = hist[..hist.len().saturating_sub(1)].iter().sum();
    100.0 * below as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::UnsupportedFormat(other.to_owned())),
        }
    }
}

/// One CSV row. The `metrics` row fills the scalar columns; each
/// `histogram` row fills `layer`, `exit_tokens` and `accept_tokens`.
#[derive(Debug, Default, Serialize, Deserialize)]
struct CsvRow {
    row: String,
    layer: Option<usize>,
    technique: Option<String>,
    n_layers: Option<usize>,
    n_sequences: Option<usize>,
    total_tokens: Option<u64>,
    total_time_s: Option<f64>,
    compute_time_s: Option<f64>,
    idle_time_s: Option<f64>,
    throughput_tps: Option<f64>,
    inner_token_latency_s: Option<f64>,
    early_exit_rate_pct: Option<f64>,
    mean_layers_per_token: Option<f64>,
    never_accepted_tokens: Option<u64>,
    pool_blocks: Option<usize>,
    high_water_blocks: Option<usize>,
    wall_clock_info_seconds: Option<f64>,
    exit_tokens: Option<u64>,
    accept_tokens: Option<u64>,
}

pub fn report_to_string(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.serialize(CsvRow {
                row: "metrics".into(),
                technique: Some(report.technique.clone()),
                n_layers: Some(report.n_layers),
                n_sequences: Some(report.n_sequences),
                total_tokens: Some(report.total_tokens),
                total_time_s: Some(report.total_time_s),
                compute_time_s: Some(report.compute_time_s),
                idle_time_s: Some(report.idle_time_s),
                throughput_tps: Some(report.throughput_tps),
                inner_token_latency_s: Some(report.inner_token_latency_s),
                early_exit_rate_pct: Some(report.early_exit_rate_pct),
                mean_layers_per_token: Some(report.mean_layers_per_token),
                never_accepted_tokens: Some(report.never_accepted_tokens),
                pool_blocks: Some(report.pool_blocks),
                high_water_blocks: Some(report.high_water_blocks),
                wall_clock_info_seconds: Some(report.wall_clock_info_seconds),
                ..CsvRow::default()
            })?;
            for (i, (&e, &a)) in report
                .exit_layer_histogram
                .iter()
                .zip(&report.accept_layer_histogram)
                .enumerate()
            {
                w.serialize(CsvRow {
                    row: "histogram".into(),
                    layer: Some(i + 1),
                    exit_tokens: Some(e),
                    accept_tokens: Some(a),
                    ..CsvRow::default()
                })?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
        }
    }
}

pub fn report_from_str(text: &str, format: ReportFormat) -> Result<MetricsReport> {
    match format {
        ReportFormat::Json => Ok(serde_json::from_str(text)?),
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let mut metrics: Option<CsvRow> = None;
            let mut exit_hist = Vec::new();
            let mut accept_hist = Vec::new();
            for (i, row) in r.deserialize::<CsvRow>().enumerate() {
                let row = row?;
                let line = i as u64 + 2;
                match row.row.as_str() {
                    "metrics" => metrics = Some(row),
                    "histogram" => {
                        if row.layer != Some(exit_hist.len() + 1) {
                            return Err(Error::Trace {
                                line,
                                message: "histogram rows out of order".into(),
                            });
                        }
                        exit_hist.push(row.exit_tokens.unwrap_or(0));
                        accept_hist.push(row.accept_tokens.unwrap_or(0));
                    }
                    other => {
                        return Err(Error::Trace {
                            line,
                            message: format!("unknown row kind `{other}`"),
                        })
                    }
                }
            }
            let m = metrics.ok_or_else(|| Error::Trace {
                line: 2,
                message: "missing metrics row".into(),
            })?;
            let missing = |what: &str| Error::Trace {
                line: 2,
                message: format!("metrics row lacks {what}"),
            };
            Ok(MetricsReport {
                technique: m.technique.ok_or_else(|| missing("technique"))?,
                n_layers: m.n_layers.ok_or_else(|| missing("n_layers"))?,
                n_sequences: m.n_sequences.ok_or_else(|| missing("n_sequences"))?,
                total_tokens: m.total_tokens.ok_or_else(|| missing("total_tokens"))?,
                total_time_s: m.total_time_s.ok_or_else(|| missing("total_time_s"))?,
                compute_time_s: m.compute_time_s.ok_or_else(|| missing("compute_time_s"))?,
                idle_time_s: m.idle_time_s.ok_or_else(|| missing("idle_time_s"))?,
                throughput_tps: m.throughput_tps.ok_or_else(|| missing("throughput_tps"))?,
                inner_token_latency_s: m
                    .inner_token_latency_s
                    .ok_or_else(|| missing("inner_token_latency_s"))?,
                early_exit_rate_pct: m.early_exit_rate_pct.ok_or_else(|| missing("early_exit_rate_pct"))?,
                mean_layers_per_token: m
                    .mean_layers_per_token
                    .ok_or_else(|| missing("mean_layers_per_token"))?,
                exit_layer_histogram: exit_hist,
                accept_layer_histogram: accept_hist,
                never_accepted_tokens: m
                    .never_accepted_tokens
                    .ok_or_else(|| missing("never_accepted_tokens"))?,
                pool_blocks: m.pool_blocks.ok_or_else(|| missing("pool_blocks"))?,
                high_water_blocks: m.high_water_blocks.ok_or_else(|| missing("high_water_blocks"))?,
                wall_clock_info_seconds: m.wall_clock_info_seconds.unwrap_or(0.0),
            })
        }
    }
}

pub fn write_report(report: &MetricsReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    std::fs::write(path, report_to_string(report, format)?)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>, format: ReportFormat) -> Result<MetricsReport> {
    report_from_str(&std::fs::read_to_string(path)?, format)
}
