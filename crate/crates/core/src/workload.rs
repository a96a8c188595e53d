//! Request streams: synthetic generation and trace ingestion.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    /// Simulated seconds.
    pub arrival_time: f64,
    pub prompt: Vec<usize>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub requests: Vec<Request>,
}

impl Workload {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Stable sort by arrival time.
    pub fn sort_by_arrival(&mut self) {
        self.requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, r) in self.requests.iter().enumerate() {
            validate_request(r, vocab_size).map_err(|message| Error::Trace {
                line: i as u64 + 1,
                message,
            })?;
        }
        Ok(())
    }
}

fn validate_request(r: &Request, vocab_size: usize) -> std::result::Result<(), String> {
    if !r.arrival_time.is_finite() || r.arrival_time < 0.0 {
        return Err(format!(
            "arrival_time must be a nonnegative number, got {}",
            r.arrival_time
        ));
    }
    if r.prompt.is_empty() {
        return Err("prompt must not be empty".into());
    }
    if r.max_new_tokens == 0 {
        return Err("max_new_tokens must be positive".into());
    }
    if let Some(&t) = r.prompt.iter().find(|&&t| t >= vocab_size) {
        return Err(format!("token id {t} outside vocabulary of {vocab_size}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_requests: usize,
    /// Mean of the exponential inter-arrival gap; 0 means every request
    /// arrives at t = 0.
    pub mean_interarrival: f64,
    pub prompt_len: (usize, usize),
    pub output_len: (usize, usize),
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            n_requests: 16,
            mean_interarrival: 0.005,
            prompt_len: (4, 16),
            output_len: (8, 32),
            vocab_size: 256,
            seed: 0,
        }
    }
}

/// Seeded synthetic workload. The first request arrives at t = 0; prompt
/// tokens are uniform over `1..vocab` so no prompt contains EOS (id 0).
pub fn gen_workload(spec: &WorkloadSpec) -> Result<Workload> {
    let (pmin, pmax) = spec.prompt_len;
    let (omin, omax) = spec.output_len;
    if pmin == 0 || pmin > pmax || omin == 0 || omin > omax {
        return Err(Error::InvalidConfig(format!(
            "length ranges must satisfy 1 <= min <= max: prompt {pmin}..={pmax}, output {omin}..={omax}"
        )));
    }
    if spec.vocab_size < 2 {
        return Err(Error::InvalidConfig(
            "vocabulary needs at least EOS plus one token".into(),
        ));
    }
    if !spec.mean_interarrival.is_finite() || spec.mean_interarrival < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "mean_interarrival must be >= 0, got {}",
            spec.mean_interarrival
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = (spec.mean_interarrival > 0.0)
        .then(|| Exp::new(1.0 / spec.mean_interarrival))
        .transpose()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut clock = 0.0;
    let requests = (0..spec.n_requests)
        .map(|i| {
            if i > 0 {
                if let Some(gap) = &gap {
                    clock += gap.sample(&mut rng);
                }
            }
            let plen = rng.random_range(pmin..=pmax);
            Request {
                arrival_time: clock,
                prompt: (0..plen).map(|_| rng.random_range(1..spec.vocab_size)).collect(),
                max_new_tokens: rng.random_range(omin..=omax),
            }
        })
        .collect();
    Ok(Workload { requests })
}

/// Prompt tokens for a CSV trace row, seeded by the zero-based data row.
pub fn trace_prompt(row: usize, len: usize, vocab_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(row as u64);
    (0..len).map(|_| rng.random_range(1..vocab_size)).collect()
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    arrival_time: f64,
    prompt_len: usize,
    max_new_tokens: usize,
}

/// Loads a trace: `.json` holds a [`Workload`] with explicit token ids;
/// anything else is read as CSV with header
/// `arrival_time,prompt_len,max_new_tokens`.
pub fn load_trace(path: impl AsRef<Path>, vocab_size: usize) -> Result<Workload> {
    let path = path.as_ref();
    let mut workload = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let text = std::fs::read_to_string(path)?;
        let w: Workload = serde_json::from_str(&text)?;
        w.validate(vocab_size)?;
        w
    } else {
        parse_csv_trace(std::fs::File::open(path)?, vocab_size)?
    };
    workload.sort_by_arrival();
    Ok(workload)
}

pub fn parse_csv_trace(reader: impl std::io::Read, vocab_size: usize) -> Result<Workload> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let expected = ["arrival_time", "prompt_len", "max_new_tokens"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Trace {
            line: 1,
            message: format!("header must be `{}`", expected.join(",")),
        });
    }
    let mut requests = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| Error::Trace {
            line: e.position().map_or(line, |p| p.line()),
            message: e.to_string(),
        })?;
        let parsed: TraceRow = record.deserialize(Some(&headers)).map_err(|e| Error::Trace {
            line,
            message: e.to_string(),
        })?;
        let request = Request {
            arrival_time: parsed.arrival_time,
            prompt: if parsed.prompt_len == 0 {
                Vec::new()
            } else {
                trace_prompt(row, parsed.prompt_len, vocab_size)
            },
            max_new_tokens: parsed.max_new_tokens,
        };
        validate_request(&request, vocab_size).map_err(|message| Error::Trace { line, message })?;
        requests.push(request);
    }
    let mut w = Workload { requests };
    w.sort_by_arrival();
    Ok(w)
}
