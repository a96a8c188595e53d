//! Iteration-level batched decoding with batch-wide early exit.
//!
//! Each iteration runs the whole running batch layer by layer. A sequence's
//! exit status is OR-ed with that layer's accept decision, so once it has
//! accepted it stays accepted. The iteration stops at the first layer where
//! every status is true; the remaining layers' K/V are then filled from each
//! sequence's exit hidden state and one token per sequence is emitted from
//! that state. Between iterations finished sequences are evicted and pending
//! ones admitted FIFO.
//!
//! Time is a simulated clock driven by [`CostModel`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit_policy::{self, Evidence, ExitTechnique, ThresholdSchedule};
use crate::kv_cache::{KvConfig, KvStore, DEFAULT_BLOCK_SIZE};
use crate::metrics::{self, MetricsReport};
use crate::model::{greedy_token, Model};
use crate::workload::Workload;
use crate::SeqId;

/// Simulated seconds charged per unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c_layer_fixed: f64,
    pub c_layer_per_seq: f64,
    pub c_fill_per_seq_layer: f64,
    pub c_check_softmax: f64,
    pub c_check_classifier: f64,
    pub c_check_state: f64,
    /// Prompt prefill, per prompt token per layer.
    pub c_prefill_per_token_layer: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c_layer_fixed: 1e-3,
            c_layer_per_seq: 1e-4,
            c_fill_per_seq_layer: 2e-5,
            c_check_softmax: 5e-5,
            c_check_classifier: 5e-5,
            c_check_state: 1e-5,
            c_prefill_per_token_layer: 1e-4,
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            c_layer_fixed: 0.0,
            c_layer_per_seq: 0.0,
            c_fill_per_seq_layer: 0.0,
            c_check_softmax: 0.0,
            c_check_classifier: 0.0,
            c_check_state: 0.0,
            c_prefill_per_token_layer: 0.0,
        }
    }

    pub fn check_cost(&self, technique: ExitTechnique) -> f64 {
        match technique {
            ExitTechnique::SoftmaxResponse => self.c_check_softmax,
            ExitTechnique::Classifier => self.c_check_classifier,
            ExitTechnique::StateSimilarity => self.c_check_state,
            ExitTechnique::Never | ExitTechnique::AlwaysAt(_) => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.c_layer_fixed,
            self.c_layer_per_seq,
            self.c_fill_per_seq_layer,
            self.c_check_softmax,
            self.c_check_classifier,
            self.c_check_state,
            self.c_prefill_per_token_layer,
        ];
        if all.iter().all(|c| c.is_finite() && *c >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "cost model entries must be finite and >= 0: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub technique: ExitTechnique,
    pub schedule: ThresholdSchedule,
    pub max_batch: usize,
    pub kv_blocks: usize,
    pub block_size: usize,
    pub cost: CostModel,
    pub eos_token: Option<usize>,
    /// Overrides every accept decision with `layer >= k` while still
    /// evaluating (and charging for) the technique's confidence checks.
    pub forced_exit_layer: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            technique: ExitTechnique::Never,
            schedule: ThresholdSchedule::constant(1.0),
            max_batch: 8,
            kv_blocks: 1024,
            block_size: DEFAULT_BLOCK_SIZE,
            cost: CostModel::default(),
            eos_token: Some(0),
            forced_exit_layer: None,
        }
    }
}

impl EngineConfig {
    pub fn with_technique(technique: ExitTechnique) -> Self {
        Self {
            technique,
            schedule: ThresholdSchedule::calibrated(technique),
            ..Self::default()
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.max_batch == 0 || self.kv_blocks == 0 || self.block_size == 0 {
            return Err(Error::InvalidConfig(
                "max_batch, kv_blocks and block_size must be positive".into(),
            ));
        }
        self.schedule.validate()?;
        self.cost.validate()?;
        if let Some(k) = self.forced_exit_layer {
            if k == 0 || k > n_layers {
                return Err(Error::LayerOutOfRange { layer: k, n_layers });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqState {
    Pending,
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: SeqId,
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
    pub state: SeqState,
    pub max_new_tokens: usize,
    pub arrival_time: f64,
    pub first_token_time: Option<f64>,
    pub finish_time: Option<f64>,
    /// Layer each generated token was emitted from.
    pub exit_layers: Vec<usize>,
    /// This sequence's own first accepting layer per generated token.
    pub accept_layers: Vec<Option<usize>>,
}

impl Sequence {
    pub fn new(id: SeqId, prompt: Vec<usize>, max_new_tokens: usize, arrival_time: f64) -> Self {
        Self {
            id,
            prompt,
            generated: Vec::new(),
            state: SeqState::Pending,
            max_new_tokens,
            arrival_time,
            first_token_time: None,
            finish_time: None,
            exit_layers: Vec::new(),
            accept_layers: Vec::new(),
        }
    }

    /// Token fed to the next decode iteration.
    pub fn next_input(&self) -> usize {
        *self
            .generated
            .last()
            .or(self.prompt.last())
            .expect("prompts are nonempty")
    }

    /// KV positions this sequence can ever write.
    pub fn max_positions(&self) -> usize {
        self.prompt.len() + self.max_new_tokens - 1
    }
}

/// Per-iteration exit status: monotone booleans plus the layer at which
/// each first flipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitStatusVector {
    status: Vec<bool>,
    first_accept: Vec<Option<usize>>,
}

impl ExitStatusVector {
    pub fn new(batch: usize) -> Self {
        Self {
            status: vec![false; batch],
            first_accept: vec![None; batch],
        }
    }

    /// `status |= accepted`; returns whether every entry is now true.
    pub fn update(&mut self, layer: usize, accepted: &[bool]) -> Result<bool> {
        if accepted.len() != self.status.len() {
            return Err(Error::DimensionMismatch {
                what: "accept vector",
                expected: self.status.len(),
                got: accepted.len(),
            });
        }
        for ((s, first), &a) in self.status.iter_mut().zip(&mut self.first_accept).zip(accepted) {
            if a && !*s {
                *first = Some(layer);
            }
            *s |= a;
        }
        Ok(self.all())
    }

    pub fn all(&self) -> bool {
        self.status.iter().all(|&s| s)
    }

    pub fn status(&self) -> &[bool] {
        &self.status
    }

    pub fn first_accept(&self) -> &[Option<usize>] {
        &self.first_accept
    }
}

/// Layer at which a batch exits given each sequence's first accepting layer.
pub fn resolve_output_layer(first_accept: &[Option<usize>], n_layers: usize) -> usize {
    first_accept
        .iter()
        .try_fold(0usize, |acc, a| a.map(|l| acc.max(l)))
        .unwrap_or(n_layers)
        .min(n_layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub output_layer: usize,
    pub tokens: Vec<usize>,
    pub first_accept: Vec<Option<usize>>,
    /// Status vector after each checked layer.
    pub status_trace: Vec<Vec<bool>>,
    /// Hidden state at `output_layer`, per sequence.
    pub exit_states: Vec<Vec<f64>>,
    pub checked_layers: usize,
}

/// One decode iteration over `inputs` (sequence id, input token).
///
/// Exit checks run on layers `1..L`; layer `L` always emits.
pub fn decode_iteration(
    model: &Model,
    inputs: &[(SeqId, usize)],
    technique: ExitTechnique,
    schedule: &ThresholdSchedule,
    forced_exit_layer: Option<usize>,
    cache: &mut KvStore,
) -> Result<IterationOutcome> {
    if inputs.is_empty() {
        return Err(Error::Empty("decode batch"));
    }
    let n_layers = model.n_layers();
    for &(seq, _) in inputs {
        let lens = (1..=n_layers)
            .map(|layer| cache.len(seq, layer))
            .collect::<Result<Vec<_>>>()?;
        let longest = lens.iter().copied().max().unwrap_or(0);
        if let Some(short) = lens.iter().position(|&l| l != longest) {
            return Err(Error::MissingEntries {
                seq,
                layer: short + 1,
                have: lens[short],
                wanted: longest,
            });
        }
    }

    let mut hidden = inputs
        .iter()
        .map(|&(_, tok)| model.embed(tok))
        .collect::<Result<Vec<_>>>()?;
    let mut status = ExitStatusVector::new(inputs.len());
    let mut status_trace = Vec::new();
    let mut output_layer = n_layers;

    for layer in 1..=n_layers {
        let batch: Vec<(SeqId, &[f64])> = inputs
            .iter()
            .zip(&hidden)
            .map(|(&(id, _), h)| (id, h.as_slice()))
            .collect();
        let next = model.layer_forward(layer, &batch, cache)?;
        if layer == n_layers {
            hidden = next;
            break;
        }
        let threshold = schedule.threshold_at(layer);
        let mut accepted = Vec::with_capacity(inputs.len());
        for (prev, cur) in hidden.iter().zip(&next) {
            let logits;
            let evidence = match technique {
                ExitTechnique::SoftmaxResponse => {
                    logits = model.lm_head(cur)?;
                    Evidence::Logits(&logits)
                }
                ExitTechnique::StateSimilarity => Evidence::StatePair { prev, cur },
                ExitTechnique::Classifier => Evidence::State {
                    h: cur,
                    probe: model.probe(),
                },
                ExitTechnique::Never | ExitTechnique::AlwaysAt(_) => Evidence::None,
            };
            let decision = exit_policy::decide(technique, evidence, layer, threshold)?;
            accepted.push(forced_exit_layer.map_or(decision, |k| layer >= k));
        }
        hidden = next;
        let all = status.update(layer, &accepted)?;
        status_trace.push(status.status().to_vec());
        if all {
            output_layer = layer;
            break;
        }
    }

    let exits: Vec<(SeqId, &[f64])> = inputs
        .iter()
        .zip(&hidden)
        .map(|(&(id, _), h)| (id, h.as_slice()))
        .collect();
    cache.fill_skipped(model, &exits, output_layer)?;
    let tokens = hidden
        .iter()
        .map(|h| greedy_token(&model.lm_head(h)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(IterationOutcome {
        output_layer,
        tokens,
        first_accept: status.first_accept().to_vec(),
        checked_layers: status_trace.len(),
        status_trace,
        exit_states: hidden,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AdmissionLimits {
    pub max_batch: usize,
    pub now: f64,
}

/// Evicts finished sequences (releasing their KV) and admits arrived pending
/// ones in FIFO order until the batch is full or the pool cannot hold the
/// head request. Returns the admitted ids.
pub fn admit_evict(
    pending: &mut VecDeque<Sequence>,
    running: &mut Vec<Sequence>,
    finished: &mut Vec<Sequence>,
    cache: &mut KvStore,
    limits: AdmissionLimits,
) -> Result<Vec<SeqId>> {
    let mut i = 0;
    while i < running.len() {
        if running[i].state == SeqState::Finished {
            let done = running.remove(i);
            cache.release(done.id)?;
            finished.push(done);
        } else {
            i += 1;
        }
    }
    let mut admitted = Vec::new();
    while running.len() < limits.max_batch {
        let Some(head) = pending.front() else { break };
        if head.arrival_time > limits.now {
            break;
        }
        match cache.allocate(head.id, head.max_positions()) {
            Ok(()) => {}
            Err(Error::OutOfMemory { .. }) => break,
            Err(e) => return Err(e),
        }
        let mut seq = pending.pop_front().expect("head exists");
        seq.state = SeqState::Running;
        admitted.push(seq.id);
        running.push(seq);
    }
    Ok(admitted)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Charge {
    pub prefill: f64,
    pub layers: f64,
    pub exit_checks: f64,
    pub fill: f64,
}

impl Charge {
    pub fn total(&self) -> f64 {
        self.prefill + self.layers + self.exit_checks + self.fill
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqStep {
    pub id: SeqId,
    pub accept_layer: Option<usize>,
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    /// Clock at the end of the iteration.
    pub clock: f64,
    /// Idle time skipped before the iteration while waiting for arrivals.
    pub idle: f64,
    pub charge: Charge,
    pub batch_ids: Vec<SeqId>,
    pub prefilled_ids: Vec<SeqId>,
    pub output_layer: usize,
    pub per_seq: Vec<SeqStep>,
    pub status: Vec<Vec<bool>>,
    #[serde(skip)]
    pub exit_states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: SeqId,
    pub arrival: f64,
    pub first_token: Option<f64>,
    pub finish: Option<f64>,
    pub prompt_len: usize,
    pub tokens: Vec<usize>,
    pub exit_layers: Vec<usize>,
    pub accept_layers: Vec<Option<usize>>,
}

impl From<&Sequence> for SequenceRecord {
    fn from(s: &Sequence) -> Self {
        Self {
            id: s.id,
            arrival: s.arrival_time,
            first_token: s.first_token_time,
            finish: s.finish_time,
            prompt_len: s.prompt.len(),
            tokens: s.generated.clone(),
            exit_layers: s.exit_layers.clone(),
            accept_layers: s.accept_layers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub n_layers: usize,
    pub technique: ExitTechnique,
    pub pool_blocks: usize,
    pub high_water_blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub iterations: Vec<IterationRecord>,
    pub sequences: Vec<SequenceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TranscriptLine {
    Header(TranscriptHeader),
    Iteration(IterationRecord),
    Sequence(SequenceRecord),
}

impl Transcript {
    pub fn final_clock(&self) -> f64 {
        self.iterations.last().map_or(0.0, |it| it.clock)
    }

    /// JSON lines: a header, one record per iteration, then one per sequence.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&TranscriptLine::Header(self.header.clone()))?;
        out.push('\n');
        for it in &self.iterations {
            out.push_str(&serde_json::to_string(&TranscriptLine::Iteration(it.clone()))?);
            out.push('\n');
        }
        for s in &self.sequences {
            out.push_str(&serde_json::to_string(&TranscriptLine::Sequence(s.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut iterations = Vec::new();
        let mut sequences = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: TranscriptLine = serde_json::from_str(line).map_err(|e| Error::Trace {
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            match parsed {
                TranscriptLine::Header(h) => header = Some(h),
                TranscriptLine::Iteration(it) => iterations.push(it),
                TranscriptLine::Sequence(s) => sequences.push(s),
            }
        }
        let header = header.ok_or_else(|| Error::Trace {
            line: 1,
            message: "missing header record".into(),
        })?;
        Ok(Self {
            header,
            iterations,
            sequences,
        })
    }
}

/// Stepwise engine. [`Engine::step`] runs one admit/evict + decode cycle.
#[derive(Debug)]
pub struct Engine<'m> {
    model: &'m Model,
    config: EngineConfig,
    cache: KvStore,
    pending: VecDeque<Sequence>,
    running: Vec<Sequence>,
    finished: Vec<Sequence>,
    clock: f64,
    iterations: Vec<IterationRecord>,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m Model, config: EngineConfig) -> Result<Self> {
        config.validate(model.n_layers())?;
        let cache = KvStore::new(KvConfig::for_model(model.config(), config.block_size, config.kv_blocks))?;
        Ok(Self {
            model,
            config,
            cache,
            pending: VecDeque::new(),
            running: Vec::new(),
            finished: Vec::new(),
            clock: 0.0,
            iterations: Vec::new(),
        })
    }

    /// Queues a workload; ids follow arrival order.
    pub fn submit(&mut self, workload: &Workload) -> Result<()> {
        workload.validate(self.model.config().vocab_size)?;
        let mut sorted = workload.clone();
        sorted.sort_by_arrival();
        let base = self.pending.len() + self.running.len() + self.finished.len();
        for (i, r) in sorted.requests.into_iter().enumerate() {
            self.pending
                .push_back(Sequence::new(base + i, r.prompt, r.max_new_tokens, r.arrival_time));
        }
        Ok(())
    }

    pub fn cache(&self) -> &KvStore {
        &self.cache
    }

    pub fn running(&self) -> &[Sequence] {
        &self.running
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn iterations(&self) -> &[IterationRecord] {
        &self.iterations
    }

    /// Runs one iteration. Returns `None` once every sequence has finished
    /// and been evicted.
    pub fn step(&mut self) -> Result<Option<&IterationRecord>> {
        let limits = |now| AdmissionLimits {
            max_batch: self.config.max_batch,
            now,
        };
        let mut admitted = admit_evict(
            &mut self.pending,
            &mut self.running,
            &mut self.finished,
            &mut self.cache,
            limits(self.clock),
        )?;
        let mut idle = 0.0;
        if self.running.is_empty() {
            let Some(head) = self.pending.front() else {
                return Ok(None);
            };
            if head.arrival_time > self.clock {
                idle = head.arrival_time - self.clock;
                self.clock = head.arrival_time;
                admitted = admit_evict(
                    &mut self.pending,
                    &mut self.running,
                    &mut self.finished,
                    &mut self.cache,
                    limits(self.clock),
                )?;
            }
            if self.running.is_empty() {
                return Err(Error::Unschedulable(self.pending.front().expect("nonempty").id));
            }
        }

        let n_layers = self.model.n_layers();
        let cost = self.config.cost;
        let mut charge = Charge::default();

        // Prefill all prompt tokens but the last, which the first decode
        // iteration consumes.
        for seq in self.running.iter().filter(|s| admitted.contains(&s.id)) {
            let prefix = &seq.prompt[..seq.prompt.len() - 1];
            for &tok in prefix {
                let mut h = self.model.embed(tok)?;
                for layer in 1..=n_layers {
                    h = self
                        .model
                        .layer_forward(layer, &[(seq.id, &h)], &mut self.cache)?
                        .remove(0);
                }
            }
            charge.prefill += prefix.len() as f64 * n_layers as f64 * cost.c_prefill_per_token_layer;
        }

        let inputs: Vec<(SeqId, usize)> = self.running.iter().map(|s| (s.id, s.next_input())).collect();
        let outcome = decode_iteration(
            self.model,
            &inputs,
            self.config.technique,
            &self.config.schedule,
            self.config.forced_exit_layer,
            &mut self.cache,
        )?;

        let batch = inputs.len() as f64;
        charge.layers = outcome.output_layer as f64 * (cost.c_layer_fixed + cost.c_layer_per_seq * batch);
        charge.exit_checks = outcome.checked_layers as f64 * batch * cost.check_cost(self.config.technique);
        charge.fill = (n_layers - outcome.output_layer) as f64 * batch * cost.c_fill_per_seq_layer;
        self.clock += charge.total();

        let mut per_seq = Vec::with_capacity(inputs.len());
        for ((seq, &token), &accept) in self.running.iter_mut().zip(&outcome.tokens).zip(&outcome.first_accept) {
            seq.generated.push(token);
            seq.exit_layers.push(outcome.output_layer);
            seq.accept_layers.push(accept);
            seq.first_token_time.get_or_insert(self.clock);
            if self.config.eos_token == Some(token) || seq.generated.len() >= seq.max_new_tokens {
                seq.state = SeqState::Finished;
                seq.finish_time = Some(self.clock);
            }
            per_seq.push(SeqStep {
                id: seq.id,
                accept_layer: accept,
                token,
            });
        }

        self.iterations.push(IterationRecord {
            index: self.iterations.len(),
            clock: self.clock,
            idle,
            charge,
            batch_ids: inputs.iter().map(|&(id, _)| id).collect(),
            prefilled_ids: admitted,
            output_layer: outcome.output_layer,
            per_seq,
            status: outcome.status_trace,
            exit_states: outcome.exit_states,
        });
        Ok(self.iterations.last())
    }

    pub fn run_to_completion(mut self) -> Result<Transcript> {
        while self.step()?.is_some() {}
        Ok(self.into_transcript())
    }

    pub fn into_transcript(self) -> Transcript {
        let mut sequences: Vec<SequenceRecord> = self
            .finished
            .iter()
            .chain(&self.running)
            .chain(&self.pending)
            .map(SequenceRecord::from)
            .collect();
        sequences.sort_by_key(|s| s.id);
        let stats = self.cache.stats();
        Transcript {
            header: TranscriptHeader {
                n_layers: self.model.n_layers(),
                technique: self.config.technique,
                pool_blocks: stats.pool_blocks,
                high_water_blocks: stats.high_water_blocks,
            },
            iterations: self.iterations,
            sequences,
        }
    }
}

/// End-to-end driver: decode the whole workload and compute its metrics.
pub fn run(model: &Model, workload: &Workload, config: &EngineConfig) -> Result<(Transcript, MetricsReport)> {
    let started = std::time::Instant::now();
    let mut engine = Engine::new(model, config.clone())?;
    engine.submit(workload)?;
    let transcript = engine.run_to_completion()?;
    let mut report = metrics::compute_metrics(&transcript)?;
    report.wall_clock_info_seconds = started.elapsed().as_secs_f64();
    Ok((transcript, report))
}
