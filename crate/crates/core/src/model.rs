//! Toy decoder-only transformer.
//!
//! One attention head, no positional encoding beyond causal order, no
//! normalization: each block is `h + Wo·attn(h)` followed by
//! `h + W_down·relu(W_up·h)`. Layers are indexed from 1 in every public
//! method.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::KvStore;
use crate::numerics::{self, derive_seed, seeded_matrix, seeded_vector, Matrix};
use crate::SeqId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            vocab_size: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.d_model < 2 || self.vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "model needs n_layers, d_model, vocab_size >= 2 (got {}, {}, {})",
                self.n_layers, self.d_model, self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `4d x d`
    pub w_up: Matrix,
    /// `d x 4d`
    pub w_down: Matrix,
}

/// Linear exit probe `sigmoid(w·h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierProbe {
    pub weight: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Matrix,
    pub probe: ClassifierProbe,
}

const TAG_EMBEDDING: u64 = 1;
const TAG_LM_HEAD: u64 = 2;
const TAG_PROBE_W: u64 = 3;
const TAG_PROBE_B: u64 = 4;
const TAG_LAYER_BASE: u64 = 100;

impl ModelWeights {
    /// Draws every tensor from its own SplitMix64 stream keyed by
    /// `(config.seed, tensor tag)`.
    pub fn seeded(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let seed = config.seed;
        let layers = (0..config.n_layers)
            .map(|i| {
                let tag = |k: u64| derive_seed(seed, TAG_LAYER_BASE + 8 * i as u64 + k);
                Ok(LayerWeights {
                    w_q: seeded_matrix(d, d, tag(0))?,
                    w_k: seeded_matrix(d, d, tag(1))?,
                    w_v: seeded_matrix(d, d, tag(2))?,
                    w_o: seeded_matrix(d, d, tag(3))?,
                    w_up: seeded_matrix(4 * d, d, tag(4))?,
                    w_down: seeded_matrix(d, 4 * d, tag(5))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding: seeded_matrix(config.vocab_size, d, derive_seed(seed, TAG_EMBEDDING))?,
            layers,
            lm_head: seeded_matrix(config.vocab_size, d, derive_seed(seed, TAG_LM_HEAD))?,
            probe: ClassifierProbe {
                weight: seeded_vector(d, derive_seed(seed, TAG_PROBE_W))?,
                bias: seeded_vector(1, derive_seed(seed, TAG_PROBE_B))?[0],
            },
        })
    }
}

/// On-disk weight document: the config plus named 2-D arrays.
#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    config: ModelConfig,
    tensors: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn seeded(config: ModelConfig) -> Result<Self> {
        let weights = ModelWeights::seeded(&config)?;
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        check_shape("embedding", &weights.embedding, v, d)?;
        check_shape("lm_head", &weights.lm_head, v, d)?;
        if weights.layers.len() != config.n_layers {
            return Err(Error::DimensionMismatch {
                what: "layer count",
                expected: config.n_layers,
                got: weights.layers.len(),
            });
        }
        for l in &weights.layers {
            check_shape("w_q", &l.w_q, d, d)?;
            check_shape("w_k", &l.w_k, d, d)?;
            check_shape("w_v", &l.w_v, d, d)?;
            check_shape("w_o", &l.w_o, d, d)?;
            check_shape("w_up", &l.w_up, 4 * d, d)?;
            check_shape("w_down", &l.w_down, d, 4 * d)?;
        }
        if weights.probe.weight.len() != d {
            return Err(Error::DimensionMismatch {
                what: "probe weight",
                expected: d,
                got: weights.probe.weight.len(),
            });
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        Ok(&self.weights.layers[layer - 1])
    }

    pub fn embed(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(self.weights.embedding.row(token).to_vec())
    }

    /// Runs layer `layer` over a batch of single-position inputs.
    ///
    /// Each sequence's current position is the number of entries it already
    /// holds at this layer. Its `(k, v)` is appended there before attending,
    /// so position `p` sees positions `0..=p`. Projections and the MLP are
    /// applied to the flattened batch; only attention is per sequence.
    pub fn layer_forward(&self, layer: usize, batch: &[(SeqId, &[f64])], cache: &mut KvStore) -> Result<Vec<Vec<f64>>> {
        let weights = self.layer(layer)?;
        let d = self.config.d_model;
        let mut seen = HashSet::with_capacity(batch.len());
        for &(seq, h) in batch {
            if h.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "hidden state",
                    expected: d,
                    got: h.len(),
                });
            }
            if !seen.insert(seq) {
                return Err(Error::InvalidConfig(format!("sequence {seq} appears twice in batch")));
            }
            let here = cache.len(seq, layer)?;
            if layer > 1 {
                let below = cache.len(seq, layer - 1)?;
                if below != here + 1 {
                    return Err(Error::MissingEntries {
                        seq,
                        layer: layer - 1,
                        have: below,
                        wanted: here + 1,
                    });
                }
            }
        }

        let inputs: Vec<Vec<f64>> = batch.iter().map(|(_, h)| h.to_vec()).collect();
        let qs = numerics::matvec_batch(&weights.w_q, &inputs)?;
        let ks = numerics::matvec_batch(&weights.w_k, &inputs)?;
        let vs = numerics::matvec_batch(&weights.w_v, &inputs)?;

        let scale = 1.0 / (d as f64).sqrt();
        let mut contexts = Vec::with_capacity(batch.len());
        for (row, &(seq, _)) in batch.iter().enumerate() {
            let position = cache.len(seq, layer)?;
            cache.append(seq, layer, position, &ks[row], &vs[row])?;
            let (keys, values) = cache.view(seq, layer, position + 1)?;
            contexts.push(attend(&qs[row], &keys, &values, scale)?);
        }

        let attn = numerics::matvec_batch(&weights.w_o, &contexts)?;
        let resid: Vec<Vec<f64>> = inputs.iter().zip(&attn).map(|(x, a)| add(x, a)).collect();
        let mut up = numerics::matvec_batch(&weights.w_up, &resid)?;
        for row in &mut up {
            relu_in_place(row);
        }
        let down = numerics::matvec_batch(&weights.w_down, &up)?;
        let out: Vec<Vec<f64>> = resid.iter().zip(&down).map(|(x, m)| add(x, m)).collect();
        if out.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer_forward"));
        }
        Ok(out)
    }

    /// `(W_k h, W_v h)` for layer `layer`; one projection each.
    pub fn compute_kv_pair(&self, layer: usize, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let weights = self.layer(layer)?;
        Ok((numerics::matvec(&weights.w_k, h)?, numerics::matvec(&weights.w_v, h)?))
    }

    pub fn lm_head(&self, h: &[f64]) -> Result<Vec<f64>> {
        numerics::matvec(&self.weights.lm_head, h)
    }

    pub fn probe(&self) -> &ClassifierProbe {
        &self.weights.probe
    }

    pub fn to_json(&self) -> Result<String> {
        let mut tensors = BTreeMap::new();
        let w = &self.weights;
        tensors.insert("embedding".to_owned(), w.embedding.to_rows());
        tensors.insert("lm_head".to_owned(), w.lm_head.to_rows());
        tensors.insert("probe.weight".to_owned(), vec![w.probe.weight.clone()]);
        tensors.insert("probe.bias".to_owned(), vec![vec![w.probe.bias]]);
        for (i, l) in w.layers.iter().enumerate() {
            for (name, m) in [
                ("w_q", &l.w_q),
                ("w_k", &l.w_k),
                ("w_v", &l.w_v),
                ("w_o", &l.w_o),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                tensors.insert(format!("layers.{}.{name}", i + 1), m.to_rows());
            }
        }
        Ok(serde_json::to_string(&WeightsFile {
            config: self.config,
            tensors,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: WeightsFile = serde_json::from_str(text)?;
        let config = file.config;
        config.validate()?;
        let mut take = |name: String| -> Result<Matrix> {
            let rows = file
                .tensors
                .remove(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing tensor `{name}`")))?;
            Matrix::from_rows(&rows)
        };
        let embedding = take("embedding".into())?;
        let lm_head = take("lm_head".into())?;
        let probe_w = take("probe.weight".into())?;
        let probe_b = take("probe.bias".into())?;
        if probe_w.rows() != 1 || probe_b.rows() != 1 || probe_b.cols() != 1 {
            return Err(Error::InvalidConfig("probe tensors must be 1 x d and 1 x 1".into()));
        }
        let layers = (1..=config.n_layers)
            .map(|i| {
                Ok(LayerWeights {
                    w_q: take(format!("layers.{i}.w_q"))?,
                    w_k: take(format!("layers.{i}.w_k"))?,
                    w_v: take(format!("layers.{i}.w_v"))?,
                    w_o: take(format!("layers.{i}.w_o"))?,
                    w_up: take(format!("layers.{i}.w_up"))?,
                    w_down: take(format!("layers.{i}.w_down"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = file.tensors.keys().next() {
            return Err(Error::InvalidConfig(format!("unexpected tensor `{extra}`")));
        }
        let weights = ModelWeights {
            embedding,
            layers,
            lm_head,
            probe: ClassifierProbe {
                weight: probe_w.row(0).to_vec(),
                bias: probe_b.get(0, 0),
            },
        };
        Self::from_weights(config, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_shape(what: &'static str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::DimensionMismatch {
            what,
            expected: rows,
            got: m.rows(),
        });
    }
    if m.cols() != cols {
        return Err(Error::DimensionMismatch {
            what,
            expected: cols,
            got: m.cols(),
        });
    }
    Ok(())
}

/// Argmax with ties going to the lowest index.
pub fn greedy_token(logits: &[f64]) -> Result<usize> {
    let (mut best, mut best_val) = (None, f64::NEG_INFINITY);
    for (i, &v) in logits.iter().enumerate() {
        if best.is_none() || v > best_val {
            best = Some(i);
            best_val = v;
        }
    }
    best.ok_or(Error::Empty("logits"))
}

/// Single-head scaled dot-product attention over cached rows.
pub(crate) fn attend(q: &[f64], keys: &[&[f64]], values: &[&[f64]], scale: f64) -> Result<Vec<f64>> {
    let scores = keys
        .iter()
        .map(|k| numerics::dot(q, k).map(|s| s * scale))
        .collect::<Result<Vec<_>>>()?;
    let weights = numerics::softmax(&scores)?;
    let mut ctx = vec![0.0; q.len()];
    for (w, v) in weights.iter().zip(values) {
        for (c, x) in ctx.iter_mut().zip(v.iter()) {
            *c += w * x;
        }
    }
    Ok(ctx)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}
