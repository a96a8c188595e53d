//! Paged per-sequence, per-layer K/V storage.
//!
//! The pool holds `num_blocks` blocks; each block stores K and V rows for one
//! layer over `block_size` consecutive positions. A sequence's table maps
//! `(layer, position)` to `(block, offset)`. Slots are written exactly once
//! and strictly in position order per layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::SeqId;

/// Keys and values for positions `0..upto`, one slice per position.
pub type KvView<'a> = (Vec<&'a [f64]>, Vec<&'a [f64]>);

pub const DEFAULT_BLOCK_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub block_size: usize,
    pub num_blocks: usize,
}

impl KvConfig {
    pub fn for_model(model: &ModelConfig, block_size: usize, num_blocks: usize) -> Self {
        Self {
            n_layers: model.n_layers,
            d_model: model.d_model,
            block_size,
            num_blocks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvStats {
    pub pool_blocks: usize,
    pub free_blocks: usize,
    pub high_water_blocks: usize,
    pub per_seq_blocks: BTreeMap<SeqId, usize>,
}

#[derive(Debug, Clone, Default)]
struct LayerTable {
    blocks: Vec<usize>,
    len: usize,
}

#[derive(Debug, Clone)]
struct SeqTable {
    layers: Vec<LayerTable>,
}

impl SeqTable {
    fn block_count(&self) -> usize {
        self.layers.iter().map(|l| l.blocks.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct KvStore {
    config: KvConfig,
    keys: Vec<f64>,
    values: Vec<f64>,
    /// Free list kept as a stack; lowest ids are handed out first.
    free: Vec<usize>,
    tables: BTreeMap<SeqId, SeqTable>,
    high_water: usize,
}

impl KvStore {
    pub fn new(config: KvConfig) -> Result<Self> {
        if config.block_size == 0 || config.n_layers == 0 || config.d_model == 0 {
            return Err(Error::InvalidConfig(
                "kv store needs positive block_size, n_layers and d_model".into(),
            ));
        }
        let slots = config.num_blocks * config.block_size * config.d_model;
        Ok(Self {
            config,
            keys: vec![0.0; slots],
            values: vec![0.0; slots],
            free: (0..config.num_blocks).rev().collect(),
            tables: BTreeMap::new(),
            high_water: 0,
        })
    }

    pub fn config(&self) -> &KvConfig {
        &self.config
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn reserved_blocks(&self) -> usize {
        self.config.num_blocks - self.free.len()
    }

    pub fn blocks_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.config.block_size) * self.config.n_layers
    }

    pub fn contains(&self, seq: SeqId) -> bool {
        self.tables.contains_key(&seq)
    }

    pub fn sequences(&self) -> impl Iterator<Item = SeqId> + '_ {
        self.tables.keys().copied()
    }

    /// Reserves `ceil(initial_len / block_size)` blocks on every layer.
    pub fn allocate(&mut self, seq: SeqId, initial_len: usize) -> Result<()> {
        if self.tables.contains_key(&seq) {
            return Err(Error::DuplicateSequence(seq));
        }
        let needed = self.blocks_for(initial_len);
        if needed > self.free.len() {
            return Err(Error::OutOfMemory {
                needed,
                free: self.free.len(),
            });
        }
        let per_layer = needed / self.config.n_layers;
        let layers = (0..self.config.n_layers)
            .map(|_| LayerTable {
                blocks: (0..per_layer).map(|_| self.free.pop().expect("checked")).collect(),
                len: 0,
            })
            .collect();
        self.tables.insert(seq, SeqTable { layers });
        self.note_usage();
        Ok(())
    }

    pub fn release(&mut self, seq: SeqId) -> Result<()> {
        let table = self.tables.remove(&seq).ok_or(Error::UnknownSequence(seq))?;
        let mut returned: Vec<usize> = table.layers.into_iter().flat_map(|l| l.blocks).collect();
        returned.sort_unstable_by(|a, b| b.cmp(a));
        self.free.extend(returned);
        self.free.sort_unstable_by(|a, b| b.cmp(a));
        Ok(())
    }

    /// Number of positions written at `layer` for `seq`.
    pub fn len(&self, seq: SeqId, layer: usize) -> Result<usize> {
        Ok(self.layer_table(seq, layer)?.len)
    }

    /// Positions present on every layer.
    pub fn committed_len(&self, seq: SeqId) -> Result<usize> {
        let table = self.tables.get(&seq).ok_or(Error::UnknownSequence(seq))?;
        Ok(table.layers.iter().map(|l| l.len).min().unwrap_or(0))
    }

    pub fn append(&mut self, seq: SeqId, layer: usize, position: usize, k: &[f64], v: &[f64]) -> Result<()> {
        let d = self.config.d_model;
        for x in [k, v] {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "kv vector",
                    expected: d,
                    got: x.len(),
                });
            }
        }
        let bs = self.config.block_size;
        let current = self.layer_table(seq, layer)?;
        if position < current.len {
            return Err(Error::Overwrite { seq, layer, position });
        }
        if position > current.len {
            return Err(Error::Gap {
                seq,
                layer,
                position,
                expected: current.len,
            });
        }
        if position == current.blocks.len() * bs {
            let block = self.free.pop().ok_or(Error::OutOfMemory { needed: 1, free: 0 })?;
            self.layer_table_mut(seq, layer)?.blocks.push(block);
            self.note_usage();
        }
        let table = self.layer_table_mut(seq, layer)?;
        let block = table.blocks[position / bs];
        table.len += 1;
        let start = (block * bs + position % bs) * d;
        self.keys[start..start + d].copy_from_slice(k);
        self.values[start..start + d].copy_from_slice(v);
        Ok(())
    }

    /// K and V rows for positions `0..upto` at `layer`.
    pub fn view(&self, seq: SeqId, layer: usize, upto: usize) -> Result<KvView<'_>> {
        let table = self.layer_table(seq, layer)?;
        if upto > table.len {
            return Err(Error::MissingEntries {
                seq,
                layer,
                have: table.len,
                wanted: upto,
            });
        }
        let (bs, d) = (self.config.block_size, self.config.d_model);
        let mut ks = Vec::with_capacity(upto);
        let mut vs = Vec::with_capacity(upto);
        for pos in 0..upto {
            let start = (table.blocks[pos / bs] * bs + pos % bs) * d;
            ks.push(&self.keys[start..start + d]);
            vs.push(&self.values[start..start + d]);
        }
        Ok((ks, vs))
    }

    /// Fills layers `output_layer+1..=L` at each sequence's current position
    /// by projecting its exit hidden state through those layers' K/V weights.
    ///
    /// The current position is the last one written at `output_layer`; every
    /// layer up to `output_layer` must already hold it.
    pub fn fill_skipped(&mut self, model: &Model, batch: &[(SeqId, &[f64])], output_layer: usize) -> Result<()> {
        let n_layers = self.config.n_layers;
        if output_layer == 0 || output_layer > n_layers {
            return Err(Error::LayerOutOfRange {
                layer: output_layer,
                n_layers,
            });
        }
        for &(seq, h_exit) in batch {
            let upto = self.len(seq, output_layer)?;
            if upto == 0 {
                return Err(Error::MissingEntries {
                    seq,
                    layer: output_layer,
                    have: 0,
                    wanted: 1,
                });
            }
            let position = upto - 1;
            for layer in 1..output_layer {
                let have = self.len(seq, layer)?;
                if have != upto {
                    return Err(Error::MissingEntries {
                        seq,
                        layer,
                        have,
                        wanted: upto,
                    });
                }
            }
            for layer in output_layer + 1..=n_layers {
                let (k, v) = model.compute_kv_pair(layer, h_exit)?;
                self.append(seq, layer, position, &k, &v)?;
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> KvStats {
        KvStats {
            pool_blocks: self.config.num_blocks,
            free_blocks: self.free.len(),
            high_water_blocks: self.high_water,
            per_seq_blocks: self.tables.iter().map(|(&id, t)| (id, t.block_count())).collect(),
        }
    }

    fn note_usage(&mut self) {
        self.high_water = self.high_water.max(self.reserved_blocks());
    }

    fn layer_table(&self, seq: SeqId, layer: usize) -> Result<&LayerTable> {
        let n_layers = self.config.n_layers;
        let table = self.tables.get(&seq).ok_or(Error::UnknownSequence(seq))?;
        if layer == 0 || layer > n_layers {
            return Err(Error::LayerOutOfRange { layer, n_layers });
        }
        Ok(&table.layers[layer - 1])
    }

    fn layer_table_mut(&mut self, seq: SeqId, layer: usize) -> Result<&mut LayerTable> {
        let n_layers = self.config.n_layers;
        let table = self.tables.get_mut(&seq).ok_or(Error::UnknownSequence(seq))?;
        if layer == 0 || layer > n_layers {
            return Err(Error::LayerOutOfRange { layer, n_layers });
        }
        Ok(&mut table.layers[layer - 1])
    }
}
