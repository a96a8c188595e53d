use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{argmax_lowest, OccupancyState};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};

/// Optimistic-greedy initial value: the number of sequences `action` would run.
pub fn q_init(v: &OccupancyState, action: usize) -> f64 {
    f64::from(v.at(action))
}

/// Sparse Q-table; entries not yet touched read as [`q_init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "QTableDump", try_from = "QTableDump")]
pub struct QTable {
    n_layers: usize,
    values: HashMap<OccupancyState, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct QTableDump {
    n_layers: usize,
    entries: Vec<QEntry>,
}

#[derive(Serialize, Deserialize)]
struct QEntry {
    state: OccupancyState,
    values: Vec<f64>,
}

impl From<QTable> for QTableDump {
    fn from(q: QTable) -> Self {
        let mut entries: Vec<QEntry> = q
            .values
            .into_iter()
            .map(|(state, values)| QEntry { state, values })
            .collect();
        entries.sort_by(|a, b| a.state.cmp(&b.state));
        Self {
            n_layers: q.n_layers,
            entries,
        }
    }
}

impl TryFrom<QTableDump> for QTable {
    type Error = Error;

    fn try_from(d: QTableDump) -> Result<Self> {
        let mut values = HashMap::with_capacity(d.entries.len());
        for e in d.entries {
            if e.state.n_layers() != d.n_layers || e.values.len() != d.n_layers {
                return Err(Error::DimensionMismatch {
                    what: "q-table entry",
                    expected: d.n_layers,
                    got: e.values.len(),
                });
            }
            values.insert(e.state, e.values);
        }
        Ok(Self {
            n_layers: d.n_layers,
            values,
        })
    }
}

impl QTable {
    pub fn new(n_layers: usize) -> Self {
        Self {
            n_layers,
            values: HashMap::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, v: &OccupancyState, action: usize) -> f64 {
        self.values
            .get(v)
            .map_or_else(|| q_init(v, action), |row| row[action - 1])
    }

    pub fn row(&self, v: &OccupancyState) -> Vec<f64> {
        self.values
            .get(v)
            .cloned()
            .unwrap_or_else(|| (1..=self.n_layers).map(|a| q_init(v, a)).collect())
    }

    pub fn max_value(&self, v: &OccupancyState) -> f64 {
        self.row(v).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action on Q, ties to the lowest layer.
    pub fn best_action(&self, v: &OccupancyState) -> usize {
        argmax_lowest(self.row(v).into_iter())
    }

    pub fn set(&mut self, v: &OccupancyState, action: usize, value: f64) {
        let n = self.n_layers;
        self.values
            .entry(v.clone())
            .or_insert_with(|| (1..=n).map(|a| q_init(v, a)).collect())[action - 1] = value;
    }

    pub fn entries(&self) -> impl Iterator<Item = (&OccupancyState, &[f64])> {
        self.values.iter().map(|(k, v)| (k, v.as_slice()))
    }
}

/// `Q(S,A) += α (R + λ max_A' Q(S',A') − Q(S,A))`; unseen entries read as [`q_init`].
pub fn q_learn_step(
    q: &mut QTable,
    state: &OccupancyState,
    action: usize,
    reward: f64,
    next: &OccupancyState,
    alpha: f64,
    discount: f64,
) {
    let current = q.get(state, action);
    let target = reward + discount * q.max_value(next);
    q.set(state, action, current + alpha * (target - current));
}

/// `Q(S, a) ≈ M[a] · V` with one row of `M` per action layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearQ {
    m: Matrix,
}

impl LinearQ {
    /// `M = I`, which reproduces [`q_init`] exactly.
    pub fn identity(n_layers: usize) -> Self {
        Self {
            m: Matrix::identity(n_layers),
        }
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch {
                what: "linear q matrix",
                expected: m.rows(),
                got: m.cols(),
            });
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn n_layers(&self) -> usize {
        self.m.rows()
    }

    pub fn predict(&self, v: &OccupancyState, action: usize) -> Result<f64> {
        self.check(v, action)?;
        numerics::dot(self.m.row(action - 1), &v.as_f64())
    }

    pub fn predictions(&self, v: &OccupancyState) -> Result<Vec<f64>> {
        numerics::matvec(&self.m, &v.as_f64())
    }

    pub fn best_action(&self, v: &OccupancyState) -> Result<usize> {
        Ok(argmax_lowest(self.predictions(v)?.into_iter()))
    }

    /// Semi-gradient step `M[a] += α (target − M[a]·V) V`.
    pub fn update(&mut self, v: &OccupancyState, action: usize, target: f64, alpha: f64) -> Result<()> {
        let err = target - self.predict(v, action)?;
        let features = v.as_f64();
        for (w, x) in self.m.row_mut(action - 1).iter_mut().zip(&features) {
            *w += alpha * err * x;
        }
        if self.m.row(action - 1).iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("linear q update"));
        }
        Ok(())
    }

    fn check(&self, v: &OccupancyState, action: usize) -> Result<()> {
        if v.n_layers() != self.m.cols() {
            return Err(Error::DimensionMismatch {
                what: "occupancy state",
                expected: self.m.cols(),
                got: v.n_layers(),
            });
        }
        if action == 0 || action > self.m.rows() {
            return Err(Error::LayerOutOfRange {
                layer: action,
                n_layers: self.m.rows(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer_sched::{enumerate_states, greedy_policy};

    fn st(v: &[u32]) -> OccupancyState {
        OccupancyState::new(v.to_vec())
    }

    #[test]
    fn q_init_examples() {
        let v = st(&[2, 1, 0]);
        let q = QTable::new(3);
        assert_eq!(q.get(&v, 1), 2.0);
        assert_eq!(q.get(&v, 3), 0.0);
        for s in enumerate_states(3, 3).into_iter().filter(|s| s.population() > 0) {
            assert_eq!(q.best_action(&s), greedy_policy(&s).unwrap());
        }
    }

    #[test]
    fn q_learn_step_examples() {
        let s = st(&[2, 0]);
        let next = st(&[0, 4]);
        let mut q = QTable::new(2);
        q.set(&s, 1, 0.0);
        q_learn_step(&mut q, &s, 1, 2.0, &next, 0.5, 0.9);
        assert!((q.get(&s, 1) - 2.8).abs() < 1e-12);

        let before = q.get(&s, 2);
        q_learn_step(&mut q, &s, 2, 5.0, &next, 0.0, 0.9);
        assert_eq!(q.get(&s, 2), before);
    }

    #[test]
    fn single_state_converges_to_closed_form() {
        // One layer, population 1: the only action always earns 1.
        let s = st(&[1]);
        let mut q = QTable::new(1);
        for _ in 0..2000 {
            q_learn_step(&mut q, &s, 1, 1.0, &s, 0.5, 0.9);
        }
        assert!((q.get(&s, 1) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn q_table_dump_round_trip() {
        let mut q = QTable::new(2);
        q.set(&st(&[1, 1]), 2, 3.5);
        q.set(&st(&[2, 0]), 1, -1.0);
        let json = serde_json::to_string(&q).unwrap();
        let back: QTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn linear_q_examples() {
        let v = st(&[2, 1, 3]);
        let id = LinearQ::identity(3);
        for a in 1..=3 {
            assert_eq!(id.predict(&v, a).unwrap(), q_init(&v, a));
        }
        let zero = LinearQ::from_matrix(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(zero.predict(&v, 2).unwrap(), 0.0);

        let mut lin = LinearQ::identity(3);
        let alpha = 1.0 / 14.0; // ‖v‖² = 14
        lin.update(&v, 2, 7.25, alpha).unwrap();
        assert!((lin.predict(&v, 2).unwrap() - 7.25).abs() < 1e-12);
        assert!(lin.predict(&st(&[1, 1]), 1).is_err());
        assert!(lin.predict(&v, 4).is_err());
    }
}
