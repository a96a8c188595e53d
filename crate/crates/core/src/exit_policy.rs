//! Confidence measures and exit decisions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassifierProbe;
use crate::numerics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExitTechnique {
    /// Gap between the top-two softmax probabilities of the layer's logits.
    SoftmaxResponse,
    /// Cosine similarity of consecutive hidden states.
    StateSimilarity,
    /// Linear probe plus sigmoid.
    Classifier,
    /// Test harness: never accept.
    Never,
    /// Test harness: accept from the given layer on.
    AlwaysAt(usize),
}

impl ExitTechnique {
    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ExitTechnique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SoftmaxResponse => f.write_str("softmax"),
            Self::StateSimilarity => f.write_str("state"),
            Self::Classifier => f.write_str("classifier"),
            Self::Never => f.write_str("never"),
            Self::AlwaysAt(k) => write!(f, "always-at={k}"),
        }
    }
}

impl FromStr for ExitTechnique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::SoftmaxResponse),
            "state" => Ok(Self::StateSimilarity),
            "classifier" => Ok(Self::Classifier),
            "never" => Ok(Self::Never),
            other => other
                .strip_prefix("always-at=")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(Self::AlwaysAt)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown exit technique `{s}`"))),
        }
    }
}

impl TryFrom<String> for ExitTechnique {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ExitTechnique> for String {
    fn from(t: ExitTechnique) -> Self {
        t.to_string()
    }
}

/// `λ_i = max(floor, λ0 · decay^(i-1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub lambda0: f64,
    pub decay: f64,
    pub floor: f64,
}

impl ThresholdSchedule {
    pub fn constant(lambda0: f64) -> Self {
        Self {
            lambda0,
            decay: 1.0,
            floor: 0.0,
        }
    }

    /// Calibrated constant thresholds for the 8-layer model: softmax 0.85,
    /// classifier 0.9, state 0.95.
    pub fn calibrated(technique: ExitTechnique) -> Self {
        match technique {
            ExitTechnique::SoftmaxResponse => Self::constant(0.85),
            ExitTechnique::Classifier => Self::constant(0.9),
            ExitTechnique::StateSimilarity => Self::constant(0.95),
            ExitTechnique::Never | ExitTechnique::AlwaysAt(_) => Self::constant(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda0.is_finite()
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.floor >= 0.0
            && self.floor <= self.lambda0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "threshold schedule needs decay in (0,1] and 0 <= floor <= lambda0, got {self:?}"
            )))
        }
    }

    pub fn threshold_at(&self, layer: usize) -> f64 {
        let steps = layer.saturating_sub(1) as i32;
        (self.lambda0 * self.decay.powi(steps)).max(self.floor)
    }
}

/// What a technique looks at when deciding.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    Logits(&'a [f64]),
    StatePair { prev: &'a [f64], cur: &'a [f64] },
    State { h: &'a [f64], probe: &'a ClassifierProbe },
    None,
}

pub fn softmax_response_confidence(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::DimensionMismatch {
            what: "softmax response logits (min length)",
            expected: 2,
            got: logits.len(),
        });
    }
    let probs = numerics::softmax(logits)?;
    let (mut top1, mut top2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in probs {
        if p > top1 {
            top2 = top1;
            top1 = p;
        } else if p > top2 {
            top2 = p;
        }
    }
    Ok(top1 - top2)
}

pub fn state_similarity_confidence(prev: &[f64], cur: &[f64]) -> Result<f64> {
    numerics::cosine_similarity(prev, cur)
}

pub fn classifier_confidence(h: &[f64], probe: &ClassifierProbe) -> Result<f64> {
    Ok(numerics::sigmoid(numerics::dot(&probe.weight, h)? + probe.bias))
}

/// Confidence for the confidence-based techniques; `None` for the harness
/// policies, which decide on layer index alone.
pub fn confidence(technique: ExitTechnique, evidence: Evidence<'_>) -> Result<Option<f64>> {
    match (technique, evidence) {
        (ExitTechnique::SoftmaxResponse, Evidence::Logits(l)) => softmax_response_confidence(l).map(Some),
        (ExitTechnique::StateSimilarity, Evidence::StatePair { prev, cur }) => {
            state_similarity_confidence(prev, cur).map(Some)
        }
        (ExitTechnique::Classifier, Evidence::State { h, probe }) => classifier_confidence(h, probe).map(Some),
        (ExitTechnique::Never | ExitTechnique::AlwaysAt(_), _) => Ok(None),
        (ExitTechnique::SoftmaxResponse, _) => Err(Error::EvidenceMismatch("softmax")),
        (ExitTechnique::StateSimilarity, _) => Err(Error::EvidenceMismatch("state")),
        (ExitTechnique::Classifier, _) => Err(Error::EvidenceMismatch("classifier")),
    }
}

/// Strict `confidence > threshold`.
pub fn decide(technique: ExitTechnique, evidence: Evidence<'_>, layer: usize, threshold: f64) -> Result<bool> {
    Ok(match technique {
        ExitTechnique::Never => false,
        ExitTechnique::AlwaysAt(k) => layer >= k,
        _ => confidence(technique, evidence)?.is_some_and(|c| c > threshold),
    })
}
