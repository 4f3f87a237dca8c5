//! Neighbour soft voting and entropy-based confidence weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, ProbVector};

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedLabel {
    pub label: usize,
    pub scores: ProbVector,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightingMode {
    /// `exp(-H)`, in `[1/e, 1]`.
    Exponential,
    /// `1 - H`.
    Linear,
    /// 1 when `H <= threshold`, else 0.
    Hard { threshold: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    #[default]
    Exponential,
    Linear,
    Hard,
}

impl WeightingMode {
    pub fn from_kind(kind: WeightingKind, hard_threshold: f64) -> Self {
        match kind {
            WeightingKind::Exponential => Self::Exponential,
            WeightingKind::Linear => Self::Linear,
            WeightingKind::Hard => Self::Hard {
                threshold: hard_threshold,
            },
        }
    }
}

/// Coordinate-wise mean of the neighbours' predictions.
pub fn soft_vote(preds: &[&ProbVector]) -> Result<ProbVector> {
    let first = preds.first().ok_or(Error::EmptyBatch)?;
    let classes = first.len();
    let mut mean = vec![0.0; classes];
    for p in preds {
        if p.len() != classes {
            return Err(Error::LengthMismatch {
                expected: classes,
                got: p.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v;
        }
    }
    let k = preds.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    ProbVector::new(mean)
}

/// Argmax, lowest index on ties.
pub fn refine_label(scores: &ProbVector) -> usize {
    scores.argmax()
}

/// Shannon entropy in bits divided by `log2 C`, with `0 log 0 = 0`.
pub fn normalized_entropy(p: &ProbVector) -> Result<f64> {
    numerics::validate_simplex(p.as_slice())?;
    let classes = p.len();
    if classes < 2 {
        return Err(Error::InvalidProb(format!("need at least 2 classes, got {classes}")));
    }
    let bits: f64 = p
        .as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.log2())
        .sum();
    Ok((bits / (classes as f64).log2()).clamp(0.0, 1.0))
}

pub fn weight_from_entropy(h: f64, mode: WeightingMode) -> f64 {
    match mode {
        WeightingMode::Exponential => (-h).exp(),
        WeightingMode::Linear => 1.0 - h,
        WeightingMode::Hard { threshold } => {
            if h <= threshold {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn uncertainty_weight(p: &ProbVector, mode: WeightingMode) -> Result<f64> {
    Ok(weight_from_entropy(normalized_entropy(p)?, mode))
}

/// Soft vote, argmax and weight in one go.
pub fn refine(neighbour_preds: &[&ProbVector], mode: WeightingMode) -> Result<RefinedLabel> {
    let scores = soft_vote(neighbour_preds)?;
    let weight = uncertainty_weight(&scores, mode)?;
    Ok(RefinedLabel {
        label: refine_label(&scores),
        scores,
        weight,
    })
}
