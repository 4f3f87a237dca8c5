//! Training objectives with hand-derived gradients.
//!
//! Every loss returns a [`LossValue`]: the scalar plus gradients with respect
//! to its differentiable inputs (per-sample logits and/or per-sample unit
//! features). All logarithms are natural.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::TemporalQueue;
use crate::numerics::{self, log_sum_exp, ProbVector};
use crate::refine::RefinedLabel;

/// Tolerance on `|q| = 1` for contrastive inputs.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Per-sample gradient w.r.t. logits; empty when the loss does not
    /// depend on logits.
    pub d_logits: Vec<Vec<f64>>,
    /// Per-sample gradient w.r.t. unit-norm features; empty when the loss
    /// does not depend on features.
    pub d_features: Vec<Vec<f64>>,
}

impl LossValue {
    pub fn zero() -> Self {
        Self::default()
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.d_logits.iter().flatten().all(|g| g.is_finite())
            && self.d_features.iter().flatten().all(|g| g.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationMode {
    /// `-w ln(1 - p[y~])` with a random complementary label `y~`.
    #[default]
    Negative,
    /// `-w ln p[y^]`.
    Positive,
    PositivePlusNegative,
}

impl ClassificationMode {
    pub fn uses_negative(self) -> bool {
        matches!(self, Self::Negative | Self::PositivePlusNegative)
    }

    pub fn uses_positive(self) -> bool {
        matches!(self, Self::Positive | Self::PositivePlusNegative)
    }
}

/// Uniform draw from `{0..classes} \ {label}`.
pub fn draw_complementary<R: Rng + ?Sized>(label: usize, classes: usize, rng: &mut R) -> Result<usize> {
    if classes < 2 {
        return Err(Error::NoComplementaryLabel { classes });
    }
    let r = rng.gen_range(0..classes - 1);
    Ok(if r >= label { r + 1 } else { r })
}

/// Weighted classification loss, batch-averaged. Draws one complementary
/// label per sample from `rng` when the mode needs it.
pub fn classification_loss<R: Rng + ?Sized>(
    logits: &[Vec<f64>],
    refined: &[RefinedLabel],
    mode: ClassificationMode,
    rng: &mut R,
) -> Result<LossValue> {
    let complementary = if mode.uses_negative() {
        let classes = logits.first().map_or(0, Vec::len);
        Some(
            refined
                .iter()
                .map(|r| draw_complementary(r.label, classes, rng))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    classification_loss_with(logits, refined, complementary.as_deref(), mode)
}

/// As [`classification_loss`] with the complementary labels supplied.
pub fn classification_loss_with(
    logits: &[Vec<f64>],
    refined: &[RefinedLabel],
    complementary: Option<&[usize]>,
    mode: ClassificationMode,
) -> Result<LossValue> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if refined.len() != logits.len() {
        return Err(Error::LengthMismatch {
            expected: logits.len(),
            got: refined.len(),
        });
    }
    let classes = logits[0].len();
    if mode.uses_negative() {
        if classes < 2 {
            return Err(Error::NoComplementaryLabel { classes });
        }
        match complementary {
            Some(c) if c.len() == logits.len() => {}
            Some(c) => {
                return Err(Error::LengthMismatch {
                    expected: logits.len(),
                    got: c.len(),
                })
            }
            None => return Err(Error::InvalidConfig("negative mode needs complementary labels".into())),
        }
    }
    let batch = logits.len() as f64;
    let mut value = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    for (i, (l, r)) in logits.iter().zip(refined).enumerate() {
        if l.len() != classes {
            return Err(Error::LengthMismatch {
                expected: classes,
                got: l.len(),
            });
        }
        numerics::ensure_finite(l, "logits")?;
        if !(0.0..=1.0).contains(&r.weight) {
            return Err(Error::InvalidConfig(format!("sample weight {} outside [0, 1]", r.weight)));
        }
        let w = r.weight;
        let mut grad = vec![0.0; classes];
        if w == 0.0 {
            d_logits.push(grad);
            continue;
        }
        let lse = log_sum_exp(l);
        let probs: Vec<f64> = l.iter().map(|v| (v - lse).exp()).collect();
        if mode.uses_positive() {
            let y = r.label;
            if y >= classes {
                return Err(Error::InvalidConfig(format!("label {y} outside [0, {classes})")));
            }
            value += w * (lse - l[y]);
            for (j, g) in grad.iter_mut().enumerate() {
                *g += w * (probs[j] - if j == y { 1.0 } else { 0.0 });
            }
        }
        if let Some(comp) = complementary.filter(|_| mode.uses_negative()) {
            let neg = comp[i];
            if neg >= classes || neg == r.label {
                return Err(Error::InvalidConfig(format!(
                    "complementary label {neg} invalid for pseudo-label {}",
                    r.label
                )));
            }
            // -ln(1 - p[neg]) = lse(all) - lse(all but neg)
            let others: Vec<f64> = l
                .iter()
                .enumerate()
                .map(|(j, &v)| if j == neg { f64::NEG_INFINITY } else { v })
                .collect();
            let lse_others = log_sum_exp(&others);
            value += w * (lse - lse_others);
            for (j, g) in grad.iter_mut().enumerate() {
                let q = if j == neg { 0.0 } else { (l[j] - lse_others).exp() };
                *g += w * (probs[j] - q);
            }
        }
        grad.iter_mut().for_each(|g| *g /= batch);
        d_logits.push(grad);
    }
    let out = LossValue {
        value: value / batch,
        d_logits,
        d_features: Vec::new(),
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("classification loss".into()));
    }
    Ok(out)
}

/// InfoNCE of one query against its positive key and the given negatives,
/// positive term included in the denominator. Returns `(loss, d loss / d q)`.
/// No normalization is checked or applied.
pub fn info_nce<'a, I>(q: &[f64], k_pos: &[f64], negatives: I, temperature: f64) -> (f64, Vec<f64>)
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let negatives: Vec<&[f64]> = negatives.into_iter().collect();
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(numerics::dot(q, k_pos) / temperature);
    logits.extend(negatives.iter().map(|k| numerics::dot(q, k) / temperature));
    let lse = log_sum_exp(&logits);
    let value = lse - logits[0];
    let mut grad: Vec<f64> = k_pos.iter().map(|k| ((logits[0] - lse).exp() - 1.0) * k / temperature).collect();
    for (k, s) in negatives.iter().zip(&logits[1..]) {
        let a = (s - lse).exp() / temperature;
        for (g, kv) in grad.iter_mut().zip(k.iter()) {
            *g += a * kv;
        }
    }
    (value, grad)
}

fn check_unit(v: &[f64]) -> Result<()> {
    let norm = numerics::norm(v);
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::NotUnitNorm { norm });
    }
    Ok(())
}

/// Contrastive loss for one query. Queue entries whose mask is `false` are
/// not negatives. The key and queue are constants (no gradient).
pub fn contrastive_loss(
    q: &[f64],
    k_pos: &[f64],
    queue: &TemporalQueue,
    mask: &[bool],
    temperature: f64,
) -> Result<LossValue> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature {temperature} must be positive")));
    }
    if mask.len() != queue.len() {
        return Err(Error::LengthMismatch {
            expected: queue.len(),
            got: mask.len(),
        });
    }
    if q.len() != k_pos.len() {
        return Err(Error::LengthMismatch {
            expected: q.len(),
            got: k_pos.len(),
        });
    }
    check_unit(q)?;
    check_unit(k_pos)?;
    let kept = queue
        .entries()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(e, _)| e.key.as_slice());
    let (value, grad) = info_nce(q, k_pos, kept, temperature);
    let out = LossValue {
        value,
        d_logits: Vec::new(),
        d_features: vec![grad],
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok(out)
}

/// Negative entropy of the batch-mean prediction, with gradients w.r.t. the
/// logits that produced each prediction.
pub fn diversity_loss(probs: &[ProbVector]) -> Result<LossValue> {
    let first = probs.first().ok_or(Error::EmptyBatch)?;
    let classes = first.len();
    let batch = probs.len() as f64;
    let mut mean = vec![0.0; classes];
    for p in probs {
        if p.len() != classes {
            return Err(Error::LengthMismatch {
                expected: classes,
                got: p.len(),
            });
        }
        mean.iter_mut().zip(p.as_slice()).for_each(|(m, v)| *m += v / batch);
    }
    let value: f64 = mean.iter().filter(|&&m| m > 0.0).map(|m| m * m.ln()).sum();
    // d value / d p_i[c] = (ln mean[c] + 1) / batch
    let g: Vec<f64> = mean
        .iter()
        .map(|&m| if m > 0.0 { (m.ln() + 1.0) / batch } else { 0.0 })
        .collect();
    let d_logits = probs
        .iter()
        .map(|p| {
            let p = p.as_slice();
            let inner: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            p.iter().zip(&g).map(|(pj, gj)| pj * (gj - inner)).collect()
        })
        .collect();
    Ok(LossValue {
        value,
        d_logits,
        d_features: Vec::new(),
    })
}

/// Cross-entropy against a smoothed one-hot target (`1 - eps` on `label`,
/// `eps / (C - 1)` elsewhere). Returns `(loss, d loss / d logits)`.
pub fn smoothed_cross_entropy(logits: &[f64], label: usize, eps: f64) -> Result<(f64, Vec<f64>)> {
    let classes = logits.len();
    if classes < 2 || label >= classes {
        return Err(Error::InvalidConfig(format!("label {label} with {classes} classes")));
    }
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::InvalidConfig(format!("label smoothing {eps} outside [0, 0.5)")));
    }
    numerics::ensure_finite(logits, "logits")?;
    let off = eps / (classes - 1) as f64;
    let lse = log_sum_exp(logits);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(classes);
    for (j, &l) in logits.iter().enumerate() {
        let t = if j == label { 1.0 - eps } else { off };
        if t > 0.0 {
            value += t * (lse - l);
        }
        grad.push((l - lse).exp() - t);
    }
    Ok((value, grad))
}

fn add_scaled(acc: &mut Vec<Vec<f64>>, part: &[Vec<f64>], scale: f64) -> Result<()> {
    if part.is_empty() || scale == 0.0 {
        return Ok(());
    }
    if acc.is_empty() {
        *acc = part.iter().map(|g| g.iter().map(|v| scale * v).collect()).collect();
        return Ok(());
    }
    if acc.len() != part.len() {
        return Err(Error::LengthMismatch {
            expected: acc.len(),
            got: part.len(),
        });
    }
    for (a, p) in acc.iter_mut().zip(part) {
        if a.len() != p.len() {
            return Err(Error::LengthMismatch {
                expected: a.len(),
                got: p.len(),
            });
        }
        a.iter_mut().zip(p).for_each(|(x, y)| *x += scale * y);
    }
    Ok(())
}

/// `g1 * cls + g2 * ctr + g3 * div`, gradients combined the same way.
pub fn total_loss(cls: &LossValue, ctr: &LossValue, div: &LossValue, gammas: [f64; 3]) -> Result<LossValue> {
    let mut out = LossValue::zero();
    for (part, gamma) in [cls, ctr, div].into_iter().zip(gammas) {
        if !part.is_finite() {
            return Err(Error::NonFinite("loss component".into()));
        }
        if gamma != 0.0 {
            out.value += gamma * part.value;
        }
        add_scaled(&mut out.d_logits, &part.d_logits, gamma)?;
        add_scaled(&mut out.d_features, &part.d_features, gamma)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use crate::rng::{stream, Stream};

    fn refined(label: usize, weight: f64, classes: usize) -> RefinedLabel {
        RefinedLabel {
            label,
            scores: ProbVector::one_hot(classes, label),
            weight,
        }
    }

    #[test]
    fn negative_loss_example() {
        // softmax([0, ln(7/3)]) = [0.3, 0.7]
        let l = vec![vec![0.0, (7.0f64 / 3.0).ln()]];
        let r = [refined(0, 1.0, 2)];
        let out = classification_loss_with(&l, &r, Some(&[1]), ClassificationMode::Negative).unwrap();
        assert!((out.value - 1.203972804325936).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_contributes_nothing() {
        let l = vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.0, 0.5]];
        let r = [refined(0, 0.0, 3), refined(2, 0.7, 3)];
        for mode in [
            ClassificationMode::Negative,
            ClassificationMode::Positive,
            ClassificationMode::PositivePlusNegative,
        ] {
            let out = classification_loss_with(&l, &r, Some(&[1, 0]), mode).unwrap();
            assert!(out.d_logits[0].iter().all(|&g| g == 0.0));
            let solo = classification_loss_with(&l[1..], &r[1..], Some(&[0]), mode).unwrap();
            assert!((out.value - solo.value / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn vanishing_complementary_probability() {
        let l = vec![vec![0.0, -1000.0]];
        let r = [refined(0, 1.0, 2)];
        let out = classification_loss_with(&l, &r, Some(&[1]), ClassificationMode::Negative).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn complementary_never_equals_label() {
        let mut rng = stream(0, Stream::Complementary);
        let mut seen = [0usize; 5];
        for i in 0..100_000 {
            let label = i % 5;
            let c = draw_complementary(label, 5, &mut rng).unwrap();
            assert_ne!(c, label);
            seen[c] += 1;
        }
        assert!(seen.iter().all(|&n| n > 15_000));
        assert!(matches!(
            draw_complementary(0, 1, &mut rng),
            Err(Error::NoComplementaryLabel { .. })
        ));
    }

    #[test]
    fn single_class_negative_mode_errors() {
        let l = vec![vec![0.0]];
        let r = [refined(0, 1.0, 1)];
        let mut rng = stream(0, Stream::Complementary);
        assert!(classification_loss(&l, &r, ClassificationMode::Negative, &mut rng).is_err());
        assert!(classification_loss(&l, &r, ClassificationMode::Positive, &mut rng).is_ok());
    }

    #[test]
    fn loss_linear_in_weight() {
        let l = vec![vec![0.2, 1.1, -0.4]];
        for mode in [ClassificationMode::Negative, ClassificationMode::Positive] {
            let a = classification_loss_with(&l, &[refined(1, 0.3, 3)], Some(&[2]), mode).unwrap();
            let b = classification_loss_with(&l, &[refined(1, 0.6, 3)], Some(&[2]), mode).unwrap();
            assert!((2.0 * a.value - b.value).abs() < 1e-14);
        }
    }

    fn queue(keys: &[Vec<f64>]) -> TemporalQueue {
        let mut q = TemporalQueue::new(16).unwrap();
        q.push(keys, &vec![vec![0]; keys.len()]).unwrap();
        q
    }

    #[test]
    fn contrastive_examples() {
        let q = [1.0, 0.0, 0.0];
        let queue2 = queue(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let out = contrastive_loss(&q, &q, &queue2, &[true, true], 1.0).unwrap();
        assert!((out.value - (1.0 + 2.0 / std::f64::consts::E).ln()).abs() < 1e-12);
        assert!((out.value - 0.551444713932051).abs() < 1e-12);

        let masked = contrastive_loss(&q, &[0.6, 0.8, 0.0], &queue2, &[false, false], 0.07).unwrap();
        assert!(masked.value.abs() < 1e-12);

        let queue3 = queue(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let with_masked = contrastive_loss(&q, &q, &queue3, &[true, false, true], 1.0).unwrap();
        assert_eq!(with_masked, out);
    }

    #[test]
    fn contrastive_errors() {
        let q = [1.0, 0.0];
        let qu = queue(&[vec![0.0, 1.0]]);
        assert!(contrastive_loss(&q, &q, &qu, &[true], 0.0).is_err());
        assert!(contrastive_loss(&[2.0, 0.0], &q, &qu, &[true], 0.1).is_err());
        assert!(contrastive_loss(&q, &q, &qu, &[], 0.1).is_err());
    }

    #[test]
    fn diversity_examples() {
        let u = [ProbVector::uniform(2), ProbVector::uniform(2)];
        assert!((diversity_loss(&u).unwrap().value + 2f64.ln()).abs() < 1e-15);
        let skew = [ProbVector::one_hot(2, 0), ProbVector::one_hot(2, 1)];
        assert!((diversity_loss(&skew).unwrap().value + 2f64.ln()).abs() < 1e-15);
        let same = [ProbVector::one_hot(3, 1), ProbVector::one_hot(3, 1)];
        assert_eq!(diversity_loss(&same).unwrap().value, 0.0);
        assert!(diversity_loss(&[]).is_err());

        let a = softmax(&[0.2, 1.0, -0.3]).unwrap();
        let b = softmax(&[-1.0, 0.4, 0.9]).unwrap();
        let ab = diversity_loss(&[a.clone(), b.clone()]).unwrap();
        let ba = diversity_loss(&[b, a]).unwrap();
        assert!((ab.value - ba.value).abs() < 1e-15);
        assert!(ab.value >= -(3f64.ln()));
    }

    #[test]
    fn smoothing_zero_is_cross_entropy() {
        let batch = [vec![0.3, -1.2, 2.0], vec![1.0, 1.0, -0.5], vec![-3.0, 0.0, 0.1]];
        for (l, y) in batch.iter().zip([2usize, 0, 1]) {
            let (v, g) = smoothed_cross_entropy(l, y, 0.0).unwrap();
            let p = softmax(l).unwrap();
            assert!((v + p.as_slice()[y].ln()).abs() < 1e-12);
            assert!((g[y] - (p.as_slice()[y] - 1.0)).abs() < 1e-15);
        }
        let (_, g) = smoothed_cross_entropy(&batch[0], 2, 0.1).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(smoothed_cross_entropy(&batch[0], 2, 0.5).is_err());
        assert!(smoothed_cross_entropy(&batch[0], 3, 0.1).is_err());
    }

    #[test]
    fn total_examples() {
        let cls = LossValue {
            value: 1.0,
            d_logits: vec![vec![1.0, -1.0]],
            d_features: vec![],
        };
        let ctr = LossValue {
            value: 0.5,
            d_logits: vec![],
            d_features: vec![vec![0.1, 0.2]],
        };
        let div = LossValue {
            value: -0.25,
            d_logits: vec![vec![0.5, 0.5]],
            d_features: vec![],
        };
        let t = total_loss(&cls, &ctr, &div, [1.0; 3]).unwrap();
        assert_eq!(t.value, 1.25);
        assert_eq!(t.d_logits, vec![vec![1.5, -0.5]]);
        assert_eq!(t.d_features, vec![vec![0.1, 0.2]]);

        let t = total_loss(&cls, &ctr, &div, [1.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.value, 0.75);
        assert!(t.d_features.is_empty());

        let t = total_loss(&cls, &LossValue::zero(), &LossValue::zero(), [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.value, 2.0);
    }
}
