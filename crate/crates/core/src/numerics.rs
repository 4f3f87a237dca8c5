//! Small dense-math substrate: probability vectors, softmax, feature
//! normalization, cosine distance, central-difference gradients and the SGD
//! update. Everything here is a pure function over `f64` slices.

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of a probability vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Norm below which a feature vector is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates `probs` against the simplex invariant.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_simplex(&probs)?;
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, class: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn validate_simplex(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidProb("empty".into()));
    }
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProb(format!("entry {i} = {p}")));
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidProb(format!("sum = {sum}")));
    }
    Ok(())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    ensure_finite(logits, "logits")?;
    Ok(ProbVector(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(v, "feature")?;
    let n = norm(v);
    if n <= DEGENERATE_NORM {
        return Err(Error::DegenerateFeature);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Pulls a gradient taken w.r.t. `z / |z|` back to `z`.
pub fn normalize_backward(z: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = norm(z);
    let u: Vec<f64> = z.iter().map(|v| v / n).collect();
    let along = dot(&u, grad_unit);
    grad_unit.iter().zip(&u).map(|(g, ui)| (g - ui * along) / n).collect()
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= DEGENERATE_NORM || nb <= DEGENERATE_NORM {
        return Err(Error::DegenerateFeature);
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff_grad<F>(f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {step} outside (0, 1e-2]"
        )));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheckReport {
    pub max_relative_error: f64,
    pub parameter_count: usize,
}

impl GradientCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }

    /// Worst-of combination of two reports.
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_relative_error: self.max_relative_error.max(other.max_relative_error),
            parameter_count: self.parameter_count + other.parameter_count,
        }
    }
}

/// Compares an analytic gradient against `finite_diff_grad`.
pub fn check_gradient<F>(f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<GradientCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::LengthMismatch {
            expected: point.len(),
            got: analytic.len(),
        });
    }
    let numeric = finite_diff_grad(f, point, step)?;
    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradientCheckReport {
        max_relative_error,
        parameter_count: point.len(),
    })
}

/// SGD with heavy-ball momentum, in place:
/// `buffer <- momentum * buffer + grads; params <- params - lr * buffer`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    learning_rate: f64,
    momentum_buffer: &mut [f64],
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if momentum_buffer.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            got: momentum_buffer.len(),
        });
    }
    if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig(format!(
            "sgd: learning_rate {learning_rate}, momentum {momentum}"
        )));
    }
    for ((p, g), b) in params.iter_mut().zip(grads).zip(momentum_buffer.iter_mut()) {
        *b = momentum * *b + g;
        *p -= learning_rate * *b;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!(p.as_slice()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
        assert_eq!(softmax(&[]).unwrap_err().to_string(), "empty logits");
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            l2_normalize(&[0.0, 0.0]).unwrap_err().to_string(),
            "degenerate feature"
        );
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateFeature)
        ));
        assert!(matches!(
            cosine_distance(&[1.0], &[1.0, 0.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(|x| x[0] * x[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_errors() {
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.1).is_err());
        assert!(matches!(
            finite_diff_grad(|x| if x[0] > 0.0 { f64::INFINITY } else { 0.0 }, &[0.0], 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        let mut b = [0.0];
        sgd_step(&mut p, &[0.5], 0.1, &mut b, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);

        let mut p = [1.0, -2.0];
        let mut b = [0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], 0.1, &mut b, 0.9).unwrap();
        assert_eq!(p, [1.0, -2.0]);

        let mut p = [0.0];
        let mut b = [1.0];
        sgd_step(&mut p, &[0.0], 0.1, &mut b, 0.9).unwrap();
        assert!((b[0] - 0.9).abs() < 1e-15);
        assert!((p[0] + 0.09).abs() < 1e-15);

        let mut p = [0.0, 1.0];
        let mut b = [0.0];
        assert!(sgd_step(&mut p, &[0.0, 0.0], 0.1, &mut b, 0.9).is_err());
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let z = [0.4, -1.3, 2.2];
        let g = [0.7, 0.1, -0.5];
        let f = |v: &[f64]| dot(&l2_normalize(v).unwrap(), &g);
        let report = check_gradient(f, &normalize_backward(&z, &g), &z, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-8);
    }

    #[test]
    fn relative_error_denominator() {
        assert_eq!(relative_error(1e-8, 0.0), 1e-8);
        assert_eq!(relative_error(200.0, 100.0), 0.5);
    }

    proptest! {
        #[test]
        fn softmax_is_valid_simplex(logits in prop::collection::vec(-1e6f64..1e6, 1..12)) {
            let p = softmax(&logits).unwrap();
            validate_simplex(p.as_slice()).unwrap();
            prop_assert_eq!(argmax(&logits), p.argmax());
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10f64..10.0, 4),
            b in prop::collection::vec(-10f64..10.0, 4),
            s in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let d = cosine_distance(&a, &b).unwrap();
            prop_assert!((d - cosine_distance(&b, &a).unwrap()).abs() < 1e-9);
            let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
            prop_assert!((d - cosine_distance(&scaled, &b).unwrap()).abs() < 1e-9);
            prop_assert!((0.0..=2.0).contains(&d));
        }

        #[test]
        fn normalized_has_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            prop_assume!(norm(&v) > 1e-6);
            prop_assert!((norm(&l2_normalize(&v).unwrap()) - 1.0).abs() < 1e-9);
        }
    }
}
