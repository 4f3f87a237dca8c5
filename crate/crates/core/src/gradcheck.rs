//! Randomized finite-difference checks of every hand-written gradient.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adapt::{step_objective, StepBatch};
use crate::error::Result;
use crate::losses::{
    classification_loss_with, contrastive_loss, diversity_loss, draw_complementary, info_nce, ClassificationMode,
};
use crate::memory::{exclusion_mask, ExclusionRule, TemporalQueue};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{check_gradient, l2_normalize, normalize_backward, softmax, GradientCheckReport, ProbVector};
use crate::refine::RefinedLabel;
use crate::rng::{stream, RandomStream, Stream};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Upper bound on the parameters perturbed per trial.
pub const MAX_PARAMETERS: usize = 50;

/// Deliberate corruption of the analytic gradient, for testing the checker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Adds 0.01 to every analytic component.
    Offset,
}

impl Fault {
    fn apply(self, grad: &mut [f64]) {
        if self == Fault::Offset {
            grad.iter_mut().for_each(|g| *g += 1e-2);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: usize,
    pub worst: GradientCheckReport,
}

impl SuiteReport {
    pub fn passes(&self) -> bool {
        self.worst.passes(TOLERANCE)
    }
}

fn gaussian(rng: &mut RandomStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(rng: &mut RandomStream, n: usize) -> Vec<f64> {
    l2_normalize(&gaussian(rng, n, 1.0)).expect("gaussian draw is nonzero")
}

fn random_refined(rng: &mut RandomStream, classes: usize) -> RefinedLabel {
    let label = rng.gen_range(0..classes);
    RefinedLabel {
        label,
        scores: ProbVector::one_hot(classes, label),
        weight: rng.gen_range(0.0..=1.0),
    }
}

fn split(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width).map(<[f64]>::to_vec).collect()
}

fn random_queue(rng: &mut RandomStream, dim: usize, classes: usize, history: usize) -> TemporalQueue {
    let len = rng.gen_range(1..=8);
    let mut queue = TemporalQueue::new(len).expect("positive capacity");
    let keys: Vec<Vec<f64>> = (0..len).map(|_| unit(rng, dim)).collect();
    let snaps: Vec<Vec<usize>> = (0..len)
        .map(|_| (0..history).map(|_| rng.gen_range(0..classes)).collect())
        .collect();
    queue.push(&keys, &snaps).expect("matching lengths");
    queue
}

fn classification_trial(rng: &mut RandomStream, mode: ClassificationMode, fault: Fault) -> Result<GradientCheckReport> {
    let classes = rng.gen_range(2..=6);
    let batch = rng.gen_range(1..=MAX_PARAMETERS / classes);
    let point = gaussian(rng, batch * classes, 2.0);
    let refined: Vec<RefinedLabel> = (0..batch).map(|_| random_refined(rng, classes)).collect();
    let comp = refined
        .iter()
        .map(|r| draw_complementary(r.label, classes, rng))
        .collect::<Result<Vec<_>>>()?;
    let comp = mode.uses_negative().then_some(comp.as_slice());
    let eval = |x: &[f64]| classification_loss_with(&split(x, classes), &refined, comp, mode);
    let mut analytic: Vec<f64> = eval(&point)?.d_logits.concat();
    fault.apply(&mut analytic);
    check_gradient(|x| eval(x).map_or(f64::NAN, |l| l.value), &analytic, &point, STEP)
}

fn info_nce_trial(rng: &mut RandomStream, fault: Fault) -> Result<GradientCheckReport> {
    let dim = rng.gen_range(2..=16);
    let tau = rng.gen_range(0.1..1.0);
    let point = unit(rng, dim);
    let pos = unit(rng, dim);
    let negatives: Vec<Vec<f64>> = (0..rng.gen_range(0..=8)).map(|_| unit(rng, dim)).collect();
    let eval = |q: &[f64]| info_nce(q, &pos, negatives.iter().map(Vec::as_slice), tau);
    let mut analytic = eval(&point).1;
    fault.apply(&mut analytic);
    check_gradient(|q| eval(q).0, &analytic, &point, STEP)
}

/// Contrastive loss as a function of the unnormalized feature.
fn normalized_contrastive_trial(rng: &mut RandomStream, fault: Fault) -> Result<GradientCheckReport> {
    let dim = rng.gen_range(2..=16);
    let classes = 3;
    let tau = rng.gen_range(0.1..1.0);
    let point = gaussian(rng, dim, 1.5);
    let pos = unit(rng, dim);
    let queue = random_queue(rng, dim, classes, 2);
    let history: Vec<usize> = (0..2).map(|_| rng.gen_range(0..classes)).collect();
    let mask = exclusion_mask(&history, &queue, ExclusionRule::Aligned);
    let eval = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let q = l2_normalize(z)?;
        let out = contrastive_loss(&q, &pos, &queue, &mask, tau)?;
        Ok((out.value, normalize_backward(z, &out.d_features[0])))
    };
    let mut analytic = eval(&point)?.1;
    fault.apply(&mut analytic);
    check_gradient(|z| eval(z).map_or(f64::NAN, |v| v.0), &analytic, &point, STEP)
}

fn diversity_trial(rng: &mut RandomStream, fault: Fault) -> Result<GradientCheckReport> {
    let classes = rng.gen_range(2..=6);
    let batch = rng.gen_range(1..=MAX_PARAMETERS / classes);
    let point = gaussian(rng, batch * classes, 2.0);
    let eval = |x: &[f64]| -> Result<_> {
        let probs = split(x, classes)
            .iter()
            .map(|l| softmax(l))
            .collect::<Result<Vec<_>>>()?;
        diversity_loss(&probs)
    };
    let mut analytic = eval(&point)?.d_logits.concat();
    fault.apply(&mut analytic);
    check_gradient(|x| eval(x).map_or(f64::NAN, |l| l.value), &analytic, &point, STEP)
}

/// Full adaptation objective w.r.t. the parameters of a 2-4-3-3 network
/// (39 parameters).
fn end_to_end_trial(rng: &mut RandomStream, fault: Fault) -> Result<GradientCheckReport> {
    let config = ModelConfig {
        input_dim: 2,
        hidden: vec![4],
        bottleneck: 3,
        classes: 3,
    };
    let model = ModelParams::init(&config, rng)?;
    let point: Vec<f64> = model
        .as_slice()
        .iter()
        .map(|p| p + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let batch = rng.gen_range(1..=4);
    let inputs: Vec<Vec<f64>> = (0..batch).map(|_| gaussian(rng, 2, 1.5)).collect();
    let refined: Vec<RefinedLabel> = (0..batch).map(|_| random_refined(rng, 3)).collect();
    let comp = refined
        .iter()
        .map(|r| draw_complementary(r.label, 3, rng))
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<Vec<f64>> = (0..batch).map(|_| unit(rng, 3)).collect();
    let queue = random_queue(rng, 3, 3, 2);
    let masks: Vec<Vec<bool>> = (0..batch)
        .map(|_| {
            let h: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
            exclusion_mask(&h, &queue, ExclusionRule::Aligned)
        })
        .collect();
    let mode = [
        ClassificationMode::Negative,
        ClassificationMode::Positive,
        ClassificationMode::PositivePlusNegative,
    ][rng.gen_range(0..3)];
    let tau = rng.gen_range(0.2..1.0);
    let gammas = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)];
    let step_batch = StepBatch {
        inputs: &inputs,
        refined: &refined,
        complementary: Some(&comp),
        keys: Some(&keys),
        queue: &queue,
        masks: &masks,
    };
    let eval = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let params = ModelParams::from_flat(&config, p.to_vec())?;
        let (losses, grad) = step_objective(&params, &step_batch, mode, tau, gammas)?;
        Ok((losses.total, grad))
    };
    let mut analytic = eval(&point)?.1;
    fault.apply(&mut analytic);
    check_gradient(|p| eval(p).map_or(f64::NAN, |v| v.0), &analytic, &point, STEP)
}

type Trial = fn(&mut RandomStream, Fault) -> Result<GradientCheckReport>;

fn suites() -> Vec<(&'static str, Trial)> {
    vec![
        ("classification_negative", |r, f| classification_trial(r, ClassificationMode::Negative, f)),
        ("classification_positive", |r, f| classification_trial(r, ClassificationMode::Positive, f)),
        ("classification_positive_plus_negative", |r, f| {
            classification_trial(r, ClassificationMode::PositivePlusNegative, f)
        }),
        ("contrastive", info_nce_trial),
        ("contrastive_through_normalization", normalized_contrastive_trial),
        ("diversity", diversity_trial),
        ("end_to_end", end_to_end_trial),
    ]
}

/// Runs `trials` random cases of every suite.
pub fn run_gradient_checks(trials: usize, seed: u64, fault: Fault) -> Result<Vec<SuiteReport>> {
    let mut rng = stream(seed, Stream::GradCheck);
    suites()
        .into_iter()
        .map(|(name, trial)| {
            let mut worst = GradientCheckReport {
                max_relative_error: 0.0,
                parameter_count: 0,
            };
            for _ in 0..trials {
                worst = worst.merge(trial(&mut rng, fault)?);
            }
            Ok(SuiteReport { name, trials, worst })
        })
        .collect()
}
