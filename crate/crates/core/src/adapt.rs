//! Source training, pseudo-label initialization and the target adaptation
//! loop, plus evaluation and the ablation grid.
//!
//! One adaptation step on a batch of target samples:
//!
//! 1. weakly augment each sample and embed it with the online encoder;
//! 2. look up its K nearest bank entries (its own slot excluded), soft-vote
//!    their predictions into a refined label and an entropy weight;
//! 3. draw two strong augmentations, one for the online query (which also
//!    supplies the classification logits) and one for the momentum key;
//! 4. mask queued keys whose label history overlaps the query's;
//! 5. take one SGD step on `g1 * cls + g2 * ctr + g3 * div`;
//! 6. move the momentum model towards the online one;
//! 7. refresh the bank with momentum outputs on the weak augmentation;
//! 8. enqueue the keys with a snapshot of their label histories.
//!
//! Label histories are extended once per epoch, so masks only ever compare
//! labels from past epochs.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_domain_pair, strong_augment, weak_augment, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss_with, contrastive_loss, diversity_loss, draw_complementary, smoothed_cross_entropy,
    total_loss, ClassificationMode, LossValue,
};
use crate::memory::{exclusion_mask, ExclusionRule, FeatureBank, LabelHistoryStore, QueueDiagnostics, TemporalQueue};
use crate::model::{ema_update, ModelConfig, ModelParams, MomentumParams};
use crate::numerics::{self, l2_normalize, normalize_backward, sgd_step, ProbVector};
use crate::refine::{refine_label, soft_vote, uncertainty_weight, RefinedLabel, WeightingKind, WeightingMode};
use crate::rng::{stream, RandomStream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub refinement: bool,
    pub contrastive: bool,
    pub negative_learning: bool,
    pub temporal_exclusion: bool,
    pub uncertainty_reweighting: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub fn all() -> Self {
        Self {
            refinement: true,
            contrastive: true,
            negative_learning: true,
            temporal_exclusion: true,
            uncertainty_reweighting: true,
        }
    }

    pub fn none() -> Self {
        Self {
            refinement: false,
            contrastive: false,
            negative_learning: false,
            temporal_exclusion: false,
            uncertainty_reweighting: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            label_smoothing: 0.1,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("invalid source training settings {self:?}")));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label smoothing {} outside [0, 0.5)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    /// K, neighbours per refinement.
    pub neighbours: usize,
    /// T, epochs of label history kept per sample.
    pub history_len: usize,
    /// M; defaults to the target set size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank_capacity: Option<usize>,
    /// N
    pub queue_capacity: usize,
    /// EMA coefficient of the momentum model.
    pub ema: f64,
    pub temperature: f64,
    /// Weights of the classification, contrastive and diversity terms.
    pub gammas: [f64; 3],
    pub weighting: WeightingKind,
    /// Normalized-entropy threshold of the hard weighting mode.
    pub hard_threshold: f64,
    /// Classification loss used when negative learning is on.
    pub classification: ClassificationMode,
    pub exclusion_rule: ExclusionRule,
    pub toggles: Toggles,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.01,
            sgd_momentum: 0.9,
            neighbours: 10,
            history_len: 5,
            bank_capacity: None,
            queue_capacity: 256,
            ema: 0.99,
            temperature: 0.07,
            gammas: [1.0, 1.0, 1.0],
            weighting: WeightingKind::Exponential,
            hard_threshold: 0.75,
            classification: ClassificationMode::Negative,
            exclusion_rule: ExclusionRule::Aligned,
            toggles: Toggles::all(),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.neighbours == 0 {
            return bad("neighbours (K) must be at least 1".into());
        }
        if self.history_len == 0 {
            return bad("history_len (T) must be at least 1".into());
        }
        if self.bank_capacity == Some(0) || self.queue_capacity == 0 || self.batch_size == 0 {
            return bad("capacities and batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return bad(format!("ema {} outside [0, 1]", self.ema));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("learning_rate must be > 0 and sgd_momentum in [0, 1)".into());
        }
        if !self.gammas.iter().all(|g| g.is_finite() && *g >= 0.0) {
            return bad("gammas must be finite and nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.hard_threshold) {
            return bad(format!("hard_threshold {} outside [0, 1]", self.hard_threshold));
        }
        Ok(())
    }

    /// Classification loss actually used: positive whenever negative
    /// learning is switched off.
    pub fn effective_classification(&self) -> ClassificationMode {
        if self.toggles.negative_learning {
            self.classification
        } else {
            ClassificationMode::Positive
        }
    }

    pub fn weighting_mode(&self) -> WeightingMode {
        WeightingMode::from_kind(self.weighting, self.hard_threshold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub target_acc: f64,
    pub pl_acc: f64,
    pub mean_weight: f64,
    pub kept_negative_fraction: f64,
    pub loss_cls: f64,
    pub loss_ctr: f64,
    pub loss_div: f64,
}

/// Top-1 accuracy of `model` against the true labels.
pub fn evaluate(model: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    for s in samples {
        if model.forward(&s.x)?.probs.argmax() == s.true_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Label-smoothed cross-entropy training on the labelled source set.
pub fn train_source(model: &ModelConfig, config: &SourceConfig, source: &[Sample], seed: u64) -> Result<ModelParams> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(s) = source.iter().find(|s| s.true_label >= model.classes) {
        return Err(Error::Unlabelled(s.sample_id));
    }
    let mut params = ModelParams::init(model, &mut stream(seed, Stream::Init))?;
    let mut velocity = vec![0.0; params.len()];
    let mut rng = stream(seed, Stream::SourceShuffle);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; params.len()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &source[i];
                let pass = params.forward(&s.x)?;
                let (loss, mut d) = smoothed_cross_entropy(&pass.logits, s.true_label, config.label_smoothing)?;
                total += loss;
                d.iter_mut().for_each(|g| *g *= scale);
                params.backward(&pass, &d, None, &mut grad)?;
            }
            sgd_step(params.as_mut_slice(), &grad, config.learning_rate, &mut velocity, config.momentum)?;
        }
        debug!("source epoch {} loss {:.5}", epoch + 1, total / source.len() as f64);
    }
    Ok(params)
}

/// Everything one optimizer step needs besides the model parameters.
pub struct StepBatch<'a> {
    /// Strongly augmented inputs fed to the online model.
    pub inputs: &'a [Vec<f64>],
    pub refined: &'a [RefinedLabel],
    /// One complementary label per sample, required by negative modes.
    pub complementary: Option<&'a [usize]>,
    /// Unit-norm momentum keys; `None` disables the contrastive term.
    pub keys: Option<&'a [Vec<f64>]>,
    pub queue: &'a TemporalQueue,
    /// One mask per sample over the queue.
    pub masks: &'a [Vec<bool>],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub ctr: f64,
    pub div: f64,
    pub total: f64,
    /// Online predictions on the strong augmentations.
    pub probs: Vec<ProbVector>,
}

/// Total adaptation objective on one batch and its gradient w.r.t. every
/// online parameter.
pub fn step_objective(
    params: &ModelParams,
    batch: &StepBatch<'_>,
    mode: ClassificationMode,
    temperature: f64,
    gammas: [f64; 3],
) -> Result<(StepLosses, Vec<f64>)> {
    if batch.inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.inputs.len();
    let passes = batch
        .inputs
        .iter()
        .map(|x| params.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<Vec<f64>> = passes.iter().map(|p| p.logits.clone()).collect();
    let probs: Vec<ProbVector> = passes.iter().map(|p| p.probs.clone()).collect();

    let cls = classification_loss_with(&logits, batch.refined, batch.complementary, mode)?;
    let div = diversity_loss(&probs)?;
    let ctr = match batch.keys {
        Some(keys) => {
            let mut value = 0.0;
            let mut d_features = Vec::with_capacity(n);
            for ((pass, key), mask) in passes.iter().zip(keys).zip(batch.masks) {
                let q = l2_normalize(&pass.z)?;
                let part = contrastive_loss(&q, key, batch.queue, mask, temperature)?;
                value += part.value / n as f64;
                d_features.push(part.d_features[0].iter().map(|g| g / n as f64).collect());
            }
            LossValue {
                value,
                d_logits: Vec::new(),
                d_features,
            }
        }
        None => LossValue::zero(),
    };
    let total = total_loss(&cls, &ctr, &div, gammas)?;

    let mut grad = vec![0.0; params.len()];
    let zeros = vec![0.0; params.config().classes];
    for (i, pass) in passes.iter().enumerate() {
        let d_logits = total.d_logits.get(i).unwrap_or(&zeros);
        let d_z = total.d_features.get(i).map(|g| normalize_backward(&pass.z, g));
        params.backward(pass, d_logits, d_z.as_deref(), &mut grad)?;
    }
    Ok((
        StepLosses {
            cls: cls.value,
            ctr: ctr.value,
            div: div.value,
            total: total.value,
            probs,
        },
        grad,
    ))
}

/// Invariant audit collected during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub prob_vectors_checked: u64,
    pub simplex_violations: u64,
    pub ema_checks: u64,
    pub envelope_violations: u64,
    pub min_weight: f64,
    pub max_weight: f64,
    pub max_history_len: usize,
}

impl Default for AuditReport {
    fn default() -> Self {
        Self {
            prob_vectors_checked: 0,
            simplex_violations: 0,
            ema_checks: 0,
            envelope_violations: 0,
            min_weight: f64::INFINITY,
            max_weight: f64::NEG_INFINITY,
            max_history_len: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Auditor {
    lo: Vec<f64>,
    hi: Vec<f64>,
    report: AuditReport,
}

impl Auditor {
    fn new(initial: &ModelParams) -> Self {
        Self {
            lo: initial.as_slice().to_vec(),
            hi: initial.as_slice().to_vec(),
            report: AuditReport::default(),
        }
    }

    fn probs(&mut self, p: &ProbVector) {
        self.report.prob_vectors_checked += 1;
        if numerics::validate_simplex(p.as_slice()).is_err() {
            self.report.simplex_violations += 1;
        }
    }

    fn weight(&mut self, w: f64) {
        self.report.min_weight = self.report.min_weight.min(w);
        self.report.max_weight = self.report.max_weight.max(w);
    }

    fn online(&mut self, online: &ModelParams) {
        for ((lo, hi), &v) in self.lo.iter_mut().zip(self.hi.iter_mut()).zip(online.as_slice()) {
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
    }

    fn momentum(&mut self, momentum: &MomentumParams) {
        self.report.ema_checks += 1;
        let outside = momentum
            .params()
            .as_slice()
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .any(|(&v, (&lo, &hi))| {
                let slack = 1e-12 * v.abs().max(1.0);
                v < lo - slack || v > hi + slack
            });
        if outside {
            self.report.envelope_violations += 1;
        }
    }
}

/// Mutable state of a target adaptation run.
pub struct AdaptationState {
    config: AdaptationConfig,
    augment: AugmentConfig,
    classes: usize,
    target: Vec<Sample>,
    online: ModelParams,
    momentum: MomentumParams,
    velocity: Vec<f64>,
    bank: FeatureBank,
    queue: TemporalQueue,
    histories: LabelHistoryStore,
    /// Current pseudo-label per target position.
    pseudo_labels: Vec<usize>,
    epoch: usize,
    weak_rng: RandomStream,
    query_rng: RandomStream,
    key_rng: RandomStream,
    complementary_rng: RandomStream,
    shuffle_rng: RandomStream,
    auditor: Option<Auditor>,
}

/// Seeds pseudo-labels, histories and the bank from the source model.
pub fn init_pseudo_labels(
    source_model: &ModelParams,
    target: &[Sample],
    config: &AdaptationConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<AdaptationState> {
    config.validate()?;
    augment.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes = source_model.config().classes;
    let momentum = MomentumParams::from_online(source_model);
    let mut bank = FeatureBank::new(config.bank_capacity.unwrap_or(target.len()))?;
    let mut histories = LabelHistoryStore::new(config.history_len, classes)?;
    let mut bank_rng = stream(seed, Stream::BankInit);
    let mut pseudo_labels = Vec::with_capacity(target.len());
    for s in target {
        let label = source_model.forward(&s.x)?.probs.argmax();
        pseudo_labels.push(label);
        histories.append(s.sample_id, label)?;
        let xw = weak_augment(&s.x, augment, &mut bank_rng);
        let pass = momentum.forward(&xw)?;
        bank.update(s.sample_id, &pass.z, &pass.probs)?;
    }
    Ok(AdaptationState {
        config: config.clone(),
        augment: augment.clone(),
        classes,
        target: target.to_vec(),
        online: source_model.clone(),
        momentum,
        velocity: vec![0.0; source_model.len()],
        bank,
        queue: TemporalQueue::new(config.queue_capacity)?,
        histories,
        pseudo_labels,
        epoch: 0,
        weak_rng: stream(seed, Stream::WeakAugment),
        query_rng: stream(seed, Stream::StrongQuery),
        key_rng: stream(seed, Stream::StrongKey),
        complementary_rng: stream(seed, Stream::Complementary),
        shuffle_rng: stream(seed, Stream::AdaptShuffle),
        auditor: None,
    })
}

#[derive(Default)]
struct EpochTotals {
    weight_sum: f64,
    weight_count: usize,
    kept: usize,
    considered: usize,
    cls: f64,
    ctr: f64,
    div: f64,
    steps: usize,
}

impl AdaptationState {
    pub fn enable_audit(&mut self) {
        self.auditor = Some(Auditor::new(&self.online));
    }

    pub fn audit_report(&self) -> Option<&AuditReport> {
        self.auditor.as_ref().map(|a| &a.report)
    }

    pub fn online(&self) -> &ModelParams {
        &self.online
    }

    pub fn momentum(&self) -> &MomentumParams {
        &self.momentum
    }

    pub fn bank(&self) -> &FeatureBank {
        &self.bank
    }

    pub fn queue(&self) -> &TemporalQueue {
        &self.queue
    }

    pub fn histories(&self) -> &LabelHistoryStore {
        &self.histories
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.pseudo_labels
    }

    /// Fraction of current pseudo-labels equal to the hidden true labels.
    /// Evaluation only.
    pub fn pseudo_label_accuracy(&self) -> f64 {
        let correct = self
            .pseudo_labels
            .iter()
            .zip(&self.target)
            .filter(|(l, s)| **l == s.true_label)
            .count();
        correct as f64 / self.target.len() as f64
    }

    pub fn target_accuracy(&self) -> Result<f64> {
        evaluate(&self.online, &self.target)
    }

    /// Runs one epoch over the shuffled target set.
    pub fn adapt_epoch(&mut self) -> Result<(EpochMetrics, QueueDiagnostics)> {
        self.epoch += 1;
        self.bank.begin_epoch(self.epoch as u64);
        let mut order: Vec<usize> = (0..self.target.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut totals = EpochTotals::default();
        for batch in order.chunks(self.config.batch_size) {
            self.step(batch, &mut totals)?;
        }
        for (s, &label) in self.target.iter().zip(&self.pseudo_labels) {
            self.histories.append(s.sample_id, label)?;
        }
        if let Some(a) = self.auditor.as_mut() {
            let longest = self.histories.iter().map(|(_, h)| h.len()).max().unwrap_or(0);
            a.report.max_history_len = a.report.max_history_len.max(longest);
        }
        let steps = totals.steps.max(1) as f64;
        let kept_negative_fraction = if totals.considered == 0 {
            1.0
        } else {
            totals.kept as f64 / totals.considered as f64
        };
        let metrics = EpochMetrics {
            epoch: self.epoch,
            target_acc: self.target_accuracy()?,
            pl_acc: self.pseudo_label_accuracy(),
            mean_weight: totals.weight_sum / totals.weight_count.max(1) as f64,
            kept_negative_fraction,
            loss_cls: totals.cls / steps,
            loss_ctr: totals.ctr / steps,
            loss_div: totals.div / steps,
        };
        debug!("{metrics:?}");
        Ok((
            metrics,
            QueueDiagnostics {
                epoch: self.epoch,
                queue_length: self.queue.len(),
                mask_kept_fraction: kept_negative_fraction,
            },
        ))
    }

    fn refine_sample(&mut self, pos: usize, weak: &[f64]) -> Result<RefinedLabel> {
        let toggles = self.config.toggles;
        let stored = self.pseudo_labels[pos];
        if !toggles.refinement && !toggles.uncertainty_reweighting {
            return Ok(RefinedLabel {
                label: stored,
                scores: ProbVector::one_hot(self.classes, stored),
                weight: 1.0,
            });
        }
        let id = self.target[pos].sample_id;
        let z = self.online.forward(weak)?.z;
        let neighbours = self.bank.knn_query(&z, self.config.neighbours, Some(id))?;
        let preds: Vec<&ProbVector> = neighbours.iter().map(|n| n.probs).collect();
        let scores = soft_vote(&preds)?;
        let label = if toggles.refinement { refine_label(&scores) } else { stored };
        let weight = if toggles.uncertainty_reweighting {
            uncertainty_weight(&scores, self.config.weighting_mode())?
        } else {
            1.0
        };
        Ok(RefinedLabel { label, scores, weight })
    }

    fn step(&mut self, batch: &[usize], totals: &mut EpochTotals) -> Result<()> {
        let toggles = self.config.toggles;
        let mut weak_inputs = Vec::with_capacity(batch.len());
        let mut refined = Vec::with_capacity(batch.len());
        for &pos in batch {
            let weak = weak_augment(&self.target[pos].x, &self.augment, &mut self.weak_rng);
            let r = self.refine_sample(pos, &weak)?;
            self.pseudo_labels[pos] = r.label;
            totals.weight_sum += r.weight;
            totals.weight_count += 1;
            if let Some(a) = self.auditor.as_mut() {
                a.weight(r.weight);
                a.probs(&r.scores);
            }
            weak_inputs.push(weak);
            refined.push(r);
        }

        // Both strong views are always drawn so the streams do not depend
        // on which losses are enabled.
        let mut queries = Vec::with_capacity(batch.len());
        let mut key_inputs = Vec::with_capacity(batch.len());
        for &pos in batch {
            let x = &self.target[pos].x;
            queries.push(strong_augment(x, &self.augment, &mut self.query_rng));
            key_inputs.push(strong_augment(x, &self.augment, &mut self.key_rng));
        }

        let mode = self.config.effective_classification();
        let complementary = if mode.uses_negative() {
            Some(
                refined
                    .iter()
                    .map(|r| draw_complementary(r.label, self.classes, &mut self.complementary_rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };

        let (keys, masks) = if toggles.contrastive {
            let mut keys = Vec::with_capacity(batch.len());
            for x in &key_inputs {
                let pass = self.momentum.forward(x)?;
                if let Some(a) = self.auditor.as_mut() {
                    a.probs(&pass.probs);
                }
                keys.push(l2_normalize(&pass.z)?);
            }
            let masks: Vec<Vec<bool>> = batch
                .iter()
                .map(|&pos| {
                    if toggles.temporal_exclusion {
                        let history = self.histories.snapshot(self.target[pos].sample_id);
                        exclusion_mask(&history, &self.queue, self.config.exclusion_rule)
                    } else {
                        vec![true; self.queue.len()]
                    }
                })
                .collect();
            for m in &masks {
                totals.kept += m.iter().filter(|&&k| k).count();
                totals.considered += m.len();
            }
            (Some(keys), masks)
        } else {
            (None, vec![Vec::new(); batch.len()])
        };

        let step_batch = StepBatch {
            inputs: &queries,
            refined: &refined,
            complementary: complementary.as_deref(),
            keys: keys.as_deref(),
            queue: &self.queue,
            masks: &masks,
        };
        let (losses, grad) = step_objective(
            &self.online,
            &step_batch,
            mode,
            self.config.temperature,
            self.config.gammas,
        )?;
        totals.cls += losses.cls;
        totals.ctr += losses.ctr;
        totals.div += losses.div;
        totals.steps += 1;

        sgd_step(
            self.online.as_mut_slice(),
            &grad,
            self.config.learning_rate,
            &mut self.velocity,
            self.config.sgd_momentum,
        )?;
        numerics::ensure_finite(self.online.as_slice(), "online parameters")?;
        ema_update(&mut self.momentum, &self.online, self.config.ema)?;
        if let Some(a) = self.auditor.as_mut() {
            losses.probs.iter().for_each(|p| a.probs(p));
            a.online(&self.online);
            a.momentum(&self.momentum);
        }

        for (&pos, weak) in batch.iter().zip(&weak_inputs) {
            let pass = self.momentum.forward(weak)?;
            if let Some(a) = self.auditor.as_mut() {
                a.probs(&pass.probs);
            }
            self.bank.update(self.target[pos].sample_id, &pass.z, &pass.probs)?;
        }

        if let Some(keys) = keys {
            let snapshots: Vec<Vec<usize>> = batch
                .iter()
                .map(|&pos| self.histories.snapshot(self.target[pos].sample_id))
                .collect();
            self.queue.push(&keys, &snapshots)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub source_accuracy: f64,
    pub source_only_target_accuracy: f64,
    pub initial_pseudo_label_accuracy: f64,
    pub metrics: Vec<EpochMetrics>,
    pub queue_diagnostics: Vec<QueueDiagnostics>,
    pub source_model: ModelParams,
    pub online: ModelParams,
    pub momentum: MomentumParams,
    pub wall_time: Duration,
}

impl RunResult {
    pub fn final_target_accuracy(&self) -> f64 {
        self.metrics.last().map_or(self.source_only_target_accuracy, |m| m.target_acc)
    }

    pub fn final_pseudo_label_accuracy(&self) -> f64 {
        self.metrics.last().map_or(self.initial_pseudo_label_accuracy, |m| m.pl_acc)
    }
}

fn run(config: &RunConfig, audit: bool) -> Result<(RunResult, Option<AuditReport>)> {
    config.validate()?;
    let start = Instant::now();
    let seed = config.seed;
    let pair = generate_domain_pair(&config.data, seed)?;
    let source_model = train_source(&config.model_config(), &config.source, &pair.source, seed)?;
    let source_accuracy = evaluate(&source_model, &pair.source)?;
    let source_only_target_accuracy = evaluate(&source_model, &pair.target)?;
    let mut state = init_pseudo_labels(&source_model, &pair.target, &config.adapt, &config.augment, seed)?;
    if audit {
        state.enable_audit();
    }
    let initial_pseudo_label_accuracy = state.pseudo_label_accuracy();
    info!(
        "seed {seed}: source acc {source_accuracy:.4}, source-only target acc {source_only_target_accuracy:.4}, initial pseudo-label acc {initial_pseudo_label_accuracy:.4}"
    );
    let mut metrics = Vec::with_capacity(config.adapt.epochs);
    let mut queue_diagnostics = Vec::with_capacity(config.adapt.epochs);
    for _ in 0..config.adapt.epochs {
        let (m, q) = state.adapt_epoch()?;
        metrics.push(m);
        queue_diagnostics.push(q);
    }
    if let Some(last) = metrics.last() {
        info!(
            "seed {seed}: final target acc {:.4}, pseudo-label acc {:.4}",
            last.target_acc, last.pl_acc
        );
    }
    let report = state.audit_report().cloned();
    Ok((
        RunResult {
            seed,
            source_accuracy,
            source_only_target_accuracy,
            initial_pseudo_label_accuracy,
            metrics,
            queue_diagnostics,
            source_model,
            online: state.online,
            momentum: state.momentum,
            wall_time: start.elapsed(),
        },
        report,
    ))
}

/// Data generation, source training, pseudo-label initialization and the
/// configured number of adaptation epochs.
pub fn run_adaptation(config: &RunConfig) -> Result<RunResult> {
    run(config, false).map(|(r, _)| r)
}

/// As [`run_adaptation`], additionally checking the simplex invariant of
/// every emitted probability vector and the EMA envelope after every step.
pub fn run_adaptation_audited(config: &RunConfig) -> Result<(RunResult, AuditReport)> {
    run(config, true).map(|(r, a)| (r, a.expect("audit enabled")))
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub name: String,
    pub config: RunConfig,
}

/// History lengths swept by the ablation grid.
pub const HISTORY_SWEEP: [usize; 4] = [1, 2, 5, 8];

/// Cumulative component rows, loss/weighting variants, and the history sweep.
pub fn ablation_cells(base: &RunConfig) -> Vec<AblationCell> {
    let with = |name: &str, f: &dyn Fn(&mut AdaptationConfig)| {
        let mut config = base.clone();
        f(&mut config.adapt);
        AblationCell {
            name: name.to_string(),
            config,
        }
    };
    let cumulative = |n: usize| {
        move |a: &mut AdaptationConfig| {
            let flags = [true, n >= 2, n >= 3, n >= 4, n >= 5];
            a.toggles = Toggles {
                refinement: flags[0],
                contrastive: flags[1],
                negative_learning: flags[2],
                temporal_exclusion: flags[3],
                uncertainty_reweighting: flags[4],
            };
        }
    };
    let full = |a: &mut AdaptationConfig| a.toggles = Toggles::all();
    let mut cells = vec![
        with("refinement", &cumulative(1)),
        with("contrastive", &cumulative(2)),
        with("negative_learning", &cumulative(3)),
        with("temporal_exclusion", &cumulative(4)),
        with("full", &cumulative(5)),
        with("hard_entropy_margin", &|a| {
            full(a);
            a.weighting = WeightingKind::Hard;
        }),
        with("linear_weighting", &|a| {
            full(a);
            a.weighting = WeightingKind::Linear;
        }),
        with("positive", &|a| {
            full(a);
            a.classification = ClassificationMode::Positive;
        }),
        with("positive_plus_negative", &|a| {
            full(a);
            a.classification = ClassificationMode::PositivePlusNegative;
        }),
    ];
    for t in HISTORY_SWEEP {
        cells.push(with(&format!("history_{t}"), &|a| {
            full(a);
            a.history_len = t;
        }));
    }
    cells
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub cell: String,
    pub result: RunResult,
}

/// Every cell of [`ablation_cells`] for every seed, in (cell, seed) order.
/// Seeds and cells run in parallel; each run is itself sequential.
pub fn ablate(base: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRun>> {
    let cells = ablation_cells(base);
    run_cells(&cells, seeds)
}

pub fn run_cells(cells: &[AblationCell], seeds: &[u64]) -> Result<Vec<AblationRun>> {
    let jobs: Vec<(&AblationCell, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    jobs.par_iter()
        .map(|(cell, seed)| {
            let mut config = cell.config.clone();
            config.seed = *seed;
            run_adaptation(&config).map(|result| AblationRun {
                cell: cell.name.clone(),
                result,
            })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty set");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median final target accuracy per cell, in first-seen cell order.
pub fn median_by_cell(runs: &[AblationRun]) -> Vec<(String, f64)> {
    let mut order = Vec::new();
    let mut groups: HashMap<&str, Vec<f64>> = HashMap::new();
    for r in runs {
        groups
            .entry(&r.cell)
            .or_insert_with(|| {
                order.push(r.cell.clone());
                Vec::new()
            })
            .push(r.result.final_target_accuracy());
    }
    order
        .into_iter()
        .map(|cell| {
            let m = median(groups.get_mut(cell.as_str()).unwrap());
            (cell, m)
        })
        .collect()
}
