//! Synthetic source/target pairs and the weak/strong augmentation families.
//!
//! The base generator is two interleaving moons for two classes and C
//! Gaussian blobs on a circle otherwise. The target domain is drawn from the
//! same generator and then rotated about the origin, translated and jittered
//! with isotropic Gaussian noise.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const DATASET_SCHEMA: &str = "# sfuda.dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub classes: usize,
    /// Radians, in `[0, pi)`.
    pub rotation: f64,
    pub translation: [f64; 2],
    /// Extra Gaussian noise applied to target inputs only.
    pub target_noise: f64,
    /// Per-point noise of the two-moons generator.
    pub moon_noise: f64,
    pub blob_radius: f64,
    pub blob_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_source: 512,
            n_target: 512,
            classes: 2,
            rotation: PI / 4.0,
            translation: [0.0, 0.0],
            target_noise: 0.0,
            moon_noise: 0.1,
            blob_radius: 2.0,
            blob_std: 0.4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        if !(2..=8).contains(&c) {
            return Err(Error::InvalidConfig(format!("classes must be in 2..=8, got {c}")));
        }
        for (name, n) in [("n_source", self.n_source), ("n_target", self.n_target)] {
            if n < 10 * c {
                return Err(Error::InvalidConfig(format!("{name} = {n} is below 10 * classes")));
            }
            if n % c != 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {n} is not a multiple of classes ({c}); classes are balanced exactly"
                )));
            }
        }
        if !(0.0..PI).contains(&self.rotation) {
            return Err(Error::InvalidConfig(format!("rotation {} outside [0, pi)", self.rotation)));
        }
        let nonneg = [
            ("target_noise", self.target_noise),
            ("moon_noise", self.moon_noise),
            ("blob_std", self.blob_std),
            ("blob_radius", self.blob_radius),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidConfig("translation must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub drop_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_sigma: 0.02,
            strong_sigma: 0.15,
            scale_min: 0.7,
            scale_max: 1.3,
            drop_prob: 0.0,
        }
    }
}

impl AugmentConfig {
    /// No randomness at all: both augmentations become the identity.
    pub fn identity() -> Self {
        Self {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weak_sigma >= 0.0
            && self.strong_sigma >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && (0.0..=1.0).contains(&self.drop_prob)
            && self.scale_max.is_finite()
            && self.weak_sigma.is_finite()
            && self.strong_sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid augmentation settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub true_label: usize,
    pub sample_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftDescriptor {
    pub rotation: f64,
    pub translation: [f64; 2],
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub classes: usize,
    pub shift: ShiftDescriptor,
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated as finite and nonnegative")
}

/// Balanced draw of `n` points from the base generator, in class order.
fn base_samples<R: Rng>(config: &DataConfig, n: usize, rng: &mut R) -> Vec<(Vec<f64>, usize)> {
    let c = config.classes;
    let per_class = n / c;
    let mut out = Vec::with_capacity(n);
    if c == 2 {
        let noise = gaussian(config.moon_noise);
        for label in 0..2 {
            for _ in 0..per_class {
                let t = rng.gen_range(0.0..PI);
                let (x, y) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                // centred on the origin
                out.push((
                    vec![x - 0.5 + noise.sample(rng), y - 0.25 + noise.sample(rng)],
                    label,
                ));
            }
        }
    } else {
        let noise = gaussian(config.blob_std);
        for label in 0..c {
            let angle = 2.0 * PI * label as f64 / c as f64;
            let centre = [config.blob_radius * angle.cos(), config.blob_radius * angle.sin()];
            for _ in 0..per_class {
                out.push((
                    vec![centre[0] + noise.sample(rng), centre[1] + noise.sample(rng)],
                    label,
                ));
            }
        }
    }
    out
}

pub fn rotate_translate(x: &[f64], rotation: f64, translation: [f64; 2]) -> Vec<f64> {
    let (s, c) = rotation.sin_cos();
    vec![
        c * x[0] - s * x[1] + translation[0],
        s * x[0] + c * x[1] + translation[1],
    ]
}

pub fn generate_domain_pair(config: &DataConfig, seed: u64) -> Result<DomainPair> {
    config.validate()?;
    let mut rng = stream(seed, Stream::Data);

    let mut source = base_samples(config, config.n_source, &mut rng);
    source.shuffle(&mut rng);

    let mut target = base_samples(config, config.n_target, &mut rng);
    target.shuffle(&mut rng);
    let jitter = gaussian(config.target_noise);
    for (x, _) in target.iter_mut() {
        let mut shifted = rotate_translate(x, config.rotation, config.translation);
        for v in shifted.iter_mut() {
            *v += jitter.sample(&mut rng);
        }
        *x = shifted;
    }

    let n_source = source.len() as u64;
    let to_samples = |pts: Vec<(Vec<f64>, usize)>, first_id: u64| {
        pts.into_iter()
            .enumerate()
            .map(|(i, (x, true_label))| Sample {
                x,
                true_label,
                sample_id: first_id + i as u64,
            })
            .collect::<Vec<_>>()
    };
    Ok(DomainPair {
        source: to_samples(source, 0),
        target: to_samples(target, n_source),
        classes: config.classes,
        shift: ShiftDescriptor {
            rotation: config.rotation,
            translation: config.translation,
            noise: config.target_noise,
        },
    })
}

/// `x + eps`, `eps ~ N(0, weak_sigma^2 I)`.
pub fn weak_augment<R: Rng + ?Sized>(x: &[f64], config: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let noise = gaussian(config.weak_sigma);
    x.iter().map(|v| v + noise.sample(rng)).collect()
}

/// Global rescale, Gaussian jitter, then occasionally zero one coordinate.
pub fn strong_augment<R: Rng + ?Sized>(x: &[f64], config: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let scale = rng.gen_range(config.scale_min..=config.scale_max);
    let noise = gaussian(config.strong_sigma);
    let mut out: Vec<f64> = x.iter().map(|v| scale * v + noise.sample(rng)).collect();
    if !out.is_empty() && rng.gen_bool(config.drop_prob) {
        let i = rng.gen_range(0..out.len());
        out[i] = 0.0;
    }
    out
}

#[derive(Serialize)]
struct DatasetRow<'a> {
    sample_id: u64,
    x0: f64,
    x1: f64,
    true_label: usize,
    split: &'a str,
}

pub fn write_dataset_csv(path: &Path, pair: &DomainPair) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{DATASET_SCHEMA}")?;
    let mut writer = csv::Writer::from_writer(file);
    for (split, samples) in [("source", &pair.source), ("target", &pair.target)] {
        for s in samples {
            writer.serialize(DatasetRow {
                sample_id: s.sample_id,
                x0: s.x[0],
                x1: s.x[1],
                true_label: s.true_label,
                split,
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}
