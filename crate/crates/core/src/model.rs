//! Classifier `h(f(x))`: a tanh MLP encoder ending in a linear bottleneck of
//! width P, followed by a linear classifier over C classes.
//!
//! Parameters live in one flat buffer so the optimizer, the EMA update and
//! checkpointing all operate on a single slice. Layer `l` occupies a
//! row-major `out x in` weight block followed by its `out` biases.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, ProbVector};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![32, 32],
            bottleneck: 16,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.bottleneck == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Widths from input to logits.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 3);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.bottleneck);
        w.push(self.classes);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerLayout {
    fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layers: Vec<LayerLayout>,
    data: Vec<f64>,
}

fn layouts(config: &ModelConfig) -> Vec<LayerLayout> {
    let widths = config.widths();
    let mut offset = 0;
    widths
        .windows(2)
        .map(|w| {
            let layer = LayerLayout {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            };
            offset += layer.len();
            layer
        })
        .collect()
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input to each layer; `inputs[0]` is x, the last entry is z.
    inputs: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: ProbVector,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        for layer in params.layers.clone() {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let weights = &mut params.data[layer.offset..layer.offset + layer.weight_len()];
            for w in weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = layouts(config);
        let total = layers.iter().map(LayerLayout::len).sum();
        Ok(Self {
            config: config.clone(),
            layers,
            data: vec![0.0; total],
        })
    }

    pub fn from_flat(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        if data.len() != params.data.len() {
            return Err(Error::LengthMismatch {
                expected: params.data.len(),
                got: data.len(),
            });
        }
        numerics::ensure_finite(&data, "parameters")?;
        params.data = data;
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.config == other.config
    }

    /// `(rows, cols)` of the classifier weight.
    pub fn classifier_shape(&self) -> (usize, usize) {
        let last = self.layers.last().expect("at least two layers");
        (last.fan_out, last.fan_in)
    }

    fn weight(&self, layer: &LayerLayout) -> &[f64] {
        &self.data[layer.offset..layer.offset + layer.weight_len()]
    }

    fn bias(&self, layer: &LayerLayout) -> &[f64] {
        let start = layer.offset + layer.weight_len();
        &self.data[start..start + layer.fan_out]
    }

    fn bottleneck_index(&self) -> usize {
        self.config.hidden.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.config.input_dim {
            return Err(Error::LengthMismatch {
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = self.weight(layer);
            let b = self.bias(layer);
            let mut out: Vec<f64> = (0..layer.fan_out)
                .map(|o| b[o] + numerics::dot(&w[o * layer.fan_in..(o + 1) * layer.fan_in], &current))
                .collect();
            if l < self.bottleneck_index() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut current, out));
        }
        let logits = current;
        numerics::ensure_finite(&logits, "logits")?;
        let z = inputs.last().expect("classifier input").clone();
        let probs = numerics::softmax(&logits)?;
        Ok(ForwardPass {
            inputs,
            z,
            logits,
            probs,
        })
    }

    /// Accumulates parameter gradients into `grad` given the loss gradient
    /// with respect to the logits and (optionally) the raw bottleneck
    /// features `z`.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_logits: &[f64],
        d_z: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        if d_logits.len() != self.config.classes {
            return Err(Error::LengthMismatch {
                expected: self.config.classes,
                got: d_logits.len(),
            });
        }
        let bottleneck = self.bottleneck_index();
        let mut delta = d_logits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let input = &pass.inputs[l];
            let (g_w, g_b) = grad[layer.offset..layer.offset + layer.len()].split_at_mut(layer.weight_len());
            for o in 0..layer.fan_out {
                let d = delta[o];
                g_b[o] += d;
                if d != 0.0 {
                    let row = &mut g_w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (g, x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = self.weight(&layer);
            let mut below = vec![0.0; layer.fan_in];
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d != 0.0 {
                    for (b, wv) in below.iter_mut().zip(&w[o * layer.fan_in..(o + 1) * layer.fan_in]) {
                        *b += d * wv;
                    }
                }
            }
            if l == bottleneck + 1 {
                if let Some(dz) = d_z {
                    if dz.len() != below.len() {
                        return Err(Error::LengthMismatch {
                            expected: below.len(),
                            got: dz.len(),
                        });
                    }
                    below.iter_mut().zip(dz).for_each(|(b, d)| *b += d);
                }
            }
            if l - 1 < bottleneck {
                // input to layer l is tanh output of layer l-1
                below.iter_mut().zip(input).for_each(|(b, h)| *b *= 1.0 - h * h);
            }
            delta = below;
        }
        Ok(())
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, ProbVector)>> {
        if xs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        xs.iter()
            .map(|x| self.forward(x).map(|p| (p.z, p.probs)))
            .collect()
    }
}

/// Exponential moving average of an online model.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumParams(ModelParams);

impl MomentumParams {
    pub fn from_online(online: &ModelParams) -> Self {
        Self(online.clone())
    }

    pub fn params(&self) -> &ModelParams {
        &self.0
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        self.0.forward(x)
    }
}

/// `theta' <- m * theta' + (1 - m) * theta` for every parameter.
pub fn ema_update(momentum: &mut MomentumParams, online: &ModelParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!("ema coefficient {m} outside [0, 1]")));
    }
    if !momentum.0.same_shape(online) {
        return Err(Error::LengthMismatch {
            expected: momentum.0.len(),
            got: online.len(),
        });
    }
    if m == 0.0 {
        momentum.0.data.copy_from_slice(&online.data);
        return Ok(());
    }
    for (t, &o) in momentum.0.data.iter_mut().zip(&online.data) {
        *t = m * *t + (1.0 - m) * o;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "# sfuda.checkpoint/1";

/// Text checkpoint: a header with the layer widths and seed, then one
/// parameter per line in round-trip float formatting.
pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64) -> Result<()> {
    let c = params.config();
    let hidden: Vec<String> = c.hidden.iter().map(ToString::to_string).collect();
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(out, "input_dim {}", c.input_dim).unwrap();
    writeln!(out, "hidden {}", hidden.join(",")).unwrap();
    writeln!(out, "bottleneck {}", c.bottleneck).unwrap();
    writeln!(out, "classes {}", c.classes).unwrap();
    writeln!(out, "seed {seed}").unwrap();
    writeln!(out, "params {}", params.len()).unwrap();
    for v in params.as_slice() {
        writeln!(out, "{v:?}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, u64)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint("missing header".into()));
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
        line.strip_prefix(name)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| Error::Checkpoint(format!("expected {name}, found {line:?}")))
    };
    let parse_usize = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Checkpoint(e.to_string()));
    let input_dim = parse_usize(&field("input_dim")?)?;
    let hidden_line = field("hidden")?;
    let hidden = if hidden_line.trim().is_empty() {
        Vec::new()
    } else {
        hidden_line.split(',').map(parse_usize).collect::<Result<Vec<_>>>()?
    };
    let bottleneck = parse_usize(&field("bottleneck")?)?;
    let classes = parse_usize(&field("classes")?)?;
    let seed = field("seed")?
        .trim()
        .parse::<u64>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = parse_usize(&field("params")?)?;
    let data = lines
        .take(count + 1)
        .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Checkpoint(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if data.len() != count {
        return Err(Error::Checkpoint(format!("expected {count} parameters, found {}", data.len())));
    }
    let config = ModelConfig {
        input_dim,
        hidden,
        bottleneck,
        classes,
    };
    Ok((ModelParams::from_flat(&config, data)?, seed))
}
