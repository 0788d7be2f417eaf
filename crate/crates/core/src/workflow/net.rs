//! A small fully-connected classifier trained with SGD and momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::Mask;
use crate::error::{Error, Result};
use crate::tensor::{DType, DenseMatrix};

/// Labelled examples, row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }
}

/// Seeded Gaussian blobs: one unit-variance cluster per class around a
/// centre drawn from `N(0, separation^2)` per feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub features: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec { classes: 4, features: 64, train_per_class: 200, test_per_class: 100, separation: 0.3, seed: 1 }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.classes) || !(64..=256).contains(&self.features) {
            return Err(Error::InvalidRecipe(format!(
                "dataset needs 2..=8 classes and 64..=256 features, got {} and {}",
                self.classes, self.features
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || !(self.separation > 0.0) {
            return Err(Error::InvalidRecipe("dataset sizes and separation must be positive".into()));
        }
        Ok(())
    }

    /// Generates `(train, test)`. Examples are interleaved by class.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let centre = Normal::new(0.0, self.separation).expect("positive separation");
        let noise = Normal::new(0.0, 1.0).expect("unit variance");
        let centres: Vec<Vec<f64>> =
            (0..self.classes).map(|_| (0..self.features).map(|_| centre.sample(&mut rng)).collect()).collect();
        let mut draw = |per_class: usize| {
            let mut d = Dataset { features: self.features, classes: self.classes, x: Vec::new(), y: Vec::new() };
            for _ in 0..per_class {
                for (c, mu) in centres.iter().enumerate() {
                    d.x.extend(mu.iter().map(|m| m + noise.sample(&mut rng)));
                    d.y.push(c);
                }
            }
            d
        };
        let train = draw(self.train_per_class);
        let test = draw(self.test_per_class);
        Ok((train, test))
    }
}

/// Learning rate as a function of the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrCurve {
    Constant,
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Half-cosine from the base rate down to zero over the run.
    Cosine,
}

/// Everything that defines a training run. Two runs with equal schedules
/// (and equal starting nets and data) produce identical weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_curve: LrCurve,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidRecipe(format!("invalid schedule {self:?}")));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidRecipe("weight decay must be non-negative".into()));
        }
        if let LrCurve::Step { every: 0, .. } = self.lr_curve {
            return Err(Error::InvalidRecipe("step curve needs every > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_curve {
            LrCurve::Constant => self.learning_rate,
            LrCurve::Step { every, gamma } => self.learning_rate * gamma.powi((epoch / every) as i32),
            LrCurve::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Canonical text form; equal descriptors mean equal schedules.
    pub fn descriptor(&self) -> String {
        toml::to_string(self).expect("schedule serializes")
    }
}

/// One fully-connected layer, `y = W x + b` with `W` of shape `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    /// The weights as an FP32 matrix, e.g. for pruning or calibration.
    pub fn weight_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_f64_rounded(self.outputs, self.inputs, DType::Fp32, &self.weights)
            .expect("layer shape is consistent")
    }
}

/// Gradients of one layer, same layout as [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Fully-connected ReLU network with a softmax cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    layers: Vec<Layer>,
}

impl TinyNet {
    /// He-initialised net with layer widths `sizes` (input first, classes last).
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidRecipe(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(TinyNet { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::InvalidRecipe(format!("layer {i} has inconsistent buffers")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::InvalidRecipe(format!("layer {i} input width does not match")));
            }
        }
        if layers.is_empty() {
            return Err(Error::InvalidRecipe("a net needs at least one layer".into()));
        }
        Ok(TinyNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Pre-activations of every layer for one example.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let input: Vec<f64> = if i == 0 { x.to_vec() } else { zs[i - 1].iter().map(|&z| z.max(0.0)).collect() };
            let z = (0..l.outputs)
                .map(|o| {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    l.bias[o] + row.iter().zip(&input).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            zs.push(z);
        }
        zs
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().unwrap_or_default()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        (0..logits.len()).fold(0, |best, i| if logits[i] > logits[best] { i } else { best })
    }

    /// Fraction of examples classified correctly, in `[0, 1]`.
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = (0..data.len()).filter(|&i| self.predict(data.example(i)) == data.y[i]).count();
        correct as f64 / data.len() as f64
    }

    /// Mean cross-entropy over the examples `batch` of `data`.
    pub fn loss(&self, data: &Dataset, batch: &[usize]) -> f64 {
        let total: f64 = batch.iter().map(|&i| cross_entropy(&self.logits(data.example(i)), data.y[i]).0).sum();
        total / batch.len().max(1) as f64
    }

    /// Mean loss and its gradients over `batch`, examples accumulated in order.
    pub fn loss_and_gradients(&self, data: &Dataset, batch: &[usize]) -> (f64, Vec<LayerGrad>) {
        let mut grads: Vec<LayerGrad> = self
            .layers
            .iter()
            .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
            .collect();
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut total = 0.0;
        for &i in batch {
            let x = data.example(i);
            let zs = self.activations(x);
            let (loss, mut delta) = cross_entropy(zs.last().expect("at least one layer"), data.y[i]);
            total += loss;
            for d in &mut delta {
                *d *= scale;
            }
            for li in (0..self.layers.len()).rev() {
                let l = &self.layers[li];
                let input: Vec<f64> =
                    if li == 0 { x.to_vec() } else { zs[li - 1].iter().map(|&z| z.max(0.0)).collect() };
                let g = &mut grads[li];
                for o in 0..l.outputs {
                    g.bias[o] += delta[o];
                    let row = &mut g.weights[o * l.inputs..(o + 1) * l.inputs];
                    for (gw, a) in row.iter_mut().zip(&input) {
                        *gw += delta[o] * a;
                    }
                }
                if li > 0 {
                    let prev = &zs[li - 1];
                    delta = (0..l.inputs)
                        .map(|j| {
                            if prev[j] <= 0.0 {
                                return 0.0;
                            }
                            (0..l.outputs).map(|o| l.weights[o * l.inputs + j] * delta[o]).sum()
                        })
                        .collect();
                }
            }
        }
        (total * scale, grads)
    }
}

/// Loss and `d loss / d logits` for one example.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains `net` in place. Optimizer state starts from zero on every call.
pub fn train(net: &mut TinyNet, data: &Dataset, schedule: &Schedule) -> Result<TrainLog> {
    fit(net, data, schedule, None, &mut |_| {})
}

/// Trains with fixed masks, one per layer. After every optimizer step masked
/// weights and their momentum are exactly zero; `observer` sees the net after
/// each step. With all-true masks this is the same computation as [`train`].
pub fn retrain_sparse(
    net: &mut TinyNet,
    masks: &[Mask],
    data: &Dataset,
    schedule: &Schedule,
    observer: &mut dyn FnMut(&TinyNet),
) -> Result<TrainLog> {
    if masks.len() != net.layers.len() {
        return Err(Error::LengthMismatch { expected: net.layers.len(), found: masks.len() });
    }
    for (l, m) in net.layers.iter().zip(masks) {
        if (m.rows(), m.cols()) != (l.outputs, l.inputs) {
            return Err(Error::ShapeMismatch { op: "retrain_sparse", left: (l.outputs, l.inputs), right: (m.rows(), m.cols()) });
        }
    }
    for (l, m) in net.layers.iter_mut().zip(masks) {
        zero_masked(&mut l.weights, m);
    }
    fit(net, data, schedule, Some(masks), observer)
}

fn zero_masked(values: &mut [f64], mask: &Mask) {
    for (v, &keep) in values.iter_mut().zip(mask.bits()) {
        if !keep {
            *v = 0.0;
        }
    }
}

fn fit(
    net: &mut TinyNet,
    data: &Dataset,
    schedule: &Schedule,
    masks: Option<&[Mask]>,
    observer: &mut dyn FnMut(&TinyNet),
) -> Result<TrainLog> {
    schedule.validate()?;
    if data.features != net.layers[0].inputs {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: (data.len(), data.features),
            right: (net.layers[0].outputs, net.layers[0].inputs),
        });
    }
    let mut velocity: Vec<LayerGrad> = net
        .layers
        .iter()
        .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let (mu, wd) = (schedule.momentum, schedule.weight_decay);
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let (loss, grads) = net.loss_and_gradients(data, batch);
            epoch_loss += loss * batch.len() as f64;
            for (li, (layer, g)) in net.layers.iter_mut().zip(&grads).enumerate() {
                let v = &mut velocity[li];
                for ((w, vw), gw) in layer.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                    *vw = mu * *vw + gw + wd * *w;
                    *w -= lr * *vw;
                }
                for ((b, vb), gb) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                    *vb = mu * *vb + gb;
                    *b -= lr * *vb;
                }
                if let Some(masks) = masks {
                    zero_masked(&mut layer.weights, &masks[li]);
                    zero_masked(&mut v.weights, &masks[li]);
                }
            }
            log.steps += 1;
            observer(net);
        }
        let mean = epoch_loss / data.len().max(1) as f64;
        if !mean.is_finite() || !net.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log.epoch_losses.push(mean);
    }
    Ok(log)
}
