//! Declarative multi-phase pipelines: parse, validate, run.
//!
//! A recipe is a TOML document:
//!
//! ```toml
//! name = "train-prune-retrain"
//! seed = 11                 # network initialisation
//! hidden = [64, 32]         # hidden layer widths
//! format = "fp16"           # numeric format used by the eligibility policy
//!
//! [dataset]                 # seeded Gaussian blobs
//! classes = 4
//! features = 64
//! train_per_class = 500
//! test_per_class = 250
//! separation = 0.5
//! seed = 1
//!
//! [schedules.main]
//! epochs = 12
//! batch_size = 32
//! learning_rate = 0.05
//! lr_curve = { kind = "cosine" }   # or "constant", or { kind = "step", every = 4, gamma = 0.5 }
//! momentum = 0.9
//! weight_decay = 1e-4
//! seed = 5
//!
//! [[phase]]
//! label = "dense"
//! kind = "train_dense"      # train_dense | prune | retrain_sparse | finetune_sparse | calibrate
//! schedule = "main"
//!
//! [[phase]]
//! label = "prune"
//! kind = "prune"
//! pattern = "2:4"           # default 2:4
//! permute = "off"           # off | greedy
//!
//! [[phase]]
//! label = "sparse"
//! kind = "retrain_sparse"
//! repeats = "dense"         # default: the last dense phase
//! ```
//!
//! Rules: exactly one `prune`; dense training only before it; sparse
//! training and calibration only after it; the first training phase after
//! `prune` is a `retrain_sparse`; a `retrain_sparse` runs the exact schedule
//! of the dense phase it repeats.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::net::{retrain_sparse, train, BlobSpec, Dataset, Schedule, TinyNet, TrainLog};
use super::policy::{eligible, LayerKind, LayerManifest};
use crate::codec::{check_conformance, Mask};
use crate::error::{Error, Result};
use crate::pruner::{find_permutation, prune_magnitude, Permutation, SearchBudget};
use crate::quant::{calibrate, dequantize, quantize, CalibMethod, Granularity};
use crate::tensor::{NMPattern, NumericFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    TrainDense,
    Prune,
    RetrainSparse,
    FinetuneSparse,
    Calibrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermuteMode {
    #[default]
    Off,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub label: String,
    pub kind: PhaseKind,
    /// Schedule name, for `train_dense` and `finetune_sparse`. On a
    /// `retrain_sparse` it must name a schedule identical to the repeated one.
    #[serde(default)]
    pub schedule: Option<String>,
    /// Label of the dense phase a `retrain_sparse` repeats.
    #[serde(default)]
    pub repeats: Option<String>,
    /// `n:m` for `prune`.
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default)]
    pub permute: Option<PermuteMode>,
    /// Calibration method for `calibrate`: `max`, `entropy`, `percentile=P`.
    #[serde(default)]
    pub method: Option<String>,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}

fn default_format() -> String {
    "fp16".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default)]
    pub dataset: BlobSpec,
    #[serde(default)]
    pub schedules: BTreeMap<String, Schedule>,
    #[serde(rename = "phase", default)]
    pub phases: Vec<Phase>,
}

/// Recognised pipeline layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeShape {
    /// One dense phase, prune, then the same phase again with masks.
    TrainPruneRetrain,
    /// Prune after pre-training, retrain that phase, then fine-tune sparse.
    PruneAfterPretraining,
    /// Several dense phases, prune after the last, repeat only the last.
    PruneAfterFinetuning,
    /// Valid but none of the above.
    Custom,
}

/// A fully checked recipe: resolved schedules and parsed options.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub shape: RecipeShape,
    pub format: NumericFormat,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    TrainDense { label: String, schedule: Schedule },
    Prune { label: String, pattern: NMPattern, permute: PermuteMode },
    RetrainSparse { label: String, repeats: String, schedule: Schedule },
    FinetuneSparse { label: String, schedule: Schedule },
    Calibrate { label: String, method: CalibMethod },
}

impl Recipe {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidRecipe(e.to_string()))
    }

    fn schedule(&self, phase: &Phase) -> Result<Schedule> {
        let name = phase
            .schedule
            .as_ref()
            .ok_or_else(|| Error::InvalidRecipe(format!("phase '{}' needs a schedule", phase.label)))?;
        let s = self
            .schedules
            .get(name)
            .ok_or_else(|| Error::InvalidRecipe(format!("phase '{}': unknown schedule '{name}'", phase.label)))?;
        s.validate()?;
        Ok(*s)
    }

    /// Checks the ordering rules and resolves every phase.
    pub fn validate(&self) -> Result<Plan> {
        let bad = |msg: String| Err(Error::InvalidRecipe(msg));
        if self.phases.is_empty() {
            return bad("recipe has no phases".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        self.dataset.validate()?;
        let format: NumericFormat = self.format.parse()?;
        for (i, p) in self.phases.iter().enumerate() {
            if p.label.is_empty() || self.phases[..i].iter().any(|q| q.label == p.label) {
                return bad(format!("phase labels must be unique and non-empty ('{}')", p.label));
            }
        }
        let prunes: Vec<usize> =
            self.phases.iter().enumerate().filter(|(_, p)| p.kind == PhaseKind::Prune).map(|(i, _)| i).collect();
        let [prune_at] = prunes[..] else {
            return bad(format!("prune must appear exactly once, found {}", prunes.len()));
        };

        let mut dense: Vec<(String, Schedule)> = Vec::new();
        let mut steps = Vec::with_capacity(self.phases.len());
        let mut first_training_after_prune: Option<PhaseKind> = None;
        for (i, p) in self.phases.iter().enumerate() {
            let after = i > prune_at;
            let step = match p.kind {
                PhaseKind::TrainDense => {
                    if after {
                        return bad(format!("dense phase '{}' comes after prune", p.label));
                    }
                    let schedule = self.schedule(p)?;
                    dense.push((p.label.clone(), schedule));
                    Step::TrainDense { label: p.label.clone(), schedule }
                }
                PhaseKind::Prune => {
                    if dense.is_empty() {
                        return bad("prune needs a dense training phase before it".into());
                    }
                    let pattern = match &p.pattern {
                        Some(s) => s.parse()?,
                        None => NMPattern::TWO_FOUR,
                    };
                    Step::Prune { label: p.label.clone(), pattern, permute: p.permute.unwrap_or_default() }
                }
                PhaseKind::RetrainSparse | PhaseKind::FinetuneSparse if !after => {
                    return bad(format!("sparse phase '{}' comes before prune", p.label));
                }
                PhaseKind::RetrainSparse => {
                    first_training_after_prune.get_or_insert(p.kind);
                    let repeats = p.repeats.clone().unwrap_or_else(|| dense.last().expect("checked").0.clone());
                    let Some((_, schedule)) = dense.iter().find(|(l, _)| *l == repeats) else {
                        return bad(format!("phase '{}' repeats unknown dense phase '{repeats}'", p.label));
                    };
                    if p.schedule.is_some() && self.schedule(p)?.descriptor() != schedule.descriptor() {
                        return bad(format!(
                            "phase '{}' must use the same schedule as '{repeats}'",
                            p.label
                        ));
                    }
                    Step::RetrainSparse { label: p.label.clone(), repeats, schedule: *schedule }
                }
                PhaseKind::FinetuneSparse => {
                    first_training_after_prune.get_or_insert(p.kind);
                    Step::FinetuneSparse { label: p.label.clone(), schedule: self.schedule(p)? }
                }
                PhaseKind::Calibrate => {
                    if !after {
                        return bad(format!("calibration '{}' must follow prune", p.label));
                    }
                    let method = match &p.method {
                        Some(m) => m.parse()?,
                        None => CalibMethod::Max,
                    };
                    Step::Calibrate { label: p.label.clone(), method }
                }
            };
            steps.push(step);
        }
        if first_training_after_prune != Some(PhaseKind::RetrainSparse) {
            return bad("the first training phase after prune must be retrain_sparse".into());
        }
        Ok(Plan { shape: classify(&steps, dense.len()), format, steps })
    }

    /// Generates the dataset and initial net and runs the recipe.
    pub fn run(&self) -> Result<RecipeReport> {
        let (train_set, test_set) = self.dataset.generate()?;
        let mut sizes = vec![self.dataset.features];
        sizes.extend(&self.hidden);
        sizes.push(self.dataset.classes);
        let net = TinyNet::new(&sizes, self.seed)?;
        run_recipe(self, net, &train_set, &test_set)
    }
}

fn classify(steps: &[Step], dense: usize) -> RecipeShape {
    let repeated: Vec<&str> = steps
        .iter()
        .filter_map(|s| match s {
            Step::RetrainSparse { repeats, .. } => Some(repeats.as_str()),
            _ => None,
        })
        .collect();
    let finetunes = steps.iter().filter(|s| matches!(s, Step::FinetuneSparse { .. })).count();
    let last_dense = steps.iter().rev().find_map(|s| match s {
        Step::TrainDense { label, .. } => Some(label.as_str()),
        _ => None,
    });
    match (dense, repeated.as_slice(), finetunes) {
        (1, [_], 0) => RecipeShape::TrainPruneRetrain,
        (1, [_], _) => RecipeShape::PruneAfterPretraining,
        (2.., [r], 0) if Some(*r) == last_dense => RecipeShape::PruneAfterFinetuning,
        _ => RecipeShape::Custom,
    }
}

/// Metrics after one phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub label: String,
    pub kind: PhaseKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Fraction of all weights that are zero.
    pub sparsity: f64,
    /// Largest number of masked weights found non-zero after any step.
    pub masked_nonzero: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pruned_layers: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub dense_layers: Vec<String>,
    /// Quantized pruned layers still satisfy their pattern.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conforming: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecipeReport {
    pub name: String,
    pub shape: RecipeShape,
    pub phases: Vec<PhaseReport>,
    /// Test accuracy after the last dense phase.
    pub dense_test_accuracy: f64,
    pub final_test_accuracy: f64,
    pub masked_weights_stayed_zero: bool,
}

/// Runs a validated recipe on a given net and data.
pub fn run_recipe(recipe: &Recipe, mut net: TinyNet, train_set: &Dataset, test_set: &Dataset) -> Result<RecipeReport> {
    let plan = recipe.validate()?;
    let mut masks: Vec<Mask> = net.layers().iter().map(|l| Mask::full(l.outputs, l.inputs)).collect();
    let mut pattern = NMPattern::TWO_FOUR;
    let mut pruned: Vec<bool> = vec![false; net.layers().len()];
    let mut phases = Vec::with_capacity(plan.steps.len());
    let mut dense_test_accuracy = net.accuracy(test_set);

    for step in &plan.steps {
        let mut report = PhaseReport {
            label: String::new(),
            kind: PhaseKind::TrainDense,
            schedule: None,
            final_loss: None,
            steps: 0,
            train_accuracy: 0.0,
            test_accuracy: 0.0,
            sparsity: 0.0,
            masked_nonzero: 0,
            pruned_layers: Vec::new(),
            dense_layers: Vec::new(),
            conforming: None,
        };
        let record_log = |report: &mut PhaseReport, log: TrainLog, schedule: &Schedule| {
            report.schedule = Some(schedule.descriptor());
            report.final_loss = log.epoch_losses.last().copied();
            report.steps = log.steps;
        };
        match step {
            Step::TrainDense { label, schedule } => {
                report.label = label.clone();
                let log = train(&mut net, train_set, schedule)?;
                record_log(&mut report, log, schedule);
            }
            Step::Prune { label, pattern: p, permute } => {
                report.label = label.clone();
                report.kind = PhaseKind::Prune;
                pattern = *p;
                for li in 0..net.layers().len() {
                    let l = &net.layers()[li];
                    let name = format!("fc{li}");
                    let manifest = LayerManifest {
                        name: name.clone(),
                        kind: LayerKind::FullyConnected,
                        gemm_k: l.inputs,
                        in_channels: l.inputs,
                        format: plan.format,
                        phase: 0,
                    };
                    let verdict = eligible(&manifest);
                    if !verdict.eligible || l.inputs % pattern.m() != 0 {
                        report.dense_layers.push(format!("{name}: {}", verdict.reason));
                        continue;
                    }
                    // The first layer's inputs are the data, which cannot be reordered.
                    if *permute == PermuteMode::Greedy && li > 0 {
                        let search = find_permutation(&l.weight_matrix(), pattern, SearchBudget::greedy(recipe.seed))?;
                        permute_layer_inputs(&mut net, li, &search.permutation);
                    }
                    let mask = prune_magnitude(&net.layers()[li].weight_matrix(), pattern)?.mask;
                    zero_by_mask(&mut net.layers_mut()[li].weights, &mask);
                    masks[li] = mask;
                    pruned[li] = true;
                    report.pruned_layers.push(name);
                }
            }
            Step::RetrainSparse { label, schedule, .. } | Step::FinetuneSparse { label, schedule } => {
                report.label = label.clone();
                report.kind = match step {
                    Step::RetrainSparse { .. } => PhaseKind::RetrainSparse,
                    _ => PhaseKind::FinetuneSparse,
                };
                let mut worst = 0usize;
                let log = retrain_sparse(&mut net, &masks, train_set, schedule, &mut |n| {
                    worst = worst.max(masked_nonzero(n, &masks));
                })?;
                report.masked_nonzero = worst;
                record_log(&mut report, log, schedule);
            }
            Step::Calibrate { label, method } => {
                report.label = label.clone();
                report.kind = PhaseKind::Calibrate;
                let mut conforming = true;
                for li in 0..net.layers().len() {
                    let w = net.layers()[li].weight_matrix();
                    let scales = calibrate(std::slice::from_ref(&w), *method, Granularity::PerRow)?;
                    let q = quantize(&w, &scales)?;
                    if pruned[li] {
                        conforming &= check_conformance(&q, pattern)?;
                    }
                    net.layers_mut()[li].weights = dequantize(&q, &scales)?;
                }
                report.conforming = Some(conforming);
            }
        }
        report.train_accuracy = net.accuracy(train_set);
        report.test_accuracy = net.accuracy(test_set);
        report.sparsity = sparsity(&net);
        report.masked_nonzero = report.masked_nonzero.max(masked_nonzero(&net, &masks));
        if report.kind == PhaseKind::TrainDense {
            dense_test_accuracy = report.test_accuracy;
        }
        phases.push(report);
    }
    Ok(RecipeReport {
        name: recipe.name.clone(),
        shape: plan.shape,
        dense_test_accuracy,
        final_test_accuracy: net.accuracy(test_set),
        masked_weights_stayed_zero: phases.iter().all(|p| p.masked_nonzero == 0),
        phases,
    })
}

/// Reorders the inputs of layer `li` and, to compensate, the outputs of layer `li - 1`.
fn permute_layer_inputs(net: &mut TinyNet, li: usize, perm: &Permutation) {
    let p = perm.as_slice();
    let layers = net.layers_mut();
    let (before, rest) = layers.split_at_mut(li);
    let (producer, consumer) = (&mut before[li - 1], &mut rest[0]);
    let cols = consumer.inputs;
    consumer.weights = (0..consumer.outputs * cols).map(|i| consumer.weights[i / cols * cols + p[i % cols]]).collect();
    let pc = producer.inputs;
    producer.weights = (0..producer.outputs * pc).map(|i| producer.weights[p[i / pc] * pc + i % pc]).collect();
    producer.bias = perm.apply_slice(&producer.bias);
}

fn zero_by_mask(weights: &mut [f64], mask: &Mask) {
    for (w, &keep) in weights.iter_mut().zip(mask.bits()) {
        if !keep {
            *w = 0.0;
        }
    }
}

fn masked_nonzero(net: &TinyNet, masks: &[Mask]) -> usize {
    net.layers()
        .iter()
        .zip(masks)
        .map(|(l, m)| l.weights.iter().zip(m.bits()).filter(|(w, &keep)| !keep && **w != 0.0).count())
        .sum()
}

fn sparsity(net: &TinyNet) -> f64 {
    let (zeros, total) = net.layers().iter().fold((0usize, 0usize), |(z, t), l| {
        (z + l.weights.iter().filter(|w| **w == 0.0).count(), t + l.weights.len())
    });
    zeros as f64 / total.max(1) as f64
}
