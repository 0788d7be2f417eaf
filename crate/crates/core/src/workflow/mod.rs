//! Train, prune, retrain: a small fully-connected trainer, the layer
//! eligibility policy and multi-phase recipes.

mod net;
mod policy;
mod recipe;

pub use net::{retrain_sparse, train, BlobSpec, Dataset, Layer, LayerGrad, LrCurve, Schedule, TinyNet, TrainLog};
pub use policy::{eligible, Eligibility, LayerKind, LayerManifest};
pub use recipe::{run_recipe, PermuteMode, Phase, PhaseKind, PhaseReport, Plan, Recipe, RecipeReport, RecipeShape, Step};

/// A train, prune 2:4, retrain recipe on the default synthetic task.
pub const REFERENCE_RECIPE: &str = include_str!("../../recipes/train-prune-retrain.toml");
