//! Which layers get pruned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NumericFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    FullyConnected,
    Recurrent,
    Embedding,
    /// A layer that only exists during training (e.g. an auxiliary head).
    HeadTrainingOnly,
    Other,
}

impl LayerKind {
    pub fn is_gemm_like(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::FullyConnected | LayerKind::Recurrent)
    }
}

/// What the policy needs to know about a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub name: String,
    pub kind: LayerKind,
    /// Reduction dimension of the layer's GEMM (`C*R*S` for a convolution).
    pub gemm_k: usize,
    pub in_channels: usize,
    #[serde(with = "format_str")]
    pub format: NumericFormat,
    pub phase: usize,
}

impl LayerManifest {
    pub fn validate(&self) -> Result<()> {
        if self.kind.is_gemm_like() && self.gemm_k == 0 {
            return Err(Error::InvalidManifest(format!("{}: GEMM-like layer with K = 0", self.name)));
        }
        Ok(())
    }
}

/// Result of the eligibility policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Eligibility {
    pub eligible: bool,
    pub reason: String,
}

impl Eligibility {
    fn yes(reason: impl Into<String>) -> Self {
        Eligibility { eligible: true, reason: reason.into() }
    }

    fn no(reason: impl Into<String>) -> Self {
        Eligibility { eligible: false, reason: reason.into() }
    }
}

/// Prunes only inference-time GEMM-like layers whose reduction dimension
/// suits the sparse mode of their format. The first convolution of an image
/// network (3 input channels) is left dense.
pub fn eligible(layer: &LayerManifest) -> Eligibility {
    match layer.kind {
        LayerKind::Embedding => return Eligibility::no("embedding layers are not pruned"),
        LayerKind::HeadTrainingOnly => return Eligibility::no("layer is only used during training"),
        LayerKind::Other => return Eligibility::no("no learnable GEMM-like operation"),
        _ => {}
    }
    if layer.gemm_k == 0 {
        return Eligibility::no("GEMM K is zero");
    }
    if layer.kind == LayerKind::Conv && layer.in_channels == 3 {
        return Eligibility::no("first convolution on 3-channel input");
    }
    let Some(multiple) = layer.format.sparse_k_multiple() else {
        return Eligibility::no(format!("{} has no sparse mode", layer.format));
    };
    if layer.gemm_k % multiple != 0 {
        return Eligibility::no(format!("GEMM K = {} is not a multiple of {multiple} for {}", layer.gemm_k, layer.format));
    }
    Eligibility::yes(format!("{:?} layer, K = {} divisible by {multiple}", layer.kind, layer.gemm_k))
}

mod format_str {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::tensor::NumericFormat;

    pub fn serialize<S: Serializer>(f: &NumericFormat, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NumericFormat, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}
