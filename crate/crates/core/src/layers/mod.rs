//! Backbones and whole-model assembly.

mod model;
mod ops;

pub use model::{
    param_count, Checkpoint, ForwardOutput, GraphContext, Mode, Model, ParamCount, CHECKPOINT_FORMAT,
};
pub use ops::{
    dense, gtn_composite_adjacency, gtn_ensemble, gtn_layer, gtn_propagate, gtn_propagation_matrix, mix_apply,
    propagate, regcn_layer, regin_aggregate, regin_layer, resgc_propagate, GinWeights, Propagation,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};
use crate::relemb::{Normalization, SelfLoopMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Regcn,
    Resgc,
    Regin,
    Gtn,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regcn" => Ok(Self::Regcn),
            "resgc" => Ok(Self::Resgc),
            "regin" => Ok(Self::Regin),
            "gtn" => Ok(Self::Gtn),
            other => Err(Error::InvalidArgument(format!("unknown backbone `{other}`"))),
        }
    }
}

fn default_dropout() -> f64 {
    0.6
}

fn default_lambda() -> f64 {
    100.0
}

fn default_one() -> usize {
    1
}

fn default_two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub layers: usize,
    pub hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "ModelConfig::default_norm")]
    pub norm: Normalization,
    #[serde(default = "ModelConfig::default_self_loops")]
    pub self_loops: SelfLoopMode,
    #[serde(default)]
    pub freeze_relations: bool,
    #[serde(default)]
    pub freeze_self_loops: bool,
    #[serde(default = "default_one")]
    pub gtn_channels: usize,
    #[serde(default = "default_two")]
    pub gtn_length: usize,
}

impl Default for ModelConfig {
    /// Four RE-GCN layers with 64 hidden units, dropout 0.6, lambda 100.
    fn default() -> Self {
        Self {
            backbone: Backbone::Regcn,
            layers: 4,
            hidden: 64,
            dropout: default_dropout(),
            lambda: default_lambda(),
            norm: Normalization::Row,
            self_loops: SelfLoopMode::Embedded,
            freeze_relations: false,
            freeze_self_loops: false,
            gtn_channels: 1,
            gtn_length: 2,
        }
    }
}

impl ModelConfig {
    fn default_norm() -> Normalization {
        Normalization::Row
    }

    fn default_self_loops() -> SelfLoopMode {
        SelfLoopMode::Embedded
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.hidden == 0 {
            return bad("hidden dimension must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.backbone == Backbone::Gtn && (self.gtn_channels == 0 || self.gtn_length == 0) {
            return bad("GTN needs at least one channel and a path length of at least 1".into());
        }
        Ok(())
    }

    /// Whether the backbone carries relation embeddings.
    pub fn uses_embeddings(&self) -> bool {
        self.backbone != Backbone::Gtn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    RelationEmbedding,
    SelfLoopEmbedding,
    GinEpsilon,
    GtnScore,
}

impl ParamKind {
    pub fn is_embedding(self) -> bool {
        matches!(self, Self::RelationEmbedding | Self::SelfLoopEmbedding)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Layer index for per-layer parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub value: DenseMatrix,
    pub trainable: bool,
}
