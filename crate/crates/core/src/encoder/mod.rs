//! Pluggable image encoders, the three training conditions and the linear head.
//!
//! An [`Encoder`] maps a [`ModelInput`] to an F-dimensional pooled feature vector and
//! exposes its last feature stage (the "tap") so saliency can be computed on it.
//! Encoders own their parameters as flat groups so one optimizer can drive any of them.

mod head;
mod registry;
mod toy;

pub use head::{attach_head, softmax, Head, NUM_CLASSES};
pub use registry::{
    from_weights, instantiate, load_weights, save_weights, study_conditions, EncoderEntry,
    EncoderRegistry,
};
pub use toy::{toy_encoder, toy_encoder_for, toy_spec, ToyCnn, ToyVit};

use std::any::Any;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tiler::ModelInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "VIT_CLASS")]
    VitClass,
    #[serde(rename = "CNN_CLASS")]
    CnnClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    /// A weights identifier or file path.
    Pretrained(String),
    Random,
}

/// Shape of the final feature stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLayout {
    /// A convolutional map, positions stored row-major.
    SpatialMap { height: usize, width: usize },
    /// A token sequence; when `class_token` is set the first token is non-spatial and
    /// the rest form a square grid.
    TokenGrid { tokens: usize, class_token: bool },
}

impl TapLayout {
    pub fn positions(&self) -> usize {
        match *self {
            TapLayout::SpatialMap { height, width } => height * width,
            TapLayout::TokenGrid { tokens, .. } => tokens,
        }
    }

    /// Grid (height, width) after dropping any class token.
    pub fn grid(&self) -> Result<(usize, usize)> {
        match *self {
            TapLayout::SpatialMap { height, width } => Ok((height, width)),
            TapLayout::TokenGrid {
                tokens,
                class_token,
            } => {
                let spatial = tokens - usize::from(class_token);
                let side = (spatial as f64).sqrt().round() as usize;
                if side * side != spatial {
                    return Err(Error::InvalidArgument(format!(
                        "{spatial} spatial tokens do not form a square grid"
                    )));
                }
                Ok((side, side))
            }
        }
    }

    /// Index of the first spatial position.
    pub fn spatial_offset(&self) -> usize {
        match *self {
            TapLayout::TokenGrid {
                class_token: true, ..
            } => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub family: Family,
    pub feature_dim: usize,
    pub weights: WeightsSource,
    pub tap: TapLayout,
    /// Whether the adapter can be re-initialized for random-init training.
    #[serde(default = "yes")]
    pub reinitializable: bool,
}

fn yes() -> bool {
    true
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        if let WeightsSource::Pretrained(id) = &self.weights {
            if id.trim().is_empty() {
                return Err(Error::InvalidArgument(
                    "pretrained weights need a source".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Activations of the final feature stage: `positions × channels`, position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub layout: TapLayout,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Result of one forward pass, kept for the matching backward pass.
pub struct EncoderPass {
    pub features: Vec<f64>,
    pub tap: Tap,
    pub(crate) cache: Box<dyn Any + Send + Sync>,
}

/// Serializable parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub arch: String,
    pub feature_dim: usize,
    pub groups: Vec<Vec<f64>>,
}

pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    fn feature_dim(&self) -> usize {
        self.spec().feature_dim
    }

    fn forward(&self, input: &ModelInput) -> Result<EncoderPass>;

    /// Accumulates parameter gradients (aligned with [`Encoder::params`]) given the
    /// gradient of the loss with respect to the pooled features.
    fn backward(&self, pass: &EncoderPass, grad_features: &[f64], grads: &mut [Vec<f64>]);

    /// Gradient with respect to the tap activations, same layout as [`Tap::values`].
    fn tap_gradient(&self, _pass: &EncoderPass, _grad_features: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported(format!(
            "encoder `{}` exposes no feature tap",
            self.spec().name
        )))
    }

    fn params(&self) -> &[Vec<f64>];

    fn params_mut(&mut self) -> &mut [Vec<f64>];

    fn reinitialize(&mut self, _seed: u64) -> Result<()> {
        Err(Error::Unsupported(format!(
            "encoder `{}` cannot be re-initialized",
            self.spec().name
        )))
    }

    fn export_weights(&self) -> EncoderWeights;

    fn boxed_clone(&self) -> Box<dyn Encoder>;

    /// Pooled features only.
    fn features(&self, input: &ModelInput) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.features)
    }

    /// Content hash of the parameters; equal fingerprints mean identical features.
    fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.spec().name.as_bytes());
        for g in self.params() {
            for v in g {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        crate::util::fnv1a(&bytes)
    }
}

impl Clone for Box<dyn Encoder> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Linear probing: encoder frozen, head trained.
    #[serde(rename = "LP")]
    Lp,
    /// Fine-tuning from pretrained weights.
    #[serde(rename = "FT")]
    Ft,
    /// Random initialization, everything trained.
    #[serde(rename = "RI")]
    Ri,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Lp => "LP",
            Condition::Ft => "FT",
            Condition::Ri => "RI",
        }
    }

    pub fn encoder_trainable(self) -> bool {
        !matches!(self, Condition::Lp)
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LP" => Ok(Condition::Lp),
            "FT" => Ok(Condition::Ft),
            "RI" => Ok(Condition::Ri),
            other => Err(Error::InvalidArgument(format!("unknown condition `{other}`"))),
        }
    }
}

pub const LP_LEARNING_RATE: f64 = 1e-3;
pub const VIT_LEARNING_RATE: f64 = 1e-5;
pub const CNN_LEARNING_RATE: f64 = 1e-4;
pub const PATCH_LIMITS: [usize; 4] = [10, 25, 100, 500];

/// Fixed learning rate for a (condition, family) pair. Random init reuses the
/// family's fine-tuning rate.
pub fn learning_rate(condition: Condition, family: Family) -> f64 {
    match (condition, family) {
        (Condition::Lp, _) => LP_LEARNING_RATE,
        (_, Family::VitClass) => VIT_LEARNING_RATE,
        (_, Family::CnnClass) => CNN_LEARNING_RATE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderSpec,
    pub condition: Condition,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub patch_limit: usize,
    pub seed: u64,
    pub augment: bool,
}

impl RunConfig {
    pub fn with_patch_limit(mut self, limit: usize) -> Self {
        self.patch_limit = limit;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_augment(mut self, augment: bool) -> Self {
        self.augment = augment;
        self
    }

    pub fn model_id(&self) -> String {
        format!("{}({})", self.encoder.name, self.condition)
    }
}

/// Training configuration for an encoder under a condition, with the fixed
/// hyperparameters (batch 50, 30 epochs, patience 5).
pub fn build_condition(encoder: &EncoderSpec, kind: Condition) -> Result<RunConfig> {
    encoder.validate()?;
    if kind == Condition::Ri && !encoder.reinitializable {
        return Err(Error::Unsupported(format!(
            "encoder `{}` cannot be randomly initialized",
            encoder.name
        )));
    }
    Ok(RunConfig {
        encoder: encoder.clone(),
        condition: kind,
        learning_rate: learning_rate(kind, encoder.family),
        batch_size: 50,
        max_epochs: 30,
        patience: 5,
        patch_limit: 500,
        seed: 0,
        augment: true,
    })
}

/// Encoder plus head: the full patch classifier.
#[derive(Clone)]
pub struct Classifier {
    pub encoder: Box<dyn Encoder>,
    pub head: Head,
}

impl Classifier {
    pub fn new(encoder: Box<dyn Encoder>, head: Head) -> Result<Self> {
        if head.feature_dim() != encoder.feature_dim() {
            return Err(Error::ShapeMismatch {
                expected: encoder.feature_dim(),
                actual: head.feature_dim(),
            });
        }
        Ok(Classifier { encoder, head })
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let f = self.encoder.features(input)?;
        Ok(self.head.forward(&f))
    }

    /// Probabilities and pooled features.
    pub fn predict_with_features(&self, input: &ModelInput) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.encoder.features(input)?;
        Ok((self.head.forward(&f), f))
    }
}
