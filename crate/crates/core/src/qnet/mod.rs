//! Multimodal action-value network: convolutional image encoder over stacked
//! frames, recurrent instruction encoder, gated-attention or concatenation
//! fusion, and dueling heads. Forward and backward passes are hand-written in
//! f64.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod network;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, manifest, restore, save_checkpoint,
    ManifestEntry,
};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, TensorCheck};
pub use layers::{dueling_combine, gate_features, ConvGeom};
pub use loss::{
    huber, huber_grad, td_loss, td_loss_and_grad, td_loss_and_grad_cached, td_targets,
    TargetEncodings, TdOutput, TdSample,
};
pub use network::{
    backward, encode_image, encode_instruction, forward, forward_encoded, fuse_concat,
    fuse_gated_attention, ForwardTrace,
};
pub use params::{param_shapes, ParameterSet};
pub use tensor::{argmax, Tensor};

#[derive(Debug, Error)]
pub enum QNetError {
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("instruction has no tokens")]
    EmptyInstruction,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("gated-attention parameters are missing")]
    MissingGate,
    #[error("checkpoint checksum does not match its contents")]
    ChecksumMismatch,
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    GatedAttention,
    Concatenation,
}

impl Fusion {
    pub const ALL: [Fusion; 2] = [Fusion::GatedAttention, Fusion::Concatenation];

    pub fn short_name(self) -> &'static str {
        match self {
            Fusion::GatedAttention => "ga",
            Fusion::Concatenation => "cat",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Fusion {
    type Err = QNetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "ga" | "gatedattention" => Ok(Fusion::GatedAttention),
            "cat" | "concat" | "concatenation" => Ok(Fusion::Concatenation),
            _ => Err(QNetError::InvalidConfig(format!("unknown fusion `{s}`"))),
        }
    }
}

/// Layer sizes. Both convolutions are unpadded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub conv1_filters: usize,
    pub conv1_stride: usize,
    pub conv2_filters: usize,
    pub conv2_stride: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub instr_dim: usize,
    pub hidden: usize,
    pub n_actions: usize,
    pub fusion: Fusion,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::default_for(10, 10, Fusion::GatedAttention)
    }
}

impl NetworkConfig {
    pub fn default_for(grid_width: usize, grid_height: usize, fusion: Fusion) -> Self {
        Self {
            grid_width,
            grid_height,
            in_channels: crate::env::STACK_CHANNELS,
            kernel: 3,
            conv1_filters: 16,
            conv1_stride: 1,
            conv2_filters: 32,
            conv2_stride: 2,
            vocab_size: crate::language::VOCAB_SIZE,
            embed_dim: 32,
            instr_dim: 64,
            hidden: 128,
            n_actions: 4,
            fusion,
        }
    }

    /// A small network on a 7x7 grid, cheap enough for exhaustive gradient checks.
    pub fn tiny(fusion: Fusion) -> Self {
        Self {
            grid_width: 7,
            grid_height: 7,
            conv1_filters: 4,
            conv2_filters: 3,
            embed_dim: 5,
            instr_dim: 4,
            hidden: 6,
            ..Self::default_for(7, 7, fusion)
        }
    }

    pub fn conv_geoms(&self) -> (ConvGeom, ConvGeom) {
        let g1 = ConvGeom {
            in_h: self.grid_height,
            in_w: self.grid_width,
            in_c: self.in_channels,
            kernel: self.kernel,
            stride: self.conv1_stride,
            out_c: self.conv1_filters,
        };
        let g2 = ConvGeom {
            in_h: g1.out_h(),
            in_w: g1.out_w(),
            in_c: self.conv1_filters,
            kernel: self.kernel,
            stride: self.conv2_stride,
            out_c: self.conv2_filters,
        };
        (g1, g2)
    }

    /// `(height, width, channels)` of the image features.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (_, g2) = self.conv_geoms();
        (g2.out_h(), g2.out_w(), self.conv2_filters)
    }

    pub fn feature_len(&self) -> usize {
        let (h, w, c) = self.feature_shape();
        h * w * c
    }

    pub fn trunk_input_len(&self) -> usize {
        match self.fusion {
            Fusion::GatedAttention => self.feature_len(),
            Fusion::Concatenation => self.feature_len() + self.instr_dim,
        }
    }

    pub fn input_len(&self) -> usize {
        self.grid_height * self.grid_width * self.in_channels
    }

    pub fn validate(&self) -> Result<(), QNetError> {
        let positive = [
            self.in_channels,
            self.kernel,
            self.conv1_filters,
            self.conv1_stride,
            self.conv2_filters,
            self.conv2_stride,
            self.vocab_size,
            self.embed_dim,
            self.instr_dim,
            self.hidden,
            self.n_actions,
        ];
        if positive.contains(&0) {
            return Err(QNetError::InvalidConfig(
                "all layer sizes and strides must be positive".into(),
            ));
        }
        let k = self.kernel;
        if self.grid_width < k || self.grid_height < k {
            return Err(QNetError::InvalidConfig(format!(
                "grid smaller than the {k}x{k} kernel"
            )));
        }
        let (g1, _) = self.conv_geoms();
        if g1.out_h() < k || g1.out_w() < k {
            return Err(QNetError::InvalidConfig(
                "first convolution output smaller than the kernel".into(),
            ));
        }
        Ok(())
    }
}
