//! Mask attention networks.
//!
//! Self-attention and the position-wise feed-forward network are both
//! instances of one masked attention function whose mask is all-ones or the
//! identity. This crate implements that function on top of a small
//! reverse-mode autodiff tape, adds static banded and learned dynamic
//! locality masks, assembles encoder-decoder models from configurable
//! sublayer orderings, and ships the training and attention-locality
//! analysis harness used to compare them.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the default `f64` instantiation.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod mask;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::{
    cross_attention_forward, man_core_forward, man_layer_forward, Activation, ManLayerConfig, ManWeights,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use mask::{build_mask, BandWidth, DynamicMaskParams, MaskKind};
pub use model::{BlockOrdering, ModelConfig, Seq2SeqModel, SublayerKind, BOS, EOS};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{GradTape, Var};
pub use tensor::Tensor;
pub use train::{SyntheticTask, TaskKind, TrainConfig, TrainingReport};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type GradTape64 = GradTape<f64>;
pub type Model64 = Seq2SeqModel<f64>;
pub type Model32 = Seq2SeqModel<f32>;
