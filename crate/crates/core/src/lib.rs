//! Bidirectional selective state space models for spoken keyword spotting.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`]: a minimal dense f32 array with reverse-mode differentiation;
//! - [`ssm`]: the selective scan recurrence, its discretization, and the
//!   convolution-kernel form it must agree with;
//! - [`bimamba`]: the bidirectional Mamba block (paired forward/backward
//!   Conv1d + scan branches behind shared projections);
//! - [`model`]: the keyword-spotting encoder (MFCC patching, mid-sequence
//!   class token, positional embedding, block stack, linear head);
//! - [`features`] / [`augment`] / [`data`]: the audio front end, training-time
//!   augmentation, and Speech-Commands-style dataset handling;
//! - [`train`]: AdamW with warmup + cosine schedule, evaluation, ablation
//!   sweeps, and checkpointing.

pub mod augment;
pub mod bimamba;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use augment::AugmentConfig;
pub use bimamba::{make_block, BiMambaBlock, DirectionalityMode};
pub use data::{Batch, BatchSource, InMemoryData, LabelTask, Manifest, SpeechCommandsData, Split};
pub use error::{Error, Result};
pub use features::{load_wav, mfcc, MfccMatrix, Waveform};
pub use model::{count_params, ClassTokenPos, KwmModel, ModelConfig, Variant};
pub use ssm::{
    discretize, discretize_zoh, selective_scan_bidirectional, selective_scan_seq, ssm_kernel_conv,
    DiscretizedParams, SelectiveInputs, SsmParams,
};
pub use tensor::{concat_seq, cross_entropy_label_smoothed, no_grad, Parameter, Tensor};
pub use config::FileConfig;
pub use train::{
    ablate, evaluate, lr_schedule, train, train_runs, AblationAxis, AdamW, Classifier, RunReport,
    TrainConfig,
};
