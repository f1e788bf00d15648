//! Masked vision-language transformer for scene text recognition.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense f64 tensors with a tape-based reverse-mode
//!   autodiff graph; every forward op has an exact analytic backward.
//! * [`param`] / [`optim`] — named parameter store, AdamW with decoupled
//!   weight decay, cosine-warmup schedules, global-norm clipping.
//! * [`data`] — deterministic synthetic text-image generator plus the
//!   on-disk dataset layout (PGM images, `labels.tsv`, `manifest.json`).
//! * [`vision`] / [`text`] — patchification, mask planning, augmentation,
//!   label encoding and prediction decoding.
//! * [`model`] — the encoder/decoder network with its dual text-masking
//!   views and the iterative correction loop.
//! * [`objectives`] — pretraining, fine-tuning, and unlabeled losses.
//! * [`trainer`] — the two training stages, checkpointing, run logs.
//! * [`eval`] / [`gradcheck`] — evaluation protocol and the
//!   finite-difference gradient checker.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod param;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod vision;



pub use error::Error;


pub use param::{ParamId, ParameterStore};
pub use tensor::{NodeId, Tape, Tensor};



/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
