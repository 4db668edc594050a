//! Convolutional orderless NADE for four-voice counterpoint.
//!
//! The crate is organised bottom-up:
//!
//! * [`pianoroll`] holds the score representation, dataset ingestion, masks and MIDI export.
//! * [`ndtensor`] is a small dense-tensor core with hand-written forward and backward passes
//!   for exactly the operators the network uses.
//! * [`model`] assembles the residual convolution stack and exposes the per-cell conditionals.
//! * [`training`] implements masked orderless training with Adam.
//! * [`sampling`] contains ancestral sampling and the two blocked Gibbs samplers.
//! * [`evaluation`] computes framewise negative log-likelihoods over ordering ensembles.
//! * [`selftest`] bundles quick oracle checks used by the command line tool.

pub mod evaluation;
pub mod model;
pub mod ndtensor;
pub mod pianoroll;
pub mod sampling;
pub mod selftest;
pub mod training;

pub mod rng;

pub use evaluation::{corpus_nll, framewise_nll, sample_nll, EvalConfig, EvalReport, OrderingMode};
pub use model::{ConditionalModel, Distributions, Model, ModelConfig, ModelParameters};
pub use ndtensor::{Real, Tensor};
pub use pianoroll::{ContextMask, Dataset, Pianoroll, Resolution};
pub use sampling::{AnnealSchedule, SamplerRun, Strategy};
pub use training::{TrainConfig, TrainOutcome};
