//! Attention diversification for domain generalization.
//!
//! The crate is organised bottom-up:
//!
//! * [`attention_ops`] – spatial softmax and the cross-channel / cross-model
//!   reductions, each with an analytic backward pass.
//! * [`intra_adr`] – the spatial-channel expanding block and the intra-model
//!   attention loss attached to the last backbone block.
//! * [`inter_adr`] – simulate / divide / assemble across domain-specific
//!   models and the two distance losses for the aggregated model.
//! * [`backbone`] – a small plain CNN with per-block feature taps.
//! * [`datagen`] – a deterministic synthetic multi-domain benchmark with a
//!   planted, domain-dependent shortcut cue.
//! * [`trainer`] – the two-stage training schema.
//! * [`evalviz`] – leave-one-domain-out evaluation, attention heatmaps and
//!   the attention-bias report.

pub mod attention_ops;
pub mod backbone;
pub mod checkpoint;
pub mod datagen;
mod error;
pub mod evalviz;
pub mod inter_adr;
pub mod intra_adr;
pub mod nn;
pub mod par;
mod real;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
