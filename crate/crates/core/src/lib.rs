//! Contrastive CT/report pre-training toolkit for renal mass imaging.
//!
//! The crate covers the whole desk-scale pipeline: volume preprocessing
//! ([`volume`]), toy encoders with analytic gradients ([`encoders`]), the
//! pre-training and fine-tuning losses ([`losses`]), training loops and
//! optimizer ([`train`]), zero-shot inference ([`zeroshot`]), cross-modal
//! retrieval ([`retrieval`]), survival statistics ([`survival`]),
//! classification metrics with bootstrap intervals ([`clfmetrics`]),
//! report-generation text metrics ([`textmetrics`]) and synthetic cohorts
//! with known ground truth ([`synth`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clfmetrics;
pub mod encoders;
pub mod losses;
pub mod error;
pub mod math;
pub mod rng;
pub mod retrieval;
pub mod survival;
pub mod synth;
pub mod textmetrics;
pub mod train;
pub mod volume;
pub mod zeroshot;

pub use error::{Error, Result};
