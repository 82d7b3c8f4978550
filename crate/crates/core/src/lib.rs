//! Adaptive multi-scale spatial-frequency fusion network for N-way K-shot
//! episodic image classification.
//!
//! The pipeline runs a Haar wavelet front-end with learned directional and
//! scale gates ([`amff`]), a compact transformer encoder over separate spatial
//! and frequency token streams ([`backbone`]) with a cross-domain attention
//! fusion block ([`acasff`]), and a ridge-reconstruction episodic classifier
//! ([`similarity`]). [`episodes`], [`datasets`] and [`harness`] provide the
//! subject-disjoint protocol, synthetic data, and the training/evaluation
//! loop.

// Range checks are written as negated comparisons so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acasff;
pub mod amff;
pub mod autograd;
pub mod backbone;
pub mod datasets;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod similarity;
pub mod wavelet;

pub use error::{Error, Result};
