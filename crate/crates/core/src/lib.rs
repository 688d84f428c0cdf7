//! Adaptive model hierarchies with certified acceptance.
//!
//! A [`Hierarchy`] holds models ordered from cheapest to most accurate.
//! Each request is answered by the cheapest model whose error estimate
//! meets the tolerance; answers from expensive models are used to improve
//! the cheaper ones.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fom;
pub mod harness;
pub mod hierarchy;
pub mod linalg;
pub mod ml;
pub mod opt;
pub mod parabolic;
pub mod parameter;
pub mod rb;
pub mod results;
pub mod stats;

pub use error::{Error, Result};
pub use hierarchy::{
    Absorbed, Attempt, BoxedLevel, CertifiedAnswer, Estimate, Evaluation, Hierarchy, ModelLevel, QueryRecord,
    StreamLog,
};
pub use parameter::{ParameterDomain, ParameterStream, ParameterVector};
