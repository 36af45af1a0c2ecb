//! Body-area network protocol stack.
//!
//! Frame codec, MAC engine with stop-and-wait ARQ, a bit-error channel,
//! a star-topology discrete-event simulator, closed-form FER/PER analytics
//! and a one-dimensional barrier optimizer for payload length.
//!
//! Numeric models are generic over the scalar type; the aliases below fix the
//! common choices.

pub mod analytics;
pub mod channel;
pub mod frame;
pub mod mac;
pub mod optimizer;
mod scalar;
pub mod sim;

pub use scalar::{Real, Scalar};

use num_rational::BigRational;

/// Retry model over `f64`.
pub type RetryModel = analytics::RetryModelParams<f64>;
/// Retry model in exact rational arithmetic.
pub type ExactRetryModel = analytics::RetryModelParams<BigRational>;
/// Payload model over `f64`.
pub type PayloadModel = analytics::PayloadModelParams<f64>;

/// Barrier iterate over `f64`.
pub type Barrier = optimizer::BarrierState<f64>;
/// Optimizer result over `f64`.
pub type PayloadReport = optimizer::OptimizeReport<f64>;
