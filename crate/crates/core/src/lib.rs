//! Dynamic hedging of European and Lookback calls under proportional
//! transaction costs.
//!
//! The crate contains everything needed to run a hedging experiment end to end:
//!
//! - [`market_paths`]: GBM path simulation and per-step policy features.
//! - [`orderbook`]: order-book snapshot parsing and the weighted average price.
//! - [`instruments`]: payoffs and the Black-Scholes delta anchor.
//! - [`neural_net`]: a small MLP with per-sample gradients and Adam.
//! - [`hedging`]: policy rollouts, the anchor band and self-financed PNL.
//! - [`trainer`]: nested training on a linearized objective plus a plain
//!   backprop baseline.
//! - [`risk`]: entropic risk, certainty equivalent, Entropic Loss and
//!   Expected Shortfall.

// `!(x > 0.0)` is the NaN-rejecting form used by every validator.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hedging;
pub mod instruments;
pub mod market_paths;
pub mod neural_net;
pub mod orderbook;
pub mod risk;
pub mod trainer;

pub use error::{HedgeError, Result};
