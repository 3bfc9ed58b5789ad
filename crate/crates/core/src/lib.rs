//! Time-series forecasting with sparse, readable derivative equations.
//!
//! A [`pblock::PBlock`] learns a sparse equation for the time derivative of
//! a target series in terms of learned derivative ratios and raw channels.
//! Blocks trained on differently resampled views combine into a
//! [`hybrid::HybridPde`], and a [`metactrl::MetaController`] picks the
//! ensemble configuration per forecast from the recent history.

pub mod diffop;
pub mod error;
pub mod experiment;
pub mod forecaster;
pub mod hybrid;
pub mod metactrl;
pub mod pblock;
pub mod persist;
pub mod render;
pub mod series;
pub mod sparsereg;
pub mod synth;

pub use error::{Error, Result};
pub use series::{Channel, ResamplePlan, TimeSeries};
