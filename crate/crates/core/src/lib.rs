//! Motion-based user identification for tracked headset + controller data.
//!
//! The pipeline runs from raw tracking logs ([`motion_io`]) through
//! body-relative-velocity preprocessing ([`kinematics`]) into a
//! transformer + GRU sequence model ([`model`]) built on a small
//! reverse-mode autodiff engine ([`autodiff`]). Models are trained either
//! as embedding (similarity) or classification networks ([`training`]),
//! queried through nearest-reference voting ([`identification`]) and scored
//! with the cross-application protocol in [`evaluation`]. [`stats`] holds
//! the descriptive dataset analyses.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod identification;
pub mod kinematics;
pub mod model;
pub mod stats;
pub mod training;
pub mod motion_io;
pub mod pipeline;
mod util;

pub use error::{Error, Result};
