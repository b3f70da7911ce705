//! Moving-object segmentation from RGB frames and optical flow.

pub mod annotation;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod gradcheck;
pub mod network;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use motseg_autograd as autograd;
