//! Fingerprint presentation-attack detection with a global classifier, a
//! CAM-guided local patch classifier and score-level fusion.

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod rethinking;
pub mod scoring;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
