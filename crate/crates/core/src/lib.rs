//! Boundary-integral effective tensors and corrector rates for periodically
//! perforated media with insulating holes.

pub mod cell;
pub mod cli;
pub mod error;
pub mod fit;
pub mod full;
pub mod geometry;
pub mod green;
pub mod layer;
pub mod linalg;
pub mod plot;
pub mod poly;
pub mod special;
pub mod tensor;
pub mod trig;
pub mod volume;

pub use error::{Error, Result};
