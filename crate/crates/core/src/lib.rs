pub mod encoder;
pub mod error;
pub mod features;
pub mod gradsuite;
pub mod lm;
pub mod losses;
pub mod numerics;
pub mod pipeline;
pub mod pseudotts;

pub use error::{Error, Result};
