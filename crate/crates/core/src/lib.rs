//! Unsupervised learning of image transformations through a transformation
//! space shared by a style-modulated generator and a projecting discriminator.

pub mod codes;
pub mod data;
pub mod color;
pub mod error;
pub mod image;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rerender;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
