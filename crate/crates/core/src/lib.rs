//! Self-supervised writer identification on damaged handwriting.
//!
//! The pipeline has four stages: a spectral-energy pre-filter that strips
//! smooth damage from pages, momentum contrastive pre-training of a small patch
//! transformer with adaptive patch reweighting, few-shot calibration of a linear
//! writer head, and evaluation under defect and forgery conditions.

pub mod autograd;
pub mod calibrate;
pub mod checkpoint;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod matching;
pub mod optim;
pub mod params;
pub mod patches;
pub mod prefilter;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
