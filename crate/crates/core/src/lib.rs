//! Detection, measurement and removal of conflicting training bundles in
//! block-structured feed-forward networks.
//!
//! Two samples are *bundled* at a layer when the layer's outputs for them are
//! so close that, once scaled by `learning_rate / batch_size` during
//! backpropagation, the difference falls below the floating-point resolution
//! of that layer's weights. A bundle holding samples of different classes is
//! *conflicting*; its size-weighted label entropy is the bundle entropy.

pub mod bundle;
pub mod cba;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod lesion;
pub mod math;
pub mod nn;

pub use error::{Error, Result};
