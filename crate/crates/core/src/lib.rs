//! Multimodal MRI feature pipeline for thalamic nuclei segmentation.

pub mod dti;
pub mod eig;
pub mod error;
pub mod harmonize;
pub mod knutsson;
pub mod labels;
pub mod metrics;
pub mod nifti;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod qmri;
pub mod stack;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use volume::{Intent, Volume};
