//! Text-guided medical image segmentation with a progressive pyramid encoder
//! pretrained by image–caption Siamese learning.
//!
//! Pipeline: [`text_encoder`] and [`ppe`] build single-scale multimodal
//! features, [`msff`] cross-pollinates scales, [`upattention`] decodes a
//! mask. [`pretrain`] trains the encoder beforehand without masks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod msff;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ppe;
pub mod pretrain;
pub mod synthetic;
pub mod text_encoder;
pub mod train;
pub mod unfold;
pub mod upattention;

pub use error::{Error, Result};
pub use exec::Exec;
