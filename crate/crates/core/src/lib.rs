//! Deformable voxel-grid radiance fields for dynamic scenes, with
//! hand-written reverse-mode gradients throughout.

pub mod canonical;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod deform;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod grid;
pub mod image;
pub mod loss;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod real;
pub mod render;
pub mod scene;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use dataset::Dataset;
pub use encoding::PosEnc;
pub use error::{Error, Result};
pub use grid::{resolution_from_voxel_count, Aabb, DenseGrid};
pub use mlp::{Activation, Mlp, MlpSpec};
pub use model::Model;
pub use real::Real;
