//! Text-and-scene-conditional human motion generation on a procedural
//! synthetic world: open-vocabulary feature distillation into a point-cloud
//! encoder, conditional VAE motion synthesis with goal-object regularizers,
//! and the full evaluation/ablation protocol — all on CPU, deterministic
//! per seed.

pub mod autodiff;
pub mod body;
pub mod config;
pub mod geometry;
pub mod io;
pub mod model;
pub mod text;
pub mod train;
pub mod world;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
