//! Locally controllable compositional radiance fields for semantic face
//! generation and editing.
//!
//! A scene is split into K semantic regions. Each region has its own
//! geometry and texture generator conditioned on per-region style vectors
//! ([`LatentBank`]); the fields are fused with a per-point softmax and
//! volume-rendered into an image and a semantic mask.

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod field_generators;
pub mod fusion;
pub mod inversion_editing;
pub mod io;
pub mod optim;
pub mod params;
pub mod training;
pub mod volume_renderer;

pub use config::{ModelConfig, RenderConfig, TrainConfig};
pub use error::{Error, Result};
pub use field_generators::{LatentBank, LatentVars};
pub use fusion::RadianceField;
pub use params::{Binding, ParamStore};
pub use volume_renderer::{Camera, RenderResult};
