//! Chunk-wise, action-conditioned video diffusion on a procedural 2D world.
//!
//! The crate is organised bottom-up:
//!
//! * [`worldsim`] renders a labeled "game" domain, an unlabeled "real" domain and a
//!   generic-motion corpus, and writes datasets to disk.
//! * [`model`] is the chunk-wise diffusion transformer with three action-injection
//!   strategies and hand-written backpropagation.
//! * [`diffusion`] holds the noise schedule, the training objective with
//!   condition-noise augmentation, DDIM sampling and guidance.
//! * [`trainer`] runs the two training stages and owns run directories.
//! * [`rollout`] is the interactive engine: sessions that turn one action into one chunk.
//! * [`evaluation`] judges generations from pixels and drives every experiment.

pub mod action;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rollout;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod worldsim;

pub use action::ActionCommand;
pub use error::{Error, Result};
pub use model::{DenoiserConfig, DenoiserParameters, InjectionStrategy};
pub use worldsim::{Chunk, Domain, EntityKind, EpisodeRecord, Frame, WorldConfig};
