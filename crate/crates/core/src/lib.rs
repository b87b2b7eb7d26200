//! Skill-aware two-stage job recommendation.
//!
//! The recall stage encodes a job description together with a few similar
//! jobs through a convolutional item encoder and a transformer with
//! job-local and global attention heads, and predicts the skill
//! distribution of the person holding the job. The rank stage scores a
//! candidate job against a user's skill distribution for click prediction.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod item_encoder;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod rank;
pub mod recall;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod types;
pub mod vocab;

pub use error::{Error, Result};
