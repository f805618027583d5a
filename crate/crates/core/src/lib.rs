//! Safe multi-source policy transfer on a point-mass environment.
//!
//! A set of frozen source policies and a trainable auxiliary network are
//! blended by a state-conditioned attention matrix; a risk critic screens
//! every proposed action and can hand control to a decelerating backup
//! controller. Training uses a clipped-surrogate policy gradient with GAE.

pub mod aggregate;
pub mod error;
pub mod kv;
pub mod nn;
pub mod policy;
pub mod safeguard;
pub mod simenv;
pub mod trainer;

pub use aggregate::{Aggregator, WeightingStrategy};
pub use error::{Error, Result};
pub use kv::KvMap;
pub use policy::{Policy, SourcePool};
pub use safeguard::{BackupPolicy, SafeguardConfig, SafeguardRule};
pub use simenv::{Action, EnvParams, State};
pub use trainer::{RunOutput, TrainConfig, Trainer};

/// Default hinge width of the shaped safety cost.
pub const DEFAULT_ALPHA: f64 = 0.5;
