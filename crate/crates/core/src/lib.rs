//! Audio-visual target speaker extraction with parallel speech and noise
//! learning.
//!
//! The crate is organised bottom-up: [`autograd`] provides the differentiable
//! array operations, [`signal`] and [`metrics`] the data side, and the network
//! modules ([`encoders`], [`fusion`], [`psnl`], [`decoder`], [`multimodal`])
//! are assembled by [`network::build_network`].

pub mod autograd;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod multimodal;
pub mod network;
pub mod nn;
pub mod params;
pub mod psnl;
pub mod signal;

pub use config::{AttentionMode, MmVariant, NetworkConfig, Variant};
pub use error::{Error, Result};
pub use network::{build_network, Network};
