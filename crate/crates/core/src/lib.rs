//! Deterministic simulator for parallel diffusion-transformer inference.
//!
//! The crate runs a tiny DiT end to end on a simulated device mesh under a
//! range of parallel strategies, checks each against a serial reference,
//! and ranks hybrid configurations with an analytical cost model.
//!
//! ```
//! use ditsim::model::{BlockTopology, Conditioning, ConditioningMode, DiTSpec, DiffusionSpec, Weights, serial_diffusion};
//! use ditsim::rng::SeededRng;
//!
//! let spec = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear);
//! let sched = DiffusionSpec::linear(2);
//! let mut rng = SeededRng::new(0);
//! let weights = Weights::init(&spec, &mut rng);
//! let x = rng.normal_tensor(&[spec.image_tokens, spec.latent_channels]);
//! let cond = Conditioning::random(&spec, &mut rng);
//! let trace = serial_diffusion(&spec, &sched, &weights, &x, &cond).unwrap();
//! assert_eq!(trace.len(), 3);
//! ```

pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod flops;
pub mod io;
pub mod model;
pub mod rng;
pub mod simnet;
pub mod strategies;
pub mod tensor;
pub mod vae;
pub mod verify;

pub use error::{Error, Result};
