//! Diffusion-state policy optimization for masked-diffusion sequence policies.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithmic piece of
//! the laboratory:
//!
//! * [`seq`]: token sequences, diffusion states, actions and `fill`.
//! * [`policy`]: a small featurized conditional policy with exact gradients.
//! * [`rollout`]: confidence-ordered multi-step denoising with cached logits
//!   and same-state branching.
//! * [`surrogate`]: one-step masked-token surrogate log-probabilities.
//! * [`objective`]: group advantages, clipped ratio losses, KL, samplers.
//! * [`tasks`]: Sudoku, Countdown and string-match rewards and generators.
//! * [`trainer`]: the outer training loop, optimizer and operation counters.
//! * [`verify`]: enumeration and Monte Carlo oracles for the estimator
//!   identities and variance claims.
//!
//! File formats, configuration loading and the command line live in the
//! `dispo-lab` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod meter;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod seq;
pub mod stats;
pub mod surrogate;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use policy::{Architecture, FeatureSpec, Gradient, LogitsGrid, PolicyParams};
pub use seq::{Action, DiffusionState, MaskedSequence, Token, Vocab};
