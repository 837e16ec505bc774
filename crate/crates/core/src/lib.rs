//! Reflection-anchor policy optimization at desk scale.
//!
//! * [`dist`]: finite-distribution arithmetic (entropy, KL, exponential tilting).
//! * [`theory`]: exhaustive oracles for the masked-history information identities
//!   and gain lower bounds on tiny enumerable worlds.
//! * [`policy`]: a small causal-attention policy with hand-written backprop.
//! * [`env`]: the synthetic visual-needle task and group rollouts.
//! * [`train`]: anchor selection, chain masks, GRPO / RAPO objectives, training loop.
//! * [`diagnostics`]: contrastive-KL profiles, propagation, noise sensitivity and
//!   anchor concentration.

pub mod dist;
pub mod rng;
pub mod theory;
pub mod policy;
pub mod env;
pub mod train;
pub mod diagnostics;
