//! Desk-scale language-conditioned visuomotor policy with task-focused
//! attention, trained and evaluated entirely inside a synthetic 2-d
//! manipulation simulator.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`] — dense f64 tensors, a tape-based autodiff graph, layers, Adam;
//! - [`sim`] — the simulator: kinematics, world dynamics, rendering,
//!   scripted experts and disturbances;
//! - [`corpus`] — command grammar, tokenisation and dataset generation;
//! - [`text`] — the recurrent sentence encoder;
//! - [`teacher`] — the task-focused attention teacher trained by word-set
//!   reconstruction;
//! - [`vision`] — the conditional VAE-GAN vision network;
//! - [`motor`] — the recurrent mixture-density motor network;
//! - [`trainer`] — joint and baseline training loops plus checkpoints;
//! - [`eval`] — closed-loop evaluation suites and reports.

pub mod corpus;
pub mod eval;
pub mod motor;
pub mod nn;
pub mod sim;
pub mod teacher;
pub mod text;
pub mod trainer;
pub mod vision;

pub use nn::Tensor;
