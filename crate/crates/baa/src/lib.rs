//! Self-contained localisation-and-adaptation testbed.
//!
//! The crate trains a convolutional embedding network that maps RGB frames of
//! a synthetic indoor world to per-patch descriptors, localises by matching
//! those descriptors against a short history buffer, and then adapts the
//! network to a visually shifted copy of the world with a pair of
//! discriminators trained under a balanced two-sided objective.
//!
//! Modules are layered bottom up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, the neural net layers
//!   and the optimiser. Everything above builds on this.
//! * [`geometry`]: poses, pinhole projection, point clouds, rigid alignment
//!   and trajectory error metrics. Double precision throughout.
//! * [`synthworld`]: procedural room generator, ray-cast renderer with
//!   swappable appearance styles, trajectory sampling and dataset export.
//! * [`embednet`]: the U-shaped embedding network, frame buffer,
//!   correspondence matrices, the matching loss and the pose solver.
//! * [`adversary`]: the two discriminators and the balanced adversarial
//!   losses, plus a discrete toy environment that exposes their optimum in
//!   closed form.
//! * [`trainer`]: configuration, training loops, evaluation, checkpoints.
//!
//! The `parallel` feature (on by default) routes bulk loops through rayon.
//! Results are bit-identical with the feature off; see [`par`].

pub mod adversary;
pub mod embednet;
pub mod geometry;
pub mod par;
pub mod synthworld;
pub mod tensor;
pub mod trainer;
