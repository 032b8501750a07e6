//! Deep Q-learning localization of objects in 3D scalar volumes.
//!
//! An agent starts from a coarse bounding box and repeatedly applies one of
//! eleven box deformations (translations, symmetric scaling, per-axis
//! reshaping) to home in on a target structure. A small fully-connected
//! Q-network scores the actions from a stack of the four most recent
//! fixed-resolution crops of the volume; training uses experience replay, a
//! periodically synced target network, and reward-guided exploration.
//!
//! The crate ships the full pipeline: synthetic phantom generation with
//! ground-truth boxes, the environment/action algebra, the hand-rolled
//! network and Adam optimizer, the training loop, the evaluator with
//! oscillation-based stopping, and a CLI that ties it together. Everything
//! is deterministic given a seed.

pub mod config;
pub mod env;
pub mod eval;
pub mod geometry;
pub mod phantom;
pub mod qnet;
pub mod replay;
pub mod trainer;
pub mod rng;
pub mod volume;
