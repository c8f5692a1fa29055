//! Graph Embodiment Transformer core.
//!
//! Everything in this crate is pure computation over `alloc` collections so it
//! builds without the standard library. File formats, the command line and the
//! evaluation harness live in the `getzero` companion crate.
//!
//! Module map:
//!
//! * [`graph`] embodiment graphs, distance maps, DFS linearization and
//!   procedural hand enumeration.
//! * [`numerics`] dense tensors, a reverse-mode tape, Adam and the checkpoint
//!   codec.
//! * [`tokenizer`] per-joint token assembly and padded batching.
//! * [`model`] the graph-biased transformer encoder with policy and
//!   self-model heads.
//! * [`bench`] planar multi-chain tracking task, FK oracle, damped
//!   least-squares experts, closed-loop harness and demo generation.
//! * [`trainer`] behavior-cloning loop and the ablation grid.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod bench;
pub mod graph;
mod math;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod trainer;

pub use graph::{DistanceMaps, EmbodimentGraph, GraphError, GraphSpec, JointSpec};
pub use model::{GetConfig, GetModel, PeVariant};
pub use numerics::{ParamStore, Tensor};
