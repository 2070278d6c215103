//! Purification of time-evolving graphs.
//!
//! A time-evolving graph accumulates nodes and edges over discrete time
//! steps; some of the arriving edges are noise. This crate scores each
//! step's incoming edges with an ensemble of three signals and removes
//! the lowest-scoring ones:
//!
//! * a long-term scorer that fuses each node's embedding history through
//!   single-head self-attention and rates endpoint pairs with a symmetric
//!   bilinear form,
//! * a short-term scorer that measures how statistically consistent a
//!   candidate neighbor's class distribution is with a node's existing
//!   neighborhood (KL divergence + Z-scores),
//! * an Adamic-Adar proximity score that anchors the ensemble while the
//!   learned modules are still cold.
//!
//! Training is self-supervised: present edges are positive pseudo-labels,
//! sampled non-edges are negatives, and the lowest-scoring positives are
//! filtered out before the loss so suspected noise does not teach the
//! model to like noise.
//!
//! The crate is `no_std`-compatible (with `alloc`); everything that talks
//! to the filesystem lives in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod benchmark;
pub mod ensemble;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod longterm;
mod mathx;
pub mod optim;
pub mod pipeline;
pub mod proximity;
pub mod seed;
pub mod shortterm;
pub mod tensor;
pub mod trainer;

pub use error::Error;
pub use tensor::Tensor;
