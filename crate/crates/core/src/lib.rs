//! Illicit-account detection on directed multigraphs with edge attributes.
//!
//! The pipeline: [`ingest`] or [`synth`] produce a [`graph::Multigraph`] and
//! labels; [`seqgen`] turns every node's incoming and outgoing edges into
//! chronological attribute sequences; [`model`] encodes those with two GRUs,
//! stacks discrepancy-aware message-passing layers over sampled
//! neighborhoods ([`sampler`]) and classifies; [`train`] runs mini-batch Adam
//! with validation-F1 checkpoint selection; [`metrics`] scores predictions.
//! All differentiation goes through the small reverse-mode tape in [`tensor`].

pub mod alloc;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod seqgen;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Direction, EdgeRecord, LabelSet, Multigraph, NodeId};
