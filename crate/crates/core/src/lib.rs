//! Zero-shot classification with synthesized features and graph-generated
//! classifiers.
//!
//! A conditional WGAN-GP with a cycle-consistency decoder ([`genfeat`])
//! synthesizes features for classes that have no training samples. A
//! graph-convolutional network over a knowledge graph of classes and objects
//! ([`gcnattn`], [`kgraph`]) then produces one linear classifier per class,
//! trained on real seen and synthesized unseen features. Everything runs on
//! a small define-by-run autodiff engine ([`autodiff`]) that can
//! differentiate through its own gradients.

pub mod array;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod eval;
pub mod gcnattn;
pub mod genfeat;
pub mod io;
pub mod kgraph;
pub mod nn;
pub mod pipeline;
pub mod rng;
