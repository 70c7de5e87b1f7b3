//! Invariant graph learning lab.
//!
//! A GIN encoder with an attention redundancy filter, trained with a
//! prediction loss plus semantic-level and instance-level contrastive
//! losses, together with a synthetic motif benchmark whose base graphs
//! carry covariate (size) or concept (type) shift.

pub mod cli;
pub mod contrast;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod model;
pub mod motif;
pub mod tensor;
pub mod trainer;
