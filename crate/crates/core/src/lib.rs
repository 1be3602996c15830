//! Joint citation retrieval and generation for academic drafting.
//!
//! A small decoder-only language model whose vocabulary carries a retrieval
//! token; the hidden state at that token is the citation query, and the same
//! weights embed the candidate references.

pub mod nn;

pub mod corpus;
pub mod model;
pub mod trainer;

pub mod evalkit;
pub mod index;
pub mod orchestrator;
