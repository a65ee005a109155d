//! Polynomial neural networks built from factorized high-order expansions,
//! with exact oracles that check the recursive forms against their explicit
//! polynomials.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod graph;
pub mod oracle;
pub mod polynet;
pub mod rng;
pub mod spec_doc;
pub mod tensor;
pub mod train;
