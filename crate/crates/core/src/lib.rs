//! Simulation and exact-computation toolkit for random interlacements and
//! first-passage percolation geometry on transient lattices.

pub mod bracket;
pub mod error;
pub mod fpp;
pub mod graph;
pub mod interlacements;
pub mod linalg;
pub mod potential;
pub mod rng;
pub mod site;
pub mod unionfind;
pub mod walk;
