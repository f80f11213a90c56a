//! Constraint-aware channel-width mutation and closed-loop architecture search.

pub mod engine;
pub mod evaluator;
pub mod graph;
pub mod ir;
pub mod mutator;
pub mod netdsl;
pub mod orchestrator;
pub mod proposer;
pub mod repository;
pub mod seeds;
pub mod stats;
pub mod verifier;
