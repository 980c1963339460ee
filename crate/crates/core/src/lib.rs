//! Tabular offline-RL workbench for state-aware proximal pessimism.
//!
//! Everything here is exact and dense: MDPs are small enough that fixed
//! points are computed by LU factorization and policy classes can often be
//! enumerated outright.

pub mod bounds;
pub mod data;
pub mod dice;
pub mod envs;
pub mod experiment;
pub mod error;
pub mod mdp;
pub mod pessimism;
pub mod sacql;
pub mod search;
pub mod seeding;

pub use error::{Error, Result};
pub use mdp::{PolicyTable, TabularMdp, ValueSolution};
