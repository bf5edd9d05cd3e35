//! Multiway online correlated selection (OCS): win-distribution construction,
//! the coupling-based tournament selector, competitive-ratio calculus and a
//! primal-dual algorithm for edge-weighted online bipartite matching with
//! free disposal.

pub mod error;
pub mod harness;
pub mod lp;
pub mod matching;
pub mod ocs;
pub mod quadrature;
pub mod ratios;
pub mod stats;
pub mod trials;
pub mod win_distribution;

pub use error::{Error, Result};
