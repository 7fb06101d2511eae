//! Physics-informed network solver for the density evolution equation of
//! stochastic structural responses, with closed-form benchmark oracles.

pub mod autodiff;
pub mod cli;
pub mod marginal;
pub mod net;
pub mod problems;
pub mod sampling;
pub mod training;
