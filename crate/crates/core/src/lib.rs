//! Multi-class traffic assignment toolkit: exact user-equilibrium and
//! system-optimal solvers, perturbed-scenario dataset generation, and a
//! multi-view heterogeneous graph attention surrogate model.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod model;
pub mod net;
pub mod scenario;
pub mod solver;
pub mod tntp;
pub mod train;
