pub mod error;
pub mod exec;
pub mod linalg;
pub mod spin_algebra;
pub mod states;
pub mod covariance;
pub mod hamiltonian;
pub mod factorization;
pub mod diagonalize;
pub mod models;
