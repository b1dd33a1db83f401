//! Cubature Kalman filtering with GRU-learned filter statistics.

pub mod ckf;
pub mod eval;
pub mod filter;
pub mod linalg;
pub mod neural;
pub mod persist;
pub mod ssm;
pub mod training;
