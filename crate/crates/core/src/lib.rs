//! Behavior cloning with an eigenvalue stability penalty on the linearized
//! closed-loop error dynamics.

pub mod autodiff;
pub mod datagen;
pub mod envs;
pub mod eval;
pub mod linalg;
pub mod policy;
pub mod stability;
pub mod trainer;
