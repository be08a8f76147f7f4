//! Quasi-periodic breathers in Hamiltonian lattices of coupled pendula.
//!
//! The crate computes whiskered invariant tori of a symplectic lattice map by
//! a Newton scheme in spaces of decaying operators, and couples localized
//! tori into multi-breathers.

pub mod cohomology;
pub mod coupling;
pub mod decay_spaces;
pub mod embedding;
pub mod error;
pub mod fourier;
pub mod harness;
pub mod kam_step;
pub mod lattice_model;
pub mod pointwise;
pub mod scalar;
pub mod splitting;

pub use error::{Error, Result};
pub use scalar::Real;

pub type DecayFunctionF64 = decay_spaces::DecayFunction<f64>;
pub type DecayOperatorF64 = decay_spaces::DecayOperator<f64>;
pub type TorusEmbeddingF64 = embedding::TorusEmbedding<f64>;
pub type ModelConfigF64 = lattice_model::ModelConfig<f64>;
pub type ModelConfigF32 = lattice_model::ModelConfig<f32>;
