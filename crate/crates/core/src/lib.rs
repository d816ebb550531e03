//! Bulk-surface Allen-Cahn system with a Robin coupling.
//!
//! The crate integrates the gradient flow
//!
//! ```text
//! ∂_t u - Δu + f(u) = 0                   in Ω
//! K ∂_ν u + u = h(φ)                      on Γ
//! ∂_t φ - Δ_Γ φ + f_Γ(φ) + h'(φ) ∂_ν u = 0  on Γ
//! ```
//!
//! on a disk or an interval, solves the stationary problem, computes the
//! eigenstructure behind the coercivity constant, and measures convergence
//! rates of trajectories toward equilibrium.

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod linalg;
pub mod mesh;
pub mod nonlinearity;
pub mod operators;
pub mod steady_spectral;

pub use energy::{
    compute_energy, compute_gradient, energy_identity_residual, EnergyReport, FieldPair,
};
pub use error::{Error, Result};
pub use mesh::{Geometry, Mesh};
pub use nonlinearity::{Coupling, NonlinearitySpec, Potential};
pub use operators::{DiscreteOperator, DualVector};
