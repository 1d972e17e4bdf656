//! Reduced-order multiscale elastoplastic finite elements.
//!
//! The toolkit couples a macroscale Newton solver accelerated by rigid-body
//! cluster deflation (IDCG) with a cluster-based microscale reduced-order
//! model, tied together through first-order computational homogenization.
//! A descriptor-driven generator produces periodic porous RVEs for the
//! microscale.

pub mod clustering;
pub mod deflation;
pub mod delaunay;
pub mod fem;
pub mod homogenize;
pub mod material;
pub mod mcr;
pub mod mesh;
pub mod multiscale;
pub mod rom;
pub mod sobol;
pub mod sparse;
pub mod vtk;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failed to converge: {0}")]
    Convergence(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("field length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
