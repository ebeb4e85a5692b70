//! Convex `C^{1,1}_loc` extension of 1-jets.
//!
//! Given finitely many 1-jets (a point, a value, and a gradient each), this
//! crate decides whether some convex function with locally Lipschitz gradient
//! interpolates all of them, and if so evaluates one such extension anywhere.
//! The extension is the convex envelope of a minimum of per-jet paraboloid-like
//! pieces; evaluation goes through Fenchel conjugates and a dual maximization.
//!
//! On top of the core pipeline there are variants for essentially coercive
//! data (reduction along the span of gradient differences), for a prescribed
//! modulus of continuity of the gradient, for nonconvex extension by adding a
//! radial convexifier, and for reconstructing a hypersurface with prescribed
//! unit normals as a zero level set.

pub mod conditions;
pub mod envelope;
pub mod extend;
pub mod jets;
pub mod repro;
pub mod smoothing;
pub mod surface;

pub use jets::{Jet, JetSet, Modulus, Subspace};

use serde::{Deserialize, Serialize};

/// A certificate that a pair of jets admits no majorization constant: at the
/// point `x` the tangent plane of jet `z_index` exceeds every paraboloid
/// centered at jet `y_index`, no matter how large its curvature.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Witness {
    pub z_index: usize,
    pub y_index: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid jet set: {0}")]
    InvalidJetSet(String),
    #[error("duplicate point shared by jets {0} and {1}")]
    DuplicatePoint(usize, usize),
    #[error("no convex extension with locally Lipschitz gradient exists")]
    Infeasible { witness: Witness },
    #[error("gradient differences span a proper subspace; use the projection variant")]
    SpanDeficient,
    #[error("augmented gradient differences do not span the target subspace")]
    SpanMismatch,
    #[error("gradient differences are not contained in the target subspace")]
    SpanNotContained,
    #[error("jets {0} and {1} project to the same point but carry different data")]
    IllDefinedReduction(usize, usize),
    #[error("unsupported modulus: {0}")]
    UnsupportedModulus(String),
    #[error("rescaling cap reached while repairing the gradient span")]
    SpanUnfixable,
    #[error("no strictly interior (negative-value) point found in the search box")]
    NoInteriorPoint,
    #[error("extension gradient vanishes at prescribed surface point {0}")]
    ZeroGradient(usize),
    #[error("dual maximization did not converge")]
    NonConvergence,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
