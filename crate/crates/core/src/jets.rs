//! Jets, jet sets, subspaces, and moduli of continuity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Two jet base points closer than this are considered the same point.
pub const DUPLICATE_TOL: f64 = 1e-12;
/// Maximum deviation from orthonormality tolerated in a subspace basis.
pub const ORTHO_TOL: f64 = 1e-10;

pub(crate) mod dvec_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// A first-order jet: the prescribed value and gradient of the sought
/// function at one point.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Jet {
    #[serde(with = "dvec_serde")]
    pub point: DVector<f64>,
    pub value: f64,
    #[serde(with = "dvec_serde")]
    pub gradient: DVector<f64>,
    /// Auxiliary jets are extra tangency data added to repair the span of
    /// gradient differences; they are interpolated like ordinary jets but are
    /// not part of the original problem data.
    #[serde(default, rename = "auxiliary")]
    pub is_auxiliary: bool,
}

impl Jet {
    pub fn new(point: DVector<f64>, value: f64, gradient: DVector<f64>) -> Self {
        Jet { point, value, gradient, is_auxiliary: false }
    }

    /// Value at `x` of the tangent plane carried by this jet.
    pub fn tangent(&self, x: &DVector<f64>) -> f64 {
        self.value + self.gradient.dot(&(x - &self.point))
    }
}

/// One problem found by [`JetSet::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationIssue {
    Empty,
    ZeroDim,
    BaseIndexOutOfRange,
    PointDimMismatch(usize),
    GradientDimMismatch(usize),
    NonFinite(usize),
    DuplicatePoints(usize, usize),
}

/// A finite family of jets in a common ambient dimension, with a designated
/// base jet used as the origin of seminorms and decompositions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JetSet {
    pub dim: usize,
    #[serde(default, rename = "base_point")]
    pub base_point_index: usize,
    pub jets: Vec<Jet>,
}

impl JetSet {
    pub fn new(dim: usize, jets: Vec<Jet>, base_point_index: usize) -> Result<Self> {
        let js = JetSet { dim, base_point_index, jets };
        let issues = js.validate();
        if let Some(issue) = issues.first() {
            return Err(match issue {
                ValidationIssue::DuplicatePoints(i, j) => Error::DuplicatePoint(*i, *j),
                other => Error::InvalidJetSet(format!("{other:?}")),
            });
        }
        Ok(js)
    }

    /// Checks structural soundness: nonempty, consistent dimensions, finite
    /// entries, base index in range, pairwise distinct points.
    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        if self.jets.is_empty() {
            issues.push(ValidationIssue::Empty);
            return issues;
        }
        if self.dim == 0 {
            issues.push(ValidationIssue::ZeroDim);
        }
        if self.base_point_index >= self.jets.len() {
            issues.push(ValidationIssue::BaseIndexOutOfRange);
        }
        for (i, j) in self.jets.iter().enumerate() {
            if j.point.len() != self.dim {
                issues.push(ValidationIssue::PointDimMismatch(i));
            }
            if j.gradient.len() != self.dim {
                issues.push(ValidationIssue::GradientDimMismatch(i));
            }
            let finite = j.value.is_finite()
                && j.point.iter().all(|c| c.is_finite())
                && j.gradient.iter().all(|c| c.is_finite());
            if !finite {
                issues.push(ValidationIssue::NonFinite(i));
            }
        }
        if issues.is_empty() {
            for i in 0..self.jets.len() {
                for j in (i + 1)..self.jets.len() {
                    if (&self.jets[i].point - &self.jets[j].point).norm() <= DUPLICATE_TOL {
                        issues.push(ValidationIssue::DuplicatePoints(i, j));
                    }
                }
            }
        }
        issues
    }

    pub fn base(&self) -> &Jet {
        &self.jets[self.base_point_index]
    }

    pub fn len(&self) -> usize {
        self.jets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jets.is_empty()
    }

    /// Sup norm of the gradients.
    pub fn gradient_sup_norm(&self) -> f64 {
        self.jets.iter().map(|j| j.gradient.norm()).fold(0.0, f64::max)
    }

    /// Pointwise maximum of the tangent planes.
    pub fn tangent_max(&self, x: &DVector<f64>) -> f64 {
        self.jets.iter().map(|j| j.tangent(x)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A linear subspace of R^n, stored through an orthonormal basis. The zero
/// subspace (empty basis) is allowed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subspace {
    ambient_dim: usize,
    /// Orthonormal; each entry has length `ambient_dim`.
    basis: Vec<Vec<f64>>,
}

impl Subspace {
    pub fn new(ambient_dim: usize, basis: Vec<DVector<f64>>) -> Result<Self> {
        for b in &basis {
            if b.len() != ambient_dim {
                return Err(Error::DimensionMismatch { expected: ambient_dim, got: b.len() });
            }
        }
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (basis[i].dot(&basis[j]) - want).abs() > ORTHO_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "subspace basis not orthonormal at pair ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Subspace {
            ambient_dim,
            basis: basis.into_iter().map(|b| b.as_slice().to_vec()).collect(),
        })
    }

    /// Builds the span of an arbitrary family of vectors; `cutoff` is the
    /// absolute singular-value threshold below which directions are dropped.
    pub fn from_spanning(ambient_dim: usize, vectors: &[DVector<f64>], cutoff: f64) -> Self {
        if vectors.is_empty() {
            return Subspace { ambient_dim, basis: Vec::new() };
        }
        let m = DMatrix::from_columns(&vectors.iter().cloned().collect::<Vec<_>>());
        let svd = m.svd(true, false);
        let u = svd.u.as_ref().expect("svd with u requested");
        let mut basis = Vec::new();
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s > cutoff {
                basis.push(u.column(i).as_slice().to_vec());
            }
        }
        Subspace { ambient_dim, basis }
    }

    pub fn full(ambient_dim: usize) -> Self {
        let basis = (0..ambient_dim)
            .map(|i| {
                let mut e = vec![0.0; ambient_dim];
                e[i] = 1.0;
                e
            })
            .collect();
        Subspace { ambient_dim, basis }
    }

    pub fn zero(ambient_dim: usize) -> Self {
        Subspace { ambient_dim, basis: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn is_full(&self) -> bool {
        self.basis.len() == self.ambient_dim
    }

    pub fn basis_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_vec(self.basis[i].clone())
    }

    /// Orthogonal projection onto the subspace, in ambient coordinates.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut p = DVector::zeros(self.ambient_dim);
        for b in &self.basis {
            let b = DVector::from_column_slice(b);
            let c = b.dot(x);
            p += b * c;
        }
        p
    }

    /// Component orthogonal to the subspace.
    pub fn complement(&self, x: &DVector<f64>) -> DVector<f64> {
        x - self.project(x)
    }

    /// Coordinates of the projection of `x` in the stored basis.
    pub fn coords(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.basis.len(),
            self.basis.iter().map(|b| DVector::from_column_slice(b).dot(x)),
        )
    }

    /// Ambient vector with the given basis coordinates.
    pub fn lift(&self, coords: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.ambient_dim);
        for (b, c) in self.basis.iter().zip(coords.iter()) {
            x += DVector::from_column_slice(b) * *c;
        }
        x
    }

    /// Dense projector matrix; mainly for tests and reports.
    pub fn projector(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.ambient_dim, self.ambient_dim);
        for b in &self.basis {
            let b = DVector::from_column_slice(b);
            p += &b * b.transpose();
        }
        p
    }

    /// Whether `v` lies in the subspace up to `tol` (in norm).
    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.complement(v).norm() <= tol
    }

    /// Whether `other` is contained in `self` up to `tol` per basis vector.
    pub fn contains_subspace(&self, other: &Subspace, tol: f64) -> bool {
        (0..other.dim()).all(|i| self.contains(&other.basis_vector(i), tol))
    }
}

/// Span of the differences `gradient(y) - gradient(base)` over a jet set.
///
/// The rank cutoff scales with the largest gradient so that the span is
/// stable under reordering of the jets.
pub fn span_of_gradient_differences(js: &JetSet) -> Subspace {
    let g0 = &js.base().gradient;
    let diffs: Vec<DVector<f64>> = js
        .jets
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != js.base_point_index)
        .map(|(_, j)| &j.gradient - g0)
        .collect();
    let cutoff = 1e-9 * f64::max(1.0, js.gradient_sup_norm());
    Subspace::from_spanning(js.dim, &diffs, cutoff)
}

/// A strictly increasing modulus of continuity `omega` with `omega(0) = 0`,
/// together with its primitive `theta(t) = integral of omega from 0 to t`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Modulus {
    /// `omega(t) = t^alpha` with `alpha` in (0, 1].
    Power { alpha: f64 },
    /// `omega(t) = t`; yields quadratic pieces identical to the plain path.
    Identity,
    /// Piecewise-linear interpolation of strictly increasing samples
    /// `(t_i, w_i)` starting at `(0, 0)`; extended past the last sample with
    /// the final slope.
    Table { ts: Vec<f64>, ws: Vec<f64> },
}

impl Modulus {
    pub fn validate(&self) -> Result<()> {
        match self {
            Modulus::Power { alpha } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return Err(Error::UnsupportedModulus(format!(
                        "power exponent {alpha} outside (0, 1]"
                    )));
                }
            }
            Modulus::Identity => {}
            Modulus::Table { ts, ws } => {
                if ts.len() != ws.len() || ts.len() < 2 {
                    return Err(Error::UnsupportedModulus(
                        "table needs at least two samples of equal length".into(),
                    ));
                }
                if ts[0] != 0.0 || ws[0] != 0.0 {
                    return Err(Error::UnsupportedModulus("table must start at (0, 0)".into()));
                }
                for i in 1..ts.len() {
                    if ts[i] <= ts[i - 1] || ws[i] <= ws[i - 1] {
                        return Err(Error::UnsupportedModulus(
                            "table samples must be strictly increasing".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// `omega(t)` for `t >= 0`.
    pub fn omega(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        match self {
            Modulus::Power { alpha } => t.powf(*alpha),
            Modulus::Identity => t,
            Modulus::Table { ts, ws } => {
                let n = ts.len();
                if t >= ts[n - 1] {
                    let slope = (ws[n - 1] - ws[n - 2]) / (ts[n - 1] - ts[n - 2]);
                    return ws[n - 1] + slope * (t - ts[n - 1]);
                }
                let i = ts.partition_point(|&ti| ti <= t).max(1);
                let (t0, t1, w0, w1) = (ts[i - 1], ts[i], ws[i - 1], ws[i]);
                w0 + (w1 - w0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// `theta(t) = integral of omega over [0, t]`, the growth profile of the
    /// per-jet pieces.
    pub fn theta(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        match self {
            Modulus::Power { alpha } => t.powf(1.0 + alpha) / (1.0 + alpha),
            Modulus::Identity => 0.5 * t * t,
            Modulus::Table { ts, ws } => {
                let n = ts.len();
                let mut acc = 0.0;
                for i in 1..n {
                    let (t0, t1) = (ts[i - 1], ts[i]);
                    if t <= t0 {
                        return acc;
                    }
                    let hi = t.min(t1);
                    let w_hi = self.omega(hi);
                    acc += 0.5 * (ws[i - 1] + w_hi) * (hi - t0);
                    if t <= t1 {
                        return acc;
                    }
                }
                let slope = (ws[n - 1] - ws[n - 2]) / (ts[n - 1] - ts[n - 2]);
                let dt = t - ts[n - 1];
                acc + ws[n - 1] * dt + 0.5 * slope * dt * dt
            }
        }
    }

    /// Solves `omega(r) = s` for `r >= 0`; used when inverting the radial
    /// gradient of a piece. `s` must be >= 0.
    pub fn omega_inverse(&self, s: f64) -> f64 {
        debug_assert!(s >= 0.0);
        match self {
            Modulus::Power { alpha } => s.powf(1.0 / alpha),
            Modulus::Identity => s,
            Modulus::Table { ts, ws } => {
                let n = ts.len();
                if s >= ws[n - 1] {
                    let slope = (ws[n - 1] - ws[n - 2]) / (ts[n - 1] - ts[n - 2]);
                    return ts[n - 1] + (s - ws[n - 1]) / slope;
                }
                let i = ws.partition_point(|&wi| wi <= s).max(1);
                let (t0, t1, w0, w1) = (ts[i - 1], ts[i], ws[i - 1], ws[i]);
                t0 + (t1 - t0) * (s - w0) / (w1 - w0)
            }
        }
    }
}
