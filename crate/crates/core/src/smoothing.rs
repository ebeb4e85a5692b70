//! Smoothed maxima and the localization functions used by the curvature-
//! controlled extension path.
//!
//! Building blocks, bottom to top:
//! - [`ThetaDelta`]: `|t|` mollified by an even quartic bump supported on
//!   `[-delta/2, delta/2]`, in closed piecewise-polynomial form.
//! - [`smooth_max`]: `M_delta(a, b) = (a + b + theta_delta(a - b)) / 2`, a
//!   convexity-preserving smooth maximum that equals `max(a, b)` as soon as
//!   the gap reaches `delta/2`.
//! - [`PsiApprox`]: a smooth uniform approximation of the tangent-plane
//!   maximum `m`, obtained by folding `M_delta` over the planes with
//!   `delta = 1/N`; it satisfies `m <= psi <= m + 1/2`.
//! - [`PhiFamily`]: per-jet convex localizers `phi_y` that grow quadratically
//!   near the origin-scale ball of `y` and blend into `psi` minus the
//!   tangent plane of `y` far away.

use std::sync::Arc;

use nalgebra::DVector;

use crate::conditions::{first_scale, SemiglobalResult};
use crate::jets::{Jet, JetSet};
use crate::{Error, Result};

/// Closed-form mollification of the absolute value.
///
/// `theta(t) = (|.| * K)(t)` with the even unit-mass kernel
/// `K(s) = 15/(16 h) (1 - (s/h)^2)^2` on `[-h, h]`, `h = delta/2`. It is
/// convex, even, 1-Lipschitz, equals `|t|` exactly for `|t| >= delta/2`, and
/// `theta(0) = 5 delta / 32`.
#[derive(Debug, Clone)]
pub struct ThetaDelta {
    pub delta: f64,
    h: f64,
}

impl ThetaDelta {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("theta width {delta} must be positive")));
        }
        Ok(ThetaDelta { delta, h: 0.5 * delta })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t.abs() >= self.h {
            return t.abs();
        }
        let u = t / self.h;
        let u2 = u * u;
        // t * CDF-part + tail moment; both vanish smoothly at |t| = h.
        t * (15.0 / 8.0) * (u - 2.0 / 3.0 * u * u2 + 0.2 * u * u2 * u2)
            + (15.0 * self.h / 48.0) * (1.0 - u2).powi(3)
    }

    /// Derivative; lies in `[-1, 1]` and equals `sign(t)` for `|t| >= delta/2`.
    pub fn deriv(&self, t: f64) -> f64 {
        if t.abs() >= self.h {
            return t.signum();
        }
        let u = t / self.h;
        let u2 = u * u;
        // The polynomial stays in [-1, 1] exactly; clamp away rounding spill.
        ((15.0 / 8.0) * (u - 2.0 / 3.0 * u * u2 + 0.2 * u * u2 * u2)).clamp(-1.0, 1.0)
    }
}

/// `M_delta(a, b) = (a + b + theta_delta(a - b)) / 2`.
pub fn smooth_max(theta: &ThetaDelta, a: f64, b: f64) -> f64 {
    0.5 * (a + b + theta.eval(a - b))
}

/// Smooth maximum together with the convex weight `lambda` of the first
/// argument: `d M_delta / da = lambda`, `d M_delta / db = 1 - lambda`.
pub fn smooth_max_with_weight(theta: &ThetaDelta, a: f64, b: f64) -> (f64, f64) {
    (smooth_max(theta, a, b), 0.5 * (1.0 + theta.deriv(a - b)))
}

/// One affine piece `x -> <slope, x> + intercept`.
#[derive(Debug, Clone)]
pub struct AffinePiece {
    pub slope: DVector<f64>,
    pub intercept: f64,
}

impl AffinePiece {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.slope.dot(x) + self.intercept
    }
}

/// Smooth approximation of the maximum `m` of finitely many affine pieces:
/// a left fold of [`smooth_max`] with `delta = 1/N` over the pieces in
/// lexicographic `(slope, intercept)` order. Satisfies
/// `m <= psi <= m + (N-1) delta / 2 <= m + 1/2` and agrees with `m` wherever
/// all fold gaps are at least `delta/2`.
#[derive(Debug, Clone)]
pub struct PsiApprox {
    pieces: Vec<AffinePiece>,
    pub delta: f64,
    theta: ThetaDelta,
}

impl PsiApprox {
    pub fn new(mut pieces: Vec<AffinePiece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidParameter("psi needs at least one affine piece".into()));
        }
        // Deterministic fold order regardless of input order.
        pieces.sort_by(|a, b| {
            a.slope
                .iter()
                .zip(b.slope.iter())
                .map(|(x, y)| x.partial_cmp(y).unwrap())
                .find(|o| o.is_ne())
                .unwrap_or_else(|| a.intercept.partial_cmp(&b.intercept).unwrap())
        });
        let delta = 1.0 / pieces.len() as f64;
        let theta = ThetaDelta::new(delta)?;
        Ok(PsiApprox { pieces, delta, theta })
    }

    /// Tangent planes of a jet set as the affine pieces.
    pub fn from_jets(js: &JetSet) -> Result<Self> {
        let pieces = js
            .jets
            .iter()
            .map(|j| AffinePiece {
                slope: j.gradient.clone(),
                intercept: j.value - j.gradient.dot(&j.point),
            })
            .collect();
        Self::new(pieces)
    }

    pub fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    /// The exact piecewise-affine maximum being approximated.
    pub fn max_eval(&self, x: &DVector<f64>) -> f64 {
        self.pieces.iter().map(|p| p.eval(x)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Value and gradient of the fold.
    pub fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut v = self.pieces[0].eval(x);
        let mut g = self.pieces[0].slope.clone();
        for p in &self.pieces[1..] {
            let pv = p.eval(x);
            let (nv, lambda) = smooth_max_with_weight(&self.theta, v, pv);
            g = g * lambda + &p.slope * (1.0 - lambda);
            v = nv;
        }
        (v, g)
    }
}

/// One localizer `phi_y`: equal to `A_k |x - y|^2` on the ball `B(0, 3k)`
/// with `k = k(y)` the first scale containing `y`, and equal to the smooth
/// maximum (width 1/8) of that quadratic with `psi(x) - tangent_y(x)`
/// outside. The two branches agree identically on the annulus
/// `B(0, 4k) \ B(0, 2k)`, which makes the switch seamless.
#[derive(Debug, Clone)]
pub struct PhiY {
    pub k: usize,
    pub a_k: f64,
    pub jet: Jet,
    psi: Arc<PsiApprox>,
    blend: ThetaDelta,
}

impl PhiY {
    pub fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let dxy = x - &self.jet.point;
        let q = self.a_k * dxy.norm_squared();
        let gq = &dxy * (2.0 * self.a_k);
        if x.norm() <= 3.0 * self.k as f64 {
            return (q, gq);
        }
        let (psi_v, psi_g) = self.psi.eval(x);
        let s = psi_v - self.jet.value - self.jet.gradient.dot(&dxy);
        let gs = psi_g - &self.jet.gradient;
        let (v, lambda) = smooth_max_with_weight(&self.blend, q, s);
        (v, gq * lambda + gs * (1.0 - lambda))
    }

    /// Quadratic-branch value; exposed for branch-agreement checks.
    pub fn quadratic_branch(&self, x: &DVector<f64>) -> f64 {
        self.a_k * (x - &self.jet.point).norm_squared()
    }
}

#[derive(Debug, Clone)]
pub struct PhiFamily {
    pub entries: Vec<PhiY>,
    pub psi: Arc<PsiApprox>,
}

/// Builds the localizer family from feasible semi-global constants. Fails if
/// any needed `A_k` is infinite (infeasible data) or missing.
pub fn phi_build(js: &JetSet, semi: &SemiglobalResult) -> Result<PhiFamily> {
    let psi = Arc::new(PsiApprox::from_jets(js)?);
    let blend = ThetaDelta::new(0.125)?;
    let mut entries = Vec::with_capacity(js.len());
    for jet in &js.jets {
        let k = first_scale(&jet.point);
        if k > semi.a.len() {
            return Err(Error::InvalidParameter(format!(
                "need A_k up to k = {k}, have {}",
                semi.a.len()
            )));
        }
        let a_k = semi.a[k - 1];
        if !a_k.is_finite() {
            return Err(Error::Infeasible {
                witness: semi.witness.clone().unwrap_or(crate::Witness {
                    z_index: 0,
                    y_index: 0,
                    x: jet.point.as_slice().to_vec(),
                }),
            });
        }
        entries.push(PhiY { k, a_k, jet: jet.clone(), psi: psi.clone(), blend: blend.clone() });
    }
    Ok(PhiFamily { entries, psi })
}
