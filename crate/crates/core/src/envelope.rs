//! The lower envelope function `g` and evaluation of its convex envelope.
//!
//! `g` is a pointwise minimum of per-jet convex pieces (tilted paraboloids,
//! or generalized pieces with a modulus-of-continuity growth profile, or
//! localizer-augmented pieces). The extension is `F = conv(g)`. Since
//! `g = min_j p_j` with convex `p_j`, the Fenchel conjugate is
//! `g* = max_j p_j*`, and `F(x) = sup_v { <x, v> - g*(v) }`. That dual
//! maximization of a concave piecewise-smooth function is solved with an
//! active-set Newton method; the maximizer is the gradient of `F` at `x`.
//!
//! An independent Carathéodory oracle (direct minimization over convex
//! combinations of at most `n + 1` points) cross-checks the dual values.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::jets::Modulus;
use crate::smoothing::PhiY;

/// One convex piece of `g`.
#[derive(Debug, Clone)]
pub enum Piece {
    /// `t + <tilt, x - y> + (curvature/2) |x - y|^2`.
    Quadratic { y: DVector<f64>, tilt: DVector<f64>, offset: f64, curvature: f64 },
    /// `t + <tilt, x - y> + coeff * theta(|x - y|)` where `theta` is the
    /// primitive of the modulus. For the identity modulus this equals a
    /// `Quadratic` piece with `curvature = coeff`.
    Theta { y: DVector<f64>, tilt: DVector<f64>, offset: f64, coeff: f64, modulus: Modulus },
    /// `t + <tilt, x - y> + phi_y(x) + a |x - y|^2`; conjugates are solved
    /// numerically, so evaluations through such pieces are flagged
    /// approximate.
    PhiAugmented { y: DVector<f64>, tilt: DVector<f64>, offset: f64, a: f64, phi: Box<PhiY> },
}

/// Conjugate value of one piece at `v`, together with its maximizer
/// (the gradient of the conjugate).
#[derive(Debug, Clone)]
pub struct Conjugate {
    pub value: f64,
    pub argmax: DVector<f64>,
    pub exact: bool,
}

impl Piece {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Piece::Quadratic { y, tilt, offset, curvature } => {
                let u = x - y;
                offset + tilt.dot(&u) + 0.5 * curvature * u.norm_squared()
            }
            Piece::Theta { y, tilt, offset, coeff, modulus } => {
                let u = x - y;
                offset + tilt.dot(&u) + coeff * modulus.theta(u.norm())
            }
            Piece::PhiAugmented { y, tilt, offset, a, phi } => {
                let u = x - y;
                offset + tilt.dot(&u) + phi.eval(x).0 + a * u.norm_squared()
            }
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Piece::Quadratic { y, tilt, curvature, .. } => tilt + (x - y) * *curvature,
            Piece::Theta { y, tilt, coeff, modulus, .. } => {
                let u = x - y;
                let r = u.norm();
                if r < 1e-300 {
                    tilt.clone()
                } else {
                    tilt + &u * (coeff * modulus.omega(r) / r)
                }
            }
            Piece::PhiAugmented { y, tilt, a, phi, .. } => {
                tilt + phi.eval(x).1 + (x - y) * (2.0 * a)
            }
        }
    }

    /// `p*(v) = sup_x { <v, x> - p(x) }` with its maximizer.
    pub fn conjugate(&self, v: &DVector<f64>) -> Conjugate {
        match self {
            Piece::Quadratic { y, tilt, offset, curvature } => {
                let w = v - tilt;
                let argmax = y + &w / *curvature;
                let value = v.dot(y) - offset + w.norm_squared() / (2.0 * curvature);
                Conjugate { value, argmax, exact: true }
            }
            Piece::Theta { y, tilt, coeff, modulus, .. } => {
                // Radial: solve coeff * omega(r) = |v - tilt| along w^.
                let w = v - tilt;
                let wn = w.norm();
                let argmax = if wn < 1e-300 {
                    y.clone()
                } else {
                    let r = modulus.omega_inverse(wn / coeff);
                    y + &w * (r / wn)
                };
                let value = v.dot(&argmax) - self.value(&argmax);
                Conjugate { value, argmax, exact: true }
            }
            Piece::PhiAugmented { y, tilt, a, phi, .. } => {
                // Strongly convex piece (modulus >= 2a): solve grad p(x) = v
                // by damped Newton with a finite-difference Jacobian.
                let init = y + (v - tilt) / (2.0 * (phi.a_k + a));
                let argmax = self.solve_gradient_equation(v, init);
                let value = v.dot(&argmax) - self.value(&argmax);
                Conjugate { value, argmax, exact: false }
            }
        }
    }

    fn solve_gradient_equation(&self, v: &DVector<f64>, init: DVector<f64>) -> DVector<f64> {
        let n = v.len();
        let mut x = init;
        let tol = 1e-11 * (1.0 + v.norm());
        for _ in 0..120 {
            let r = self.gradient(&x) - v;
            if r.norm() <= tol {
                break;
            }
            let h = 1e-6 * (1.0 + x.norm());
            let mut jac = DMatrix::zeros(n, n);
            for c in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let col = (self.gradient(&xp) - self.gradient(&xm)) / (2.0 * h);
                jac.set_column(c, &col);
            }
            let step = match jac.lu().solve(&(-&r)) {
                Some(s) => s,
                None => -&r, // fall back to steepest descent on the residual
            };
            let mut t = 1.0;
            let base = r.norm();
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &x + &step * t;
                if (self.gradient(&cand) - v).norm() < base * (1.0 - 0.25 * t) {
                    x = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // Tiny damped step keeps us moving on flat stretches.
                x += &step * 1e-3;
            }
        }
        x
    }

    /// Hessian of the conjugate at `v`; exact for quadratic pieces, finite
    /// differences of the conjugate maximizer otherwise.
    pub fn conjugate_hessian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = v.len();
        match self {
            Piece::Quadratic { curvature, .. } => DMatrix::identity(n, n) / *curvature,
            _ => {
                let h = 1e-6 * (1.0 + v.norm());
                let mut m = DMatrix::zeros(n, n);
                for c in 0..n {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[c] += h;
                    vm[c] -= h;
                    let col = (self.conjugate(&vp).argmax - self.conjugate(&vm).argmax) / (2.0 * h);
                    m.set_column(c, &col);
                }
                // Symmetrize the finite-difference result.
                0.5 * (&m + m.transpose())
            }
        }
    }

    pub fn has_exact_conjugate(&self) -> bool {
        !matches!(self, Piece::PhiAugmented { .. })
    }
}

/// The lower envelope `g = min_j p_j`.
#[derive(Debug, Clone)]
pub struct GFunction {
    pub dim: usize,
    pub pieces: Vec<Piece>,
}

impl GFunction {
    /// Value and index of the attaining piece.
    pub fn g_eval(&self, x: &DVector<f64>) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.pieces.iter().enumerate() {
            let v = p.value(x);
            if v < best.0 {
                best = (v, i);
            }
        }
        best
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.g_eval(x).0
    }

    /// Gradient of the attaining piece (a subgradient proxy at kinks).
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (_, i) = self.g_eval(x);
        self.pieces[i].gradient(x)
    }

    /// `g*(v) = max_j p_j*(v)`.
    pub fn conjugate(&self, v: &DVector<f64>) -> f64 {
        self.pieces.iter().map(|p| p.conjugate(v).value).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn has_exact_conjugates(&self) -> bool {
        self.pieces.iter().all(|p| p.has_exact_conjugate())
    }
}

/// Result of evaluating `F = conv(g)` at one point.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Norm of the stationarity residual `x - sum lambda_j argmax_j` at the
    /// dual maximizer; reported as the dual gap column in grids.
    pub kkt_residual: f64,
    pub converged: bool,
    /// Set when any piece conjugate is computed numerically.
    pub approximate: bool,
}

/// Evaluates the convex envelope of a [`GFunction`] by dual maximization.
#[derive(Debug, Clone)]
pub struct EnvelopeEvaluator {
    pub g: GFunction,
}

struct DualState {
    d: f64,
    vals: Vec<f64>,
    args: Vec<DVector<f64>>,
}

impl EnvelopeEvaluator {
    pub fn new(g: GFunction) -> Self {
        EnvelopeEvaluator { g }
    }

    pub fn dim(&self) -> usize {
        self.g.dim
    }

    fn dual_state(&self, x: &DVector<f64>, v: &DVector<f64>) -> DualState {
        let mut vals = Vec::with_capacity(self.g.pieces.len());
        let mut args = Vec::with_capacity(self.g.pieces.len());
        for p in &self.g.pieces {
            let c = p.conjugate(v);
            vals.push(c.value);
            args.push(c.argmax);
        }
        let s = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        DualState { d: x.dot(v) - s, vals, args }
    }

    pub fn eval(&self, x: &DVector<f64>) -> EvalResult {
        let approximate = !self.g.has_exact_conjugates();
        if self.g.pieces.len() == 1 {
            let p = &self.g.pieces[0];
            return EvalResult {
                value: p.value(x),
                gradient: p.gradient(x),
                kkt_residual: 0.0,
                converged: true,
                approximate,
            };
        }
        // Starts: each piece's own gradient at x (for the attaining piece this
        // is already optimal when that piece is locally the envelope), plus
        // the mean tilt.
        let mut starts: Vec<DVector<f64>> =
            self.g.pieces.iter().map(|p| p.gradient(x)).collect();
        let mean = starts.iter().fold(DVector::zeros(self.g.dim), |a, s| a + s)
            / starts.len() as f64;
        starts.push(mean);
        starts.sort_by(|a, b| {
            let da = self.dual_state(x, a).d;
            let db = self.dual_state(x, b).d;
            db.partial_cmp(&da).unwrap()
        });
        let mut best: Option<(f64, DVector<f64>, f64, bool)> = None;
        for v0 in starts.into_iter().take(3) {
            let (d, v, res, conv) = self.solve_from(x, v0);
            let take = match &best {
                None => true,
                Some((bd, _, _, bc)) => (conv && !bc) || ((conv == *bc) && d > *bd),
            };
            if take {
                best = Some((d, v, res, conv));
            }
            if best.as_ref().map(|b| b.3).unwrap_or(false) {
                break;
            }
        }
        let (value, v, kkt_residual, converged) = best.unwrap();
        EvalResult { value, gradient: v, kkt_residual, converged, approximate }
    }

    /// Active-set maximization of `D(v) = <x, v> - g*(v)` from `v0`.
    fn solve_from(&self, x: &DVector<f64>, v0: DVector<f64>) -> (f64, DVector<f64>, f64, bool) {
        let n = self.g.dim;
        let vtol = 1e-9 * (1.0 + x.norm());
        let mut v = v0;
        let mut st = self.dual_state(x, &v);
        let mut last_residual = f64::INFINITY;
        for iter in 0..200 {
            let s = st.vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let atol = 1e-7 * (1.0 + s.abs());
            let mut active: Vec<usize> =
                (0..st.vals.len()).filter(|&j| st.vals[j] >= s - atol).collect();
            // Carathéodory: at most n + 1 pieces can matter.
            if active.len() > n + 1 {
                active.sort_by(|&a, &b| st.vals[b].partial_cmp(&st.vals[a]).unwrap());
                active.truncate(n + 1);
            }
            let mut solved = None;
            for _ in 0..active.len() {
                match self.kkt_step(x, &v, &st, &active) {
                    Some((dv, lambda)) => {
                        if let Some((jmin, &lmin)) = lambda
                            .iter()
                            .enumerate()
                            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        {
                            if lmin < -1e-10 && active.len() > 1 {
                                active.remove(jmin);
                                continue;
                            }
                        }
                        solved = Some((dv, lambda));
                        break;
                    }
                    None => break,
                }
            }
            let (dv, lambda) = match solved {
                Some(sl) => sl,
                None => {
                    // Singular system: plain supergradient direction.
                    let jmax = argmax(&st.vals);
                    (x - &st.args[jmax], vec![1.0])
                }
            };
            // Stationarity residual with the current multipliers.
            let mut comb = DVector::zeros(n);
            let lsum: f64 = lambda.iter().sum();
            for (idx, &j) in active.iter().enumerate().take(lambda.len()) {
                comb += &st.args[j] * (lambda[idx].max(0.0) / lsum.max(1e-300));
            }
            let residual = (x - &comb).norm();
            last_residual = residual;
            if residual <= vtol && dv.norm() <= 1e-10 * (1.0 + v.norm()) {
                return (st.d, v, residual, true);
            }
            // Backtracking step on D.
            let mut t = 1.0;
            let mut stepped = false;
            for _ in 0..30 {
                let cand = &v + &dv * t;
                let cst = self.dual_state(x, &cand);
                if cst.d > st.d + 1e-14 * (1.0 + st.d.abs())
                    || (residual <= 10.0 * vtol && cst.d >= st.d - 1e-12 * (1.0 + st.d.abs()))
                {
                    v = cand;
                    st = cst;
                    stepped = true;
                    break;
                }
                t *= 0.5;
            }
            if !stepped {
                // Supergradient fallback with a diminishing step.
                let jmax = argmax(&st.vals);
                let sg = x - &st.args[jmax];
                if sg.norm() <= vtol {
                    return (st.d, v, sg.norm(), true);
                }
                let step = 1.0 / (1.0 + iter as f64);
                let mut improved = false;
                let mut tt = step;
                for _ in 0..25 {
                    let cand = &v + &sg * (tt / sg.norm());
                    let cst = self.dual_state(x, &cand);
                    if cst.d > st.d {
                        v = cand;
                        st = cst;
                        improved = true;
                        break;
                    }
                    tt *= 0.5;
                }
                if !improved {
                    return (st.d, v, last_residual, last_residual <= 100.0 * vtol);
                }
            }
        }
        (st.d, v, last_residual, last_residual <= 100.0 * vtol)
    }

    /// One linearized KKT solve on the active set: returns the dual step and
    /// the multipliers. `None` when the system is singular.
    fn kkt_step(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        st: &DualState,
        active: &[usize],
    ) -> Option<(DVector<f64>, Vec<f64>)> {
        let n = self.g.dim;
        let m = active.len();
        // Hessian-weighted block with uniform weights; the linearization is
        // re-solved every outer iteration, so uniform weights suffice.
        let mut b = DMatrix::zeros(n, n);
        for &j in active {
            b += self.g.pieces[j].conjugate_hessian(v) / m as f64;
        }
        let dim = n + m;
        let mut a = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        // Stationarity: B dv + sum lambda_j args_j = x.
        for r in 0..n {
            for c in 0..n {
                a[(r, c)] = b[(r, c)];
            }
            for (idx, &j) in active.iter().enumerate() {
                a[(r, n + idx)] = st.args[j][r];
            }
            rhs[r] = x[r];
        }
        // Equal conjugate values after the step, relative to the first piece.
        for (row, &j) in active.iter().enumerate().skip(1) {
            let j0 = active[0];
            for c in 0..n {
                a[(n + row - 1, c)] = st.args[j][c] - st.args[j0][c];
            }
            rhs[n + row - 1] = st.vals[j0] - st.vals[j];
        }
        // Multipliers sum to one.
        for idx in 0..m {
            a[(dim - 1, n + idx)] = 1.0;
        }
        rhs[dim - 1] = 1.0;
        let sol = a.lu().solve(&rhs)?;
        if sol.iter().any(|c| !c.is_finite()) {
            return None;
        }
        let dv = DVector::from_iterator(n, (0..n).map(|i| sol[i]));
        let lambda = (0..m).map(|i| sol[n + i]).collect();
        Some((dv, lambda))
    }
}

fn argmax(vals: &[f64]) -> usize {
    vals.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// A convex function accessible by value and gradient; what the Carathéodory
/// oracle minimizes over.
pub trait ConvexObjective {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl ConvexObjective for GFunction {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        GFunction::value(self, x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        GFunction::gradient(self, x)
    }
}

/// A closure-backed objective with finite-difference gradients.
pub struct FnObjective<F: Fn(&DVector<f64>) -> f64> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> f64> ConvexObjective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.f)(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6 * (1.0 + x.norm());
        DVector::from_fn(self.dim, |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            ((self.f)(&xp) - (self.f)(&xm)) / (2.0 * h)
        })
    }
}

/// Direct Carathéodory evaluation of `conv(f)(x)`: minimize
/// `sum lambda_i f(x_i)` over convex combinations of at most `n + 1` points
/// with barycenter `x`. Candidate supports are drawn from the anchors, `x`
/// itself, and rings around `x`; the best support is refined by moving its
/// points along the gradient-matching direction.
pub fn caratheodory_oracle(
    f: &dyn ConvexObjective,
    x: &DVector<f64>,
    anchors: &[DVector<f64>],
    seed: u64,
) -> f64 {
    let n = f.dim();
    let mut pool: Vec<DVector<f64>> = vec![x.clone()];
    pool.extend(anchors.iter().cloned());
    let spread = anchors
        .iter()
        .map(|a| (a - x).norm())
        .fold(1.0f64, f64::max);
    for &scale in &[0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.5, 4.0] {
        let r = scale * spread;
        for i in 0..n {
            for sgn in [-1.0, 1.0] {
                let mut p = x.clone();
                p[i] += sgn * r;
                pool.push(p);
            }
        }
        if n >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scale.to_bits() >> 32));
            for _ in 0..(3 * n) {
                let dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
                if dir.norm() > 1e-9 {
                    pool.push(x + dir.clone() * (r / dir.norm()));
                }
            }
        }
    }

    let solve_weights = |pts: &[DVector<f64>]| -> Option<Vec<f64>> {
        let m = pts.len();
        let mut a = DMatrix::zeros(n + 1, m);
        for (c, p) in pts.iter().enumerate() {
            for r in 0..n {
                a[(r, c)] = p[r];
            }
            a[(n, c)] = 1.0;
        }
        if m != n + 1 {
            return None;
        }
        let mut rhs = DVector::zeros(n + 1);
        for r in 0..n {
            rhs[r] = x[r];
        }
        rhs[n] = 1.0;
        let sol = a.lu().solve(&rhs)?;
        if sol.iter().any(|l| !l.is_finite() || *l < -1e-10) {
            return None;
        }
        Some(sol.iter().cloned().collect())
    };

    let objective = |pts: &[DVector<f64>], lambda: &[f64]| -> f64 {
        pts.iter().zip(lambda).map(|(p, l)| l.max(0.0) * f.value(p)).sum()
    };

    let mut best_val = f.value(x);

    // Enumerate all supports of size n + 1 when feasible; otherwise sample.
    let p = pool.len();
    let k = n + 1;
    let total: usize = {
        let mut c: u128 = 1;
        for i in 0..k {
            c = c * (p - i) as u128 / (i + 1) as u128;
        }
        c.min(usize::MAX as u128) as usize
    };
    const BUDGET: usize = 150_000;
    let mut supports: Vec<Vec<usize>> = Vec::new();
    if total <= BUDGET {
        let mut comb: Vec<usize> = (0..k).collect();
        'outer: loop {
            supports.push(comb.clone());
            // Advance to the next lexicographic combination.
            let mut i = k;
            loop {
                if i == 0 {
                    break 'outer;
                }
                i -= 1;
                if comb[i] != i + p - k {
                    comb[i] += 1;
                    for j in (i + 1)..k {
                        comb[j] = comb[j - 1] + 1;
                    }
                    continue 'outer;
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        for _ in 0..BUDGET {
            let mut s: Vec<usize> = Vec::with_capacity(k);
            while s.len() < k {
                let i = rng.random_range(0..p);
                if !s.contains(&i) {
                    s.push(i);
                }
            }
            supports.push(s);
        }
    }

    // Keep two groups of candidate supports: the best overall, and the best
    // among well-spread ones (every weight bounded away from zero). The
    // overall best is often degenerate, with all weight on `x` itself, and
    // the refinement has no direction to move from there; the spread group
    // guarantees refinable starting supports.
    // Enumeration fast path: precomputed pool values, and stack-based
    // barycentric solves for the low dimensions the enumeration loop is hot
    // in; the generic LU path covers the rest.
    let pool_vals: Vec<f64> = pool.iter().map(|p| f.value(p)).collect();
    let quick_weights = |sup: &[usize], out: &mut [f64; 4]| -> bool {
        match n {
            1 => {
                let (a, b) = (pool[sup[0]][0], pool[sup[1]][0]);
                let den = a - b;
                if den.abs() < 1e-300 {
                    return false;
                }
                let la = (x[0] - b) / den;
                out[0] = la;
                out[1] = 1.0 - la;
                out[..2].iter().all(|l| *l >= -1e-10)
            }
            2 => {
                let (p0, p1, p2) = (&pool[sup[0]], &pool[sup[1]], &pool[sup[2]]);
                let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
                if det.abs() < 1e-300 {
                    return false;
                }
                let l1 = ((x[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (x[1] - p0[1])) / det;
                let l2 = ((p1[0] - p0[0]) * (x[1] - p0[1]) - (x[0] - p0[0]) * (p1[1] - p0[1])) / det;
                out[0] = 1.0 - l1 - l2;
                out[1] = l1;
                out[2] = l2;
                out[..3].iter().all(|l| l.is_finite() && *l >= -1e-10)
            }
            _ => false,
        }
    };

    let mut top: Vec<(f64, Vec<DVector<f64>>, Vec<f64>)> = Vec::new();
    let mut top_spread: Vec<(f64, Vec<DVector<f64>>, Vec<f64>)> = Vec::new();
    let mut buf = [0.0f64; 4];
    for sup in supports {
        let lambda: Vec<f64> = if n <= 2 {
            if !quick_weights(&sup, &mut buf) {
                continue;
            }
            buf[..k].to_vec()
        } else {
            let pts: Vec<DVector<f64>> = sup.iter().map(|&i| pool[i].clone()).collect();
            match solve_weights(&pts) {
                Some(l) => l,
                None => continue,
            }
        };
        let val: f64 = sup
            .iter()
            .zip(&lambda)
            .map(|(&i, l)| l.max(0.0) * pool_vals[i])
            .sum();
        let enters_top = top.len() < 4 || val < top.last().unwrap().0;
        let enters_spread = lambda.iter().all(|l| *l >= 0.05)
            && (top_spread.len() < 6 || val < top_spread.last().unwrap().0);
        if !(enters_top || enters_spread) {
            continue;
        }
        let pts: Vec<DVector<f64>> = sup.iter().map(|&i| pool[i].clone()).collect();
        if enters_top {
            top.push((val, pts.clone(), lambda.clone()));
            top.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            top.truncate(4);
        }
        if enters_spread {
            top_spread.push((val, pts, lambda));
            top_spread.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            top_spread.truncate(6);
        }
    }
    top.extend(top_spread);

    // Refinement of each retained support: coordinate descent over the
    // support points. Each active point moves downhill for `g(p) - <vhat, p>`
    // (vhat = weight-averaged gradient, the current slope estimate) with a
    // halving line search; the weights are re-solved at every trial so the
    // barycenter constraint is never violated.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xd1f));
    for (val0, mut pts, mut lambda) in top {
        best_val = best_val.min(val0);
        let mut cur = val0;
        for _ in 0..120 {
            let mut improved = false;
            for i in 0..pts.len() {
                if lambda[i] <= 1e-9 {
                    continue;
                }
                let grads: Vec<DVector<f64>> = pts.iter().map(|pt| f.gradient(pt)).collect();
                let vhat = grads
                    .iter()
                    .zip(&lambda)
                    .fold(DVector::zeros(n), |acc, (gr, l)| acc + gr * l.max(0.0));
                // The gradient-matching direction is the main descent
                // heuristic; random directions let the search slide along
                // kinks of `g`, where the one-sided gradient stalls.
                let mut dirs: Vec<DVector<f64>> = Vec::new();
                let d = &vhat - &grads[i];
                if d.norm() >= 1e-14 {
                    dirs.push(d.normalize());
                }
                if n >= 2 {
                    for _ in 0..4 {
                        let r = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
                        if r.norm() > 1e-9 {
                            dirs.push(r.normalize());
                        }
                    }
                } else {
                    dirs.push(DVector::from_vec(vec![1.0]));
                    dirs.push(DVector::from_vec(vec![-1.0]));
                }
                let mut chosen: Option<(f64, Vec<DVector<f64>>, Vec<f64>)> = None;
                for dir in &dirs {
                    let mut t = 2.0 * spread;
                    while t > 1e-12 * spread {
                        let mut cand = pts.clone();
                        cand[i] = &pts[i] + dir * t;
                        if let Some(cl) = solve_weights(&cand) {
                            let val = objective(&cand, &cl);
                            let incumbent = chosen.as_ref().map(|c| c.0).unwrap_or(cur);
                            if val < incumbent - 1e-15 * (1.0 + val.abs()) {
                                chosen = Some((val, cand, cl));
                            }
                        }
                        t *= 0.5;
                    }
                }
                if let Some((val, cand, cl)) = chosen {
                    cur = val;
                    pts = cand;
                    lambda = cl;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        best_val = best_val.min(cur);
    }
    best_val
}

/// Checks that convexification commutes with composition by a projection:
/// for `psi` defined on the subspace (in basis coordinates),
/// `conv(psi o P)` in the ambient space agrees with `(conv psi) o P`.
/// Returns the maximum absolute discrepancy over the samples.
pub fn conv_projection_check(
    psi: &dyn ConvexObjective,
    sub: &crate::jets::Subspace,
    anchors_sub: &[DVector<f64>],
    samples: &[DVector<f64>],
    seed: u64,
) -> f64 {
    let n = sub.ambient_dim();
    let composed = FnObjective { dim: n, f: |z: &DVector<f64>| psi.value(&sub.coords(z)) };
    let anchors_amb: Vec<DVector<f64>> = anchors_sub.iter().map(|a| sub.lift(a)).collect();
    let mut worst = 0.0f64;
    for x in samples {
        let ambient = caratheodory_oracle(&composed, x, &anchors_amb, seed);
        let reduced = caratheodory_oracle(psi, &sub.coords(x), anchors_sub, seed);
        worst = worst.max((ambient - reduced).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    /// The two tangent paraboloids of |x| at +-1 with curvature 1; their
    /// minimum already equals x^2/2 + 1/2, which is convex.
    fn abs_global_g() -> GFunction {
        GFunction {
            dim: 1,
            pieces: vec![
                Piece::Quadratic { y: dv(&[-1.0]), tilt: dv(&[-1.0]), offset: 1.0, curvature: 1.0 },
                Piece::Quadratic { y: dv(&[1.0]), tilt: dv(&[1.0]), offset: 1.0, curvature: 1.0 },
            ],
        }
    }

    /// Grid-sup oracle for a piece conjugate.
    fn conjugate_grid_oracle(p: &Piece, v: &DVector<f64>, radius: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let steps = 20001;
        assert_eq!(v.len(), 1, "oracle is 1D");
        let mut r = radius;
        let mut center = 0.0;
        for _ in 0..4 {
            let mut arg = center;
            for i in 0..steps {
                let x = center - r + 2.0 * r * i as f64 / (steps - 1) as f64;
                let val = v[0] * x - p.value(&dv(&[x]));
                if val > best {
                    best = val;
                    arg = x;
                }
            }
            center = arg;
            r /= 100.0;
        }
        best
    }

    #[test]
    fn quadratic_conjugate_closed_form() {
        let p = Piece::Quadratic { y: dv(&[1.0]), tilt: dv(&[1.0]), offset: 1.0, curvature: 1.0 };
        let c = p.conjugate(&dv(&[0.0]));
        // <0, y> - t + |0 - tilt|^2 / 2 = -1 + 1/2.
        assert!((c.value - (-0.5)).abs() < 1e-14);
        assert!((c.argmax[0] - 0.0).abs() < 1e-14);
        let o = conjugate_grid_oracle(&p, &dv(&[0.0]), 50.0);
        assert!((c.value - o).abs() < 1e-6);
    }

    #[test]
    fn theta_power_conjugate_matches_grid_oracle() {
        let p = Piece::Theta {
            y: dv(&[0.5]),
            tilt: dv(&[-0.3]),
            offset: 0.2,
            coeff: 2.0,
            modulus: Modulus::Power { alpha: 0.5 },
        };
        for v in [-1.5, -0.3, 0.0, 0.4, 2.0] {
            let c = p.conjugate(&dv(&[v]));
            let o = conjugate_grid_oracle(&p, &dv(&[v]), 30.0);
            assert!((c.value - o).abs() < 1e-5 * (1.0 + o.abs()), "v={v}: {} vs {o}", c.value);
            // The maximizer satisfies the radial first-order condition.
            let g = p.gradient(&c.argmax);
            assert!((g[0] - v).abs() < 1e-9);
        }
    }

    #[test]
    fn theta_identity_equals_quadratic() {
        let q = Piece::Quadratic { y: dv(&[0.7]), tilt: dv(&[0.2]), offset: -1.0, curvature: 3.0 };
        let t = Piece::Theta {
            y: dv(&[0.7]),
            tilt: dv(&[0.2]),
            offset: -1.0,
            coeff: 3.0,
            modulus: Modulus::Identity,
        };
        for x in [-2.0, 0.0, 0.7, 1.3] {
            assert!((q.value(&dv(&[x])) - t.value(&dv(&[x]))).abs() < 1e-12);
        }
        for v in [-1.0, 0.0, 2.0] {
            let (cq, ct) = (q.conjugate(&dv(&[v])), t.conjugate(&dv(&[v])));
            assert!((cq.value - ct.value).abs() < 1e-12);
        }
    }

    #[test]
    fn envelope_of_abs_model_is_half_square_plus_half() {
        let ev = EnvelopeEvaluator::new(abs_global_g());
        for i in 0..=80 {
            let x = -2.0 + 4.0 * i as f64 / 80.0;
            let r = ev.eval(&dv(&[x]));
            assert!(r.converged, "x={x}");
            assert!((r.value - (0.5 * x * x + 0.5)).abs() < 1e-9, "x={x}: {}", r.value);
            assert!((r.gradient[0] - x).abs() < 1e-7, "x={x}: {}", r.gradient[0]);
        }
        // Interpolation at the jets.
        for x in [-1.0, 1.0] {
            let r = ev.eval(&dv(&[x]));
            assert!((r.value - 1.0).abs() < 1e-10);
        }
        // g*(0) = -1/2.
        assert!((ev.g.conjugate(&dv(&[0.0])) - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn envelope_of_two_distant_paraboloids_uses_common_tangent() {
        // Vertices at -1 and +1, both depth 0: conv(g) is 0 on [-1, 1].
        let g = GFunction {
            dim: 1,
            pieces: vec![
                Piece::Quadratic { y: dv(&[-1.0]), tilt: dv(&[0.0]), offset: 0.0, curvature: 4.0 },
                Piece::Quadratic { y: dv(&[1.0]), tilt: dv(&[0.0]), offset: 0.0, curvature: 4.0 },
            ],
        };
        let ev = EnvelopeEvaluator::new(g);
        let r = ev.eval(&dv(&[0.0]));
        assert!(r.value.abs() < 1e-9, "conv at 0 should be 0, got {}", r.value);
        assert!(r.gradient[0].abs() < 1e-6);
        let r = ev.eval(&dv(&[0.6]));
        assert!(r.value.abs() < 1e-9);
        // Outside the tangency interval the envelope follows the paraboloid.
        let r = ev.eval(&dv(&[2.0]));
        assert!((r.value - 2.0).abs() < 1e-8, "got {}", r.value);
    }

    #[test]
    fn envelope_single_piece_short_circuits() {
        let g = GFunction {
            dim: 2,
            pieces: vec![Piece::Quadratic {
                y: dv(&[1.0, -1.0]),
                tilt: dv(&[0.5, 0.0]),
                offset: 2.0,
                curvature: 3.0,
            }],
        };
        let ev = EnvelopeEvaluator::new(g);
        let x = dv(&[0.0, 0.0]);
        let r = ev.eval(&x);
        assert_eq!(r.value, ev.g.pieces[0].value(&x));
        assert_eq!(r.kkt_residual, 0.0);
    }

    #[test]
    fn envelope_dominates_tangent_planes_2d() {
        // Jets of (x1^2 + x2^2): envelope must reproduce the quadratic hull
        // behavior between them and stay above all tangent planes.
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]];
        let pieces = pts
            .iter()
            .map(|p| {
                let y = dv(p);
                Piece::Quadratic {
                    tilt: &y * 2.0,
                    offset: y.norm_squared(),
                    y,
                    curvature: 2.0,
                }
            })
            .collect();
        let g = GFunction { dim: 2, pieces };
        let ev = EnvelopeEvaluator::new(g);
        // All pieces are tangent paraboloids of |x|^2 with matching curvature,
        // so conv(g) = |x|^2 wherever the min is attained-near; check a few.
        for p in [[0.3, 0.2], [0.0, 0.0], [-0.5, 0.4], [1.5, -0.7]] {
            let x = dv(&p);
            let r = ev.eval(&x);
            assert!(r.converged);
            assert!((r.value - x.norm_squared()).abs() < 1e-8, "at {p:?}: {}", r.value);
            assert!((&r.gradient - &x * 2.0).norm() < 1e-6);
        }
    }

    #[test]
    fn envelope_matches_caratheodory_oracle() {
        let g = GFunction {
            dim: 1,
            pieces: vec![
                Piece::Quadratic { y: dv(&[-1.0]), tilt: dv(&[-2.0]), offset: 0.5, curvature: 2.0 },
                Piece::Quadratic { y: dv(&[0.5]), tilt: dv(&[0.3]), offset: 0.0, curvature: 5.0 },
                Piece::Quadratic { y: dv(&[2.0]), tilt: dv(&[1.0]), offset: 0.3, curvature: 1.0 },
            ],
        };
        let ev = EnvelopeEvaluator::new(g.clone());
        let anchors: Vec<DVector<f64>> = vec![dv(&[-1.0]), dv(&[0.5]), dv(&[2.0])];
        for i in 0..20 {
            let x = dv(&[-3.0 + 6.0 * i as f64 / 19.0]);
            let dual = ev.eval(&x);
            let oracle = caratheodory_oracle(&g, &x, &anchors, 42);
            assert!(
                (dual.value - oracle).abs() <= 1e-4 * (1.0 + dual.value.abs()),
                "x={}: dual {} vs oracle {}",
                x[0],
                dual.value,
                oracle
            );
        }
    }

    #[test]
    fn second_difference_growth_is_controlled() {
        // Sampled second differences of F never exceed (n+1) times those of g.
        let g = abs_global_g();
        let ev = EnvelopeEvaluator::new(g.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst_f = 0.0f64;
        let mut worst_g = 0.0f64;
        for _ in 0..200 {
            let x = dv(&[rng.random_range(-2.0..2.0f64)]);
            let h = dv(&[rng.random_range(0.01..0.2f64)]);
            let sd = |f: &dyn Fn(&DVector<f64>) -> f64| {
                (f(&(&x + &h)) + f(&(&x - &h)) - 2.0 * f(&x)) / h.norm_squared()
            };
            worst_f = worst_f.max(sd(&|z| ev.eval(z).value));
            worst_g = worst_g.max(sd(&|z| g.value(z)));
        }
        assert!(worst_f.is_finite());
        assert!(worst_f <= 2.0 * worst_g * 1.01 + 1e-9, "{worst_f} vs {worst_g}");
    }

    #[test]
    fn projection_commutes_with_convexification() {
        // psi(u) = min((u-1)^2, (u+1)^2) on the x-axis of R^2.
        let psi_g = GFunction {
            dim: 1,
            pieces: vec![
                Piece::Quadratic { y: dv(&[1.0]), tilt: dv(&[0.0]), offset: 0.0, curvature: 2.0 },
                Piece::Quadratic { y: dv(&[-1.0]), tilt: dv(&[0.0]), offset: 0.0, curvature: 2.0 },
            ],
        };
        let sub = crate::jets::Subspace::new(2, vec![dv(&[1.0, 0.0])]).unwrap();
        let anchors = vec![dv(&[-1.0]), dv(&[1.0])];
        let samples =
            vec![dv(&[0.0, 5.0]), dv(&[0.3, -2.0]), dv(&[-0.8, 0.1]), dv(&[1.7, 3.3])];
        let worst = conv_projection_check(&psi_g, &sub, &anchors, &samples, 11);
        assert!(worst < 1e-4, "max discrepancy {worst}");
        // Spot value: conv at projected coordinate 0 is 0.
        let at = caratheodory_oracle(
            &FnObjective { dim: 2, f: |z: &DVector<f64>| psi_g.value(&sub.coords(z)) },
            &dv(&[0.0, 5.0]),
            &[dv(&[-1.0, 0.0]), dv(&[1.0, 0.0])],
            11,
        );
        assert!(at.abs() < 1e-5, "got {at}");
    }
}
