//! Feasibility conditions for convex extension of 1-jets.
//!
//! The central quantity is the minimal nonnegative constant `A` such that
//!
//! ```text
//! value(z) + <grad(z), x - z>  <=  value(y) + <grad(y), x - y> + (A/2) |x - y|^2
//! ```
//!
//! holds for all `x` in a prescribed domain (all of space, or a ball). The
//! supremum over jet pairs of the unrestricted constant is the minimal global
//! gradient-Lipschitz bound; ball-restricted suprema give the semi-global
//! constants `A_k` that certify a locally `C^{1,1}` convex extension even for
//! unbounded data.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::jets::{span_of_gradient_differences, Jet, JetSet, Subspace};
use crate::{Error, Result, Witness};

/// Restriction of the comparison point `x` in the pair inequality.
#[derive(Debug, Clone)]
pub enum Domain {
    AllSpace,
    Ball { center: DVector<f64>, radius: f64 },
}

/// Minimal nonnegative `A` for the ordered pair `(z, y)` over the given
/// domain; `f64::INFINITY` when no constant works.
///
/// With `c = value(z) + <grad(z), y - z> - value(y)` and
/// `d = grad(z) - grad(y)`, the unrestricted constant is `+inf` if `c > 0`,
/// or if `c = 0` with `d != 0`; it is `0` if `c <= 0` and `d = 0`; and it is
/// `|d|^2 / (2|c|)` when `c < 0`. Near-zero `c` is snapped to zero on a scale
/// relative to the data so that jets sampled from an affine function are not
/// misclassified by rounding noise.
pub fn pair_constant(z: &Jet, y: &Jet, domain: &Domain) -> f64 {
    let c = z.value + z.gradient.dot(&(&y.point - &z.point)) - y.value;
    let d = &z.gradient - &y.gradient;
    let ctol = 1e-11
        * (1.0 + z.value.abs() + y.value.abs() + z.gradient.norm() * (&y.point - &z.point).norm());
    let dtol = 1e-11 * (1.0 + z.gradient.norm() + y.gradient.norm());
    match domain {
        Domain::AllSpace => sup_ratio_unrestricted(c, &d, ctol, dtol),
        Domain::Ball { center, radius } => {
            let b = center - &y.point;
            sup_ratio_ball(c, &d, &b, *radius, ctol, dtol)
        }
    }
}

fn sup_ratio_unrestricted(c: f64, d: &DVector<f64>, ctol: f64, dtol: f64) -> f64 {
    let dn = d.norm();
    if c > ctol {
        f64::INFINITY
    } else if c >= -ctol {
        if dn <= dtol {
            0.0
        } else {
            f64::INFINITY
        }
    } else if dn <= dtol {
        0.0
    } else {
        dn * dn / (2.0 * c.abs())
    }
}

/// Sup of `h(u) = 2 (<d, u> + c) / |u|^2` over `u` in the ball of radius `r`
/// around `b`, clamped below at zero. `u = x - y`, `b = center - y`.
fn sup_ratio_ball(c: f64, d: &DVector<f64>, b: &DVector<f64>, r: f64, ctol: f64, dtol: f64) -> f64 {
    let dn = d.norm();
    let y_inside = b.norm() <= r + 1e-12 * (1.0 + r);
    if y_inside {
        // u = 0 is in the domain, where the inequality degenerates to c <= 0;
        // and for c = 0 any nonzero d makes h blow up along u -> 0.
        if c > ctol {
            return f64::INFINITY;
        }
        if c >= -ctol {
            return if dn <= dtol { 0.0 } else { f64::INFINITY };
        }
    }
    let h = |u: &DVector<f64>| -> f64 {
        let n2 = u.norm_squared();
        let num = 2.0 * (d.dot(u) + c);
        if n2 < 1e-30 {
            if num > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        } else {
            num / n2
        }
    };
    let mut best = f64::NEG_INFINITY;
    // Interior critical point: h is stationary only along d, at u = -2c/|d| d^.
    if dn > dtol {
        let ustar = d * (-2.0 * c / (dn * dn));
        if (&ustar - b).norm() <= r {
            best = best.max(h(&ustar));
        }
    }
    // Boundary of the ball.
    let n = d.len();
    if n == 1 {
        let lo = DVector::from_vec(vec![b[0] - r]);
        let hi = DVector::from_vec(vec![b[0] + r]);
        best = best.max(h(&lo)).max(h(&hi));
    } else {
        // h depends on u only through <d, u> and <b, u>, so the boundary
        // maximizer lies in span{d, b}; sweep that circle.
        let e1 = if dn > dtol {
            d / dn
        } else if b.norm() > 1e-300 {
            b / b.norm()
        } else {
            DVector::from_fn(n, |i, _| if i == 0 { 1.0 } else { 0.0 })
        };
        let mut e2 = b - &e1 * e1.dot(b);
        if e2.norm() > 1e-12 * (1.0 + b.norm()) {
            e2 /= e2.norm();
        } else {
            // Pick any unit vector orthogonal to e1.
            let mut cand = DVector::zeros(n);
            let imin = e1.iter().map(|x| x.abs()).enumerate().fold((0, f64::INFINITY), |acc, (i, v)| {
                if v < acc.1 {
                    (i, v)
                } else {
                    acc
                }
            });
            cand[imin.0] = 1.0;
            e2 = &cand - &e1 * e1.dot(&cand);
            e2 /= e2.norm();
        }
        let eval_angle = |t: f64| -> f64 {
            let u = b + (&e1 * t.cos() + &e2 * t.sin()) * r;
            h(&u)
        };
        let m = 720;
        let mut t_best = 0.0;
        let mut v_best = f64::NEG_INFINITY;
        for i in 0..m {
            let t = i as f64 / m as f64 * std::f64::consts::TAU;
            let v = eval_angle(t);
            if v > v_best {
                v_best = v;
                t_best = t;
            }
        }
        let spacing = std::f64::consts::TAU / m as f64;
        let refined = golden_max(eval_angle, t_best - spacing, t_best + spacing, 1e-10);
        best = best.max(v_best).max(refined);
    }
    best.max(0.0)
}

/// Golden-section maximization of a unimodal-near-peak function on `[a, b]`.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    fc.max(fd)
}

/// Minimal global gradient-Lipschitz constant compatible with the jets: the
/// sup over ordered pairs of unrestricted pair constants. `+inf` means no
/// globally `C^{1,1}` convex extension exists.
pub fn global_cw_constant(js: &JetSet) -> f64 {
    let mut m = 0.0f64;
    for z in &js.jets {
        for y in &js.jets {
            m = m.max(pair_constant(z, y, &Domain::AllSpace));
            if m.is_infinite() {
                return m;
            }
        }
    }
    m
}

/// Semi-global constants `A_k`, floored at 2 and nondecreasing in `k`.
#[derive(Debug, Clone)]
pub struct SemiglobalResult {
    /// `a[k-1]` is `A_k`; `+inf` past the first infeasible scale.
    pub a: Vec<f64>,
    pub witness: Option<Witness>,
}

impl SemiglobalResult {
    pub fn is_feasible(&self) -> bool {
        self.witness.is_none()
    }

    /// `A_{k(y)}` for the first `k >= 1` with `|y| <= k`.
    pub fn a_for_point(&self, y: &DVector<f64>) -> f64 {
        let k = first_scale(y);
        self.a[(k - 1).min(self.a.len() - 1)]
    }
}

/// First positive integer `k` with `|y| <= k`.
pub fn first_scale(y: &DVector<f64>) -> usize {
    (y.norm().ceil() as usize).max(1)
}

/// Default number of scales: enough for every jet to appear as a center.
pub fn default_k_max(js: &JetSet) -> usize {
    js.jets.iter().map(|j| first_scale(&j.point)).max().unwrap_or(1) + 1
}

/// Computes `A_k = max(2, sup pair constants)` for `k = 1..=k_max`, where the
/// center jet `y` ranges over jets with `|y| <= k` and the comparison point
/// over the ball `B(0, 4k)`. An infeasible pair yields a witness and `+inf`
/// for every scale from there on.
pub fn semiglobal_constants(js: &JetSet, k_max: usize) -> SemiglobalResult {
    let origin = DVector::zeros(js.dim);
    let mut a = Vec::with_capacity(k_max);
    let mut witness = None;
    for k in 1..=k_max {
        if witness.is_some() {
            a.push(f64::INFINITY);
            continue;
        }
        let domain =
            Domain::Ball { center: origin.clone(), radius: 4.0 * k as f64 };
        let mut ak = 2.0f64;
        'pairs: for (yi, y) in js.jets.iter().enumerate() {
            if y.point.norm() > k as f64 {
                continue;
            }
            for (zi, z) in js.jets.iter().enumerate() {
                let v = pair_constant(z, y, &domain);
                if v.is_infinite() {
                    witness =
                        Some(Witness { z_index: zi, y_index: yi, x: y.point.as_slice().to_vec() });
                    ak = f64::INFINITY;
                    break 'pairs;
                }
                ak = ak.max(v);
            }
        }
        // Nondecreasing by construction (domains grow with k), but enforce it.
        if let Some(prev) = a.last().copied() {
            ak = ak.max(prev);
        }
        a.push(ak);
    }
    SemiglobalResult { a, witness }
}

/// Everything `cmd_check` reports.
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub global_m: f64,
    pub a_sequence: Vec<(usize, f64)>,
    pub span_dim: usize,
    pub witness: Option<Witness>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.witness.is_none()
    }

    pub fn to_json(&self) -> serde_json::Value {
        fn num(v: f64) -> serde_json::Value {
            if v.is_finite() {
                serde_json::json!(v)
            } else {
                serde_json::json!("inf")
            }
        }
        serde_json::json!({
            "global_M": num(self.global_m),
            "A": self.a_sequence.iter().map(|(k, v)| serde_json::json!([k, num(*v)])).collect::<Vec<_>>(),
            "span_dim": self.span_dim,
            "witness": self.witness,
        })
    }
}

pub fn feasibility_report(js: &JetSet, k_max: Option<usize>) -> FeasibilityReport {
    let k_max = k_max.unwrap_or_else(|| default_k_max(js));
    let semi = semiglobal_constants(js, k_max);
    FeasibilityReport {
        global_m: global_cw_constant(js),
        a_sequence: semi.a.iter().enumerate().map(|(i, v)| (i + 1, *v)).collect(),
        span_dim: span_of_gradient_differences(js).dim(),
        witness: semi.witness,
    }
}

/// Whitney-type seminorm of the jet data over the ball `B(base, k)`.
///
/// For `k = 0` this is `|value| + |gradient|` at the base jet. For `k >= 1`
/// it is the max over jet pairs inside the ball of the two scaled
/// first-order ratios.
pub fn whitney_seminorm(js: &JetSet, k: usize) -> f64 {
    let x0 = &js.base().point;
    if k == 0 {
        return js.base().value.abs() + js.base().gradient.norm();
    }
    let r = k as f64;
    let inside: Vec<&Jet> = js.jets.iter().filter(|j| (&j.point - x0).norm() <= r).collect();
    let mut m = 0.0f64;
    for x in &inside {
        for y in &inside {
            let dxy = (&x.point - &y.point).norm();
            if dxy <= crate::jets::DUPLICATE_TOL {
                continue;
            }
            let taylor = x.value - y.value - y.gradient.dot(&(&x.point - &y.point));
            m = m.max(2.0 * taylor.abs() / (dxy * dxy));
            m = m.max((&x.gradient - &y.gradient).norm() / dxy);
        }
    }
    m
}

/// Lattice on which coercivity is certified: `points_per_axis` samples per
/// coordinate over `[base - radius, base + radius]`.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub radius: f64,
    pub points_per_axis: usize,
}

impl GridSpec {
    fn points(&self, center: &DVector<f64>) -> Vec<DVector<f64>> {
        let n = center.len();
        let ppa = self.points_per_axis.max(2);
        let mut pts = Vec::new();
        let mut idx = vec![0usize; n];
        loop {
            let p = DVector::from_fn(n, |i, _| {
                center[i] - self.radius + 2.0 * self.radius * idx[i] as f64 / (ppa - 1) as f64
            });
            pts.push(p);
            let mut carry = 0;
            while carry < n {
                idx[carry] += 1;
                if idx[carry] < ppa {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
            }
            if carry == n {
                break;
            }
        }
        pts
    }
}

/// A certificate of essential coercivity of the tangent-plane maximum `m`:
/// a tilt `v` in the convex hull of the gradients and a rate `delta` with
///
/// ```text
/// m(x) - value(base) - <v, x - base>  >=  delta |x - base| - 1/delta - 1e-8
/// ```
///
/// on every grid point.
#[derive(Debug, Clone, Serialize)]
pub struct CoercivityWitness {
    #[serde(with = "crate::jets::dvec_serde")]
    pub v: DVector<f64>,
    pub delta: f64,
    pub base_index: usize,
    /// Worst slack of the certified inequality over the grid.
    pub min_slack: f64,
}

/// Searches for a coercivity witness: candidate tilts are convex combinations
/// of the jet gradients, `delta` runs down the ladder `2^0 .. 2^-20`, and the
/// largest passing `delta` wins. Returns `None` when no ladder value passes.
pub fn coercivity_witness(js: &JetSet, grid: &GridSpec, seed: u64) -> Option<CoercivityWitness> {
    let base = js.base();
    let x0 = &base.point;
    let pts = grid.points(x0);
    // Precompute everything that does not depend on the tilt.
    let pre: Vec<(f64, DVector<f64>, f64)> = pts
        .iter()
        .map(|x| {
            let dx = x - x0;
            (js.tangent_max(x) - base.value, dx.clone(), dx.norm())
        })
        .collect();
    let ladder: Vec<f64> = (0..=20).map(|i| 0.5f64.powi(i)).collect();
    let best_delta_for = |v: &DVector<f64>| -> Option<(f64, f64)> {
        for &delta in &ladder {
            let mut min_slack = f64::INFINITY;
            let mut ok = true;
            for (m0, dx, ndx) in &pre {
                let slack = m0 - v.dot(dx) - delta * ndx + 1.0 / delta;
                if slack < -1e-8 {
                    ok = false;
                    break;
                }
                min_slack = min_slack.min(slack);
            }
            if ok {
                return Some((delta, min_slack));
            }
        }
        None
    };

    let grads: Vec<&DVector<f64>> = js.jets.iter().map(|j| &j.gradient).collect();
    let mean = grads.iter().fold(DVector::zeros(js.dim), |acc, g| acc + *g) / grads.len() as f64;
    let mut candidates: Vec<DVector<f64>> = vec![mean];
    candidates.extend(grads.iter().map(|g| (*g).clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..30 {
        // Random point of the gradient hull via exponential weights.
        let mut w: Vec<f64> = (0..grads.len()).map(|_| -f64::ln(rng.random::<f64>())).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|wi| *wi /= s);
        let v = grads
            .iter()
            .zip(&w)
            .fold(DVector::zeros(js.dim), |acc, (g, wi)| acc + *g * *wi);
        candidates.push(v);
    }

    let mut best: Option<(DVector<f64>, f64, f64)> = None;
    let better = |cand: &(f64, f64), cur: &Option<(DVector<f64>, f64, f64)>| -> bool {
        match cur {
            None => true,
            Some((_, d, s)) => cand.0 > *d || (cand.0 == *d && cand.1 > *s),
        }
    };
    for v in &candidates {
        if let Some(ds) = best_delta_for(v) {
            if better(&ds, &best) {
                best = Some((v.clone(), ds.0, ds.1));
            }
        }
    }
    // Local refinement: pull the incumbent tilt toward each gradient.
    if let Some((v0, _, _)) = best.clone() {
        let mut v = v0;
        for _ in 0..10 {
            let mut improved = false;
            for g in &grads {
                for t in [0.5, 0.25, 0.1] {
                    let cand = &v * (1.0 - t) + *g * t;
                    if let Some(ds) = best_delta_for(&cand) {
                        if better(&ds, &best) {
                            best = Some((cand.clone(), ds.0, ds.1));
                            v = cand;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    best.map(|(v, delta, min_slack)| CoercivityWitness {
        v,
        delta,
        base_index: js.base_point_index,
        min_slack,
    })
}

/// Adjoins auxiliary jets and verifies that the gradient differences of the
/// enlarged family span exactly the target subspace `x_target`.
pub fn augment(js: &JetSet, aux: &[Jet], x_target: &Subspace) -> Result<JetSet> {
    let mut jets = js.jets.clone();
    for a in aux {
        let mut a = a.clone();
        a.is_auxiliary = true;
        jets.push(a);
    }
    let combined = JetSet::new(js.dim, jets, js.base_point_index)?;
    let span = span_of_gradient_differences(&combined);
    let tol = 1e-8;
    if !x_target.contains_subspace(&span, tol) {
        return Err(Error::SpanNotContained);
    }
    if span.dim() != x_target.dim() {
        return Err(Error::SpanMismatch);
    }
    Ok(combined)
}

/// Decomposition behind essential coercivity of the tangent-plane maximum:
/// the span `X` of gradient differences and the tilt `v`, the component of
/// the base gradient orthogonal to `X`. The maximum minus `<v, .>` then
/// depends only on the projection onto `X`.
#[derive(Debug, Clone)]
pub struct MinExtDecomposition {
    pub x: Subspace,
    pub v: DVector<f64>,
}

pub fn decompose_min_ext(js: &JetSet) -> MinExtDecomposition {
    let x = span_of_gradient_differences(js);
    let v = x.complement(&js.base().gradient);
    MinExtDecomposition { x, v }
}
