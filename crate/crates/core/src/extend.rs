//! High-level extension operators.
//!
//! All paths produce an [`ExtensionModel`]: a queryable `F` with value and
//! gradient everywhere, built from one of
//! - `global`: uniform-curvature paraboloid pieces with the minimal global
//!   gradient-Lipschitz constant (requires bounded curvature data),
//! - `ak`: per-jet curvatures `A_k(y) + 4 ||G||_inf + 1` from the semi-global
//!   constants (the bounded-gradient locally `C^{1,1}` formula),
//! - `phi`: localizer-augmented pieces `t_y + <xi_y, x-y> + phi_y(x) + a|x-y|^2`,
//! - `projected`: reduction to the span `X` of gradient differences, extension
//!   inside `X`, and the affine lift `F(x) = F_flat(P x) + <v, x>`,
//! - `c1omega`: pieces with a modulus-of-continuity growth profile,
//! - `nonconvex`: convexification by adding a radial ladder function `psi`,
//!   extending the shifted jet, and subtracting `psi` again.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::conditions::{
    augment, default_k_max, global_cw_constant, pair_constant, semiglobal_constants, Domain,
};
use crate::envelope::{EnvelopeEvaluator, EvalResult, GFunction, Piece};
use crate::jets::{span_of_gradient_differences, Jet, JetSet, Modulus, Subspace};
use crate::smoothing::{phi_build, PhiFamily};
use crate::{Error, Result, Witness};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    Global,
    CoerciveAk,
    CoercivePhi,
    Projected,
    C1Omega,
    Nonconvex,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::Global => "global",
            MethodTag::CoerciveAk => "ak",
            MethodTag::CoercivePhi => "phi",
            MethodTag::Projected => "projected",
            MethodTag::C1Omega => "c1omega",
            MethodTag::Nonconvex => "nonconvex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoerciveVariant {
    Ak,
    Phi,
}

#[derive(Debug, Clone)]
pub struct ExtendOptions {
    /// The free parameter in the localizer-augmented pieces.
    pub a: f64,
    pub k_max: Option<usize>,
    pub variant: CoerciveVariant,
}

impl Default for ExtendOptions {
    fn default() -> Self {
        ExtendOptions { a: 0.5, k_max: None, variant: CoerciveVariant::Ak }
    }
}

/// Radial convexifier for the nonconvex path: a sum of shifted squared
/// ramps, one per integer shell, scaled by user curvature bounds. With the
/// optional rescale factor `R`, evaluates `psi(R (x - center))`.
#[derive(Debug, Clone)]
pub struct PsiLadder {
    /// `mks[i]` bounds the gradient Lipschitz constant on the ball of radius
    /// `i + 1`; the shell `k` term uses the bound at radius `8k` (clamped to
    /// the last entry). Empty means `psi = 0`.
    pub mks: Vec<f64>,
    pub scale_r: f64,
    pub center: DVector<f64>,
}

impl PsiLadder {
    fn m_at(&self, radius_index: usize) -> f64 {
        let i = radius_index.min(self.mks.len()).max(1);
        self.mks[i - 1]
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        if self.mks.is_empty() {
            return 0.0;
        }
        let u = (x - &self.center) * self.scale_r;
        let r = u.norm();
        let mut s = 0.0;
        let mut k = 1usize;
        while ((k - 1) as f64) < r {
            let t = r - (k - 1) as f64;
            s += (1.0 + self.m_at(8 * k)) * t * t;
            k += 1;
        }
        s
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        if self.mks.is_empty() {
            return DVector::zeros(n);
        }
        let u = (x - &self.center) * self.scale_r;
        let r = u.norm();
        if r < 1e-300 {
            return DVector::zeros(n);
        }
        let mut radial = 0.0;
        let mut k = 1usize;
        while ((k - 1) as f64) < r {
            radial += 2.0 * (1.0 + self.m_at(8 * k)) * (r - (k - 1) as f64);
            k += 1;
        }
        // Chain rule through u = R (x - center): gradient is radial in u.
        &u * (radial / r * self.scale_r)
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Full(EnvelopeEvaluator),
    Lifted {
        eval: Option<EnvelopeEvaluator>,
        constant: f64,
        x: Subspace,
        v: DVector<f64>,
    },
    Shifted {
        eval: EnvelopeEvaluator,
        psi: PsiLadder,
    },
}

/// A constructed extension `F`, queryable anywhere.
#[derive(Debug, Clone)]
pub struct ExtensionModel {
    pub method: MethodTag,
    pub dim: usize,
    pub a: f64,
    /// Semi-global constants of the (possibly reduced or shifted) jet set the
    /// envelope was built on; empty for the global method.
    pub a_sequence: Vec<f64>,
    pub g_norm: f64,
    pub base_point: DVector<f64>,
    /// `(|y|, curvature bound)` per piece, in build space; feeds the
    /// seminorm-bound profile `nu`.
    pub nu_pairs: Vec<(f64, f64)>,
    inner: Inner,
}

impl ExtensionModel {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.eval(x).value
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eval(x).gradient
    }

    /// Full evaluation in ambient coordinates.
    pub fn eval(&self, x: &DVector<f64>) -> EvalResult {
        match &self.inner {
            Inner::Full(ev) => ev.eval(x),
            Inner::Lifted { eval, constant, x: sub, v } => match eval {
                None => EvalResult {
                    value: constant + v.dot(x),
                    gradient: v.clone(),
                    kkt_residual: 0.0,
                    converged: true,
                    approximate: false,
                },
                Some(ev) => {
                    let r = ev.eval(&sub.coords(x));
                    EvalResult {
                        value: r.value + v.dot(x),
                        gradient: sub.lift(&r.gradient) + v,
                        kkt_residual: r.kkt_residual,
                        converged: r.converged,
                        approximate: r.approximate,
                    }
                }
            },
            Inner::Shifted { eval, psi } => {
                let r = eval.eval(x);
                EvalResult {
                    value: r.value - psi.value(x),
                    gradient: r.gradient - psi.gradient(x),
                    kkt_residual: r.kkt_residual,
                    converged: r.converged,
                    approximate: r.approximate,
                }
            }
        }
    }

    /// Conjugate of the piece minimum at `v` (the dual objective before the
    /// envelope's sup). Only available for models without a lift or shift.
    pub fn dual_value(&self, v: &DVector<f64>) -> Option<f64> {
        match &self.inner {
            Inner::Full(ev) => Some(ev.g.conjugate(v)),
            _ => None,
        }
    }

    pub fn lift(&self) -> Option<(&Subspace, &DVector<f64>)> {
        match &self.inner {
            Inner::Lifted { x, v, .. } => Some((x, v)),
            _ => None,
        }
    }

    pub fn is_approximate(&self) -> bool {
        match &self.inner {
            Inner::Full(ev) => !ev.g.has_exact_conjugates(),
            Inner::Lifted { eval, .. } => {
                eval.as_ref().map(|e| !e.g.has_exact_conjugates()).unwrap_or(false)
            }
            Inner::Shifted { eval, .. } => !eval.g.has_exact_conjugates(),
        }
    }

    /// Nondecreasing curvature profile `nu(R)` derived from the per-piece
    /// bounds: the largest piece curvature among jets within radius `R`,
    /// minus the envelope margin `2a`, clamped at zero.
    pub fn nu_profile(&self) -> impl Fn(f64) -> f64 + '_ {
        let mut pairs = self.nu_pairs.clone();
        pairs.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
        let mut cummax = 0.0f64;
        for p in pairs.iter_mut() {
            cummax = cummax.max(p.1);
            p.1 = cummax;
        }
        let a2 = 2.0 * self.a;
        move |r: f64| {
            let mut val = pairs.first().map(|p| p.1).unwrap_or(0.0);
            for p in &pairs {
                if p.0 <= r {
                    val = p.1;
                } else {
                    break;
                }
            }
            (val - a2).max(0.0)
        }
    }
}

/// First pair admitting no constant, in the same scan order as the
/// semi-global search (`y` outer, `z` inner), or `None` when feasible.
fn feasibility_scan(js: &JetSet) -> Option<Witness> {
    for (yi, y) in js.jets.iter().enumerate() {
        for (zi, z) in js.jets.iter().enumerate() {
            if pair_constant(z, y, &Domain::AllSpace).is_infinite() {
                return Some(Witness { z_index: zi, y_index: yi, x: y.point.as_slice().to_vec() });
            }
        }
    }
    None
}

fn infeasibility_witness(js: &JetSet) -> Witness {
    feasibility_scan(js)
        .unwrap_or_else(|| Witness { z_index: 0, y_index: 0, x: js.base().point.as_slice().to_vec() })
}

/// Globally `C^{1,1}` extension with the minimal uniform curvature: every
/// piece is a paraboloid of opening `M = global_cw_constant`.
pub fn extend_global(js: &JetSet, opts: &ExtendOptions) -> Result<ExtensionModel> {
    let m = global_cw_constant(js);
    if m.is_infinite() {
        return Err(Error::Infeasible { witness: infeasibility_witness(js) });
    }
    let pieces: Vec<Piece> = if m <= 0.0 {
        // All tangent planes coincide; F is that single affine function.
        let b = js.base();
        vec![Piece::Quadratic {
            y: b.point.clone(),
            tilt: b.gradient.clone(),
            offset: b.value,
            curvature: 0.0,
        }]
    } else {
        js.jets
            .iter()
            .map(|j| Piece::Quadratic {
                y: j.point.clone(),
                tilt: j.gradient.clone(),
                offset: j.value,
                curvature: m,
            })
            .collect()
    };
    let nu_pairs = js.jets.iter().map(|j| (j.point.norm(), m.max(0.0))).collect();
    Ok(ExtensionModel {
        method: MethodTag::Global,
        dim: js.dim,
        a: opts.a,
        a_sequence: Vec::new(),
        g_norm: js.gradient_sup_norm(),
        base_point: js.base().point.clone(),
        nu_pairs,
        inner: Inner::Full(EnvelopeEvaluator::new(GFunction { dim: js.dim, pieces })),
    })
}

/// Wraps an explicit piece family as a model. Used by harnesses that supply
/// hand-chosen localizers instead of the constructed ones; `nu_pairs` are
/// taken from the quadratic piece curvatures.
pub fn model_from_pieces(
    dim: usize,
    a: f64,
    base_point: DVector<f64>,
    pieces: Vec<Piece>,
) -> ExtensionModel {
    let nu_pairs = pieces
        .iter()
        .map(|p| match p {
            Piece::Quadratic { y, curvature, .. } => (y.norm(), *curvature),
            Piece::Theta { y, coeff, .. } => (y.norm(), *coeff),
            Piece::PhiAugmented { y, a: pa, .. } => (y.norm(), 2.0 * pa),
        })
        .collect();
    let g_norm = pieces
        .iter()
        .map(|p| match p {
            Piece::Quadratic { tilt, .. }
            | Piece::Theta { tilt, .. }
            | Piece::PhiAugmented { tilt, .. } => tilt.norm(),
        })
        .fold(0.0, f64::max);
    ExtensionModel {
        method: MethodTag::CoercivePhi,
        dim,
        a,
        a_sequence: Vec::new(),
        g_norm,
        base_point,
        nu_pairs,
        inner: Inner::Full(EnvelopeEvaluator::new(GFunction { dim, pieces })),
    }
}

struct CoerciveBuild {
    eval: EnvelopeEvaluator,
    a_sequence: Vec<f64>,
    nu_pairs: Vec<(f64, f64)>,
    g_norm: f64,
}

/// Shared core of the coercive paths: semi-global constants plus pieces.
fn build_coercive(
    js: &JetSet,
    opts: &ExtendOptions,
    modulus: Option<&Modulus>,
) -> Result<CoerciveBuild> {
    let k_max = opts.k_max.unwrap_or_else(|| default_k_max(js));
    let semi = semiglobal_constants(js, k_max);
    if let Some(w) = &semi.witness {
        return Err(Error::Infeasible { witness: w.clone() });
    }
    let g_norm = js.gradient_sup_norm();
    let curvature_of = |jet: &Jet| semi.a_for_point(&jet.point) + 4.0 * g_norm + 1.0;
    let nu_pairs: Vec<(f64, f64)> = js
        .jets
        .iter()
        .map(|j| {
            let ak = semi.a_for_point(&j.point);
            (j.point.norm(), (ak + 4.0 * g_norm + 1.0).max(2.0 * ak + 2.0 * opts.a))
        })
        .collect();
    let pieces: Vec<Piece> = match (modulus, opts.variant) {
        (Some(m), _) => js
            .jets
            .iter()
            .map(|j| Piece::Theta {
                y: j.point.clone(),
                tilt: j.gradient.clone(),
                offset: j.value,
                coeff: curvature_of(j),
                modulus: m.clone(),
            })
            .collect(),
        (None, CoerciveVariant::Ak) => js
            .jets
            .iter()
            .map(|j| Piece::Quadratic {
                y: j.point.clone(),
                tilt: j.gradient.clone(),
                offset: j.value,
                curvature: curvature_of(j),
            })
            .collect(),
        (None, CoerciveVariant::Phi) => {
            let family = phi_build(js, &semi)?;
            js.jets
                .iter()
                .zip(family.entries.iter())
                .map(|(j, phi)| Piece::PhiAugmented {
                    y: j.point.clone(),
                    tilt: j.gradient.clone(),
                    offset: j.value,
                    a: opts.a,
                    phi: Box::new(phi.clone()),
                })
                .collect()
        }
    };
    Ok(CoerciveBuild {
        eval: EnvelopeEvaluator::new(GFunction { dim: js.dim, pieces }),
        a_sequence: semi.a,
        nu_pairs,
        g_norm,
    })
}

/// Locally `C^{1,1}` convex extension for essentially coercive data (the
/// gradient differences must span the whole space).
pub fn extend_c11loc(js: &JetSet, opts: &ExtendOptions) -> Result<ExtensionModel> {
    // Infeasibility outranks a deficient span: a witness is more informative.
    if let Some(w) = feasibility_scan(js) {
        return Err(Error::Infeasible { witness: w });
    }
    if !span_of_gradient_differences(js).is_full() {
        return Err(Error::SpanDeficient);
    }
    let b = build_coercive(js, opts, None)?;
    Ok(ExtensionModel {
        method: match opts.variant {
            CoerciveVariant::Ak => MethodTag::CoerciveAk,
            CoerciveVariant::Phi => MethodTag::CoercivePhi,
        },
        dim: js.dim,
        a: opts.a,
        a_sequence: b.a_sequence,
        g_norm: b.g_norm,
        base_point: js.base().point.clone(),
        nu_pairs: b.nu_pairs,
        inner: Inner::Full(b.eval),
    })
}

struct Reduction {
    reduced: Option<JetSet>,
    constant: f64,
    x: Subspace,
    v: DVector<f64>,
}

/// Augments, checks well-definedness, and projects the jets onto `X`.
fn reduce_onto(js: &JetSet, x_target: Option<&Subspace>, aux: &[Jet]) -> Result<Reduction> {
    let combined = match x_target {
        Some(x) => {
            let span_y = span_of_gradient_differences(js);
            if !x.contains_subspace(&span_y, 1e-8) {
                return Err(Error::SpanNotContained);
            }
            augment(js, aux, x)?
        }
        None => augment(js, aux, &{
            // Target defaults to the span of the combined family.
            let mut jets = js.jets.clone();
            jets.extend(aux.iter().cloned());
            let all = JetSet::new(js.dim, jets, js.base_point_index)?;
            span_of_gradient_differences(&all)
        })?,
    };
    let x = match x_target {
        Some(t) => t.clone(),
        None => span_of_gradient_differences(&combined),
    };
    let v = x.complement(&js.base().gradient);
    let scale = 1.0
        + combined.jets.iter().map(|j| j.value.abs()).fold(0.0, f64::max)
        + combined.gradient_sup_norm();
    let ptol = 1e-8 * (1.0 + combined.jets.iter().map(|j| j.point.norm()).fold(0.0, f64::max));

    let mut reduced_jets: Vec<Jet> = Vec::new();
    let mut origin: Vec<usize> = Vec::new();
    let mut base_red = 0usize;
    for (i, jet) in combined.jets.iter().enumerate() {
        let z = x.coords(&jet.point);
        let fb = jet.value - v.dot(&jet.point);
        let gb = x.coords(&(&jet.gradient - &v));
        let mut dup = None;
        for (ri, rj) in reduced_jets.iter().enumerate() {
            if (&rj.point - &z).norm() <= ptol {
                dup = Some(ri);
                break;
            }
        }
        match dup {
            Some(ri) => {
                // Same projected point: the original jets must carry the same
                // gradient and reduced value, else no reduction exists.
                let other = &combined.jets[origin[ri]];
                if (&other.gradient - &jet.gradient).norm() > 1e-8 * scale
                    || (reduced_jets[ri].value - fb).abs() > 1e-8 * scale
                {
                    return Err(Error::IllDefinedReduction(origin[ri], i));
                }
                if i == combined.base_point_index {
                    base_red = ri;
                }
            }
            None => {
                let mut nj = Jet::new(z, fb, gb);
                nj.is_auxiliary = jet.is_auxiliary;
                if i == combined.base_point_index {
                    base_red = reduced_jets.len();
                }
                origin.push(i);
                reduced_jets.push(nj);
            }
        }
    }
    if x.dim() == 0 {
        let constant = reduced_jets[base_red].value;
        return Ok(Reduction { reduced: None, constant, x, v });
    }
    let reduced = JetSet::new(x.dim(), reduced_jets, base_red)?;
    Ok(Reduction { reduced: Some(reduced), constant: 0.0, x, v })
}

/// Convex locally `C^{1,1}` extension along a subspace `X` containing the
/// span of gradient differences, lifted affinely across `X`-orthogonal
/// directions: `F(x) = F_flat(P x) + <v, x>`.
pub fn extend_with_projection(
    js: &JetSet,
    x_target: Option<&Subspace>,
    aux: &[Jet],
    opts: &ExtendOptions,
) -> Result<ExtensionModel> {
    let red = reduce_onto(js, x_target, aux)?;
    match &red.reduced {
        None => Ok(ExtensionModel {
            method: MethodTag::Projected,
            dim: js.dim,
            a: opts.a,
            a_sequence: Vec::new(),
            g_norm: js.gradient_sup_norm(),
            base_point: js.base().point.clone(),
            nu_pairs: vec![(0.0, 0.0)],
            inner: Inner::Lifted { eval: None, constant: red.constant, x: red.x, v: red.v },
        }),
        Some(reduced) => {
            let b = build_coercive(reduced, opts, None)?;
            Ok(ExtensionModel {
                method: MethodTag::Projected,
                dim: js.dim,
                a: opts.a,
                a_sequence: b.a_sequence,
                g_norm: b.g_norm,
                base_point: js.base().point.clone(),
                nu_pairs: b.nu_pairs,
                inner: Inner::Lifted {
                    eval: Some(b.eval),
                    constant: 0.0,
                    x: red.x,
                    v: red.v,
                },
            })
        }
    }
}

/// Convex extension with gradient modulus of continuity `omega`: the pieces
/// grow like `theta(|P(x - y)|)` with `theta` the primitive of `omega`.
/// Feasibility is certified with the quadratic semi-global constants (a
/// surrogate; for the identity modulus this path coincides with the plain
/// quadratic one).
pub fn extend_c1omega(
    js: &JetSet,
    omega: &Modulus,
    x_target: Option<&Subspace>,
    aux: &[Jet],
    opts: &ExtendOptions,
) -> Result<ExtensionModel> {
    omega.validate()?;
    let red = reduce_onto(js, x_target, aux)?;
    match &red.reduced {
        None => Ok(ExtensionModel {
            method: MethodTag::C1Omega,
            dim: js.dim,
            a: opts.a,
            a_sequence: Vec::new(),
            g_norm: js.gradient_sup_norm(),
            base_point: js.base().point.clone(),
            nu_pairs: vec![(0.0, 0.0)],
            inner: Inner::Lifted { eval: None, constant: red.constant, x: red.x, v: red.v },
        }),
        Some(reduced) => {
            let b = build_coercive(reduced, opts, Some(omega))?;
            Ok(ExtensionModel {
                method: MethodTag::C1Omega,
                dim: js.dim,
                a: opts.a,
                a_sequence: b.a_sequence,
                g_norm: b.g_norm,
                base_point: js.base().point.clone(),
                nu_pairs: b.nu_pairs,
                inner: Inner::Lifted {
                    eval: Some(b.eval),
                    constant: 0.0,
                    x: red.x,
                    v: red.v,
                },
            })
        }
    }
}

fn shift_jets(js: &JetSet, psi: &PsiLadder) -> JetSet {
    let jets = js
        .jets
        .iter()
        .map(|j| {
            let mut nj = j.clone();
            nj.value += psi.value(&j.point);
            nj.gradient += psi.gradient(&j.point);
            nj
        })
        .collect();
    JetSet { dim: js.dim, base_point_index: js.base_point_index, jets }
}

fn has_affine_basis(js: &JetSet) -> bool {
    let x0 = &js.base().point;
    let diffs: Vec<DVector<f64>> = js
        .jets
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != js.base_point_index)
        .map(|(_, j)| &j.point - x0)
        .collect();
    let scale = 1.0 + diffs.iter().map(|d| d.norm()).fold(0.0, f64::max);
    Subspace::from_spanning(js.dim, &diffs, 1e-9 * scale).is_full()
}

/// Not-necessarily-convex locally `C^{1,1}` extension: add the radial ladder
/// `psi` built from the user curvature bounds, extend the shifted jet with
/// the convex pipeline, and subtract `psi`. When the shifted gradient span is
/// deficient, retry with `psi(R x)` for doubling `R` (possible only when the
/// points contain an affine basis).
pub fn extend_nonconvex(js: &JetSet, mks: &[f64], opts: &ExtendOptions) -> Result<ExtensionModel> {
    if mks.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
        return Err(Error::InvalidParameter("curvature bounds must be finite and >= 0".into()));
    }
    let center = js.base().point.clone();
    let mut r = 1.0f64;
    let cap = (1u64 << 20) as f64;
    let (psi, shifted) = loop {
        let psi = PsiLadder { mks: mks.to_vec(), scale_r: r, center: center.clone() };
        let shifted = shift_jets(js, &psi);
        if span_of_gradient_differences(&shifted).is_full() {
            break (psi, shifted);
        }
        if mks.is_empty() {
            return Err(Error::SpanDeficient);
        }
        if !has_affine_basis(js) || r >= cap {
            return Err(Error::SpanUnfixable);
        }
        r *= 2.0;
    };
    let b = build_coercive(&shifted, opts, None)?;
    Ok(ExtensionModel {
        method: MethodTag::Nonconvex,
        dim: js.dim,
        a: opts.a,
        a_sequence: b.a_sequence,
        g_norm: b.g_norm,
        base_point: js.base().point.clone(),
        nu_pairs: b.nu_pairs,
        inner: Inner::Shifted { eval: b.eval, psi },
    })
}

/// Halton low-discrepancy sequence in the unit cube.
fn halton(index: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [usize; 3] = [2, 3, 5];
    (0..dim)
        .map(|d| {
            let b = PRIMES[d % PRIMES.len()];
            let mut f = 1.0;
            let mut r = 0.0;
            let mut i = index + 1;
            while i > 0 {
                f /= b as f64;
                r += f * (i % b) as f64;
                i /= b;
            }
            r
        })
        .collect()
}

/// Sampled lower bound on the gradient-Lipschitz seminorm of the model on
/// `B(base, k)`: low-discrepancy point pairs plus local refinement around the
/// incumbent pair. `k = 0` returns `|F(base)| + |grad F(base)|`.
pub fn rho_k_estimate(model: &ExtensionModel, k: usize, samples: usize, seed: u64) -> f64 {
    let x0 = &model.base_point;
    if k == 0 {
        let r = model.eval(x0);
        return r.value.abs() + r.gradient.norm();
    }
    let n = model.dim;
    let radius = k as f64;
    let mut pts: Vec<DVector<f64>> = Vec::new();
    let mut idx = 0;
    while pts.len() < samples.max(8) && idx < 50 * samples.max(8) {
        let h = halton(idx, n);
        idx += 1;
        let p = DVector::from_iterator(n, h.iter().map(|c| 2.0 * c - 1.0));
        if p.norm() <= 1.0 {
            pts.push(x0 + p * radius);
        }
    }
    let grads: Vec<DVector<f64>> = pts.iter().map(|p| model.gradient(p)).collect();
    let mut best = 0.0f64;
    let mut best_pair = (0usize, 1usize.min(pts.len() - 1));
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let dp = (&pts[i] - &pts[j]).norm();
            if dp > 1e-9 {
                let ratio = (&grads[i] - &grads[j]).norm() / dp;
                if ratio > best {
                    best = ratio;
                    best_pair = (i, j);
                }
            }
        }
    }
    // Refinement: jitter the incumbent pair with shrinking scale.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pa, mut pb) = (pts[best_pair.0].clone(), pts[best_pair.1].clone());
    let mut sigma = 0.25 * radius;
    for _ in 0..120 {
        let jitter = |p: &DVector<f64>, rng: &mut ChaCha8Rng| {
            let q = p + DVector::from_fn(n, |_, _| rng.random_range(-sigma..sigma));
            if (&q - x0).norm() <= radius {
                q
            } else {
                x0 + (&q - x0) * (radius / (&q - x0).norm())
            }
        };
        let (qa, qb) = (jitter(&pa, &mut rng), jitter(&pb, &mut rng));
        let dp = (&qa - &qb).norm();
        if dp > 1e-9 {
            let ratio = (model.gradient(&qa) - model.gradient(&qb)).norm() / dp;
            if ratio > best {
                best = ratio;
                pa = qa;
                pb = qb;
            } else {
                sigma *= 0.93;
            }
        } else {
            sigma *= 0.93;
        }
    }
    best
}

/// The a-priori bound on the gradient-Lipschitz seminorm over `B(0, k)` in
/// terms of the curvature profile `nu`, the coercivity rate `delta`, and the
/// base-jet data: `(n+1) nu(eta(...))` with
/// `eta(R) = max(2R, R + (R + R0) sqrt(1 + nu(R)/(2a)))`.
#[allow(clippy::too_many_arguments)]
pub fn seminorm_bound(
    nu: &dyn Fn(f64) -> f64,
    a: f64,
    delta: f64,
    n: usize,
    k: f64,
    r0: f64,
    f_z0_abs: f64,
    g_z0_norm: f64,
) -> Result<f64> {
    if delta <= 0.0 {
        return Err(Error::InvalidParameter("delta must be positive".into()));
    }
    let eta = |r: f64| (2.0 * r).max(r + (r + r0) * (1.0 + nu(r) / (2.0 * a)).sqrt());
    let np1 = (n + 1) as f64;
    let inner = np1
        * (k + (1.0 / delta) * np1 * (f_z0_abs + 2.0 * k * g_z0_norm + 2.0 * k * k * nu(k))
            + 1.0 / (delta * delta));
    Ok(np1 * nu(eta(inner)))
}

/// Sampled upper bound on the best localizer seminorm over `B(base, k)`:
/// the largest sampled gradient-Lipschitz ratio of the constructed `phi_y`
/// among jets with `|y| <= k`.
pub fn mu_upper_bound(
    js: &JetSet,
    family: &PhiFamily,
    k: usize,
    samples: usize,
    seed: u64,
) -> f64 {
    let x0 = &js.base().point;
    let n = js.dim;
    let radius = k as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bound = 0.0f64;
    for phi in &family.entries {
        if phi.jet.point.norm() > radius {
            continue;
        }
        for _ in 0..samples.max(16) {
            let dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
            let p = x0 + &dir * (radius * rng.random::<f64>() / dir.norm().max(1e-12));
            let dir2 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
            let q = x0 + &dir2 * (radius * rng.random::<f64>() / dir2.norm().max(1e-12));
            let dp = (&p - &q).norm();
            if dp > 1e-9 {
                bound = bound.max((phi.eval(&p).1 - phi.eval(&q).1).norm() / dp);
            }
        }
    }
    bound
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn jet(p: &[f64], t: f64, g: &[f64]) -> Jet {
        Jet::new(dv(p), t, dv(g))
    }

    fn abs_jets_1d() -> JetSet {
        JetSet::new(1, vec![jet(&[-1.0], 1.0, &[-1.0]), jet(&[1.0], 1.0, &[1.0])], 0).unwrap()
    }

    fn check_interpolation(model: &ExtensionModel, js: &JetSet) {
        for j in &js.jets {
            let r = model.eval(&j.point);
            assert!(
                (r.value - j.value).abs() <= 1e-6 * (1.0 + j.value.abs()),
                "value at {:?}: {} vs {}",
                j.point.as_slice(),
                r.value,
                j.value
            );
            // Central finite differences of F against the prescribed gradient.
            let h = 1e-6 * (1.0 + j.point.norm());
            for c in 0..js.dim {
                let mut xp = j.point.clone();
                let mut xm = j.point.clone();
                xp[c] += h;
                xm[c] -= h;
                let fd = (model.value(&xp) - model.value(&xm)) / (2.0 * h);
                assert!(
                    (fd - j.gradient[c]).abs() <= 1e-4 * (1.0 + j.gradient.norm()),
                    "gradient[{c}] at {:?}: fd {fd} vs {}",
                    j.point.as_slice(),
                    j.gradient[c]
                );
            }
        }
    }

    #[test]
    fn global_model_of_abs_is_half_square() {
        let js = abs_jets_1d();
        let model = extend_global(&js, &ExtendOptions::default()).unwrap();
        for i in 0..=100 {
            let x = -2.0 + 4.0 * i as f64 / 100.0;
            let v = model.value(&dv(&[x]));
            assert!((v - (0.5 * x * x + 0.5)).abs() < 1e-8, "x={x}: {v}");
        }
        check_interpolation(&model, &js);
    }

    #[test]
    fn global_model_of_affine_data_is_affine() {
        let js = JetSet::new(
            2,
            vec![jet(&[0.0, 0.0], 1.0, &[2.0, -1.0]), jet(&[1.0, 3.0], 0.0, &[2.0, -1.0])],
            0,
        )
        .unwrap();
        let model = extend_global(&js, &ExtendOptions::default()).unwrap();
        // Direct affine formula: f(x) = 1 + <g, x - 0>.
        let x = dv(&[5.0, -7.0]);
        assert!((model.value(&x) - (1.0 + dv(&[2.0, -1.0]).dot(&x))).abs() < 1e-12);
    }

    #[test]
    fn c11loc_ak_curvature_constant_and_interpolation() {
        let js = abs_jets_1d();
        let model = extend_c11loc(&js, &ExtendOptions::default()).unwrap();
        assert_eq!(model.method, MethodTag::CoerciveAk);
        // A_k = 2, ||G|| = 1 => per-piece curvature 7.
        assert_eq!(model.a_sequence[0], 2.0);
        check_interpolation(&model, &js);
        // Midpoint convexity on a few segments.
        for i in 0..50 {
            let a = -3.0 + 6.0 * i as f64 / 50.0;
            let b = a + 1.3;
            let mid = 0.5 * (a + b);
            let f = |t: f64| model.value(&dv(&[t]));
            assert!(f(mid) <= 0.5 * (f(a) + f(b)) + 1e-8);
        }
    }

    #[test]
    fn c11loc_phi_variant_interpolates() {
        let js = abs_jets_1d();
        let model = extend_c11loc(
            &js,
            &ExtendOptions { variant: CoerciveVariant::Phi, ..Default::default() },
        )
        .unwrap();
        assert_eq!(model.method, MethodTag::CoercivePhi);
        assert!(model.is_approximate());
        check_interpolation(&model, &js);
    }

    #[test]
    fn c11loc_rejects_deficient_span_and_infeasible_data() {
        let single = JetSet::new(1, vec![jet(&[0.0], 0.0, &[1.0])], 0).unwrap();
        assert!(matches!(
            extend_c11loc(&single, &ExtendOptions::default()),
            Err(Error::SpanDeficient)
        ));
        let bad =
            JetSet::new(1, vec![jet(&[0.0], 0.0, &[1.0]), jet(&[1.0], 0.0, &[0.0])], 0).unwrap();
        match extend_c11loc(&bad, &ExtendOptions::default()) {
            Err(Error::Infeasible { witness }) => assert_eq!(witness.x, vec![0.0]),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn projection_reduces_tilted_cylinder() {
        // F0(x1, x2) = x1^2 + 3 x2 sampled at three points with distinct x1.
        let f0 = |x1: f64, x2: f64| x1 * x1 + 3.0 * x2;
        let pts = [(0.0, 0.0), (1.0, 5.0), (-1.0, 2.0)];
        let jets: Vec<Jet> =
            pts.iter().map(|&(x1, x2)| jet(&[x1, x2], f0(x1, x2), &[2.0 * x1, 3.0])).collect();
        let js = JetSet::new(2, jets, 0).unwrap();
        let model = extend_with_projection(&js, None, &[], &ExtendOptions::default()).unwrap();
        let (x, v) = model.lift().unwrap();
        assert_eq!(x.dim(), 1);
        assert!(x.contains(&dv(&[1.0, 0.0]), 1e-8));
        assert!((v - dv(&[0.0, 3.0])).norm() < 1e-8);
        check_interpolation(&model, &js);
        // Affine behavior across X-orthogonal directions.
        let p = dv(&[0.4, 1.0]);
        let w = dv(&[0.0, -7.3]);
        assert!((model.value(&(&p + &w)) - model.value(&p) - v.dot(&w)).abs() < 1e-8);
    }

    #[test]
    fn projection_with_full_x_matches_plain_path() {
        let js = abs_jets_1d();
        let full = Subspace::full(1);
        let proj = extend_with_projection(&js, Some(&full), &[], &ExtendOptions::default()).unwrap();
        let plain = extend_c11loc(&js, &ExtendOptions::default()).unwrap();
        for i in 0..40 {
            let x = dv(&[-2.0 + 4.0 * i as f64 / 39.0]);
            assert!((proj.value(&x) - plain.value(&x)).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_detects_ill_defined_reduction() {
        // Both points project to x1 = 0 on the x-axis with different gradients.
        let js = JetSet::new(
            2,
            vec![jet(&[0.0, 0.0], 0.0, &[1.0, 0.0]), jet(&[0.0, 1.0], 0.0, &[-1.0, 0.0])],
            0,
        )
        .unwrap();
        let x_axis = Subspace::new(2, vec![dv(&[1.0, 0.0])]).unwrap();
        match extend_with_projection(&js, Some(&x_axis), &[], &ExtendOptions::default()) {
            Err(Error::IllDefinedReduction(0, 1)) => {}
            other => panic!("expected ill-defined reduction, got {other:?}"),
        }
    }

    #[test]
    fn c1omega_identity_matches_quadratic_path() {
        let js = abs_jets_1d();
        let om = extend_c1omega(&js, &Modulus::Identity, None, &[], &ExtendOptions::default())
            .unwrap();
        let plain = extend_c11loc(&js, &ExtendOptions::default()).unwrap();
        for i in 0..=40 {
            let x = dv(&[-2.0 + 4.0 * i as f64 / 40.0]);
            assert!(
                (om.value(&x) - plain.value(&x)).abs() < 1e-6,
                "x={}: {} vs {}",
                x[0],
                om.value(&x),
                plain.value(&x)
            );
        }
    }

    #[test]
    fn c1omega_power_interpolates_values() {
        let js = abs_jets_1d();
        let m = Modulus::Power { alpha: 0.5 };
        let model = extend_c1omega(&js, &m, None, &[], &ExtendOptions::default()).unwrap();
        for j in &js.jets {
            let r = model.eval(&j.point);
            assert!(r.value.is_finite());
            assert!((r.value - j.value).abs() <= 1e-6 * (1.0 + j.value.abs()));
        }
    }

    #[test]
    fn psi_ladder_closed_form() {
        let psi =
            PsiLadder { mks: vec![1.0; 16], scale_r: 1.0, center: DVector::zeros(1) };
        assert_eq!(psi.value(&dv(&[0.0])), 0.0);
        // |x| = 1.5: shells k=1 (t=1.5) and k=2 (t=0.5): 2(2.25 + 0.25).
        assert!((psi.value(&dv(&[1.5])) - 2.0 * (2.25 + 0.25)).abs() < 1e-12);
        // Radial gradient.
        let g = psi.gradient(&dv(&[-1.5]));
        assert!((g[0] + 2.0 * (2.0 * 1.5 + 2.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn nonconvex_extension_of_concave_quadratic() {
        // h(x) = -x^2/2 at three points; curvature bounds M_k = 1.
        let h = |x: f64| -0.5 * x * x;
        let js = JetSet::new(
            1,
            vec![
                jet(&[-1.0], h(-1.0), &[1.0]),
                jet(&[0.0], 0.0, &[0.0]),
                jet(&[1.0], h(1.0), &[-1.0]),
            ],
            1,
        )
        .unwrap();
        let model = extend_nonconvex(&js, &[1.0; 16], &ExtendOptions::default()).unwrap();
        for j in &js.jets {
            let r = model.eval(&j.point);
            assert!((r.value - j.value).abs() < 1e-4, "at {}: {}", j.point[0], r.value);
            assert!((r.gradient[0] - j.gradient[0]).abs() < 1e-4);
        }
        // F + psi is midpoint convex.
        let psi = PsiLadder { mks: vec![1.0; 16], scale_r: 1.0, center: dv(&[0.0]) };
        for i in 0..40 {
            let a = -2.0 + 4.0 * i as f64 / 40.0;
            let b = a + 0.9;
            let f = |t: f64| model.value(&dv(&[t])) + psi.value(&dv(&[t]));
            assert!(f(0.5 * (a + b)) <= 0.5 * (f(a) + f(b)) + 1e-8);
        }
    }

    #[test]
    fn nonconvex_with_zero_psi_matches_convex_path() {
        let js = abs_jets_1d();
        let nc = extend_nonconvex(&js, &[], &ExtendOptions::default()).unwrap();
        let plain = extend_c11loc(&js, &ExtendOptions::default()).unwrap();
        for i in 0..=20 {
            let x = dv(&[-2.0 + 4.0 * i as f64 / 20.0]);
            assert!((nc.value(&x) - plain.value(&x)).abs() < 1e-10);
        }
    }

    #[test]
    fn rho_estimate_of_global_abs_model() {
        let js = abs_jets_1d();
        let model = extend_global(&js, &ExtendOptions::default()).unwrap();
        // F = x^2/2 + 1/2: gradient Lipschitz constant exactly 1 on any ball.
        let est = rho_k_estimate(&model, 1, 60, 3);
        assert!((est - 1.0).abs() < 0.05, "estimate {est}");
        // k = 0 at the base jet (-1, value 1, gradient -1): 1 + 1 = 2.
        assert!((rho_k_estimate(&model, 0, 1, 0) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rho_estimate_of_affine_model_is_zero() {
        let js = JetSet::new(
            1,
            vec![jet(&[0.0], 1.0, &[2.0]), jet(&[1.0], 3.0, &[2.0])],
            0,
        )
        .unwrap();
        let model = extend_global(&js, &ExtendOptions::default()).unwrap();
        assert!(rho_k_estimate(&model, 2, 40, 1) < 1e-12);
    }

    #[test]
    fn seminorm_bound_arithmetic_and_monotonicity() {
        // nu constant c = 3, delta = 1, R0 = 0, a = 1/2, n = 1, k = 2,
        // |f(z0)| = 1, |G(z0)| = 1:
        // inner = 2 (2 + 2 (1 + 4 + 24) + 1) = 2 * 61 = 122;
        // bound = 2 * 3 = 6 (nu constant).
        let nu = |_r: f64| 3.0;
        let b = seminorm_bound(&nu, 0.5, 1.0, 1, 2.0, 0.0, 1.0, 1.0).unwrap();
        assert!((b - 6.0).abs() < 1e-12);
        // Monotone in k for a nondecreasing nu.
        let nu2 = |r: f64| r.min(100.0);
        let b1 = seminorm_bound(&nu2, 0.5, 1.0, 1, 1.0, 0.0, 1.0, 1.0).unwrap();
        let b2 = seminorm_bound(&nu2, 0.5, 1.0, 1, 3.0, 0.0, 1.0, 1.0).unwrap();
        assert!(b2 >= b1);
        assert!(seminorm_bound(&nu, 0.5, 0.0, 1, 1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn seminorm_bound_dominates_rho_estimate_for_abs_instance() {
        let js = abs_jets_1d();
        let model = extend_c11loc(&js, &ExtendOptions::default()).unwrap();
        let nu = model.nu_profile();
        let w = crate::conditions::coercivity_witness(
            &js,
            &crate::conditions::GridSpec { radius: 10.0, points_per_axis: 101 },
            1,
        )
        .unwrap();
        for k in 1..=3usize {
            let est = rho_k_estimate(&model, k, 60, 5);
            let bound = seminorm_bound(
                &nu,
                model.a,
                w.delta,
                js.dim,
                k as f64,
                js.base().point.norm(),
                js.base().value.abs(),
                js.base().gradient.norm(),
            )
            .unwrap();
            assert!(bound >= est - 1e-6, "k={k}: bound {bound} < estimate {est}");
        }
    }

    #[test]
    fn mu_bound_abs_jets_is_four() {
        let js = abs_jets_1d();
        let semi = semiglobal_constants(&js, 2);
        let family = phi_build(&js, &semi).unwrap();
        // Quadratic branch everywhere on B(base, 1): Lipschitz constant 2 A_1.
        let b = mu_upper_bound(&js, &family, 1, 400, 9);
        assert!((b - 4.0).abs() < 1e-9, "bound {b}");
    }
}
