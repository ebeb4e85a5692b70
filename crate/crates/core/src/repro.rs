//! Benchmark harness on a two-region planar jet family whose trace seminorms
//! stay bounded while no extension method can keep the extension seminorms
//! bounded uniformly in the family index `j`.
//!
//! The domain is `E = E1 ∪ E2` with `E1 = {|x| >= e^y}` (truncated to a box)
//! and `E2 = {|x| = 1, y in {1, 2, ...}}`. The jet `(f_j, G_j)` traces
//! `max(|x|, 2(y - j - 1))`. Each site `(u, v)` gets the quadratic localizer
//! `A_{j,u,v} ((x-u)^2 + (y-v)^2)` with `A = max(1/(2|u|), 5/4)`; the harness
//! verifies on a grid that tangent-plus-localizer dominates both envelope
//! branches (nine case functions, one per site region and branch), builds the
//! extension from these pieces, and tabulates sampled seminorm estimates.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::envelope::Piece;
use crate::extend::{model_from_pieces, rho_k_estimate, ExtensionModel};
use crate::jets::{Jet, JetSet};
use crate::Result;

#[derive(Debug, Clone)]
pub struct ReproConfig {
    pub j_min: usize,
    pub j_max: usize,
    /// Truncation box for the unbounded region: `|u| <= x_max`, `|v| <= y_max`.
    pub x_max: f64,
    pub y_max: f64,
    pub grid_points: usize,
    pub samples_per_region: usize,
    pub k_max: usize,
    pub seed: u64,
    pub a: f64,
}

impl Default for ReproConfig {
    fn default() -> Self {
        ReproConfig {
            j_min: 1,
            j_max: 5,
            x_max: 10.0,
            y_max: 10.0,
            grid_points: 201,
            samples_per_region: 30,
            k_max: 3,
            seed: 0,
            a: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// `|u| >= e^v`, `u < 0`.
    OuterNeg,
    /// `|u| >= e^v`, `u > 0`.
    OuterPos,
    /// `u = -1`, integer `v <= j + 1`.
    LadderNegLow,
    /// `u = 1`, integer `v <= j + 1`.
    LadderPosLow,
    /// `|u| = 1`, integer `v > j + 1`.
    LadderHigh,
}

/// `A = max(1/(2|u|), 5/4)`, the localizer opening at site `(u, v)`.
pub fn site_constant(u: f64) -> f64 {
    (1.0 / (2.0 * u.abs())).max(1.25)
}

/// Trace value at a site.
pub fn site_value(region: Region, j: usize, u: f64, v: f64) -> f64 {
    match region {
        Region::OuterNeg | Region::OuterPos => u.abs(),
        Region::LadderNegLow | Region::LadderPosLow => 1.0,
        Region::LadderHigh => 2.0 * (v - (j + 1) as f64),
    }
}

/// Trace gradient at a site.
pub fn site_gradient(region: Region, _j: usize, _u: f64, _v: f64) -> DVector<f64> {
    match region {
        Region::OuterNeg | Region::LadderNegLow => DVector::from_column_slice(&[-1.0, 0.0]),
        Region::OuterPos | Region::LadderPosLow => DVector::from_column_slice(&[1.0, 0.0]),
        Region::LadderHigh => DVector::from_column_slice(&[0.0, 2.0]),
    }
}

/// Tangent plane of the jet at a site, evaluated at `(x, y)`.
fn tangent(region: Region, j: usize, u: f64, v: f64, x: f64, y: f64) -> f64 {
    let g = site_gradient(region, j, u, v);
    site_value(region, j, u, v) + g[0] * (x - u) + g[1] * (y - v)
}

#[derive(Debug, Clone, Copy)]
pub struct Site {
    pub region: Region,
    pub u: f64,
    pub v: f64,
}

/// Index (1-based) of the case function covering `(site region, branch)`:
/// odd/even split over the sign regions, branch 0 compares against `|x|`,
/// branch 1 against `2(y - j - 1)`. The top ladder region only needs the
/// `|x|` comparison (its tangent equals the other branch).
fn case_index(region: Region, branch: usize) -> Option<usize> {
    match (region, branch) {
        (Region::OuterNeg, 0) => Some(1),
        (Region::OuterPos, 0) => Some(2),
        (Region::OuterNeg, 1) => Some(3),
        (Region::OuterPos, 1) => Some(4),
        (Region::LadderNegLow, 0) => Some(5),
        (Region::LadderPosLow, 0) => Some(6),
        (Region::LadderNegLow, 1) => Some(7),
        (Region::LadderPosLow, 1) => Some(8),
        (Region::LadderHigh, 0) => Some(9),
        (Region::LadderHigh, 1) => None,
        _ => None,
    }
}

fn sample_sites(cfg: &ReproConfig, j: usize, rng: &mut ChaCha8Rng) -> Vec<Site> {
    let mut sites = Vec::new();
    let n = cfg.samples_per_region;
    let v_hi = cfg.x_max.ln();
    for i in 0..n {
        // Outer region: v anywhere below log(x_max), |u| in [e^v, x_max].
        let v = -cfg.y_max + (cfg.y_max + v_hi) * rng.random::<f64>();
        let lo = v.exp();
        let mag = lo + (cfg.x_max - lo) * rng.random::<f64>();
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        let region = if sign < 0.0 { Region::OuterNeg } else { Region::OuterPos };
        sites.push(Site { region, u: sign * mag, v });
    }
    let low_top = (j + 1).min(cfg.y_max as usize);
    for i in 0..n {
        let v = (1 + i % low_top) as f64;
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        let region = if sign < 0.0 { Region::LadderNegLow } else { Region::LadderPosLow };
        sites.push(Site { region, u: sign, v });
    }
    let high_lo = j + 2;
    let high_hi = (cfg.y_max as usize).max(high_lo);
    for i in 0..n {
        let v = (high_lo + i % (high_hi - high_lo + 1)) as f64;
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        sites.push(Site { region: Region::LadderHigh, u: sign, v });
    }
    sites
}

/// Deterministic finite jet sample of the domain for building the extension.
fn jets_for(cfg: &ReproConfig, j: usize) -> JetSet {
    let mut jets = Vec::new();
    let mut base = 0usize;
    // Outer region: a few heights, two radial multiples, both signs.
    for &v in &[-2.0f64, -1.0, 0.0, 1.0, 2.0] {
        for &s in &[1.0f64, 2.0] {
            let mag = (s * v.exp()).min(cfg.x_max);
            if mag < v.exp() {
                continue;
            }
            for &sign in &[-1.0f64, 1.0] {
                let region = if sign < 0.0 { Region::OuterNeg } else { Region::OuterPos };
                let u = sign * mag;
                jets.push(Jet::new(
                    DVector::from_column_slice(&[u, v]),
                    site_value(region, j, u, v),
                    site_gradient(region, j, u, v),
                ));
            }
        }
    }
    // Ladder region: both rails up to the height cutoff.
    for v in 1..=(cfg.y_max as usize) {
        for &sign in &[-1.0f64, 1.0] {
            let region = if v <= j + 1 {
                if sign < 0.0 { Region::LadderNegLow } else { Region::LadderPosLow }
            } else {
                Region::LadderHigh
            };
            if region == Region::LadderPosLow && v == 1 {
                base = jets.len();
            }
            jets.push(Jet::new(
                DVector::from_column_slice(&[sign, v as f64]),
                site_value(region, j, sign, v as f64),
                site_gradient(region, j, sign, v as f64),
            ));
        }
    }
    JetSet::new(2, jets, base).expect("fixture jets are valid")
}

#[derive(Debug, Clone, Serialize)]
pub struct JReport {
    pub j: usize,
    /// Minimum over the grid and the sampled sites of each case function.
    pub h_min: [f64; 9],
    pub interp_value_err: f64,
    pub interp_grad_err: f64,
    /// `mu[k]`: largest localizer gradient-Lipschitz constant among sampled
    /// sites within distance `k` of the base point (`k = 0`: base jet size).
    pub mu: Vec<f64>,
    /// Claimed cap `max(e^k, 3)` for each `k`.
    pub mu_cap: Vec<f64>,
    /// Sampled gradient-Lipschitz estimates of the built extension.
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReproReport {
    pub j_reports: Vec<JReport>,
    pub grid_points: usize,
    pub samples_per_region: usize,
}

impl ReproReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Builds the extension for one family index from the explicit quadratic
/// localizers: one paraboloid piece per jet, opening `2A + 2a`.
pub fn build_extension(cfg: &ReproConfig, j: usize) -> (JetSet, ExtensionModel) {
    let js = jets_for(cfg, j);
    let pieces: Vec<Piece> = js
        .jets
        .iter()
        .map(|jet| Piece::Quadratic {
            y: jet.point.clone(),
            tilt: jet.gradient.clone(),
            offset: jet.value,
            curvature: 2.0 * site_constant(jet.point[0]) + 2.0 * cfg.a,
        })
        .collect();
    let model = model_from_pieces(2, cfg.a, js.base().point.clone(), pieces);
    (js, model)
}

pub fn run(cfg: &ReproConfig) -> Result<ReproReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut j_reports = Vec::new();
    let np = cfg.grid_points.max(2);
    let coords: Vec<f64> =
        (0..np).map(|i| -cfg.x_max + 2.0 * cfg.x_max * i as f64 / (np - 1) as f64).collect();
    for j in cfg.j_min..=cfg.j_max {
        let sites = sample_sites(cfg, j, &mut rng);
        let mut h_min = [f64::INFINITY; 9];
        for site in &sites {
            let a = site_constant(site.u);
            for branch in 0..2usize {
                let Some(ci) = case_index(site.region, branch) else { continue };
                let mut lo = f64::INFINITY;
                for &x in &coords {
                    for &y in &coords {
                        let quad = a * ((x - site.u).powi(2) + (y - site.v).powi(2));
                        let t = tangent(site.region, j, site.u, site.v, x, y);
                        let target =
                            if branch == 0 { x.abs() } else { 2.0 * (y - (j + 1) as f64) };
                        lo = lo.min(t + quad - target);
                    }
                }
                h_min[ci - 1] = h_min[ci - 1].min(lo);
            }
        }
        let (js, model) = build_extension(cfg, j);
        let mut value_err = 0.0f64;
        let mut grad_err = 0.0f64;
        for jet in &js.jets {
            let r = model.eval(&jet.point);
            value_err = value_err.max((r.value - jet.value).abs());
            grad_err = grad_err.max((r.gradient - &jet.gradient).norm());
        }
        let base = js.base().point.clone();
        let mut mu = vec![js.base().value.abs() + js.base().gradient.norm()];
        let mut mu_cap = vec![3.0f64];
        for k in 1..=cfg.k_max {
            let mut m = 0.0f64;
            for site in &sites {
                let d = ((site.u - base[0]).powi(2) + (site.v - base[1]).powi(2)).sqrt();
                if d <= k as f64 {
                    m = m.max(2.0 * site_constant(site.u));
                }
            }
            for jet in &js.jets {
                if (&jet.point - &base).norm() <= k as f64 {
                    m = m.max(2.0 * site_constant(jet.point[0]));
                }
            }
            mu.push(m);
            mu_cap.push((k as f64).exp().max(3.0));
        }
        let rho =
            (0..=cfg.k_max).map(|k| rho_k_estimate(&model, k, 40, cfg.seed + k as u64)).collect();
        j_reports.push(JReport {
            j,
            h_min,
            interp_value_err: value_err,
            interp_grad_err: grad_err,
            mu,
            mu_cap,
            rho,
        });
    }
    Ok(ReproReport {
        j_reports,
        grid_points: np,
        samples_per_region: cfg.samples_per_region,
    })
}
