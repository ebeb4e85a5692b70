//! Shared fixtures for the integration suites: seeded random jet instances
//! sampled from smooth convex functions, and finite-difference gradients.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use cvxjet::{Jet, JetSet};

/// Coefficients of `H(x) = c1 |x|^2 + c2 |x|^4 + <b, x> + d`, always convex.
#[derive(Debug, Clone)]
pub struct ConvexSource {
    pub c1: f64,
    pub c2: f64,
    pub b: DVector<f64>,
    pub d: f64,
}

impl ConvexSource {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let r2 = x.norm_squared();
        self.c1 * r2 + self.c2 * r2 * r2 + self.b.dot(x) + self.d
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let r2 = x.norm_squared();
        x * (2.0 * self.c1 + 4.0 * self.c2 * r2) + &self.b
    }
}

pub fn random_source(rng: &mut ChaCha8Rng, n: usize) -> ConvexSource {
    ConvexSource {
        c1: rng.random_range(0.2..1.5),
        c2: rng.random_range(0.0..0.3),
        b: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        d: rng.random_range(-1.0..1.0),
    }
}

/// A jet set sampled from a random convex source at up to `max_jets`
/// pairwise-distinct points in `[-2, 2]^n`. Always feasible; at least
/// `n + 1` points so the gradient differences span the whole space.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, max_jets: usize) -> (JetSet, ConvexSource) {
    let src = random_source(rng, n);
    let count = rng.random_range((n + 1).max(2)..=max_jets.max(n + 1));
    let mut points: Vec<DVector<f64>> = Vec::new();
    while points.len() < count {
        let p = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        if points.iter().all(|q| (q - &p).norm() > 1e-2) {
            points.push(p);
        }
    }
    let jets = points
        .into_iter()
        .map(|p| {
            let v = src.value(&p);
            let g = src.gradient(&p);
            Jet::new(p, v, g)
        })
        .collect();
    (JetSet::new(n, jets, 0).expect("sampled jets are valid"), src)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Uniform point in the closed ball `B(center, radius)` by rejection.
pub fn random_in_ball(rng: &mut ChaCha8Rng, center: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = center.len();
    loop {
        let p = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        if p.norm() <= 1.0 {
            return center + p * radius;
        }
    }
}
