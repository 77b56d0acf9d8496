//! Shared specs and oracles for the integration and acceptance tests.

#![allow(dead_code)]

use mfg_core::convex::{ConstraintSet, WeightedMetric};
use mfg_core::model::{ModelSpec, Piecewise};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn m1(v: f64) -> Piecewise<DMatrix<f64>> {
    Piecewise::constant(DMatrix::from_element(1, 1, v))
}

pub fn v1(v: f64) -> Piecewise<DVector<f64>> {
    Piecewise::constant(DVector::from_element(1, v))
}

pub fn s1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Scalar single-type benchmark with a closed-form Riccati solution.
pub fn riccati_benchmark(sigma0: f64, sigma: f64) -> ModelSpec {
    let mut s = ModelSpec::zeros(1, 1, &[1.0], 1.0);
    s.major.a = m1(-1.0);
    s.major.b = m1(1.0);
    s.major.q = s1(1.0);
    s.major.g = s1(1.0);
    s.major.sigma = v1(sigma0);
    s.types[0].a = m1(-1.0);
    s.minor.b = m1(1.0);
    s.minor.q = s1(1.0);
    s.minor.g = s1(1.0);
    s.minor.sigma = v1(sigma);
    s.x0_init = DVector::from_element(1, 1.0);
    s.x_init = DVector::from_element(1, -0.5);
    s
}

/// Classical RK4 for `y' = f(t, y)` integrated backward from `t1` to `t0`,
/// returning the state at each of `nodes + 1` equally spaced times.
pub fn rk4_backward<const D: usize>(
    f: impl Fn(f64, &[f64; D]) -> [f64; D],
    terminal: [f64; D],
    t0: f64,
    t1: f64,
    nodes: usize,
    h: f64,
) -> Vec<[f64; D]> {
    let sub = (((t1 - t0) / nodes as f64) / h).round() as usize;
    let h = (t1 - t0) / (nodes * sub) as f64;
    let mut out = vec![terminal; nodes + 1];
    let mut y = terminal;
    let add = |a: &[f64; D], b: &[f64; D], s: f64| {
        let mut o = *a;
        for i in 0..D {
            o[i] += s * b[i];
        }
        o
    };
    for j in (0..nodes).rev() {
        for s in (0..sub).rev() {
            let t = t0 + (j * sub + s + 1) as f64 * h;
            let k1 = f(t, &y);
            let k2 = f(t - h / 2.0, &add(&y, &k1, -h / 2.0));
            let k3 = f(t - h / 2.0, &add(&y, &k2, -h / 2.0));
            let k4 = f(t - h, &add(&y, &k3, -h));
            for i in 0..D {
                y[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out[j] = y;
    }
    out
}

/// Feedback gains for [`riccati_benchmark`] on `steps` intervals: the major
/// control is `-p0 x0` and the minor control is `-(p11 x + p12 x0)`.
pub struct RiccatiGains {
    pub p0: Vec<f64>,
    pub p11: Vec<f64>,
    pub p12: Vec<f64>,
}

pub fn riccati_gains(steps: usize, h: f64) -> RiccatiGains {
    // Scalar: P' = P² + 2P - 1, P(1) = 1. Joint minor system in (x, x0) with
    // the major loop closed, stored as (P0, Π11, Π12, Π22).
    let f = |_t: f64, y: &[f64; 4]| {
        let (p0, a, b, c) = (y[0], y[1], y[2], y[3]);
        let a0 = -1.0 - p0;
        [
            p0 * p0 + 2.0 * p0 - 1.0,
            2.0 * a + a * a - 1.0,
            b - a0 * b + a * b + 1.0,
            2.0 * -a0 * c + b * b - 1.0,
        ]
    };
    let sol = rk4_backward(f, [1.0, 1.0, -1.0, 1.0], 0.0, 1.0, steps, h);
    RiccatiGains {
        p0: sol.iter().map(|y| y[0]).collect(),
        p11: sol.iter().map(|y| y[1]).collect(),
        p12: sol.iter().map(|y| y[2]).collect(),
    }
}

/// Two-type coupled benchmark for the finite-population studies.
pub fn nash_benchmark() -> ModelSpec {
    let mut s = ModelSpec::zeros(1, 1, &[0.5, 0.5], 1.0);
    s.major.a = m1(-0.5);
    s.major.b = m1(1.0);
    s.major.f1 = m1(0.3);
    s.major.sigma = v1(0.1);
    s.major.q = s1(1.0);
    s.major.g = s1(0.5);
    s.major.rho = 0.5;
    s.types[0].a = m1(-0.4);
    s.types[1].a = m1(-0.8);
    s.types[1].d = m1(0.1);
    s.types[1].r = s1(1.5);
    s.minor.b = m1(1.0);
    s.minor.f1 = m1(0.2);
    s.minor.f2 = m1(0.1);
    s.minor.h = m1(0.1);
    s.minor.drift = v1(0.1);
    s.minor.sigma = v1(0.8);
    s.minor.q = s1(1.0);
    s.minor.g = s1(0.5);
    s.minor.rho = 0.3;
    s.x0_init = DVector::from_element(1, 0.25);
    s.x_init = DVector::from_element(1, 0.5);
    s
}

/// Fuzzed projection problem: `(x, y, Γ, R)` drawn from `seed`, cycling
/// through every set variant and both diagonal and coupled metrics.
pub fn fuzz_projection(seed: u64) -> (Vec<f64>, Vec<f64>, ConstraintSet, WeightedMetric) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 1 + (seed / 5 % 4) as usize;
    let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
    let set = match seed % 5 {
        0 => ConstraintSet::FullSpace,
        1 => ConstraintSet::NonnegativeOrthant,
        2 => {
            let lower = (0..m).map(|i| if i % 3 == 2 { f64::NEG_INFINITY } else { -normal(1.0).abs() }).collect();
            let upper = (0..m).map(|i| if i % 4 == 3 { f64::INFINITY } else { normal(1.0).abs() }).collect();
            ConstraintSet::Box { lower, upper }
        }
        3 => {
            let rows = 1 + (seed / 20 % m as u64) as usize;
            ConstraintSet::LinearSubspace(DMatrix::from_fn(rows, m, |_, _| normal(1.0)))
        }
        _ => {
            let rows = 1 + (seed / 20 % (m as u64 + 1)) as usize;
            ConstraintSet::HalfspaceCone(DMatrix::from_fn(rows, m, |_, _| normal(1.0)))
        }
    };
    let r = if seed / 2 % 2 == 0 {
        DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| 0.2 + normal(1.0).abs()))
    } else {
        let l = DMatrix::from_fn(m, m, |_, _| normal(1.0));
        &l * l.transpose() + DMatrix::identity(m, m) * 0.2
    };
    let x = (0..m).map(|_| normal(3.0)).collect();
    let y = (0..m).map(|_| normal(3.0)).collect();
    (x, y, set, WeightedMetric::new(r).expect("positive definite"))
}

pub fn r_norm(metric: &WeightedMetric, v: &[f64]) -> f64 {
    let d = DVector::from_row_slice(v);
    (d.transpose() * &metric.r * &d)[(0, 0)].max(0.0).sqrt()
}

fn gauss_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let l = gauss_matrix(rng, n, n, 0.5);
    &l * l.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Dense random spec with every coefficient populated.
pub fn random_spec(seed: u64, n: usize, m: usize, k: usize) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let mut s = ModelSpec::zeros(n, m, &w, 1.0);
    let pm = |rng: &mut ChaCha8Rng, r: usize, c: usize| Piecewise::constant(gauss_matrix(rng, r, c, 0.7));
    s.major.a = pm(&mut rng, n, n);
    s.major.b = pm(&mut rng, n, m);
    s.major.c = pm(&mut rng, n, n);
    s.major.d = pm(&mut rng, n, m);
    s.major.f1 = pm(&mut rng, n, n);
    s.major.f2 = pm(&mut rng, n, n);
    s.major.drift = Piecewise::constant(DVector::from_fn(n, |_, _| rng.sample(StandardNormal)));
    s.major.sigma = Piecewise::constant(DVector::from_fn(n, |_, _| rng.sample(StandardNormal)));
    s.major.q = spd(&mut rng, n);
    s.major.g = spd(&mut rng, n);
    s.major.r = spd(&mut rng, m);
    s.major.rho = rng.random();
    s.minor.b = pm(&mut rng, n, m);
    s.minor.c = pm(&mut rng, n, n);
    s.minor.f1 = pm(&mut rng, n, n);
    s.minor.f2 = pm(&mut rng, n, n);
    s.minor.h = pm(&mut rng, n, n);
    s.minor.drift = Piecewise::constant(DVector::from_fn(n, |_, _| rng.sample(StandardNormal)));
    s.minor.sigma = Piecewise::constant(DVector::from_fn(n, |_, _| rng.sample(StandardNormal)));
    s.minor.q = spd(&mut rng, n);
    s.minor.g = spd(&mut rng, n);
    s.minor.rho = rng.random();
    for t in &mut s.types {
        t.a = pm(&mut rng, n, n);
        t.d = pm(&mut rng, n, m);
        t.r = spd(&mut rng, m);
    }
    s
}

/// Weakly coupled scalar spec on a long horizon that admits a global
/// certificate.
pub fn certified_spec() -> ModelSpec {
    let mut s = ModelSpec::zeros(1, 1, &[1.0], 5.0);
    s.major.a = m1(-5.0);
    s.types[0].a = m1(-5.0);
    s.major.b = m1(0.01);
    s.minor.b = m1(0.01);
    s.major.d = m1(0.01);
    s.types[0].d = m1(0.01);
    s.major.q = s1(0.01);
    s.minor.q = s1(0.01);
    s.major.g = s1(0.01);
    s.minor.g = s1(0.01);
    s.x0_init = DVector::from_element(1, 1.0);
    s.x_init = DVector::from_element(1, 1.0);
    s
}
