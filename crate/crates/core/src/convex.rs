//! Closed convex control sets and nearest-point maps in the weighted metric
//! `‖x‖_R² = <Rx, x>`.
//!
//! Separable sets under a diagonal metric and linear subspaces have closed
//! forms. Everything else (cones, and boxes under a coupled metric) goes
//! through a projected-gradient solve on the dual of
//!
//! ```text
//! min ½ (y - x)' R (y - x)   s.t.  G y <= h
//! ```
//!
//! whose multipliers live in the nonnegative orthant, so the inner projection
//! is a clamp. The primal point is `y = x - R⁻¹ G' μ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, frob, gemv_acc, is_symmetric, lambda_max_sym, lambda_min_sym, sym_pinv_solve};

const MAX_ITER: usize = 10_000;
const STOP_TOL: f64 = 1e-12;
const MAX_ENUM_ROWS: usize = 16;
const ACCEPT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintSet {
    FullSpace,
    /// Coordinatewise bounds; infinite entries are allowed.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    NonnegativeOrthant,
    /// `{u : Υu = 0}`.
    LinearSubspace(DMatrix<f64>),
    /// `{u : Υu <= 0}`.
    HalfspaceCone(DMatrix<f64>),
}

impl ConstraintSet {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintSet::FullSpace => "full",
            ConstraintSet::Box { .. } => "box",
            ConstraintSet::NonnegativeOrthant => "orthant",
            ConstraintSet::LinearSubspace(_) => "subspace",
            ConstraintSet::HalfspaceCone(_) => "cone",
        }
    }

    /// Checks dimensions, nonemptiness and `0 ∈ Γ`.
    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            ConstraintSet::FullSpace | ConstraintSet::NonnegativeOrthant => Ok(()),
            ConstraintSet::Box { lower, upper } => {
                if lower.len() != m || upper.len() != m {
                    return Err(Error::Structure(format!("box bounds must have length {m}")));
                }
                for i in 0..m {
                    if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                        return Err(Error::Structure(format!("box coordinate {i} is empty")));
                    }
                    if lower[i] > 0.0 || upper[i] < 0.0 {
                        return Err(Error::Structure(format!("box coordinate {i} excludes 0")));
                    }
                }
                Ok(())
            }
            ConstraintSet::LinearSubspace(u) => {
                if u.ncols() != m || u.nrows() == 0 {
                    return Err(Error::Structure(format!("subspace matrix must be r x {m}")));
                }
                let gram = u * u.transpose();
                let lmin = lambda_min_sym(&gram, "subspace gram")?;
                if lmin <= 1e-12 * (1.0 + gram.amax()) {
                    return Err(Error::Structure("subspace matrix lacks full row rank".into()));
                }
                Ok(())
            }
            ConstraintSet::HalfspaceCone(u) => {
                if u.ncols() != m || u.nrows() == 0 {
                    return Err(Error::Structure(format!("cone matrix must be r x {m}")));
                }
                Ok(())
            }
        }
    }

    /// Largest violation of the defining constraints (0 when feasible).
    pub fn violation(&self, y: &[f64]) -> f64 {
        match self {
            ConstraintSet::FullSpace => 0.0,
            ConstraintSet::NonnegativeOrthant => y.iter().fold(0.0_f64, |a, v| a.max(-v)),
            ConstraintSet::Box { lower, upper } => y
                .iter()
                .zip(lower.iter().zip(upper))
                .fold(0.0_f64, |a, (v, (l, h))| a.max(l - v).max(v - h)),
            ConstraintSet::LinearSubspace(u) => {
                let mut r = vec![0.0; u.nrows()];
                gemv_acc(&mut r, u, y);
                r.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
            }
            ConstraintSet::HalfspaceCone(u) => {
                let mut r = vec![0.0; u.nrows()];
                gemv_acc(&mut r, u, y);
                r.iter().fold(0.0_f64, |a, v| a.max(*v))
            }
        }
    }

    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        self.violation(y) <= tol
    }

    /// Linear inequality form `G y <= h` (rows with infinite bounds dropped).
    fn inequalities(&self, m: usize) -> (DMatrix<f64>, DVector<f64>) {
        match self {
            ConstraintSet::NonnegativeOrthant => (-DMatrix::identity(m, m), DVector::zeros(m)),
            ConstraintSet::Box { lower, upper } => {
                let mut rows = Vec::new();
                let mut rhs = Vec::new();
                for i in 0..m {
                    if upper[i].is_finite() {
                        let mut r = vec![0.0; m];
                        r[i] = 1.0;
                        rows.push(r);
                        rhs.push(upper[i]);
                    }
                    if lower[i].is_finite() {
                        let mut r = vec![0.0; m];
                        r[i] = -1.0;
                        rows.push(r);
                        rhs.push(-lower[i]);
                    }
                }
                let g = DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]);
                (g, DVector::from_vec(rhs))
            }
            ConstraintSet::HalfspaceCone(u) => (u.clone(), DVector::zeros(u.nrows())),
            _ => (DMatrix::zeros(0, m), DVector::zeros(0)),
        }
    }
}

/// The metric `‖x‖_R² = <Rx, x> = ‖L'x‖²` with `R = L L'`.
#[derive(Clone, Debug)]
pub struct WeightedMetric {
    pub r: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    pub condition: f64,
    diagonal: bool,
}

impl WeightedMetric {
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        if !is_symmetric(&r, 1e-12) {
            return Err(Error::Metric("weight matrix is not symmetric".into()));
        }
        let chol = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Metric("weight matrix is not positive definite".into()))?;
        let lmin = lambda_min_sym(&r, "metric")?;
        if lmin <= 0.0 {
            return Err(Error::Metric("weight matrix is not positive definite".into()));
        }
        let lmax = lambda_max_sym(&r, "metric")?;
        let r_inv = chol.inverse();
        let mut diagonal = true;
        for i in 0..r.nrows() {
            for j in 0..r.ncols() {
                if i != j && r[(i, j)] != 0.0 {
                    diagonal = false;
                }
            }
        }
        Ok(Self { l: chol.l(), r_inv, condition: lmax / lmin, diagonal, r })
    }

    pub fn identity(m: usize) -> Self {
        Self::new(DMatrix::identity(m, m)).expect("identity is PD")
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn norm_sq(&self, x: &[f64]) -> f64 {
        crate::linalg::quad(&self.r, x)
    }

    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut rx = vec![0.0; x.len()];
        gemv_acc(&mut rx, &self.r, x);
        dot(&rx, y)
    }
}

#[derive(Clone, Debug)]
enum Mode {
    Identity,
    Clamp { lower: Vec<f64>, upper: Vec<f64> },
    Affine(DMatrix<f64>),
    Dual(DualQp),
}

#[derive(Clone, Debug)]
struct DualQp {
    g: DMatrix<f64>,
    r: DMatrix<f64>,
    h: DVector<f64>,
    rinv_gt: DMatrix<f64>,
    hess: DMatrix<f64>,
    lip: f64,
}

/// Precomputed projection onto one set in one metric.
#[derive(Clone, Debug)]
pub struct Projector {
    pub set: ConstraintSet,
    pub metric: WeightedMetric,
    mode: Mode,
}

impl Projector {
    pub fn new(set: ConstraintSet, metric: WeightedMetric) -> Result<Self> {
        let m = metric.dim();
        set.validate(m)?;
        let mode = match &set {
            ConstraintSet::FullSpace => Mode::Identity,
            ConstraintSet::NonnegativeOrthant if metric.is_diagonal() => {
                Mode::Clamp { lower: vec![0.0; m], upper: vec![f64::INFINITY; m] }
            }
            ConstraintSet::Box { lower, upper } if metric.is_diagonal() => {
                Mode::Clamp { lower: lower.clone(), upper: upper.clone() }
            }
            ConstraintSet::LinearSubspace(u) => {
                let eig = (u.transpose() * u).symmetric_eigen();
                let top = eig.eigenvalues.amax();
                let null: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] <= 1e-12 * top).collect();
                if m - null.len() != u.nrows() || top <= 0.0 {
                    return Err(Error::Structure("subspace matrix lacks full row rank".into()));
                }
                let n = DMatrix::from_fn(m, null.len(), |i, j| eig.eigenvectors[(i, null[j])]);
                let ntr = n.transpose() * &metric.r;
                let inner = (&ntr * &n)
                    .cholesky()
                    .ok_or_else(|| Error::Structure("subspace metric block is not positive".into()))?;
                Mode::Affine(&n * inner.solve(&ntr))
            }
            _ => {
                let (g, h) = set.inequalities(m);
                let rinv_gt = &metric.r_inv * g.transpose();
                let hess = &g * &rinv_gt;
                let lip = if hess.nrows() == 0 { 1.0 } else { lambda_max_sym(&hess, "dual hessian")?.max(1e-300) };
                Mode::Dual(DualQp { g, r: metric.r.clone(), h, rinv_gt, hess, lip })
            }
        };
        Ok(Self { set, metric, mode })
    }

    pub fn dim(&self) -> usize {
        self.metric.dim()
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.mode, Mode::Identity)
    }

    pub fn project_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = vec![0.0; x.len()];
        self.project_into(x.as_slice(), &mut out)?;
        Ok(DVector::from_vec(out))
    }

    /// Writes `P_Γ(x)` into `out`.
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.mode {
            Mode::Identity => {
                out.copy_from_slice(x);
                Ok(())
            }
            Mode::Clamp { lower, upper } => {
                for i in 0..x.len() {
                    out[i] = x[i].max(lower[i]).min(upper[i]);
                }
                Ok(())
            }
            Mode::Affine(p) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                gemv_acc(out, p, x);
                Ok(())
            }
            Mode::Dual(qp) => qp.solve(x, out),
        }
    }
}

impl DualQp {
    fn primal(&self, x: &[f64], mu: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
        for (k, mk) in mu.iter().enumerate() {
            if *mk != 0.0 {
                let col = self.rinv_gt.column(k);
                for (yi, c) in y.iter_mut().zip(col.iter()) {
                    *yi -= c * mk;
                }
            }
        }
    }

    /// Slack `h - G y`, then (violation, complementarity bound on the VI residual).
    /// Metric projection of `x` onto the affine face `G_S y = h_S`, computed
    /// through a null-space basis so that large multipliers do not cancel.
    fn face_point(&self, support: &[usize], x: &[f64], y: &mut [f64]) -> Option<()> {
        let m = x.len();
        let gs = DMatrix::from_fn(support.len(), m, |a, j| self.g[(support[a], j)]);
        let hs = DVector::from_fn(support.len(), |a, _| self.h[support[a]]);
        let yp = gs.transpose() * (&gs * gs.transpose()).cholesky()?.solve(&hs);
        let eig = (gs.transpose() * &gs).symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let null: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] <= 1e-12 * top).collect();
        let mut point = yp.clone();
        if !null.is_empty() {
            let n = DMatrix::from_fn(m, null.len(), |i, j| eig.eigenvectors[(i, null[j])]);
            let ntr = n.transpose() * &self.r;
            let d = DVector::from_fn(m, |i, _| x[i] - yp[i]);
            point += &n * (&ntr * &n).cholesky()?.solve(&(&ntr * d));
        }
        y.copy_from_slice(point.as_slice());
        Some(())
    }

    fn kkt(&self, y: &[f64], mu: &[f64]) -> (f64, f64) {
        let mut viol = 0.0_f64;
        let mut comp = 0.0;
        for r in 0..self.g.nrows() {
            let mut gy = 0.0;
            for c in 0..y.len() {
                gy += self.g[(r, c)] * y[c];
            }
            let slack = self.h[r] - gy;
            viol = viol.max(-slack);
            comp += mu[r] * slack.max(0.0);
        }
        (viol, comp)
    }

    fn objective(&self, mu: &[f64], c: &[f64]) -> f64 {
        0.5 * crate::linalg::quad(&self.hess, mu) - dot(mu, c)
    }

    fn solve(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.g.nrows();
        let mut c = vec![0.0; r];
        gemv_acc(&mut c, &self.g, x);
        for i in 0..r {
            c[i] -= self.h[i];
        }
        let scale = 1.0 + dot(x, x);
        let tol = STOP_TOL * scale;
        let feas = FEAS_TOL * (1.0 + x.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
        let w = tol / feas;
        if c.iter().all(|v| *v <= 0.0) {
            out.copy_from_slice(x);
            return Ok(());
        }
        let mut mu = vec![0.0; r];
        let mut grad = vec![0.0; r];
        let mut trial = vec![0.0; r];
        let mut step = 1.0 / self.lip;
        let mut residual = f64::INFINITY;
        for it in 0..MAX_ITER {
            grad.iter_mut().zip(&c).for_each(|(g, ci)| *g = -ci);
            gemv_acc(&mut grad, &self.hess, &mu);
            let f0 = self.objective(&mu, &c);
            step = (step * 2.0).min(4.0 / self.lip);
            // Armijo backtracking on the projected arc.
            loop {
                for i in 0..r {
                    trial[i] = (mu[i] - step * grad[i]).max(0.0);
                }
                let mut lin = 0.0;
                for i in 0..r {
                    lin += grad[i] * (trial[i] - mu[i]);
                }
                if self.objective(&trial, &c) <= f0 + 0.5 * lin + 1e-300 || step < 1e-20 / self.lip {
                    break;
                }
                step *= 0.5;
            }
            std::mem::swap(&mut mu, &mut trial);
            self.primal(x, &mu, out);
            let (viol, comp) = self.kkt(out, &mu);
            residual = (w * viol).max(comp);
            if residual <= tol {
                return Ok(());
            }
            if it % 8 == 7 {
                if let Some(res) = self.polish(x, &c, &mut mu, out, tol, w) {
                    residual = res;
                    if res <= tol {
                        return Ok(());
                    }
                }
            }
        }
        if let Some(res) = self.active_sets(x, &c, out, tol) {
            let loose = ACCEPT_TOL * (1.0 + x.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
            return if res <= loose { Ok(()) } else { Err(Error::Numeric { what: "projection did not converge".into(), residual: res }) };
        }
        Err(Error::Numeric { what: "projection did not converge".into(), residual })
    }

    /// Exact KKT search over linearly independent active sets, smallest
    /// first. Some independent support always carries a valid multiplier, so
    /// this succeeds whenever the row count is small enough to enumerate.
    fn active_sets(&self, x: &[f64], c: &[f64], out: &mut [f64], tol: f64) -> Option<f64> {
        let r = self.g.nrows();
        if r > MAX_ENUM_ROWS {
            return None;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut y = vec![0.0; x.len()];
        for size in 1..=r.min(x.len()) {
            for mask in 1u32..(1 << r) {
                if mask.count_ones() as usize != size {
                    continue;
                }
                let support: Vec<usize> = (0..r).filter(|i| mask & (1 << i) != 0).collect();
                let hs = DMatrix::from_fn(size, size, |a, b| self.hess[(support[a], support[b])]);
                let top = lambda_max_sym(&hs, "active set").ok()?;
                match lambda_min_sym(&hs, "active set") {
                    Ok(low) if low > 1e-12 * top.max(1e-300) => {}
                    _ => continue,
                }
                let cs = DVector::from_fn(size, |a, _| c[support[a]]);
                let Some(sol) = hs.cholesky().map(|ch| ch.solve(&cs)) else { continue };
                if sol.iter().any(|v| *v < -tol) {
                    continue;
                }
                let mut mu = vec![0.0; r];
                for (a, &i) in support.iter().enumerate() {
                    mu[i] = sol[a].max(0.0);
                }
                self.face_point(&support, x, &mut y)?;
                let (res, _) = self.kkt(&y, &mu);
                if best.as_ref().is_none_or(|b| res < b.0) {
                    best = Some((res, y.clone()));
                }
                if res <= tol {
                    out.copy_from_slice(&y);
                    return Some(res);
                }
            }
        }
        let (res, y) = best?;
        out.copy_from_slice(&y);
        Some(res)
    }

    /// Solves the equality system on the current support of μ; keeps the
    /// result only when it is a valid KKT point.
    fn polish(&self, x: &[f64], c: &[f64], mu: &mut Vec<f64>, out: &mut [f64], tol: f64, w: f64) -> Option<f64> {
        let support: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let s = support.len();
        let hs = DMatrix::from_fn(s, s, |a, b| self.hess[(support[a], support[b])]);
        let cs = DMatrix::from_fn(s, 1, |a, _| c[support[a]]);
        let (sol, _) = sym_pinv_solve(&hs, &cs, 1e-13).ok()?;
        if sol.iter().any(|v| *v < 0.0) {
            return None;
        }
        let mut cand = vec![0.0; mu.len()];
        for (a, &i) in support.iter().enumerate() {
            cand[i] = sol[(a, 0)];
        }
        let mut y = vec![0.0; x.len()];
        self.primal(x, &cand, &mut y);
        let (viol, comp) = self.kkt(&y, &cand);
        let res = (w * viol).max(comp);
        if res <= tol {
            *mu = cand;
            out.copy_from_slice(&y);
            Some(res)
        } else {
            None
        }
    }
}

/// `P_Γ(x)` under `‖·‖_R`.
pub fn project(x: &DVector<f64>, gamma: &ConstraintSet, metric: &WeightedMetric) -> Result<DVector<f64>> {
    Projector::new(gamma.clone(), metric.clone())?.project_vec(x)
}

/// Feedback map `(p, q) ↦ P_Γ[R⁻¹(B'p + D'q)]` with the products precomputed.
#[derive(Clone, Debug)]
pub struct ControlMap {
    pub rinv_bt: DMatrix<f64>,
    pub rinv_dt: DMatrix<f64>,
    pub projector: Projector,
}

impl ControlMap {
    pub fn new(b: &DMatrix<f64>, d: &DMatrix<f64>, projector: Projector) -> Result<Self> {
        let m = projector.dim();
        if b.ncols() != m || d.ncols() != m || b.nrows() != d.nrows() {
            return Err(Error::Structure("control map dimensions disagree".into()));
        }
        let rinv_bt = &projector.metric.r_inv * b.transpose();
        let rinv_dt = &projector.metric.r_inv * d.transpose();
        Ok(Self { rinv_bt, rinv_dt, projector })
    }

    /// Unprojected argument `R⁻¹(B'p + D'q)` written into `raw`.
    #[inline]
    pub fn raw(&self, p: &[f64], q: &[f64], raw: &mut [f64]) {
        raw.iter_mut().for_each(|v| *v = 0.0);
        gemv_acc(raw, &self.rinv_bt, p);
        gemv_acc(raw, &self.rinv_dt, q);
    }

    #[inline]
    pub fn eval(&self, p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
        let mut raw = [0.0; 16];
        if out.len() <= 16 {
            let raw = &mut raw[..out.len()];
            self.raw(p, q, raw);
            self.projector.project_into(raw, out)
        } else {
            let mut raw = vec![0.0; out.len()];
            self.raw(p, q, &mut raw);
            self.projector.project_into(&raw, out)
        }
    }

    /// Lipschitz bound `‖R⁻¹‖(‖B‖ + ‖D‖)` in the Frobenius norm.
    pub fn lipschitz_bound(&self, b: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
        frob(&self.projector.metric.r_inv) * (frob(b) + frob(d))
    }
}

pub fn control_map(
    p: &DVector<f64>,
    q: &DVector<f64>,
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    gamma: &ConstraintSet,
    metric: &WeightedMetric,
) -> Result<DVector<f64>> {
    let map = ControlMap::new(b, d, Projector::new(gamma.clone(), metric.clone())?)?;
    let mut out = vec![0.0; metric.dim()];
    map.eval(p.as_slice(), q.as_slice(), &mut out)?;
    Ok(DVector::from_vec(out))
}

/// Draws a feasible point near `center`.
pub fn sample_feasible(gamma: &ConstraintSet, center: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = center.len();
    let z: Vec<f64> = (0..m)
        .map(|i| center[i] + spread * rng.sample::<f64, _>(StandardNormal))
        .collect();
    match gamma {
        ConstraintSet::FullSpace => z,
        ConstraintSet::NonnegativeOrthant => z.iter().map(|v| v.max(0.0)).collect(),
        ConstraintSet::Box { lower, upper } => (0..m)
            .map(|i| {
                let lo = lower[i].max(center[i] - spread);
                let hi = upper[i].min(center[i] + spread);
                if lo < hi {
                    lo + (hi - lo) * rng.random::<f64>()
                } else {
                    z[i].max(lower[i]).min(upper[i])
                }
            })
            .collect(),
        ConstraintSet::LinearSubspace(_) | ConstraintSet::HalfspaceCone(_) => {
            let proj = Projector::new(gamma.clone(), WeightedMetric::identity(m)).expect("validated set");
            let mut y = vec![0.0; m];
            match proj.project_into(&z, &mut y) {
                Ok(()) => y,
                Err(_) => vec![0.0; m],
            }
        }
    }
}

/// Largest sampled value of `<R(x - px), y - px>` over feasible `y`; returns
/// the constraint violation instead when `px` itself is infeasible.
pub fn variational_residual(
    x: &DVector<f64>,
    px: &DVector<f64>,
    gamma: &ConstraintSet,
    metric: &WeightedMetric,
    samples: usize,
) -> f64 {
    let viol = gamma.violation(px.as_slice());
    if viol > 1e-12 * (1.0 + px.amax()) {
        return viol;
    }
    let m = x.len();
    let diff: Vec<f64> = (0..m).map(|i| x[i] - px[i]).collect();
    let mut rdiff = vec![0.0; m];
    gemv_acc(&mut rdiff, &metric.r, &diff);
    let eval = |y: &[f64]| -> f64 { (0..m).map(|i| rdiff[i] * (y[i] - px[i])).sum() };
    let mut worst = eval(&vec![0.0; m]);
    if matches!(
        gamma,
        ConstraintSet::FullSpace
            | ConstraintSet::NonnegativeOrthant
            | ConstraintSet::LinearSubspace(_)
            | ConstraintSet::HalfspaceCone(_)
    ) {
        let twice: Vec<f64> = px.iter().map(|v| 2.0 * v).collect();
        worst = worst.max(eval(&twice));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
    let spread = 1.0 + x.amax();
    for s in 0..samples {
        let center: Vec<f64> = if s % 2 == 0 { px.iter().cloned().collect() } else { vec![0.0; m] };
        let local = if s % 4 < 2 { spread } else { 1e-3 * spread };
        let y = sample_feasible(gamma, &center, local, &mut rng);
        worst = worst.max(eval(&y));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn full_space_is_identity() {
        let r = WeightedMetric::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let p = project(&v(&[1.0, -2.0]), &ConstraintSet::FullSpace, &r).unwrap();
        assert_eq!(p.as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn orthant_diagonal_clamps() {
        let r = WeightedMetric::new(DMatrix::from_diagonal(&v(&[1.0, 3.0]))).unwrap();
        let p = project(&v(&[1.0, -2.0]), &ConstraintSet::NonnegativeOrthant, &r).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn subspace_closed_form() {
        let gamma = ConstraintSet::LinearSubspace(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        let p = project(&v(&[1.0, 0.0]), &gamma, &WeightedMetric::identity(2)).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-14 && (p[1] + 0.5).abs() < 1e-14);
        // Dense search along the subspace direction (1, -1).
        let mut best = (f64::INFINITY, 0.0);
        for k in -2000..=2000 {
            let s = k as f64 * 1e-3;
            let d = (1.0 - s).powi(2) + s * s;
            if d < best.0 {
                best = (d, s);
            }
        }
        assert!((best.1 - 0.5).abs() < 1e-3);
    }

    #[test]
    fn orthant_coupled_metric_matches_grid_oracle() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let metric = WeightedMetric::new(r.clone()).unwrap();
        let x = v(&[-1.0, 1.0]);
        let p = project(&x, &ConstraintSet::NonnegativeOrthant, &metric).unwrap();
        // Grid oracle over [0, 2]^2 with refinement.
        let f = |y0: f64, y1: f64| {
            let d = [y0 - x[0], y1 - x[1]];
            crate::linalg::quad(&r, &d)
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let mut lo = (0.0, 0.0);
        let mut width = 2.0;
        for _ in 0..6 {
            for a in 0..=100 {
                for b in 0..=100 {
                    let y0 = (lo.0 + width * a as f64 / 100.0).max(0.0);
                    let y1 = (lo.1 + width * b as f64 / 100.0).max(0.0);
                    let val = f(y0, y1);
                    if val < best.0 {
                        best = (val, y0, y1);
                    }
                }
            }
            width /= 10.0;
            lo = ((best.1 - width / 2.0).max(0.0), (best.2 - width / 2.0).max(0.0));
        }
        assert!((p[0] - best.1).abs() < 1e-6, "{p} vs {best:?}");
        assert!((p[1] - best.2).abs() < 1e-6, "{p} vs {best:?}");
        assert!((p[0] - 0.0).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn control_map_examples() {
        let m1 = |x: f64| DMatrix::from_element(1, 1, x);
        let metric = WeightedMetric::new(m1(2.0)).unwrap();
        let u = control_map(&v(&[4.0]), &v(&[7.0]), &m1(1.0), &m1(0.0), &ConstraintSet::FullSpace, &metric).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-14);
        let metric = WeightedMetric::new(m1(1.0)).unwrap();
        let u = control_map(&v(&[1.0]), &v(&[-3.0]), &m1(1.0), &m1(1.0), &ConstraintSet::NonnegativeOrthant, &metric)
            .unwrap();
        assert_eq!(u[0], 0.0);
        for set in [
            ConstraintSet::FullSpace,
            ConstraintSet::NonnegativeOrthant,
            ConstraintSet::Box { lower: vec![-1.0], upper: vec![2.0] },
            ConstraintSet::HalfspaceCone(m1(1.0)),
        ] {
            let u = control_map(&v(&[0.0]), &v(&[0.0]), &m1(1.0), &m1(1.0), &set, &metric).unwrap();
            assert_eq!(u[0], 0.0);
        }
    }

    #[test]
    fn residual_examples() {
        let metric = WeightedMetric::identity(2);
        let r = variational_residual(&v(&[-1.0, -1.0]), &v(&[0.0, 0.0]), &ConstraintSet::NonnegativeOrthant, &metric, 500);
        assert!(r <= 1e-15);
        let r = variational_residual(&v(&[-1.0, 2.0]), &v(&[-1.0, 2.0]), &ConstraintSet::NonnegativeOrthant, &metric, 50);
        assert!(r > 0.0);
    }

    #[test]
    fn metric_factor_reproduces_norm() {
        let r = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 1.0]);
        let metric = WeightedMetric::new(r).unwrap();
        let x = [0.7, -1.3];
        let lt = metric.l.transpose() * v(&x);
        assert!((lt.norm_squared() - metric.norm_sq(&x)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(WeightedMetric::new(DMatrix::from_element(1, 1, 0.0)).is_err());
        let bad = ConstraintSet::Box { lower: vec![0.5], upper: vec![1.0] };
        assert!(bad.validate(1).is_err());
        let dep = ConstraintSet::LinearSubspace(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]));
        assert!(dep.validate(2).is_err());
    }
}
