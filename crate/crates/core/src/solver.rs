//! Picard iteration for the consistency system.
//!
//! Each iteration runs a forward Euler pass for the major state and every
//! minor particle, driven by the adjoint values of the previous iterate, and
//! then a backward least-squares Monte Carlo pass for the adjoints given the
//! new states.
//!
//! Storage is flat and path-major so that everything belonging to one common
//! path is contiguous:
//!
//! ```text
//! major   [p][j][n]
//! minor   [p][j][k][i][n]
//! means   [p][j][k][n]
//! ```
//!
//! Backward regressions are pooled over every sample of the same equation.
//! The minor basis is `{1, α_k, α0, m̂_1..m̂_K}` and the major basis is
//! `{1, α0, m̂_1..m̂_K}`; each is also crossed with the Brownian increments of
//! the step so that the fit reads `β(t_{j+1}) ≈ z·B + Σ_c (z·Z_c) ΔW_c`. The
//! `Z_c` blocks give the martingale integrands directly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::convex::{sample_feasible, ConstraintSet, ControlMap, Projector, WeightedMetric};
use crate::error::{Error, Result};
use crate::linalg::{dot, gemv_acc, gemv_t_acc};
use crate::lsq;
use crate::model::{validate_spec, ModelSpec};
use crate::paths::{NoiseEnsemble, TimeGrid};

/// States or adjoints beyond this magnitude count as divergence.
pub const BLOWUP: f64 = 1e100;

/// What the backward driver uses for its linear `(Y, Z)` terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverFreezing {
    /// The regression estimates at the current node of the current sweep.
    #[default]
    Current,
    /// The adjoint values of the previous Picard iterate.
    Previous,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub freezing: DriverFreezing,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-4, max_iter: 50, freezing: DriverFreezing::Current }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub paths: usize,
    pub particles: usize,
    pub types: usize,
    pub steps: usize,
    pub n: usize,
    pub m: usize,
}

impl Layout {
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    #[inline]
    pub fn major(&self, p: usize, j: usize) -> usize {
        (p * (self.steps + 1) + j) * self.n
    }

    #[inline]
    pub fn minor(&self, p: usize, j: usize, k: usize, i: usize) -> usize {
        (((p * (self.steps + 1) + j) * self.types + k) * self.particles + i) * self.n
    }

    #[inline]
    pub fn mean(&self, p: usize, j: usize, k: usize) -> usize {
        ((p * (self.steps + 1) + j) * self.types + k) * self.n
    }

    fn major_path(&self) -> usize {
        self.nodes() * self.n
    }

    fn minor_path(&self) -> usize {
        self.nodes() * self.types * self.particles * self.n
    }

    fn mean_path(&self) -> usize {
        self.nodes() * self.types * self.n
    }

    pub fn major_basis(&self) -> usize {
        1 + self.n * (self.types + 1)
    }

    pub fn minor_basis(&self) -> usize {
        1 + self.n * (self.types + 2)
    }
}

/// Adjoint feedback on the regression basis at one node. Values are rows:
/// `β = z · beta`, `γ = z · gamma`, `γ_{k0} = z · gamma_common`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeField {
    pub beta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub gamma_common: DMatrix<f64>,
}

impl NodeField {
    fn zeros(d: usize, n: usize) -> Self {
        Self { beta: DMatrix::zeros(d, n), gamma: DMatrix::zeros(d, n), gamma_common: DMatrix::zeros(d, n) }
    }
}

#[derive(Clone, Debug)]
pub struct CCIterate {
    pub layout: Layout,
    pub alpha0: Vec<f64>,
    pub beta0: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_common: Vec<f64>,
    pub mhat: Vec<f64>,
    pub phi: Vec<f64>,
    /// Major fields per node.
    pub major_fields: Vec<NodeField>,
    /// Minor fields per type and node.
    pub minor_fields: Vec<Vec<NodeField>>,
}

impl CCIterate {
    pub fn zeros(layout: Layout) -> Self {
        let lay = layout;
        let major = lay.paths * lay.major_path();
        let minor = lay.paths * lay.minor_path();
        Self {
            layout,
            alpha0: vec![0.0; major],
            beta0: vec![0.0; major],
            gamma0: vec![0.0; major],
            alpha: vec![0.0; minor],
            beta: vec![0.0; minor],
            gamma: vec![0.0; minor],
            gamma_common: vec![0.0; minor],
            mhat: vec![0.0; lay.paths * lay.mean_path()],
            phi: vec![0.0; major],
            major_fields: vec![NodeField::zeros(lay.major_basis(), lay.n); lay.nodes()],
            minor_fields: vec![vec![NodeField::zeros(lay.minor_basis(), lay.n); lay.nodes()]; lay.types],
        }
    }

    pub fn alpha0_at(&self, p: usize, j: usize) -> &[f64] {
        let o = self.layout.major(p, j);
        &self.alpha0[o..o + self.layout.n]
    }

    pub fn beta0_at(&self, p: usize, j: usize) -> &[f64] {
        let o = self.layout.major(p, j);
        &self.beta0[o..o + self.layout.n]
    }

    pub fn gamma0_at(&self, p: usize, j: usize) -> &[f64] {
        let o = self.layout.major(p, j);
        &self.gamma0[o..o + self.layout.n]
    }

    pub fn phi_at(&self, p: usize, j: usize) -> &[f64] {
        let o = self.layout.major(p, j);
        &self.phi[o..o + self.layout.n]
    }

    pub fn mhat_at(&self, p: usize, j: usize, k: usize) -> &[f64] {
        let o = self.layout.mean(p, j, k);
        &self.mhat[o..o + self.layout.n]
    }

    pub fn alpha_at(&self, p: usize, j: usize, k: usize, i: usize) -> &[f64] {
        let o = self.layout.minor(p, j, k, i);
        &self.alpha[o..o + self.layout.n]
    }

    pub fn beta_at(&self, p: usize, j: usize, k: usize, i: usize) -> &[f64] {
        let o = self.layout.minor(p, j, k, i);
        &self.beta[o..o + self.layout.n]
    }

    pub fn gamma_at(&self, p: usize, j: usize, k: usize, i: usize) -> &[f64] {
        let o = self.layout.minor(p, j, k, i);
        &self.gamma[o..o + self.layout.n]
    }

    pub fn gamma_common_at(&self, p: usize, j: usize, k: usize, i: usize) -> &[f64] {
        let o = self.layout.minor(p, j, k, i);
        &self.gamma_common[o..o + self.layout.n]
    }
}

/// Coefficients of one agent's state equation at one node.
#[derive(Clone, Debug)]
pub struct AgentCoefs {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub f1: DMatrix<f64>,
    pub f2: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub drift: DVector<f64>,
    pub sigma: DVector<f64>,
    pub map: ControlMap,
}

impl AgentCoefs {
    /// One Euler step of the state; `scratch` needs `2n` entries.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn step(&self, x: &[f64], u: &[f64], phi: &[f64], x0: &[f64], dt: f64, dw: f64, scratch: &mut [f64], out: &mut [f64]) {
        let n = x.len();
        let (dr, df) = scratch.split_at_mut(n);
        dr.copy_from_slice(self.drift.as_slice());
        gemv_acc(dr, &self.a, x);
        gemv_acc(dr, &self.b, u);
        gemv_acc(dr, &self.f1, phi);
        df.copy_from_slice(self.sigma.as_slice());
        gemv_acc(df, &self.c, x);
        gemv_acc(df, &self.d, u);
        gemv_acc(df, &self.f2, phi);
        gemv_acc(df, &self.h, x0);
        for r in 0..n {
            out[r] = x[r] + dr[r] * dt + df[r] * dw;
        }
    }

    /// Drift and diffusion written separately into `dr`, `df`.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn coefficients(&self, x: &[f64], u: &[f64], phi: &[f64], x0: &[f64], dr: &mut [f64], df: &mut [f64]) {
        dr.copy_from_slice(self.drift.as_slice());
        gemv_acc(dr, &self.a, x);
        gemv_acc(dr, &self.b, u);
        gemv_acc(dr, &self.f1, phi);
        df.copy_from_slice(self.sigma.as_slice());
        gemv_acc(df, &self.c, x);
        gemv_acc(df, &self.d, u);
        gemv_acc(df, &self.f2, phi);
        gemv_acc(df, &self.h, x0);
    }
}

#[derive(Clone, Debug)]
pub struct NodeModel {
    pub major: AgentCoefs,
    pub minors: Vec<AgentCoefs>,
}

/// Time-discretized model: per-node coefficients, cost data and the linear
/// maps from the regression bases to the tracking errors.
#[derive(Clone, Debug)]
pub struct Scheme {
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub pi: Vec<f64>,
    pub nodes: Vec<NodeModel>,
    pub q0: DMatrix<f64>,
    pub g0: DMatrix<f64>,
    pub r0: DMatrix<f64>,
    pub rho0: f64,
    pub q: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub r: Vec<DMatrix<f64>>,
    pub rho: f64,
    pub major_set: ConstraintSet,
    pub minor_sets: Vec<ConstraintSet>,
    pub x0_init: DVector<f64>,
    pub x_init: DVector<f64>,
    /// `z0 · l0 = (α0 - ρ0 Φ)'`.
    pub l0: DMatrix<f64>,
    /// `z · l = (α_k - ρ Φ - (1-ρ) α0)'`.
    pub l: DMatrix<f64>,
}

impl Scheme {
    pub fn new(spec: &ModelSpec, grid: TimeGrid) -> Result<Self> {
        let report = validate_spec(spec)?;
        if !report.is_ok() {
            return Err(Error::Structure(report.violations.join("; ")));
        }
        if (grid.horizon - spec.horizon).abs() > 1e-12 * (1.0 + spec.horizon) {
            return Err(Error::Structure("noise grid horizon differs from the model horizon".into()));
        }
        let (n, k) = (spec.n, spec.k());
        let mj = &spec.major;
        let mn = &spec.minor;
        let major_proj = Projector::new(mj.constraint.clone(), WeightedMetric::new(mj.r.clone())?)?;
        let minor_proj: Vec<Projector> = spec
            .types
            .iter()
            .map(|ty| Projector::new(ty.constraint.clone(), WeightedMetric::new(ty.r.clone())?))
            .collect::<Result<_>>()?;
        let mut nodes = Vec::with_capacity(grid.steps + 1);
        for j in 0..=grid.steps {
            let t = grid.t(j);
            let major = AgentCoefs {
                a: mj.a.at(t).clone(),
                b: mj.b.at(t).clone(),
                c: mj.c.at(t).clone(),
                d: mj.d.at(t).clone(),
                f1: mj.f1.at(t).clone(),
                f2: mj.f2.at(t).clone(),
                h: DMatrix::zeros(n, n),
                drift: mj.drift.at(t).clone(),
                sigma: mj.sigma.at(t).clone(),
                map: ControlMap::new(mj.b.at(t), mj.d.at(t), major_proj.clone())?,
            };
            let minors = spec
                .types
                .iter()
                .zip(&minor_proj)
                .map(|(ty, proj)| {
                    Ok(AgentCoefs {
                        a: ty.a.at(t).clone(),
                        b: mn.b.at(t).clone(),
                        c: mn.c.at(t).clone(),
                        d: ty.d.at(t).clone(),
                        f1: mn.f1.at(t).clone(),
                        f2: mn.f2.at(t).clone(),
                        h: mn.h.at(t).clone(),
                        drift: mn.drift.at(t).clone(),
                        sigma: mn.sigma.at(t).clone(),
                        map: ControlMap::new(mn.b.at(t), ty.d.at(t), proj.clone())?,
                    })
                })
                .collect::<Result<_>>()?;
            nodes.push(NodeModel { major, minors });
        }
        let pi = spec.pi();
        let eye = DMatrix::<f64>::identity(n, n);
        let mut l0 = DMatrix::zeros(1 + n * (k + 1), n);
        l0.view_mut((1, 0), (n, n)).copy_from(&eye);
        let mut l = DMatrix::zeros(1 + n * (k + 2), n);
        l.view_mut((1, 0), (n, n)).copy_from(&eye);
        l.view_mut((1 + n, 0), (n, n)).copy_from(&(&eye * -(1.0 - mn.rho)));
        for (kk, w) in pi.iter().enumerate() {
            l0.view_mut((1 + n * (1 + kk), 0), (n, n)).copy_from(&(&eye * (-mj.rho * w)));
            l.view_mut((1 + n * (2 + kk), 0), (n, n)).copy_from(&(&eye * (-mn.rho * w)));
        }
        Ok(Self {
            grid,
            n,
            m: spec.m,
            k,
            pi,
            nodes,
            q0: mj.q.clone(),
            g0: mj.g.clone(),
            r0: mj.r.clone(),
            rho0: mj.rho,
            q: mn.q.clone(),
            g: mn.g.clone(),
            r: spec.types.iter().map(|t| t.r.clone()).collect(),
            rho: mn.rho,
            major_set: mj.constraint.clone(),
            minor_sets: spec.types.iter().map(|t| t.constraint.clone()).collect(),
            x0_init: spec.x0_init.clone(),
            x_init: spec.x_init.clone(),
            l0,
            l,
        })
    }

    pub fn layout(&self, ens: &NoiseEnsemble) -> Layout {
        Layout { paths: ens.paths, particles: ens.particles, types: self.k, steps: self.grid.steps, n: self.n, m: self.m }
    }

    fn check_ensemble(&self, ens: &NoiseEnsemble) -> Result<()> {
        if ens.types != self.k {
            return Err(Error::Structure(format!("ensemble has {} types, model has {}", ens.types, self.k)));
        }
        if ens.grid != self.grid {
            return Err(Error::Structure("ensemble grid differs from the solver grid".into()));
        }
        Ok(())
    }

    /// Terminal major field: `β0(T) = -G0 (α0 - ρ0 Φ)`.
    pub fn major_terminal(&self) -> DMatrix<f64> {
        -(&self.l0 * self.g0.transpose())
    }

    /// Terminal minor field: `β_k(T) = -G (α_k - ρ Φ - (1-ρ) α0)`.
    pub fn minor_terminal(&self) -> DMatrix<f64> {
        -(&self.l * self.g.transpose())
    }

    /// Writes `[1, α0, m̂_1..m̂_K]`.
    #[inline]
    pub fn major_basis(&self, alpha0: &[f64], means: &[f64], z: &mut [f64]) {
        let n = self.n;
        z[0] = 1.0;
        z[1..1 + n].copy_from_slice(alpha0);
        z[1 + n..].copy_from_slice(means);
    }

    /// Writes `[1, α_k, α0, m̂_1..m̂_K]`.
    #[inline]
    pub fn minor_basis(&self, alpha: &[f64], alpha0: &[f64], means: &[f64], z: &mut [f64]) {
        let n = self.n;
        z[0] = 1.0;
        z[1..1 + n].copy_from_slice(alpha);
        z[1 + n..1 + 2 * n].copy_from_slice(alpha0);
        z[1 + 2 * n..].copy_from_slice(means);
    }

    fn forward_path(&self, p: usize, ens: &NoiseEnsemble, lay: &Layout, bufs: ForwardPath<'_>) -> Result<()> {
        let ForwardPath { a0, a, mh, ph, b0, g0, b, g } = bufs;
        let (n, m, kk, mm) = (self.n, self.m, self.k, lay.particles);
        a0[..n].copy_from_slice(self.x0_init.as_slice());
        for k in 0..kk {
            for i in 0..mm {
                let o = lay.minor(0, 0, k, i);
                a[o..o + n].copy_from_slice(self.x_init.as_slice());
            }
        }
        let mut u = vec![0.0; m];
        let mut scratch = vec![0.0; 2 * n];
        let mut next = vec![0.0; n];
        for j in 0..=lay.steps {
            for k in 0..kk {
                let mo = lay.mean(0, j, k);
                let slot = &mut mh[mo..mo + n];
                slot.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..mm {
                    let o = lay.minor(0, j, k, i);
                    for r in 0..n {
                        slot[r] += a[o + r];
                    }
                }
                slot.iter_mut().for_each(|v| *v /= mm as f64);
            }
            let po = lay.major(0, j);
            for r in 0..n {
                ph[po + r] = (0..kk).map(|k| self.pi[k] * mh[lay.mean(0, j, k) + r]).sum();
            }
            if j == lay.steps {
                break;
            }
            let dt = self.grid.step(j);
            let node = &self.nodes[j];
            let phi = ph[po..po + n].to_vec();
            let x0 = a0[po..po + n].to_vec();
            node.major.map.eval(&b0[po..po + n], &g0[po..po + n], &mut u)?;
            node.major.step(&x0, &u, &phi, &x0, dt, ens.dw0(p, j), &mut scratch, &mut next);
            if next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
                return Err(Error::Divergence(format!("major state, path {p}, node {}", j + 1)));
            }
            a0[po + n..po + 2 * n].copy_from_slice(&next);
            for k in 0..kk {
                let coefs = &node.minors[k];
                for i in 0..mm {
                    let o = lay.minor(0, j, k, i);
                    coefs.map.eval(&b[o..o + n], &g[o..o + n], &mut u)?;
                    coefs.step(&a[o..o + n], &u, &phi, &x0, dt, ens.dw(p, j, k, i), &mut scratch, &mut next);
                    if next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
                        return Err(Error::Divergence(format!("path {p}, type {k}, particle {i}, node {}", j + 1)));
                    }
                    let o1 = lay.minor(0, j + 1, k, i);
                    a[o1..o1 + n].copy_from_slice(&next);
                }
            }
        }
        Ok(())
    }

    /// Forward Euler pass; controls use the adjoint values already in `it`.
    pub fn forward_pass(&self, ens: &NoiseEnsemble, it: &mut CCIterate) -> Result<()> {
        self.check_ensemble(ens)?;
        let lay = it.layout;
        let CCIterate { alpha0, beta0, gamma0, alpha, beta, gamma, mhat, phi, .. } = it;
        let errors: Vec<Error> = alpha0
            .par_chunks_mut(lay.major_path())
            .zip(alpha.par_chunks_mut(lay.minor_path()))
            .zip(mhat.par_chunks_mut(lay.mean_path()))
            .zip(phi.par_chunks_mut(lay.major_path()))
            .enumerate()
            .filter_map(|(p, (((a0, a), mh), ph))| {
                let (mo, no) = (p * lay.major_path(), p * lay.minor_path());
                let bufs = ForwardPath {
                    a0,
                    a,
                    mh,
                    ph,
                    b0: &beta0[mo..mo + lay.major_path()],
                    g0: &gamma0[mo..mo + lay.major_path()],
                    b: &beta[no..no + lay.minor_path()],
                    g: &gamma[no..no + lay.minor_path()],
                };
                self.forward_path(p, ens, &lay, bufs).err()
            })
            .collect();
        match errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Backward regression pass, in place. Returns the squared-difference
    /// statistics against the adjoints held on entry.
    pub fn backward_pass(&self, ens: &NoiseEnsemble, it: &mut CCIterate, freezing: DriverFreezing) -> Result<BackwardStats> {
        self.check_ensemble(ens)?;
        let lay = it.layout;
        let (n, kk) = (self.n, self.k);
        let (d0, d) = (lay.major_basis(), lay.minor_basis());
        let nodes = lay.nodes();
        let mut node_sq = vec![0.0; nodes];
        let mut gamma_sq = 0.0;
        let mut deficient = 0;

        // Terminal node.
        let term0 = self.major_terminal();
        let term = self.minor_terminal();
        let jt = lay.steps;
        it.major_fields[jt] = NodeField { beta: term0.clone(), ..NodeField::zeros(d0, n) };
        for k in 0..kk {
            it.minor_fields[k][jt] = NodeField { beta: term.clone(), ..NodeField::zeros(d, n) };
        }
        let zero_field0 = NodeField::zeros(d0, n);
        node_sq[jt] += self.update_major(it, jt, &NodeField { beta: term0, ..zero_field0 })?.0;
        for k in 0..kk {
            node_sq[jt] += self.update_minor(it, jt, k, &NodeField { beta: term.clone(), ..NodeField::zeros(d, n) })?.0;
        }

        let mut x0buf = Vec::new();
        let mut y0buf = Vec::new();
        let mut xbuf = Vec::new();
        let mut ybuf = Vec::new();
        for j in (0..lay.steps).rev() {
            let dt = self.grid.step(j);
            let node = &self.nodes[j];

            self.major_design(ens, it, j, freezing, &mut x0buf, &mut y0buf);
            let fit = lsq::fit(&x0buf, &y0buf, 2 * d0, n)?;
            deficient += fit.deficient as usize;
            let tilde = fit.coef.rows(0, d0).into_owned();
            let zc = fit.coef.rows(d0, d0).into_owned();
            let beta = match freezing {
                DriverFreezing::Current => {
                    &tilde + (&tilde * &node.major.a + &zc * &node.major.c - &self.l0 * self.q0.transpose()) * dt
                }
                DriverFreezing::Previous => tilde,
            };
            let field = NodeField { beta, gamma: zc, gamma_common: DMatrix::zeros(d0, n) };
            let (b2, g2, _) = self.update_major(it, j, &field)?;
            node_sq[j] += b2;
            gamma_sq += dt * g2;
            it.major_fields[j] = field;

            for k in 0..kk {
                self.minor_design(ens, it, j, k, freezing, &mut xbuf, &mut ybuf);
                let fit = lsq::fit(&xbuf, &ybuf, 3 * d, n)?;
                deficient += fit.deficient as usize;
                let tilde = fit.coef.rows(0, d).into_owned();
                let zk = fit.coef.rows(d, d).into_owned();
                let zk0 = fit.coef.rows(2 * d, d).into_owned();
                let coefs = &node.minors[k];
                let beta = match freezing {
                    DriverFreezing::Current => {
                        &tilde + (&tilde * &coefs.a + &zk * &coefs.c - &self.l * self.q.transpose()) * dt
                    }
                    DriverFreezing::Previous => tilde,
                };
                let field = NodeField { beta, gamma: zk, gamma_common: zk0 };
                let (b2, g2, gc2) = self.update_minor(it, j, k, &field)?;
                node_sq[j] += b2;
                gamma_sq += dt * (g2 + gc2);
                it.minor_fields[k][j] = field;
            }
        }
        let sup = node_sq.iter().cloned().fold(0.0, f64::max);
        Ok(BackwardStats { sup_beta: sup, gamma_integral: gamma_sq, deficient_regressions: deficient })
    }

    fn major_design(&self, ens: &NoiseEnsemble, it: &CCIterate, j: usize, freezing: DriverFreezing, x: &mut Vec<f64>, y: &mut Vec<f64>) {
        let lay = it.layout;
        let (n, d0) = (self.n, lay.major_basis());
        let dt = self.grid.step(j);
        x.clear();
        x.resize(lay.paths * 2 * d0, 0.0);
        y.clear();
        y.resize(lay.paths * n, 0.0);
        let mut z = vec![0.0; d0];
        let mut w = vec![0.0; n];
        for p in 0..lay.paths {
            let mo = lay.mean(p, j, 0);
            self.major_basis(it.alpha0_at(p, j), &it.mhat[mo..mo + n * self.k], &mut z);
            let dw = ens.dw0(p, j);
            let row = &mut x[p * 2 * d0..(p + 1) * 2 * d0];
            for b in 0..d0 {
                row[b] = z[b];
                row[d0 + b] = z[b] * dw;
            }
            let yr = &mut y[p * n..(p + 1) * n];
            yr.copy_from_slice(it.beta0_at(p, j + 1));
            if freezing == DriverFreezing::Previous {
                let coefs = &self.nodes[j].major;
                let mut drv = vec![0.0; n];
                gemv_t_acc(&mut drv, &coefs.a, it.beta0_at(p, j));
                gemv_t_acc(&mut drv, &coefs.c, it.gamma0_at(p, j));
                w.iter_mut().for_each(|v| *v = 0.0);
                gemv_t_acc(&mut w, &self.l0, &z);
                let mut qw = vec![0.0; n];
                gemv_acc(&mut qw, &self.q0, &w);
                for r in 0..n {
                    yr[r] += (drv[r] - qw[r]) * dt;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn minor_design(
        &self,
        ens: &NoiseEnsemble,
        it: &CCIterate,
        j: usize,
        k: usize,
        freezing: DriverFreezing,
        x: &mut Vec<f64>,
        y: &mut Vec<f64>,
    ) {
        let lay = it.layout;
        let (n, d, mm) = (self.n, lay.minor_basis(), lay.particles);
        let dt = self.grid.step(j);
        let width = 3 * d;
        x.clear();
        x.resize(lay.paths * mm * width, 0.0);
        y.clear();
        y.resize(lay.paths * mm * n, 0.0);
        x.par_chunks_mut(mm * width).zip(y.par_chunks_mut(mm * n)).enumerate().for_each(|(p, (xp, yp))| {
            let mut z = vec![0.0; d];
            let mut w = vec![0.0; n];
            let mut drv = vec![0.0; n];
            let mut qw = vec![0.0; n];
            let mo = lay.mean(p, j, 0);
            let means = &it.mhat[mo..mo + n * self.k];
            let a0 = it.alpha0_at(p, j);
            let dw0 = ens.dw0(p, j);
            let coefs = &self.nodes[j].minors[k];
            for i in 0..mm {
                self.minor_basis(it.alpha_at(p, j, k, i), a0, means, &mut z);
                let dw = ens.dw(p, j, k, i);
                let row = &mut xp[i * width..(i + 1) * width];
                for b in 0..d {
                    row[b] = z[b];
                    row[d + b] = z[b] * dw;
                    row[2 * d + b] = z[b] * dw0;
                }
                let yr = &mut yp[i * n..(i + 1) * n];
                yr.copy_from_slice(it.beta_at(p, j + 1, k, i));
                if freezing == DriverFreezing::Previous {
                    drv.iter_mut().for_each(|v| *v = 0.0);
                    gemv_t_acc(&mut drv, &coefs.a, it.beta_at(p, j, k, i));
                    gemv_t_acc(&mut drv, &coefs.c, it.gamma_at(p, j, k, i));
                    w.iter_mut().for_each(|v| *v = 0.0);
                    gemv_t_acc(&mut w, &self.l, &z);
                    qw.iter_mut().for_each(|v| *v = 0.0);
                    gemv_acc(&mut qw, &self.q, &w);
                    for r in 0..n {
                        yr[r] += (drv[r] - qw[r]) * dt;
                    }
                }
            }
        });
    }

    /// Writes the field values at node `j` of the major equation and returns
    /// the mean squared changes of `(β0, γ0, 0)`.
    fn update_major(&self, it: &mut CCIterate, j: usize, field: &NodeField) -> Result<(f64, f64, f64)> {
        let lay = it.layout;
        let (n, d0) = (self.n, lay.major_basis());
        let mut z = vec![0.0; d0];
        let mut nb = vec![0.0; n];
        let mut ng = vec![0.0; n];
        let (mut sb, mut sg) = (0.0, 0.0);
        for p in 0..lay.paths {
            let mo = lay.mean(p, j, 0);
            self.major_basis(it.alpha0_at(p, j), &it.mhat[mo..mo + n * self.k], &mut z);
            nb.iter_mut().for_each(|v| *v = 0.0);
            ng.iter_mut().for_each(|v| *v = 0.0);
            gemv_t_acc(&mut nb, &field.beta, &z);
            gemv_t_acc(&mut ng, &field.gamma, &z);
            if nb.iter().chain(&ng).any(|v| !v.is_finite() || v.abs() > BLOWUP) {
                return Err(Error::Divergence(format!("major adjoint, path {p}, node {j}")));
            }
            let o = lay.major(p, j);
            for r in 0..n {
                sb += (nb[r] - it.beta0[o + r]).powi(2);
                sg += (ng[r] - it.gamma0[o + r]).powi(2);
            }
            it.beta0[o..o + n].copy_from_slice(&nb);
            it.gamma0[o..o + n].copy_from_slice(&ng);
        }
        let pn = lay.paths as f64;
        Ok((sb / pn, sg / pn, 0.0))
    }

    fn update_minor(&self, it: &mut CCIterate, j: usize, k: usize, field: &NodeField) -> Result<(f64, f64, f64)> {
        let lay = it.layout;
        let (n, d, mm) = (self.n, lay.minor_basis(), lay.particles);
        let CCIterate { alpha0, alpha, beta, gamma, gamma_common, mhat, .. } = it;
        let (alpha0, alpha, mhat) = (&*alpha0, &*alpha, &*mhat);
        let partial: Vec<std::result::Result<(f64, f64, f64), Error>> = beta
            .par_chunks_mut(lay.minor_path())
            .zip(gamma.par_chunks_mut(lay.minor_path()))
            .zip(gamma_common.par_chunks_mut(lay.minor_path()))
            .enumerate()
            .map(|(p, ((bp, gp), gcp))| {
                let mut z = vec![0.0; d];
                let mut nb = vec![0.0; n];
                let mut ng = vec![0.0; n];
                let mut nc = vec![0.0; n];
                let mo = lay.mean(p, j, 0);
                let means = &mhat[mo..mo + n * self.k];
                let a0o = lay.major(p, j);
                let a0 = &alpha0[a0o..a0o + n];
                let (mut sb, mut sg, mut sc) = (0.0, 0.0, 0.0);
                for i in 0..mm {
                    let go = lay.minor(p, j, k, i);
                    let lo = lay.minor(0, j, k, i);
                    self.minor_basis(&alpha[go..go + n], a0, means, &mut z);
                    for v in nb.iter_mut().chain(ng.iter_mut()).chain(nc.iter_mut()) {
                        *v = 0.0;
                    }
                    gemv_t_acc(&mut nb, &field.beta, &z);
                    gemv_t_acc(&mut ng, &field.gamma, &z);
                    gemv_t_acc(&mut nc, &field.gamma_common, &z);
                    if nb.iter().chain(&ng).chain(&nc).any(|v| !v.is_finite() || v.abs() > BLOWUP) {
                        return Err(Error::Divergence(format!("path {p}, type {k}, particle {i}, node {j}")));
                    }
                    for r in 0..n {
                        sb += (nb[r] - bp[lo + r]).powi(2);
                        sg += (ng[r] - gp[lo + r]).powi(2);
                        sc += (nc[r] - gcp[lo + r]).powi(2);
                    }
                    bp[lo..lo + n].copy_from_slice(&nb);
                    gp[lo..lo + n].copy_from_slice(&ng);
                    gcp[lo..lo + n].copy_from_slice(&nc);
                }
                Ok((sb, sg, sc))
            })
            .collect();
        let (mut sb, mut sg, mut sc) = (0.0, 0.0, 0.0);
        for r in partial {
            let (b, g, c) = r?;
            sb += b;
            sg += g;
            sc += c;
        }
        let s = (lay.paths * mm) as f64;
        Ok((sb / s, sg / s, sc / s))
    }
}

struct ForwardPath<'a> {
    a0: &'a mut [f64],
    a: &'a mut [f64],
    mh: &'a mut [f64],
    ph: &'a mut [f64],
    b0: &'a [f64],
    g0: &'a [f64],
    b: &'a [f64],
    g: &'a [f64],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BackwardStats {
    /// Largest over nodes of the summed mean squared `β` changes.
    pub sup_beta: f64,
    /// `dt`-weighted sum of mean squared `γ` and `γ_{k0}` changes.
    pub gamma_integral: f64,
    pub deficient_regressions: usize,
}

impl BackwardStats {
    pub fn norm(&self) -> f64 {
        (self.sup_beta + self.gamma_integral).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardStatus {
    Converged,
    MaxIter,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PicardReport {
    pub iterations: usize,
    pub deltas: Vec<f64>,
    /// `deltas[n+1] / deltas[n]`.
    pub ratios: Vec<f64>,
    pub converged: bool,
    pub status: PicardStatus,
    pub tol: f64,
    pub final_residual: f64,
    pub freezing: DriverFreezing,
    pub rank_deficient_regressions: usize,
    pub message: Option<String>,
}

impl PicardReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratios(deltas: &[f64]) -> Vec<f64> {
    deltas
        .windows(2)
        .map(|w| {
            if w[0] > 0.0 {
                w[1] / w[0]
            } else if w[1] == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CCSolution {
    pub scheme: Arc<Scheme>,
    pub iterate: CCIterate,
    /// Common increments `[p][j]` the solution was computed on.
    pub common_noise: Vec<f64>,
}

/// Forward pass from `frozen`'s adjoints (one-shot convenience).
pub fn forward_pass(spec: &ModelSpec, ensemble: &NoiseEnsemble, frozen: &mut CCIterate) -> Result<()> {
    Scheme::new(spec, ensemble.grid)?.forward_pass(ensemble, frozen)
}

/// Backward pass on `forward`'s states (one-shot convenience).
pub fn backward_pass(spec: &ModelSpec, ensemble: &NoiseEnsemble, forward: &mut CCIterate, freezing: DriverFreezing) -> Result<BackwardStats> {
    Scheme::new(spec, ensemble.grid)?.backward_pass(ensemble, forward, freezing)
}

pub fn picard_solve(spec: &ModelSpec, ensemble: &NoiseEnsemble, tol: f64, max_iter: usize) -> Result<(CCSolution, PicardReport)> {
    picard_solve_with(spec, ensemble, &SolverOptions { tol, max_iter, ..Default::default() })
}

/// Picard iteration from the zero adjoint. Divergence and exhaustion of the
/// iteration budget are reported through the status, not as errors.
pub fn picard_solve_with(spec: &ModelSpec, ensemble: &NoiseEnsemble, opts: &SolverOptions) -> Result<(CCSolution, PicardReport)> {
    if !(opts.tol >= 0.0) || opts.max_iter == 0 {
        return Err(Error::Structure("tolerance must be nonnegative and max_iter positive".into()));
    }
    let scheme = Arc::new(Scheme::new(spec, ensemble.grid)?);
    scheme.check_ensemble(ensemble)?;
    let mut it = CCIterate::zeros(scheme.layout(ensemble));
    let mut deltas = Vec::new();
    let mut status = PicardStatus::MaxIter;
    let mut message = None;
    let mut deficient = 0;
    for _ in 0..opts.max_iter {
        let step = scheme
            .forward_pass(ensemble, &mut it)
            .and_then(|_| scheme.backward_pass(ensemble, &mut it, opts.freezing));
        match step {
            Ok(stats) => {
                deficient = stats.deficient_regressions;
                let delta = stats.norm();
                deltas.push(delta);
                if !delta.is_finite() {
                    status = PicardStatus::Diverged;
                    message = Some("non-finite iterate difference".into());
                    break;
                }
                if delta <= opts.tol {
                    status = PicardStatus::Converged;
                    break;
                }
            }
            Err(Error::Divergence(what)) => {
                status = PicardStatus::Diverged;
                message = Some(format!("non-finite or exploding value at {what}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let report = PicardReport {
        iterations: deltas.len(),
        ratios: ratios(&deltas),
        final_residual: deltas.last().cloned().unwrap_or(f64::NAN),
        deltas,
        converged: status == PicardStatus::Converged,
        status,
        tol: opts.tol,
        freezing: opts.freezing,
        rank_deficient_regressions: deficient,
        message,
    };
    Ok((CCSolution { scheme, iterate: it, common_noise: ensemble.dw0.clone() }, report))
}

impl CCSolution {
    pub fn layout(&self) -> Layout {
        self.iterate.layout
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.scheme.grid
    }

    pub fn major_control(&self, p: usize, j: usize) -> Result<Vec<f64>> {
        let mut u = vec![0.0; self.scheme.m];
        self.scheme.nodes[j].major.map.eval(self.iterate.beta0_at(p, j), self.iterate.gamma0_at(p, j), &mut u)?;
        Ok(u)
    }

    pub fn minor_control(&self, p: usize, j: usize, k: usize, i: usize) -> Result<Vec<f64>> {
        let mut u = vec![0.0; self.scheme.m];
        self.scheme.nodes[j].minors[k].map.eval(self.iterate.beta_at(p, j, k, i), self.iterate.gamma_at(p, j, k, i), &mut u)?;
        Ok(u)
    }

    /// Writes one CSV per quantity with columns `path, particle, node,
    /// value_0..`; minor quantities keep the first `max_particles` particles.
    pub fn write_csv(&self, dir: &Path, stem: &str, max_particles: usize) -> Result<Vec<PathBuf>> {
        let lay = self.layout();
        let it = &self.iterate;
        let mut files = Vec::new();
        let header = |w: &mut BufWriter<File>, width: usize| -> Result<()> {
            write!(w, "path,particle,node")?;
            for c in 0..width {
                write!(w, ",value_{c}")?;
            }
            writeln!(w)?;
            Ok(())
        };
        let row = |w: &mut BufWriter<File>, p: usize, i: usize, j: usize, v: &[f64]| -> Result<()> {
            write!(w, "{p},{i},{j}")?;
            for x in v {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
            Ok(())
        };
        let mut open = |name: &str| -> Result<(BufWriter<File>, PathBuf)> {
            let path = dir.join(format!("{stem}-{name}.csv"));
            files.push(path.clone());
            Ok((BufWriter::new(File::create(&path)?), path))
        };
        type Getter<'a> = Box<dyn Fn(usize, usize) -> Result<Vec<f64>> + 'a>;
        let major_q: Vec<(&str, usize, Getter)> = vec![
            ("alpha0", lay.n, Box::new(|p, j| Ok(it.alpha0_at(p, j).to_vec()))),
            ("beta0", lay.n, Box::new(|p, j| Ok(it.beta0_at(p, j).to_vec()))),
            ("gamma0", lay.n, Box::new(|p, j| Ok(it.gamma0_at(p, j).to_vec()))),
            ("u0", lay.m, Box::new(|p, j| self.major_control(p, j))),
            ("phi", lay.n, Box::new(|p, j| Ok(it.phi_at(p, j).to_vec()))),
        ];
        for (name, width, get) in major_q {
            let (mut w, _) = open(name)?;
            header(&mut w, width)?;
            for p in 0..lay.paths {
                for j in 0..lay.nodes() {
                    row(&mut w, p, 0, j, &get(p, j)?)?;
                }
            }
            w.flush()?;
        }
        let keep = max_particles.min(lay.particles);
        for k in 0..lay.types {
            let (mut w, _) = open(&format!("mhat-k{k}"))?;
            header(&mut w, lay.n)?;
            for p in 0..lay.paths {
                for j in 0..lay.nodes() {
                    row(&mut w, p, 0, j, it.mhat_at(p, j, k))?;
                }
            }
            w.flush()?;
            type MinorGetter<'a> = Box<dyn Fn(usize, usize, usize) -> Result<Vec<f64>> + 'a>;
            let minor_q: Vec<(&str, usize, MinorGetter)> = vec![
                ("alpha", lay.n, Box::new(|p, j, i| Ok(it.alpha_at(p, j, k, i).to_vec()))),
                ("beta", lay.n, Box::new(|p, j, i| Ok(it.beta_at(p, j, k, i).to_vec()))),
                ("gamma", lay.n, Box::new(|p, j, i| Ok(it.gamma_at(p, j, k, i).to_vec()))),
                ("gamma-common", lay.n, Box::new(|p, j, i| Ok(it.gamma_common_at(p, j, k, i).to_vec()))),
                ("u", lay.m, Box::new(|p, j, i| self.minor_control(p, j, k, i))),
            ];
            for (name, width, get) in minor_q {
                let (mut w, _) = open(&format!("{name}-k{k}"))?;
                header(&mut w, width)?;
                for p in 0..lay.paths {
                    for i in 0..keep {
                        for j in 0..lay.nodes() {
                            row(&mut w, p, i, j, &get(p, j, i)?)?;
                        }
                    }
                }
                w.flush()?;
            }
        }
        Ok(files)
    }
}

/// Trajectories of one agent under the decentralized feedback. Adjoints and
/// states have `J+1` nodes; `q`, `q_common` and `u` have `J`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPath {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub q_common: Vec<f64>,
    pub u: Vec<f64>,
}

/// Runs a type-`k` agent with its own increments `agent_noise` on common
/// path `common_path`, evaluating the solved adjoint fields at its state.
pub fn decentralized_strategy(solution: &CCSolution, k: usize, agent_noise: &[f64], common_path: usize) -> Result<AgentPath> {
    let sc = &solution.scheme;
    let it = &solution.iterate;
    let lay = it.layout;
    if k >= lay.types || common_path >= lay.paths {
        return Err(Error::Structure("agent type or common path out of range".into()));
    }
    if agent_noise.len() != lay.steps {
        return Err(Error::Structure("agent noise length differs from the step count".into()));
    }
    let (n, m, jn) = (lay.n, lay.m, lay.steps);
    let p = common_path;
    let mut out = AgentPath {
        x: vec![0.0; (jn + 1) * n],
        p: vec![0.0; (jn + 1) * n],
        q: vec![0.0; jn * n],
        q_common: vec![0.0; jn * n],
        u: vec![0.0; jn * m],
    };
    out.x[..n].copy_from_slice(sc.x_init.as_slice());
    let mut z = vec![0.0; lay.minor_basis()];
    let mut scratch = vec![0.0; 2 * n];
    let mut next = vec![0.0; n];
    for j in 0..=jn {
        let mo = lay.mean(p, j, 0);
        let x = out.x[j * n..(j + 1) * n].to_vec();
        sc.minor_basis(&x, it.alpha0_at(p, j), &it.mhat[mo..mo + n * lay.types], &mut z);
        let field = &it.minor_fields[k][j];
        gemv_t_acc(&mut out.p[j * n..(j + 1) * n], &field.beta, &z);
        if j == jn {
            break;
        }
        gemv_t_acc(&mut out.q[j * n..(j + 1) * n], &field.gamma, &z);
        gemv_t_acc(&mut out.q_common[j * n..(j + 1) * n], &field.gamma_common, &z);
        let coefs = &sc.nodes[j].minors[k];
        coefs.map.eval(&out.p[j * n..(j + 1) * n], &out.q[j * n..(j + 1) * n], &mut out.u[j * m..(j + 1) * m])?;
        coefs.step(
            &x,
            &out.u[j * m..(j + 1) * m],
            it.phi_at(p, j),
            it.alpha0_at(p, j),
            sc.grid.step(j),
            agent_noise[j],
            &mut scratch,
            &mut next,
        );
        if next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
            return Err(Error::Divergence(format!("decentralized agent, type {k}, node {}", j + 1)));
        }
        out.x[(j + 1) * n..(j + 2) * n].copy_from_slice(&next);
    }
    Ok(out)
}

/// The major agent's decentralized trajectory on common path `common_path`.
pub fn decentralized_major(solution: &CCSolution, common_path: usize) -> Result<AgentPath> {
    let sc = &solution.scheme;
    let it = &solution.iterate;
    let lay = it.layout;
    if common_path >= lay.paths {
        return Err(Error::Structure("common path out of range".into()));
    }
    let (n, m, jn) = (lay.n, lay.m, lay.steps);
    let p = common_path;
    let mut out = AgentPath {
        x: vec![0.0; (jn + 1) * n],
        p: vec![0.0; (jn + 1) * n],
        q: vec![0.0; jn * n],
        q_common: vec![0.0; jn * n],
        u: vec![0.0; jn * m],
    };
    out.x[..n].copy_from_slice(sc.x0_init.as_slice());
    let mut z = vec![0.0; lay.major_basis()];
    let mut scratch = vec![0.0; 2 * n];
    let mut next = vec![0.0; n];
    for j in 0..=jn {
        let mo = lay.mean(p, j, 0);
        let x = out.x[j * n..(j + 1) * n].to_vec();
        sc.major_basis(&x, &it.mhat[mo..mo + n * lay.types], &mut z);
        let field = &it.major_fields[j];
        gemv_t_acc(&mut out.p[j * n..(j + 1) * n], &field.beta, &z);
        if j == jn {
            break;
        }
        gemv_t_acc(&mut out.q[j * n..(j + 1) * n], &field.gamma, &z);
        let coefs = &sc.nodes[j].major;
        coefs.map.eval(&out.p[j * n..(j + 1) * n], &out.q[j * n..(j + 1) * n], &mut out.u[j * m..(j + 1) * m])?;
        coefs.step(&x, &out.u[j * m..(j + 1) * m], it.phi_at(p, j), &x, sc.grid.step(j), solution.common_noise[p * jn + j], &mut scratch, &mut next);
        if next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
            return Err(Error::Divergence(format!("decentralized major, node {}", j + 1)));
        }
        out.x[(j + 1) * n..(j + 2) * n].copy_from_slice(&next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HamiltonianCheck {
    /// Largest `<∂H/∂u(u*), u - u*>` over the sampled feasible `u`.
    pub max_violation: f64,
    /// Largest `|B'β + D'γ|` seen, for relative comparisons.
    pub scale: f64,
    pub samples: usize,
}

/// Samples nodes, agents and feasible controls and evaluates the
/// variational inequality of the pointwise Hamiltonian maximization.
pub fn hamiltonian_residual(solution: &CCSolution, samples: usize) -> Result<HamiltonianCheck> {
    let sc = &solution.scheme;
    let it = &solution.iterate;
    let lay = it.layout;
    let m = lay.m;
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a11_7e57);
    let mut worst = 0.0_f64;
    let mut scale = 0.0_f64;
    for _ in 0..samples {
        let j = rng.random_range(0..lay.steps);
        let p = rng.random_range(0..lay.paths);
        let who = rng.random_range(0..=lay.types);
        let (coefs, r, set, beta, gamma) = if who == 0 {
            (&sc.nodes[j].major, &sc.r0, &sc.major_set, it.beta0_at(p, j), it.gamma0_at(p, j))
        } else {
            let k = who - 1;
            let i = rng.random_range(0..lay.particles);
            (&sc.nodes[j].minors[k], &sc.r[k], &sc.minor_sets[k], it.beta_at(p, j, k, i), it.gamma_at(p, j, k, i))
        };
        let mut u = vec![0.0; m];
        coefs.map.eval(beta, gamma, &mut u)?;
        let mut v = vec![0.0; m];
        gemv_t_acc(&mut v, &coefs.b, beta);
        gemv_t_acc(&mut v, &coefs.d, gamma);
        scale = scale.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
        let mut ru = vec![0.0; m];
        gemv_acc(&mut ru, r, &u);
        let grad: Vec<f64> = v.iter().zip(&ru).map(|(a, b)| a - b).collect();
        let spread = 1.0 + u.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let mut probe = |y: &[f64]| {
            let diff: Vec<f64> = y.iter().zip(&u).map(|(a, b)| a - b).collect();
            worst = worst.max(dot(&grad, &diff));
        };
        probe(&vec![0.0; m]);
        if !matches!(set, ConstraintSet::Box { .. }) {
            probe(&u.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
        }
        for _ in 0..8 {
            let y = sample_feasible(set, &u, spread, &mut rng);
            probe(&y);
        }
    }
    Ok(HamiltonianCheck { max_violation: worst, scale, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Piecewise;
    use crate::paths::sample_ensemble;
    use rand_distr::StandardNormal;

    fn s1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn c1(v: f64) -> Piecewise<DMatrix<f64>> {
        Piecewise::constant(s1(v))
    }

    fn base(horizon: f64) -> ModelSpec {
        let mut s = ModelSpec::zeros(1, 1, &[1.0], horizon);
        s.x0_init = DVector::from_element(1, 1.0);
        s.x_init = DVector::from_element(1, 1.0);
        s
    }

    fn run_forward(spec: &ModelSpec, steps: usize, paths: usize, parts: usize) -> CCIterate {
        let grid = TimeGrid::new(spec.horizon, steps).unwrap();
        let ens = sample_ensemble(grid, paths, parts, spec.k(), 3).unwrap();
        let sc = Scheme::new(spec, grid).unwrap();
        let mut it = CCIterate::zeros(sc.layout(&ens));
        sc.forward_pass(&ens, &mut it).unwrap();
        it
    }

    #[test]
    fn zero_coefficients_keep_states_fixed() {
        let it = run_forward(&base(1.0), 10, 2, 4);
        assert!(it.alpha.iter().chain(&it.alpha0).all(|v| *v == 1.0));
    }

    #[test]
    fn euler_compound_growth() {
        let mut s = base(1.0);
        s.types[0].a = c1(1.0);
        let it = run_forward(&s, 100, 1, 3);
        let expect = 1.01_f64.powi(100);
        assert!((it.alpha_at(0, 100, 0, 2)[0] - expect).abs() < 1e-12);
        assert!((expect - 2.7048).abs() < 1e-4);
    }

    #[test]
    fn pure_drift_integrates_linearly() {
        let mut s = base(1.0);
        s.major.drift = Piecewise::constant(DVector::from_element(1, 1.0));
        let it = run_forward(&s, 20, 2, 2);
        for j in 0..=20 {
            assert!((it.alpha0_at(1, j)[0] - (1.0 + j as f64 * 0.05)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_terminal_gives_constant_adjoint() {
        let mut s = base(1.0);
        s.major.g = s1(2.0);
        s.minor.g = s1(1.0);
        s.x_init = DVector::from_element(1, 3.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let ens = sample_ensemble(grid, 8, 16, 1, 5).unwrap();
        let sc = Scheme::new(&s, grid).unwrap();
        let mut it = CCIterate::zeros(sc.layout(&ens));
        sc.forward_pass(&ens, &mut it).unwrap();
        sc.backward_pass(&ens, &mut it, DriverFreezing::Current).unwrap();
        for j in 0..=10 {
            assert!((it.beta0_at(3, j)[0] + 2.0).abs() < 1e-10);
            assert!((it.beta_at(3, j, 0, 5)[0] + 2.0).abs() < 1e-10);
            if j < 10 {
                assert!(it.gamma0_at(3, j)[0].abs() < 1e-10);
                assert!(it.gamma_at(3, j, 0, 5)[0].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_product_oracle() {
        let mut s = base(1.0);
        s.major.a = c1(1.0);
        s.major.g = s1(1.0);
        s.x0_init = DVector::from_element(1, -1.0);
        let steps = 50;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let ens = sample_ensemble(grid, 4, 2, 1, 1).unwrap();
        let sc = Scheme::new(&s, grid).unwrap();
        let mut it = CCIterate::zeros(sc.layout(&ens));
        sc.forward_pass(&ens, &mut it).unwrap();
        sc.backward_pass(&ens, &mut it, DriverFreezing::Current).unwrap();
        let growth = 1.02_f64.powi(steps as i32);
        assert!((it.beta0_at(0, steps)[0] - growth).abs() < 1e-10);
        let b0 = it.beta0_at(2, 0)[0];
        assert!((b0 / (growth * growth) - 1.0).abs() < 1e-10);
        assert!((b0 / 2f64.exp() - 1.0).abs() < 0.05);
    }

    #[test]
    fn brownian_endpoint_has_unit_integrand() {
        let (paths, steps, dt) = (4096, 20, 0.05_f64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dw: Vec<f64> = (0..paths * steps).map(|_| dt.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut w = vec![0.0; paths * (steps + 1)];
        for p in 0..paths {
            for j in 0..steps {
                w[p * (steps + 1) + j + 1] = w[p * (steps + 1) + j] + dw[p * steps + j];
            }
        }
        let mut beta: Vec<f64> = (0..paths).map(|p| w[p * (steps + 1) + steps]).collect();
        for j in (0..steps).rev() {
            let mut x = Vec::with_capacity(paths * 4);
            for p in 0..paths {
                let (wj, d) = (w[p * (steps + 1) + j], dw[p * steps + j]);
                x.extend([1.0, wj, d, wj * d]);
            }
            let fit = lsq::fit(&x, &beta, 4, 1).unwrap();
            let c = &fit.coef;
            for p in 0..paths {
                let wj = w[p * (steps + 1) + j];
                let gamma = c[(2, 0)] + c[(3, 0)] * wj;
                assert!((gamma - 1.0).abs() < 0.1, "node {j}: {gamma}");
                beta[p] = c[(0, 0)] + c[(1, 0)] * wj;
            }
        }
    }

    #[test]
    fn zero_cost_converges_immediately() {
        let mut s = base(1.0);
        s.major.a = c1(-0.5);
        s.major.b = c1(1.0);
        s.major.sigma = Piecewise::constant(DVector::from_element(1, 0.3));
        s.minor.b = c1(1.0);
        s.minor.sigma = Piecewise::constant(DVector::from_element(1, 0.3));
        s.types[0].constraint = ConstraintSet::NonnegativeOrthant;
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let ens = sample_ensemble(grid, 4, 8, 1, 2).unwrap();
        let (sol, rep) = picard_solve(&s, &ens, 1e-12, 5).unwrap();
        assert!(rep.converged && rep.iterations <= 2);
        assert!(rep.deltas.iter().all(|d| *d == 0.0));
        for j in 0..10 {
            assert_eq!(sol.minor_control(1, j, 0, 3).unwrap(), vec![0.0]);
            assert_eq!(sol.major_control(1, j).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn terminal_identities_hold() {
        let mut s = base(0.5);
        s.major.a = c1(-1.0);
        s.major.b = c1(1.0);
        s.major.q = s1(1.0);
        s.major.g = s1(0.7);
        s.major.rho = 0.4;
        s.major.sigma = Piecewise::constant(DVector::from_element(1, 0.2));
        s.minor.b = c1(1.0);
        s.minor.q = s1(1.0);
        s.minor.g = s1(0.9);
        s.minor.rho = 0.3;
        s.minor.sigma = Piecewise::constant(DVector::from_element(1, 0.4));
        let grid = TimeGrid::new(0.5, 8).unwrap();
        let ens = sample_ensemble(grid, 6, 10, 1, 9).unwrap();
        let (sol, _) = picard_solve(&s, &ens, 1e-8, 3).unwrap();
        let it = &sol.iterate;
        for p in 0..6 {
            let (a0, ph) = (it.alpha0_at(p, 8)[0], it.phi_at(p, 8)[0]);
            assert!((it.beta0_at(p, 8)[0] + 0.7 * (a0 - 0.4 * ph)).abs() < 1e-12);
            for i in 0..10 {
                let a = it.alpha_at(p, 8, 0, i)[0];
                let expect = -0.9 * (a - 0.3 * ph - 0.7 * a0);
                assert!((it.beta_at(p, 8, 0, i)[0] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ratios_handle_zero_deltas() {
        assert_eq!(ratios(&[2.0, 1.0, 0.0, 0.0]), vec![0.5, 0.0, 0.0]);
    }
}
