//! Finite-population experiments: every agent applies its decentralized
//! control in the coupled `N + 1` agent system, and the realized quantities
//! are compared with the limiting ones.
//!
//! Replication `r` runs on common path `r mod P` of the solved ensemble so the
//! solved mean field is available there, while agent `i` draws increments
//! from the agent stream `(seed, r, i)`. Baseline and deviation runs of the
//! same replication share every increment.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::convex::ConstraintSet;
use crate::error::{Error, Result};
use crate::linalg::{gemv_acc, quad};
use crate::model::{assign_population, PopulationAssignment};
use crate::paths::{increments, StreamRole};
use crate::solver::{decentralized_major, decentralized_strategy, CCSolution, BLOWUP};

/// Everything one replication needs that does not depend on the deviation.
#[derive(Clone, Debug)]
pub struct Replication {
    pub index: usize,
    pub common_path: usize,
    /// Agent increments `[i][j]`.
    pub dw: Vec<f64>,
    /// Decentralized controls `[i][j][m]`.
    pub ubar: Vec<f64>,
    /// Limiting states `[i][j][n]` on `J + 1` nodes.
    pub xbar: Vec<f64>,
    pub ubar0: Vec<f64>,
    pub xbar0: Vec<f64>,
    pub limiting_cost0: f64,
    pub limiting_costs: Vec<f64>,
}

pub fn prepare_replication(sol: &CCSolution, pop: &PopulationAssignment, seed: u64, index: usize) -> Result<Replication> {
    let lay = sol.layout();
    let sc = &sol.scheme;
    let (n, m, jn) = (lay.n, lay.m, lay.steps);
    let p = index % lay.paths;
    let mut dw = Vec::with_capacity(pop.n * jn);
    let mut ubar = Vec::with_capacity(pop.n * jn * m);
    let mut xbar = Vec::with_capacity(pop.n * (jn + 1) * n);
    let mut limiting_costs = Vec::with_capacity(pop.n);
    let major = decentralized_major(sol, p)?;
    for (i, &k) in pop.theta.iter().enumerate() {
        let inc = increments(seed, StreamRole::Agent, index as u64, 0, i as u64, &sc.grid)?;
        let path = decentralized_strategy(sol, k, &inc, p)?;
        limiting_costs.push(minor_cost(sol, k, &path.x, &path.u, &sol.iterate.phi[lay.major(p, 0)..lay.major(p, 0) + (jn + 1) * n], &major.x));
        dw.extend(inc);
        ubar.extend(&path.u);
        xbar.extend(&path.x);
    }
    let phi = &sol.iterate.phi[lay.major(p, 0)..lay.major(p, 0) + (jn + 1) * n];
    let limiting_cost0 = major_cost(sol, &major.x, &major.u, phi);
    Ok(Replication {
        index,
        common_path: p,
        dw,
        ubar,
        xbar,
        ubar0: major.u,
        xbar0: major.x,
        limiting_cost0,
        limiting_costs,
    })
}

/// Trapezoidal weight of node `j`.
fn trap_weight(sol: &CCSolution, j: usize) -> f64 {
    let g = sol.grid();
    let left = if j > 0 { g.step(j - 1) } else { 0.0 };
    let right = if j < g.steps { g.step(j) } else { 0.0 };
    0.5 * (left + right)
}

/// `½[∫ |x0 - ρ0 mean|²_Q0 + |u0|²_R0 dt + |x0(T) - ρ0 mean(T)|²_G0]` with
/// trapezoidal state terms and left-point control terms.
pub fn major_cost(sol: &CCSolution, x0: &[f64], u0: &[f64], mean: &[f64]) -> f64 {
    let sc = &sol.scheme;
    let (n, m, jn) = (sc.n, sc.m, sc.grid.steps);
    let mut e = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..=jn {
        for r in 0..n {
            e[r] = x0[j * n + r] - sc.rho0 * mean[j * n + r];
        }
        total += trap_weight(sol, j) * quad(&sc.q0, &e);
        if j < jn {
            total += sc.grid.step(j) * quad(&sc.r0, &u0[j * m..(j + 1) * m]);
        } else {
            total += quad(&sc.g0, &e);
        }
    }
    0.5 * total
}

/// Minor analogue of [`major_cost`] for a type-`k` agent.
pub fn minor_cost(sol: &CCSolution, k: usize, x: &[f64], u: &[f64], mean: &[f64], x0: &[f64]) -> f64 {
    let sc = &sol.scheme;
    let (n, m, jn) = (sc.n, sc.m, sc.grid.steps);
    let mut e = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..=jn {
        for r in 0..n {
            e[r] = x[j * n + r] - sc.rho * mean[j * n + r] - (1.0 - sc.rho) * x0[j * n + r];
        }
        total += trap_weight(sol, j) * quad(&sc.q, &e);
        if j < jn {
            total += sc.grid.step(j) * quad(&sc.r[k], &u[j * m..(j + 1) * m]);
        } else {
            total += quad(&sc.g, &e);
        }
    }
    0.5 * total
}

/// Deviations of the major agent. All but `OpenLoop` are projected onto the
/// control set; `OpenLoop` must already be feasible.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MajorCandidate {
    Decentralized,
    Zero,
    /// `P[ū0 + c·1]`.
    Shift(f64),
    /// `P[s·ū0]`.
    Scale(f64),
    /// `P[ū0 + S(θ1 (x̆⁽ᴺ⁾ - Φ̂) + θ2 (x̆0 - x̄0))]` with `S = R0⁻¹(B0' + D0')`.
    Feedback([f64; 2]),
    /// Values `[j][m]`.
    OpenLoop(Vec<f64>),
}

/// Deviations of one minor agent, all adapted to its own information.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MinorCandidate {
    Decentralized,
    Constant(Vec<f64>),
    /// `P[ū_i + c·1]`.
    Shift(f64),
    /// `P[s·ū_i]`.
    Scale(f64),
    /// `P[ū_i + θ1 S(x̄_i - m̂_k) + θ2 t·1]` with `S = R_k⁻¹(B' + D_k')`.
    Feedback([f64; 2]),
    /// Values `[j][m]`.
    OpenLoop(Vec<f64>),
}

fn check_feasible(set: &ConstraintSet, values: &[f64], m: usize, steps: usize) -> Result<()> {
    if values.len() != steps * m && values.len() != m {
        return Err(Error::Structure("open-loop candidate has the wrong length".into()));
    }
    for (j, u) in values.chunks(m).enumerate() {
        if !set.contains(u, 1e-10) {
            return Err(Error::Infeasible { node: j, reason: format!("control {u:?} outside {}", set.name()) });
        }
    }
    Ok(())
}

fn fmt_theta(t: &[f64; 2]) -> String {
    format!("feedback:{}:{}", t[0], t[1])
}

impl MajorCandidate {
    /// Comma-free name for tables.
    pub fn label(&self) -> String {
        match self {
            MajorCandidate::Decentralized => "decentralized".into(),
            MajorCandidate::Zero => "zero".into(),
            MajorCandidate::Shift(c) => format!("shift:{c}"),
            MajorCandidate::Scale(s) => format!("scale:{s}"),
            MajorCandidate::Feedback(t) => fmt_theta(t),
            MajorCandidate::OpenLoop(_) => "open_loop".into(),
        }
    }

    pub fn validate(&self, sol: &CCSolution) -> Result<()> {
        match self {
            MajorCandidate::OpenLoop(v) => check_feasible(&sol.scheme.major_set, v, sol.scheme.m, sol.grid().steps),
            _ => Ok(()),
        }
    }
}

impl MinorCandidate {
    pub fn label(&self) -> String {
        match self {
            MinorCandidate::Decentralized => "decentralized".into(),
            MinorCandidate::Constant(v) => format!("constant:{}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(":")),
            MinorCandidate::Shift(c) => format!("shift:{c}"),
            MinorCandidate::Scale(s) => format!("scale:{s}"),
            MinorCandidate::Feedback(t) => fmt_theta(t),
            MinorCandidate::OpenLoop(_) => "open_loop".into(),
        }
    }

    pub fn validate(&self, sol: &CCSolution, k: usize) -> Result<()> {
        let (set, m) = (&sol.scheme.minor_sets[k], sol.scheme.m);
        match self {
            MinorCandidate::Constant(v) => {
                if v.len() != m {
                    return Err(Error::Structure("constant candidate has the wrong length".into()));
                }
                check_feasible(set, v, m, 1)
            }
            MinorCandidate::OpenLoop(v) => check_feasible(set, v, m, sol.grid().steps),
            _ => Ok(()),
        }
    }
}

fn direction(sol: &CCSolution, j: usize, who: Option<usize>) -> DMatrix<f64> {
    let node = &sol.scheme.nodes[j];
    let map = match who {
        None => &node.major.map,
        Some(k) => &node.minors[k].map,
    };
    &map.rinv_bt + &map.rinv_dt
}

/// Per-replication outcome of one coupled simulation.
#[derive(Clone, Debug, Default)]
pub struct Coupled {
    pub cost0: f64,
    pub costs: Vec<f64>,
    /// `sup_j |x̆⁽ᴺ⁾ - Φ̂|²`.
    pub state_gap: f64,
    /// Mean over agents of `sup_j |x̆_i - x̄_i|²`.
    pub agent_gap: f64,
    /// Mean over agents of `sup_j |x̆_i|²`.
    pub agent_sup: f64,
    pub x0: Vec<f64>,
    pub x: Vec<f64>,
    pub average: Vec<f64>,
}

/// Simulates the coupled system for one replication. `deviant` replaces the
/// control of minor agent `i`; `keep` retains the trajectories.
pub fn run_coupled(
    sol: &CCSolution,
    pop: &PopulationAssignment,
    rep: &Replication,
    major: &MajorCandidate,
    deviant: Option<(usize, &MinorCandidate)>,
    keep: bool,
) -> Result<Coupled> {
    let sc = &sol.scheme;
    let it = &sol.iterate;
    let lay = sol.layout();
    let (n, m, jn, big_n) = (lay.n, lay.m, lay.steps, pop.n);
    let p = rep.common_path;
    let mut x0 = sc.x0_init.as_slice().to_vec();
    let mut x: Vec<f64> = (0..big_n).flat_map(|_| sc.x_init.iter().cloned()).collect();
    let mut next = vec![0.0; big_n * n];
    let mut next0 = vec![0.0; n];
    let mut avg = vec![0.0; n];
    let mut scratch = vec![0.0; 2 * n];
    let mut u = vec![0.0; m];
    let mut raw = vec![0.0; m];
    let mut e = vec![0.0; n];
    let mut cost0 = 0.0;
    let mut costs = vec![0.0; big_n];
    let mut state_gap = 0.0_f64;
    let mut agent_gap = vec![0.0_f64; big_n];
    let mut agent_sup = vec![0.0_f64; big_n];
    let mut out = Coupled::default();
    for j in 0..=jn {
        avg.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..big_n {
            for r in 0..n {
                avg[r] += x[i * n + r];
            }
        }
        avg.iter_mut().for_each(|v| *v /= big_n as f64);
        if keep {
            out.x0.extend(&x0);
            out.x.extend(&x);
            out.average.extend(&avg);
        }
        let phi = it.phi_at(p, j);
        state_gap = state_gap.max(avg.iter().zip(phi).map(|(a, b)| (a - b).powi(2)).sum());
        let w = trap_weight(sol, j);
        let terminal = j == jn;
        for r in 0..n {
            e[r] = x0[r] - sc.rho0 * avg[r];
        }
        cost0 += w * quad(&sc.q0, &e) + if terminal { quad(&sc.g0, &e) } else { 0.0 };
        for i in 0..big_n {
            let xi = &x[i * n..(i + 1) * n];
            let xb = &rep.xbar[(i * (jn + 1) + j) * n..(i * (jn + 1) + j + 1) * n];
            agent_gap[i] = agent_gap[i].max(xi.iter().zip(xb).map(|(a, b)| (a - b).powi(2)).sum());
            agent_sup[i] = agent_sup[i].max(xi.iter().map(|a| a * a).sum());
            for r in 0..n {
                e[r] = xi[r] - sc.rho * avg[r] - (1.0 - sc.rho) * x0[r];
            }
            costs[i] += w * quad(&sc.q, &e) + if terminal { quad(&sc.g, &e) } else { 0.0 };
        }
        if terminal {
            break;
        }
        let dt = sc.grid.step(j);
        let node = &sc.nodes[j];
        let ub0 = &rep.ubar0[j * m..(j + 1) * m];
        match major {
            MajorCandidate::Decentralized => u.copy_from_slice(ub0),
            MajorCandidate::Zero => u.iter_mut().for_each(|v| *v = 0.0),
            MajorCandidate::Shift(c) => {
                raw.iter_mut().zip(ub0).for_each(|(r, b)| *r = b + c);
                node.major.map.projector.project_into(&raw, &mut u)?;
            }
            MajorCandidate::Scale(s) => {
                raw.iter_mut().zip(ub0).for_each(|(r, b)| *r = s * b);
                node.major.map.projector.project_into(&raw, &mut u)?;
            }
            MajorCandidate::Feedback(th) => {
                let xb0 = &rep.xbar0[j * n..(j + 1) * n];
                let sig: Vec<f64> = (0..n).map(|r| th[0] * (avg[r] - phi[r]) + th[1] * (x0[r] - xb0[r])).collect();
                raw.copy_from_slice(ub0);
                gemv_acc(&mut raw, &direction(sol, j, None), &sig);
                node.major.map.projector.project_into(&raw, &mut u)?;
            }
            MajorCandidate::OpenLoop(v) => u.copy_from_slice(&v[j * m..(j + 1) * m]),
        }
        cost0 += dt * quad(&sc.r0, &u);
        node.major.step(&x0, &u, &avg, &x0, dt, sol.common_noise[p * jn + j], &mut scratch, &mut next0);
        for i in 0..big_n {
            let k = pop.theta[i];
            let coefs = &node.minors[k];
            let ub = &rep.ubar[(i * jn + j) * m..(i * jn + j + 1) * m];
            match deviant {
                Some((d, cand)) if d == i => match cand {
                    MinorCandidate::Decentralized => u.copy_from_slice(ub),
                    MinorCandidate::Constant(v) => u.copy_from_slice(v),
                    MinorCandidate::Shift(c) => {
                        raw.iter_mut().zip(ub).for_each(|(r, b)| *r = b + c);
                        coefs.map.projector.project_into(&raw, &mut u)?;
                    }
                    MinorCandidate::Scale(s) => {
                        raw.iter_mut().zip(ub).for_each(|(r, b)| *r = s * b);
                        coefs.map.projector.project_into(&raw, &mut u)?;
                    }
                    MinorCandidate::Feedback(th) => {
                        let xb = &rep.xbar[(i * (jn + 1) + j) * n..(i * (jn + 1) + j + 1) * n];
                        let mk = it.mhat_at(p, j, k);
                        let sig: Vec<f64> = (0..n).map(|r| th[0] * (xb[r] - mk[r])).collect();
                        raw.copy_from_slice(ub);
                        gemv_acc(&mut raw, &direction(sol, j, Some(k)), &sig);
                        let t = sc.grid.t(j);
                        raw.iter_mut().for_each(|r| *r += th[1] * t);
                        coefs.map.projector.project_into(&raw, &mut u)?;
                    }
                    MinorCandidate::OpenLoop(v) => u.copy_from_slice(&v[j * m..(j + 1) * m]),
                },
                _ => u.copy_from_slice(ub),
            }
            costs[i] += dt * quad(&sc.r[k], &u);
            coefs.step(&x[i * n..(i + 1) * n], &u, &avg, &x0, dt, rep.dw[i * jn + j], &mut scratch, &mut next[i * n..(i + 1) * n]);
        }
        if next0.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
            return Err(Error::Divergence(format!("realized major agent, node {}", j + 1)));
        }
        if let Some(i) = (0..big_n).find(|i| next[i * n..(i + 1) * n].iter().any(|v| !v.is_finite() || v.abs() > BLOWUP)) {
            return Err(Error::Divergence(format!("realized agent {i}, node {}", j + 1)));
        }
        std::mem::swap(&mut x0, &mut next0);
        std::mem::swap(&mut x, &mut next);
    }
    out.cost0 = 0.5 * cost0;
    out.costs = costs.into_iter().map(|c| 0.5 * c).collect();
    out.state_gap = state_gap;
    out.agent_gap = agent_gap.iter().sum::<f64>() / big_n as f64;
    out.agent_sup = agent_sup.iter().sum::<f64>() / big_n as f64;
    Ok(out)
}

/// One replication of the coupled system under the decentralized controls,
/// with trajectories.
#[derive(Clone, Debug)]
pub struct RealizedRun {
    pub n: usize,
    pub assignment: PopulationAssignment,
    pub common_path: usize,
    /// `[j][n]`.
    pub x0: Vec<f64>,
    /// `[j][i][n]`.
    pub x: Vec<f64>,
    /// `[j][n]`.
    pub average: Vec<f64>,
    pub cost0: f64,
    pub costs: Vec<f64>,
    pub limiting_cost0: f64,
    pub limiting_costs: Vec<f64>,
    pub state_gap: f64,
}

pub fn simulate_realized(sol: &CCSolution, n: usize, seed: u64, replication: usize) -> Result<RealizedRun> {
    let pop = assign_population(&sol.scheme.pi, n)?;
    let rep = prepare_replication(sol, &pop, seed, replication)?;
    let c = run_coupled(sol, &pop, &rep, &MajorCandidate::Decentralized, None, true)?;
    Ok(RealizedRun {
        n,
        assignment: pop,
        common_path: rep.common_path,
        x0: c.x0,
        x: c.x,
        average: c.average,
        cost0: c.cost0,
        costs: c.costs,
        limiting_cost0: rep.limiting_cost0,
        limiting_costs: rep.limiting_costs,
        state_gap: c.state_gap,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, se: (var / n).sqrt() }
    }
}

/// Population statistics at one `N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapRow {
    pub n: usize,
    pub replications: usize,
    pub eps_n: f64,
    /// `E sup_t |x̆⁽ᴺ⁾ - Φ̂|²`.
    pub state_gap: MeanSe,
    /// `E sup_t |x̆_i - x̄_i|²`, averaged over agents.
    pub agent_gap: MeanSe,
    /// `E sup_t |x̆_i|²`, averaged over agents.
    pub agent_sup: MeanSe,
    /// Pathwise `E|𝒥_0 - J_0|`.
    pub cost_gap_major: MeanSe,
    /// Pathwise `E|𝒥_i - J_i|` for the first agent of each type.
    pub cost_gap_minor: Vec<MeanSe>,
    /// Signed `E[𝒥_0 - J_0]`.
    pub signed_gap_major: MeanSe,
    pub signed_gap_minor: Vec<MeanSe>,
}

/// Runs `reps` replications at every `N` and collects the convergence
/// statistics.
pub fn gap_study(sol: &CCSolution, ns: &[usize], reps: usize, seed: u64) -> Result<Vec<GapRow>> {
    if reps == 0 {
        return Err(Error::Empty("no replications".into()));
    }
    let k = sol.scheme.k;
    let mut rows = Vec::new();
    for &n in ns {
        let pop = assign_population(&sol.scheme.pi, n)?;
        let firsts: Vec<usize> = (0..k).map(|kk| pop.range(kk).start).collect();
        let outcomes: Vec<Result<(Coupled, Replication)>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let rep = prepare_replication(sol, &pop, seed, r)?;
                let c = run_coupled(sol, &pop, &rep, &MajorCandidate::Decentralized, None, false)?;
                Ok((c, rep))
            })
            .collect();
        let mut sg = Vec::with_capacity(reps);
        let mut ag = Vec::with_capacity(reps);
        let mut asup = Vec::with_capacity(reps);
        let mut cg0 = Vec::with_capacity(reps);
        let mut sg0 = Vec::with_capacity(reps);
        let mut cgk = vec![Vec::with_capacity(reps); k];
        let mut sgk = vec![Vec::with_capacity(reps); k];
        for o in outcomes {
            let (c, rep) = o?;
            sg.push(c.state_gap);
            ag.push(c.agent_gap);
            asup.push(c.agent_sup);
            cg0.push((c.cost0 - rep.limiting_cost0).abs());
            sg0.push(c.cost0 - rep.limiting_cost0);
            for (kk, &i) in firsts.iter().enumerate() {
                cgk[kk].push((c.costs[i] - rep.limiting_costs[i]).abs());
                sgk[kk].push(c.costs[i] - rep.limiting_costs[i]);
            }
        }
        rows.push(GapRow {
            n,
            replications: reps,
            eps_n: pop.eps_n,
            state_gap: MeanSe::of(&sg),
            agent_gap: MeanSe::of(&ag),
            agent_sup: MeanSe::of(&asup),
            cost_gap_major: MeanSe::of(&cg0),
            cost_gap_minor: cgk.iter().map(|v| MeanSe::of(v)).collect(),
            signed_gap_major: MeanSe::of(&sg0),
            signed_gap_minor: sgk.iter().map(|v| MeanSe::of(v)).collect(),
        });
    }
    Ok(rows)
}

/// Per-`N` state-average gaps and their fitted rate.
pub fn state_average_gap(rows: &[GapRow]) -> Result<(Vec<f64>, RateFit)> {
    let ys: Vec<f64> = rows.iter().map(|r| r.state_gap.mean).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let fit = rate_fit(&xs, &ys)?;
    Ok((ys, fit))
}

/// Rates of the pathwise cost gaps: the major first, then one per type.
pub fn cost_gap_rates(rows: &[GapRow]) -> Result<Vec<RateFit>> {
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let mut fits = vec![rate_fit(&xs, &rows.iter().map(|r| r.cost_gap_major.mean).collect::<Vec<_>>())?];
    let k = rows.first().map(|r| r.cost_gap_minor.len()).unwrap_or(0);
    for kk in 0..k {
        fits.push(rate_fit(&xs, &rows.iter().map(|r| r.cost_gap_minor[kk].mean).collect::<Vec<_>>())?);
    }
    Ok(fits)
}

pub fn cost_gap_study(sol: &CCSolution, ns: &[usize], reps: usize, seed: u64) -> Result<(Vec<GapRow>, Vec<RateFit>)> {
    let rows = gap_study(sol, ns, reps, seed)?;
    let fits = cost_gap_rates(&rows)?;
    Ok((rows, fits))
}

/// Paired improvement `𝒥(ū) - 𝒥(candidate)` over a set of replications.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Improvement {
    pub candidate: String,
    pub improvement: MeanSe,
}

/// Replications prepared once and shared by every candidate at one `N`.
pub struct Bench<'a> {
    pub sol: &'a CCSolution,
    pub pop: PopulationAssignment,
    pub reps: Vec<Replication>,
    base: Vec<Coupled>,
}

impl<'a> Bench<'a> {
    pub fn new(sol: &'a CCSolution, n: usize, reps: usize, seed: u64) -> Result<Self> {
        if reps == 0 {
            return Err(Error::Empty("no replications".into()));
        }
        let pop = assign_population(&sol.scheme.pi, n)?;
        let reps: Vec<Replication> = (0..reps)
            .into_par_iter()
            .map(|r| prepare_replication(sol, &pop, seed, r))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?;
        let base = reps
            .par_iter()
            .map(|rep| run_coupled(sol, &pop, rep, &MajorCandidate::Decentralized, None, false))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Self { sol, pop, reps, base })
    }

    /// Per-replication major improvements on the replications in `which`.
    pub fn major_gains(&self, cand: &MajorCandidate, which: &[usize]) -> Result<Vec<f64>> {
        cand.validate(self.sol)?;
        which
            .par_iter()
            .map(|&r| {
                let c = run_coupled(self.sol, &self.pop, &self.reps[r], cand, None, false)?;
                Ok(self.base[r].cost0 - c.cost0)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }

    pub fn minor_gains(&self, agent: usize, cand: &MinorCandidate, which: &[usize]) -> Result<Vec<f64>> {
        if agent >= self.pop.n {
            return Err(Error::Structure(format!("agent {agent} out of range for N = {}", self.pop.n)));
        }
        cand.validate(self.sol, self.pop.theta[agent])?;
        which
            .par_iter()
            .map(|&r| {
                let c = run_coupled(self.sol, &self.pop, &self.reps[r], &MajorCandidate::Decentralized, Some((agent, cand)), false)?;
                Ok(self.base[r].costs[agent] - c.costs[agent])
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.reps.len()).collect()
    }
}

pub fn major_perturbation(sol: &CCSolution, n: usize, candidates: &[MajorCandidate], reps: usize, seed: u64) -> Result<Vec<Improvement>> {
    let bench = Bench::new(sol, n, reps, seed)?;
    let all = bench.all();
    candidates
        .iter()
        .map(|c| Ok(Improvement { candidate: c.label(), improvement: MeanSe::of(&bench.major_gains(c, &all)?) }))
        .collect()
}

pub fn minor_perturbation(
    sol: &CCSolution,
    n: usize,
    agent: usize,
    candidates: &[MinorCandidate],
    reps: usize,
    seed: u64,
) -> Result<Vec<Improvement>> {
    let bench = Bench::new(sol, n, reps, seed)?;
    let all = bench.all();
    candidates
        .iter()
        .map(|c| Ok(Improvement { candidate: c.label(), improvement: MeanSe::of(&bench.minor_gains(agent, c, &all)?) }))
        .collect()
}

/// Projected gradient ascent on the box `[-bound, bound]²` with central
/// differences and step halving.
pub fn train_feedback(objective: impl Fn([f64; 2]) -> Result<f64>, bound: f64, iters: usize) -> Result<([f64; 2], f64)> {
    let clamp = |t: [f64; 2]| [t[0].clamp(-bound, bound), t[1].clamp(-bound, bound)];
    let mut theta = [0.0, 0.0];
    let mut best = objective(theta)?;
    let mut step = 0.5 * bound;
    for _ in 0..iters {
        let h = 1e-3 * (1.0 + theta[0].abs().max(theta[1].abs()));
        let mut grad = [0.0; 2];
        for c in 0..2 {
            let (mut up, mut dn) = (theta, theta);
            up[c] += h;
            dn[c] -= h;
            grad[c] = (objective(up)? - objective(dn)?) / (2.0 * h);
        }
        let norm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let mut moved = false;
        while step > 1e-6 * bound {
            let cand = clamp([theta[0] + step * grad[0] / norm, theta[1] + step * grad[1] / norm]);
            let v = objective(cand)?;
            if v > best {
                theta = cand;
                best = v;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        step *= 2.0;
    }
    Ok((theta, best))
}

/// One side of the falsification suite at one `N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NashSide {
    pub n: usize,
    pub replications: usize,
    pub improvements: Vec<Improvement>,
    /// Trained feedback parameters.
    pub theta: [f64; 2],
    /// `max(0, best improvement)`.
    pub eps: f64,
}

/// Both sides at one `N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NashRow {
    pub n: usize,
    pub major: NashSide,
    pub minor: NashSide,
    pub eps_hat: f64,
}

pub fn major_family() -> Vec<MajorCandidate> {
    vec![
        MajorCandidate::Decentralized,
        MajorCandidate::Zero,
        MajorCandidate::Shift(-0.3),
        MajorCandidate::Shift(-0.1),
        MajorCandidate::Shift(0.1),
        MajorCandidate::Shift(0.3),
        MajorCandidate::Scale(0.8),
        MajorCandidate::Scale(1.2),
    ]
}

pub fn minor_family(m: usize) -> Vec<MinorCandidate> {
    vec![
        MinorCandidate::Decentralized,
        MinorCandidate::Constant(vec![0.0; m]),
        MinorCandidate::Shift(-0.3),
        MinorCandidate::Shift(-0.1),
        MinorCandidate::Shift(0.1),
        MinorCandidate::Shift(0.3),
        MinorCandidate::Scale(0.8),
        MinorCandidate::Scale(1.2),
    ]
}

fn split(reps: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if reps < 2 {
        return Err(Error::Empty("need at least two replications".into()));
    }
    Ok(((0..reps).step_by(2).collect(), (1..reps).step_by(2).collect()))
}

fn mean_of(v: Vec<f64>) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn side(n: usize, reps: usize, improvements: Vec<Improvement>, theta: [f64; 2]) -> NashSide {
    let eps = improvements.iter().map(|i| i.improvement.mean).fold(0.0, f64::max);
    NashSide { n, replications: reps, improvements, theta, eps }
}

/// Trains the feedback deviation on the even replications, then scores the
/// whole family on the odd ones.
pub fn nash_major_side(bench: &Bench) -> Result<NashSide> {
    let (train, test) = split(bench.reps.len())?;
    let (theta, _) = train_feedback(|th| Ok(mean_of(bench.major_gains(&MajorCandidate::Feedback(th), &train)?)), 5.0, 25)?;
    let mut out = Vec::new();
    for c in major_family().into_iter().chain([MajorCandidate::Feedback(theta)]) {
        out.push(Improvement { candidate: c.label(), improvement: MeanSe::of(&bench.major_gains(&c, &test)?) });
    }
    Ok(side(bench.pop.n, bench.reps.len(), out, theta))
}

pub fn nash_minor_side(bench: &Bench, agent: usize) -> Result<NashSide> {
    let (train, test) = split(bench.reps.len())?;
    let (theta, _) =
        train_feedback(|th| Ok(mean_of(bench.minor_gains(agent, &MinorCandidate::Feedback(th), &train)?)), 5.0, 25)?;
    let mut out = Vec::new();
    for c in minor_family(bench.sol.scheme.m).into_iter().chain([MinorCandidate::Feedback(theta)]) {
        out.push(Improvement { candidate: c.label(), improvement: MeanSe::of(&bench.minor_gains(agent, &c, &test)?) });
    }
    Ok(side(bench.pop.n, bench.reps.len(), out, theta))
}

fn check_agent(ns: &[usize], agent: usize) -> Result<()> {
    match ns.iter().min() {
        Some(&n) if agent >= n => Err(Error::Structure(format!("agent {agent} out of range for N = {n}"))),
        _ => Ok(()),
    }
}

pub fn nash_major_study(sol: &CCSolution, ns: &[usize], reps: usize, seed: u64) -> Result<Vec<NashSide>> {
    ns.iter().map(|&n| nash_major_side(&Bench::new(sol, n, reps, seed)?)).collect()
}

pub fn nash_minor_study(sol: &CCSolution, ns: &[usize], reps: usize, seed: u64, agent: usize) -> Result<Vec<NashSide>> {
    check_agent(ns, agent)?;
    ns.iter().map(|&n| nash_minor_side(&Bench::new(sol, n, reps, seed)?, agent)).collect()
}

/// Major agent and minor agent `0` on shared replications at each `N`.
pub fn nash_study(sol: &CCSolution, ns: &[usize], reps: usize, seed: u64) -> Result<Vec<NashRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        let bench = Bench::new(sol, n, reps, seed)?;
        let major = nash_major_side(&bench)?;
        let minor = nash_minor_side(&bench, 0)?;
        let eps_hat = major.eps.max(minor.eps);
        rows.push(NashRow { n, major, minor, eps_hat });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// 95% confidence interval of the slope.
    pub ci: [f64; 2],
    pub points: usize,
}

/// Two-sided 97.5% Student quantiles for 1..=30 degrees of freedom.
const T975: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131, 2.120,
    2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
];

/// Least squares of `log y` on `log x`.
pub fn rate_fit(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::Structure("rate fit needs equally many x and y".into()));
    }
    if xs.len() < 4 {
        return Err(Error::Fit(format!("{} points, need at least 4", xs.len())));
    }
    if let Some(y) = ys.iter().find(|y| !(**y > 0.0) || !y.is_finite()) {
        return Err(Error::Fit(format!("nonpositive or non-finite value {y}")));
    }
    if xs.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Fit("nonpositive abscissa".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all abscissae equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let dof = lx.len() - 2;
    let se = (sse / dof as f64 / sxx).sqrt();
    let t = T975.get(dof - 1).copied().unwrap_or(1.96);
    Ok(RateFit { slope, intercept, r2, ci: [slope - t * se, slope + t * se], points: lx.len() })
}

/// One `(N, metric)` entry of a study table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub n: usize,
    pub replications: usize,
    pub eps_n: f64,
    pub metric: String,
    pub value: f64,
    pub se: f64,
}

/// Study table plus fitted log-log rates where the data allow a fit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NashReport {
    pub study: String,
    pub rows: Vec<MetricRow>,
    pub fits: BTreeMap<String, RateFit>,
    pub fit_errors: BTreeMap<String, String>,
}

impl NashReport {
    fn new(study: &str, rows: Vec<MetricRow>, fitted: &[&str]) -> Self {
        let mut fits = BTreeMap::new();
        let mut fit_errors = BTreeMap::new();
        for &metric in fitted {
            let pts: Vec<&MetricRow> = rows.iter().filter(|r| r.metric == metric).collect();
            let xs: Vec<f64> = pts.iter().map(|r| r.n as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.value).collect();
            match rate_fit(&xs, &ys) {
                Ok(f) => {
                    fits.insert(metric.to_string(), f);
                }
                Err(e) => {
                    fit_errors.insert(metric.to_string(), e.to_string());
                }
            }
        }
        Self { study: study.to_string(), rows, fits, fit_errors }
    }

    pub fn state_gap(rows: &[GapRow]) -> Self {
        let mut out = Vec::new();
        for r in rows {
            for (metric, v) in [("state_gap", r.state_gap), ("agent_gap", r.agent_gap), ("agent_sup", r.agent_sup)] {
                out.push(MetricRow { n: r.n, replications: r.replications, eps_n: r.eps_n, metric: metric.into(), value: v.mean, se: v.se });
            }
        }
        Self::new("state-gap", out, &["state_gap", "agent_gap"])
    }

    pub fn cost_gap(rows: &[GapRow]) -> Self {
        let mut out = Vec::new();
        let mut fitted = vec!["cost_gap_major".to_string()];
        let k = rows.first().map(|r| r.cost_gap_minor.len()).unwrap_or(0);
        fitted.extend((0..k).map(|kk| format!("cost_gap_minor_k{kk}")));
        for r in rows {
            let mut push = |metric: String, v: MeanSe| {
                out.push(MetricRow { n: r.n, replications: r.replications, eps_n: r.eps_n, metric, value: v.mean, se: v.se })
            };
            push("cost_gap_major".into(), r.cost_gap_major);
            for kk in 0..k {
                push(format!("cost_gap_minor_k{kk}"), r.cost_gap_minor[kk]);
            }
            push("signed_gap_major".into(), r.signed_gap_major);
            for kk in 0..k {
                push(format!("signed_gap_minor_k{kk}"), r.signed_gap_minor[kk]);
            }
        }
        let names: Vec<&str> = fitted.iter().map(String::as_str).collect();
        Self::new("cost-gap", out, &names)
    }

    pub fn nash(study: &str, sides: &[NashSide], eps_n: &[f64]) -> Self {
        let mut out = Vec::new();
        for (s, &e) in sides.iter().zip(eps_n) {
            let row = |metric: String, value: f64, se: f64| MetricRow { n: s.n, replications: s.replications, eps_n: e, metric, value, se };
            for i in &s.improvements {
                out.push(row(format!("improvement:{}", i.candidate), i.improvement.mean, i.improvement.se));
            }
            out.push(row("theta1".into(), s.theta[0], 0.0));
            out.push(row("theta2".into(), s.theta[1], 0.0));
            out.push(row("eps_hat".into(), s.eps, 0.0));
        }
        Self::new(study, out, &["eps_hat"])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,replications,eps_n,metric,value,se\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.n, r.replications, r.eps_n, r.metric, r.value, r.se));
        }
        s
    }

    /// Fits and refusals as JSON.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "study": self.study,
            "fits": self.fits,
            "fit_errors": self.fit_errors,
        }))
        .expect("summary serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_fit_exact_powers() {
        let xs = [8.0, 16.0, 32.0, 64.0, 128.0];
        let f = rate_fit(&xs, &xs.map(|x| 3.0 / x)).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let f = rate_fit(&xs, &xs.map(|x| 2.0 / x.sqrt())).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rate_fit_noisy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let xs = [8.0, 16.0, 32.0, 64.0, 128.0];
        for _ in 0..100 {
            let ys: Vec<f64> = xs.iter().map(|x| 5.0 / x * (1.0 + 0.1 * (2.0 * rng.random::<f64>() - 1.0))).collect();
            let f = rate_fit(&xs, &ys).unwrap();
            assert!(f.slope >= -1.2 && f.slope <= -0.8);
            assert!(f.ci[0] < f.slope && f.slope < f.ci[1]);
        }
    }

    #[test]
    fn rate_fit_refusals() {
        assert!(matches!(rate_fit(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Err(Error::Fit(_))));
        assert!(matches!(rate_fit(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 3.0, 4.0]), Err(Error::Fit(_))));
    }

    #[test]
    fn feedback_training_finds_interior_maximum() {
        let (th, v) = train_feedback(|t| Ok(1.0 - (t[0] - 1.0).powi(2) - (t[1] + 0.5).powi(2)), 5.0, 60).unwrap();
        assert!((th[0] - 1.0).abs() < 1e-3 && (th[1] + 0.5).abs() < 1e-3 && v > 0.999_99);
    }

    #[test]
    fn mean_se_basic() {
        let s = MeanSe::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
