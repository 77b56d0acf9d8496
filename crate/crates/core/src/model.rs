//! Game specifications: one major agent, `K` types of minor agents, linear
//! dynamics with mean-field coupling, quadratic tracking costs and convex
//! control sets.
//!
//! ```text
//! major:  dx0 = (A0 x0 + B0 u0 + F0¹ x⁽ᴺ⁾ + b0) dt + (C0 x0 + D0 u0 + F0² x⁽ᴺ⁾ + σ0) dW0
//! minor:  dxi = (Ak xi + B ui + F1 x⁽ᴺ⁾ + b) dt + (C xi + Dk ui + F2 x⁽ᴺ⁾ + H x0 + σ) dWi
//! costs:  ½E[∫ |x0 - ρ0 x⁽ᴺ⁾|²_Q0 + |u0|²_R0 dt + |x0(T) - ρ0 x⁽ᴺ⁾(T)|²_G0]
//!         ½E[∫ |xi - ρ x⁽ᴺ⁾ - (1-ρ) x0|²_Q + |ui|²_Rk dt + terminal with G]
//! ```

use nalgebra::{DMatrix, DVector};

use crate::convex::ConstraintSet;
use crate::error::{Error, Result};
use crate::linalg::{block_diag, frob, is_symmetric, kron_row, lambda_max_sym, lambda_min_sym};

/// A coefficient that is constant or piecewise constant in time. Piece `i`
/// is active on `[knots[i-1], knots[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Piecewise<T> {
    pub knots: Vec<f64>,
    pub pieces: Vec<T>,
}

impl<T> Piecewise<T> {
    pub fn constant(v: T) -> Self {
        Self { knots: Vec::new(), pieces: vec![v] }
    }

    pub fn new(knots: Vec<f64>, pieces: Vec<T>) -> Result<Self> {
        if pieces.len() != knots.len() + 1 {
            return Err(Error::Structure("piecewise coefficient needs one more piece than knots".into()));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) || knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Structure("piecewise knots must be finite and increasing".into()));
        }
        Ok(Self { knots, pieces })
    }

    #[inline]
    pub fn at(&self, t: f64) -> &T {
        &self.pieces[self.knots.partition_point(|k| *k <= t)]
    }

    pub fn is_constant(&self) -> bool {
        self.knots.is_empty()
    }
}

pub type TimeMatrix = Piecewise<DMatrix<f64>>;
pub type TimeVector = Piecewise<DVector<f64>>;

#[derive(Clone, Debug)]
pub struct MajorSpec {
    pub a: TimeMatrix,
    pub b: TimeMatrix,
    pub c: TimeMatrix,
    pub d: TimeMatrix,
    pub f1: TimeMatrix,
    pub f2: TimeMatrix,
    pub drift: TimeVector,
    pub sigma: TimeVector,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub rho: f64,
    pub constraint: ConstraintSet,
}

/// Coefficients shared by every minor type.
#[derive(Clone, Debug)]
pub struct MinorShared {
    pub b: TimeMatrix,
    pub c: TimeMatrix,
    pub f1: TimeMatrix,
    pub f2: TimeMatrix,
    pub h: TimeMatrix,
    pub drift: TimeVector,
    pub sigma: TimeVector,
    pub q: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub rho: f64,
}

#[derive(Clone, Debug)]
pub struct MinorType {
    pub a: TimeMatrix,
    pub d: TimeMatrix,
    pub r: DMatrix<f64>,
    pub pi: f64,
    pub constraint: ConstraintSet,
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub major: MajorSpec,
    pub minor: MinorShared,
    pub types: Vec<MinorType>,
    pub x0_init: DVector<f64>,
    pub x_init: DVector<f64>,
}

fn zm(r: usize, c: usize) -> TimeMatrix {
    Piecewise::constant(DMatrix::zeros(r, c))
}

fn zv(n: usize) -> TimeVector {
    Piecewise::constant(DVector::zeros(n))
}

impl ModelSpec {
    /// All coefficients zero, identity control weights, unconstrained.
    pub fn zeros(n: usize, m: usize, pi: &[f64], horizon: f64) -> Self {
        let types = pi
            .iter()
            .map(|p| MinorType {
                a: zm(n, n),
                d: zm(n, m),
                r: DMatrix::identity(m, m),
                pi: *p,
                constraint: ConstraintSet::FullSpace,
            })
            .collect();
        Self {
            n,
            m,
            horizon,
            major: MajorSpec {
                a: zm(n, n),
                b: zm(n, m),
                c: zm(n, n),
                d: zm(n, m),
                f1: zm(n, n),
                f2: zm(n, n),
                drift: zv(n),
                sigma: zv(n),
                q: DMatrix::zeros(n, n),
                r: DMatrix::identity(m, m),
                g: DMatrix::zeros(n, n),
                rho: 0.0,
                constraint: ConstraintSet::FullSpace,
            },
            minor: MinorShared {
                b: zm(n, m),
                c: zm(n, n),
                f1: zm(n, n),
                f2: zm(n, n),
                h: zm(n, n),
                drift: zv(n),
                sigma: zv(n),
                q: DMatrix::zeros(n, n),
                g: DMatrix::zeros(n, n),
                rho: 0.0,
            },
            types,
            x0_init: DVector::zeros(n),
            x_init: DVector::zeros(n),
        }
    }

    pub fn k(&self) -> usize {
        self.types.len()
    }

    pub fn pi(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.pi).collect()
    }

    /// Every time at which some coefficient changes, plus 0.
    pub fn piece_times(&self) -> Vec<f64> {
        let mut ts = vec![0.0];
        let mut add = |k: &[f64]| ts.extend(k.iter().cloned().filter(|t| *t > 0.0 && *t < self.horizon));
        let mj = &self.major;
        for m in [&mj.a, &mj.b, &mj.c, &mj.d, &mj.f1, &mj.f2] {
            add(&m.knots);
        }
        add(&mj.drift.knots);
        add(&mj.sigma.knots);
        let mn = &self.minor;
        for m in [&mn.b, &mn.c, &mn.f1, &mn.f2, &mn.h] {
            add(&m.knots);
        }
        add(&mn.drift.knots);
        add(&mn.sigma.knots);
        for t in &self.types {
            add(&t.a.knots);
            add(&t.d.knots);
        }
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        ts
    }
}

/// Violated conditions, one human-readable line each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

fn check_dims_m(name: &str, m: &TimeMatrix, r: usize, c: usize) -> Result<()> {
    for p in &m.pieces {
        if p.nrows() != r || p.ncols() != c {
            return Err(Error::Structure(format!("{name} must be {r}x{c}, got {}x{}", p.nrows(), p.ncols())));
        }
    }
    Ok(())
}

fn check_dims_v(name: &str, v: &TimeVector, n: usize) -> Result<()> {
    for p in &v.pieces {
        if p.len() != n {
            return Err(Error::Structure(format!("{name} must have length {n}, got {}", p.len())));
        }
    }
    Ok(())
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Structure(format!("{name} must be {n}x{n}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

/// Structural dimension check; any mismatch is an error rather than a report line.
pub fn check_structure(spec: &ModelSpec) -> Result<()> {
    let (n, m) = (spec.n, spec.m);
    if n == 0 || m == 0 {
        return Err(Error::Structure("state and control dimensions must be positive".into()));
    }
    if spec.types.is_empty() {
        return Err(Error::Structure("at least one minor type is required".into()));
    }
    let mj = &spec.major;
    for (name, mat, c) in [("A0", &mj.a, n), ("B0", &mj.b, m), ("C0", &mj.c, n), ("D0", &mj.d, m), ("F0_1", &mj.f1, n), ("F0_2", &mj.f2, n)] {
        check_dims_m(name, mat, n, c)?;
    }
    check_dims_v("b0", &mj.drift, n)?;
    check_dims_v("sigma0", &mj.sigma, n)?;
    check_square("Q0", &mj.q, n)?;
    check_square("G0", &mj.g, n)?;
    check_square("R0", &mj.r, m)?;
    let mn = &spec.minor;
    for (name, mat, c) in [("B", &mn.b, m), ("C", &mn.c, n), ("F1", &mn.f1, n), ("F2", &mn.f2, n), ("H", &mn.h, n)] {
        check_dims_m(name, mat, n, c)?;
    }
    check_dims_v("b", &mn.drift, n)?;
    check_dims_v("sigma", &mn.sigma, n)?;
    check_square("Q", &mn.q, n)?;
    check_square("G", &mn.g, n)?;
    for (k, t) in spec.types.iter().enumerate() {
        check_dims_m(&format!("A_{}", k + 1), &t.a, n, n)?;
        check_dims_m(&format!("D_{}", k + 1), &t.d, n, m)?;
        check_square(&format!("R_{}", k + 1), &t.r, m)?;
    }
    if spec.x0_init.len() != n || spec.x_init.len() != n {
        return Err(Error::Structure(format!("initial states must have length {n}")));
    }
    Ok(())
}

fn psd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m, 1e-12) && lambda_min_sym(m, "psd").map(|l| l >= -1e-12 * (1.0 + m.amax())).unwrap_or(false)
}

fn pd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m, 1e-12) && lambda_min_sym(m, "pd").map(|l| l > 0.0).unwrap_or(false)
}

/// Lists every violated standing assumption. Dimension problems are errors.
pub fn validate_spec(spec: &ModelSpec) -> Result<ValidationReport> {
    check_structure(spec)?;
    let mut v = Vec::new();
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        v.push("horizon T must be positive and finite".to_string());
    }
    let mj = &spec.major;
    let mn = &spec.minor;
    for (name, m) in [("Q0", &mj.q), ("G0", &mj.g), ("Q", &mn.q), ("G", &mn.g)] {
        if !psd(m) {
            v.push(format!("{name} not symmetric positive semidefinite"));
        }
    }
    if !pd(&mj.r) {
        v.push("R0 not positive definite".to_string());
    }
    for (k, t) in spec.types.iter().enumerate() {
        if !pd(&t.r) {
            v.push(format!("R_{} not positive definite", k + 1));
        }
    }
    if !(0.0..=1.0).contains(&mj.rho) {
        v.push("rho0 out of [0,1]".to_string());
    }
    if !(0.0..=1.0).contains(&mn.rho) {
        v.push("rho out of [0,1]".to_string());
    }
    let pi = spec.pi();
    if pi.iter().any(|p| !(*p > 0.0)) {
        v.push("pi entries must be positive".to_string());
    }
    if (pi.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        v.push("pi must sum to 1".to_string());
    }
    let finite_m = |m: &TimeMatrix| m.pieces.iter().all(|p| p.iter().all(|x| x.is_finite()));
    let finite_v = |m: &TimeVector| m.pieces.iter().all(|p| p.iter().all(|x| x.is_finite()));
    let mut fin = [&mj.a, &mj.b, &mj.c, &mj.d, &mj.f1, &mj.f2, &mn.b, &mn.c, &mn.f1, &mn.f2, &mn.h]
        .iter()
        .all(|m| finite_m(m))
        && [&mj.drift, &mj.sigma, &mn.drift, &mn.sigma].iter().all(|m| finite_v(m));
    fin &= spec.types.iter().all(|t| finite_m(&t.a) && finite_m(&t.d));
    fin &= spec.x0_init.iter().chain(spec.x_init.iter()).all(|x| x.is_finite());
    if !fin {
        v.push("coefficients must be finite".to_string());
    }
    for knot in spec.piece_times() {
        if knot < 0.0 || knot > spec.horizon {
            v.push("piecewise knots must lie in [0, T]".to_string());
        }
    }
    if let Err(e) = mj.constraint.validate(spec.m) {
        v.push(format!("Gamma0 invalid: {e}"));
    }
    for (k, t) in spec.types.iter().enumerate() {
        if let Err(e) = t.constraint.validate(spec.m) {
            v.push(format!("Gamma_{} invalid: {e}", k + 1));
        }
    }
    Ok(ValidationReport { violations: v })
}

/// Deterministic split of `N` minor agents across types.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationAssignment {
    pub n: usize,
    /// Zero-based type label per agent, sorted by type.
    pub theta: Vec<usize>,
    pub counts: Vec<usize>,
    pub pi_n: Vec<f64>,
    pub eps_n: f64,
}

impl PopulationAssignment {
    /// Index range of the agents of type `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.counts[..k].iter().sum();
        start..start + self.counts[k]
    }
}

/// Largest-remainder apportionment of `n·π_k`, ties to the lower type index.
/// Types left empty take one agent from the type with the largest surplus.
pub fn assign_population(pi: &[f64], n: usize) -> Result<PopulationAssignment> {
    let k = pi.len();
    if n < k || k == 0 {
        return Err(Error::PopulationTooSmall { n, k });
    }
    let quotas: Vec<f64> = pi.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    while let Some(empty) = counts.iter().position(|c| *c == 0) {
        let donor = (0..k)
            .filter(|&j| counts[j] >= 2)
            .max_by(|&a, &b| {
                let sa = counts[a] as f64 - quotas[a];
                let sb = counts[b] as f64 - quotas[b];
                sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
            })
            .expect("n >= k leaves a donor");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    let theta = counts.iter().enumerate().flat_map(|(t, c)| std::iter::repeat_n(t, *c)).collect();
    let pi_n: Vec<f64> = counts.iter().map(|c| *c as f64 / n as f64).collect();
    let eps_n = pi_n.iter().zip(pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(PopulationAssignment { n, theta, counts, pi_n, eps_n })
}

/// Block matrices of the stacked system at one time.
#[derive(Clone, Debug)]
pub struct StackedBlocks {
    pub pi_row: Vec<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub f1_pi: DMatrix<f64>,
    pub f2_pi: DMatrix<f64>,
    pub q_pi: DMatrix<f64>,
    pub g_pi: DMatrix<f64>,
    pub b0_vec: DVector<f64>,
    pub d0_blk: DMatrix<f64>,
}

/// Frobenius norms of the stacked blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct BlockNorms {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r_inv: f64,
    pub q: f64,
    pub g: f64,
    pub h: f64,
    pub f1_pi: f64,
    pub f2_pi: f64,
    pub q_pi: f64,
    pub g_pi: f64,
}

impl BlockNorms {
    fn of(s: &StackedBlocks) -> Self {
        Self {
            a: frob(&s.a),
            b: frob(&s.b),
            c: frob(&s.c),
            d: frob(&s.d),
            r_inv: frob(&s.r_inv),
            q: frob(&s.q),
            g: frob(&s.g),
            h: frob(&s.h),
            f1_pi: frob(&s.f1_pi),
            f2_pi: frob(&s.f2_pi),
            q_pi: frob(&s.q_pi),
            g_pi: frob(&s.g_pi),
        }
    }

    fn max(self, o: Self) -> Self {
        Self {
            a: self.a.max(o.a),
            b: self.b.max(o.b),
            c: self.c.max(o.c),
            d: self.d.max(o.d),
            r_inv: self.r_inv.max(o.r_inv),
            q: self.q.max(o.q),
            g: self.g.max(o.g),
            h: self.h.max(o.h),
            f1_pi: self.f1_pi.max(o.f1_pi),
            f2_pi: self.f2_pi.max(o.f2_pi),
            q_pi: self.q_pi.max(o.q_pi),
            g_pi: self.g_pi.max(o.g_pi),
        }
    }
}

/// Stacked system with norms and spectral constants taken as the supremum
/// over all coefficient pieces.
#[derive(Clone, Debug)]
pub struct StackedSystem {
    pub blocks: StackedBlocks,
    pub norms: BlockNorms,
    pub lambda_star: f64,
    pub lambda_star_f1: f64,
}

/// Stacks the `K+1` equations at time `t`.
pub fn stacked_blocks(spec: &ModelSpec, t: f64) -> Result<StackedBlocks> {
    let (n, k) = (spec.n, spec.k());
    let mj = &spec.major;
    let mn = &spec.minor;
    let pi_row: Vec<f64> = std::iter::once(0.0).chain(spec.types.iter().map(|t| t.pi)).collect();
    let a_blocks: Vec<&DMatrix<f64>> = std::iter::once(mj.a.at(t)).chain(spec.types.iter().map(|ty| ty.a.at(t))).collect();
    let b_blocks: Vec<&DMatrix<f64>> = std::iter::once(mj.b.at(t)).chain(std::iter::repeat_n(mn.b.at(t), k)).collect();
    let c_blocks: Vec<&DMatrix<f64>> = std::iter::once(mj.c.at(t)).chain(std::iter::repeat_n(mn.c.at(t), k)).collect();
    let d_blocks: Vec<&DMatrix<f64>> = std::iter::once(mj.d.at(t)).chain(spec.types.iter().map(|ty| ty.d.at(t))).collect();
    let r_blocks: Vec<&DMatrix<f64>> = std::iter::once(&mj.r).chain(spec.types.iter().map(|ty| &ty.r)).collect();
    let r_inv_owned: Vec<DMatrix<f64>> = r_blocks
        .iter()
        .map(|r| (*r).clone().try_inverse().ok_or_else(|| Error::Metric("control weight not invertible".into())))
        .collect::<Result<_>>()?;
    let r_inv_blocks: Vec<&DMatrix<f64>> = r_inv_owned.iter().collect();

    let dim = (k + 1) * n;
    let mut q = DMatrix::zeros(dim, dim);
    let mut g = DMatrix::zeros(dim, dim);
    q.view_mut((0, 0), (n, n)).copy_from(&mj.q);
    g.view_mut((0, 0), (n, n)).copy_from(&mj.g);
    let mut h = DMatrix::zeros(dim, n);
    let mut f1_pi = DMatrix::zeros(dim, dim);
    let mut f2_pi = DMatrix::zeros(dim, dim);
    let mut q_pi = DMatrix::zeros(dim, dim);
    let mut g_pi = DMatrix::zeros(dim, dim);
    f1_pi.view_mut((0, 0), (n, dim)).copy_from(&kron_row(&pi_row, mj.f1.at(t)));
    f2_pi.view_mut((0, 0), (n, dim)).copy_from(&kron_row(&pi_row, mj.f2.at(t)));
    q_pi.view_mut((0, 0), (n, dim)).copy_from(&kron_row(&pi_row, &(&mj.q * mj.rho)));
    g_pi.view_mut((0, 0), (n, dim)).copy_from(&kron_row(&pi_row, &(&mj.g * mj.rho)));
    let mut b0_vec = DVector::zeros(dim);
    b0_vec.rows_mut(0, n).copy_from(mj.drift.at(t));
    let mut d0_blk = DMatrix::zeros(dim, k + 1);
    d0_blk.view_mut((0, 0), (n, 1)).copy_from(mj.sigma.at(t));
    for i in 1..=k {
        let r0 = i * n;
        q.view_mut((r0, 0), (n, n)).copy_from(&(-&mn.q * (1.0 - mn.rho)));
        q.view_mut((r0, r0), (n, n)).copy_from(&mn.q);
        g.view_mut((r0, 0), (n, n)).copy_from(&(-&mn.g * (1.0 - mn.rho)));
        g.view_mut((r0, r0), (n, n)).copy_from(&mn.g);
        h.view_mut((r0, 0), (n, n)).copy_from(mn.h.at(t));
        f1_pi.view_mut((r0, 0), (n, dim)).copy_from(&kron_row(&pi_row, mn.f1.at(t)));
        f2_pi.view_mut((r0, 0), (n, dim)).copy_from(&kron_row(&pi_row, mn.f2.at(t)));
        q_pi.view_mut((r0, 0), (n, dim)).copy_from(&kron_row(&pi_row, &(&mn.q * mn.rho)));
        g_pi.view_mut((r0, 0), (n, dim)).copy_from(&kron_row(&pi_row, &(&mn.g * mn.rho)));
        b0_vec.rows_mut(r0, n).copy_from(mn.drift.at(t));
        d0_blk.view_mut((r0, i), (n, 1)).copy_from(mn.sigma.at(t));
    }
    Ok(StackedBlocks {
        pi_row,
        a: block_diag(&a_blocks),
        b: block_diag(&b_blocks),
        c: block_diag(&c_blocks),
        d: block_diag(&d_blocks),
        r: block_diag(&r_blocks),
        r_inv: block_diag(&r_inv_blocks),
        q,
        g,
        h,
        f1_pi,
        f2_pi,
        q_pi,
        g_pi,
        b0_vec,
        d0_blk,
    })
}

pub fn build_stacked(spec: &ModelSpec) -> Result<StackedSystem> {
    check_structure(spec)?;
    let mut out: Option<StackedSystem> = None;
    for t in spec.piece_times() {
        let blocks = stacked_blocks(spec, t)?;
        let norms = BlockNorms::of(&blocks);
        let ls = lambda_max_sym(&blocks.a, "stacked A")?;
        let lf = lambda_max_sym(&blocks.f1_pi, "stacked F1")?;
        out = Some(match out {
            None => StackedSystem { blocks, norms, lambda_star: ls, lambda_star_f1: lf },
            Some(prev) => StackedSystem {
                norms: prev.norms.max(norms),
                lambda_star: prev.lambda_star.max(ls),
                lambda_star_f1: prev.lambda_star_f1.max(lf),
                blocks: prev.blocks,
            },
        });
    }
    Ok(out.expect("piece_times always contains 0"))
}

/// Constants of the Lipschitz/monotonicity hypotheses for the stacked system.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct H1Constants {
    pub lambda1: f64,
    pub lambda2: f64,
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
    pub k6: f64,
    pub k7_sq: f64,
    pub k8_sq: f64,
    pub k9: f64,
    pub k10: f64,
    pub k11_sq: f64,
    pub k12_sq: f64,
    pub k1_hat: f64,
}

impl H1Constants {
    pub fn from_norms(nm: &BlockNorms, lambda_star: f64, lambda_star_f1: f64) -> Self {
        let k2 = nm.r_inv * nm.b * (nm.b + nm.d);
        let k9 = nm.r_inv * nm.d * (nm.b + nm.d);
        Self {
            lambda1: lambda_star,
            lambda2: lambda_star,
            k0: nm.a,
            k1: nm.f1_pi,
            k2,
            k3: k2,
            k4: nm.q,
            k5: nm.q_pi,
            k6: nm.c,
            k7_sq: 4.0 * (nm.c + nm.h).powi(2),
            k8_sq: 4.0 * nm.f2_pi.powi(2),
            k9,
            k10: k9,
            k11_sq: 2.0 * nm.g.powi(2),
            k12_sq: 2.0 * nm.g_pi.powi(2),
            k1_hat: lambda_star_f1,
        }
    }
}

pub fn operator_constants(sys: &StackedSystem) -> H1Constants {
    H1Constants::from_norms(&sys.norms, sys.lambda_star, sys.lambda_star_f1)
}

/// Stacked-form evaluations used to cross-check the block layout against the
/// per-agent equations. `alpha`, `beta`, `gamma`, `means` and `u` are the
/// stacked `(K+1)`-vectors of state, adjoint, own-noise martingale
/// coefficient, conditional mean (`α0` in slot 0) and control.
impl StackedBlocks {
    pub fn forward_drift(&self, alpha: &DVector<f64>, u: &DVector<f64>, means: &DVector<f64>) -> DVector<f64> {
        &self.a * alpha + &self.b * u + &self.f1_pi * means + &self.b0_vec
    }

    /// Column `i` is the diffusion of equation `i` against its own noise.
    pub fn diffusion(&self, alpha: &DVector<f64>, u: &DVector<f64>, means: &DVector<f64>, n: usize) -> DMatrix<f64> {
        let k1 = self.d0_blk.ncols();
        let own = &self.c * alpha + &self.d * u + &self.f2_pi * means + &self.h * alpha.rows(0, n);
        let mut out = self.d0_blk.clone();
        for i in 0..k1 {
            for r in 0..n {
                out[(i * n + r, i)] += own[i * n + r];
            }
        }
        out
    }

    /// `dβ = backward_drift dt + ...`.
    pub fn backward_drift(&self, alpha: &DVector<f64>, beta: &DVector<f64>, gamma: &DVector<f64>, means: &DVector<f64>) -> DVector<f64> {
        -(self.a.transpose() * beta - &self.q * alpha + &self.q_pi * means + self.c.transpose() * gamma)
    }

    pub fn terminal(&self, alpha: &DVector<f64>, means: &DVector<f64>) -> DVector<f64> {
        -(&self.g * alpha) + &self.g_pi * means
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn validation_examples() {
        let mut spec = ModelSpec::zeros(1, 1, &[1.0], 1.0);
        spec.major.q = s(1.0);
        spec.major.rho = 0.5;
        assert!(validate_spec(&spec).unwrap().is_ok());
        let mut bad = spec.clone();
        bad.major.r = s(0.0);
        assert!(validate_spec(&bad).unwrap().contains("R0 not positive definite"));
        let mut bad = spec.clone();
        bad.minor.rho = 1.2;
        assert!(validate_spec(&bad).unwrap().contains("rho out of [0,1]"));
        let mut bad = spec;
        bad.major.a = Piecewise::constant(DMatrix::zeros(2, 2));
        assert!(matches!(validate_spec(&bad), Err(Error::Structure(_))));
    }

    #[test]
    fn apportionment_examples() {
        let a = assign_population(&[0.5, 0.5], 10).unwrap();
        assert_eq!(a.counts, vec![5, 5]);
        assert_eq!(a.eps_n, 0.0);
        let a = assign_population(&[1.0 / 3.0, 2.0 / 3.0], 10).unwrap();
        assert_eq!(a.counts, vec![3, 7]);
        assert!((a.eps_n - 1.0 / 30.0).abs() < 1e-15);
        assert_eq!(&a.theta[..4], &[0, 0, 0, 1]);
        let a = assign_population(&[1.0], 7).unwrap();
        assert_eq!(a.counts, vec![7]);
        assert_eq!(a.eps_n, 0.0);
        assert_eq!(assign_population(&[0.5, 0.5], 1), Err(Error::PopulationTooSmall { n: 1, k: 2 }));
    }

    #[test]
    fn apportionment_tie_goes_to_lower_index() {
        let a = assign_population(&[0.25, 0.25, 0.5], 2).unwrap_err();
        assert!(matches!(a, Error::PopulationTooSmall { .. }));
        let a = assign_population(&[0.5, 0.5], 3).unwrap();
        assert_eq!(a.counts, vec![2, 1]);
    }

    #[test]
    fn every_type_gets_an_agent() {
        let a = assign_population(&[0.01, 0.99], 2).unwrap();
        assert_eq!(a.counts, vec![1, 1]);
    }

    #[test]
    fn stacked_examples() {
        let mut spec = ModelSpec::zeros(1, 1, &[1.0], 1.0);
        spec.major.a = Piecewise::constant(s(-2.0));
        spec.types[0].a = Piecewise::constant(s(-2.0));
        let sys = build_stacked(&spec).unwrap();
        assert!((sys.lambda_star + 2.0).abs() < 1e-14);
        assert_eq!(sys.lambda_star_f1, 0.0);

        let mut spec = ModelSpec::zeros(1, 1, &[0.4, 0.6], 1.0);
        spec.major.f1 = Piecewise::constant(s(3.0));
        let sys = build_stacked(&spec).unwrap();
        let row: Vec<f64> = sys.blocks.f1_pi.row(0).iter().cloned().collect();
        assert_eq!(row.len(), 3);
        assert_eq!(row[0], 0.0);
        assert!((row[1] - 1.2).abs() < 1e-15 && (row[2] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn piecewise_takes_sup_norm() {
        let mut spec = ModelSpec::zeros(1, 1, &[1.0], 1.0);
        spec.major.a = Piecewise::new(vec![0.5], vec![s(-1.0), s(3.0)]).unwrap();
        let sys = build_stacked(&spec).unwrap();
        assert!((sys.norms.a - 3.0).abs() < 1e-15);
        assert!((sys.lambda_star - 3.0).abs() < 1e-14);
        assert_eq!(*spec.major.a.at(0.49), s(-1.0));
        assert_eq!(*spec.major.a.at(0.5), s(3.0));
    }

    #[test]
    fn operator_constant_examples() {
        let zero = H1Constants::from_norms(&BlockNorms::default(), 0.0, 0.0);
        for v in [zero.k0, zero.k1, zero.k2, zero.k3, zero.k4, zero.k5, zero.k6, zero.k7_sq, zero.k8_sq, zero.k9, zero.k10, zero.k11_sq, zero.k12_sq] {
            assert_eq!(v, 0.0);
        }
        assert_eq!((zero.lambda1, zero.lambda2), (0.0, 0.0));
        let nm = BlockNorms { b: 1.0, d: 0.0, r_inv: 1.0, ..Default::default() };
        let c = H1Constants::from_norms(&nm, 0.0, 0.0);
        assert_eq!((c.k2, c.k3, c.k9, c.k10), (1.0, 1.0, 0.0, 0.0));
        let nm = BlockNorms { g: 2f64.sqrt(), g_pi: 0.0, ..Default::default() };
        let c = H1Constants::from_norms(&nm, 0.0, 0.0);
        assert!((c.k11_sq - 4.0).abs() < 1e-14);
        assert_eq!(c.k12_sq, 0.0);
    }
}
