//! TOML run configuration.
//!
//! ```toml
//! [model]
//! n = 1
//! m = 1
//! horizon = 1.0
//! x0 = [1.0]
//! x = [-0.5]
//!
//! [model.major]
//! a = [[-1.0]]          # or a scalar for 1x1
//! b = 1.0
//! sigma = [0.3]
//! q = 1.0
//! r = 1.0
//! g = 1.0
//! rho = 0.0
//!
//! [model.minor]        # shared by all types
//! b = 1.0
//! sigma = 0.5
//!
//! [[model.types]]
//! pi = 1.0
//! a = { knots = [0.5], values = [-1.0, -2.0] }   # piecewise constant in time
//!
//! [constraints]
//! major = { kind = "full" }
//! minor = [{ kind = "orthant" }]   # one per type, or a single entry for all
//!
//! [solver]
//! steps = 200
//! paths = 64
//! particles = 512
//!
//! [study]
//! ns = [8, 16, 32, 64, 128]
//! reps = 64
//! ```
//!
//! Omitted coefficients are zero except `r` and `model.types.r`, which
//! default to the identity. Constraint kinds are `full`, `box` (`lower`,
//! `upper`), `orthant`, `subspace` and `cone` (`matrix`).

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use toml::{Spanned, Value};

use crate::convex::ConstraintSet;
use crate::error::{Error, Result};
use crate::model::{check_structure, ModelSpec, Piecewise, TimeMatrix, TimeVector};
use crate::paths::DEFAULT_CAP_BYTES;
use crate::solver::DriverFreezing;

type Coef = Spanned<Value>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    #[serde(default)]
    constraints: RawConstraints,
    #[serde(default)]
    solver: SolverSection,
    #[serde(default)]
    study: StudySection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    n: usize,
    m: usize,
    horizon: f64,
    x0: Coef,
    x: Coef,
    major: RawMajor,
    #[serde(default)]
    minor: RawMinor,
    types: Vec<RawType>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMajor {
    a: Option<Coef>,
    b: Option<Coef>,
    c: Option<Coef>,
    d: Option<Coef>,
    f1: Option<Coef>,
    f2: Option<Coef>,
    drift: Option<Coef>,
    sigma: Option<Coef>,
    q: Option<Coef>,
    r: Option<Coef>,
    g: Option<Coef>,
    #[serde(default)]
    rho: f64,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMinor {
    b: Option<Coef>,
    c: Option<Coef>,
    f1: Option<Coef>,
    f2: Option<Coef>,
    h: Option<Coef>,
    drift: Option<Coef>,
    sigma: Option<Coef>,
    q: Option<Coef>,
    g: Option<Coef>,
    #[serde(default)]
    rho: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawType {
    pi: f64,
    a: Option<Coef>,
    d: Option<Coef>,
    r: Option<Coef>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConstraints {
    major: Option<RawSet>,
    minor: Option<Vec<RawSet>>,
}

#[derive(Deserialize, Clone)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawSet {
    Full,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Orthant,
    Subspace { matrix: Vec<Vec<f64>> },
    Cone { matrix: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub steps: usize,
    pub paths: usize,
    pub particles: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub freezing: DriverFreezing,
    pub memory_cap_bytes: u64,
    /// Particles per path written by `solve`.
    pub export_particles: usize,
    /// `ε` for the local horizon bound.
    pub eps: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            steps: 100,
            paths: 32,
            particles: 512,
            seed: 1,
            tol: 1e-4,
            max_iter: 50,
            freezing: DriverFreezing::Current,
            memory_cap_bytes: DEFAULT_CAP_BYTES,
            export_particles: 16,
            eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub ns: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    /// Deviating minor agent for `nash-minor`.
    pub agent: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        Self { ns: vec![8, 16, 32, 64, 128], reps: 64, seed: 1, agent: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Config {
    pub spec: ModelSpec,
    pub solver: SolverSection,
    pub study: StudySection,
    /// Raw text, hashed into run identifiers.
    pub source: String,
}

fn line_of(src: &str, span: Range<usize>) -> usize {
    src[..span.start.min(src.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn err(&self, field: &str, span: Range<usize>, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("line {}, field {field}: {msg}", line_of(self.src, span)))
    }

    fn number(&self, field: &str, span: Range<usize>, v: &Value) -> Result<f64> {
        match v {
            Value::Float(x) => Ok(*x),
            Value::Integer(i) => Ok(*i as f64),
            other => Err(self.err(field, span, format!("expected a number, found {}", other.type_str()))),
        }
    }

    fn plain_matrix(&self, field: &str, span: Range<usize>, v: &Value, r: usize, c: usize) -> Result<DMatrix<f64>> {
        if let (Value::Float(_) | Value::Integer(_), 1, 1) = (v, r, c) {
            return Ok(DMatrix::from_element(1, 1, self.number(field, span, v)?));
        }
        let rows = v.as_array().ok_or_else(|| self.err(field, span.clone(), format!("expected a {r}x{c} matrix")))?;
        if rows.len() != r {
            return Err(self.err(field, span, format!("expected {r} rows, found {}", rows.len())));
        }
        let mut out = DMatrix::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_array().ok_or_else(|| self.err(field, span.clone(), format!("row {i} is not an array")))?;
            if row.len() != c {
                return Err(self.err(field, span, format!("row {i} has {} entries, expected {c}", row.len())));
            }
            for (j, x) in row.iter().enumerate() {
                out[(i, j)] = self.number(field, span.clone(), x)?;
            }
        }
        Ok(out)
    }

    fn plain_vector(&self, field: &str, span: Range<usize>, v: &Value, n: usize) -> Result<DVector<f64>> {
        if let (Value::Float(_) | Value::Integer(_), 1) = (v, n) {
            return Ok(DVector::from_element(1, self.number(field, span, v)?));
        }
        let xs = v.as_array().ok_or_else(|| self.err(field, span.clone(), format!("expected a vector of length {n}")))?;
        if xs.len() != n {
            return Err(self.err(field, span, format!("expected length {n}, found {}", xs.len())));
        }
        xs.iter().map(|x| self.number(field, span.clone(), x)).collect::<Result<Vec<_>>>().map(DVector::from_vec)
    }

    fn piecewise<T>(
        &self,
        field: &str,
        c: &Coef,
        plain: impl Fn(&Self, Range<usize>, &Value) -> Result<T>,
    ) -> Result<Piecewise<T>> {
        let span = c.span();
        match c.get_ref() {
            Value::Table(t) => {
                if let Some(extra) = t.keys().find(|k| *k != "knots" && *k != "values") {
                    return Err(self.err(field, span, format!("unknown key `{extra}` in piecewise value")));
                }
                let knots = t.get("knots").and_then(Value::as_array).ok_or_else(|| self.err(field, span.clone(), "piecewise value needs `knots`"))?;
                let values = t.get("values").and_then(Value::as_array).ok_or_else(|| self.err(field, span.clone(), "piecewise value needs `values`"))?;
                let knots = knots.iter().map(|k| self.number(field, span.clone(), k)).collect::<Result<Vec<_>>>()?;
                let pieces = values.iter().map(|v| plain(self, span.clone(), v)).collect::<Result<Vec<_>>>()?;
                Piecewise::new(knots, pieces).map_err(|e| self.err(field, span, e))
            }
            v => Ok(Piecewise::constant(plain(self, span, v)?)),
        }
    }

    fn time_matrix(&self, field: &str, c: &Option<Coef>, r: usize, cols: usize, default: TimeMatrix) -> Result<TimeMatrix> {
        match c {
            None => Ok(default),
            Some(c) => self.piecewise(field, c, |s, sp, v| s.plain_matrix(field, sp, v, r, cols)),
        }
    }

    fn time_vector(&self, field: &str, c: &Option<Coef>, n: usize, default: TimeVector) -> Result<TimeVector> {
        match c {
            None => Ok(default),
            Some(c) => self.piecewise(field, c, |s, sp, v| s.plain_vector(field, sp, v, n)),
        }
    }

    fn matrix(&self, field: &str, c: &Option<Coef>, r: usize, cols: usize, default: DMatrix<f64>) -> Result<DMatrix<f64>> {
        match c {
            None => Ok(default),
            Some(c) => {
                if c.get_ref().is_table() {
                    return Err(self.err(field, c.span(), "must be constant in time"));
                }
                self.plain_matrix(field, c.span(), c.get_ref(), r, cols)
            }
        }
    }
}

fn to_set(raw: &RawSet, m: usize, field: &str) -> Result<ConstraintSet> {
    let rows = |mat: &Vec<Vec<f64>>| -> Result<DMatrix<f64>> {
        if mat.is_empty() || mat.iter().any(|r| r.len() != m) {
            return Err(Error::Config(format!("field {field}: matrix must be nonempty with {m} columns")));
        }
        Ok(DMatrix::from_fn(mat.len(), m, |i, j| mat[i][j]))
    };
    let set = match raw {
        RawSet::Full => ConstraintSet::FullSpace,
        RawSet::Orthant => ConstraintSet::NonnegativeOrthant,
        RawSet::Box { lower, upper } => ConstraintSet::Box { lower: lower.clone(), upper: upper.clone() },
        RawSet::Subspace { matrix } => ConstraintSet::LinearSubspace(rows(matrix)?),
        RawSet::Cone { matrix } => ConstraintSet::HalfspaceCone(rows(matrix)?),
    };
    set.validate(m).map_err(|e| Error::Config(format!("field {field}: {e}")))?;
    Ok(set)
}

/// Parses configuration text into a structurally valid specification.
pub fn parse_config(src: &str) -> Result<Config> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| {
        let at = e.span().map(|s| format!("line {}: ", line_of(src, s))).unwrap_or_default();
        Error::Config(format!("{at}{}", e.message()))
    })?;
    let cx = Ctx { src };
    let md = &raw.model;
    let (n, m) = (md.n, md.m);
    if n == 0 || m == 0 {
        return Err(Error::Config("field model.n / model.m: dimensions must be positive".into()));
    }
    if md.types.is_empty() {
        return Err(Error::Config("field model.types: at least one minor type is required".into()));
    }
    let pi: Vec<f64> = md.types.iter().map(|t| t.pi).collect();
    let mut spec = ModelSpec::zeros(n, m, &pi, md.horizon);
    let zm = |r: usize, c: usize| Piecewise::constant(DMatrix::zeros(r, c));
    let zv = || Piecewise::constant(DVector::zeros(n));
    let mj = &md.major;
    spec.major.a = cx.time_matrix("model.major.a", &mj.a, n, n, zm(n, n))?;
    spec.major.b = cx.time_matrix("model.major.b", &mj.b, n, m, zm(n, m))?;
    spec.major.c = cx.time_matrix("model.major.c", &mj.c, n, n, zm(n, n))?;
    spec.major.d = cx.time_matrix("model.major.d", &mj.d, n, m, zm(n, m))?;
    spec.major.f1 = cx.time_matrix("model.major.f1", &mj.f1, n, n, zm(n, n))?;
    spec.major.f2 = cx.time_matrix("model.major.f2", &mj.f2, n, n, zm(n, n))?;
    spec.major.drift = cx.time_vector("model.major.drift", &mj.drift, n, zv())?;
    spec.major.sigma = cx.time_vector("model.major.sigma", &mj.sigma, n, zv())?;
    spec.major.q = cx.matrix("model.major.q", &mj.q, n, n, DMatrix::zeros(n, n))?;
    spec.major.r = cx.matrix("model.major.r", &mj.r, m, m, DMatrix::identity(m, m))?;
    spec.major.g = cx.matrix("model.major.g", &mj.g, n, n, DMatrix::zeros(n, n))?;
    spec.major.rho = mj.rho;
    let mn = &md.minor;
    spec.minor.b = cx.time_matrix("model.minor.b", &mn.b, n, m, zm(n, m))?;
    spec.minor.c = cx.time_matrix("model.minor.c", &mn.c, n, n, zm(n, n))?;
    spec.minor.f1 = cx.time_matrix("model.minor.f1", &mn.f1, n, n, zm(n, n))?;
    spec.minor.f2 = cx.time_matrix("model.minor.f2", &mn.f2, n, n, zm(n, n))?;
    spec.minor.h = cx.time_matrix("model.minor.h", &mn.h, n, n, zm(n, n))?;
    spec.minor.drift = cx.time_vector("model.minor.drift", &mn.drift, n, zv())?;
    spec.minor.sigma = cx.time_vector("model.minor.sigma", &mn.sigma, n, zv())?;
    spec.minor.q = cx.matrix("model.minor.q", &mn.q, n, n, DMatrix::zeros(n, n))?;
    spec.minor.g = cx.matrix("model.minor.g", &mn.g, n, n, DMatrix::zeros(n, n))?;
    spec.minor.rho = mn.rho;
    for (k, t) in md.types.iter().enumerate() {
        let ty = &mut spec.types[k];
        ty.a = cx.time_matrix(&format!("model.types[{k}].a"), &t.a, n, n, zm(n, n))?;
        ty.d = cx.time_matrix(&format!("model.types[{k}].d"), &t.d, n, m, zm(n, m))?;
        ty.r = cx.matrix(&format!("model.types[{k}].r"), &t.r, m, m, DMatrix::identity(m, m))?;
    }
    spec.x0_init = cx.plain_vector("model.x0", md.x0.span(), md.x0.get_ref(), n)?;
    spec.x_init = cx.plain_vector("model.x", md.x.span(), md.x.get_ref(), n)?;
    if let Some(s) = &raw.constraints.major {
        spec.major.constraint = to_set(s, m, "constraints.major")?;
    }
    if let Some(sets) = &raw.constraints.minor {
        let k = spec.types.len();
        if sets.len() != 1 && sets.len() != k {
            return Err(Error::Config(format!("field constraints.minor: expected 1 or {k} entries, found {}", sets.len())));
        }
        for kk in 0..k {
            let s = if sets.len() == 1 { &sets[0] } else { &sets[kk] };
            spec.types[kk].constraint = to_set(s, m, &format!("constraints.minor[{kk}]"))?;
        }
    }
    check_structure(&spec).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Config { spec, solver: raw.solver, study: raw.study, source: src.to_string() })
}

pub fn load_config(path: &Path) -> Result<Config> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&src).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
