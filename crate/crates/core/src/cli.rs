//! Command-line front end: `check`, `solve`, `study` and `report`.
//!
//! Every run writes into the output directory (`--out`, default `runs`).
//! Files are named `<command>-<hash>-<quantity>.<ext>`, where the hash covers
//! the command, the configuration text and every effective parameter except
//! the thread count. Each run appends one line to `manifests.jsonl` unless a
//! manifest with the same hash is already present, in which case the
//! identical files are rewritten and no line is added.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{load_config, Config};
use crate::error::{Error, Result};
use crate::model::{assign_population, build_stacked, validate_spec};
use crate::nashlab::{gap_study, nash_major_study, nash_minor_study, NashReport};
use crate::paths::{sample_ensemble_capped, TimeGrid};
use crate::solver::{picard_solve_with, CCSolution, PicardReport, PicardStatus, SolverOptions};
use crate::wellposed::{check_A4, check_global, local_horizon_bound};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NONCONVERGED: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const MANIFEST_FILE: &str = "manifests.jsonl";

#[derive(Parser, Debug)]
#[command(name = "mfg", version, about = "Constrained LQG major/minor mean-field games")]
pub struct Cli {
    /// Worker threads; falls back to MFG_THREADS, then to the number of CPUs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone, Default, Serialize)]
pub struct SolveFlags {
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Ensemble seed.
    #[arg(long)]
    pub solver_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a configuration and evaluate the well-posedness conditions.
    Check { config: PathBuf },
    /// Solve the consistency system and export the solution.
    Solve {
        config: PathBuf,
        #[command(flatten)]
        flags: SolveFlags,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-population study on an inline solve.
    Study {
        config: PathBuf,
        #[arg(long, value_enum)]
        study: StudyKind,
        /// Comma-separated population sizes.
        #[arg(long = "ns", alias = "Ns", value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        /// Agent-noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Deviating minor agent for `nash-minor`.
        #[arg(long)]
        agent: Option<usize>,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// Summarize the manifests in the output directory.
    Report {
        /// Print the full manifest of this run hash.
        #[arg(long)]
        run: Option<String>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    StateGap,
    CostGap,
    NashMajor,
    NashMinor,
}

impl StudyKind {
    fn name(self) -> &'static str {
        match self {
            StudyKind::StateGap => "state-gap",
            StudyKind::CostGap => "cost-gap",
            StudyKind::NashMajor => "nash-major",
            StudyKind::NashMinor => "nash-minor",
        }
    }
}

/// Record of one run, one JSON line in `manifests.jsonl`.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub run_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub solver: Value,
    pub parameters: Value,
    pub versions: Value,
    pub wall_clock_secs: f64,
    pub exit_code: i32,
    pub files: Vec<String>,
    pub reports: Value,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Structure(_) | Error::PopulationTooSmall { .. } | Error::Metric(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

struct Run<'a> {
    out: &'a Path,
    command: &'static str,
    hash: String,
    files: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    fn new(out: &'a Path, command: &'static str, cfg: &Config, params: &Value) -> Result<Self> {
        fs::create_dir_all(out)?;
        let key = json!({ "command": command, "config": cfg.source, "parameters": params });
        let hash = sha_hex(key.to_string().as_bytes())[..16].to_string();
        Ok(Self { out, command, hash, files: Vec::new() })
    }

    fn stem(&self) -> String {
        format!("{}-{}", self.command, self.hash)
    }

    fn write(&mut self, qty: &str, ext: &str, body: &str) -> Result<()> {
        let path = self.out.join(format!("{}-{qty}.{ext}", self.stem()));
        fs::write(&path, body)?;
        self.files.push(path);
        Ok(())
    }

    fn finish(self, cfg: &Config, seed: u64, params: Value, started: Instant, code: i32, reports: Value) -> Result<()> {
        let manifest_path = self.out.join(MANIFEST_FILE);
        if let Ok(existing) = fs::read_to_string(&manifest_path) {
            let seen = existing
                .lines()
                .filter_map(|l| serde_json::from_str::<Value>(l).ok())
                .any(|v| v["run_hash"] == self.hash.as_str() && v["command"] == self.command);
            if seen {
                println!("run {} already recorded in {}", self.hash, manifest_path.display());
                return Ok(());
            }
        }
        let s = &cfg.solver;
        let manifest = RunManifest {
            command: self.command.to_string(),
            run_hash: self.hash.clone(),
            config_hash: sha_hex(cfg.source.as_bytes()),
            seed,
            solver: json!({
                "steps": s.steps, "paths": s.paths, "particles": s.particles,
                "tol": s.tol, "max_iter": s.max_iter, "freezing": s.freezing, "seed": s.seed,
            }),
            parameters: params,
            versions: json!({ env!("CARGO_PKG_NAME"): env!("CARGO_PKG_VERSION") }),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            exit_code: code,
            files: self.files.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect(),
            reports,
        };
        let mut f = OpenOptions::new().create(true).append(true).open(&manifest_path)?;
        writeln!(f, "{}", serde_json::to_string(&manifest).expect("manifest serializes"))?;
        Ok(())
    }
}

fn apply_flags(cfg: &mut Config, f: &SolveFlags) {
    let s = &mut cfg.solver;
    s.tol = f.tol.unwrap_or(s.tol);
    s.max_iter = f.max_iter.unwrap_or(s.max_iter);
    s.paths = f.paths.unwrap_or(s.paths);
    s.particles = f.particles.unwrap_or(s.particles);
    s.steps = f.steps.unwrap_or(s.steps);
    s.seed = f.solver_seed.unwrap_or(s.seed);
}

fn require_valid(cfg: &Config) -> Result<()> {
    let report = validate_spec(&cfg.spec)?;
    if !report.is_ok() {
        return Err(Error::Config(format!("invalid specification: {}", report.violations.join("; "))));
    }
    Ok(())
}

fn solve(cfg: &Config) -> Result<(CCSolution, PicardReport)> {
    let s = &cfg.solver;
    let grid = TimeGrid::new(cfg.spec.horizon, s.steps)?;
    let ens = sample_ensemble_capped(grid, s.paths, s.particles, cfg.spec.k(), s.seed, s.memory_cap_bytes)?;
    let (sol, report) = picard_solve_with(&cfg.spec, &ens, &SolverOptions { tol: s.tol, max_iter: s.max_iter, freezing: s.freezing })?;
    for (n, d) in report.deltas.iter().enumerate() {
        match report.ratios.get(n.wrapping_sub(1)) {
            Some(r) if n > 0 => println!("iteration {:>3}  delta {d:.6e}  ratio {r:.4}", n + 1),
            _ => println!("iteration {:>3}  delta {d:.6e}", n + 1),
        }
    }
    println!("picard: {:?} after {} iterations", report.status, report.iterations);
    Ok((sol, report))
}

pub fn cmd_check(config: &Path, out: &Path) -> Result<i32> {
    let started = Instant::now();
    let cfg = load_config(config)?;
    let params = json!({ "eps": cfg.solver.eps });
    let mut run = Run::new(out, "check", &cfg, &params)?;
    let validation = validate_spec(&cfg.spec)?;
    let mut reports = json!({ "violations": validation.violations });
    if validation.is_ok() {
        println!("spec: valid");
    } else {
        for v in &validation.violations {
            println!("spec: violation: {v}");
        }
    }
    if validation.is_ok() {
        let a4 = check_A4(&cfg.spec);
        println!(
            "A4: {} (M0 = {:.6e}, max|D| = {:.6e}, M0|D|^2 = {:.6e})",
            if a4.pass { "pass" } else { "fail" },
            a4.m0,
            a4.d_max,
            a4.product
        );
        let sys = build_stacked(&cfg.spec)?;
        let (spectral, cert) = check_global(&sys);
        println!(
            "spectral: norm form {}, eigen form {} (4 lambda* = {:.6e})",
            if spectral.norm_form_holds { "holds" } else { "fails" },
            if spectral.eigen_form_holds { "holds" } else { "fails" },
            spectral.lhs
        );
        println!(
            "global: {} (rho_cert = {:.6e}, variant {:?}, lambda = {:.6e})",
            if cert.pass { "pass" } else { "fail" },
            cert.rho_cert,
            cert.variant,
            cert.lambda
        );
        let horizon = match local_horizon_bound(&cfg.spec, cfg.solver.eps) {
            Ok(h) => {
                println!("horizon: contraction certified for T <= {:.6e} (eps = {})", h.horizon, h.eps);
                serde_json::to_value(h).expect("serializes")
            }
            Err(e) => {
                println!("horizon: unavailable ({e})");
                json!({ "error": e.to_string() })
            }
        };
        reports = json!({
            "violations": validation.violations,
            "a4": { "m0": a4.m0, "d_max": a4.d_max, "product": a4.product, "pass": a4.pass },
            "spectral": spectral,
            "global": cert,
            "horizon": horizon,
        });
    }
    run.write("report", "json", &serde_json::to_string_pretty(&reports).expect("serializes"))?;
    let code = if validation.is_ok() { EXIT_OK } else { EXIT_CONFIG };
    run.finish(&cfg, cfg.solver.seed, params, started, code, reports)?;
    Ok(code)
}

pub fn cmd_solve(config: &Path, out: &Path, flags: &SolveFlags, seed: Option<u64>) -> Result<i32> {
    let started = Instant::now();
    let mut cfg = load_config(config)?;
    apply_flags(&mut cfg, flags);
    if let Some(s) = seed {
        cfg.solver.seed = s;
    }
    require_valid(&cfg)?;
    let params = serde_json::to_value(&cfg.solver).expect("serializes");
    let mut run = Run::new(out, "solve", &cfg, &params)?;
    let (sol, report) = solve(&cfg)?;
    run.write("picard", "json", &report.to_json())?;
    let files = sol.write_csv(out, &run.stem(), cfg.solver.export_particles)?;
    run.files.extend(files);
    let code = if report.status == PicardStatus::Converged { EXIT_OK } else { EXIT_NONCONVERGED };
    let reports = json!({ "picard": report });
    run.finish(&cfg, cfg.solver.seed, params, started, code, reports)?;
    Ok(code)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_study(
    config: &Path,
    out: &Path,
    kind: StudyKind,
    ns: Option<Vec<usize>>,
    reps: Option<usize>,
    seed: Option<u64>,
    agent: Option<usize>,
    flags: &SolveFlags,
) -> Result<i32> {
    let started = Instant::now();
    let mut cfg = load_config(config)?;
    apply_flags(&mut cfg, flags);
    let st = &mut cfg.study;
    st.ns = ns.unwrap_or(st.ns.clone());
    st.reps = reps.unwrap_or(st.reps);
    st.seed = seed.unwrap_or(st.seed);
    st.agent = agent.unwrap_or(st.agent);
    let st = cfg.study.clone();
    if st.ns.is_empty() || st.ns.contains(&0) {
        return Err(Error::Config("population sizes must be positive".into()));
    }
    if st.reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    if kind == StudyKind::NashMinor {
        let smallest = *st.ns.iter().min().expect("nonempty");
        if st.agent >= smallest {
            return Err(Error::Config(format!("agent {} out of range for N = {smallest}", st.agent)));
        }
    }
    require_valid(&cfg)?;
    let pops = st.ns.iter().map(|&n| assign_population(&cfg.spec.pi(), n)).collect::<Result<Vec<_>>>()?;
    let params = json!({ "study": kind, "ns": st.ns, "reps": st.reps, "seed": st.seed, "agent": st.agent, "solver": cfg.solver });
    let mut run = Run::new(out, "study", &cfg, &params)?;
    let (sol, picard) = solve(&cfg)?;
    run.write("picard", "json", &picard.to_json())?;
    if picard.status != PicardStatus::Converged {
        let reports = json!({ "picard": picard });
        run.finish(&cfg, st.seed, params, started, EXIT_NONCONVERGED, reports)?;
        return Ok(EXIT_NONCONVERGED);
    }
    let report = match kind {
        StudyKind::StateGap => NashReport::state_gap(&gap_study(&sol, &st.ns, st.reps, st.seed)?),
        StudyKind::CostGap => NashReport::cost_gap(&gap_study(&sol, &st.ns, st.reps, st.seed)?),
        StudyKind::NashMajor => {
            let eps: Vec<f64> = pops.iter().map(|p| p.eps_n).collect();
            NashReport::nash(kind.name(), &nash_major_study(&sol, &st.ns, st.reps, st.seed)?, &eps)
        }
        StudyKind::NashMinor => {
            let eps: Vec<f64> = pops.iter().map(|p| p.eps_n).collect();
            NashReport::nash(kind.name(), &nash_minor_study(&sol, &st.ns, st.reps, st.seed, st.agent)?, &eps)
        }
    };
    for (metric, f) in &report.fits {
        println!("fit {metric}: slope {:.4} [{:.4}, {:.4}], R^2 {:.4}", f.slope, f.ci[0], f.ci[1], f.r2);
    }
    for (metric, e) in &report.fit_errors {
        println!("fit {metric}: {e}");
    }
    run.write(kind.name(), "csv", &report.to_csv())?;
    run.write("summary", "json", &report.summary_json())?;
    let reports = serde_json::from_str::<Value>(&report.summary_json()).expect("valid json");
    run.finish(&cfg, st.seed, params, started, EXIT_OK, reports)?;
    Ok(EXIT_OK)
}

pub fn cmd_report(out: &Path, run: Option<&str>) -> Result<i32> {
    let path = out.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let manifests: Vec<Value> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Io(format!("{}: {e}", path.display()))))
        .collect::<Result<_>>()?;
    if let Some(h) = run {
        let m = manifests
            .iter()
            .find(|m| m["run_hash"].as_str().is_some_and(|x| x.starts_with(h)))
            .ok_or_else(|| Error::Config(format!("no run with hash {h}")))?;
        println!("{}", serde_json::to_string_pretty(m).expect("serializes"));
        return Ok(EXIT_OK);
    }
    println!("{:<8} {:<18} {:>4} {:>10} {:>6} missing", "command", "hash", "exit", "seconds", "files");
    for m in &manifests {
        let files = m["files"].as_array().cloned().unwrap_or_default();
        let missing = files.iter().filter(|f| !out.join(f.as_str().unwrap_or("")).exists()).count();
        println!(
            "{:<8} {:<18} {:>4} {:>10.2} {:>6} {missing}",
            m["command"].as_str().unwrap_or("?"),
            m["run_hash"].as_str().unwrap_or("?"),
            m["exit_code"],
            m["wall_clock_secs"].as_f64().unwrap_or(f64::NAN),
            files.len()
        );
    }
    Ok(EXIT_OK)
}

fn threads(flag: Option<usize>) -> std::result::Result<usize, String> {
    if let Some(t) = flag {
        return Ok(t);
    }
    match std::env::var("MFG_THREADS") {
        Ok(v) if !v.trim().is_empty() => v.trim().parse().map_err(|_| format!("MFG_THREADS is not a thread count: {v}")),
        _ => Ok(0),
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Check { config } => cmd_check(config, &cli.out),
        Command::Solve { config, flags, seed } => cmd_solve(config, &cli.out, flags, *seed),
        Command::Study { config, study, ns, reps, seed, agent, flags } => {
            cmd_study(config, &cli.out, *study, ns.clone(), *reps, *seed, *agent, flags)
        }
        Command::Report { run } => cmd_report(&cli.out, run.as_deref()),
    }
}

/// Parses `args` (program name first) and runs the command on a dedicated
/// thread pool. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let n = match threads(cli.threads) {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_CONFIG;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}
