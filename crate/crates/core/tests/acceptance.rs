//! Acceptance suite: one pass/fail line per criterion, nonzero exit when any
//! criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use common::*;
use mfg_core::convex::{project, variational_residual, ConstraintSet};
use mfg_core::model::{build_stacked, ModelSpec};
use mfg_core::nashlab::{cost_gap_rates, gap_study, nash_study, state_average_gap};
use mfg_core::paths::{sample_ensemble, TimeGrid};
use mfg_core::solver::{hamiltonian_residual, picard_solve_with, CCSolution, PicardStatus, SolverOptions};
use mfg_core::wellposed::{check_A4, check_global, empirical_contraction};
use nalgebra::DVector;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn solve(spec: &ModelSpec, steps: usize, paths: usize, particles: usize, seed: u64, tol: f64, max_iter: usize) -> (CCSolution, mfg_core::solver::PicardReport) {
    let grid = TimeGrid::new(spec.horizon, steps).expect("grid");
    let ens = sample_ensemble(grid, paths, particles, spec.k(), seed).expect("ensemble");
    picard_solve_with(spec, &ens, &SolverOptions { tol, max_iter, ..Default::default() }).expect("solver runs")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn projection_certification() -> Outcome {
    let start = Instant::now();
    let (mut worst_vi, mut worst_idem, mut expansive) = (0.0_f64, 0.0_f64, 0usize);
    for seed in 0..1000u64 {
        let (x, y, set, metric) = fuzz_projection(seed);
        let xv = DVector::from_vec(x.clone());
        let px = match project(&xv, &set, &metric) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let py = project(&DVector::from_vec(y.clone()), &set, &metric).expect("projection");
        worst_vi = worst_vi.max(variational_residual(&xv, &px, &set, &metric, 64));
        let ppx = project(&px, &set, &metric).expect("projection");
        worst_idem = worst_idem.max((&ppx - &px).amax());
        let dxy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let dp: Vec<f64> = px.iter().zip(py.iter()).map(|(a, b)| a - b).collect();
        if r_norm(&metric, &dp) > r_norm(&metric, &dxy) * (1.0 + 1e-9) + 1e-12 {
            expansive += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_vi <= 1e-9 && worst_idem <= 1e-10 && expansive == 0 && secs < 10.0,
        format!("max VI residual {worst_vi:.2e}, max idempotence gap {worst_idem:.2e}, expansive pairs {expansive}, {secs:.1}s"),
    )
}

fn riccati_oracle(sol: &CCSolution, secs: f64, converged: bool) -> Outcome {
    let lay = sol.layout();
    let g = riccati_gains(lay.steps, 1e-6);
    let it = &sol.iterate;
    let (mut e0, mut n0, mut e1, mut n1) = (0.0, 0.0, 0.0, 0.0);
    for p in 0..lay.paths {
        for j in 0..lay.steps {
            let x0 = it.alpha0_at(p, j)[0];
            let o = -g.p0[j] * x0;
            e0 += (sol.major_control(p, j).expect("control")[0] - o).powi(2);
            n0 += o * o;
            for i in 0..lay.particles {
                let o = -(g.p11[j] * it.alpha_at(p, j, 0, i)[0] + g.p12[j] * x0);
                e1 += (sol.minor_control(p, j, 0, i).expect("control")[0] - o).powi(2);
                n1 += o * o;
            }
        }
    }
    let (r0, r1) = ((e0 / n0).sqrt(), (e1 / n1).sqrt());
    outcome(
        converged && r0 <= 0.02 && r1 <= 0.02 && secs < 120.0,
        format!("relative L2 error major {:.3}%, minor {:.3}%, {secs:.1}s", 100.0 * r0, 100.0 * r1),
    )
}

fn local_contraction() -> Outcome {
    let start = Instant::now();
    let mut spec = nash_benchmark();
    spec.horizon = 0.25;
    let a4 = check_A4(&spec);
    let grid = TimeGrid::new(spec.horizon, 25).expect("grid");
    let mut per_n: Vec<Vec<f64>> = Vec::new();
    let mut monotone = true;
    for seed in 1..=5u64 {
        let ens = sample_ensemble(grid, 32, 256, spec.k(), seed).expect("ensemble");
        let rep = match empirical_contraction(&spec, &ens, 8) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        monotone &= rep.deltas.windows(2).skip(1).all(|w| w[1] <= w[0]);
        for (n, r) in rep.ratios.iter().enumerate().skip(1) {
            if per_n.len() < n {
                per_n.resize(n, Vec::new());
            }
            per_n[n - 1].push(*r);
        }
    }
    let medians: Vec<f64> = per_n.into_iter().map(median).collect();
    let worst = medians.iter().cloned().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        a4.pass && worst <= 0.9 && monotone && secs < 180.0,
        format!("A4 product {:.3e}, worst median ratio {worst:.3}, monotone {monotone}, {secs:.1}s", a4.product),
    )
}

fn global_certificate() -> Outcome {
    let start = Instant::now();
    let mut good = certified_spec();
    good.major.sigma = v1(0.2);
    good.minor.sigma = v1(0.3);
    let (_, cert) = check_global(&build_stacked(&good).expect("stacked"));
    let (_, rep) = solve(&good, 50, 16, 64, 3, 1e-8, 50);
    let good_ok = cert.pass && rep.converged && rep.ratios.iter().all(|r| *r < 1.0);

    let mut bad = good.clone();
    bad.major.g = s1(50.0);
    bad.minor.g = s1(50.0);
    bad.major.a = m1(1.0);
    bad.types[0].a = m1(1.0);
    bad.major.b = m1(1.0);
    bad.minor.b = m1(1.0);
    bad.major.d = m1(1.0);
    bad.types[0].d = m1(1.0);
    let (_, bad_cert) = check_global(&build_stacked(&bad).expect("stacked"));
    let grid = TimeGrid::new(bad.horizon, 50).expect("grid");
    let ens = sample_ensemble(grid, 16, 64, 1, 3).expect("ensemble");
    let bad_seen = match picard_solve_with(&bad, &ens, &SolverOptions { tol: 1e-8, max_iter: 20, ..Default::default() }) {
        Ok((_, r)) => {
            let grew = r.ratios.iter().any(|x| *x > 1.0);
            (r.status == PicardStatus::Diverged || grew, format!("{:?}, max ratio {:.3e}", r.status, r.ratios.iter().cloned().fold(0.0, f64::max)))
        }
        Err(e) => (true, format!("error reported: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    outcome(
        good_ok && !bad_cert.pass && !check_A4(&bad).pass && bad_seen.0 && secs < 300.0,
        format!(
            "certified rho_cert {:.3e}, {} iterations, max ratio {:.3}; adversarial: {}; {secs:.1}s",
            cert.rho_cert,
            rep.iterations,
            rep.ratios.iter().cloned().fold(0.0, f64::max),
            bad_seen.1
        ),
    )
}

fn hamiltonian_optimality(unconstrained: &CCSolution) -> Outcome {
    let free = hamiltonian_residual(unconstrained, 10_000).expect("residual");
    let mut spec = nash_benchmark();
    spec.major.constraint = ConstraintSet::NonnegativeOrthant;
    for t in &mut spec.types {
        t.constraint = ConstraintSet::NonnegativeOrthant;
    }
    let (sol, rep) = solve(&spec, 30, 16, 128, 3, 1e-4, 50);
    let boxed = hamiltonian_residual(&sol, 10_000).expect("residual");
    let ok = |h: &mfg_core::solver::HamiltonianCheck| h.max_violation <= 1e-6 * h.scale.max(1.0);
    outcome(
        ok(&free) && ok(&boxed) && rep.converged,
        format!(
            "unconstrained {:.2e} (scale {:.2e}), orthant {:.2e} (scale {:.2e})",
            free.max_violation, free.scale, boxed.max_violation, boxed.scale
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/nash.toml");
    let root = tempfile::tempdir().expect("tempdir");
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let out = root.path().join(format!("t{threads}"));
        let code = mfg_core::cli::run([
            "mfg", "--threads", threads, "--out", out.to_str().expect("utf8"), "study", cfg.to_str().expect("utf8"),
            "--study", "cost-gap", "--ns", "4,8,16,32", "--reps", "32", "--steps", "20", "--paths", "16", "--particles", "128",
        ]);
        if code != 0 {
            return outcome(false, format!("study with {threads} threads exited {code}"));
        }
        let mut files: Vec<_> = fs::read_dir(&out)
            .expect("out dir")
            .map(|e| e.expect("entry").path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        csvs.push(files.iter().map(|f| (f.file_name().expect("name").to_owned(), fs::read(f).expect("csv"))).collect::<Vec<_>>());
    }
    let same = !csvs[0].is_empty() && csvs[0] == csvs[1];
    outcome(same, format!("{} CSV files compared byte for byte", csvs[0].len()))
}

fn truth_table() -> Outcome {
    let scalar = |g0: f64, r0: f64, g: f64, r: f64, d: f64| {
        let mut s = ModelSpec::zeros(1, 1, &[1.0], 1.0);
        s.major.g = s1(g0);
        s.major.rho = r0;
        s.minor.g = s1(g);
        s.minor.rho = r;
        s.major.d = m1(d);
        s.types[0].d = m1(d);
        s
    };
    let zero_g = check_A4(&scalar(0.0, 0.0, 0.0, 0.0, 5.0));
    let half = check_A4(&scalar(0.5, 0.0, 0.5, 0.0, 1.0));
    let big = check_A4(&scalar(0.0, 0.0, 2.0, 0.0, 1.0));

    let zero = ModelSpec::zeros(1, 1, &[1.0], 1.0);
    let (zero_sc, _) = check_global(&build_stacked(&zero).expect("stacked"));
    let mut stable = ModelSpec::zeros(1, 1, &[1.0], 1.0);
    stable.major.a = m1(-5.0);
    stable.types[0].a = m1(-5.0);
    let (stable_sc, _) = check_global(&build_stacked(&stable).expect("stacked"));
    let (_, cert) = check_global(&build_stacked(&certified_spec()).expect("stacked"));

    let rows = [
        ("zero terminal weights", zero_g.pass && zero_g.m0 == 0.0, true),
        ("unit coupling, G = 0.5", half.pass && (half.m0 - 0.5).abs() < 1e-15, true),
        ("G = 2", big.pass || big.m0 < 8.0, false),
        ("all-zero coefficients", zero_sc.norm_form_holds || zero_sc.eigen_form_holds, false),
        ("A = -5", stable_sc.norm_form_holds && stable_sc.lhs == -20.0, true),
        ("weak coupling certificate", cert.pass && cert.rho_cert < 1.0, true),
    ];
    let bad: Vec<&str> = rows.iter().filter(|(_, got, want)| got != want).map(|(n, _, _)| *n).collect();
    outcome(
        bad.is_empty(),
        if bad.is_empty() { format!("6 of 6 rows match (rho_cert {:.3e})", cert.rho_cert) } else { format!("mismatched: {}", bad.join(", ")) },
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "projection certification", projection_certification());

    let start = Instant::now();
    let (ric, ric_rep) = solve(&riccati_benchmark(0.3, 0.5), 200, 64, 512, 7, 1e-4, 50);
    report(2, "Riccati oracle", riccati_oracle(&ric, start.elapsed().as_secs_f64(), ric_rep.converged));

    report(3, "local contraction", local_contraction());
    report(4, "global certificate", global_certificate());

    let start = Instant::now();
    let (bench, bench_rep) = solve(&nash_benchmark(), 50, 32, 2048, 11, 1e-4, 50);
    let solve_secs = start.elapsed().as_secs_f64();
    let ns = [8, 16, 32, 64, 128];
    let t = Instant::now();
    let rows = gap_study(&bench, &ns, 256, 5).expect("gap study");
    let gap_secs = solve_secs + t.elapsed().as_secs_f64();
    let eps_zero = rows.iter().all(|r| r.eps_n == 0.0);
    let c5 = match state_average_gap(&rows) {
        Ok((_, fit)) => outcome(
            bench_rep.converged && eps_zero && (-1.25..=-0.75).contains(&fit.slope) && gap_secs < 300.0,
            format!("slope {:.3} (R^2 {:.3}), 256 replications, {gap_secs:.1}s", fit.slope, fit.r2),
        ),
        Err(e) => outcome(false, e.to_string()),
    };
    report(5, "state average rate", c5);
    let c6 = match cost_gap_rates(&rows) {
        Ok(fits) => {
            let slopes: Vec<f64> = fits.iter().map(|f| f.slope).collect();
            outcome(
                bench_rep.converged && slopes.iter().all(|s| (-0.75..=-0.30).contains(s)) && gap_secs < 300.0,
                format!("slopes major {:.3}, minor types {:?}, {gap_secs:.1}s", slopes[0], slopes[1..].iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    };
    report(6, "cost gap rate", c6);

    let t = Instant::now();
    let c7 = match nash_study(&bench, &[16, 64, 256], 512, 9) {
        Ok(nash) => {
            let eps: Vec<f64> = nash.iter().map(|r| r.eps_hat).collect();
            let nonincreasing = eps.windows(2).all(|w| w[1] <= w[0]);
            let halved = eps[2] <= eps[0] / 2.0;
            let self_zero = nash.iter().all(|r| {
                r.major.improvements.iter().chain(&r.minor.improvements).filter(|i| i.candidate == "decentralized").all(|i| i.improvement.mean == 0.0)
            });
            let secs = solve_secs + t.elapsed().as_secs_f64();
            outcome(
                nonincreasing && halved && self_zero && secs < 480.0,
                format!("eps_hat {:?}, self-deviation zero {self_zero}, {secs:.1}s", eps.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>()),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    };
    report(7, "epsilon-Nash falsification", c7);

    report(8, "Hamiltonian optimality", hamiltonian_optimality(&ric));
    report(9, "thread determinism", determinism());
    report(10, "condition truth table", truth_table());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
