//! Acceptance criteria, one test per criterion. Simulation-backed criteria
//! share their runs; `CFAM_ACCEPTANCE_REPS` sets the replication count
//! (default 20). Lines are also appended to
//! `target/tmp/acceptance_report.txt`.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use cfam_core::cfam::lambda_max;
use cfam_core::design::{build_design, null_space_basis, reparametrize};
use cfam_core::experiment::mean_metric;
use cfam_core::linalg::{default_rcond, LeastSquares};
use cfam_core::{
    fit, initial_coefficients, run_experiment, soft_threshold_update, step1_backfit, CfamFit, ExperimentConfig,
    FitOptions, InteractionKind, Method, MetricRow, Scenario, SplineBasis, Target, TrialData,
};
use common::{assert_constraint, convex_block_minimizer, toy_data, Toy};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

fn reps() -> usize {
    std::env::var("CFAM_ACCEPTANCE_REPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(20)
}

/// Prints the criterion line and appends it to `acceptance_report.txt` in
/// the cargo test scratch directory, so passing runs keep their numbers.
fn report(id: u32, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("criterion {id}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    println!("{line}");
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report.txt");
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = writeln!(f, "{line}");
    }
}

struct Runs {
    nonlinear: Vec<MetricRow>,
    linear: Vec<MetricRow>,
}

fn scen(n: usize, delta: f64, kind: InteractionKind) -> Scenario {
    Scenario::standard(n, delta, 0.0, kind)
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let reps = reps();
        let t = Instant::now();
        let nl = InteractionKind::Nonlinear;
        let mut nonlinear = Vec::new();
        let cfam_only: Vec<Scenario> = [(100, 1.0), (250, 1.0), (400, 1.0), (800, 1.0), (1000, 1.0), (250, 2.0), (1000, 2.0)]
            .iter()
            .map(|&(n, d)| scen(n, d, nl))
            .collect();
        nonlinear.extend(run_experiment::<f64>(&cfam_only, reps, &[Method::Cfam], &cfg).unwrap());
        let both = [scen(500, 1.0, nl), scen(500, 2.0, nl)];
        nonlinear.extend(run_experiment::<f64>(&both, reps, &[Method::Cfam, Method::CfamMu], &cfg).unwrap());
        let linear = run_experiment::<f64>(
            &[scen(500, 1.0, InteractionKind::Linear)],
            reps,
            &[Method::Cfam, Method::CfamLin],
            &cfg,
        )
        .unwrap();
        println!("simulation runs: {reps} reps in {:.0}s", t.elapsed().as_secs_f64());
        Runs { nonlinear, linear }
    })
}

fn nl_mean(n: usize, delta: f64, m: Method, metric: &str) -> f64 {
    let id = scen(n, delta, InteractionKind::Nonlinear).id;
    mean_metric(&runs().nonlinear, &id, m, metric).unwrap_or(f64::NAN)
}

#[test]
fn criterion_1_soft_threshold_oracle() {
    let t = Instant::now();
    let mut r = common::rng(2024);
    let mut worst: f64 = 0.0;
    for inst in 0..25 {
        let l = 2 + inst % 2;
        let (n, d) = (30, 3);
        let dt = Array2::from_shape_fn((n, d * (l - 1)), |_| r.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(n, |_| r.sample::<f64, _>(StandardNormal));
        let free = soft_threshold_update(dt.view(), y.view(), 0.0).unwrap();
        let top = cfam_core::linalg::norm(free.projection.view()) / (n as f64).sqrt();
        let lam = r.random_range(0.0..1.3) * top;
        let st = soft_threshold_update(dt.view(), y.view(), lam).unwrap();
        let oracle = dt.dot(&convex_block_minimizer(&dt, &y, lam));
        for (a, b) in st.fitted.iter().zip(oracle.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && secs < 60.0;
    report(1, pass, &format!("max deviation {worst:.2e} over 25 instances in {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_2_constraint_suite() {
    let mut worst: f64 = 0.0;
    let mut fits = 0;
    for (seed, pi) in [(1u64, vec![0.5, 0.5]), (2, vec![0.3, 0.7]), (3, vec![0.2, 0.3, 0.5]), (4, vec![0.25; 4])] {
        let data = toy_data(seed, &Toy { pi, n: 160, ..Toy::default() });
        let lmax = lambda_max(&data, &FitOptions::default()).unwrap();
        for linear_mode in [false, true] {
            for frac in [0.0, 0.02, 0.2, 0.9] {
                let opts = FitOptions { linear_mode, ..Default::default() };
                let f = fit(&data, frac * lmax, &opts).unwrap();
                worst = worst.max(common::max_constraint_violation(&f, &data));
                assert_constraint(&f, &data);
                fits += 1;
            }
        }
    }
    let pass = worst < 1e-8;
    report(2, pass, &format!("max |sum_a pi_a g(u,a)| = {worst:.2e} over {fits} fits"));
    assert!(pass);
}

/// Largest deviation from `f_j = [1 - lambda sqrt(n) / ||P_j R_j||]_+ P_j R_j`
/// over the components of `fit`, with `P_j` the projection onto the
/// constrained design of component `j` and `R_j` its partial residual.
fn thresholding_gap(f: &CfamFit<f64>, data: &TrialData<f64>) -> f64 {
    let comps = f.fitted_components(&data.covariates, &data.arms).unwrap();
    let idx = f.indices(&data.covariates).unwrap();
    let total: Array1<f64> = comps.iter().fold(Array1::zeros(data.n()), |a, c| a + c);
    let mut gap: f64 = 0.0;
    let parts = f.functional.iter().map(|fc| &fc.component).chain(&f.scalar);
    for (j, comp) in parts.enumerate() {
        let u: Vec<f64> = if j < f.p() {
            idx[j].to_vec()
        } else {
            data.covariates.scalars.column(j - f.p()).to_vec()
        };
        let d = build_design(&u, &data.arms, &comp.basis, data.n_arms()).unwrap();
        let dt = reparametrize(d.view(), &null_space_basis(&data.pi, comp.basis.dim()).unwrap()).unwrap();
        let partial = &data.y - &(&total - &comps[j]);
        let proj = LeastSquares::new(dt.view(), default_rcond()).project(partial.view()).0;
        let pn = cfam_core::linalg::norm(proj.view());
        let n = data.n() as f64;
        let s = (1.0 - f.lambda * n.sqrt() / pn).max(0.0);
        for (a, b) in comps[j].iter().zip(proj.iter()) {
            gap = gap.max((a - s * b).abs());
        }
    }
    gap
}

#[test]
fn criterion_3_fixed_point_suite() {
    let mut worst: f64 = 0.0;
    let mut active = 0;
    for seed in 0..10u64 {
        let data = toy_data(300 + seed, &Toy { n: 150, p: 3, q: 3, ..Toy::default() });
        let lmax = lambda_max(&data, &FitOptions::default()).unwrap();
        let opts = FitOptions { inner_tol: 1e-13, max_inner: 20_000, ..Default::default() };
        let f = fit(&data, 0.1 * lmax, &opts).unwrap();
        assert!(f.diagnostics.inner_converged, "seed {seed}: final backfit did not converge");
        active += f.n_active();
        worst = worst.max(thresholding_gap(&f, &data));
    }
    let pass = worst < 1e-6 && active > 0;
    report(3, pass, &format!("max thresholding gap {worst:.2e}; {active} active components over 10 fits"));
    assert!(pass);
}

#[test]
fn criterion_4_rse_of_first_index() {
    let targets = [(250, 1.0, 0.53, 0.06), (500, 1.0, 0.34, 0.06), (1000, 1.0, 0.26, 0.06), (250, 2.0, 0.60, 0.08), (500, 2.0, 0.38, 0.08), (1000, 2.0, 0.29, 0.08)];
    let mut pass = true;
    let mut cells = Vec::new();
    for (n, delta, want, tol) in targets {
        let got = nl_mean(n, delta, Method::Cfam, "rse_beta1");
        let ok = (got - want).abs() <= tol;
        pass &= ok;
        cells.push(format!("n={n} d={delta}: {got:.3} (target {want}+-{tol}{})", if ok { "" } else { " MISS" }));
    }
    report(4, pass, &cells.join("; "));
    assert!(pass);
}

#[test]
fn criterion_5_regret() {
    let nreg = nl_mean(500, 1.0, Method::Cfam, "normalized_regret");
    let reg = nl_mean(500, 1.0, Method::Cfam, "regret");
    let mu = nl_mean(500, 2.0, Method::CfamMu, "regret");
    let plain = nl_mean(500, 2.0, Method::Cfam, "regret");
    // Shared checks on the same runs.
    let tpr = nl_mean(500, 1.0, Method::Cfam, "tpr");
    let rse_mu = nl_mean(500, 2.0, Method::CfamMu, "rse_beta1");
    let rse_plain = nl_mean(500, 2.0, Method::Cfam, "rse_beta1");
    let in_band = (-0.06..=0.0).contains(&nreg);
    let ordering = mu >= plain;
    let pass = in_band && ordering;
    report(
        5,
        pass,
        &format!(
            "normalized regret {nreg:.3} (raw {reg:.3}, band [-0.06, 0]); delta=2 regret cfam_mu {mu:.3} vs cfam {plain:.3}; \
             also tpr(n=500) {tpr:.3}, rse_beta1 delta=2 cfam_mu {rse_mu:.3} vs cfam {rse_plain:.3}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_selection_trend() {
    let ns = [100, 400, 800];
    let tpr: Vec<f64> = ns.iter().map(|&n| nl_mean(n, 1.0, Method::Cfam, "tpr")).collect();
    let fpr: Vec<f64> = ns.iter().map(|&n| nl_mean(n, 1.0, Method::Cfam, "fpr")).collect();
    let up = tpr.windows(2).all(|w| w[1] > w[0]);
    let down = fpr.windows(2).all(|w| w[1] < w[0]);
    let end = tpr[2] >= 0.9 && fpr[2] <= 0.1;
    let pass = up && down && end;
    report(6, pass, &format!("tpr {tpr:.3?} fpr {fpr:.3?} at n={ns:?}"));
    assert!(pass);
}

#[test]
fn criterion_7_linear_truth_ordering() {
    let id = scen(500, 1.0, InteractionKind::Linear).id;
    let rows = &runs().linear;
    let lin = mean_metric(rows, &id, Method::CfamLin, "normalized_regret").unwrap_or(f64::NAN);
    let full = mean_metric(rows, &id, Method::Cfam, "normalized_regret").unwrap_or(f64::NAN);
    let pass = lin >= full && lin - full < 0.05;
    report(7, pass, &format!("normalized regret linear {lin:.4} vs full {full:.4}, gap {:.4}", lin - full));
    assert!(pass);
}

#[test]
fn criterion_8_numerical_hygiene() {
    // Spline derivative against central differences.
    let basis = SplineBasis::<f64>::with_dim(-1.0, 2.0, 9).unwrap();
    let mut deriv_err: f64 = 0.0;
    for i in 1..300 {
        let s = -1.0 + 3.0 * i as f64 / 300.0 + 1.7e-3;
        if basis.knots().iter().any(|k| (k - s).abs() < 1e-4) || s >= 2.0 {
            continue;
        }
        let h = 1e-6;
        let fd = (basis.eval(s + h) - basis.eval(s - h)) / (2.0 * h);
        deriv_err = deriv_err.max((&basis.deriv(s) - &fd).iter().fold(0.0, |m, v| m.max(v.abs())));
    }

    // Step 1 objective per sweep.
    let mut rise: f64 = 0.0;
    for seed in 0..5u64 {
        let data = toy_data(400 + seed, &Toy { p: 3, q: 3, ..Toy::default() });
        let opts = FitOptions::default();
        let betas = initial_coefficients(&data, opts.resolved_dim(data.n()), Target::Interaction).unwrap();
        let lmax = lambda_max(&data, &opts).unwrap();
        let (_, rep) = step1_backfit(&data, &betas, 0.05 * lmax, &opts).unwrap();
        for w in rep.objective_trace.windows(2) {
            rise = rise.max(w[1] - w[0]);
        }
    }

    // Projection smoother on a constrained design.
    let data = toy_data(500, &Toy::default());
    let z = data.covariates.scalars.column(0).to_vec();
    let cb = cfam_core::ComponentBasis::for_values(&z, 6, false).unwrap();
    let d = build_design(&z, &data.arms, &cb, 2).unwrap();
    let dt = reparametrize(d.view(), &null_space_basis(&data.pi, 6).unwrap()).unwrap();
    let ls = LeastSquares::new(dt.view(), default_rcond());
    let n = data.n();
    let mut s = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let mut e = Array1::zeros(n);
        e[k] = 1.0;
        s.column_mut(k).assign(&ls.project(e.view()).0);
    }
    let sym = (&s - &s.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let idem = (&s.dot(&s) - &s).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    // Determinism, including across thread counts.
    let mut tiny = Scenario::standard(120, 1.0, 0.0, InteractionKind::Nonlinear);
    tiny.p = 3;
    tiny.q = 3;
    let cfg = ExperimentConfig { n_mc: 300, folds: 5, ..Default::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_experiment::<f64>(std::slice::from_ref(&tiny), 3, &[Method::Cfam, Method::CfamMu], &cfg).unwrap())
    };
    let one = run(1);
    let same = one == run(4) && one == run(1);

    let pass = deriv_err < 1e-5 && rise <= 1e-10 && sym < 1e-8 && idem < 1e-8 && same;
    report(
        8,
        pass,
        &format!(
            "spline deriv err {deriv_err:.2e}; max objective rise {rise:.2e}; smoother asym {sym:.2e} idem {idem:.2e}; \
             deterministic across 1/4 threads: {same}"
        ),
    );
    assert!(pass);
}
