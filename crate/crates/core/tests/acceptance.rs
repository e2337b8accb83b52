//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::time::{Duration, Instant};

use lsa_icl::experiments::{
    self, CheckRecord, CovarianceConfig, ExperimentConfig, ExperimentResult, OracleKind,
};
use lsa_icl::model::{predict_full, predict_reduced, quadratic_form, Embedding, LsaParams};
use lsa_icl::sampling::{self, CoordinateLaw, CovarianceSpec, PromptSampler, ShiftSpec, TaskSpec};
use lsa_icl::theory::{gaussian_task_risk, GammaOperator};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn records<'a>(res: &'a ExperimentResult, check: &str) -> Vec<&'a CheckRecord> {
    let found: Vec<_> = res.records.iter().filter(|r| r.check == check).collect();
    assert!(!found.is_empty(), "suite {} has no record {check}", res.suite);
    found
}

fn from_records(res: &ExperimentResult, checks: &[&str]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for c in checks {
        let rs = records(res, c);
        let ok = rs.iter().all(|r| r.passed);
        passed &= ok;
        let worst = rs.iter().find(|r| !r.passed).unwrap_or(&rs[0]);
        parts.push(format!("{c}={:.4e} vs {:.4e} [{}]", worst.observed, worst.theory, worst.tolerance));
    }
    Outcome {
        passed,
        detail: parts.join(", "),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn convergence_fixed() -> (ExperimentResult, Duration) {
    let cfg = ExperimentConfig::preset("converge");
    let (res, t) = timed(|| experiments::run_convergence_suite(&cfg));
    (res.expect("convergence suite runs"), t)
}

fn risk_formula() -> Outcome {
    let d = 4;
    let cov = CovarianceSpec::identity(d);
    let task = TaskSpec::noisy(0.5);
    let ((report, est), t) = timed(|| {
        let g = GammaOperator::build(&DMatrix::identity(d, d), Some(16)).unwrap();
        let params = lsa_icl::theory::global_min_fixed(&g).reduced();
        let report = gaussian_task_risk(0.5, &g, 32).unwrap();
        let sampler = PromptSampler::new(&cov, &task, &ShiftSpec::default(), 32, 6).unwrap();
        (report, sampling::streaming_risk(&sampler, &params, 100_000))
    });
    let z = (est.mean - report.total).abs() / est.stderr;
    Outcome {
        passed: z < 5.0 && t < Duration::from_secs(60),
        detail: format!(
            "empirical {:.5} vs closed form {:.5}, |z| = {z:.2}, {:.1}s",
            est.mean,
            report.total,
            t.as_secs_f64()
        ),
    }
}

fn scaling_exponents() -> Outcome {
    let cfg = ExperimentConfig {
        mc_budget: 20_000,
        large_mc_budget: 1_000,
        ..ExperimentConfig::preset("risk-sweep")
    };
    let res = experiments::run_risk_sweep(&cfg).expect("risk sweep runs");
    let mc = from_records(&res, &["risk_mc_vs_theory"]);
    let slopes = from_records(&res, &["slope_in_n", "slope_in_m"]);
    Outcome {
        passed: slopes.passed,
        detail: format!("{}; Monte Carlo agreement: {}", slopes.detail, if mc.passed { "yes" } else { "no" }),
    }
}

fn random_convergence() -> Outcome {
    let cfg = ExperimentConfig {
        d: 3,
        n_ctx: Some(30),
        covariance: CovarianceConfig::IidDiagonal {
            law: CoordinateLaw::Exponential { rate: 1.0 },
        },
        ..ExperimentConfig::preset("converge")
    };
    let res = experiments::run_convergence_suite(&cfg).expect("random convergence runs");
    let flow = from_records(&res, &["product_diagonal", "max_off_diagonal"]);
    let slope_res = experiments::run_random_cov_failure(&ExperimentConfig {
        n_grid: vec![],
        ..ExperimentConfig::preset("random-cov")
    })
    .expect("random-cov suite runs");
    let slope = from_records(&slope_res, &["fresh_covariance_slope"]);
    Outcome {
        passed: flow.passed && slope.passed,
        detail: format!("{}, {}", flow.detail, slope.detail),
    }
}

fn moment_oracles() -> Outcome {
    let cfg = ExperimentConfig::preset("oracle");
    let fourth = experiments::run_oracle_suite(&cfg, OracleKind::FourthMoment, 1_000_000, 10).unwrap();
    let gamma = experiments::run_oracle_suite(&cfg, OracleKind::GammaMoment, 1_000_000, 10).unwrap();
    let worst = |r: &ExperimentResult| r.records.iter().map(|c| c.observed).fold(0.0, f64::max);
    Outcome {
        passed: fourth.all_passed() && gamma.all_passed(),
        detail: format!(
            "worst |z|: fourth moment {:.2}, E[Λ̂²] {:.2} over 10 instances each",
            worst(&fourth),
            worst(&gamma)
        ),
    }
}

fn equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=6);
        let m = rng.random_range(1..=12);
        let mut draw = || rng.random_range(-1.0..1.0);
        let xs: Vec<DVector<f64>> = (0..m).map(|_| DVector::from_fn(d, |_, _| draw())).collect();
        let ys: Vec<f64> = (0..m).map(|_| draw()).collect();
        let xq = DVector::from_fn(d, |_, _| draw());
        let w_kq = DMatrix::from_fn(d + 1, d + 1, |_, _| draw());
        let w_pv = DMatrix::from_fn(d + 1, d + 1, |_, _| draw());
        let e = Embedding::build(&xs, &ys, &xq).unwrap();
        let p = LsaParams::new(w_kq, w_pv).unwrap();
        let r = p.reduced();
        let full = predict_full(&e, &p).unwrap();
        let reduced = predict_reduced(&e, &r).unwrap();
        let quad = quadratic_form(&e, &r).unwrap();
        let scale = full.abs().max(1.0);
        worst = worst.max((full - reduced).abs() / scale).max((full - quad).abs() / scale);
    }
    Outcome {
        passed: worst < 1e-12,
        detail: format!("worst scaled deviation {worst:.2e} over 1000 instances"),
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [{status}] {name}: {}", o.detail);
        if !o.passed {
            failed += 1;
        }
    };

    let (conv, t) = convergence_fixed();
    let mut c1 = from_records(&conv, &["final_relative_error"]);
    c1.passed &= t < Duration::from_secs(10);
    c1.detail = format!("{}, {:.2}s", c1.detail, t.as_secs_f64());
    report(1, "flow converges to the closed-form minimum", c1);
    report(2, "product limit", from_records(&conv, &["product_limit_error"]));
    report(3, "balance conservation", from_records(&conv, &["balance_residual"]));
    report(4, "monotone loss and PL decay", from_records(&conv, &["loss_increase", "pl_decay_margin"]));
    report(5, "output-weight lower bound", from_records(&conv, &["u_last_lower_bound"]));
    report(6, "risk formula against Monte Carlo", risk_formula());
    report(7, "scaling exponents in N and M", scaling_exponents());

    let shift = experiments::run_shift_suite(&ExperimentConfig::preset("shift")).expect("shift suite runs");
    report(8, "covariate scale shift", from_records(&shift, &["covariate_scale_slope", "covariate_scale_control"]));
    report(9, "task and query shift", from_records(&shift, &["task_shift_noisy", "query_shift_relative_error"]));
    report(10, "random-covariance limit and one-third bias", random_convergence());
    report(11, "moment oracles", moment_oracles());
    report(12, "prediction equivalence", equivalence());

    let sgd = experiments::run_sgd_suite(&ExperimentConfig::preset("sgd")).expect("sgd suite runs");
    report(13, "minibatch training", from_records(&sgd, &["sgd_product_error"]));

    println!("acceptance: {} passed, {failed} failed", 13 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
