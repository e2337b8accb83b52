//! Python bindings. Matrices cross the boundary as lists of rows.

use ::lsa_icl::dynamics::{self, Flow, InitSpec, IntegratorConfig};
use ::lsa_icl::experiments::{self, ExperimentConfig, OracleKind};
use ::lsa_icl::linalg;
use ::lsa_icl::model::{self, Embedding, LsaParams, ReducedParams};
use ::lsa_icl::sampling;
use ::lsa_icl::theory::{self, GammaOperator, RandomCovMoments};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn err(e: ::lsa_icl::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    linalg::from_rows(rows).map_err(err)
}

fn rows(m: &DMatrix<f64>) -> Rows {
    linalg::to_rows(m)
}

fn embedding(xs: Rows, ys: Vec<f64>, x_query: Vec<f64>) -> PyResult<Embedding> {
    let xs: Vec<DVector<f64>> = xs.into_iter().map(DVector::from_vec).collect();
    Embedding::build(&xs, &ys, &DVector::from_vec(x_query)).map_err(err)
}

/// Γ for covariance `lam` and context length `n_ctx` (`None` for infinite).
#[pyfunction]
#[pyo3(signature = (lam, n_ctx=None))]
fn gamma_of(lam: Rows, n_ctx: Option<usize>) -> PyResult<Rows> {
    let g = GammaOperator::build(&matrix(&lam)?, n_ctx).map_err(err)?;
    Ok(rows(&g.gamma))
}

/// Closed-form minimizer as a dict with `u11`, `u_last`, `w_kq`, `w_pv`.
#[pyfunction]
#[pyo3(signature = (lam, n_ctx=None))]
fn global_min_fixed<'py>(py: Python<'py>, lam: Rows, n_ctx: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let g = GammaOperator::build(&matrix(&lam)?, n_ctx).map_err(err)?;
    let m = theory::global_min_fixed(&g);
    let out = PyDict::new(py);
    out.set_item("u11", rows(&m.u11))?;
    out.set_item("u_last", m.u_last)?;
    out.set_item("w_kq", rows(&m.w_kq))?;
    out.set_item("w_pv", rows(&m.w_pv))?;
    out.set_item("min_loss", theory::min_loss_fixed(&g))?;
    Ok(out)
}

/// Prediction of the full network for key-query and projection-value weights.
#[pyfunction]
fn predict(xs: Rows, ys: Vec<f64>, x_query: Vec<f64>, w_kq: Rows, w_pv: Rows) -> PyResult<f64> {
    let e = embedding(xs, ys, x_query)?;
    let p = LsaParams::new(matrix(&w_kq)?, matrix(&w_pv)?).map_err(err)?;
    model::predict_full(&e, &p).map_err(err)
}

/// Prediction from the reduced parameters `(u11, u_last)`.
#[pyfunction]
fn predict_reduced(xs: Rows, ys: Vec<f64>, x_query: Vec<f64>, u11: Rows, u_last: f64) -> PyResult<f64> {
    let e = embedding(xs, ys, x_query)?;
    model::predict_reduced(&e, &ReducedParams::new(matrix(&u11)?, u_last)).map_err(err)
}

/// Integrates the population gradient flow from a seeded balanced start.
#[pyfunction]
#[pyo3(signature = (lam, n_ctx=None, sigma=0.1, seed=0, rel_tol=1e-10))]
fn integrate_fixed<'py>(
    py: Python<'py>,
    lam: Rows,
    n_ctx: Option<usize>,
    sigma: f64,
    seed: u64,
    rel_tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let lam = matrix(&lam)?;
    let g = GammaOperator::build(&lam, n_ctx).map_err(err)?;
    let init = InitSpec::from_seed(lam.nrows(), sigma, seed).map_err(err)?;
    let cfg = IntegratorConfig {
        rel_tol,
        ..IntegratorConfig::default()
    };
    let traj = dynamics::integrate(&init, Flow::Fixed(&g), &cfg, false).map_err(err)?;
    let fin = traj.final_state();
    let out = PyDict::new(py);
    out.set_item("u11", rows(&fin.u11))?;
    out.set_item("u_last", fin.u_last)?;
    out.set_item("t", traj.points.iter().map(|p| p.t).collect::<Vec<_>>())?;
    out.set_item("excess", traj.points.iter().map(|p| p.excess).collect::<Vec<_>>())?;
    out.set_item("balance_drift", traj.balance_drift())?;
    out.set_item("accepted_steps", traj.accepted_steps)?;
    out.set_item("termination", format!("{:?}", traj.termination))?;
    Ok(out)
}

/// Risk of the closed-form minimizer on Gaussian-weight prompts of length `m_ctx`.
#[pyfunction]
#[pyo3(signature = (lam, n_ctx, m_ctx, noise_sd=0.0))]
fn risk_decomposition<'py>(
    py: Python<'py>,
    lam: Rows,
    n_ctx: Option<usize>,
    m_ctx: usize,
    noise_sd: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let g = GammaOperator::build(&matrix(&lam)?, n_ctx).map_err(err)?;
    let r = theory::gaussian_task_risk(noise_sd, &g, m_ctx).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("best_linear", r.best_linear)?;
    out.set_item("term_m", r.term_m)?;
    out.set_item("term_n2", r.term_n2)?;
    out.set_item("total", r.total)?;
    Ok(out)
}

/// Moment coefficients and limit ratios for diagonal random covariances
/// with per-coordinate raw moments `m1`, `m2`, `m3`.
#[pyfunction]
#[pyo3(signature = (m1, m2, m3, n_ctx=None))]
fn random_cov_moments<'py>(
    py: Python<'py>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
    n_ctx: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = RandomCovMoments::from_raw(
        &DVector::from_vec(m1),
        &DVector::from_vec(m2),
        &DVector::from_vec(m3),
        n_ctx,
    )
    .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("gamma", m.gamma.iter().copied().collect::<Vec<_>>())?;
    out.set_item("xi", m.xi.iter().copied().collect::<Vec<_>>())?;
    out.set_item("zeta", rows(&m.zeta))?;
    out.set_item("ratio", m.ratio().iter().copied().collect::<Vec<_>>())?;
    let min = theory::global_min_random(&m).map_err(err)?;
    out.set_item("u_diag", min.u_diag.iter().copied().collect::<Vec<_>>())?;
    out.set_item("u_last", min.u_last)?;
    Ok(out)
}

/// Monte Carlo check of the Gaussian fourth-moment identity.
#[pyfunction]
#[pyo3(signature = (lam, a, samples=100_000, seed=0))]
fn fourth_moment_oracle<'py>(
    py: Python<'py>,
    lam: Rows,
    a: Rows,
    samples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = sampling::fourth_moment_oracle(&matrix(&lam)?, &matrix(&a)?, samples, seed).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("estimate", &r.estimate)?;
    out.set_item("closed_form", &r.closed_form)?;
    out.set_item("max_abs_dev", r.max_abs_dev)?;
    out.set_item("max_z", r.max_z)?;
    Ok(out)
}

/// Runs a named suite (`converge`, `risk-sweep`, `shift`, `random-cov`,
/// `sgd`, `oracle-fourth-moment`, `oracle-gamma-moment`). `config_json`
/// overrides fields of the suite preset.
#[pyfunction]
#[pyo3(signature = (suite, config_json=None))]
fn run_suite<'py>(py: Python<'py>, suite: &str, config_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let preset_name = if suite.starts_with("oracle") { "oracle" } else { suite };
    let cfg = ExperimentConfig::with_overrides(preset_name, config_json.unwrap_or("{}")).map_err(err)?;
    let res = py
        .detach(|| match suite {
            "converge" => experiments::run_convergence_suite(&cfg),
            "risk-sweep" => experiments::run_risk_sweep(&cfg),
            "shift" => experiments::run_shift_suite(&cfg),
            "random-cov" => experiments::run_random_cov_failure(&cfg),
            "sgd" => experiments::run_sgd_suite(&cfg),
            "oracle-fourth-moment" => experiments::run_oracle_suite(&cfg, OracleKind::FourthMoment, 1_000_000, 10),
            "oracle-gamma-moment" => experiments::run_oracle_suite(&cfg, OracleKind::GammaMoment, 1_000_000, 10),
            other => Err(::lsa_icl::Error::InvalidConfig {
                field: "suite".into(),
                message: format!("unknown suite {other}"),
            }),
        })
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("suite", &res.suite)?;
    out.set_item("pass_count", res.pass_count())?;
    out.set_item("fail_count", res.fail_count())?;
    out.set_item("config_hash", &res.provenance.config_hash)?;
    let records: Vec<Bound<'py, PyDict>> = res
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("check", &r.check)?;
            d.set_item("grid", &r.grid)?;
            d.set_item("theory", r.theory)?;
            d.set_item("observed", r.observed)?;
            d.set_item("stderr", r.stderr)?;
            d.set_item("tolerance", &r.tolerance)?;
            d.set_item("passed", r.passed)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    out.set_item("records", records)?;
    Ok(out)
}

#[pymodule]
#[pyo3(name = "lsa_icl")]
fn lsa_icl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(gamma_of, m)?)?;
    m.add_function(wrap_pyfunction!(global_min_fixed, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(predict_reduced, m)?)?;
    m.add_function(wrap_pyfunction!(integrate_fixed, m)?)?;
    m.add_function(wrap_pyfunction!(risk_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(random_cov_moments, m)?)?;
    m.add_function(wrap_pyfunction!(fourth_moment_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
