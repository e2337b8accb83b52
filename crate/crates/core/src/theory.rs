//! Closed-form quantities: the Γ operator, global minima of the population
//! loss, PL constants, the risk decomposition of the trained predictor and
//! their random-covariance analogues.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};
use crate::model::{LsaParams, ReducedParams};

/// `Γ = (1 + 1/N) Λ + tr(Λ)/N · I`. An infinite context (`n_ctx = None`)
/// gives `Γ = Λ`.
#[derive(Debug, Clone)]
pub struct GammaOperator {
    pub gamma: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub n_ctx: Option<usize>,
    basis: SymEigen,
    gamma_values: DVector<f64>,
}

pub fn gamma_of(lambda: &DMatrix<f64>, n_ctx: usize) -> Result<GammaOperator> {
    if n_ctx == 0 {
        return Err(Error::EmptyContext);
    }
    GammaOperator::build(lambda, Some(n_ctx))
}

pub fn gamma_infinite(lambda: &DMatrix<f64>) -> Result<GammaOperator> {
    GammaOperator::build(lambda, None)
}

impl GammaOperator {
    pub fn build(lambda: &DMatrix<f64>, n_ctx: Option<usize>) -> Result<Self> {
        if n_ctx == Some(0) {
            return Err(Error::EmptyContext);
        }
        let basis = linalg::spd_eigen("covariance", lambda)?;
        let inv_n = n_ctx.map_or(0.0, |n| 1.0 / n as f64);
        let trace = basis.values.sum();
        let gamma_values = basis.values.map(|l| (1.0 + inv_n) * l + trace * inv_n);
        let d = lambda.nrows();
        let gamma = lambda * (1.0 + inv_n) + DMatrix::identity(d, d) * (trace * inv_n);
        Ok(Self {
            gamma,
            lambda: lambda.clone(),
            n_ctx,
            basis,
            gamma_values,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn inv_n(&self) -> f64 {
        self.n_ctx.map_or(0.0, |n| 1.0 / n as f64)
    }

    pub fn lambda_eigenvalues(&self) -> &DVector<f64> {
        &self.basis.values
    }

    pub fn gamma_eigenvalues(&self) -> &DVector<f64> {
        &self.gamma_values
    }

    /// `Q diag(f(λ_k, γ_k)) Qᵀ` in the shared eigenbasis of Λ and Γ.
    pub fn spectral(&self, f: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
        let vals = DVector::from_fn(self.dim(), |k, _| f(self.basis.values[k], self.gamma_values[k]));
        SymEigen {
            values: vals,
            vectors: self.basis.vectors.clone(),
        }
        .map(|v| v)
    }

    pub fn gamma_inv(&self) -> DMatrix<f64> {
        self.spectral(|_, g| 1.0 / g)
    }

    pub fn gamma_op_norm(&self) -> f64 {
        self.gamma_values.max()
    }

    pub fn lambda_op_norm(&self) -> f64 {
        self.basis.values.max()
    }

    pub fn lambda_trace(&self) -> f64 {
        self.basis.values.sum()
    }

    pub fn condition_number(&self) -> f64 {
        self.basis.max() / self.basis.min()
    }
}

#[derive(Debug, Clone)]
pub struct FixedMinimum {
    pub w_kq: DMatrix<f64>,
    pub w_pv: DMatrix<f64>,
    pub u11: DMatrix<f64>,
    pub u_last: f64,
}

impl FixedMinimum {
    pub fn reduced(&self) -> ReducedParams {
        ReducedParams::new(self.u11.clone(), self.u_last)
    }

    pub fn params(&self) -> LsaParams {
        LsaParams {
            w_kq: self.w_kq.clone(),
            w_pv: self.w_pv.clone(),
        }
    }
}

/// The limit of gradient flow from the balanced initialization:
/// `U11* = ‖Γ⁻¹‖_F^{-1/2} Γ⁻¹`, `u_last* = ‖Γ⁻¹‖_F^{1/2}`.
pub fn global_min_fixed(g: &GammaOperator) -> FixedMinimum {
    let gi = g.gamma_inv();
    let norm = linalg::frobenius(&gi);
    let u11 = &gi / norm.sqrt();
    let u_last = norm.sqrt();
    let r = ReducedParams::new(u11.clone(), u_last);
    let full = LsaParams::from_reduced(&r);
    FixedMinimum {
        w_kq: full.w_kq,
        w_pv: full.w_pv,
        u11,
        u_last,
    }
}

fn check_no_cross(r: &ReducedParams, d: usize) -> Result<()> {
    if r.u11.nrows() != d || r.u11.ncols() != d {
        return Err(Error::Shape {
            what: "U11",
            expected: (d, d),
            found: (r.u11.nrows(), r.u11.ncols()),
        });
    }
    if r.has_cross_terms() {
        return Err(Error::InvalidInit(
            "the population loss is only tracked with u12 = u21 = 0".into(),
        ));
    }
    Ok(())
}

/// `tr[½ u² Γ Λ U Λ Uᵀ − u Λ² Uᵀ]`.
pub fn equiv_loss(r: &ReducedParams, g: &GammaOperator) -> Result<f64> {
    check_no_cross(r, g.dim())?;
    let u = r.u_last;
    let lam = &g.lambda;
    let quad = (&g.gamma * lam * &r.u11 * lam * r.u11.transpose()).trace();
    let lin = (lam * lam * r.u11.transpose()).trace();
    Ok(0.5 * u * u * quad - u * lin)
}

/// `−½ tr(Λ² Γ⁻¹)`.
pub fn min_loss_fixed(g: &GammaOperator) -> f64 {
    -0.5 * g.spectral(|l, gm| l * l / gm).trace()
}

/// `½ ‖Γ^{1/2} (u Λ^{1/2} U Λ^{1/2} − Λ Γ⁻¹)‖_F²`, the loss above its minimum
/// written as a sum of squares.
pub fn excess_loss_fixed(r: &ReducedParams, g: &GammaOperator) -> Result<f64> {
    check_no_cross(r, g.dim())?;
    let lam_half = g.spectral(|l, _| l.sqrt());
    let gam_half = g.spectral(|_, gm| gm.sqrt());
    let target = g.spectral(|l, gm| l / gm);
    let resid = &gam_half * (&lam_half * &r.u11 * &lam_half * r.u_last - target);
    Ok(0.5 * resid.norm_squared())
}

/// Largest admissible initial scale: `σ² < 2 / (√d ‖Γ‖_op)`.
pub fn max_sigma_fixed(g: &GammaOperator) -> f64 {
    (2.0 / ((g.dim() as f64).sqrt() * g.gamma_op_norm())).sqrt()
}

fn check_init_direction(theta_outer: &DMatrix<f64>, d: usize) -> Result<()> {
    linalg::check_square("init direction", theta_outer, d)?;
    let norm = linalg::frobenius(theta_outer);
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInit(format!(
            "init direction must have unit Frobenius norm, got {norm}"
        )));
    }
    Ok(())
}

fn check_sigma(sigma: f64, max_sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma < max_sigma) {
        return Err(Error::InitScaleOutOfRange { sigma, max_sigma });
    }
    Ok(())
}

/// `‖Λ Θ‖_F² = tr(Λ² ΘΘᵀ)`.
fn weighted_init_mass(lambda: &DMatrix<f64>, theta_outer: &DMatrix<f64>) -> f64 {
    (lambda * lambda * theta_outer).trace()
}

/// PL rate of the fixed-covariance flow from `U11 = σ ΘΘᵀ`, `u_last = σ`.
pub fn pl_constant_fixed(g: &GammaOperator, sigma: f64, theta_outer: &DMatrix<f64>) -> Result<f64> {
    check_init_direction(theta_outer, g.dim())?;
    check_sigma(sigma, max_sigma_fixed(g))?;
    let mass = weighted_init_mass(&g.lambda, theta_outer);
    if mass <= 0.0 {
        return Err(Error::InvalidInit("Λ Θ vanishes".into()));
    }
    let sd = (g.dim() as f64).sqrt();
    let s2 = sigma * sigma;
    let lam_op = g.lambda_op_norm();
    let tr_gl = g.spectral(|l, gm| 1.0 / (l * gm)).trace();
    let tr_l = g.spectral(|l, _| 1.0 / l).trace();
    Ok(s2 * mass * (2.0 - sd * s2 * g.gamma_op_norm()) / (sd * lam_op * lam_op * tr_gl * tr_l))
}

/// Uniform lower bound on `u_last(t)` along the fixed-covariance flow.
pub fn lower_bound_u_last_fixed(g: &GammaOperator, sigma: f64, theta_outer: &DMatrix<f64>) -> Result<f64> {
    check_init_direction(theta_outer, g.dim())?;
    check_sigma(sigma, max_sigma_fixed(g))?;
    let sd = (g.dim() as f64).sqrt();
    let s2 = sigma * sigma;
    let lam_op = g.lambda_op_norm();
    let mass = weighted_init_mass(&g.lambda, theta_outer);
    Ok((s2 / (2.0 * sd * lam_op * lam_op) * mass * (2.0 - sd * s2 * g.gamma_op_norm())).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskReport {
    pub best_linear: f64,
    pub term_m: f64,
    pub term_n2: f64,
    pub total: f64,
    /// Best-linear weight; absent when the report is averaged over tasks.
    pub a_vec: Option<Vec<f64>>,
    pub sigma_mat: Vec<Vec<f64>>,
}

impl RiskReport {
    pub fn excess(&self) -> f64 {
        self.term_m + self.term_n2
    }
}

/// Prediction risk of the trained model on prompts of length `m_ctx`:
/// `best_linear + (1/M) tr[Σ Γ⁻² Λ] + (1/N²)[‖a‖²_{Γ⁻²Λ³} + 2tr(Λ)‖a‖²_{Γ⁻²Λ²} + tr(Λ)²‖a‖²_{Γ⁻²Λ}]`.
pub fn risk_decomposition(
    a: &DVector<f64>,
    sigma_mat: &DMatrix<f64>,
    best_linear: f64,
    g: &GammaOperator,
    m_ctx: usize,
) -> Result<RiskReport> {
    let mut report = risk_from_moments(&(a * a.transpose()), sigma_mat, best_linear, g, m_ctx)?;
    report.a_vec = Some(a.iter().copied().collect());
    Ok(report)
}

/// Same decomposition with `a aᵀ` replaced by a second-moment matrix, for
/// risks averaged over a task distribution.
pub fn risk_from_moments(
    a_outer: &DMatrix<f64>,
    sigma_mat: &DMatrix<f64>,
    best_linear: f64,
    g: &GammaOperator,
    m_ctx: usize,
) -> Result<RiskReport> {
    let d = g.dim();
    if m_ctx == 0 {
        return Err(Error::EmptyContext);
    }
    linalg::check_square("a aᵀ", a_outer, d)?;
    linalg::check_square("Σ", sigma_mat, d)?;
    linalg::check_psd("Σ", sigma_mat)?;
    if !(best_linear >= 0.0 && best_linear.is_finite()) {
        return Err(Error::NonFiniteInput { what: "best linear risk" });
    }
    let term_m = (sigma_mat * g.spectral(|l, gm| l / (gm * gm))).trace() / m_ctx as f64;
    let tr = g.lambda_trace();
    let inv_n = g.inv_n();
    let weight = g.spectral(|l, gm| (l * l * l + 2.0 * tr * l * l + tr * tr * l) / (gm * gm));
    let term_n2 = inv_n * inv_n * (a_outer * weight).trace();
    Ok(RiskReport {
        best_linear,
        term_m,
        term_n2,
        total: best_linear + term_m + term_n2,
        a_vec: None,
        sigma_mat: linalg::to_rows(sigma_mat),
    })
}

/// `Cov(x y)` for `y = ⟨w, x⟩ + ε`, `x ~ N(0, Λ)`, `Var ε = s²`:
/// `‖w‖²_Λ Λ + Λ w wᵀ Λ + s² Λ`.
pub fn linear_task_sigma(w: &DVector<f64>, lambda: &DMatrix<f64>, noise_sd: f64) -> DMatrix<f64> {
    let lw = lambda * w;
    lambda * (w.dot(&lw) + noise_sd * noise_sd) + &lw * lw.transpose()
}

/// Risk for a fixed linear task with Gaussian label noise.
pub fn linear_task_risk(w: &DVector<f64>, noise_sd: f64, g: &GammaOperator, m_ctx: usize) -> Result<RiskReport> {
    let sigma = linear_task_sigma(w, &g.lambda, noise_sd);
    risk_decomposition(w, &sigma, noise_sd * noise_sd, g, m_ctx)
}

/// Risk averaged over `w ~ N(0, I)`: `a aᵀ → I`, `Σ → tr(Λ)Λ + Λ² + s²Λ`.
pub fn gaussian_task_risk(noise_sd: f64, g: &GammaOperator, m_ctx: usize) -> Result<RiskReport> {
    let d = g.dim();
    let lam = &g.lambda;
    let sigma = lam * (g.lambda_trace() + noise_sd * noise_sd) + lam * lam;
    risk_from_moments(&DMatrix::identity(d, d), &sigma, noise_sd * noise_sd, g, m_ctx)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorollaryBound {
    pub eta: f64,
    pub d: usize,
    pub kappa: f64,
    pub trace: f64,
}

impl CorollaryBound {
    /// Test prompt length sufficient for an extra `eps` of excess risk.
    pub fn m_of_eps(&self, eps: f64) -> f64 {
        (self.d as f64 + 1.0) * self.trace / eps
    }
}

/// `η = (1 + 2d + d²κ) tr(Λ) / N²` and `M(ε) = (d+1) tr(Λ) / ε`.
pub fn corollary_bound(lambda: &DMatrix<f64>, n_ctx: Option<usize>) -> Result<CorollaryBound> {
    let g = GammaOperator::build(lambda, n_ctx)?;
    let d = g.dim();
    let df = d as f64;
    let kappa = g.condition_number();
    let trace = g.lambda_trace();
    let inv_n = g.inv_n();
    Ok(CorollaryBound {
        eta: (1.0 + 2.0 * df + df * df * kappa) * trace * inv_n * inv_n,
        d,
        kappa,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MomentSource {
    Analytic,
    MonteCarlo { samples: usize, max_stderr: f64 },
}

/// Moment coefficients of the decoupled random-diagonal-covariance flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomCovMoments {
    pub e_lambda: DVector<f64>,
    pub e_lambda2: DVector<f64>,
    pub e_lambda3: DVector<f64>,
    /// Diagonal of `E[Γ_τ Λ_τ²]`, equal to `gamma`.
    pub e_gamma_lambda2: DVector<f64>,
    pub gamma: DVector<f64>,
    pub xi: DVector<f64>,
    /// Off-diagonal coefficients; the diagonal repeats `gamma` so the whole
    /// matrix weighs `u_ij²` in the loss.
    pub zeta: DMatrix<f64>,
    pub n_ctx: Option<usize>,
    pub source: MomentSource,
    /// `E[‖Γ_τ‖_op ‖Λ_τ‖_F²]`, needed only for the initial-scale bound.
    pub init_scale_moment: Option<f64>,
}

impl RandomCovMoments {
    /// Builds the coefficients from per-coordinate raw moments
    /// `E λ_i^k`, `k = 1, 2, 3`, of independent diagonal entries.
    pub fn from_raw(
        m1: &DVector<f64>,
        m2: &DVector<f64>,
        m3: &DVector<f64>,
        n_ctx: Option<usize>,
    ) -> Result<Self> {
        let d = m1.len();
        if d == 0 || m2.len() != d || m3.len() != d {
            return Err(Error::InvalidMoments("moment vectors must share a nonzero length".into()));
        }
        if n_ctx == Some(0) {
            return Err(Error::EmptyContext);
        }
        for (k, m) in [m1, m2, m3].iter().enumerate() {
            if let Some(i) = m.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidMoments(format!(
                    "moment of order {} at coordinate {i} is {} (must be finite and positive)",
                    k + 1,
                    m[i]
                )));
            }
        }
        let inv_n = n_ctx.map_or(0.0, |n| 1.0 / n as f64);
        let total1 = m1.sum();
        let gamma = DVector::from_fn(d, |i, _| {
            (1.0 + inv_n) * m3[i] + inv_n * (m3[i] + m2[i] * (total1 - m1[i]))
        });
        let zeta = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                gamma[i]
            } else {
                let rest = total1 - m1[i] - m1[j];
                (1.0 + inv_n) * m2[i] * m1[j] + inv_n * (m2[i] * m1[j] + m1[i] * m2[j] + m1[i] * m1[j] * rest)
            }
        });
        Ok(Self {
            e_lambda: m1.clone(),
            e_lambda2: m2.clone(),
            e_lambda3: m3.clone(),
            e_gamma_lambda2: gamma.clone(),
            xi: m2.clone(),
            gamma,
            zeta,
            n_ctx,
            source: MomentSource::Analytic,
            init_scale_moment: None,
        })
    }

    /// Degenerate law: `Λ_τ ≡ diag(values)`.
    pub fn point_mass(values: &DVector<f64>, n_ctx: Option<usize>) -> Result<Self> {
        let m2 = values.component_mul(values);
        let m3 = m2.component_mul(values);
        let mut m = Self::from_raw(values, &m2, &m3, n_ctx)?;
        let inv_n = n_ctx.map_or(0.0, |n| 1.0 / n as f64);
        let tr = values.sum();
        let gamma_op = values.iter().map(|l| (1.0 + inv_n) * l + tr * inv_n).fold(0.0, f64::max);
        m.init_scale_moment = Some(gamma_op * m2.sum());
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Smallest coefficient among `γ_i` and `ζ_ij`, `i ≠ j`.
    pub fn eta_min(&self) -> f64 {
        self.zeta.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn ratio(&self) -> DVector<f64> {
        self.xi.component_div(&self.gamma)
    }
}

#[derive(Debug, Clone)]
pub struct RandomMinimum {
    pub w_kq: DMatrix<f64>,
    pub w_pv: DMatrix<f64>,
    pub u_diag: DVector<f64>,
    pub u_last: f64,
}

impl RandomMinimum {
    pub fn reduced(&self) -> ReducedParams {
        ReducedParams::new(DMatrix::from_diagonal(&self.u_diag), self.u_last)
    }
}

/// `u_ii* = s^{-1/2} ξ_i/γ_i`, `u_last* = s^{1/2}` with `s = (Σ ξ_k²/γ_k²)^{1/2}`.
pub fn global_min_random(m: &RandomCovMoments) -> Result<RandomMinimum> {
    if let Some(i) = m.gamma.iter().position(|g| *g <= 0.0) {
        return Err(Error::InvalidMoments(format!("gamma[{i}] = {} is not positive", m.gamma[i])));
    }
    let ratio = m.ratio();
    let s = ratio.norm();
    let u_diag = &ratio / s.sqrt();
    let u_last = s.sqrt();
    let full = LsaParams::from_reduced(&ReducedParams::new(DMatrix::from_diagonal(&u_diag), u_last));
    Ok(RandomMinimum {
        w_kq: full.w_kq,
        w_pv: full.w_pv,
        u_diag,
        u_last,
    })
}

/// `E[Λ_τ²] E[Γ_τ Λ_τ²]⁻¹ Λ_new`: the multiplier the M → ∞ prediction
/// applies to the task weight on a prompt with covariance `Λ_new`.
pub fn random_cov_limit_factor(m: &RandomCovMoments, lambda_new: &DVector<f64>) -> Result<DMatrix<f64>> {
    if lambda_new.len() != m.dim() {
        return Err(Error::DimensionMismatch {
            what: "new covariance diagonal",
            index: 0,
            expected: m.dim(),
            found: lambda_new.len(),
        });
    }
    Ok(DMatrix::from_diagonal(&m.ratio().component_mul(lambda_new)))
}

/// `½ u² Σ_ij ζ_ij u_ij² − u Σ_i ξ_i u_ii` (with `ζ_ii = γ_i`).
pub fn loss_random(r: &ReducedParams, m: &RandomCovMoments) -> Result<f64> {
    check_no_cross(r, m.dim())?;
    let u = r.u_last;
    let quad: f64 = r.u11.component_mul(&r.u11).component_mul(&m.zeta).sum();
    let lin: f64 = (0..m.dim()).map(|i| m.xi[i] * r.u11[(i, i)]).sum();
    Ok(0.5 * u * u * quad - u * lin)
}

/// `−½ Σ ξ_i²/γ_i`.
pub fn min_loss_random(m: &RandomCovMoments) -> f64 {
    -0.5 * m.xi.component_mul(&m.xi).component_div(&m.gamma).sum()
}

/// `½ Σ γ_i (u_ii u − ξ_i/γ_i)² + ½ Σ_{i≠j} ζ_ij u² u_ij²`.
pub fn excess_loss_random(r: &ReducedParams, m: &RandomCovMoments) -> Result<f64> {
    check_no_cross(r, m.dim())?;
    let u = r.u_last;
    let d = m.dim();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            let uij = r.u11[(i, j)];
            total += if i == j {
                let e = uij * u - m.xi[i] / m.gamma[i];
                m.gamma[i] * e * e
            } else {
                m.zeta[(i, j)] * u * u * uij * uij
            };
        }
    }
    Ok(0.5 * total)
}

fn random_init_terms(m: &RandomCovMoments, theta_outer: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_init_direction(theta_outer, m.dim())?;
    let e_scale = m.init_scale_moment.ok_or_else(|| {
        Error::InvalidMoments("E[‖Γ‖_op ‖Λ‖_F²] is required for the initial-scale bound".into())
    })?;
    let mass = weighted_init_mass(&DMatrix::from_diagonal(&m.e_lambda), theta_outer);
    if mass <= 0.0 {
        return Err(Error::InvalidInit("E[Λ] Θ vanishes".into()));
    }
    Ok((mass, e_scale))
}

/// `σ² < 2 ‖E[Λ] Θ‖_F² / (√d E[‖Γ_τ‖_op ‖Λ_τ‖_F²])`.
pub fn max_sigma_random(m: &RandomCovMoments, theta_outer: &DMatrix<f64>) -> Result<f64> {
    let (mass, e_scale) = random_init_terms(m, theta_outer)?;
    Ok((2.0 * mass / ((m.dim() as f64).sqrt() * e_scale)).sqrt())
}

fn random_bound_core(m: &RandomCovMoments, sigma: f64, theta_outer: &DMatrix<f64>) -> Result<f64> {
    let (mass, e_scale) = random_init_terms(m, theta_outer)?;
    check_sigma(sigma, max_sigma_random(m, theta_outer)?)?;
    let sd = (m.dim() as f64).sqrt();
    let s2 = sigma * sigma;
    let op = m.e_lambda2.max();
    Ok(s2 / (2.0 * sd * op) * (2.0 * mass - sd * s2 * e_scale))
}

pub fn pl_constant_random(m: &RandomCovMoments, sigma: f64, theta_outer: &DMatrix<f64>) -> Result<f64> {
    Ok(m.eta_min() * random_bound_core(m, sigma, theta_outer)?)
}

pub fn lower_bound_u_last_random(m: &RandomCovMoments, sigma: f64, theta_outer: &DMatrix<f64>) -> Result<f64> {
    Ok(random_bound_core(m, sigma, theta_outer)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn gamma_isotropic() {
        let g = gamma_of(&DMatrix::identity(20, 20), 40).unwrap();
        assert_abs_diff_eq!(g.gamma, DMatrix::identity(20, 20) * 1.525, epsilon = 1e-14);
    }

    #[test]
    fn gamma_hand_case() {
        let g = gamma_of(&diag(&[1.0, 2.0]), 2).unwrap();
        assert_abs_diff_eq!(g.gamma, diag(&[3.0, 4.5]), epsilon = 1e-14);
    }

    #[test]
    fn gamma_large_n_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lam = linalg::random_spd(&mut rng, 4, 0.5, 2.0);
        let g = gamma_of(&lam, 1_000_000_000).unwrap();
        assert!((&g.gamma - &lam).norm() / lam.norm() < 3e-8);
    }

    #[test]
    fn gamma_rejects_non_spd() {
        assert!(gamma_of(&diag(&[1.0, 0.0]), 3).is_err());
        assert!(gamma_of(&diag(&[1.0, 1.0]), 0).is_err());
    }

    #[test]
    fn minimum_isotropic() {
        let g = gamma_infinite(&DMatrix::identity(3, 3)).unwrap();
        let m = global_min_fixed(&g);
        assert_abs_diff_eq!(m.u11, DMatrix::identity(3, 3) * 3f64.powf(-0.25), epsilon = 1e-14);
        assert_abs_diff_eq!(m.u_last, 3f64.powf(0.25), epsilon = 1e-14);
    }

    #[test]
    fn minimum_scalar() {
        let g = gamma_infinite(&diag(&[2.0])).unwrap();
        let m = global_min_fixed(&g);
        assert_abs_diff_eq!(m.u_last, 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.u11[(0, 0)], 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.u_last * m.u11[(0, 0)], 0.5, epsilon = 1e-15);
        // Full form: W_kq block [tr Γ⁻²]^{-1/4} Γ⁻¹, W_pv corner [tr Γ⁻²]^{1/4}.
        assert_abs_diff_eq!(m.w_kq[(0, 0)], 0.25f64.powf(-0.25) * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.w_pv[(1, 1)], 0.25f64.powf(0.25), epsilon = 1e-15);
    }

    #[test]
    fn loss_examples() {
        let g = gamma_infinite(&DMatrix::identity(2, 2)).unwrap();
        let r = ReducedParams::new(DMatrix::identity(2, 2), 1.0);
        assert_abs_diff_eq!(equiv_loss(&r, &g).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(min_loss_fixed(&g), -1.0, epsilon = 1e-15);
        assert_eq!(equiv_loss(&ReducedParams::zeros(2), &g).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = gamma_of(&linalg::random_spd(&mut rng, 3, 0.3, 2.0), 7).unwrap();
        let at_inverse = ReducedParams::new(g.gamma_inv(), 1.0);
        assert_relative_eq!(equiv_loss(&at_inverse, &g).unwrap(), min_loss_fixed(&g), max_relative = 1e-12);
    }

    #[test]
    fn pl_constant_examples() {
        let g = gamma_infinite(&diag(&[1.0])).unwrap();
        let theta = diag(&[1.0]);
        assert_abs_diff_eq!(pl_constant_fixed(&g, 1.0, &theta).unwrap(), 1.0, epsilon = 1e-15);

        let g = gamma_of(&DMatrix::identity(4, 4), 8).unwrap();
        let boundary = max_sigma_fixed(&g);
        let theta = DMatrix::identity(4, 4) / 2.0;
        assert!(matches!(
            pl_constant_fixed(&g, boundary, &theta),
            Err(Error::InitScaleOutOfRange { .. })
        ));
        assert!(pl_constant_fixed(&g, 0.5 * boundary, &theta).unwrap() > 0.0);
    }

    #[test]
    fn risk_scalar_case() {
        let g = gamma_infinite(&diag(&[1.0])).unwrap();
        let w = DVector::from_element(1, 1.0);
        let r = linear_task_risk(&w, 0.0, &g, 50).unwrap();
        assert_abs_diff_eq!(r.total, 2.0 / 50.0, epsilon = 1e-15);
        assert_eq!(r.term_n2, 0.0);

        // Finite N: the bracket is (1 + 2 + 1)/Γ² with Γ = 1 + 2/N.
        let n = 10usize;
        let g = gamma_of(&diag(&[1.0]), n).unwrap();
        let r = linear_task_risk(&w, 0.0, &g, 50).unwrap();
        let gm = 1.0 + 2.0 / n as f64;
        assert_abs_diff_eq!(r.term_n2, 4.0 / (gm * gm * 100.0), epsilon = 1e-15);
        assert_abs_diff_eq!(r.term_m, 2.0 / (gm * gm * 50.0), epsilon = 1e-15);
    }

    #[test]
    fn risk_zero_moments() {
        let g = gamma_of(&DMatrix::identity(3, 3), 5).unwrap();
        let r = risk_decomposition(&DVector::zeros(3), &DMatrix::zeros(3, 3), 0.0, &g, 10).unwrap();
        assert_eq!((r.term_m, r.term_n2, r.total), (0.0, 0.0, 0.0));
        assert!(risk_decomposition(&DVector::zeros(3), &diag(&[1.0, -1.0, 1.0]), 0.0, &g, 10).is_err());
    }

    #[test]
    fn noisy_sigma_adds_noise_block() {
        let lam = diag(&[1.0, 3.0]);
        let w = DVector::from_column_slice(&[0.5, -1.0]);
        let diff = linear_task_sigma(&w, &lam, 0.7) - linear_task_sigma(&w, &lam, 0.0);
        assert_abs_diff_eq!(diff, &lam * 0.49, epsilon = 1e-14);
    }

    #[test]
    fn noiseless_expansion_matches() {
        // (1/M){‖w‖²_{Γ⁻²Λ³} + tr(Γ⁻²Λ²)‖w‖²_Λ}
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lam = linalg::random_spd(&mut rng, 3, 0.4, 2.5);
        let g = gamma_of(&lam, 9).unwrap();
        let w = linalg::standard_normal_vector(&mut rng, 3);
        let m = 17;
        let r = linear_task_risk(&w, 0.0, &g, m).unwrap();
        let a = g.spectral(|l, gm| l * l * l / (gm * gm));
        let b = g.spectral(|l, gm| l * l / (gm * gm)).trace();
        let expected = (w.dot(&(a * &w)) + b * w.dot(&(&lam * &w))) / m as f64;
        assert_relative_eq!(r.term_m, expected, max_relative = 1e-12);
    }

    #[test]
    fn corollary_examples() {
        let c = corollary_bound(&DMatrix::identity(2, 2), Some(10)).unwrap();
        assert_abs_diff_eq!(c.eta, 0.18, epsilon = 1e-15);
        let c = corollary_bound(&diag(&[2.5]), Some(1)).unwrap();
        assert_abs_diff_eq!(c.eta, 4.0 * 2.5, epsilon = 1e-14);
        let c = corollary_bound(&DMatrix::identity(20, 20), Some(5)).unwrap();
        assert_abs_diff_eq!(c.m_of_eps(0.1), 4200.0, epsilon = 1e-9);
    }

    #[test]
    fn corollary_bounds_averaged_risk() {
        let lam = DMatrix::identity(2, 2);
        let c = corollary_bound(&lam, Some(10)).unwrap();
        let g = gamma_of(&lam, 10).unwrap();
        for m in [5, 50, 500] {
            let r = gaussian_task_risk(0.0, &g, m).unwrap();
            assert!(r.excess() <= c.eta + 3.0 * 2.0 / m as f64);
        }
    }

    #[test]
    fn random_reduces_to_fixed() {
        let vals = DVector::from_column_slice(&[0.5, 1.5, 2.0]);
        for n in [None, Some(6)] {
            let m = RandomCovMoments::point_mass(&vals, n).unwrap();
            let g = GammaOperator::build(&DMatrix::from_diagonal(&vals), n).unwrap();
            let rm = global_min_random(&m).unwrap();
            let fm = global_min_fixed(&g);
            assert_abs_diff_eq!(rm.reduced().u11, fm.u11, epsilon = 1e-12);
            assert_abs_diff_eq!(rm.u_last, fm.u_last, epsilon = 1e-12);
            assert_abs_diff_eq!(min_loss_random(&m), min_loss_fixed(&g), epsilon = 1e-12);
            let theta = DMatrix::identity(3, 3) / 3f64.sqrt();
            assert_abs_diff_eq!(
                max_sigma_random(&m, &theta).unwrap().powi(2),
                2.0 * (DMatrix::from_diagonal(&vals).pow(2) * &theta).trace()
                    / (3f64.sqrt() * g.gamma_op_norm() * vals.norm_squared()),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn exponential_one_third() {
        let ones = DVector::from_element(4, 1.0);
        let m = RandomCovMoments::from_raw(&ones, &(&ones * 2.0), &(&ones * 6.0), None).unwrap();
        let f = random_cov_limit_factor(&m, &ones).unwrap();
        assert_abs_diff_eq!(f, DMatrix::identity(4, 4) / 3.0, epsilon = 1e-15);
        let f = random_cov_limit_factor(&m, &(&ones * 3.0)).unwrap();
        assert_abs_diff_eq!(f, DMatrix::identity(4, 4), epsilon = 1e-15);

        let m1 = RandomCovMoments::from_raw(&ones.rows(0, 1).into(), &DVector::from_element(1, 2.0), &DVector::from_element(1, 6.0), None).unwrap();
        assert_abs_diff_eq!(min_loss_random(&m1), -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn mixed_law_coefficients() {
        // λ_1 ≡ 1, λ_2 ~ Exp(1), N = 4.
        let m1 = DVector::from_column_slice(&[1.0, 1.0]);
        let m2 = DVector::from_column_slice(&[1.0, 2.0]);
        let m3 = DVector::from_column_slice(&[1.0, 6.0]);
        let m = RandomCovMoments::from_raw(&m1, &m2, &m3, Some(4)).unwrap();
        // γ_1 = E[5/4 + (1/4)(1 + λ_2)] = 1.25 + 0.5; γ_2 = E[5/4 λ³ + (1/4)λ²(1 + λ)] = 7.5 + 0.5 + 1.5
        assert_abs_diff_eq!(m.gamma[0], 1.75, epsilon = 1e-15);
        assert_abs_diff_eq!(m.gamma[1], 9.5, epsilon = 1e-15);
        // ζ_12 = E[5/4 λ_2 + (1/4) λ_2 (1 + λ_2)] = 1.25 + 0.25 + 0.5
        assert_abs_diff_eq!(m.zeta[(0, 1)], 2.0, epsilon = 1e-15);
        // ζ_21 = E[5/4 λ_2² + (1/4) λ_2 (1 + λ_2)] = 2.5 + 0.75
        assert_abs_diff_eq!(m.zeta[(1, 0)], 3.25, epsilon = 1e-15);
    }

    #[test]
    fn random_product_and_balance() {
        let m = RandomCovMoments::from_raw(
            &DVector::from_column_slice(&[1.0, 0.5, 2.0]),
            &DVector::from_column_slice(&[2.0, 0.5, 5.0]),
            &DVector::from_column_slice(&[6.0, 0.75, 14.0]),
            Some(30),
        )
        .unwrap();
        let rm = global_min_random(&m).unwrap();
        let ratio = m.ratio();
        for i in 0..3 {
            assert_relative_eq!(rm.u_last * rm.u_diag[i], ratio[i], max_relative = 1e-12);
        }
        assert_relative_eq!(rm.u_last * rm.u_last, rm.u_diag.norm_squared(), max_relative = 1e-12);
        assert_abs_diff_eq!(excess_loss_random(&rm.reduced(), &m).unwrap(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(loss_random(&rm.reduced(), &m).unwrap(), min_loss_random(&m), max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn gamma_commutes_and_dominates(seed in any::<u64>(), d in 1usize..7, n in 1usize..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lam = linalg::random_spd(&mut rng, d, 0.1, 3.0);
            let g = gamma_of(&lam, n).unwrap();
            prop_assert!((&g.gamma * &lam - &lam * &g.gamma).norm() < 1e-12);
            prop_assert!(SymEigen::new(&(&g.gamma - &lam)).min() > 0.0);
        }

        #[test]
        fn minimum_is_stationary_and_balanced(seed in any::<u64>(), d in 1usize..7, n in 1usize..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = gamma_of(&linalg::random_spd(&mut rng, d, 0.1, 3.0), n).unwrap();
            let m = global_min_fixed(&g);
            let u = m.u_last;
            let lam = &g.lambda;
            let resid = &g.gamma * lam * &m.u11 * lam * (u * u) - lam * lam * u;
            prop_assert!(resid.norm() < 1e-10);
            prop_assert!((&m.u11 * u - g.gamma_inv()).norm() < 1e-14 * (1.0 + g.gamma_inv().norm()) * 10.0);
            prop_assert!((u * u - m.u11.norm_squared()).abs() < 1e-12 * u * u);
        }

        #[test]
        fn excess_identity(seed in any::<u64>(), d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = gamma_of(&linalg::random_spd(&mut rng, d, 0.2, 3.0), rng.random_range(1..50)).unwrap();
            let r = ReducedParams::new(
                DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)),
                rng.random_range(-2.0..2.0),
            );
            let lhs = equiv_loss(&r, &g).unwrap() - min_loss_fixed(&g);
            let rhs = excess_loss_fixed(&r, &g).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-3));
        }

        #[test]
        fn random_excess_identity(seed in any::<u64>(), d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1 = DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0));
            let m2 = m1.map(|v| v * v * rng.random_range(1.0..2.0));
            let m3 = m2.component_mul(&m1).map(|v| v * rng.random_range(1.0..2.0));
            let m = RandomCovMoments::from_raw(&m1, &m2, &m3, Some(rng.random_range(1..40))).unwrap();
            let r = ReducedParams::new(
                DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)),
                rng.random_range(-2.0..2.0),
            );
            let lhs = loss_random(&r, &m).unwrap() - min_loss_random(&m);
            let rhs = excess_loss_random(&r, &m).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-3));
        }
    }
}
