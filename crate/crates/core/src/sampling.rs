//! Prompt generation, Monte Carlo risk estimates, an online minibatch
//! trainer and brute-force checks of the Gaussian moment identities.
//!
//! Every prompt is drawn from its own ChaCha substream (`seed`, stream =
//! prompt index), so batches are identical however the work is scheduled.
//! Parallel reductions sum fixed-size chunks and then combine the chunk
//! totals in index order, which keeps floating-point results bit-identical
//! across thread counts.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::InitSpec;
use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};
use crate::model::{Embedding, ReducedParams};
use crate::theory::{MomentSource, RandomCovMoments};

const CHUNK: usize = 512;

/// Generator for substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a salt into a seed so that independent uses of one master seed do
/// not share streams.
pub fn salted(seed: u64, salt: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in salt.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        h ^= h >> 29;
    }
    h
}

/// `Σ_i f(i)` over `0..n`, computed in parallel with a deterministic
/// summation order.
pub fn parallel_sums<const K: usize>(n: usize, f: impl Fn(usize) -> [f64; K] + Sync) -> [f64; K] {
    let chunks: Vec<[f64; K]> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = [0.0; K];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let v = f(i);
                for k in 0..K {
                    acc[k] += v[k];
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; K];
    for c in chunks {
        for k in 0..K {
            total[k] += c[k];
        }
    }
    total
}

/// Law of one diagonal entry of a random covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoordinateLaw {
    PointMass { value: f64 },
    Exponential { rate: f64 },
    Uniform { low: f64, high: f64 },
    Scaled { base: Box<CoordinateLaw>, factor: f64 },
}

impl CoordinateLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            CoordinateLaw::PointMass { value } => *value > 0.0 && value.is_finite(),
            CoordinateLaw::Exponential { rate } => *rate > 0.0 && rate.is_finite(),
            CoordinateLaw::Uniform { low, high } => *low >= 0.0 && high > low && high.is_finite(),
            CoordinateLaw::Scaled { base, factor } => {
                base.validate()?;
                *factor > 0.0 && factor.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLaw(format!("{self} is not strictly positive with finite moments")))
        }
    }

    /// `E λ^k`.
    pub fn moment(&self, k: i32) -> f64 {
        match self {
            CoordinateLaw::PointMass { value } => value.powi(k),
            CoordinateLaw::Exponential { rate } => (1..=k).product::<i32>() as f64 / rate.powi(k),
            CoordinateLaw::Uniform { low, high } => {
                (high.powi(k + 1) - low.powi(k + 1)) / ((k + 1) as f64 * (high - low))
            }
            CoordinateLaw::Scaled { base, factor } => factor.powi(k) * base.moment(k),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            CoordinateLaw::PointMass { value } => *value,
            CoordinateLaw::Exponential { rate } => Exp::new(*rate).expect("validated rate").sample(rng),
            CoordinateLaw::Uniform { low, high } => rng.random_range(*low..*high),
            CoordinateLaw::Scaled { base, factor } => factor * base.sample(rng),
        }
    }

    pub fn is_point_mass(&self) -> bool {
        match self {
            CoordinateLaw::PointMass { .. } => true,
            CoordinateLaw::Scaled { base, .. } => base.is_point_mass(),
            _ => false,
        }
    }
}

impl fmt::Display for CoordinateLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoordinateLaw::PointMass { value } => write!(f, "point_mass({value})"),
            CoordinateLaw::Exponential { rate } => write!(f, "exponential({rate})"),
            CoordinateLaw::Uniform { low, high } => write!(f, "uniform({low}, {high})"),
            CoordinateLaw::Scaled { base, factor } => write!(f, "{factor}·{base}"),
        }
    }
}

/// Covariance of the covariates: one SPD matrix shared by all prompts, or a
/// fresh random diagonal per prompt.
#[derive(Debug, Clone)]
pub enum CovarianceSpec {
    Fixed(DMatrix<f64>),
    RandomDiagonal(Vec<CoordinateLaw>),
}

impl CovarianceSpec {
    pub fn identity(d: usize) -> Self {
        CovarianceSpec::Fixed(DMatrix::identity(d, d))
    }

    pub fn iid_diagonal(d: usize, law: CoordinateLaw) -> Self {
        CovarianceSpec::RandomDiagonal(vec![law; d])
    }

    pub fn dim(&self) -> usize {
        match self {
            CovarianceSpec::Fixed(m) => m.nrows(),
            CovarianceSpec::RandomDiagonal(laws) => laws.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CovarianceSpec::Fixed(m) => linalg::spd_eigen("covariance", m).map(|_| ()),
            CovarianceSpec::RandomDiagonal(laws) => {
                if laws.is_empty() {
                    return Err(Error::InvalidLaw("no coordinate laws given".into()));
                }
                laws.iter().try_for_each(CoordinateLaw::validate)
            }
        }
    }

    /// `E Λ_τ`.
    pub fn mean(&self) -> DMatrix<f64> {
        match self {
            CovarianceSpec::Fixed(m) => m.clone(),
            CovarianceSpec::RandomDiagonal(laws) => {
                DMatrix::from_diagonal(&DVector::from_iterator(laws.len(), laws.iter().map(|l| l.moment(1))))
            }
        }
    }

    /// Analytic flow coefficients for training prompts of length `n_ctx`.
    /// `E[‖Γ_τ‖_op ‖Λ_τ‖_F²]` has no closed form unless every coordinate is a
    /// point mass; it is then estimated from `init_samples` draws.
    pub fn random_cov_moments(&self, n_ctx: Option<usize>, init_samples: usize, seed: u64) -> Result<RandomCovMoments> {
        self.validate()?;
        let laws = match self {
            CovarianceSpec::RandomDiagonal(laws) => laws.clone(),
            CovarianceSpec::Fixed(m) => {
                if (m - DMatrix::from_diagonal(&m.diagonal())).abs().max() > 0.0 {
                    return Err(Error::InvalidMoments(
                        "flow coefficients need a diagonal covariance".into(),
                    ));
                }
                m.diagonal().iter().map(|&value| CoordinateLaw::PointMass { value }).collect()
            }
        };
        let d = laws.len();
        let raw = |k| DVector::from_iterator(d, laws.iter().map(|l| l.moment(k)));
        if laws.iter().all(CoordinateLaw::is_point_mass) {
            return RandomCovMoments::point_mass(&raw(1), n_ctx);
        }
        let mut m = RandomCovMoments::from_raw(&raw(1), &raw(2), &raw(3), n_ctx)?;
        let est = estimate_random_cov_moments(&laws, n_ctx, init_samples, seed)?;
        m.init_scale_moment = est.moments.init_scale_moment;
        Ok(m)
    }

    fn sampler(&self) -> Result<CovSampler> {
        self.validate()?;
        Ok(match self {
            CovarianceSpec::Fixed(m) => {
                let eig = SymEigen::new(m);
                CovSampler::Fixed {
                    lambda: Arc::new(m.clone()),
                    sqrt: eig.map(|v| v.max(0.0).sqrt()),
                }
            }
            CovarianceSpec::RandomDiagonal(laws) => CovSampler::Random(laws.clone()),
        })
    }
}

#[derive(Debug, Clone)]
enum CovSampler {
    Fixed { lambda: Arc<DMatrix<f64>>, sqrt: DMatrix<f64> },
    Random(Vec<CoordinateLaw>),
}

/// Covariance drawn for one prompt, with its square root.
enum PromptCov {
    Dense { lambda: Arc<DMatrix<f64>>, sqrt: DMatrix<f64> },
    Diagonal(DVector<f64>),
}

impl PromptCov {
    fn gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            PromptCov::Dense { sqrt, .. } => sqrt * linalg::standard_normal_vector(rng, sqrt.nrows()),
            PromptCov::Diagonal(l) => {
                DVector::from_iterator(l.len(), l.iter().map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal)))
            }
        }
    }

    fn matrix(&self) -> DMatrix<f64> {
        match self {
            PromptCov::Dense { lambda, .. } => (**lambda).clone(),
            PromptCov::Diagonal(l) => DMatrix::from_diagonal(l),
        }
    }

    fn diagonal(&self) -> DVector<f64> {
        match self {
            PromptCov::Dense { lambda, .. } => lambda.diagonal(),
            PromptCov::Diagonal(l) => l.clone(),
        }
    }
}

impl CovSampler {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> PromptCov {
        match self {
            CovSampler::Fixed { lambda, sqrt } => PromptCov::Dense {
                lambda: lambda.clone(),
                sqrt: sqrt.clone(),
            },
            CovSampler::Random(laws) => {
                PromptCov::Diagonal(DVector::from_iterator(laws.len(), laws.iter().map(|l| l.sample(rng))))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightLaw {
    GaussianIsotropic,
    Fixed { w: Vec<f64> },
}

pub type LabelFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelMap {
    NoiselessLinear,
    NoisyLinear { noise_sd: f64 },
    /// Arbitrary deterministic labels `y = f(x)`; not expressible in config
    /// files.
    #[serde(skip)]
    Custom(LabelFn),
}

impl fmt::Debug for LabelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelMap::NoiselessLinear => write!(f, "NoiselessLinear"),
            LabelMap::NoisyLinear { noise_sd } => write!(f, "NoisyLinear {{ noise_sd: {noise_sd} }}"),
            LabelMap::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub weight_law: WeightLaw,
    pub label_map: LabelMap,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            weight_law: WeightLaw::GaussianIsotropic,
            label_map: LabelMap::NoiselessLinear,
        }
    }
}

impl TaskSpec {
    pub fn noisy(noise_sd: f64) -> Self {
        Self {
            label_map: LabelMap::NoisyLinear { noise_sd },
            ..Self::default()
        }
    }

    pub fn noise_sd(&self) -> f64 {
        match self.label_map {
            LabelMap::NoisyLinear { noise_sd } => noise_sd,
            _ => 0.0,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let WeightLaw::Fixed { w } = &self.weight_law {
            if w.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "task weight",
                    index: 0,
                    expected: d,
                    found: w.len(),
                });
            }
        }
        if let LabelMap::NoisyLinear { noise_sd } = self.label_map {
            if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
                return Err(Error::config("task.label_map.noise_sd", format!("must be non-negative, got {noise_sd}")));
            }
        }
        Ok(())
    }
}

/// Where test queries come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QueryLaw {
    SameAsContext,
    /// Context law scaled by `factor`.
    Scaled { factor: f64 },
    /// `N(0, E Λ_τ)`, independent of the prompt's own covariance.
    MeanCovariance,
    /// Context law projected onto the orthogonal complement of the context
    /// covariates (needs fewer context points than dimensions to be nonzero).
    OrthogonalToContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub query: QueryLaw,
    /// Test covariates (context and query) are multiplied by this.
    pub covariate_scale: f64,
    pub notes: String,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            query: QueryLaw::SameAsContext,
            covariate_scale: 1.0,
            notes: String::new(),
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.covariate_scale > 0.0 && self.covariate_scale.is_finite()) {
            return Err(Error::config(
                "shift.covariate_scale",
                format!("must be positive, got {}", self.covariate_scale),
            ));
        }
        if let QueryLaw::Scaled { factor } = self.query {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::config("shift.query.factor", format!("must be positive, got {factor}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Prompt {
    pub xs: Vec<DVector<f64>>,
    pub ys: Vec<f64>,
    pub x_query: DVector<f64>,
    pub y_query: f64,
    pub w: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

impl Prompt {
    pub fn embedding(&self) -> Result<Embedding> {
        Embedding::build(&self.xs, &self.ys, &self.x_query)
    }

    /// `(1/M) Σ y_i x_i`.
    pub fn moment_vector(&self) -> DVector<f64> {
        let mut h = DVector::zeros(self.x_query.len());
        for (x, y) in self.xs.iter().zip(&self.ys) {
            h.axpy(*y, x, 1.0);
        }
        h / self.xs.len() as f64
    }

    /// The trained model's prediction; uses `u_last hᵀ U11 x_query` when the
    /// cross terms vanish.
    pub fn predict(&self, r: &ReducedParams) -> Result<f64> {
        if r.has_cross_terms() {
            return crate::model::predict_reduced(&self.embedding()?, r);
        }
        let h = self.moment_vector();
        Ok(r.u_last * h.dot(&(&r.u11 * &self.x_query)))
    }
}

/// Deterministic prompt generator: prompt `i` depends only on `(seed, i)`.
#[derive(Debug, Clone)]
pub struct PromptSampler {
    cov: CovSampler,
    mean_sqrt: DVector<f64>,
    task: TaskSpec,
    shift: ShiftSpec,
    d: usize,
    m_ctx: usize,
    seed: u64,
}

impl PromptSampler {
    pub fn new(cov: &CovarianceSpec, task: &TaskSpec, shift: &ShiftSpec, m_ctx: usize, seed: u64) -> Result<Self> {
        let d = cov.dim();
        if m_ctx == 0 {
            return Err(Error::EmptyContext);
        }
        task.validate(d)?;
        shift.validate()?;
        let mean = cov.mean();
        if shift.query == QueryLaw::MeanCovariance && !matches!(cov, CovarianceSpec::RandomDiagonal(_)) {
            // Same law as the context for a fixed covariance; handled uniformly
            // below through the mean's diagonal only when it is diagonal.
            if (&mean - DMatrix::from_diagonal(&mean.diagonal())).abs().max() > 0.0 {
                return Err(Error::config("shift.query", "mean_covariance needs a diagonal covariance"));
            }
        }
        Ok(Self {
            cov: cov.sampler()?,
            mean_sqrt: mean.diagonal().map(f64::sqrt),
            task: task.clone(),
            shift: shift.clone(),
            d,
            m_ctx,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn context_len(&self) -> usize {
        self.m_ctx
    }

    fn weight(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match &self.task.weight_law {
            WeightLaw::GaussianIsotropic => linalg::standard_normal_vector(rng, self.d),
            WeightLaw::Fixed { w } => DVector::from_column_slice(w),
        }
    }

    fn label(&self, w: &DVector<f64>, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> f64 {
        match &self.task.label_map {
            LabelMap::NoiselessLinear => w.dot(x),
            LabelMap::NoisyLinear { noise_sd } => {
                w.dot(x) + Normal::new(0.0, *noise_sd).expect("validated noise").sample(rng)
            }
            LabelMap::Custom(f) => f(x),
        }
    }

    fn query(&self, cov: &PromptCov, xs: &[DVector<f64>], rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self.shift.query {
            QueryLaw::SameAsContext => cov.gaussian(rng),
            QueryLaw::Scaled { factor } => cov.gaussian(rng) * factor,
            QueryLaw::MeanCovariance => DVector::from_iterator(
                self.d,
                self.mean_sqrt.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)),
            ),
            QueryLaw::OrthogonalToContext => {
                let mut q = cov.gaussian(rng);
                // Gram–Schmidt against the span of the context covariates.
                let mut basis: Vec<DVector<f64>> = Vec::new();
                for x in xs {
                    let mut v = x.clone();
                    for b in &basis {
                        v.axpy(-b.dot(&v), b, 1.0);
                    }
                    let n = v.norm();
                    if n > 1e-12 * (1.0 + x.norm()) {
                        basis.push(v / n);
                    }
                }
                for b in &basis {
                    q.axpy(-b.dot(&q), b, 1.0);
                }
                q
            }
        }
    }

    pub fn prompt(&self, index: u64) -> Prompt {
        let mut rng = substream(self.seed, index);
        let cov = self.cov.draw(&mut rng);
        let w = self.weight(&mut rng);
        let c = self.shift.covariate_scale;
        let mut xs = Vec::with_capacity(self.m_ctx);
        let mut ys = Vec::with_capacity(self.m_ctx);
        for _ in 0..self.m_ctx {
            let x = cov.gaussian(&mut rng) * c;
            ys.push(self.label(&w, &x, &mut rng));
            xs.push(x);
        }
        let x_query = self.query(&cov, &xs, &mut rng) * c;
        let y_query = self.label(&w, &x_query, &mut rng);
        Prompt {
            xs,
            ys,
            x_query,
            y_query,
            w,
            lambda: cov.matrix(),
        }
    }

    /// Prediction, target `⟨w, x_query⟩` and the prompt's covariance diagonal,
    /// without materializing the prompt.
    pub fn streamed(&self, index: u64, r: &ReducedParams) -> StreamedPrompt {
        let mut rng = substream(self.seed, index);
        let cov = self.cov.draw(&mut rng);
        let w = self.weight(&mut rng);
        let c = self.shift.covariate_scale;
        let mut h = DVector::zeros(self.d);
        let needs_context = self.shift.query == QueryLaw::OrthogonalToContext;
        let mut xs = Vec::new();
        for _ in 0..self.m_ctx {
            let x = cov.gaussian(&mut rng) * c;
            let y = self.label(&w, &x, &mut rng);
            h.axpy(y, &x, 1.0);
            if needs_context {
                xs.push(x);
            }
        }
        h /= self.m_ctx as f64;
        let x_query = self.query(&cov, &xs, &mut rng) * c;
        let y_query = self.label(&w, &x_query, &mut rng);
        StreamedPrompt {
            y_hat: r.u_last * h.dot(&(&r.u11 * &x_query)),
            y_query,
            signal: w.dot(&x_query),
            lambda_diag: cov.diagonal(),
        }
    }

    /// Several queries against one context: predictions and `⟨w, x_q⟩` per query.
    pub fn multi_query(&self, index: u64, r: &ReducedParams, queries: usize) -> Vec<(f64, f64)> {
        let mut rng = substream(self.seed, index);
        let cov = self.cov.draw(&mut rng);
        let w = self.weight(&mut rng);
        let c = self.shift.covariate_scale;
        let mut h = DVector::zeros(self.d);
        let mut xs = Vec::new();
        let needs_context = self.shift.query == QueryLaw::OrthogonalToContext;
        for _ in 0..self.m_ctx {
            let x = cov.gaussian(&mut rng) * c;
            let y = self.label(&w, &x, &mut rng);
            h.axpy(y, &x, 1.0);
            if needs_context {
                xs.push(x);
            }
        }
        h /= self.m_ctx as f64;
        let v = r.u11.transpose() * h * r.u_last;
        (0..queries)
            .map(|_| {
                let xq = self.query(&cov, &xs, &mut rng) * c;
                (v.dot(&xq), w.dot(&xq))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct StreamedPrompt {
    pub y_hat: f64,
    pub y_query: f64,
    pub signal: f64,
    pub lambda_diag: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct PromptBatch {
    pub prompts: Vec<Prompt>,
    pub seed: u64,
    pub d: usize,
    pub m_ctx: usize,
}

pub fn sample_prompts(
    cov: &CovarianceSpec,
    task: &TaskSpec,
    shift: &ShiftSpec,
    m_ctx: usize,
    batch: usize,
    seed: u64,
) -> Result<PromptBatch> {
    let sampler = PromptSampler::new(cov, task, shift, m_ctx, seed)?;
    let prompts = (0..batch as u64).into_par_iter().map(|i| sampler.prompt(i)).collect();
    Ok(PromptBatch {
        prompts,
        seed,
        d: cov.dim(),
        m_ctx,
    })
}

impl PromptBatch {
    /// One JSON object per line with keys `lambda, w, xs, ys, x_query, y_query`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for p in &self.prompts {
            let rec = serde_json::json!({
                "lambda": linalg::to_rows(&p.lambda),
                "w": p.w.as_slice(),
                "xs": p.xs.iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>(),
                "ys": p.ys,
                "x_query": p.x_query.as_slice(),
                "y_query": p.y_query,
            });
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Mean squared error without the ½ of the training loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

pub const RISK_CONVENTION: &str = "reported risks are E(y_hat - y)^2; the training loss carries an extra factor 1/2";

fn risk_from_sums(s: [f64; 2], n: usize) -> RiskEstimate {
    let nf = n as f64;
    let mean = s[0] / nf;
    let var = (s[1] / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    RiskEstimate {
        mean,
        stderr: (var / nf).sqrt(),
        samples: n,
    }
}

pub fn empirical_risk(batch: &PromptBatch, r: &ReducedParams) -> Result<RiskEstimate> {
    if batch.prompts.is_empty() {
        return Err(Error::EmptyContext);
    }
    let errs: Vec<f64> = batch
        .prompts
        .par_iter()
        .map(|p| p.predict(r).map(|y| (y - p.y_query).powi(2)))
        .collect::<Result<_>>()?;
    let s = errs.iter().fold([0.0, 0.0], |a, e| [a[0] + e, a[1] + e * e]);
    Ok(risk_from_sums(s, errs.len()))
}

/// Risk over `count` prompts of `sampler` without storing them.
pub fn streaming_risk(sampler: &PromptSampler, r: &ReducedParams, count: usize) -> RiskEstimate {
    let s = parallel_sums(count, |i| {
        let p = sampler.streamed(i as u64, r);
        let e = (p.y_hat - p.y_query).powi(2);
        [e, e * e]
    });
    risk_from_sums(s, count)
}

/// Least-squares slope through the origin of predictions on a signal,
/// with a standard error clustered by prompt.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub prompts: usize,
    pub queries_per_prompt: usize,
}

impl SlopeFit {
    /// From per-prompt sums `[Σ ŷz, Σ z², (Σ ŷz)², Σ ŷz · Σ z², (Σ z²)²]`.
    pub fn from_sums(s: [f64; 5], prompts: usize, queries_per_prompt: usize) -> Self {
        let slope = s[0] / s[1];
        let score = s[2] - 2.0 * slope * s[3] + slope * slope * s[4];
        Self {
            slope,
            stderr: score.max(0.0).sqrt() / s[1],
            prompts,
            queries_per_prompt,
        }
    }
}

/// Regresses the prediction on `⟨w, x_query⟩` over `prompts` contexts with
/// `queries` queries each.
pub fn prediction_slope(sampler: &PromptSampler, r: &ReducedParams, prompts: usize, queries: usize) -> SlopeFit {
    let s = parallel_sums(prompts, |i| {
        let (mut a, mut b) = (0.0, 0.0);
        for (yh, z) in sampler.multi_query(i as u64, r, queries) {
            a += yh * z;
            b += z * z;
        }
        [a, b, a * a, a * b, b * b]
    });
    SlopeFit::from_sums(s, prompts, queries)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdOutcome {
    pub u11: DMatrix<f64>,
    pub u_last: f64,
    /// Training loss `½ mean (ŷ − y)²` of each step's minibatch.
    pub losses: Vec<f64>,
}

impl SgdOutcome {
    pub fn params(&self) -> ReducedParams {
        ReducedParams::new(self.u11.clone(), self.u_last)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Online minibatch gradient descent on the empirical loss, one fresh batch
/// of training prompts (length `n_ctx`) per step. Only `U11` and `u_last`
/// move; the cross terms stay at zero.
pub fn sgd_train(
    cov: &CovarianceSpec,
    task: &TaskSpec,
    n_ctx: usize,
    cfg: SgdConfig,
    init: &InitSpec,
    seed: u64,
) -> Result<SgdOutcome> {
    let d = cov.dim();
    if init.dim() != d {
        return Err(Error::Shape {
            what: "init direction",
            expected: (d, d),
            found: (init.dim(), init.dim()),
        });
    }
    if cfg.batch == 0 {
        return Err(Error::config("sgd.batch", "must be at least 1"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("sgd.lr", format!("must be non-negative, got {}", cfg.lr)));
    }
    let sampler = PromptSampler::new(cov, task, &ShiftSpec::default(), n_ctx, seed)?;
    let start = init.initial_state();
    let mut u11 = start.u11;
    let mut u = start.u_last;
    let mut losses = Vec::with_capacity(cfg.steps);
    let nparam = d * d + 2;
    for step in 0..cfg.steps {
        let base = (step * cfg.batch) as u64;
        let (u11_ref, u_ref) = (&u11, u);
        let sums: Vec<f64> = (0..cfg.batch.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; nparam];
                for j in c * CHUNK..((c + 1) * CHUNK).min(cfg.batch) {
                    let p = sampler.prompt(base + j as u64);
                    let h = p.moment_vector();
                    let ux = u11_ref * &p.x_query;
                    let hux = h.dot(&ux);
                    let resid = u_ref * hux - p.y_query;
                    // ∂ŷ/∂U11 = u h x_qᵀ, ∂ŷ/∂u = hᵀ U11 x_q.
                    for col in 0..d {
                        for row in 0..d {
                            acc[col * d + row] += resid * u_ref * h[row] * p.x_query[col];
                        }
                    }
                    acc[d * d] += resid * hux;
                    acc[d * d + 1] += 0.5 * resid * resid;
                }
                acc
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(vec![0.0; nparam], |mut a, c| {
                for k in 0..nparam {
                    a[k] += c[k];
                }
                a
            });
        let b = cfg.batch as f64;
        let loss = sums[d * d + 1] / b;
        if !(loss.is_finite() && loss <= 1e6) {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        let grad = DMatrix::from_column_slice(d, d, &sums[..d * d]) / b;
        u11 -= grad * cfg.lr;
        u -= cfg.lr * sums[d * d] / b;
    }
    Ok(SgdOutcome { u11, u_last: u, losses })
}

/// Entrywise comparison of a Monte Carlo mean with its closed form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub estimate: Vec<Vec<f64>>,
    pub closed_form: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub max_abs_dev: f64,
    /// Largest `|estimate − closed form| / stderr` over entries.
    pub max_z: f64,
    pub samples: usize,
}

impl OracleReport {
    pub fn within(&self, z: f64) -> bool {
        self.max_z < z
    }
}

fn matrix_oracle(
    d: usize,
    samples: usize,
    closed: DMatrix<f64>,
    draw: impl Fn(u64) -> DMatrix<f64> + Sync,
) -> OracleReport {
    let n = d * d;
    let sums: Vec<Vec<f64>> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; 2 * n];
            for i in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let m = draw(i as u64);
                for (k, v) in m.iter().enumerate() {
                    acc[k] += v;
                    acc[n + k] += v * v;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; 2 * n];
    for c in sums {
        for k in 0..2 * n {
            total[k] += c[k];
        }
    }
    let sf = samples as f64;
    let est = DMatrix::from_column_slice(d, d, &total[..n]) / sf;
    let se = DMatrix::from_fn(d, d, |i, j| {
        let k = j * d + i;
        let mean = total[k] / sf;
        ((total[n + k] / sf - mean * mean).max(0.0) / (sf - 1.0)).sqrt()
    });
    let mut max_z: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for k in 0..n {
        let dev = (est[k] - closed[k]).abs();
        max_abs = max_abs.max(dev);
        let z = if se[k] > 0.0 {
            dev / se[k]
        } else if dev <= 1e-12 * (1.0 + closed[k].abs()) {
            0.0
        } else {
            f64::INFINITY
        };
        max_z = max_z.max(z);
    }
    OracleReport {
        estimate: linalg::to_rows(&est),
        closed_form: linalg::to_rows(&closed),
        stderr: linalg::to_rows(&se),
        max_abs_dev: max_abs,
        max_z,
        samples,
    }
}

/// `E[X Xᵀ A X Xᵀ]` for `X ~ N(0, Λ)` against `Λ(A + Aᵀ)Λ + tr(AΛ)Λ`.
pub fn fourth_moment_oracle(lambda: &DMatrix<f64>, a: &DMatrix<f64>, samples: usize, seed: u64) -> Result<OracleReport> {
    let d = lambda.nrows();
    linalg::check_square("A", a, d)?;
    let sqrt = linalg::spd_eigen("covariance", lambda)?.map(f64::sqrt);
    if samples < 2 {
        return Err(Error::config("samples", "need at least 2 samples"));
    }
    let closed = lambda * (a + a.transpose()) * lambda + lambda * (a * lambda).trace();
    Ok(matrix_oracle(d, samples, closed, |i| {
        let mut rng = substream(seed, i);
        let x = &sqrt * linalg::standard_normal_vector(&mut rng, d);
        &x * x.transpose() * x.dot(&(a * &x))
    }))
}

/// `E[Λ̂²]` for `Λ̂ = (1/N) Σ x_i x_iᵀ` against `(N+1)/N Λ² + tr(Λ)/N Λ`.
pub fn gamma_moment_oracle(lambda: &DMatrix<f64>, n_ctx: usize, samples: usize, seed: u64) -> Result<OracleReport> {
    let d = lambda.nrows();
    let sqrt = linalg::spd_eigen("covariance", lambda)?.map(f64::sqrt);
    if n_ctx == 0 {
        return Err(Error::EmptyContext);
    }
    if samples < 2 {
        return Err(Error::config("samples", "need at least 2 samples"));
    }
    let nf = n_ctx as f64;
    let closed = lambda * lambda * ((nf + 1.0) / nf) + lambda * (lambda.trace() / nf);
    Ok(matrix_oracle(d, samples, closed, |i| {
        let mut rng = substream(seed, i);
        let mut hat = DMatrix::zeros(d, d);
        for _ in 0..n_ctx {
            let x = &sqrt * linalg::standard_normal_vector(&mut rng, d);
            hat += &x * x.transpose();
        }
        hat /= nf;
        &hat * &hat
    }))
}

/// Monte Carlo flow coefficients, with standard errors of `γ`, `ξ`, `ζ`.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub moments: RandomCovMoments,
    pub gamma_stderr: DVector<f64>,
    pub xi_stderr: DVector<f64>,
    pub zeta_stderr: DMatrix<f64>,
}

/// Estimates `γ_i`, `ξ_i`, `ζ_ij` and `E[‖Γ_τ‖_op ‖Λ_τ‖_F²]` directly from
/// draws of `Λ_τ`, without assuming independent coordinates.
pub fn estimate_random_cov_moments(
    laws: &[CoordinateLaw],
    n_ctx: Option<usize>,
    samples: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    laws.iter().try_for_each(CoordinateLaw::validate)?;
    if samples < 2 {
        return Err(Error::config("samples", "need at least 2 samples"));
    }
    let d = laws.len();
    let inv_n = n_ctx.map_or(0.0, |n| 1.0 / n as f64);
    // Per draw: λ (d), λ² (d), λ³ (d), ζ/γ matrix (d²), init-scale term (1); plus squares.
    let width = 3 * d + d * d + 1;
    let sums: Vec<Vec<f64>> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; 2 * width];
            let mut v = vec![0.0; width];
            for i in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let mut rng = substream(seed, i as u64);
                let l: Vec<f64> = laws.iter().map(|law| law.sample(&mut rng)).collect();
                let tr: f64 = l.iter().sum();
                for k in 0..d {
                    v[k] = l[k];
                    v[d + k] = l[k] * l[k];
                    v[2 * d + k] = l[k].powi(3);
                }
                for a in 0..d {
                    for b in 0..d {
                        // Coefficient of u_ab² in tr(Γ Λ U Λ Uᵀ): Γ_a λ_a λ_b.
                        let gamma_a = (1.0 + inv_n) * l[a] + tr * inv_n;
                        v[3 * d + b * d + a] = gamma_a * l[a] * l[b];
                    }
                }
                let gamma_op = l.iter().map(|x| (1.0 + inv_n) * x + tr * inv_n).fold(0.0, f64::max);
                v[width - 1] = gamma_op * l.iter().map(|x| x * x).sum::<f64>();
                for k in 0..width {
                    acc[k] += v[k];
                    acc[width + k] += v[k] * v[k];
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; 2 * width];
    for c in sums {
        for k in 0..2 * width {
            total[k] += c[k];
        }
    }
    let sf = samples as f64;
    let mean = |k: usize| total[k] / sf;
    let se = |k: usize| ((total[width + k] / sf - mean(k) * mean(k)).max(0.0) / (sf - 1.0)).sqrt();
    let e_lambda = DVector::from_fn(d, |k, _| mean(k));
    let e_lambda2 = DVector::from_fn(d, |k, _| mean(d + k));
    let e_lambda3 = DVector::from_fn(d, |k, _| mean(2 * d + k));
    let zeta = DMatrix::from_fn(d, d, |a, b| mean(3 * d + b * d + a));
    let zeta_stderr = DMatrix::from_fn(d, d, |a, b| se(3 * d + b * d + a));
    let gamma = zeta.diagonal();
    let max_stderr = zeta_stderr.max().max((0..d).map(|k| se(d + k)).fold(0.0, f64::max));
    let moments = RandomCovMoments {
        e_lambda,
        e_lambda2: e_lambda2.clone(),
        e_lambda3,
        e_gamma_lambda2: gamma.clone(),
        gamma,
        xi: e_lambda2,
        zeta,
        n_ctx,
        source: MomentSource::MonteCarlo { samples, max_stderr },
        init_scale_moment: Some(mean(width - 1)),
    };
    Ok(MomentEstimate {
        gamma_stderr: zeta_stderr.diagonal(),
        xi_stderr: DVector::from_fn(d, |k, _| se(d + k)),
        zeta_stderr,
        moments,
    })
}
