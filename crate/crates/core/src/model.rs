//! The single-layer linear self-attention network.
//!
//! A prompt `(x_1, y_1, ..., x_N, y_N, x_query)` is embedded as the
//! `(d+1) × (N+1)` matrix whose columns are `(x_i, y_i)` followed by
//! `(x_query, 0)`. The network output is
//! `E + W_pv E (Eᵀ W_kq E) / ρ` and the prediction is its bottom-right entry.
//!
//! Only the last row of `W_pv` and the first `d` columns of `W_kq` reach the
//! prediction, which gives the reduced parameterization
//! [`ReducedParams`]: `U11` (upper-left block of `W_kq`), `u21` (bottom-left
//! row of `W_kq`), `u12` (bottom-left row of `W_pv`) and `u_last` (the
//! bottom-right entry of `W_pv`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEigen};

/// Largest covariate dimension for which the `(d+1)² × (d+1)²` quadratic
/// matrix is materialized.
pub const MAX_QUADRATIC_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    matrix: DMatrix<f64>,
    d: usize,
    n_ctx: usize,
    rho: f64,
}

impl Embedding {
    /// Stacks `(x_i, y_i)` columns and a final `(x_query, 0)` column; the
    /// normalization is the context length.
    pub fn build(xs: &[DVector<f64>], ys: &[f64], x_query: &DVector<f64>) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::EmptyContext);
        }
        if ys.len() != xs.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                index: ys.len().min(xs.len()),
                expected: xs.len(),
                found: ys.len(),
            });
        }
        let d = x_query.len();
        if let Some((i, x)) = xs.iter().enumerate().find(|(_, x)| x.len() != d) {
            return Err(Error::DimensionMismatch {
                what: "covariate",
                index: i,
                expected: d,
                found: x.len(),
            });
        }
        let n = xs.len();
        let mut matrix = DMatrix::zeros(d + 1, n + 1);
        for (j, (x, y)) in xs.iter().zip(ys).enumerate() {
            matrix.view_mut((0, j), (d, 1)).copy_from(x);
            matrix[(d, j)] = *y;
        }
        matrix.view_mut((0, n), (d, 1)).copy_from(x_query);
        Ok(Self {
            matrix,
            d,
            n_ctx: n,
            rho: n as f64,
        })
    }

    /// Same embedding with a different normalization factor.
    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn context_len(&self) -> usize {
        self.n_ctx
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn x_query(&self) -> DVector<f64> {
        self.matrix.column(self.n_ctx).rows(0, self.d).into_owned()
    }

    /// `E Eᵀ / ρ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.matrix * self.matrix.transpose() / self.rho
    }
}

/// Full parameter pair `(W_kq, W_pv)`, both `(d+1) × (d+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaParams {
    pub w_kq: DMatrix<f64>,
    pub w_pv: DMatrix<f64>,
}

impl LsaParams {
    pub fn new(w_kq: DMatrix<f64>, w_pv: DMatrix<f64>) -> Result<Self> {
        let n = w_kq.nrows();
        linalg::check_square("W_kq", &w_kq, n)?;
        linalg::check_square("W_pv", &w_pv, n)?;
        Ok(Self { w_kq, w_pv })
    }

    pub fn dim(&self) -> usize {
        self.w_kq.nrows() - 1
    }

    /// Embeds reduced parameters, leaving every entry that cannot affect the
    /// prediction at zero.
    pub fn from_reduced(r: &ReducedParams) -> Self {
        let d = r.dim();
        let mut w_kq = DMatrix::zeros(d + 1, d + 1);
        let mut w_pv = DMatrix::zeros(d + 1, d + 1);
        w_kq.view_mut((0, 0), (d, d)).copy_from(&r.u11);
        w_kq.view_mut((d, 0), (1, d)).copy_from(&r.u21.transpose());
        w_pv.view_mut((d, 0), (1, d)).copy_from(&r.u12.transpose());
        w_pv[(d, d)] = r.u_last;
        Self { w_kq, w_pv }
    }

    /// The blocks that the prediction depends on.
    pub fn reduced(&self) -> ReducedParams {
        let d = self.dim();
        ReducedParams {
            u11: self.w_kq.view((0, 0), (d, d)).into_owned(),
            u_last: self.w_pv[(d, d)],
            u12: self.w_pv.row(d).columns(0, d).transpose(),
            u21: self.w_kq.row(d).columns(0, d).transpose(),
        }
    }

    /// `(c⁻¹ W_kq, c W_pv)`; leaves predictions unchanged for `c ≠ 0`.
    pub fn rescaled(&self, c: f64) -> Self {
        Self {
            w_kq: &self.w_kq / c,
            w_pv: &self.w_pv * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedParams {
    pub u11: DMatrix<f64>,
    pub u_last: f64,
    pub u12: DVector<f64>,
    pub u21: DVector<f64>,
}

impl ReducedParams {
    /// Reduced parameters with the cross terms `u12`, `u21` at zero.
    pub fn new(u11: DMatrix<f64>, u_last: f64) -> Self {
        let d = u11.nrows();
        Self {
            u11,
            u_last,
            u12: DVector::zeros(d),
            u21: DVector::zeros(d),
        }
    }

    pub fn with_cross_terms(mut self, u12: DVector<f64>, u21: DVector<f64>) -> Self {
        self.u12 = u12;
        self.u21 = u21;
        self
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(DMatrix::zeros(d, d), 0.0)
    }

    pub fn dim(&self) -> usize {
        self.u11.nrows()
    }

    pub fn has_cross_terms(&self) -> bool {
        self.u12.iter().chain(self.u21.iter()).any(|v| *v != 0.0)
    }

    /// `U = [[U11, u12], [u21ᵀ, u_last]]`.
    pub fn u_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut u = DMatrix::zeros(d + 1, d + 1);
        u.view_mut((0, 0), (d, d)).copy_from(&self.u11);
        u.view_mut((0, d), (d, 1)).copy_from(&self.u12);
        u.view_mut((d, 0), (1, d)).copy_from(&self.u21.transpose());
        u[(d, d)] = self.u_last;
        u
    }

    /// `u_last · U11`, the matrix the trained model applies to the query.
    pub fn product(&self) -> DMatrix<f64> {
        &self.u11 * self.u_last
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d || self.u11.ncols() != d || self.u12.len() != d || self.u21.len() != d {
            return Err(Error::Shape {
                what: "reduced parameters",
                expected: (d, d),
                found: (self.u11.nrows(), self.u11.ncols()),
            });
        }
        Ok(())
    }
}

/// Bottom-right entry of the full network output.
pub fn predict_full(e: &Embedding, p: &LsaParams) -> Result<f64> {
    let d = e.dim();
    if p.dim() != d {
        return Err(Error::Shape {
            what: "LSA parameters",
            expected: (d + 1, d + 1),
            found: (p.w_kq.nrows(), p.w_kq.ncols()),
        });
    }
    let em = e.matrix();
    let attention = em.transpose() * &p.w_kq * em / e.rho();
    let out = em + &p.w_pv * em * attention;
    Ok(out[(d, e.context_len())])
}

/// `(u12ᵀ, u_last) · (E Eᵀ/ρ) · [U11; u21ᵀ] · x_query`.
pub fn predict_reduced(e: &Embedding, r: &ReducedParams) -> Result<f64> {
    let d = e.dim();
    r.check_dim(d)?;
    let g = e.gram();
    let mut left = DVector::zeros(d + 1);
    left.rows_mut(0, d).copy_from(&r.u12);
    left[d] = r.u_last;
    let xq = e.x_query();
    let mut right = DVector::zeros(d + 1);
    right.rows_mut(0, d).copy_from(&(&r.u11 * &xq));
    right[d] = r.u21.dot(&xq);
    Ok(left.dot(&(g * right)))
}

/// Border matrix `[[0, x_q], [x_qᵀ, 0]]`.
pub fn query_border_matrix(x_query: &DVector<f64>) -> DMatrix<f64> {
    let d = x_query.len();
    let mut x = DMatrix::zeros(d + 1, d + 1);
    x.view_mut((0, d), (d, 1)).copy_from(x_query);
    x.view_mut((d, 0), (1, d)).copy_from(&x_query.transpose());
    x
}

/// The prediction as a quadratic form `vec(U)ᵀ H vec(U)` with
/// `H = ½ X ⊗ (E Eᵀ/ρ)`.
#[derive(Debug, Clone)]
pub struct QuadraticView {
    pub h: DMatrix<f64>,
    pub x_tau: DMatrix<f64>,
}

impl QuadraticView {
    pub fn new(e: &Embedding) -> Result<Self> {
        Self::with_cap(e, MAX_QUADRATIC_DIM)
    }

    pub fn with_cap(e: &Embedding, cap: usize) -> Result<Self> {
        let d = e.dim();
        if d > cap {
            return Err(Error::QuadraticTooLarge { d, cap });
        }
        let x_tau = query_border_matrix(&e.x_query());
        let h = linalg::kron(&x_tau, &e.gram()) * 0.5;
        Ok(Self { h, x_tau })
    }

    pub fn evaluate(&self, r: &ReducedParams) -> Result<f64> {
        let d = self.x_tau.nrows() - 1;
        r.check_dim(d)?;
        let u = linalg::vectorize(&r.u_matrix());
        Ok(u.dot(&(&self.h * &u)))
    }
}

pub fn quadratic_form(e: &Embedding, r: &ReducedParams) -> Result<f64> {
    QuadraticView::new(e)?.evaluate(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EigenWitness {
    pub negative_count: usize,
    /// The query was zero, so the border matrix vanishes.
    pub degenerate: bool,
}

/// Counts strictly negative eigenvalues of the border matrix; the
/// characteristic polynomial is `μ^{d-1}(μ² − ‖x_q‖²)`, so exactly one for a
/// nonzero query.
pub fn negative_eigen_witness(x_tau: &DMatrix<f64>) -> EigenWitness {
    let scale = x_tau.abs().max();
    if scale == 0.0 {
        return EigenWitness {
            negative_count: 0,
            degenerate: true,
        };
    }
    let eig = SymEigen::new(x_tau);
    let negative_count = eig.values.iter().filter(|&&v| v < -1e-12 * scale).count();
    EigenWitness {
        negative_count,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn random_instance(rng: &mut ChaCha8Rng, d: usize, n: usize) -> (Embedding, ReducedParams) {
        let xs: Vec<_> = (0..n).map(|_| linalg::standard_normal_vector(rng, d)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xq = linalg::standard_normal_vector(rng, d);
        let e = Embedding::build(&xs, &ys, &xq).unwrap();
        let r = ReducedParams::new(
            DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)),
            rng.random_range(-2.0..2.0),
        );
        (e, r)
    }

    #[test]
    fn embedding_layout() {
        let e = Embedding::build(&[v(&[2.0])], &[3.0], &v(&[5.0])).unwrap();
        assert_eq!(e.matrix(), &DMatrix::from_row_slice(2, 2, &[2.0, 5.0, 3.0, 0.0]));
        assert_eq!(e.rho(), 1.0);
    }

    #[test]
    fn embedding_rejects_empty_and_ragged() {
        let err = Embedding::build(&[], &[], &v(&[0.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("empty context"));
        let err = Embedding::build(&[v(&[1.0, 2.0]), v(&[1.0])], &[0.0, 0.0], &v(&[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { index: 1, .. }));
    }

    #[test]
    fn query_label_slot_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (e, _) = random_instance(&mut rng, 2, 7);
        assert_eq!(e.matrix()[(2, 7)], 0.0);
    }

    #[test]
    fn zero_value_matrix_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (e, _) = random_instance(&mut rng, 3, 5);
        let p = LsaParams::new(DMatrix::from_element(4, 4, 0.7), DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(predict_full(&e, &p).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_two_by_two() {
        // E = [[1,1],[1,0]], E Eᵀ = [[2,1],[1,1]]; the prediction picks (EEᵀ)[1,0] = 1.
        let e = Embedding::build(&[v(&[1.0])], &[1.0], &v(&[1.0])).unwrap();
        let mut w_kq = DMatrix::zeros(2, 2);
        w_kq[(0, 0)] = 1.0;
        let mut w_pv = DMatrix::zeros(2, 2);
        w_pv[(1, 1)] = 1.0;
        let p = LsaParams::new(w_kq, w_pv).unwrap();
        assert_abs_diff_eq!(predict_full(&e, &p).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn reduced_prediction_at_trained_point() {
        let e = Embedding::build(&[v(&[1.0])], &[2.0], &v(&[3.0])).unwrap();
        let r = ReducedParams::new(DMatrix::from_element(1, 1, 1.0), 1.0);
        assert_abs_diff_eq!(predict_reduced(&e, &r).unwrap(), 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(quadratic_form(&e, &r).unwrap(), 6.0, epsilon = 1e-14);
        let silent = ReducedParams::new(DMatrix::from_element(1, 1, 4.0), 0.0);
        assert_eq!(predict_reduced(&e, &silent).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_form_zero_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (e, _) = random_instance(&mut rng, 3, 4);
        assert_eq!(quadratic_form(&e, &ReducedParams::zeros(3)).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_form_refuses_large_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (e, r) = random_instance(&mut rng, 9, 3);
        assert!(matches!(
            quadratic_form(&e, &r),
            Err(Error::QuadraticTooLarge { d: 9, cap: 8 })
        ));
        assert!(QuadraticView::with_cap(&e, 9).unwrap().evaluate(&r).is_ok());
    }

    #[test]
    fn border_matrix_witness() {
        let w = negative_eigen_witness(&query_border_matrix(&v(&[3.0, 4.0])));
        assert_eq!(w, EigenWitness { negative_count: 1, degenerate: false });
        let eig = SymEigen::new(&query_border_matrix(&v(&[3.0, 4.0])));
        let mut vals: Vec<f64> = eig.values.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(vals[0], -5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[2], 5.0, epsilon = 1e-12);

        let zero = negative_eigen_witness(&query_border_matrix(&v(&[0.0, 0.0])));
        assert_eq!(zero, EigenWitness { negative_count: 0, degenerate: true });

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xq = linalg::standard_normal_vector(&mut rng, 5);
        assert_eq!(negative_eigen_witness(&query_border_matrix(&xq)).negative_count, 1);
    }

    #[test]
    fn quadratic_matrix_has_many_negative_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (e, _) = random_instance(&mut rng, 3, 6);
        let h = QuadraticView::new(&e).unwrap().h;
        let neg = SymEigen::new(&h).values.iter().filter(|&&x| x < -1e-12).count();
        assert!(neg >= 4, "only {neg} negative eigenvalues");
    }

    #[test]
    fn reduced_roundtrip_through_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, r) = random_instance(&mut rng, 3, 2);
        let r = r.with_cross_terms(v(&[0.1, -0.2, 0.3]), v(&[0.5, 0.0, -1.0]));
        assert_eq!(LsaParams::from_reduced(&r).reduced(), r);
    }

    proptest! {
        #[test]
        fn three_routes_agree(seed in any::<u64>(), d in 1usize..6, n in 1usize..9, cross in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (e, mut r) = random_instance(&mut rng, d, n);
            if cross {
                r = r.with_cross_terms(
                    linalg::standard_normal_vector(&mut rng, d),
                    linalg::standard_normal_vector(&mut rng, d),
                );
            }
            let full = predict_full(&e, &LsaParams::from_reduced(&r)).unwrap();
            let reduced = predict_reduced(&e, &r).unwrap();
            let quad = quadratic_form(&e, &r).unwrap();
            let scale = 1.0 + full.abs();
            prop_assert!((full - reduced).abs() <= 1e-12 * scale);
            prop_assert!((full - quad).abs() <= 1e-12 * scale);
        }

        #[test]
        fn rescaling_symmetry(seed in any::<u64>(), c in prop_oneof![-5.0..-0.2f64, 0.2..5.0f64]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (e, _) = random_instance(&mut rng, 3, 5);
            let p = LsaParams::new(
                DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)),
                DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)),
            ).unwrap();
            let a = predict_full(&e, &p).unwrap();
            let b = predict_full(&e, &p.rescaled(c)).unwrap();
            prop_assert!((a - b).abs() <= 1e-11 * (1.0 + a.abs()));
        }

        // With the query's own (1/N) x_q x_qᵀ contribution removed, the
        // prediction is linear in x_query.
        #[test]
        fn linear_in_query_after_removing_self_term(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let n = 6;
            let xs: Vec<_> = (0..n).map(|_| linalg::standard_normal_vector(&mut rng, d)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = ReducedParams::new(DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)), 0.8)
                .with_cross_terms(linalg::standard_normal_vector(&mut rng, d), linalg::standard_normal_vector(&mut rng, d));
            let x1 = linalg::standard_normal_vector(&mut rng, d);
            let x2 = linalg::standard_normal_vector(&mut rng, d);
            let context_only = |xq: &DVector<f64>| {
                let e = Embedding::build(&xs, &ys, xq).unwrap();
                let self_term = {
                    let mut col = DVector::zeros(d + 1);
                    col.rows_mut(0, d).copy_from(xq);
                    &col * col.transpose() / n as f64
                };
                let g = e.gram() - self_term;
                let mut left = DVector::zeros(d + 1);
                left.rows_mut(0, d).copy_from(&r.u12);
                left[d] = r.u_last;
                let mut right = DVector::zeros(d + 1);
                right.rows_mut(0, d).copy_from(&(&r.u11 * xq));
                right[d] = r.u21.dot(xq);
                (predict_reduced(&e, &r).unwrap(), left.dot(&(g * right)))
            };
            let (_, f1) = context_only(&x1);
            let (_, f2) = context_only(&x2);
            let (_, f12) = context_only(&(&x1 * a + &x2 * b));
            prop_assert!((f12 - (a * f1 + b * f2)).abs() <= 1e-10 * (1.0 + f12.abs()));
        }
    }
}
