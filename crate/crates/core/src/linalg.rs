//! Dense helpers shared by the model, theory and sampling modules.
//!
//! Everything symmetric goes through `SymmetricEigen` so that functions of
//! the same matrix (inverse, square root, powers) share one eigenbasis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as non-positive.
pub const SPD_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition `Q diag(values) Qᵀ`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let sym = (m + m.transpose()) * 0.5;
        let SymmetricEigen {
            eigenvalues,
            eigenvectors,
        } = SymmetricEigen::new(sym);
        Self {
            values: eigenvalues,
            vectors: eigenvectors,
        }
    }

    pub fn min(&self) -> f64 {
        self.values.min()
    }

    pub fn max(&self) -> f64 {
        self.values.max()
    }

    /// `Q diag(f(λ)) Qᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DVector::from_iterator(self.values.len(), self.values.iter().map(|&v| f(v)));
        let q = &self.vectors;
        let mut qd = q.clone();
        for (j, s) in scaled.iter().enumerate() {
            qd.column_mut(j).scale_mut(*s);
        }
        let out = qd * q.transpose();
        (&out + out.transpose()) * 0.5
    }
}

pub fn check_square(what: &'static str, m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::Shape {
            what,
            expected: (d, d),
            found: (m.nrows(), m.ncols()),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric positive definite matrix, or an error
/// naming the smallest eigenvalue.
pub fn spd_eigen(what: &'static str, m: &DMatrix<f64>) -> Result<SymEigen> {
    check_square(what, m, m.nrows())?;
    if (m - m.transpose()).abs().max() > 1e-10 * (1.0 + m.abs().max()) {
        return Err(Error::NotPositiveDefinite {
            what,
            min_eigenvalue: f64::NAN,
        });
    }
    let eig = SymEigen::new(m);
    if eig.min() <= SPD_TOL {
        return Err(Error::NotPositiveDefinite {
            what,
            min_eigenvalue: eig.min(),
        });
    }
    Ok(eig)
}

pub fn check_psd(what: &'static str, m: &DMatrix<f64>) -> Result<()> {
    check_square(what, m, m.nrows())?;
    let scale = 1.0 + m.abs().max();
    if (m - m.transpose()).abs().max() > 1e-10 * scale {
        return Err(Error::NotPositiveSemiDefinite {
            what,
            min_eigenvalue: f64::NAN,
        });
    }
    let min = SymEigen::new(m).min();
    if min < -1e-10 * scale {
        return Err(Error::NotPositiveSemiDefinite {
            what,
            min_eigenvalue: min,
        });
    }
    Ok(())
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Spectral norm of a symmetric matrix.
pub fn sym_op_norm(m: &DMatrix<f64>) -> f64 {
    let eig = SymEigen::new(m);
    eig.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major vectorization: `vec([[1,2],[3,4]]) = (1,3,2,4)`.
pub fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::DimensionMismatch {
                what: "matrix row",
                index: i,
                expected: ncols,
                found: r.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Random SPD matrix `Q diag(λ) Qᵀ` with Haar-ish `Q` (QR of a Gaussian
/// matrix) and eigenvalues uniform on `[min_eig, max_eig]`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize, min_eig: f64, max_eig: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let eig = SymEigen {
        values: DVector::from_fn(d, |_, _| min_eig + (max_eig - min_eig) * rng.random::<f64>()),
        vectors: q,
    };
    eig.map(|v| v)
}
