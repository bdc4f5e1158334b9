//! Small linear-algebra utilities: ridged Cholesky solves and a symmetric
//! banded matrix with an in-place banded Cholesky factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::num::Real;

/// Cholesky-factor `m + ridge*I`. The ridge keeps rank-deficient systems
/// solvable (e.g. normal equations with more columns than rows).
pub fn ridged_cholesky<T: Real>(mut m: DMatrix<T>, ridge: T) -> Result<Cholesky<T, Dyn>> {
    debug_assert_eq!(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        m[(i, i)] += ridge;
    }
    m.cholesky()
        .ok_or_else(|| Error::numeric("matrix not positive definite after ridge"))
}

/// Solve `(a + ridge*I) x = b` column-by-column for a matrix right-hand side.
pub fn ridged_solve<T: Real>(a: DMatrix<T>, ridge: T, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    let chol = ridged_cholesky(a, ridge)?;
    Ok(chol.solve(b))
}

/// Log density of `N(mu, Sigma)` evaluated via a precomputed factor of Sigma,
/// with `centered = x - mu`.
pub fn gaussian_log_density<T: Real>(chol: &Cholesky<T, Dyn>, centered: &DVector<T>) -> T {
    let n = centered.len();
    let half = T::from_f64_approx(0.5);
    let mut log_det = T::zero();
    for i in 0..n {
        log_det += chol.l_dirty()[(i, i)].ln();
    }
    log_det += log_det; // 2 * sum(log diag L)
    let z = chol.solve(centered);
    let quad = centered.dot(&z);
    -half * (T::from_usize_approx(n) * T::two_pi().ln() + log_det + quad)
}

/// Symmetric banded matrix stored as the lower band: entry `(i, j)` with
/// `0 <= i - j <= bw` lives at `data[i * (bw + 1) + (i - j)]`.
#[derive(Debug, Clone)]
pub struct SymBanded<T> {
    n: usize,
    bw: usize,
    data: Vec<T>,
}

impl<T: Real> SymBanded<T> {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        SymBanded {
            n,
            bw,
            data: vec![T::zero(); n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw, "entry outside band");
        self.data[i * (self.bw + 1) + (i - j)] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            T::zero()
        } else {
            self.data[i * (self.bw + 1) + (i - j)]
        }
    }

    /// Dense copy, for small systems and oracle checks.
    pub fn to_dense(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// y = A x using the symmetric band.
    pub fn matvec(&self, x: &DVector<T>) -> DVector<T> {
        assert_eq!(x.len(), self.n);
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut acc = T::zero();
            for j in lo..=i {
                acc += self.get(i, j) * x[j];
            }
            for j in (i + 1)..(i + self.bw + 1).min(self.n) {
                acc += self.get(i, j) * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// In-place banded Cholesky A = L L^T. Fails if A is not positive definite.
    pub fn cholesky(mut self) -> Result<BandedCholesky<T>> {
        let (n, bw) = (self.n, self.bw);
        let stride = bw + 1;
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut diag = self.data[j * stride];
            for k in lo..j {
                let ljk = self.data[j * stride + (j - k)];
                diag -= ljk * ljk;
            }
            if diag <= T::zero() {
                return Err(Error::numeric(
                    "banded cholesky failed: matrix not positive definite",
                ));
            }
            let djj = diag.sqrt();
            self.data[j * stride] = djj;
            for i in (j + 1)..(j + bw + 1).min(n) {
                let mut v = self.data[i * stride + (i - j)];
                let klo = i.saturating_sub(bw).max(lo);
                for k in klo..j {
                    v -= self.data[i * stride + (i - k)] * self.data[j * stride + (j - k)];
                }
                self.data[i * stride + (i - j)] = v / djj;
            }
        }
        Ok(BandedCholesky {
            n,
            bw,
            data: self.data,
        })
    }
}

/// Lower banded Cholesky factor; same storage layout as [`SymBanded`].
#[derive(Debug, Clone)]
pub struct BandedCholesky<T> {
    n: usize,
    bw: usize,
    data: Vec<T>,
}

impl<T: Real> BandedCholesky<T> {
    /// Solve A x = b with A = L L^T.
    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        assert_eq!(b.len(), self.n);
        let stride = self.bw + 1;
        let mut x = b.clone();
        // L y = b
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut v = x[i];
            for k in lo..i {
                v -= self.data[i * stride + (i - k)] * x[k];
            }
            x[i] = v / self.data[i * stride];
        }
        // L^T x = y
        for i in (0..self.n).rev() {
            let hi = (i + self.bw + 1).min(self.n);
            let mut v = x[i];
            for k in (i + 1)..hi {
                v -= self.data[k * stride + (k - i)] * x[k];
            }
            x[i] = v / self.data[i * stride];
        }
        x
    }
}
