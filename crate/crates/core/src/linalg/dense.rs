//! Small dense complex matrices (block tensors, local element matrices,
//! reference eigensolves). Row-major storage, dimensions at most a few tens.

use crate::{C64, Error, Result};

/// Dense complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DMat {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<C64>,
}

impl DMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, data: vec![C64::new(0.0, 0.0); nrows * ncols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Self {
        let nrows = rows.len();
        let ncols = if nrows > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { nrows, ncols, data }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> DMat {
        let mut out = DMat::zeros(self.ncols, self.nrows);
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    /// (A + A*)/2.
    pub fn hermitian_part(&self) -> DMat {
        assert_eq!(self.nrows, self.ncols);
        let mut out = DMat::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                out[(i, j)] = 0.5 * (self[(i, j)] + self[(j, i)].conj());
            }
        }
        out
    }

    pub fn matmul(&self, other: &DMat) -> DMat {
        assert_eq!(self.ncols, other.nrows);
        let mut out = DMat::zeros(self.nrows, other.ncols);
        for i in 0..self.nrows {
            for k in 0..self.ncols {
                let aik = self[(i, k)];
                if aik.norm_sqr() == 0.0 {
                    continue;
                }
                for j in 0..other.ncols {
                    out[(i, j)] += aik * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(self.ncols, x.len());
        let mut y = vec![C64::new(0.0, 0.0); self.nrows];
        for i in 0..self.nrows {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..self.ncols {
                acc += self[(i, j)] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                if i != j {
                    s += self[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    }

    /// Spectral norm via the Hermitian eigenvalues of A*A.
    pub fn spectral_norm(&self) -> f64 {
        let ata = self.adjoint().matmul(self);
        let eigs = hermitian_eigenvalues(&ata);
        eigs.iter().copied().fold(0.0_f64, f64::max).max(0.0).sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for DMat {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.ncols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.ncols + j]
    }
}

/// Eigenvalues of a Hermitian matrix by cyclic Jacobi with complex rotations,
/// driven to off-diagonal norm `1e-12` relative to the Frobenius norm.
/// Returned sorted ascending. The input is taken as its Hermitian part, so
/// tiny asymmetries from assembly round-off are tolerated.
pub fn hermitian_eigenvalues(a: &DMat) -> Vec<f64> {
    assert_eq!(a.nrows, a.ncols);
    let n = a.nrows;
    if n == 0 {
        return Vec::new();
    }
    let mut h = a.hermitian_part();
    let scale = h.frobenius().max(1e-300);
    let tol = 1e-12 * scale;

    for _sweep in 0..60 {
        if h.off_diagonal_norm() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let hpq = h[(p, q)];
                let apq = hpq.norm();
                if apq <= 1e-300 {
                    continue;
                }
                // Unitary 2x2 rotation annihilating the (p,q) entry.
                let phase = hpq / apq;
                let app = h[(p, p)].re;
                let aqq = h[(q, q)].re;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Columns: [p q] <- [p q] * [[c, s*phase], [-s*conj(phase), c]]
                for i in 0..n {
                    let hip = h[(i, p)];
                    let hiq = h[(i, q)];
                    h[(i, p)] = c * hip - s * phase.conj() * hiq;
                    h[(i, q)] = s * phase * hip + c * hiq;
                }
                // Rows: conjugate-transposed update.
                for j in 0..n {
                    let hpj = h[(p, j)];
                    let hqj = h[(q, j)];
                    h[(p, j)] = c * hpj - s * phase * hqj;
                    h[(q, j)] = s * phase.conj() * hpj + c * hqj;
                }
                // Clean up round-off on the annihilated pair.
                h[(p, q)] = 0.5 * (h[(p, q)] + h[(q, p)].conj());
                h[(q, p)] = h[(p, q)].conj();
            }
        }
    }

    let mut eigs: Vec<f64> = (0..n).map(|i| h[(i, i)].re).collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

/// Smallest eigenvalue of the Hermitian part of `a`.
pub fn min_hermitian_eigenvalue(a: &DMat) -> f64 {
    hermitian_eigenvalues(a)[0]
}

/// Cholesky factorization A = L L* of a Hermitian positive definite matrix.
/// Errors if a pivot drops below `1e-14` times the largest diagonal.
pub fn cholesky(a: &DMat) -> Result<DMat> {
    assert_eq!(a.nrows, a.ncols);
    let n = a.nrows;
    let dmax = (0..n).map(|i| a[(i, i)].re).fold(0.0_f64, f64::max).max(1e-300);
    let mut l = DMat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if d <= 1e-14 * dmax {
            return Err(Error::Singular { pivot: d, col: j });
        }
        let dj = d.sqrt();
        l[(j, j)] = C64::new(dj, 0.0);
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Solve a small dense system by Gaussian elimination with partial pivoting.
pub fn lu_solve(a: &DMat, b: &[C64]) -> Result<Vec<C64>> {
    assert_eq!(a.nrows, a.ncols);
    assert_eq!(b.len(), a.nrows);
    let n = a.nrows;
    let mut m = a.clone();
    let mut x = b.to_vec();
    for k in 0..n {
        let mut piv = k;
        let mut mag = m[(k, k)].norm();
        for i in (k + 1)..n {
            let mi = m[(i, k)].norm();
            if mi > mag {
                piv = i;
                mag = mi;
            }
        }
        if mag <= 1e-300 {
            return Err(Error::Singular { pivot: mag, col: k });
        }
        if piv != k {
            for j in 0..n {
                let tmp = m[(k, j)];
                m[(k, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
            x.swap(k, piv);
        }
        for i in (k + 1)..n {
            let f = m[(i, k)] / m[(k, k)];
            if f.norm_sqr() == 0.0 {
                continue;
            }
            for j in k..n {
                let mkj = m[(k, j)];
                m[(i, j)] -= f * mkj;
            }
            let xk = x[k];
            x[i] -= f * xk;
        }
    }
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let mij = m[(i, j)];
            x[i] = x[i] - mij * x[j];
        }
        x[i] /= m[(i, i)];
    }
    Ok(x)
}

/// Solve L y = b with L lower triangular.
pub fn forward_solve(l: &DMat, b: &[C64]) -> Vec<C64> {
    let n = l.nrows;
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            y[i] = y[i] - lik * y[k];
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// Solve L* x = y with L lower triangular.
pub fn backward_solve_adjoint(l: &DMat, y: &[C64]) -> Vec<C64> {
    let n = l.nrows;
    let mut x = y.to_vec();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)].conj();
            x[i] = x[i] - lki * x[k];
        }
        x[i] /= l[(i, i)].conj();
    }
    x
}
