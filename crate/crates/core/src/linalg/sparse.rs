//! Complex CSR matrices with a triplet-based builder.
//!
//! Assembly accumulates (row, col, value) triplets; `Triplets::to_csr` sorts
//! and combines duplicates, which fixes the summation order and keeps runs
//! bit-reproducible.

use crate::C64;

#[derive(Clone, Debug)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<(usize, usize, C64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, val: C64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if val.re != 0.0 || val.im != 0.0 {
            self.entries.push((row, col, val));
        }
    }

    /// Record a slot regardless of value (for symbolic patterns).
    pub fn push_structural(&mut self, row: usize, col: usize) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, C64::new(0.0, 0.0)));
    }

    pub fn to_csr(&self) -> Csr {
        let mut entries = self.entries.clone();
        entries.sort_by_key(|e| (e.0, e.1));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut data: Vec<C64> = Vec::with_capacity(entries.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &entries {
            if prev == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                prev = Some((r, c));
            }
        }
        for r in 0..self.nrows {
            indptr[r + 1] += indptr[r];
        }
        Csr { nrows: self.nrows, ncols: self.ncols, indptr, indices, data }
    }
}

/// Compressed sparse row matrix over `C64`.
#[derive(Clone, Debug)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<C64>,
}

impl Csr {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), data: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, C64::new(1.0, 0.0));
        }
        t.to_csr()
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[C64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.data[a..b])
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![C64::new(0.0, 0.0); self.nrows];
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = C64::new(0.0, 0.0);
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
        y
    }

    /// y* A x, the sesquilinear pairing (conjugation on `y`).
    pub fn sesquilinear(&self, y: &[C64], x: &[C64]) -> C64 {
        let ax = self.matvec(x);
        y.iter().zip(&ax).map(|(yi, axi)| yi.conj() * axi).sum()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Csr {
        let mut t = Triplets::new(self.ncols, self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                t.push(*c, r, v.conj());
            }
        }
        t.to_csr()
    }

    /// alpha*A + beta*B, entrywise union of patterns.
    pub fn linear_combination(alpha: C64, a: &Csr, beta: C64, b: &Csr) -> Csr {
        assert_eq!((a.nrows, a.ncols), (b.nrows, b.ncols));
        let mut t = Triplets::new(a.nrows, a.ncols);
        for r in 0..a.nrows {
            let (ca, va) = a.row(r);
            for (c, v) in ca.iter().zip(va) {
                t.push(r, *c, alpha * v);
            }
            let (cb, vb) = b.row(r);
            for (c, v) in cb.iter().zip(vb) {
                t.push(r, *c, beta * v);
            }
        }
        t.to_csr()
    }

    /// (A + A*)/2.
    pub fn hermitian_part(&self) -> Csr {
        Csr::linear_combination(
            C64::new(0.5, 0.0),
            self,
            C64::new(0.5, 0.0),
            &self.adjoint(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> super::dense::DMat {
        let mut m = super::dense::DMat::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                m[(r, *c)] += *v;
            }
        }
        m
    }

    /// Matrix Market coordinate format (complex general).
    pub fn to_matrix_market(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        s.push_str("%%MatrixMarket matrix coordinate complex general\n");
        let _ = writeln!(s, "{} {} {}", self.nrows, self.ncols, self.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let _ = writeln!(s, "{} {} {:.17e} {:.17e}", r + 1, c + 1, v.re, v.im);
            }
        }
        s
    }
}
