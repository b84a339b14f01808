//! Sparse direct LU with partial pivoting (left-looking, Gilbert–Peierls).
//!
//! Columns are factored one at a time: a sparse triangular solve against the
//! already-computed part of L yields the new column, the entry of largest
//! magnitude among the not-yet-pivoted rows becomes the pivot. No
//! fill-reducing ordering; the matrices here are small 2-D mesh operators.

use crate::{C64, Error, Result};

use super::sparse::Csr;

struct CscCols {
    colptr: Vec<usize>,
    rows: Vec<usize>,
    vals: Vec<C64>,
}

fn to_csc(a: &Csr) -> CscCols {
    let n = a.ncols;
    debug_assert!(n == a.nrows);
    let mut count = vec![0usize; n + 1];
    for &c in &a.indices {
        count[c + 1] += 1;
    }
    for j in 0..n {
        count[j + 1] += count[j];
    }
    let colptr = count.clone();
    let mut next = count;
    let mut rows = vec![0usize; a.nnz()];
    let mut vals = vec![C64::new(0.0, 0.0); a.nnz()];
    for r in 0..a.nrows {
        let (cols, data) = a.row(r);
        for (c, v) in cols.iter().zip(data) {
            let slot = next[*c];
            rows[slot] = r;
            vals[slot] = *v;
            next[*c] += 1;
        }
    }
    CscCols { colptr, rows, vals }
}

/// LU factorization P A = L U of a square complex matrix.
pub struct SparseLu {
    n: usize,
    // L and U stored column-wise; L has unit diagonal (not stored).
    l_colptr: Vec<usize>,
    l_rows: Vec<usize>,
    l_vals: Vec<C64>,
    u_colptr: Vec<usize>,
    u_rows: Vec<usize>, // pivot-order indices, strictly increasing per column
    u_vals: Vec<C64>,
    u_diag: Vec<C64>,
    // pinv[original_row] = pivot position, perm[pivot position] = original row
    pinv: Vec<usize>,
    min_pivot: f64,
}

impl SparseLu {
    pub fn factor(a: &Csr) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::Dimension(format!(
                "LU requires a square matrix, got {}x{}",
                a.nrows, a.ncols
            )));
        }
        let n = a.nrows;
        let csc = to_csc(a);
        let scale = a.max_abs().max(1e-300);

        let mut l_colptr = vec![0usize; n + 1];
        let mut l_rows: Vec<usize> = Vec::new();
        let mut l_vals: Vec<C64> = Vec::new();
        let mut u_colptr = vec![0usize; n + 1];
        let mut u_rows: Vec<usize> = Vec::new();
        let mut u_vals: Vec<C64> = Vec::new();
        let mut u_diag = vec![C64::new(0.0, 0.0); n];

        const UNSET: usize = usize::MAX;
        let mut pinv = vec![UNSET; n];

        // Workspaces for the sparse triangular solve.
        let mut x = vec![C64::new(0.0, 0.0); n];
        let mut marked = vec![false; n];
        let mut pattern: Vec<usize> = Vec::with_capacity(n);
        let mut stack: Vec<(usize, usize)> = Vec::with_capacity(n);
        let mut topo: Vec<usize> = Vec::with_capacity(n);
        let mut min_pivot = f64::INFINITY;

        for k in 0..n {
            // Symbolic: reachability of column k's pattern through finished L
            // columns (DFS producing a topological order of pivoted rows).
            pattern.clear();
            topo.clear();
            let (cstart, cend) = (csc.colptr[k], csc.colptr[k + 1]);
            for idx in cstart..cend {
                let root = csc.rows[idx];
                if marked[root] {
                    continue;
                }
                marked[root] = true;
                stack.push((root, 0));
                while let Some(&(node, pos)) = stack.last() {
                    let piv = pinv[node];
                    if piv == UNSET {
                        // Unpivoted row: leaf of the reach.
                        pattern.push(node);
                        stack.pop();
                        continue;
                    }
                    let (ls, le) = (l_colptr[piv], l_colptr[piv + 1]);
                    let mut descended = false;
                    let mut p = pos;
                    while ls + p < le {
                        let child = l_rows[ls + p];
                        p += 1;
                        if !marked[child] {
                            stack.last_mut().unwrap().1 = p;
                            marked[child] = true;
                            stack.push((child, 0));
                            descended = true;
                            break;
                        }
                    }
                    if !descended {
                        topo.push(node);
                        pattern.push(node);
                        stack.pop();
                    }
                }
            }

            // Numeric: scatter column k, then eliminate in topological order.
            for idx in cstart..cend {
                x[csc.rows[idx]] += csc.vals[idx];
            }
            for &node in topo.iter().rev() {
                let piv = pinv[node];
                let xv = x[node];
                if xv.re != 0.0 || xv.im != 0.0 {
                    let (ls, le) = (l_colptr[piv], l_colptr[piv + 1]);
                    for t in ls..le {
                        x[l_rows[t]] -= l_vals[t] * xv;
                    }
                }
            }

            // Partial pivot: largest magnitude among unpivoted rows.
            let mut best = UNSET;
            let mut best_mag = 0.0f64;
            for &r in &pattern {
                if pinv[r] == UNSET {
                    let mag = x[r].norm();
                    if best == UNSET || mag > best_mag || (mag == best_mag && r < best) {
                        best = r;
                        best_mag = mag;
                    }
                }
            }
            if best == UNSET || best_mag <= 1e-300 * scale {
                // Clean up workspace before bailing out.
                for &r in &pattern {
                    x[r] = C64::new(0.0, 0.0);
                    marked[r] = false;
                }
                return Err(Error::Singular { pivot: best_mag, col: k });
            }
            min_pivot = min_pivot.min(best_mag);
            let pivot_val = x[best];
            pinv[best] = k;

            // Store U entries (pivoted rows) and L entries (scaled).
            for &r in &pattern {
                let piv = pinv[r];
                let xv = x[r];
                if r == best {
                    u_diag[k] = pivot_val;
                } else if piv != UNSET && piv < k {
                    if xv.re != 0.0 || xv.im != 0.0 {
                        u_rows.push(piv);
                        u_vals.push(xv);
                    }
                } else if piv == UNSET {
                    let lv = xv / pivot_val;
                    if lv.re != 0.0 || lv.im != 0.0 {
                        l_rows.push(r);
                        l_vals.push(lv);
                    }
                }
                x[r] = C64::new(0.0, 0.0);
                marked[r] = false;
            }
            l_colptr[k + 1] = l_rows.len();
            u_colptr[k + 1] = u_rows.len();
        }

        Ok(Self {
            n,
            l_colptr,
            l_rows,
            l_vals,
            u_colptr,
            u_rows,
            u_vals,
            u_diag,
            pinv,
            min_pivot,
        })
    }

    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        // y in pivot order: y[pinv[r]] = b[r], then L y' = y forward.
        let mut y = vec![C64::new(0.0, 0.0); n];
        for r in 0..n {
            y[self.pinv[r]] = b[r];
        }
        for k in 0..n {
            let yk = y[k];
            if yk.re != 0.0 || yk.im != 0.0 {
                for t in self.l_colptr[k]..self.l_colptr[k + 1] {
                    let r = self.l_rows[t];
                    let piv = self.pinv[r];
                    y[piv] -= self.l_vals[t] * yk;
                }
            }
        }
        // Back substitution on U (column-wise).
        for k in (0..n).rev() {
            y[k] /= self.u_diag[k];
            let yk = y[k];
            if yk.re != 0.0 || yk.im != 0.0 {
                for t in self.u_colptr[k]..self.u_colptr[k + 1] {
                    y[self.u_rows[t]] -= self.u_vals[t] * yk;
                }
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sparse::Triplets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn solves_small_dense_system() {
        let mut t = Triplets::new(3, 3);
        t.push(0, 0, c(2.0, 0.0));
        t.push(0, 1, c(1.0, 0.0));
        t.push(1, 0, c(1.0, 0.0));
        t.push(1, 1, c(3.0, 0.0));
        t.push(1, 2, c(1.0, 0.0));
        t.push(2, 1, c(1.0, 0.0));
        t.push(2, 2, c(4.0, 0.0));
        let a = t.to_csr();
        let lu = SparseLu::factor(&a).unwrap();
        let b = vec![c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0)];
        let x = lu.solve(&b);
        let r = a.matvec(&x);
        for i in 0..3 {
            assert!((r[i] - b[i]).norm() < 1e-13);
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        // [[0, 1], [1, 0]] requires a row swap.
        let mut t = Triplets::new(2, 2);
        t.push(0, 1, c(1.0, 0.0));
        t.push(1, 0, c(1.0, 0.0));
        let a = t.to_csr();
        let lu = SparseLu::factor(&a).unwrap();
        let x = lu.solve(&[c(5.0, 0.0), c(7.0, 0.0)]);
        assert!((x[0] - c(7.0, 0.0)).norm() < 1e-14);
        assert!((x[1] - c(5.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, c(1.0, 0.0));
        t.push(1, 0, c(1.0, 0.0));
        let a = t.to_csr();
        match SparseLu::factor(&a) {
            Err(Error::Singular { col, .. }) => assert_eq!(col, 1),
            other => panic!("expected singular error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn random_complex_systems_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 5 + (trial % 17);
            let mut t = Triplets::new(n, n);
            for i in 0..n {
                // Diagonal dominance off: values are generic.
                t.push(i, i, c(rng.gen_range(-1.0..1.0) + 3.0, rng.gen_range(-1.0..1.0)));
                for _ in 0..3 {
                    let j = rng.gen_range(0..n);
                    t.push(i, j, c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
                }
            }
            let a = t.to_csr();
            let lu = SparseLu::factor(&a).unwrap();
            let b: Vec<C64> =
                (0..n).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let x = lu.solve(&b);
            let r = a.matvec(&x);
            let err: f64 = r.iter().zip(&b).map(|(ri, bi)| (ri - bi).norm()).sum();
            let scale: f64 = b.iter().map(|z| z.norm()).sum::<f64>().max(1.0);
            assert!(err / scale < 1e-11, "trial {trial}: residual {err}");
        }
    }
}
