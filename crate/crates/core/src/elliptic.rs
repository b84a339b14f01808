//! P1 finite elements for the coupled system form, with per-component
//! Dirichlet elimination.
//!
//! Assembly uses the 3-point edge-midpoint rule, which integrates the P1
//! products exactly for constant tensors. Degrees of freedom on a
//! component's Dirichlet part are eliminated, so the assembled matrices act
//! on the free dofs only, numbered component-major.

use std::sync::{Arc, OnceLock};

use crate::geometry::{Mesh2D, Point};
use crate::linalg::eigen::pencil_smallest;
use crate::linalg::lu::SparseLu;
use crate::linalg::sparse::{Csr, Triplets};
use crate::tensors::{CoefficientTensor, TensorBlocks};
use crate::{C64, Error, FeVec, Result};

/// Per-component P1 space over a shared mesh, Dirichlet dofs eliminated.
#[derive(Clone)]
pub struct FeSpace {
    mesh: Arc<Mesh2D>,
    pub m: usize,
    /// free[comp][vertex] = global free index, or None when constrained.
    free: Vec<Vec<Option<usize>>>,
    num_free: usize,
    /// Symbolic coupling pattern (zero-valued CSR) shared by assemblies.
    pattern: Csr,
    mass: Csr,
    grad_mass: Csr,
    riesz: Arc<OnceLock<SparseLu>>,
    locator: Arc<OnceLock<TriLocator>>,
}

/// Uniform-bin point locator over the triangles.
struct TriLocator {
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    bins: Vec<Vec<usize>>,
}

impl TriLocator {
    fn build(mesh: &Mesh2D) -> Self {
        let xs: Vec<f64> = mesh.vertices.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = mesh.vertices.iter().map(|p| p[1]).collect();
        let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let x1 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let y0 = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let y1 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = (mesh.triangles.len() as f64).sqrt().ceil().max(1.0) as usize;
        let (nx, ny) = (n, n);
        let dx = ((x1 - x0) / nx as f64).max(1e-300);
        let dy = ((y1 - y0) / ny as f64).max(1e-300);
        let mut bins = vec![Vec::new(); nx * ny];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let px: Vec<f64> = tri.iter().map(|&v| mesh.vertices[v][0]).collect();
            let py: Vec<f64> = tri.iter().map(|&v| mesh.vertices[v][1]).collect();
            let bx0 = (((px.iter().cloned().fold(f64::INFINITY, f64::min) - x0) / dx).floor()
                as isize)
                .clamp(0, nx as isize - 1) as usize;
            let bx1 = (((px.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x0) / dx).floor()
                as isize)
                .clamp(0, nx as isize - 1) as usize;
            let by0 = (((py.iter().cloned().fold(f64::INFINITY, f64::min) - y0) / dy).floor()
                as isize)
                .clamp(0, ny as isize - 1) as usize;
            let by1 = (((py.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - y0) / dy).floor()
                as isize)
                .clamp(0, ny as isize - 1) as usize;
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    bins[by * nx + bx].push(t);
                }
            }
        }
        Self { x0, y0, dx, dy, nx, ny, bins }
    }

    fn candidates(&self, p: Point) -> &[usize] {
        let bx = (((p[0] - self.x0) / self.dx).floor() as isize).clamp(0, self.nx as isize - 1)
            as usize;
        let by = (((p[1] - self.y0) / self.dy).floor() as isize).clamp(0, self.ny as isize - 1)
            as usize;
        &self.bins[by * self.nx + bx]
    }
}

impl std::fmt::Debug for FeSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "FeSpace(m={}, vertices={}, free={})",
            self.m,
            self.mesh.vertices.len(),
            self.num_free
        )
    }
}

struct TriGeom {
    verts: [usize; 3],
    area: f64,
    grads: [[f64; 2]; 3],
    quad: [Point; 3],
}

fn tri_geometry(mesh: &Mesh2D, t: usize) -> TriGeom {
    let [a, b, c] = mesh.triangles[t];
    let (p0, p1, p2) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
    let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]);
    let area = 0.5 * det;
    let grads = [
        [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
        [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
        [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
    ];
    let quad = [
        [0.5 * (p0[0] + p1[0]), 0.5 * (p0[1] + p1[1])],
        [0.5 * (p1[0] + p2[0]), 0.5 * (p1[1] + p2[1])],
        [0.5 * (p2[0] + p0[0]), 0.5 * (p2[1] + p0[1])],
    ];
    TriGeom { verts: [a, b, c], area, grads, quad }
}

/// Values of the three barycentric basis functions at the three edge
/// midpoints: `BASIS_AT_QUAD[q][node]`.
const BASIS_AT_QUAD: [[f64; 3]; 3] = [
    [0.5, 0.5, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
];

impl FeSpace {
    pub fn new(mesh: &Mesh2D) -> Result<Self> {
        mesh.validate()?;
        let m = mesh.num_components;
        let nv = mesh.vertices.len();
        // Vertex-major numbering keeps coupled components adjacent, which
        // bounds the bandwidth and the LU fill.
        let dirichlet: Vec<Vec<bool>> =
            (0..m).map(|comp| mesh.dirichlet_vertices(comp)).collect();
        let mut free = vec![vec![None; nv]; m];
        let mut num_free = 0usize;
        for v in 0..nv {
            for (comp, on_dirichlet) in dirichlet.iter().enumerate() {
                if !on_dirichlet[v] {
                    free[comp][v] = Some(num_free);
                    num_free += 1;
                }
            }
        }
        if num_free == 0 {
            return Err(Error::Geometry("no free degrees of freedom".into()));
        }
        let mut space = Self {
            mesh: Arc::new(mesh.clone()),
            m,
            free,
            num_free,
            pattern: Csr::zeros(0, 0),
            mass: Csr::zeros(0, 0),
            grad_mass: Csr::zeros(0, 0),
            riesz: Arc::new(OnceLock::new()),
            locator: Arc::new(OnceLock::new()),
        };
        space.pattern = space.build_pattern();
        let mut dd_grid = TensorBlocks::zero(m, 2);
        for i in 0..m {
            dd_grid.dd[i * m + i] = C64::new(1.0, 0.0);
        }
        space.mass =
            assemble_matrix(&space, &CoefficientTensor::Constant(dd_grid)).0;
        space.grad_mass =
            assemble_matrix(&space, &CoefficientTensor::identity(m, 2)).0;
        Ok(space)
    }

    /// Symbolic coupling pattern of the system form: one slot for every
    /// pair of free dofs sharing a triangle, across all component pairs.
    /// Repeated assemblies write values straight into this pattern.
    fn build_pattern(&self) -> Csr {
        let mesh = self.mesh();
        let mut trip = Triplets::new(self.num_free, self.num_free);
        for t in 0..mesh.triangles.len() {
            let verts = mesh.triangles[t];
            for i in 0..self.m {
                for a in 0..3 {
                    let Some(row) = self.free[i][verts[a]] else { continue };
                    for j in 0..self.m {
                        for b in 0..3 {
                            let Some(col) = self.free[j][verts[b]] else { continue };
                            trip.push_structural(row, col);
                        }
                    }
                }
            }
        }
        trip.to_csr()
    }

    pub fn mesh(&self) -> &Mesh2D {
        &self.mesh
    }

    pub fn num_free(&self) -> usize {
        self.num_free
    }

    pub fn free_index(&self, comp: usize, vertex: usize) -> Option<usize> {
        self.free[comp][vertex]
    }

    pub fn mass(&self) -> &Csr {
        &self.mass
    }

    pub fn grad_mass(&self) -> &Csr {
        &self.grad_mass
    }

    /// LU of grad_mass + mass, shared by all dual-norm evaluations.
    pub fn riesz_lu(&self) -> Result<&SparseLu> {
        if let Some(lu) = self.riesz.get() {
            return Ok(lu);
        }
        let w = Csr::linear_combination(
            C64::new(1.0, 0.0),
            &self.grad_mass,
            C64::new(1.0, 0.0),
            &self.mass,
        );
        let lu = SparseLu::factor(&w)?;
        let _ = self.riesz.set(lu);
        Ok(self.riesz.get().unwrap())
    }

    /// Expand a free-dof vector to per-component nodal values (zeros on
    /// constrained vertices).
    pub fn scatter(&self, u: &[C64]) -> Vec<Vec<C64>> {
        let nv = self.mesh.vertices.len();
        let mut out = vec![vec![C64::new(0.0, 0.0); nv]; self.m];
        for comp in 0..self.m {
            for v in 0..nv {
                if let Some(idx) = self.free[comp][v] {
                    out[comp][v] = u[idx];
                }
            }
        }
        out
    }

    /// Collect per-component nodal values into a free-dof vector.
    pub fn restrict(&self, nodal: &[Vec<C64>]) -> FeVec {
        let mut out = vec![C64::new(0.0, 0.0); self.num_free];
        for comp in 0..self.m {
            for (v, &val) in nodal[comp].iter().enumerate() {
                if let Some(idx) = self.free[comp][v] {
                    out[idx] = val;
                }
            }
        }
        out
    }

    /// Interpolate a per-component closure at the vertices and restrict.
    pub fn interpolate(&self, f: impl Fn(usize, Point) -> C64) -> FeVec {
        let mut out = vec![C64::new(0.0, 0.0); self.num_free];
        for comp in 0..self.m {
            for (v, &p) in self.mesh.vertices.iter().enumerate() {
                if let Some(idx) = self.free[comp][v] {
                    out[idx] = f(comp, p);
                }
            }
        }
        out
    }

    /// Dual vector of a per-component load function: F[(i,a)] = int f_i phi_a.
    pub fn load_vector(&self, f: impl Fn(usize, Point) -> C64) -> FeVec {
        let mut out = vec![C64::new(0.0, 0.0); self.num_free];
        for t in 0..self.mesh.triangles.len() {
            let geo = tri_geometry(&self.mesh, t);
            let w = geo.area / 3.0;
            for comp in 0..self.m {
                for (q, &xq) in geo.quad.iter().enumerate() {
                    let fv = f(comp, xq) * w;
                    for a in 0..3 {
                        if let Some(idx) = self.free[comp][geo.verts[a]] {
                            out[idx] += fv * BASIS_AT_QUAD[q][a];
                        }
                    }
                }
            }
        }
        out
    }

    /// P1 evaluation of one component's nodal values at an arbitrary point
    /// (lowest containing triangle; points outside every triangle evaluate
    /// to the nearest vertex value).
    pub fn eval_nodal(&self, nodal: &[C64], p: Point) -> C64 {
        let locator = self
            .locator
            .get_or_init(|| TriLocator::build(&self.mesh));
        let mesh = &self.mesh;
        for &t in locator.candidates(p) {
            let [a, b, c] = mesh.triangles[t];
            let (p0, p1, p2) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
            let det =
                (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]);
            let l1 = ((p[0] - p0[0]) * (p2[1] - p0[1]) - (p[1] - p0[1]) * (p2[0] - p0[0])) / det;
            let l2 = ((p1[0] - p0[0]) * (p[1] - p0[1]) - (p1[1] - p0[1]) * (p[0] - p0[0])) / det;
            let l0 = 1.0 - l1 - l2;
            let eps = -1e-12;
            if l0 >= eps && l1 >= eps && l2 >= eps {
                return nodal[a] * l0 + nodal[b] * l1 + nodal[c] * l2;
            }
        }
        // Fallback: nearest vertex.
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (v, q) in mesh.vertices.iter().enumerate() {
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        nodal[best]
    }

    /// Kernel of the gradient form: the constant function on each component
    /// without Dirichlet part (the mesh is connected).
    pub fn gradient_kernel(&self) -> Vec<FeVec> {
        let mut out = Vec::new();
        for comp in 0..self.m {
            let constrained = self.free[comp].iter().any(|s| s.is_none());
            if constrained {
                continue;
            }
            let mut k = vec![C64::new(0.0, 0.0); self.num_free];
            for v in 0..self.mesh.vertices.len() {
                if let Some(idx) = self.free[comp][v] {
                    k[idx] = C64::new(1.0, 0.0);
                }
            }
            out.push(k);
        }
        out
    }
}

/// Assemble the system form for `tensor` into the space's cached pattern;
/// returns the matrix and the largest Frobenius norm of the block tensor
/// over the quadrature points (an upper bound for the pointwise operator
/// norm, used for certified eigenvalue bounds).
fn assemble_matrix(space: &FeSpace, tensor: &CoefficientTensor) -> (Csr, f64) {
    let mesh = space.mesh();
    let m = space.m;
    let pattern = &space.pattern;
    let mut data = vec![C64::new(0.0, 0.0); pattern.nnz()];
    let slot = |row: usize, col: usize| -> usize {
        let start = pattern.indptr[row];
        let cols = &pattern.indices[start..pattern.indptr[row + 1]];
        start + cols.binary_search(&col).expect("assembly outside the cached pattern")
    };
    let mut sup_frob: f64 = 0.0;

    let constant_blocks = match tensor {
        CoefficientTensor::Constant(b) => Some(b.clone()),
        _ => None,
    };
    if let Some(b) = &constant_blocks {
        sup_frob = b.block_matrix().frobenius();
    }

    for t in 0..mesh.triangles.len() {
        let geo = tri_geometry(mesh, t);
        let w = geo.area / 3.0;
        for (q, &xq) in geo.quad.iter().enumerate() {
            let owned;
            let blocks = match &constant_blocks {
                Some(b) => b,
                None => {
                    owned = tensor.eval_at(xq);
                    sup_frob = sup_frob.max(owned.block_matrix().frobenius());
                    &owned
                }
            };
            for i in 0..m {
                for a in 0..3 {
                    let Some(row) = space.free_index(i, geo.verts[a]) else {
                        continue;
                    };
                    let phi_a = BASIS_AT_QUAD[q][a];
                    let ga = geo.grads[a];
                    for j in 0..m {
                        let a_blk = &blocks.a[i * m + j];
                        let b_blk = &blocks.b[i * m + j];
                        let c_blk = &blocks.c[i * m + j];
                        let dd = blocks.dd[i * m + j];
                        for bidx in 0..3 {
                            let Some(col) = space.free_index(j, geo.verts[bidx]) else {
                                continue;
                            };
                            let phi_b = BASIS_AT_QUAD[q][bidx];
                            let gb = geo.grads[bidx];
                            // (A grad u) . grad v
                            let mut val = C64::new(0.0, 0.0);
                            for k in 0..2 {
                                for l in 0..2 {
                                    val += a_blk[(k, l)] * gb[l] * ga[k];
                                }
                            }
                            // (b u) . grad v
                            val += phi_b * (b_blk[0] * ga[0] + b_blk[1] * ga[1]);
                            // (c . grad u) v
                            val += phi_a * (c_blk[0] * gb[0] + c_blk[1] * gb[1]);
                            // d u v
                            val += dd * phi_a * phi_b;
                            data[slot(row, col)] += val * w;
                        }
                    }
                }
            }
        }
    }
    let matrix = Csr {
        nrows: pattern.nrows,
        ncols: pattern.ncols,
        indptr: pattern.indptr.clone(),
        indices: pattern.indices.clone(),
        data,
    };
    (matrix, sup_frob)
}

/// Assembled weak form of the system operator on the free dofs.
pub struct DiscreteSystemOperator {
    pub space: FeSpace,
    pub stiffness: Csr,
    pub mass: Csr,
    pub grad_mass: Csr,
    /// Upper bound on the pointwise block operator norm over quadrature
    /// points (Frobenius-based, hence certified).
    pub tensor_bound: f64,
}

/// Assemble the discrete system operator for a tensor on a space.
pub fn assemble(space: &FeSpace, tensor: &CoefficientTensor) -> Result<DiscreteSystemOperator> {
    if tensor.m() != space.m {
        return Err(Error::Dimension(format!(
            "tensor couples {} components, space has {}",
            tensor.m(),
            space.m
        )));
    }
    if tensor.d() != 2 {
        return Err(Error::Dimension("assembly requires d = 2 tensors".into()));
    }
    let (stiffness, tensor_bound) = assemble_matrix(space, tensor);
    Ok(DiscreteSystemOperator {
        space: space.clone(),
        stiffness,
        mass: space.mass().clone(),
        grad_mass: space.grad_mass().clone(),
        tensor_bound,
    })
}

impl DiscreteSystemOperator {
    /// Solve (stiffness + Lambda mass) u = f by sparse LU; the relative
    /// residual is verified to 1e-10.
    pub fn solve_shifted(&self, lambda: C64, f: &[C64]) -> Result<FeVec> {
        let a = Csr::linear_combination(C64::new(1.0, 0.0), &self.stiffness, lambda, &self.mass);
        let lu = SparseLu::factor(&a)?;
        let u = lu.solve(f);
        let r = a.matvec(&u);
        let fnorm: f64 = f.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let rnorm: f64 =
            r.iter().zip(f).map(|(ri, fi)| (ri - fi).norm_sqr()).sum::<f64>().sqrt();
        if fnorm > 0.0 && rnorm > 1e-10 * fnorm {
            return Err(Error::Solver(format!(
                "shifted solve residual {rnorm:.3e} exceeds 1e-10 relative ({fnorm:.3e})"
            )));
        }
        Ok(u)
    }

    /// Discrete coercivity constant: minimum over free-dof vectors
    /// (orthogonal to the gradient kernel) of
    /// (Re u*Su + lambda u*Mu) / (u*Gu), via shift-and-invert on the
    /// Hermitian pencil to tolerance 1e-10.
    pub fn garding_constant(&self, lambda: f64) -> Result<f64> {
        if lambda < 0.0 {
            return Err(Error::Parameter("garding_constant: lambda must be nonnegative".into()));
        }
        let h = Csr::linear_combination(
            C64::new(1.0, 0.0),
            &self.stiffness.hermitian_part(),
            C64::new(lambda, 0.0),
            &self.mass,
        );
        let kernel = self.space.gradient_kernel();
        // Certified lower bound: Re u*Su >= -bound (u*Gu + u*Mu) and
        // u*Mu <= u*Gu / mu1 on the complement of the kernel, where mu1 is
        // the smallest constrained eigenvalue of (G, M).
        let mu1 = pencil_smallest(&self.grad_mass, &self.mass, &kernel, 0.0, 1e-9, 0x60d5)?;
        if mu1.value <= 0.0 {
            return Err(Error::Solver(format!(
                "gradient form is degenerate beyond its kernel (mu1 = {:.3e})",
                mu1.value
            )));
        }
        let lb = -self.tensor_bound * (1.0 + 1.0 / mu1.value);
        let eig = pencil_smallest(&h, &self.grad_mass, &kernel, lb, 1e-10, 0x9a2d)?;
        Ok(eig.value)
    }
}

/// Discrete W^{1,q} norm of an FE vector by quadrature (exact for q = 2).
pub fn w1q_norm(space: &FeSpace, u: &[C64], q: f64) -> f64 {
    let mesh = space.mesh();
    let m = space.m;
    let mut acc = 0.0f64;
    for t in 0..mesh.triangles.len() {
        let geo = tri_geometry(mesh, t);
        let w = geo.area / 3.0;
        // Gradient is constant per triangle and component.
        let mut grad_sq = 0.0f64;
        for comp in 0..m {
            let mut gx = C64::new(0.0, 0.0);
            let mut gy = C64::new(0.0, 0.0);
            for a in 0..3 {
                if let Some(idx) = space.free_index(comp, geo.verts[a]) {
                    gx += u[idx] * geo.grads[a][0];
                    gy += u[idx] * geo.grads[a][1];
                }
            }
            grad_sq += gx.norm_sqr() + gy.norm_sqr();
        }
        for qp in 0..3 {
            let mut val_sq = 0.0f64;
            for comp in 0..m {
                let mut v = C64::new(0.0, 0.0);
                for a in 0..3 {
                    if let Some(idx) = space.free_index(comp, geo.verts[a]) {
                        v += u[idx] * BASIS_AT_QUAD[qp][a];
                    }
                }
                val_sq += v.norm_sqr();
            }
            acc += w * (grad_sq.powf(q / 2.0) + val_sq.powf(q / 2.0));
        }
    }
    acc.powf(1.0 / q)
}

/// L2 norm of an FE vector (through the mass matrix).
pub fn l2_norm(space: &FeSpace, u: &[C64]) -> f64 {
    space.mass().sesquilinear(u, u).re.max(0.0).sqrt()
}

/// Exact discrete W^{1,2} norm (through grad_mass + mass).
pub fn w12_norm(space: &FeSpace, u: &[C64]) -> f64 {
    let g = space.grad_mass().sesquilinear(u, u).re;
    let m = space.mass().sesquilinear(u, u).re;
    (g + m).max(0.0).sqrt()
}

/// Dual-norm evaluation result; `converged` is false when the ascent for
/// q != 2 hit its iteration cap (the value is then a certified lower bound).
#[derive(Clone, Copy, Debug)]
pub struct DualNorm {
    pub value: f64,
    pub converged: bool,
}

/// Discrete negative-Sobolev norm of a dual vector f (entries <f, phi_a>).
///
/// For q = 2 this is the exact Riesz norm sqrt(f* w) with
/// (grad_mass + mass) w = f. For q != 2 it is the supremum of
/// |<f, v>| / ||v||_{W^{1,q'}} over FE functions, approximated by projected
/// gradient ascent started at the Riesz representer (relative tolerance
/// 1e-6, best-effort).
pub fn dual_norm(space: &FeSpace, f: &[C64], q: f64) -> Result<DualNorm> {
    if !(q > 1.0) || !q.is_finite() {
        return Err(Error::Parameter(format!("dual_norm: q = {q} outside (1, inf)")));
    }
    let fnorm: f64 = f.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if fnorm == 0.0 {
        return Ok(DualNorm { value: 0.0, converged: true });
    }
    let lu = space.riesz_lu()?;
    let w = lu.solve(f);
    let pairing: C64 = w.iter().zip(f).map(|(wi, fi)| wi.conj() * fi).sum();
    let q2_value = pairing.re.max(0.0).sqrt();
    if (q - 2.0).abs() < 1e-14 {
        return Ok(DualNorm { value: q2_value, converged: true });
    }

    let qp = q / (q - 1.0);
    let ratio = |v: &[C64]| -> f64 {
        let p: C64 = v.iter().zip(f).map(|(vi, fi)| vi.conj() * fi).sum();
        let n = w1q_norm(space, v, qp);
        if n == 0.0 {
            0.0
        } else {
            p.norm() / n
        }
    };

    let mut v = w.clone();
    let mut best = ratio(&v);
    let mut converged = false;
    let mut step = 1.0f64;
    for _iter in 0..200 {
        let grad = ratio_gradient(space, f, &v, qp);
        let gnorm: f64 = grad.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            converged = true;
            break;
        }
        let vnorm: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let mut improved = false;
        while step > 1e-12 {
            let trial: Vec<C64> = v
                .iter()
                .zip(&grad)
                .map(|(vi, gi)| vi + (step * vnorm / gnorm) * gi)
                .collect();
            let r = ratio(&trial);
            if r > best {
                let gain = (r - best) / best.max(1e-300);
                v = trial;
                best = r;
                improved = true;
                step *= 1.5;
                if gain < 1e-6 {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if converged || !improved {
            converged = converged || !improved && step <= 1e-12;
            break;
        }
    }
    Ok(DualNorm { value: best, converged })
}

/// Ascent direction for |<f, v>| / ||v||_{W^{1,q'}} at v (complex gradient).
fn ratio_gradient(space: &FeSpace, f: &[C64], v: &[C64], qp: f64) -> Vec<C64> {
    let mesh = space.mesh();
    let m = space.m;
    let n = space.num_free();
    // Norm value and the gradient of N(v)^{qp} (complex Wirtinger wrt conj v).
    let mut npow = 0.0f64;
    let mut grad_npow = vec![C64::new(0.0, 0.0); n];
    for t in 0..mesh.triangles.len() {
        let geo = tri_geometry(mesh, t);
        let w = geo.area / 3.0;
        let mut grads_c = vec![[C64::new(0.0, 0.0); 2]; m];
        for comp in 0..m {
            for a in 0..3 {
                if let Some(idx) = space.free_index(comp, geo.verts[a]) {
                    grads_c[comp][0] += v[idx] * geo.grads[a][0];
                    grads_c[comp][1] += v[idx] * geo.grads[a][1];
                }
            }
        }
        let g_sq: f64 = grads_c.iter().map(|g| g[0].norm_sqr() + g[1].norm_sqr()).sum();
        for qpt in 0..3 {
            let mut vals = vec![C64::new(0.0, 0.0); m];
            for comp in 0..m {
                for a in 0..3 {
                    if let Some(idx) = space.free_index(comp, geo.verts[a]) {
                        vals[comp] += v[idx] * BASIS_AT_QUAD[qpt][a];
                    }
                }
            }
            let s_sq: f64 = vals.iter().map(|z| z.norm_sqr()).sum();
            npow += w * (g_sq.powf(qp / 2.0) + s_sq.powf(qp / 2.0));
            let gfac = if g_sq > 0.0 { w * qp / 2.0 * g_sq.powf(qp / 2.0 - 1.0) } else { 0.0 };
            let sfac = if s_sq > 0.0 { w * qp / 2.0 * s_sq.powf(qp / 2.0 - 1.0) } else { 0.0 };
            for comp in 0..m {
                for a in 0..3 {
                    if let Some(idx) = space.free_index(comp, geo.verts[a]) {
                        if gfac > 0.0 {
                            grad_npow[idx] += gfac
                                * (grads_c[comp][0] * geo.grads[a][0]
                                    + grads_c[comp][1] * geo.grads[a][1]);
                        }
                        if sfac > 0.0 {
                            grad_npow[idx] += sfac * vals[comp] * BASIS_AT_QUAD[qpt][a];
                        }
                    }
                }
            }
        }
    }
    let nval = npow.powf(1.0 / qp);
    if nval == 0.0 {
        return f.to_vec();
    }
    // d/dconj(v) of N = N^{1-qp}/qp * d(N^qp); pairing gradient is f times
    // the phase that makes <f, v> real positive.
    let p: C64 = v.iter().zip(f).map(|(vi, fi)| vi.conj() * fi).sum();
    let pn = p.norm();
    let phase = if pn > 0.0 { p / pn } else { C64::new(1.0, 0.0) };
    let r = pn / nval;
    let nfac = nval.powf(1.0 - qp) / qp;
    f.iter()
        .zip(&grad_npow)
        .map(|(fi, gi)| (fi * phase.conj() - (r * nfac) * gi) / nval)
        .collect()
}
