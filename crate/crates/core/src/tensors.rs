//! Coefficient tensors for divergence-form systems and their pointwise
//! ellipticity constants.
//!
//! A tensor couples m components in d dimensions through four block grids:
//! second-order matrices `a[i][j]` (d x d), first-order vectors `b[i][j]`
//! (under the divergence) and `c[i][j]` (on the gradient), and zeroth-order
//! scalars `dd[i][j]`. The full block matrix acts on (u, grad u) stacked as
//! a vector in C^{m(d+1)}.
//!
//! The analyzers work on the principal (second-order) part only; the other
//! blocks enter the block operator norm.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{Mesh2D, Point};
use crate::linalg::dense::{hermitian_eigenvalues, DMat};
use crate::{C64, Error, Result};

/// Pointwise value of a coefficient tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlocks {
    pub m: usize,
    pub d: usize,
    /// Second-order blocks, index `i * m + j`, each d x d.
    pub a: Vec<DMat>,
    /// First-order blocks under the divergence, each of length d.
    pub b: Vec<Vec<C64>>,
    /// First-order blocks on the gradient, each of length d.
    pub c: Vec<Vec<C64>>,
    /// Zeroth-order scalars.
    pub dd: Vec<C64>,
}

impl TensorBlocks {
    pub fn zero(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            a: vec![DMat::zeros(d, d); m * m],
            b: vec![vec![C64::new(0.0, 0.0); d]; m * m],
            c: vec![vec![C64::new(0.0, 0.0); d]; m * m],
            dd: vec![C64::new(0.0, 0.0); m * m],
        }
    }

    pub fn identity(m: usize, d: usize) -> Self {
        let mut t = Self::zero(m, d);
        for i in 0..m {
            t.a[i * m + i] = DMat::identity(d);
        }
        t
    }

    /// Second-order-only tensor with scalar blocks `s[i][j] * I_d`.
    pub fn from_scalar_grid(scalars: &[Vec<C64>], d: usize) -> Self {
        let m = scalars.len();
        let mut t = Self::zero(m, d);
        for i in 0..m {
            assert_eq!(scalars[i].len(), m, "scalar grid must be square");
            for j in 0..m {
                let mut blk = DMat::zeros(d, d);
                for k in 0..d {
                    blk[(k, k)] = scalars[i][j];
                }
                t.a[i * m + j] = blk;
            }
        }
        t
    }

    pub fn scale(&self, factor: C64) -> Self {
        let mut out = self.clone();
        for blk in out.a.iter_mut() {
            for v in blk.data.iter_mut() {
                *v *= factor;
            }
        }
        for vecs in [&mut out.b, &mut out.c] {
            for v in vecs.iter_mut() {
                for x in v.iter_mut() {
                    *x *= factor;
                }
            }
        }
        for x in out.dd.iter_mut() {
            *x *= factor;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.m, self.d), (other.m, other.d));
        let mut out = self.clone();
        for (x, y) in out.a.iter_mut().zip(&other.a) {
            for (u, v) in x.data.iter_mut().zip(&y.data) {
                *u += v;
            }
        }
        for (mine, theirs) in [(&mut out.b, &other.b), (&mut out.c, &other.c)] {
            for (x, y) in mine.iter_mut().zip(theirs) {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += v;
                }
            }
        }
        for (u, v) in out.dd.iter_mut().zip(&other.dd) {
            *u += v;
        }
        out
    }

    /// Assemble the (m + m d) x (m + m d) block matrix acting on (u, grad u).
    pub fn block_matrix(&self) -> DMat {
        let (m, d) = (self.m, self.d);
        let n = m + m * d;
        let mut out = DMat::zeros(n, n);
        for i in 0..m {
            for j in 0..m {
                out[(i, j)] = self.dd[i * m + j];
                for l in 0..d {
                    out[(i, m + j * d + l)] = self.c[i * m + j][l];
                }
                for k in 0..d {
                    out[(m + i * d + k, j)] = self.b[i * m + j][k];
                    for l in 0..d {
                        out[(m + i * d + k, m + j * d + l)] = self.a[i * m + j][(k, l)];
                    }
                }
            }
        }
        out
    }

    /// Operator norm of the block matrix on C^{m(d+1)}.
    pub fn block_norm(&self) -> f64 {
        self.block_matrix().spectral_norm()
    }

    /// The md x md principal matrix acting on stacked gradients.
    pub fn principal_matrix(&self) -> DMat {
        let (m, d) = (self.m, self.d);
        let mut out = DMat::zeros(m * d, m * d);
        for i in 0..m {
            for j in 0..m {
                for k in 0..d {
                    for l in 0..d {
                        out[(i * d + k, j * d + l)] = self.a[i * m + j][(k, l)];
                    }
                }
            }
        }
        out
    }

    /// The m x m contraction `eta . a[i][j] eta` for a real direction eta.
    pub fn direction_matrix(&self, eta: &[f64]) -> DMat {
        let (m, d) = (self.m, self.d);
        assert_eq!(eta.len(), d);
        let mut out = DMat::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let blk = &self.a[i * m + j];
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..d {
                    for l in 0..d {
                        acc += eta[k] * blk[(k, l)] * eta[l];
                    }
                }
                out[(i, j)] = acc;
            }
        }
        out
    }
}

/// Coefficient tensor: constant or a spatial field.
#[derive(Clone)]
pub enum CoefficientTensor {
    Constant(TensorBlocks),
    Field {
        m: usize,
        d: usize,
        eval: Arc<dyn Fn(Point) -> TensorBlocks + Send + Sync>,
    },
}

impl std::fmt::Debug for CoefficientTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CoefficientTensor::Constant(b) => write!(f, "CoefficientTensor::Constant(m={}, d={})", b.m, b.d),
            CoefficientTensor::Field { m, d, .. } => write!(f, "CoefficientTensor::Field(m={m}, d={d})"),
        }
    }
}

impl CoefficientTensor {
    pub fn identity(m: usize, d: usize) -> Self {
        CoefficientTensor::Constant(TensorBlocks::identity(m, d))
    }

    pub fn m(&self) -> usize {
        match self {
            CoefficientTensor::Constant(b) => b.m,
            CoefficientTensor::Field { m, .. } => *m,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            CoefficientTensor::Constant(b) => b.d,
            CoefficientTensor::Field { d, .. } => *d,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoefficientTensor::Constant(_))
    }

    pub fn eval_at(&self, x: Point) -> TensorBlocks {
        match self {
            CoefficientTensor::Constant(b) => b.clone(),
            CoefficientTensor::Field { eval, .. } => eval(x),
        }
    }

    /// Constant-tensor sum; field tensors combine by closure.
    pub fn add(&self, other: &CoefficientTensor) -> CoefficientTensor {
        match (self, other) {
            (CoefficientTensor::Constant(x), CoefficientTensor::Constant(y)) => {
                CoefficientTensor::Constant(x.add(y))
            }
            _ => {
                let (m, d) = (self.m(), self.d());
                let lhs = self.clone();
                let rhs = other.clone();
                CoefficientTensor::Field {
                    m,
                    d,
                    eval: Arc::new(move |x| lhs.eval_at(x).add(&rhs.eval_at(x))),
                }
            }
        }
    }

    pub fn scale(&self, factor: C64) -> CoefficientTensor {
        match self {
            CoefficientTensor::Constant(b) => CoefficientTensor::Constant(b.scale(factor)),
            CoefficientTensor::Field { m, d, eval } => {
                let eval = eval.clone();
                CoefficientTensor::Field {
                    m: *m,
                    d: *d,
                    eval: Arc::new(move |x| eval(x).scale(factor)),
                }
            }
        }
    }
}

/// Time-dependent tensor family.
#[derive(Clone)]
pub enum FamilyMode {
    Constant(CoefficientTensor),
    /// Piecewise evaluation at the nearest tabulated time at or before t
    /// (solver steps evaluate at right endpoints, so nodes match exactly).
    Tabulated { times: Vec<f64>, tensors: Vec<CoefficientTensor> },
    /// Nonlocal-in-time map from a trajectory prefix; only the quasilinear
    /// solver can evaluate it.
    Nonlocal(Arc<dyn crate::quasilinear::CoefficientMap>),
}

impl std::fmt::Debug for FamilyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FamilyMode::Constant(t) => write!(f, "FamilyMode::Constant({t:?})"),
            FamilyMode::Tabulated { times, .. } => {
                write!(f, "FamilyMode::Tabulated({} nodes)", times.len())
            }
            FamilyMode::Nonlocal(_) => write!(f, "FamilyMode::Nonlocal"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorFamily {
    pub mode: FamilyMode,
    /// Declared bound on the sup-in-time block operator norm, when the
    /// family cannot be evaluated directly (nonlocal mode).
    pub declared_sup_norm: Option<f64>,
}

impl TensorFamily {
    pub fn constant(tensor: CoefficientTensor) -> Self {
        Self { mode: FamilyMode::Constant(tensor), declared_sup_norm: None }
    }

    pub fn tabulated(times: Vec<f64>, tensors: Vec<CoefficientTensor>) -> Result<Self> {
        if times.len() != tensors.len() || times.is_empty() {
            return Err(Error::Parameter("tabulated family needs matching nonempty lists".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("tabulated times must be strictly increasing".into()));
        }
        Ok(Self { mode: FamilyMode::Tabulated { times, tensors }, declared_sup_norm: None })
    }

    pub fn m(&self) -> Option<usize> {
        match &self.mode {
            FamilyMode::Constant(t) => Some(t.m()),
            FamilyMode::Tabulated { tensors, .. } => tensors.first().map(|t| t.m()),
            FamilyMode::Nonlocal(_) => None,
        }
    }

    /// Evaluate at time t; errors for nonlocal families.
    pub fn at_time(&self, t: f64) -> Result<CoefficientTensor> {
        match &self.mode {
            FamilyMode::Constant(tensor) => Ok(tensor.clone()),
            FamilyMode::Tabulated { times, tensors } => {
                let idx = match times.binary_search_by(|probe| {
                    probe.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)
                }) {
                    Ok(i) => i,
                    Err(0) => 0,
                    Err(i) => i - 1,
                };
                Ok(tensors[idx].clone())
            }
            FamilyMode::Nonlocal(_) => Err(Error::Precondition(
                "nonlocal tensor family cannot be evaluated without a trajectory; \
                 use the quasilinear solver"
                    .into(),
            )),
        }
    }
}

/// Smallest eigenvalue of the Hermitian part of the md x md principal block,
/// minimized over the sample points. A positive value certifies the strong
/// pointwise (all-gradients) positivity with that constant on the samples.
pub fn legendre_constant(tensor: &CoefficientTensor, sample_points: &[Point]) -> Result<f64> {
    if sample_points.is_empty() {
        return Err(Error::Parameter("legendre_constant: empty sample set".into()));
    }
    let mut min = f64::INFINITY;
    for &x in sample_points {
        let blocks = tensor.eval_at(x);
        let principal = blocks.principal_matrix();
        min = min.min(hermitian_eigenvalues(&principal)[0]);
    }
    Ok(min)
}

/// Quasi-uniform directions for d >= 3: Fibonacci sphere for d = 3, a fixed
/// seeded sample for higher d.
fn directions_nd(d: usize, grid: usize) -> Vec<Vec<f64>> {
    if d == 3 {
        let n = grid * grid / 4 + grid;
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        (0..n)
            .map(|k| {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let th = golden * k as f64;
                vec![r * th.cos(), r * th.sin(), z]
            })
            .collect()
    } else {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        (0..grid * grid)
            .map(|_| {
                let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= n);
                v
            })
            .collect()
    }
}

fn min_eig_direction(blocks: &TensorBlocks, eta: &[f64]) -> f64 {
    hermitian_eigenvalues(&blocks.direction_matrix(eta))[0]
}

/// Rank-one restriction of the pointwise positivity constant: minimum over
/// sample points and unit directions eta of the smallest eigenvalue of the
/// Hermitian part of the m x m contraction eta . a eta. A grid of
/// `eta_grid_size` directions is refined once around the minimizer (golden
/// section for d = 2, a local tangent pass otherwise).
pub fn legendre_hadamard_constant(
    tensor: &CoefficientTensor,
    sample_points: &[Point],
    eta_grid_size: usize,
) -> Result<f64> {
    if sample_points.is_empty() {
        return Err(Error::Parameter("legendre_hadamard_constant: empty sample set".into()));
    }
    if eta_grid_size < 8 {
        return Err(Error::Parameter("eta_grid_size must be at least 8".into()));
    }
    let d = tensor.d();
    let mut min = f64::INFINITY;
    for &x in sample_points {
        let blocks = tensor.eval_at(x);
        if d == 2 {
            let mut best_theta = 0.0;
            let mut best = f64::INFINITY;
            for g in 0..eta_grid_size {
                let theta = 2.0 * std::f64::consts::PI * g as f64 / eta_grid_size as f64;
                let v = min_eig_direction(&blocks, &[theta.cos(), theta.sin()]);
                if v < best {
                    best = v;
                    best_theta = theta;
                }
            }
            // One golden-section pass in the best grid cell.
            let spacing = 2.0 * std::f64::consts::PI / eta_grid_size as f64;
            let f = |theta: f64| min_eig_direction(&blocks, &[theta.cos(), theta.sin()]);
            let (mut lo, mut hi) = (best_theta - spacing, best_theta + spacing);
            let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
            let mut t1 = hi - inv_phi * (hi - lo);
            let mut t2 = lo + inv_phi * (hi - lo);
            let mut f1 = f(t1);
            let mut f2 = f(t2);
            for _ in 0..80 {
                if hi - lo < 1e-10 {
                    break;
                }
                if f1 < f2 {
                    hi = t2;
                    t2 = t1;
                    f2 = f1;
                    t1 = hi - inv_phi * (hi - lo);
                    f1 = f(t1);
                } else {
                    lo = t1;
                    t1 = t2;
                    f1 = f2;
                    t2 = lo + inv_phi * (hi - lo);
                    f2 = f(t2);
                }
            }
            min = min.min(best).min(f1).min(f2);
        } else {
            let dirs = directions_nd(d, eta_grid_size);
            let mut best = f64::INFINITY;
            let mut best_dir = dirs[0].clone();
            for eta in &dirs {
                let v = min_eig_direction(&blocks, eta);
                if v < best {
                    best = v;
                    best_dir = eta.clone();
                }
            }
            // Local refinement: perturb the best direction along coordinates.
            let delta = 1.0 / eta_grid_size as f64;
            for k in 0..d {
                for sgn in [-1.0, 1.0] {
                    let mut eta = best_dir.clone();
                    eta[k] += sgn * delta;
                    let n = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
                    eta.iter_mut().for_each(|x| *x /= n);
                    best = best.min(min_eig_direction(&blocks, &eta));
                }
            }
            min = min.min(best);
        }
    }
    Ok(min)
}

/// Sup over time samples and spatial points of the block operator norm.
pub fn tensor_sup_norm(
    family: &TensorFamily,
    t_samples: &[f64],
    spatial_points: &[Point],
) -> Result<f64> {
    if let FamilyMode::Nonlocal(_) = family.mode {
        return family.declared_sup_norm.ok_or_else(|| {
            Error::Precondition(
                "nonlocal family has no declared sup norm and cannot be sampled".into(),
            )
        });
    }
    if spatial_points.is_empty() {
        return Err(Error::Parameter("tensor_sup_norm: empty spatial sample set".into()));
    }
    let mut sup: f64 = 0.0;
    match &family.mode {
        FamilyMode::Constant(tensor) => {
            for &x in spatial_points {
                sup = sup.max(tensor.eval_at(x).block_norm());
            }
        }
        FamilyMode::Tabulated { .. } => {
            if t_samples.is_empty() {
                return Err(Error::Parameter("tensor_sup_norm: empty time sample set".into()));
            }
            for &t in t_samples {
                let tensor = family.at_time(t)?;
                for &x in spatial_points {
                    sup = sup.max(tensor.eval_at(x).block_norm());
                }
            }
        }
        FamilyMode::Nonlocal(_) => unreachable!(),
    }
    Ok(sup)
}

/// Pointwise ellipticity analysis summary. The coercivity entry is filled by
/// the discrete operator module; the pointwise analyzers populate the rest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub gamma_legendre: f64,
    pub gamma_lh: f64,
    pub gamma_garding: Option<f64>,
    pub lambda_used: f64,
    /// Block operator norm bound used in the estimates.
    pub m_norm: f64,
    pub legendre_ok: bool,
    pub lh_ok: bool,
    pub garding_ok: Option<bool>,
    pub caveats: Vec<String>,
}

/// Run both pointwise analyzers over the sample set.
pub fn analyze(
    tensor: &CoefficientTensor,
    sample_points: &[Point],
    eta_grid_size: usize,
    lambda: f64,
) -> Result<EllipticityReport> {
    let gamma_legendre = legendre_constant(tensor, sample_points)?;
    let gamma_lh = legendre_hadamard_constant(tensor, sample_points, eta_grid_size)?;
    let mut m_norm: f64 = 0.0;
    for &x in sample_points {
        m_norm = m_norm.max(tensor.eval_at(x).block_norm());
    }
    Ok(EllipticityReport {
        gamma_legendre,
        gamma_lh,
        gamma_garding: None,
        lambda_used: lambda,
        m_norm,
        legendre_ok: gamma_legendre > 0.0,
        lh_ok: gamma_lh > 0.0,
        garding_ok: None,
        caveats: Vec::new(),
    })
}

/// Discrete oscillation probe: interpolates the modulated sawtooth
/// `eps * bump(x) * saw((eta.x)/eps) * zeta` onto the full-Dirichlet space
/// and returns the energy quotient Re<L u, u> / int |grad u|^2 for each
/// eps. The quotients approach the rank-one form value in direction
/// (eta, zeta).
///
/// Error structure: all components of the probe field are proportional to
/// one scalar profile, so for tensors whose second-order blocks are scalar
/// multiples of the identity the quotient *equals* the rank-one value for
/// every eps (exactly, up to round-off). For matrix-valued blocks the
/// deviation is O(eps^2) from the bump modulation plus a mesh bias; choose
/// eta along a grid direction with eps a multiple of the mesh pitch, so the
/// sawtooth kinks fall on mesh lines and the interpolation stays sharp.
pub fn sawtooth_probe(
    tensor: &CoefficientTensor,
    eta: [f64; 2],
    zeta: &[C64],
    eps_list: &[f64],
    mesh: &Mesh2D,
) -> Result<Vec<f64>> {
    if !tensor.is_constant() {
        return Err(Error::Precondition("sawtooth_probe requires a constant tensor".into()));
    }
    if tensor.d() != 2 {
        return Err(Error::Precondition("sawtooth_probe runs on 2-D meshes".into()));
    }
    let m = tensor.m();
    if zeta.len() != m {
        return Err(Error::Dimension(format!(
            "zeta has {} entries, tensor couples {m} components",
            zeta.len()
        )));
    }
    if mesh.num_components != m {
        return Err(Error::Dimension(format!(
            "mesh carries {} components, tensor couples {m}",
            mesh.num_components
        )));
    }
    if eps_list.is_empty() || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Parameter("eps_list must be decreasing and nonempty".into()));
    }
    // Full Dirichlet on every component keeps the probe admissible.
    let nb = mesh.boundary_edges.len();
    for comp in 0..m {
        if mesh.dirichlet_parts[comp].len() != nb {
            return Err(Error::Precondition(format!(
                "sawtooth_probe needs full Dirichlet data; component {comp} covers {} of {nb} \
                 boundary edges",
                mesh.dirichlet_parts[comp].len()
            )));
        }
    }
    let finest = *eps_list.last().unwrap();
    if mesh.max_edge_length() > 0.5 * finest {
        return Err(Error::Precondition(format!(
            "mesh too coarse for eps = {finest}: max edge {} exceeds eps/2",
            mesh.max_edge_length()
        )));
    }

    let space = crate::elliptic::FeSpace::new(mesh)?;
    let op = crate::elliptic::assemble(&space, tensor)?;

    // Bump vanishing on the boundary of the bounding box, smooth inside.
    let xs: Vec<f64> = mesh.vertices.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = mesh.vertices.iter().map(|p| p[1]).collect();
    let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x1 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y0 = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y1 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bump = move |p: Point| -> f64 {
        let sx = ((p[0] - x0) / (x1 - x0) * std::f64::consts::PI).sin();
        let sy = ((p[1] - y0) / (y1 - y0) * std::f64::consts::PI).sin();
        sx * sx * sy * sy
    };
    // 2-periodic sawtooth induced by 1 - |t| on [-1, 1].
    let saw = |t: f64| -> f64 {
        let w = (t + 1.0).rem_euclid(2.0) - 1.0;
        1.0 - w.abs()
    };

    let mut quotients = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut u = vec![C64::new(0.0, 0.0); space.num_free()];
        for v in 0..mesh.vertices.len() {
            let p = mesh.vertices[v];
            let amp = eps * bump(p) * saw((eta[0] * p[0] + eta[1] * p[1]) / eps);
            for comp in 0..m {
                if let Some(idx) = space.free_index(comp, v) {
                    u[idx] = amp * zeta[comp];
                }
            }
        }
        let num = op.stiffness.sesquilinear(&u, &u).re;
        let den = op.grad_mass.sesquilinear(&u, &u).re;
        if den <= 0.0 {
            return Err(Error::Solver(format!(
                "sawtooth probe produced a null gradient at eps = {eps}"
            )));
        }
        quotients.push(num / den);
    }
    Ok(quotients)
}

// ---------------------------------------------------------------------------
// JSON literal format: complex numbers as [re, im] pairs.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorJson {
    pub m: usize,
    pub d: usize,
    #[serde(default, rename = "A")]
    pub a: Option<Vec<Vec<Vec<Vec<[f64; 2]>>>>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<Vec<[f64; 2]>>>>,
    #[serde(default)]
    pub c: Option<Vec<Vec<Vec<[f64; 2]>>>>,
    #[serde(default)]
    pub dd: Option<Vec<Vec<[f64; 2]>>>,
}

impl TensorJson {
    pub fn to_blocks(&self) -> Result<TensorBlocks> {
        let (m, d) = (self.m, self.d);
        if m == 0 || d == 0 {
            return Err(Error::Tensor("m and d must be positive".into()));
        }
        let mut t = TensorBlocks::zero(m, d);
        if let Some(a) = &self.a {
            if a.len() != m {
                return Err(Error::Tensor(format!("A has {} rows, expected {m}", a.len())));
            }
            for i in 0..m {
                if a[i].len() != m {
                    return Err(Error::Tensor(format!("A[{i}] has {} entries", a[i].len())));
                }
                for j in 0..m {
                    let blk = &a[i][j];
                    if blk.len() != d || blk.iter().any(|row| row.len() != d) {
                        return Err(Error::Tensor(format!("A[{i}][{j}] is not {d}x{d}")));
                    }
                    for k in 0..d {
                        for l in 0..d {
                            t.a[i * m + j][(k, l)] = C64::new(blk[k][l][0], blk[k][l][1]);
                        }
                    }
                }
            }
        }
        for (name, src, dst) in
            [("b", &self.b, &mut t.b), ("c", &self.c, &mut t.c)]
        {
            if let Some(grid) = src {
                if grid.len() != m || grid.iter().any(|r| r.len() != m) {
                    return Err(Error::Tensor(format!("{name} grid is not {m}x{m}")));
                }
                for i in 0..m {
                    for j in 0..m {
                        if grid[i][j].len() != d {
                            return Err(Error::Tensor(format!(
                                "{name}[{i}][{j}] has {} entries, expected {d}",
                                grid[i][j].len()
                            )));
                        }
                        for k in 0..d {
                            dst[i * m + j][k] = C64::new(grid[i][j][k][0], grid[i][j][k][1]);
                        }
                    }
                }
            }
        }
        if let Some(dd) = &self.dd {
            if dd.len() != m || dd.iter().any(|r| r.len() != m) {
                return Err(Error::Tensor(format!("dd grid is not {m}x{m}")));
            }
            for i in 0..m {
                for j in 0..m {
                    t.dd[i * m + j] = C64::new(dd[i][j][0], dd[i][j][1]);
                }
            }
        }
        Ok(t)
    }

    pub fn from_blocks(t: &TensorBlocks) -> Self {
        let (m, d) = (t.m, t.d);
        let pair = |z: C64| [z.re, z.im];
        let a = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        (0..d)
                            .map(|k| (0..d).map(|l| pair(t.a[i * m + j][(k, l)])).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let grid = |src: &Vec<Vec<C64>>| {
            (0..m)
                .map(|i| {
                    (0..m)
                        .map(|j| (0..d).map(|k| pair(src[i * m + j][k])).collect())
                        .collect()
                })
                .collect()
        };
        let dd = (0..m)
            .map(|i| (0..m).map(|j| pair(t.dd[i * m + j])).collect())
            .collect();
        Self { m, d, a: Some(a), b: Some(grid(&t.b)), c: Some(grid(&t.c)), dd: Some(dd) }
    }
}

/// Parse a constant tensor from its JSON literal.
pub fn tensor_from_json(value: &serde_json::Value) -> Result<CoefficientTensor> {
    let dto: TensorJson = serde_json::from_value(value.clone())?;
    Ok(CoefficientTensor::Constant(dto.to_blocks()?))
}

/// Parse a tabulated family from an array of (t, tensor) pairs.
pub fn family_from_json(value: &serde_json::Value) -> Result<TensorFamily> {
    #[derive(Deserialize)]
    struct Pair(f64, TensorJson);
    let pairs: Vec<Pair> = serde_json::from_value(value.clone())?;
    let mut times = Vec::with_capacity(pairs.len());
    let mut tensors = Vec::with_capacity(pairs.len());
    for Pair(t, dto) in pairs {
        times.push(t);
        tensors.push(CoefficientTensor::Constant(dto.to_blocks()?));
    }
    TensorFamily::tabulated(times, tensors)
}
