//! Two-species chemotaxis system: species densities u1, u2 with
//! state-dependent diffusion and attractant-driven drift, attractant
//! concentrations v1, v2 with linear diffusion and polynomial reactions.
//!
//! ```text
//! u1' - div(kappa1(u1,v1) grad u1) = div(sigma1(u1,v1)(grad v1 - grad u2))
//! v1' - alpha1 lap v1 = g1(u1,v1,u2,v2)
//! u2' - div(kappa2(u2,v2) grad u2) = div(sigma2(u2,v2)(grad v2 - grad u1))
//! v2' - alpha2 lap v2 = g2(u1,v1,u2,v2)
//! ```
//!
//! with homogeneous Neumann boundaries. Two solve paths are provided:
//! the full 4-component system, and the reduced 2-component system in
//! (u1, u2) whose coefficients come from solving the linear attractant
//! equations along the trajectory prefix (a nonlocal-in-time, Volterra
//! operation). The drift contribution of the attractants enters the reduced
//! system as a dual-vector right-hand side, so the reduced principal part
//! is exactly the 2 x 2 tensor [[kappa1, -sigma1], [-sigma2, kappa2]].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::elliptic::{assemble, FeSpace};
use crate::fields::{Poly4, ScalarFn2};
use crate::geometry::{build_mesh, BcSpec, DomainSpec, Mesh2D, Point};
use crate::linalg::lu::SparseLu;
use crate::linalg::sparse::Csr;
use crate::parabolic::TimeGrid;
use crate::quasilinear::{
    picard_solve_fresh, CoefficientMap, PicardOptions, SourceMap, TrajectoryPrefix,
};
use crate::tensors::{legendre_constant, CoefficientTensor, TensorBlocks};
use crate::{C64, Error, FeVec, Result};

/// Initial data selection for one field.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialField {
    Zero,
    Constant { value: f64 },
    /// amplitude * cos^2(pi r / 2) inside r = |p - center| / width < 1.
    Bump { amplitude: f64, center: [f64; 2], width: f64 },
}

impl InitialField {
    pub fn eval(&self, p: Point) -> f64 {
        match self {
            InitialField::Zero => 0.0,
            InitialField::Constant { value } => *value,
            InitialField::Bump { amplitude, center, width } => {
                let r = (((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt())
                    / width;
                if r >= 1.0 {
                    0.0
                } else {
                    let c = (std::f64::consts::FRAC_PI_2 * r).cos();
                    amplitude * c * c
                }
            }
        }
    }
}

/// Model parameters; coefficient functions are registered closures.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChemotaxisParams {
    pub kappa1: ScalarFn2,
    pub kappa2: ScalarFn2,
    pub sigma1: ScalarFn2,
    pub sigma2: ScalarFn2,
    pub alpha1: f64,
    pub alpha2: f64,
    pub g1: Poly4,
    pub g2: Poly4,
    /// Initial data for (u1, v1, u2, v2).
    pub initial: [InitialField; 4],
    /// Dirichlet segments per field (u1, v1, u2, v2); omitted fields get
    /// homogeneous Neumann boundaries, the model default.
    #[serde(default)]
    pub dirichlet_segments: Option<[Vec<usize>; 4]>,
}

impl ChemotaxisParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 <= 0.0 || self.alpha2 <= 0.0 {
            return Err(Error::Parameter(format!(
                "attractant diffusivities must be positive, got ({}, {})",
                self.alpha1, self.alpha2
            )));
        }
        self.g1.validate()?;
        self.g2.validate()?;
        // Diffusion must stay positive on the physical state box [0,1]^2.
        for k in 0..=4 {
            for l in 0..=4 {
                let (u, v) = (k as f64 / 4.0, l as f64 / 4.0);
                if self.kappa1.eval(u, v) <= 0.0 || self.kappa2.eval(u, v) <= 0.0 {
                    return Err(Error::Parameter(format!(
                        "diffusion nonpositive at state ({u}, {v})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Both conditioning checks at a pointwise state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    /// Rank-one positivity of the full tensor fails at the evaluated state.
    pub lh_fails_full: bool,
    /// Which species subtensor witnessed the failure, with values.
    pub lh_witness: Option<String>,
    /// Pointwise constant of the reduced 2 x 2 tensor.
    pub legendre_reduced: f64,
    /// |sigma_i| - 2 sqrt(kappa_i alpha_i) per species (failure iff >= 0).
    pub margin_species: [f64; 2],
    /// min(kappa1, kappa2) - |sigma1 + sigma2| / 2 (sufficient when > 0).
    pub reduced_margin: f64,
    pub state: [f64; 4],
}

/// Evaluate both inequalities at a pointwise state (u1, v1, u2, v2).
pub fn condition_report(p: &ChemotaxisParams, state: [f64; 4]) -> ConditionReport {
    let [u1, v1, u2, v2] = state;
    let k1 = p.kappa1.eval(u1, v1);
    let k2 = p.kappa2.eval(u2, v2);
    let s1 = p.sigma1.eval(u1, v1);
    let s2 = p.sigma2.eval(u2, v2);
    let m1 = s1.abs() - 2.0 * (k1 * p.alpha1).sqrt();
    let m2 = s2.abs() - 2.0 * (k2 * p.alpha2).sqrt();
    let lh_fails_full = m1 >= 0.0 || m2 >= 0.0;
    let lh_witness = if m1 >= 0.0 {
        Some(format!("(u1, v1) block: |sigma1| = {} >= 2 sqrt(kappa1 alpha1) = {}",
                     s1.abs(), 2.0 * (k1 * p.alpha1).sqrt()))
    } else if m2 >= 0.0 {
        Some(format!("(u2, v2) block: |sigma2| = {} >= 2 sqrt(kappa2 alpha2) = {}",
                     s2.abs(), 2.0 * (k2 * p.alpha2).sqrt()))
    } else {
        None
    };
    let reduced = reduced_tensor_at(k1, k2, s1, s2);
    let legendre_reduced = legendre_constant(&reduced, &[[0.0, 0.0]]).unwrap_or(f64::NAN);
    ConditionReport {
        lh_fails_full,
        lh_witness,
        legendre_reduced,
        margin_species: [m1, m2],
        reduced_margin: k1.min(k2) - 0.5 * (s1 + s2).abs(),
        state,
    }
}

/// The 4 x 4 system tensor at a pointwise state, rows/columns ordered
/// (u1, v1, u2, v2); every entry is the scalar times the 2 x 2 identity.
pub fn full_tensor(p: &ChemotaxisParams, state: [f64; 4]) -> Result<CoefficientTensor> {
    let [u1, v1, u2, v2] = state;
    let k1 = p.kappa1.eval(u1, v1);
    let k2 = p.kappa2.eval(u2, v2);
    if k1 <= 0.0 || k2 <= 0.0 || p.alpha1 <= 0.0 || p.alpha2 <= 0.0 {
        return Err(Error::Parameter(format!(
            "nonpositive diffusion at state {state:?}: kappa = ({k1}, {k2}), alpha = ({}, {})",
            p.alpha1, p.alpha2
        )));
    }
    let s1 = p.sigma1.eval(u1, v1);
    let s2 = p.sigma2.eval(u2, v2);
    Ok(CoefficientTensor::Constant(full_blocks(k1, k2, s1, s2, p.alpha1, p.alpha2)))
}

fn full_blocks(k1: f64, k2: f64, s1: f64, s2: f64, a1: f64, a2: f64) -> TensorBlocks {
    let z = C64::new(0.0, 0.0);
    let r = |x: f64| C64::new(x, 0.0);
    let scalars = vec![
        vec![r(k1), r(s1), r(-s1), z],
        vec![z, r(a1), z, z],
        vec![r(-s2), z, r(k2), r(s2)],
        vec![z, z, z, r(a2)],
    ];
    TensorBlocks::from_scalar_grid(&scalars, 2)
}

fn reduced_tensor_at(k1: f64, k2: f64, s1: f64, s2: f64) -> CoefficientTensor {
    let r = |x: f64| C64::new(x, 0.0);
    let scalars = vec![vec![r(k1), r(-s1)], vec![r(-s2), r(k2)]];
    CoefficientTensor::Constant(TensorBlocks::from_scalar_grid(&scalars, 2))
}

/// Meshes and spaces shared by both solve paths.
pub struct ChemotaxisSetup {
    pub params: ChemotaxisParams,
    pub grid: TimeGrid,
    /// (u1, v1, u2, v2) with the per-field boundary parts.
    pub space4: FeSpace,
    /// (u1, u2) with the species boundary parts.
    pub space2: FeSpace,
    /// Attractant spaces (v1, v2) with their boundary parts.
    pub space_v: [FeSpace; 2],
    /// Scalar Neumann space used for interpolation and integrals.
    pub space1: FeSpace,
}

impl ChemotaxisSetup {
    /// Build spaces over a structured mesh of the domain; fields without
    /// declared Dirichlet segments get homogeneous Neumann boundaries.
    pub fn new(
        params: ChemotaxisParams,
        domain: &DomainSpec,
        h: f64,
        grid: TimeGrid,
    ) -> Result<Self> {
        params.validate()?;
        let segs = params
            .dirichlet_segments
            .clone()
            .unwrap_or([Vec::new(), Vec::new(), Vec::new(), Vec::new()]);
        let bc4 = BcSpec { num_components: 4, dirichlet_segments: segs.to_vec() };
        let mesh4 = build_mesh(domain, h, &bc4)?;
        let mesh2 = with_parts(&mesh4, &[0, 2]);
        let mesh_v1 = with_parts(&mesh4, &[1]);
        let mesh_v2 = with_parts(&mesh4, &[3]);
        let mut mesh1 = mesh4.clone();
        mesh1.num_components = 1;
        mesh1.dirichlet_parts = vec![Vec::new()];
        Ok(Self {
            params,
            grid,
            space4: FeSpace::new(&mesh4)?,
            space2: FeSpace::new(&mesh2)?,
            space_v: [FeSpace::new(&mesh_v1)?, FeSpace::new(&mesh_v2)?],
            space1: FeSpace::new(&mesh1)?,
        })
    }

    fn initial_nodal(&self, field: usize) -> Vec<C64> {
        let on_dirichlet = self.space4.mesh().dirichlet_vertices(field);
        self.space1
            .mesh()
            .vertices
            .iter()
            .enumerate()
            .map(|(v, &p)| {
                if on_dirichlet[v] {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(self.params.initial[field].eval(p), 0.0)
                }
            })
            .collect()
    }
}

/// Same mesh with a subset of the field boundary parts.
fn with_parts(mesh: &Mesh2D, fields: &[usize]) -> Mesh2D {
    let mut out = mesh.clone();
    out.num_components = fields.len();
    out.dirichlet_parts = fields.iter().map(|&f| mesh.dirichlet_parts[f].clone()).collect();
    out
}

// ---------------------------------------------------------------------------
// Full 4-component path.

/// Local-in-time coefficient map: the full tensor evaluated at the P1
/// interpolant of the latest prefix state.
pub struct FullSystem {
    pub params: ChemotaxisParams,
    pub space4: FeSpace,
}

impl CoefficientMap for FullSystem {
    fn tensor_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<CoefficientTensor> {
        let nodal = self.space4.scatter(prefix.latest());
        let params = self.params.clone();
        let space = self.space4.clone();
        Ok(CoefficientTensor::Field {
            m: 4,
            d: 2,
            eval: Arc::new(move |p: Point| {
                let state = [
                    space.eval_nodal(&nodal[0], p).re,
                    space.eval_nodal(&nodal[1], p).re,
                    space.eval_nodal(&nodal[2], p).re,
                    space.eval_nodal(&nodal[3], p).re,
                ];
                let k1 = params.kappa1.eval(state[0], state[1]);
                let k2 = params.kappa2.eval(state[2], state[3]);
                let s1 = params.sigma1.eval(state[0], state[1]);
                let s2 = params.sigma2.eval(state[2], state[3]);
                full_blocks(k1, k2, s1, s2, params.alpha1, params.alpha2)
            }),
        })
    }
}

/// Reaction right-hand sides for the attractant rows of the full system.
pub struct FullReactions {
    pub params: ChemotaxisParams,
    pub space4: FeSpace,
}

impl SourceMap for FullReactions {
    fn dual_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<FeVec> {
        let nodal = self.space4.scatter(prefix.latest());
        let params = &self.params;
        let space = &self.space4;
        Ok(space.load_vector(|comp, p| {
            if comp == 1 || comp == 3 {
                let state = [
                    space.eval_nodal(&nodal[0], p).re,
                    space.eval_nodal(&nodal[1], p).re,
                    space.eval_nodal(&nodal[2], p).re,
                    space.eval_nodal(&nodal[3], p).re,
                ];
                let g = if comp == 1 { &params.g1 } else { &params.g2 };
                C64::new(g.eval(state), 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }))
    }
}

// ---------------------------------------------------------------------------
// Reduced 2-component path.

/// Nonlocal reduction: the attractants are eliminated by solving their
/// linear equations over the trajectory prefix; the resulting 2 x 2 tensor
/// and the drift right-hand side both consume only the prefix, so the map
/// is Volterra by construction.
pub struct ReducedSystem {
    params: ChemotaxisParams,
    space2: FeSpace,
    space_v: [FeSpace; 2],
    space1: FeSpace,
    grid: TimeGrid,
    /// Initial attractant data as free-dof vectors of the v spaces.
    v0: [FeVec; 2],
    lu_v: [SparseLu; 2],
    inner_tol: f64,
}

impl ReducedSystem {
    pub fn new(setup: &ChemotaxisSetup) -> Result<Self> {
        let tau = setup.grid.tau();
        let make_lu = |space: &FeSpace, alpha: f64| -> Result<SparseLu> {
            let a = Csr::linear_combination(
                C64::new(1.0, 0.0),
                space.mass(),
                C64::new(tau * alpha, 0.0),
                space.grad_mass(),
            );
            SparseLu::factor(&a)
        };
        let v0 = [
            setup.space_v[0].restrict(&[setup.initial_nodal(1)]),
            setup.space_v[1].restrict(&[setup.initial_nodal(3)]),
        ];
        Ok(Self {
            params: setup.params.clone(),
            space2: setup.space2.clone(),
            space_v: setup.space_v.clone(),
            space1: setup.space1.clone(),
            grid: setup.grid.clone(),
            v0,
            lu_v: [
                make_lu(&setup.space_v[0], setup.params.alpha1)?,
                make_lu(&setup.space_v[1], setup.params.alpha2)?,
            ],
            inner_tol: 1e-10,
        })
    }

    /// March the attractant equations over the prefix; returns the nodal
    /// attractant fields at every node 0..=n.
    fn solve_attractants(&self, prefix: &TrajectoryPrefix<'_>) -> Result<[Vec<Vec<C64>>; 2]> {
        let n = prefix.node();
        let tau = self.grid.tau();
        let nodal_of = |i: usize, free: &FeVec| -> Vec<C64> {
            self.space_v[i].scatter(free).remove(0)
        };
        let mut free1 = self.v0[0].clone();
        let mut free2 = self.v0[1].clone();
        let mut v1 = vec![nodal_of(0, &free1)];
        let mut v2 = vec![nodal_of(1, &free2)];
        let nonlinear_in_v =
            self.params.g1.depends_on_v() || self.params.g2.depends_on_v();
        for k in 1..=n {
            let u_nodal = self.space2.scatter(&prefix.values[k]);
            let mut v1k = free1.clone();
            let mut v2k = free2.clone();
            let sweeps = if nonlinear_in_v { 20 } else { 2 };
            let mut prev_change = f64::INFINITY;
            for sweep in 0..sweeps {
                let n1 = nodal_of(0, &v1k);
                let n2 = nodal_of(1, &v2k);
                let state_of = |p: Point| -> [f64; 4] {
                    [
                        self.space1.eval_nodal(&u_nodal[0], p).re,
                        self.space1.eval_nodal(&n1, p).re,
                        self.space1.eval_nodal(&u_nodal[1], p).re,
                        self.space1.eval_nodal(&n2, p).re,
                    ]
                };
                let load1 = self.space_v[0]
                    .load_vector(|_, p| C64::new(self.params.g1.eval(state_of(p)), 0.0));
                let load2 = self.space_v[1]
                    .load_vector(|_, p| C64::new(self.params.g2.eval(state_of(p)), 0.0));
                let mut rhs1 = self.space_v[0].mass().matvec(&free1);
                for (r, f) in rhs1.iter_mut().zip(&load1) {
                    *r += tau * f;
                }
                let mut rhs2 = self.space_v[1].mass().matvec(&free2);
                for (r, f) in rhs2.iter_mut().zip(&load2) {
                    *r += tau * f;
                }
                let new1 = self.lu_v[0].solve(&rhs1);
                let new2 = self.lu_v[1].solve(&rhs2);
                let change: f64 = new1
                    .iter()
                    .zip(&v1k)
                    .chain(new2.iter().zip(&v2k))
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                v1k = new1;
                v2k = new2;
                if change <= self.inner_tol {
                    break;
                }
                if !nonlinear_in_v && change >= prev_change && sweep > 0 {
                    break;
                }
                prev_change = change;
            }
            free1 = v1k;
            free2 = v2k;
            v1.push(nodal_of(0, &free1));
            v2.push(nodal_of(1, &free2));
        }
        Ok([v1, v2])
    }

    /// Attractant fields at the final prefix node.
    pub fn attractants_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<[Vec<C64>; 2]> {
        let hist = self.solve_attractants(prefix)?;
        Ok([hist[0].last().unwrap().clone(), hist[1].last().unwrap().clone()])
    }
}

impl CoefficientMap for ReducedSystem {
    fn tensor_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<CoefficientTensor> {
        let [v1, v2] = self.attractants_at(prefix)?;
        let u_nodal = self.space2.scatter(prefix.latest());
        let params = self.params.clone();
        let space1 = self.space1.clone();
        Ok(CoefficientTensor::Field {
            m: 2,
            d: 2,
            eval: Arc::new(move |p: Point| {
                let u1 = space1.eval_nodal(&u_nodal[0], p).re;
                let u2 = space1.eval_nodal(&u_nodal[1], p).re;
                let s1v = space1.eval_nodal(&v1, p).re;
                let s2v = space1.eval_nodal(&v2, p).re;
                let r = |x: f64| C64::new(x, 0.0);
                let scalars = vec![
                    vec![r(params.kappa1.eval(u1, s1v)), r(-params.sigma1.eval(u1, s1v))],
                    vec![r(-params.sigma2.eval(u2, s2v)), r(params.kappa2.eval(u2, s2v))],
                ];
                TensorBlocks::from_scalar_grid(&scalars, 2)
            }),
        })
    }
}

impl SourceMap for ReducedSystem {
    /// Drift duals: <Phi_i, w> = -int sigma_i(u_i, v_i) grad v_i . grad w.
    fn dual_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<FeVec> {
        let [v1, v2] = self.attractants_at(prefix)?;
        let u_nodal = self.space2.scatter(prefix.latest());
        let mesh = self.space2.mesh().clone();
        let mut out = vec![C64::new(0.0, 0.0); self.space2.num_free()];
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangles[t];
            let verts = [a, b, c];
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
            for (comp, v_field) in [(0usize, &v1), (1usize, &v2)] {
                // Gradient of the attractant on this triangle.
                let mut gv = [C64::new(0.0, 0.0); 2];
                for (k, &vtx) in verts.iter().enumerate() {
                    gv[0] += v_field[vtx] * grads[k][0];
                    gv[1] += v_field[vtx] * grads[k][1];
                }
                for &xq in &quad {
                    let ui = self.space1.eval_nodal(&u_nodal[comp], xq).re;
                    let vi = self.space1.eval_nodal(v_field, xq).re;
                    let sigma = if comp == 0 {
                        self.params.sigma1.eval(ui, vi)
                    } else {
                        self.params.sigma2.eval(ui, vi)
                    };
                    let w = area / 3.0;
                    for (k, &vtx) in verts.iter().enumerate() {
                        if let Some(idx) = self.space2.free_index(comp, vtx) {
                            out[idx] -= w
                                * sigma
                                * (gv[0] * grads[k][0] + gv[1] * grads[k][1]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Simulation driver.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulateMode {
    Full4,
    Reduced2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationResult {
    pub mode: SimulateMode,
    /// Per field (u1, v1, u2, v2): nodal real values at every node.
    pub fields: Vec<Vec<Vec<f64>>>,
    pub condition: ConditionReport,
    /// Integral of each species density at every node.
    pub species_mass: [Vec<f64>; 2],
    /// Largest relative drift of the species integrals.
    pub mass_drift: f64,
    /// Minimum nodal value per field over the run (no positivity claim).
    pub min_values: [f64; 4],
    pub picard_iterations: usize,
    pub flags: Vec<String>,
}

fn field_integral(space1: &FeSpace, nodal: &[f64]) -> f64 {
    let ones = vec![C64::new(1.0, 0.0); nodal.len()];
    let v: Vec<C64> = nodal.iter().map(|&x| C64::new(x, 0.0)).collect();
    space1.mass().sesquilinear(&ones, &v).re
}

/// Run the model in one of the two modes and report trajectories plus
/// diagnostics. The condition report is evaluated at the vertex states of
/// the initial data (worst case over vertices).
pub fn simulate(
    setup: &ChemotaxisSetup,
    mode: SimulateMode,
    tol: f64,
) -> Result<SimulationResult> {
    let nv = setup.space1.mesh().vertices.len();
    let initial: Vec<Vec<C64>> = (0..4).map(|f| setup.initial_nodal(f)).collect();

    // Condition report: aggregate over vertex states.
    let mut condition = condition_report(
        &setup.params,
        [initial[0][0].re, initial[1][0].re, initial[2][0].re, initial[3][0].re],
    );
    for v in 1..nv {
        let state = [
            initial[0][v].re,
            initial[1][v].re,
            initial[2][v].re,
            initial[3][v].re,
        ];
        let r = condition_report(&setup.params, state);
        if r.legendre_reduced < condition.legendre_reduced {
            condition.legendre_reduced = r.legendre_reduced;
            condition.reduced_margin = r.reduced_margin;
            condition.state = state;
        }
        if r.lh_fails_full && !condition.lh_fails_full {
            condition.lh_fails_full = true;
            condition.lh_witness = r.lh_witness;
            condition.margin_species = r.margin_species;
        }
    }

    let mut flags = Vec::new();
    let opts = PicardOptions { tol, max_iter: 50, cutoff: None, keep_initial_guess: false };

    let (fields, picard_iterations) = match mode {
        SimulateMode::Full4 => {
            // Coercivity screen at the initial state.
            let state0 = condition.state;
            let tensor0 = full_tensor(&setup.params, state0)?;
            let op = assemble(&setup.space4, &tensor0)?;
            let gamma = op.garding_constant(1.0)?;
            if gamma <= 0.0 {
                flags.push(format!(
                    "non-coercive at the initial state (discrete constant {gamma:.3e}); \
                     expect failure diagnostics"
                ));
            }
            let a_map = FullSystem { params: setup.params.clone(), space4: setup.space4.clone() };
            let phi = FullReactions { params: setup.params.clone(), space4: setup.space4.clone() };
            let u0 = setup.space4.restrict(&initial);
            let res = picard_solve_fresh(&a_map, &phi, &u0, &setup.space4, &setup.grid, &opts)?;
            let mut fields = vec![vec![vec![0.0; nv]; setup.grid.steps + 1]; 4];
            for (n, v) in res.trajectory.values.iter().enumerate() {
                let nodal = setup.space4.scatter(v);
                for f in 0..4 {
                    for vert in 0..nv {
                        fields[f][n][vert] = nodal[f][vert].re;
                    }
                }
            }
            (fields, res.iterations)
        }
        SimulateMode::Reduced2 => {
            if condition.legendre_reduced <= 0.0 {
                flags.push(format!(
                    "reduced tensor not pointwise positive at the initial state \
                     (constant {:.3e})",
                    condition.legendre_reduced
                ));
            }
            let reduced = ReducedSystem::new(setup)?;
            let u0 = setup.space2.restrict(&[initial[0].clone(), initial[2].clone()]);
            let res = picard_solve_fresh(
                &reduced,
                &reduced,
                &u0,
                &setup.space2,
                &setup.grid,
                &opts,
            )?;
            // Recover the attractants along the final trajectory.
            let times = setup.grid.nodes();
            let prefix = TrajectoryPrefix {
                times: &times,
                values: &res.trajectory.values,
            };
            let hist = reduced.solve_attractants(&prefix)?;
            let mut fields = vec![vec![vec![0.0; nv]; setup.grid.steps + 1]; 4];
            for n in 0..=setup.grid.steps {
                let u_nodal = setup.space2.scatter(&res.trajectory.values[n]);
                for vert in 0..nv {
                    fields[0][n][vert] = u_nodal[0][vert].re;
                    fields[1][n][vert] = hist[0][n][vert].re;
                    fields[2][n][vert] = u_nodal[1][vert].re;
                    fields[3][n][vert] = hist[1][n][vert].re;
                }
            }
            (fields, res.iterations)
        }
    };

    let mut species_mass = [Vec::new(), Vec::new()];
    for n in 0..=setup.grid.steps {
        species_mass[0].push(field_integral(&setup.space1, &fields[0][n]));
        species_mass[1].push(field_integral(&setup.space1, &fields[2][n]));
    }
    let mut mass_drift = 0.0f64;
    for trace in &species_mass {
        let m0 = trace[0];
        if m0.abs() > 0.0 {
            for &m in trace.iter() {
                mass_drift = mass_drift.max(((m - m0) / m0).abs());
            }
        }
    }
    let mut min_values = [f64::INFINITY; 4];
    for f in 0..4 {
        for n in 0..=setup.grid.steps {
            for vert in 0..nv {
                min_values[f] = min_values[f].min(fields[f][n][vert]);
            }
        }
    }

    Ok(SimulationResult {
        mode,
        fields,
        condition,
        species_mass,
        mass_drift,
        min_values,
        picard_iterations,
        flags,
    })
}

/// Relative L2-in-time-and-space distance between two runs, per field.
pub fn field_distance(space1: &FeSpace, a: &SimulationResult, b: &SimulationResult) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for f in 0..4 {
        for (na, nb) in a.fields[f].iter().zip(&b.fields[f]) {
            let diff: Vec<C64> = na
                .iter()
                .zip(nb)
                .map(|(x, y)| C64::new(x - y, 0.0))
                .collect();
            let base: Vec<C64> = na.iter().map(|&x| C64::new(x, 0.0)).collect();
            num += space1.mass().sesquilinear(&diff, &diff).re;
            den += space1.mass().sesquilinear(&base, &base).re;
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quasilinear::check_volterra;
    use crate::tensors::legendre_hadamard_constant;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn constant_params(k: f64, s1: f64, s2: f64, a: f64) -> ChemotaxisParams {
        ChemotaxisParams {
            kappa1: ScalarFn2::constant(k),
            kappa2: ScalarFn2::constant(k),
            sigma1: ScalarFn2::constant(s1),
            sigma2: ScalarFn2::constant(s2),
            alpha1: a,
            alpha2: a,
            g1: Poly4::zero(),
            g2: Poly4::zero(),
            initial: [
                InitialField::Bump { amplitude: 0.5, center: [0.35, 0.4], width: 0.3 },
                InitialField::Zero,
                InitialField::Bump { amplitude: 0.4, center: [0.65, 0.6], width: 0.3 },
                InitialField::Zero,
            ],
            dirichlet_segments: None,
        }
    }

    #[test]
    fn decoupled_tensor_is_identity_like() {
        let p = constant_params(1.0, 0.0, 0.0, 1.0);
        let t = full_tensor(&p, [0.1, 0.0, 0.2, 0.0]).unwrap();
        let gamma = legendre_constant(&t, &[[0.0, 0.0]]).unwrap();
        assert!((gamma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_two_breaks_rank_one_positivity() {
        let p = constant_params(1.0, 2.0, 0.0, 1.0);
        let t = full_tensor(&p, [0.0; 4]).unwrap();
        let lh = legendre_hadamard_constant(&t, &[[0.0, 0.0]], 64).unwrap();
        assert!(lh <= 1e-9, "lh {lh}");
        let report = condition_report(&p, [0.0; 4]);
        assert!(report.lh_fails_full);
        assert!(report.lh_witness.is_some());
        // Direct inequality evaluation must agree exactly.
        let direct = 2.0f64.abs() >= 2.0 * (1.0f64 * 1.0).sqrt();
        assert_eq!(report.lh_fails_full, direct);
    }

    #[test]
    fn reduced_constant_half_at_sigma_half() {
        let p = constant_params(1.0, 0.5, 0.5, 1.0);
        let report = condition_report(&p, [0.0; 4]);
        assert!((report.legendre_reduced - 0.5).abs() < 1e-12);
        assert!((report.reduced_margin - 0.5).abs() < 1e-12);
        // Direct evaluation of the sufficient inequality.
        let direct = 1.0f64.min(1.0) - 0.5 * (0.5f64 + 0.5).abs();
        assert_eq!(report.reduced_margin, direct);
    }

    #[test]
    fn full_tensor_rejects_nonpositive_diffusion() {
        let mut p = constant_params(1.0, 0.0, 0.0, 1.0);
        p.kappa1 = ScalarFn2::Affine { a0: 0.1, au: -10.0, av: 0.0 };
        assert!(full_tensor(&p, [1.0, 0.0, 0.0, 0.0]).is_err());
    }

    fn small_setup(params: ChemotaxisParams, n: usize, steps: usize) -> ChemotaxisSetup {
        let dom = DomainSpec::unit_square();
        let grid = TimeGrid::new(0.1, steps).unwrap();
        ChemotaxisSetup::new(params, &dom, 1.0 / n as f64, grid).unwrap()
    }

    #[test]
    fn reduction_with_zero_reactions_has_zero_attractants() {
        let p = constant_params(1.0, 0.3, 0.3, 1.0);
        let setup = small_setup(p, 4, 4);
        let reduced = ReducedSystem::new(&setup).unwrap();
        let u0 = setup.space2.restrict(&[
            setup.initial_nodal(0),
            setup.initial_nodal(2),
        ]);
        let traj = crate::parabolic::Trajectory::constant(&u0, setup.grid.clone());
        let times = setup.grid.nodes();
        let prefix = TrajectoryPrefix { times: &times, values: &traj.values };
        let [v1, v2] = reduced.attractants_at(&prefix).unwrap();
        assert!(v1.iter().all(|z| z.norm() < 1e-14));
        assert!(v2.iter().all(|z| z.norm() < 1e-14));
        // Reduced tensor equals [[kappa, -sigma], [-sigma, kappa]] at v = 0.
        let t = reduced.tensor_at(&prefix).unwrap();
        let blocks = t.eval_at([0.4, 0.5]);
        assert!((blocks.a[0][(0, 0)].re - 1.0).abs() < 1e-12);
        assert!((blocks.a[1][(0, 0)].re + 0.3).abs() < 1e-12);
        assert!((blocks.a[2][(0, 0)].re + 0.3).abs() < 1e-12);
        assert!((blocks.a[3][(0, 0)].re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_coefficients_give_constant_reduced_tensor() {
        // With kappa and sigma constant the reduced tensor does not depend
        // on the eliminated attractants at all.
        let mut p = constant_params(1.3, 0.4, -0.2, 1.0);
        p.g1 = Poly4 { terms: vec![(0.5, [1, 0, 0, 0])] }; // attractants evolve
        let setup = small_setup(p, 4, 4);
        let reduced = ReducedSystem::new(&setup).unwrap();
        let times = setup.grid.nodes();
        for scale in [0.0, 0.5, 1.0] {
            let u0 = setup.space2.interpolate(|comp, pt| {
                c(scale * (comp as f64 + 1.0) * pt[0] * pt[1], 0.0)
            });
            let traj = crate::parabolic::Trajectory::constant(&u0, setup.grid.clone());
            let prefix = TrajectoryPrefix { times: &times, values: &traj.values };
            let t = reduced.tensor_at(&prefix).unwrap();
            for pt in [[0.1, 0.2], [0.6, 0.8]] {
                let b = t.eval_at(pt);
                assert!((b.a[0][(0, 0)].re - 1.3).abs() < 1e-14);
                assert!((b.a[1][(0, 0)].re + 0.4).abs() < 1e-14);
                assert!((b.a[2][(0, 0)].re - 0.2).abs() < 1e-14);
                assert!((b.a[3][(0, 0)].re - 1.3).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reduction_map_is_volterra() {
        let mut p = constant_params(1.0, 0.3, 0.2, 1.0);
        p.g1 = Poly4 { terms: vec![(0.25, [1, 0, 1, 0])] };
        p.g2 = Poly4 { terms: vec![(0.1, [1, 0, 0, 0]), (-0.1, [0, 0, 0, 1])] };
        let setup = small_setup(p, 4, 5);
        let reduced = ReducedSystem::new(&setup).unwrap();
        let u0 = setup
            .space2
            .restrict(&[setup.initial_nodal(0), setup.initial_nodal(2)]);
        let traj = crate::parabolic::Trajectory::constant(&u0, setup.grid.clone());
        check_volterra(
            Some(&reduced),
            Some(&reduced),
            &traj,
            &[[0.3, 0.4], [0.6, 0.7]],
            2024,
        )
        .unwrap();
    }

    #[test]
    fn mass_is_conserved_without_drift_or_reactions() {
        let p = constant_params(1.0, 0.0, 0.0, 1.0);
        let setup = small_setup(p, 8, 8);
        let res = simulate(&setup, SimulateMode::Full4, 1e-9).unwrap();
        assert!(res.mass_drift <= 1e-10, "drift {}", res.mass_drift);
        let res2 = simulate(&setup, SimulateMode::Reduced2, 1e-9).unwrap();
        assert!(res2.mass_drift <= 1e-10, "drift {}", res2.mass_drift);
    }

    #[test]
    fn full_and_reduced_agree_on_coercive_configuration() {
        let mut p = constant_params(1.0, 0.3, 0.3, 1.0);
        p.kappa1 = ScalarFn2::ClampedAffine { a0: 1.0, au: 0.0, av: 0.1, lo: 0.0, hi: 1.0 };
        p.g1 = Poly4 { terms: vec![(0.25, [1, 0, 1, 0])] };
        p.g2 = Poly4 { terms: vec![(0.2, [0, 0, 1, 0])] };
        let setup = small_setup(p, 6, 6);
        let tol = 1e-9;
        let full = simulate(&setup, SimulateMode::Full4, tol).unwrap();
        let reduced = simulate(&setup, SimulateMode::Reduced2, tol).unwrap();
        assert!(full.flags.is_empty(), "{:?}", full.flags);
        let dist = field_distance(&setup.space1, &full, &reduced);
        assert!(dist <= 10.0 * tol, "distance {dist}");
    }

    #[test]
    fn mixed_boundaries_keep_paths_consistent() {
        // Dirichlet for u1 on the bottom edge and v2 on the left edge; the
        // two code paths must still produce the same discrete system.
        let mut p = constant_params(1.0, 0.2, 0.2, 1.0);
        p.g1 = Poly4 { terms: vec![(0.2, [1, 0, 1, 0])] };
        p.dirichlet_segments = Some([vec![0], Vec::new(), Vec::new(), vec![3]]);
        let setup = small_setup(p, 6, 6);
        assert!(setup.space4.num_free() < 4 * setup.space1.mesh().vertices.len());
        let tol = 1e-9;
        let full = simulate(&setup, SimulateMode::Full4, tol).unwrap();
        let reduced = simulate(&setup, SimulateMode::Reduced2, tol).unwrap();
        let dist = field_distance(&setup.space1, &full, &reduced);
        assert!(dist <= 10.0 * tol, "distance {dist}");
        // Constrained fields vanish on their Dirichlet vertices.
        let on_d = setup.space4.mesh().dirichlet_vertices(0);
        for (vert, &flag) in on_d.iter().enumerate() {
            if flag {
                for n in 0..=setup.grid.steps {
                    assert_eq!(full.fields[0][n][vert], 0.0);
                    assert_eq!(reduced.fields[0][n][vert], 0.0);
                }
            }
        }
    }

    #[test]
    fn lh_failing_configuration_still_runs_reduced() {
        let p = constant_params(1.0, 2.0, -1.6, 1.0);
        // Reduced margin: 1 - |2 - 1.6|/2 = 0.8 > 0, so the reduced path is
        // coercive even though the full tensor fails the rank-one test.
        let setup = small_setup(p, 4, 4);
        let res = simulate(&setup, SimulateMode::Reduced2, 1e-8).unwrap();
        assert!(res.condition.lh_fails_full);
        assert!(res.condition.legendre_reduced >= 0.5);
        assert!(res.flags.is_empty());
    }
}
