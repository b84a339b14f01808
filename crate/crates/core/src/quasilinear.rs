//! Fixed-point solver for quasilinear systems
//!     u' + L(u)_t u = Phi(u),  u(0) = u0,
//! where both the coefficient tensor and the right-hand side may depend on
//! the trajectory nonlocally in time.
//!
//! Determinism contract: maps receive only the trajectory *prefix* up to the
//! node being evaluated, so outputs at node n cannot depend on later values
//! (the Volterra property holds by construction for any implementation that
//! does not smuggle state). Implementations must be pure: the same prefix
//! must produce the same output.
//!
//! The solver freezes coefficients at the previous Picard iterate and steps
//! implicitly; continuation restarts Picard on short windows whose length
//! comes from the declared sublinear growth of the right-hand side.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::elliptic::{assemble, FeSpace};
use crate::geometry::Point;
use crate::linalg::lu::SparseLu;
use crate::linalg::sparse::Csr;
use crate::parabolic::{extend, lions_constant, maxreg_norm, quadrature_points, TimeGrid, Trajectory};
use crate::tensors::{CoefficientTensor, TensorBlocks};
use crate::{C64, Error, FeVec, Result};

/// Read-only view of a trajectory up to (and including) one node.
pub struct TrajectoryPrefix<'a> {
    pub times: &'a [f64],
    pub values: &'a [FeVec],
}

impl<'a> TrajectoryPrefix<'a> {
    pub fn node(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn latest(&self) -> &FeVec {
        self.values.last().unwrap()
    }
}

/// Nonlocal-in-time coefficient map (Volterra by interface).
pub trait CoefficientMap: Send + Sync {
    /// Coefficient tensor at the last node of the prefix.
    fn tensor_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<CoefficientTensor>;

    /// Optional declared Lipschitz bound on bounded sets (caller contract).
    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }
}

/// Nonlocal-in-time right-hand side map (Volterra by interface).
pub trait SourceMap: Send + Sync {
    /// Dual vector at the last node of the prefix.
    fn dual_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<FeVec>;

    /// Declared sublinear growth (C_phi, s), s > r; required by the
    /// continuation solver.
    fn sublinear_bound(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Coefficient map from closures (the prefix-only signature keeps the
/// Volterra property structural).
pub struct FnCoefficientMap {
    pub f: Arc<dyn Fn(&TrajectoryPrefix<'_>) -> Result<CoefficientTensor> + Send + Sync>,
    pub lipschitz: Option<f64>,
}

impl CoefficientMap for FnCoefficientMap {
    fn tensor_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<CoefficientTensor> {
        (self.f)(prefix)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        self.lipschitz
    }
}

pub struct FnSourceMap {
    pub f: Arc<dyn Fn(&TrajectoryPrefix<'_>) -> Result<FeVec> + Send + Sync>,
    pub sublinear: Option<(f64, f64)>,
}

impl SourceMap for FnSourceMap {
    fn dual_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<FeVec> {
        (self.f)(prefix)
    }

    fn sublinear_bound(&self) -> Option<(f64, f64)> {
        self.sublinear
    }
}

/// Tensor family as a (trivially Volterra) coefficient map.
pub struct FamilyMap(pub crate::tensors::TensorFamily);

impl CoefficientMap for FamilyMap {
    fn tensor_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<CoefficientTensor> {
        match &self.0.mode {
            crate::tensors::FamilyMode::Nonlocal(map) => map.tensor_at(prefix),
            _ => self.0.at_time(prefix.t()),
        }
    }
}

/// (base + rate * t) * identity.
pub struct TimeScaledIdentity {
    pub m: usize,
    pub base: f64,
    pub rate: f64,
}

impl CoefficientMap for TimeScaledIdentity {
    fn tensor_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<CoefficientTensor> {
        let s = self.base + self.rate * prefix.t();
        Ok(CoefficientTensor::identity(self.m, 2).scale(C64::new(s, 0.0)))
    }
}

/// (1 + scale * integral of the mean of Re u) * identity; the integral uses
/// the right-endpoint rule on the prefix.
pub struct IntegralMeanIdentity {
    pub m: usize,
    pub scale: f64,
}

impl CoefficientMap for IntegralMeanIdentity {
    fn tensor_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<CoefficientTensor> {
        let n = prefix.node();
        let mut integral = 0.0;
        for k in 1..=n {
            let tau = prefix.times[k] - prefix.times[k - 1];
            let v = &prefix.values[k];
            let mean = if v.is_empty() {
                0.0
            } else {
                v.iter().map(|z| z.re).sum::<f64>() / v.len() as f64
            };
            integral += tau * mean;
        }
        let s = 1.0 + self.scale * integral;
        Ok(CoefficientTensor::identity(self.m, 2).scale(C64::new(s, 0.0)))
    }
}

/// Scalar diffusion kappa(u) = base + clamp(u, 0, 1), evaluated through the
/// P1 interpolant of the latest prefix value (m = 1).
pub struct ClampedDiffusion {
    pub space: FeSpace,
    pub base: f64,
}

impl CoefficientMap for ClampedDiffusion {
    fn tensor_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<CoefficientTensor> {
        let nodal = self.space.scatter(prefix.latest());
        let space = self.space.clone();
        let base = self.base;
        Ok(CoefficientTensor::Field {
            m: 1,
            d: 2,
            eval: Arc::new(move |p: Point| {
                let u = space.eval_nodal(&nodal[0], p).re;
                let mut t = TensorBlocks::identity(1, 2);
                let kappa = base + u.clamp(0.0, 1.0);
                t.a[0][(0, 0)] = C64::new(kappa, 0.0);
                t.a[0][(1, 1)] = C64::new(kappa, 0.0);
                t
            }),
        })
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// Phi(u)(t_n) = factor * mass * u_n, with declared sublinear bound.
pub struct MassScaleSource {
    pub space: FeSpace,
    pub factor: f64,
    /// Declared (C_phi, s); s = infinity is allowed.
    pub c_phi: f64,
    pub s: f64,
}

impl SourceMap for MassScaleSource {
    fn dual_at(&self, prefix: &TrajectoryPrefix<'_>) -> Result<FeVec> {
        let mut f = self.space.mass().matvec(prefix.latest());
        for z in f.iter_mut() {
            *z *= self.factor;
        }
        Ok(f)
    }

    fn sublinear_bound(&self) -> Option<(f64, f64)> {
        Some((self.c_phi, self.s))
    }
}

/// Zero right-hand side.
pub struct ZeroSource {
    pub n: usize,
}

impl SourceMap for ZeroSource {
    fn dual_at(&self, _prefix: &TrajectoryPrefix<'_>) -> Result<FeVec> {
        Ok(vec![C64::new(0.0, 0.0); self.n])
    }

    fn sublinear_bound(&self) -> Option<(f64, f64)> {
        Some((0.0, f64::INFINITY))
    }
}

/// Radial clamp of the deviation from an anchor tensor: entries of
/// raw - anchor pass through unchanged while their modulus stays at or
/// below eps, larger entries are scaled back to modulus eps with their
/// phase preserved.
#[derive(Clone)]
pub struct CutoffConfig {
    pub eps: f64,
    pub anchor: CoefficientTensor,
}

fn clamp_entry(diff: C64, eps: f64) -> C64 {
    let mag = diff.norm();
    // The slack of a few ulps keeps re-application bitwise stable: a value
    // scaled onto the eps circle may land a rounding error above it.
    if mag <= eps * (1.0 + 4.0 * f64::EPSILON) {
        diff
    } else {
        diff * (eps / mag)
    }
}

fn clamp_blocks(anchor: &TensorBlocks, raw: &TensorBlocks, eps: f64) -> TensorBlocks {
    let mut out = anchor.clone();
    for (o, (a, r)) in out.a.iter_mut().zip(anchor.a.iter().zip(&raw.a)) {
        for idx in 0..o.data.len() {
            o.data[idx] = a.data[idx] + clamp_entry(r.data[idx] - a.data[idx], eps);
        }
    }
    for (dst, (anc, src)) in [
        (&mut out.b, (&anchor.b, &raw.b)),
        (&mut out.c, (&anchor.c, &raw.c)),
    ] {
        for (o, (a, r)) in dst.iter_mut().zip(anc.iter().zip(src.iter())) {
            for k in 0..o.len() {
                o[k] = a[k] + clamp_entry(r[k] - a[k], eps);
            }
        }
    }
    for (o, (a, r)) in out.dd.iter_mut().zip(anchor.dd.iter().zip(&raw.dd)) {
        *o = a + clamp_entry(r - a, eps);
    }
    out
}

/// Apply the cut-off to a tensor (pointwise for field tensors).
pub fn cutoff_apply(cfg: &CutoffConfig, raw: &CoefficientTensor) -> Result<CoefficientTensor> {
    if cfg.eps <= 0.0 {
        return Err(Error::Parameter("cut-off eps must be positive".into()));
    }
    if (cfg.anchor.m(), cfg.anchor.d()) != (raw.m(), raw.d()) {
        return Err(Error::Dimension("cut-off anchor and tensor shapes differ".into()));
    }
    match (&cfg.anchor, raw) {
        (CoefficientTensor::Constant(a), CoefficientTensor::Constant(r)) => {
            Ok(CoefficientTensor::Constant(clamp_blocks(a, r, cfg.eps)))
        }
        _ => {
            let anchor = cfg.anchor.clone();
            let raw = raw.clone();
            let eps = cfg.eps;
            Ok(CoefficientTensor::Field {
                m: raw.m(),
                d: raw.d(),
                eval: Arc::new(move |p| clamp_blocks(&anchor.eval_at(p), &raw.eval_at(p), eps)),
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub cutoff: Option<CutoffConfig>,
    /// Keep the window values of the input trajectory as the initial guess
    /// instead of the flat extension of the window start value.
    pub keep_initial_guess: bool,
}

impl std::fmt::Debug for CutoffConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CutoffConfig(eps={})", self.eps)
    }
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, cutoff: None, keep_initial_guess: false }
    }
}

#[derive(Clone, Debug)]
pub struct PicardResult {
    pub trajectory: Trajectory,
    pub iterations: usize,
    pub residual: f64,
}

/// One frozen-coefficient implicit-Euler sweep over the window; the maps
/// see the prefix of `previous` (the current iterate), the recursion uses
/// the new values.
fn sweep_window(
    a_map: &dyn CoefficientMap,
    phi: &dyn SourceMap,
    previous: &Trajectory,
    window: (usize, usize),
    space: &FeSpace,
    cutoff: Option<&CutoffConfig>,
) -> Result<Trajectory> {
    let (start, end) = window;
    let tau = previous.grid.tau();
    let times = previous.grid.nodes();
    let mut next = previous.clone();
    for n in (start + 1)..=end {
        let prefix = TrajectoryPrefix {
            times: &times[..=n],
            values: &previous.values[..=n],
        };
        let mut tensor = a_map.tensor_at(&prefix)?;
        if let Some(cfg) = cutoff {
            tensor = cutoff_apply(cfg, &tensor)?;
        }
        let forcing = phi.dual_at(&prefix)?;
        let op = assemble(space, &tensor)?;
        let step = Csr::linear_combination(
            C64::new(1.0, 0.0),
            space.mass(),
            C64::new(tau, 0.0),
            &op.stiffness,
        );
        let lu = SparseLu::factor(&step)?;
        let mut rhs = space.mass().matvec(&next.values[n - 1]);
        for (r, f) in rhs.iter_mut().zip(&forcing) {
            *r += tau * f;
        }
        next.values[n] = lu.solve(&rhs);
    }
    Ok(next)
}

fn window_trajectory(u: &Trajectory, window: (usize, usize)) -> Trajectory {
    let (start, end) = window;
    let tau = u.grid.tau();
    Trajectory {
        grid: TimeGrid { t_end: tau * (end - start) as f64, steps: end - start },
        values: u.values[start..=end].to_vec(),
    }
}

/// Picard iteration with frozen coefficients on the node window
/// (start, end]; `base` supplies the prefix through `start` (and the
/// initial guess inside the window when `keep_initial_guess` is set).
/// Stops when the maximal-regularity norm of the update is at most
/// tol * (1 + norm of the iterate), measured on the window.
pub fn picard_solve(
    a_map: &dyn CoefficientMap,
    phi: &dyn SourceMap,
    base: &Trajectory,
    window: (usize, usize),
    space: &FeSpace,
    opts: &PicardOptions,
) -> Result<PicardResult> {
    let (start, end) = window;
    if start >= end || end > base.grid.steps {
        return Err(Error::Parameter(format!(
            "window ({start}, {end}] is not inside the grid (N = {})",
            base.grid.steps
        )));
    }
    let mut current = base.clone();
    if !opts.keep_initial_guess {
        let anchor = current.values[start].clone();
        for n in (start + 1)..=end {
            current.values[n] = anchor.clone();
        }
    }
    let mut residual = f64::INFINITY;
    for iter in 1..=opts.max_iter {
        let next = sweep_window(a_map, phi, &current, window, space, opts.cutoff.as_ref())?;
        let diff = window_trajectory(&next, window).sub(&window_trajectory(&current, window));
        let (dn, _) = maxreg_norm(&diff, 2.0, 2.0, space)?;
        let (nn, _) = maxreg_norm(&window_trajectory(&next, window), 2.0, 2.0, space)?;
        current = next;
        residual = dn;
        if dn <= opts.tol * (1.0 + nn) {
            return Ok(PicardResult { trajectory: current, iterations: iter, residual });
        }
    }
    Err(Error::NonConvergence {
        what: format!("Picard iteration on window ({start}, {end}]"),
        last: residual,
    })
}

/// Fresh solve over the whole grid from an initial value.
pub fn picard_solve_fresh(
    a_map: &dyn CoefficientMap,
    phi: &dyn SourceMap,
    u0: &[C64],
    space: &FeSpace,
    grid: &TimeGrid,
    opts: &PicardOptions,
) -> Result<PicardResult> {
    let base = Trajectory::constant(u0, grid.clone());
    picard_solve(a_map, phi, &base, (0, grid.steps), space, opts)
}

/// Per-window trace of a continuation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowTrace {
    pub start_time: f64,
    pub end_time: f64,
    pub picard_iterations: usize,
    pub residual: f64,
    pub window_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QlSolveReport {
    pub solved_until: f64,
    pub global: bool,
    pub window_steps: usize,
    pub window_length: f64,
    pub windows: Vec<WindowTrace>,
}

#[derive(Clone, Debug)]
pub struct ContinuationOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Class parameters (lambda, gamma, M) the coefficient map declares.
    pub class_lambda: f64,
    pub class_gamma: f64,
    pub class_m: f64,
    /// Time integrability of the marching norm (r = 2 for the solver).
    pub r: f64,
    /// Verify the declared coercivity at each window start.
    pub check_ellipticity: bool,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            class_lambda: 0.0,
            class_gamma: 1.0,
            class_m: 1.0,
            r: 2.0,
            check_ellipticity: true,
        }
    }
}

/// Window length from the declared growth data: the largest w with
/// (1 + C_phi w^e) C_L w^e <= 1/2, where e = 1/r - 1/s and C_L is the
/// solution-operator constant of the class at shift lambda + 1. The
/// discrete extension constant is taken as 1 (the stepwise extension
/// reproduces prefixes exactly).
pub fn continuation_window_length(
    c_lions: f64,
    c_phi: f64,
    s: f64,
    r: f64,
) -> Result<f64> {
    if !(s > r) {
        return Err(Error::Precondition(format!(
            "sublinear growth needs s > r, got s = {s}, r = {r}"
        )));
    }
    let e = 1.0 / r - if s.is_finite() { 1.0 / s } else { 0.0 };
    let x = if c_phi == 0.0 {
        0.5 / c_lions
    } else {
        // C_L C_phi x^2 + C_L x - 1/2 = 0, positive root.
        let a = c_lions * c_phi;
        let b = c_lions;
        (-b + (b * b + 2.0 * a).sqrt()) / (2.0 * a)
    };
    Ok(x.powf(1.0 / e))
}

/// March in windows sized by the sublinear-growth rule, restarting Picard
/// from each window endpoint. Returns the trajectory and a report;
/// `global` is true when the march reaches the end of the grid.
pub fn continuation_solve(
    a_map: &dyn CoefficientMap,
    phi: &dyn SourceMap,
    u0: &[C64],
    space: &FeSpace,
    grid: &TimeGrid,
    opts: &ContinuationOptions,
) -> Result<(Trajectory, QlSolveReport)> {
    let (c_phi, s) = phi.sublinear_bound().ok_or_else(|| {
        Error::Precondition("continuation needs a declared sublinear bound (C_phi, s)".into())
    })?;
    let c_lions = lions_constant(
        opts.class_lambda,
        opts.class_gamma,
        opts.class_m,
        opts.class_lambda + 1.0,
    );
    let window_length = continuation_window_length(c_lions, c_phi, s, opts.r)?;
    let tau = grid.tau();
    let window_steps = (window_length / tau).floor() as usize;
    if window_steps == 0 {
        return Err(Error::WindowUnderResolved { required: window_length, step: tau });
    }

    let quad = quadrature_points(space);
    let mut trajectory = Trajectory::constant(u0, grid.clone());
    let mut windows = Vec::new();
    let mut start = 0usize;
    while start < grid.steps {
        let end = (start + window_steps).min(grid.steps);
        if opts.check_ellipticity {
            let times = grid.nodes();
            let prefix = TrajectoryPrefix {
                times: &times[..=start],
                values: &trajectory.values[..=start],
            };
            let tensor = a_map.tensor_at(&prefix)?;
            let pointwise = crate::tensors::legendre_constant(&tensor, &quad)?;
            if pointwise < opts.class_gamma - 1e-12 {
                let op = assemble(space, &tensor)?;
                let discrete = op.garding_constant(opts.class_lambda)?;
                if discrete < opts.class_gamma - 1e-9 {
                    return Err(Error::Precondition(format!(
                        "coercivity left the declared class at t = {} \
                         (discrete constant {discrete:.6} < {})",
                        grid.node(start),
                        opts.class_gamma
                    )));
                }
            }
        }
        let picard_opts = PicardOptions {
            tol: opts.tol,
            max_iter: opts.max_iter,
            cutoff: None,
            keep_initial_guess: false,
        };
        let res = picard_solve(a_map, phi, &trajectory, (start, end), space, &picard_opts)?;
        trajectory = res.trajectory;
        let (wn, _) = maxreg_norm(&window_trajectory(&trajectory, (start, end)), 2.0, 2.0, space)?;
        windows.push(WindowTrace {
            start_time: grid.node(start),
            end_time: grid.node(end),
            picard_iterations: res.iterations,
            residual: res.residual,
            window_norm: wn,
        });
        start = end;
    }
    let solved_until = grid.node(start);
    let report = QlSolveReport {
        solved_until,
        global: start == grid.steps,
        window_steps,
        window_length,
        windows,
    };
    Ok((trajectory, report))
}

/// Outcome of the coefficient-continuity window scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuityWindow {
    /// Largest node time through which the cut-off stayed inactive.
    pub delta: f64,
    pub delta_node: usize,
    /// Largest componentwise deviation observed inside the window.
    pub max_deviation: f64,
}

/// Solve with the cut-off anchored at A0 = A(reference extension of u0)(0)
/// and find the largest grid time delta such that the raw coefficients stay
/// componentwise within eps of A0 on [0, delta]; on that window the cut-off
/// solution solves the original problem.
pub fn continuity_window_check(
    a_map: &dyn CoefficientMap,
    phi: &dyn SourceMap,
    u0: &[C64],
    eps: f64,
    space: &FeSpace,
    grid: &TimeGrid,
    tol: f64,
) -> Result<ContinuityWindow> {
    // Reference extension of the bare initial value.
    let seed = Trajectory { grid: grid.clone(), values: vec![u0.to_vec()] };
    let reference = extend(&seed, 0, grid, space)?;
    let times = grid.nodes();
    let prefix0 = TrajectoryPrefix { times: &times[..=0], values: &reference.values[..=0] };
    let anchor = a_map.tensor_at(&prefix0)?;

    let opts = PicardOptions {
        tol,
        max_iter: 50,
        cutoff: Some(CutoffConfig { eps, anchor: anchor.clone() }),
        keep_initial_guess: false,
    };
    let solved = picard_solve_fresh(a_map, phi, u0, space, grid, &opts)?.trajectory;

    let quad = quadrature_points(space);
    let anchor_at: Vec<TensorBlocks> = quad.iter().map(|&p| anchor.eval_at(p)).collect();
    let mut delta_node = 0usize;
    let mut max_dev_inside = 0.0f64;
    for n in 1..=grid.steps {
        let prefix = TrajectoryPrefix { times: &times[..=n], values: &solved.values[..=n] };
        let raw = a_map.tensor_at(&prefix)?;
        let mut dev = 0.0f64;
        for (p, anc) in quad.iter().zip(&anchor_at) {
            let blocks = raw.eval_at(*p);
            for (x, y) in blocks.a.iter().zip(&anc.a) {
                for (u, v) in x.data.iter().zip(&y.data) {
                    dev = dev.max((u - v).norm());
                }
            }
            for (mine, theirs) in [(&blocks.b, &anc.b), (&blocks.c, &anc.c)] {
                for (x, y) in mine.iter().zip(theirs) {
                    for (u, v) in x.iter().zip(y) {
                        dev = dev.max((u - v).norm());
                    }
                }
            }
            for (u, v) in blocks.dd.iter().zip(&anc.dd) {
                dev = dev.max((u - v).norm());
            }
        }
        if dev <= eps {
            delta_node = n;
            max_dev_inside = max_dev_inside.max(dev);
        } else {
            break;
        }
    }
    if delta_node == 0 {
        return Err(Error::Precondition(format!(
            "cut-off active already at the first step (deviation exceeds eps = {eps})"
        )));
    }
    Ok(ContinuityWindow {
        delta: grid.node(delta_node),
        delta_node,
        max_deviation: max_dev_inside,
    })
}

/// Bitwise Volterra conformance check: perturbing the trajectory after node
/// n must leave outputs at nodes <= n unchanged. Tensors are compared at
/// the probe points, duals entrywise, both via exact bit patterns.
pub fn check_volterra(
    a_map: Option<&dyn CoefficientMap>,
    phi: Option<&dyn SourceMap>,
    base: &Trajectory,
    probe_points: &[Point],
    seed: u64,
) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let times = base.grid.nodes();
    let mut perturbed = base.clone();
    for n in 0..base.grid.steps {
        // Perturb strictly after node n.
        perturbed.values.clone_from(&base.values);
        for v in perturbed.values.iter_mut().skip(n + 1) {
            for z in v.iter_mut() {
                *z += C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        for k in 0..=n {
            let p_base = TrajectoryPrefix { times: &times[..=k], values: &base.values[..=k] };
            let p_pert =
                TrajectoryPrefix { times: &times[..=k], values: &perturbed.values[..=k] };
            if let Some(map) = a_map {
                let t0 = map.tensor_at(&p_base)?;
                let t1 = map.tensor_at(&p_pert)?;
                for &pt in probe_points {
                    let b0 = t0.eval_at(pt);
                    let b1 = t1.eval_at(pt);
                    if !blocks_bit_equal(&b0, &b1) {
                        return Err(Error::Solver(format!(
                            "coefficient map output at node {k} changed under a tail \
                             perturbation after node {n}"
                        )));
                    }
                }
            }
            if let Some(src) = phi {
                let f0 = src.dual_at(&p_base)?;
                let f1 = src.dual_at(&p_pert)?;
                let same = f0.len() == f1.len()
                    && f0.iter().zip(&f1).all(|(a, b)| {
                        a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()
                    });
                if !same {
                    return Err(Error::Solver(format!(
                        "source map output at node {k} changed under a tail perturbation \
                         after node {n}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Observed difference quotient of a coefficient map at two nearby
/// trajectories.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzProbe {
    /// sup over nodes and probe points of the block-norm difference of the
    /// tensors, divided by the maximal-regularity distance.
    pub observed_quotient: f64,
    pub declared: Option<f64>,
}

/// Finite-difference spot check of the Lipschitz contract: perturb the
/// trajectory by `bump` (relative), evaluate the map along both, and report
/// the difference quotient. Diagnostic only; the declared bound lives in a
/// different pair of norms, so the quotient is indicative, not a proof.
pub fn spot_check_lipschitz(
    map: &dyn CoefficientMap,
    base: &Trajectory,
    space: &FeSpace,
    probe_points: &[Point],
    bump: f64,
    seed: u64,
) -> Result<LipschitzProbe> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut perturbed = base.clone();
    for v in perturbed.values.iter_mut().skip(1) {
        for z in v.iter_mut() {
            *z += C64::new(rng.gen_range(-bump..bump), rng.gen_range(-bump..bump));
        }
    }
    let diff = perturbed.sub(base);
    let (distance, _) = maxreg_norm(&diff, 2.0, 2.0, space)?;
    if distance == 0.0 {
        return Err(Error::Parameter("lipschitz spot check needs a nonzero bump".into()));
    }
    let times = base.grid.nodes();
    let mut sup = 0.0f64;
    for n in 0..=base.grid.steps {
        let p0 = TrajectoryPrefix { times: &times[..=n], values: &base.values[..=n] };
        let p1 = TrajectoryPrefix { times: &times[..=n], values: &perturbed.values[..=n] };
        let t0 = map.tensor_at(&p0)?;
        let t1 = map.tensor_at(&p1)?;
        for &pt in probe_points {
            let d = t1.eval_at(pt).add(&t0.eval_at(pt).scale(C64::new(-1.0, 0.0)));
            sup = sup.max(d.block_norm());
        }
    }
    Ok(LipschitzProbe {
        observed_quotient: sup / distance,
        declared: map.lipschitz_bound(),
    })
}

fn blocks_bit_equal(a: &TensorBlocks, b: &TensorBlocks) -> bool {
    let eq = |x: &C64, y: &C64| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits();
    a.a.len() == b.a.len()
        && a.a.iter().zip(&b.a).all(|(x, y)| x.data.iter().zip(&y.data).all(|(u, v)| eq(u, v)))
        && a.b.iter().zip(&b.b).all(|(x, y)| x.iter().zip(y).all(|(u, v)| eq(u, v)))
        && a.c.iter().zip(&b.c).all(|(x, y)| x.iter().zip(y).all(|(u, v)| eq(u, v)))
        && a.dd.iter().zip(&b.dd).all(|(u, v)| eq(u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::l2_norm;
    use crate::geometry::{build_mesh, BcSpec, DomainSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn unit_square_space(m: usize, h: f64) -> FeSpace {
        let dom = DomainSpec::unit_square();
        let bc = BcSpec::full_dirichlet(m, &dom);
        let mesh = build_mesh(&dom, h, &bc).unwrap();
        FeSpace::new(&mesh).unwrap()
    }

    #[test]
    fn cutoff_examples() {
        let anchor = CoefficientTensor::identity(1, 2);
        let cfg = CutoffConfig { eps: 0.5, anchor: anchor.clone() };
        // Raw equal to the anchor passes through exactly.
        let out = cutoff_apply(&cfg, &anchor).unwrap();
        match (&out, &anchor) {
            (CoefficientTensor::Constant(a), CoefficientTensor::Constant(b)) => {
                assert_eq!(a, b)
            }
            _ => panic!("expected constant"),
        }
        // A 2*eps real deviation clamps to eps.
        let mut raw = TensorBlocks::identity(1, 2);
        raw.a[0][(0, 0)] += c(1.0, 0.0); // deviation 1.0 = 2 eps
        let out = cutoff_apply(&cfg, &CoefficientTensor::Constant(raw)).unwrap();
        if let CoefficientTensor::Constant(b) = out {
            assert!((b.a[0][(0, 0)] - c(1.5, 0.0)).norm() < 1e-15);
        } else {
            panic!();
        }
        // Complex deviation 2 eps e^{i pi/4} clamps to eps with the phase kept.
        let phase = C64::from_polar(1.0, std::f64::consts::FRAC_PI_4);
        let mut raw = TensorBlocks::identity(1, 2);
        raw.a[0][(0, 1)] = phase * 1.0; // |dev| = 1 = 2 eps
        let out = cutoff_apply(&cfg, &CoefficientTensor::Constant(raw)).unwrap();
        if let CoefficientTensor::Constant(b) = out {
            let expect = phase * 0.5;
            assert!((b.a[0][(0, 1)] - expect).norm() < 1e-15);
            assert!((b.a[0][(0, 1)].norm() - 0.5).abs() < 1e-15);
        } else {
            panic!();
        }
    }

    #[test]
    fn cutoff_idempotent_lipschitz_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let eps = rng.gen_range(0.05..1.0);
            let mut anchor = TensorBlocks::identity(2, 2);
            let mut raw = TensorBlocks::identity(2, 2);
            for blk in anchor.a.iter_mut().chain(raw.a.iter_mut()) {
                for v in blk.data.iter_mut() {
                    *v += c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
            }
            let cfg = CutoffConfig {
                eps,
                anchor: CoefficientTensor::Constant(anchor.clone()),
            };
            let once = cutoff_apply(&cfg, &CoefficientTensor::Constant(raw.clone())).unwrap();
            let twice = cutoff_apply(&cfg, &once).unwrap();
            let (b1, b2) = match (&once, &twice) {
                (CoefficientTensor::Constant(x), CoefficientTensor::Constant(y)) => (x, y),
                _ => panic!(),
            };
            // Idempotent up to the rounding of the anchor add/subtract pair.
            for (x, y) in b1.a.iter().zip(&b2.a) {
                for (u, v) in x.data.iter().zip(&y.data) {
                    assert!((u - v).norm() <= 1e-14 * (1.0 + u.norm()), "idempotence");
                }
            }
            // Deviation bounded by eps, entrywise.
            for (x, a) in b1.a.iter().zip(&anchor.a) {
                for (u, v) in x.data.iter().zip(&a.data) {
                    assert!((u - v).norm() <= eps + 1e-12);
                }
            }
            // 1-Lipschitz per entry: |clamp(s) - clamp(t)| <= |s - t|.
            let s = c(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let t = c(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            assert!(
                (clamp_entry(s, eps) - clamp_entry(t, eps)).norm() <= (s - t).norm() + 1e-12
            );
        }
    }

    #[test]
    fn picard_constant_maps_stop_after_two_iterations() {
        let space = unit_square_space(1, 0.25);
        let grid = TimeGrid::new(0.25, 4).unwrap();
        let a_map = FamilyMap(crate::tensors::TensorFamily::constant(
            CoefficientTensor::identity(1, 2),
        ));
        let load = space.load_vector(|_, p| c(p[0] + p[1], 0.0));
        let phi = FnSourceMap {
            f: Arc::new(move |_p| Ok(load.clone())),
            sublinear: Some((0.0, f64::INFINITY)),
        };
        let u0 = vec![c(0.0, 0.0); space.num_free()];
        let res =
            picard_solve_fresh(&a_map, &phi, &u0, &space, &grid, &PicardOptions::default())
                .unwrap();
        assert_eq!(res.iterations, 2);
        assert_eq!(res.residual, 0.0);
    }

    fn quasilinear_mms_error(h: f64, steps: usize) -> f64 {
        // kappa(u) = 2 + clamp(u, 0, 1); exact u = t sin(pi x) sin(pi y)
        // stays in [0, 1/2] for t <= 1/2, so the clamp is inactive on the
        // exact solution and the forcing below is consistent.
        let space = unit_square_space(1, h);
        let grid = TimeGrid::new(0.5, steps).unwrap();
        let pi = std::f64::consts::PI;
        let a_map = ClampedDiffusion { space: space.clone(), base: 2.0 };
        let space_phi = space.clone();
        let phi = FnSourceMap {
            f: Arc::new(move |prefix: &TrajectoryPrefix<'_>| {
                let t = prefix.t();
                Ok(space_phi.load_vector(move |_, p| {
                    let sx = (pi * p[0]).sin();
                    let sy = (pi * p[1]).sin();
                    let cx = (pi * p[0]).cos();
                    let cy = (pi * p[1]).cos();
                    let s = sx * sy;
                    let lap_term = 2.0 * pi * pi * t * s * (2.0 + t * s);
                    let grad_sq = t * t * pi * pi * (cx * cx * sy * sy + sx * sx * cy * cy);
                    c(s + lap_term - grad_sq, 0.0)
                }))
            }),
            sublinear: None,
        };
        let u0 = vec![c(0.0, 0.0); space.num_free()];
        let res =
            picard_solve_fresh(&a_map, &phi, &u0, &space, &grid, &PicardOptions::default())
                .unwrap();
        let tau = grid.tau();
        let mut acc = 0.0;
        for n in 1..=grid.steps {
            let t = grid.node(n);
            let exact = space.interpolate(|_, p| c(t * (pi * p[0]).sin() * (pi * p[1]).sin(), 0.0));
            let diff: FeVec = res.trajectory.values[n]
                .iter()
                .zip(&exact)
                .map(|(a, b)| a - b)
                .collect();
            acc += tau * crate::elliptic::w12_norm(&space, &diff).powi(2);
        }
        acc.sqrt()
    }

    #[test]
    fn quasilinear_mms_converges() {
        let coarse = quasilinear_mms_error(1.0 / 8.0, 8);
        let fine = quasilinear_mms_error(1.0 / 16.0, 16);
        let ratio = coarse / fine;
        assert!(ratio >= 1.6, "ratio {ratio} (coarse {coarse}, fine {fine})");
    }

    #[test]
    fn nonlocal_map_converges_and_is_causal() {
        let space = unit_square_space(1, 0.25);
        let grid = TimeGrid::new(0.5, 8).unwrap();
        let a_map = IntegralMeanIdentity { m: 1, scale: 0.5 };
        let load = space.load_vector(|_, p| c(0.1 * (p[0] * p[1]), 0.0));
        let phi = FnSourceMap {
            f: Arc::new(move |_p| Ok(load.clone())),
            sublinear: Some((0.0, f64::INFINITY)),
        };
        let u0 = space.interpolate(|_, p| c(0.1 * p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]), 0.0));
        let res =
            picard_solve_fresh(&a_map, &phi, &u0, &space, &grid, &PicardOptions::default())
                .unwrap();
        assert!(res.iterations < 20);
        check_volterra(
            Some(&a_map),
            Some(&phi),
            &res.trajectory,
            &[[0.3, 0.3], [0.7, 0.2]],
            99,
        )
        .unwrap();
    }

    #[test]
    fn picard_uniqueness_surrogate_different_guesses_agree() {
        let space = unit_square_space(1, 0.25);
        let grid = TimeGrid::new(0.25, 8).unwrap();
        let a_map = IntegralMeanIdentity { m: 1, scale: 0.3 };
        let space_phi = space.clone();
        let phi = FnSourceMap {
            f: Arc::new(move |prefix: &TrajectoryPrefix<'_>| {
                let t = prefix.t();
                Ok(space_phi.load_vector(move |_, p| c(t * p[0], 0.0)))
            }),
            sublinear: None,
        };
        let u0 = vec![c(0.0, 0.0); space.num_free()];
        let tol = 1e-10;
        let opts1 = PicardOptions { tol, ..Default::default() };
        let res1 = picard_solve_fresh(&a_map, &phi, &u0, &space, &grid, &opts1).unwrap();
        // Second run with a different (nonzero) initial guess in the window.
        let mut base = Trajectory::constant(&u0, grid.clone());
        for n in 1..=grid.steps {
            base.values[n] = space.interpolate(|_, p| c(0.2 * p[0] * p[1], 0.0));
        }
        let opts2 = PicardOptions { tol, keep_initial_guess: true, ..Default::default() };
        let res2 = picard_solve(&a_map, &phi, &base, (0, grid.steps), &space, &opts2).unwrap();
        let diff = res1.trajectory.sub(&res2.trajectory);
        let (dn, _) = maxreg_norm(&diff, 2.0, 2.0, &space).unwrap();
        assert!(dn <= 10.0 * tol, "guess sensitivity {dn}");
    }

    #[test]
    fn continuation_linear_problem_single_window() {
        // Window rule: C_L = 3, C_phi = 0 gives length (1/6)^2 = 1/36, so a
        // grid of total length 0.025 fits in one window.
        let space = unit_square_space(1, 0.25);
        let grid = TimeGrid::new(0.025, 8).unwrap();
        let a_map = FamilyMap(crate::tensors::TensorFamily::constant(
            CoefficientTensor::identity(1, 2),
        ));
        let phi = ZeroSource { n: space.num_free() };
        let u0 = space.interpolate(|_, p| c(p[0] * (1.0 - p[0]), 0.0));
        let opts = ContinuationOptions::default();
        let (traj, report) = continuation_solve(&a_map, &phi, &u0, &space, &grid, &opts).unwrap();
        assert!(report.global);
        assert_eq!(report.windows.len(), 1);
        // Must coincide with a plain linear solve.
        let fam = crate::tensors::TensorFamily::constant(CoefficientTensor::identity(1, 2));
        let forcing = vec![vec![c(0.0, 0.0); space.num_free()]; grid.steps];
        let direct = crate::parabolic::step_solve(
            &fam,
            c(0.0, 0.0),
            &forcing,
            &u0,
            &grid,
            &space,
        )
        .unwrap();
        for n in 0..=grid.steps {
            let err: f64 = traj.values[n]
                .iter()
                .zip(&direct.values[n])
                .map(|(a, b)| (a - b).norm())
                .sum();
            assert!(err < 1e-11, "node {n}: {err}");
        }
    }

    #[test]
    fn continuation_window_count_matches_rule() {
        let space = unit_square_space(1, 0.125);
        let grid = TimeGrid::new(0.25, 64).unwrap();
        let a_map = FamilyMap(crate::tensors::TensorFamily::constant(
            CoefficientTensor::identity(1, 2),
        ));
        let phi = MassScaleSource {
            space: space.clone(),
            factor: 0.1,
            c_phi: 0.1,
            s: f64::INFINITY,
        };
        let u0 = space.interpolate(|_, p| {
            c(p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]), 0.0)
        });
        let opts = ContinuationOptions {
            class_gamma: 1.0,
            class_m: 1.0,
            class_lambda: 0.0,
            ..Default::default()
        };
        let (_, report) = continuation_solve(&a_map, &phi, &u0, &space, &grid, &opts).unwrap();
        assert!(report.global);
        // Hand evaluation: C_L = 3, solve 0.3 x^2 + 3 x = 1/2, w = x^2.
        let x = (-3.0 + (9.0f64 + 0.6).sqrt()) / 0.6;
        let w = x * x;
        let steps = (w / grid.tau()).floor() as usize;
        assert_eq!(report.window_steps, steps);
        assert_eq!(steps, 6);
        let expected_windows = grid.steps.div_ceil(steps);
        assert_eq!(report.windows.len(), expected_windows);
        assert_eq!(expected_windows, 11);
    }

    #[test]
    fn continuation_rejects_unresolvable_window() {
        let space = unit_square_space(1, 0.5);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let a_map = FamilyMap(crate::tensors::TensorFamily::constant(
            CoefficientTensor::identity(1, 2),
        ));
        let phi = MassScaleSource {
            space: space.clone(),
            factor: 1.0,
            c_phi: 1e9,
            s: f64::INFINITY,
        };
        let u0 = vec![c(0.0, 0.0); space.num_free()];
        let err = continuation_solve(&a_map, &phi, &u0, &space, &grid,
                                     &ContinuationOptions::default());
        assert!(matches!(err, Err(Error::WindowUnderResolved { .. })));
    }

    #[test]
    fn restart_at_interior_node_reproduces_tail() {
        let space = unit_square_space(1, 0.25);
        let grid = TimeGrid::new(0.5, 16).unwrap();
        let a_map = IntegralMeanIdentity { m: 1, scale: 0.4 };
        let space_phi = space.clone();
        let phi = FnSourceMap {
            f: Arc::new(move |prefix: &TrajectoryPrefix<'_>| {
                let t = prefix.t();
                Ok(space_phi.load_vector(move |_, p| c(0.5 * t + 0.1 * p[0], 0.0)))
            }),
            sublinear: None,
        };
        let u0 = space.interpolate(|_, p| c(0.05 * (p[0] + p[1]), 0.0));
        let tol = 1e-10;
        let opts = PicardOptions { tol, ..Default::default() };
        let full = picard_solve_fresh(&a_map, &phi, &u0, &space, &grid, &opts)
            .unwrap()
            .trajectory;
        // Restart from the midpoint, keeping the prefix.
        let mid = grid.steps / 2;
        let restarted = picard_solve(&a_map, &phi, &full, (mid, grid.steps), &space, &opts)
            .unwrap()
            .trajectory;
        let diff = window_trajectory(&restarted, (mid, grid.steps))
            .sub(&window_trajectory(&full, (mid, grid.steps)));
        let (dn, _) = maxreg_norm(&diff, 2.0, 2.0, &space).unwrap();
        assert!(dn <= 10.0 * tol, "tail mismatch {dn}");
    }

    #[test]
    fn continuity_window_examples() {
        let space = unit_square_space(1, 0.25);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let phi = ZeroSource { n: space.num_free() };
        let u0 = space.interpolate(|_, p| c(0.2 * p[0] * (1.0 - p[0]), 0.0));

        // Constant map: delta = T.
        let a_const = FamilyMap(crate::tensors::TensorFamily::constant(
            CoefficientTensor::identity(1, 2),
        ));
        let w = continuity_window_check(&a_const, &phi, &u0, 0.5, &space, &grid, 1e-9).unwrap();
        assert_eq!(w.delta_node, grid.steps);
        assert!((w.delta - grid.t_end).abs() < 1e-14);

        // (1 + t) identity against anchor identity: deviation is t, so
        // delta is the largest node <= eps.
        let a_t = TimeScaledIdentity { m: 1, base: 1.0, rate: 1.0 };
        let w = continuity_window_check(&a_t, &phi, &u0, 0.25, &space, &grid, 1e-9).unwrap();
        assert_eq!(w.delta_node, 4); // tau = 1/16, node 4 = 0.25
        assert!((w.delta - 0.25).abs() < 1e-14);

        // Fast deviation: already off after the first step.
        let a_fast = TimeScaledIdentity { m: 1, base: 1.0, rate: 100.0 };
        let err = continuity_window_check(&a_fast, &phi, &u0, 0.5, &space, &grid, 1e-9);
        assert!(matches!(err, Err(Error::Precondition(_))));

        // Continuity at zero: delta at least one step for a slow map.
        let a_slow = TimeScaledIdentity { m: 1, base: 1.0, rate: 0.01 };
        let w = continuity_window_check(&a_slow, &phi, &u0, 0.5, &space, &grid, 1e-9).unwrap();
        assert!(w.delta_node >= 1);
    }

    #[test]
    fn lipschitz_spot_check_is_sane() {
        let space = unit_square_space(1, 0.25);
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let base = Trajectory::constant(
            &space.interpolate(|_, p| c(0.3 * p[0], 0.0)),
            grid.clone(),
        );
        let probes = [[0.4, 0.4], [0.7, 0.3]];
        // A map with no state dependence has quotient zero.
        let a_const = TimeScaledIdentity { m: 1, base: 1.0, rate: 1.0 };
        let probe = spot_check_lipschitz(&a_const, &base, &space, &probes, 0.1, 5).unwrap();
        assert_eq!(probe.observed_quotient, 0.0);
        // State-dependent diffusion gives a finite positive quotient and
        // carries its declared bound along.
        let a_state = ClampedDiffusion { space: space.clone(), base: 2.0 };
        let probe = spot_check_lipschitz(&a_state, &base, &space, &probes, 0.1, 5).unwrap();
        assert!(probe.observed_quotient.is_finite() && probe.observed_quotient > 0.0);
        assert_eq!(probe.declared, Some(1.0));
    }

    #[test]
    fn cutoff_solution_matches_unclamped_inside_window() {
        // With a generous eps the cut-off never activates and the solve
        // matches the plain one bitwise-close.
        let space = unit_square_space(1, 0.25);
        let grid = TimeGrid::new(0.25, 8).unwrap();
        let a_map = TimeScaledIdentity { m: 1, base: 1.0, rate: 0.1 };
        let phi = ZeroSource { n: space.num_free() };
        let u0 = space.interpolate(|_, p| c(p[0] * (1.0 - p[0]), 0.0));
        let plain = picard_solve_fresh(&a_map, &phi, &u0, &space, &grid,
                                       &PicardOptions::default())
            .unwrap()
            .trajectory;
        let cfg = CutoffConfig { eps: 10.0, anchor: CoefficientTensor::identity(1, 2) };
        let opts = PicardOptions { cutoff: Some(cfg), ..Default::default() };
        let clamped = picard_solve_fresh(&a_map, &phi, &u0, &space, &grid, &opts)
            .unwrap()
            .trajectory;
        for n in 0..=grid.steps {
            let err = l2_norm(
                &space,
                &plain.values[n]
                    .iter()
                    .zip(&clamped.values[n])
                    .map(|(a, b)| a - b)
                    .collect::<FeVec>(),
            );
            assert!(err < 1e-12, "node {n}: {err}");
        }
    }
}
