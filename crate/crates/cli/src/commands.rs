//! Scenario parsing and command dispatch.
//!
//! Every command follows the same shape: deserialize + validate (errors here
//! abort with nothing written), run, then write all artifacts at once.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::Deserialize;

use parreg_core::chemotaxis::{
    simulate, ChemotaxisParams, ChemotaxisSetup, InitialField, SimulateMode,
};
use parreg_core::elliptic::{assemble, FeSpace};
use parreg_core::extrapolation::{estimate_intervals, sneiberg_window};
use parreg_core::geometry::{build_mesh, check_geometry, BcSpec, DomainSpec};
use parreg_core::parabolic::{
    lions_verify, maxreg_norm, step_solve, ForcingSeries, TimeGrid,
};
use parreg_core::quasilinear::{
    continuation_solve, picard_solve_fresh, ClampedDiffusion, CoefficientMap,
    ContinuationOptions, FamilyMap, FnSourceMap, IntegralMeanIdentity, MassScaleSource,
    PicardOptions, SourceMap, TimeScaledIdentity, ZeroSource,
};
use parreg_core::tensors::{
    analyze, family_from_json, tensor_from_json, TensorFamily,
};
use parreg_core::FeVec;

type C64 = Complex64;

pub enum RunError {
    Validation(String),
    Solver { out_dir: Option<PathBuf>, reason: String },
}

/// Artifacts are collected in memory and written together, so a failed run
/// leaves no partial output.
struct Artifacts {
    files: Vec<(String, String)>,
}

impl Artifacts {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) {
        self.files
            .push((name.to_string(), serde_json::to_string_pretty(value).unwrap() + "\n"));
    }

    fn raw(&mut self, name: &str, content: String) {
        self.files.push((name.to_string(), content));
    }

    fn write_all(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, content) in &self.files {
            std::fs::write(dir.join(name), content)?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioConfig {
    command: String,
    params: serde_json::Value,
    #[serde(default)]
    output_dir: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
}

pub fn run(command: &str, args: &super::RunArgs) -> Result<(), RunError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| RunError::Validation(format!("cannot read config: {e}")))?;
    let config: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| RunError::Validation(format!("config does not parse: {e}")))?;
    if config.command != command {
        return Err(RunError::Validation(format!(
            "config is for command '{}', invoked as '{command}'",
            config.command
        )));
    }
    let out_dir: PathBuf = args
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| RunError::Validation("no output directory given".into()))?;
    let seed = args.seed.or(config.seed).unwrap_or(0);

    let mut artifacts = Artifacts::new();
    let result = match command {
        "analyze-tensor" => analyze_tensor(&config.params, seed, &mut artifacts),
        "sneiberg" => sneiberg(&config.params, seed, &mut artifacts),
        "lions" => lions(&config.params, seed, &mut artifacts),
        "solve-parabolic" => solve_parabolic(&config.params, seed, &mut artifacts),
        "solve-quasilinear" => solve_quasilinear(&config.params, seed, &mut artifacts),
        "chemotaxis" => chemotaxis(&config.params, seed, &mut artifacts),
        "geometry-check" => geometry_check(&config.params, seed, &mut artifacts),
        other => Err(RunError::Validation(format!("unknown command '{other}'"))),
    };
    match result {
        Ok(()) => artifacts
            .write_all(&out_dir)
            .map_err(|e| RunError::Solver {
                out_dir: Some(out_dir.clone()),
                reason: format!("cannot write artifacts: {e}"),
            }),
        Err(RunError::Solver { reason, .. }) => {
            Err(RunError::Solver { out_dir: Some(out_dir), reason })
        }
        Err(e) => Err(e),
    }
}

fn validation<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Validation(e.to_string())
}

fn solver<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Solver { out_dir: None, reason: e.to_string() }
}

// ---------------------------------------------------------------------------
// Shared pieces.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshParams {
    domain: DomainSpec,
    h: f64,
    bc: BcSpec,
}

impl MeshParams {
    fn space(&self) -> Result<FeSpace, RunError> {
        let mesh = build_mesh(&self.domain, self.h, &self.bc).map_err(validation)?;
        FeSpace::new(&mesh).map_err(validation)
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
enum FamilySpec {
    Constant(serde_json::Value),
    Tabulated(serde_json::Value),
}

impl FamilySpec {
    fn build(&self) -> Result<TensorFamily, RunError> {
        match self {
            FamilySpec::Constant(v) => {
                Ok(TensorFamily::constant(tensor_from_json(v).map_err(validation)?))
            }
            FamilySpec::Tabulated(v) => family_from_json(v).map_err(validation),
        }
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum ForcingSpec {
    Zero,
    /// f(t, x) = value on every component.
    ConstantLoad { value: f64 },
    /// f(t, x) = amplitude (1 + time_slope t) sin(pi x) sin(pi y).
    SineLoad { amplitude: f64, time_slope: f64 },
}

impl ForcingSpec {
    fn series(&self, space: &FeSpace, grid: &TimeGrid) -> ForcingSeries {
        (1..=grid.steps)
            .map(|n| {
                let t = grid.node(n);
                match self {
                    ForcingSpec::Zero => vec![C64::new(0.0, 0.0); space.num_free()],
                    ForcingSpec::ConstantLoad { value } => {
                        space.load_vector(|_, _| C64::new(*value, 0.0))
                    }
                    ForcingSpec::SineLoad { amplitude, time_slope } => {
                        space.load_vector(|_, p| {
                            let pi = std::f64::consts::PI;
                            C64::new(
                                amplitude
                                    * (1.0 + time_slope * t)
                                    * (pi * p[0]).sin()
                                    * (pi * p[1]).sin(),
                                0.0,
                            )
                        })
                    }
                }
            })
            .collect()
    }
}

fn initial_vector(fields: &[InitialField], space: &FeSpace) -> Result<FeVec, RunError> {
    if fields.len() != space.m {
        return Err(RunError::Validation(format!(
            "u0 lists {} fields, space has {} components",
            fields.len(),
            space.m
        )));
    }
    Ok(space.interpolate(|comp, p| C64::new(fields[comp].eval(p), 0.0)))
}

fn complex_from_pair(pair: [f64; 2]) -> C64 {
    C64::new(pair[0], pair[1])
}

// ---------------------------------------------------------------------------
// Commands.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalyzeTensorParams {
    tensor: serde_json::Value,
    #[serde(default = "default_eta_grid")]
    eta_grid: usize,
    #[serde(default)]
    lambda: f64,
    #[serde(default)]
    sample_points: Option<Vec<[f64; 2]>>,
    /// When present, also assemble on this mesh and estimate the discrete
    /// coercivity constant.
    #[serde(default)]
    garding: Option<MeshParams>,
    /// Export the assembled operators in Matrix Market format (requires
    /// `garding`).
    #[serde(default)]
    export_operators: bool,
}

fn default_eta_grid() -> usize {
    720
}

fn analyze_tensor(
    params: &serde_json::Value,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<(), RunError> {
    let p: AnalyzeTensorParams =
        serde_json::from_value(params.clone()).map_err(validation)?;
    let tensor = tensor_from_json(&p.tensor).map_err(validation)?;
    let samples = p.sample_points.unwrap_or_else(|| vec![[0.0, 0.0]]);
    let mut report = analyze(&tensor, &samples, p.eta_grid, p.lambda).map_err(validation)?;
    if let Some(mesh_params) = &p.garding {
        let space = mesh_params.space()?;
        let op = assemble(&space, &tensor).map_err(validation)?;
        let gamma = op.garding_constant(p.lambda).map_err(solver)?;
        report.gamma_garding = Some(gamma);
        report.garding_ok = Some(gamma > 0.0);
        let pure_neumann =
            (0..space.m).all(|i| space.mesh().dirichlet_parts[i].is_empty());
        if pure_neumann {
            report.caveats.push(
                "no Dirichlet part anywhere: rank-one positivity alone does not \
                 certify coercivity in this regime"
                    .to_string(),
            );
        }
        if p.export_operators {
            artifacts.raw("stiffness.mtx", op.stiffness.to_matrix_market());
            artifacts.raw("mass.mtx", op.mass.to_matrix_market());
            artifacts.raw("grad_mass.mtx", op.grad_mass.to_matrix_market());
        }
    } else if p.export_operators {
        return Err(RunError::Validation(
            "export_operators requires a garding mesh".into(),
        ));
    }
    let mut value = serde_json::to_value(&report).map_err(solver)?;
    value["seed"] = serde_json::json!(seed);
    artifacts.json("analyze_tensor.json", &value);
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SneibergParams {
    theta: f64,
    beta: f64,
    gamma: f64,
    /// Optional two-stage interval estimate for a class (lambda, gamma, M).
    #[serde(default)]
    intervals: Option<IntervalParams>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IntervalParams {
    lambda: f64,
    gamma: f64,
    m_norm: f64,
    lambda_shift: f64,
    #[serde(default)]
    q_anchor_delta: Option<f64>,
}

fn sneiberg(
    params: &serde_json::Value,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<(), RunError> {
    let p: SneibergParams = serde_json::from_value(params.clone()).map_err(validation)?;
    let window = sneiberg_window(p.theta, p.beta, p.gamma).map_err(validation)?;
    let mut value = serde_json::to_value(&window).map_err(solver)?;
    value["seed"] = serde_json::json!(seed);
    artifacts.json("sneiberg.json", &value);
    if let Some(iv) = &p.intervals {
        let est = estimate_intervals(
            iv.lambda,
            iv.gamma,
            iv.m_norm,
            iv.lambda_shift,
            iv.q_anchor_delta,
        )
        .map_err(validation)?;
        artifacts.json("extrapolation.json", &serde_json::to_value(&est).map_err(solver)?);
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LionsParams {
    #[serde(flatten)]
    mesh: MeshParams,
    family: FamilySpec,
    lambda: f64,
    gamma: f64,
    m_norm: f64,
    lambda_shift: f64,
    t_end: f64,
    steps: usize,
    forcing: ForcingSpec,
}

fn lions(
    params: &serde_json::Value,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<(), RunError> {
    let p: LionsParams = serde_json::from_value(params.clone()).map_err(validation)?;
    let space = p.mesh.space()?;
    let family = p.family.build()?;
    let grid = TimeGrid::new(p.t_end, p.steps).map_err(validation)?;
    let forcing = p.forcing.series(&space, &grid);
    let report = lions_verify(
        &family,
        p.lambda,
        p.gamma,
        p.m_norm,
        p.lambda_shift,
        &forcing,
        &grid,
        &space,
    )
    .map_err(solver)?;
    let mut value = serde_json::to_value(&report).map_err(solver)?;
    value["seed"] = serde_json::json!(seed);
    artifacts.json("lions.json", &value);
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveParabolicParams {
    #[serde(flatten)]
    mesh: MeshParams,
    family: FamilySpec,
    /// Scalar shift Lambda as [re, im].
    #[serde(default)]
    lambda_shift: Option<[f64; 2]>,
    t_end: f64,
    steps: usize,
    forcing: ForcingSpec,
    u0: Vec<InitialField>,
}

fn solve_parabolic(
    params: &serde_json::Value,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<(), RunError> {
    let p: SolveParabolicParams =
        serde_json::from_value(params.clone()).map_err(validation)?;
    let space = p.mesh.space()?;
    let family = p.family.build()?;
    let grid = TimeGrid::new(p.t_end, p.steps).map_err(validation)?;
    let forcing = p.forcing.series(&space, &grid);
    let u0 = initial_vector(&p.u0, &space)?;
    let shift = complex_from_pair(p.lambda_shift.unwrap_or([0.0, 0.0]));
    let u = step_solve(&family, shift, &forcing, &u0, &grid, &space).map_err(solver)?;
    let (norm, exact) = maxreg_norm(&u, 2.0, 2.0, &space).map_err(solver)?;
    artifacts.raw("trajectory.csv", u.csv());
    artifacts.json(
        "summary.json",
        &serde_json::json!({
            "seed": seed,
            "steps": grid.steps,
            "tau": grid.tau(),
            "free_dofs": space.num_free(),
            "maxreg_norm_22": norm,
            "dual_norms_exact": exact,
        }),
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum CoefficientSpec {
    ConstantTensor { tensor: serde_json::Value },
    TimeScaledIdentity { m: usize, base: f64, rate: f64 },
    IntegralMeanIdentity { m: usize, scale: f64 },
    ClampedDiffusion { base: f64 },
}

impl CoefficientSpec {
    fn build(&self, space: &FeSpace) -> Result<Box<dyn CoefficientMap>, RunError> {
        Ok(match self {
            CoefficientSpec::ConstantTensor { tensor } => Box::new(FamilyMap(
                TensorFamily::constant(tensor_from_json(tensor).map_err(validation)?),
            )),
            CoefficientSpec::TimeScaledIdentity { m, base, rate } => {
                Box::new(TimeScaledIdentity { m: *m, base: *base, rate: *rate })
            }
            CoefficientSpec::IntegralMeanIdentity { m, scale } => {
                Box::new(IntegralMeanIdentity { m: *m, scale: *scale })
            }
            CoefficientSpec::ClampedDiffusion { base } => {
                if space.m != 1 {
                    return Err(RunError::Validation(
                        "clamped-diffusion coefficients need a scalar space".into(),
                    ));
                }
                Box::new(ClampedDiffusion { space: space.clone(), base: *base })
            }
        })
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum PhiSpec {
    Zero,
    /// factor * mass * u with declared growth (c_phi, s); s omitted means
    /// infinity.
    MassScale { factor: f64, c_phi: f64, #[serde(default)] s: Option<f64> },
    /// Fixed load f(t, x) independent of the state.
    Load { forcing: Box<ForcingSpec> },
}

impl PhiSpec {
    fn build(&self, space: &FeSpace, grid: &TimeGrid) -> Box<dyn SourceMap> {
        match self {
            PhiSpec::Zero => Box::new(ZeroSource { n: space.num_free() }),
            PhiSpec::MassScale { factor, c_phi, s } => Box::new(MassScaleSource {
                space: space.clone(),
                factor: *factor,
                c_phi: *c_phi,
                s: s.unwrap_or(f64::INFINITY),
            }),
            PhiSpec::Load { forcing } => {
                let series = forcing.series(space, grid);
                let zero = vec![C64::new(0.0, 0.0); space.num_free()];
                Box::new(FnSourceMap {
                    f: std::sync::Arc::new(move |prefix| {
                        let n = prefix.node();
                        if n == 0 {
                            Ok(zero.clone())
                        } else {
                            Ok(series[n - 1].clone())
                        }
                    }),
                    sublinear: Some((0.0, f64::INFINITY)),
                })
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum SolveMode {
    Picard,
    Continuation { lambda: f64, gamma: f64, m_norm: f64 },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveQuasilinearParams {
    #[serde(flatten)]
    mesh: MeshParams,
    t_end: f64,
    steps: usize,
    coefficients: CoefficientSpec,
    phi: PhiSpec,
    u0: Vec<InitialField>,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default = "default_max_iter")]
    max_iter: usize,
    mode: SolveMode,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    50
}

fn solve_quasilinear(
    params: &serde_json::Value,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<(), RunError> {
    let p: SolveQuasilinearParams =
        serde_json::from_value(params.clone()).map_err(validation)?;
    let space = p.mesh.space()?;
    let grid = TimeGrid::new(p.t_end, p.steps).map_err(validation)?;
    let a_map = p.coefficients.build(&space)?;
    let phi = p.phi.build(&space, &grid);
    let u0 = initial_vector(&p.u0, &space)?;
    let (trajectory, report) = match &p.mode {
        SolveMode::Picard => {
            let opts = PicardOptions {
                tol: p.tol,
                max_iter: p.max_iter,
                cutoff: None,
                keep_initial_guess: false,
            };
            let res = picard_solve_fresh(a_map.as_ref(), phi.as_ref(), &u0, &space, &grid, &opts)
                .map_err(solver)?;
            let value = serde_json::json!({
                "seed": seed,
                "mode": "picard",
                "iterations": res.iterations,
                "residual": res.residual,
            });
            (res.trajectory, value)
        }
        SolveMode::Continuation { lambda, gamma, m_norm } => {
            let opts = ContinuationOptions {
                tol: p.tol,
                max_iter: p.max_iter,
                class_lambda: *lambda,
                class_gamma: *gamma,
                class_m: *m_norm,
                r: 2.0,
                check_ellipticity: true,
            };
            let (traj, report) =
                continuation_solve(a_map.as_ref(), phi.as_ref(), &u0, &space, &grid, &opts)
                    .map_err(solver)?;
            let mut value = serde_json::to_value(&report).map_err(solver)?;
            value["seed"] = serde_json::json!(seed);
            value["mode"] = serde_json::json!("continuation");
            (traj, value)
        }
    };
    artifacts.raw("trajectory.csv", trajectory.csv());
    artifacts.json("ql_report.json", &report);
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChemotaxisCommandParams {
    #[serde(default)]
    domain: Option<DomainSpec>,
    h: f64,
    t_end: f64,
    steps: usize,
    mode: SimulateMode,
    #[serde(default = "default_tol")]
    tol: f64,
    model: ChemotaxisParams,
}

fn chemotaxis(
    params: &serde_json::Value,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<(), RunError> {
    let p: ChemotaxisCommandParams =
        serde_json::from_value(params.clone()).map_err(validation)?;
    let domain = p.domain.unwrap_or_else(DomainSpec::unit_square);
    let grid = TimeGrid::new(p.t_end, p.steps).map_err(validation)?;
    let setup = ChemotaxisSetup::new(p.model, &domain, p.h, grid).map_err(validation)?;
    let result = simulate(&setup, p.mode, p.tol).map_err(solver)?;

    for (idx, name) in ["u1", "v1", "u2", "v2"].iter().enumerate() {
        let mut csv = String::from("t");
        let nv = result.fields[idx][0].len();
        for k in 0..nv {
            csv.push_str(&format!(",v{k}"));
        }
        csv.push('\n');
        for (n, nodal) in result.fields[idx].iter().enumerate() {
            csv.push_str(&format!("{:.12e}", setup.grid.node(n)));
            for x in nodal {
                csv.push_str(&format!(",{x:.12e}"));
            }
            csv.push('\n');
        }
        artifacts.raw(&format!("{name}.csv"), csv);
    }
    artifacts.json(
        "condition.json",
        &serde_json::to_value(&result.condition).map_err(solver)?,
    );
    artifacts.json(
        "summary.json",
        &serde_json::json!({
            "seed": seed,
            "mode": result.mode,
            "picard_iterations": result.picard_iterations,
            "mass_drift": result.mass_drift,
            "min_values": result.min_values,
            "flags": result.flags,
        }),
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryCheckParams {
    #[serde(flatten)]
    mesh: MeshParams,
    radii: Vec<f64>,
    #[serde(default = "default_samples")]
    samples: usize,
}

fn default_samples() -> usize {
    64
}

fn geometry_check(
    params: &serde_json::Value,
    seed: u64,
    artifacts: &mut Artifacts,
) -> Result<(), RunError> {
    let p: GeometryCheckParams = serde_json::from_value(params.clone()).map_err(validation)?;
    let mesh = build_mesh(&p.mesh.domain, p.mesh.h, &p.mesh.bc).map_err(validation)?;
    let report = check_geometry(&mesh, &p.radii, p.samples).map_err(validation)?;
    artifacts.json("mesh.json", &mesh.to_json());
    let mut value = serde_json::to_value(&report).map_err(solver)?;
    value["seed"] = serde_json::json!(seed);
    value["total_area"] = serde_json::json!(mesh.total_area());
    value["max_edge_length"] = serde_json::json!(mesh.max_edge_length());
    artifacts.json("geometry.json", &value);
    Ok(())
}
