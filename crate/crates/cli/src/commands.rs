//! The `generate`, `fit`, `simulate` and `certify` subcommands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use kedmd::bounds::{self, ErrorBoundReport, ScanOptions, StabilityMarginReport, TestGridSummary};
use kedmd::mpc::{self, lyapunov_diagnostics};
use kedmd::sampling::{generate_dataset, validate_dataset};
use kedmd::stability::{self, GrowthEstimate, ProbePolicy, SuboptimalityIndex};
use kedmd::surrogate::fit_surrogate;
use kedmd::{
    ClosedLoopTrace, ClusterDataset, ControlAffineSystem, Differentiable, Dynamics, GrowthBoundSequence, KernelSpec,
    MpcConfig, PointSet, SurrogateModel,
};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{self, SystemName};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::svg::{LinePlot, Stroke};

/// Origin residual a physics-informed fit must meet.
pub const PI_ORIGIN_TOLERANCE: f64 = 1e-10;

/// Overlay the non-null fields of `flags` on the options read from the config file.
pub fn merge_with_file<T: Serialize + DeserializeOwned + Default>(flags: &T, file: Option<&PathBuf>) -> CliResult<T> {
    let mut base = serde_json::to_value(config::load_config::<T>(file)?)?;
    if let (serde_json::Value::Object(b), serde_json::Value::Object(o)) = (&mut base, serde_json::to_value(flags)?) {
        for (k, v) in o {
            if !v.is_null() {
                b.insert(k, v);
            }
        }
    }
    Ok(serde_json::from_value(base)?)
}

fn required<T>(v: Option<T>, name: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Validation(format!("--{name} is required")))
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> CliResult<()>) -> CliResult<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Either the ground truth or a fitted surrogate, used as the controller's model.
#[derive(Clone, Copy)]
pub enum ModelRef<'a> {
    Truth(&'a ControlAffineSystem),
    Surrogate(&'a SurrogateModel),
}

impl Dynamics for ModelRef<'_> {
    fn state_dim(&self) -> usize {
        match self {
            ModelRef::Truth(s) => s.state_dim(),
            ModelRef::Surrogate(s) => s.state_dim(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            ModelRef::Truth(s) => s.input_dim(),
            ModelRef::Surrogate(s) => s.input_dim(),
        }
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> kedmd::Result<DVector<f64>> {
        match self {
            ModelRef::Truth(s) => s.step(x, u),
            ModelRef::Surrogate(s) => s.step(x, u),
        }
    }
}

impl Differentiable for ModelRef<'_> {
    fn step_with_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> kedmd::Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        match self {
            ModelRef::Truth(s) => s.step_with_jacobians(x, u),
            ModelRef::Surrogate(s) => s.step_with_jacobians(x, u),
        }
    }
}

fn system_from_source(source: &str) -> CliResult<SystemName> {
    match source {
        "vdp" => Ok(SystemName::Vdp),
        "tanks" => Ok(SystemName::Tanks),
        other => Err(CliError::Validation(format!(
            "cannot infer the system from source {other:?}; pass --system"
        ))),
    }
}

pub fn read_dataset(prefix: &Path) -> CliResult<ClusterDataset> {
    let csv = File::open(with_suffix(prefix, ".csv"))?;
    let side = File::open(with_suffix(prefix, ".json"))?;
    Ok(ClusterDataset::read(BufReader::new(csv), BufReader::new(side))?)
}

pub fn read_model(path: &Path) -> CliResult<SurrogateModel> {
    Ok(SurrogateModel::read(BufReader::new(File::open(path)?))?)
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOpts {
    /// JSON file with any of these options; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub system: Option<SystemName>,
    /// `padua:<order>`, `uniform:<per-axis>` or `file:<csv>`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Cluster radius, or `auto`.
    #[arg(long)]
    pub rx: Option<String>,
    /// Samples per cluster.
    #[arg(long)]
    pub di: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output prefix: writes `<out>.csv`, `<out>.json` and `<out>.manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tank_params: Option<PathBuf>,
}

pub fn generate(flags: &GenerateOpts) -> CliResult<()> {
    let start = Instant::now();
    let opts = merge_with_file(flags, flags.config.as_ref())?;
    let system = required(opts.system, "system")?;
    let sys = config::build_system(system, opts.tank_params.as_deref())?;
    let grid = config::parse_grid(opts.grid.as_deref().unwrap_or(system.default_grid()), sys.domain())?;
    let centers = grid.points()?;
    let r_x = config::parse_radius(opts.rx.as_deref().unwrap_or("auto"), system, centers.len())?;
    let di = opts.di.unwrap_or(25);
    let seed = opts.seed.unwrap_or(1);
    let mut ds = generate_dataset(&sys, &centers, r_x, di, seed)?;
    ds.grid = Some(grid);
    let report = validate_dataset(&ds, sys.domain(), sys.input_box());
    println!(
        "{} clusters, {} samples, r_X = {r_x:e}",
        ds.clusters.len(),
        ds.total_samples()
    );
    for c in &report.clauses {
        println!("  {:<28} {}", c.clause, if c.passed { "ok" } else { "FAILED" });
    }
    if !report.passed() {
        eprintln!("{}", serde_json::to_string_pretty(&report)?);
        return Err(CliError::Validation("dataset violates the sampling requirements".into()));
    }
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from(system.label()));
    let (csv_path, side_path) = (with_suffix(&out, ".csv"), with_suffix(&out, ".json"));
    write_file(&csv_path, |w| Ok(ds.write_csv(w)?))?;
    write_file(&side_path, |w| Ok(ds.write_sidecar(w)?))?;
    let mut manifest = RunManifest::new(serde_json::to_value(&opts)?);
    if let Some(p) = &opts.tank_params {
        manifest.add_input(p)?;
    }
    manifest.add_output(&csv_path, None)?;
    manifest.add_output(&side_path, None)?;
    manifest.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&with_suffix(&out, ".manifest.json"))?;
    println!("wrote {} and {}", csv_path.display(), side_path.display());
    Ok(())
}

// --------------------------------------------------------------------- fit

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOpts {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset prefix written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pin the drift at the origin to zero.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pi: Option<bool>,
    /// Wendland smoothness `k`.
    #[arg(long)]
    pub smoothness: Option<usize>,
    /// Kernel support radius.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Ridge regularization added to the kernel matrix.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Model file; defaults to `<data>.kedmd` (`<data>-pi.kedmd` with `--pi`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tank_params: Option<PathBuf>,
}

/// Kernel of a fit: defaults for the domain, overridden field by field.
pub fn kernel_for(
    domain: &kedmd::AxisBox,
    centers: usize,
    smoothness: Option<usize>,
    scale: Option<f64>,
    lambda: Option<f64>,
) -> CliResult<KernelSpec> {
    let base = KernelSpec::default_for(domain, centers)?;
    let spec = KernelSpec::new(
        base.dim,
        smoothness.unwrap_or(base.smoothness),
        scale.unwrap_or(base.scale),
        0.0,
    )?;
    let lam = lambda.unwrap_or_else(|| spec.default_lambda(centers));
    Ok(KernelSpec::new(spec.dim, spec.smoothness, spec.scale, lam)?)
}

pub fn fit(flags: &FitOpts) -> CliResult<()> {
    let start = Instant::now();
    let opts = merge_with_file(flags, flags.config.as_ref())?;
    let data = required(opts.data.clone(), "data")?;
    let pi = opts.pi.unwrap_or(false);
    let ds = read_dataset(&data)?;
    let system = system_from_source(&ds.source)?;
    let sys = config::build_system(system, opts.tank_params.as_deref())?;
    let domain = ds.grid.as_ref().map_or(sys.domain(), |g| &g.domain);
    let spec = kernel_for(domain, ds.clusters.len(), opts.smoothness, opts.scale, opts.lambda)?;
    let model = fit_surrogate(&ds, &spec, pi)?;
    let rep = model.report();
    println!("centers               {}", model.num_centers());
    println!("kernel                k = {}, scale = {:e}, lambda = {:e}", spec.smoothness, spec.scale, rep.lambda);
    println!("condition estimate    {:e}", rep.condition_estimate);
    println!("step-1 residual       max {:e}, mean {:e}", rep.step1_residual_max, rep.step1_residual_mean);
    println!("origin residual       {:e}", rep.origin_residual);
    if pi {
        let ok = rep.origin_residual <= PI_ORIGIN_TOLERANCE;
        println!("PI exactness          {}", if ok { "ok" } else { "FAILED" });
        if !ok {
            return Err(CliError::Numerics(format!(
                "origin residual {:e} exceeds {PI_ORIGIN_TOLERANCE:e}",
                rep.origin_residual
            )));
        }
    }
    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| with_suffix(&data, if pi { "-pi.kedmd" } else { ".kedmd" }));
    write_file(&out, |w| Ok(model.write(w)?))?;
    let mut manifest = RunManifest::new(serde_json::to_value(&opts)?);
    manifest.add_input(&with_suffix(&data, ".csv"))?;
    manifest.add_input(&with_suffix(&data, ".json"))?;
    manifest.add_output(&out, None)?;
    manifest.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&with_suffix(&out, ".manifest.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOpts {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model file, or `truth` for the exact system.
    #[arg(long)]
    pub model: Option<String>,
    /// Needed with `--model truth`; otherwise read from the model.
    #[arg(long, value_enum)]
    pub system: Option<SystemName>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Closed-loop steps (default 300 for vdp, 150 for tanks).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial state in the system's original coordinates, comma separated.
    #[arg(long)]
    pub x0: Option<String>,
    /// Diagonal of Q (one value is repeated).
    #[arg(long)]
    pub q: Option<String>,
    /// Diagonal of R (one value is repeated).
    #[arg(long)]
    pub r: Option<String>,
    /// Seed of the solver's random restarts.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tank_params: Option<PathBuf>,
}

pub fn default_steps(system: SystemName) -> usize {
    match system {
        SystemName::Vdp => 300,
        SystemName::Tanks => 150,
    }
}

/// Weights `(Q, R)` with identity and `1e-4` defaults.
pub fn weights(sys: &ControlAffineSystem, q: Option<&str>, r: Option<&str>) -> CliResult<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((
        config::diag_weight(q, sys.state_dim(), 1.0)?,
        config::diag_weight(r, sys.input_dim(), 1e-4)?,
    ))
}

/// Resolve `--model` into a loaded surrogate (or none for the truth) and the system.
fn load_controller_model(
    model: &str,
    system: Option<SystemName>,
    tank_params: Option<&Path>,
) -> CliResult<(Option<SurrogateModel>, SystemName, ControlAffineSystem)> {
    let surrogate = if model == "truth" { None } else { Some(read_model(Path::new(model))?) };
    let system = match (system, &surrogate) {
        (Some(s), _) => s,
        (None, Some(m)) => system_from_source(&m.metadata().source)?,
        (None, None) => return Err(CliError::Validation("--system is required with --model truth".into())),
    };
    let sys = config::build_system(system, tank_params)?;
    if let Some(m) = &surrogate {
        if m.state_dim() != sys.state_dim() || m.input_dim() != sys.input_dim() {
            return Err(CliError::Validation("model dimensions do not match the system".into()));
        }
    }
    Ok((surrogate, system, sys))
}

pub fn error_plot(title: &str, traces: &[(String, &ClosedLoopTrace, Stroke)]) -> LinePlot {
    let mut plot = LinePlot::new(title, "k", "||x(k)||", true);
    for (name, t, stroke) in traces {
        let pts = t.errors().into_iter().enumerate().map(|(k, e)| (k as f64, e)).collect();
        plot.add(name, pts, *stroke);
    }
    plot
}

pub fn phase_plot(title: &str, traces: &[(String, &ClosedLoopTrace, Stroke)]) -> LinePlot {
    let mut plot = LinePlot::new(title, "x1", "x2", false);
    for (name, t, stroke) in traces {
        let pts = t.states.iter().map(|x| (x[0], x[1])).collect();
        plot.add(name, pts, *stroke);
    }
    plot
}

pub fn simulate(flags: &SimulateOpts) -> CliResult<()> {
    let start = Instant::now();
    let opts = merge_with_file(flags, flags.config.as_ref())?;
    let model_arg = required(opts.model.clone(), "model")?;
    let (surrogate, system, sys) = load_controller_model(&model_arg, opts.system, opts.tank_params.as_deref())?;
    let (q, r) = weights(&sys, opts.q.as_deref(), opts.r.as_deref())?;
    let mut cfg = MpcConfig::new(opts.horizon.unwrap_or(10), q, r, sys.input_box().clone())?;
    cfg.solver.seed = opts.seed.unwrap_or(0);
    let x0 = config::shifted_x0(&sys, system, opts.x0.as_deref())?;
    let steps = opts.steps.unwrap_or_else(|| default_steps(system));
    let model = surrogate.as_ref().map_or(ModelRef::Truth(&sys), ModelRef::Surrogate);
    let trace = mpc::run_closed_loop(&sys, &model, &cfg, &x0, steps, Some(sys.domain()))?;

    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("simulate"));
    fs::create_dir_all(&out)?;
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let trace_path = out.join("trace.csv");
    write_file(&trace_path, |w| Ok(mpc::write_trace_csv(w, &trace, n, m)?))?;
    let label = if model_arg == "truth" { "truth".to_string() } else { format!("d = {}", model.num_centers_hint()) };
    let series = [(label, &trace, Stroke::Solid)];
    let mut written = vec![trace_path];
    let err_path = out.join("error.svg");
    fs::write(&err_path, error_plot("closed-loop error", &series).render())?;
    written.push(err_path);
    if n == 2 {
        let phase_path = out.join("phase.svg");
        fs::write(&phase_path, phase_plot("closed-loop trajectory", &series).render())?;
        written.push(phase_path);
    }

    let lyap = lyapunov_diagnostics(&trace, 0.0);
    println!("steps                 {}", trace.steps());
    println!("final error           {:e}", trace.errors().last().copied().unwrap_or(f64::NAN));
    println!("mean solve time       {:.6} s", trace.mean_solve_seconds());
    println!("not converged         {}", trace.not_converged_count());
    if let Some(a) = lyap.min {
        println!("min alpha_hat         {a:e}");
    }
    if !trace.domain_exits.is_empty() {
        println!("domain exits          {}", trace.domain_exits.len());
    }

    let mut manifest = RunManifest::new(serde_json::to_value(&opts)?);
    if model_arg != "truth" {
        manifest.add_input(Path::new(&model_arg))?;
    }
    for p in &written {
        manifest.add_output(p, Some(&out))?;
    }
    manifest.timings_s.insert("mean_solve".into(), trace.mean_solve_seconds());
    manifest.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&out.join("manifest.json"))?;
    if let Some(f) = &trace.failure {
        return Err(CliError::Solver(format!("closed loop stopped early: {f}")));
    }
    Ok(())
}

impl ModelRef<'_> {
    fn num_centers_hint(&self) -> usize {
        match self {
            ModelRef::Truth(_) => 0,
            ModelRef::Surrogate(m) => m.num_centers(),
        }
    }
}

// ----------------------------------------------------------------- certify

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyOpts {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model file, or `truth` for the exact system.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub system: Option<SystemName>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Largest horizon of the growth-bound sweep.
    #[arg(long)]
    pub n_bar: Option<usize>,
    /// Test lattice points per state axis (default 100 in 2-D, 9 otherwise).
    #[arg(long)]
    pub test_resolution: Option<usize>,
    /// Growth-bound sample lattice points per state axis.
    #[arg(long)]
    pub growth_resolution: Option<usize>,
    /// Closed-loop steps used to measure the input-to-state ratio.
    #[arg(long)]
    pub kappa_steps: Option<usize>,
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long)]
    pub q: Option<String>,
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tank_params: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubCertificate<T> {
    pub passed: bool,
    pub report: Option<T>,
    pub refused: Option<String>,
}

impl<T> SubCertificate<T> {
    fn from_result(r: kedmd::Result<T>, passed: impl FnOnce(&T) -> bool) -> Self {
        match r {
            Ok(v) => Self { passed: passed(&v), report: Some(v), refused: None },
            Err(e) => Self { passed: false, report: None, refused: Some(e.to_string()) },
        }
    }
}

/// Everything `certify` computes, written as one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateBundle {
    pub system: String,
    pub model: String,
    pub horizon: usize,
    pub n_bar: usize,
    pub error_scan: ErrorBoundReport,
    pub growth: GrowthEstimate,
    pub alpha_sweep: Vec<SuboptimalityIndex>,
    pub propagated: GrowthBoundSequence,
    pub alpha_sweep_propagated: Vec<SuboptimalityIndex>,
    pub minimal_horizon: Option<usize>,
    pub minimal_horizon_propagated: Option<usize>,
    pub alpha_at_horizon: SubCertificate<SuboptimalityIndex>,
    pub kappa: f64,
    pub margin: SubCertificate<StabilityMarginReport>,
    /// Margins at every horizon up to `n_bar` with a positive surrogate index.
    pub margin_sweep: Vec<StabilityMarginReport>,
    pub verdict: String,
}

/// Error constants of the exact model against itself.
fn exact_error_report(
    sys: &ControlAffineSystem,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
    lipschitz_resolution: usize,
) -> CliResult<ErrorBoundReport> {
    let env = bounds::error_envelope(sys, sys, states, inputs, sys.domain(), sys.input_box())?;
    let l_hat = bounds::lipschitz_estimate(sys, sys.domain(), sys.input_box(), lipschitz_resolution)?;
    Ok(ErrorBoundReport {
        eta_hat: env.eta_hat,
        c_x_hat: env.c_x_hat,
        c_u_hat: env.c_u_hat,
        l_hat,
        h_x: 0.0,
        r_x: 0.0,
        excitation_score: None,
        quadform_bracket: (0.0, 0.0),
        inverse_norm: 0.0,
        cluster_constant: None,
        origin_error: env.origin_error,
        pi: true,
        centers: 0,
        violations: env.violations,
        test_grid: TestGridSummary {
            states: states.len(),
            inputs: inputs.len(),
            dropped_states: 0,
            min_center_distance: 0.0,
        },
    })
}

pub fn certify_bundle(flags: &CertifyOpts) -> CliResult<(CertificateBundle, ControlAffineSystem, GrowthBoundSequence)> {
    let opts = merge_with_file(flags, flags.config.as_ref())?;
    let model_arg = required(opts.model.clone(), "model")?;
    let (surrogate, system, sys) = load_controller_model(&model_arg, opts.system, opts.tank_params.as_deref())?;
    let (q, r) = weights(&sys, opts.q.as_deref(), opts.r.as_deref())?;
    let n_bar = opts.n_bar.unwrap_or(30).max(2);
    let horizon = opts.horizon.unwrap_or(10);
    let mut cfg = MpcConfig::new(horizon, q.clone(), r.clone(), sys.input_box().clone())?;
    cfg.solver.seed = opts.seed.unwrap_or(0);
    let n = sys.state_dim();

    let test_res = opts.test_resolution.unwrap_or(if n == 2 { 100 } else { 9 });
    let test_states = PointSet::from_points(&sys.domain().lattice(test_res))?;
    let test_inputs = sys.input_box().lattice(5);
    let scan_opts = ScanOptions { seed: opts.seed.unwrap_or(0), ..ScanOptions::default() };
    let error_scan = match &surrogate {
        Some(m) => bounds::empirical_error_scan(&sys, m, &test_states, &test_inputs, &scan_opts)?,
        None => exact_error_report(&sys, &test_states.to_vectors(), &test_inputs, scan_opts.lipschitz_resolution)?,
    };

    let growth_res = opts.growth_resolution.unwrap_or(if n == 2 { 21 } else { 5 });
    let samples = sys.domain().lattice(growth_res);
    let probe = ProbePolicy::lqr(&sys, &q, &r)?;
    let growth = stability::estimate_growth_bounds(&sys, &samples, n_bar, &probe, &q, &r, sys.input_box(), Some(sys.domain()))?;
    let alpha_sweep = stability::alpha_sweep(&growth.sequence);
    let propagated = stability::propagate_growth_to_surrogate(
        &growth.sequence,
        error_scan.c_x_hat,
        error_scan.c_u_hat,
        error_scan.l_hat,
        &q,
        &r,
    )?;
    let alpha_sweep_propagated = stability::alpha_sweep(&propagated);
    let minimal_horizon = stability::minimal_stabilizing_horizon(&growth.sequence);
    let minimal_horizon_propagated = stability::minimal_stabilizing_horizon(&propagated);
    let alpha_at_horizon =
        SubCertificate::from_result(stability::alpha_from_growth(&propagated, horizon), |a| a.is_positive());

    let model = surrogate.as_ref().map_or(ModelRef::Truth(&sys), ModelRef::Surrogate);
    let x0 = config::shifted_x0(&sys, system, opts.x0.as_deref())?;
    let kappa_steps = opts.kappa_steps.unwrap_or(50);
    let trace = mpc::run_closed_loop(&sys, &model, &cfg, &x0, kappa_steps, Some(sys.domain()))?;
    let kappa = bounds::observed_kappa(&trace, 0.0);

    let margin = SubCertificate::from_result(
        match &alpha_at_horizon.report {
            Some(a) => bounds::stability_margin(&error_scan, &cfg, &propagated, error_scan.l_hat, a.alpha, kappa),
            None => Err(kedmd::Error::Usage("no suboptimality index at this horizon".into())),
        },
        |m| m.verdict,
    );
    let margin_sweep = alpha_sweep_propagated
        .iter()
        .filter(|a| a.is_positive())
        .map(|a| {
            let c = cfg.with_horizon(a.horizon)?;
            bounds::stability_margin(&error_scan, &c, &propagated, error_scan.l_hat, a.alpha, kappa)
        })
        .collect::<kedmd::Result<Vec<_>>>()?;
    let verdict = if minimal_horizon_propagated.is_none() {
        "horizon insufficient"
    } else if margin.passed {
        "certified"
    } else {
        "not certified"
    };
    let bundle = CertificateBundle {
        system: system.label().into(),
        model: model_arg,
        horizon,
        n_bar,
        error_scan,
        growth: growth.clone(),
        alpha_sweep,
        propagated,
        alpha_sweep_propagated,
        minimal_horizon,
        minimal_horizon_propagated,
        alpha_at_horizon,
        kappa,
        margin,
        margin_sweep,
        verdict: verdict.into(),
    };
    Ok((bundle, sys, growth.sequence))
}

pub fn certify(flags: &CertifyOpts) -> CliResult<()> {
    let start = Instant::now();
    let opts = merge_with_file(flags, flags.config.as_ref())?;
    let (bundle, _, b) = certify_bundle(&opts)?;
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("certify"));
    fs::create_dir_all(&out)?;
    let bundle_path = out.join("certificate.json");
    fs::write(&bundle_path, serde_json::to_string_pretty(&bundle)? + "\n")?;
    let growth_path = out.join("growth.csv");
    write_file(&growth_path, |w| Ok(stability::write_growth_csv(w, &b, Some(&bundle.propagated))?))?;
    let scan_path = out.join("scan.csv");
    write_file(&scan_path, |w| Ok(bounds::write_scan_csv(w, std::slice::from_ref(&bundle.error_scan))?))?;
    let margin_path = out.join("margins.csv");
    write_file(&margin_path, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["N", "alpha_eps", "B_N_eps", "C_x", "C_u", "kappa", "margin", "verdict"])?;
        for m in &bundle.margin_sweep {
            c.write_record([
                m.horizon.to_string(),
                format!("{:e}", m.alpha_eps),
                format!("{:e}", m.b_n),
                format!("{:e}", m.c_x),
                format!("{:e}", m.c_u),
                format!("{:e}", m.kappa),
                format!("{:e}", m.margin),
                m.verdict.to_string(),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;

    let e = &bundle.error_scan;
    println!("error scan            eta {:e}, c_x {:e}, c_u {:e}, L {:e}", e.eta_hat, e.c_x_hat, e.c_u_hat, e.l_hat);
    println!(
        "minimal horizon       true {} / surrogate {}",
        bundle.minimal_horizon.map_or("none".into(), |n| n.to_string()),
        bundle.minimal_horizon_propagated.map_or("none".into(), |n| n.to_string())
    );
    match (&bundle.margin.report, &bundle.margin.refused) {
        (Some(m), _) => println!("margin                {:e} (alpha {:e}, kappa {:e})", m.margin, m.alpha_eps, m.kappa),
        (None, Some(why)) => println!("margin                refused: {why}"),
        _ => {}
    }
    println!("verdict               {}", bundle.verdict);

    let mut manifest = RunManifest::new(serde_json::to_value(&opts)?);
    if bundle.model != "truth" {
        manifest.add_input(Path::new(&bundle.model))?;
    }
    for p in [&bundle_path, &growth_path, &scan_path, &margin_path] {
        manifest.add_output(p, Some(&out))?;
    }
    manifest.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}
