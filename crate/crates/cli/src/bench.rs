//! The closed-loop comparison matrix behind `kedmd bench`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use kedmd::mpc::{self, lyapunov_diagnostics};
use kedmd::sampling::generate_dataset;
use kedmd::surrogate::fit_surrogate;
use kedmd::{ClosedLoopTrace, ControlAffineSystem, Dynamics, MpcConfig, SurrogateModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{default_steps, error_plot, kernel_for, phase_plot, weights};
use crate::config::{self, SystemName};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::svg::Stroke;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Vdp,
    Tanks,
    All,
}

impl Suite {
    pub fn systems(self) -> Vec<SystemName> {
        match self {
            Suite::Vdp => vec![SystemName::Vdp],
            Suite::Tanks => vec![SystemName::Tanks],
            Suite::All => vec![SystemName::Vdp, SystemName::Tanks],
        }
    }
}

/// One closed-loop experiment of a suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub system: SystemName,
    pub grid: String,
    pub pi: bool,
    pub horizon: usize,
}

impl CellSpec {
    pub fn name(&self, centers: usize) -> String {
        format!("{}-d{centers}-N{}", if self.pi { "pi" } else { "nonpi" }, self.horizon)
    }
}

/// Grids and horizons of each benchmark.
pub fn suite_cells(system: SystemName) -> Vec<CellSpec> {
    let (grids, horizons): (&[&str], &[usize]) = match system {
        SystemName::Vdp => (&["padua:25", "padua:50"], &[10, 30]),
        SystemName::Tanks => (&["uniform:5", "uniform:6", "uniform:7"], &[10]),
    };
    let mut cells = Vec::new();
    for pi in [true, false] {
        for g in grids {
            for &horizon in horizons {
                cells.push(CellSpec { system, grid: g.to_string(), pi, horizon });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub grid: String,
    pub centers: usize,
    pub pi: bool,
    pub condition_estimate: f64,
    pub lambda: f64,
    pub origin_residual: f64,
    pub step1_residual_max: f64,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub spec: CellSpec,
    pub centers: usize,
    pub trace: Option<ClosedLoopTrace>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn name(&self) -> String {
        self.spec.name(self.centers)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub system: SystemName,
    pub steps: usize,
    pub fits: Vec<FitSummary>,
    pub cells: Vec<CellResult>,
}

/// First step whose error is below `level`.
pub fn first_below(errors: &[f64], level: f64) -> Option<usize> {
    errors.iter().position(|e| *e < level)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Generate one dataset per grid, fit both variants, then run every cell in parallel.
pub fn run_suite(system: SystemName, steps: Option<usize>, seed: u64, di: usize) -> CliResult<SuiteRun> {
    let sys = config::build_system(system, None)?;
    let cells = suite_cells(system);
    let mut grids: Vec<String> = cells.iter().map(|c| c.grid.clone()).collect();
    grids.sort();
    grids.dedup();

    let datasets: Vec<(String, CliResult<kedmd::ClusterDataset>)> = grids
        .iter()
        .map(|g| {
            let ds = (|| {
                let grid = config::parse_grid(g, sys.domain())?;
                let centers = grid.points()?;
                let r_x = system.auto_radius(centers.len());
                let mut ds = generate_dataset(&sys, &centers, r_x, di, seed)?;
                ds.grid = Some(grid);
                Ok(ds)
            })();
            (g.clone(), ds)
        })
        .collect();
    let jobs: Vec<(usize, bool)> = (0..datasets.len()).flat_map(|i| [(i, true), (i, false)]).collect();
    let fitted: Vec<((String, bool), Result<SurrogateModel, String>)> = jobs
        .par_iter()
        .map(|&(i, pi)| {
            let (g, ds) = &datasets[i];
            let model = match ds {
                Ok(ds) => kernel_for(sys.domain(), ds.clusters.len(), None, None, None)
                    .and_then(|spec| Ok(fit_surrogate(ds, &spec, pi)?))
                    .map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            ((g.clone(), pi), model)
        })
        .collect();
    let models: BTreeMap<(String, bool), Result<SurrogateModel, String>> = fitted.into_iter().collect();
    let fits = models
        .iter()
        .filter_map(|((g, pi), m)| m.as_ref().ok().map(|m| (g, pi, m)))
        .map(|(g, pi, m)| FitSummary {
            grid: g.clone(),
            centers: m.num_centers(),
            pi: *pi,
            condition_estimate: m.report().condition_estimate,
            lambda: m.report().lambda,
            origin_residual: m.report().origin_residual,
            step1_residual_max: m.report().step1_residual_max,
        })
        .collect();

    let steps = steps.unwrap_or_else(|| default_steps(system));
    let results = cells
        .into_par_iter()
        .map(|spec| {
            let model = &models[&(spec.grid.clone(), spec.pi)];
            let centers = datasets
                .iter()
                .find(|(g, _)| *g == spec.grid)
                .and_then(|(_, d)| d.as_ref().ok())
                .map_or(0, |d| d.clusters.len());
            match model {
                Ok(m) => match run_cell(&sys, system, m, spec.horizon, steps) {
                    Ok(trace) => {
                        let error = trace.failure.clone();
                        CellResult { spec, centers, trace: Some(trace), error }
                    }
                    Err(e) => CellResult { spec, centers, trace: None, error: Some(e.to_string()) },
                },
                Err(e) => CellResult { spec, centers, trace: None, error: Some(format!("fit failed: {e}")) },
            }
        })
        .collect();
    Ok(SuiteRun { system, steps, fits, cells: results })
}

fn run_cell(
    sys: &ControlAffineSystem,
    system: SystemName,
    model: &SurrogateModel,
    horizon: usize,
    steps: usize,
) -> CliResult<ClosedLoopTrace> {
    let (q, r) = weights(sys, None, None)?;
    let cfg = MpcConfig::new(horizon, q, r, sys.input_box().clone())?;
    let x0 = config::shifted_x0(sys, system, None)?;
    Ok(mpc::run_closed_loop(sys, model, &cfg, &x0, steps, Some(sys.domain()))?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn opt_k(v: Option<usize>) -> String {
    v.map(|k| k.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "cell",
    "pi",
    "centers",
    "horizon",
    "steps",
    "final_error",
    "first_below_1e-2",
    "first_below_1e-4",
    "first_below_1e-6",
    "median_last_200",
    "min_alpha_hat",
    "not_converged",
    "domain_exits",
    "failure",
];

/// Write traces, tables and figures of one suite under `dir`; returns the files written.
pub fn write_suite(run: &SuiteRun, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let sys = config::build_system(run.system, None)?;
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let mut written = Vec::new();
    let mut summary = Vec::new();
    for cell in &run.cells {
        let cdir = dir.join("cells").join(cell.name());
        fs::create_dir_all(&cdir)?;
        if let Some(t) = &cell.trace {
            let p = cdir.join("trace.csv");
            let mut w = BufWriter::new(File::create(&p)?);
            mpc::write_trace_csv(&mut w, t, n, m)?;
            w.flush()?;
            written.push(p);
        }
        let errs = cell.trace.as_ref().map(|t| t.errors()).unwrap_or_default();
        let tail = &errs[errs.len().saturating_sub(200)..];
        let lyap = cell.trace.as_ref().map(|t| lyapunov_diagnostics(t, 0.0));
        summary.push(vec![
            cell.name(),
            cell.spec.pi.to_string(),
            cell.centers.to_string(),
            cell.spec.horizon.to_string(),
            cell.trace.as_ref().map_or(0, |t| t.steps()).to_string(),
            opt(errs.last().copied()),
            opt_k(first_below(&errs, 1e-2)),
            opt_k(first_below(&errs, 1e-4)),
            opt_k(first_below(&errs, 1e-6)),
            opt(median(tail)),
            opt(lyap.and_then(|l| l.min)),
            cell.trace.as_ref().map_or(0, |t| t.not_converged_count()).to_string(),
            cell.trace.as_ref().map_or(0, |t| t.domain_exits.len()).to_string(),
            cell.error.clone().unwrap_or_default(),
        ]);
    }
    let p = dir.join("summary.csv");
    write_csv(&p, &SUMMARY_HEADER, summary)?;
    written.push(p);

    let p = dir.join("fits.csv");
    let rows = run
        .fits
        .iter()
        .map(|f| {
            vec![
                f.grid.clone(),
                f.centers.to_string(),
                f.pi.to_string(),
                format!("{:e}", f.condition_estimate),
                format!("{:e}", f.lambda),
                format!("{:e}", f.origin_residual),
                format!("{:e}", f.step1_residual_max),
            ]
        })
        .collect();
    write_csv(
        &p,
        &["grid", "centers", "pi", "condition_estimate", "lambda", "origin_residual", "step1_residual_max"],
        rows,
    )?;
    written.push(p);

    // Mean solve time: one row per d, one column per (variant, N).
    let horizons: Vec<usize> = {
        let mut h: Vec<usize> = run.cells.iter().map(|c| c.spec.horizon).collect();
        h.sort();
        h.dedup();
        h
    };
    let mut centers: Vec<usize> = run.cells.iter().map(|c| c.centers).collect();
    centers.sort();
    centers.dedup();
    let mut header = vec!["d".to_string()];
    for pi in [true, false] {
        for h in &horizons {
            header.push(format!("{} N={h}", if pi { "PI-kEDMD" } else { "kEDMD" }));
        }
    }
    let rows = centers
        .iter()
        .map(|&d| {
            let mut row = vec![d.to_string()];
            for pi in [true, false] {
                for &h in &horizons {
                    let t = run
                        .cells
                        .iter()
                        .find(|c| c.centers == d && c.spec.pi == pi && c.spec.horizon == h)
                        .and_then(|c| c.trace.as_ref())
                        .map(|t| t.mean_solve_seconds());
                    row.push(t.map(|v| format!("{v:.6}")).unwrap_or_default());
                }
            }
            row
        })
        .collect();
    let p = dir.join("timing.csv");
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&p, &header_refs, rows)?;
    written.push(p);

    let strokes = [Stroke::Solid, Stroke::Dashed, Stroke::Dotted, Stroke::DashDot];
    let series: Vec<(String, &ClosedLoopTrace, Stroke)> = run
        .cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.trace.as_ref().map(|t| (c.name(), t, strokes[i % strokes.len()])))
        .collect();
    let label = run.system.label();
    let p = dir.join("errors.svg");
    fs::write(&p, error_plot(&format!("{label}: closed-loop error"), &series).render())?;
    written.push(p);
    if n == 2 {
        let p = dir.join("phase.svg");
        fs::write(&p, phase_plot(&format!("{label}: trajectories"), &series).render())?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOpts {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub suite: Option<Suite>,
    /// Closed-loop steps per cell (default 300 for vdp, 150 for tanks).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per cluster.
    #[arg(long)]
    pub di: Option<usize>,
    /// Results directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(flags: &BenchOpts) -> CliResult<()> {
    let start = Instant::now();
    let opts = crate::commands::merge_with_file(flags, flags.config.as_ref())?;
    let suite = opts.suite.unwrap_or(Suite::All);
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let mut manifest = RunManifest::new(serde_json::to_value(&opts)?);
    let mut failed = 0;
    for system in suite.systems() {
        let t0 = Instant::now();
        let run = run_suite(system, opts.steps, opts.seed.unwrap_or(1), opts.di.unwrap_or(25))?;
        let dir = out.join(system.label());
        fs::create_dir_all(&dir)?;
        for p in write_suite(&run, &dir)? {
            manifest.add_output(&p, Some(&out))?;
        }
        manifest.timings_s.insert(system.label().into(), t0.elapsed().as_secs_f64());
        for c in &run.cells {
            let t = c.trace.as_ref();
            println!(
                "{:<6} {:<18} final {:<12} mean solve {}",
                system.label(),
                c.name(),
                opt(t.and_then(|t| t.errors().last().copied())),
                t.map_or("-".into(), |t| format!("{:.4} s", t.mean_solve_seconds())),
            );
            if let Some(e) = &c.error {
                failed += 1;
                eprintln!("  {}: {e}", c.name());
            }
        }
    }
    manifest.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&out.join("manifest.json"))?;
    if failed > 0 {
        return Err(CliError::Solver(format!("{failed} cell(s) failed; the others completed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_shapes() {
        assert_eq!(suite_cells(SystemName::Vdp).len(), 8);
        assert_eq!(suite_cells(SystemName::Tanks).len(), 6);
        let names: Vec<String> = suite_cells(SystemName::Vdp).iter().map(|c| c.name(352)).collect();
        assert!(names.contains(&"pi-d352-N30".to_string()));
    }

    #[test]
    fn helpers() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(first_below(&[1.0, 0.1, 0.001], 0.01), Some(2));
        assert_eq!(first_below(&[1.0], 0.01), None);
    }
}
