//! Receding-horizon control on a surrogate with box-constrained inputs.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Differentiable, Dynamics};
use crate::error::{Error, Result};
use crate::geometry::AxisBox;

/// Stage costs below this are skipped when forming the decrease ratio.
pub const STAGE_COST_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    /// Step contraction factor during backtracking.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Inputs this close to a bound, with the gradient pushing outward, are held.
    pub active_set_tolerance: f64,
    /// Relative cost decrease treated as roundoff.
    pub stall_tolerance: f64,
    /// Consecutive roundoff-level steps before the solve is declared stalled.
    pub stall_patience: usize,
    /// Starts tried by [`value_function`] (zeros, warm, then random).
    pub multistart: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tolerance: 1e-12,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
            active_set_tolerance: 1e-8,
            stall_tolerance: 1e-14,
            stall_patience: 2,
            multistart: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub input_box: AxisBox,
    pub solver: SolverOptions,
    pub warm_start: bool,
}

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::Config(format!("{name} must be a nonempty square matrix")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Config(format!("{name} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Config(format!("{name} is not positive definite")));
    }
    Ok(())
}

impl MpcConfig {
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, input_box: AxisBox) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        if r.nrows() != input_box.dim() {
            return Err(Error::Config("R and the input box differ in dimension".into()));
        }
        Ok(Self {
            horizon,
            q,
            r,
            input_box,
            solver: SolverOptions::default(),
            warm_start: true,
        })
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        let mut c = self.clone();
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        c.horizon = horizon;
        Ok(c)
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    /// `l(x, u) = x^T Q x + u^T R u`.
    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    fn check_model<M: Dynamics>(&self, model: &M) -> Result<()> {
        if model.state_dim() != self.state_dim() || model.input_dim() != self.input_dim() {
            return Err(Error::Config(format!(
                "weights are sized for ({}, {}), model has ({}, {})",
                self.state_dim(),
                self.input_dim(),
                model.state_dim(),
                model.input_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    /// Line search cannot decrease the cost further in floating point.
    Stalled,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub u_star: Vec<DVector<f64>>,
    pub predicted_states: Vec<DVector<f64>>,
    pub value: f64,
    pub iterations: usize,
    /// Norm of the projected-gradient step `P(u - g) - u`.
    pub kkt_residual: f64,
    pub status: SolverStatus,
}

impl OcpSolution {
    pub fn not_converged(&self) -> bool {
        self.status == SolverStatus::NotConverged
    }

    /// Shift by one and repeat the last input.
    pub fn shifted(&self) -> Vec<DVector<f64>> {
        let mut u: Vec<DVector<f64>> = self.u_star.iter().skip(1).cloned().collect();
        u.push(self.u_star.last().cloned().expect("nonempty horizon"));
        u
    }
}

struct Rollout {
    states: Vec<DVector<f64>>,
    jx: Vec<DMatrix<f64>>,
    ju: Vec<DMatrix<f64>>,
    cost: f64,
}

fn rollout_cost<M: Dynamics>(model: &M, cfg: &MpcConfig, x0: &DVector<f64>, u: &[DVector<f64>]) -> Result<(f64, Vec<DVector<f64>>)> {
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(u.len() + 1);
    let mut cost = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cost += cfg.stage_cost(&x, ui);
        let next = model.step(&x, ui)?;
        states.push(x);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("non-finite predicted state at index {}", i + 1)));
        }
        x = next;
    }
    states.push(x);
    Ok((cost, states))
}

fn rollout_with_jacobians<M: Differentiable>(
    model: &M,
    cfg: &MpcConfig,
    x0: &DVector<f64>,
    u: &[DVector<f64>],
) -> Result<Rollout> {
    let mut x = x0.clone();
    let n = u.len();
    let mut out = Rollout {
        states: Vec::with_capacity(n + 1),
        jx: Vec::with_capacity(n),
        ju: Vec::with_capacity(n),
        cost: 0.0,
    };
    for (i, ui) in u.iter().enumerate() {
        out.cost += cfg.stage_cost(&x, ui);
        let (next, jx, ju) = model.step_with_jacobians(&x, ui)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("non-finite predicted state at index {}", i + 1)));
        }
        out.states.push(x);
        out.jx.push(jx);
        out.ju.push(ju);
        x = next;
    }
    out.states.push(x);
    Ok(out)
}

/// Gradient of the cost with respect to the inputs by the adjoint recursion.
fn adjoint_gradient(cfg: &MpcConfig, ro: &Rollout, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = u.len();
    let mut grad = vec![DVector::zeros(cfg.input_dim()); n];
    let mut lambda = DVector::zeros(cfg.state_dim());
    for i in (0..n).rev() {
        grad[i] = 2.0 * (&cfg.r * &u[i]) + ro.ju[i].transpose() * &lambda;
        lambda = 2.0 * (&cfg.q * &ro.states[i]) + ro.jx[i].transpose() * &lambda;
    }
    grad
}

fn project(cfg: &MpcConfig, u: &mut [DVector<f64>]) {
    for ui in u.iter_mut() {
        cfg.input_box.project(ui.as_mut_slice());
    }
}

fn dot(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn projected_step(cfg: &MpcConfig, u: &[DVector<f64>], g: &[DVector<f64>], step: f64) -> Vec<DVector<f64>> {
    let mut t: Vec<DVector<f64>> = u.iter().zip(g).map(|(a, b)| a - b * step).collect();
    project(cfg, &mut t);
    t
}

fn pg_norm(cfg: &MpcConfig, u: &[DVector<f64>], g: &[DVector<f64>]) -> f64 {
    let t = projected_step(cfg, u, g, 1.0);
    t.iter()
        .zip(u)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Gauss-Newton curvature `2 (S^T Qbar S + Rbar)` of the condensed cost,
/// with `S` the input-to-state sensitivities of the costed states.
fn gauss_newton_hessian(cfg: &MpcConfig, ro: &Rollout) -> DMatrix<f64> {
    let (n, m) = (ro.ju.len(), cfg.input_dim());
    let mut h = DMatrix::zeros(n * m, n * m);
    // sens[j] = d x_i / d u_j for the current i, j < i.
    let mut sens: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    for i in 1..n {
        for s in sens.iter_mut() {
            *s = &ro.jx[i - 1] * &*s;
        }
        sens.push(ro.ju[i - 1].clone());
        let qs: Vec<DMatrix<f64>> = sens.iter().map(|s| &cfg.q * s).collect();
        for a in 0..i {
            for b in a..i {
                let blk = sens[a].transpose() * &qs[b];
                let mut v = h.view_mut((a * m, b * m), (m, m));
                v += &blk;
                if a != b {
                    let mut v = h.view_mut((b * m, a * m), (m, m));
                    v += blk.transpose();
                }
            }
        }
    }
    for j in 0..n {
        let mut v = h.view_mut((j * m, j * m), (m, m));
        v += &cfg.r;
    }
    h * 2.0
}

fn flatten(u: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(u.iter().map(|v| v.len()).sum(), u.iter().flat_map(|v| v.iter().copied()))
}

/// Search direction: Newton on the free inputs, scaled gradient on the
/// inputs held at a bound.
fn scaled_direction(cfg: &MpcConfig, u: &[DVector<f64>], g: &[DVector<f64>], h: &DMatrix<f64>, eps: f64) -> Vec<DVector<f64>> {
    let m = cfg.input_dim();
    let (lo, hi) = (cfg.input_box.lower(), cfg.input_box.upper());
    let uf = flatten(u);
    let gf = flatten(g);
    let total = uf.len();
    let active: Vec<bool> = (0..total)
        .map(|k| {
            let j = k % m;
            (uf[k] - lo[j] <= eps && gf[k] > 0.0) || (hi[j] - uf[k] <= eps && gf[k] < 0.0)
        })
        .collect();
    let free: Vec<usize> = (0..total).filter(|k| !active[*k]).collect();
    let mut d = DVector::zeros(total);
    for k in (0..total).filter(|k| active[*k]) {
        d[k] = -gf[k] / h[(k, k)];
    }
    if !free.is_empty() {
        let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
        let gff = DVector::from_iterator(free.len(), free.iter().map(|k| -gf[*k]));
        let sol = match hff.clone().cholesky() {
            Some(c) => c.solve(&gff),
            None => DVector::from_iterator(free.len(), free.iter().map(|k| -gf[*k] / h[(*k, *k)])),
        };
        for (a, k) in free.iter().enumerate() {
            d[*k] = sol[a];
        }
    }
    (0..u.len()).map(|i| d.rows(i * m, m).into_owned()).collect()
}

/// Local minimizer of the finite-horizon cost over the input box.
///
/// Projected gradient in the Gauss-Newton metric: exact gradients from the
/// adjoint, Armijo backtracking along the projection arc.
pub fn solve_ocp<M: Differentiable>(
    model: &M,
    cfg: &MpcConfig,
    x_hat: &DVector<f64>,
    warm: Option<&[DVector<f64>]>,
) -> Result<OcpSolution> {
    cfg.check_model(model)?;
    if x_hat.len() != cfg.state_dim() {
        return Err(Error::Usage("initial state has the wrong dimension".into()));
    }
    let opts = &cfg.solver;
    let n = cfg.horizon;
    let m = cfg.input_dim();
    let mut u: Vec<DVector<f64>> = match warm {
        Some(w) if w.len() == n && w.iter().all(|v| v.len() == m) => w.to_vec(),
        Some(_) => return Err(Error::Usage("warm start has the wrong shape".into())),
        None => vec![DVector::zeros(m); n],
    };
    project(cfg, &mut u);
    let mut ro = rollout_with_jacobians(model, cfg, x_hat, &u)?;
    let mut g = adjoint_gradient(cfg, &ro, &u);
    let mut pg = pg_norm(cfg, &u, &g);
    let mut iterations = 0;
    let mut flat_steps = 0;
    let mut status = SolverStatus::NotConverged;
    while iterations < opts.max_iterations {
        if pg <= opts.gradient_tolerance {
            status = SolverStatus::Converged;
            break;
        }
        iterations += 1;
        let h = gauss_newton_hessian(cfg, &ro);
        let dir = scaled_direction(cfg, &u, &g, &h, pg.min(opts.active_set_tolerance));
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let cand: Vec<DVector<f64>> = u.iter().zip(&dir).map(|(a, b)| a + b * t).collect();
            let mut cand = cand;
            project(cfg, &mut cand);
            let step: Vec<DVector<f64>> = cand.iter().zip(&u).map(|(a, b)| a - b).collect();
            let slope = dot(&g, &step);
            if slope >= 0.0 {
                t *= opts.backtrack;
                continue;
            }
            match rollout_cost(model, cfg, x_hat, &cand) {
                Ok((cost, _)) if cost <= ro.cost + opts.armijo * slope => {
                    accepted = Some(cand);
                    break;
                }
                Ok(_) => {}
                Err(Error::Solver(msg)) => return Err(Error::Solver(msg)),
                Err(_) => {}
            }
            t *= opts.backtrack;
        }
        let Some(next) = accepted else {
            status = SolverStatus::Stalled;
            break;
        };
        let previous = ro.cost;
        u = next;
        ro = rollout_with_jacobians(model, cfg, x_hat, &u)?;
        g = adjoint_gradient(cfg, &ro, &u);
        pg = pg_norm(cfg, &u, &g);
        if previous - ro.cost <= opts.stall_tolerance * previous {
            flat_steps += 1;
            if flat_steps >= opts.stall_patience && pg > opts.gradient_tolerance {
                status = SolverStatus::Stalled;
                break;
            }
        } else {
            flat_steps = 0;
        }
    }
    if status == SolverStatus::NotConverged && pg <= opts.gradient_tolerance {
        status = SolverStatus::Converged;
    }
    Ok(OcpSolution {
        u_star: u,
        predicted_states: ro.states,
        value: ro.cost,
        iterations,
        kkt_residual: pg,
        status,
    })
}

fn lex_less(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Best of several solves (zeros, warm start, random starts).
///
/// Ties are broken by the smaller value, then the lexicographically smaller
/// first input.
pub fn best_solution<M: Differentiable>(
    model: &M,
    cfg: &MpcConfig,
    x_hat: &DVector<f64>,
    warm: Option<&[DVector<f64>]>,
) -> Result<OcpSolution> {
    let n = cfg.horizon;
    let m = cfg.input_dim();
    let mut starts: Vec<Vec<DVector<f64>>> = vec![vec![DVector::zeros(m); n]];
    if let Some(w) = warm {
        starts.push(w.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.seed);
    while starts.len() < cfg.solver.multistart.max(1) {
        starts.push(
            (0..n)
                .map(|_| {
                    DVector::from_iterator(
                        m,
                        (0..m).map(|j| {
                            let (lo, hi) = (cfg.input_box.lower()[j], cfg.input_box.upper()[j]);
                            if hi > lo { rng.gen_range(lo..=hi) } else { lo }
                        }),
                    )
                })
                .collect(),
        );
    }
    let mut best: Option<OcpSolution> = None;
    for s in &starts {
        let sol = solve_ocp(model, cfg, x_hat, Some(s))?;
        let better = match &best {
            None => true,
            Some(b) => {
                sol.value < b.value || (sol.value == b.value && lex_less(&sol.u_star[0], &b.u_star[0]))
            }
        };
        if better {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one start"))
}

/// `V_N(x_hat)` by multi-start minimization.
pub fn value_function<M: Differentiable>(model: &M, cfg: &MpcConfig, x_hat: &DVector<f64>) -> Result<f64> {
    Ok(best_solution(model, cfg, x_hat, None)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    /// `x(0), ..., x(K)`.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    /// Predicted optimal values at `x(0), ..., x(K)`.
    pub values: Vec<f64>,
    pub lyapunov_alphas: Vec<Option<f64>>,
    pub iterations: Vec<usize>,
    pub statuses: Vec<SolverStatus>,
    /// Wall-clock seconds per solve; excluded from the CSV.
    pub solve_seconds: Vec<f64>,
    /// Steps whose true state left the domain.
    pub domain_exits: Vec<usize>,
    pub failure: Option<String>,
}

impl ClosedLoopTrace {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.states.iter().map(|x| x.norm()).collect()
    }

    pub fn mean_solve_seconds(&self) -> f64 {
        if self.solve_seconds.is_empty() {
            0.0
        } else {
            self.solve_seconds.iter().sum::<f64>() / self.solve_seconds.len() as f64
        }
    }

    pub fn not_converged_count(&self) -> usize {
        self.statuses.iter().filter(|s| **s == SolverStatus::NotConverged).count()
    }
}

/// Closed loop: solve on `model`, apply the first input to `truth`.
pub fn run_closed_loop<T: Dynamics, M: Differentiable>(
    truth: &T,
    model: &M,
    cfg: &MpcConfig,
    x0: &DVector<f64>,
    steps: usize,
    domain: Option<&AxisBox>,
) -> Result<ClosedLoopTrace> {
    cfg.check_model(model)?;
    cfg.check_model(truth)?;
    if let Some(d) = domain {
        if !d.contains(x0.as_slice()) {
            return Err(Error::Domain("initial state outside the domain".into()));
        }
    }
    let mut trace = ClosedLoopTrace {
        states: vec![x0.clone()],
        inputs: Vec::new(),
        stage_costs: Vec::new(),
        values: Vec::new(),
        lyapunov_alphas: Vec::new(),
        iterations: Vec::new(),
        statuses: Vec::new(),
        solve_seconds: Vec::new(),
        domain_exits: Vec::new(),
        failure: None,
    };
    let mut warm: Option<Vec<DVector<f64>>> = None;
    let mut x = x0.clone();
    for k in 0..=steps {
        let start = Instant::now();
        let sol = match solve_ocp(model, cfg, &x, warm.as_deref()) {
            Ok(s) => s,
            Err(e) => {
                trace.failure = Some(format!("step {k}: {e}"));
                break;
            }
        };
        trace.solve_seconds.push(start.elapsed().as_secs_f64());
        trace.values.push(sol.value);
        trace.iterations.push(sol.iterations);
        trace.statuses.push(sol.status);
        if k == steps {
            break;
        }
        let u = sol.u_star[0].clone();
        let next = match truth.step(&x, &u) {
            Ok(v) => v,
            Err(e) => {
                trace.failure = Some(format!("step {k}: {e}"));
                break;
            }
        };
        trace.stage_costs.push(cfg.stage_cost(&x, &u));
        trace.inputs.push(u);
        if domain.is_some_and(|d| !d.contains(next.as_slice())) {
            trace.domain_exits.push(k + 1);
        }
        warm = cfg.warm_start.then(|| sol.shifted());
        trace.states.push(next.clone());
        x = next;
    }
    // A truncated run keeps only complete (state, input, value) steps.
    let complete = trace.inputs.len().min(trace.values.len().saturating_sub(1));
    trace.inputs.truncate(complete);
    trace.stage_costs.truncate(complete);
    trace.states.truncate(complete + 1);
    trace.values.truncate(complete + 1);
    trace.lyapunov_alphas = lyapunov_alphas(&trace);
    Ok(trace)
}

fn lyapunov_alphas(trace: &ClosedLoopTrace) -> Vec<Option<f64>> {
    (0..trace.inputs.len())
        .map(|k| {
            let ell = trace.stage_costs[k];
            (ell >= STAGE_COST_FLOOR && k + 1 < trace.values.len())
                .then(|| (trace.values[k] - trace.values[k + 1]) / ell)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSummary {
    pub alphas: Vec<Option<f64>>,
    pub min: Option<f64>,
    pub mean: Option<f64>,
    pub counted: usize,
}

/// Observed decrease ratios `(V(k) - V(k+1)) / l(x(k), u(k))`.
///
/// Only steps with `||x(k)|| >= min_state_norm` are summarized.
pub fn lyapunov_diagnostics(trace: &ClosedLoopTrace, min_state_norm: f64) -> LyapunovSummary {
    let alphas = lyapunov_alphas(trace);
    let picked: Vec<f64> = alphas
        .iter()
        .enumerate()
        .filter(|(k, _)| trace.states[*k].norm() >= min_state_norm)
        .filter_map(|(_, a)| *a)
        .collect();
    LyapunovSummary {
        min: picked.iter().copied().reduce(f64::min),
        mean: (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64),
        counted: picked.len(),
        alphas,
    }
}

pub const TRACE_HEADER: &str = "# kedmd-trace v1";

/// CSV rows `k, x.., u.., stage_cost, value, alpha_hat` for each applied step.
pub fn write_trace_csv<W: Write>(mut writer: W, trace: &ClosedLoopTrace, n: usize, m: usize) -> Result<()> {
    writeln!(writer, "{TRACE_HEADER}")?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend(["stage_cost", "value", "alpha_hat"].map(String::from));
    w.write_record(&header)?;
    for k in 0..trace.steps() {
        let mut row = vec![k.to_string()];
        row.extend(trace.states[k].iter().map(|v| format!("{v:e}")));
        row.extend(trace.inputs[k].iter().map(|v| format!("{v:e}")));
        row.push(format!("{:e}", trace.stage_costs[k]));
        row.push(format!("{:e}", trace.values[k]));
        row.push(trace.lyapunov_alphas[k].map(|a| format!("{a:e}")).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub stage_cost: f64,
    pub value: f64,
    pub alpha_hat: Option<f64>,
}

pub fn read_trace_csv<R: std::io::BufRead>(mut reader: R, n: usize, m: usize) -> Result<Vec<TraceRow>> {
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != TRACE_HEADER {
        return Err(Error::Format("missing trace version line".into()));
    }
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.len() != 4 + n + m {
        return Err(Error::Format("trace has the wrong number of columns".into()));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let k = rec[0]
            .parse()
            .map_err(|e| Error::Format(format!("bad step index: {e}")))?;
        let vals: Vec<&str> = rec.iter().collect();
        rows.push(TraceRow {
            k,
            x: vals[1..=n].iter().map(|s| num(s)).collect::<Result<_>>()?,
            u: vals[1 + n..1 + n + m].iter().map(|s| num(s)).collect::<Result<_>>()?,
            stage_cost: num(vals[1 + n + m])?,
            value: num(vals[2 + n + m])?,
            alpha_hat: match vals[3 + n + m] {
                "" => None,
                s => Some(num(s)?),
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearModel;
    use crate::systems::make_van_der_pol;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn scalar(a: f64, b: f64) -> LinearModel {
        LinearModel::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap()
    }

    fn cfg1(n: usize, q: f64, r: f64, bound: f64) -> MpcConfig {
        MpcConfig::new(
            n,
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            AxisBox::cube(1, -bound, bound).unwrap(),
        )
        .unwrap()
    }

    fn vdp_cfg(n: usize) -> MpcConfig {
        MpcConfig::new(
            n,
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 1e-4),
            AxisBox::cube(1, -2.0, 2.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let b = AxisBox::cube(1, -1.0, 1.0).unwrap();
        let q = DMatrix::identity(1, 1);
        assert!(MpcConfig::new(0, q.clone(), q.clone(), b.clone()).is_err());
        assert!(MpcConfig::new(3, -q.clone(), q.clone(), b.clone()).is_err());
        assert!(MpcConfig::new(3, q.clone(), DMatrix::zeros(1, 1), b.clone()).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(MpcConfig::new(3, asym, q.clone(), b).is_err());
    }

    #[test]
    fn one_step_lq_closed_form() {
        // Only the first move influences a costed state when N = 2.
        let (a, b, q, r) = (0.9, 0.7, 2.0, 0.3);
        let sys = scalar(a, b);
        let cfg = cfg1(2, q, r, 100.0);
        for x in [-1.3, 0.4, 2.0] {
            let sol = solve_ocp(&sys, &cfg, &DVector::from_element(1, x), None).unwrap();
            let expected = -(a * b) * x * q / (r + b * b * q);
            assert!((sol.u_star[0][0] - expected).abs() < 1e-8, "{} vs {expected}", sol.u_star[0][0]);
            assert!(sol.u_star[1][0].abs() < 1e-8);
        }
    }

    #[test]
    fn origin_is_fixed_point_of_the_ocp() {
        let sys = make_van_der_pol();
        let sol = solve_ocp(&sys, &vdp_cfg(10), &DVector::zeros(2), None).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.u_star.iter().all(|u| u[0] == 0.0));
        assert_eq!(value_function(&sys, &vdp_cfg(10), &DVector::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn value_recomputed_from_predictions() {
        let sys = make_van_der_pol();
        let cfg = vdp_cfg(10);
        let sol = solve_ocp(&sys, &cfg, &DVector::from_vec(vec![0.5, 0.5]), None).unwrap();
        let recomputed: f64 = (0..cfg.horizon)
            .map(|i| cfg.stage_cost(&sol.predicted_states[i], &sol.u_star[i]))
            .sum();
        assert!((recomputed - sol.value).abs() <= 1e-10 * sol.value);
        assert!(sol.u_star.iter().all(|u| cfg.input_box.contains(u.as_slice())));
        for i in 0..cfg.horizon {
            let next = sys.step(&sol.predicted_states[i], &sol.u_star[i]).unwrap();
            assert_eq!(next, sol.predicted_states[i + 1]);
        }
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let sys = make_van_der_pol();
        let cfg = vdp_cfg(6);
        let x0 = DVector::from_vec(vec![0.8, -0.4]);
        let u: Vec<DVector<f64>> = (0..6).map(|i| DVector::from_element(1, 0.3 * i as f64 - 0.7)).collect();
        let ro = rollout_with_jacobians(&sys, &cfg, &x0, &u).unwrap();
        let g = adjoint_gradient(&cfg, &ro, &u);
        for i in 0..6 {
            let h = 1e-6;
            let mut up = u.clone();
            let mut um = u.clone();
            up[i][0] += h;
            um[i][0] -= h;
            let fd = (rollout_cost(&sys, &cfg, &x0, &up).unwrap().0 - rollout_cost(&sys, &cfg, &x0, &um).unwrap().0) / (2.0 * h);
            assert!((fd - g[i][0]).abs() < 1e-7, "{i}: {fd} {}", g[i][0]);
        }
    }

    fn lattice_min(sys: &impl Dynamics, cfg: &MpcConfig, x0: &DVector<f64>) -> f64 {
        let levels: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
        let n = cfg.horizon;
        let mut best = f64::INFINITY;
        for idx in 0..9usize.pow(n as u32) {
            let mut k = idx;
            let u: Vec<DVector<f64>> = (0..n)
                .map(|_| {
                    let v = levels[k % 9];
                    k /= 9;
                    DVector::from_element(1, v)
                })
                .collect();
            best = best.min(rollout_cost(sys, cfg, x0, &u).unwrap().0);
        }
        best
    }

    #[test]
    fn lattice_sandwich_on_truth() {
        let sys = make_van_der_pol();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 1..=3 {
            let cfg = vdp_cfg(n);
            for _ in 0..5 {
                let x0 = DVector::from_vec(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
                let sol = best_solution(&sys, &cfg, &x0, None).unwrap();
                let lat = lattice_min(&sys, &cfg, &x0);
                let rounded: Vec<DVector<f64>> = sol
                    .u_star
                    .iter()
                    .map(|u| DVector::from_element(1, (u[0] * 2.0).round() / 2.0))
                    .collect();
                let gap = rollout_cost(&sys, &cfg, &x0, &rounded).unwrap().0 - sol.value;
                assert!(sol.value <= lat + 1e-10, "solver {} lattice {lat}", sol.value);
                assert!(lat - sol.value <= gap + 1e-10);
            }
        }
    }

    #[test]
    fn warm_start_is_consistent() {
        let sys = make_van_der_pol();
        let cfg = vdp_cfg(10);
        let x0 = DVector::from_vec(vec![0.5, 0.5]);
        let sol = solve_ocp(&sys, &cfg, &x0, None).unwrap();
        let again = solve_ocp(&sys, &cfg, &x0, Some(&sol.u_star)).unwrap();
        assert!((again.value - sol.value).abs() <= cfg.solver.gradient_tolerance * cfg.horizon as f64 + 1e-14);
    }

    #[test]
    fn dynamic_programming_inequality() {
        let sys = make_van_der_pol();
        let cfg = vdp_cfg(8);
        let short = cfg.with_horizon(7).unwrap();
        let x0 = DVector::from_vec(vec![-0.7, 0.9]);
        let sol = best_solution(&sys, &cfg, &x0, None).unwrap();
        let x1 = sys.step(&x0, &sol.u_star[0]).unwrap();
        let tail = value_function(&sys, &short, &x1).unwrap();
        assert!(sol.value <= cfg.stage_cost(&x0, &sol.u_star[0]) + tail + 1e-9);
    }

    #[test]
    fn value_bounds_and_monotonicity() {
        let sys = make_van_der_pol();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = DVector::from_vec(vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]);
            let v4 = value_function(&sys, &vdp_cfg(4), &x).unwrap();
            let v5 = value_function(&sys, &vdp_cfg(5), &x).unwrap();
            assert!(v4 >= x.norm_squared() - 1e-12);
            assert!(v4 <= v5 + 1e-9, "{v4} > {v5}");
        }
    }

    #[test]
    fn nominal_linear_closed_loop() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let sys = LinearModel::new(a, b).unwrap();
        let cfg = MpcConfig::new(15, DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, AxisBox::cube(1, -1.0, 1.0).unwrap()).unwrap();
        let x0 = DVector::from_vec(vec![0.3, -0.2]);
        let trace = run_closed_loop(&sys, &sys, &cfg, &x0, 150, None).unwrap();
        assert_eq!(trace.steps(), 150);
        assert_eq!(trace.values.len(), 151);
        let errs = trace.errors();
        assert!(errs.last().unwrap() < &1e-4);
        for k in 0..150 {
            assert_eq!(trace.states[k + 1], sys.step(&trace.states[k], &trace.inputs[k]).unwrap());
        }
        let summary = lyapunov_diagnostics(&trace, 0.0);
        assert!(summary.counted > 0);
        for a in summary.alphas.iter().flatten() {
            assert!(*a > 0.0 && *a <= 1.0 + 1e-9, "{a}");
        }
    }

    #[test]
    fn increasing_value_gives_negative_alpha() {
        let trace = ClosedLoopTrace {
            states: vec![DVector::from_element(1, 1.0), DVector::from_element(1, 2.0)],
            inputs: vec![DVector::from_element(1, 0.0)],
            stage_costs: vec![1.0],
            values: vec![1.0, 3.0],
            lyapunov_alphas: vec![],
            iterations: vec![0, 0],
            statuses: vec![SolverStatus::Converged; 2],
            solve_seconds: vec![],
            domain_exits: vec![],
            failure: None,
        };
        let s = lyapunov_diagnostics(&trace, 0.0);
        assert_eq!(s.alphas, vec![Some(-2.0)]);
        assert_eq!(s.min, Some(-2.0));
    }

    #[test]
    fn trace_csv_round_trip_and_empty() {
        let sys = scalar(0.9, 1.0);
        let cfg = cfg1(3, 1.0, 0.5, 1.0);
        let trace = run_closed_loop(&sys, &sys, &cfg, &DVector::from_element(1, 0.8), 5, None).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace, 1, 1).unwrap();
        let rows = read_trace_csv(buf.as_slice(), 1, 1).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[2].x[0], trace.states[2][0]);
        assert_eq!(rows[4].value, trace.values[4]);
        let empty = run_closed_loop(&sys, &sys, &cfg, &DVector::from_element(1, 0.8), 0, None).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &empty, 1, 1).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn closed_loop_is_reproducible() {
        let sys = make_van_der_pol();
        let cfg = vdp_cfg(5);
        let x0 = DVector::from_vec(vec![0.5, 0.5]);
        let a = run_closed_loop(&sys, &sys, &cfg, &x0, 20, Some(sys.domain())).unwrap();
        let b = run_closed_loop(&sys, &sys, &cfg, &x0, 20, Some(sys.domain())).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.values, b.values);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn solutions_stay_in_the_box(x1 in -2.0f64..2.0, x2 in -2.0f64..2.0) {
            let sys = make_van_der_pol();
            let mut cfg = vdp_cfg(5);
            cfg.input_box = AxisBox::cube(1, -0.3, 0.3).unwrap();
            let sol = solve_ocp(&sys, &cfg, &DVector::from_vec(vec![x1, x2]), None).unwrap();
            prop_assert!(sol.u_star.iter().all(|u| u[0].abs() <= 0.3));
        }
    }
}
