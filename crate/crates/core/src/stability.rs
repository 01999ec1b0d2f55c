//! Growth bounds of cost controllability and the suboptimality index.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Differentiable, Dynamics};
use crate::error::{Error, Result};
use crate::geometry::AxisBox;

/// `alpha` values at or below this are treated as non-positive.
pub const ALPHA_POSITIVITY_THRESHOLD: f64 = 1e-12;
/// Samples whose normalized probe cost exceeds this are excluded.
pub const DIVERGENCE_RATIO: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthSource {
    Estimated,
    Supplied,
    Propagated,
    Extended,
}

/// `B_1, ..., B_Nbar`; `values[k]` holds `B_{k+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthBoundSequence {
    pub values: Vec<f64>,
    pub source: GrowthSource,
}

impl GrowthBoundSequence {
    pub fn supplied(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Config("growth bounds must be positive and finite".into()));
        }
        Ok(Self {
            values,
            source: GrowthSource::Supplied,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `B_n` with 1-based index.
    pub fn b(&self, n: usize) -> f64 {
        self.values[n - 1]
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }

    /// Running maximum.
    pub fn monotonized(&self) -> Self {
        let mut acc = f64::NEG_INFINITY;
        Self {
            values: self
                .values
                .iter()
                .map(|b| {
                    acc = acc.max(*b);
                    acc
                })
                .collect(),
            source: self.source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityIndex {
    pub alpha: f64,
    pub horizon: usize,
}

impl SuboptimalityIndex {
    pub fn is_positive(&self) -> bool {
        self.alpha > ALPHA_POSITIVITY_THRESHOLD
    }
}

/// Closed-form `alpha_N` from the growth bounds; empty products are one.
///
/// Evaluated as `1 - a_2 a_N rho / (B_2 - a_2 rho)` with `a_i = B_i - 1` and
/// `rho = prod_{i=3..N} a_i / B_i`, which is the same ratio with both parts
/// divided by `prod_{i=3..N} B_i` and never overflows. A non-positive
/// denominator yields `-inf`.
pub fn alpha_from_growth(b: &GrowthBoundSequence, horizon: usize) -> Result<SuboptimalityIndex> {
    if horizon < 2 || horizon > b.len() {
        return Err(Error::Usage(format!(
            "horizon {horizon} outside [2, {}]",
            b.len()
        )));
    }
    let a = |i: usize| b.b(i) - 1.0;
    let rho: f64 = (3..=horizon).map(|i| a(i) / b.b(i)).product();
    let denom = b.b(2) - a(2) * rho;
    let alpha = if denom > 0.0 && denom.is_finite() {
        1.0 - a(2) * a(horizon) * rho / denom
    } else {
        f64::NEG_INFINITY
    };
    Ok(SuboptimalityIndex { alpha, horizon })
}

/// `alpha_N` for every `N` in `2..=len`.
pub fn alpha_sweep(b: &GrowthBoundSequence) -> Vec<SuboptimalityIndex> {
    (2..=b.len())
        .map(|n| alpha_from_growth(b, n).expect("horizon within range"))
        .collect()
}

/// Smallest horizon with a positive `alpha_N`.
pub fn minimal_stabilizing_horizon(b: &GrowthBoundSequence) -> Option<usize> {
    alpha_sweep(b)
        .into_iter()
        .find(|s| s.is_positive())
        .map(|s| s.horizon)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().max()
}

/// Constants `(c_N, cbar_N)` of the surrogate growth-bound recursion.
pub fn propagation_constants(b: &GrowthBoundSequence, n: usize, d: f64, lam: f64) -> (f64, f64) {
    let mut c = 0.0;
    let mut s = 0.0;
    let mut mx: f64 = 0.0;
    for j in 1..n {
        let bj = b.b(n - j);
        c += (2.0 * d * d).powi(j as i32 - 1) * bj;
        s += d.powi(j as i32 - 1) * bj;
        mx = mx.max(d.powi(j as i32 - 1) * (n - j) as f64);
    }
    (4.0 / lam * c, (s + 2.0 * b.b(n) * mx) / (2.0 * lam))
}

/// Growth bounds of the surrogate-based problem from those of the true one.
///
/// With `cbar = max(c_x, c_u)` and `d = L_f + c_x`,
/// `B_N^eps = B_N + cbar^2 c_N + cbar cbar_N`.
pub fn propagate_growth_to_surrogate(
    b: &GrowthBoundSequence,
    c_x: f64,
    c_u: f64,
    l_f: f64,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<GrowthBoundSequence> {
    if c_x < 0.0 || c_u < 0.0 || l_f < 0.0 {
        return Err(Error::Config("error constants must be nonnegative".into()));
    }
    let lam = min_eigenvalue(q).min(min_eigenvalue(r));
    if !(lam > 0.0) {
        return Err(Error::Config("weights must be positive definite".into()));
    }
    let cbar = c_x.max(c_u);
    let d = l_f + c_x;
    let values = (1..=b.len())
        .map(|n| {
            let (c_n, cbar_n) = propagation_constants(b, n, d, lam);
            b.b(n) + cbar * cbar * c_n + cbar * cbar_n
        })
        .collect();
    Ok(GrowthBoundSequence {
        values,
        source: GrowthSource::Propagated,
    })
}

/// Keep `B_1..B_N` and set `B_k = B_N / alpha_N` for `N < k <= k_max`.
pub fn extend_growth_sequence(
    b: &GrowthBoundSequence,
    horizon: usize,
    alpha: f64,
    k_max: usize,
) -> Result<GrowthBoundSequence> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Numerical(format!(
            "extension needs alpha in (0, 1], got {alpha}"
        )));
    }
    if horizon == 0 || horizon > b.len() {
        return Err(Error::Usage(format!("horizon {horizon} outside the sequence")));
    }
    let tail = b.b(horizon) / alpha;
    let mut values = b.values[..horizon].to_vec();
    values.extend(std::iter::repeat_n(tail, k_max.saturating_sub(horizon)));
    Ok(GrowthBoundSequence {
        values,
        source: GrowthSource::Extended,
    })
}

pub type PolicyFn = Arc<dyn Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync>;

/// Control law used to probe cost controllability.
#[derive(Clone)]
pub enum ProbePolicy {
    Zero,
    /// `u = -K x`, saturated to the input box.
    SaturatedLinear(DMatrix<f64>),
    /// `(state, step) -> input`, saturated to the input box.
    Custom(PolicyFn),
}

impl std::fmt::Debug for ProbePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbePolicy::Zero => write!(f, "Zero"),
            ProbePolicy::SaturatedLinear(k) => write!(f, "SaturatedLinear({k})"),
            ProbePolicy::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl ProbePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ProbePolicy::Zero => "zero",
            ProbePolicy::SaturatedLinear(_) => "saturated_lqr",
            ProbePolicy::Custom(_) => "custom",
        }
    }

    /// LQR gain of the linearization at the origin.
    pub fn lqr<M: Differentiable>(model: &M, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let (a, b) = model.linearize_at_origin()?;
        Ok(ProbePolicy::SaturatedLinear(dlqr(&a, &b, q, r)?))
    }

    fn input(&self, x: &DVector<f64>, k: usize, m: usize) -> DVector<f64> {
        match self {
            ProbePolicy::Zero => DVector::zeros(m),
            ProbePolicy::SaturatedLinear(gain) => -(gain * x),
            ProbePolicy::Custom(f) => f(x, k),
        }
    }
}

/// Gain of the discrete-time LQR by Riccati iteration.
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let gain = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("Riccati iteration lost definiteness".into()))?
            .solve(&(&btp * a));
        let next = a.transpose() * &p * a - a.transpose() * &p * b * &gain + q;
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &p).amax();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("Riccati iteration diverged".into()));
        }
        if change <= 1e-13 * p.amax().max(1.0) {
            let btp = b.transpose() * &p;
            return (r + &btp * b)
                .cholesky()
                .map(|c| c.solve(&(&btp * a)))
                .ok_or_else(|| Error::Numerical("Riccati solution not definite".into()));
        }
    }
    Err(Error::Numerical("Riccati iteration did not converge".into()))
}

/// Sampled growth bounds with per-sample bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthEstimate {
    pub sequence: GrowthBoundSequence,
    pub probe: String,
    pub samples_used: usize,
    /// Indices of excluded samples (diverging or failing rollouts).
    pub flagged: Vec<usize>,
    /// Sample index attaining each `B_N` before monotonization.
    pub argmax: Vec<usize>,
    /// Samples whose probe trajectory left the sampling box.
    pub left_set: Vec<usize>,
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Estimate `B_1..B_Nbar` as the largest normalized probe cost over the samples.
#[allow(clippy::too_many_arguments)]
pub fn estimate_growth_bounds<D: Dynamics>(
    sys: &D,
    samples: &[DVector<f64>],
    n_bar: usize,
    probe: &ProbePolicy,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    input_box: &AxisBox,
    set: Option<&AxisBox>,
) -> Result<GrowthEstimate> {
    if n_bar == 0 {
        return Err(Error::Usage("need at least one horizon".into()));
    }
    let m = sys.input_dim();
    let rows: Vec<(usize, Option<Vec<f64>>, bool)> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, x0)| {
            let ell_star = quad(q, x0);
            if !(ell_star > 0.0) {
                return (idx, None, false);
            }
            let mut x = x0.clone();
            let mut total = 0.0;
            let mut ratios = Vec::with_capacity(n_bar);
            let mut left = false;
            for k in 0..n_bar {
                let mut u = probe.input(&x, k, m);
                input_box.project(u.as_mut_slice());
                total += quad(q, &x) + quad(r, &u);
                ratios.push(total / ell_star);
                if k + 1 < n_bar {
                    match sys.step(&x, &u) {
                        Ok(next) if next.iter().all(|v| v.is_finite()) => x = next,
                        _ => return (idx, None, left),
                    }
                    if set.is_some_and(|s| !s.contains(x.as_slice())) {
                        left = true;
                    }
                }
            }
            if !(ratios[n_bar - 1] <= DIVERGENCE_RATIO) {
                return (idx, None, left);
            }
            (idx, Some(ratios), left)
        })
        .collect();
    let mut values = vec![f64::NEG_INFINITY; n_bar];
    let mut argmax = vec![usize::MAX; n_bar];
    let mut flagged = Vec::new();
    let mut left_set = Vec::new();
    let mut used = 0;
    for (idx, ratios, left) in rows {
        if left {
            left_set.push(idx);
        }
        match ratios {
            None => flagged.push(idx),
            Some(r) => {
                used += 1;
                for (k, v) in r.into_iter().enumerate() {
                    if v > values[k] {
                        values[k] = v;
                        argmax[k] = idx;
                    }
                }
            }
        }
    }
    if used == 0 {
        return Err(Error::Data("no usable growth-bound samples".into()));
    }
    let sequence = GrowthBoundSequence {
        values,
        source: GrowthSource::Estimated,
    }
    .monotonized();
    Ok(GrowthEstimate {
        sequence,
        probe: probe.name().into(),
        samples_used: used,
        flagged,
        argmax,
        left_set,
    })
}

/// CSV with columns `N, B_N, B_N_eps, alpha_N, alpha_N_eps`.
pub fn write_growth_csv<W: Write>(
    writer: W,
    b: &GrowthBoundSequence,
    b_eps: Option<&GrowthBoundSequence>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["N", "B_N", "B_N_eps", "alpha_N", "alpha_N_eps"])?;
    let fmt_alpha = |s: &GrowthBoundSequence, n: usize| {
        if n >= 2 && n <= s.len() {
            format!("{:e}", alpha_from_growth(s, n).expect("in range").alpha)
        } else {
            String::new()
        }
    };
    for n in 1..=b.len() {
        let eps = b_eps.filter(|e| n <= e.len());
        w.write_record([
            n.to_string(),
            format!("{:e}", b.b(n)),
            eps.map(|e| format!("{:e}", e.b(n))).unwrap_or_default(),
            fmt_alpha(b, n),
            eps.map(|e| fmt_alpha(e, n)).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn eig_bounds(m: &DMatrix<f64>) -> (f64, f64) {
    (min_eigenvalue(m), max_eigenvalue(m))
}
