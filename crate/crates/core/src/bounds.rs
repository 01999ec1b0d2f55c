//! Empirical error bounds, Lipschitz estimates and stability margins.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{spectral_norm, Differentiable, Dynamics};
use crate::error::{Error, Result};
use crate::geometry::AxisBox;
use crate::kernel::{default_fill_resolution, fill_distance, signvector_quadform_bound, PointSet, QuadformBound};
use crate::mpc::{ClosedLoopTrace, MpcConfig};
use crate::stability::{eig_bounds, GrowthBoundSequence};
use crate::surrogate::SurrogateModel;
use crate::systems::ControlAffineSystem;

/// Relative inflation applied to fitted constants so rounding cannot uncover a sample.
pub const ENVELOPE_INFLATION: f64 = 1e-12;
/// Number of log-spaced `c_x` candidates in the envelope sweep.
pub const ENVELOPE_GRID: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Test states closer than this to a training center are dropped.
    pub min_center_distance: f64,
    pub lipschitz_resolution: usize,
    /// Lattice resolution for the fill distance; `None` picks a per-dimension default.
    pub fill_resolution: Option<usize>,
    pub quadform_samples: usize,
    pub seed: u64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            min_center_distance: 1e-9,
            lipschitz_resolution: 21,
            fill_resolution: None,
            quadform_samples: 64,
            seed: 0,
        }
    }
}

/// Covering constants of the pointwise error over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub eta_hat: f64,
    pub c_x_hat: f64,
    pub c_u_hat: f64,
    /// Error at `(0, 0)` when the origin is among the samples.
    pub origin_error: Option<f64>,
    pub samples: usize,
    /// Samples not covered by `c_x ||x|| + c_u ||u||`; zero by construction.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestGridSummary {
    pub states: usize,
    pub inputs: usize,
    /// States dropped by the minimum-distance filter.
    pub dropped_states: usize,
    pub min_center_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub eta_hat: f64,
    pub c_x_hat: f64,
    pub c_u_hat: f64,
    pub l_hat: f64,
    pub h_x: f64,
    pub r_x: f64,
    pub excitation_score: Option<f64>,
    pub quadform_bracket: (f64, f64),
    /// `||K_X^{-1}||_2` estimate.
    pub inverse_norm: f64,
    /// `excitation_score * sqrt(phi(0)) * sqrt(max_v v^T K^{-1} v)` with the upper bracket.
    pub cluster_constant: Option<f64>,
    pub origin_error: Option<f64>,
    pub pi: bool,
    pub centers: usize,
    pub violations: usize,
    pub test_grid: TestGridSummary,
}

struct ErrorSample {
    x_norm: f64,
    u_norm: f64,
    err: f64,
}

fn error_samples<T: Dynamics, M: Dynamics>(
    truth: &T,
    model: &M,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Result<Vec<ErrorSample>> {
    let rows: Vec<Result<Vec<ErrorSample>>> = states
        .par_iter()
        .map(|x| {
            inputs
                .iter()
                .map(|u| {
                    let err = (truth.step(x, u)? - model.step(x, u)?).norm();
                    Ok(ErrorSample { x_norm: x.norm(), u_norm: u.norm(), err })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(states.len() * inputs.len());
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn sweep(samples: &[ErrorSample], weight_u: f64) -> (f64, f64) {
    let active: Vec<&ErrorSample> = samples
        .iter()
        .filter(|s| (s.x_norm > 0.0 || s.u_norm > 0.0) && s.err > 0.0)
        .collect();
    if active.is_empty() {
        return (0.0, 0.0);
    }
    let c_x_min = active
        .iter()
        .filter(|s| s.u_norm == 0.0)
        .map(|s| s.err / s.x_norm)
        .fold(0.0, f64::max);
    let c_x_max = active
        .iter()
        .filter(|s| s.x_norm > 0.0)
        .map(|s| s.err / s.x_norm)
        .fold(c_x_min, f64::max);
    let c_u_for = |c_x: f64| {
        active
            .iter()
            .filter(|s| s.u_norm > 0.0)
            .map(|s| (s.err - c_x * s.x_norm).max(0.0) / s.u_norm)
            .fold(0.0, f64::max)
    };
    let mut candidates = vec![c_x_min, c_x_max];
    if c_x_max > 0.0 {
        let lo = c_x_min.max(c_x_max * 1e-10);
        let ratio = (c_x_max / lo).ln();
        candidates.extend((0..ENVELOPE_GRID).map(|i| lo * (ratio * i as f64 / (ENVELOPE_GRID - 1) as f64).exp()));
    }
    candidates.retain(|c| *c >= c_x_min && *c <= c_x_max);
    candidates.sort_by(f64::total_cmp);
    let mut best = (c_x_max, c_u_for(c_x_max));
    let mut best_obj = best.0 + weight_u * best.1;
    for c_x in candidates {
        let c_u = c_u_for(c_x);
        let obj = c_x + weight_u * c_u;
        if obj < best_obj {
            best = (c_x, c_u);
            best_obj = obj;
        }
    }
    (best.0 * (1.0 + ENVELOPE_INFLATION), best.1 * (1.0 + ENVELOPE_INFLATION))
}

/// Uniform and proportional error envelope of `model` against `truth`.
///
/// `(c_x, c_u)` minimizes `c_x + c_u diam(U) / diam(Omega)` among pairs
/// covering every sample; the origin sample is excluded from the fit.
pub fn error_envelope<T: Dynamics, M: Dynamics>(
    truth: &T,
    model: &M,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
    domain: &AxisBox,
    input_box: &AxisBox,
) -> Result<ErrorEnvelope> {
    if states.is_empty() || inputs.is_empty() {
        return Err(Error::Usage("empty test set".into()));
    }
    let samples = error_samples(truth, model, states, inputs)?;
    let eta_hat = samples.iter().map(|s| s.err).fold(0.0, f64::max);
    let weight_u = if domain.diameter() > 0.0 { input_box.diameter() / domain.diameter() } else { 1.0 };
    let (c_x_hat, c_u_hat) = sweep(&samples, weight_u);
    let origin_error = samples
        .iter()
        .find(|s| s.x_norm == 0.0 && s.u_norm == 0.0)
        .map(|s| s.err);
    let violations = samples
        .iter()
        .filter(|s| (s.x_norm > 0.0 || s.u_norm > 0.0) && s.err > c_x_hat * s.x_norm + c_u_hat * s.u_norm)
        .count();
    Ok(ErrorEnvelope {
        eta_hat,
        c_x_hat,
        c_u_hat,
        origin_error,
        samples: samples.len(),
        violations,
    })
}

/// Test states at least `min_distance` away from every point of `centers`.
pub fn filter_test_states(states: &PointSet, centers: &PointSet, min_distance: f64) -> Vec<DVector<f64>> {
    states
        .iter()
        .filter(|x| {
            centers.iter().all(|c| {
                let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= min_distance
            })
        })
        .map(DVector::from_column_slice)
        .collect()
}

/// Error scan of a fitted surrogate with its data-dependent constants.
pub fn empirical_error_scan(
    truth: &ControlAffineSystem,
    model: &SurrogateModel,
    test_states: &PointSet,
    test_inputs: &[DVector<f64>],
    options: &ScanOptions,
) -> Result<ErrorBoundReport> {
    let centers = model.kernel().centers();
    let kept = filter_test_states(test_states, centers, options.min_center_distance);
    if kept.is_empty() || test_inputs.is_empty() {
        return Err(Error::Usage("empty test set after filtering".into()));
    }
    let env = error_envelope(truth, model, &kept, test_inputs, truth.domain(), truth.input_box())?;
    let l_hat = lipschitz_estimate(model, truth.domain(), truth.input_box(), options.lipschitz_resolution)?;
    let resolution = options
        .fill_resolution
        .unwrap_or_else(|| default_fill_resolution(centers.dim()));
    let h_x = fill_distance(centers, truth.domain(), resolution)?;
    let quad: QuadformBound = signvector_quadform_bound(model.kernel(), options.quadform_samples, options.seed);
    let n = truth.state_dim();
    let m = truth.input_dim();
    let (zx, zu) = (DVector::zeros(n), DVector::zeros(m));
    let origin_error = match env.origin_error {
        Some(e) => Some(e),
        None if truth.domain().contains(zx.as_slice()) && truth.input_box().contains(zu.as_slice()) => {
            Some((truth.step(&zx, &zu)? - model.step(&zx, &zu)?).norm())
        }
        None => None,
    };
    let excitation_score = model.metadata().excitation_score;
    let cluster_constant =
        excitation_score.map(|s| s * model.spec().phi0().sqrt() * quad.upper.max(0.0).sqrt());
    Ok(ErrorBoundReport {
        eta_hat: env.eta_hat,
        c_x_hat: env.c_x_hat,
        c_u_hat: env.c_u_hat,
        l_hat,
        h_x,
        r_x: model.metadata().r_x,
        excitation_score,
        quadform_bracket: (quad.lower, quad.upper),
        inverse_norm: model.kernel().inverse_norm_estimate(),
        cluster_constant,
        origin_error,
        pi: model.is_pi(),
        centers: centers.len(),
        violations: env.violations,
        test_grid: TestGridSummary {
            states: kept.len(),
            inputs: test_inputs.len(),
            dropped_states: test_states.len() - kept.len(),
            min_center_distance: options.min_center_distance,
        },
    })
}

/// Largest `||J_x||_2` over a lattice of `omega` and the vertices of `input_box`.
pub fn lipschitz_estimate<M: Differentiable>(
    model: &M,
    omega: &AxisBox,
    input_box: &AxisBox,
    resolution: usize,
) -> Result<f64> {
    let vertices: Vec<DVector<f64>> = if input_box.dim() == 0 {
        vec![DVector::zeros(0)]
    } else {
        input_box.vertices()
    };
    let points = omega.lattice(resolution.max(1));
    let norms: Vec<Result<f64>> = points
        .par_iter()
        .map(|x| {
            let mut best = 0.0f64;
            for u in &vertices {
                let (_, jx, _) = model.step_with_jacobians(x, u)?;
                best = best.max(spectral_norm(&jx));
            }
            Ok(best)
        })
        .collect();
    let mut best = 0.0f64;
    for n in norms {
        best = best.max(n?);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonRow {
    pub h_x: f64,
    pub r_x: f64,
    /// `h_X^(k + 1/2)`.
    pub uniform_basis: f64,
    /// `c ||K^{-1}|| r_X`, zero when the cluster constant is unknown.
    pub cluster_basis: f64,
    /// `h_X^(k - 1/2)`, the scaling of the input-proportional constant.
    pub proportional_basis: f64,
    pub eta_hat: f64,
    pub fitted: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedConstants {
    pub c1: f64,
    pub c2: f64,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCheck {
    pub from: usize,
    pub to: usize,
    pub predicted: f64,
    pub measured: f64,
}

/// Structural terms of the uniform bound and their fitted magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundDecomposition {
    pub k: usize,
    pub uniform_exponent: f64,
    pub proportional_exponent: f64,
    pub symbolic: String,
    pub rows: Vec<SkeletonRow>,
    /// Present only with at least three scans.
    pub fitted: Option<FittedConstants>,
    pub ratios: Vec<RatioCheck>,
}

pub const MIN_SKELETON_SCANS: usize = 3;

fn nonnegative_least_squares(a: &[(f64, f64)], y: &[f64]) -> (f64, f64) {
    let residual = |c1: f64, c2: f64| -> f64 {
        a.iter()
            .zip(y)
            .map(|((p, q), t)| (c1 * p + c2 * q - t).powi(2))
            .sum()
    };
    let single = |col: usize| -> f64 {
        let (num, den) = a.iter().zip(y).fold((0.0, 0.0), |(n, d), (r, t)| {
            let v = if col == 0 { r.0 } else { r.1 };
            (n + v * t, d + v * v)
        });
        if den > 0.0 { (num / den).max(0.0) } else { 0.0 }
    };
    let mut options = vec![(single(0), 0.0), (0.0, single(1)), (0.0, 0.0)];
    let m = DMatrix::from_fn(a.len(), 2, |i, j| if j == 0 { a[i].0 } else { a[i].1 });
    let rhs = DVector::from_column_slice(y);
    if let Ok(sol) = m.clone().svd(true, true).solve(&rhs, 1e-14) {
        if sol[0] >= 0.0 && sol[1] >= 0.0 && a.iter().any(|r| r.1 != 0.0) {
            options.push((sol[0], sol[1]));
        }
    }
    options
        .into_iter()
        .min_by(|p, q| residual(p.0, p.1).total_cmp(&residual(q.0, q.1)))
        .expect("nonempty")
}

/// Fits `eta ~ C1 h^(k+1/2) + C2 c ||K^{-1}|| r_X` over several scans.
pub fn theoretical_bound_skeleton(reports: &[ErrorBoundReport], k: usize) -> BoundDecomposition {
    let uniform_exponent = k as f64 + 0.5;
    let proportional_exponent = k as f64 - 0.5;
    let mut rows: Vec<SkeletonRow> = reports
        .iter()
        .map(|r| SkeletonRow {
            h_x: r.h_x,
            r_x: r.r_x,
            uniform_basis: r.h_x.powf(uniform_exponent),
            cluster_basis: r.cluster_constant.unwrap_or(0.0) * r.inverse_norm * r.r_x,
            proportional_basis: r.h_x.powf(proportional_exponent),
            eta_hat: r.eta_hat,
            fitted: None,
        })
        .collect();
    let fitted = (rows.len() >= MIN_SKELETON_SCANS).then(|| {
        let a: Vec<(f64, f64)> = rows.iter().map(|r| (r.uniform_basis, r.cluster_basis)).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.eta_hat).collect();
        let (c1, c2) = nonnegative_least_squares(&a, &y);
        let mut res = 0.0;
        for r in rows.iter_mut() {
            let p = c1 * r.uniform_basis + c2 * r.cluster_basis;
            res += (p - r.eta_hat).powi(2);
            r.fitted = Some(p);
        }
        FittedConstants { c1, c2, residual_norm: res.sqrt() }
    });
    let ratios = (1..rows.len())
        .map(|i| RatioCheck {
            from: i - 1,
            to: i,
            predicted: (rows[i].h_x / rows[i - 1].h_x).powf(uniform_exponent),
            measured: rows[i].eta_hat / rows[i - 1].eta_hat,
        })
        .collect();
    BoundDecomposition {
        k,
        uniform_exponent,
        proportional_exponent,
        symbolic: format!(
            "eta <= C1 h_X^{uniform_exponent} + C2 c ||K_X^-1|| r_X ; c_u ~ C1 h_X^{proportional_exponent} (C1, C2 fitted, not certified)"
        ),
        rows,
        fitted,
        ratios,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityMarginReport {
    pub c_x: f64,
    pub c_u: f64,
    pub alpha_eps: f64,
    pub kappa: f64,
    pub b_n: f64,
    pub l_hat: f64,
    pub horizon: usize,
    /// `C_x + C_u kappa^2 - alpha lambda_min(Q)`.
    pub margin: f64,
    pub verdict: bool,
}

/// Decrease certificate of the closed loop from the fitted error constants.
pub fn stability_margin(
    err: &ErrorBoundReport,
    cfg: &MpcConfig,
    b_eps: &GrowthBoundSequence,
    l_hat: f64,
    alpha_eps: f64,
    kappa: f64,
) -> Result<StabilityMarginReport> {
    if !(alpha_eps > 0.0 && alpha_eps <= 1.0) {
        return Err(Error::Usage(format!("suboptimality index {alpha_eps} is not in (0, 1]; certificate refused")));
    }
    let n = cfg.horizon;
    if b_eps.len() < n {
        return Err(Error::Usage(format!("growth sequence has {} entries, horizon is {n}", b_eps.len())));
    }
    if !(l_hat >= 0.0 && kappa >= 0.0) {
        return Err(Error::Usage("Lipschitz estimate and kappa must be nonnegative".into()));
    }
    let b_n = b_eps.b(n);
    let (q_min, q_max) = eig_bounds(&cfg.q);
    let (r_min, _) = eig_bounds(&cfg.r);
    let lam_lo = q_min.min(r_min);
    let root = (b_n * q_max / lam_lo).sqrt();
    let (cx, cu) = (err.c_x_hat, err.c_u_hat);
    let mut sx = 0.0;
    let mut su = 0.0;
    for i in 0..n {
        let li = l_hat.powi(i as i32);
        sx += root * li * (cx + 0.5 * cu) + (li * cx).powi(2);
        su += root * li * 0.5 * cu + (li * cu).powi(2);
    }
    let c_x = 2.0 * q_max * sx;
    let c_u = 2.0 * q_max * su;
    let margin = c_x + c_u * kappa * kappa - alpha_eps * q_min;
    Ok(StabilityMarginReport {
        c_x,
        c_u,
        alpha_eps,
        kappa,
        b_n,
        l_hat,
        horizon: n,
        margin,
        verdict: margin < 0.0,
    })
}

/// Largest `||u(k)|| / ||x(k)||` along a trace, over states with norm at least `min_state_norm`.
pub fn observed_kappa(trace: &ClosedLoopTrace, min_state_norm: f64) -> f64 {
    trace
        .inputs
        .iter()
        .zip(&trace.states)
        .filter(|(_, x)| x.norm() >= min_state_norm && x.norm() > 0.0)
        .map(|(u, x)| u.norm() / x.norm())
        .fold(0.0, f64::max)
}

/// One CSV row per scan.
pub fn write_scan_csv<W: Write>(writer: W, reports: &[ErrorBoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "centers",
        "pi",
        "h_x",
        "r_x",
        "eta_hat",
        "c_x_hat",
        "c_u_hat",
        "l_hat",
        "excitation_score",
        "quadform_lower",
        "quadform_upper",
        "inverse_norm",
        "origin_error",
        "violations",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.centers.to_string(),
            r.pi.to_string(),
            format!("{:e}", r.h_x),
            format!("{:e}", r.r_x),
            format!("{:e}", r.eta_hat),
            format!("{:e}", r.c_x_hat),
            format!("{:e}", r.c_u_hat),
            format!("{:e}", r.l_hat),
            opt(r.excitation_score),
            format!("{:e}", r.quadform_bracket.0),
            format!("{:e}", r.quadform_bracket.1),
            format!("{:e}", r.inverse_norm),
            opt(r.origin_error),
            r.violations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearModel;
    use crate::kernel::{padua_points, KernelSpec};
    use crate::sampling::generate_dataset;
    use crate::surrogate::fit_surrogate;
    use crate::systems::{make_linear, make_van_der_pol};

    fn lattice_states(b: &AxisBox, per_axis: usize) -> Vec<DVector<f64>> {
        b.lattice(per_axis)
    }

    fn report_with(cx: f64, cu: f64) -> ErrorBoundReport {
        ErrorBoundReport {
            eta_hat: 0.0,
            c_x_hat: cx,
            c_u_hat: cu,
            l_hat: 1.1,
            h_x: 0.1,
            r_x: 0.0,
            excitation_score: None,
            quadform_bracket: (0.0, 0.0),
            inverse_norm: 1.0,
            cluster_constant: None,
            origin_error: None,
            pi: true,
            centers: 1,
            violations: 0,
            test_grid: TestGridSummary { states: 1, inputs: 1, dropped_states: 0, min_center_distance: 0.0 },
        }
    }

    #[test]
    fn self_scan_is_zero() {
        let sys = make_van_der_pol();
        let states = lattice_states(sys.domain(), 15);
        let inputs: Vec<DVector<f64>> = [-2.0, 0.0, 1.0].iter().map(|u| DVector::from_element(1, *u)).collect();
        let env = error_envelope(&sys, &sys, &states, &inputs, sys.domain(), sys.input_box()).unwrap();
        assert_eq!(env.eta_hat, 0.0);
        assert_eq!((env.c_x_hat, env.c_u_hat), (0.0, 0.0));
        assert_eq!(env.origin_error, Some(0.0));
    }

    #[test]
    fn empty_test_set_is_refused() {
        let sys = make_van_der_pol();
        let inputs = vec![DVector::zeros(1)];
        assert!(matches!(
            error_envelope(&sys, &sys, &[], &inputs, sys.domain(), sys.input_box()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn envelope_covers_a_known_error_model() {
        // truth x+ = 0.5 x + u, model x+ = 0.4 x + 0.7 u: err = |0.1 x + 0.3 u|.
        let boxu = AxisBox::cube(1, -1.0, 1.0).unwrap();
        let boxx = AxisBox::cube(1, -2.0, 2.0).unwrap();
        let lin = |a: f64, b: f64| {
            make_linear(
                LinearModel::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap(),
                boxu.clone(),
                boxx.clone(),
            )
            .unwrap()
        };
        let truth = lin(0.5, 1.0);
        let model = lin(0.4, 0.7);
        let states = lattice_states(&boxx, 41);
        let inputs = lattice_states(&boxu, 21);
        let env = error_envelope(&truth, &model, &states, &inputs, &boxx, &boxu).unwrap();
        assert_eq!(env.violations, 0);
        assert!((env.eta_hat - 0.5).abs() < 1e-12);
        // The exact pair (0.1, 0.3) covers; the minimal weighted sum cannot exceed it.
        assert!(env.c_x_hat + 0.5 * env.c_u_hat <= 0.1 + 0.5 * 0.3 + 1e-9);
        assert!(env.c_x_hat >= 0.0 && env.c_u_hat >= 0.0);
        // Growing the test set never lowers eta.
        let more = lattice_states(&boxx, 81);
        let env2 = error_envelope(&truth, &model, &more, &inputs, &boxx, &boxu).unwrap();
        assert!(env2.eta_hat >= env.eta_hat);
    }

    #[test]
    fn filter_drops_centers() {
        let centers = PointSet::from_points(&[DVector::from_vec(vec![0.0, 0.0])]).unwrap();
        let states = PointSet::from_points(&[DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![0.5, 0.0])]).unwrap();
        let kept = filter_test_states(&states, &centers, 1e-9);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0][0], 0.5);
    }

    #[test]
    fn lipschitz_of_zero_and_identity() {
        let b = AxisBox::cube(1, -1.0, 1.0).unwrap();
        let id = make_linear(
            LinearModel::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1)).unwrap(),
            b.clone(),
            b.clone(),
        )
        .unwrap();
        let centers = AxisBox::cube(1, -1.0, 1.0).unwrap().lattice(81);
        let mut pts: Vec<DVector<f64>> = vec![DVector::zeros(1)];
        pts.extend(centers.into_iter().filter(|p| p[0] != 0.0));
        let set = PointSet::from_points(&pts).unwrap();
        let ds = generate_dataset(&id, &set, 0.0, 3, 1).unwrap();
        let spec = KernelSpec::default_for(&b, set.len()).unwrap();
        let model = fit_surrogate(&ds, &spec, true).unwrap();
        let l = lipschitz_estimate(&model, &b, &b, 201).unwrap();
        assert!((l - 1.0).abs() < 0.05, "{l}");
        assert_eq!(lipschitz_estimate(&model.zeroed(), &b, &b, 51).unwrap(), 0.0);
        let coarse = lipschitz_estimate(&model, &b, &b, 11).unwrap();
        let fine = lipschitz_estimate(&model, &b, &b, 21).unwrap();
        assert!(fine >= coarse);
    }

    #[test]
    fn skeleton_needs_three_scans_and_zero_radius_gives_zero_c2() {
        let mut reps: Vec<ErrorBoundReport> = [0.4, 0.2, 0.1]
            .iter()
            .map(|h| {
                let mut r = report_with(0.0, 0.0);
                r.h_x = *h;
                r.eta_hat = 3.0 * h * h.sqrt();
                r.cluster_constant = Some(5.0);
                r
            })
            .collect();
        let s = theoretical_bound_skeleton(&reps[..2], 1);
        assert!(s.fitted.is_none());
        assert_eq!(s.uniform_exponent, 1.5);
        assert_eq!(s.proportional_exponent, 0.5);
        let predicted = 0.5f64.powf(1.5);
        assert!((s.ratios[0].predicted - predicted).abs() < 1e-15);
        assert!((s.ratios[0].measured - predicted).abs() < 1e-12);
        let s = theoretical_bound_skeleton(&reps, 1);
        let f = s.fitted.unwrap();
        assert!((f.c1 - 3.0).abs() < 1e-9);
        assert_eq!(f.c2, 0.0);
        assert!(s.rows.iter().all(|r| r.cluster_basis == 0.0));
        // A pure cluster-radius error is attributed to C2.
        for (i, r) in reps.iter_mut().enumerate() {
            r.r_x = 0.01 * (i + 1) as f64;
            r.eta_hat = 2.0 * 5.0 * r.r_x;
            r.h_x = 1e-8;
        }
        let f = theoretical_bound_skeleton(&reps, 1).fitted.unwrap();
        assert!((f.c2 - 2.0).abs() < 1e-6, "{f:?}");
    }

    #[test]
    fn margin_formulas() {
        let cfg = MpcConfig::new(
            5,
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 0.5),
            AxisBox::cube(1, -1.0, 1.0).unwrap(),
        )
        .unwrap();
        let b = GrowthBoundSequence::supplied(vec![1.0, 1.5, 2.0, 2.0, 2.0]).unwrap();
        let m0 = stability_margin(&report_with(0.0, 0.0), &cfg, &b, 1.2, 0.5, 3.0).unwrap();
        assert_eq!((m0.c_x, m0.c_u), (0.0, 0.0));
        assert_eq!(m0.margin, -0.5);
        assert!(m0.verdict);
        let m1 = stability_margin(&report_with(0.01, 0.02), &cfg, &b, 1.2, 0.5, 3.0).unwrap();
        let m2 = stability_margin(&report_with(0.02, 0.02), &cfg, &b, 1.2, 0.5, 3.0).unwrap();
        assert!(m2.c_x > m1.c_x);
        assert_eq!(m2.c_u, m1.c_u);
        // Direct evaluation for N = 5, L = 1.2, B_5 = 2, lambda ratio 1 / 0.5.
        let root = (2.0f64 * 1.0 / 0.5).sqrt();
        let expect_cx: f64 = 2.0 * (0..5).map(|i| root * 1.2f64.powi(i) * 0.02 + (1.2f64.powi(i) * 0.01).powi(2)).sum::<f64>();
        assert!((m1.c_x - expect_cx).abs() < 1e-14);
        assert!(stability_margin(&report_with(0.0, 0.0), &cfg, &b, 1.2, 0.0, 1.0).is_err());
        assert!(stability_margin(&report_with(0.0, 0.0), &cfg, &b, 1.2, -0.1, 1.0).is_err());
    }

    #[test]
    fn pi_scan_passes_through_origin() {
        let sys = make_van_der_pol();
        let centers = padua_points(10, sys.domain(), true).unwrap();
        let ds = generate_dataset(&sys, &centers, 2f64.sqrt() / centers.len() as f64, 8, 3).unwrap();
        let spec = KernelSpec::default_for(sys.domain(), centers.len()).unwrap();
        let model = fit_surrogate(&ds, &spec, true).unwrap();
        let mut pts = vec![DVector::zeros(2)];
        pts.extend(lattice_states(sys.domain(), 12));
        let states = PointSet::from_points(&pts).unwrap();
        let inputs: Vec<DVector<f64>> = [0.0, -2.0, 2.0].iter().map(|u| DVector::from_element(1, *u)).collect();
        let opts = ScanOptions { min_center_distance: 0.0, lipschitz_resolution: 11, fill_resolution: Some(50), ..Default::default() };
        let r = empirical_error_scan(&sys, &model, &states, &inputs, &opts).unwrap();
        assert!(r.origin_error.unwrap() <= 1e-10);
        assert_eq!(r.violations, 0);
        assert!(r.l_hat.is_finite() && r.l_hat > 0.0);
        assert!(r.quadform_bracket.0 <= r.quadform_bracket.1);
        assert!(r.cluster_constant.is_some());
        let mut buf = Vec::new();
        write_scan_csv(&mut buf, &[r.clone(), r]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn kappa_from_trace() {
        let trace = ClosedLoopTrace {
            states: vec![DVector::from_element(1, 2.0), DVector::from_element(1, 1e-9), DVector::zeros(1)],
            inputs: vec![DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)],
            stage_costs: vec![1.0, 1.0],
            values: vec![1.0, 1.0, 0.0],
            lyapunov_alphas: vec![None, None],
            iterations: vec![],
            statuses: vec![],
            solve_seconds: vec![],
            domain_exits: vec![],
            failure: None,
        };
        assert_eq!(observed_kappa(&trace, 1e-6), 0.5);
    }
}
