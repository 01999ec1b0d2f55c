//! Ground-truth control-affine benchmark systems.
//!
//! Every system is presented as `x+ = g0(x) + G(x) u` in (possibly shifted)
//! coordinates. Shifting keeps the physical model untouched and only moves the
//! origin to a controlled equilibrium, so `step(0, 0) = 0` holds to rounding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Differentiable, Dynamics, LinearModel};
use crate::error::{Error, Result};
use crate::geometry::AxisBox;

/// Seconds per hour; tank flows are given in m^3/h while the ODE runs in seconds.
const SECONDS_PER_HOUR: f64 = 3600.0;

pub const DEFAULT_EQUILIBRIUM_TOLERANCE: f64 = 1e-6;

/// Controlled equilibrium `(x_bar, u_bar)` with the residual tolerance it must meet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSpec {
    pub x_bar: Vec<f64>,
    pub u_bar: Vec<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    DEFAULT_EQUILIBRIUM_TOLERANCE
}

impl EquilibriumSpec {
    pub fn new(x_bar: Vec<f64>, u_bar: Vec<f64>) -> Self {
        Self {
            x_bar,
            u_bar,
            tolerance: DEFAULT_EQUILIBRIUM_TOLERANCE,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// `||step(x_bar, u_bar) - x_bar||` for the given system.
    pub fn residual(&self, sys: &ControlAffineSystem) -> Result<f64> {
        let x = DVector::from_column_slice(&self.x_bar);
        let u = DVector::from_column_slice(&self.u_bar);
        Ok((sys.step_truth(&x, &u)? - x).norm())
    }

    pub fn check(&self, sys: &ControlAffineSystem) -> Result<()> {
        if self.x_bar.len() != sys.state_dim() || self.u_bar.len() != sys.input_dim() {
            return Err(Error::Config(
                "equilibrium dimensions do not match the system".into(),
            ));
        }
        let r = self.residual(sys)?;
        if !(r <= self.tolerance) {
            return Err(Error::Config(format!(
                "equilibrium residual {r:.3e} exceeds tolerance {:.3e}",
                self.tolerance
            )));
        }
        Ok(())
    }

    /// Newton refinement of `x_bar` with `u_bar` held fixed.
    pub fn refined(&self, sys: &ControlAffineSystem) -> Result<EquilibriumSpec> {
        let n = sys.state_dim();
        let u = DVector::from_column_slice(&self.u_bar);
        let mut x = DVector::from_column_slice(&self.x_bar);
        let eye = DMatrix::<f64>::identity(n, n);
        let mut best = (sys.step_truth(&x, &u)? - &x).norm();
        for _ in 0..50 {
            if best == 0.0 {
                break;
            }
            let (fx, jx, _) = sys.step_with_jacobians(&x, &u)?;
            let r = fx - &x;
            let delta = (jx - &eye)
                .lu()
                .solve(&(-r))
                .ok_or_else(|| Error::Numerical("singular equilibrium Jacobian".into()))?;
            let candidate = &x + delta;
            let res = (sys.step_truth(&candidate, &u)? - &candidate).norm();
            if !(res < best) {
                break;
            }
            x = candidate;
            best = res;
        }
        Ok(EquilibriumSpec {
            x_bar: x.as_slice().to_vec(),
            u_bar: self.u_bar.clone(),
            tolerance: self.tolerance,
        })
    }
}

/// Physical parameters of the quadruple-tank process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankParams {
    /// Outlet hole areas `a_1..a_4` in m^2.
    #[serde(rename = "outlet_areas_m2")]
    pub outlet_areas: [f64; 4],
    /// Tank cross section `S` in m^2.
    #[serde(rename = "cross_section_m2")]
    pub cross_section: f64,
    /// Valve split ratios (dimensionless).
    pub gamma_a: f64,
    pub gamma_b: f64,
    /// Gravitational acceleration in m/s^2.
    #[serde(rename = "gravity_m_s2")]
    pub gravity: f64,
    /// Sampling time in s.
    #[serde(rename = "dt_s")]
    pub dt: f64,
    /// Sampling domain for the levels, in m.
    #[serde(rename = "level_domain_m")]
    pub level_domain: AxisBox,
    /// Pump flow constraints in m^3/h.
    #[serde(rename = "flow_box_m3_h")]
    pub flow_box: AxisBox,
    pub equilibrium: EquilibriumSpec,
}

impl TankParams {
    /// The checked-in benchmark configuration.
    pub fn benchmark() -> Self {
        serde_json::from_str(include_str!("../data/four_tank.json"))
            .expect("bundled four-tank configuration is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn validate(&self) -> Result<()> {
        let positive = self.outlet_areas.iter().all(|a| *a > 0.0)
            && self.cross_section > 0.0
            && self.gravity > 0.0
            && self.dt > 0.0;
        let ratios = (0.0..=1.0).contains(&self.gamma_a) && (0.0..=1.0).contains(&self.gamma_b);
        if !positive || !ratios {
            return Err(Error::Config(
                "tank parameters must be positive and valve ratios in [0, 1]".into(),
            ));
        }
        if self.level_domain.dim() != 4 || self.flow_box.dim() != 2 {
            return Err(Error::Config("tank boxes must be 4-D (levels) and 2-D (flows)".into()));
        }
        if self.level_domain.lower().iter().any(|h| *h < 0.0) {
            return Err(Error::Config("level domain must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Plant {
    VanDerPol { nu: f64 },
    FourTank(TankParams),
    Linear(LinearModel),
}

/// Discrete-time control-affine system `x+ = g0(x) + G(x) u`.
#[derive(Debug, Clone)]
pub struct ControlAffineSystem {
    name: String,
    plant: Plant,
    dt: f64,
    x_offset: Vec<f64>,
    u_offset: Vec<f64>,
    input_box: AxisBox,
    domain: AxisBox,
}

/// Forward-Euler Van der Pol oscillator with `dt = 0.05`, `nu = 0.1`,
/// `U = [-2, 2]` and `Omega = [-2, 2]^2`.
pub fn make_van_der_pol() -> ControlAffineSystem {
    ControlAffineSystem {
        name: "vdp".into(),
        plant: Plant::VanDerPol { nu: 0.1 },
        dt: 0.05,
        x_offset: vec![0.0; 2],
        u_offset: vec![0.0],
        input_box: AxisBox::cube(1, -2.0, 2.0).expect("static box"),
        domain: AxisBox::cube(2, -2.0, 2.0).expect("static box"),
    }
}

/// Forward-Euler quadruple-tank process in physical coordinates.
///
/// Fails when the parameter set does not reproduce its own equilibrium
/// within the configured tolerance.
pub fn make_four_tank(params: TankParams) -> Result<ControlAffineSystem> {
    params.validate()?;
    let sys = ControlAffineSystem {
        name: "tanks".into(),
        dt: params.dt,
        x_offset: vec![0.0; 4],
        u_offset: vec![0.0; 2],
        input_box: params.flow_box.clone(),
        domain: params.level_domain.clone(),
        plant: Plant::FourTank(params),
    };
    let eq = sys.equilibrium_hint().expect("four-tank carries an equilibrium");
    eq.check(&sys)?;
    Ok(sys)
}

/// Four-tank process shifted to its (refined) equilibrium.
pub fn make_four_tank_shifted(params: TankParams) -> Result<ControlAffineSystem> {
    let eq = params.equilibrium.clone();
    let sys = make_four_tank(params)?;
    shift_to_origin(&sys, &eq)
}

/// Linear system wrapped as a benchmark with explicit boxes.
pub fn make_linear(
    model: LinearModel,
    input_box: AxisBox,
    domain: AxisBox,
) -> Result<ControlAffineSystem> {
    if input_box.dim() != model.input_dim() || domain.dim() != model.state_dim() {
        return Err(Error::Config("box dimensions do not match the linear model".into()));
    }
    Ok(ControlAffineSystem {
        name: "linear".into(),
        dt: 1.0,
        x_offset: vec![0.0; model.state_dim()],
        u_offset: vec![0.0; model.input_dim()],
        plant: Plant::Linear(model),
        input_box,
        domain,
    })
}

/// Move the origin to the equilibrium `eq`.
///
/// The supplied equilibrium must meet its residual tolerance; the shift is then
/// taken about the Newton-refined state so that `step(0, 0) = 0` to rounding.
pub fn shift_to_origin(
    sys: &ControlAffineSystem,
    eq: &EquilibriumSpec,
) -> Result<ControlAffineSystem> {
    eq.check(sys)?;
    let refined = eq.refined(sys)?;
    let mut out = sys.clone();
    out.domain = sys.domain.shifted(&refined.x_bar);
    out.input_box = sys.input_box.shifted(&refined.u_bar);
    for (o, v) in out.x_offset.iter_mut().zip(&refined.x_bar) {
        *o += v;
    }
    for (o, v) in out.u_offset.iter_mut().zip(&refined.u_bar) {
        *o += v;
    }
    Ok(out)
}

impl ControlAffineSystem {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn input_box(&self) -> &AxisBox {
        &self.input_box
    }

    pub fn domain(&self) -> &AxisBox {
        &self.domain
    }

    /// Physical state corresponding to the coordinate origin.
    pub fn state_offset(&self) -> &[f64] {
        &self.x_offset
    }

    pub fn input_offset(&self) -> &[f64] {
        &self.u_offset
    }

    fn equilibrium_hint(&self) -> Option<EquilibriumSpec> {
        match &self.plant {
            Plant::FourTank(p) => Some(p.equilibrium.clone()),
            _ => None,
        }
    }

    /// Physical drift and input matrix at physical state `p`.
    fn physical_maps(&self, p: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match &self.plant {
            Plant::VanDerPol { nu } => {
                let dt = self.dt;
                let (x1, x2) = (p[0], p[1]);
                let g0 = DVector::from_vec(vec![
                    x1 + dt * x2,
                    x2 + dt * (nu * (1.0 - x1).powi(2) * x2 - x1),
                ]);
                let g = DMatrix::from_column_slice(2, 1, &[0.0, dt]);
                Ok((g0, g))
            }
            Plant::FourTank(tp) => {
                let roots = tank_roots(p)?;
                let k = (2.0 * tp.gravity).sqrt() / tp.cross_section;
                let a = &tp.outlet_areas;
                let dt = tp.dt;
                let drift_rate = [
                    -k * (a[0] * roots[0] - a[2] * roots[2]),
                    -k * (a[1] * roots[1] - a[3] * roots[3]),
                    -k * a[2] * roots[2],
                    -k * a[3] * roots[3],
                ];
                let g0 = DVector::from_iterator(4, (0..4).map(|i| p[i] + dt * drift_rate[i]));
                let s = tp.cross_section * SECONDS_PER_HOUR;
                let g = DMatrix::from_row_slice(
                    4,
                    2,
                    &[
                        dt * tp.gamma_a / s,
                        0.0,
                        0.0,
                        dt * tp.gamma_b / s,
                        0.0,
                        dt * (1.0 - tp.gamma_b) / s,
                        dt * (1.0 - tp.gamma_a) / s,
                        0.0,
                    ],
                );
                Ok((g0, g))
            }
            Plant::Linear(m) => Ok((&m.a * DVector::from_column_slice(p), m.b.clone())),
        }
    }

    /// Jacobian of the physical drift; the input matrix of every plant here
    /// is either constant or handled separately.
    fn physical_drift_jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        match &self.plant {
            Plant::VanDerPol { nu } => {
                let dt = self.dt;
                let (x1, x2) = (p[0], p[1]);
                Ok(DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        1.0,
                        dt,
                        dt * (-2.0 * nu * (1.0 - x1) * x2 - 1.0),
                        1.0 + dt * nu * (1.0 - x1).powi(2),
                    ],
                ))
            }
            Plant::FourTank(tp) => {
                let roots = tank_roots(p)?;
                if roots.iter().any(|r| *r <= 0.0) {
                    return Err(Error::Domain(
                        "tank Jacobian undefined at an empty tank".into(),
                    ));
                }
                let k = (2.0 * tp.gravity).sqrt() / tp.cross_section;
                let a = &tp.outlet_areas;
                let d = |i: usize| tp.dt * k * a[i] / (2.0 * roots[i]);
                let mut j = DMatrix::identity(4, 4);
                j[(0, 0)] -= d(0);
                j[(0, 2)] += d(2);
                j[(1, 1)] -= d(1);
                j[(1, 3)] += d(3);
                j[(2, 2)] -= d(2);
                j[(3, 3)] -= d(3);
                Ok(j)
            }
            Plant::Linear(m) => Ok(m.a.clone()),
        }
    }

    fn physical(&self, x: &DVector<f64>) -> Vec<f64> {
        x.iter().zip(&self.x_offset).map(|(a, b)| a + b).collect()
    }

    fn check_input(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.input_dim() {
            return Err(Error::Usage(format!(
                "input has dimension {}, expected {}",
                u.len(),
                self.input_dim()
            )));
        }
        if !self.input_box.contains(u.as_slice()) {
            return Err(Error::Domain(format!("input {:?} outside U", u.as_slice())));
        }
        Ok(())
    }

    /// Drift `g0(x)` in the presented coordinates.
    pub fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.physical(x);
        let (g0, g) = self.physical_maps(&p)?;
        let u_off = DVector::from_column_slice(&self.u_offset);
        Ok(g0 + g * u_off - DVector::from_column_slice(&self.x_offset))
    }

    /// Input matrix `G(x)`; column `j` is `g_j(x)`.
    pub fn input_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = self.physical(x);
        Ok(self.physical_maps(&p)?.1)
    }

    /// One step of the ground truth: `g0(x) + G(x) u`.
    pub fn step_truth(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(u)?;
        if x.len() != self.state_dim() {
            return Err(Error::Usage(format!(
                "state has dimension {}, expected {}",
                x.len(),
                self.state_dim()
            )));
        }
        let p = self.physical(x);
        let (g0, g) = self.physical_maps(&p)?;
        let v = DVector::from_iterator(
            u.len(),
            u.iter().zip(&self.u_offset).map(|(a, b)| a + b),
        );
        let mut out = g0 + g * v;
        for (o, off) in out.iter_mut().zip(&self.x_offset) {
            *o -= off;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite successor from {:?}", x.as_slice())));
        }
        Ok(out)
    }
}

fn tank_roots(p: &[f64]) -> Result<[f64; 4]> {
    let mut r = [0.0; 4];
    for (i, h) in p.iter().enumerate().take(4) {
        if !(*h >= 0.0) {
            return Err(Error::Domain(format!("tank {} level {h} is negative", i + 1)));
        }
        r[i] = h.sqrt();
    }
    Ok(r)
}

impl Dynamics for ControlAffineSystem {
    fn state_dim(&self) -> usize {
        self.domain.dim()
    }

    fn input_dim(&self) -> usize {
        self.input_box.dim()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.step_truth(x, u)
    }
}

impl Differentiable for ControlAffineSystem {
    fn step_with_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let fx = self.step_truth(x, u)?;
        let p = self.physical(x);
        // Both plants have a state-independent input matrix, so J_x is the drift Jacobian.
        let jx = self.physical_drift_jacobian(&p)?;
        let ju = self.physical_maps(&p)?.1;
        Ok((fx, jx, ju))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn van_der_pol_hand_step() {
        let sys = make_van_der_pol();
        assert_eq!((sys.state_dim(), sys.input_dim()), (2, 1));
        let x = sys.step_truth(&v(&[0.5, 0.5]), &v(&[0.0])).unwrap();
        assert!((x[0] - 0.525).abs() < 1e-15);
        assert!((x[1] - 0.475625).abs() < 1e-15);
        assert_eq!(sys.step_truth(&v(&[0.0, 0.0]), &v(&[0.0])).unwrap().norm(), 0.0);
        assert_eq!(sys.input_box().lower(), &[-2.0]);
        assert_eq!(sys.domain().upper(), &[2.0, 2.0]);
    }

    #[test]
    fn input_outside_box_is_rejected() {
        let sys = make_van_der_pol();
        assert!(matches!(
            sys.step_truth(&v(&[0.0, 0.0]), &v(&[2.5])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn van_der_pol_zero_shift_is_identity() {
        let sys = make_van_der_pol();
        let shifted = shift_to_origin(&sys, &EquilibriumSpec::new(vec![0.0, 0.0], vec![0.0])).unwrap();
        let x = v(&[0.3, -1.2]);
        let u = v(&[0.7]);
        assert_eq!(sys.step_truth(&x, &u).unwrap(), shifted.step_truth(&x, &u).unwrap());
        assert_eq!(shifted.domain(), sys.domain());
    }

    #[test]
    fn printed_tank_equilibrium_passes_configured_check() {
        let params = TankParams::benchmark();
        assert_eq!(params.dt, 10.0);
        let sys = make_four_tank(params.clone()).unwrap();
        let r = params.equilibrium.residual(&sys).unwrap();
        assert!(r <= 1e-4, "residual {r}");
        // The printed values are rounded; the strict default rejects them.
        let strict = params.equilibrium.clone().with_tolerance(DEFAULT_EQUILIBRIUM_TOLERANCE);
        assert!(strict.check(&sys).is_err());
        let refined = params.equilibrium.refined(&sys).unwrap();
        assert!(refined.residual(&sys).unwrap() < 1e-14);
        for (a, b) in refined.x_bar.iter().zip(&params.equilibrium.x_bar) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn shifted_tanks_origin_and_boxes() {
        let sys = make_four_tank_shifted(TankParams::benchmark()).unwrap();
        let zero = sys.step_truth(&DVector::zeros(4), &DVector::zeros(2)).unwrap();
        assert!(zero.norm() < 1e-15, "{zero}");
        let ub = sys.input_box();
        assert!((ub.lower()[0] + 1.666).abs() < 1e-12);
        assert!((ub.upper()[0] - 1.594).abs() < 1e-12);
        assert!((ub.lower()[1] + 1.974).abs() < 1e-12);
        assert!((ub.upper()[1] - 2.026).abs() < 1e-12);
        assert!(sys.domain().contains_origin_in_interior());
    }

    #[test]
    fn bad_tank_parameters_fail_equilibrium_check() {
        let mut params = TankParams::benchmark();
        params.outlet_areas[0] *= 1.5;
        assert!(matches!(make_four_tank(params), Err(Error::Config(_))));
    }

    #[test]
    fn negative_level_is_a_domain_error() {
        let sys = make_four_tank(TankParams::benchmark()).unwrap();
        let err = sys.step_truth(&v(&[-0.1, 0.5, 0.5, 0.5]), &v(&[1.0, 1.0]));
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn tank_domain_never_produces_nan() {
        let sys = make_four_tank_shifted(TankParams::benchmark()).unwrap();
        for x in sys.domain().lattice(4) {
            for u in sys.input_box().vertices() {
                let y = sys.step_truth(&x, &u).unwrap();
                assert!(y.iter().all(|c| c.is_finite()));
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let systems = [
            make_van_der_pol(),
            make_four_tank_shifted(TankParams::benchmark()).unwrap(),
        ];
        for sys in &systems {
            let n = sys.state_dim();
            let x = DVector::from_fn(n, |i, _| 0.1 * (i as f64 + 1.0) - 0.15);
            let u = DVector::from_fn(sys.input_dim(), |i, _| 0.2 + 0.1 * i as f64);
            let (_, jx, ju) = sys.step_with_jacobians(&x, &u).unwrap();
            let h = 1e-6;
            for c in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let col = (sys.step_truth(&xp, &u).unwrap() - sys.step_truth(&xm, &u).unwrap()) / (2.0 * h);
                assert!((col - jx.column(c)).amax() < 1e-7);
            }
            let g = sys.input_matrix(&x).unwrap();
            assert!((g - ju).amax() < 1e-15);
        }
    }
}
