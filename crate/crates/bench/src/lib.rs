//! Shared fixtures for the benchmarks.

use kedmd::kernel::padua_points;
use kedmd::sampling::generate_dataset;
use kedmd::surrogate::fit_surrogate;
use kedmd::{make_van_der_pol, ControlAffineSystem, Dynamics, KernelSpec, MpcConfig, PointSet, SurrogateModel};
use nalgebra::{DMatrix, DVector};

pub struct VdpFixture {
    pub system: ControlAffineSystem,
    pub centers: PointSet,
    pub spec: KernelSpec,
    pub model: SurrogateModel,
}

impl VdpFixture {
    pub fn new(order: usize) -> Self {
        let system = make_van_der_pol();
        let centers = padua_points(order, system.domain(), true).expect("padua grid");
        let spec = KernelSpec::default_for(system.domain(), centers.len()).expect("kernel");
        let r_x = 2f64.sqrt() / centers.len() as f64;
        let data = generate_dataset(&system, &centers, r_x, 25, 1).expect("dataset");
        let model = fit_surrogate(&data, &spec, true).expect("fit");
        Self { system, centers, spec, model }
    }

    pub fn mpc(&self, horizon: usize) -> MpcConfig {
        MpcConfig::new(
            horizon,
            DMatrix::identity(self.system.state_dim(), self.system.state_dim()),
            DMatrix::from_element(1, 1, 1e-4),
            self.system.input_box().clone(),
        )
        .expect("mpc config")
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.5, 0.5])
    }
}
