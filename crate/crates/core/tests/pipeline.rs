use kedmd::kernel::padua_points;
use kedmd::mpc::run_closed_loop;
use kedmd::sampling::{generate_dataset, validate_dataset};
use kedmd::surrogate::fit_surrogate;
use kedmd::{make_van_der_pol, Dynamics, KernelSpec, MpcConfig, SurrogateModel};
use nalgebra::{DMatrix, DVector};

#[test]
fn fitted_model_drives_the_true_system_toward_the_origin() {
    let sys = make_van_der_pol();
    let centers = padua_points(12, sys.domain(), true).unwrap();
    let data = generate_dataset(&sys, &centers, 2f64.sqrt() / centers.len() as f64, 25, 7).unwrap();
    assert!(validate_dataset(&data, sys.domain(), sys.input_box()).passed());

    let spec = KernelSpec::default_for(sys.domain(), centers.len()).unwrap();
    let model = fit_surrogate(&data, &spec, true).unwrap();
    let zero = DVector::zeros(2);
    assert!(model.eval(&zero, &DVector::zeros(1)).amax() <= 1e-10);
    let u = DVector::from_element(1, 1.5);
    let exact = sys.step(&zero, &u).unwrap();
    let rel = (model.eval(&zero, &u) - &exact).norm() / exact.norm();
    assert!(rel < 0.05, "input response at the origin off by {rel}");

    let cfg = MpcConfig::new(
        10,
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 1e-4),
        sys.input_box().clone(),
    )
    .unwrap();
    let x0 = DVector::from_vec(vec![0.5, 0.5]);
    let trace = run_closed_loop(&sys, &model, &cfg, &x0, 150, Some(sys.domain())).unwrap();
    let errors = trace.errors();
    assert_eq!(errors.len(), 151);
    assert!(errors[150] < 0.1 * x0.norm(), "final error {}", errors[150]);
}

#[test]
fn serialized_model_evaluates_identically() {
    let sys = make_van_der_pol();
    let centers = padua_points(8, sys.domain(), true).unwrap();
    let data = generate_dataset(&sys, &centers, 0.01, 25, 3).unwrap();
    let spec = KernelSpec::default_for(sys.domain(), centers.len()).unwrap();
    let model = fit_surrogate(&data, &spec, false).unwrap();

    let mut bytes = Vec::new();
    model.write(&mut bytes).unwrap();
    let back = SurrogateModel::read(bytes.as_slice()).unwrap();
    assert_eq!(back.num_centers(), model.num_centers());
    assert_eq!(back.is_pi(), model.is_pi());
    for x in sys.domain().lattice(7) {
        let u = DVector::from_element(sys.input_dim(), 0.7);
        assert_eq!(back.eval(&x, &u), model.eval(&x, &u));
    }
}
