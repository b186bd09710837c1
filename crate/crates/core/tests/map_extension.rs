use ldpnn::gp::Dataset;
use ldpnn::mgf::QuadratureSpec;
use ldpnn::nngp::{ActivationKind, NetworkSpec};
use ldpnn::rate::{map_predict_many, OptimizerSettings, RateSolver};

fn full_solve(x: f64, spec: &NetworkSpec, opt: &OptimizerSettings) -> f64 {
    let data = Dataset::heaviside6(&[x]).unwrap();
    let mut solver = RateSolver::new(data.x(), spec, opt).unwrap();
    let ev = solver.map(&data).unwrap();
    assert!(ev.converged);
    ev.h.unwrap()[data.index_of(&[x]).unwrap()]
}

#[test]
fn extension_matches_augmented_solve() {
    // Strong tanh tilts need more nodes than the default before two input
    // sets agree to this tolerance.
    let opt = OptimizerSettings {
        quadrature: QuadratureSpec { nodes_per_dim: 256, ..Default::default() },
        ..Default::default()
    };
    for act in [ActivationKind::Relu, ActivationKind::Tanh] {
        let spec = NetworkSpec::new(2, act, 1, 1.0).unwrap();
        let xs = [-1.5, 0.5, 3.0];
        let queries: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let (ev, ys) = map_predict_many(&queries, &Dataset::heaviside6(&[]).unwrap(), &spec, &opt).unwrap();
        assert!(ev.converged);
        for (&x, &y) in xs.iter().zip(&ys) {
            let full = full_solve(x, &spec, &opt);
            assert!((y - full).abs() < 1e-5, "{} x={x}: {y} vs {full}", spec.activation.name());
        }
    }
}

#[test]
fn training_inputs_return_fitted_outputs() {
    let opt = OptimizerSettings::default();
    let spec = NetworkSpec::new(2, ActivationKind::Relu, 1, 1.0).unwrap();
    let data = Dataset::heaviside6(&[]).unwrap();
    let (ev, ys) = map_predict_many(&[vec![-2.0], vec![-2.0 + 1e-9]], &data, &spec, &opt).unwrap();
    let h = ev.h.unwrap();
    assert_eq!(ys[0], h[1]);
    assert!((ys[1] - h[1]).abs() < 1e-6);
}

#[test]
fn near_training_input_is_finite_and_between_neighbours() {
    let opt = OptimizerSettings::default();
    let spec = NetworkSpec::new(2, ActivationKind::Relu, 1, 1.0).unwrap();
    let data = Dataset::heaviside6(&[]).unwrap();
    let (_, ys) = map_predict_many(&[vec![-3.2], vec![-3.04], vec![-2.96]], &data, &spec, &opt).unwrap();
    assert!(ys.iter().all(|y| y.is_finite()));
    assert!(ys[0] < ys[1] && ys[1] < ys[2], "{ys:?}");
}
