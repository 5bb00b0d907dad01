use super::*;
use crate::config::{GpInit, InducingInit, ModelConfig, ModelStructure};
use crate::rng::stream;

fn gp_init(dim: usize, counts: &[usize]) -> GpInit {
    GpInit {
        input_dim: dim,
        signal_variance: 1.0,
        lengthscales_sq: vec![0.8; dim],
        inducing: InducingInit::Grid {
            lower: vec![-1.2; dim],
            upper: vec![1.1; dim],
            counts: counts.to_vec(),
        },
        mean_std: 0.5,
        variance: 0.05,
    }
}

pub(crate) fn small_model(structure: ModelStructure, seed: u64) -> DynamicsModel {
    let gps = match &structure {
        ModelStructure::Separable => vec![gp_init(1, &[4]), gp_init(1, &[4])],
        ModelStructure::NonSeparable => vec![gp_init(2, &[3, 2])],
        ModelStructure::RigidBody => vec![gp_init(3, &[2, 2, 1]), gp_init(3, &[2, 1, 2])],
        ModelStructure::Generic { .. } => vec![gp_init(2, &[2, 2]), gp_init(2, &[2, 2])],
    };
    let cfg = ModelConfig {
        structure,
        gps,
        jitter: 1e-6,
    };
    DynamicsModel::from_config(&cfg, 0.1, &mut stream(seed, "init")).unwrap()
}

pub(crate) fn all_structures() -> Vec<ModelStructure> {
    vec![
        ModelStructure::Separable,
        ModelStructure::NonSeparable,
        ModelStructure::RigidBody,
        ModelStructure::Generic {
            tableau: "heun".into(),
        },
        ModelStructure::Generic {
            tableau: "explicit_euler".into(),
        },
    ]
}

pub(crate) fn test_state(m: &DynamicsModel) -> DVector<f64> {
    if m.state_dim() == 3 {
        DVector::from_vec(vec![0.3, -0.4, 0.8])
    } else {
        DVector::from_vec(vec![0.4, -0.7])
    }
}

fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, n);
    for i in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += 1e-6;
        xm[i] -= 1e-6;
        jac.set_column(i, &((f(&xp) - f(&xm)) / 2e-6));
    }
    jac
}

#[test]
fn field_jacobians_match_finite_differences() {
    for s in all_structures() {
        let m = small_model(s.clone(), 1);
        let f = m.sample_model(40, &mut stream(2, "draw")).unwrap();
        let x = test_state(&m);
        let analytic = f.field_jacobian(&x).unwrap();
        let fd = fd_jacobian(|y| f.field_eval(y).unwrap(), &x);
        assert!((&analytic - &fd).amax() < 1e-6 * (1.0 + fd.amax()), "{s:?}");
    }
}

#[test]
fn structural_properties_hold_for_every_draw() {
    for seed in 0..5 {
        let sep = small_model(ModelStructure::Separable, seed).sample_model(30, &mut stream(seed, "d")).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.5]);
        let y = DVector::from_vec(vec![-1.1, 0.5]);
        assert_eq!(sep.field_eval(&x).unwrap()[0], sep.field_eval(&y).unwrap()[0]);
        let jac = sep.field_jacobian(&x).unwrap();
        assert_eq!(jac[(0, 0)], 0.0);
        assert_eq!(jac[(1, 1)], 0.0);

        let ns = small_model(ModelStructure::NonSeparable, seed).sample_model(30, &mut stream(seed, "d")).unwrap();
        let grad = ns.functions()[0].gradient(x.as_slice()).unwrap();
        assert!(grad.dot(&ns.field_eval(&x).unwrap()).abs() < 1e-12);

        let rb = small_model(ModelStructure::RigidBody, seed).sample_model(30, &mut stream(seed, "d")).unwrap();
        let z = DVector::from_vec(vec![0.3, -0.2, 0.6]);
        assert!(z.dot(&rb.field_eval(&z).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn rigid_body_rejects_small_x3() {
    let rb = small_model(ModelStructure::RigidBody, 3).sample_model(20, &mut stream(3, "d")).unwrap();
    let z = DVector::from_vec(vec![0.6, 0.8, 1e-4]);
    assert!(matches!(rb.field_eval(&z), Err(Error::SingularConstraint { .. })));
    assert!(matches!(rb.field_jacobian(&z), Err(Error::SingularConstraint { .. })));
}

#[test]
fn params_round_trip_and_layout() {
    for s in all_structures() {
        let mut m = small_model(s, 4);
        let theta = m.params();
        assert_eq!(theta.len(), m.layout().len());
        let mut other = theta.clone();
        other[0] += 0.25;
        m.set_params(&other).unwrap();
        assert!((m.params() - &other).amax() < 1e-14);
        let mut bad = theta.clone();
        bad[1] = f64::NAN;
        assert!(m.set_params(&bad).is_err());
    }
}

#[test]
fn shape_validation() {
    let m = small_model(ModelStructure::RigidBody, 0);
    let gps = m.gps().to_vec();
    assert!(DynamicsModel::new(ModelStructure::Separable, gps.clone(), 0.1).is_err());
    assert!(DynamicsModel::new(ModelStructure::NonSeparable, gps.clone(), 0.1).is_err());
    assert!(DynamicsModel::new(ModelStructure::RigidBody, gps, 0.0).is_err());
}

#[test]
fn field_parameter_vjp_matches_finite_differences() {
    for s in all_structures() {
        let mut m = small_model(s.clone(), 5);
        let noise = m.sample_noise(30, &mut stream(5, "d")).unwrap();
        let x = test_state(&m);
        let lambda = DVector::from_fn(x.len(), |i, _| 0.7 - 0.4 * i as f64);
        let f = m.sample_with(&noise).unwrap();
        let mut adj = f.zero_adjoints();
        f.field_param_vjp(&x, &lambda, &mut adj).unwrap();
        let analytic = f.backprop(&adj).unwrap();
        let theta = m.params();
        for i in 0..theta.len() {
            let mut eval = |t: &DVector<f64>| {
                m.set_params(t).unwrap();
                m.sample_with(&noise).unwrap().field_eval(&x).unwrap().dot(&lambda)
            };
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += 1e-6;
            tm[i] -= 1e-6;
            let fd = (eval(&tp) - eval(&tm)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{s:?} {i}: {fd} vs {}", analytic[i]);
        }
        m.set_params(&theta).unwrap();
    }
}

#[test]
fn analytic_step_jacobian_matches_resolved_differences() {
    for s in all_structures() {
        let m = small_model(s.clone(), 6);
        let f = m.sample_model(40, &mut stream(6, "d")).unwrap();
        let x = test_state(&m);
        let a = f.step_jacobian_analytic(&x).unwrap();
        let fd = f.step_jacobian(&x).unwrap();
        assert!((&a - &fd).amax() < 1e-7, "{s:?}: {}", (&a - &fd).amax());
    }
}

#[test]
fn symplectic_structures_preserve_volume() {
    for s in [ModelStructure::Separable, ModelStructure::NonSeparable] {
        let m = small_model(s, 7);
        let f = m.sample_model(40, &mut stream(7, "d")).unwrap();
        let det = f.step_jacobian_analytic(&DVector::from_vec(vec![0.5, 0.1])).unwrap().determinant();
        assert!((det - 1.0).abs() < 1e-10, "{det}");
    }
}

#[test]
fn step_vjp_matches_finite_differences() {
    for s in all_structures() {
        let mut m = small_model(s.clone(), 8);
        let noise = m.sample_noise(30, &mut stream(8, "d")).unwrap();
        let x = test_state(&m);
        let w = DVector::from_fn(x.len(), |i, _| 1.0 + 0.5 * i as f64);
        let f = m.sample_with(&noise).unwrap();
        let (traj, records) = f.rollout_records(&x, 1).unwrap();
        let mut adj = f.zero_adjoints();
        let xbar = f.step_vjp(&records[0], &traj.state(1), &w, &mut adj).unwrap();
        let jac = f.step_jacobian_analytic(&x).unwrap();
        assert!((&xbar - jac.transpose() * &w).amax() < 1e-10, "{s:?}");
        let analytic = f.backprop(&adj).unwrap();
        let theta = m.params();
        for i in (0..theta.len()).step_by(3) {
            let mut eval = |t: &DVector<f64>| {
                m.set_params(t).unwrap();
                m.sample_with(&noise).unwrap().model_step(&x).unwrap().dot(&w)
            };
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += 1e-6;
            tm[i] -= 1e-6;
            let fd = (eval(&tp) - eval(&tm)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{s:?} {i}: {fd} vs {}", analytic[i]);
        }
        m.set_params(&theta).unwrap();
    }
}

#[test]
fn rollouts_are_deterministic_given_noise() {
    let m = small_model(ModelStructure::NonSeparable, 9);
    let noise = m.sample_noise(30, &mut stream(9, "d")).unwrap();
    let x = DVector::from_vec(vec![0.5, 0.0]);
    let a = m.sample_with(&noise).unwrap().rollout(&x, 20).unwrap();
    let b = m.sample_with(&noise).unwrap().rollout(&x, 20).unwrap();
    assert_eq!(a.states(), b.states());
    assert_eq!(a.len(), 21);
    assert!((a.times()[20] - 2.0).abs() < 1e-12);
}

#[test]
fn grid_and_sphere_inducing_points() {
    let mut rng = stream(0, "x");
    let g = inducing_points(
        &InducingInit::Grid {
            lower: vec![0.0, -1.0],
            upper: vec![1.0, 1.0],
            counts: vec![2, 3],
        },
        2,
        &mut rng,
    )
    .unwrap();
    assert_eq!(g.nrows(), 6);
    assert_eq!((g[(0, 0)], g[(0, 1)]), (0.0, -1.0));
    assert_eq!((g[(1, 0)], g[(1, 1)]), (0.0, 0.0));
    assert_eq!((g[(5, 0)], g[(5, 1)]), (1.0, 1.0));
    let s = inducing_points(
        &InducingInit::SphereGrid {
            lower: [-0.5, -0.5],
            upper: [0.5, 0.5],
            counts: [3, 3],
        },
        3,
        &mut rng,
    )
    .unwrap();
    for i in 0..s.nrows() {
        assert!((s.row(i).norm() - 1.0).abs() < 1e-12);
    }
}
