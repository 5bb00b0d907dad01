use super::*;

fn scalar(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn decay() -> LinearField {
    LinearField(DMatrix::from_element(1, 1, -1.0))
}

fn growth() -> LinearField {
    LinearField(DMatrix::from_element(1, 1, 1.0))
}

fn rotation() -> LinearField {
    LinearField(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]))
}

#[test]
fn tableaux_are_consistent() {
    for t in [
        ButcherTableau::explicit_euler(),
        ButcherTableau::heun(),
        ButcherTableau::implicit_midpoint(),
        ButcherTableau::radau_ia(),
    ] {
        assert!((t.weights().sum() - 1.0).abs() < 1e-15);
        assert_eq!(ButcherTableau::by_name(t.name()).unwrap(), t);
    }
    assert!(ButcherTableau::heun().is_explicit());
    assert!(!ButcherTableau::radau_ia().is_explicit());
    assert!(ButcherTableau::new("bad", DMatrix::zeros(1, 1), scalar(0.9), 1).is_err());
    assert!(Stepper::new(ButcherTableau::heun(), 0.0).is_err());
}

#[test]
fn stage_examples() {
    let f = FnField::new(2, |x: &DVector<f64>| DVector::from_vec(vec![x[1].sin(), x[0] * x[0]]));
    let x = DVector::from_vec(vec![0.3, -0.7]);
    let euler = Stepper::new(ButcherTableau::explicit_euler(), 0.1).unwrap();
    assert_eq!(solve_stages(&euler, &f, &x).unwrap(), f.eval(&x).unwrap());

    let mid = Stepper::new(ButcherTableau::implicit_midpoint(), 0.1).unwrap();
    let g = solve_stages(&mid, &decay(), &scalar(1.0)).unwrap();
    assert!((g[0] + 1.0 / 1.05).abs() < 1e-12);
}

#[test]
fn radau_stages_match_block_linear_solve() {
    let j = DMatrix::from_row_slice(2, 2, &[-0.4, 1.3, -0.9, 0.2]);
    let x = DVector::from_vec(vec![0.7, -0.2]);
    let h = 0.3;
    let stepper = Stepper::new(ButcherTableau::radau_ia(), h).unwrap();
    let g = solve_stages(&stepper, &LinearField(j.clone()), &x).unwrap();
    let a = ButcherTableau::radau_ia().stage_matrix().clone();
    let lhs = DMatrix::identity(4, 4) - a.kronecker(&j) * h;
    let jx = &j * &x;
    let rhs = DVector::from_fn(4, |i, _| jx[i % 2]);
    let oracle = lhs.lu().solve(&rhs).unwrap();
    assert!((g - oracle).amax() < 1e-8);
}

#[test]
fn rk_step_examples() {
    let h = 0.1;
    let e = Stepper::new(ButcherTableau::explicit_euler(), h).unwrap();
    assert!((rk_step(&e, &growth(), &scalar(1.0)).unwrap()[0] - 1.1).abs() < 1e-15);
    let heun = Stepper::new(ButcherTableau::heun(), h).unwrap();
    assert!((rk_step(&heun, &growth(), &scalar(1.0)).unwrap()[0] - 1.105).abs() < 1e-15);
    let mid = Stepper::new(ButcherTableau::implicit_midpoint(), h).unwrap();
    let x = rk_step(&mid, &decay(), &scalar(1.0)).unwrap()[0];
    assert!((x - 0.95 / 1.05).abs() < 1e-12);
    assert!((x - 0.9047619).abs() < 1e-7);
}

#[test]
fn explicit_path_matches_least_squares() {
    let f = FnField::new(2, |x: &DVector<f64>| DVector::from_vec(vec![-x[1] + 0.3 * x[0] * x[0], x[0].cos()]));
    let x = DVector::from_vec(vec![0.4, 1.1]);
    for t in [ButcherTableau::explicit_euler(), ButcherTableau::heun()] {
        let stepper = Stepper::new(t, 0.1).unwrap();
        let a = solve_stages(&stepper, &f, &x).unwrap();
        let b = solve_stages_least_squares(&stepper, &f, &x).unwrap();
        assert!((a - b).amax() < 1e-10);
    }
}

#[test]
fn symplectic_euler_examples() {
    let id = |v: &DVector<f64>| Ok(v.clone());
    let (p, q) = symplectic_euler_step(id, id, &scalar(0.0), &scalar(1.0), 0.1).unwrap();
    assert!((p[0] + 0.1).abs() < 1e-15);
    assert!((q[0] - 0.99).abs() < 1e-15);

    let zero = |v: &DVector<f64>| Ok(v * 0.0);
    let (p, q) = symplectic_euler_step(zero, id, &scalar(0.5), &scalar(1.0), 0.1).unwrap();
    assert_eq!(p[0], 0.5);
    assert!((q[0] - 1.05).abs() < 1e-15);

    let v_prime = |q: &DVector<f64>| Ok(q.map(|v| 6.0 * v.sin()));
    let step = |x: &DVector<f64>| {
        let (p, q) = symplectic_euler_step(v_prime, id, &x.rows(0, 1).into(), &x.rows(1, 1).into(), 0.1)?;
        Ok(DVector::from_vec(vec![p[0], q[0]]))
    };
    for x in [[2.0, 2.0], [-1.0, 0.3], [0.0, 3.0]] {
        let jac = step_jacobian_of(step, &DVector::from_row_slice(&x)).unwrap();
        assert!((jac.determinant() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn implicit_midpoint_hamiltonian_examples() {
    let grad = LinearField(DMatrix::identity(2, 2));
    let settings = SolverSettings::default();
    let x0 = DVector::from_vec(vec![0.3, 1.2]);
    let mut x = x0.clone();
    for _ in 0..1000 {
        x = implicit_midpoint_hamiltonian_step(&grad, &x, 0.1, &settings).unwrap();
    }
    assert!((x.norm_squared() - x0.norm_squared()).abs() < 1e-8);

    for h in [1e-2, 1e-3, 1e-4] {
        let x1 = implicit_midpoint_hamiltonian_step(&grad, &x0, h, &settings).unwrap();
        assert!((&x1 - &x0).amax() <= 2.0 * h * x0.amax());
    }

    let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
    let jinv = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
    let h = 0.2;
    let x1 = implicit_midpoint_hamiltonian_step(LinearField(m.clone()), &x0, h, &settings).unwrap();
    let a = &jinv * &m * (h / 2.0);
    let cayley = (DMatrix::identity(2, 2) - &a).lu().solve(&((DMatrix::identity(2, 2) + &a) * &x0)).unwrap();
    assert!((x1 - cayley).amax() < 1e-8);

    assert!(implicit_midpoint_hamiltonian_step(&grad, &scalar(1.0), 0.1, &settings).is_err());
}

#[test]
fn integrate_examples() {
    let mid = Stepper::new(ButcherTableau::implicit_midpoint(), 0.1).unwrap();
    let t = integrate(&mid, &decay(), &scalar(1.0), 0).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t.state(0)[0], 1.0);

    let zero = LinearField(DMatrix::zeros(2, 2));
    let x0 = DVector::from_vec(vec![1.0, -2.0]);
    let t = integrate(&mid, &zero, &x0, 5).unwrap();
    assert!(t.rows().iter().all(|r| *r == x0));

    let t = integrate(&mid, &decay(), &scalar(1.0), 100).unwrap();
    let expected = (0.95f64 / 1.05).powi(100);
    assert!((t.state(100)[0] - expected).abs() < 1e-10);
    assert!((t.times()[100] - 10.0).abs() < 1e-12);
}

#[test]
fn integrate_reports_failing_step() {
    // Field is undefined past x = 1.05.
    let f = FnField::new(1, |x: &DVector<f64>| scalar(if x[0] > 1.05 { f64::NAN } else { x[0] }));
    let settings = SolverSettings {
        max_iterations: 5,
        ..SolverSettings::default()
    };
    let stepper = Stepper::with_solver(ButcherTableau::implicit_midpoint(), 0.01, settings).unwrap();
    let err = integrate(&stepper, &f, &scalar(1.0), 20).unwrap_err();
    match err {
        Error::StepFailed { step, .. } => assert!(step > 0),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn adaptive_examples() {
    let zero = LinearField(DMatrix::zeros(1, 1));
    let t = integrate_adaptive(&ButcherTableau::heun(), &zero, &scalar(2.0), (0.0, 5.0), 1e-6, 1e-9).unwrap();
    assert!(t.rows().iter().all(|r| r[0] == 2.0));
    assert!(t.len() <= 5);

    let exact = (-5.0f64).exp();
    let end = |rtol: f64| {
        let t = integrate_adaptive(&ButcherTableau::heun(), &decay(), &scalar(1.0), (0.0, 5.0), rtol, 1e-12).unwrap();
        assert!((t.times()[t.len() - 1] - 5.0).abs() < 1e-12);
        (t.last_state().unwrap()[0] - exact).abs()
    };
    let coarse = end(1e-6);
    assert!(coarse < 1e-5);
    let fine = end(1e-8);
    assert!(fine * 10.0 <= coarse, "{fine} vs {coarse}");

    assert!(integrate_adaptive(&ButcherTableau::heun(), &decay(), &scalar(1.0), (0.0, 1.0), 0.0, 1e-9).is_err());
}

#[test]
fn adaptive_underflow_is_reported() {
    let blowup = FnField::new(1, |x: &DVector<f64>| scalar(x[0] * x[0]));
    let err = integrate_adaptive(&ButcherTableau::heun(), &blowup, &scalar(1.0), (0.0, 2.0), 1e-8, 1e-10).unwrap_err();
    assert!(matches!(err, Error::StepSizeUnderflow { .. } | Error::NonConvergence { .. }), "{err:?}");
}

#[test]
fn adaptive_grid_sampling() {
    let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.1).collect();
    let t = integrate_adaptive_on_grid(&ButcherTableau::radau_ia(), &rotation(), &DVector::from_vec(vec![1.0, 0.0]), &times, 1e-10, 1e-12).unwrap();
    assert_eq!(t.len(), 21);
    for (k, tk) in times.iter().enumerate() {
        let x = t.state(k);
        assert!((x[0] - tk.cos()).abs() < 1e-8);
        assert!((x[1] - tk.sin()).abs() < 1e-8);
    }
}

#[test]
fn local_error_orders() {
    let hs = [0.2, 0.1, 0.05, 0.025];
    for t in [
        ButcherTableau::explicit_euler(),
        ButcherTableau::heun(),
        ButcherTableau::implicit_midpoint(),
        ButcherTableau::radau_ia(),
    ] {
        let pts: Vec<(f64, f64)> = hs
            .iter()
            .map(|&h| {
                let stepper = Stepper::new(t.clone(), h).unwrap();
                let x = rk_step(&stepper, &decay(), &scalar(1.0)).unwrap()[0];
                (h.ln(), (x - (-h).exp()).abs().ln())
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        let expected = (t.order() + 1) as f64;
        assert!((slope - expected).abs() <= 0.2, "{}: slope {slope}", t.name());
    }
}

#[test]
fn midpoint_conserves_quadratic_invariants() {
    // x^T f(x) = 0 for a state-dependent rotation.
    let f = FnField::new(3, |x: &DVector<f64>| {
        let w = DVector::from_vec(vec![x[1], 0.5, -x[0]]);
        w.cross(x)
    });
    let stepper = Stepper::new(ButcherTableau::implicit_midpoint(), 0.1).unwrap();
    let x0 = DVector::from_vec(vec![0.6, -0.3, 0.74]);
    let t = integrate(&stepper, &f, &x0, 500).unwrap();
    for x in t.rows() {
        assert!((x.norm_squared() - x0.norm_squared()).abs() < 1e-8);
    }
}

#[test]
fn step_jacobian_examples() {
    let zero = LinearField(DMatrix::zeros(3, 3));
    let e = Stepper::new(ButcherTableau::explicit_euler(), 0.1).unwrap();
    let x = DVector::from_vec(vec![0.1, 2.0, -3.0]);
    assert!((step_jacobian(&e, &zero, &x).unwrap() - DMatrix::identity(3, 3)).amax() < 1e-9);

    let jac = step_jacobian(&e, &rotation(), &DVector::from_vec(vec![0.4, 0.2])).unwrap();
    let expected = DMatrix::from_row_slice(2, 2, &[1.0, -0.1, 0.1, 1.0]);
    assert!((&jac - expected).amax() < 1e-10);
    assert!((jac.determinant() - 1.01).abs() < 1e-10);
}

#[test]
fn hamiltonian_field_jacobian_is_analytic() {
    let grad = FnField::new(2, |x: &DVector<f64>| DVector::from_vec(vec![x[0] * (x[1] * x[1] + 1.0), x[1] * (x[0] * x[0] + 1.0)]));
    let field = HamiltonianField { grad_h: grad };
    let x = DVector::from_vec(vec![0.3, -0.8]);
    let jac = field.jacobian(&x).unwrap();
    let fd = forward_difference_jacobian(|y| field.eval(y), &x).unwrap();
    assert!((jac - fd).amax() < 1e-5);
}
