use std::sync::Arc;

use ckfnet::filter::{backward, forward, Architecture, CkfNet};
use ckfnet::linalg::{Matrix, Vector};
use ckfnet::ssm::{linear_nav_model, simulate_trajectory, FnMap, RngStream, StateSpaceModel, Trajectory};

const LAMBDA: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn toy_model() -> StateSpaceModel {
    let f = FnMap::new(
        2,
        2,
        |x| Vector::from_vec(vec![x[0] + 0.1 * x[1].sin(), 0.9 * x[1] + 0.05 * x[0] * x[0]]),
        |x| Matrix::from_rows(&[&[1.0, 0.1 * x[1].cos()], &[0.1 * x[0], 0.9]]).unwrap(),
    );
    let h = FnMap::new(
        2,
        2,
        |x| Vector::from_vec(vec![x[0] + 0.1 * x[1] * x[1], x[1].sin() + 0.2 * x[0]]),
        |x| Matrix::from_rows(&[&[1.0, 0.2 * x[1]], &[0.2, x[1].cos()]]).unwrap(),
    );
    StateSpaceModel::new(
        "toy",
        Arc::new(f),
        Arc::new(h),
        Matrix::identity(2).scale(0.05),
        Matrix::identity(2).scale(0.1),
    )
}

fn loss(net: &CkfNet, model: &StateSpaceModel, traj: &Trajectory, x0: &Vector) -> f64 {
    let trace = forward(net, model, &traj.measurements, x0).unwrap();
    let t = traj.len() as f64;
    let data: f64 = trace
        .posteriors()
        .iter()
        .zip(&traj.states)
        .map(|(p, s)| p.sub(s).norm_sq())
        .sum::<f64>()
        / t;
    data + LAMBDA * net.tape.norm_sq()
}

fn analytic(net: &CkfNet, model: &StateSpaceModel, traj: &Trajectory, x0: &Vector) -> Vec<f64> {
    let trace = forward(net, model, &traj.measurements, x0).unwrap();
    let t = traj.len() as f64;
    let d: Vec<Vector> = trace
        .posteriors()
        .iter()
        .zip(&traj.states)
        .map(|(p, s)| p.sub(s).scale(2.0 / t))
        .collect();
    let mut grads = vec![0.0; net.tape.values.len()];
    backward(net, model, &trace, &d, &mut grads);
    for (g, v) in grads.iter_mut().zip(&net.tape.values) {
        *g += 2.0 * LAMBDA * v;
    }
    grads
}

fn check(model: &StateSpaceModel, arch: Architecture, traj: &Trajectory, x0: &Vector, tol: f64) {
    let mut net = CkfNet::initialized(arch, &mut RngStream::new(11));
    // make every bias nonzero so their gradients are exercised away from zero
    let mut rng = RngStream::new(12);
    for v in net.tape.values.iter_mut() {
        if *v == 0.0 {
            *v = rng.uniform_range(-0.3, 0.3);
        }
    }
    let grads = analytic(&net, model, traj, x0);
    let specs = net.layout().specs().to_vec();
    let mut worst = (0.0f64, String::new());
    for spec in &specs {
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for idx in spec.range() {
            let orig = net.tape.values[idx];
            net.tape.values[idx] = orig + STEP;
            let up = loss(&net, model, traj, x0);
            net.tape.values[idx] = orig - STEP;
            let down = loss(&net, model, traj, x0);
            net.tape.values[idx] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            diff_sq += (grads[idx] - numeric).powi(2);
            a_sq += grads[idx].powi(2);
            n_sq += numeric.powi(2);
        }
        let rel = diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(1e-300);
        assert!(a_sq > 0.0, "{} has an identically zero gradient", spec.name);
        if rel > worst.0 {
            worst = (rel, spec.name.clone());
        }
        assert!(rel < tol, "{}: relative error {rel:e}", spec.name);
    }
    eprintln!("worst tensor {} rel err {:e}", worst.1, worst.0);
}

#[test]
fn bptt_matches_finite_differences_on_nonlinear_toy() {
    let model = toy_model();
    let x0 = Vector::from_vec(vec![0.3, -0.2]);
    let traj = simulate_trajectory(&model, &x0, 5, &mut RngStream::new(5), 0).unwrap();
    let arch = Architecture { n: 2, m: 2, hidden_dim: 3 };
    check(&model, arch, &traj, &x0, 1e-4);
}

#[test]
fn bptt_matches_finite_differences_on_linear_toy() {
    let model = linear_nav_model(1.0, 0.1, 0.1, true);
    let x0 = Vector::zeros(4);
    let traj = simulate_trajectory(&model, &x0, 5, &mut RngStream::new(6), 0).unwrap();
    let arch = Architecture { n: 4, m: 2, hidden_dim: 3 };
    check(&model, arch, &traj, &x0, 1e-4);
}
