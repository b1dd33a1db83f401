use ckfnet::eval::{
    amse, evaluate, horizon_sweep, noise_sweep, results_csv, trajectory_mse, Algorithm, EvalResult, Scenario,
    HORIZONS, NOISE_SCALES,
};
use ckfnet::filter::CkfNet;
use ckfnet::linalg::Vector;
use ckfnet::training::{architecture, build_model, generate_split, Split, TrainingConfig};

fn config() -> TrainingConfig {
    TrainingConfig {
        n_test: 24,
        hidden_dim: 4,
        ..TrainingConfig::default()
    }
}

fn zero_net(c: &TrainingConfig) -> CkfNet {
    CkfNet::zeros(architecture(c, &build_model(c)))
}

fn rows(results: &[EvalResult], alg: Algorithm) -> Vec<&EvalResult> {
    results.iter().filter(|r| r.algorithm == alg).collect()
}

#[test]
fn ckf_error_does_not_depend_on_horizon() {
    let c = config();
    let results = horizon_sweep(&zero_net(&c), &c, &HORIZONS).unwrap();
    assert_eq!(results.len(), 3 * HORIZONS.len());
    let ckf: Vec<f64> = rows(&results, Algorithm::Ckf).iter().map(|r| r.amse).collect();
    let (lo, hi) = ckf.iter().fold((f64::MAX, 0.0f64), |(l, h), a| (l.min(*a), h.max(*a)));
    assert!(hi / lo < 1.3, "CKF AMSE across horizons {ckf:?}");
    for (r, t) in rows(&results, Algorithm::Ckf).iter().zip(HORIZONS) {
        assert_eq!(r.scenario.steps, t);
        assert_eq!(r.mses.len(), c.n_test);
    }
}

#[test]
fn mismatched_ckf_degrades_with_noise_scale() {
    let c = TrainingConfig { steps: 50, ..config() };
    let results = noise_sweep(&[&zero_net(&c)], &c, &NOISE_SCALES).unwrap();
    assert_eq!(results.len(), 3 * NOISE_SCALES.len());
    let ckf: Vec<f64> = rows(&results, Algorithm::Ckf).iter().map(|r| r.amse).collect();
    assert!(ckf.windows(2).all(|w| w[1] > w[0]), "{ckf:?}");
    let oracle: Vec<f64> = rows(&results, Algorithm::KfOracle).iter().map(|r| r.amse).collect();
    for (k, o) in ckf.iter().zip(&oracle) {
        assert!(*o <= k * (1.0 + 1e-9), "the oracle is never beaten by the mismatched CKF");
    }
    // at the nominal scale the CKF is the matched filter and equals the oracle
    assert!((ckf[1] - oracle[1]).abs() < 1e-9 * oracle[1]);
}

#[test]
fn results_are_reproducible_and_consistent() {
    let c = TrainingConfig { steps: 30, ..config() };
    let model = build_model(&c);
    let net = zero_net(&c);
    let test = generate_split(&c, &model, Split::Test, c.n_test, c.steps).unwrap();
    let scenario = Scenario::new(&c.model_id, c.steps, c.noise_scale);
    let algs = [Algorithm::Ckf, Algorithm::KfOracle, Algorithm::CkfNet];
    let a = evaluate(&algs, Some(&net), &model, &test.trajectories, &scenario).unwrap();
    let b = evaluate(&algs, Some(&net), &model, &test.trajectories, &scenario).unwrap();
    assert_eq!(results_csv(&a, false), results_csv(&b, false));
    for r in &a {
        assert!(r.amse.is_finite() && r.amse >= 0.0);
        assert!((r.amse - amse(&r.mses)).abs() <= 1e-12);
    }

    // amse of a concatenation is the count-weighted mean of the parts
    let mses = &a[0].mses;
    let (left, right) = mses.split_at(10);
    let joined = (amse(left) * left.len() as f64 + amse(right) * right.len() as f64) / mses.len() as f64;
    assert!((amse(mses) - joined).abs() < 1e-12);
}

#[test]
fn zero_estimator_mse_is_mean_state_energy() {
    let c = TrainingConfig { steps: 40, ..config() };
    let model = build_model(&c);
    let traj = generate_split(&c, &model, Split::Test, 1, c.steps).unwrap().trajectories.remove(0);
    let zeros = vec![Vector::zeros(4); traj.len()];
    let mut direct = 0.0;
    for s in &traj.states {
        for i in 0..4 {
            direct += s[i] * s[i];
        }
    }
    direct /= traj.len() as f64;
    let mse = trajectory_mse(&zeros, &traj.states).unwrap();
    assert!((mse - direct).abs() <= 1e-12 * direct);
}
