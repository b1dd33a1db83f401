//! Average-MSE evaluation, experiment sweeps, timing and CSV tables.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::ckf::{run_ckf, run_kf};
use crate::filter::{ckfnet_run, run_batch, CkfNet};
use crate::linalg::{LinalgError, Matrix, Vector};
use crate::ssm::{StateSpaceModel, Trajectory};
use crate::training::{generate_split, nominal_model, Split, TrainError, TrainingConfig, LOCKSTEP_WIDTH};

pub const HORIZONS: [usize; 4] = [100, 120, 150, 180];
pub const NOISE_SCALES: [f64; 4] = [0.5, 1.0, 2.0, 5.0];

/// Trajectories discarded before timing starts.
pub const TIMING_WARMUP: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("estimate/truth length mismatch: {estimates} vs {truths}")]
    LengthMismatch { estimates: usize, truths: usize },
    #[error("no trajectories to evaluate")]
    Empty,
    #[error("{algorithm} failed")]
    Filter {
        algorithm: &'static str,
        #[source]
        source: LinalgError,
    },
    #[error(transparent)]
    Data(#[from] TrainError),
}

/// `(1/T) sum_i ||x_hat_i - x_i||^2` without length checks.
pub(crate) fn mean_sq_error(estimates: &[Vector], truths: &[Vector]) -> f64 {
    let total: f64 = estimates.iter().zip(truths).map(|(e, t)| e.sub(t).norm_sq()).sum();
    total / truths.len() as f64
}

pub fn trajectory_mse(estimates: &[Vector], truths: &[Vector]) -> Result<f64, EvalError> {
    if estimates.len() != truths.len() || truths.is_empty() {
        return Err(EvalError::LengthMismatch {
            estimates: estimates.len(),
            truths: truths.len(),
        });
    }
    Ok(mean_sq_error(estimates, truths))
}

/// Arithmetic mean of per-trajectory MSEs.
pub fn amse(mses: &[f64]) -> f64 {
    assert!(!mses.is_empty(), "AMSE needs at least one trajectory");
    mses.iter().sum::<f64>() / mses.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Ckf,
    CkfNet,
    KfOracle,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Ckf => "ckf",
            Algorithm::CkfNet => "ckfnet",
            Algorithm::KfOracle => "kf_oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model_id: String,
    pub steps: usize,
    pub noise_scale: f64,
    pub obs_mode: String,
}

impl Scenario {
    pub fn new(model_id: &str, steps: usize, noise_scale: f64) -> Self {
        let obs_mode = match model_id {
            "linear_full" => "full",
            "linear_partial" => "partial",
            "nonlinear" => "range_bearing",
            _ => "custom",
        };
        Self {
            model_id: model_id.to_string(),
            steps,
            noise_scale,
            obs_mode: obs_mode.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub algorithm: Algorithm,
    pub scenario: Scenario,
    pub amse: f64,
    pub mses: Vec<f64>,
    /// Wall-clock seconds per trajectory.
    pub seconds: f64,
}

impl EvalResult {
    fn new(algorithm: Algorithm, scenario: Scenario, mses: Vec<f64>, seconds: f64) -> Self {
        Self {
            algorithm,
            amse: amse(&mses),
            scenario,
            mses,
            seconds,
        }
    }
}

/// Initial covariance used by the model-based filters: the initial state is
/// known, so only one step of process noise is assumed.
pub fn initial_covariance(filter_model: &StateSpaceModel) -> Matrix {
    filter_model.process_noise().clone()
}

/// CKF posterior-mean MSE per trajectory, filtering with `filter_model`.
pub fn ckf_mses(filter_model: &StateSpaceModel, trajs: &[Trajectory]) -> Result<Vec<f64>, LinalgError> {
    let x0 = Vector::zeros(filter_model.n());
    let p0 = initial_covariance(filter_model);
    trajs
        .par_iter()
        .map(|t| {
            let est: Vec<Vector> = run_ckf(filter_model, &t.measurements, &x0, &p0)?
                .into_iter()
                .map(|s| s.mean)
                .collect();
            Ok(mean_sq_error(&est, &t.states))
        })
        .collect()
}

/// Kalman-filter MSE; `None` for models that are not linear.
pub fn kf_mses(filter_model: &StateSpaceModel, trajs: &[Trajectory]) -> Option<Result<Vec<f64>, LinalgError>> {
    let (f, h) = filter_model.linear_matrices()?;
    let (w, v) = (filter_model.process_noise(), filter_model.measurement_noise());
    let x0 = Vector::zeros(filter_model.n());
    let p0 = initial_covariance(filter_model);
    Some(
        trajs
            .par_iter()
            .map(|t| {
                let est: Vec<Vector> = run_kf(f, h, w, v, &t.measurements, &x0, &p0)?
                    .into_iter()
                    .map(|s| s.mean)
                    .collect();
                Ok(mean_sq_error(&est, &t.states))
            })
            .collect(),
    )
}

/// CKFNet posterior estimates, computed in lockstep groups of equal length.
pub fn ckfnet_estimates(
    net: &CkfNet,
    model: &StateSpaceModel,
    trajs: &[Trajectory],
) -> Result<Vec<Vec<Vector>>, LinalgError> {
    let x0 = Vector::zeros(net.arch().n);
    let groups: Vec<Result<Vec<Vec<Vector>>, LinalgError>> = trajs
        .par_chunks(LOCKSTEP_WIDTH)
        .map(|group| {
            if group.iter().all(|t| t.len() == group[0].len()) {
                let zs: Vec<&[Vector]> = group.iter().map(|t| t.measurements.as_slice()).collect();
                run_batch(net, model, &zs, &vec![&x0; group.len()])
            } else {
                group.iter().map(|t| ckfnet_run(net, model, &t.measurements, &x0)).collect()
            }
        })
        .collect();
    let mut out = Vec::with_capacity(trajs.len());
    for g in groups {
        out.extend(g?);
    }
    Ok(out)
}

pub fn ckfnet_mses(net: &CkfNet, model: &StateSpaceModel, trajs: &[Trajectory]) -> Result<Vec<f64>, LinalgError> {
    let est = ckfnet_estimates(net, model, trajs)?;
    Ok(est.iter().zip(trajs).map(|(e, t)| mean_sq_error(e, &t.states)).collect())
}

fn timed<T>(n: usize, f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() / n.max(1) as f64)
}

/// Evaluates the requested algorithms on identical measurements.
///
/// `filter_model` is what the CKF and KF assume; the KF row is skipped for
/// nonlinear models. CKFNet uses `filter_model` only for `f` and `h`.
pub fn evaluate(
    algorithms: &[Algorithm],
    net: Option<&CkfNet>,
    filter_model: &StateSpaceModel,
    trajs: &[Trajectory],
    scenario: &Scenario,
) -> Result<Vec<EvalResult>, EvalError> {
    if trajs.is_empty() {
        return Err(EvalError::Empty);
    }
    let fail = |algorithm: Algorithm| move |source| EvalError::Filter {
        algorithm: algorithm.tag(),
        source,
    };
    let mut out = Vec::new();
    for &alg in algorithms {
        let (mses, secs) = match alg {
            Algorithm::Ckf => {
                let (r, s) = timed(trajs.len(), || ckf_mses(filter_model, trajs));
                (r.map_err(fail(alg))?, s)
            }
            Algorithm::KfOracle => match timed(trajs.len(), || kf_mses(filter_model, trajs)) {
                (Some(r), s) => (r.map_err(fail(alg))?, s),
                (None, _) => continue,
            },
            Algorithm::CkfNet => {
                let net = net.expect("CKFNet evaluation needs parameters");
                let (r, s) = timed(trajs.len(), || ckfnet_mses(net, filter_model, trajs));
                (r.map_err(fail(alg))?, s)
            }
        };
        out.push(EvalResult::new(alg, scenario.clone(), mses, secs));
    }
    Ok(out)
}

/// Test-set evaluation of every algorithm with the true covariances.
pub fn evaluate_test_set(net: &CkfNet, config: &TrainingConfig, steps: usize) -> Result<Vec<EvalResult>, EvalError> {
    let model = crate::training::build_model(config);
    let test = generate_split(config, &model, Split::Test, config.n_test, steps)?;
    let scenario = Scenario::new(&config.model_id, steps, config.noise_scale);
    evaluate(
        &[Algorithm::Ckf, Algorithm::KfOracle, Algorithm::CkfNet],
        Some(net),
        &model,
        &test.trajectories,
        &scenario,
    )
}

/// Fresh test sets at each horizon; one row per (algorithm, horizon).
pub fn horizon_sweep(net: &CkfNet, config: &TrainingConfig, horizons: &[usize]) -> Result<Vec<EvalResult>, EvalError> {
    let mut out = Vec::new();
    for &steps in horizons {
        out.extend(evaluate_test_set(net, config, steps)?);
    }
    Ok(out)
}

/// Data noise scaled by each factor while the CKF keeps the nominal
/// covariances. `nets[i]` is used at `scales[i]`; a single network is
/// reused at every scale. The KF oracle knows the scaled covariances.
pub fn noise_sweep(nets: &[&CkfNet], config: &TrainingConfig, scales: &[f64]) -> Result<Vec<EvalResult>, EvalError> {
    assert!(nets.len() == 1 || nets.len() == scales.len(), "one network, or one per scale");
    let nominal = nominal_model(config);
    let mut out = Vec::new();
    for (i, &s) in scales.iter().enumerate() {
        let data_model = nominal.scaled_noise(s);
        let mut cfg = config.clone();
        cfg.noise_scale = s;
        let test = generate_split(&cfg, &data_model, Split::Test, config.n_test, config.steps)?;
        let scenario = Scenario::new(&config.model_id, config.steps, s);
        let net = nets[if nets.len() == 1 { 0 } else { i }];
        out.extend(evaluate(&[Algorithm::Ckf, Algorithm::CkfNet], Some(net), &nominal, &test.trajectories, &scenario)?);
        out.extend(evaluate(&[Algorithm::KfOracle], None, &data_model, &test.trajectories, &scenario)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub algorithm: Algorithm,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub trajectories: usize,
}

/// Sequential per-trajectory wall time of each algorithm on the same
/// measurements, after discarding [`TIMING_WARMUP`] runs.
pub fn time_filters(net: &CkfNet, model: &StateSpaceModel, trajs: &[Trajectory]) -> Result<Vec<TimingRow>, EvalError> {
    assert!(trajs.len() > TIMING_WARMUP, "need more trajectories than warm-up runs");
    let x0 = Vector::zeros(model.n());
    let p0 = initial_covariance(model);
    let mut rows = Vec::new();
    let mut algorithms = vec![Algorithm::Ckf, Algorithm::CkfNet];
    if model.linear_matrices().is_some() {
        algorithms.push(Algorithm::KfOracle);
    }
    for alg in algorithms {
        let mut times = Vec::with_capacity(trajs.len());
        for t in trajs {
            let start = Instant::now();
            let ok = match alg {
                Algorithm::Ckf => run_ckf(model, &t.measurements, &x0, &p0).map(|r| r.len()),
                Algorithm::CkfNet => ckfnet_run(net, model, &t.measurements, &x0).map(|r| r.len()),
                Algorithm::KfOracle => {
                    let (f, h) = model.linear_matrices().expect("linear model");
                    run_kf(f, h, model.process_noise(), model.measurement_noise(), &t.measurements, &x0, &p0)
                        .map(|r| r.len())
                }
            };
            let elapsed = start.elapsed().as_secs_f64();
            ok.map_err(|source| EvalError::Filter {
                algorithm: alg.tag(),
                source,
            })?;
            times.push(elapsed);
        }
        let kept = &times[TIMING_WARMUP..];
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        let var = kept.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / kept.len() as f64;
        rows.push(TimingRow {
            algorithm: alg,
            mean_seconds: mean,
            std_seconds: var.sqrt(),
            trajectories: kept.len(),
        });
    }
    Ok(rows)
}

pub const RESULTS_HEADER: &str = "model,T,noise_scale,obs_mode,algorithm,amse,time_s";

/// CSV with scenario columns first, then algorithm, amse, time_s. With
/// `with_timing` unset the time column is left empty.
pub fn results_csv(results: &[EvalResult], with_timing: bool) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in results {
        let time = if with_timing { format!("{:e}", r.seconds) } else { String::new() };
        writeln!(
            out,
            "{},{},{},{},{},{:.16e},{}",
            r.scenario.model_id,
            r.scenario.steps,
            r.scenario.noise_scale,
            r.scenario.obs_mode,
            r.algorithm.tag(),
            r.amse,
            time
        )
        .unwrap();
    }
    out
}

pub const TIMING_HEADER: &str = "model,T,noise_scale,obs_mode,algorithm,trajectories,time_s,time_std_s";

pub fn timing_csv(rows: &[TimingRow], scenario: &Scenario) -> String {
    let mut out = format!("{TIMING_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:e},{:e}",
            scenario.model_id,
            scenario.steps,
            scenario.noise_scale,
            scenario.obs_mode,
            r.algorithm.tag(),
            r.trajectories,
            r.mean_seconds,
            r.std_seconds
        )
        .unwrap();
    }
    out
}

/// `<sweep>_<unix seconds>.csv`
pub fn csv_file_name(sweep: &str) -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{sweep}_{secs}.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    #[test]
    fn mse_examples() {
        let truths = vec![v(&[1.0, 2.0]), v(&[-3.0, 0.5]), v(&[0.0, 4.0])];
        assert_eq!(trajectory_mse(&truths, &truths).unwrap(), 0.0);
        let shifted: Vec<Vector> = truths.iter().map(|t| t.add(&v(&[3.0, 4.0]))).collect();
        assert!((trajectory_mse(&shifted, &truths).unwrap() - 25.0).abs() < 1e-12);
        let zeros = vec![Vector::zeros(2); 3];
        let brute = (1.0 + 4.0 + 9.0 + 0.25 + 0.0 + 16.0) / 3.0;
        assert!((trajectory_mse(&zeros, &truths).unwrap() - brute).abs() < 1e-12);
        assert!(matches!(
            trajectory_mse(&zeros[..1], &truths),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn amse_examples() {
        assert_eq!(amse(&[0.7]), 0.7);
        assert_eq!(amse(&[1.0, 3.0]), 2.0);
        let (a, b) = ([1.0, 2.0, 6.0], [4.0, 0.5]);
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let weighted = (amse(&a) * 3.0 + amse(&b) * 2.0) / 5.0;
        assert!((amse(&all) - weighted).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let r = EvalResult::new(Algorithm::Ckf, Scenario::new("linear_full", 100, 1.0), vec![0.5, 1.5], 0.25);
        let csv = results_csv(&[r.clone()], false);
        assert_eq!(csv.lines().next(), Some(RESULTS_HEADER));
        assert_eq!(csv.lines().nth(1), Some("linear_full,100,1,full,ckf,1.0000000000000000e0,"));
        assert!(results_csv(&[r], true).ends_with(",2.5e-1\n"));
        assert!(csv_file_name("horizon").starts_with("horizon_"));
    }
}
