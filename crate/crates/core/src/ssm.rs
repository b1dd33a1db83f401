//! State-space models, the land-vehicle navigation scenarios and a seeded
//! trajectory simulator.
//!
//! A model is `x_i = f(x_{i-1}) + w_{i-1}`, `z_i = h(x_i) + v_i` with
//! Gaussian `w ~ N(0, W)` and `v ~ N(0, V)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{cholesky, LinalgError, Matrix, SpdFactor, Vector};

/// Covariances whose largest entry is at or below this are treated as exactly
/// zero by the simulator (no noise is drawn).
pub const ZERO_NOISE_THRESHOLD: f64 = 1e-30;

/// Position of the range-bearing reference in the nonlinear navigation model.
pub const BEARING_ORIGIN: (f64, f64) = (100.0, 100.0);

/// A differentiable map between vector spaces.
pub trait SystemMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Vector;
    /// Jacobian `d eval / dx`, shape `output_dim x input_dim`.
    fn jacobian(&self, x: &[f64]) -> Matrix;
    /// The matrix of a linear map, if this map is linear.
    fn as_linear(&self) -> Option<&Matrix> {
        None
    }
}

/// `x -> A x`
#[derive(Debug, Clone)]
pub struct LinearMap {
    matrix: Matrix,
}

impl LinearMap {
    pub fn new(matrix: Matrix) -> Self {
        Self { matrix }
    }
}

impl SystemMap for LinearMap {
    fn input_dim(&self) -> usize {
        self.matrix.cols()
    }
    fn output_dim(&self) -> usize {
        self.matrix.rows()
    }
    fn eval(&self, x: &[f64]) -> Vector {
        self.matrix.mul_vec(x)
    }
    fn jacobian(&self, _x: &[f64]) -> Matrix {
        self.matrix.clone()
    }
    fn as_linear(&self) -> Option<&Matrix> {
        Some(&self.matrix)
    }
}

/// A map given by a pair of closures (value and Jacobian).
#[derive(Clone)]
pub struct FnMap {
    input_dim: usize,
    output_dim: usize,
    eval: Arc<dyn Fn(&[f64]) -> Vector + Send + Sync>,
    jacobian: Arc<dyn Fn(&[f64]) -> Matrix + Send + Sync>,
}

impl FnMap {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        eval: impl Fn(&[f64]) -> Vector + Send + Sync + 'static,
        jacobian: impl Fn(&[f64]) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            input_dim,
            output_dim,
            eval: Arc::new(eval),
            jacobian: Arc::new(jacobian),
        }
    }
}

impl SystemMap for FnMap {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn eval(&self, x: &[f64]) -> Vector {
        (self.eval)(x)
    }
    fn jacobian(&self, x: &[f64]) -> Matrix {
        (self.jacobian)(x)
    }
}

/// Two-argument arctangent with `angle(0, 0) = 0`, range `(-pi, pi]`.
pub fn angle(y: f64, x: f64) -> f64 {
    if y == 0.0 && x == 0.0 {
        return 0.0;
    }
    let a = y.atan2(x);
    // atan2 returns -pi for (-0.0, negative x); fold it onto +pi
    if a == -PI {
        PI
    } else {
        a
    }
}

/// Measurement map of the nonlinear navigation scenario:
/// `[-x1 - x3, -x2 - x4, |(x1, x2)|, angle(x2 - 100, x1 - 100)]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RangeBearingMap;

impl SystemMap for RangeBearingMap {
    fn input_dim(&self) -> usize {
        4
    }
    fn output_dim(&self) -> usize {
        4
    }
    fn eval(&self, x: &[f64]) -> Vector {
        let (ox, oy) = BEARING_ORIGIN;
        Vector::from_vec(vec![
            -x[0] - x[2],
            -x[1] - x[3],
            x[0].hypot(x[1]),
            angle(x[1] - oy, x[0] - ox),
        ])
    }
    fn jacobian(&self, x: &[f64]) -> Matrix {
        let (ox, oy) = BEARING_ORIGIN;
        let mut j = Matrix::zeros(4, 4);
        j[(0, 0)] = -1.0;
        j[(0, 2)] = -1.0;
        j[(1, 1)] = -1.0;
        j[(1, 3)] = -1.0;
        let r = x[0].hypot(x[1]);
        // the range is not differentiable at the origin; use the zero subgradient
        if r > 0.0 {
            j[(2, 0)] = x[0] / r;
            j[(2, 1)] = x[1] / r;
        }
        let (dx, dy) = (x[0] - ox, x[1] - oy);
        let d2 = dx * dx + dy * dy;
        if d2 > 0.0 {
            j[(3, 0)] = -dy / d2;
            j[(3, 1)] = dx / d2;
        }
        j
    }
}

/// Dynamics, observation and noise of a discrete-time system.
#[derive(Clone)]
pub struct StateSpaceModel {
    id: String,
    transition: Arc<dyn SystemMap>,
    measurement: Arc<dyn SystemMap>,
    process_noise: Matrix,
    measurement_noise: Matrix,
}

impl fmt::Debug for StateSpaceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateSpaceModel")
            .field("id", &self.id)
            .field("n", &self.n())
            .field("m", &self.m())
            .finish()
    }
}

impl StateSpaceModel {
    /// Panics if map and covariance dimensions disagree.
    pub fn new(
        id: impl Into<String>,
        transition: Arc<dyn SystemMap>,
        measurement: Arc<dyn SystemMap>,
        process_noise: Matrix,
        measurement_noise: Matrix,
    ) -> Self {
        let n = transition.input_dim();
        assert_eq!(transition.output_dim(), n, "transition must map R^n to R^n");
        assert_eq!(measurement.input_dim(), n, "measurement input must be R^n");
        let m = measurement.output_dim();
        assert_eq!(process_noise.shape(), (n, n), "W must be n x n");
        assert_eq!(measurement_noise.shape(), (m, m), "V must be m x m");
        Self {
            id: id.into(),
            transition,
            measurement,
            process_noise,
            measurement_noise,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n(&self) -> usize {
        self.transition.input_dim()
    }

    pub fn m(&self) -> usize {
        self.measurement.output_dim()
    }

    pub fn transition(&self, x: &[f64]) -> Vector {
        self.transition.eval(x)
    }

    pub fn transition_jacobian(&self, x: &[f64]) -> Matrix {
        self.transition.jacobian(x)
    }

    pub fn measure(&self, x: &[f64]) -> Vector {
        self.measurement.eval(x)
    }

    pub fn measurement_jacobian(&self, x: &[f64]) -> Matrix {
        self.measurement.jacobian(x)
    }

    pub fn process_noise(&self) -> &Matrix {
        &self.process_noise
    }

    pub fn measurement_noise(&self) -> &Matrix {
        &self.measurement_noise
    }

    /// `(F, H)` when both maps are linear.
    pub fn linear_matrices(&self) -> Option<(&Matrix, &Matrix)> {
        Some((self.transition.as_linear()?, self.measurement.as_linear()?))
    }

    /// Same dynamics and observation with different noise covariances.
    pub fn with_noise(&self, process_noise: Matrix, measurement_noise: Matrix) -> Self {
        Self::new(
            self.id.clone(),
            Arc::clone(&self.transition),
            Arc::clone(&self.measurement),
            process_noise,
            measurement_noise,
        )
    }

    /// Both covariances multiplied by `s`.
    pub fn scaled_noise(&self, s: f64) -> Self {
        self.with_noise(self.process_noise.scale(s), self.measurement_noise.scale(s))
    }
}

/// Constant-velocity transition over one step of length `dt`:
/// state `[north, east, north velocity, east velocity]`.
pub fn constant_velocity_matrix(dt: f64) -> Matrix {
    let mut f = Matrix::identity(4);
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

/// Linear navigation model. `partial` observes the two positions only.
pub fn linear_nav_model(dt: f64, q: f64, r: f64, partial: bool) -> StateSpaceModel {
    assert!(dt > 0.0 && q > 0.0 && r > 0.0, "dt, q, r must be positive");
    let h = if partial {
        Matrix::from_fn(2, 4, |i, j| if i == j { 1.0 } else { 0.0 })
    } else {
        Matrix::identity(4)
    };
    let m = h.rows();
    let id = if partial { "linear_partial" } else { "linear_full" };
    StateSpaceModel::new(
        id,
        Arc::new(LinearMap::new(constant_velocity_matrix(dt))),
        Arc::new(LinearMap::new(h)),
        Matrix::identity(4).scale(q),
        Matrix::identity(m).scale(r),
    )
}

/// Constant-velocity dynamics (unit step) with the range-bearing observation.
pub fn nonlinear_nav_model(q: f64, r: f64) -> StateSpaceModel {
    assert!(q > 0.0 && r > 0.0, "q, r must be positive");
    StateSpaceModel::new(
        "nonlinear",
        Arc::new(LinearMap::new(constant_velocity_matrix(1.0))),
        Arc::new(RangeBearingMap),
        Matrix::identity(4).scale(q),
        Matrix::identity(4).scale(r),
    )
}

/// Deterministic stream of random draws identified by `(seed, counter)`.
///
/// Backed by ChaCha8, whose output is specified independently of the host
/// platform. `counter` counts the 64-bit words consumed so far.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via the Box-Muller transform.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the log finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// Uniform index in `0..n` (rejection sampling, unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Square-root form of a noise covariance as used for sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseFactor {
    /// Exactly zero noise of the given dimension.
    Zero(usize),
    Cholesky(SpdFactor),
}

impl NoiseFactor {
    pub fn from_covariance(cov: &Matrix) -> Result<Self, LinalgError> {
        if cov.max_abs() <= ZERO_NOISE_THRESHOLD {
            Ok(Self::Zero(cov.rows()))
        } else {
            Ok(Self::Cholesky(cholesky(cov)?))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Zero(n) => *n,
            Self::Cholesky(f) => f.dim(),
        }
    }
}

/// Draws `L u` with `u` a vector of independent standard normals.
pub fn gaussian_draw(rng: &mut RngStream, factor: &NoiseFactor) -> Vector {
    match factor {
        NoiseFactor::Zero(n) => Vector::zeros(*n),
        NoiseFactor::Cholesky(f) => {
            let u: Vec<f64> = (0..f.dim()).map(|_| rng.standard_normal()).collect();
            f.lower().mul_vec(&u)
        }
    }
}

/// A simulated run: ground truth states and the matching measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub traj_id: u64,
    pub seed: u64,
    pub model_id: String,
    pub states: Vec<Vector>,
    pub measurements: Vec<Vector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Simulates `steps` transitions from `x0`, drawing process then measurement
/// noise at every step.
pub fn simulate_trajectory(
    model: &StateSpaceModel,
    x0: &Vector,
    steps: usize,
    rng: &mut RngStream,
    traj_id: u64,
) -> Result<Trajectory, LinalgError> {
    assert!(steps >= 1, "trajectory needs at least one step");
    assert_eq!(x0.dim(), model.n(), "initial state dimension mismatch");
    let w = NoiseFactor::from_covariance(model.process_noise())?;
    let v = NoiseFactor::from_covariance(model.measurement_noise())?;
    let seed = rng.seed();
    let mut states = Vec::with_capacity(steps);
    let mut measurements = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for _ in 0..steps {
        x = model.transition(&x).add(&gaussian_draw(rng, &w));
        let z = model.measure(&x).add(&gaussian_draw(rng, &v));
        states.push(x.clone());
        measurements.push(z);
    }
    Ok(Trajectory {
        traj_id,
        seed,
        model_id: model.id().to_string(),
        states,
        measurements,
    })
}
