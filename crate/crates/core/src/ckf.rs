//! Classical cubature Kalman filter and a linear Kalman filter reference.
//!
//! The cubature rule is the third-degree spherical-radial rule with `2n`
//! points `mean ± sqrt(n) * L e_k`, all weighted `1 / (2n)`.

use crate::linalg::{cholesky, jacobi_eigen, LinalgError, Matrix, SpdFactor, Vector};
use crate::ssm::StateSpaceModel;

/// Added on top of `|lambda_min|` when a posterior covariance has to be
/// lifted back to positive semidefinite.
pub const COVARIANCE_FLOOR_MARGIN: f64 = 1e-12;

/// The `2n` cubature points around a mean, with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CubaturePointSet {
    pub points: Vec<Vector>,
    pub weights: Vec<f64>,
    /// Images of `points` under a map, once propagated.
    pub propagated: Option<Vec<Vector>>,
}

impl CubaturePointSet {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vector::dim)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pushes every point through `map` and stores the images.
    pub fn propagate(&mut self, map: impl Fn(&[f64]) -> Vector) {
        self.propagated = Some(self.points.iter().map(|p| map(p)).collect());
    }

    /// `sum_k w_k p_k`
    pub fn weighted_mean(&self, points: &[Vector]) -> Vector {
        weighted_mean(&self.weights, points)
    }
}

/// `sum_k w_k p_k`
pub fn weighted_mean(weights: &[f64], points: &[Vector]) -> Vector {
    let mut mean = vec![0.0; points[0].dim()];
    for (w, p) in weights.iter().zip(points) {
        crate::linalg::axpy(*w, p, &mut mean);
    }
    Vector::from_vec(mean)
}

/// `sum_k w_k (a_k - a_mean)(b_k - b_mean)^T`
pub fn weighted_cross(
    weights: &[f64],
    a: &[Vector],
    a_mean: &Vector,
    b: &[Vector],
    b_mean: &Vector,
) -> Matrix {
    let (r, c) = (a_mean.dim(), b_mean.dim());
    let mut out = Matrix::zeros(r, c);
    for ((w, ak), bk) in weights.iter().zip(a).zip(b) {
        let da = ak.sub(a_mean);
        let db = bk.sub(b_mean);
        for i in 0..r {
            let s = w * da[i];
            for j in 0..c {
                out[(i, j)] += s * db[j];
            }
        }
    }
    out
}

/// Cubature points `mean ± sqrt(n) * (column k of factor)`.
///
/// Points `0..n` take the plus sign, points `n..2n` the minus sign.
pub fn cubature_points(mean: &Vector, factor: &SpdFactor) -> CubaturePointSet {
    let n = mean.dim();
    assert_eq!(factor.dim(), n, "factor dimension mismatch");
    let spread = (n as f64).sqrt();
    let l = factor.lower();
    let mut points = Vec::with_capacity(2 * n);
    for sign in [1.0, -1.0] {
        for k in 0..n {
            points.push(Vector::from_vec(
                (0..n).map(|i| mean[i] + sign * spread * l[(i, k)]).collect(),
            ));
        }
    }
    CubaturePointSet {
        points,
        weights: vec![1.0 / (2 * n) as f64; 2 * n],
        propagated: None,
    }
}

/// Mean and covariance of a filter at one instant, with the intermediate
/// update quantities when they exist.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: Vector,
    pub cov: Matrix,
    pub predicted_meas: Option<Vector>,
    pub gain: Option<Matrix>,
    pub innovation_cov: Option<Matrix>,
    pub cross_cov: Option<Matrix>,
}

impl FilterState {
    pub fn new(mean: Vector, cov: Matrix) -> Self {
        Self {
            mean,
            cov,
            predicted_meas: None,
            gain: None,
            innovation_cov: None,
            cross_cov: None,
        }
    }
}

/// Symmetrizes and, when an eigenvalue has gone negative, shifts the
/// spectrum up by `|lambda_min| + margin`.
fn condition_covariance(cov: &Matrix) -> Result<Matrix, LinalgError> {
    let sym = cov.symmetrize();
    let lambda_min = jacobi_eigen(&sym)?.values.iter().copied().fold(f64::INFINITY, f64::min);
    if lambda_min < 0.0 {
        let lift = lambda_min.abs() + COVARIANCE_FLOOR_MARGIN;
        Ok(sym.add(&Matrix::identity(sym.rows()).scale(lift)))
    } else {
        Ok(sym)
    }
}

/// Time update.
pub fn ckf_predict(prior: &FilterState, model: &StateSpaceModel) -> Result<FilterState, LinalgError> {
    let factor = cholesky(&prior.cov)?;
    let mut set = cubature_points(&prior.mean, &factor);
    set.propagate(|x| model.transition(x));
    let images = set.propagated.as_ref().expect("propagated above");
    let mean = set.weighted_mean(images);
    let cov = weighted_cross(&set.weights, images, &mean, images, &mean)
        .add(model.process_noise())
        .symmetrize();
    Ok(FilterState::new(mean, cov))
}

/// Measurement update with measurement `z`.
pub fn ckf_update(
    predicted: &FilterState,
    model: &StateSpaceModel,
    z: &Vector,
) -> Result<FilterState, LinalgError> {
    let factor = cholesky(&predicted.cov)?;
    let mut set = cubature_points(&predicted.mean, &factor);
    set.propagate(|x| model.measure(x));
    let images = set.propagated.as_ref().expect("propagated above");
    let z_hat = set.weighted_mean(images);
    let p_zz = weighted_cross(&set.weights, images, &z_hat, images, &z_hat)
        .add(model.measurement_noise())
        .symmetrize();
    let p_xz = weighted_cross(&set.weights, &set.points, &predicted.mean, images, &z_hat);
    // K = P_xz P_zz^{-1}  <=>  K^T = P_zz^{-1} P_xz^T
    let zz_factor = cholesky(&p_zz)?;
    let gain = zz_factor.solve(&p_xz.transpose()).transpose();
    let innovation = z.sub(&z_hat);
    let mean = predicted.mean.add(&gain.mul_vec(&innovation));
    let cov = predicted.cov.sub(&gain.matmul(&p_zz).matmul_t(&gain));
    let cov = condition_covariance(&cov)?;
    Ok(FilterState {
        mean,
        cov,
        predicted_meas: Some(z_hat),
        gain: Some(gain),
        innovation_cov: Some(p_zz),
        cross_cov: Some(p_xz),
    })
}

/// One predict/update cycle of the linear Kalman filter.
pub fn kf_step(
    prior: &FilterState,
    f: &Matrix,
    h: &Matrix,
    w: &Matrix,
    v: &Matrix,
    z: &Vector,
) -> Result<FilterState, LinalgError> {
    let x_pred = f.mul_vec(&prior.mean);
    let p_pred = f.matmul(&prior.cov).matmul_t(f).add(w);
    let s = h.matmul(&p_pred).matmul_t(h).add(v);
    let hp = h.matmul(&p_pred);
    // K = P^- H^T S^{-1}  <=>  K^T = S^{-1} H P^-
    let gain = cholesky(&s)?.solve(&hp).transpose();
    let z_hat = h.mul_vec(&x_pred);
    let mean = x_pred.add(&gain.mul_vec(&z.sub(&z_hat)));
    let n = f.rows();
    let cov = Matrix::identity(n).sub(&gain.matmul(h)).matmul(&p_pred);
    let cross = p_pred.matmul_t(h);
    Ok(FilterState {
        mean,
        cov,
        predicted_meas: Some(z_hat),
        gain: Some(gain),
        innovation_cov: Some(s),
        cross_cov: Some(cross),
    })
}

/// Runs predict then update for every measurement, returning the posteriors.
pub fn run_ckf(
    model: &StateSpaceModel,
    measurements: &[Vector],
    x0: &Vector,
    p0: &Matrix,
) -> Result<Vec<FilterState>, LinalgError> {
    assert!(!measurements.is_empty(), "no measurements to filter");
    let mut state = FilterState::new(x0.clone(), p0.clone());
    let mut out = Vec::with_capacity(measurements.len());
    for z in measurements {
        let predicted = ckf_predict(&state, model)?;
        state = ckf_update(&predicted, model, z)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Linear Kalman filter over a whole sequence.
pub fn run_kf(
    f: &Matrix,
    h: &Matrix,
    w: &Matrix,
    v: &Matrix,
    measurements: &[Vector],
    x0: &Vector,
    p0: &Matrix,
) -> Result<Vec<FilterState>, LinalgError> {
    let mut state = FilterState::new(x0.clone(), p0.clone());
    let mut out = Vec::with_capacity(measurements.len());
    for z in measurements {
        state = kf_step(&state, f, h, w, v, z)?;
        out.push(state.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{linear_nav_model, simulate_trajectory, LinearMap, RngStream};
    use std::sync::Arc;

    #[test]
    fn identity_factor_points() {
        let set = cubature_points(&Vector::zeros(2), &SpdFactor::identity(2));
        let r2 = 2f64.sqrt();
        let expected = [[r2, 0.0], [0.0, r2], [-r2, 0.0], [0.0, -r2]];
        for (p, e) in set.points.iter().zip(expected) {
            assert_eq!(p.as_slice(), &e);
        }
        assert_eq!(set.weights, vec![0.25; 4]);
    }

    #[test]
    fn scalar_points() {
        let factor = SpdFactor::from_lower(Matrix::from_rows(&[&[2.0]]).unwrap()).unwrap();
        let set = cubature_points(&Vector::from_vec(vec![5.0]), &factor);
        assert_eq!(set.points[0].as_slice(), &[7.0]);
        assert_eq!(set.points[1].as_slice(), &[3.0]);
    }

    #[test]
    fn point_moments_match() {
        let l = Matrix::from_rows(&[&[1.5, 0.0, 0.0], &[0.3, 0.7, 0.0], &[-0.2, 0.4, 2.0]]).unwrap();
        let factor = SpdFactor::from_lower(l).unwrap();
        let mean = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let set = cubature_points(&mean, &factor);
        let m = set.weighted_mean(&set.points);
        assert!(m.max_abs_diff(&mean) < 1e-12);
        let scatter = weighted_cross(&set.weights, &set.points, &mean, &set.points, &mean);
        assert!(scatter.max_abs_diff(&factor.reconstruct()) < 1e-12);
    }

    #[test]
    fn linear_predict_is_exact() {
        let model = linear_nav_model(1.0, 0.1, 0.1, false);
        let (f, _) = model.linear_matrices().unwrap();
        let p = Matrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.3 });
        let prior = FilterState::new(Vector::from_vec(vec![1.0, 2.0, -0.5, 0.25]), p.clone());
        let pred = ckf_predict(&prior, &model).unwrap();
        assert!(pred.mean.max_abs_diff(&f.mul_vec(&prior.mean)) < 1e-12);
        let expected = f.matmul(&p).matmul_t(f).add(model.process_noise());
        assert!(pred.cov.max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn identity_dynamics_without_noise() {
        let model = crate::ssm::StateSpaceModel::new(
            "identity",
            Arc::new(LinearMap::new(Matrix::identity(3))),
            Arc::new(LinearMap::new(Matrix::identity(3))),
            Matrix::zeros(3, 3),
            Matrix::identity(3),
        );
        let prior = FilterState::new(Vector::from_vec(vec![0.5, 1.0, -1.0]), Matrix::identity(3));
        let pred = ckf_predict(&prior, &model).unwrap();
        assert!(pred.mean.max_abs_diff(&prior.mean) < 1e-15);
        assert!(pred.cov.max_abs_diff(&prior.cov) < 1e-15);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let model = linear_nav_model(1.0, 0.1, 0.1, false);
        let pred = FilterState::new(Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), Matrix::identity(4));
        let z = model.measure(&pred.mean);
        let post = ckf_update(&pred, &model, &z).unwrap();
        assert!(post.mean.max_abs_diff(&pred.mean) < 1e-12);
    }

    #[test]
    fn huge_measurement_noise_gives_tiny_gain() {
        let model = linear_nav_model(1.0, 0.1, 1e6, false);
        let pred = FilterState::new(Vector::zeros(4), Matrix::identity(4));
        let z = Vector::from_vec(vec![10.0, -10.0, 5.0, 3.0]);
        let post = ckf_update(&pred, &model, &z).unwrap();
        assert!(post.mean.max_abs_diff(&pred.mean) <= 1e-3);
    }

    #[test]
    fn kf_hand_computed_gain() {
        let i2 = Matrix::identity(2);
        let prior = FilterState::new(Vector::zeros(2), i2.clone());
        let z = Vector::from_vec(vec![1.0, 0.0]);
        let post = kf_step(&prior, &i2, &i2, &Matrix::zeros(2, 2), &i2, &z).unwrap();
        assert!(post.mean.max_abs_diff(&Vector::from_vec(vec![0.5, 0.0])) < 1e-15);
        assert!(post.gain.unwrap().max_abs_diff(&i2.scale(0.5)) < 1e-15);
    }

    #[test]
    fn kf_without_information_returns_prediction() {
        let model = linear_nav_model(1.0, 0.1, 0.1, false);
        let (f, h) = model.linear_matrices().unwrap();
        let prior = FilterState::new(Vector::from_vec(vec![1.0, 1.0, 1.0, 1.0]), Matrix::identity(4));
        let big = Matrix::identity(4).scale(1e15);
        let z = Vector::from_vec(vec![100.0; 4]);
        let post = kf_step(&prior, f, h, model.process_noise(), &big, &z).unwrap();
        assert!(post.mean.max_abs_diff(&f.mul_vec(&prior.mean)) < 1e-9);
    }

    #[test]
    fn ckf_matches_kf_on_linear_model() {
        let model = linear_nav_model(1.0, 0.1, 0.1, false);
        let (f, h) = model.linear_matrices().unwrap();
        let traj = simulate_trajectory(&model, &Vector::zeros(4), 100, &mut RngStream::new(5), 0)
            .unwrap();
        let x0 = Vector::zeros(4);
        let p0 = Matrix::identity(4);
        let ckf = run_ckf(&model, &traj.measurements, &x0, &p0).unwrap();
        let kf = run_kf(
            f,
            h,
            model.process_noise(),
            model.measurement_noise(),
            &traj.measurements,
            &x0,
            &p0,
        )
        .unwrap();
        for (a, b) in ckf.iter().zip(&kf) {
            assert!(a.mean.max_abs_diff(&b.mean) < 1e-8);
            assert!(a.cov.max_abs_diff(&b.cov) < 1e-7);
        }
    }

    #[test]
    fn single_measurement_run() {
        let model = linear_nav_model(1.0, 0.1, 0.1, true);
        let out = run_ckf(
            &model,
            &[Vector::from_vec(vec![0.1, 0.2])],
            &Vector::zeros(4),
            &Matrix::identity(4),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
    }
}
