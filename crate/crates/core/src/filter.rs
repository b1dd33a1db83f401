//! The GRU-augmented cubature filter.
//!
//! Each step runs two phases.
//!
//! Prediction: two GRUs read the lagged state features (`F3`, `F4`). One
//! produces the lower-triangular factor that spreads the cubature points
//! around the previous posterior, the other produces the point weights. A
//! fusion GRU combines their hidden states, and a head on the fusion state
//! gives the process-noise factor. The prior mean and covariance follow the
//! cubature rule with these learned pieces. The covariance is then Cholesky
//! factored to spread the update-phase points.
//!
//! Update: the predicted measurement comes from the update-phase points and
//! the learned weights. Two GRUs read the measurement features (`F1`, `F2`)
//! and the fusion state. One emits the state-measurement cross covariance,
//! the other an SPD factor of the innovation covariance. The gain is
//! `K = P_xz P_zz^{-1}`, obtained by a factored solve.
//!
//! The filter reads only `f`, `h` and the dimensions from the model. The noise
//! covariances are never touched.
//!
//! [`backward`] differentiates a whole trajectory exactly (BPTT through
//! every path, features included), layer by layer.

use crate::linalg::{axpy, cholesky, cholesky_backward, dot, LinalgError, Matrix, SpdFactor, Vector};
use crate::neural::{GruCache, GruCellParams, LinearHeadParams, ParamLayout, ParamTape};
use crate::ssm::{RngStream, StateSpaceModel};

/// Diagonal floor added after the softplus in [`head_to_spd_factor`].
pub const FACTOR_DIAG_FLOOR: f64 = 1e-6;

/// Jitter added to the predicted covariance before its Cholesky factor.
pub const COVARIANCE_JITTER: f64 = 1e-9;

/// Features whose norm does not exceed this are passed through unscaled.
pub const FEATURE_NORM_FLOOR: f64 = 1e-9;

/// Init half-width of the cross-covariance head relative to the other heads.
/// A near-zero initial gain keeps the untrained closed loop from diverging.
pub const GAIN_HEAD_INIT_SCALE: f64 = 0.01;

/// Shape hyperparameters of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub n: usize,
    pub m: usize,
    pub hidden_dim: usize,
}

impl Architecture {
    pub fn tril_len(dim: usize) -> usize {
        dim * (dim + 1) / 2
    }
}

/// Handles of every cell and head; values live in a [`ParamTape`].
#[derive(Debug, Clone, PartialEq)]
pub struct CkfNetParams {
    pub arch: Architecture,
    pub gru_s: GruCellParams,
    pub head_s: LinearHeadParams,
    pub gru_w: GruCellParams,
    pub head_w: LinearHeadParams,
    pub gru_fuse: GruCellParams,
    pub head_q: LinearHeadParams,
    pub gru_pxz: GruCellParams,
    pub head_pxz: LinearHeadParams,
    pub gru_pzz: GruCellParams,
    pub head_pzz: LinearHeadParams,
}

impl CkfNetParams {
    pub fn build(arch: Architecture) -> (Self, ParamLayout) {
        let Architecture { n, m, hidden_dim: hd } = arch;
        let k = 1.0 / (hd as f64).sqrt();
        let mut layout = ParamLayout::new();
        let gru_s = GruCellParams::register(&mut layout, "gru_s", 2 * n, hd);
        let head_s = LinearHeadParams::register(&mut layout, "head_s", hd, Architecture::tril_len(n), k);
        let gru_w = GruCellParams::register(&mut layout, "gru_w", 2 * n, hd);
        let head_w = LinearHeadParams::register(&mut layout, "head_w", hd, 2 * n, k);
        let gru_fuse = GruCellParams::register(&mut layout, "gru_fuse", 2 * hd, hd);
        let head_q = LinearHeadParams::register(&mut layout, "head_q", hd, Architecture::tril_len(n), k);
        let gru_pxz = GruCellParams::register(&mut layout, "gru_pxz", 2 * m + hd, hd);
        let head_pxz = LinearHeadParams::register(&mut layout, "head_pxz", hd, n * m, k * GAIN_HEAD_INIT_SCALE);
        let gru_pzz = GruCellParams::register(&mut layout, "gru_pzz", 2 * m + hd, hd);
        let head_pzz = LinearHeadParams::register(&mut layout, "head_pzz", hd, Architecture::tril_len(m), k);
        let params = Self {
            arch,
            gru_s,
            head_s,
            gru_w,
            head_w,
            gru_fuse,
            head_q,
            gru_pxz,
            head_pxz,
            gru_pzz,
            head_pzz,
        };
        (params, layout)
    }

    /// Tensor-name prefixes of the prediction-phase parameters.
    pub const PREDICTION_PREFIXES: [&'static str; 5] = ["gru_s.", "head_s.", "gru_w.", "head_w.", "gru_fuse."];

    pub fn is_prediction_tensor(name: &str) -> bool {
        Self::PREDICTION_PREFIXES.iter().any(|p| name.starts_with(p)) || name.starts_with("head_q.")
    }
}

/// A network: handles plus parameter values (and a gradient buffer).
#[derive(Debug, Clone, PartialEq)]
pub struct CkfNet {
    pub params: CkfNetParams,
    pub tape: ParamTape,
}

impl CkfNet {
    /// Scaled-uniform weights, zero biases.
    pub fn initialized(arch: Architecture, rng: &mut RngStream) -> Self {
        let (params, layout) = CkfNetParams::build(arch);
        Self {
            params,
            tape: ParamTape::initialized(layout, rng),
        }
    }

    /// Every parameter zero.
    pub fn zeros(arch: Architecture) -> Self {
        let (params, layout) = CkfNetParams::build(arch);
        Self {
            params,
            tape: ParamTape::zeros(layout),
        }
    }

    pub fn arch(&self) -> Architecture {
        self.params.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        self.tape.layout()
    }

    pub fn values(&self) -> &[f64] {
        &self.tape.values
    }
}

/// Fills a lower triangle row by row; diagonal entries go through
/// `softplus(.) + 1e-6`, off-diagonal entries are taken as is.
pub fn head_to_spd_factor(raw: &[f64], dim: usize) -> SpdFactor {
    assert_eq!(raw.len(), Architecture::tril_len(dim), "factor head length mismatch");
    let mut l = Matrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in 0..=i {
            l[(i, j)] = if i == j {
                softplus(raw[k]) + FACTOR_DIAG_FLOOR
            } else {
                raw[k]
            };
            k += 1;
        }
    }
    SpdFactor::from_lower(l).expect("softplus diagonal is strictly positive")
}

/// Gradient of [`head_to_spd_factor`] w.r.t. the raw head output.
fn spd_factor_backward(raw: &[f64], dim: usize, d_lower: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let mut k = 0;
    for i in 0..dim {
        for j in 0..=i {
            out.push(if i == j {
                d_lower[(i, i)] * sigmoid(raw[k])
            } else {
                d_lower[(i, j)]
            });
            k += 1;
        }
    }
    out
}

/// Softmax over the `2n` logits.
pub fn head_to_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_backward(weights: &[f64], d_weights: &[f64]) -> Vec<f64> {
    let inner = dot(weights, d_weights);
    weights.iter().zip(d_weights).map(|(w, d)| w * (d - inner)).collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unit-norm scaling used for the GRU input features.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeature {
    pub raw: Vector,
    pub norm: f64,
    pub value: Vector,
}

pub fn normalize_feature(raw: Vector) -> NormalizedFeature {
    let norm = raw.norm();
    let value = if norm > FEATURE_NORM_FLOOR {
        raw.scale(1.0 / norm)
    } else {
        raw.clone()
    };
    NormalizedFeature { raw, norm, value }
}

fn normalize_backward(feature: &NormalizedFeature, d_value: &[f64]) -> Vec<f64> {
    if feature.norm > FEATURE_NORM_FLOOR {
        let u = &feature.value;
        let proj = dot(u, d_value);
        u.iter()
            .zip(d_value)
            .map(|(ui, di)| (di - ui * proj) / feature.norm)
            .collect()
    } else {
        d_value.to_vec()
    }
}

/// The four input features of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    /// Innovation `z_i - z_hat_{i|i-1}`.
    pub f1: NormalizedFeature,
    /// Observation increment `z_i - z_{i-1}`.
    pub f2: NormalizedFeature,
    /// Forward evolution error `x_{i-1|i-1} - x_{i-1|i-2}`.
    pub f3: NormalizedFeature,
    /// Forward update error `x_{i-1|i-1} - x_{i-2|i-2}`.
    pub f4: NormalizedFeature,
}

/// Recurrent state carried from one step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct CkfNetState {
    /// `x_{i-1|i-1}`
    pub posterior: Vector,
    /// `x_{i-1|i-2}`
    pub prev_prior: Vector,
    /// `x_{i-2|i-2}`
    pub prev_posterior: Vector,
    /// `z_{i-1}`; `None` before the first measurement.
    pub prev_measurement: Option<Vector>,
    pub h_s: Vec<f64>,
    pub h_w: Vec<f64>,
    pub h_fuse: Vec<f64>,
    pub h_pxz: Vec<f64>,
    pub h_pzz: Vec<f64>,
}

impl CkfNetState {
    /// All lagged means start at `x0`, so the lagged features start at zero.
    pub fn new(arch: Architecture, x0: &Vector) -> Self {
        assert_eq!(x0.dim(), arch.n, "initial state dimension mismatch");
        let h = vec![0.0; arch.hidden_dim];
        Self {
            posterior: x0.clone(),
            prev_prior: x0.clone(),
            prev_posterior: x0.clone(),
            prev_measurement: None,
            h_s: h.clone(),
            h_w: h.clone(),
            h_fuse: h.clone(),
            h_pxz: h.clone(),
            h_pzz: h,
        }
    }
}

/// Everything the prediction phase computed.
#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub f3: NormalizedFeature,
    pub f4: NormalizedFeature,
    pub gru_s: GruCache,
    pub raw_spread: Vector,
    pub spread: SpdFactor,
    pub gru_w: GruCache,
    pub weights: Vec<f64>,
    pub points: Vec<Vector>,
    pub images: Vec<Vector>,
    /// `x_{i|i-1}`
    pub prior_mean: Vector,
    pub gru_fuse: GruCache,
    pub raw_process: Vector,
    pub process_factor: SpdFactor,
    /// Weighted scatter plus learned process noise (jitter excluded).
    pub predicted_cov: Matrix,
    /// `S_{i|i-1}`
    pub factor: SpdFactor,
}

/// Everything the update phase computed.
#[derive(Debug, Clone)]
pub struct UpdateOutput {
    pub points: Vec<Vector>,
    pub images: Vec<Vector>,
    pub predicted_meas: Vector,
    pub innovation: Vector,
    pub f1: NormalizedFeature,
    pub f2: NormalizedFeature,
    pub gru_pxz: GruCache,
    pub cross_cov: Matrix,
    pub gru_pzz: GruCache,
    pub raw_innovation: Vector,
    pub innovation_factor: SpdFactor,
    pub gain: Matrix,
    /// `P_zz^{-1} (z - z_hat)`
    pub solved_innovation: Vector,
    /// `x_{i|i}`
    pub posterior: Vector,
}

impl UpdateOutput {
    pub fn innovation_cov(&self) -> Matrix {
        self.innovation_factor.reconstruct()
    }
}

/// Points `center ± sqrt(n) * (column k of factor)`; plus signs first.
fn spread_points(center: &Vector, factor: &Matrix) -> Vec<Vector> {
    let n = center.dim();
    let s = (n as f64).sqrt();
    let mut points = Vec::with_capacity(2 * n);
    for sign in [1.0, -1.0] {
        for k in 0..n {
            points.push(Vector::from_vec(
                (0..n).map(|i| center[i] + sign * s * factor[(i, k)]).collect(),
            ));
        }
    }
    points
}

/// Adds the gradient of [`spread_points`] into `d_center` and `d_factor`.
fn spread_points_backward(d_points: &[Vector], d_center: &mut [f64], d_factor: &mut Matrix) {
    let n = d_center.len();
    let s = (n as f64).sqrt();
    for (k, dp) in d_points.iter().enumerate() {
        let (col, sign) = if k < n { (k, 1.0) } else { (k - n, -1.0) };
        for i in 0..n {
            d_center[i] += dp[i];
            d_factor[(i, col)] += sign * s * dp[i];
        }
    }
}

fn weighted_sum(weights: &[f64], points: &[Vector]) -> Vector {
    let mut out = vec![0.0; points[0].dim()];
    for (w, p) in weights.iter().zip(points) {
        axpy(*w, p, &mut out);
    }
    Vector::from_vec(out)
}

fn lower_mask(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| if j <= i { m[(i, j)] } else { 0.0 })
}

/// Lagged-state features and the prediction-GRU input `[F3, F4]`.
fn prediction_input(state: &CkfNetState) -> (NormalizedFeature, NormalizedFeature, Vec<f64>) {
    let f3 = normalize_feature(state.posterior.sub(&state.prev_prior));
    let f4 = normalize_feature(state.posterior.sub(&state.prev_posterior));
    let input = f3.value.iter().chain(f4.value.iter()).copied().collect();
    (f3, f4, input)
}

/// Prediction phase for a batch of independent runs; each member's result
/// equals a separate [`ckfnet_predict`] call.
pub fn predict_batch(
    states: &[&CkfNetState],
    net: &CkfNet,
    model: &StateSpaceModel,
) -> Result<Vec<PredictOutput>, LinalgError> {
    let p = &net.params;
    let (layout, values) = (net.layout(), net.values());
    let n = p.arch.n;

    let features: Vec<_> = states.iter().map(|s| prediction_input(s)).collect();
    let inputs: Vec<&[f64]> = features.iter().map(|f| f.2.as_slice()).collect();
    let h_s: Vec<&[f64]> = states.iter().map(|s| s.h_s.as_slice()).collect();
    let h_w: Vec<&[f64]> = states.iter().map(|s| s.h_w.as_slice()).collect();
    let gru_s = p.gru_s.forward_batch(layout, values, &inputs, &h_s);
    let gru_w = p.gru_w.forward_batch(layout, values, &inputs, &h_w);

    let mut partial = Vec::with_capacity(states.len());
    for ((state, gs), gw) in states.iter().zip(&gru_s).zip(&gru_w) {
        let raw_spread = p.head_s.forward(layout, values, &gs.h_new);
        let spread = head_to_spd_factor(&raw_spread, n);
        let weights = head_to_weights(&p.head_w.forward(layout, values, &gw.h_new));
        let points = spread_points(&state.posterior, spread.lower());
        let images: Vec<Vector> = points.iter().map(|x| model.transition(x)).collect();
        let prior_mean = weighted_sum(&weights, &images);
        let fuse_in: Vec<f64> = gs.h_new.iter().chain(&gw.h_new).copied().collect();
        partial.push((raw_spread, spread, weights, points, images, prior_mean, fuse_in));
    }

    let fuse_in: Vec<&[f64]> = partial.iter().map(|p| p.6.as_slice()).collect();
    let h_fuse: Vec<&[f64]> = states.iter().map(|s| s.h_fuse.as_slice()).collect();
    let gru_fuse = p.gru_fuse.forward_batch(layout, values, &fuse_in, &h_fuse);

    let mut out = Vec::with_capacity(states.len());
    for (((((f3, f4, _), gru_s), gru_w), gru_fuse), part) in features
        .into_iter()
        .zip(gru_s)
        .zip(gru_w)
        .zip(gru_fuse)
        .zip(partial)
    {
        let (raw_spread, spread, weights, points, images, prior_mean, _) = part;
        let raw_process = p.head_q.forward(layout, values, &gru_fuse.h_new);
        let process_factor = head_to_spd_factor(&raw_process, n);

        let mut predicted_cov = process_factor.reconstruct();
        for (w, img) in weights.iter().zip(&images) {
            let d = img.sub(&prior_mean);
            for i in 0..n {
                for j in 0..n {
                    predicted_cov[(i, j)] += w * d[i] * d[j];
                }
            }
        }
        let jittered = predicted_cov.add(&Matrix::identity(n).scale(COVARIANCE_JITTER));
        let factor = cholesky(&jittered)?;

        out.push(PredictOutput {
            f3,
            f4,
            gru_s,
            raw_spread,
            spread,
            gru_w,
            weights,
            points,
            images,
            prior_mean,
            gru_fuse,
            raw_process,
            process_factor,
            predicted_cov,
            factor,
        });
    }
    Ok(out)
}

/// Prediction phase for step `i`.
pub fn ckfnet_predict(
    state: &CkfNetState,
    net: &CkfNet,
    model: &StateSpaceModel,
) -> Result<PredictOutput, LinalgError> {
    Ok(predict_batch(&[state], net, model)?.pop().expect("batch of one"))
}

/// Update phase for a batch; member `b` uses `preds[b]` and measurement `zs[b]`.
pub fn update_batch(
    states: &[&CkfNetState],
    preds: &[&PredictOutput],
    net: &CkfNet,
    model: &StateSpaceModel,
    zs: &[&Vector],
) -> Vec<UpdateOutput> {
    let p = &net.params;
    let (layout, values) = (net.layout(), net.values());
    let Architecture { n, m, .. } = p.arch;

    let mut partial = Vec::with_capacity(states.len());
    for ((state, pred), z) in states.iter().zip(preds).zip(zs) {
        assert_eq!(z.dim(), m, "measurement dimension mismatch");
        let points = spread_points(&pred.prior_mean, pred.factor.lower());
        let images: Vec<Vector> = points.iter().map(|x| model.measure(x)).collect();
        let predicted_meas = weighted_sum(&pred.weights, &images);
        let innovation = z.sub(&predicted_meas);
        let f1 = normalize_feature(innovation.clone());
        let prev_z = state.prev_measurement.as_ref().unwrap_or(z);
        let f2 = normalize_feature(z.sub(prev_z));
        let input: Vec<f64> = f1
            .value
            .iter()
            .chain(f2.value.iter())
            .chain(&pred.gru_fuse.h_new)
            .copied()
            .collect();
        partial.push((points, images, predicted_meas, innovation, f1, f2, input));
    }

    let inputs: Vec<&[f64]> = partial.iter().map(|p| p.6.as_slice()).collect();
    let h_pxz: Vec<&[f64]> = states.iter().map(|s| s.h_pxz.as_slice()).collect();
    let h_pzz: Vec<&[f64]> = states.iter().map(|s| s.h_pzz.as_slice()).collect();
    let gru_pxz = p.gru_pxz.forward_batch(layout, values, &inputs, &h_pxz);
    let gru_pzz = p.gru_pzz.forward_batch(layout, values, &inputs, &h_pzz);

    let mut out = Vec::with_capacity(states.len());
    for (((part, pred), gru_pxz), gru_pzz) in partial.into_iter().zip(preds).zip(gru_pxz).zip(gru_pzz) {
        let (points, images, predicted_meas, innovation, f1, f2, _) = part;
        let raw_cross = p.head_pxz.forward(layout, values, &gru_pxz.h_new);
        let cross_cov = Matrix::from_vec_unchecked(n, m, raw_cross.into_vec());
        let raw_innovation = p.head_pzz.forward(layout, values, &gru_pzz.h_new);
        let innovation_factor = head_to_spd_factor(&raw_innovation, m);

        // K^T = P_zz^{-1} P_xz^T through the factor L_zz of P_zz = L_zz L_zz^T
        let gain = innovation_factor.solve(&cross_cov.transpose()).transpose();
        let solved_innovation = innovation_factor.solve_vec(&innovation);
        let posterior = pred.prior_mean.add(&gain.mul_vec(&innovation));

        out.push(UpdateOutput {
            points,
            images,
            predicted_meas,
            innovation,
            f1,
            f2,
            gru_pxz,
            cross_cov,
            gru_pzz,
            raw_innovation,
            innovation_factor,
            gain,
            solved_innovation,
            posterior,
        });
    }
    out
}

/// Update phase for step `i` given measurement `z`.
pub fn ckfnet_update(
    state: &CkfNetState,
    pred: &PredictOutput,
    net: &CkfNet,
    model: &StateSpaceModel,
    z: &Vector,
) -> UpdateOutput {
    update_batch(&[state], &[pred], net, model, &[z])
        .pop()
        .expect("batch of one")
}

/// Carries the recurrent state past a completed step.
fn advance(state: &CkfNetState, pred: &PredictOutput, upd: &UpdateOutput, z: &Vector) -> CkfNetState {
    CkfNetState {
        posterior: upd.posterior.clone(),
        prev_prior: pred.prior_mean.clone(),
        prev_posterior: state.posterior.clone(),
        prev_measurement: Some(z.clone()),
        h_s: pred.gru_s.h_new.clone(),
        h_w: pred.gru_w.h_new.clone(),
        h_fuse: pred.gru_fuse.h_new.clone(),
        h_pxz: upd.gru_pxz.h_new.clone(),
        h_pzz: upd.gru_pzz.h_new.clone(),
    }
}

/// One full step: predict, update, advance.
pub fn ckfnet_step(
    state: &CkfNetState,
    net: &CkfNet,
    model: &StateSpaceModel,
    z: &Vector,
) -> Result<(CkfNetState, PredictOutput, UpdateOutput), LinalgError> {
    let pred = ckfnet_predict(state, net, model)?;
    let upd = ckfnet_update(state, &pred, net, model, z);
    let next = advance(state, &pred, &upd, z);
    Ok((next, pred, upd))
}

/// Forward activations of a whole sequence, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub steps: Vec<(PredictOutput, UpdateOutput)>,
}

impl Trace {
    pub fn posteriors(&self) -> Vec<Vector> {
        self.steps.iter().map(|(_, u)| u.posterior.clone()).collect()
    }
}

/// Runs equal-length sequences in lockstep. With `keep` set, every
/// activation is retained; otherwise only the posteriors survive.
fn run_lockstep(
    net: &CkfNet,
    model: &StateSpaceModel,
    measurements: &[&[Vector]],
    x0s: &[&Vector],
    keep: bool,
) -> Result<(Vec<Trace>, Vec<Vec<Vector>>), LinalgError> {
    assert_eq!(measurements.len(), x0s.len(), "one initial state per sequence");
    let steps = measurements.first().map_or(0, |s| s.len());
    assert!(steps > 0, "no measurements to filter");
    assert!(
        measurements.iter().all(|s| s.len() == steps),
        "lockstep sequences must share a length"
    );
    let mut states: Vec<CkfNetState> = x0s.iter().map(|x0| CkfNetState::new(net.arch(), x0)).collect();
    let mut traces: Vec<Trace> = (0..states.len())
        .map(|_| Trace {
            steps: Vec::with_capacity(if keep { steps } else { 0 }),
        })
        .collect();
    let mut posteriors: Vec<Vec<Vector>> = vec![Vec::with_capacity(steps); states.len()];
    for t in 0..steps {
        let refs: Vec<&CkfNetState> = states.iter().collect();
        let zs: Vec<&Vector> = measurements.iter().map(|s| &s[t]).collect();
        let preds = predict_batch(&refs, net, model)?;
        let pred_refs: Vec<&PredictOutput> = preds.iter().collect();
        let upds = update_batch(&refs, &pred_refs, net, model, &zs);
        let next: Vec<CkfNetState> = (0..states.len())
            .map(|b| advance(&states[b], &preds[b], &upds[b], zs[b]))
            .collect();
        for (b, (pred, upd)) in preds.into_iter().zip(upds).enumerate() {
            posteriors[b].push(upd.posterior.clone());
            if keep {
                traces[b].steps.push((pred, upd));
            }
        }
        states = next;
    }
    Ok((traces, posteriors))
}

/// Filters equal-length measurement sequences together; the posteriors of
/// each sequence equal those of a separate [`ckfnet_run`].
pub fn run_batch(
    net: &CkfNet,
    model: &StateSpaceModel,
    measurements: &[&[Vector]],
    x0s: &[&Vector],
) -> Result<Vec<Vec<Vector>>, LinalgError> {
    Ok(run_lockstep(net, model, measurements, x0s, false)?.1)
}

/// Filters a measurement sequence, returning the posterior means.
pub fn ckfnet_run(
    net: &CkfNet,
    model: &StateSpaceModel,
    measurements: &[Vector],
    x0: &Vector,
) -> Result<Vec<Vector>, LinalgError> {
    Ok(run_batch(net, model, &[measurements], &[x0])?.pop().expect("batch of one"))
}

/// [`run_batch`] that keeps every activation.
pub fn forward_batch(
    net: &CkfNet,
    model: &StateSpaceModel,
    measurements: &[&[Vector]],
    x0s: &[&Vector],
) -> Result<Vec<Trace>, LinalgError> {
    Ok(run_lockstep(net, model, measurements, x0s, true)?.0)
}

/// [`ckfnet_run`] that keeps every activation.
pub fn forward(
    net: &CkfNet,
    model: &StateSpaceModel,
    measurements: &[Vector],
    x0: &Vector,
) -> Result<Trace, LinalgError> {
    Ok(forward_batch(net, model, &[measurements], &[x0])?.pop().expect("batch of one"))
}

fn add_vec(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_vec(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

/// Reverse-mode accumulators of one sequence.
struct SequenceGrad {
    // index 0 stands for the initial estimate, index t + 1 for step t
    d_post: Vec<Vec<f64>>,
    d_prior: Vec<Vec<f64>>,
    dh_s: Vec<f64>,
    dh_w: Vec<f64>,
    dh_fuse: Vec<f64>,
    dh_pxz: Vec<f64>,
    dh_pzz: Vec<f64>,
}

/// Per-step intermediates passed between the backward stages.
#[derive(Default)]
struct StepGrad {
    dx_prior: Vec<f64>,
    d_innovation: Vec<f64>,
    dh_pxz: Vec<f64>,
    dh_pzz: Vec<f64>,
    dh_fuse: Vec<f64>,
    d_weights: Vec<f64>,
    d_images: Vec<Vec<f64>>,
    dh_s: Vec<f64>,
    dh_w: Vec<f64>,
    d_prev_post: Vec<f64>,
}

/// Backpropagation through time.
///
/// `d_posteriors[t]` is the loss gradient w.r.t. the posterior of step `t`.
/// Parameter gradients are added into `grads` (a buffer laid out like
/// `net.tape`).
pub fn backward(
    net: &CkfNet,
    model: &StateSpaceModel,
    trace: &Trace,
    d_posteriors: &[Vector],
    grads: &mut [f64],
) {
    backward_batch(net, model, &[trace], &[d_posteriors], grads);
}

/// [`backward`] over equal-length traces in lockstep; parameter gradients of
/// all sequences are summed into `grads`.
pub fn backward_batch(
    net: &CkfNet,
    model: &StateSpaceModel,
    traces: &[&Trace],
    d_posteriors: &[&[Vector]],
    grads: &mut [f64],
) {
    let p = &net.params;
    let (layout, values) = (net.layout(), net.values());
    let Architecture { n, m, hidden_dim: hd } = p.arch;
    let nb = traces.len();
    assert_eq!(d_posteriors.len(), nb, "one gradient sequence per trace");
    assert_eq!(grads.len(), layout.len(), "gradient buffer layout mismatch");
    let steps = traces.first().map_or(0, |t| t.steps.len());
    assert!(traces.iter().all(|t| t.steps.len() == steps), "lockstep traces must share a length");

    let mut seq: Vec<SequenceGrad> = d_posteriors
        .iter()
        .map(|dp| {
            assert_eq!(dp.len(), steps, "one gradient per step required");
            let mut d_post = vec![vec![0.0; n]; steps + 1];
            for (t, d) in dp.iter().enumerate() {
                add_vec(&mut d_post[t + 1], d);
            }
            SequenceGrad {
                d_post,
                d_prior: vec![vec![0.0; n]; steps + 1],
                dh_s: vec![0.0; hd],
                dh_w: vec![0.0; hd],
                dh_fuse: vec![0.0; hd],
                dh_pxz: vec![0.0; hd],
                dh_pzz: vec![0.0; hd],
            }
        })
        .collect();

    for t in (0..steps).rev() {
        let step = |b: usize| -> &(PredictOutput, UpdateOutput) { &traces[b].steps[t] };
        let mut sg: Vec<StepGrad> = (0..nb).map(|_| StepGrad::default()).collect();

        // posterior = prior + P_xz P_zz^{-1} innovation; heads of P_xz, P_zz
        for b in 0..nb {
            let (_, upd) = step(b);
            let s = &mut seq[b];
            let dx_post = std::mem::take(&mut s.d_post[t + 1]);
            let mut dx_prior = std::mem::take(&mut s.d_prior[t + 1]);
            add_vec(&mut dx_prior, &dx_post);
            let d_innovation = upd.gain.tr_mul_vec(&dx_post).into_vec();
            let y = &upd.solved_innovation;
            let d_cross = Matrix::from_fn(n, m, |i, j| dx_post[i] * y[j]);
            let d_pzz = Matrix::from_fn(m, m, |i, j| -d_innovation[i] * y[j]);

            // P_zz = L L^T
            let l_zz = upd.innovation_factor.lower();
            let d_lzz = lower_mask(&d_pzz.add(&d_pzz.transpose()).matmul(l_zz));
            let d_raw_zz = spd_factor_backward(&upd.raw_innovation, m, &d_lzz);
            let mut dh_pzz = p.head_pzz.backward(layout, values, grads, &upd.gru_pzz.h_new, &d_raw_zz);
            add_vec(&mut dh_pzz, &s.dh_pzz);
            let mut dh_pxz = p.head_pxz.backward(layout, values, grads, &upd.gru_pxz.h_new, d_cross.as_slice());
            add_vec(&mut dh_pxz, &s.dh_pxz);
            sg[b] = StepGrad {
                dx_prior,
                d_innovation,
                dh_pxz,
                dh_pzz,
                ..StepGrad::default()
            };
        }

        let caches: Vec<&GruCache> = (0..nb).map(|b| &step(b).1.gru_pzz).collect();
        let dhs: Vec<&[f64]> = sg.iter().map(|g| g.dh_pzz.as_slice()).collect();
        let zz = p.gru_pzz.backward_batch(layout, values, grads, &caches, &dhs);
        let caches: Vec<&GruCache> = (0..nb).map(|b| &step(b).1.gru_pxz).collect();
        let dhs: Vec<&[f64]> = sg.iter().map(|g| g.dh_pxz.as_slice()).collect();
        let xz = p.gru_pxz.backward_batch(layout, values, grads, &caches, &dhs);

        for (b, ((d_in_zz, dh_prev_pzz), (d_in_xz, dh_prev_pxz))) in zz.into_iter().zip(xz).enumerate() {
            let (pred, upd) = step(b);
            let s = &mut seq[b];
            let g = &mut sg[b];
            s.dh_pzz = dh_prev_pzz;
            s.dh_pxz = dh_prev_pxz;

            // update input = [f1, f2, h_fuse]; f2 is data only
            let mut d_upd_in = d_in_zz;
            add_vec(&mut d_upd_in, &d_in_xz);
            let d_f1 = normalize_backward(&upd.f1, &d_upd_in[..m]);
            add_vec(&mut g.d_innovation, &d_f1);
            let mut dh_fuse = s.dh_fuse.clone();
            add_vec(&mut dh_fuse, &d_upd_in[2 * m..]);

            // innovation = z - z_hat, z_hat = sum w_k h(chi_k)
            let mut d_weights = vec![0.0; 2 * n];
            let mut d_upd_points = Vec::with_capacity(2 * n);
            for k in 0..2 * n {
                d_weights[k] -= dot(&upd.images[k], &g.d_innovation);
                let d_img: Vec<f64> = g.d_innovation.iter().map(|d| -pred.weights[k] * d).collect();
                let jac = model.measurement_jacobian(&upd.points[k]);
                d_upd_points.push(jac.tr_mul_vec(&d_img));
            }
            let mut d_factor = Matrix::zeros(n, n);
            spread_points_backward(&d_upd_points, &mut g.dx_prior, &mut d_factor);

            // S = chol(P + jitter)
            let d_cov = cholesky_backward(&pred.factor, &d_factor);

            // P = sum w_k d_k d_k^T + L_W L_W^T with d_k = xi_k - prior
            let mut d_images: Vec<Vec<f64>> = vec![vec![0.0; n]; 2 * n];
            for k in 0..2 * n {
                let dk = pred.images[k].sub(&pred.prior_mean);
                let g_dk = d_cov.mul_vec(&dk);
                d_weights[k] += dot(&dk, &g_dk);
                for i in 0..n {
                    let v = 2.0 * pred.weights[k] * g_dk[i];
                    d_images[k][i] += v;
                    g.dx_prior[i] -= v;
                }
            }
            let l_w = pred.process_factor.lower();
            let d_lw = lower_mask(&d_cov.scale(2.0).matmul(l_w));
            let d_raw_q = spd_factor_backward(&pred.raw_process, n, &d_lw);
            let dh = p.head_q.backward(layout, values, grads, &pred.gru_fuse.h_new, &d_raw_q);
            add_vec(&mut dh_fuse, &dh);

            // prior = sum w_k xi_k  (dx_prior is complete here)
            for k in 0..2 * n {
                d_weights[k] += dot(&pred.images[k], &g.dx_prior);
                axpy(pred.weights[k], &g.dx_prior, &mut d_images[k]);
            }
            g.dh_fuse = dh_fuse;
            g.d_weights = d_weights;
            g.d_images = d_images;
        }

        let caches: Vec<&GruCache> = (0..nb).map(|b| &step(b).0.gru_fuse).collect();
        let dhs: Vec<&[f64]> = sg.iter().map(|g| g.dh_fuse.as_slice()).collect();
        let fuse = p.gru_fuse.backward_batch(layout, values, grads, &caches, &dhs);

        for (b, (d_fuse_in, dh_prev_fuse)) in fuse.into_iter().enumerate() {
            let (pred, _) = step(b);
            let s = &mut seq[b];
            let g = &mut sg[b];
            s.dh_fuse = dh_prev_fuse;

            // xi_k = f(chi_k), chi_k = posterior_{t-1} ± sqrt(n) L_s e_k
            let d_points: Vec<Vector> = (0..2 * n)
                .map(|k| model.transition_jacobian(&pred.points[k]).tr_mul_vec(&g.d_images[k]))
                .collect();
            let mut d_prev_post = vec![0.0; n];
            let mut d_spread = Matrix::zeros(n, n);
            spread_points_backward(&d_points, &mut d_prev_post, &mut d_spread);

            // weights = softmax(head_w(h_w))
            let d_logits = softmax_backward(&pred.weights, &g.d_weights);
            let mut dh_w = p.head_w.backward(layout, values, grads, &pred.gru_w.h_new, &d_logits);
            add_vec(&mut dh_w, &s.dh_w);
            add_vec(&mut dh_w, &d_fuse_in[hd..]);

            let d_raw_s = spd_factor_backward(&pred.raw_spread, n, &d_spread);
            let mut dh_s = p.head_s.backward(layout, values, grads, &pred.gru_s.h_new, &d_raw_s);
            add_vec(&mut dh_s, &s.dh_s);
            add_vec(&mut dh_s, &d_fuse_in[..hd]);
            g.dh_w = dh_w;
            g.dh_s = dh_s;
            g.d_prev_post = d_prev_post;
        }

        let caches: Vec<&GruCache> = (0..nb).map(|b| &step(b).0.gru_w).collect();
        let dhs: Vec<&[f64]> = sg.iter().map(|g| g.dh_w.as_slice()).collect();
        let w = p.gru_w.backward_batch(layout, values, grads, &caches, &dhs);
        let caches: Vec<&GruCache> = (0..nb).map(|b| &step(b).0.gru_s).collect();
        let dhs: Vec<&[f64]> = sg.iter().map(|g| g.dh_s.as_slice()).collect();
        let sp = p.gru_s.backward_batch(layout, values, grads, &caches, &dhs);

        for (b, ((d_in_w, dh_prev_w), (d_in_s, dh_prev_s))) in w.into_iter().zip(sp).enumerate() {
            let (pred, _) = step(b);
            let s = &mut seq[b];
            let g = &mut sg[b];
            s.dh_w = dh_prev_w;
            s.dh_s = dh_prev_s;

            // prediction input = [f3, f4]
            let mut d_pred_in = d_in_s;
            add_vec(&mut d_pred_in, &d_in_w);
            let d_f3 = normalize_backward(&pred.f3, &d_pred_in[..n]);
            let d_f4 = normalize_backward(&pred.f4, &d_pred_in[n..]);
            add_vec(&mut g.d_prev_post, &d_f3);
            add_vec(&mut g.d_prev_post, &d_f4);
            add_vec(&mut s.d_post[t], &g.d_prev_post);
            sub_vec(&mut s.d_prior[t], &d_f3);
            sub_vec(&mut s.d_post[t.saturating_sub(1)], &d_f4);
        }
    }
}
