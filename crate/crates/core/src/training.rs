//! Dataset generation, the regularized MSE objective, and the training loop.
//!
//! Seeds are plain offsets from `base_seed`, so any single trajectory, the
//! network initialization and every epoch shuffle can be regenerated in
//! isolation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::mean_sq_error;
use crate::filter::{backward_batch, forward_batch, Architecture, CkfNet};
use crate::linalg::{spd_perturb, LinalgError, Vector};
use crate::neural::{AdamConfig, OptimizerState, ParamTape};
use crate::persist::{
    fmt_f64, pull_tensors, push_architecture, push_tensors, read_architecture, write_text, AugmentationRecord,
    PersistError, TensorFile,
};
use crate::ssm::{linear_nav_model, nonlinear_nav_model, simulate_trajectory, RngStream, StateSpaceModel, Trajectory};

/// Sequences advanced together through the batched kernels.
pub const LOCKSTEP_WIDTH: usize = 8;

pub const VAL_SEED_OFFSET: u64 = 1 << 20;
pub const TEST_SEED_OFFSET: u64 = 2 << 20;
pub const INIT_SEED_OFFSET: u64 = 3 << 20;
pub const SHUFFLE_SEED_OFFSET: u64 = 4 << 20;

pub const CHECKPOINT_HEADER: &str = "# ckfnet checkpoint v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (trajectories {traj_ids:?}); \
         training diverged, try a lower learning rate"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        traj_ids: Vec<u64>,
    },
    #[error("estimate/truth length mismatch: {estimates} vs {truths}")]
    LengthMismatch { estimates: usize, truths: usize },
    #[error("checkpoint was written for a different config (fingerprint {found}, expected {expected})")]
    FingerprintMismatch { found: String, expected: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

/// Every knob of a training run. Serialized as TOML; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// `linear_full`, `linear_partial` or `nonlinear`.
    pub model_id: String,
    /// Trajectory length in steps.
    #[serde(rename = "T")]
    pub steps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Prior variance of the parameters; must satisfy `lambda * sigma_theta_sq = 1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_theta_sq: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub base_seed: u64,
    pub augment: bool,
    pub augment_range: f64,
    pub dt: f64,
    pub q: f64,
    pub r: f64,
    /// Multiplier on both generating noise covariances.
    pub noise_scale: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            model_id: "linear_full".into(),
            steps: 100,
            n_train: 256,
            n_val: 32,
            n_test: 64,
            hidden_dim: 128,
            lr: 1e-3,
            lambda: 1e-4,
            sigma_theta_sq: Some(1e4),
            batch_size: 8,
            epochs: 50,
            clip_norm: 1.0,
            base_seed: 20240601,
            augment: false,
            augment_range: 0.2,
            dt: 1.0,
            q: 0.1,
            r: 0.1,
            noise_scale: 1.0,
        }
    }
}

impl TrainingConfig {
    pub const KEYS: [&'static str; 19] = [
        "model_id",
        "T",
        "n_train",
        "n_val",
        "n_test",
        "hidden_dim",
        "lr",
        "lambda",
        "sigma_theta_sq",
        "batch_size",
        "epochs",
        "clip_norm",
        "base_seed",
        "augment",
        "augment_range",
        "dt",
        "q",
        "r",
        "noise_scale",
    ];

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if let Some(key) = table.keys().find(|k| !Self::KEYS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        let config: Self = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `key=value` override; the value is read as a TOML literal,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !Self::KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        let mut table: toml::Table = self.to_toml_string().parse().expect("own serialization parses");
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        // integers are accepted where floats are expected
        let parsed = match (table.get(key), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key.to_string(), parsed);
        let updated: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(format!("override {key}={value}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if ![self.steps, self.n_train, self.n_val, self.n_test, self.hidden_dim, self.batch_size, self.epochs]
            .iter()
            .all(|c| *c > 0)
        {
            return bad("T, trajectory counts, hidden_dim, batch_size and epochs must be positive");
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lr and lambda must be finite and non-negative");
        }
        if let Some(s) = self.sigma_theta_sq {
            if (self.lambda * s - 1.0).abs() > 1e-12 {
                return bad("lambda * sigma_theta_sq must equal 1");
            }
        }
        if !(0.0..1.0).contains(&self.augment_range) {
            return bad("augment_range must lie in [0, 1)");
        }
        if !(self.dt > 0.0 && self.q > 0.0 && self.r > 0.0 && self.noise_scale > 0.0) {
            return bad("dt, q, r and noise_scale must be positive");
        }
        match self.model_id.as_str() {
            "linear_full" | "linear_partial" => Ok(()),
            "nonlinear" if self.dt == 1.0 => Ok(()),
            "nonlinear" => bad("the nonlinear model uses a unit time step (dt = 1)"),
            other => Err(ConfigError::Invalid(format!("unknown model_id `{other}`"))),
        }
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// The model with its nominal (unscaled) noise covariances.
pub fn nominal_model(config: &TrainingConfig) -> StateSpaceModel {
    match config.model_id.as_str() {
        "linear_full" => linear_nav_model(config.dt, config.q, config.r, false),
        "linear_partial" => linear_nav_model(config.dt, config.q, config.r, true),
        "nonlinear" => nonlinear_nav_model(config.q, config.r),
        other => panic!("unvalidated model_id {other}"),
    }
}

/// The data-generating model: nominal noise times `noise_scale`.
pub fn build_model(config: &TrainingConfig) -> StateSpaceModel {
    let model = nominal_model(config);
    if config.noise_scale == 1.0 {
        model
    } else {
        model.scaled_noise(config.noise_scale)
    }
}

pub fn architecture(config: &TrainingConfig, model: &StateSpaceModel) -> Architecture {
    Architecture {
        n: model.n(),
        m: model.m(),
        hidden_dim: config.hidden_dim,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => VAL_SEED_OFFSET,
            Split::Test => TEST_SEED_OFFSET,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub trajectories: Vec<Trajectory>,
    pub augmentation: Vec<AugmentationRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Simulates trajectory `index` of `split`, seeded `base_seed + offset + index`
/// and started from the origin.
pub fn generate_trajectory(
    config: &TrainingConfig,
    model: &StateSpaceModel,
    split: Split,
    index: u64,
    steps: usize,
) -> Result<(Trajectory, AugmentationRecord), TrainError> {
    let seed = config.base_seed.wrapping_add(split.seed_offset()).wrapping_add(index);
    let mut rng = RngStream::new(seed);
    let (n, m) = (model.n(), model.m());
    let (traj_model, aug) = if config.augment && split == Split::Train {
        let (lo, hi) = (1.0 - config.augment_range, 1.0 + config.augment_range);
        let w_factors: Vec<f64> = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        let v_factors: Vec<f64> = (0..m).map(|_| rng.uniform_range(lo, hi)).collect();
        let w = spd_perturb(model.process_noise(), &w_factors)?;
        let v = spd_perturb(model.measurement_noise(), &v_factors)?;
        (model.with_noise(w, v), AugmentationRecord { w_factors, v_factors })
    } else {
        (model.clone(), AugmentationRecord::identity(n, m))
    };
    let traj = simulate_trajectory(&traj_model, &Vector::zeros(n), steps, &mut rng, index)?;
    Ok((traj, aug))
}

pub fn generate_split(
    config: &TrainingConfig,
    model: &StateSpaceModel,
    split: Split,
    count: usize,
    steps: usize,
) -> Result<Dataset, TrainError> {
    let mut trajectories = Vec::with_capacity(count);
    let mut augmentation = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let (t, a) = generate_trajectory(config, model, split, i, steps)?;
        trajectories.push(t);
        augmentation.push(a);
    }
    Ok(Dataset {
        split,
        trajectories,
        augmentation,
    })
}

pub fn generate_dataset(config: &TrainingConfig, model: &StateSpaceModel) -> Result<DatasetBundle, TrainError> {
    Ok(DatasetBundle {
        train: generate_split(config, model, Split::Train, config.n_train, config.steps)?,
        val: generate_split(config, model, Split::Val, config.n_val, config.steps)?,
        test: generate_split(config, model, Split::Test, config.n_test, config.steps)?,
    })
}

/// `(1/T) sum_i ||x_hat_i - x_i||^2 + lambda * ||params||^2`.
pub fn sequence_loss(
    estimates: &[Vector],
    truths: &[Vector],
    params_norm_sq: f64,
    lambda: f64,
) -> Result<f64, TrainError> {
    if estimates.len() != truths.len() || truths.is_empty() {
        return Err(TrainError::LengthMismatch {
            estimates: estimates.len(),
            truths: truths.len(),
        });
    }
    Ok(mean_sq_error(estimates, truths) + lambda * params_norm_sq)
}

/// Scales the gradients to global norm `max_norm` when they exceed it;
/// returns the norm before clipping.
pub fn clip_gradients(tape: &mut ParamTape, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip norm must be positive");
    let norm = tape.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        tape.grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Data-term losses and the summed data-term gradient of a set of equal
/// length trajectories. Lockstep groups run concurrently into private
/// buffers that are merged in group order.
pub fn data_gradient(
    net: &CkfNet,
    model: &StateSpaceModel,
    trajs: &[&Trajectory],
) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    let x0 = Vector::zeros(net.arch().n);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>), LinalgError>> = trajs
        .par_chunks(LOCKSTEP_WIDTH)
        .map(|group| {
            let zs: Vec<&[Vector]> = group.iter().map(|t| t.measurements.as_slice()).collect();
            let x0s = vec![&x0; group.len()];
            let traces = forward_batch(net, model, &zs, &x0s)?;
            let mut losses = Vec::with_capacity(group.len());
            let mut d_posts = Vec::with_capacity(group.len());
            for (trace, traj) in traces.iter().zip(group) {
                let post = trace.posteriors();
                losses.push(mean_sq_error(&post, &traj.states));
                let scale = 2.0 / traj.len() as f64;
                d_posts.push(
                    post.iter()
                        .zip(&traj.states)
                        .map(|(p, s)| p.sub(s).scale(scale))
                        .collect::<Vec<Vector>>(),
                );
            }
            let mut grads = vec![0.0; net.layout().len()];
            let trace_refs: Vec<_> = traces.iter().collect();
            let d_refs: Vec<&[Vector]> = d_posts.iter().map(|d| d.as_slice()).collect();
            backward_batch(net, model, &trace_refs, &d_refs, &mut grads);
            Ok((losses, grads))
        })
        .collect();
    let mut losses = Vec::with_capacity(trajs.len());
    let mut total = vec![0.0; net.layout().len()];
    for part in parts {
        let (l, g) = part?;
        losses.extend(l);
        for (t, v) in total.iter_mut().zip(&g) {
            *t += v;
        }
    }
    Ok((losses, total))
}

/// Mean Eq.-16 loss of `net` over a dataset.
pub fn dataset_loss(net: &CkfNet, model: &StateSpaceModel, data: &Dataset, lambda: f64) -> Result<f64, LinalgError> {
    let mses = crate::eval::ckfnet_mses(net, model, &data.trajectories)?;
    Ok(crate::eval::amse(&mses) + lambda * net.tape.norm_sq())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub net: CkfNet,
    pub optimizer: OptimizerState,
    pub best_params: Vec<f64>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    /// Fresh network initialized from `base_seed + INIT_SEED_OFFSET`.
    pub fn new(config: &TrainingConfig, model: &StateSpaceModel) -> Self {
        let mut rng = RngStream::new(config.base_seed.wrapping_add(INIT_SEED_OFFSET));
        let net = CkfNet::initialized(architecture(config, model), &mut rng);
        let optimizer = OptimizerState::new(net.layout(), config.adam());
        Self {
            epoch: 0,
            best_params: net.tape.values.clone(),
            net,
            optimizer,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            history: Vec::new(),
        }
    }

    /// The network with the best validation loss seen so far.
    pub fn best_net(&self) -> CkfNet {
        let mut net = self.net.clone();
        net.tape.values.clone_from(&self.best_params);
        net
    }
}

/// Runs epochs until `state.epoch == until`; `on_epoch` sees the state after
/// every epoch.
pub fn train_epochs(
    config: &TrainingConfig,
    model: &StateSpaceModel,
    train: &Dataset,
    val: &Dataset,
    state: &mut TrainState,
    until: usize,
    mut on_epoch: impl FnMut(&TrainState),
) -> Result<(), TrainError> {
    assert!(!train.is_empty() && !val.is_empty(), "train and validation splits must be non-empty");
    while state.epoch < until {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngStream::new(config.base_seed.wrapping_add(SHUFFLE_SEED_OFFSET).wrapping_add(epoch as u64))
            .shuffle(&mut order);

        let mut mse_by_index = vec![0.0; train.len()];
        let mut reg_sum = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let trajs: Vec<&Trajectory> = idx.iter().map(|&i| &train.trajectories[i]).collect();
            let diverged = || TrainError::NonFiniteLoss {
                epoch,
                batch,
                traj_ids: trajs.iter().map(|t| t.traj_id).collect(),
            };
            let (losses, grads) = data_gradient(&state.net, model, &trajs).map_err(|_| diverged())?;
            let b = trajs.len() as f64;
            let reg = config.lambda * state.net.tape.norm_sq();
            let loss = losses.iter().sum::<f64>() / b + reg;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged());
            }
            for (&i, l) in idx.iter().zip(&losses) {
                mse_by_index[i] = *l;
            }
            reg_sum += reg * b;
            for (g, v) in state.net.tape.grads.iter_mut().zip(&grads) {
                *g = v / b;
            }
            clip_gradients(&mut state.net.tape, config.clip_norm);
            state.optimizer.adam_step(&mut state.net.tape, config.lambda);
        }

        let val_loss = dataset_loss(&state.net, model, val, config.lambda).map_err(|_| TrainError::NonFiniteLoss {
            epoch,
            batch: 0,
            traj_ids: val.trajectories.iter().map(|t| t.traj_id).collect(),
        })?;
        // summed in index order so the value does not depend on the shuffle
        let train_loss = (mse_by_index.iter().sum::<f64>() + reg_sum) / train.len() as f64;
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.best_params.clone_from(&state.net.tape.values);
            state.best_epoch = epoch;
        }
        state.history.push(LossRecord {
            epoch,
            train_loss,
            val_loss,
        });
        state.epoch = epoch;
        on_epoch(state);
    }
    Ok(())
}

/// Full training run from a fresh initialization.
pub fn train(
    config: &TrainingConfig,
    model: &StateSpaceModel,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainState, TrainError> {
    let mut state = TrainState::new(config, model);
    train_epochs(config, model, train, val, &mut state, config.epochs, |_| {})?;
    Ok(state)
}

/// Plain-text table with one `epoch train_loss val_loss` row per epoch.
pub fn loss_history_table(history: &[LossRecord]) -> String {
    let mut out = String::from("epoch train_loss val_loss\n");
    for r in history {
        out.push_str(&format!("{} {} {}\n", r.epoch, fmt_f64(r.train_loss), fmt_f64(r.val_loss)));
    }
    out
}

pub fn save_checkpoint(path: &Path, config: &TrainingConfig, state: &TrainState) -> Result<(), PersistError> {
    let mut file = TensorFile::new(CHECKPOINT_HEADER);
    push_architecture(&mut file, state.net.arch());
    file.push_meta("fingerprint", config.fingerprint());
    file.push_meta("epoch", state.epoch);
    file.push_meta("adam_step", state.optimizer.step);
    file.push_meta("best_val_loss", fmt_f64(state.best_val_loss));
    file.push_meta("best_epoch", state.best_epoch);
    for r in &state.history {
        file.push_meta(
            "history",
            format!("{} {} {}", r.epoch, fmt_f64(r.train_loss), fmt_f64(r.val_loss)),
        );
    }
    let net = &state.net;
    push_tensors(&mut file, net, "param/", net.values());
    push_tensors(&mut file, net, "adam_m/", &state.optimizer.first_moment);
    push_tensors(&mut file, net, "adam_v/", &state.optimizer.second_moment);
    push_tensors(&mut file, net, "best/", &state.best_params);
    write_text(path, &file.to_text())
}

pub fn load_checkpoint(path: &Path, config: &TrainingConfig) -> Result<TrainState, TrainError> {
    let file = TensorFile::read(path)?;
    let expected = config.fingerprint();
    let found = file.meta("fingerprint").unwrap_or_default().to_string();
    if found != expected {
        return Err(TrainError::FingerprintMismatch { found, expected });
    }
    let arch = read_architecture(&file)?;
    let mut net = CkfNet::zeros(arch);
    net.tape.values = pull_tensors(&file, &net, "param/", false)?;
    let mut optimizer = OptimizerState::new(net.layout(), config.adam());
    optimizer.step = file.parse_meta("adam_step")?;
    optimizer.first_moment = pull_tensors(&file, &net, "adam_m/", false)?;
    optimizer.second_moment = pull_tensors(&file, &net, "adam_v/", false)?;
    let best_params = pull_tensors(&file, &net, "best/", false)?;
    let mut history = Vec::new();
    for line in file.meta_all("history") {
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = (|| {
            Some(LossRecord {
                epoch: f.first()?.parse().ok()?,
                train_loss: f.get(1)?.parse().ok()?,
                val_loss: f.get(2)?.parse().ok()?,
            })
        })();
        history.push(parsed.ok_or_else(|| PersistError::Manifest("history".into()))?);
    }
    Ok(TrainState {
        epoch: file.parse_meta("epoch")?,
        net,
        optimizer,
        best_params,
        best_val_loss: file.parse_meta("best_val_loss")?,
        best_epoch: file.parse_meta("best_epoch")?,
        history,
    })
}
