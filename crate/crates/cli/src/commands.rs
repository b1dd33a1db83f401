use std::cell::RefCell;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use ckfnet::eval::{
    csv_file_name, evaluate, horizon_sweep, noise_sweep, results_csv, time_filters, timing_csv, Algorithm,
    EvalResult, Scenario, HORIZONS, NOISE_SCALES, TIMING_WARMUP,
};
use ckfnet::filter::CkfNet;
use ckfnet::persist::{load_weights, read_trajectories, save_weights, write_text, write_trajectories};
use ckfnet::ssm::StateSpaceModel;
use ckfnet::training::{
    architecture, build_model, generate_dataset, generate_split, load_checkpoint, loss_history_table,
    save_checkpoint, train_epochs, Dataset, Split, TrainState, TrainingConfig,
};

use crate::manifest::Manifest;
use crate::{Common, Verb};

/// Environment variable that replaces the configured base seed.
pub const SEED_ENV: &str = "CKFNET_SEED";

/// Minimum number of timed trajectories per algorithm in `bench`.
const BENCH_TRAJECTORIES: usize = 50;

pub enum Failure {
    /// Invalid invocation, exit code 2.
    Usage(String),
    /// Anything that went wrong after the invocation was accepted, exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

struct RunContext {
    config: TrainingConfig,
    out: PathBuf,
    manifest: Manifest,
}

fn split_override(raw: &str) -> Result<(String, String), Failure> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("override `{raw}` is not of the form key=value")))?;
    let k = k.trim();
    if !TrainingConfig::KEYS.contains(&k) {
        return Err(Failure::Usage(format!("unknown config key `{k}` in --set {raw}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn prepare(verb: &'static str, common: Common) -> Result<RunContext, Failure> {
    let overrides = common
        .overrides
        .iter()
        .map(|o| split_override(o))
        .collect::<Result<Vec<_>, _>>()?;
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| Failure::Usage(format!("{SEED_ENV}={s} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    if common.threads == Some(0) {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }

    let mut config = match &common.config {
        Some(path) => TrainingConfig::load(path).map_err(|e| anyhow!("{}: {e}", path.display()))?,
        None => TrainingConfig::default(),
    };
    for (k, v) in &overrides {
        config
            .apply_override(k, v)
            .map_err(|e| Failure::Usage(format!("--set {k}={v}: {e}")))?;
    }
    if let Some(seed) = env_seed {
        config.base_seed = seed;
    }

    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("cannot size the worker pool: {e}"))?;
    }
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("cannot create output directory {}", common.out.display()))?;

    let manifest = Manifest::new(verb, common.config, overrides, env_seed, rayon::current_num_threads());
    Ok(RunContext {
        config,
        out: common.out,
        manifest,
    })
}

pub fn run(verb: Verb) -> Result<(), Failure> {
    match verb {
        Verb::GenData { common } => {
            let mut ctx = prepare("gen-data", common)?;
            gen_data(&mut ctx)?;
            finish(ctx)
        }
        Verb::Train { common, data, resume } => {
            let mut ctx = prepare("train", common)?;
            train(&mut ctx, data.as_deref(), resume)?;
            finish(ctx)
        }
        Verb::Eval { common, weights, data } => {
            let mut ctx = prepare("eval", common)?;
            eval(&mut ctx, weights, data.as_deref())?;
            finish(ctx)
        }
        Verb::Bench { common, weights } => {
            let mut ctx = prepare("bench", common)?;
            bench(&mut ctx, weights)?;
            finish(ctx)
        }
        Verb::Horizon { common, weights } => {
            let mut ctx = prepare("horizon", common)?;
            horizon(&mut ctx, weights)?;
            finish(ctx)
        }
        Verb::NoiseSweep { common, weights } => {
            if !(weights.len() <= 1 || weights.len() == NOISE_SCALES.len()) {
                return Err(Failure::Usage(format!(
                    "noise-sweep takes one --weights file or {} (one per scale)",
                    NOISE_SCALES.len()
                )));
            }
            let mut ctx = prepare("noise-sweep", common)?;
            sweep_noise(&mut ctx, weights)?;
            finish(ctx)
        }
    }
}

fn finish(ctx: RunContext) -> Result<(), Failure> {
    let path = ctx.manifest.write(&ctx.out, &ctx.config)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

fn gen_data(ctx: &mut RunContext) -> Result<()> {
    let model = build_model(&ctx.config);
    let bundle = generate_dataset(&ctx.config, &model)?;
    for data in [&bundle.train, &bundle.val, &bundle.test] {
        let path = split_file(&ctx.out, data.split);
        write_trajectories(&path, &data.trajectories, &data.augmentation)?;
        println!("{}: {} trajectories -> {}", data.split.name(), data.len(), path.display());
        ctx.manifest.artifact(&path);
        ctx.manifest.summary(data.split.name(), json!(data.len()));
    }
    Ok(())
}

/// Reads one split written by `gen-data` and checks it against the config.
fn load_split(ctx: &mut RunContext, dir: &Path, split: Split, steps: usize) -> Result<Dataset> {
    let path = split_file(dir, split);
    let (trajectories, augmentation) = read_trajectories(&path)?;
    if trajectories.is_empty() {
        bail!("{} holds no trajectories", path.display());
    }
    for t in &trajectories {
        if t.model_id != ctx.config.model_id {
            bail!(
                "{}: trajectory {} was simulated with model `{}` but the config selects `{}`",
                path.display(),
                t.traj_id,
                t.model_id,
                ctx.config.model_id
            );
        }
        if t.len() != steps {
            bail!("{}: trajectory {} has {} steps, expected {steps}", path.display(), t.traj_id, t.len());
        }
    }
    ctx.manifest.input(&path);
    Ok(Dataset {
        split,
        trajectories,
        augmentation,
    })
}

fn train(ctx: &mut RunContext, data: Option<&Path>, resume: bool) -> Result<()> {
    let config = ctx.config.clone();
    let model = build_model(&config);
    let (train_set, val_set) = match data {
        Some(dir) => (
            load_split(ctx, dir, Split::Train, config.steps)?,
            load_split(ctx, dir, Split::Val, config.steps)?,
        ),
        None => (
            generate_split(&config, &model, Split::Train, config.n_train, config.steps)?,
            generate_split(&config, &model, Split::Val, config.n_val, config.steps)?,
        ),
    };

    let checkpoint = ctx.out.join("checkpoint.txt");
    let mut state = if resume {
        let state = load_checkpoint(&checkpoint, &config)
            .with_context(|| format!("cannot resume from {}", checkpoint.display()))?;
        println!("resuming after epoch {}", state.epoch);
        state
    } else {
        TrainState::new(&config, &model)
    };

    let save_error = RefCell::new(None);
    train_epochs(&config, &model, &train_set, &val_set, &mut state, config.epochs, |s| {
        let last = s.history.last().expect("epoch recorded");
        println!(
            "epoch {:>3}  train {:.6e}  val {:.6e}{}",
            last.epoch,
            last.train_loss,
            last.val_loss,
            if s.best_epoch == last.epoch { "  *" } else { "" }
        );
        if let Err(e) = save_checkpoint(&checkpoint, &config, s) {
            save_error.borrow_mut().get_or_insert(e);
        }
    })?;
    if let Some(e) = save_error.into_inner() {
        return Err(e.into());
    }

    let weights = ctx.out.join("weights.txt");
    let meta = [
        ("model_id", config.model_id.clone()),
        ("config_fingerprint", config.fingerprint()),
        ("best_epoch", state.best_epoch.to_string()),
    ];
    save_weights(&weights, &state.best_net(), &meta)?;
    let history = ctx.out.join("loss_history.txt");
    write_text(&history, &loss_history_table(&state.history))?;
    if !checkpoint.exists() {
        save_checkpoint(&checkpoint, &config, &state)?;
    }
    println!(
        "best validation loss {:.6e} at epoch {} -> {}",
        state.best_val_loss,
        state.best_epoch,
        weights.display()
    );

    ctx.manifest.artifact(&weights);
    ctx.manifest.artifact(&history);
    ctx.manifest.artifact(&checkpoint);
    ctx.manifest.summary("best_epoch", json!(state.best_epoch));
    ctx.manifest.summary("best_val_loss", json!(state.best_val_loss));
    ctx.manifest.summary(
        "history",
        json!(state
            .history
            .iter()
            .map(|r| json!({ "epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss }))
            .collect::<Vec<_>>()),
    );
    Ok(())
}

/// Loads a weights file and checks it fits the configured model.
fn load_net(ctx: &mut RunContext, path: &Path, model: &StateSpaceModel) -> Result<CkfNet> {
    if !path.exists() {
        bail!("weights file {} does not exist (run `ckfnet train` first or pass --weights)", path.display());
    }
    let (net, _) = load_weights(path).with_context(|| format!("cannot load weights from {}", path.display()))?;
    let expected = architecture(&ctx.config, model);
    if net.arch() != expected {
        bail!(
            "{} holds a network for {:?}, but the config needs {:?}",
            path.display(),
            net.arch(),
            expected
        );
    }
    ctx.manifest.input(path);
    Ok(net)
}

fn weights_or_default(ctx: &RunContext, weights: Option<PathBuf>) -> PathBuf {
    weights.unwrap_or_else(|| ctx.out.join("weights.txt"))
}

fn write_csv(ctx: &mut RunContext, sweep: &str, text: &str) -> Result<PathBuf> {
    let path = ctx.out.join(csv_file_name(sweep));
    write_text(&path, text)?;
    ctx.manifest.artifact(&path);
    Ok(path)
}

fn report(ctx: &mut RunContext, results: &[EvalResult]) {
    for r in results {
        println!(
            "{:<12} T={:<4} noise x{:<4} {:<10} AMSE {:.6}",
            r.scenario.model_id,
            r.scenario.steps,
            r.scenario.noise_scale,
            r.algorithm.tag(),
            r.amse
        );
    }
    ctx.manifest.summary(
        "amse",
        json!(results
            .iter()
            .map(|r| json!({
                "algorithm": r.algorithm.tag(),
                "T": r.scenario.steps,
                "noise_scale": r.scenario.noise_scale,
                "amse": r.amse,
            }))
            .collect::<Vec<_>>()),
    );
}

fn eval(ctx: &mut RunContext, weights: Option<PathBuf>, data: Option<&Path>) -> Result<()> {
    let model = build_model(&ctx.config);
    let path = weights_or_default(ctx, weights);
    let net = load_net(ctx, &path, &model)?;
    let steps = ctx.config.steps;
    let test = match data {
        Some(dir) => load_split(ctx, dir, Split::Test, steps)?,
        None => generate_split(&ctx.config, &model, Split::Test, ctx.config.n_test, steps)?,
    };
    let scenario = Scenario::new(&ctx.config.model_id, steps, ctx.config.noise_scale);
    let results = evaluate(
        &[Algorithm::Ckf, Algorithm::KfOracle, Algorithm::CkfNet],
        Some(&net),
        &model,
        &test.trajectories,
        &scenario,
    )?;
    report(ctx, &results);
    let csv = write_csv(ctx, "eval", &results_csv(&results, true))?;
    println!("results -> {}", csv.display());
    Ok(())
}

fn bench(ctx: &mut RunContext, weights: Option<PathBuf>) -> Result<()> {
    let model = build_model(&ctx.config);
    let path = weights_or_default(ctx, weights);
    let net = load_net(ctx, &path, &model)?;
    let count = ctx.config.n_test.max(BENCH_TRAJECTORIES) + TIMING_WARMUP;
    let trajs = generate_split(&ctx.config, &model, Split::Test, count, ctx.config.steps)?;
    let rows = time_filters(&net, &model, &trajs.trajectories)?;
    for r in &rows {
        println!(
            "{:<10} {:.6e} s/trajectory (std {:.2e}, {} runs)",
            r.algorithm.tag(),
            r.mean_seconds,
            r.std_seconds,
            r.trajectories
        );
    }
    ctx.manifest.summary(
        "seconds_per_trajectory",
        json!(rows
            .iter()
            .map(|r| json!({ "algorithm": r.algorithm.tag(), "mean": r.mean_seconds, "std": r.std_seconds }))
            .collect::<Vec<_>>()),
    );
    let scenario = Scenario::new(&ctx.config.model_id, ctx.config.steps, ctx.config.noise_scale);
    let csv = write_csv(ctx, "bench", &timing_csv(&rows, &scenario))?;
    println!("timings -> {}", csv.display());
    Ok(())
}

fn horizon(ctx: &mut RunContext, weights: Option<PathBuf>) -> Result<()> {
    let model = build_model(&ctx.config);
    let path = weights_or_default(ctx, weights);
    let net = load_net(ctx, &path, &model)?;
    let results = horizon_sweep(&net, &ctx.config, &HORIZONS)?;
    report(ctx, &results);
    let csv = write_csv(ctx, "horizon", &results_csv(&results, true))?;
    println!("results -> {}", csv.display());
    Ok(())
}

fn sweep_noise(ctx: &mut RunContext, weights: Vec<PathBuf>) -> Result<()> {
    let model = build_model(&ctx.config);
    let paths = if weights.is_empty() { vec![weights_or_default(ctx, None)] } else { weights };
    let nets = paths
        .iter()
        .map(|p| load_net(ctx, p, &model))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CkfNet> = nets.iter().collect();
    let results = noise_sweep(&refs, &ctx.config, &NOISE_SCALES)?;
    report(ctx, &results);
    let csv = write_csv(ctx, "noise_sweep", &results_csv(&results, true))?;
    println!("results -> {}", csv.display());
    Ok(())
}
