use ckfnet::filter::{backward, backward_batch, ckfnet_run, forward, forward_batch, run_batch, CkfNetParams};
use ckfnet::linalg::Vector;
use ckfnet::training::{
    build_model, data_gradient, generate_dataset, generate_split, load_checkpoint, save_checkpoint, train,
    train_epochs, Split, TrainError, TrainState, TrainingConfig,
};

fn tiny() -> TrainingConfig {
    TrainingConfig {
        steps: 12,
        n_train: 10,
        n_val: 3,
        n_test: 3,
        hidden_dim: 5,
        batch_size: 4,
        epochs: 4,
        ..TrainingConfig::default()
    }
}

#[test]
fn resumed_training_matches_uninterrupted_bit_for_bit() {
    let c = tiny();
    let model = build_model(&c);
    let data = generate_dataset(&c, &model).unwrap();
    let straight = train(&c, &model, &data.train, &data.val).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.txt");
    let mut first = TrainState::new(&c, &model);
    train_epochs(&c, &model, &data.train, &data.val, &mut first, 2, |_| {}).unwrap();
    save_checkpoint(&path, &c, &first).unwrap();

    let mut resumed = load_checkpoint(&path, &c).unwrap();
    assert_eq!(resumed, first, "checkpoint round trip is exact");
    train_epochs(&c, &model, &data.train, &data.val, &mut resumed, c.epochs, |_| {}).unwrap();
    assert_eq!(resumed.net.tape.values, straight.net.tape.values);
    assert_eq!(resumed.best_params, straight.best_params);
    assert_eq!(resumed.optimizer.first_moment, straight.optimizer.first_moment);
    assert_eq!(resumed.optimizer.second_moment, straight.optimizer.second_moment);
    assert_eq!(resumed.history, straight.history);
}

#[test]
fn checkpoint_for_another_config_is_refused() {
    let c = tiny();
    let model = build_model(&c);
    let state = TrainState::new(&c, &model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.txt");
    save_checkpoint(&path, &c, &state).unwrap();
    let other = TrainingConfig { lr: 5e-4, ..c };
    assert!(matches!(load_checkpoint(&path, &other), Err(TrainError::FingerprintMismatch { .. })));
}

#[test]
fn best_checkpoint_tracks_minimum_validation_loss() {
    let c = tiny();
    let model = build_model(&c);
    let data = generate_dataset(&c, &model).unwrap();
    let state = train(&c, &model, &data.train, &data.val).unwrap();
    let best = state.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(state.best_val_loss, best);
    assert_eq!(state.history[state.best_epoch - 1].val_loss, best);
    let loss = ckfnet::training::dataset_loss(&state.best_net(), &model, &data.val, c.lambda).unwrap();
    assert_eq!(loss, best);
}

/// One optimizer step on a batch with some tensors frozen.
fn step_with_frozen(freeze_prediction: bool) -> (Vec<bool>, Vec<bool>) {
    let c = tiny();
    let model = build_model(&c);
    let data = generate_dataset(&c, &model).unwrap();
    let mut state = TrainState::new(&c, &model);
    let layout = state.net.layout().clone();
    state
        .optimizer
        .set_lr_scale(&layout, |name| CkfNetParams::is_prediction_tensor(name) == freeze_prediction, 0.0);
    let before = state.net.tape.values.clone();
    let trajs: Vec<_> = data.train.trajectories.iter().take(4).collect();
    let (_, grads) = data_gradient(&state.net, &model, &trajs).unwrap();
    state.net.tape.grads.copy_from_slice(&grads);
    state.optimizer.adam_step(&mut state.net.tape, c.lambda);

    let mut prediction_moved = Vec::new();
    let mut update_moved = Vec::new();
    for spec in layout.specs() {
        let moved = spec.range().any(|i| state.net.tape.values[i] != before[i]);
        if CkfNetParams::is_prediction_tensor(&spec.name) {
            prediction_moved.push(moved);
        } else {
            update_moved.push(moved);
        }
    }
    (prediction_moved, update_moved)
}

#[test]
fn freezing_one_phase_still_trains_the_other() {
    let (pred, upd) = step_with_frozen(false);
    assert!(pred.iter().all(|m| *m), "prediction tensors move while update tensors are frozen");
    assert!(upd.iter().all(|m| !*m));

    let (pred, upd) = step_with_frozen(true);
    assert!(pred.iter().all(|m| !*m));
    assert!(upd.iter().all(|m| *m), "update tensors move while prediction tensors are frozen");
}

#[test]
fn regularization_alone_shrinks_parameters() {
    let c = tiny();
    let model = build_model(&c);
    let mut state = TrainState::new(&c, &model);
    let before = state.net.tape.values.clone();
    state.net.tape.grads.iter_mut().for_each(|g| *g = 0.0);
    state.optimizer.adam_step(&mut state.net.tape, 0.5);
    for (a, b) in state.net.tape.values.iter().zip(&before) {
        if *b == 0.0 {
            assert_eq!(*a, 0.0);
        } else {
            assert!((a - b) * b < 0.0, "{b} moved away from zero to {a}");
        }
    }
}

#[test]
fn runaway_learning_rate_reports_non_finite_loss() {
    let c = TrainingConfig {
        lr: 1e6,
        clip_norm: 1e12,
        epochs: 6,
        ..tiny()
    };
    let model = build_model(&c);
    let data = generate_dataset(&c, &model).unwrap();
    match train(&c, &model, &data.train, &data.val) {
        Err(TrainError::NonFiniteLoss { epoch, traj_ids, .. }) => {
            assert!(epoch >= 1);
            assert!(!traj_ids.is_empty());
        }
        Err(other) => panic!("unexpected error {other}"),
        Ok(state) => panic!("training stayed finite: {:?}", state.history),
    }
}

#[test]
fn lockstep_batch_matches_single_sequences() {
    let c = TrainingConfig { hidden_dim: 7, ..tiny() };
    let model = build_model(&c);
    let data = generate_split(&c, &model, Split::Train, 5, c.steps).unwrap();
    let net = TrainState::new(&c, &model).net;
    let x0 = Vector::zeros(model.n());
    let zs: Vec<&[Vector]> = data.trajectories.iter().map(|t| t.measurements.as_slice()).collect();
    let x0s: Vec<&Vector> = zs.iter().map(|_| &x0).collect();

    let batched = run_batch(&net, &model, &zs, &x0s).unwrap();
    for (b, z) in batched.iter().zip(&zs) {
        let single = ckfnet_run(&net, &model, z, &x0).unwrap();
        assert_eq!(b, &single, "posteriors are bit-identical");
    }

    let traces = forward_batch(&net, &model, &zs, &x0s).unwrap();
    let upstream: Vec<Vec<Vector>> = traces
        .iter()
        .zip(&data.trajectories)
        .map(|(tr, t)| tr.posteriors().iter().zip(&t.states).map(|(p, s)| p.sub(s)).collect())
        .collect();
    let mut batch_grads = vec![0.0; net.tape.values.len()];
    let trace_refs: Vec<_> = traces.iter().collect();
    let up_refs: Vec<&[Vector]> = upstream.iter().map(|u| u.as_slice()).collect();
    backward_batch(&net, &model, &trace_refs, &up_refs, &mut batch_grads);

    let mut summed = vec![0.0; net.tape.values.len()];
    for (z, up) in zs.iter().zip(&upstream) {
        let trace = forward(&net, &model, z, &x0).unwrap();
        let mut g = vec![0.0; net.tape.values.len()];
        backward(&net, &model, &trace, up, &mut g);
        summed.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
    }
    let scale = summed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in batch_grads.iter().zip(&summed) {
        assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
    }
}
