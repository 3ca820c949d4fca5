use powerformer::data::Synthetic;
use powerformer::masks::MaskSpec;
use powerformer::model::{Checkpoint, ModelConfig, Powerformer};
use powerformer::tensor::Tensor;
use powerformer::training::{self, EarlyStopping, TrainConfig, TrainData, Verdict};
use powerformer::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(mask: MaskSpec) -> ModelConfig {
    ModelConfig {
        seq_len: 48,
        pred_len: 12,
        patch_len: 8,
        stride: 4,
        layers: 2,
        embed_width: 8,
        heads: 2,
        ff_width: 16,
        dropout: 0.0,
        head_dropout: 0.0,
        mask,
        banded_tau: None,
        seed: 5,
    }
}

fn windows(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|t| (t as f64 * 0.3).sin() + rng.gen_range(-0.5..0.5)).collect())
        .collect()
}

fn train_setup(len: usize) -> (TrainConfig, TrainData) {
    let ds = Synthetic::SineMixture.generate(len, 3);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        lr: 1e-3,
        window_stride: 4,
        eval_stride: 8,
        ..TrainConfig::default()
    };
    let data = TrainData::from_dataset(&ds, 48, 12, &cfg).unwrap();
    (cfg, data)
}

#[test]
fn channels_are_forecast_independently() {
    let model = Powerformer::new(tiny(MaskSpec::weight_power_law(1.0))).unwrap();
    let mut batch = windows(3, 48, 1);
    let (before, _) = model.forward(&batch, false).unwrap();
    batch[1].iter_mut().for_each(|v| *v = *v * 3.0 - 7.0 + 0.1 * v.powi(2));
    let (after, _) = model.forward(&batch, false).unwrap();
    assert_eq!(before.channels[0], after.channels[0]);
    assert_eq!(before.channels[2], after.channels[2]);
    assert_ne!(before.channels[1], after.channels[1]);
}

#[test]
fn forecasts_follow_affine_rescaling_of_input() {
    let model = Powerformer::new(tiny(MaskSpec::butterworth(2, 5.0))).unwrap();
    let batch = windows(2, 48, 2);
    let moved: Vec<Vec<f64>> = batch.iter().map(|w| w.iter().map(|v| 4.0 * v + 10.0).collect()).collect();
    let (a, _) = model.forward(&batch, false).unwrap();
    let (b, _) = model.forward(&moved, false).unwrap();
    for (x, y) in a.channels.iter().flatten().zip(b.channels.iter().flatten()) {
        assert!((4.0 * x + 10.0 - y).abs() < 1e-9, "{x} -> {y}");
    }
}

#[test]
fn gradients_match_finite_differences_with_dropout_and_band() {
    let cfg = ModelConfig {
        dropout: 0.2,
        head_dropout: 0.1,
        banded_tau: Some(3),
        mask: MaskSpec::similarity_power_law(0.7).learnable(),
        ..tiny(MaskSpec::none())
    };
    let mut model = Powerformer::new(cfg).unwrap();
    let batch = windows(2, 48, 3);
    let target = Tensor::new(vec![2, 12], windows(2, 12, 4).concat()).unwrap();
    let eval = |m: &Powerformer| {
        let xs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = m.build(&xs, Some(&mut rng), false).unwrap();
        let loss = g.tape.mse(g.forecast, &target).unwrap();
        let v = g.tape.value(loss).item();
        g.tape.backward(loss).unwrap();
        (v, g.param_grads())
    };
    let (_, grads) = eval(&model);
    let names: Vec<String> = model.params.names().iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = 1e-5;
    for (k, name) in names.iter().enumerate() {
        let len = model.params.get(name).unwrap().len();
        for _ in 0..3.min(len) {
            let e = rng.gen_range(0..len);
            let base = model.params.get(name).unwrap().clone();
            let mut t = base.clone();
            t.data_mut()[e] += h;
            model.params.insert(name, t.clone());
            let lp = eval(&model).0;
            t.data_mut()[e] -= 2.0 * h;
            model.params.insert(name, t);
            let lm = eval(&model).0;
            model.params.insert(name, base);
            let numeric = (lp - lm) / (2.0 * h);
            let a = grads[k][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{e}]: tape {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_forecasts() {
    let model = Powerformer::new(tiny(MaskSpec::weight_power_law(0.5).learnable())).unwrap();
    let bytes = model.checkpoint(17).to_bytes().unwrap();
    let restored = Powerformer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(restored.params.fingerprint(), model.params.fingerprint());
    let batch = windows(2, 48, 5);
    assert_eq!(model.forward(&batch, false).unwrap().0, restored.forward(&batch, false).unwrap().0);
    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&corrupt).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn rejects_bad_inputs_and_configs() {
    let model = Powerformer::new(tiny(MaskSpec::none())).unwrap();
    let mut batch = windows(1, 48, 6);
    batch[0][10] = f64::NAN;
    assert!(matches!(model.forward(&batch, false), Err(Error::Data(_))));
    assert!(model.forward(&windows(1, 40, 6), false).is_err());
    assert!(model.forward(&[], false).is_err());
    let bad = ModelConfig { heads: 3, ..tiny(MaskSpec::none()) };
    assert!(Powerformer::new(bad).is_err());
    let bad = ModelConfig { patch_len: 64, ..tiny(MaskSpec::none()) };
    assert!(Powerformer::new(bad).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (cfg, data) = train_setup(600);
    let cfg = TrainConfig { lr: 0.0, ..cfg };
    let model = Powerformer::new(tiny(MaskSpec::weight_power_law(1.0))).unwrap();
    let before = model.params.fingerprint();
    let (trained, record) = training::train_model(model, &cfg, &data).unwrap();
    assert_eq!(trained.params.fingerprint(), before);
    assert!(record.steps > 0);
}

#[test]
fn training_is_reproducible() {
    let (cfg, data) = train_setup(600);
    let m = tiny(MaskSpec::weight_power_law(1.0));
    let m = ModelConfig { dropout: 0.1, ..m };
    let (_, a) = training::train(&m, &cfg, &data, 2021).unwrap();
    let (_, b) = training::train(&m, &cfg, &data, 2021).unwrap();
    let (_, c) = training::train(&m, &cfg, &data, 1776).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_ne!(a.best_params, c.best_params);
}

#[test]
fn training_reduces_loss() {
    let (cfg, data) = train_setup(800);
    let cfg = TrainConfig { epochs: 4, ..cfg };
    let (_, r) = training::train(&tiny(MaskSpec::weight_power_law(1.0)), &cfg, &data, 2021).unwrap();
    assert!(r.epochs.last().unwrap().train_loss < r.epochs[0].train_loss);
}

#[test]
fn early_stopping_counts_stale_epochs() {
    let mut s = EarlyStopping::new(Some(1));
    assert_eq!(s.update(1, 0.5), Verdict::Improved);
    assert_eq!(s.update(2, 0.6), Verdict::Stop);
    assert_eq!(s.best(), (1, 0.5));
    let mut s = EarlyStopping::new(Some(2));
    s.update(1, 0.5);
    assert_eq!(s.update(2, 0.5), Verdict::Continue);
    assert_eq!(s.update(3, 0.4), Verdict::Improved);
    let mut s = EarlyStopping::new(None);
    s.update(1, 0.1);
    assert!((2..50).all(|e| s.update(e, 1.0) == Verdict::Continue));
}

#[test]
fn early_stopping_restores_best_parameters() {
    let (cfg, data) = train_setup(600);
    let cfg = TrainConfig { epochs: 30, patience: Some(1), lr: 3e-2, ..cfg };
    let m = tiny(MaskSpec::weight_power_law(1.0));
    let (model, record) = training::train(&m, &cfg, &data, 2021).unwrap();
    assert!(record.stopped_early, "no early stop in {} epochs", record.epochs.len());
    assert_eq!(record.epochs.len(), record.best_epoch + 1);
    assert_eq!(model.params.fingerprint(), record.best_params);
    let replay = TrainConfig { epochs: record.best_epoch, patience: None, ..cfg };
    let (_, short) = training::train(&m, &replay, &data, 2021).unwrap();
    assert_eq!(short.best_params, record.best_params);
}

#[test]
fn alpha_stays_put_without_gradient_signal() {
    let (cfg, data) = train_setup(600);
    let cfg = TrainConfig { lr: 0.0, alpha_lr: 0.5, ..cfg };
    let mut model = Powerformer::new(tiny(MaskSpec::weight_power_law(1.0).learnable())).unwrap();
    let shape = model.params.get("head.weight").unwrap().shape().to_vec();
    model.params.insert("head.weight", Tensor::zeros(&shape));
    let (trained, record) = training::train_model(model, &cfg, &data).unwrap();
    assert_eq!(trained.alpha(), 1.0);
    assert!(record.alpha_trajectory.iter().all(|a| *a == 1.0));
}

#[test]
fn learnable_alpha_requires_power_law_family() {
    let (cfg, data) = train_setup(600);
    let err = training::train_learnable_alpha(&tiny(MaskSpec::weight_power_law(1.0)), &cfg, &data, 1).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
    let err = training::train_learnable_alpha(&tiny(MaskSpec::butterworth(1, 5.0)), &cfg, &data, 1).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn alpha_controller_respects_drift_cap() {
    let cfg = TrainConfig { alpha_lr: 1.0, ..TrainConfig::default() };
    let mut ctl = training::AlphaController::new(1.0, &cfg);
    let mut a = 1.0;
    for _ in 0..50 {
        a = ctl.step(a, -5.0).unwrap();
    }
    assert!((a - 1.5).abs() < 1e-12);
    let lr = ctl.lr();
    ctl.end_epoch();
    assert!((ctl.lr() - 0.9 * lr).abs() < 1e-15);
}
