mod common;

use std::fs;

use cchmm::dataio::{synth_generate, DatasetBundle, ScenarioConfig, Split};
use cchmm::diffcore::Tensor;
use cchmm::error::Error;
use cchmm::model::{ModelConfig, ModelParams};
use cchmm::optim::{
    clip_global_norm, fit, fit_from, load_checkpoint, save_checkpoint, AdamConfig, AdamState, TrainConfig, Variant,
};
use common::random_tensor;

fn tiny_bundle(seed: u64) -> DatasetBundle {
    synth_generate(&ScenarioConfig {
        num_regions: 4,
        grid_cols: 2,
        timesteps: 120,
        steps_per_day: 12,
        seed,
        ..ScenarioConfig::default()
    })
    .unwrap()
    .bundle
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        latent_dim: 4,
        history: 3,
        ..TrainConfig::default()
    }
}

fn names() -> Vec<String> {
    vec!["p".to_string()]
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let p0 = random_tensor(&[3, 2], 1);
    let mut p = vec![p0.clone()];
    let mut st = AdamState::new(AdamConfig::default(), &p);
    for _ in 0..3 {
        st.step(&mut p, &[Tensor::zeros(&[3, 2])], &names()).unwrap();
    }
    assert_eq!(p[0], p0);
    assert_eq!(st.t, 3);
}

#[test]
fn adam_first_step_is_lr_sized() {
    let mut p = vec![Tensor::scalar(1.0)];
    let mut st = AdamState::new(AdamConfig::default(), &p);
    st.step(&mut p, &[Tensor::scalar(0.3)], &names()).unwrap();
    let expect = 1.0 - 0.001 * 0.3 / (0.3 + 1e-8);
    assert!((p[0].item() - expect).abs() < 1e-15);
}

#[test]
fn adam_matches_hand_recursion() {
    let grads = [0.5, -1.0, 0.25, 2.0];
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut p = vec![Tensor::scalar(0.0)];
    let mut st = AdamState::new(cfg, &p);
    let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for (i, g) in grads.iter().enumerate() {
        st.step(&mut p, &[Tensor::scalar(*g)], &names()).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let t = (i + 1) as i32;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((p[0].item() - w).abs() < 1e-14);
        assert!(st.v[0].item() >= 0.0);
    }
}

#[test]
fn adam_is_deterministic_and_rejects_bad_gradients() {
    let p0 = random_tensor(&[4], 2);
    let mut a = vec![p0.clone()];
    let mut b = vec![p0];
    let mut sa = AdamState::new(AdamConfig::default(), &a);
    let mut sb = AdamState::new(AdamConfig::default(), &b);
    for s in 0..5 {
        let g = random_tensor(&[4], 10 + s);
        sa.step(&mut a, &[g.clone()], &names()).unwrap();
        sb.step(&mut b, &[g], &names()).unwrap();
    }
    assert_eq!(a, b);

    let mut bad = Tensor::zeros(&[4]);
    bad.data_mut()[2] = f64::NAN;
    let err = sa.step(&mut a, &[bad], &["layer.w".to_string()]).unwrap_err();
    assert!(err.to_string().contains("layer.w"), "{err}");
    assert!(sa.step(&mut a, &[Tensor::zeros(&[5])], &names()).is_err());
}

#[test]
fn clipping_preserves_direction() {
    let mut g = vec![Tensor::new(&[2], vec![3.0, 0.0]).unwrap(), Tensor::scalar(4.0)];
    let norm = clip_global_norm(&mut g, 1.0);
    assert_eq!(norm, 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    assert!((g[1].item() - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::scalar(0.5)];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].item(), 0.5);
}

#[test]
fn full_model_parameter_count_matches_manifest() {
    // Hand count for cond_dim 15, d 8, five concepts.
    // Per concept and branch: reset/update/candidate 3*(16*8+8) and four
    // Gaussian heads 4*(8*8+8) = 696, plus the input projection.
    // Posterior inputs: 15 conditions plus 7, 2, 2, 2, 1 observation channels.
    let posterior = 5 * 696 + 8 * (5 * 15 + 14) + 5 * 8;
    let prior = 5 * 696 + 8 * 5 * 15 + 5 * 8;
    let w_a = 25;
    let transforms = 5 * 2 * (64 + 8);
    let attention = 64;
    let generator = 4 * (64 + 8) + 3 * (16 + 2) + (8 + 1);
    let golden = posterior + prior + w_a + transforms + attention + generator;
    assert_eq!(golden, 9512);

    let cfg = TrainConfig::default().model_config(15).unwrap();
    assert_eq!(cfg, ModelConfig::new(15, 8, 3.0));
    assert_eq!(ModelParams::init(cfg, 0).unwrap().num_scalars(), golden);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let bundle = tiny_bundle(1);
    let cfg = TrainConfig { lr: 0.0, ..quick(2) };
    let init = ModelParams::init(cfg.model_config(bundle.cond_dim()).unwrap(), 3).unwrap();
    let out = fit_from(&bundle, &cfg, init.clone()).unwrap();
    assert_eq!(out.final_params.tensors(), init.tensors());
    assert_eq!(out.log.len(), 4);
}

#[test]
fn training_is_deterministic() {
    let bundle = tiny_bundle(2);
    let a = fit(&bundle, &quick(2)).unwrap();
    let b = fit(&bundle, &quick(2)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_params.tensors(), b.final_params.tensors());
    let c = fit(&bundle, &TrainConfig { seed: 8, ..quick(2) }).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn training_log_and_snapshots() {
    let bundle = tiny_bundle(3);
    let out = fit(&bundle, &quick(2)).unwrap();
    let splits: Vec<Split> = out.log.iter().map(|r| r.split).collect();
    assert_eq!(splits, [Split::Train, Split::Val, Split::Train, Split::Val]);
    for r in &out.log {
        let back: serde_json::Value = serde_json::from_str(&r.to_json_line()).unwrap();
        for key in ["epoch", "split", "recon_nll", "kl_eps", "kl_z", "pred_l2", "acyclicity", "total", "mae"] {
            assert!(back.get(key).is_some(), "{key}");
        }
        assert!(r.kl_eps >= 0.0 && r.kl_z >= 0.0 && r.total.is_finite());
        assert_eq!(r.mae.is_some(), r.split == Split::Val);
    }
    assert_eq!(out.adjacency.len(), 2);
    assert!((1..=2).contains(&out.best_epoch));
}

#[test]
fn loss_decreases_on_reference_scenario() {
    let bundle = synth_generate(&ScenarioConfig::default()).unwrap().bundle;
    let out = fit(&bundle, &TrainConfig { epochs: 5, ..TrainConfig::default() }).unwrap();
    let train: Vec<f64> = out.log.iter().filter(|r| r.split == Split::Train).map(|r| r.total).collect();
    assert!(train[4] < train[0], "{train:?}");
}

#[test]
fn checkpoint_round_trip_reproduces_validation() {
    let bundle = tiny_bundle(4);
    let cfg = quick(1);
    let out = fit(&bundle, &cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    save_checkpoint(&d1, &out.best_params).unwrap();
    let back = load_checkpoint(&d1).unwrap();
    assert_eq!(back.tensors(), out.best_params.tensors());
    assert_eq!(back.config(), out.best_params.config());
    save_checkpoint(&d2, &back).unwrap();
    for f in ["model.json", "meta.json"] {
        assert_eq!(fs::read(d1.join(f)).unwrap(), fs::read(d2.join(f)).unwrap());
    }
    for e in fs::read_dir(d1.join("arrays")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            fs::read(d1.join("arrays").join(&name)).unwrap(),
            fs::read(d2.join("arrays").join(&name)).unwrap()
        );
    }

    // Validation MAE from the reloaded model equals the logged best.
    let again = fit_from(&bundle, &TrainConfig { lr: 0.0, ..cfg }, back).unwrap();
    assert_eq!(again.best_val_mae, out.best_val_mae);

    assert!(load_checkpoint(&tmp.path().join("none")).is_err());
}

#[test]
fn variants_train_and_mismatches_are_rejected() {
    let bundle = tiny_bundle(5);
    for v in Variant::ALL {
        let cfg = TrainConfig {
            variant: v.flags(),
            ..quick(1)
        };
        let out = fit(&bundle, &cfg).unwrap_or_else(|e| panic!("{}: {e}", v.name()));
        assert!(out.best_val_mae.is_finite());
    }
    let wrong = ModelParams::init(ModelConfig::new(bundle.cond_dim() + 1, 4, 3.0), 0).unwrap();
    assert!(matches!(fit_from(&bundle, &quick(1), wrong), Err(Error::Validation(_))));
    let bad = TrainConfig { batch_size: 0, ..quick(1) };
    assert!(matches!(fit(&bundle, &bad), Err(Error::Config(_))));
}
