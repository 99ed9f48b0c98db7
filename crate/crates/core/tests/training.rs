use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ras_core::data::{batches, synth_dataset, BatchOptions, DatasetMeta, Example};
use ras_core::nn::{ParamRole, ParamStore};
use ras_core::ops;
use ras_core::training::{decays, fit, sgd_step, History, OptimizerState, SgdParams, TrainConfig};
use ras_core::{backward, build_model, AttentionConfig, AttentionKind, Error, Mode, Model, ModelSpec, Tensor, Var};

fn micro(classes: usize, res: usize, attention: AttentionConfig) -> ModelSpec {
    ModelSpec {
        blocks_per_stage: 1,
        stage_widths: [4, 8, 8],
        num_classes: classes,
        attention,
        input_resolution: (res, res),
    }
}

fn quick(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr,
        milestones: vec![],
        ..TrainConfig::default()
    }
}

fn synth(classes: usize, count: usize, res: usize, seed: u64) -> (Vec<Example>, DatasetMeta) {
    let data = synth_dataset(classes, count, res, seed).unwrap();
    let meta = DatasetMeta::from_train("synth", classes, "synth", &data).unwrap();
    (data, meta)
}

#[test]
fn sgd_matches_two_step_recurrence() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::new([2], vec![1.0, -2.0]).unwrap(), ParamRole::Weight);
    store.add("bn.gamma", Tensor::new([1], vec![0.5]).unwrap(), ParamRole::NormAffine);
    let mut state = OptimizerState::new(&store);
    let hp = SgdParams {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.01,
        decay_all: false,
    };
    let grads = [[0.3, -0.4, 2.0], [-0.1, 0.2, 1.0]];
    for g in grads {
        {
            let mut it = store.iter_mut();
            it.next().unwrap().grad = Some(Tensor::new([2], g[..2].to_vec()).unwrap());
            it.next().unwrap().grad = Some(Tensor::new([1], vec![g[2]]).unwrap());
        }
        sgd_step(&mut store, &mut state, hp).unwrap();
    }

    // w0 = 1: v1 = 0.3 + 0.01 = 0.31, w1 = 0.969;
    //         v2 = 0.9·0.31 − 0.1 + 0.01·0.969 = 0.18869, w2 = 0.950131.
    // gamma is not decayed: v1 = 2, g1 = 0.3; v2 = 2.8, g2 = 0.02.
    let vals: Vec<f64> = store.iter().flat_map(|p| p.value.data().to_vec()).collect();
    let w1_second = {
        let v1 = -0.4 + 0.01 * -2.0;
        let p1 = -2.0 - 0.1 * v1;
        let v2 = 0.9 * v1 + 0.2 + 0.01 * p1;
        p1 - 0.1 * v2
    };
    assert!((vals[0] - 0.950131).abs() < 1e-12, "{}", vals[0]);
    assert!((vals[1] - w1_second).abs() < 1e-12);
    assert!((vals[2] - 0.02).abs() < 1e-12, "{}", vals[2]);
}

#[test]
fn decay_partition_by_name() {
    let model: Model = build_model(&micro(3, 8, AttentionConfig::default()), 0).unwrap();
    for p in model.params().iter() {
        let affine = p.name.ends_with(".gamma") || p.name.ends_with(".beta");
        assert_eq!(decays(p.role, false), !affine, "{}", p.name);
        assert!(decays(p.role, true));
    }
}

#[test]
fn zeroed_head_gives_log_k_loss() {
    for k in [2usize, 5, 10] {
        let (data, meta) = synth(k, 2 * k, 8, 3);
        let mut model: Model = build_model(&micro(k, 8, AttentionConfig::default()), 1).unwrap();
        model.zero_head();
        let batch = batches(&data, &meta, BatchOptions::eval(2 * k)).unwrap().next().unwrap();
        let b = model.bind(true);
        let logits = model.forward(&b, &Var::constant(batch.images), Mode::Train).unwrap();
        let loss = ops::cross_entropy(&logits, &batch.labels).unwrap();
        assert!((loss.value().item() as f64 - (k as f64).ln()).abs() < 1e-6);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let (data, meta) = synth(2, 32, 8, 0);
    let mut model: Model = build_model(&micro(2, 8, AttentionConfig::default()), 0).unwrap();
    let before: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let history = fit(&mut model, &data, None, &meta, &quick(2, 0.0), None, |_| {}).unwrap();
    assert_eq!(history.records.len(), 2);
    for (p, old) in model.params().iter().zip(&before) {
        let same = p.value.data().iter().zip(old.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{} changed", p.name);
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (data, meta) = synth(2, 32, 8, 0);
    let run = || {
        let mut model: Model = build_model(&micro(2, 8, AttentionConfig::of_kind(AttentionKind::Se)), 5).unwrap();
        let h = fit(&mut model, &data, None, &meta, &quick(2, 0.05), None, |_| {}).unwrap();
        (model.state_tensors(), h.losses())
    };
    assert_eq!(run(), run());
}

#[test]
fn divergence_is_reported_as_nan_loss() {
    let (data, meta) = synth(2, 32, 8, 0);
    let mut model: Model = build_model(&micro(2, 8, AttentionConfig::default()), 0).unwrap();
    let cfg = TrainConfig {
        momentum: 0.0,
        ..quick(5, 1e30)
    };
    let err = fit(&mut model, &data, None, &meta, &cfg, None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NanLoss { lr, .. } if lr == 1e30), "{err}");
}

#[test]
fn history_is_written_and_reloaded() {
    let dir = tempfile::tempdir().unwrap();
    let (data, meta) = synth(2, 32, 8, 0);
    let mut model: Model = build_model(&micro(2, 8, AttentionConfig::none()), 0).unwrap();
    let cfg = TrainConfig {
        milestones: vec![1],
        ..quick(2, 0.05)
    };
    let h = fit(&mut model, &data, Some(&data), &meta, &cfg, Some(dir.path()), |_| {}).unwrap();
    let text = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(History::from_jsonl(&text).unwrap(), h);
    assert_eq!(h.records[0].lr, 0.05);
    assert!((h.records[1].lr - 0.005).abs() < 1e-15);
    assert!(h.records.iter().all(|r| r.eval_accuracy.is_some()));
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn lr_schedule_drops_at_milestones() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 0.1);
    assert_eq!(cfg.lr_at(80), 0.1);
    assert!((cfg.lr_at(81) - 0.01).abs() < 1e-15);
    assert!((cfg.lr_at(122) - 0.001).abs() < 1e-15);
    assert!((cfg.lr_at(163) - 0.001).abs() < 1e-15);
}

/// Logistic regression on per-channel image means.
#[test]
fn synthetic_classes_are_linearly_separable() {
    let classes = 8;
    let (train, _) = synth(classes, 160, 8, 11);
    let (test, _) = synth(classes, 80, 8, 12);
    let features = |d: &[Example]| {
        let rows: Vec<f64> = d
            .iter()
            .flat_map(|ex| ex.image.data().chunks(64).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / 64.0))
            .collect();
        // Centre and scale so plain SGD converges quickly.
        Tensor::new([d.len(), 3], rows.into_iter().map(|v| (v - 0.5) * 8.0).collect()).unwrap()
    };
    let labels = |d: &[Example]| d.iter().map(|e| e.label).collect::<Vec<_>>();
    let (xtr, ytr) = (features(&train), labels(&train));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut w = Tensor::<f64>::randn([classes, 3], 0.01, &mut rng);
    let mut b = Tensor::<f64>::zeros([classes]);
    for _ in 0..2000 {
        let (wv, bv) = (Var::leaf(w.clone()), Var::leaf(b.clone()));
        let loss = ops::cross_entropy(&ops::linear(&Var::constant(xtr.clone()), &wv, Some(&bv)).unwrap(), &ytr).unwrap();
        let g = backward(&loss).unwrap();
        for (t, gt) in [(&mut w, g.get(&wv).unwrap()), (&mut b, g.get(&bv).unwrap())] {
            t.add_assign(&gt.map(|v| -1.0 * v));
        }
    }
    let logits = ops::linear(&Var::constant(features(&test)), &Var::constant(w), Some(&Var::constant(b))).unwrap();
    let correct = ras_core::training::count_correct(logits.value(), &labels(&test));
    assert_eq!(correct, test.len());
}
