use dykonem::dataset::Dataset;
use dykonem::fusion::RepKey;
use dykonem::linalg::Params;
use dykonem::predictor::{evaluate, train, AblationMode, Model, ModelConfig, TrainConfig};
use dykonem::synthgen::{describe, generate, single_view_pair_fraction, GenConfig};
use dykonem::Error;

fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        patients: 120,
        doctors: 20,
        hospitals: 5,
        diseases: 6,
        consultations: 400,
        offline_visits: 300,
        failure_rate: 0.2,
        span_days: 90,
        seed,
        ..Default::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        entity_dim: 8,
        relation_dim: 4,
        attr_dim: 8,
        id_dim: 8,
        text_dim: 8,
        fusion_dim: 32,
        hidden: 8,
        ..Default::default()
    }
}

fn bits(m: &Model) -> Vec<u64> {
    m.params.flatten().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn smoothed_loss_is_non_increasing() {
    let ds = generate(&small_gen(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        ..Default::default()
    };
    let out = train(&ds, &small_model(), &cfg).unwrap();
    let loss: Vec<f64> = out.history.iter().map(|e| e.overall()).collect();
    let avg: Vec<f64> = loss.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    // Moving averages ending in the last 80% of epochs.
    let start = (loss.len() / 5).saturating_sub(9);
    for (i, w) in avg[start..].windows(2).enumerate() {
        assert!(w[1] <= w[0], "average rose at window {}: {} -> {}", start + i, w[0], w[1]);
    }
    assert!(loss.last().unwrap() < &loss[0]);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let ds = generate(&small_gen(2)).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        seed: 4,
        ..Default::default()
    };
    let out = train(&ds, &small_model(), &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, 0);
    let init = Model::new(&ds, small_model(), cfg.mode, 4, cfg.threshold).unwrap();
    assert_eq!(bits(&out.model), bits(&init));
}

#[test]
fn single_class_split_is_an_error() {
    let mut ds = generate(&small_gen(3)).unwrap();
    for c in &mut ds.consultations {
        c.label = Some(0);
    }
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    assert!(matches!(train(&ds, &small_model(), &cfg), Err(Error::SingleClass)));
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let ds = generate(&small_gen(5)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let a = train(&ds, &small_model(), &cfg).unwrap();
    let b = train(&ds, &small_model(), &cfg).unwrap();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.history, b.history);
    assert_eq!(a.test, b.test);

    let other = train(&ds, &small_model(), &TrainConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(bits(&a.model), bits(&other.model));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dykm");
    a.model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, a.model);
    assert_eq!(loaded.to_bytes(), a.model.to_bytes());
    let (ea, eb) = (
        evaluate(&a.model, &ds, None, None).unwrap(),
        evaluate(&loaded, &ds, None, None).unwrap(),
    );
    assert_eq!(ea, eb);
    let val = evaluate(&loaded, &ds, Some(&a.split.validation), None).unwrap();
    assert_eq!(val.metrics, a.validation);
}

#[test]
fn every_mode_trains() {
    let ds = generate(&small_gen(6)).unwrap();
    for mode in AblationMode::ALL {
        let cfg = TrainConfig {
            epochs: 1,
            mode,
            ..Default::default()
        };
        let out = train(&ds, &small_model(), &cfg).unwrap();
        assert_eq!(out.model.mode, mode);
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].overall().is_finite());
        // Dialogue-only training has no graph phase.
        assert_eq!(out.history[0].kg_loss == 0.0, mode == AblationMode::A, "{mode}");
    }
}

#[test]
fn fusion_membership_is_configurable() {
    let ds = generate(&small_gen(9)).unwrap();
    let keys: Vec<RepKey> = ["dialogue.doctor", "online.doctor", "offline.disease"]
        .iter()
        .map(|k| k.parse().unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let model_cfg = ModelConfig {
        membership: keys.clone(),
        ..small_model()
    };
    let out = train(&ds, &model_cfg, &cfg).unwrap();
    assert_eq!(out.model.fusion().num_pairs(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dykm");
    out.model.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap().config.membership, keys);

    // Mode A drops graph keys; one dialogue key is left and nothing fuses.
    let a = Model::new(&ds, model_cfg.clone(), AblationMode::A, 0, 0.5).unwrap();
    assert_eq!(a.fusion().members().count(), 1);
    assert!(train(&ds, &ModelConfig { membership: keys[..1].to_vec(), ..small_model() }, &cfg).is_err());
}

#[test]
fn unlabeled_data_cannot_train_but_can_be_scored() {
    let ds = generate(&small_gen(7)).unwrap();
    let model = train(&ds, &small_model(), &TrainConfig { epochs: 1, ..Default::default() })
        .unwrap()
        .model;
    let mut unlabeled = ds.clone();
    for c in &mut unlabeled.consultations {
        c.label = None;
    }
    assert!(matches!(
        train(&unlabeled, &small_model(), &TrainConfig::default()),
        Err(Error::Schema(_))
    ));
    let preds = model.predict(&model.prepare(&unlabeled).unwrap()).unwrap();
    assert_eq!(preds.len(), unlabeled.consultations.len());
    assert!(preds.iter().all(|p| p.label.is_none()));
}

#[test]
fn generated_views_overlap_only_partly() {
    let ds = generate(&GenConfig::default()).unwrap();
    assert!(single_view_pair_fraction(&ds) >= 0.3, "{}", single_view_pair_fraction(&ds));
    assert!(describe(&Dataset::default()).iter().all(|(_, v)| *v == 0.0));
}

#[test]
fn dataset_files_round_trip_through_training() {
    let ds = generate(&small_gen(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let a = train(&ds, &small_model(), &cfg).unwrap();
    let b = train(&back, &small_model(), &cfg).unwrap();
    assert_eq!(bits(&a.model), bits(&b.model));
}
