use voxret_core::features::FeatureNormalizer;
use voxret_core::manifest::{manifest_to_string, parse_manifest, StoreSet};
use voxret_core::model::{
    init_model, load_checkpoint, save_checkpoint, Matrix, Modality, ModelConfig, RetrievalModel,
};
use voxret_core::retrieval::{recall_at_k, EmbeddingIndex};
use voxret_core::synthetic::{to_store, SyntheticCorpus, SyntheticSpec, AUDIO_STORE, TEXT_STORE};
use voxret_core::training::{
    evaluate_loss, train, train_with_callback, PairSet, TrainConfig, TrainError,
};

fn small_model(seed: u64, train: &PairSet) -> RetrievalModel {
    let mut m = init_model(&ModelConfig {
        audio_in_dim: 16,
        text_in_dim: 16,
        embed_dim: 16,
        proj_hidden_dim: 32,
        feat_hidden_dim: 16,
        seed,
        ..Default::default()
    })
    .unwrap();
    m.normalizer = FeatureNormalizer::fit(&train.features).unwrap();
    m
}

fn cfg(epochs: usize, alpha: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        epochs,
        alpha,
        seed: 11,
        ..Default::default()
    }
}

fn held_out_recall(model: &RetrievalModel, held: &PairSet) -> f64 {
    let rows: Vec<Vec<f64>> = (0..held.len())
        .map(|i| model.project(Modality::Audio, held.audio.row(i)).unwrap())
        .collect();
    let index = EmbeddingIndex::new(
        held.records.iter().map(|r| r.id.clone()).collect(),
        Matrix::from_rows(&rows).unwrap(),
        held.records.clone(),
    )
    .unwrap();
    let queries: Vec<(Vec<f64>, String)> = (0..held.len())
        .map(|i| (held.text.row(i).to_vec(), held.records[i].id.clone()))
        .collect();
    recall_at_k(&index, model, &queries, 1).unwrap()
}

#[test]
fn two_epochs_twice_give_identical_logs() {
    let corpus = SyntheticCorpus::new(SyntheticSpec::default());
    let data = corpus.sample(64, 1, "d");
    let run = || train(small_model(2, &data), &data, Some(&data), &cfg(2, 1.0)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.step_losses, y.step_losses);
    }
    assert_eq!(a.model, b.model);
}

#[test]
fn every_logged_step_satisfies_breakdown_identities() {
    let corpus = SyntheticCorpus::new(SyntheticSpec::default());
    let data = corpus.sample(64, 1, "d");
    let out = train(small_model(2, &data), &data, None, &cfg(3, 0.5)).unwrap();
    for e in &out.log {
        assert_eq!(e.steps, 4);
        for s in &e.step_losses {
            assert!((s.l_feat - (s.l_feat_audio + s.l_feat_text + s.l_feat_cross)).abs() < 1e-9);
            assert!((s.total - (s.l_clap + 0.5 * s.l_feat)).abs() < 1e-9);
        }
    }
}

#[test]
fn contrastive_loss_descends_and_recall_improves() {
    let corpus = SyntheticCorpus::new(SyntheticSpec::default());
    let data = corpus.sample(256, 1, "d");
    let held = corpus.sample(64, 2, "h");
    let model = small_model(3, &data);
    let full = data.batch(&model, &(0..data.len()).collect::<Vec<_>>());
    let before = evaluate_loss(&model, &full, 0.0).unwrap().l_clap;
    let recall_before = held_out_recall(&model, &held);
    // 16 steps per epoch.
    let out = train(model, &data, None, &cfg(13, 0.0)).unwrap();
    let after = evaluate_loss(&out.model, &full, 0.0).unwrap().l_clap;
    assert!(after < before, "{after} >= {before}");
    assert!(held_out_recall(&out.model, &held) > recall_before);
}

#[test]
fn best_epoch_and_checkpoint_schedule_are_reported() {
    let corpus = SyntheticCorpus::new(SyntheticSpec::default());
    let data = corpus.sample(64, 1, "d");
    let valid = corpus.sample(32, 5, "v");
    let mut seen = Vec::new();
    let c = TrainConfig {
        checkpoint_every: 5,
        ..cfg(12, 1.0)
    };
    let out = train_with_callback(small_model(2, &data), &data, Some(&valid), &c, |e, _| {
        if e.checkpoint {
            seen.push(e.epoch);
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![5, 10, 12]);
    let best = out.best.expect("valid set has both genders");
    let max = out
        .log
        .iter()
        .filter_map(|e| e.valid_gender_acc_at_10)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.accuracy, max);
    let first = out
        .log
        .iter()
        .find(|e| e.valid_gender_acc_at_10 == Some(max))
        .unwrap();
    assert_eq!(best.epoch, first.epoch);
}

#[test]
fn callback_errors_abort_training() {
    let corpus = SyntheticCorpus::new(SyntheticSpec::default());
    let data = corpus.sample(32, 1, "d");
    let r = train_with_callback(small_model(2, &data), &data, None, &cfg(3, 1.0), |e, _| {
        if e.epoch == 2 {
            Err(TrainError::Callback("disk full".into()))
        } else {
            Ok(())
        }
    });
    assert!(matches!(r, Err(TrainError::Callback(_))));
}

#[test]
fn batch_larger_than_dataset_is_rejected() {
    let corpus = SyntheticCorpus::new(SyntheticSpec::default());
    let data = corpus.sample(10, 1, "d");
    let r = train(small_model(2, &data), &data, None, &cfg(1, 1.0));
    assert!(matches!(
        r,
        Err(TrainError::BatchTooLarge {
            batch_size: 16,
            available: 10
        })
    ));
}

#[test]
fn manifest_and_stores_round_trip_into_pairs() {
    let corpus = SyntheticCorpus::new(SyntheticSpec::default());
    let data = corpus.sample(12, 1, "d");
    let text = manifest_to_string(&data.records);
    let records = parse_manifest(text.as_bytes()).unwrap();
    let mut stores = StoreSet::new();
    stores.insert(AUDIO_STORE, to_store(&data.audio));
    stores.insert(TEXT_STORE, to_store(&data.text));
    let pairs = PairSet::from_manifest(&records, &stores).unwrap();
    assert_eq!(pairs.audio, data.audio);
    assert_eq!(pairs.text, data.text);
    assert_eq!(pairs.features, data.features);

    let mut missing = records.clone();
    missing[3].speaking_rate = None;
    assert!(matches!(
        PairSet::from_manifest(&missing, &stores),
        Err(TrainError::MissingFeatures(id)) if id == "d0003"
    ));
}

#[test]
fn trained_checkpoint_round_trips() {
    let corpus = SyntheticCorpus::new(SyntheticSpec::default());
    let data = corpus.sample(32, 1, "d");
    let out = train(small_model(2, &data), &data, None, &cfg(2, 1.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.model, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), out.model);
}
