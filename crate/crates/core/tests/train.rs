use std::path::Path;

use cainet::config::{Stage, TrainConfig};
use cainet::dataset::{load_split, write_synth_corpus, DatasetManifest, Split, SynthOptions};
use cainet::metrics::ConfusionMatrix;
use cainet::model::argmax_labels;
use cainet::train::{
    build_for_stage, confusion, evaluate, infer, load_model, staged_train, staged_train_with, Example, PreparedData,
};
use cainet::{instrument, Error, Pass, Tape};

fn corpus(root: &Path, seed: u64, train: usize, val: usize, k: usize) {
    write_synth_corpus(root, seed, train, val, (32, 32), k, &SynthOptions::default()).unwrap();
}

fn config(root: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data_root = root.join("data");
    cfg.out_dir = root.join("run");
    cfg.batch_size = 2;
    cfg.steps_rgb = 2;
    cfg.steps_thermal = 2;
    cfg.steps_gcm = 2;
    cfg.steps_full = 2;
    cfg
}

#[test]
fn later_stages_need_their_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    corpus(&dir.path().join("data"), 1, 4, 2, 3);
    let mut cfg = config(dir.path());
    cfg.stage = Stage::Full;
    match staged_train(&cfg, &mut |_| {}) {
        Err(Error::MissingPrerequisite { stage, missing, .. }) => assert_eq!((stage.as_str(), missing.as_str()), ("full", "gcm")),
        other => panic!("{other:?}"),
    }
    let model_cfg = cfg.model_config(3);
    assert!(build_for_stage(&cfg, &model_cfg, Stage::Gcm, &cfg.out_dir).is_err());
    assert!(build_for_stage(&cfg, &model_cfg, Stage::Rgb, &cfg.out_dir).is_ok());
}

#[test]
fn class_count_mismatch_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    corpus(&dir.path().join("data"), 2, 4, 2, 3);
    let mut cfg = config(dir.path());
    cfg.stage = Stage::Rgb;
    staged_train(&cfg, &mut |_| {}).unwrap();
    let four = cfg.model_config(4);
    cfg.modules.thermal = false;
    match build_for_stage(&cfg, &four, Stage::Gcm, &cfg.out_dir) {
        Err(Error::ClassCountMismatch { checkpoint, corpus }) => assert_eq!((checkpoint, corpus), (3, 4)),
        other => panic!("{other:?}"),
    }
    // A stage checkpoint is not a complete model.
    assert!(matches!(load_model(&cfg, &cfg.out_dir.join("rgb.ckpt"), 3), Err(Error::Checkpoint(_))));
}

#[test]
fn rgb_training_miou_improves_over_200_steps() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    corpus(&root, 3, 16, 0, 3);
    let mut cfg = config(dir.path());
    cfg.stage = Stage::Rgb;
    cfg.batch_size = 8;
    cfg.steps_rgb = 200;
    cfg.eval_every = 50;
    cfg.patience = 100;
    let manifest = DatasetManifest::load(&root).unwrap();
    let train = load_split(&root, &manifest, Split::Train).unwrap();
    // No validation split: evaluation falls back to the training examples.
    let data = PreparedData::from_samples(&cfg, manifest, &train, &[]).unwrap();
    let (model, store) = build_for_stage(&cfg, &cfg.model_config(3), Stage::Rgb, &cfg.out_dir).unwrap();
    let initial = confusion(&model, &store, data.validation(), Pass::Rgb).unwrap().miou(&cfg.metrics);
    let report = staged_train_with(&cfg, &data, &mut |_| {}).unwrap();
    let evals = &report.stages[0].evals;
    assert_eq!(evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![50, 100, 150, 200]);
    let last = evals.last().unwrap().1;
    assert!(last > initial, "initial {initial:.4}, after 200 steps {last:.4}");
    assert!(last > evals[0].1, "{evals:?}");
    assert!(report.stages[0].losses.last().unwrap().l_total < report.stages[0].losses[0].l_total);
}

#[test]
fn evaluate_matches_a_recomputed_confusion_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    corpus(&root, 4, 4, 3, 3);
    let cfg = config(dir.path());
    let report = staged_train(&cfg, &mut |_| {}).unwrap();
    let ckpt = report.last().unwrap().checkpoint.clone();
    let eval = evaluate(&cfg, &ckpt, Split::Val).unwrap();

    let manifest = DatasetManifest::load(&root).unwrap();
    let (model, store) = load_model(&cfg, &ckpt, 3).unwrap();
    let mut cm = ConfusionMatrix::new(3);
    for s in load_split(&root, &manifest, Split::Val).unwrap() {
        let pred = infer(&cfg, &model, &store, &s).unwrap();
        cm.accumulate(&pred.data, &s.labels.data).unwrap();
    }
    assert_eq!(cm, eval.confusion);
    assert_eq!(cm.total(), 3 * 32 * 32);
    assert_eq!(cm.miou(&cfg.metrics), eval.miou);
    assert_eq!(cm.macc(&cfg.metrics), eval.macc);
    assert!(eval.table.contains("miou="));
}

#[test]
fn inference_is_deterministic_and_scale_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    corpus(&root, 5, 4, 2, 3);
    let cfg = config(dir.path());
    let report = staged_train(&cfg, &mut |_| {}).unwrap();
    let (model, store) = load_model(&cfg, &report.last().unwrap().checkpoint, 3).unwrap();
    let manifest = DatasetManifest::load(&root).unwrap();
    let s = &load_split(&root, &manifest, Split::Val).unwrap()[0];

    let before = instrument::snapshot();
    let a = infer(&cfg, &model, &store, s).unwrap();
    let b = infer(&cfg, &model, &store, s).unwrap();
    assert_eq!(instrument::snapshot(), before);
    assert_eq!(a, b);
    assert_eq!((a.height, a.width), (s.height(), s.width()));

    let ex = Example::from_sample(s, &cfg, false).unwrap();
    let mut tape = Tape::no_grad();
    let out = model.forward(&mut tape, &store, &ex.rgb, &ex.thermal, Pass::Inference).unwrap();
    let logits = tape.value(out.prediction(Pass::Inference).unwrap());
    assert_eq!(argmax_labels(logits).unwrap(), a);
    assert_eq!(argmax_labels(&logits.map(|v| v * 2.0)).unwrap(), a);
}

#[test]
fn early_stopping_and_the_step_cap() {
    let dir = tempfile::tempdir().unwrap();
    corpus(&dir.path().join("data"), 6, 4, 2, 3);
    let mut cfg = config(dir.path());
    cfg.stage = Stage::Rgb;
    cfg.steps_rgb = 50;
    cfg.eval_every = 1;
    cfg.patience = 2;
    // No evaluation can clear this margin after the first.
    cfg.min_delta = 2.0;
    let r = staged_train(&cfg, &mut |_| {}).unwrap();
    assert!(r.stages[0].stopped_early);
    assert_eq!((r.stages[0].steps, r.stages[0].best_step), (3, 1));

    let mut cfg = config(dir.path());
    cfg.steps_rgb = 4;
    cfg.steps_thermal = 4;
    cfg.steps_gcm = 4;
    cfg.steps_full = 4;
    cfg.max_steps = 10;
    let r = staged_train(&cfg, &mut |_| {}).unwrap();
    let steps: Vec<usize> = r.stages.iter().map(|s| s.steps).collect();
    assert_eq!(steps, vec![4, 4, 2, 0]);
    assert!(steps.iter().sum::<usize>() <= cfg.max_steps);
}
