use infoground::attention::GroundingModel;
use infoground::data::Dataset;
use infoground::math::NormMode;
use infoground::synth::{synth_generate, SynthConfig};
use infoground::train::{train, TrainConfig, TrainOutputs, BEST_CHECKPOINT, LAST_CHECKPOINT, NONFINITE_DUMP};
use infoground::Error;

fn tiny() -> (Dataset, Dataset) {
    let out = synth_generate(&SynthConfig {
        num_images: 40,
        num_val_images: 10,
        d_r: 8,
        d_w: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    (out.train, out.val)
}

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 10,
        learning_rate: 1e-2,
        max_epochs: 3,
        eval_every: 2,
        patience: None,
        use_lang: false,
        norm: NormMode::Affine,
        d: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn nonfinite_abort_keeps_last_good_checkpoints() {
    let (mut tr, va) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs::in_dir(dir.path());
    train(&config(), &tr, &va, None, &outputs).unwrap();
    let best = std::fs::read(dir.path().join(BEST_CHECKPOINT)).unwrap();
    let last = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();

    for p in &mut tr.pairs {
        p.regions.features.as_mut_slice()[0] = f64::NAN;
    }
    match train(&config(), &tr, &va, None, &outputs) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("step 0"), "{msg}"),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.steps)),
    }
    assert_eq!(std::fs::read(dir.path().join(BEST_CHECKPOINT)).unwrap(), best);
    assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), last);
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(NONFINITE_DUMP)).unwrap()).unwrap();
    assert_eq!(dump["image_ids"].as_array().unwrap().len(), 10);
    GroundingModel::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
}

#[test]
fn early_stopping_returns_the_logged_argmax() {
    let (tr, va) = tiny();
    let cfg = TrainConfig {
        max_epochs: 20,
        eval_every: 1,
        patience: Some(2),
        ..config()
    };
    let out = train(&cfg, &tr, &va, None, &TrainOutputs::default()).unwrap();
    let best = out.log.best().unwrap();
    assert_eq!(out.best_step, best.step);
    let max = out.log.rows.iter().map(|r| r.val_pointing_accuracy).fold(0.0, f64::max);
    assert_eq!(best.val_pointing_accuracy, max);
    let report = infoground::eval::evaluate(&out.best_model, &va).unwrap();
    assert_eq!(report.pointing_accuracy, best.val_pointing_accuracy);
    if out.stopped_early {
        let after = out.log.rows.iter().filter(|r| r.step > best.step).count();
        assert_eq!(after, 3);
    }
}

#[test]
fn step_metrics_are_written_per_step() {
    let (tr, va) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&config(), &tr, &va, None, &TrainOutputs::in_dir(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join(infoground::train::STEP_METRICS)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(infoground::train::STEP_METRICS_HEADER));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), out.steps);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0] as usize, i + 1);
        assert_eq!(r[3], r[1] + r[2]);
    }
}
