use std::fs;

use eivlg_core::encoder::{train_encoder, EncoderLoss, EncoderTrainConfig, TextEncoder, TextEncoderParams};
use eivlg_core::evaluation::{evaluate, text_only_evaluate_with, GroundTruth};
use eivlg_core::infuser::FusionVariant;
use eivlg_core::io::{
    load_dataset, read_grounder_checkpoint, read_predictions, read_report, write_dataset, write_grounder_checkpoint,
    write_predictions, write_report, GrounderCheckpoint, MANIFEST_FILE,
};
use eivlg_core::model::{predict, train_grounder, GrounderTrainConfig, GroundingModel, ModelConfig};
use eivlg_core::numerics::AdamWConfig;
use eivlg_core::synth::{generate, oracle_embeddings, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        seed: 11,
        n_videos: 12,
        ..SynthConfig::default()
    }
}

fn fast(lr: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        ..AdamWConfig::default()
    }
}

#[test]
fn dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(&small()).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    let loaded = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.len(), samples.len());
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.query_id, b.query_id);
        assert_eq!(a.query, b.query);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.captions, b.captions);
        assert_eq!(a.video_features.shape(), b.video_features.shape());
    }

    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &loaded).unwrap();
    for name in [MANIFEST_FILE, "captions.jsonl"] {
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn generation_is_a_prefix() {
    let short = generate(&small()).unwrap();
    let long = generate(&SynthConfig {
        n_videos: 20,
        ..small()
    })
    .unwrap();
    for (a, b) in short.iter().zip(&long) {
        assert_eq!(a.query, b.query);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.video_features, b.video_features);
    }
}

#[test]
fn oracle_text_only_is_perfect() {
    let samples = generate(&small()).unwrap();
    let r = text_only_evaluate_with(&samples, 30.0, |s| oracle_embeddings(s, 16)).unwrap();
    assert_eq!(r.r1_03, 1.0);
    assert_eq!(r.n_samples, samples.len());
}

#[test]
fn train_predict_evaluate_through_files() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate(&small()).unwrap()).unwrap();
    let data = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();

    let init = TextEncoder::new(TextEncoderParams::init(512, 16, 1).unwrap(), true);
    let (encoder, log) = train_encoder(
        &data,
        init,
        &EncoderTrainConfig {
            epochs: 3,
            seed: 1,
            loss: EncoderLoss::Mll,
            optimizer: fast(1e-2),
        },
    )
    .unwrap();
    assert_eq!(log.epoch_losses.len(), 3);
    assert!(log.epoch_losses[2] < log.epoch_losses[0], "{:?}", log.epoch_losses);

    let config = ModelConfig {
        variant: FusionVariant::CrossAttention,
        ..ModelConfig::default()
    };
    let run = train_grounder(
        &data,
        encoder,
        GroundingModel::init(16, small().d_v, 16, 2).unwrap(),
        &GrounderTrainConfig {
            epochs: 2,
            seed: 3,
            optimizer: fast(1e-3),
            model: config,
            joint_encoder: false,
        },
    )
    .unwrap();
    assert!(run.log.epoch_losses.iter().all(|l| l.is_finite()));

    let ckpt_path = dir.path().join("model.eivg");
    write_grounder_checkpoint(
        &ckpt_path,
        &GrounderCheckpoint {
            encoder: run.encoder,
            seed: 3,
            config,
            model: run.model,
        },
    )
    .unwrap();
    let ckpt = read_grounder_checkpoint(&ckpt_path).unwrap();
    assert_eq!(ckpt.config, config);

    let preds = predict(&data, &ckpt.encoder, &ckpt.model, &ckpt.config, 5).unwrap();
    assert_eq!(preds.len(), data.len());
    assert!(preds.iter().all(|p| !p.candidates().is_empty() && p.candidates().len() <= 5));

    let pred_path = dir.path().join("preds.jsonl");
    write_predictions(&pred_path, &preds).unwrap();
    let reread = read_predictions(&pred_path).unwrap();
    assert_eq!(reread, preds);

    let gts: Vec<GroundTruth> = data.iter().map(GroundTruth::from).collect();
    let report = evaluate(&reread, &gts).unwrap();
    assert!(report.r1_03 <= report.r5_03 && report.r1_05 <= report.r5_05);
    assert!(report.r1_05 <= report.r1_03);
    let report_path = dir.path().join("report.json");
    write_report(&report_path, &report).unwrap();
    assert_eq!(read_report(&report_path).unwrap(), report);
}
