use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};

use eivlg_core::encoder::{train_encoder as fit_encoder, TextEncoder, TextEncoderParams};
use eivlg_core::evaluation::{evaluate, text_only_evaluate, text_only_evaluate_with, GroundTruth, MetricReport};
use eivlg_core::gradsuite::{run_grad_suite, Fault};
use eivlg_core::io::{self, EncoderCheckpoint, GrounderCheckpoint, RunConfig, MANIFEST_FILE};
use eivlg_core::model::{predict as predict_all, train_grounder as fit_grounder, GroundingModel};
use eivlg_core::synth::{generate, oracle_embeddings, SynthConfig};
use eivlg_core::{Error, ErrorClass, GroundingSample, PredictionSet};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data_error(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Core(Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Accepts either a manifest file or the directory that holds one.
fn load_data(data: &Path) -> Result<Vec<GroundingSample>> {
    let manifest = if data.is_dir() { data.join(MANIFEST_FILE) } else { data.to_path_buf() };
    let samples = io::load_dataset(&manifest)?;
    info!("loaded {} samples from {}", samples.len(), manifest.display());
    Ok(samples)
}

fn check_data_against(cfg: &RunConfig, samples: &[GroundingSample], data: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(data_error(data, "dataset has no samples"));
    }
    for s in samples {
        let interval = s.captions.interval_s();
        if s.captions.len() > 1 && (interval - cfg.caption_interval_s).abs() > 1e-6 {
            return Err(data_error(
                data,
                format!(
                    "video {} has captions every {interval} s but the config says caption_interval_s = {}",
                    s.video.video_id, cfg.caption_interval_s
                ),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => io::load_synth_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = generate(&cfg)?;
    write_dataset_dir(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// Builds the dataset in a sibling temporary directory and renames it into
/// place. An existing dataset directory is replaced; any other existing
/// non-empty directory is left alone.
fn write_dataset_dir(out: &Path, samples: &[GroundingSample]) -> Result<()> {
    if out.exists() {
        let is_empty_dir = out.is_dir() && std::fs::read_dir(out).map_err(Error::from)?.next().is_none();
        if !is_empty_dir && !out.join(MANIFEST_FILE).is_file() {
            return Err(CliError::Usage(format!(
                "{} exists and does not look like a dataset directory; refusing to overwrite",
                out.display()
            )));
        }
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(Error::from)?;
    let staging = tempfile::Builder::new()
        .prefix(".eivlg-synth")
        .tempdir_in(&parent)
        .map_err(Error::from)?;
    io::write_dataset(staging.path(), samples)?;

    let staged = staging.keep();
    if out.exists() {
        let old = tempfile::Builder::new()
            .prefix(".eivlg-old")
            .tempdir_in(&parent)
            .map_err(Error::from)?;
        let old_path = old.path().join("previous");
        std::fs::rename(out, &old_path).map_err(Error::from)?;
        if let Err(e) = std::fs::rename(&staged, out) {
            let _ = std::fs::rename(&old_path, out);
            let _ = std::fs::remove_dir_all(&staged);
            return Err(Error::from(e).into());
        }
        drop(old);
    } else if let Err(e) = std::fs::rename(&staged, out) {
        let _ = std::fs::remove_dir_all(&staged);
        return Err(Error::from(e).into());
    }
    Ok(())
}

pub fn train_encoder(data: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let samples = load_data(data)?;
    check_data_against(&cfg, &samples, data)?;
    let init = TextEncoder::new(TextEncoderParams::init(cfg.vocab, cfg.d_t, cfg.seed)?, cfg.normalize_embeddings);
    let (encoder, log) = fit_encoder(&samples, init, &cfg.encoder_train_config())?;
    if log.skipped > 0 {
        warn!("{} samples skipped (ground truth covers no caption)", log.skipped);
    }
    io::write_encoder_checkpoint(out, &EncoderCheckpoint { encoder, seed: cfg.seed })?;
    match log.epoch_losses.last() {
        Some(l) => println!("trained encoder for {} epochs, final loss {l:.6}", log.epoch_losses.len()),
        None => println!("zero epochs: wrote the initial encoder"),
    }
    Ok(())
}

pub fn train_grounder(
    data: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    encoder_checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let samples = load_data(data)?;
    check_data_against(&cfg, &samples, data)?;
    let enc = io::read_encoder_checkpoint(encoder_checkpoint)?.encoder;
    if enc.dim() != cfg.d_t || enc.params.vocab_size() != cfg.vocab {
        return Err(data_error(
            encoder_checkpoint,
            format!(
                "encoder has D_t = {}, V = {} but the config says {}, {}",
                enc.dim(),
                enc.params.vocab_size(),
                cfg.d_t,
                cfg.vocab
            ),
        ));
    }
    let d_v = samples[0].video_features.cols();
    if d_v != cfg.d_v {
        return Err(data_error(data, format!("features have D_v = {d_v} but the config says {}", cfg.d_v)));
    }
    let model = GroundingModel::init(cfg.d_t, cfg.d_v, cfg.d_a, cfg.seed)?;
    let train_cfg = cfg.grounder_train_config();
    let run = fit_grounder(&samples, enc, model, &train_cfg)?;
    if run.log.skipped > 0 {
        warn!("{} samples skipped (ground truth covers no frame)", run.log.skipped);
    }
    io::write_grounder_checkpoint(
        out,
        &GrounderCheckpoint {
            encoder: run.encoder,
            seed: cfg.seed,
            config: train_cfg.model,
            model: run.model,
        },
    )?;
    match run.log.epoch_losses.last() {
        Some(l) => println!("trained grounder for {} epochs, final loss {l:.6}", run.log.epoch_losses.len()),
        None => println!("zero epochs: wrote the initial grounder"),
    }
    Ok(())
}

fn predictions_from_checkpoint(samples: &[GroundingSample], checkpoint: &Path, top_k: usize) -> Result<Vec<PredictionSet>> {
    if top_k == 0 {
        return Err(CliError::Usage("--top-k must be >= 1".into()));
    }
    let ckpt = io::read_grounder_checkpoint(checkpoint)?;
    let d_v = samples.first().map_or(0, |s| s.video_features.cols());
    if d_v != ckpt.model.dims().video {
        return Err(data_error(
            checkpoint,
            format!("model expects D_v = {} but the features have {d_v}", ckpt.model.dims().video),
        ));
    }
    Ok(predict_all(samples, &ckpt.encoder, &ckpt.model, &ckpt.config, top_k)?)
}

pub fn predict(data: &Path, checkpoint: &Path, out: &Path, top_k: usize) -> Result<()> {
    let samples = load_data(data)?;
    let preds = predictions_from_checkpoint(&samples, checkpoint, top_k)?;
    io::write_predictions(out, &preds)?;
    println!("wrote predictions for {} queries to {}", preds.len(), out.display());
    Ok(())
}

pub enum PredictionSource {
    File(PathBuf),
    Checkpoint(PathBuf),
}

/// Orders predictions to match the dataset; every query needs exactly one
/// prediction set.
fn align(samples: &[GroundingSample], preds: Vec<PredictionSet>, origin: &Path) -> Result<Vec<PredictionSet>> {
    let mut by_id: HashMap<String, PredictionSet> =
        preds.into_iter().map(|p| (p.query_id().to_string(), p)).collect();
    let mut aligned = Vec::with_capacity(samples.len());
    for s in samples {
        let p = by_id
            .remove(&s.query_id)
            .ok_or_else(|| data_error(origin, format!("no prediction for query {}", s.query_id)))?;
        aligned.push(p);
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(data_error(origin, format!("prediction for unknown query {extra}")));
    }
    Ok(aligned)
}

fn print_report(report: &MetricReport, out: &Path) {
    println!(
        "R1@0.3 {:.4}  R5@0.3 {:.4}  R1@0.5 {:.4}  R5@0.5 {:.4}  (n = {})",
        report.r1_03, report.r5_03, report.r1_05, report.r5_05, report.n_samples
    );
    println!("report written to {}", out.display());
}

pub fn eval(data: &Path, source: PredictionSource, out: &Path, per_sample: bool) -> Result<()> {
    let samples = load_data(data)?;
    if samples.is_empty() {
        return Err(data_error(data, "dataset has no samples"));
    }
    let (preds, origin) = match &source {
        PredictionSource::File(p) => (io::read_predictions(p)?, p.as_path()),
        PredictionSource::Checkpoint(c) => (predictions_from_checkpoint(&samples, c, 5)?, c.as_path()),
    };
    let preds = align(&samples, preds, origin)?;
    let gts: Vec<GroundTruth> = samples.iter().map(GroundTruth::from).collect();
    let mut report = evaluate(&preds, &gts)?;
    if !per_sample {
        report.per_sample = None;
    }
    io::write_report(out, &report)?;
    print_report(&report, out);
    Ok(())
}

pub enum Embeddings {
    Checkpoint(PathBuf),
    Oracle,
}

pub fn text_only_eval(data: &Path, embeddings: Embeddings, span_s: f64, out: &Path) -> Result<()> {
    if !(span_s > 0.0 && span_s.is_finite()) {
        return Err(CliError::Usage(format!("--span-s must be > 0, got {span_s}")));
    }
    let samples = load_data(data)?;
    if samples.is_empty() {
        return Err(data_error(data, "dataset has no samples"));
    }
    let mut report = match embeddings {
        Embeddings::Checkpoint(path) => {
            let ckpt = io::read_encoder_checkpoint(&path)?;
            text_only_evaluate(&samples, &ckpt.encoder, span_s)?
        }
        Embeddings::Oracle => {
            text_only_evaluate_with(&samples, span_s, |s| oracle_embeddings(s, eivlg_core::encoder::DEFAULT_DIM))?
        }
    };
    report.per_sample = None;
    io::write_report(out, &report)?;
    print_report(&report, out);
    Ok(())
}

pub fn gradcheck(seeds: u64, inject_fault: bool) -> Result<()> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let fault = if inject_fault { Fault::GateSign } else { Fault::None };
    let report = run_grad_suite(seeds, fault)?;
    for e in &report.entries {
        info!("{} (seed {}): {:e}", e.name, e.seed, e.max_rel_err);
    }
    let worst = report.worst().expect("at least one seed was checked");
    println!(
        "max rel err {:e} over {} checks ({} seed {}), tolerance {:e}",
        worst.max_rel_err,
        report.entries.len(),
        worst.name,
        worst.seed,
        report.tolerance
    );
    report.into_result()?;
    Ok(())
}
