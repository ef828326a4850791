//! On-disk formats: caption JSONL, dataset manifests, binary matrices and
//! checkpoints, run configuration, predictions and reports.
//!
//! Writers go through a temporary file in the destination directory and a
//! rename, so a failed write never leaves a partial file behind.

mod binary;
mod captions;
mod config;
mod dataset;
mod predictions;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use binary::{
    decode_encoder_checkpoint, decode_grounder_checkpoint, decode_matrix, encode_encoder_checkpoint,
    encode_grounder_checkpoint, encode_matrix, EncoderCheckpoint, GrounderCheckpoint, ENCODER_MAGIC, FORMAT_VERSION,
    GROUNDER_MAGIC, MATRIX_MAGIC,
};
pub use captions::{encode_captions, parse_captions, read_captions, write_captions, DEFAULT_CAPTION_INTERVAL_S};
pub use config::{load_synth_config, parse_synth_config, render_synth_config, RunConfig};
pub use dataset::{
    encode_manifest, load_dataset, parse_manifest, read_manifest, write_dataset, Manifest, ManifestSample,
    CAPTIONS_FILE, FEATURE_DIR, FEATURE_EXT, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use predictions::{
    encode_predictions, encode_report, parse_predictions, parse_report, read_predictions, read_report,
    write_predictions, write_report,
};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::format(path, format!("not UTF-8: {e}")))
}

/// Writes `bytes` to `path` via a sibling temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&read_bytes(path)?, path)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_matrix(m)?)
}

pub fn read_encoder_checkpoint(path: &Path) -> Result<EncoderCheckpoint> {
    decode_encoder_checkpoint(&read_bytes(path)?, path)
}

pub fn write_encoder_checkpoint(path: &Path, ckpt: &EncoderCheckpoint) -> Result<()> {
    write_atomic(path, &encode_encoder_checkpoint(ckpt)?)
}

pub fn read_grounder_checkpoint(path: &Path) -> Result<GrounderCheckpoint> {
    decode_grounder_checkpoint(&read_bytes(path)?, path)
}

pub fn write_grounder_checkpoint(path: &Path, ckpt: &GrounderCheckpoint) -> Result<()> {
    write_atomic(path, &encode_grounder_checkpoint(ckpt)?)
}
