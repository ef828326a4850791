//! Little-endian binary containers: feature matrices (`EIVC`), encoder
//! checkpoints (`EIVT`) and grounder checkpoints (`EIVG`).
//!
//! Reals are stored as `f32` and widened on read. Every reader rejects a bad
//! magic, an unknown version, truncation, trailing bytes and non-finite
//! values.

use std::path::Path;

use crate::encoder::{TextEncoder, TextEncoderParams};
use crate::error::{Error, Result};
use crate::grounder::{LossSuite, VlgLossConfig};
use crate::infuser::FusionVariant;
use crate::model::{GroundingModel, ModelConfig};
use crate::numerics::{Matrix, ParamSet};

pub const MATRIX_MAGIC: &[u8; 4] = b"EIVC";
pub const ENCODER_MAGIC: &[u8; 4] = b"EIVT";
pub const GROUNDER_MAGIC: &[u8; 4] = b"EIVG";
pub const FORMAT_VERSION: u32 = 1;

const NORMALIZE_FLAG: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self(Vec::new());
        w.0.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn dim(&mut self, what: &str, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::invalid("dims", format!("{what} = {n} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn reals(&mut self, xs: &[f64]) -> Result<()> {
        for &x in xs {
            let y = x as f32;
            if !y.is_finite() {
                return Err(Error::NonFinite("value written to disk"));
            }
            self.0.extend_from_slice(&y.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { bytes, pos: 0, path };
        let m = r.take(4, "magic")?;
        if m != magic {
            return Err(r.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn reals_into(&mut self, out: &mut [f64], what: &str) -> Result<()> {
        let n = out
            .len()
            .checked_mul(4)
            .ok_or_else(|| self.err(format!("{what}: size overflow")))?;
        let raw = self.take(n, what)?;
        for (o, chunk) in out.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(self.err(format!("non-finite value in {what}")));
            }
            *o = v as f64;
        }
        Ok(())
    }

    /// Fails early when a header promises more payload than the file holds,
    /// so corrupted dimensions never trigger a huge allocation.
    fn expect_payload(&self, reals: u128, what: &str) -> Result<()> {
        let left = (self.bytes.len() - self.pos) as u128;
        if reals * 4 > left {
            return Err(self.err(format!("truncated {what}: header needs {} bytes, {left} left", reals * 4)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Matrices

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let mut w = Writer::new(MATRIX_MAGIC);
    w.dim("rows", m.rows())?;
    w.dim("cols", m.cols())?;
    w.reals(m.data())?;
    Ok(w.0)
}

/// `path` only labels errors.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let mut r = Reader::open(bytes, path, MATRIX_MAGIC)?;
    let rows = r.dim("rows")?;
    let cols = r.dim("cols")?;
    r.expect_payload(rows as u128 * cols as u128, "matrix payload")?;
    let mut m = Matrix::zeros(rows, cols);
    r.reals_into(m.data_mut(), "matrix payload")?;
    r.finish()?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Encoder checkpoints
//
// magic, version, V, D_t, then token table, projection and bias, then a
// 16-byte record: seed u64, flags u32 (bit 0: normalize), reserved u32 = 0.

fn write_encoder(w: &mut Writer, enc: &TextEncoder, seed: u64) -> Result<()> {
    enc.params.validate()?;
    w.dim("V", enc.params.vocab_size())?;
    w.dim("D_t", enc.params.dim())?;
    for s in enc.params.slices() {
        w.reals(s)?;
    }
    w.u64(seed);
    w.u32(if enc.normalize { NORMALIZE_FLAG } else { 0 });
    w.u32(0);
    Ok(())
}

fn read_encoder(r: &mut Reader<'_>) -> Result<(TextEncoder, u64)> {
    let vocab = r.dim("V")?;
    let dim = r.dim("D_t")?;
    if vocab < 2 || dim < 2 {
        return Err(r.err(format!("encoder dims V = {vocab}, D_t = {dim} are too small")));
    }
    let d = dim as u128;
    r.expect_payload(vocab as u128 * d + d * d + d, "encoder parameters")?;
    let mut params = TextEncoderParams::zeros(vocab, dim);
    for s in params.slices_mut() {
        r.reals_into(s, "encoder parameters")?;
    }
    let seed = r.u64("seed")?;
    let flags = r.u32("flags")?;
    if flags & !NORMALIZE_FLAG != 0 {
        return Err(r.err(format!("unknown encoder flags {flags:#x}")));
    }
    if r.u32("reserved")? != 0 {
        return Err(r.err("reserved field is not zero"));
    }
    Ok((TextEncoder::new(params, flags & NORMALIZE_FLAG != 0), seed))
}

/// Encoder weights plus the seed that produced their initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub encoder: TextEncoder,
    pub seed: u64,
}

pub fn encode_encoder_checkpoint(ckpt: &EncoderCheckpoint) -> Result<Vec<u8>> {
    let mut w = Writer::new(ENCODER_MAGIC);
    write_encoder(&mut w, &ckpt.encoder, ckpt.seed)?;
    Ok(w.0)
}

pub fn decode_encoder_checkpoint(bytes: &[u8], path: &Path) -> Result<EncoderCheckpoint> {
    let mut r = Reader::open(bytes, path, ENCODER_MAGIC)?;
    let (encoder, seed) = read_encoder(&mut r)?;
    r.finish()?;
    Ok(EncoderCheckpoint { encoder, seed })
}

// ---------------------------------------------------------------------------
// Grounder checkpoints
//
// magic, version, model config (variant u8, use_environment u8, suite u8,
// reserved u8, qgh extension / focal α / focal γ as f32), D_t, D_v, D_a,
// the embedded encoder record, then infuser and head parameters.

/// A self-contained grounding model: the encoder it was trained with (which
/// may have been fine-tuned jointly), the fusion configuration and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GrounderCheckpoint {
    pub encoder: TextEncoder,
    pub seed: u64,
    pub config: ModelConfig,
    pub model: GroundingModel,
}

fn variant_code(v: FusionVariant) -> u8 {
    match v {
        FusionVariant::Concat => 0,
        FusionVariant::Add => 1,
        FusionVariant::CrossAttention => 2,
    }
}

fn suite_code(s: LossSuite) -> u8 {
    match s {
        LossSuite::SpanQgh => 0,
        LossSuite::FocalDiou => 1,
    }
}

pub fn encode_grounder_checkpoint(ckpt: &GrounderCheckpoint) -> Result<Vec<u8>> {
    ckpt.model.validate()?;
    let dims = ckpt.model.dims();
    if dims.text != ckpt.encoder.dim() {
        return Err(Error::shape(
            "grounder checkpoint",
            format!("model D_t {} vs encoder D_t {}", dims.text, ckpt.encoder.dim()),
        ));
    }
    let cfg = &ckpt.config;
    let mut w = Writer::new(GROUNDER_MAGIC);
    w.u8(variant_code(cfg.variant));
    w.u8(cfg.use_environment as u8);
    w.u8(suite_code(cfg.loss.suite));
    w.u8(0);
    w.reals(&[cfg.loss.qgh_extension, cfg.loss.focal_alpha, cfg.loss.focal_gamma])?;
    w.dim("D_t", dims.text)?;
    w.dim("D_v", dims.video)?;
    w.dim("D_a", dims.attn)?;
    write_encoder(&mut w, &ckpt.encoder, ckpt.seed)?;
    for s in ckpt.model.slices() {
        w.reals(s)?;
    }
    Ok(w.0)
}

pub fn decode_grounder_checkpoint(bytes: &[u8], path: &Path) -> Result<GrounderCheckpoint> {
    let mut r = Reader::open(bytes, path, GROUNDER_MAGIC)?;
    let variant = match r.u8("variant")? {
        0 => FusionVariant::Concat,
        1 => FusionVariant::Add,
        2 => FusionVariant::CrossAttention,
        v => return Err(r.err(format!("unknown fusion variant code {v}"))),
    };
    let use_environment = match r.u8("use_environment")? {
        0 => false,
        1 => true,
        v => return Err(r.err(format!("use_environment must be 0 or 1, got {v}"))),
    };
    let suite = match r.u8("suite")? {
        0 => LossSuite::SpanQgh,
        1 => LossSuite::FocalDiou,
        v => return Err(r.err(format!("unknown loss suite code {v}"))),
    };
    if r.u8("reserved")? != 0 {
        return Err(r.err("reserved field is not zero"));
    }
    let mut loss_params = [0.0; 3];
    r.reals_into(&mut loss_params, "loss parameters")?;
    let loss = VlgLossConfig {
        suite,
        qgh_extension: loss_params[0],
        focal_alpha: loss_params[1],
        focal_gamma: loss_params[2],
    };
    loss.validate().map_err(|e| r.err(e.to_string()))?;

    let d_t = r.dim("D_t")?;
    let d_v = r.dim("D_v")?;
    let d_a = r.dim("D_a")?;
    if d_t == 0 || d_v == 0 || d_a == 0 {
        return Err(r.err("model dims must be >= 1"));
    }
    let (encoder, seed) = read_encoder(&mut r)?;
    if encoder.dim() != d_t {
        return Err(r.err(format!("encoder D_t {} vs model D_t {d_t}", encoder.dim())));
    }
    let mut model = GroundingModel::zeros(d_t, d_v, d_a);
    r.expect_payload(model.num_params() as u128, "model parameters")?;
    for s in model.slices_mut() {
        r.reals_into(s, "model parameters")?;
    }
    r.finish()?;
    Ok(GrounderCheckpoint {
        encoder,
        seed,
        config: ModelConfig {
            variant,
            use_environment,
            loss,
        },
        model,
    })
}
