//! The environment encoder: a hash-bucket bag-of-words text encoder shared by
//! captions and queries, its contrastive losses, and its trainer.
//!
//! `encode(text) = normalize(P · mean(table[tokens]) + b)`. Normalization can
//! be switched off, in which case scores are raw dot products.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interval::{CaptionTrack, GroundingSample, Interval, TimeUnit, VideoMeta};
use crate::numerics::{dot, logsumexp, sigmoid, softplus, AdamWConfig, AdamWState, Matrix, ParamSet};

pub const DEFAULT_VOCAB: usize = 4096;
pub const DEFAULT_DIM: usize = 64;

/// Token id reserved for text with no alphanumeric content.
pub const EMPTY_TOKEN: usize = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases, splits on runs of non-alphanumeric characters and hashes each
/// token into `[0, vocab)`.
pub fn tokenize(text: &str, vocab: usize) -> Vec<usize> {
    debug_assert!(vocab >= 2);
    let lower = text.to_lowercase();
    let ids: Vec<usize> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a64(t.as_bytes()) % vocab as u64) as usize)
        .collect();
    if ids.is_empty() {
        vec![EMPTY_TOKEN]
    } else {
        ids
    }
}

/// Frame indices sampled every `interval_s` seconds from t = 0.
pub fn subsample_frames(video: &VideoMeta, interval_s: f64) -> Result<Vec<usize>> {
    if !(interval_s > 0.0 && interval_s.is_finite()) {
        return Err(Error::invalid("interval_s", format!("must be > 0, got {interval_s}")));
    }
    let n = ((video.duration_s / interval_s - 1e-9).ceil() as usize).max(1);
    Ok((0..n)
        .map(|i| {
            let t = i as f64 * interval_s;
            ((t * video.fps + 1e-9).floor() as usize + 1).min(video.frame_count)
        })
        .collect())
}

/// Learnable encoder weights θ.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    /// `V × D_t`
    pub token_table: Matrix,
    /// `D_t × D_t`, applied as `P · e`.
    pub projection: Matrix,
    pub bias: Vec<f64>,
}

impl TextEncoderParams {
    pub fn init(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || dim < 2 {
            return Err(Error::invalid("dims", format!("need V >= 2 and D_t >= 2, got {vocab}, {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let token_table = Matrix::from_fn(vocab, dim, |_, _| rng.random_range(-1.0..1.0) * scale);
        Ok(Self {
            token_table,
            projection: Matrix::identity(dim),
            bias: vec![0.0; dim],
        })
    }

    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            token_table: Matrix::zeros(vocab, dim),
            projection: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.dim())
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.rows()
    }

    pub fn dim(&self) -> usize {
        self.token_table.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (v, d) = self.token_table.shape();
        if v < 2 || d < 2 {
            return Err(Error::invalid("dims", format!("need V >= 2 and D_t >= 2, got {v}, {d}")));
        }
        if self.projection.shape() != (d, d) || self.bias.len() != d {
            return Err(Error::shape("TextEncoderParams", "projection/bias do not match D_t"));
        }
        if !ParamSet::is_finite(self) {
            return Err(Error::NonFinite("encoder parameters"));
        }
        Ok(())
    }
}

impl ParamSet for TextEncoderParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.token_table.data(), self.projection.data(), &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.token_table.data_mut(),
            self.projection.data_mut(),
            &mut self.bias,
        ]
    }
}

/// Encoder weights plus the output-normalization switch.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub params: TextEncoderParams,
    pub normalize: bool,
}

/// Forward intermediates for one text, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<usize>,
    pooled: Vec<f64>,
    norm: f64,
    pub output: Vec<f64>,
}

impl TextEncoder {
    pub fn new(params: TextEncoderParams, normalize: bool) -> Self {
        Self { params, normalize }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn forward(&self, text: &str) -> TextCache {
        self.forward_tokens(tokenize(text, self.params.vocab_size()))
    }

    fn forward_tokens(&self, mut tokens: Vec<usize>) -> TextCache {
        // Summation order fixed by token id so equal multisets pool bit-identically.
        tokens.sort_unstable();
        let d = self.dim();
        let mut pooled = vec![0.0; d];
        for &t in &tokens {
            for (p, &x) in pooled.iter_mut().zip(self.params.token_table.row(t)) {
                *p += x;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);

        let mut u = self.params.projection.mul_vec(&pooled).expect("square projection");
        for (x, b) in u.iter_mut().zip(&self.params.bias) {
            *x += b;
        }
        let mut norm = 1.0;
        if self.normalize {
            norm = dot(&u, &u).sqrt().max(1e-12);
            u.iter_mut().for_each(|x| *x /= norm);
        }
        TextCache {
            tokens,
            pooled,
            norm,
            output: u,
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<f64> {
        self.forward(text).output
    }

    /// `Z_e`: one row per caption.
    pub fn encode_captions(&self, track: &CaptionTrack) -> Matrix {
        let rows: Vec<Vec<f64>> = track.texts().map(|t| self.encode_text(t)).collect();
        Matrix::from_fn(rows.len(), self.dim(), |r, c| rows[r][c])
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output` for one text.
    pub fn backward(&self, cache: &TextCache, d_out: &[f64], grads: &mut TextEncoderParams) {
        let d = self.dim();
        let du: Vec<f64> = if self.normalize {
            let z = &cache.output;
            let zg = dot(z, d_out);
            d_out
                .iter()
                .zip(z)
                .map(|(g, zi)| (g - zi * zg) / cache.norm)
                .collect()
        } else {
            d_out.to_vec()
        };
        for (gb, x) in grads.bias.iter_mut().zip(&du) {
            *gb += x;
        }
        grads.projection.add_outer(1.0, &du, &cache.pooled);
        let de = self.params.projection.vec_mul(&du).expect("square projection");
        let inv = 1.0 / cache.tokens.len() as f64;
        for &t in &cache.tokens {
            let row = grads.token_table.row_mut(t);
            for k in 0..d {
                row[k] += de[k] * inv;
            }
        }
    }
}

/// 1-based inclusive caption index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionSpan {
    pub start: usize,
    pub end: usize,
}

impl CaptionSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.start < 1 || self.start > self.end || self.end > n {
            return Err(Error::invalid(
                "gt_caption_span",
                format!("({}, {}) outside [1, {n}]", self.start, self.end),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }
}

/// Loss value with gradients w.r.t. the caption matrix and query vector.
#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_captions: Matrix,
    pub d_query: Vec<f64>,
}

fn caption_scores(captions: &Matrix, query: &[f64]) -> Result<Vec<f64>> {
    if captions.cols() != query.len() {
        return Err(Error::shape(
            "caption_scores",
            format!("captions {:?} vs query {}", captions.shape(), query.len()),
        ));
    }
    Ok((0..captions.rows()).map(|i| dot(captions.row(i), query)).collect())
}

/// Chains `∂L/∂score_i` back to the caption rows and the query.
fn chain_scores(captions: &Matrix, query: &[f64], d_scores: &[f64], loss: f64) -> ContrastiveGrad {
    let mut d_captions = Matrix::zeros(captions.rows(), captions.cols());
    let mut d_query = vec![0.0; query.len()];
    for (i, &g) in d_scores.iter().enumerate() {
        for (dc, &q) in d_captions.row_mut(i).iter_mut().zip(query) {
            *dc = g * q;
        }
        for (dq, &c) in d_query.iter_mut().zip(captions.row(i)) {
            *dq += g * c;
        }
    }
    ContrastiveGrad {
        loss,
        d_captions,
        d_query,
    }
}

/// Marginal log-likelihood of the GT captions under a softmax over all
/// caption-query dot products.
pub fn mll_loss(captions: &Matrix, query: &[f64], span: CaptionSpan) -> Result<ContrastiveGrad> {
    span.check(captions.rows())?;
    let scores = caption_scores(captions, query)?;
    let lse_all = logsumexp(scores.iter().copied());
    let inside = &scores[span.start - 1..span.end];
    let lse_in = logsumexp(inside.iter().copied());
    let loss = if span.start == 1 && span.end == scores.len() {
        0.0
    } else {
        (lse_all - lse_in).max(0.0)
    };
    let d_scores: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let p_all = (s - lse_all).exp();
            if span.contains(i + 1) {
                p_all - (s - lse_in).exp()
            } else {
                p_all
            }
        })
        .collect();
    Ok(chain_scores(captions, query, &d_scores, loss))
}

/// Mean binary cross-entropy of `σ(score_i)` against in-span labels.
pub fn bce_loss(captions: &Matrix, query: &[f64], span: CaptionSpan) -> Result<ContrastiveGrad> {
    span.check(captions.rows())?;
    let scores = caption_scores(captions, query)?;
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut d_scores = Vec::with_capacity(scores.len());
    for (i, &s) in scores.iter().enumerate() {
        let y = if span.contains(i + 1) { 1.0 } else { 0.0 };
        // −log σ(s) = softplus(−s), −log(1−σ(s)) = softplus(s)
        loss += y * softplus(-s) + (1.0 - y) * softplus(s);
        d_scores.push((sigmoid(s) - y) / n);
    }
    Ok(chain_scores(captions, query, &d_scores, loss / n))
}

/// Maps a GT interval in seconds onto caption indices.
///
/// Picks captions whose timestamp lies within half a caption interval of the
/// GT, falling back to the caption nearest the GT midpoint.
pub fn map_gt_to_caption_span(gt: &Interval, track: &CaptionTrack) -> Result<CaptionSpan> {
    if gt.unit() != TimeUnit::Seconds {
        return Err(Error::UnitMismatch(gt.unit(), TimeUnit::Seconds));
    }
    if track.is_empty() {
        return Err(Error::invalid("track", "empty caption track"));
    }
    let slack = track.interval_s() / 2.0;
    let entries = track.entries();
    let s = entries.iter().find(|e| e.time_s >= gt.start() - slack).map(|e| e.index);
    let e = entries.iter().rev().find(|e| e.time_s <= gt.end() + slack).map(|e| e.index);
    if let (Some(s), Some(e)) = (s, e) {
        if s <= e {
            return Ok(CaptionSpan::new(s, e));
        }
    }
    let mid = (gt.start() + gt.end()) / 2.0;
    let nearest = entries
        .iter()
        .min_by(|a, b| (a.time_s - mid).abs().total_cmp(&(b.time_s - mid).abs()))
        .expect("non-empty track");
    Ok(CaptionSpan::new(nearest.index, nearest.index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncoderLoss {
    #[default]
    Mll,
    Bce,
}

impl std::str::FromStr for EncoderLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mll" => Ok(Self::Mll),
            "bce" => Ok(Self::Bce),
            other => Err(format!("unknown encoder loss `{other}` (expected mll|bce)")),
        }
    }
}

impl std::fmt::Display for EncoderLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mll => "mll",
            Self::Bce => "bce",
        })
    }
}

impl EncoderLoss {
    pub fn eval(self, captions: &Matrix, query: &[f64], span: CaptionSpan) -> Result<ContrastiveGrad> {
        match self {
            EncoderLoss::Mll => mll_loss(captions, query, span),
            EncoderLoss::Bce => bce_loss(captions, query, span),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub loss: EncoderLoss,
    pub optimizer: AdamWConfig,
}

/// Per-epoch mean training loss and skipped-sample count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub skipped: usize,
    pub steps: u64,
}

/// One forward/backward pass for a sample; returns the loss.
pub fn encoder_sample_grad(
    encoder: &TextEncoder,
    captions: &CaptionTrack,
    query: &str,
    span: CaptionSpan,
    loss: EncoderLoss,
    grads: &mut TextEncoderParams,
) -> Result<f64> {
    let caches: Vec<TextCache> = captions.texts().map(|t| encoder.forward(t)).collect();
    let z_e = Matrix::from_fn(caches.len(), encoder.dim(), |r, c| caches[r].output[c]);
    let q_cache = encoder.forward(query);
    let out = loss.eval(&z_e, &q_cache.output, span)?;
    for (i, cache) in caches.iter().enumerate() {
        encoder.backward(cache, out.d_captions.row(i), grads);
    }
    encoder.backward(&q_cache, &out.d_query, grads);
    Ok(out.loss)
}

/// Fine-tunes the encoder with batch size 1 over a seeded per-epoch shuffle.
pub fn train_encoder(
    dataset: &[GroundingSample],
    init: TextEncoder,
    config: &EncoderTrainConfig,
) -> Result<(TextEncoder, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "empty training set"));
    }
    init.params.validate()?;
    config.optimizer.validate()?;

    let mut log = TrainLog::default();
    let mut usable = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        if s.gt.length() <= 0.0 {
            warn!("skipping query {}: zero-length ground truth", s.query_id);
            log.skipped += 1;
            continue;
        }
        match map_gt_to_caption_span(&s.gt, &s.captions) {
            Ok(span) => usable.push((i, span)),
            Err(e) => {
                warn!("skipping query {}: {e}", s.query_id);
                log.skipped += 1;
            }
        }
    }
    if usable.is_empty() || config.epochs == 0 {
        return Ok((init, log));
    }

    let mut encoder = init;
    let mut opt = AdamWState::for_params(config.optimizer, &encoder.params);
    let mut grads = encoder.params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let (i, span) = usable[k];
            let s = &dataset[i];
            grads.zero();
            total += encoder_sample_grad(&encoder, &s.captions, &s.query, span, config.loss, &mut grads)?;
            opt.step_params(&mut encoder.params, &grads)?;
        }
        log.epoch_losses.push(total / usable.len() as f64);
    }
    log.steps = opt.step_count();
    Ok((encoder, log))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::numerics::{grad_check, norm};

    fn track(n: usize, interval: f64) -> CaptionTrack {
        CaptionTrack::new(
            "v",
            (0..n).map(|i| (i as f64 * interval, format!("caption {i}"))).collect(),
            interval,
        )
        .unwrap()
    }

    fn secs(a: f64, b: f64) -> Interval {
        Interval::seconds(a, b).unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        // Independent reference: the published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("", 1024), vec![EMPTY_TOKEN]);
        assert_eq!(tokenize("  ,;  ", 1024), vec![EMPTY_TOKEN]);
        let t = tokenize("Kitchen kitchen KITCHEN", 1024);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|&x| x == t[0]));
        // FNV-1a-64 computed in Python: 0x14fa789a32ea36cd % 1024, 0xd0013bb2e083188b % 1024
        assert_eq!(tokenize("chopping board", 1024), vec![717, 139]);
        assert_eq!(tokenize("chopping-board!", 1024), vec![717, 139]);
    }

    #[test]
    fn subsample_grid() {
        let v = VideoMeta::new("v", 60.0, 30.0).unwrap();
        assert_eq!(subsample_frames(&v, 10.0).unwrap(), vec![1, 301, 601, 901, 1201, 1501]);
        let v = VideoMeta::new("v", 5.0, 30.0).unwrap();
        assert_eq!(subsample_frames(&v, 10.0).unwrap(), vec![1]);
        let v = VideoMeta::new("v", 95.0, 1.0).unwrap();
        assert_eq!(subsample_frames(&v, 10.0).unwrap().len(), 10);
        assert!(subsample_frames(&v, 0.0).is_err());
    }

    fn encoder(seed: u64) -> TextEncoder {
        let mut p = TextEncoderParams::init(64, 8, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for x in p.projection.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        for x in &mut p.bias {
            *x = rng.random_range(-0.1..0.1);
        }
        TextEncoder::new(p, true)
    }

    #[test]
    fn single_token_encoding() {
        let enc = encoder(1);
        let tok = tokenize("stove", 64)[0];
        let mut u = enc.params.projection.mul_vec(enc.params.token_table.row(tok)).unwrap();
        for (x, b) in u.iter_mut().zip(&enc.params.bias) {
            *x += b;
        }
        let n = norm(&u);
        let want: Vec<f64> = u.iter().map(|x| x / n).collect();
        let got = enc.encode_text("stove");
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_is_order_free_and_unit_norm() {
        let enc = encoder(3);
        assert_eq!(enc.encode_text("red cup on table"), enc.encode_text("table cup red on"));
        for text in ["a", "the kitchen sink", "", "x y z w v u"] {
            assert!((norm(&enc.encode_text(text)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_captions_rows() {
        let enc = encoder(4);
        let one = CaptionTrack::new("v", vec![(0.0, "only one".into())], 10.0).unwrap();
        let z = enc.encode_captions(&one);
        assert_eq!(z.shape(), (1, 8));
        assert_eq!(z.row(0), enc.encode_text("only one").as_slice());

        let a = CaptionTrack::new("v", vec![(0.0, "x".into()), (10.0, "y".into()), (20.0, "z".into())], 10.0).unwrap();
        let b = CaptionTrack::new("v", vec![(0.0, "z".into()), (10.0, "x".into()), (20.0, "y".into())], 10.0).unwrap();
        let (za, zb) = (enc.encode_captions(&a), enc.encode_captions(&b));
        assert_eq!(za.row(0), zb.row(1));
        assert_eq!(za.row(1), zb.row(2));
        assert_eq!(za.row(2), zb.row(0));
        for r in 0..3 {
            assert!((norm(za.row(r)) - 1.0).abs() < 1e-9);
        }
    }

    fn scores_as_captions(scores: &[f64]) -> (Matrix, Vec<f64>) {
        // row i = [score_i, 0], query = [1, 0] so that z_i·z_q = score_i
        let m = Matrix::from_fn(scores.len(), 2, |r, c| if c == 0 { scores[r] } else { 0.0 });
        (m, vec![1.0, 0.0])
    }

    #[test]
    fn mll_examples() {
        let (z, q) = scores_as_captions(&[0.7]);
        assert_eq!(mll_loss(&z, &q, CaptionSpan::new(1, 1)).unwrap().loss, 0.0);

        let (z, q) = scores_as_captions(&[0.3; 4]);
        let l = mll_loss(&z, &q, CaptionSpan::new(2, 3)).unwrap().loss;
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let (z, q) = scores_as_captions(&[1.0, 2.0, 3.0]);
        let l = mll_loss(&z, &q, CaptionSpan::new(2, 2)).unwrap().loss;
        assert!((l - 1.407_605_964_444_380_3).abs() < 1e-12, "{l}");

        assert!(mll_loss(&z, &q, CaptionSpan::new(0, 1)).is_err());
        assert!(mll_loss(&z, &q, CaptionSpan::new(2, 4)).is_err());
    }

    #[test]
    fn bce_examples() {
        let (z, q) = scores_as_captions(&[0.0, 0.0]);
        for span in [CaptionSpan::new(1, 1), CaptionSpan::new(1, 2)] {
            assert!((bce_loss(&z, &q, span).unwrap().loss - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let (z, q) = scores_as_captions(&[20.0, 20.0, -20.0, -20.0]);
        assert!(bce_loss(&z, &q, CaptionSpan::new(1, 2)).unwrap().loss < 1e-8);

        // mpmath: (2 ln(1 + e⁻¹) + ln 2) / 3
        let (z, q) = scores_as_captions(&[1.0, -1.0, 0.0]);
        let l = bce_loss(&z, &q, CaptionSpan::new(1, 1)).unwrap().loss;
        assert!((l - 0.439_890_185_198_796_99).abs() < 1e-14, "{l}");
    }

    #[test]
    fn mll_monotone_in_inside_score() {
        let mut scores = vec![0.2, -0.4, 1.1, 0.5, 0.0];
        let span = CaptionSpan::new(2, 3);
        let (z, q) = scores_as_captions(&scores);
        let before = mll_loss(&z, &q, span).unwrap().loss;
        scores[1] += 0.1;
        let (z, q) = scores_as_captions(&scores);
        assert!(mll_loss(&z, &q, span).unwrap().loss < before);
    }

    fn random_instance(seed: u64, n: usize, d: usize) -> (Matrix, Vec<f64>, CaptionSpan) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = rng.random_range(1..=n);
        let e = rng.random_range(s..=n);
        (z, q, CaptionSpan::new(s, e))
    }

    #[test]
    fn contrastive_gradients_pass_grad_check() {
        for loss in [EncoderLoss::Mll, EncoderLoss::Bce] {
            for seed in 0..10 {
                let (z, q, span) = random_instance(seed, 6, 4);
                let g = loss.eval(&z, &q, span).unwrap();
                let err = grad_check(
                    |x| loss.eval(&Matrix::from_vec(6, 4, x.to_vec()).unwrap(), &q, span).unwrap().loss,
                    g.d_captions.data(),
                    z.data(),
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{loss:?} seed {seed} captions: {err}");
                let err = grad_check(|x| loss.eval(&z, x, span).unwrap().loss, &g.d_query, &q, 1e-5).unwrap();
                assert!(err < 1e-4, "{loss:?} seed {seed} query: {err}");
            }
        }
    }

    #[test]
    fn encoder_parameter_gradients_pass_grad_check() {
        for normalize in [true, false] {
            for seed in 0..3 {
                let mut enc = encoder(seed);
                enc.normalize = normalize;
                let tr = track(4, 10.0);
                let span = CaptionSpan::new(2, 3);
                let mut grads = enc.params.zeros_like();
                encoder_sample_grad(&enc, &tr, "caption 2 query", span, EncoderLoss::Mll, &mut grads).unwrap();
                let x = enc.params.flatten();
                let f = |p: &[f64]| {
                    let mut e = enc.clone();
                    e.params.assign_flat(p).unwrap();
                    let mut scratch = e.params.zeros_like();
                    encoder_sample_grad(&e, &tr, "caption 2 query", span, EncoderLoss::Mll, &mut scratch).unwrap()
                };
                let err = grad_check(f, &grads.flatten(), &x, 1e-5).unwrap();
                assert!(err < 1e-4, "normalize={normalize} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn caption_span_mapping() {
        let tr = track(6, 10.0);
        assert_eq!(map_gt_to_caption_span(&secs(18.0, 32.0), &tr).unwrap(), CaptionSpan::new(3, 4));
        assert_eq!(map_gt_to_caption_span(&secs(0.0, 60.0), &tr).unwrap(), CaptionSpan::new(1, 6));
        assert_eq!(map_gt_to_caption_span(&secs(0.0, 0.1), &tr).unwrap(), CaptionSpan::new(1, 1));
        // No caption within slack: falls back to the nearest one.
        let sparse = track(3, 100.0);
        assert_eq!(map_gt_to_caption_span(&secs(120.0, 125.0), &sparse).unwrap(), CaptionSpan::new(2, 2));
    }

    fn separable_sample() -> GroundingSample {
        let video = VideoMeta::new("v", 40.0, 1.0).unwrap();
        let captions = CaptionTrack::new(
            "v",
            vec![
                (0.0, "garage tools bench".into()),
                (10.0, "kitchen stove pan".into()),
                (20.0, "garden hose grass".into()),
                (30.0, "bedroom lamp bed".into()),
            ],
            10.0,
        )
        .unwrap();
        let features = Matrix::zeros(40, 2);
        GroundingSample::new("q0", video, captions, "where was the stove", secs(10.0, 14.0), features).unwrap()
    }

    fn cfg(epochs: usize) -> EncoderTrainConfig {
        EncoderTrainConfig {
            epochs,
            seed: 9,
            loss: EncoderLoss::Mll,
            optimizer: AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            },
        }
    }

    #[test]
    fn trainer_fits_a_separable_sample() {
        let data = vec![separable_sample()];
        let init = TextEncoder::new(TextEncoderParams::init(256, 16, 5).unwrap(), false);
        let (trained, log) = train_encoder(&data, init, &cfg(200)).unwrap();
        assert_eq!(log.steps, 200);
        let last = *log.epoch_losses.last().unwrap();
        assert!(last < 1e-3, "final loss {last}");
        assert!(last <= log.epoch_losses[0]);
        let span = map_gt_to_caption_span(&data[0].gt, &data[0].captions).unwrap();
        let z = trained.encode_captions(&data[0].captions);
        let q = trained.encode_text(&data[0].query);
        assert!(mll_loss(&z, &q, span).unwrap().loss < 1e-3);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let data = vec![separable_sample()];
        let init = TextEncoder::new(TextEncoderParams::init(128, 8, 2).unwrap(), true);
        let (same, log) = train_encoder(&data, init.clone(), &cfg(0)).unwrap();
        assert_eq!(same, init);
        assert!(log.epoch_losses.is_empty());

        let a = train_encoder(&data, init.clone(), &cfg(5)).unwrap();
        let b = train_encoder(&data, init, &cfg(5)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_length_gt_is_skipped() {
        let mut s = separable_sample();
        s.gt = secs(12.0, 12.0);
        let init = TextEncoder::new(TextEncoderParams::init(64, 4, 1).unwrap(), true);
        let (_, log) = train_encoder(&[s], init, &cfg(3)).unwrap();
        assert_eq!(log.skipped, 1);
        assert!(log.epoch_losses.is_empty());
    }

    proptest! {
        #[test]
        fn full_span_mll_is_zero(seed in 0u64..1000, n in 1usize..12) {
            let (z, q, _) = random_instance(seed, n, 3);
            prop_assert_eq!(mll_loss(&z, &q, CaptionSpan::new(1, n)).unwrap().loss, 0.0);
        }

        #[test]
        fn uniform_scores_give_log_ratio(n in 1usize..20, c in -5.0..5.0f64, s in 1usize..20, len in 0usize..20) {
            prop_assume!(s <= n);
            let e = (s + len).min(n);
            let (z, q) = scores_as_captions(&vec![c; n]);
            let l = mll_loss(&z, &q, CaptionSpan::new(s, e)).unwrap().loss;
            let want = -(((e - s + 1) as f64) / n as f64).ln();
            prop_assert!((l - want).abs() < 1e-9);
        }
    }
}
