//! Recall@IoU metrics and the caption-only grounding protocol.

use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::interval::{coverage_of, frames_to_seconds, interval_iou, Candidate, GroundingSample, Interval, PredictionSet, TimeUnit};
use crate::numerics::{dot, Matrix};

pub const THRESHOLDS: [f64; 2] = [0.3, 0.5];
pub const TOP_KS: [usize; 2] = [1, 5];
/// Window length of the caption-only protocol.
pub const DEFAULT_SPAN_S: f64 = 30.0;

/// The annotation side of one evaluated query.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub query_id: String,
    /// In seconds.
    pub gt: Interval,
    pub duration_s: f64,
}

impl From<&GroundingSample> for GroundTruth {
    fn from(s: &GroundingSample) -> Self {
        Self {
            query_id: s.query_id.clone(),
            gt: s.gt,
            duration_s: s.video.duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleScore {
    pub query_id: String,
    /// IoU of the rank-1 candidate.
    pub best_rank_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub r1_03: f64,
    pub r5_03: f64,
    pub r1_05: f64,
    pub r5_05: f64,
    pub n_samples: usize,
    pub gt_coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleScore>>,
}

impl MetricReport {
    /// Recall cells are probabilities, non-decreasing in `k` and
    /// non-increasing in the threshold.
    pub fn check_invariants(&self) -> Result<()> {
        let cells = [self.r1_03, self.r5_03, self.r1_05, self.r5_05, self.gt_coverage];
        if cells.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("report", "metric outside [0, 1]"));
        }
        if self.r5_03 < self.r1_03 || self.r5_05 < self.r1_05 {
            return Err(Error::invalid("report", "R5 below R1"));
        }
        if self.r1_05 > self.r1_03 || self.r5_05 > self.r5_03 {
            return Err(Error::invalid("report", "recall at IoU 0.5 exceeds recall at 0.3"));
        }
        if let Some(p) = &self.per_sample {
            if p.len() != self.n_samples {
                return Err(Error::invalid("report", "per-sample list length differs from n_samples"));
            }
        }
        Ok(())
    }
}

fn check_k_threshold(k: usize, threshold: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid("threshold", format!("must be in (0, 1], got {threshold}")));
    }
    Ok(())
}

/// Whether any of the top `k` candidates reaches IoU `≥ threshold`.
pub fn recall_at(preds: &PredictionSet, gt: &Interval, k: usize, threshold: f64) -> Result<bool> {
    check_k_threshold(k, threshold)?;
    for c in preds.candidates().iter().take(k) {
        if interval_iou(&c.interval, gt)? >= threshold {
            return Ok(true);
        }
    }
    Ok(false)
}

fn check_aligned(preds: &[PredictionSet], gts: &[GroundTruth]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("predictions", "nothing to evaluate"));
    }
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "predictions",
            format!("{} prediction sets for {} ground truths", preds.len(), gts.len()),
        ));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.query_id() != g.query_id {
            return Err(Error::invalid(
                "predictions",
                format!("position {i}: prediction for {} but ground truth for {}", p.query_id(), g.query_id),
            ));
        }
    }
    Ok(())
}

/// Mean recall for every `(threshold, k)` pair; `table[t][k]`.
pub fn recall_table(preds: &[PredictionSet], gts: &[GroundTruth], thresholds: &[f64], ks: &[usize]) -> Result<Vec<Vec<f64>>> {
    check_aligned(preds, gts)?;
    let n = preds.len() as f64;
    thresholds
        .iter()
        .map(|&t| {
            ks.iter()
                .map(|&k| {
                    let mut hits = 0usize;
                    for (p, g) in preds.iter().zip(gts) {
                        hits += usize::from(recall_at(p, &g.gt, k, t)?);
                    }
                    Ok(hits as f64 / n)
                })
                .collect()
        })
        .collect()
}

/// R1/R5 at IoU 0.3/0.5 over aligned prediction and annotation lists.
pub fn evaluate(preds: &[PredictionSet], gts: &[GroundTruth]) -> Result<MetricReport> {
    let t = recall_table(preds, gts, &THRESHOLDS, &TOP_KS)?;
    let per_sample = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            Ok(SampleScore {
                query_id: g.query_id.clone(),
                best_rank_iou: interval_iou(&p.top().interval, &g.gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        r1_03: t[0][0],
        r5_03: t[0][1],
        r1_05: t[1][0],
        r5_05: t[1][1],
        n_samples: preds.len(),
        gt_coverage: coverage_of(gts.iter().map(|g| (g.gt.length(), g.duration_s)))?,
        per_sample: Some(per_sample),
    })
}

/// Frame window of the caption-only protocol around 1-based caption `i_star`
/// of `n`, on a video of `m` frames.
///
/// `j* = ⌊i*·M/N + ½⌋`, `ŝ = ⌊j* − M_span/2⌋`, `ê = ⌈j* + M_span/2⌉`, with
/// `M_span = round(span_s · fps)` and both ends clamped to `[1, M]`.
pub fn text_only_window(i_star: usize, n: usize, m: usize, fps: f64, span_s: f64) -> Result<Interval> {
    if n == 0 || m == 0 || i_star == 0 || i_star > n {
        return Err(Error::invalid("i_star", format!("caption {i_star} of {n} on {m} frames")));
    }
    if !(span_s > 0.0 && span_s.is_finite()) || !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::invalid("span_s", format!("span {span_s} s at {fps} fps")));
    }
    let (i, n, m) = (i_star as i64, n as i64, m as i64);
    // ⌊(2 i M + N) / 2N⌋ without rounding error.
    let j = (2 * i * m + n).div_euclid(2 * n);
    let span = (span_s * fps).round() as i64;
    // ⌊j − span/2⌋ and ⌈j + span/2⌉ both move ⌈span/2⌉ frames from j.
    let half = (span + 1) / 2;
    let (lo, hi) = (j - half, j + half);
    let s = lo.clamp(1, m);
    let e = hi.clamp(s, m);
    Interval::frames(s as usize, e as usize)
}

/// Ties resolve to the lowest index.
fn argmax_caption(z_e: &Matrix, z_q: &[f64]) -> Result<(usize, f64)> {
    if z_e.cols() != z_q.len() || z_e.rows() == 0 {
        return Err(Error::shape("text_only_predict", format!("Z_e {:?} vs z_q {}", z_e.shape(), z_q.len())));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for r in 0..z_e.rows() {
        let s = dot(z_e.row(r), z_q);
        if s > best.1 {
            best = (r, s);
        }
    }
    Ok(best)
}

/// Fixed-width window around the caption most similar to the query.
pub fn text_only_predict(z_e: &Matrix, z_q: &[f64], video: &crate::interval::VideoMeta, span_s: f64) -> Result<Interval> {
    let (i, _) = argmax_caption(z_e, z_q)?;
    text_only_window(i + 1, z_e.rows(), video.frame_count, video.fps, span_s)
}

/// Caption-only evaluation with caller-supplied embeddings.
pub fn text_only_evaluate_with<F>(samples: &[GroundingSample], span_s: f64, mut embed: F) -> Result<MetricReport>
where
    F: FnMut(&GroundingSample) -> Result<(Matrix, Vec<f64>)>,
{
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let (z_e, z_q) = embed(s)?;
        let (i, score) = argmax_caption(&z_e, &z_q)?;
        let frames = text_only_window(i + 1, z_e.rows(), s.video.frame_count, s.video.fps, span_s)?;
        debug_assert_eq!(frames.unit(), TimeUnit::Frames);
        preds.push(PredictionSet::new(
            s.query_id.clone(),
            vec![Candidate {
                interval: frames_to_seconds(&frames, s.video.fps)?,
                score,
            }],
        )?);
    }
    let gts: Vec<GroundTruth> = samples.iter().map(GroundTruth::from).collect();
    evaluate(&preds, &gts)
}

/// Caption-only evaluation with embeddings from `encoder`. With a single
/// candidate per query the R5 cells equal the R1 cells.
pub fn text_only_evaluate(samples: &[GroundingSample], encoder: &TextEncoder, span_s: f64) -> Result<MetricReport> {
    text_only_evaluate_with(samples, span_s, |s| Ok((encoder.encode_captions(&s.captions), encoder.encode_text(&s.query))))
}
