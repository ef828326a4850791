//! Shared domain types: intervals, video metadata, caption tracks, samples and
//! ranked predictions.
//!
//! Frame indices are 1-based. Frame `i` covers `[(i−1)/fps, i/fps)` seconds, so
//! a frame interval `[s, e]` is inclusive at both ends and spans `e − s + 1`
//! frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Slack used when snapping seconds onto the frame grid.
const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    Seconds,
    Frames,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    start: f64,
    end: f64,
    unit: TimeUnit,
}

impl Interval {
    pub fn seconds(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::NonFinite("interval endpoints"));
        }
        if start > end {
            return Err(Error::invalid("interval", format!("start {start} > end {end}")));
        }
        Ok(Self {
            start,
            end,
            unit: TimeUnit::Seconds,
        })
    }

    /// Inclusive 1-based frame interval.
    pub fn frames(start: usize, end: usize) -> Result<Self> {
        if start == 0 {
            return Err(Error::invalid("interval", "frame indices are 1-based"));
        }
        if start > end {
            return Err(Error::invalid("interval", format!("start frame {start} > end frame {end}")));
        }
        Ok(Self {
            start: start as f64,
            end: end as f64,
            unit: TimeUnit::Frames,
        })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn unit(&self) -> TimeUnit {
        self.unit
    }

    pub fn start_frame(&self) -> usize {
        debug_assert_eq!(self.unit, TimeUnit::Frames);
        self.start as usize
    }

    pub fn end_frame(&self) -> usize {
        debug_assert_eq!(self.unit, TimeUnit::Frames);
        self.end as usize
    }

    /// Extent on the continuous time axis of this interval's unit. A frame
    /// interval `[s, e]` occupies `[s − 1, e]`.
    fn extent(&self) -> (f64, f64) {
        match self.unit {
            TimeUnit::Seconds => (self.start, self.end),
            TimeUnit::Frames => (self.start - 1.0, self.end),
        }
    }

    pub fn length(&self) -> f64 {
        let (a, b) = self.extent();
        b - a
    }
}

/// Temporal intersection-over-union.
///
/// Two identical zero-length intervals score 1; any other pair with an empty
/// union scores 0.
pub fn interval_iou(a: &Interval, b: &Interval) -> Result<f64> {
    if a.unit != b.unit {
        return Err(Error::UnitMismatch(a.unit, b.unit));
    }
    let (a0, a1) = a.extent();
    let (b0, b1) = b.extent();
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    if union <= 0.0 {
        return Ok(if a0 == b0 && a1 == b1 { 1.0 } else { 0.0 });
    }
    Ok(inter / union)
}

pub fn frames_to_seconds(iv: &Interval, fps: f64) -> Result<Interval> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::invalid("fps", format!("must be > 0, got {fps}")));
    }
    if iv.unit != TimeUnit::Frames {
        return Err(Error::UnitMismatch(iv.unit, TimeUnit::Frames));
    }
    Interval::seconds((iv.start - 1.0) / fps, iv.end / fps)
}

/// Smallest frame interval covering `iv`, clamped to `[1, frame_count]`.
///
/// Returns `None` when the clamped span is empty (the interval lies entirely
/// outside the video).
pub fn seconds_to_frames(iv: &Interval, fps: f64, frame_count: usize) -> Result<Option<Interval>> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::invalid("fps", format!("must be > 0, got {fps}")));
    }
    if iv.unit != TimeUnit::Seconds {
        return Err(Error::UnitMismatch(iv.unit, TimeUnit::Seconds));
    }
    let first = ((iv.start * fps + GRID_EPS).floor() + 1.0).max(1.0);
    let last = (iv.end * fps - GRID_EPS).ceil().max(first).min(frame_count as f64);
    if first > frame_count as f64 || last < 1.0 {
        return Ok(None);
    }
    Interval::frames(first as usize, last as usize).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub duration_s: f64,
    pub fps: f64,
    pub frame_count: usize,
}

impl VideoMeta {
    pub fn new(video_id: impl Into<String>, duration_s: f64, fps: f64) -> Result<Self> {
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::invalid("duration_s", format!("must be > 0, got {duration_s}")));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::invalid("fps", format!("must be > 0, got {fps}")));
        }
        let frame_count = ((duration_s * fps).round() as usize).max(1);
        Ok(Self {
            video_id: video_id.into(),
            duration_s,
            fps,
            frame_count,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expect = Self::new(self.video_id.clone(), self.duration_s, self.fps)?;
        if expect.frame_count != self.frame_count {
            return Err(Error::invalid(
                "frame_count",
                format!(
                    "video {}: expected round(duration × fps) = {}, got {}",
                    self.video_id, expect.frame_count, self.frame_count
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    /// 1-based position in the track.
    pub index: usize,
    pub time_s: f64,
    pub text: String,
}

/// Timestamped environment captions for one video, on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTrack {
    video_id: String,
    entries: Vec<CaptionEntry>,
    interval_s: f64,
}

impl CaptionTrack {
    /// Builds a track from `(time_s, text)` pairs. Indices are assigned 1..N.
    pub fn new(
        video_id: impl Into<String>,
        captions: Vec<(f64, String)>,
        interval_s: f64,
    ) -> Result<Self> {
        if !(interval_s > 0.0 && interval_s.is_finite()) {
            return Err(Error::invalid("interval_s", format!("must be > 0, got {interval_s}")));
        }
        if captions.is_empty() {
            return Err(Error::invalid("captions", "a caption track needs at least one entry"));
        }
        for w in captions.windows(2) {
            let gap = w[1].0 - w[0].0;
            if !(gap > 0.0) {
                return Err(Error::invalid(
                    "captions",
                    format!("timestamps not strictly increasing at t={}", w[1].0),
                ));
            }
            if (gap - interval_s).abs() > 1e-6 {
                return Err(Error::invalid(
                    "captions",
                    format!("gap {gap} at t={} differs from interval {interval_s}", w[1].0),
                ));
            }
        }
        if captions.iter().any(|(t, _)| !t.is_finite()) {
            return Err(Error::NonFinite("caption time"));
        }
        let entries = captions
            .into_iter()
            .enumerate()
            .map(|(i, (time_s, text))| CaptionEntry {
                index: i + 1,
                time_s,
                text,
            })
            .collect();
        Ok(Self {
            video_id: video_id.into(),
            entries,
            interval_s,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn entries(&self) -> &[CaptionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn interval_s(&self) -> f64 {
        self.interval_s
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }
}

/// One query with its video, caption track, video features and GT moment.
#[derive(Debug, Clone)]
pub struct GroundingSample {
    pub query_id: String,
    pub video: VideoMeta,
    pub captions: CaptionTrack,
    pub query: String,
    /// Ground truth, in seconds.
    pub gt: Interval,
    /// `M × D_v` raw features.
    pub video_features: Matrix,
}

impl GroundingSample {
    pub fn new(
        query_id: impl Into<String>,
        video: VideoMeta,
        captions: CaptionTrack,
        query: impl Into<String>,
        gt: Interval,
        video_features: Matrix,
    ) -> Result<Self> {
        let s = Self {
            query_id: query_id.into(),
            video,
            captions,
            query: query.into(),
            gt,
            video_features,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        if self.gt.unit() != TimeUnit::Seconds {
            return Err(Error::UnitMismatch(self.gt.unit(), TimeUnit::Seconds));
        }
        if self.gt.start() < 0.0 || self.gt.end() > self.video.duration_s + GRID_EPS {
            return Err(Error::invalid(
                "gt",
                format!(
                    "query {}: [{}, {}] outside [0, {}]",
                    self.query_id,
                    self.gt.start(),
                    self.gt.end(),
                    self.video.duration_s
                ),
            ));
        }
        if self.captions.video_id() != self.video.video_id {
            return Err(Error::invalid(
                "captions",
                format!("track for {} attached to video {}", self.captions.video_id(), self.video.video_id),
            ));
        }
        if self.captions.len() > self.video.frame_count {
            return Err(Error::invalid(
                "captions",
                format!(
                    "video {}: {} captions exceed {} frames",
                    self.video.video_id,
                    self.captions.len(),
                    self.video.frame_count
                ),
            ));
        }
        if self.video_features.rows() != self.video.frame_count {
            return Err(Error::shape(
                "GroundingSample",
                format!(
                    "video {}: {} feature rows for {} frames",
                    self.video.video_id,
                    self.video_features.rows(),
                    self.video.frame_count
                ),
            ));
        }
        Ok(())
    }

    /// GT on the frame grid, or `None` if it covers no frame.
    pub fn gt_frames(&self) -> Option<Interval> {
        if self.gt.length() <= 0.0 {
            return None;
        }
        seconds_to_frames(&self.gt, self.video.fps, self.video.frame_count)
            .ok()
            .flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub interval: Interval,
    pub score: f64,
}

/// Ranked candidate moments for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    query_id: String,
    candidates: Vec<Candidate>,
}

impl PredictionSet {
    /// Validates that candidates are non-empty, same-unit, finite and sorted by
    /// non-increasing score.
    pub fn new(query_id: impl Into<String>, candidates: Vec<Candidate>) -> Result<Self> {
        let query_id = query_id.into();
        let Some(first) = candidates.first() else {
            return Err(Error::invalid("candidates", format!("query {query_id}: no candidates")));
        };
        let unit = first.interval.unit();
        for (i, c) in candidates.iter().enumerate() {
            if !c.score.is_finite() {
                return Err(Error::NonFinite("candidate score"));
            }
            if c.interval.unit() != unit {
                return Err(Error::UnitMismatch(unit, c.interval.unit()));
            }
            if i > 0 && c.score > candidates[i - 1].score {
                return Err(Error::invalid(
                    "candidates",
                    format!("query {query_id}: scores increase at rank {}", i + 1),
                ));
            }
        }
        Ok(Self {
            query_id,
            candidates,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn top(&self) -> &Candidate {
        &self.candidates[0]
    }
}

/// Mean ratio of GT length to video duration.
pub fn gt_coverage(samples: &[GroundingSample]) -> Result<f64> {
    coverage_of(samples.iter().map(|s| (s.gt.length(), s.video.duration_s)))
}

pub(crate) fn coverage_of(pairs: impl ExactSizeIterator<Item = (f64, f64)>) -> Result<f64> {
    let n = pairs.len();
    if n == 0 {
        return Err(Error::invalid("samples", "coverage of an empty set"));
    }
    Ok(pairs.map(|(len, dur)| len / dur).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn s(a: f64, b: f64) -> Interval {
        Interval::seconds(a, b).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(interval_iou(&s(0.0, 10.0), &s(0.0, 10.0)).unwrap(), 1.0);
        assert!((interval_iou(&s(0.0, 10.0), &s(5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(interval_iou(&s(0.0, 5.0), &s(6.0, 10.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_degenerate_points() {
        assert_eq!(interval_iou(&s(3.0, 3.0), &s(3.0, 3.0)).unwrap(), 1.0);
        assert_eq!(interval_iou(&s(3.0, 3.0), &s(4.0, 4.0)).unwrap(), 0.0);
        assert_eq!(interval_iou(&s(3.0, 3.0), &s(0.0, 4.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_unit_mismatch() {
        let f = Interval::frames(1, 3).unwrap();
        assert!(matches!(interval_iou(&f, &s(0.0, 1.0)), Err(Error::UnitMismatch(..))));
    }

    #[test]
    fn frame_iou_counts_inclusive_frames() {
        let a = Interval::frames(1, 4).unwrap();
        let b = Interval::frames(3, 6).unwrap();
        assert!((interval_iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(interval_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn frames_to_seconds_examples() {
        let cases = [((1, 30), 30.0, (0.0, 1.0)), ((31, 60), 30.0, (1.0, 2.0)), ((1, 1), 1.0, (0.0, 1.0))];
        for ((a, b), fps, (x, y)) in cases {
            let out = frames_to_seconds(&Interval::frames(a, b).unwrap(), fps).unwrap();
            assert_eq!((out.start(), out.end()), (x, y));
        }
        assert!(frames_to_seconds(&Interval::frames(1, 2).unwrap(), 0.0).is_err());
        assert!(frames_to_seconds(&s(0.0, 1.0), 30.0).is_err());
    }

    #[test]
    fn seconds_to_frames_covers_and_clamps() {
        let f = seconds_to_frames(&s(0.0, 1.0), 30.0, 300).unwrap().unwrap();
        assert_eq!((f.start_frame(), f.end_frame()), (1, 30));
        let f = seconds_to_frames(&s(0.5, 20.0), 1.0, 10).unwrap().unwrap();
        assert_eq!((f.start_frame(), f.end_frame()), (1, 10));
        assert!(seconds_to_frames(&s(11.0, 12.0), 1.0, 10).unwrap().is_none());
    }

    #[test]
    fn video_meta_frame_count() {
        let v = VideoMeta::new("v", 60.0, 30.0).unwrap();
        assert_eq!(v.frame_count, 1800);
        assert_eq!(VideoMeta::new("v", 0.01, 1.0).unwrap().frame_count, 1);
        assert!(VideoMeta::new("v", 0.0, 1.0).is_err());
        assert!(VideoMeta::new("v", 1.0, -1.0).is_err());
    }

    #[test]
    fn caption_track_validation() {
        let ok = CaptionTrack::new("v", vec![(0.0, "a".into()), (10.0, "b".into())], 10.0).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok.entries()[1].index, 2);
        assert!(CaptionTrack::new("v", vec![(10.0, "a".into()), (0.0, "b".into())], 10.0).is_err());
        assert!(CaptionTrack::new("v", vec![(0.0, "a".into()), (9.0, "b".into())], 10.0).is_err());
        assert!(CaptionTrack::new("v", vec![], 10.0).is_err());
    }

    fn sample(duration: f64, gt: (f64, f64)) -> GroundingSample {
        let video = VideoMeta::new("v", duration, 1.0).unwrap();
        let track = CaptionTrack::new("v", vec![(0.0, "x".into())], 10.0).unwrap();
        let feats = Matrix::zeros(video.frame_count, 2);
        GroundingSample::new("q", video, track, "query", s(gt.0, gt.1), feats).unwrap()
    }

    #[test]
    fn coverage_examples() {
        assert!((gt_coverage(&[sample(100.0, (10.0, 12.3))]).unwrap() - 0.023).abs() < 1e-12);
        assert_eq!(gt_coverage(&[sample(50.0, (0.0, 50.0))]).unwrap(), 1.0);
        let two = [sample(100.0, (0.0, 20.0)), sample(100.0, (50.0, 80.0))];
        assert!((gt_coverage(&two).unwrap() - 0.25).abs() < 1e-15);
        assert!(gt_coverage(&[]).is_err());
    }

    #[test]
    fn sample_rejects_gt_outside_video() {
        let video = VideoMeta::new("v", 10.0, 1.0).unwrap();
        let track = CaptionTrack::new("v", vec![(0.0, "x".into())], 10.0).unwrap();
        let r = GroundingSample::new("q", video, track, "", s(5.0, 11.0), Matrix::zeros(10, 1));
        assert!(r.is_err());
    }

    #[test]
    fn prediction_set_requires_sorted_scores() {
        let c = |a, b, sc| Candidate {
            interval: s(a, b),
            score: sc,
        };
        assert!(PredictionSet::new("q", vec![c(0.0, 1.0, 0.9), c(1.0, 2.0, 0.5)]).is_ok());
        assert!(PredictionSet::new("q", vec![c(0.0, 1.0, 0.1), c(1.0, 2.0, 0.5)]).is_err());
        assert!(PredictionSet::new("q", vec![]).is_err());
    }

    fn arb_interval() -> impl Strategy<Value = Interval> {
        (-100.0..100.0f64, 0.0..50.0f64).prop_map(|(a, len)| s(a, a + len))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_interval(), b in arb_interval()) {
            prop_assert_eq!(interval_iou(&a, &b).unwrap(), interval_iou(&b, &a).unwrap());
        }

        #[test]
        fn iou_shift_scale_invariant(a in arb_interval(), b in arb_interval(),
                                     shift in -50.0..50.0f64, scale in 0.1..10.0f64) {
            let t = |x: &Interval| s(x.start() * scale + shift, x.end() * scale + shift);
            let before = interval_iou(&a, &b).unwrap();
            let after = interval_iou(&t(&a), &t(&b)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn iou_self_is_one(a in -100.0..100.0f64, len in 1e-6..50.0f64) {
            let iv = s(a, a + len);
            prop_assert_eq!(interval_iou(&iv, &iv).unwrap(), 1.0);
        }

        #[test]
        fn coverage_of_copies_equals_single(k in 1usize..20, a in 0.0..50.0f64, len in 0.0..50.0f64) {
            let one = sample(100.0, (a, a + len));
            let single = gt_coverage(std::slice::from_ref(&one)).unwrap();
            let many = gt_coverage(&vec![one; k]).unwrap();
            prop_assert!((single - many).abs() < 1e-12);
        }

        #[test]
        fn frame_second_round_trip(start in 1usize..500, len in 0usize..100, fps in 0.1..60.0f64) {
            let f = Interval::frames(start, start + len).unwrap();
            let secs = frames_to_seconds(&f, fps).unwrap();
            let back = seconds_to_frames(&secs, fps, 10_000).unwrap().unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
