use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::interval::{frames_to_seconds, interval_iou, Candidate, Interval, PredictionSet};
use crate::numerics::{sigmoid, softmax, Matrix};

/// Start and end positions kept per side before pairing.
pub const DECODE_TOP_N: usize = 20;
/// Candidates overlapping a kept one above this IoU are dropped.
pub const NMS_IOU: f64 = 0.7;

fn check_fps(fps: f64) -> Result<()> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::invalid("fps", format!("must be > 0, got {fps}")));
    }
    Ok(())
}

fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.interval.length().total_cmp(&a.interval.length()))
        .then(a.interval.start().total_cmp(&b.interval.start()))
}

/// Greedy non-maximum suppression over candidates already in rank order.
/// Keeps at most `k`.
pub fn nms(ranked: &[Candidate], iou_threshold: f64, k: usize) -> Result<Vec<Candidate>> {
    let mut kept: Vec<Candidate> = Vec::with_capacity(k.min(ranked.len()));
    for c in ranked {
        if kept.len() == k {
            break;
        }
        let mut suppressed = false;
        for q in &kept {
            if interval_iou(&c.interval, &q.interval)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(*c);
        }
    }
    Ok(kept)
}

fn top_indices(p: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn into_seconds(query_id: &str, kept: Vec<Candidate>, fps: f64) -> Result<PredictionSet> {
    let out = kept
        .into_iter()
        .map(|c| {
            Ok(Candidate {
                interval: frames_to_seconds(&c.interval, fps)?,
                score: c.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(query_id, out)
}

/// Ranks `(s, e)` pairs with `s ≤ e` by `p_start(s)·p_end(e)` and returns the
/// top `k` after NMS, in seconds. Falls back to the whole video when no pair
/// is valid.
pub fn decode_predictions(
    query_id: &str,
    start_logits: &[f64],
    end_logits: &[f64],
    k: usize,
    fps: f64,
) -> Result<PredictionSet> {
    check_fps(fps)?;
    let m = start_logits.len();
    if m == 0 || end_logits.len() != m {
        return Err(Error::shape("decode", format!("{} start vs {} end logits", m, end_logits.len())));
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    let ps = softmax(start_logits);
    let pe = softmax(end_logits);
    let starts = top_indices(&ps, DECODE_TOP_N);
    let ends = top_indices(&pe, DECODE_TOP_N);
    let mut pairs = Vec::with_capacity(starts.len() * ends.len());
    for &s in &starts {
        for &e in &ends {
            if s <= e {
                pairs.push(Candidate {
                    interval: Interval::frames(s + 1, e + 1)?,
                    score: ps[s] * pe[e],
                });
            }
        }
    }
    if pairs.is_empty() {
        log::debug!("{query_id}: no valid start/end pair, using the whole video");
        pairs.push(Candidate {
            interval: Interval::frames(1, m)?,
            score: 0.0,
        });
    }
    pairs.sort_by(rank_order);
    let kept = nms(&pairs, NMS_IOU, k)?;
    into_seconds(query_id, kept, fps)
}

/// One proposal per frame from the regression offsets, scored by
/// `σ(highlight)`, clipped to the video and reduced by NMS.
pub fn decode_dense_predictions(
    query_id: &str,
    highlight_logits: &[f64],
    offsets: &Matrix,
    k: usize,
    fps: f64,
) -> Result<PredictionSet> {
    check_fps(fps)?;
    let m = highlight_logits.len();
    if m == 0 || offsets.shape() != (m, 2) {
        return Err(Error::shape(
            "decode_dense",
            format!("{m} highlight logits vs offsets {:?}", offsets.shape()),
        ));
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    let total = m as f64;
    let mut props = Vec::with_capacity(m);
    for j in 0..m {
        let (a, b, _) = super::loss::frame_proposal(j, offsets);
        let (mut a, mut b) = (a.clamp(0.0, total), b.clamp(0.0, total));
        if !(b > a) {
            a = j as f64;
            b = a + 1.0;
        }
        props.push(Candidate {
            interval: Interval::seconds(a / fps, b / fps)?,
            score: sigmoid(highlight_logits[j]),
        });
    }
    props.sort_by(rank_order);
    PredictionSet::new(query_id, nms(&props, NMS_IOU, k)?)
}
