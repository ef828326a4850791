use crate::error::{Error, Result};
use crate::interval::{Interval, TimeUnit};
use crate::numerics::{logsumexp, sigmoid, softplus, Matrix};

use super::{HeadOutput, HeadOutputGrad};

/// Which pair of losses trains the head; each suite is an unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossSuite {
    /// Span cross-entropy plus query-guided highlighting.
    #[default]
    SpanQgh,
    /// Binary focal loss plus 1-D distance-IoU.
    FocalDiou,
}

impl std::str::FromStr for LossSuite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "span_qgh" => Ok(Self::SpanQgh),
            "focal_diou" => Ok(Self::FocalDiou),
            other => Err(format!("unknown loss suite `{other}` (expected span_qgh|focal_diou)")),
        }
    }
}

impl std::fmt::Display for LossSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SpanQgh => "span_qgh",
            Self::FocalDiou => "focal_diou",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SpanGrad {
    pub loss: f64,
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreGrad {
    pub loss: f64,
    pub d_logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiouGrad {
    pub loss: f64,
    pub d_start: f64,
    pub d_end: f64,
}

fn frame_bounds(gt: &Interval, m: usize) -> Result<(usize, usize)> {
    if gt.unit() != TimeUnit::Frames {
        return Err(Error::UnitMismatch(gt.unit(), TimeUnit::Frames));
    }
    let (s, e) = (gt.start_frame(), gt.end_frame());
    if s < 1 || e > m {
        return Err(Error::invalid("gt", format!("frames [{s}, {e}] outside [1, {m}]")));
    }
    Ok((s, e))
}

fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = logsumexp(logits.iter().copied());
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - lse).exp() - if i == target { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[target], grad)
}

/// Cross-entropy of the start and end index distributions.
pub fn span_loss(start_logits: &[f64], end_logits: &[f64], gt: &Interval) -> Result<SpanGrad> {
    let m = start_logits.len();
    if m == 0 || end_logits.len() != m {
        return Err(Error::shape("span_loss", format!("{} start vs {} end logits", m, end_logits.len())));
    }
    let (s, e) = frame_bounds(gt, m)?;
    let (ls, d_start) = cross_entropy(start_logits, s - 1);
    let (le, d_end) = cross_entropy(end_logits, e - 1);
    Ok(SpanGrad {
        loss: ls + le,
        d_start,
        d_end,
    })
}

/// Per-frame labels: 1 on the GT frames widened by `extension × len` frames
/// on each side.
fn highlight_labels(m: usize, gt: &Interval, extension: f64) -> Result<Vec<bool>> {
    let (s, e) = frame_bounds(gt, m)?;
    if !(extension >= 0.0 && extension.is_finite()) {
        return Err(Error::invalid("qgh_extension", format!("must be >= 0, got {extension}")));
    }
    let pad = (extension * (e - s + 1) as f64).floor() as usize;
    let lo = s.saturating_sub(pad).max(1);
    let hi = (e + pad).min(m);
    Ok((1..=m).map(|j| (lo..=hi).contains(&j)).collect())
}

/// Query-guided highlighting: mean BCE of `σ(logit)` against GT membership.
pub fn qgh_loss(highlight_logits: &[f64], gt: &Interval, extension: f64) -> Result<ScoreGrad> {
    let m = highlight_logits.len();
    let labels = highlight_labels(m, gt, extension)?;
    let inv = 1.0 / m as f64;
    let mut loss = 0.0;
    let d_logits = highlight_logits
        .iter()
        .zip(&labels)
        .map(|(&x, &pos)| {
            let y = if pos { 1.0 } else { 0.0 };
            loss += if pos { softplus(-x) } else { softplus(x) };
            (sigmoid(x) - y) * inv
        })
        .collect();
    Ok(ScoreGrad {
        loss: loss * inv,
        d_logits,
    })
}

/// α-balanced binary focal loss, averaged over frames.
pub fn focal_loss(highlight_logits: &[f64], gt: &Interval, alpha: f64, gamma_f: f64) -> Result<ScoreGrad> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("focal_alpha", format!("must be in (0, 1), got {alpha}")));
    }
    if !(gamma_f >= 0.0 && gamma_f.is_finite()) {
        return Err(Error::invalid("focal_gamma", format!("must be >= 0, got {gamma_f}")));
    }
    let m = highlight_logits.len();
    let labels = highlight_labels(m, gt, 0.0)?;
    let inv = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut d_logits = Vec::with_capacity(m);
    for (&x, &pos) in highlight_logits.iter().zip(&labels) {
        let p = sigmoid(x);
        let (l, d) = if pos {
            // −α (1−p)^γ log p
            let q = 1.0 - p;
            let log_p = -softplus(-x);
            let l = -alpha * q.powf(gamma_f) * log_p;
            let d = alpha * (gamma_f * q.powf(gamma_f) * p * log_p - q.powf(gamma_f + 1.0));
            (l, d)
        } else {
            // −(1−α) p^γ log(1−p)
            let log_q = -softplus(x);
            let l = -(1.0 - alpha) * p.powf(gamma_f) * log_q;
            let d = (1.0 - alpha) * (p.powf(gamma_f + 1.0) - gamma_f * p.powf(gamma_f) * (1.0 - p) * log_q);
            (l, d)
        };
        loss += l;
        d_logits.push(d * inv);
    }
    Ok(ScoreGrad {
        loss: loss * inv,
        d_logits,
    })
}

/// One-dimensional distance-IoU: `1 − IoU + d²/c²` with `d` the centre
/// distance and `c` the enclosing span. Both intervals are read on the same
/// continuous axis; gradients are w.r.t. the predicted endpoints.
pub fn diou_loss(pred: &Interval, gt: &Interval) -> Result<DiouGrad> {
    if pred.unit() != gt.unit() {
        return Err(Error::UnitMismatch(pred.unit(), gt.unit()));
    }
    Ok(diou_raw(pred.start(), pred.end(), gt.start(), gt.end()))
}

pub(crate) fn diou_raw(ps: f64, pe: f64, gs: f64, ge: f64) -> DiouGrad {
    let c = pe.max(ge) - ps.min(gs);
    if c <= 0.0 {
        return DiouGrad {
            loss: 0.0,
            d_start: 0.0,
            d_end: 0.0,
        };
    }
    let inter = (pe.min(ge) - ps.max(gs)).max(0.0);
    let (di_s, di_e) = if inter > 0.0 {
        (if ps > gs { -1.0 } else { 0.0 }, if pe < ge { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let union = (pe - ps) + (ge - gs) - inter;
    let (iou, diou_s, diou_e) = if union > 0.0 {
        let du_s = -1.0 - di_s;
        let du_e = 1.0 - di_e;
        let u2 = union * union;
        (inter / union, (di_s * union - inter * du_s) / u2, (di_e * union - inter * du_e) / u2)
    } else {
        (0.0, 0.0, 0.0)
    };
    let d = ((ps - gs) + (pe - ge)) / 2.0;
    let dc_s = if ps < gs { -1.0 } else { 0.0 };
    let dc_e = if pe > ge { 1.0 } else { 0.0 };
    let c2 = c * c;
    let pen = d * d / c2;
    let dpen = |dc: f64| d / c2 - 2.0 * d * d * dc / (c2 * c);
    DiouGrad {
        loss: 1.0 - iou + pen,
        d_start: -diou_s + dpen(dc_s),
        d_end: -diou_e + dpen(dc_e),
    }
}

/// Loss weights and shape parameters for the head losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VlgLossConfig {
    pub suite: LossSuite,
    pub qgh_extension: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for VlgLossConfig {
    fn default() -> Self {
        Self {
            suite: LossSuite::SpanQgh,
            qgh_extension: 0.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl VlgLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.qgh_extension >= 0.0 && self.qgh_extension.is_finite()) {
            return Err(Error::invalid("qgh_extension", format!("must be >= 0, got {}", self.qgh_extension)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::invalid("focal_alpha", format!("must be in (0, 1), got {}", self.focal_alpha)));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::invalid("focal_gamma", format!("must be >= 0, got {}", self.focal_gamma)));
        }
        Ok(())
    }
}

/// Frame whose proposal feeds the DIoU term: highest highlight score, lowest
/// index on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Proposal of 0-based frame `j` on the continuous frame axis:
/// `[j + ½ − o₀, j + ½ + o₁]`, endpoints swapped if reversed.
pub(crate) fn frame_proposal(j: usize, offsets: &Matrix) -> (f64, f64, bool) {
    let centre = j as f64 + 0.5;
    let a = centre - offsets.get(j, 0);
    let b = centre + offsets.get(j, 1);
    if a <= b {
        (a, b, false)
    } else {
        (b, a, true)
    }
}

/// `L_vlg` for one sample and its gradient w.r.t. every head output.
pub fn vlg_loss(out: &HeadOutput, gt: &Interval, cfg: &VlgLossConfig) -> Result<(f64, HeadOutputGrad)> {
    let m = out.start_logits.len();
    let mut grad = HeadOutputGrad::zeros(m);
    let loss = match cfg.suite {
        LossSuite::SpanQgh => {
            let span = span_loss(&out.start_logits, &out.end_logits, gt)?;
            let qgh = qgh_loss(&out.highlight_logits, gt, cfg.qgh_extension)?;
            grad.start_logits = span.d_start;
            grad.end_logits = span.d_end;
            grad.highlight_logits = qgh.d_logits;
            span.loss + qgh.loss
        }
        LossSuite::FocalDiou => {
            let focal = focal_loss(&out.highlight_logits, gt, cfg.focal_alpha, cfg.focal_gamma)?;
            grad.highlight_logits = focal.d_logits;
            let (gs, ge) = frame_bounds(gt, m)?;
            let j = argmax(&out.highlight_logits);
            let (ps, pe, swapped) = frame_proposal(j, &out.offsets);
            let di = diou_raw(ps, pe, gs as f64 - 1.0, ge as f64);
            let (d_left, d_right) = if swapped { (di.d_end, di.d_start) } else { (di.d_start, di.d_end) };
            // left = centre − o₀, right = centre + o₁
            grad.offsets.set(j, 0, -d_left);
            grad.offsets.set(j, 1, d_right);
            focal.loss + di.loss
        }
    };
    Ok((loss, grad))
}
