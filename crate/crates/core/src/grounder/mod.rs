//! Temporal localization head.
//!
//! Every frame feature is modulated by the projected query, `h_j = Z_j ⊙ (z_q P_q)`.
//! Start and end scores come from a width-3 temporal convolution over `h` so
//! that a boundary can be told apart from the interior of a matching segment.
//! Highlight scores and the two regression offsets are per-frame affine maps.

mod decode;
mod loss;

pub use decode::{decode_dense_predictions, decode_predictions, nms, DECODE_TOP_N, NMS_IOU};
pub use loss::{diou_loss, focal_loss, qgh_loss, span_loss, vlg_loss, DiouGrad, LossSuite, ScoreGrad, SpanGrad, VlgLossConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, ParamSet};

/// Width-3 temporal convolution producing one score per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryHead {
    /// `3 × D_v`: taps for frames `j−1`, `j`, `j+1`.
    pub taps: Matrix,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrounderParams {
    /// `D_t × D_v`
    pub query_proj: Matrix,
    pub start_head: BoundaryHead,
    pub end_head: BoundaryHead,
    pub highlight_w: Vec<f64>,
    pub highlight_b: f64,
    /// `D_v × 2`: per-frame offsets to the left and right boundary.
    pub regression_w: Matrix,
    pub regression_b: Vec<f64>,
}

impl GrounderParams {
    pub fn zeros(d_t: usize, d_v: usize) -> Self {
        let head = || BoundaryHead {
            taps: Matrix::zeros(3, d_v),
            bias: 0.0,
        };
        Self {
            query_proj: Matrix::zeros(d_t, d_v),
            start_head: head(),
            end_head: head(),
            highlight_w: vec![0.0; d_v],
            highlight_b: 0.0,
            regression_w: Matrix::zeros(d_v, 2),
            regression_b: vec![0.0; 2],
        }
    }

    pub fn init(d_t: usize, d_v: usize, seed: u64) -> Result<Self> {
        if d_t == 0 || d_v == 0 {
            return Err(Error::invalid("dims", "grounder dimensions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let a = (1.0 / fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
        };
        let query_proj = uniform(d_t, d_v, d_t);
        let start_taps = uniform(3, d_v, 3 * d_v);
        let end_taps = uniform(3, d_v, 3 * d_v);
        let highlight_w = uniform(1, d_v, d_v).into_vec();
        let regression_w = uniform(d_v, 2, d_v);
        Ok(Self {
            query_proj,
            start_head: BoundaryHead {
                taps: start_taps,
                bias: 0.0,
            },
            end_head: BoundaryHead {
                taps: end_taps,
                bias: 0.0,
            },
            highlight_w,
            highlight_b: 0.0,
            regression_w,
            regression_b: vec![0.0; 2],
        })
    }

    pub fn text_dim(&self) -> usize {
        self.query_proj.rows()
    }

    pub fn video_dim(&self) -> usize {
        self.query_proj.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.text_dim(), self.video_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let d_v = self.video_dim();
        let ok = self.start_head.taps.shape() == (3, d_v)
            && self.end_head.taps.shape() == (3, d_v)
            && self.highlight_w.len() == d_v
            && self.regression_w.shape() == (d_v, 2)
            && self.regression_b.len() == 2;
        if !ok {
            return Err(Error::shape("GrounderParams", format!("inconsistent head widths for D_v = {d_v}")));
        }
        if !ParamSet::is_finite(self) {
            return Err(Error::NonFinite("grounder parameters"));
        }
        Ok(())
    }
}

impl ParamSet for GrounderParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.query_proj.data(),
            self.start_head.taps.data(),
            std::slice::from_ref(&self.start_head.bias),
            self.end_head.taps.data(),
            std::slice::from_ref(&self.end_head.bias),
            &self.highlight_w,
            std::slice::from_ref(&self.highlight_b),
            self.regression_w.data(),
            &self.regression_b,
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.query_proj.data_mut(),
            self.start_head.taps.data_mut(),
            std::slice::from_mut(&mut self.start_head.bias),
            self.end_head.taps.data_mut(),
            std::slice::from_mut(&mut self.end_head.bias),
            &mut self.highlight_w,
            std::slice::from_mut(&mut self.highlight_b),
            self.regression_w.data_mut(),
            &mut self.regression_b,
        ]
    }
}

/// Per-frame head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub highlight_logits: Vec<f64>,
    /// `M × 2`
    pub offsets: Matrix,
}

/// Upstream gradients w.r.t. each head output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputGrad {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub highlight_logits: Vec<f64>,
    pub offsets: Matrix,
}

impl HeadOutputGrad {
    pub fn zeros(m: usize) -> Self {
        Self {
            start_logits: vec![0.0; m],
            end_logits: vec![0.0; m],
            highlight_logits: vec![0.0; m],
            offsets: Matrix::zeros(m, 2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    z: Matrix,
    query: Vec<f64>,
    query_feat: Vec<f64>,
    modulated: Matrix,
}

impl BoundaryHead {
    fn apply(&self, h: &Matrix) -> Vec<f64> {
        let m = h.rows();
        (0..m)
            .map(|j| {
                let mut s = self.bias + dot(self.taps.row(1), h.row(j));
                if j > 0 {
                    s += dot(self.taps.row(0), h.row(j - 1));
                }
                if j + 1 < m {
                    s += dot(self.taps.row(2), h.row(j + 1));
                }
                s
            })
            .collect()
    }

    fn backward(&self, h: &Matrix, d_out: &[f64], grad: &mut BoundaryHead, d_h: &mut Matrix) {
        let m = h.rows();
        for (j, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias += g;
            let neighbours = [(0usize, j.checked_sub(1)), (1, Some(j)), (2, (j + 1 < m).then_some(j + 1))];
            for (tap, src) in neighbours {
                let Some(src) = src else { continue };
                for (gt, &x) in grad.taps.row_mut(tap).iter_mut().zip(h.row(src)) {
                    *gt += g * x;
                }
                for (dh, &w) in d_h.row_mut(src).iter_mut().zip(self.taps.row(tap)) {
                    *dh += g * w;
                }
            }
        }
    }
}

pub fn forward(z: &Matrix, z_q: &[f64], p: &GrounderParams) -> Result<(HeadOutput, HeadCache)> {
    if z.cols() != p.video_dim() || z_q.len() != p.text_dim() {
        return Err(Error::shape(
            "grounder forward",
            format!("Z {:?}, z_q {} vs D_t {} / D_v {}", z.shape(), z_q.len(), p.text_dim(), p.video_dim()),
        ));
    }
    let query_feat = p.query_proj.vec_mul(z_q)?;
    let mut modulated = z.clone();
    for r in 0..modulated.rows() {
        for (x, q) in modulated.row_mut(r).iter_mut().zip(&query_feat) {
            *x *= q;
        }
    }
    let h = &modulated;
    let highlight_logits = (0..h.rows()).map(|j| dot(&p.highlight_w, h.row(j)) + p.highlight_b).collect();
    let mut offsets = h.matmul(&p.regression_w)?;
    for r in 0..offsets.rows() {
        for (o, b) in offsets.row_mut(r).iter_mut().zip(&p.regression_b) {
            *o += b;
        }
    }
    let out = HeadOutput {
        start_logits: p.start_head.apply(h),
        end_logits: p.end_head.apply(h),
        highlight_logits,
        offsets,
    };
    Ok((
        out,
        HeadCache {
            z: z.clone(),
            query: z_q.to_vec(),
            query_feat,
            modulated,
        },
    ))
}

/// Accumulates parameter gradients into `g`; returns `(∂L/∂Z, ∂L/∂z_q)`.
pub fn backward(c: &HeadCache, d: &HeadOutputGrad, p: &GrounderParams, g: &mut GrounderParams) -> Result<(Matrix, Vec<f64>)> {
    let h = &c.modulated;
    let m = h.rows();
    if d.start_logits.len() != m || d.end_logits.len() != m || d.highlight_logits.len() != m || d.offsets.shape() != (m, 2) {
        return Err(Error::shape("grounder backward", format!("upstream gradients for M = {m}")));
    }
    let mut d_h = Matrix::zeros(m, h.cols());
    p.start_head.backward(h, &d.start_logits, &mut g.start_head, &mut d_h);
    p.end_head.backward(h, &d.end_logits, &mut g.end_head, &mut d_h);
    for j in 0..m {
        let gh = d.highlight_logits[j];
        g.highlight_b += gh;
        for ((gw, dh), (&x, &w)) in g
            .highlight_w
            .iter_mut()
            .zip(d_h.row_mut(j))
            .zip(h.row(j).iter().zip(&p.highlight_w))
        {
            *gw += gh * x;
            *dh += gh * w;
        }
    }
    g.regression_w.add_assign(&h.t_matmul(&d.offsets)?)?;
    for (gb, s) in g.regression_b.iter_mut().zip(d.offsets.column_sums()) {
        *gb += s;
    }
    d_h.add_assign(&d.offsets.matmul_t(&p.regression_w)?)?;

    let mut d_z = d_h.clone();
    let mut d_qf = vec![0.0; c.query_feat.len()];
    for j in 0..m {
        for (k, dz) in d_z.row_mut(j).iter_mut().enumerate() {
            d_qf[k] += *dz * c.z.get(j, k);
            *dz *= c.query_feat[k];
        }
    }
    g.query_proj.add_outer(1.0, &c.query, &d_qf);
    let d_query = p.query_proj.mul_vec(&d_qf)?;
    Ok((d_z, d_query))
}
