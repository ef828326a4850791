//! Environment infuser: fuses caption embeddings into per-frame video features.
//!
//! The default `Concat` variant computes
//!
//! ```text
//! E = resample(Z_e, M) · P_env
//! G = E + tanh(γ) · 1 · (CA(z_q, Z_e) · P_env)
//! Z = Z_v + [G | Z_v] · W
//! ```
//!
//! where `CA` is single-head scaled dot-product attention with the query
//! embedding attending over the caption rows, and `P_env` maps caption width
//! `D_t` onto video width `D_v`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax, tanh_gate, tanh_gate_grad, Matrix, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    #[default]
    Concat,
    Add,
    #[serde(rename = "ca")]
    CrossAttention,
}

impl std::str::FromStr for FusionVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            "ca" | "cross_attention" => Ok(Self::CrossAttention),
            other => Err(format!("unknown fusion variant `{other}` (expected concat|add|ca)")),
        }
    }
}

impl std::fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Add => "add",
            Self::CrossAttention => "ca",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfuserParams {
    /// `2D_v × D_v`; rows `0..D_v` act on `G`, rows `D_v..2D_v` on `Z_v`.
    pub w: Matrix,
    pub gamma: f64,
    /// `D_t × D_a`
    pub ca_query_proj: Matrix,
    /// `D_t × D_a`
    pub ca_key_proj: Matrix,
    /// `D_t × D_t`
    pub ca_value_proj: Matrix,
    /// `D_t × D_v`
    pub env_proj: Matrix,
    /// Video MLP `D_v → D_v → D_v` with rectification in between.
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InfuserDims {
    pub text: usize,
    pub video: usize,
    pub attn: usize,
}

impl InfuserParams {
    pub fn zeros(d_t: usize, d_v: usize, d_a: usize) -> Self {
        Self {
            w: Matrix::zeros(2 * d_v, d_v),
            gamma: 0.0,
            ca_query_proj: Matrix::zeros(d_t, d_a),
            ca_key_proj: Matrix::zeros(d_t, d_a),
            ca_value_proj: Matrix::zeros(d_t, d_t),
            env_proj: Matrix::zeros(d_t, d_v),
            mlp_w1: Matrix::zeros(d_v, d_v),
            mlp_b1: vec![0.0; d_v],
            mlp_w2: Matrix::zeros(d_v, d_v),
            mlp_b2: vec![0.0; d_v],
        }
    }

    /// Uniform fan-in scaled initialization; the gate starts closed (γ = 0)
    /// and the video MLP starts near the identity.
    pub fn init(d_t: usize, d_v: usize, d_a: usize, seed: u64) -> Result<Self> {
        if d_t == 0 || d_v == 0 || d_a == 0 {
            return Err(Error::invalid("dims", "infuser dimensions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let a = (1.0 / fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
        };
        let w = uniform(2 * d_v, d_v, 2 * d_v);
        let ca_query_proj = uniform(d_t, d_a, d_t);
        let ca_key_proj = uniform(d_t, d_a, d_t);
        let ca_value_proj = uniform(d_t, d_t, d_t);
        let env_proj = uniform(d_t, d_v, d_t);
        let mut mlp_w1 = uniform(d_v, d_v, d_v);
        let mut mlp_w2 = uniform(d_v, d_v, d_v);
        for m in [&mut mlp_w1, &mut mlp_w2] {
            m.scale(0.1);
            for i in 0..d_v {
                m.set(i, i, m.get(i, i) + 1.0);
            }
        }
        Ok(Self {
            w,
            gamma: 0.0,
            ca_query_proj,
            ca_key_proj,
            ca_value_proj,
            env_proj,
            mlp_w1,
            mlp_b1: vec![0.01; d_v],
            mlp_w2,
            mlp_b2: vec![0.0; d_v],
        })
    }

    pub fn dims(&self) -> InfuserDims {
        InfuserDims {
            text: self.env_proj.rows(),
            video: self.env_proj.cols(),
            attn: self.ca_query_proj.cols(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dims();
        Self::zeros(d.text, d.video, d.attn)
    }

    pub fn validate(&self) -> Result<()> {
        let InfuserDims { text, video, attn } = self.dims();
        let shapes = [
            ("w", self.w.shape(), (2 * video, video)),
            ("ca_query_proj", self.ca_query_proj.shape(), (text, attn)),
            ("ca_key_proj", self.ca_key_proj.shape(), (text, attn)),
            ("ca_value_proj", self.ca_value_proj.shape(), (text, text)),
            ("mlp_w1", self.mlp_w1.shape(), (video, video)),
            ("mlp_w2", self.mlp_w2.shape(), (video, video)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::shape("InfuserParams", format!("{name}: {got:?}, expected {want:?}")));
            }
        }
        if self.mlp_b1.len() != video || self.mlp_b2.len() != video {
            return Err(Error::shape("InfuserParams", "mlp bias width"));
        }
        if !ParamSet::is_finite(self) {
            return Err(Error::NonFinite("infuser parameters"));
        }
        Ok(())
    }
}

impl ParamSet for InfuserParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w.data(),
            std::slice::from_ref(&self.gamma),
            self.ca_query_proj.data(),
            self.ca_key_proj.data(),
            self.ca_value_proj.data(),
            self.env_proj.data(),
            self.mlp_w1.data(),
            &self.mlp_b1,
            self.mlp_w2.data(),
            &self.mlp_b2,
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.data_mut(),
            std::slice::from_mut(&mut self.gamma),
            self.ca_query_proj.data_mut(),
            self.ca_key_proj.data_mut(),
            self.ca_value_proj.data_mut(),
            self.env_proj.data_mut(),
            self.mlp_w1.data_mut(),
            &mut self.mlp_b1,
            self.mlp_w2.data_mut(),
            &mut self.mlp_b2,
        ]
    }
}

/// 0-based caption row feeding 0-based frame `j` when `n` captions are
/// stretched over `m` frames.
#[inline]
pub fn caption_for_frame(j: usize, n: usize, m: usize) -> usize {
    (j * n / m).min(n - 1)
}

/// Nearest-caption temporal alignment of `N` caption rows onto `M` frames.
pub fn resample_env(z_e: &Matrix, m: usize) -> Matrix {
    let n = z_e.rows();
    let idx: Vec<usize> = (0..m).map(|j| caption_for_frame(j, n, m)).collect();
    z_e.select_rows(&idx)
}

// ---------------------------------------------------------------------------
// Video MLP

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

/// `Z_v = relu(Z̃ W₁ + b₁) W₂ + b₂`.
pub fn video_mlp(raw: &Matrix, p: &InfuserParams) -> Result<(Matrix, MlpCache)> {
    let mut pre = raw.matmul(&p.mlp_w1)?;
    for r in 0..pre.rows() {
        for (x, b) in pre.row_mut(r).iter_mut().zip(&p.mlp_b1) {
            *x += b;
        }
    }
    let mut hidden = pre.clone();
    hidden.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
    let mut out = hidden.matmul(&p.mlp_w2)?;
    for r in 0..out.rows() {
        for (x, b) in out.row_mut(r).iter_mut().zip(&p.mlp_b2) {
            *x += b;
        }
    }
    Ok((
        out,
        MlpCache {
            input: raw.clone(),
            pre,
            hidden,
        },
    ))
}

pub fn video_mlp_backward(cache: &MlpCache, d_out: &Matrix, p: &InfuserParams, g: &mut InfuserParams) -> Result<()> {
    g.mlp_w2.add_assign(&cache.hidden.t_matmul(d_out)?)?;
    add_to(&mut g.mlp_b2, &d_out.column_sums());
    let mut d_pre = d_out.matmul_t(&p.mlp_w2)?;
    for (d, &h) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }
    g.mlp_w1.add_assign(&cache.input.t_matmul(&d_pre)?)?;
    add_to(&mut g.mlp_b1, &d_pre.column_sums());
    Ok(())
}

fn add_to(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

// ---------------------------------------------------------------------------
// Cross-attention

#[derive(Debug, Clone)]
struct KeyValues {
    keys: Matrix,
    values: Matrix,
}

impl KeyValues {
    fn project(z_e: &Matrix, p: &InfuserParams) -> Result<Self> {
        Ok(Self {
            keys: z_e.matmul(&p.ca_key_proj)?,
            values: z_e.matmul(&p.ca_value_proj)?,
        })
    }

    fn zeros_like(&self) -> Self {
        Self {
            keys: Matrix::zeros(self.keys.rows(), self.keys.cols()),
            values: Matrix::zeros(self.values.rows(), self.values.cols()),
        }
    }

    /// Pushes accumulated `∂/∂K'`, `∂/∂V'` through the projections; returns `∂/∂Z_e`.
    fn backward(&self, z_e: &Matrix, p: &InfuserParams, g: &mut InfuserParams) -> Result<Matrix> {
        g.ca_value_proj.add_assign(&z_e.t_matmul(&self.values)?)?;
        g.ca_key_proj.add_assign(&z_e.t_matmul(&self.keys)?)?;
        let mut d_ze = self.values.matmul_t(&p.ca_value_proj)?;
        d_ze.add_assign(&self.keys.matmul_t(&p.ca_key_proj)?)?;
        Ok(d_ze)
    }
}

#[derive(Debug, Clone)]
struct AttnCache {
    query: Vec<f64>,
    q: Vec<f64>,
    weights: Vec<f64>,
}

fn attend(query: &[f64], kv: &KeyValues, p: &InfuserParams) -> Result<(Vec<f64>, AttnCache)> {
    let q = p.ca_query_proj.vec_mul(query)?;
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = (0..kv.keys.rows()).map(|i| dot(kv.keys.row(i), &q) * scale).collect();
    let weights = softmax(&scores);
    let out = kv.values.vec_mul(&weights)?;
    Ok((
        out,
        AttnCache {
            query: query.to_vec(),
            q,
            weights,
        },
    ))
}

/// Accumulates `∂/∂K'`, `∂/∂V'` into `d_kv` and the query projection
/// gradient into `g`; returns `∂/∂query`.
fn attend_backward(
    c: &AttnCache,
    kv: &KeyValues,
    d_out: &[f64],
    p: &InfuserParams,
    g: &mut InfuserParams,
    d_kv: &mut KeyValues,
) -> Result<Vec<f64>> {
    let n = c.weights.len();
    let scale = 1.0 / (c.q.len() as f64).sqrt();
    let d_w: Vec<f64> = (0..n).map(|i| dot(kv.values.row(i), d_out)).collect();
    let mean: f64 = c.weights.iter().zip(&d_w).map(|(a, d)| a * d).sum();

    let mut d_q = vec![0.0; c.q.len()];
    for i in 0..n {
        for (dv, &o) in d_kv.values.row_mut(i).iter_mut().zip(d_out) {
            *dv += c.weights[i] * o;
        }
        let s = c.weights[i] * (d_w[i] - mean) * scale;
        for (dk, &qv) in d_kv.keys.row_mut(i).iter_mut().zip(&c.q) {
            *dk += s * qv;
        }
        for (dq, &k) in d_q.iter_mut().zip(kv.keys.row(i)) {
            *dq += s * k;
        }
    }
    g.ca_query_proj.add_outer(1.0, &c.query, &d_q);
    p.ca_query_proj.mul_vec(&d_q)
}

/// Single-head scaled dot-product attention of `z_q` over the caption rows.
pub fn cross_attention(z_q: &[f64], z_e: &Matrix, p: &InfuserParams) -> Result<Vec<f64>> {
    check_text_inputs(z_e, z_q, p)?;
    Ok(attend(z_q, &KeyValues::project(z_e, p)?, p)?.0)
}

fn check_text_inputs(z_e: &Matrix, z_q: &[f64], p: &InfuserParams) -> Result<()> {
    let d_t = p.dims().text;
    if z_e.cols() != d_t || z_q.len() != d_t {
        return Err(Error::shape(
            "infuser",
            format!("Z_e {:?} and z_q {} vs D_t {d_t}", z_e.shape(), z_q.len()),
        ));
    }
    if z_e.rows() == 0 {
        return Err(Error::shape("infuser", "no caption rows"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fusion

#[derive(Debug, Clone)]
enum VariantCache {
    Concat {
        resampled: Matrix,
        fused_env: Matrix,
        kv: KeyValues,
        attn: AttnCache,
        attn_out: Vec<f64>,
        attn_proj: Vec<f64>,
    },
    Add {
        resampled: Matrix,
    },
    CrossAttention {
        kv: KeyValues,
        frames: Vec<(AttnCache, Vec<f64>)>,
    },
}

/// Forward intermediates needed by [`infuse_grads`].
#[derive(Debug, Clone)]
pub struct InfuseCache {
    variant: FusionVariant,
    z_v: Matrix,
    z_e: Matrix,
    inner: VariantCache,
}

impl InfuseCache {
    pub fn variant(&self) -> FusionVariant {
        self.variant
    }
}

/// Gradients w.r.t. the infuser inputs.
#[derive(Debug, Clone)]
pub struct InfuseInputGrads {
    pub d_video: Matrix,
    pub d_env: Matrix,
    pub d_query: Vec<f64>,
}

pub fn infuse(z_v: &Matrix, z_e: &Matrix, z_q: &[f64], p: &InfuserParams, variant: FusionVariant) -> Result<Matrix> {
    Ok(infuse_forward(z_v, z_e, z_q, p, variant)?.0)
}

pub fn infuse_forward(
    z_v: &Matrix,
    z_e: &Matrix,
    z_q: &[f64],
    p: &InfuserParams,
    variant: FusionVariant,
) -> Result<(Matrix, InfuseCache)> {
    check_text_inputs(z_e, z_q, p)?;
    let d_v = p.dims().video;
    if z_v.cols() != d_v {
        return Err(Error::shape("infuse", format!("Z_v {:?} vs D_v {d_v}", z_v.shape())));
    }
    let m = z_v.rows();
    let (out, inner) = match variant {
        FusionVariant::Concat => {
            let resampled = resample_env(z_e, m);
            let env = resampled.matmul(&p.env_proj)?;
            let kv = KeyValues::project(z_e, p)?;
            let (attn_out, attn) = attend(z_q, &kv, p)?;
            let attn_proj = p.env_proj.vec_mul(&attn_out)?;
            let gate = tanh_gate(p.gamma);
            let mut fused_env = env;
            for r in 0..m {
                for (x, a) in fused_env.row_mut(r).iter_mut().zip(&attn_proj) {
                    *x += gate * a;
                }
            }
            let (w_top, w_bot) = split_w(&p.w);
            let mut z = z_v.clone();
            z.add_assign(&fused_env.matmul(&w_top)?)?;
            z.add_assign(&z_v.matmul(&w_bot)?)?;
            (
                z,
                VariantCache::Concat {
                    resampled,
                    fused_env,
                    kv,
                    attn,
                    attn_out,
                    attn_proj,
                },
            )
        }
        FusionVariant::Add => {
            let resampled = resample_env(z_e, m);
            let mut z = z_v.clone();
            z.add_assign(&resampled.matmul(&p.env_proj)?)?;
            (z, VariantCache::Add { resampled })
        }
        FusionVariant::CrossAttention => {
            let kv = KeyValues::project(z_e, p)?;
            let mut z = z_v.clone();
            let mut frames = Vec::with_capacity(m);
            for j in 0..m {
                let query = p.env_proj.mul_vec(z_v.row(j))?;
                let (readout, cache) = attend(&query, &kv, p)?;
                let back = p.env_proj.vec_mul(&readout)?;
                add_to(z.row_mut(j), &back);
                frames.push((cache, readout));
            }
            (z, VariantCache::CrossAttention { kv, frames })
        }
    };
    Ok((
        out,
        InfuseCache {
            variant,
            z_v: z_v.clone(),
            z_e: z_e.clone(),
            inner,
        },
    ))
}

fn split_w(w: &Matrix) -> (Matrix, Matrix) {
    let d_v = w.cols();
    let top = Matrix::from_fn(d_v, d_v, |r, c| w.get(r, c));
    let bot = Matrix::from_fn(d_v, d_v, |r, c| w.get(r + d_v, c));
    (top, bot)
}

/// Back-propagates `∂L/∂Z` through the fusion, accumulating parameter
/// gradients into `g` and returning gradients for the inputs.
pub fn infuse_grads(cache: &InfuseCache, d_z: &Matrix, p: &InfuserParams, g: &mut InfuserParams) -> Result<InfuseInputGrads> {
    if d_z.shape() != cache.z_v.shape() {
        return Err(Error::shape(
            "infuse_grads",
            format!("upstream {:?} vs Z {:?}", d_z.shape(), cache.z_v.shape()),
        ));
    }
    let z_e = &cache.z_e;
    let (n, d_t) = z_e.shape();
    let m = cache.z_v.rows();
    let mut d_env = Matrix::zeros(n, d_t);
    let mut d_query = vec![0.0; d_t];
    let mut d_video = d_z.clone();

    let scatter = |d_env: &mut Matrix, d_resampled: &Matrix| {
        for j in 0..m {
            add_to(d_env.row_mut(caption_for_frame(j, n, m)), d_resampled.row(j));
        }
    };

    match &cache.inner {
        VariantCache::Concat {
            resampled,
            fused_env,
            kv,
            attn,
            attn_out,
            attn_proj,
        } => {
            let d_v = p.dims().video;
            let (w_top, w_bot) = split_w(&p.w);
            let d_top = fused_env.t_matmul(d_z)?;
            let d_bot = cache.z_v.t_matmul(d_z)?;
            for r in 0..d_v {
                add_to(g.w.row_mut(r), d_top.row(r));
                add_to(g.w.row_mut(r + d_v), d_bot.row(r));
            }
            d_video.add_assign(&d_z.matmul_t(&w_bot)?)?;

            let d_fused = d_z.matmul_t(&w_top)?;
            let col = d_fused.column_sums();
            let gate = tanh_gate(p.gamma);
            g.gamma += tanh_gate_grad(p.gamma) * dot(&col, attn_proj);
            let d_attn_proj: Vec<f64> = col.iter().map(|x| gate * x).collect();

            g.env_proj.add_assign(&resampled.t_matmul(&d_fused)?)?;
            g.env_proj.add_outer(1.0, attn_out, &d_attn_proj);
            scatter(&mut d_env, &d_fused.matmul_t(&p.env_proj)?);

            let d_attn_out = p.env_proj.mul_vec(&d_attn_proj)?;
            let mut d_kv = kv.zeros_like();
            let dq = attend_backward(attn, kv, &d_attn_out, p, g, &mut d_kv)?;
            add_to(&mut d_query, &dq);
            d_env.add_assign(&d_kv.backward(z_e, p, g)?)?;
        }
        VariantCache::Add { resampled } => {
            g.env_proj.add_assign(&resampled.t_matmul(d_z)?)?;
            scatter(&mut d_env, &d_z.matmul_t(&p.env_proj)?);
        }
        VariantCache::CrossAttention { kv, frames } => {
            let mut d_kv = kv.zeros_like();
            for (j, (attn, readout)) in frames.iter().enumerate() {
                let dz = d_z.row(j);
                g.env_proj.add_outer(1.0, readout, dz);
                let d_readout = p.env_proj.mul_vec(dz)?;
                let d_frame_query = attend_backward(attn, kv, &d_readout, p, g, &mut d_kv)?;
                // query_j = P_env · z_v[j]
                g.env_proj.add_outer(1.0, &d_frame_query, cache.z_v.row(j));
                add_to(d_video.row_mut(j), &p.env_proj.vec_mul(&d_frame_query)?);
            }
            d_env.add_assign(&d_kv.backward(z_e, p, g)?)?;
        }
    }
    Ok(InfuseInputGrads {
        d_video,
        d_env,
        d_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_params(seed: u64, d_t: usize, d_v: usize, d_a: usize) -> InfuserParams {
        let mut p = InfuserParams::init(d_t, d_v, d_a, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
        // Open gate and O(1) attention logits keep every gradient component
        // well above the central-difference noise floor.
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        p.gamma = sign * rng.random_range(0.5..1.5);
        p.ca_query_proj.scale(2.0);
        p.ca_key_proj.scale(2.0);
        p.mlp_b1 = (0..d_v).map(|_| rng.random_range(-0.5..0.5)).collect();
        p.mlp_b2 = (0..d_v).map(|_| rng.random_range(-0.5..0.5)).collect();
        p
    }

    #[test]
    fn resample_examples() {
        let z = Matrix::from_fn(2, 1, |r, _| r as f64 + 1.0);
        assert_eq!(resample_env(&z, 2), z);
        assert_eq!(resample_env(&z, 4).data(), &[1.0, 1.0, 2.0, 2.0]);
        let z10 = Matrix::from_fn(10, 1, |r, _| r as f64 + 1.0);
        let r = resample_env(&z10, 100);
        // 1-based rows 50 and 51 take captions 5 and 6
        assert_eq!(r.get(49, 0), 5.0);
        assert_eq!(r.get(50, 0), 6.0);
    }

    #[test]
    fn attention_with_one_caption_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_params(1, 4, 3, 4);
        let z_e = rand_matrix(&mut rng, 1, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = cross_attention(&q, &z_e, &p).unwrap();
        let want = z_e.matmul(&p.ca_value_proj).unwrap();
        assert_eq!(out.as_slice(), want.row(0));
    }

    #[test]
    fn attention_over_identical_rows_ignores_query() {
        let p = rand_params(2, 4, 3, 4);
        let z_e = Matrix::from_fn(5, 4, |_, c| c as f64 * 0.3 - 0.5);
        let v = z_e.matmul(&p.ca_value_proj).unwrap();
        for q in [vec![1.0, 0.0, 0.0, 0.0], vec![-3.0, 2.0, 0.5, 1.0]] {
            let out = cross_attention(&q, &z_e, &p).unwrap();
            for (a, b) in out.iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_output_in_value_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = rand_params(11, 6, 4, 6);
        let z_e = rand_matrix(&mut rng, 7, 6);
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = cross_attention(&q, &z_e, &p).unwrap();
        let v = z_e.matmul(&p.ca_value_proj).unwrap();
        for c in 0..6 {
            let col: Vec<f64> = (0..7).map(|r| v.get(r, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(out[c] >= lo - 1e-12 && out[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn attention_invariant_to_caption_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_params(5, 4, 3, 2);
        let z_e = rand_matrix(&mut rng, 6, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm = z_e.select_rows(&[3, 0, 5, 1, 4, 2]);
        let a = cross_attention(&q, &z_e, &p).unwrap();
        let b = cross_attention(&q, &perm, &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_params_leave_video_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z_v = rand_matrix(&mut rng, 8, 3);
        let z_e = rand_matrix(&mut rng, 3, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = InfuserParams::zeros(4, 3, 2);
        for v in [FusionVariant::Concat, FusionVariant::Add, FusionVariant::CrossAttention] {
            let z = infuse(&z_v, &z_e, &q, &p, v).unwrap();
            assert_eq!(z, z_v, "{v}");
        }
    }

    #[test]
    fn w_zero_and_gamma_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z_v = rand_matrix(&mut rng, 6, 3);
        let z_e = rand_matrix(&mut rng, 3, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut p = rand_params(4, 4, 3, 4);
        let mut wz = p.clone();
        wz.w.fill(0.0);
        assert_eq!(infuse(&z_v, &z_e, &q, &wz, FusionVariant::Concat).unwrap(), z_v);

        p.gamma = 0.0;
        let base = infuse(&z_v, &z_e, &q, &p, FusionVariant::Concat).unwrap();
        let mut other_ca = p.clone();
        other_ca.ca_value_proj.scale(-3.0);
        other_ca.ca_key_proj.scale(2.0);
        assert_eq!(infuse(&z_v, &z_e, &q, &other_ca, FusionVariant::Concat).unwrap(), base);

        let mut add = InfuserParams::zeros(4, 3, 4);
        add.env_proj = p.env_proj.clone();
        let zero_env = Matrix::zeros(3, 4);
        assert_eq!(infuse(&z_v, &zero_env, &q, &add, FusionVariant::Add).unwrap(), z_v);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = InfuserParams::zeros(4, 3, 2);
        let bad = infuse(&Matrix::zeros(5, 2), &Matrix::zeros(2, 4), &[0.0; 4], &p, FusionVariant::Concat);
        assert!(matches!(bad, Err(Error::Shape { .. })));
        assert!(cross_attention(&[0.0; 3], &Matrix::zeros(2, 4), &p).is_err());
    }

    /// Scalar probe `L = Σ Z ⊙ U` for a fixed random `U`.
    fn probe_loss(z: &Matrix, u: &Matrix) -> f64 {
        z.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = rand_params(8, 4, 3, 2);
        let z_v = rand_matrix(&mut rng, 5, 3);
        let z_e = rand_matrix(&mut rng, 2, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for v in [FusionVariant::Concat, FusionVariant::Add, FusionVariant::CrossAttention] {
            let (_, cache) = infuse_forward(&z_v, &z_e, &q, &p, v).unwrap();
            let mut g = p.zeros_like();
            let ig = infuse_grads(&cache, &Matrix::zeros(5, 3), &p, &mut g).unwrap();
            assert!(g.flatten().iter().all(|&x| x == 0.0));
            assert_eq!(ig.d_video.max_abs(), 0.0);
            assert_eq!(ig.d_env.max_abs(), 0.0);
            assert!(ig.d_query.iter().all(|&x| x == 0.0));
        }
    }

    fn check_variant(seed: u64, variant: FusionVariant, gamma: Option<f64>) {
        let (d_t, d_v, d_a, n, m) = (4, 3, 3, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let mut p = rand_params(seed, d_t, d_v, d_a);
        if let Some(g) = gamma {
            p.gamma = g;
        }
        let z_v = rand_matrix(&mut rng, m, d_v);
        let z_e = rand_matrix(&mut rng, n, d_t);
        let q: Vec<f64> = (0..d_t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = rand_matrix(&mut rng, m, d_v);

        let (_, cache) = infuse_forward(&z_v, &z_e, &q, &p, variant).unwrap();
        let mut g = p.zeros_like();
        let ig = infuse_grads(&cache, &u, &p, &mut g).unwrap();

        let f_params = |x: &[f64]| {
            let mut pp = p.clone();
            pp.assign_flat(x).unwrap();
            probe_loss(&infuse(&z_v, &z_e, &q, &pp, variant).unwrap(), &u)
        };
        let err = grad_check(f_params, &g.flatten(), &p.flatten(), 1e-5).unwrap();
        assert!(err < 1e-4, "{variant} seed {seed} params: {err}");

        let f_video = |x: &[f64]| {
            let zv = Matrix::from_vec(m, d_v, x.to_vec()).unwrap();
            probe_loss(&infuse(&zv, &z_e, &q, &p, variant).unwrap(), &u)
        };
        let err = grad_check(f_video, ig.d_video.data(), z_v.data(), 1e-5).unwrap();
        assert!(err < 1e-4, "{variant} seed {seed} Z_v: {err}");

        let f_env = |x: &[f64]| {
            let ze = Matrix::from_vec(n, d_t, x.to_vec()).unwrap();
            probe_loss(&infuse(&z_v, &ze, &q, &p, variant).unwrap(), &u)
        };
        let err = grad_check(f_env, ig.d_env.data(), z_e.data(), 1e-5).unwrap();
        assert!(err < 1e-4, "{variant} seed {seed} Z_e: {err}");

        if variant == FusionVariant::Concat {
            let f_q = |x: &[f64]| probe_loss(&infuse(&z_v, &z_e, x, &p, variant).unwrap(), &u);
            let err = grad_check(f_q, &ig.d_query, &q, 1e-5).unwrap();
            assert!(err < 1e-4, "{variant} seed {seed} z_q: {err}");
        } else {
            assert!(ig.d_query.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn fusion_gradients_pass_grad_check() {
        for seed in 0..10 {
            for v in [FusionVariant::Concat, FusionVariant::Add, FusionVariant::CrossAttention] {
                check_variant(seed, v, None);
            }
        }
        check_variant(5, FusionVariant::Concat, Some(0.0));
    }

    #[test]
    fn gate_gradient_at_zero_uses_unit_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = rand_params(21, 4, 3, 2);
        p.gamma = 0.0;
        let z_v = rand_matrix(&mut rng, 4, 3);
        let z_e = rand_matrix(&mut rng, 2, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = rand_matrix(&mut rng, 4, 3);
        let (_, cache) = infuse_forward(&z_v, &z_e, &q, &p, FusionVariant::Concat).unwrap();
        let mut g = p.zeros_like();
        infuse_grads(&cache, &u, &p, &mut g).unwrap();
        let h = 1e-5;
        let f = |gamma: f64| {
            let mut pp = p.clone();
            pp.gamma = gamma;
            probe_loss(&infuse(&z_v, &z_e, &q, &pp, FusionVariant::Concat).unwrap(), &u)
        };
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        assert!((g.gamma - numeric).abs() < 1e-8 * (1.0 + numeric.abs()));
    }

    #[test]
    fn mlp_gradients_pass_grad_check() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_params(seed, 3, 4, 2);
            let raw = rand_matrix(&mut rng, 6, 4);
            let u = rand_matrix(&mut rng, 6, 4);
            let (_, cache) = video_mlp(&raw, &p).unwrap();
            let mut g = p.zeros_like();
            video_mlp_backward(&cache, &u, &p, &mut g).unwrap();
            let f = |x: &[f64]| {
                let mut pp = p.clone();
                pp.assign_flat(x).unwrap();
                probe_loss(&video_mlp(&raw, &pp).unwrap().0, &u)
            };
            let err = grad_check(f, &g.flatten(), &p.flatten(), 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
