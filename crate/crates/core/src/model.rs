//! The full grounding model: video MLP, environment infuser and head, plus
//! its trainer and inference entry point.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{TextCache, TextEncoder, TrainLog};
use crate::error::{Error, Result};
use crate::grounder::{self, decode_dense_predictions, decode_predictions, vlg_loss, GrounderParams, HeadCache, HeadOutput, HeadOutputGrad, LossSuite, VlgLossConfig};
use crate::infuser::{infuse_forward, infuse_grads, video_mlp, video_mlp_backward, FusionVariant, InfuseCache, InfuserDims, InfuserParams, MlpCache};
use crate::interval::{GroundingSample, Interval, PredictionSet};
use crate::numerics::{AdamWConfig, AdamWState, Matrix, ParamSet};

/// Every learnable weight downstream of the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingModel {
    pub infuser: InfuserParams,
    pub head: GrounderParams,
}

impl GroundingModel {
    pub fn init(d_t: usize, d_v: usize, d_a: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            infuser: InfuserParams::init(d_t, d_v, d_a, seed)?,
            head: GrounderParams::init(d_t, d_v, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?,
        })
    }

    pub fn zeros(d_t: usize, d_v: usize, d_a: usize) -> Self {
        Self {
            infuser: InfuserParams::zeros(d_t, d_v, d_a),
            head: GrounderParams::zeros(d_t, d_v),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dims();
        Self::zeros(d.text, d.video, d.attn)
    }

    pub fn dims(&self) -> InfuserDims {
        self.infuser.dims()
    }

    pub fn validate(&self) -> Result<()> {
        self.infuser.validate()?;
        self.head.validate()?;
        let d = self.dims();
        if self.head.text_dim() != d.text || self.head.video_dim() != d.video {
            return Err(Error::shape(
                "GroundingModel",
                format!(
                    "head is {}×{}, infuser expects D_t {} / D_v {}",
                    self.head.text_dim(),
                    self.head.video_dim(),
                    d.text,
                    d.video
                ),
            ));
        }
        Ok(())
    }
}

impl ParamSet for GroundingModel {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.infuser.slices();
        v.extend(self.head.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.infuser.slices_mut();
        v.extend(self.head.slices_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: FusionVariant,
    /// Off gives the no-environment baseline, `Z = MLP(Z̃_v)`.
    pub use_environment: bool,
    pub loss: VlgLossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: FusionVariant::Concat,
            use_environment: true,
            loss: VlgLossConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    mlp: MlpCache,
    infuse: Option<InfuseCache>,
    head: HeadCache,
    env_shape: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ModelInputGrads {
    pub d_env: Matrix,
    pub d_query: Vec<f64>,
}

fn check_inputs(model: &GroundingModel, raw: &Matrix, z_e: &Matrix, z_q: &[f64]) -> Result<()> {
    let d = model.dims();
    if raw.cols() != d.video || z_e.cols() != d.text || z_q.len() != d.text {
        return Err(Error::shape(
            "model forward",
            format!(
                "video {:?}, env {:?}, query {} vs D_v {} / D_t {}",
                raw.shape(),
                z_e.shape(),
                z_q.len(),
                d.video,
                d.text
            ),
        ));
    }
    Ok(())
}

pub fn model_forward(
    model: &GroundingModel,
    cfg: &ModelConfig,
    raw: &Matrix,
    z_e: &Matrix,
    z_q: &[f64],
) -> Result<(HeadOutput, ModelCache)> {
    check_inputs(model, raw, z_e, z_q)?;
    let (z_v, mlp) = video_mlp(raw, &model.infuser)?;
    let (z, infuse) = if cfg.use_environment {
        let (z, c) = infuse_forward(&z_v, z_e, z_q, &model.infuser, cfg.variant)?;
        (z, Some(c))
    } else {
        (z_v, None)
    };
    let (out, head) = grounder::forward(&z, z_q, &model.head)?;
    Ok((
        out,
        ModelCache {
            mlp,
            infuse,
            head,
            env_shape: z_e.shape(),
        },
    ))
}

/// Accumulates parameter gradients into `grads`; returns gradients for the
/// text-side inputs.
pub fn model_backward(
    cache: &ModelCache,
    d_out: &HeadOutputGrad,
    model: &GroundingModel,
    grads: &mut GroundingModel,
) -> Result<ModelInputGrads> {
    let (d_z, mut d_query) = grounder::backward(&cache.head, d_out, &model.head, &mut grads.head)?;
    let (d_video, d_env) = match &cache.infuse {
        Some(c) => {
            let g = infuse_grads(c, &d_z, &model.infuser, &mut grads.infuser)?;
            for (a, b) in d_query.iter_mut().zip(&g.d_query) {
                *a += b;
            }
            (g.d_video, g.d_env)
        }
        None => (d_z, Matrix::zeros(cache.env_shape.0, cache.env_shape.1)),
    };
    video_mlp_backward(&cache.mlp, &d_video, &model.infuser, &mut grads.infuser)?;
    Ok(ModelInputGrads { d_env, d_query })
}

/// `L_vlg` for one sample; gradients are accumulated into `grads`.
pub fn sample_loss_and_grads(
    model: &GroundingModel,
    cfg: &ModelConfig,
    raw: &Matrix,
    z_e: &Matrix,
    z_q: &[f64],
    gt_frames: &Interval,
    grads: &mut GroundingModel,
) -> Result<(f64, ModelInputGrads)> {
    let (out, cache) = model_forward(model, cfg, raw, z_e, z_q)?;
    let (loss, d_out) = vlg_loss(&out, gt_frames, &cfg.loss)?;
    let d_in = model_backward(&cache, &d_out, model, grads)?;
    Ok((loss, d_in))
}

pub fn sample_loss(
    model: &GroundingModel,
    cfg: &ModelConfig,
    raw: &Matrix,
    z_e: &Matrix,
    z_q: &[f64],
    gt_frames: &Interval,
) -> Result<f64> {
    let (out, _) = model_forward(model, cfg, raw, z_e, z_q)?;
    Ok(vlg_loss(&out, gt_frames, &cfg.loss)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrounderTrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    /// Back-propagate `L_vlg` into the text encoder as well.
    pub joint_encoder: bool,
}

impl Default for GrounderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            seed: 0,
            optimizer: AdamWConfig::default(),
            model: ModelConfig::default(),
            joint_encoder: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GrounderRun {
    pub encoder: TextEncoder,
    pub model: GroundingModel,
    pub log: TrainLog,
}

fn check_sample_dims(s: &GroundingSample, encoder: &TextEncoder, model: &GroundingModel) -> Result<()> {
    let d = model.dims();
    if encoder.dim() != d.text {
        return Err(Error::shape(
            "train_grounder",
            format!("encoder width {} vs model D_t {}", encoder.dim(), d.text),
        ));
    }
    if s.video_features.cols() != d.video {
        return Err(Error::shape(
            "train_grounder",
            format!("query {}: {} feature columns vs D_v {}", s.query_id, s.video_features.cols(), d.video),
        ));
    }
    Ok(())
}

/// Minimizes `L_vlg` with AdamW, batch size 1, seeded per-epoch shuffle.
pub fn train_grounder(
    dataset: &[GroundingSample],
    encoder: TextEncoder,
    model: GroundingModel,
    cfg: &GrounderTrainConfig,
) -> Result<GrounderRun> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "empty training set"));
    }
    encoder.params.validate()?;
    model.validate()?;
    cfg.optimizer.validate()?;

    let mut log = TrainLog::default();
    let mut usable = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        check_sample_dims(s, &encoder, &model)?;
        match s.gt_frames() {
            Some(gt) => usable.push((i, gt)),
            None => {
                warn!("skipping query {}: ground truth covers no frame", s.query_id);
                log.skipped += 1;
            }
        }
    }
    if usable.is_empty() || cfg.epochs == 0 {
        return Ok(GrounderRun { encoder, model, log });
    }

    let mut encoder = encoder;
    let mut model = model;
    let mut opt = AdamWState::for_params(cfg.optimizer, &model);
    let mut enc_opt = cfg.joint_encoder.then(|| AdamWState::for_params(cfg.optimizer, &encoder.params));
    let mut grads = model.zeros_like();
    let mut enc_grads = encoder.params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();

    // A frozen encoder is evaluated once up front.
    let frozen: Vec<(Matrix, Vec<f64>)> = if cfg.joint_encoder {
        Vec::new()
    } else {
        usable
            .iter()
            .map(|&(i, _)| {
                let s = &dataset[i];
                (encoder.encode_captions(&s.captions), encoder.encode_text(&s.query))
            })
            .collect()
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let (i, gt) = &usable[k];
            let s = &dataset[*i];
            grads.zero();
            if let Some(enc_opt) = enc_opt.as_mut() {
                let caches: Vec<TextCache> = s.captions.texts().map(|t| encoder.forward(t)).collect();
                let z_e = Matrix::from_fn(caches.len(), encoder.dim(), |r, c| caches[r].output[c]);
                let q = encoder.forward(&s.query);
                let (loss, d_in) =
                    sample_loss_and_grads(&model, &cfg.model, &s.video_features, &z_e, &q.output, gt, &mut grads)?;
                enc_grads.zero();
                for (r, cache) in caches.iter().enumerate() {
                    encoder.backward(cache, d_in.d_env.row(r), &mut enc_grads);
                }
                encoder.backward(&q, &d_in.d_query, &mut enc_grads);
                enc_opt.step_params(&mut encoder.params, &enc_grads)?;
                total += loss;
            } else {
                let (z_e, z_q) = &frozen[k];
                let (loss, _) = sample_loss_and_grads(&model, &cfg.model, &s.video_features, z_e, z_q, gt, &mut grads)?;
                total += loss;
            }
            opt.step_params(&mut model, &grads)?;
        }
        let mean = total / usable.len() as f64;
        debug!("epoch {}: mean loss {mean:.6}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    log.steps = opt.step_count();
    Ok(GrounderRun { encoder, model, log })
}

/// Ranked candidates for one sample.
pub fn predict_sample(
    sample: &GroundingSample,
    encoder: &TextEncoder,
    model: &GroundingModel,
    cfg: &ModelConfig,
    k: usize,
) -> Result<PredictionSet> {
    let z_e = encoder.encode_captions(&sample.captions);
    let z_q = encoder.encode_text(&sample.query);
    let (out, _) = model_forward(model, cfg, &sample.video_features, &z_e, &z_q)?;
    let fps = sample.video.fps;
    match cfg.loss.suite {
        LossSuite::SpanQgh => decode_predictions(&sample.query_id, &out.start_logits, &out.end_logits, k, fps),
        LossSuite::FocalDiou => decode_dense_predictions(&sample.query_id, &out.highlight_logits, &out.offsets, k, fps),
    }
}

pub fn predict(
    samples: &[GroundingSample],
    encoder: &TextEncoder,
    model: &GroundingModel,
    cfg: &ModelConfig,
    k: usize,
) -> Result<Vec<PredictionSet>> {
    samples.iter().map(|s| predict_sample(s, encoder, model, cfg, k)).collect()
}
