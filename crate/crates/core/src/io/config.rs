//! `key = value` configuration files with `#` comments.
//!
//! Absent keys take their defaults, unknown or repeated keys are rejected and
//! every value is validated before a config is returned.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderLoss, EncoderTrainConfig, DEFAULT_DIM, DEFAULT_VOCAB};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_SPAN_S;
use crate::grounder::{LossSuite, VlgLossConfig};
use crate::infuser::FusionVariant;
use crate::model::{GrounderTrainConfig, ModelConfig};
use crate::numerics::AdamWConfig;
use crate::synth::SynthConfig;

use super::captions::DEFAULT_CAPTION_INTERVAL_S;

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Splits the file into key/value pairs. Text after `#` is a comment.
fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(config_err(&format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(config_err(&format!("line {}", i + 1), "empty key"));
        }
        if pairs.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(config_err(key, "given more than once"));
        }
    }
    Ok(pairs)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn get<T: FromStr>(&mut self, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.0.remove(key) {
            *into = v.parse().map_err(|e| config_err(key, format!("cannot parse `{v}`: {e}")))?;
        }
        Ok(())
    }

    fn flag(&mut self, key: &str, into: &mut bool) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            *into = match v.as_str() {
                "true" | "on" | "yes" | "1" => true,
                "false" | "off" | "no" | "0" => false,
                _ => return Err(config_err(key, format!("expected a boolean, got `{v}`"))),
            };
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.0.into_keys().next() {
            Some(key) => Err(config_err(&key, "unknown key")),
            None => Ok(()),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(key, format!("must be > 0, got {v}")))
    }
}

/// Re-labels a module validation error with the config key it came from.
fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument { arg, reason } => config_err(arg, reason),
        other => config_err("config", other.to_string()),
    }
}

/// Training, fusion and evaluation settings for one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: EncoderLoss,
    pub suite: LossSuite,
    pub variant: FusionVariant,
    pub d_t: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub vocab: usize,
    pub normalize_embeddings: bool,
    pub caption_interval_s: f64,
    pub span_s: f64,
    pub use_environment: bool,
    pub joint_encoder: bool,
    pub qgh_extension: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let loss = VlgLossConfig::default();
        Self {
            seed: 0,
            epochs: 20,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            loss: EncoderLoss::Mll,
            suite: loss.suite,
            variant: FusionVariant::Concat,
            d_t: DEFAULT_DIM,
            d_v: 32,
            d_a: DEFAULT_DIM,
            vocab: DEFAULT_VOCAB,
            normalize_embeddings: true,
            caption_interval_s: DEFAULT_CAPTION_INTERVAL_S,
            span_s: DEFAULT_SPAN_S,
            use_environment: true,
            joint_encoder: false,
            qgh_extension: loss.qgh_extension,
            focal_alpha: loss.focal_alpha,
            focal_gamma: loss.focal_gamma,
            top_k: 5,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields(parse_pairs(text)?);
        let mut c = Self::default();
        f.get("seed", &mut c.seed)?;
        f.get("epochs", &mut c.epochs)?;
        f.get("lr", &mut c.lr)?;
        f.get("weight_decay", &mut c.weight_decay)?;
        f.get("loss", &mut c.loss)?;
        f.get("suite", &mut c.suite)?;
        f.get("variant", &mut c.variant)?;
        if let Some(v) = f.0.remove("dims") {
            let parts: Vec<&str> = v.split([',', ' ']).filter(|s| !s.is_empty()).collect();
            let dims: Vec<usize> = parts
                .iter()
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| config_err("dims", format!("cannot parse `{v}`: {e}")))?;
            let [d_t, d_v, d_a, vocab] = dims[..] else {
                return Err(config_err("dims", format!("expected `D_t, D_v, D_a, V`, got `{v}`")));
            };
            (c.d_t, c.d_v, c.d_a, c.vocab) = (d_t, d_v, d_a, vocab);
        }
        f.flag("normalize_embeddings", &mut c.normalize_embeddings)?;
        f.get("caption_interval_s", &mut c.caption_interval_s)?;
        f.get("span_s", &mut c.span_s)?;
        f.flag("use_environment", &mut c.use_environment)?;
        f.flag("joint_encoder", &mut c.joint_encoder)?;
        f.get("qgh_extension", &mut c.qgh_extension)?;
        f.get("focal_alpha", &mut c.focal_alpha)?;
        f.get("focal_gamma", &mut c.focal_gamma)?;
        f.get("top_k", &mut c.top_k)?;
        f.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_config_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate().map_err(as_config)?;
        self.vlg_loss().validate().map_err(as_config)?;
        if self.d_t < 2 || self.vocab < 2 || self.d_v == 0 || self.d_a == 0 {
            return Err(config_err("dims", "need D_t >= 2, D_v >= 1, D_a >= 1, V >= 2"));
        }
        positive("caption_interval_s", self.caption_interval_s)?;
        positive("span_s", self.span_s)?;
        if self.top_k == 0 {
            return Err(config_err("top_k", "must be >= 1"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn vlg_loss(&self) -> VlgLossConfig {
        VlgLossConfig {
            suite: self.suite,
            qgh_extension: self.qgh_extension,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            use_environment: self.use_environment,
            loss: self.vlg_loss(),
        }
    }

    pub fn encoder_train_config(&self) -> EncoderTrainConfig {
        EncoderTrainConfig {
            epochs: self.epochs,
            seed: self.seed,
            loss: self.loss,
            optimizer: self.optimizer(),
        }
    }

    pub fn grounder_train_config(&self) -> GrounderTrainConfig {
        GrounderTrainConfig {
            epochs: self.epochs,
            seed: self.seed,
            optimizer: self.optimizer(),
            model: self.model_config(),
            joint_encoder: self.joint_encoder,
        }
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", &self.seed);
        kv("epochs", &self.epochs);
        kv("lr", &self.lr);
        kv("weight_decay", &self.weight_decay);
        kv("loss", &self.loss);
        kv("suite", &self.suite);
        kv("variant", &self.variant);
        kv("dims", &format!("{}, {}, {}, {}", self.d_t, self.d_v, self.d_a, self.vocab));
        kv("normalize_embeddings", &self.normalize_embeddings);
        kv("caption_interval_s", &self.caption_interval_s);
        kv("span_s", &self.span_s);
        kv("use_environment", &self.use_environment);
        kv("joint_encoder", &self.joint_encoder);
        kv("qgh_extension", &self.qgh_extension);
        kv("focal_alpha", &self.focal_alpha);
        kv("focal_gamma", &self.focal_gamma);
        kv("top_k", &self.top_k);
        s
    }
}

/// A missing config file is a usage problem, not a data one.
fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e.to_string()))
}

pub fn parse_synth_config(text: &str) -> Result<SynthConfig> {
    let mut f = Fields(parse_pairs(text)?);
    let mut c = SynthConfig::default();
    f.get("seed", &mut c.seed)?;
    f.get("n_videos", &mut c.n_videos)?;
    f.get("duration_s", &mut c.duration_s)?;
    f.get("fps", &mut c.fps)?;
    f.get("caption_interval_s", &mut c.caption_interval_s)?;
    f.get("n_environments", &mut c.n_environments)?;
    f.get("gt_span_s", &mut c.gt_span_s)?;
    f.get("d_v", &mut c.d_v)?;
    f.flag("informative_captions", &mut c.informative_captions)?;
    f.flag("informative_video", &mut c.informative_video)?;
    f.finish()?;
    c.validate().map_err(as_config)?;
    Ok(c)
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    parse_synth_config(&read_config_text(path)?)
}

pub fn render_synth_config(c: &SynthConfig) -> String {
    format!(
        "seed = {}\nn_videos = {}\nduration_s = {}\nfps = {}\ncaption_interval_s = {}\nn_environments = {}\n\
         gt_span_s = {}\nd_v = {}\ninformative_captions = {}\ninformative_video = {}\n",
        c.seed,
        c.n_videos,
        c.duration_s,
        c.fps,
        c.caption_interval_s,
        c.n_environments,
        c.gt_span_s,
        c.d_v,
        c.informative_captions,
        c.informative_video
    )
}
