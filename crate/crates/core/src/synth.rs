//! Seeded synthetic grounding data.
//!
//! Each video is a sequence of environment segments on the caption grid. One
//! segment, placed uniformly at random, belongs to an environment that
//! appears nowhere else in the video; its span is the ground truth and the
//! query names two words from that environment's vocabulary. Whether the
//! captions and the video features carry the segment structure is
//! switchable, which makes it possible to put the localization signal in the
//! captions only.
//!
//! Randomness is counter based: every (video, purpose) pair reads its own
//! ChaCha8 stream under the run seed, and only integer draws are used, so
//! generation does not depend on iteration order or platform floats.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::text_only_window;
use crate::interval::{frames_to_seconds, interval_iou, CaptionTrack, GroundingSample, Interval, VideoMeta};
use crate::numerics::Matrix;

const WORDS_PER_ENV: usize = 6;
const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "ve", "du", "ba", "fe", "go", "hu", "ji", "ze", "ro", "wa", "ny", "qi",
];
const FILLERS: [&str; 6] = ["person", "room", "looking", "around", "standing", "nearby"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub caption_interval_s: f64,
    pub n_environments: usize,
    pub gt_span_s: f64,
    pub d_v: usize,
    pub informative_captions: bool,
    pub informative_video: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_videos: 200,
            duration_s: 480.0,
            fps: 0.2,
            caption_interval_s: 10.0,
            n_environments: 8,
            gt_span_s: 30.0,
            d_v: 32,
            informative_captions: true,
            informative_video: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("duration_s", self.duration_s),
            ("fps", self.fps),
            ("caption_interval_s", self.caption_interval_s),
            ("gt_span_s", self.gt_span_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if self.n_environments < 2 {
            return Err(Error::invalid("n_environments", "must be >= 2"));
        }
        if self.d_v == 0 {
            return Err(Error::invalid("d_v", "must be >= 1"));
        }
        if self.gt_span_s > self.duration_s {
            return Err(Error::invalid("gt_span_s", "longer than the video"));
        }
        let probe = VideoMeta::new("probe", self.duration_s, self.fps)?;
        if self.n_captions() > probe.frame_count {
            return Err(Error::invalid(
                "caption_interval_s",
                format!("{} captions exceed {} frames", self.n_captions(), probe.frame_count),
            ));
        }
        Ok(())
    }

    /// Caption count `⌈duration / interval⌉`.
    pub fn n_captions(&self) -> usize {
        ((self.duration_s / self.caption_interval_s) - 1e-9).ceil().max(1.0) as usize
    }

    /// Number of grid-aligned GT start positions.
    fn gt_positions(&self) -> usize {
        ((self.duration_s - self.gt_span_s) / self.caption_interval_s + 1e-9).floor() as usize + 1
    }

    /// Caption slots touched by a GT starting on slot `a`.
    fn gt_slots(&self, a: usize) -> std::ops::Range<usize> {
        let len = (self.gt_span_s / self.caption_interval_s - 1e-9).ceil().max(1.0) as usize;
        a..(a + len).min(self.n_captions())
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Layout = 0,
    Captions = 1,
    Query = 2,
    Features = 3,
}

const STREAMS_PER_VIDEO: u64 = 4;

fn stream(seed: u64, video: usize, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(video as u64 * STREAMS_PER_VIDEO + s as u64);
    rng
}

/// Shared across videos: vocabularies and feature prototypes.
fn global_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Uniform in `[-1, 1)` from 32 random bits; exact in `f64`.
fn unit_noise(rng: &mut ChaCha8Rng) -> f64 {
    rng.next_u32() as f64 / 2_147_483_648.0 - 1.0
}

fn vocabularies(rng: &mut ChaCha8Rng, n_env: usize) -> Vec<Vec<String>> {
    let mut seen = std::collections::HashSet::new();
    (0..n_env)
        .map(|_| {
            let mut words = Vec::with_capacity(WORDS_PER_ENV);
            while words.len() < WORDS_PER_ENV {
                let w: String = (0..3).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        })
        .collect()
}

/// GT start slot drawn the same way the generator does.
fn draw_gt_slot(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(0..cfg.gt_positions())
}

fn gt_interval(cfg: &SynthConfig, slot: usize) -> Result<Interval> {
    let start = slot as f64 * cfg.caption_interval_s;
    Interval::seconds(start, (start + cfg.gt_span_s).min(cfg.duration_s))
}

/// Per-slot environment ids with the GT environment confined to the GT slots.
fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (usize, usize, Vec<usize>) {
    let n = cfg.n_captions();
    let gt_slot = draw_gt_slot(cfg, rng);
    let gt_env = rng.random_range(0..cfg.n_environments);
    let others: Vec<usize> = (0..cfg.n_environments).filter(|&e| e != gt_env).collect();
    let gt_slots = cfg.gt_slots(gt_slot);
    let mut envs = vec![gt_env; n];
    let fill = |range: std::ops::Range<usize>, envs: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        let mut k = range.start;
        let mut prev = usize::MAX;
        while k < range.end {
            let len = rng.random_range(2..=6usize);
            let choices: Vec<usize> = others.iter().copied().filter(|&e| e != prev).collect();
            let pool = if choices.is_empty() { &others } else { &choices };
            let env = pool[rng.random_range(0..pool.len())];
            for slot in envs.iter_mut().take((k + len).min(range.end)).skip(k) {
                *slot = env;
            }
            prev = env;
            k += len;
        }
    };
    fill(0..gt_slots.start, &mut envs, rng);
    fill(gt_slots.end..n, &mut envs, rng);
    (gt_slot, gt_env, envs)
}

/// Draws the dataset. Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<GroundingSample>> {
    cfg.validate()?;
    let mut global = global_stream(cfg.seed);
    let vocab = vocabularies(&mut global, cfg.n_environments);
    let prototypes = Matrix::from_fn(cfg.n_environments, cfg.d_v, |_, _| unit_noise(&mut global));
    let n = cfg.n_captions();

    (0..cfg.n_videos)
        .map(|v| {
            let video_id = format!("vid{v:05}");
            let video = VideoMeta::new(video_id.clone(), cfg.duration_s, cfg.fps)?;
            let (gt_slot, gt_env, envs) = layout(cfg, &mut stream(cfg.seed, v, Stream::Layout));

            let mut rng = stream(cfg.seed, v, Stream::Captions);
            let entries = (0..n)
                .map(|k| {
                    let env = if cfg.informative_captions {
                        envs[k]
                    } else {
                        rng.random_range(0..cfg.n_environments)
                    };
                    let w = &vocab[env];
                    let a = &w[rng.random_range(0..WORDS_PER_ENV)];
                    let b = &w[rng.random_range(0..WORDS_PER_ENV)];
                    let c = &w[rng.random_range(0..WORDS_PER_ENV)];
                    let f = FILLERS[rng.random_range(0..FILLERS.len())];
                    (k as f64 * cfg.caption_interval_s, format!("{f} in a {a} {b} with {c}"))
                })
                .collect();
            let captions = CaptionTrack::new(video_id.clone(), entries, cfg.caption_interval_s)?;

            let mut rng = stream(cfg.seed, v, Stream::Query);
            let w = &vocab[gt_env];
            let first = rng.random_range(0..WORDS_PER_ENV);
            let second = (first + rng.random_range(1..WORDS_PER_ENV)) % WORDS_PER_ENV;
            let query = format!("when was i in the {} {}", w[first], w[second]);

            let mut rng = stream(cfg.seed, v, Stream::Features);
            let m = video.frame_count;
            let features = Matrix::from_fn(m, cfg.d_v, |j, c| {
                let noise = unit_noise(&mut rng);
                if cfg.informative_video {
                    let t = (j as f64 + 0.5) / cfg.fps;
                    let slot = ((t / cfg.caption_interval_s) as usize).min(n - 1);
                    prototypes.get(envs[slot], c) + 0.5 * noise
                } else {
                    noise
                }
            });

            GroundingSample::new(
                format!("q{v:05}"),
                video,
                captions,
                query,
                gt_interval(cfg, gt_slot)?,
                features,
            )
        })
        .collect()
}

fn basis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::invalid("dim", "oracle embeddings need at least 2 dimensions"));
    }
    Ok(())
}

/// Captions whose timestamp falls in `[gt.start, gt.end)` are embedded as the
/// query vector, the rest as a vector orthogonal to it.
pub fn oracle_embeddings(sample: &GroundingSample, dim: usize) -> Result<(Matrix, Vec<f64>)> {
    check_dim(dim)?;
    let (q, other) = (basis(dim, 0), basis(dim, 1));
    let entries = sample.captions.entries();
    let z_e = Matrix::from_fn(entries.len(), dim, |r, c| {
        let t = entries[r].time_s;
        let inside = t >= sample.gt.start() && t < sample.gt.end();
        if inside {
            q[c]
        } else {
            other[c]
        }
    });
    Ok((z_e, q))
}

/// Embeddings whose most query-like caption is the one farthest from the GT
/// midpoint.
pub fn adversarial_embeddings(sample: &GroundingSample, dim: usize) -> Result<(Matrix, Vec<f64>)> {
    check_dim(dim)?;
    let mid = 0.5 * (sample.gt.start() + sample.gt.end());
    let entries = sample.captions.entries();
    let mut far = 0;
    for (i, e) in entries.iter().enumerate() {
        if (e.time_s - mid).abs() > (entries[far].time_s - mid).abs() {
            far = i;
        }
    }
    let (q, other) = (basis(dim, 0), basis(dim, 1));
    let z_e = Matrix::from_fn(entries.len(), dim, |r, c| if r == far { q[c] } else { other[c] });
    Ok((z_e, q))
}

fn monte_carlo<F>(cfg: &SynthConfig, threshold: f64, trials: usize, seed: u64, mut predict: F) -> Result<f64>
where
    F: FnMut(&mut ChaCha8Rng, &VideoMeta) -> Result<Interval>,
{
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let video = VideoMeta::new("chance", cfg.duration_s, cfg.fps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let gt = gt_interval(cfg, draw_gt_slot(cfg, &mut rng))?;
        let pred = predict(&mut rng, &video)?;
        if interval_iou(&pred, &gt)? >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

/// Recall@1 of an uninformed predictor that places a GT-length span at a
/// random grid position, against the generator's GT placement.
pub fn random_span_chance(cfg: &SynthConfig, threshold: f64, trials: usize, seed: u64) -> Result<f64> {
    monte_carlo(cfg, threshold, trials, seed, |rng, _| gt_interval(cfg, draw_gt_slot(cfg, rng)))
}

/// Recall@1 of the caption-only window centred on a uniformly random caption.
pub fn text_only_chance(cfg: &SynthConfig, span_s: f64, threshold: f64, trials: usize, seed: u64) -> Result<f64> {
    let n = cfg.n_captions();
    monte_carlo(cfg, threshold, trials, seed, |rng, video| {
        let i = rng.random_range(1..=n);
        let w = text_only_window(i, n, video.frame_count, video.fps, span_s)?;
        frames_to_seconds(&w, video.fps)
    })
}
