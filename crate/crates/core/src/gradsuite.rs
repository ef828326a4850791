//! Central-difference checks of every hand-derived gradient, from the
//! individual losses up to the full encoder → infuser → head composition.
//!
//! Instances are small and deliberately well conditioned: with `h = 1e-5` in
//! 64-bit arithmetic the finite-difference noise sits near `1e-11`, so any
//! gradient component far below `1e-7` would fail the relative test for
//! reasons unrelated to the derivation. Directions along which the loss is
//! exactly invariant (a common shift of all start or end logits) are not
//! differenced; their analytic gradient is asserted to vanish instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{bce_loss, mll_loss, CaptionSpan, TextCache, TextEncoder, TextEncoderParams};
use crate::error::{Error, Result};
use crate::grounder::{self, diou_loss, focal_loss, qgh_loss, span_loss, GrounderParams, HeadOutputGrad, LossSuite, VlgLossConfig};
use crate::infuser::{infuse_forward, infuse_grads, video_mlp, video_mlp_backward, FusionVariant, InfuserParams};
use crate::interval::Interval;
use crate::model::{model_backward, model_forward, sample_loss_and_grads, GroundingModel, ModelConfig};
use crate::numerics::{grad_check, Matrix, ParamSet};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Largest analytic gradient tolerated along an exact invariance direction.
const GAUGE_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradSuiteReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.max_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    /// `Err(GradCheck)` naming the worst entry when any check failed.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let w = self.worst().expect("a failing report has entries");
        Err(Error::GradCheck {
            what: format!("{} (seed {})", w.name, w.seed),
            max_rel_err: w.max_rel_err,
            tolerance: self.tolerance,
        })
    }
}

/// Deliberate corruption of one analytic gradient, for exercising the
/// failure path of the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Flip the sign of `∂L/∂γ` in the end-to-end check.
    GateSign,
}

struct Suite {
    seed: u64,
    entries: Vec<GradCheckEntry>,
}

impl Suite {
    fn record(&mut self, name: impl Into<String>, err: f64) {
        self.entries.push(GradCheckEntry {
            name: name.into(),
            seed: self.seed,
            max_rel_err: err,
        });
    }

    fn check<F: FnMut(&[f64]) -> f64>(&mut self, name: &str, f: F, analytic: &[f64], x: &[f64]) -> Result<()> {
        let err = grad_check(f, analytic, x, GRAD_STEP)?;
        self.record(name, err);
        Ok(())
    }

    /// Differences only the coordinates in `keep`; the rest must carry a
    /// vanishing analytic gradient.
    fn check_subset<F: FnMut(&[f64]) -> f64>(
        &mut self,
        name: &str,
        mut f: F,
        analytic: &[f64],
        x: &[f64],
        gauge: &[usize],
    ) -> Result<()> {
        let keep: Vec<usize> = (0..x.len()).filter(|i| !gauge.contains(i)).collect();
        let gauge_err = gauge.iter().map(|&i| analytic[i].abs()).fold(0.0, f64::max);
        let sub_x: Vec<f64> = keep.iter().map(|&i| x[i]).collect();
        let sub_a: Vec<f64> = keep.iter().map(|&i| analytic[i]).collect();
        let mut full = x.to_vec();
        let err = grad_check(
            |s| {
                for (&i, &v) in keep.iter().zip(s) {
                    full[i] = v;
                }
                f(&full)
            },
            &sub_a,
            &sub_x,
            GRAD_STEP,
        )?;
        // A non-vanishing gauge gradient is reported as a full failure.
        self.record(name, if gauge_err > GAUGE_ZERO { 1.0 } else { err });
        Ok(())
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, a: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-a..a))
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

fn rand_span(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    let s = rng.random_range(1..=n);
    (s, rng.random_range(s..=n))
}

/// Infuser weights with an open gate and O(1) attention logits.
fn conditioned_infuser(d_t: usize, d_v: usize, d_a: usize, seed: u64) -> Result<InfuserParams> {
    let mut p = InfuserParams::init(d_t, d_v, d_a, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    p.gamma = sign * rng.random_range(0.5..1.5);
    p.ca_query_proj.scale(2.0);
    p.ca_key_proj.scale(2.0);
    p.mlp_b1 = rand_vec(&mut rng, d_v, 0.5);
    p.mlp_b2 = rand_vec(&mut rng, d_v, 0.5);
    Ok(p)
}

fn conditioned_head(d_t: usize, d_v: usize, seed: u64) -> Result<GrounderParams> {
    let mut p = GrounderParams::init(d_t, d_v, seed)?;
    p.query_proj.scale(2.0);
    p.start_head.taps.scale(2.0);
    p.end_head.taps.scale(2.0);
    Ok(p)
}

fn contrastive_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, d) = (6, 5);
    let z_e = rand_matrix(rng, n, d, 1.0);
    let z_q = rand_vec(rng, d, 1.0);
    let (a, b) = rand_span(rng, n);
    let span = CaptionSpan::new(a, b);
    for (name, loss) in [("mll", mll_loss as fn(&Matrix, &[f64], CaptionSpan) -> _), ("bce", bce_loss)] {
        let g = loss(&z_e, &z_q, span)?;
        s.check(
            &format!("{name} / captions"),
            |x| loss(&Matrix::from_vec(n, d, x.to_vec()).unwrap(), &z_q, span).unwrap().loss,
            g.d_captions.data(),
            z_e.data(),
        )?;
        s.check(&format!("{name} / query"), |x| loss(&z_e, x, span).unwrap().loss, &g.d_query, &z_q)?;
    }
    Ok(())
}

fn head_loss_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let m = 8;
    let (a, b) = rand_span(rng, m);
    let gt = Interval::frames(a, b)?;
    let x = rand_vec(rng, m, 3.0);
    let y = rand_vec(rng, m, 3.0);

    let g = span_loss(&x, &y, &gt)?;
    let mut both = x.clone();
    both.extend(&y);
    let mut analytic = g.d_start.clone();
    analytic.extend(&g.d_end);
    s.check("span", |v| span_loss(&v[..m], &v[m..], &gt).unwrap().loss, &analytic, &both)?;

    let g = qgh_loss(&x, &gt, 0.0)?;
    s.check("qgh", |v| qgh_loss(v, &gt, 0.0).unwrap().loss, &g.d_logits, &x)?;

    let alpha = rng.random_range(0.1..0.9);
    let gamma_f = rng.random_range(0.0..3.0);
    let g = focal_loss(&x, &gt, alpha, gamma_f)?;
    s.check("focal", |v| focal_loss(v, &gt, alpha, gamma_f).unwrap().loss, &g.d_logits, &x)?;

    let ps = rng.random_range(0.0..20.0);
    let pe = ps + rng.random_range(0.5..10.0);
    let gs = rng.random_range(0.0..20.0);
    let ge = gs + rng.random_range(0.5..10.0);
    let gt_s = Interval::seconds(gs, ge)?;
    let d = diou_loss(&Interval::seconds(ps, pe)?, &gt_s)?;
    s.check(
        "diou",
        |v| diou_loss(&Interval::seconds(v[0], v[1]).unwrap(), &gt_s).unwrap().loss,
        &[d.d_start, d.d_end],
        &[ps, pe],
    )?;
    Ok(())
}

fn infuser_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let (d_t, d_v, d_a, n, m) = (5, 4, 3, 4, 7);
    let p = conditioned_infuser(d_t, d_v, d_a, s.seed)?;
    let z_v = rand_matrix(rng, m, d_v, 1.0);
    let z_e = rand_matrix(rng, n, d_t, 1.0);
    let z_q = rand_vec(rng, d_t, 1.0);
    let probe = rand_matrix(rng, m, d_v, 1.0);
    let project = |z: &Matrix| -> f64 { z.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };

    for variant in [FusionVariant::Concat, FusionVariant::Add, FusionVariant::CrossAttention] {
        let (_, cache) = infuse_forward(&z_v, &z_e, &z_q, &p, variant)?;
        let mut g = p.zeros_like();
        let inputs = infuse_grads(&cache, &probe, &p, &mut g)?;
        let eval = |pp: &InfuserParams, zv: &Matrix, ze: &Matrix, zq: &[f64]| project(&infuse_forward(zv, ze, zq, pp, variant).unwrap().0);
        s.check(
            &format!("infuser {variant} / params"),
            |x| {
                let mut q = p.clone();
                q.assign_flat(x).unwrap();
                eval(&q, &z_v, &z_e, &z_q)
            },
            &g.flatten(),
            &p.flatten(),
        )?;
        s.check(
            &format!("infuser {variant} / Z_v"),
            |x| eval(&p, &Matrix::from_vec(m, d_v, x.to_vec()).unwrap(), &z_e, &z_q),
            inputs.d_video.data(),
            z_v.data(),
        )?;
        s.check(
            &format!("infuser {variant} / Z_e"),
            |x| eval(&p, &z_v, &Matrix::from_vec(n, d_t, x.to_vec()).unwrap(), &z_q),
            inputs.d_env.data(),
            z_e.data(),
        )?;
        s.check(
            &format!("infuser {variant} / z_q"),
            |x| eval(&p, &z_v, &z_e, x),
            &inputs.d_query,
            &z_q,
        )?;
    }

    let (out, cache) = video_mlp(&z_v, &p)?;
    let _ = out;
    let mut g = p.zeros_like();
    video_mlp_backward(&cache, &probe, &p, &mut g)?;
    s.check(
        "video mlp",
        |x| {
            let mut q = p.clone();
            q.assign_flat(x).unwrap();
            project(&video_mlp(&z_v, &q).unwrap().0)
        },
        &g.flatten(),
        &p.flatten(),
    )?;
    Ok(())
}

/// Flat indices of the start/end head biases inside a parameter layout whose
/// slots begin at `base` with the grounder's slot order.
fn span_bias_indices(head: &GrounderParams, base: usize) -> Vec<usize> {
    let sizes: Vec<usize> = head.slices().iter().map(|s| s.len()).collect();
    let offset = |slot: usize| base + sizes[..slot].iter().sum::<usize>();
    vec![offset(2), offset(4)]
}

fn head_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let (d_t, d_v, m) = (5, 4, 7);
    let p = conditioned_head(d_t, d_v, s.seed)?;
    let z = rand_matrix(rng, m, d_v, 1.0);
    let z_q = rand_vec(rng, d_t, 1.0);
    let d = HeadOutputGrad {
        start_logits: rand_vec(rng, m, 1.0),
        end_logits: rand_vec(rng, m, 1.0),
        highlight_logits: rand_vec(rng, m, 1.0),
        offsets: rand_matrix(rng, m, 2, 1.0),
    };
    let project = |pp: &GrounderParams, zz: &Matrix, q: &[f64]| -> f64 {
        let (o, _) = grounder::forward(zz, q, pp).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&o.start_logits, &d.start_logits)
            + dot(&o.end_logits, &d.end_logits)
            + dot(&o.highlight_logits, &d.highlight_logits)
            + dot(o.offsets.data(), d.offsets.data())
    };
    let (_, cache) = grounder::forward(&z, &z_q, &p)?;
    let mut g = p.zeros_like();
    let (d_z, d_q) = grounder::backward(&cache, &d, &p, &mut g)?;
    s.check(
        "head / params",
        |x| {
            let mut q = p.clone();
            q.assign_flat(x).unwrap();
            project(&q, &z, &z_q)
        },
        &g.flatten(),
        &p.flatten(),
    )?;
    s.check("head / Z", |x| project(&p, &Matrix::from_vec(m, d_v, x.to_vec()).unwrap(), &z_q), d_z.data(), z.data())?;
    s.check("head / z_q", |x| project(&p, &z, x), &d_q, &z_q)?;
    Ok(())
}

/// Encoder parameters and model parameters concatenated, for the
/// end-to-end check.
#[derive(Clone)]
struct Joint {
    encoder: TextEncoder,
    model: GroundingModel,
}

impl ParamSet for Joint {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.params.slices();
        v.extend(self.model.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.params.slices_mut();
        v.extend(self.model.slices_mut());
        v
    }
}

struct EndToEndInstance {
    captions: Vec<String>,
    query: String,
    raw: Matrix,
    gt: Interval,
}

fn end_to_end_instance(rng: &mut ChaCha8Rng, d_v: usize) -> Result<EndToEndInstance> {
    let words = ["stove", "sink", "desk", "lamp", "car", "tyre", "bench", "tree"];
    let n = 4;
    let m = 8;
    let captions = (0..n)
        .map(|_| {
            let a = words[rng.random_range(0..words.len())];
            let b = words[rng.random_range(0..words.len())];
            format!("{a} near {b}")
        })
        .collect();
    let query = format!("{} {}", words[rng.random_range(0..words.len())], words[rng.random_range(0..words.len())]);
    let (a, b) = rand_span(rng, m);
    Ok(EndToEndInstance {
        captions,
        query,
        raw: rand_matrix(rng, m, d_v, 1.0),
        gt: Interval::frames(a, b)?,
    })
}

fn end_to_end_loss(j: &Joint, cfg: &ModelConfig, inst: &EndToEndInstance) -> f64 {
    let rows: Vec<Vec<f64>> = inst.captions.iter().map(|c| j.encoder.encode_text(c)).collect();
    let z_e = Matrix::from_fn(rows.len(), j.encoder.dim(), |r, c| rows[r][c]);
    let z_q = j.encoder.encode_text(&inst.query);
    crate::model::sample_loss(&j.model, cfg, &inst.raw, &z_e, &z_q, &inst.gt).unwrap()
}

fn end_to_end_grads(j: &Joint, cfg: &ModelConfig, inst: &EndToEndInstance) -> Result<Joint> {
    let caches: Vec<TextCache> = inst.captions.iter().map(|c| j.encoder.forward(c)).collect();
    let z_e = Matrix::from_fn(caches.len(), j.encoder.dim(), |r, c| caches[r].output[c]);
    let q = j.encoder.forward(&inst.query);
    let mut g = Joint {
        encoder: TextEncoder::new(j.encoder.params.zeros_like(), j.encoder.normalize),
        model: j.model.zeros_like(),
    };
    let (_, d_in) = sample_loss_and_grads(&j.model, cfg, &inst.raw, &z_e, &q.output, &inst.gt, &mut g.model)?;
    for (r, c) in caches.iter().enumerate() {
        j.encoder.backward(c, d_in.d_env.row(r), &mut g.encoder.params);
    }
    j.encoder.backward(&q, &d_in.d_query, &mut g.encoder.params);
    Ok(g)
}

fn end_to_end_checks(s: &mut Suite, rng: &mut ChaCha8Rng, fault: Fault) -> Result<()> {
    let (vocab, d_t, d_v, d_a) = (16, 5, 4, 3);
    let mut enc_params = TextEncoderParams::init(vocab, d_t, s.seed)?;
    enc_params.token_table.scale(2.0);
    let joint = Joint {
        encoder: TextEncoder::new(enc_params, true),
        model: GroundingModel {
            infuser: conditioned_infuser(d_t, d_v, d_a, s.seed)?,
            head: conditioned_head(d_t, d_v, s.seed.wrapping_add(1))?,
        },
    };
    let inst = end_to_end_instance(rng, d_v)?;
    let enc_len = joint.encoder.params.num_params();
    let infuser_len = joint.model.infuser.num_params();
    let gamma_idx = enc_len + joint.model.infuser.w.data().len();

    let suites = [
        (FusionVariant::Concat, LossSuite::SpanQgh),
        (FusionVariant::Add, LossSuite::FocalDiou),
        (FusionVariant::CrossAttention, LossSuite::SpanQgh),
    ];
    for (variant, suite) in suites {
        let cfg = ModelConfig {
            variant,
            use_environment: true,
            loss: VlgLossConfig {
                suite,
                ..Default::default()
            },
        };
        let g = end_to_end_grads(&joint, &cfg, &inst)?;
        let mut analytic = g.flatten();
        if fault == Fault::GateSign {
            analytic[gamma_idx] = -analytic[gamma_idx];
        }
        let x = joint.flatten();
        let gauge = if suite == LossSuite::SpanQgh {
            span_bias_indices(&joint.model.head, enc_len + infuser_len)
        } else {
            Vec::new()
        };
        let f = |v: &[f64]| {
            let mut jj = joint.clone();
            jj.assign_flat(v).unwrap();
            end_to_end_loss(&jj, &cfg, &inst)
        };
        s.check_subset(&format!("end-to-end {variant}/{suite}"), f, &analytic, &x, &gauge)?;
        if variant == FusionVariant::Concat {
            s.check(
                "end-to-end gate",
                |v| {
                    let mut jj = joint.clone();
                    jj.model.infuser.gamma = v[0];
                    end_to_end_loss(&jj, &cfg, &inst)
                },
                &[analytic[gamma_idx]],
                &[joint.model.infuser.gamma],
            )?;
        }
    }

    // The baseline path must not leak gradient into the environment input.
    let cfg = ModelConfig {
        use_environment: false,
        ..Default::default()
    };
    let z_e = Matrix::from_fn(inst.captions.len(), d_t, |r, c| (r + c) as f64 * 0.1);
    let z_q = joint.encoder.encode_text(&inst.query);
    let (out, cache) = model_forward(&joint.model, &cfg, &inst.raw, &z_e, &z_q)?;
    let (_, d_out) = grounder::vlg_loss(&out, &inst.gt, &cfg.loss)?;
    let mut g = joint.model.zeros_like();
    let d_in = model_backward(&cache, &d_out, &joint.model, &mut g)?;
    s.record("baseline / env isolation", d_in.d_env.max_abs());
    Ok(())
}

/// Runs every check for seeds `0..seeds`. Failures are reported in the
/// returned value, not as `Err`; use [`GradSuiteReport::into_result`].
pub fn run_grad_suite(seeds: u64, fault: Fault) -> Result<GradSuiteReport> {
    if seeds == 0 {
        return Err(Error::invalid("seeds", "must be >= 1"));
    }
    let mut entries = Vec::new();
    for seed in 0..seeds {
        let mut s = Suite {
            seed,
            entries: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
        contrastive_checks(&mut s, &mut rng)?;
        head_loss_checks(&mut s, &mut rng)?;
        infuser_checks(&mut s, &mut rng)?;
        head_checks(&mut s, &mut rng)?;
        end_to_end_checks(&mut s, &mut rng, fault)?;
        entries.extend(s.entries);
    }
    Ok(GradSuiteReport {
        entries,
        tolerance: GRAD_TOLERANCE,
    })
}
