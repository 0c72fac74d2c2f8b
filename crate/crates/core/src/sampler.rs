//! Reverse-process sampling with quality guidance.
//!
//! Quality guidance extrapolates from the confidence-weighted mix of
//! single-shot predictions toward the multi-shot prediction:
//!
//! ```text
//! ε̃     = (1 + w)·ε_multi(x_t, t, {L_1..L_M}) − w·ε_mix
//! ε_mix = (1/M)·Σ_m h_m ⊙ ε_single(x_t, t, L_m)
//! ```
//!
//! Guidance is applied only while `t > t_guide`; below that the multi-shot
//! prediction is used unchanged.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::NoiseModel;
use crate::diffusion::{from_model_range, reverse_step_in_place, to_model_range, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::phantom::{ConfidenceMap, Image, PairedSample, ShotImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Guidance scale, `w >= 0`.
    pub w: f64,
    /// Guidance is active only for `t > t_guide`.
    pub t_guide: usize,
    /// Weight single-shot predictions by their confidence maps.
    pub use_confidence: bool,
    /// Divide the weighted sum by `Σ h_m` instead of by `M`.
    pub normalize_weights: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w: 10.0, t_guide: 0, use_confidence: true, normalize_weights: false }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        ensure!(self.w.is_finite() && self.w >= 0.0, "guidance scale must be finite and >= 0, got {}", self.w);
        ensure!(self.t_guide <= steps, "t_guide {} exceeds the {steps} schedule steps", self.t_guide);
        Ok(())
    }

    pub fn active(&self, t: usize) -> bool {
        t > self.t_guide
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    DdpmMulti,
    DdpmSingle,
    Guided,
    Cfg,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::DdpmMulti => "ddpm_multi",
            Mode::DdpmSingle => "ddpm_single",
            Mode::Guided => "guided",
            Mode::Cfg => "cfg",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm_multi" => Ok(Mode::DdpmMulti),
            "ddpm_single" => Ok(Mode::DdpmSingle),
            "guided" => Ok(Mode::Guided),
            "cfg" => Ok(Mode::Cfg),
            other => Err(Error::invalid(format!("unknown mode {other:?} (expected ddpm_multi, ddpm_single, guided or cfg)"))),
        }
    }
}

/// The pair of trained predictors. Either may be absent when a mode does
/// not need it.
#[derive(Clone, Copy, Default)]
pub struct Models<'a> {
    pub multi: Option<&'a dyn NoiseModel>,
    pub single: Option<&'a dyn NoiseModel>,
}

impl<'a> Models<'a> {
    pub fn multi(&self) -> Result<&'a dyn NoiseModel> {
        self.multi.ok_or_else(|| Error::Unsupported("this mode needs the multi-shot model".into()))
    }

    pub fn single(&self) -> Result<&'a dyn NoiseModel> {
        self.single.ok_or_else(|| Error::Unsupported("this mode needs the single-shot model".into()))
    }

    /// Checks that `mode` has the models (and training) it needs for
    /// samples with `m` shots.
    pub fn check(&self, mode: Mode, m: usize) -> Result<()> {
        let need_multi = |models: &Self| -> Result<()> {
            let multi = models.multi()?;
            ensure!(multi.cond_channels() == m, "multi-shot model takes {} shots, sample has {m}", multi.cond_channels());
            Ok(())
        };
        let need_single = |models: &Self| -> Result<()> {
            let single = models.single()?;
            ensure!(single.cond_channels() == 1, "single-shot model takes {} channels, expected 1", single.cond_channels());
            Ok(())
        };
        match mode {
            Mode::DdpmMulti => need_multi(self),
            Mode::DdpmSingle => need_single(self),
            Mode::Guided => need_multi(self).and_then(|_| need_single(self)),
            Mode::Cfg => {
                need_multi(self)?;
                if !self.multi()?.supports_unconditional() {
                    return Err(Error::Unsupported(
                        "classifier-free guidance needs a multi-shot model trained with condition dropout".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Confidence-weighted mix of per-shot predictions, elementwise.
///
/// `preds[m]` and `confs[m]` are flat buffers of equal length.
pub fn mix_predictions(preds: &[&[f32]], confs: &[&[f32]], cfg: &GuidanceConfig) -> Result<Vec<f32>> {
    ensure!(!preds.is_empty(), "noise mix needs at least one prediction");
    ensure!(preds.len() == confs.len(), "{} predictions but {} confidence maps", preds.len(), confs.len());
    let n = preds[0].len();
    ensure!(preds.iter().all(|p| p.len() == n) && confs.iter().all(|c| c.len() == n), "prediction and confidence shapes differ");
    let m = preds.len() as f64;
    let out = (0..n)
        .map(|i| {
            let v = if cfg.use_confidence {
                let num: f64 = preds.iter().zip(confs).map(|(p, h)| h[i] as f64 * p[i] as f64).sum();
                if cfg.normalize_weights {
                    let den: f64 = confs.iter().map(|h| h[i] as f64).sum();
                    num / den
                } else {
                    num / m
                }
            } else {
                preds.iter().map(|p| p[i] as f64).sum::<f64>() / m
            };
            v as f32
        })
        .collect();
    Ok(out)
}

/// `(1 + w)·a − w·b`, elementwise.
pub fn extrapolate(a: &[f32], b: &[f32], w: f64) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| ((1.0 + w) * x as f64 - w * y as f64) as f32).collect()
}

fn flat(img: &Image) -> Vec<f32> {
    img.iter().copied().collect()
}

fn model_range(img: &Image) -> Vec<f32> {
    img.iter().map(|&v| to_model_range(v)).collect()
}

fn to_image(v: Vec<f32>, size: usize) -> Image {
    Image::from_shape_vec((size, size), v).expect("square image")
}

/// Confidence-weighted mix of single-shot predictions for one image.
pub fn noise_mix(
    single: &dyn NoiseModel,
    x_t: &Image,
    t: usize,
    shots: &[ShotImage],
    confidences: &[ConfidenceMap],
    cfg: &GuidanceConfig,
) -> Result<Image> {
    ensure!(shots.len() == confidences.len(), "{} shots but {} confidence maps", shots.len(), confidences.len());
    ensure!(!shots.is_empty(), "noise mix needs at least one shot");
    let size = x_t.nrows();
    let x = flat(x_t);
    let preds = shots.iter().map(|s| single.predict_batch(&x, &model_range(&s.image), &[t], size)).collect::<Result<Vec<_>>>()?;
    let confs: Vec<Vec<f32>> = confidences.iter().map(|c| flat(&c.values)).collect();
    let p: Vec<&[f32]> = preds.iter().map(|v| v.as_slice()).collect();
    let h: Vec<&[f32]> = confs.iter().map(|v| v.as_slice()).collect();
    Ok(to_image(mix_predictions(&p, &h, cfg)?, size))
}

fn multi_condition(sample: &PairedSample) -> Vec<f32> {
    sample.shots.iter().flat_map(|s| s.image.iter().map(|&v| to_model_range(v))).collect()
}

/// Guided noise estimate for one image.
pub fn guided_epsilon(models: &Models, x_t: &Image, t: usize, sample: &PairedSample, cfg: &GuidanceConfig) -> Result<Image> {
    models.check(Mode::Guided, sample.m())?;
    let size = x_t.nrows();
    let eps_multi = models.multi()?.predict_batch(&flat(x_t), &multi_condition(sample), &[t], size)?;
    if !cfg.active(t) {
        return Ok(to_image(eps_multi, size));
    }
    let confs: Vec<ConfidenceMap> = sample.shots.iter().map(|s| s.confidence.clone()).collect();
    let mix = noise_mix(models.single()?, x_t, t, &sample.shots, &confs, cfg)?;
    Ok(to_image(extrapolate(&eps_multi, &flat(&mix), cfg.w), size))
}

/// Classifier-free guidance `(1 + w)·ε(c) − w·ε(∅)` with the zero null condition.
pub fn cfg_epsilon(multi: &dyn NoiseModel, x_t: &Image, t: usize, shots: &[ShotImage], w: f64) -> Result<Image> {
    if !multi.supports_unconditional() {
        return Err(Error::Unsupported("classifier-free guidance needs a dropout-trained model".into()));
    }
    ensure!(shots.len() == multi.cond_channels(), "model takes {} shots, got {}", multi.cond_channels(), shots.len());
    let size = x_t.nrows();
    let x = flat(x_t);
    let cond: Vec<f32> = shots.iter().flat_map(|s| s.image.iter().map(|&v| to_model_range(v))).collect();
    let c = multi.predict_batch(&x, &cond, &[t], size)?;
    let u = multi.predict_batch(&x, &vec![0.0; cond.len()], &[t], size)?;
    Ok(to_image(extrapolate(&c, &u, w), size))
}

/// Per-trajectory seed derived from a run seed and a sample's location id.
pub fn trajectory_seed(run_seed: u64, location_id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(location_id);
    rng.next_u64()
}

/// What to sample and how.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSpec {
    pub mode: Mode,
    pub guidance: GuidanceConfig,
    /// Shot used as the condition in `ddpm_single` mode.
    pub single_shot: usize,
}

impl SampleSpec {
    pub fn new(mode: Mode, guidance: GuidanceConfig) -> Self {
        Self { mode, guidance, single_shot: 0 }
    }
}

/// A restored image, with intermediate `(t, x_t)` frames when requested.
/// Frames are mapped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub image: Image,
    pub trace: Vec<(usize, Image)>,
}

#[derive(Clone)]
struct Trajectory {
    x: Vec<f32>,
    rng: ChaCha8Rng,
}

impl Trajectory {
    fn start(seed: u64, px: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..px).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { x, rng }
    }
}

struct Branch {
    t_guide: usize,
    trajs: Vec<Trajectory>,
    traces: Vec<Vec<(usize, Image)>>,
}

/// Batched noise estimates for all trajectories of one branch.
struct EpsContext<'a> {
    models: Models<'a>,
    samples: &'a [&'a PairedSample],
    spec: SampleSpec,
    size: usize,
    multi_cond: Vec<f32>,
    /// `[N·M, 1, H, W]` single-shot conditions, item `i·M + m`.
    single_cond_all: Vec<f32>,
    /// `[N·M, H, W]` confidence maps, same order.
    conf_all: Vec<f32>,
    single_cond_one: Vec<f32>,
}

impl<'a> EpsContext<'a> {
    fn new(models: Models<'a>, samples: &'a [&'a PairedSample], spec: SampleSpec) -> Self {
        let size = samples[0].size();
        let needs = |modes: &[Mode]| modes.contains(&spec.mode);
        let multi_cond = if needs(&[Mode::DdpmMulti, Mode::Guided, Mode::Cfg]) {
            samples.iter().flat_map(|s| multi_condition(s)).collect()
        } else {
            Vec::new()
        };
        let (single_cond_all, conf_all) = if spec.mode == Mode::Guided {
            let c = samples.iter().flat_map(|s| multi_condition(s)).collect();
            let h = samples.iter().flat_map(|s| s.shots.iter().flat_map(|sh| sh.confidence.values.iter().copied())).collect();
            (c, h)
        } else {
            (Vec::new(), Vec::new())
        };
        let single_cond_one = if spec.mode == Mode::DdpmSingle {
            samples.iter().flat_map(|s| model_range(&s.shots[spec.single_shot].image)).collect()
        } else {
            Vec::new()
        };
        Self { models, samples, spec, size, multi_cond, single_cond_all, conf_all, single_cond_one }
    }

    fn eps(&self, x: &[f32], t: usize, t_guide: usize) -> Result<Vec<f32>> {
        let n = self.samples.len();
        let px = self.size * self.size;
        let ts = vec![t; n];
        let guidance = GuidanceConfig { t_guide, ..self.spec.guidance };
        match self.spec.mode {
            Mode::DdpmSingle => self.models.single()?.predict_batch(x, &self.single_cond_one, &ts, self.size),
            Mode::DdpmMulti => self.models.multi()?.predict_batch(x, &self.multi_cond, &ts, self.size),
            Mode::Cfg => {
                let multi = self.models.multi()?;
                let c = multi.predict_batch(x, &self.multi_cond, &ts, self.size)?;
                let u = multi.predict_batch(x, &vec![0.0; self.multi_cond.len()], &ts, self.size)?;
                Ok(extrapolate(&c, &u, guidance.w))
            }
            Mode::Guided => {
                let eps_multi = self.models.multi()?.predict_batch(x, &self.multi_cond, &ts, self.size)?;
                if !guidance.active(t) {
                    return Ok(eps_multi);
                }
                let m = self.samples[0].m();
                let mut xs = Vec::with_capacity(n * m * px);
                for i in 0..n {
                    for _ in 0..m {
                        xs.extend_from_slice(&x[i * px..(i + 1) * px]);
                    }
                }
                let preds = self.models.single()?.predict_batch(&xs, &self.single_cond_all, &vec![t; n * m], self.size)?;
                let mut mix = Vec::with_capacity(n * px);
                for i in 0..n {
                    let p: Vec<&[f32]> = (0..m).map(|k| &preds[(i * m + k) * px..(i * m + k + 1) * px]).collect();
                    let h: Vec<&[f32]> = (0..m).map(|k| &self.conf_all[(i * m + k) * px..(i * m + k + 1) * px]).collect();
                    mix.extend(mix_predictions(&p, &h, &guidance)?);
                }
                Ok(extrapolate(&eps_multi, &mix, guidance.w))
            }
        }
    }
}

fn validate_request(models: &Models, schedule: &NoiseSchedule, samples: &[&PairedSample], seeds: &[u64], spec: &SampleSpec) -> Result<()> {
    ensure!(!samples.is_empty(), "nothing to sample");
    ensure!(samples.len() == seeds.len(), "{} samples but {} seeds", samples.len(), seeds.len());
    let (m, size) = (samples[0].m(), samples[0].size());
    for s in samples {
        s.validate()?;
        ensure!(s.m() == m && s.size() == size, "all samples in a batch need the same shot count and size");
    }
    if spec.mode == Mode::DdpmSingle {
        ensure!(spec.single_shot < m, "single_shot {} out of range for {m} shots", spec.single_shot);
    }
    spec.guidance.validate(schedule.steps())?;
    models.check(spec.mode, m)
}

/// Samples every `(sample, seed)` pair for each `t_guide` in `t_guides`.
///
/// Trajectories for different `t_guide` share all steps above the larger
/// value, so they are computed once and forked; each result is
/// bit-identical to a standalone run with that `t_guide`. The output is
/// indexed `[t_guide position][sample]`.
pub fn sample_t_guide_grid(
    models: &Models,
    schedule: &NoiseSchedule,
    samples: &[&PairedSample],
    seeds: &[u64],
    spec: &SampleSpec,
    t_guides: &[usize],
    trace_every: Option<usize>,
) -> Result<Vec<Vec<SampleOutput>>> {
    validate_request(models, schedule, samples, seeds, spec)?;
    ensure!(!t_guides.is_empty(), "empty t_guide grid");
    for &g in t_guides {
        GuidanceConfig { t_guide: g, ..spec.guidance }.validate(schedule.steps())?;
    }
    ensure!(trace_every != Some(0), "trace interval must be positive");
    let size = samples[0].size();
    let px = size * size;
    let ctx = EpsContext::new(*models, samples, *spec);

    let g_min = *t_guides.iter().min().expect("non-empty");
    let mut pending: Vec<usize> = t_guides.iter().copied().filter(|&g| g != g_min).collect();
    pending.sort_unstable();
    pending.dedup();
    let trajs: Vec<Trajectory> = seeds.iter().map(|&s| Trajectory::start(s, px)).collect();
    let mut branches = vec![Branch { t_guide: g_min, trajs, traces: vec![Vec::new(); samples.len()] }];

    let record = |b: &mut Branch, t: usize| {
        if let Some(k) = trace_every {
            if t.is_multiple_of(k) || t == 1 {
                for (tr, trace) in b.trajs.iter().zip(b.traces.iter_mut()) {
                    trace.push((t, to_image(tr.x.iter().map(|&v| from_model_range(v)).collect(), size)));
                }
            }
        }
    };
    for b in branches.iter_mut() {
        record(b, schedule.steps() + 1);
    }

    let mut x = vec![0f32; samples.len() * px];
    let mut z = vec![0f32; px];
    for t in (1..=schedule.steps()).rev() {
        while pending.last() == Some(&t) {
            let g = pending.pop().expect("checked");
            let fork = Branch { t_guide: g, trajs: branches[0].trajs.clone(), traces: branches[0].traces.clone() };
            branches.push(fork);
        }
        for b in branches.iter_mut() {
            for (i, tr) in b.trajs.iter().enumerate() {
                x[i * px..(i + 1) * px].copy_from_slice(&tr.x);
            }
            let eps = ctx.eps(&x, t, b.t_guide)?;
            for (i, tr) in b.trajs.iter_mut().enumerate() {
                if t > 1 {
                    for v in z.iter_mut() {
                        *v = StandardNormal.sample(&mut tr.rng);
                    }
                } else {
                    z.fill(0.0);
                }
                reverse_step_in_place(&mut tr.x, t, &eps[i * px..(i + 1) * px], &z, schedule)?;
            }
            record(b, t);
        }
    }
    let mut out = Vec::with_capacity(t_guides.len());
    for &g in t_guides {
        let b = branches.iter().find(|b| b.t_guide == g).expect("every t_guide has a branch");
        out.push(
            b.trajs
                .iter()
                .zip(&b.traces)
                .map(|(tr, trace)| SampleOutput {
                    image: to_image(tr.x.iter().map(|&v| from_model_range(v)).collect(), size),
                    trace: trace.clone(),
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Samples a batch of independent trajectories with one configuration.
pub fn sample_batch(
    models: &Models,
    schedule: &NoiseSchedule,
    samples: &[&PairedSample],
    seeds: &[u64],
    spec: &SampleSpec,
    trace_every: Option<usize>,
) -> Result<Vec<SampleOutput>> {
    let mut grid = sample_t_guide_grid(models, schedule, samples, seeds, spec, &[spec.guidance.t_guide], trace_every)?;
    Ok(grid.pop().expect("one t_guide"))
}

/// Restores one sample.
pub fn sample(
    models: &Models,
    schedule: &NoiseSchedule,
    sample: &PairedSample,
    seed: u64,
    spec: &SampleSpec,
    trace_every: Option<usize>,
) -> Result<SampleOutput> {
    let mut v = sample_batch(models, schedule, &[sample], &[seed], spec, trace_every)?;
    Ok(v.pop().expect("one sample"))
}

#[cfg(test)]
pub(crate) mod stubs {
    use super::*;

    /// Predicts `a·x + b·mean(cond) + c·t/T` per pixel; cheap and input-dependent.
    pub struct Affine {
        pub channels: usize,
        pub a: f32,
        pub b: f32,
        pub c: f32,
        pub uncond: bool,
    }

    impl NoiseModel for Affine {
        fn cond_channels(&self) -> usize {
            self.channels
        }

        fn supports_unconditional(&self) -> bool {
            self.uncond
        }

        fn predict_batch(&self, x: &[f32], cond: &[f32], t: &[usize], size: usize) -> Result<Vec<f32>> {
            let px = size * size;
            let ch = self.channels;
            Ok((0..t.len() * px)
                .map(|j| {
                    let (i, p) = (j / px, j % px);
                    let m: f32 = (0..ch).map(|k| cond[(i * ch + k) * px + p]).sum::<f32>() / ch as f32;
                    self.a * x[j] + self.b * m + self.c * t[i] as f32 / 1000.0
                })
                .collect())
        }
    }

    /// Constant prediction regardless of input.
    pub struct Constant {
        pub channels: usize,
        pub value: f32,
        pub uncond_value: Option<f32>,
    }

    impl NoiseModel for Constant {
        fn cond_channels(&self) -> usize {
            self.channels
        }

        fn supports_unconditional(&self) -> bool {
            self.uncond_value.is_some()
        }

        fn predict_batch(&self, _x: &[f32], cond: &[f32], t: &[usize], size: usize) -> Result<Vec<f32>> {
            let null = cond.iter().all(|&v| v == 0.0);
            let v = match (null, self.uncond_value) {
                (true, Some(u)) => u,
                _ => self.value,
            };
            Ok(vec![v; t.len() * size * size])
        }
    }
}
