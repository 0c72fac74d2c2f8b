//! Noise-prediction training for the single-shot and multi-shot models.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use pa_nn::{Adam, AdamConfig, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, Split};
use crate::denoiser::{NoisePredictor, UNetConfig};
use crate::diffusion::{forward_sample, to_model_range, LossKind, NoiseSchedule, ScheduleParams};
use crate::error::{ensure, Error, Result};
use crate::phantom::{ConfidenceMap, Image, PairedSample};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// One randomly chosen shot per training example.
    #[default]
    Single,
    /// All M shots stacked as channels.
    Multi,
}

impl std::str::FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            other => Err(Error::invalid(format!("unknown condition mode {other:?} (expected single or multi)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub condition_mode: ConditionMode,
    /// Probability of replacing the condition with the all-zero null token.
    pub condition_dropout_prob: f64,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_interval: usize,
    pub dataset_path: PathBuf,
    pub loss: LossKind,
    pub schedule: ScheduleParams,
    /// Architecture; `cond_channels` is overwritten from the dataset and mode.
    pub architecture: UNetConfig,
    /// Log progress every this many steps (0 disables).
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 16,
            learning_rate: 1e-4,
            condition_mode: ConditionMode::Single,
            condition_dropout_prob: 0.0,
            seed: 0,
            checkpoint_interval: 0,
            dataset_path: PathBuf::from("data"),
            loss: LossKind::Mse,
            schedule: ScheduleParams::default(),
            architecture: UNetConfig::default(),
            log_interval: 250,
        }
    }
}

impl TrainConfig {
    /// The reference setting: 300k iterations, batch 16, learning rate 1e-4.
    pub fn reference() -> Self {
        Self { iterations: 300_000, batch_size: 16, learning_rate: 1e-4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, "iterations must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive");
        ensure!(
            (0.0..1.0).contains(&self.condition_dropout_prob),
            "condition_dropout_prob must lie in [0, 1), got {}",
            self.condition_dropout_prob
        );
        Ok(())
    }
}

/// Uniform choice of one of the sample's shots; the confidence map travels
/// with it.
pub fn single_shot_selection<'a, R: Rng + ?Sized>(sample: &'a PairedSample, rng: &mut R) -> (usize, &'a Image, &'a ConfidenceMap) {
    let i = if sample.m() == 1 { 0 } else { rng.gen_range(0..sample.m()) };
    let s = &sample.shots[i];
    (i, &s.image, &s.confidence)
}

/// Uniform timestep on `1..=steps`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.gen_range(1..=steps)
}

/// One assembled minibatch in model range.
struct Batch {
    /// `[1 + C, B, H, W]`: noisy image then condition channels.
    input: Tensor<f32>,
    eps: Tensor<f32>,
    t: Vec<usize>,
}

/// Draws `(x0, t, ε)` and conditions for `batch` random samples.
fn draw_batch(
    samples: &[PairedSample],
    mode: ConditionMode,
    dropout: f64,
    batch: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    permute_condition: bool,
) -> Result<Batch> {
    let size = samples[0].size();
    let px = size * size;
    let c = match mode {
        ConditionMode::Single => 1,
        ConditionMode::Multi => samples[0].m(),
    };
    let mut x = Vec::with_capacity(batch * px);
    let mut eps_all = Vec::with_capacity(batch * px);
    let mut cond = vec![0f32; c * batch * px];
    let mut t = Vec::with_capacity(batch);
    for b in 0..batch {
        let sample = &samples[rng.gen_range(0..samples.len())];
        // With `permute_condition` the condition comes from an unrelated sample.
        let cond_src = if permute_condition { &samples[rng.gen_range(0..samples.len())] } else { sample };
        let step = sample_timestep(rng, schedule.steps());
        let eps: Vec<f32> = (0..px).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let x0: Vec<f32> = sample.target.iter().map(|&v| to_model_range(v)).collect();
        x.extend(forward_sample(&x0, step, &eps, schedule)?);
        eps_all.extend(eps);
        t.push(step);
        let drop = dropout > 0.0 && rng.gen_bool(dropout);
        let shots: Vec<&Image> = match mode {
            ConditionMode::Single => vec![single_shot_selection(cond_src, rng).1],
            ConditionMode::Multi => cond_src.shots.iter().map(|s| &s.image).collect(),
        };
        if !drop {
            for (ch, img) in shots.iter().enumerate() {
                let off = (ch * batch + b) * px;
                for (d, &v) in cond[off..off + px].iter_mut().zip(img.iter()) {
                    *d = to_model_range(v);
                }
            }
        }
    }
    x.extend(cond);
    Ok(Batch { input: Tensor::from_vec(&[1 + c, batch, size, size], x), eps: Tensor::from_vec(&[1, batch, size, size], eps_all), t })
}

fn batch_loss(model: &NoisePredictor, batch: Batch, kind: LossKind, grad: bool) -> (Graph<f32>, pa_nn::Var) {
    let mut g = Graph::new(grad);
    let x = g.input(batch.input);
    let target = g.input(batch.eps);
    let pred = model.net().forward(&mut g, x, &batch.t);
    let loss = match kind {
        LossKind::Mse => g.mse(pred, target),
        LossKind::Mae => g.mae(pred, target),
    };
    (g, loss)
}

fn check_dataset(samples: &[PairedSample], cfg: &TrainConfig) -> Result<()> {
    ensure!(!samples.is_empty(), "training split is empty");
    let m = samples[0].m();
    let expect = match cfg.condition_mode {
        ConditionMode::Single => 1,
        ConditionMode::Multi => m,
    };
    let requested = cfg.architecture.cond_channels;
    // The default of 1 means "derive from the data"; anything else must agree.
    ensure!(
        requested == 1 || requested == expect,
        "architecture asks for {requested} condition channels but {:?} mode on this dataset gives {expect}",
        cfg.condition_mode
    );
    Ok(())
}

pub struct TrainOutcome {
    pub model: NoisePredictor,
    /// Per-step training loss.
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains from `cfg.dataset_path` and writes `model.safetensors`, optional
/// `ckpt_NNNNNNN.safetensors` snapshots and `loss.csv` into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !cfg.dataset_path.join("meta.json").exists() {
        return Err(Error::NotFound(format!("dataset {} (meta.json missing)", cfg.dataset_path.display())));
    }
    let (meta, data) = load_split(&cfg.dataset_path, Split::Train, None)?;
    check_dataset(&data.samples, cfg)?;
    let mut model = init_model(cfg, meta.image_size(), meta.m_shots())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let losses = train_on(&mut model, &data.samples, cfg, |step, m| {
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step < cfg.iterations {
            m.save(&out_dir.join(format!("ckpt_{step:07}.safetensors")))?;
        }
        Ok(())
    })?;

    let loss_path = out_dir.join("loss.csv");
    let mut w = BufWriter::new(File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?);
    writeln!(w, "step,loss").map_err(|e| Error::io(&loss_path, e))?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1).map_err(|e| Error::io(&loss_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&loss_path, e))?;

    let checkpoint = out_dir.join("model.safetensors");
    model.save(&checkpoint)?;
    Ok(TrainOutcome { model, losses, checkpoint })
}

/// Fresh model for `cfg` on images of `size` with `m` shots per sample.
pub fn init_model(cfg: &TrainConfig, size: usize, m: usize) -> Result<NoisePredictor> {
    let mut arch = cfg.architecture.clone();
    arch.cond_channels = match cfg.condition_mode {
        ConditionMode::Single => 1,
        ConditionMode::Multi => m,
    };
    let mut model = NoisePredictor::new(arch, cfg.schedule, size, cfg.seed)?;
    model.set_dropout_trained(cfg.condition_dropout_prob > 0.0);
    Ok(model)
}

/// The optimisation loop on in-memory samples. `on_step` runs after every
/// update with the 1-based step count.
pub fn train_on(
    model: &mut NoisePredictor,
    samples: &[PairedSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &NoisePredictor) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_dataset(samples, cfg)?;
    let schedule = cfg.schedule.build()?;
    let mut opt = Adam::new(model.net().params(), AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for step in 1..=cfg.iterations {
        let batch = draw_batch(samples, cfg.condition_mode, cfg.condition_dropout_prob, cfg.batch_size, &schedule, &mut rng, false)?;
        let (g, loss) = batch_loss(model, batch, cfg.loss, true);
        let value = g.value(loss).data()[0] as f64;
        ensure!(value.is_finite(), "training diverged at step {step} (loss {value})");
        model.net_mut().params_mut().zero_grads();
        g.backward(loss, model.net_mut().params_mut());
        drop(g);
        opt.step(model.net_mut().params_mut());
        model.set_step(step as u64);
        losses.push(value);
        if cfg.log_interval > 0 && step % cfg.log_interval == 0 {
            let window = &losses[losses.len().saturating_sub(cfg.log_interval)..];
            log::info!(
                "step {step}/{}: mean loss {:.4} ({:.1}s)",
                cfg.iterations,
                window.iter().sum::<f64>() / window.len() as f64,
                start.elapsed().as_secs_f64()
            );
        }
        on_step(step, model)?;
    }
    Ok(losses)
}

/// Mean loss on freshly drawn `(t, ε)` over `samples`, without updating.
/// With `permute_condition` each target is paired with another sample's
/// shots, which measures how much the model relies on its condition.
pub fn heldout_loss(
    model: &NoisePredictor,
    samples: &[PairedSample],
    mode: ConditionMode,
    draws: usize,
    seed: u64,
    permute_condition: bool,
) -> Result<f64> {
    ensure!(!samples.is_empty() && draws > 0, "need samples and draws");
    let schedule = model.meta().schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut done = 0;
    while done < draws {
        let b = (draws - done).min(16);
        let batch = draw_batch(samples, mode, 0.0, b, &schedule, &mut rng, permute_condition)?;
        let (g, loss) = batch_loss(model, batch, LossKind::Mse, false);
        total += g.value(loss).data()[0] as f64 * b as f64;
        done += b;
    }
    Ok(total / draws as f64)
}

/// Mean of the first and last `frac` of a loss curve.
pub fn loss_windows(losses: &[f64], frac: f64) -> (f64, f64) {
    let k = ((losses.len() as f64 * frac).ceil() as usize).clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..k]), mean(&losses[losses.len() - k..]))
}
