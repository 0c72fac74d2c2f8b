use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use ndarray::{Array2, Array3, Axis};
use pa_diffusion::dataset::{build_dataset, load_split, Split};
use pa_diffusion::denoiser::NoisePredictor;
use pa_diffusion::diffusion::NoiseSchedule;
use pa_diffusion::evaluation::{evaluate, select_best, sweep, write_correlation, write_rows, Method, MethodSpec};
use pa_diffusion::metrics::{correlate_confidence, paired_t_test, PairedTest, SSIM_WINDOW};
use pa_diffusion::phantom::{average_images, Image, PairedSample};
use pa_diffusion::sampler::{sample, trajectory_seed, GuidanceConfig, Mode, Models, SampleSpec};
use pa_diffusion::trainer::{self, loss_windows, ConditionMode};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Resolved state shared by every command.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Ctx {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn under_out(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn dataset_ready(&self) -> Result<PathBuf> {
        let dir = self.data_dir();
        if !dir.join("meta.json").is_file() {
            bail!("dataset not found at {} (run `pa-diffusion gen-data` first)", dir.display());
        }
        Ok(dir)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| anyhow!("{} not readable ({e}); {hint}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let png = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    png.save(path).with_context(|| format!("writing {}", path.display()))
}

fn stack(images: &[Image]) -> Result<Array3<f32>> {
    let views: Vec<_> = images.iter().map(Array2::view).collect();
    Ok(ndarray::stack(Axis(0), &views)?)
}

fn save_npy(images: &[Image], path: &Path) -> Result<()> {
    ndarray_npy::write_npy(path, &stack(images)?).with_context(|| format!("writing {}", path.display()))
}

fn load_npy(path: &Path) -> Result<Vec<Image>> {
    let arr: Array3<f32> = ndarray_npy::read_npy(path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok(arr.outer_iter().map(|a| a.to_owned()).collect())
}

/// File-safe identifier of an evaluated configuration.
pub fn stem(spec: &MethodSpec) -> String {
    match spec.method {
        Method::Guided => format!(
            "guided_w{}_{}{}",
            spec.guidance.w,
            if spec.guidance.use_confidence { "h" } else { "noh" },
            if spec.guidance.t_guide > 0 { format!("_tg{}", spec.guidance.t_guide) } else { String::new() }
        ),
        Method::Cfg => format!("cfg_w{}", spec.guidance.w),
        m => m.name().to_string(),
    }
}

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    let dir = ctx.data_dir();
    let start = Instant::now();
    let meta = build_dataset(&dir, &ctx.cfg.data, ctx.seed)?;
    println!("dataset written to {} ({:.1}s)", dir.display(), start.elapsed().as_secs_f64());
    println!("  image size {}, M = {} shots, seed {}", meta.config.image_size, meta.config.m_shots, meta.seed);
    for split in Split::ALL {
        println!("  {split}: {} samples", meta.config.split(split).count);
    }
    Ok(())
}

pub struct TrainArgs {
    pub mode: ConditionMode,
    pub name: Option<String>,
    pub iterations: Option<usize>,
    pub dropout: Option<f64>,
}

pub fn train(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let data = ctx.dataset_ready()?;
    let mut tc = ctx.cfg.train.to_train_config(args.mode, ctx.seed, &data);
    if let Some(n) = args.iterations {
        tc.iterations = n;
    }
    if let Some(p) = args.dropout {
        tc.condition_dropout_prob = p;
    }
    let name = args.name.clone().unwrap_or_else(|| match args.mode {
        ConditionMode::Single => "single".into(),
        ConditionMode::Multi => "multi".into(),
    });
    let dir = ctx.out.join("models").join(&name);
    log::info!("training {name} ({:?}) for {} iterations", args.mode, tc.iterations);
    let start = Instant::now();
    let outcome = trainer::train(&tc, &dir)?;
    write_json(&dir.join("train.json"), &tc)?;
    let (first, last) = loss_windows(&outcome.losses, 0.05);
    println!("trained {name}: {} steps in {:.1}s", outcome.losses.len(), start.elapsed().as_secs_f64());
    println!("  loss {first:.4} (first 5%) -> {last:.4} (last 5%)");
    println!("  checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

/// Loaded checkpoints for the sampling commands.
pub struct LoadedModels {
    pub single: Option<NoisePredictor>,
    pub multi: Option<NoisePredictor>,
    pub schedule: NoiseSchedule,
}

impl LoadedModels {
    pub fn models(&self) -> Models<'_> {
        Models { single: self.single.as_ref().map(|m| m as _), multi: self.multi.as_ref().map(|m| m as _) }
    }
}

fn needs(methods: impl IntoIterator<Item = Mode>) -> (bool, bool) {
    methods.into_iter().fold((false, false), |(s, m), mode| match mode {
        Mode::DdpmSingle => (true, m),
        Mode::DdpmMulti | Mode::Cfg => (s, true),
        Mode::Guided => (true, true),
    })
}

/// Loads the checkpoints required for `modes`, naming every missing file.
pub fn load_models(ctx: &Ctx, modes: impl IntoIterator<Item = Mode>) -> Result<LoadedModels> {
    let (need_single, need_multi) = needs(modes);
    let single_path = ctx.under_out(&ctx.cfg.models.single);
    let multi_path = ctx.under_out(&ctx.cfg.models.multi);
    let missing: Vec<String> = [(need_single, &single_path, "single"), (need_multi, &multi_path, "multi")]
        .into_iter()
        .filter(|(need, p, _)| *need && !p.is_file())
        .map(|(_, p, mode)| format!("{} (train with `pa-diffusion train --mode {mode}`)", p.display()))
        .collect();
    if !missing.is_empty() {
        bail!("checkpoint not found: {}", missing.join(", "));
    }
    let load = |need: bool, p: &Path| -> Result<Option<NoisePredictor>> {
        need.then(|| NoisePredictor::load(p).with_context(|| format!("loading {}", p.display()))).transpose()
    };
    let single = load(need_single, &single_path)?;
    let multi = load(need_multi, &multi_path)?;
    let params = match (&single, &multi) {
        (Some(s), Some(m)) => {
            ensure!(s.meta().schedule == m.meta().schedule, "single and multi checkpoints use different noise schedules");
            m.meta().schedule
        }
        (Some(s), None) => s.meta().schedule,
        (None, Some(m)) => m.meta().schedule,
        (None, None) => ctx.cfg.train.schedule,
    };
    Ok(LoadedModels { single, multi, schedule: params.build()? })
}

#[derive(Serialize, Deserialize)]
pub struct Selected {
    pub seed: u64,
    pub n_val: usize,
    pub guidance: GuidanceConfig,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub grid: crate::config::SweepSection,
}

pub struct SweepArgs {
    pub limit: Option<usize>,
    pub ws: Option<Vec<f64>>,
    pub t_guides: Option<Vec<usize>>,
}

pub fn sweep_cmd(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let data = ctx.dataset_ready()?;
    let mut section = ctx.cfg.sweep.clone();
    if let Some(ws) = &args.ws {
        section.ws = ws.clone();
    }
    if let Some(g) = &args.t_guides {
        section.t_guides = g.clone();
    }
    if args.limit.is_some() {
        section.limit = args.limit;
    }
    let models = load_models(ctx, [Mode::Guided])?;
    let (_, val) = load_split(&data, Split::Val, section.limit)?;
    ensure!(!val.is_empty(), "validation split is empty");
    let start = Instant::now();
    let rows = sweep(&models.models(), &models.schedule, &val.samples, &section.grid(), ctx.seed)?;
    let dir = ctx.out.join("sweep");
    write_rows(&dir.join("sweep.csv"), &rows)?;
    let best = select_best(&rows).expect("sweep grid is non-empty");
    let selected = Selected {
        seed: ctx.seed,
        n_val: val.len(),
        guidance: best.guidance(section.normalize_weights),
        mean_psnr: best.mean_psnr,
        mean_ssim: best.mean_ssim,
        grid: section,
    };
    write_json(&dir.join("selected.json"), &selected)?;
    println!("sweep over {} validation samples ({:.1}s)", val.len(), start.elapsed().as_secs_f64());
    println!("  {:>8} {:>5} {:>7} {:>9} {:>8}", "w", "h", "t_guide", "psnr", "ssim");
    for r in &rows {
        println!("  {:>8} {:>5} {:>7} {:>9.3} {:>8.4}", r.w, r.use_confidence, r.t_guide, r.mean_psnr, r.mean_ssim);
    }
    let g = selected.guidance;
    println!("selected w={} use_confidence={} t_guide={}", g.w, g.use_confidence, g.t_guide);
    Ok(())
}

/// Everything `correlate` and reports need to know about an evaluation.
#[derive(Serialize, Deserialize)]
pub struct EvalMeta {
    pub seed: u64,
    pub split: Split,
    pub sample_ids: Vec<u64>,
    pub methods: Vec<EvaluatedMethod>,
    pub psnr_data_range: f64,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Paired t-tests on per-sample SSIM, each method against `ddpm_multi`.
    pub ssim_vs_ddpm_multi: Vec<(String, PairedTest)>,
    pub ssim_single_vs_multi: Option<PairedTest>,
}

#[derive(Serialize, Deserialize)]
pub struct EvaluatedMethod {
    pub stem: String,
    pub spec: MethodSpec,
}

pub struct EvalArgs {
    pub limit: Option<usize>,
    pub methods: Option<Vec<Method>>,
}

fn eval_specs(ctx: &Ctx, methods: &[Method]) -> Result<Vec<MethodSpec>> {
    let e = &ctx.cfg.evaluate;
    let guidance = || -> Result<GuidanceConfig> {
        match e.guidance {
            Some(g) => Ok(g),
            None => {
                let path = ctx.out.join("sweep/selected.json");
                let s: Selected = read_json(&path, "run `pa-diffusion sweep` or set [evaluate.guidance]")?;
                Ok(s.guidance)
            }
        }
    };
    let mut specs = Vec::new();
    for &m in methods {
        match m {
            Method::Guided => {
                let g = guidance()?;
                specs.push(MethodSpec::guided(g));
                specs.extend(e.extra_ws.iter().filter(|&&w| w != g.w).map(|&w| MethodSpec::guided(GuidanceConfig { w, ..g })));
            }
            Method::Cfg => specs.push(MethodSpec::cfg(e.cfg_w)),
            m => specs.push(MethodSpec::plain(m)),
        }
    }
    Ok(specs)
}

pub fn evaluate_cmd(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let methods = args.methods.clone().unwrap_or_else(|| ctx.cfg.evaluate.methods.clone());
    ensure!(!methods.is_empty(), "no methods selected");
    let specs = eval_specs(ctx, &methods)?;
    let models = load_models(ctx, specs.iter().filter_map(|s| s.method.mode()))?;
    let data = ctx.dataset_ready()?;
    let (_, test) = load_split(&data, Split::Test, args.limit.or(ctx.cfg.evaluate.limit))?;
    ensure!(!test.is_empty(), "test split is empty");

    let start = Instant::now();
    let (report, outputs) = evaluate(&models.models(), &models.schedule, &test.samples, &specs, ctx.seed)?;
    let dir = ctx.out.join("eval");
    write_rows(&dir.join("report.csv"), &report.rows)?;
    let aggregates = report.aggregates();
    write_rows(&dir.join("summary.csv"), &aggregates)?;
    let out_dir = dir.join("outputs");
    fs::create_dir_all(&out_dir)?;
    for (spec, imgs) in specs.iter().zip(&outputs) {
        save_npy(imgs, &out_dir.join(format!("{}.npy", stem(spec))))?;
    }

    let ssim = |m: Method| specs.iter().find(|s| s.method == m).map(|s| report.ssim_for(s));
    let multi = ssim(Method::DdpmMulti);
    let mut vs_multi = Vec::new();
    if let Some(b) = &multi {
        for s in specs.iter().filter(|s| s.method != Method::DdpmMulti) {
            vs_multi.push((stem(s), paired_t_test(&report.ssim_for(s), b)?));
        }
    }
    let single_vs_multi = match (ssim(Method::DdpmSingle), &multi) {
        (Some(a), Some(b)) => Some(paired_t_test(&a, b)?),
        _ => None,
    };
    let meta = EvalMeta {
        seed: ctx.seed,
        split: Split::Test,
        sample_ids: test.samples.iter().map(|s| s.location_id).collect(),
        methods: specs.iter().map(|s| EvaluatedMethod { stem: stem(s), spec: *s }).collect(),
        psnr_data_range: 1.0,
        ssim_window: SSIM_WINDOW,
        ssim_k1: 0.01,
        ssim_k2: 0.03,
        ssim_vs_ddpm_multi: vs_multi,
        ssim_single_vs_multi: single_vs_multi,
    };
    write_json(&dir.join("report.json"), &meta)?;

    println!("evaluated {} test samples ({:.1}s)", test.len(), start.elapsed().as_secs_f64());
    println!("  {:<24} {:>9} {:>8}", "method", "psnr_db", "ssim");
    for (a, s) in aggregates.iter().zip(&specs) {
        println!("  {:<24} {:>9.3} {:>8.4}", s.label(), a.mean_psnr, a.mean_ssim);
    }
    if let Some(t) = single_vs_multi {
        println!("  ddpm_single vs ddpm_multi: mean diff {:.4}, p = {:.3e}", t.mean_diff, t.p_two_sided);
    }
    Ok(())
}

pub struct CorrelateArgs {
    pub method: Option<String>,
}

pub fn correlate_cmd(ctx: &Ctx, args: &CorrelateArgs) -> Result<()> {
    let section = &ctx.cfg.correlate;
    let method = args.method.clone().unwrap_or_else(|| section.method.clone());
    let eval_dir = ctx.out.join("eval");
    let meta: EvalMeta = read_json(&eval_dir.join("report.json"), "run `pa-diffusion evaluate` first")?;
    let Some(entry) = meta.methods.iter().find(|m| m.stem == method) else {
        let known: Vec<&str> = meta.methods.iter().map(|m| m.stem.as_str()).collect();
        bail!("method {method} was not evaluated (available: {})", known.join(", "));
    };
    let npy = eval_dir.join("outputs").join(format!("{method}.npy"));
    ensure!(npy.is_file(), "saved outputs {} not found (rerun `pa-diffusion evaluate`)", npy.display());
    let outputs = load_npy(&npy)?;
    let data = ctx.dataset_ready()?;
    let (_, test) = load_split(&data, meta.split, Some(meta.sample_ids.len()))?;
    let ids: Vec<u64> = test.samples.iter().map(|s| s.location_id).collect();
    ensure!(ids == meta.sample_ids && outputs.len() == ids.len(), "dataset changed since evaluation; rerun `pa-diffusion evaluate`");

    // Confidence of the evidence each method saw: the conditioning shot for
    // single-shot sampling, otherwise the mean over all shots.
    let confidences: Vec<Image> = test
        .samples
        .iter()
        .map(|s: &PairedSample| match entry.spec.method {
            Method::DdpmSingle => Ok(s.shots[0].confidence.values.clone()),
            _ => average_images(s.shots.iter().map(|sh| &sh.confidence.values)).map_err(Into::into),
        })
        .collect::<Result<_>>()?;
    let targets: Vec<Image> = test.samples.iter().map(|s| s.target.clone()).collect();
    let cc = section.to_config(ctx.seed);
    let table = correlate_confidence(&outputs, &targets, &confidences, &cc)?;

    let dir = ctx.out.join("correlate");
    write_correlation(&dir.join("correlation.csv"), &table)?;
    write_json(
        &dir.join("correlation.json"),
        &serde_json::json!({
            "seed": ctx.seed,
            "method": method,
            "config": cc,
            "spearman": table.spearman,
            "empty_bins": table.empty_bins,
            "total_windows": table.total_windows,
        }),
    )?;
    println!("correlation over {} images, {} windows", outputs.len(), table.total_windows);
    for b in &table.bins {
        match b.mean_ssim {
            Some(m) => println!("  [{:.3}, {:.3})  ssim {:.4}  n={}", b.lo, b.hi, m, b.n_windows),
            None => println!("  [{:.3}, {:.3})  empty", b.lo, b.hi),
        }
    }
    match table.spearman {
        Some(r) => println!("spearman(bin center, mean ssim) = {r:.4}"),
        None => println!("spearman undefined (degenerate confidence range)"),
    }
    Ok(())
}

pub struct SampleArgs {
    pub split: Split,
    pub index: usize,
    pub mode: Mode,
    pub guidance: GuidanceConfig,
    pub trace: Option<usize>,
}

pub fn sample_cmd(ctx: &Ctx, args: &SampleArgs) -> Result<()> {
    let data = ctx.dataset_ready()?;
    let models = load_models(ctx, [args.mode])?;
    let (_, split) = load_split(&data, args.split, Some(args.index + 1))?;
    let s = split.samples.get(args.index).ok_or_else(|| anyhow!("{} has only {} samples", args.split, split.len()))?;
    let spec = SampleSpec::new(args.mode, args.guidance);
    let start = Instant::now();
    let seed = trajectory_seed(ctx.seed, s.location_id);
    let out = sample(&models.models(), &models.schedule, s, seed, &spec, args.trace)?;

    let method_spec = MethodSpec {
        method: match args.mode {
            Mode::DdpmSingle => Method::DdpmSingle,
            Mode::DdpmMulti => Method::DdpmMulti,
            Mode::Guided => Method::Guided,
            Mode::Cfg => Method::Cfg,
        },
        guidance: args.guidance,
    };
    let dir = ctx.out.join("samples").join(format!("{}_{:04}_{}", args.split, args.index, stem(&method_spec)));
    fs::create_dir_all(&dir)?;
    save_png(&out.image, &dir.join("restored.png"))?;
    save_npy(std::slice::from_ref(&out.image), &dir.join("restored.npy"))?;
    save_png(&s.target, &dir.join("target.png"))?;
    for (k, shot) in s.shots.iter().enumerate() {
        save_png(&shot.image, &dir.join(format!("shot_{k}.png")))?;
        save_png(&shot.confidence.values, &dir.join(format!("confidence_{k}.png")))?;
    }
    if !out.trace.is_empty() {
        let tdir = dir.join("trace");
        fs::create_dir_all(&tdir)?;
        for (t, frame) in &out.trace {
            save_png(frame, &tdir.join(format!("t{t:04}.png")))?;
        }
        let frames: Vec<Image> = out.trace.iter().map(|(_, f)| f.clone()).collect();
        save_npy(&frames, &dir.join("trace.npy"))?;
        let steps: Vec<usize> = out.trace.iter().map(|(t, _)| *t).collect();
        write_json(&dir.join("trace.json"), &serde_json::json!({ "t": steps }))?;
    }
    let (p, q) = pa_diffusion::evaluation::score(&out.image, &s.target)?;
    write_json(
        &dir.join("sample.json"),
        &serde_json::json!({
            "seed": ctx.seed,
            "trajectory_seed": seed,
            "split": args.split,
            "index": args.index,
            "location_id": s.location_id,
            "spec": method_spec,
            "psnr_db": p,
            "ssim": q,
        }),
    )?;
    println!(
        "{} on {} #{}: psnr {:.3} dB, ssim {:.4} ({:.1}s)",
        method_spec.label(),
        args.split,
        args.index,
        p,
        q,
        start.elapsed().as_secs_f64()
    );
    if !out.trace.is_empty() {
        println!("  {} trace frames", out.trace.len());
    }
    println!("  written to {}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_distinct_and_file_safe() {
        let specs = [
            MethodSpec::plain(Method::Baseline),
            MethodSpec::plain(Method::DdpmSingle),
            MethodSpec::plain(Method::DdpmMulti),
            MethodSpec::cfg(1.5),
            MethodSpec::guided(GuidanceConfig { w: 10.0, ..Default::default() }),
            MethodSpec::guided(GuidanceConfig { w: 10.0, use_confidence: false, ..Default::default() }),
            MethodSpec::guided(GuidanceConfig { w: 10.0, t_guide: 250, ..Default::default() }),
        ];
        let stems: Vec<String> = specs.iter().map(stem).collect();
        for (i, a) in stems.iter().enumerate() {
            assert!(a.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.'), "{a}");
            assert!(stems[i + 1..].iter().all(|b| a != b));
        }
        assert_eq!(stems[4], "guided_w10_h");
    }

    #[test]
    fn model_needs() {
        assert_eq!(needs([Mode::DdpmSingle]), (true, false));
        assert_eq!(needs([Mode::Cfg]), (false, true));
        assert_eq!(needs([Mode::Guided]), (true, true));
        assert_eq!(needs([]), (false, false));
    }
}
