//! End-to-end library pipeline on a miniature problem: dataset build,
//! training, checkpoint reload, evaluation and sweep.

use std::fs;
use std::path::Path;

use pa_diffusion::dataset::{build_dataset, load_split, DatasetConfig, Split, SplitSpec};
use pa_diffusion::denoiser::{tiny_config, NoiseModel, NoisePredictor};
use pa_diffusion::diffusion::ScheduleParams;
use pa_diffusion::evaluation::{evaluate, read_rows, select_best, sweep, write_rows, Method, MethodSpec, ReportRow, SweepConfig, SweepRow};
use pa_diffusion::sampler::{GuidanceConfig, Models};
use pa_diffusion::trainer::{self, ConditionMode, TrainConfig};

const SIZE: usize = 16;
const STEPS: usize = 40;

fn dataset_config() -> DatasetConfig {
    DatasetConfig {
        image_size: SIZE,
        k_hq: 4,
        train: SplitSpec { count: 6, phantom_seed_start: 0 },
        val: SplitSpec { count: 2, phantom_seed_start: 100 },
        test: SplitSpec { count: 3, phantom_seed_start: 200 },
        ..DatasetConfig::default()
    }
}

fn train_config(mode: ConditionMode, data: &Path) -> TrainConfig {
    TrainConfig {
        iterations: 3,
        batch_size: 2,
        learning_rate: 1e-3,
        condition_mode: mode,
        dataset_path: data.to_path_buf(),
        schedule: ScheduleParams { steps: STEPS, ..ScheduleParams::default() },
        architecture: tiny_config(1),
        log_interval: 0,
        ..TrainConfig::default()
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_build_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    build_dataset(&a, &dataset_config(), 9).unwrap();
    build_dataset(&b, &dataset_config(), 9).unwrap();
    let (fa, fb) = (files(&a), files(&b));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
    let (meta, test) = load_split(&a, Split::Test, None).unwrap();
    assert_eq!(meta.image_size(), SIZE);
    assert_eq!(test.len(), 3);
    assert!(test.samples.iter().all(|s| s.m() == 3));
}

#[test]
fn train_evaluate_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build_dataset(&data, &dataset_config(), 3).unwrap();

    let single = trainer::train(&train_config(ConditionMode::Single, &data), &tmp.path().join("single")).unwrap();
    let multi = trainer::train(&train_config(ConditionMode::Multi, &data), &tmp.path().join("multi")).unwrap();
    assert_eq!(single.losses.len(), 3);
    assert!(single.losses.iter().chain(&multi.losses).all(|l| l.is_finite() && *l > 0.0));

    // A reloaded checkpoint predicts bit-identically.
    let reloaded = NoisePredictor::load(&multi.checkpoint).unwrap();
    let x: Vec<f32> = (0..SIZE * SIZE).map(|i| (i as f32 * 0.37).sin()).collect();
    let cond: Vec<f32> = (0..3 * SIZE * SIZE).map(|i| (i as f32 * 0.11).cos()).collect();
    let a = multi.model.predict_batch(&x, &cond, &[17], SIZE).unwrap();
    let b = reloaded.predict_batch(&x, &cond, &[17], SIZE).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));

    let schedule = reloaded.meta().schedule.build().unwrap();
    assert_eq!(schedule.steps(), STEPS);
    let models = Models { single: Some(&single.model), multi: Some(&reloaded) };
    let (_, test) = load_split(&data, Split::Test, None).unwrap();

    let methods = [
        MethodSpec::plain(Method::Baseline),
        MethodSpec::plain(Method::DdpmSingle),
        MethodSpec::plain(Method::DdpmMulti),
        MethodSpec::guided(GuidanceConfig { w: 0.0, ..GuidanceConfig::default() }),
        MethodSpec::guided(GuidanceConfig { w: 2.0, ..GuidanceConfig::default() }),
    ];
    let (report, outputs) = evaluate(&models, &schedule, &test.samples, &methods, 5).unwrap();
    assert_eq!(report.rows.len(), methods.len() * test.len());
    assert_eq!(outputs.len(), methods.len());
    assert!(report.rows.iter().all(|r| r.ssim.is_finite() && r.ssim <= 1.0 && r.psnr_db.is_finite()));

    // w = 0 reproduces plain multi-shot sampling exactly.
    let multi_rows = report.rows_for(Method::DdpmMulti, None, None);
    let w0_rows = report.rows_for(Method::Guided, Some(0.0), Some(true));
    assert_eq!((multi_rows.len(), w0_rows.len()), (test.len(), test.len()));
    for (m, g) in multi_rows.iter().zip(&w0_rows) {
        assert_eq!((m.sample_id, m.ssim.to_bits()), (g.sample_id, g.ssim.to_bits()));
    }

    let csv = tmp.path().join("report.csv");
    write_rows(&csv, &report.rows).unwrap();
    let back: Vec<ReportRow> = read_rows(&csv).unwrap();
    assert_eq!(back, report.rows);

    // The t_guide = T column is plain multi-shot sampling.
    let cfg = SweepConfig { ws: vec![1.0, 3.0], use_confidence: vec![true], t_guides: vec![0, STEPS], normalize_weights: false };
    let rows = sweep(&models, &schedule, &test.samples, &cfg, 5).unwrap();
    assert_eq!(rows.len(), 4);
    let multi_mean = multi_rows.iter().map(|r| r.ssim).sum::<f64>() / multi_rows.len() as f64;
    for r in rows.iter().filter(|r| r.t_guide == STEPS) {
        assert!((r.mean_ssim - multi_mean).abs() < 1e-12, "{} vs {multi_mean}", r.mean_ssim);
    }
    let best = select_best(&rows).unwrap();
    assert!(rows.iter().all(|r| r.mean_ssim <= best.mean_ssim));
    let sweep_csv = tmp.path().join("sweep.csv");
    write_rows(&sweep_csv, &rows).unwrap();
    let back: Vec<SweepRow> = read_rows(&sweep_csv).unwrap();
    assert_eq!(back.len(), rows.len());
}

#[test]
fn training_without_dataset_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let Err(err) = trainer::train(&train_config(ConditionMode::Single, &missing), &tmp.path().join("out")) else {
        panic!("training without a dataset succeeded");
    };
    assert!(err.to_string().contains("nowhere"), "{err}");
}
