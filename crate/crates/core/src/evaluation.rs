//! Method comparison on a dataset split: per-sample PSNR/SSIM reports and
//! guidance-scale sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::metrics::{psnr, ssim, CorrelationTable, SSIM_WINDOW};
use crate::phantom::{average_shots, Image, PairedSample};
use crate::sampler::{sample_batch, sample_t_guide_grid, trajectory_seed, GuidanceConfig, Mode, Models, SampleSpec};

/// Samples processed together per sampler call.
pub const SAMPLE_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pixel-wise average of the input shots.
    Baseline,
    DdpmSingle,
    DdpmMulti,
    Cfg,
    Guided,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DdpmSingle => "ddpm_single",
            Method::DdpmMulti => "ddpm_multi",
            Method::Cfg => "cfg",
            Method::Guided => "guided",
        }
    }

    pub fn mode(self) -> Option<Mode> {
        match self {
            Method::Baseline => None,
            Method::DdpmSingle => Some(Mode::DdpmSingle),
            Method::DdpmMulti => Some(Mode::DdpmMulti),
            Method::Cfg => Some(Mode::Cfg),
            Method::Guided => Some(Mode::Guided),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            other => other.parse::<Mode>().map(|m| match m {
                Mode::DdpmSingle => Method::DdpmSingle,
                Mode::DdpmMulti => Method::DdpmMulti,
                Mode::Cfg => Method::Cfg,
                Mode::Guided => Method::Guided,
            }),
        }
    }
}

/// One evaluated configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub guidance: GuidanceConfig,
}

impl MethodSpec {
    pub fn plain(method: Method) -> Self {
        Self { method, guidance: GuidanceConfig::default() }
    }

    pub fn guided(guidance: GuidanceConfig) -> Self {
        Self { method: Method::Guided, guidance }
    }

    pub fn cfg(w: f64) -> Self {
        Self { method: Method::Cfg, guidance: GuidanceConfig { w, ..GuidanceConfig::default() } }
    }

    /// Guidance scale as reported (guided and cfg only).
    pub fn w(&self) -> Option<f64> {
        matches!(self.method, Method::Guided | Method::Cfg).then_some(self.guidance.w)
    }

    /// Confidence weighting as reported (guided only).
    pub fn use_confidence(&self) -> Option<bool> {
        (self.method == Method::Guided).then_some(self.guidance.use_confidence)
    }

    /// Human-readable label, e.g. `guided(w=10,h)`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Guided => format!(
                "guided(w={},{}{})",
                self.guidance.w,
                if self.guidance.use_confidence { "h" } else { "no h" },
                if self.guidance.t_guide > 0 { format!(",t_guide={}", self.guidance.t_guide) } else { String::new() }
            ),
            Method::Cfg => format!("cfg(w={})", self.guidance.w),
            m => m.name().to_string(),
        }
    }
}

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sample_id: u64,
    pub method: Method,
    pub w: Option<f64>,
    pub use_confidence: Option<bool>,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Mean metrics for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub w: Option<f64>,
    pub use_confidence: Option<bool>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub correlation: Option<CorrelationTable>,
}

impl EvalReport {
    /// Means per `(method, w, use_confidence)`, in first-appearance order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out: Vec<(Aggregate, f64, f64)> = Vec::new();
        for r in &self.rows {
            let key = |a: &Aggregate| a.method == r.method && a.w == r.w && a.use_confidence == r.use_confidence;
            match out.iter_mut().find(|(a, _, _)| key(a)) {
                Some((a, p, s)) => {
                    a.n += 1;
                    *p += r.psnr_db;
                    *s += r.ssim;
                }
                None => out.push((
                    Aggregate { method: r.method, w: r.w, use_confidence: r.use_confidence, mean_psnr: 0.0, mean_ssim: 0.0, n: 1 },
                    r.psnr_db,
                    r.ssim,
                )),
            }
        }
        out.into_iter()
            .map(|(mut a, p, s)| {
                a.mean_psnr = p / a.n as f64;
                a.mean_ssim = s / a.n as f64;
                a
            })
            .collect()
    }

    /// Rows of one configuration, in sample order.
    pub fn rows_for(&self, method: Method, w: Option<f64>, use_confidence: Option<bool>) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.method == method && r.w == w && r.use_confidence == use_confidence).collect()
    }

    pub fn ssim_for(&self, spec: &MethodSpec) -> Vec<f64> {
        self.rows_for(spec.method, spec.w(), spec.use_confidence()).iter().map(|r| r.ssim).collect()
    }
}

/// Scores an output against its target.
pub fn score(output: &Image, target: &Image) -> Result<(f64, f64)> {
    Ok((psnr(output, target, 1.0)?, ssim(output, target, SSIM_WINDOW, 1.0)?))
}

fn run_method(models: &Models, schedule: &NoiseSchedule, samples: &[PairedSample], spec: &MethodSpec, run_seed: u64) -> Result<Vec<Image>> {
    let Some(mode) = spec.method.mode() else {
        return samples.iter().map(|s| average_shots(&s.shots)).collect();
    };
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SAMPLE_CHUNK) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let seeds: Vec<u64> = chunk.iter().map(|s| trajectory_seed(run_seed, s.location_id)).collect();
        let res = sample_batch(models, schedule, &refs, &seeds, &SampleSpec::new(mode, spec.guidance), None)?;
        out.extend(res.into_iter().map(|o| o.image));
    }
    Ok(out)
}

/// Restores every sample with every method and scores it. Returns the report
/// and, per method, the restored images in sample order.
pub fn evaluate(
    models: &Models,
    schedule: &NoiseSchedule,
    samples: &[PairedSample],
    methods: &[MethodSpec],
    run_seed: u64,
) -> Result<(EvalReport, Vec<Vec<Image>>)> {
    ensure!(!samples.is_empty(), "no samples to evaluate");
    ensure!(!methods.is_empty(), "no methods to evaluate");
    for spec in methods {
        if let Some(mode) = spec.method.mode() {
            models.check(mode, samples[0].m())?;
        }
    }
    let mut report = EvalReport::default();
    let mut outputs = Vec::with_capacity(methods.len());
    for spec in methods {
        let start = std::time::Instant::now();
        let images = run_method(models, schedule, samples, spec, run_seed)?;
        for (s, img) in samples.iter().zip(&images) {
            let (p, q) = score(img, &s.target)?;
            report.rows.push(ReportRow {
                sample_id: s.location_id,
                method: spec.method,
                w: spec.w(),
                use_confidence: spec.use_confidence(),
                psnr_db: p,
                ssim: q,
            });
        }
        log::info!("{}: {} samples in {:.1}s", spec.label(), samples.len(), start.elapsed().as_secs_f64());
        outputs.push(images);
    }
    Ok((report, outputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ws: Vec<f64>,
    pub use_confidence: Vec<bool>,
    pub t_guides: Vec<usize>,
    pub normalize_weights: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { ws: vec![5.0, 10.0, 20.0, 30.0], use_confidence: vec![true, false], t_guides: vec![0], normalize_weights: false }
    }
}

/// One line of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: f64,
    pub use_confidence: bool,
    pub t_guide: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub n: usize,
}

impl SweepRow {
    pub fn guidance(&self, normalize_weights: bool) -> GuidanceConfig {
        GuidanceConfig { w: self.w, t_guide: self.t_guide, use_confidence: self.use_confidence, normalize_weights }
    }
}

fn mean_scores(outputs: &[Image], samples: &[PairedSample]) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for (o, smp) in outputs.iter().zip(samples) {
        let (a, b) = score(o, &smp.target)?;
        p += a;
        s += b;
    }
    Ok((p / samples.len() as f64, s / samples.len() as f64))
}

/// Guided sampling over the `w × use_confidence × t_guide` grid, one row per
/// combination in that nesting order.
///
/// `t_guide = T` disables guidance entirely, so that column is the plain
/// multi-shot sampler; it is computed once and shared by every `w`.
pub fn sweep(
    models: &Models,
    schedule: &NoiseSchedule,
    samples: &[PairedSample],
    cfg: &SweepConfig,
    run_seed: u64,
) -> Result<Vec<SweepRow>> {
    ensure!(!samples.is_empty(), "no samples to sweep");
    ensure!(!cfg.ws.is_empty() && !cfg.use_confidence.is_empty() && !cfg.t_guides.is_empty(), "empty sweep grid");
    models.check(Mode::Guided, samples[0].m())?;
    let steps = schedule.steps();
    let branch_grid: Vec<usize> = cfg.t_guides.iter().copied().filter(|&g| g < steps).collect();
    let unguided = if cfg.t_guides.iter().any(|&g| g >= steps) {
        let spec = MethodSpec::plain(Method::DdpmMulti);
        Some(mean_scores(&run_method(models, schedule, samples, &spec, run_seed)?, samples)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for &w in &cfg.ws {
        for &h in &cfg.use_confidence {
            let start = std::time::Instant::now();
            let guidance = GuidanceConfig { w, t_guide: 0, use_confidence: h, normalize_weights: cfg.normalize_weights };
            let mut per_g: Vec<Vec<Image>> = vec![Vec::with_capacity(samples.len()); branch_grid.len()];
            if !branch_grid.is_empty() {
                for chunk in samples.chunks(SAMPLE_CHUNK) {
                    let refs: Vec<&PairedSample> = chunk.iter().collect();
                    let seeds: Vec<u64> = chunk.iter().map(|s| trajectory_seed(run_seed, s.location_id)).collect();
                    let spec = SampleSpec::new(Mode::Guided, guidance);
                    let grid = sample_t_guide_grid(models, schedule, &refs, &seeds, &spec, &branch_grid, None)?;
                    for (dst, res) in per_g.iter_mut().zip(grid) {
                        dst.extend(res.into_iter().map(|o| o.image));
                    }
                }
            }
            for &g in &cfg.t_guides {
                let (mean_psnr, mean_ssim) = match branch_grid.iter().position(|&b| b == g) {
                    Some(k) => mean_scores(&per_g[k], samples)?,
                    None => unguided.expect("computed when the grid reaches T"),
                };
                rows.push(SweepRow { w, use_confidence: h, t_guide: g, mean_psnr, mean_ssim, n: samples.len() });
            }
            log::info!("sweep w={w} h={h}: {:.1}s", start.elapsed().as_secs_f64());
        }
    }
    Ok(rows)
}

/// Highest mean SSIM; the earliest row wins ties.
pub fn select_best(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.mean_ssim >= r.mean_ssim => Some(b),
        _ => Some(r),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(Error::from)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a correlation table with columns `bin_lo, bin_hi, mean_ssim, n_windows`.
pub fn write_correlation(path: &Path, table: &CorrelationTable) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        bin_lo: f64,
        bin_hi: f64,
        mean_ssim: Option<f64>,
        n_windows: usize,
    }
    let rows: Vec<Row> =
        table.bins.iter().map(|b| Row { bin_lo: b.lo, bin_hi: b.hi, mean_ssim: b.mean_ssim, n_windows: b.n_windows }).collect();
    write_rows(path, &rows)
}

pub fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::from(e),
    })?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{simulate_sample, DatasetConfig};
    use crate::diffusion::linear_schedule;
    use crate::sampler::stubs::Affine;

    fn samples(n: usize) -> Vec<PairedSample> {
        let cfg = DatasetConfig { image_size: 16, k_hq: 4, ..DatasetConfig::default() };
        (0..n).map(|i| simulate_sample(&cfg, 0, i, i as u64).unwrap().0).collect()
    }

    fn stubs() -> (Affine, Affine) {
        (Affine { channels: 3, a: 0.6, b: -0.4, c: 0.0, uncond: true }, Affine { channels: 1, a: 0.5, b: -0.3, c: 0.0, uncond: false })
    }

    #[test]
    fn report_rows_and_aggregates() {
        let (multi, single) = stubs();
        let models = Models { multi: Some(&multi), single: Some(&single) };
        let sch = linear_schedule(20, 1e-3, 0.2).unwrap();
        let data = samples(5);
        let methods = [
            MethodSpec::plain(Method::Baseline),
            MethodSpec::plain(Method::DdpmSingle),
            MethodSpec::plain(Method::DdpmMulti),
            MethodSpec::cfg(1.0),
            MethodSpec::guided(GuidanceConfig { w: 2.0, ..Default::default() }),
            MethodSpec::guided(GuidanceConfig { w: 2.0, use_confidence: false, ..Default::default() }),
        ];
        let (report, outputs) = evaluate(&models, &sch, &data, &methods, 1).unwrap();
        assert_eq!(report.rows.len(), methods.len() * data.len());
        assert_eq!(outputs.len(), methods.len());
        let aggs = report.aggregates();
        assert_eq!(aggs.len(), methods.len());
        for (a, spec) in aggs.iter().zip(&methods) {
            let rows = report.rows_for(spec.method, spec.w(), spec.use_confidence());
            let mp = rows.iter().map(|r| r.psnr_db).sum::<f64>() / rows.len() as f64;
            let ms = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
            assert_eq!((a.mean_psnr, a.mean_ssim, a.n), (mp, ms, 5));
            assert!(rows.iter().all(|r| (-1.0..=1.0).contains(&r.ssim)));
        }
        // Baseline row equals scoring the shot average directly.
        let (p, s) = score(&average_shots(&data[2].shots).unwrap(), &data[2].target).unwrap();
        assert_eq!((report.rows[2].psnr_db, report.rows[2].ssim), (p, s));
    }

    #[test]
    fn sweep_rows_match_standalone_evaluation() {
        let (multi, single) = stubs();
        let models = Models { multi: Some(&multi), single: Some(&single) };
        let sch = linear_schedule(20, 1e-3, 0.2).unwrap();
        let data = samples(3);
        let cfg =
            SweepConfig { ws: vec![1.0, 3.0], use_confidence: vec![true, false], t_guides: vec![0, 10, 20], normalize_weights: false };
        let rows = sweep(&models, &sch, &data, &cfg, 5).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        for r in &rows {
            let spec = MethodSpec::guided(r.guidance(false));
            let (rep, _) = evaluate(&models, &sch, &data, &[spec], 5).unwrap();
            let a = &rep.aggregates()[0];
            assert_eq!((a.mean_psnr, a.mean_ssim), (r.mean_psnr, r.mean_ssim), "{r:?}");
        }
        let best = select_best(&rows).unwrap();
        assert!(rows.iter().all(|r| r.mean_ssim <= best.mean_ssim));
    }

    #[test]
    fn table_layout_sweep_has_eight_rows() {
        let (multi, single) = stubs();
        let models = Models { multi: Some(&multi), single: Some(&single) };
        let sch = linear_schedule(5, 1e-3, 0.2).unwrap();
        let rows = sweep(&models, &sch, &samples(1), &SweepConfig::default(), 0).unwrap();
        assert_eq!(rows.len(), 8);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            SweepRow { w: 5.0, use_confidence: true, t_guide: 0, mean_psnr: 20.5, mean_ssim: 0.5, n: 3 },
            SweepRow { w: 10.0, use_confidence: false, t_guide: 250, mean_psnr: f64::INFINITY, mean_ssim: 0.25, n: 3 },
        ];
        let p = dir.path().join("x/sweep.csv");
        write_rows(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("w,use_confidence,t_guide,mean_psnr,mean_ssim,n\n"));
        assert_eq!(read_rows::<SweepRow>(&p).unwrap(), rows);
        assert!(matches!(read_rows::<SweepRow>(&dir.path().join("none.csv")), Err(Error::NotFound(_))));
        let rep = vec![ReportRow { sample_id: 4, method: Method::Baseline, w: None, use_confidence: None, psnr_db: 1.0, ssim: 0.5 }];
        write_rows(&dir.path().join("r.csv"), &rep).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(text, "sample_id,method,w,use_confidence,psnr_db,ssim\n4,baseline,,,1.0,0.5\n");
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Baseline, Method::DdpmSingle, Method::DdpmMulti, Method::Cfg, Method::Guided] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
