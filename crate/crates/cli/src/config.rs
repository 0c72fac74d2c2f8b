//! Run configuration: one TOML file per experiment, overridable from flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pa_diffusion::dataset::DatasetConfig;
use pa_diffusion::denoiser::UNetConfig;
use pa_diffusion::diffusion::{LossKind, ScheduleParams};
use pa_diffusion::evaluation::{Method, SweepConfig};
use pa_diffusion::metrics::CorrelationConfig;
use pa_diffusion::sampler::GuidanceConfig;
use pa_diffusion::trainer::{ConditionMode, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PA_DIFFUSION_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed. Every command derives its randomness from it.
    pub seed: u64,
    /// Output root; `--out` wins, then this, then `$PA_DIFFUSION_OUT`.
    pub out: Option<PathBuf>,
    pub data: DatasetConfig,
    pub train: TrainSection,
    pub models: ModelPaths,
    pub sweep: SweepSection,
    pub evaluate: EvaluateSection,
    pub correlate: CorrelateSection,
    pub sample: SampleSection,
}

/// Shared training hyperparameters. Mode, seed and dataset come from the
/// command line and the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub condition_dropout_prob: f64,
    pub checkpoint_interval: usize,
    pub loss: LossKind,
    pub log_interval: usize,
    pub schedule: ScheduleParams,
    pub architecture: UNetConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            condition_dropout_prob: t.condition_dropout_prob,
            checkpoint_interval: t.checkpoint_interval,
            loss: t.loss,
            log_interval: t.log_interval,
            schedule: t.schedule,
            architecture: t.architecture,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, mode: ConditionMode, seed: u64, dataset: &Path) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            condition_mode: mode,
            condition_dropout_prob: self.condition_dropout_prob,
            seed,
            checkpoint_interval: self.checkpoint_interval,
            dataset_path: dataset.to_path_buf(),
            loss: self.loss,
            schedule: self.schedule,
            architecture: self.architecture.clone(),
            log_interval: self.log_interval,
        }
    }
}

/// Checkpoints used by the sampling commands, relative to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub single: PathBuf,
    pub multi: PathBuf,
}

impl Default for ModelPaths {
    fn default() -> Self {
        Self { single: PathBuf::from("models/single/model.safetensors"), multi: PathBuf::from("models/multi/model.safetensors") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ws: Vec<f64>,
    pub use_confidence: Vec<bool>,
    pub t_guides: Vec<usize>,
    pub normalize_weights: bool,
    /// Validation samples used (all when unset).
    pub limit: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = SweepConfig::default();
        Self { ws: s.ws, use_confidence: s.use_confidence, t_guides: s.t_guides, normalize_weights: s.normalize_weights, limit: None }
    }
}

impl SweepSection {
    pub fn grid(&self) -> SweepConfig {
        SweepConfig {
            ws: self.ws.clone(),
            use_confidence: self.use_confidence.clone(),
            t_guides: self.t_guides.clone(),
            normalize_weights: self.normalize_weights,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub methods: Vec<Method>,
    /// Test samples used (all when unset).
    pub limit: Option<usize>,
    /// Guidance for `guided`; taken from `sweep/selected.json` when unset.
    pub guidance: Option<GuidanceConfig>,
    /// Additional guided runs at these scales, other settings as `guidance`.
    pub extra_ws: Vec<f64>,
    pub cfg_w: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Baseline, Method::DdpmSingle, Method::DdpmMulti, Method::Guided],
            limit: None,
            guidance: None,
            extra_ws: Vec::new(),
            cfg_w: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelateSection {
    /// Evaluated method whose saved outputs are analysed.
    pub method: String,
    pub window: usize,
    pub bins: usize,
    pub windows_per_image: usize,
    pub ssim_window: usize,
}

impl Default for CorrelateSection {
    fn default() -> Self {
        let c = CorrelationConfig::default();
        Self {
            method: Method::DdpmSingle.name().to_string(),
            window: c.window,
            bins: c.bins,
            windows_per_image: c.windows_per_image,
            ssim_window: c.ssim_window,
        }
    }
}

impl CorrelateSection {
    pub fn to_config(&self, seed: u64) -> CorrelationConfig {
        CorrelationConfig {
            window: self.window,
            bins: self.bins,
            windows_per_image: self.windows_per_image,
            ssim_window: self.ssim_window,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub guidance: GuidanceConfig,
}

impl RunConfig {
    /// Reads a TOML file. Syntax and schema errors carry line information.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("config file {} not readable", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.evaluate.methods.is_empty() {
            bail!("evaluate.methods is empty");
        }
        Ok(())
    }

    /// Output root: flag, then config file, then environment, then `runs`.
    pub fn resolve_out(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse(
            "seed = 7\n[data]\nimage_size = 16\n[train]\niterations = 10\n[sweep]\nws = [1.0, 2.0]\nlimit = 4\n\
             [evaluate]\nmethods = [\"baseline\", \"cfg\"]\n[evaluate.guidance]\nw = 3.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.image_size, 16);
        assert_eq!(cfg.train.iterations, 10);
        assert_eq!(cfg.sweep.grid().ws, vec![1.0, 2.0]);
        assert_eq!(cfg.sweep.limit, Some(4));
        assert_eq!(cfg.evaluate.methods, vec![Method::Baseline, Method::Cfg]);
        assert_eq!(cfg.evaluate.guidance.unwrap().w, 3.0);
        assert!(cfg.evaluate.guidance.unwrap().use_confidence);
    }

    #[test]
    fn errors_report_line_numbers() {
        let err = RunConfig::parse("seed = 1\n[train]\niterations = \"many\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 3"), "{err:#}");
        let err = RunConfig::parse("seed = 1\n\n[trian]\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 3"), "{err:#}");
    }

    #[test]
    fn out_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_out(Some(Path::new("a"))), PathBuf::from("a"));
        cfg.out = Some("b".into());
        assert_eq!(cfg.resolve_out(None), PathBuf::from("b"));
        assert_eq!(cfg.resolve_out(Some(Path::new("a"))), PathBuf::from("a"));
    }

    #[test]
    fn train_section_maps_to_train_config() {
        let s = TrainSection::default();
        let t = s.to_train_config(ConditionMode::Multi, 9, Path::new("d"));
        assert_eq!(t.condition_mode, ConditionMode::Multi);
        assert_eq!((t.seed, t.dataset_path.as_path()), (9, Path::new("d")));
        assert_eq!(t.iterations, TrainConfig::default().iterations);
    }
}
