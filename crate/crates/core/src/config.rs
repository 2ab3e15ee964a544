//! Run configuration: TOML file, `key=value` overrides, defaults.
//!
//! Precedence is flag overrides, then the config file, then built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codecs::{Codec2D, Codec3D};
use crate::degradation::DegradationOp;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::postprocess::PostprocessConfig;
use crate::schedules::{DdimForm, DdimGrid, DdpmSchedule};
use crate::search::SearchConfig;
use crate::tensor::{Dims, VideoTensor};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "VIDFUSE_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sr4x,
    DeblurTemporal,
    Lowlight,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sr4x => "sr4x",
            Task::DeblurTemporal => "deblur_temporal",
            Task::Lowlight => "lowlight",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr4x" => Ok(Task::Sr4x),
            "deblur_temporal" => Ok(Task::DeblurTemporal),
            "lowlight" => Ok(Task::Lowlight),
            _ => Err(Error::Config(format!(
                "unknown task `{s}` (expected sr4x, deblur_temporal or lowlight)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub eta: f64,
    pub form: DdimForm,
    /// Betas of the heterogeneous video branch.
    pub v2_beta_start: f64,
    pub v2_beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 50,
            eta: 0.0,
            form: DdimForm::default(),
            v2_beta_start: 8.5e-4,
            v2_beta_end: 0.012,
        }
    }
}

impl ScheduleConfig {
    pub fn image(&self) -> Result<DdpmSchedule> {
        DdpmSchedule::linear(self.n_train, self.beta_start, self.beta_end)
    }

    pub fn video(&self) -> Result<DdpmSchedule> {
        DdpmSchedule::linear(self.n_train, self.v2_beta_start, self.v2_beta_end)
    }

    pub fn grid(&self, seed: u64) -> Result<DdimGrid> {
        Ok(DdimGrid::uniform(self.n_train, self.steps, self.eta, seed)?.with_form(self.form))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Prior variance of the image model around the lifted measurement.
    pub prior_var: f64,
    /// Prior variance of both video models.
    pub video_prior_var: f64,
    pub smoother_strength: f64,
    pub smoother_window: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            prior_var: 0.01,
            video_prior_var: 0.01,
            smoother_strength: 0.9,
            smoother_window: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Codec2dConfig {
    pub block: usize,
    pub keep_ratio: f64,
}

impl Default for Codec2dConfig {
    fn default() -> Self {
        Self {
            block: 2,
            keep_ratio: 1.0,
        }
    }
}

impl Codec2dConfig {
    pub fn build(&self) -> Result<Codec2D> {
        Codec2D::new(self.block, self.keep_ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Codec3dConfig {
    pub block: usize,
    pub group: usize,
    pub keep_ratio: f64,
}

impl Default for Codec3dConfig {
    fn default() -> Self {
        Self {
            block: 2,
            group: 2,
            keep_ratio: 1.0,
        }
    }
}

impl Codec3dConfig {
    pub fn build(&self) -> Result<Codec3D> {
        Codec3D::new(self.block, self.group, self.keep_ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    pub task: Task,
    /// Downsample factor for `sr4x`.
    pub factor: usize,
    /// Temporal blur window for `deblur_temporal`.
    pub blur_window: usize,
    /// Ground-truth low-light parameters used by `degrade`.
    pub lowlight_factor: f64,
    pub lowlight_mask: f64,
    /// Std of additive measurement noise used by `degrade`.
    pub noise_sigma: f64,
    /// Low-light fitting step; 0 picks `1 / L` from the Lipschitz bound.
    pub lowlight_lr: f64,
    pub lowlight_iters: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            task: Task::Sr4x,
            factor: 4,
            blur_window: 5,
            lowlight_factor: 0.3,
            lowlight_mask: 0.05,
            noise_sigma: 0.0,
            lowlight_lr: 0.0,
            lowlight_iters: 20,
        }
    }
}

impl OperatorConfig {
    /// Forward operator of the task for clean videos with dims `video`.
    pub fn operator(&self, video: Dims) -> DegradationOp {
        let [_, c, h, w] = video;
        match self.task {
            Task::Sr4x => DegradationOp::Downsample { factor: self.factor },
            Task::DeblurTemporal => DegradationOp::TemporalUniformBlur {
                window: self.blur_window,
            },
            Task::Lowlight => DegradationOp::LowLight {
                factor: self.lowlight_factor,
                mask: VideoTensor::full([1, c, h, w], self.lowlight_mask as f32),
            },
        }
    }

    /// Clean-video dims for a measurement with dims `measured`.
    pub fn signal_dims(&self, measured: Dims) -> Dims {
        let [t, c, h, w] = measured;
        match self.task {
            Task::Sr4x => [t, c, h * self.factor, w * self.factor],
            _ => measured,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// `false` runs the image branch alone.
    pub enabled: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub input: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub codec2d: Codec2dConfig,
    pub codec3d: Codec3dConfig,
    pub operator: OperatorConfig,
    pub guidance: GuidanceConfig,
    pub search: SearchConfig,
    pub postprocess: PostprocessConfig,
    pub fusion: FusionConfig,
    pub paths: PathsConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted `key` in `table`, creating intermediate tables.
fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides on top.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_key(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Loads `path` (or nothing) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.search.validate()?;
        self.schedule.image()?;
        self.schedule.video()?;
        self.schedule.grid(self.seed)?;
        self.codec2d.build()?;
        self.codec3d.build()?;
        if self.denoiser.prior_var <= 0.0 || self.denoiser.video_prior_var <= 0.0 {
            return Err(Error::Config("denoiser prior variances must be > 0".into()));
        }
        if self.denoiser.smoother_window.is_multiple_of(2) {
            return Err(Error::Config("denoiser.smoother_window must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.denoiser.smoother_strength) {
            return Err(Error::Config(
                "denoiser.smoother_strength must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.postprocess.rho) {
            return Err(Error::Config("postprocess.rho must lie in [0, 1]".into()));
        }
        if self.postprocess.clip_len < 2 {
            return Err(Error::Config("postprocess.clip_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[search]\nmm = 3").is_err());
        assert!(RunConfig::from_toml("[nope]\nx = 1").is_err());
    }

    #[test]
    fn overrides_beat_file() {
        let text = "seed = 5\n[search]\nm = 3\nr0 = 0.4\n";
        let cfg = RunConfig::from_toml_with(
            text,
            &[
                ("search.m".into(), "2".into()),
                ("operator.task".into(), "lowlight".into()),
                ("search.initial".into(), "[0.0, 0.0, 0.0]".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.search.m, 2);
        assert_eq!(cfg.search.r0, 0.4);
        assert_eq!(cfg.operator.task, Task::Lowlight);
        assert_eq!(cfg.search.initial, [0.0; 3]);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.paths.input = Some("in.vten".into());
        cfg.search.fixed_mode = true;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[search]\nevery_k = 0").is_err());
        assert!(RunConfig::from_toml("[denoiser]\nsmoother_window = 4").is_err());
        assert!(RunConfig::from_toml("[codec2d]\nblock = 3").is_err());
        assert!(parse_override("novalue").is_err());
    }
}
