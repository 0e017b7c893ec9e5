//! Experiment configuration: a TOML document with strict keys, plus
//! `--key value` overrides addressed by dotted path.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::data::{FrequencyProfile, SceneSpec, DEFAULT_RATIOS};
use crate::detector::{DecodeParams, DetectorConfig};
use crate::error::{Error, Result};
use crate::selftrain::{Schedule, SelfTrainParams};

/// Training mode of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// The self-training pipeline with the unsupervised weight forced to 0.
    Supervised,
    Semi,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Semi => "semi",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Supervised => "Supervised",
            Mode::Semi => "Semi-supervised",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "semi" => Ok(Mode::Semi),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

/// Whether metrics rows carry wall-clock seconds. `Off` writes 0 so that
/// reruns produce byte-identical files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    Wall,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    ThreeClass,
    TwelveClass,
}

impl Preset {
    pub fn scene(self) -> SceneSpec {
        match self {
            Preset::ThreeClass => SceneSpec::three_class(),
            Preset::TwelveClass => SceneSpec::twelve_class(),
        }
    }
}

/// Scene fields that replace the preset's values when present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<FrequencyProfile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clutter_density: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texture_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_radius: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub color_jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aspect_jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoy_ratio: Option<f64>,
}

impl SceneOverrides {
    pub fn apply(&self, mut spec: SceneSpec) -> SceneSpec {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f { spec.$f = v; }
            )*};
        }
        set!(
            image_size,
            num_classes,
            instances,
            profile,
            clutter_density,
            texture_noise,
            object_radius,
            color_jitter,
            aspect_jitter,
            decoy_ratio
        );
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub preset: Preset,
    pub scene: SceneOverrides,
    /// Number of generated images before splitting.
    pub count: usize,
    pub seed: u64,
    /// Read a COCO dataset from this directory instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coco_dir: Option<PathBuf>,
    /// Train/val/test proportions.
    pub ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            preset: Preset::ThreeClass,
            scene: SceneOverrides::default(),
            // 600 train images after the 65/20/15 split
            count: 924,
            seed: 2024,
            coco_dir: None,
            ratios: DEFAULT_RATIOS,
            split_seed: 2024,
        }
    }
}

impl DatasetConfig {
    pub fn scene_spec(&self) -> SceneSpec {
        self.scene.apply(self.preset.scene())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub fractions: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub timing: Timing,
    /// Worker threads for independent runs.
    pub jobs: usize,
    /// Fill cutouts with the training-split channel mean instead of
    /// `augment.cutout_fill`.
    pub cutout_fill_from_data: bool,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub selftrain: SelfTrainParams,
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    pub augment: AugPolicy,
    pub decode: DecodeParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            fractions: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            modes: vec![Mode::Supervised, Mode::Semi],
            seeds: vec![0, 1, 2],
            timing: Timing::Wall,
            jobs: 1,
            cutout_fill_from_data: true,
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            selftrain: desk_selftrain(),
            schedule: Schedule::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugPolicy::default(),
            decode: DecodeParams::default(),
        }
    }
}

/// Self-training settings for the short from-scratch desk schedule: a lower
/// score threshold, unit unsupervised weight and no background term on
/// unlabeled images.
fn desk_selftrain() -> SelfTrainParams {
    SelfTrainParams {
        tau: 0.5,
        lambda_u: 1.0,
        background_weight: 0.0,
        ..SelfTrainParams::default()
    }
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses a TOML document; unknown keys are errors that name their path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_error("<document>", e.message()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| config_error(e.path().to_string(), e.inner().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or starts from the defaults when `None`) and applies
    /// `overrides` as `(dotted.key, value)` pairs before validation.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_error(p.display().to_string(), e.message()))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(config_error("fractions", "must not be empty"));
        }
        for (i, &f) in self.fractions.iter().enumerate() {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_error(
                    format!("fractions[{i}]"),
                    format!("{f} is outside (0, 1]"),
                ));
            }
        }
        if self.modes.is_empty() {
            return Err(config_error("modes", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "must not be empty"));
        }
        if self.jobs == 0 {
            return Err(config_error("jobs", "must be at least 1"));
        }
        let sum: f64 = self.dataset.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.dataset.ratios.iter().any(|&r| r < 0.0) {
            return Err(config_error(
                "dataset.ratios",
                format!(
                    "{:?} must be non-negative and sum to 1",
                    self.dataset.ratios
                ),
            ));
        }
        if self.dataset.coco_dir.is_none() {
            if self.dataset.count == 0 {
                return Err(config_error("dataset.count", "must be positive"));
            }
            self.dataset
                .scene_spec()
                .validate()
                .map_err(|e| config_error("dataset.scene", e.to_string()))?;
        }
        self.selftrain
            .validate()
            .map_err(|e| config_error("selftrain", e.to_string()))?;
        self.schedule
            .validate()
            .map_err(|e| config_error("schedule", e.to_string()))?;
        self.augment
            .validate()
            .map_err(|e| config_error("augment", e.to_string()))?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(config_error(
                "optimizer.learning_rate",
                format!("{} must be positive", o.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(config_error(
                "optimizer.momentum",
                format!("{} must be in [0, 1)", o.momentum),
            ));
        }
        let d = &self.decode;
        if !(0.0..=1.0).contains(&d.score_threshold) || !(0.0..=1.0).contains(&d.nms_iou) {
            return Err(config_error("decode", "thresholds must be in [0, 1]"));
        }
        if self.dataset.coco_dir.is_none()
            && self.detector.num_classes != self.dataset.scene_spec().num_classes
        {
            return Err(config_error(
                "detector.num_classes",
                format!(
                    "{} does not match the scene's {} classes",
                    self.detector.num_classes,
                    self.dataset.scene_spec().num_classes
                ),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error("<document>", e.to_string()))
    }

    /// Number of (mode, fraction, seed) runs.
    pub fn run_count(&self) -> usize {
        self.modes.len() * self.fractions.len() * self.seeds.len()
    }
}

/// Interprets an override value as TOML when it parses as one, otherwise as
/// a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "malformed override key"));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| config_error(key, format!("`{part}` is not a table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `--key value` pairs; a `--key=value` form is accepted too.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(config_error(arg.as_str(), "expected `--key value`"));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| config_error(key, "missing override value"))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.run_count(), 30);
        assert_eq!(c.optimizer.learning_rate, 0.01);
        assert_eq!(c.optimizer.momentum, 0.9);
        assert_eq!(
            (c.schedule.labeled_batch, c.schedule.unlabeled_batch),
            (4, 4)
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = ExperimentConfig::from_toml_str("[selftrain]\ntua = 0.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("selftrain"), "{msg}");
        assert!(msg.contains("tua"), "{msg}");
    }

    #[test]
    fn invalid_fraction_rejected_with_path() {
        let err = ExperimentConfig::from_toml_str("fractions = [0.1, 1.5]\n").unwrap_err();
        assert!(err.to_string().contains("fractions[1]"), "{err}");
        assert!(ExperimentConfig::from_toml_str("seeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("modes = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("fractions = [0.0]\n").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let args: Vec<String> = [
            "--selftrain.tau",
            "0.6",
            "--modes=[\"supervised\"]",
            "--output_dir",
            "out/x",
            "--dataset.scene.clutter_density",
            "2.5",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let o = parse_overrides(&args).unwrap();
        let c = ExperimentConfig::load(None, &o).unwrap();
        assert_eq!(c.selftrain.tau, 0.6);
        assert_eq!(c.modes, vec![Mode::Supervised]);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert_eq!(c.dataset.scene_spec().clutter_density, 2.5);
        assert!(parse_overrides(&["--dangling".to_string()]).is_err());
        assert!(parse_overrides(&["bare".to_string()]).is_err());
    }

    #[test]
    fn preset_and_class_count_must_agree() {
        let err =
            ExperimentConfig::from_toml_str("[dataset]\npreset = \"twelve-class\"\n").unwrap_err();
        assert!(err.to_string().contains("detector.num_classes"), "{err}");
        let ok = ExperimentConfig::from_toml_str(
            "[dataset]\npreset = \"twelve-class\"\n[detector]\nnum_classes = 12\n",
        )
        .unwrap();
        assert_eq!(ok.dataset.scene_spec().num_classes, 12);
    }
}
