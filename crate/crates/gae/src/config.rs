//! Run configuration: one TOML document covering every stage, merged over
//! built-in defaults, with `--set key=value` dotted-path overrides and a
//! `GAE_DATA_ROOT` environment override for the dataset root. Unknown keys
//! are fatal and reported with their full path.

use std::path::{Path, PathBuf};

use crate::autoencoder::AeConfig;
use crate::diffusion::{DiffusionConfig, GuidanceConfig};
use crate::error::{GaeError, Result};
use crate::eval::EvalConfig;
use crate::synth::SynthConfig;
use crate::teacher::{DownsamplerSpec, DownsamplerVariant, TeacherConfig, TeacherTrainConfig};
use crate::train::TrainAeConfig;

/// Environment variable overriding [`RunConfig::data_root`].
pub const DATA_ROOT_ENV: &str = "GAE_DATA_ROOT";

/// Settings for the `sample` command.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Number of latents to draw; labels cycle through the classes unless
    /// given explicitly.
    pub count: usize,
    /// Explicit labels; empty means class-uniform.
    pub labels: Vec<u32>,
    /// Grid columns of the emitted PNG.
    pub cols: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: 16,
            labels: Vec::new(),
            cols: 4,
        }
    }
}

/// The full run document. Defaults describe a desk-scale setup that runs on
/// CPU in minutes per stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    /// Dataset root holding `train/` and `val/` splits. Overridden by the
    /// `GAE_DATA_ROOT` environment variable when set.
    pub data_root: PathBuf,
    /// Global seed, propagated into every stage at resolve time. Per-stage
    /// seed fields in the sections below are derived from it and need not
    /// be set by hand.
    pub seed: u64,
    /// Seed of the frozen teacher backbone, kept separate so ablations can
    /// vary the model seed without changing the teacher.
    pub teacher_seed: u64,
    /// Token-row cap when fitting the SVD teacher projection in the
    /// alignment pilot.
    pub svd_token_cap: usize,
    pub synth: SynthConfig,
    pub ae: AeConfig,
    pub train: TrainAeConfig,
    pub teacher: TeacherConfig,
    pub teacher_train: TeacherTrainConfig,
    pub downsampler: DownsamplerSpec,
    pub diffusion: DiffusionConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            output_dir: "runs".into(),
            data_root: "data".into(),
            seed: 0,
            teacher_seed: 17,
            svd_token_cap: 4096,
            synth: SynthConfig::default(),
            ae: AeConfig::desk(),
            train: TrainAeConfig::default(),
            teacher: TeacherConfig::desk(),
            teacher_train: TeacherTrainConfig::desk(),
            downsampler: DownsamplerSpec::new(DownsamplerVariant::AttnPatchconv, 16),
            diffusion: DiffusionConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse `path`, apply dotted-path overrides, apply the environment
    /// override, propagate the global seed, and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GaeError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    /// Same as [`RunConfig::load`] but from an in-memory document.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Value = toml::from_str(text)
            .map_err(|e| GaeError::config(format!("config parse error: {e}")))?;
        let mut tree = toml::Value::try_from(Self::default())
            .map_err(|e| GaeError::config(format!("default config encode: {e}")))?;
        check_known_keys(&user, &tree, "")?;
        merge(&mut tree, &user);
        for item in overrides {
            apply_set(&mut tree, item)?;
        }
        let mut cfg: Self = tree
            .try_into()
            .map_err(|e| GaeError::config(format!("config error: {e}")))?;
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                cfg.data_root = PathBuf::from(root);
            }
        }
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.diffusion.seed = self.seed;
        self.eval.seed = self.seed;
        self.eval.probe.seed = self.seed;
        // The downsampler target dimension is the latent dimension by
        // construction, and generated images match the training resolution;
        // derived here so one override keeps them in step.
        self.downsampler.out_dim = self.ae.latent_dim;
        self.synth.image_size = self.ae.image_size;
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains(std::path::is_separator) {
            return Err(GaeError::config("run_name must be a plain directory name"));
        }
        self.synth.validate()?;
        self.ae.validate()?;
        self.train.validate()?;
        self.teacher.backbone.validate()?;
        self.diffusion.validate()?;
        self.guidance.validate()?;
        if self.sample.count == 0 || self.sample.cols == 0 {
            return Err(GaeError::config("sample.count and sample.cols must be positive"));
        }
        if self.svd_token_cap == 0 {
            return Err(GaeError::config("svd_token_cap must be positive"));
        }
        Ok(())
    }

    /// Directory all of this run's outputs land in.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    /// Serialize the resolved document, e.g. for the run-dir snapshot.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| GaeError::config(format!("config encode: {e}")))
    }
}

/// Reject any key present in `user` but absent from the default tree at the
/// same path, reporting the full dotted path.
fn check_known_keys(user: &toml::Value, defaults: &toml::Value, path: &str) -> Result<()> {
    let (toml::Value::Table(u), toml::Value::Table(d)) = (user, defaults) else {
        return Ok(());
    };
    for (key, val) in u {
        let full = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match d.get(key) {
            None => {
                return Err(GaeError::config(format!("unknown config key: {full}")));
            }
            Some(dv) => check_known_keys(val, dv, &full)?,
        }
    }
    Ok(())
}

/// Recursively overlay `user` onto `base`. Tables merge; everything else
/// replaces.
fn merge(base: &mut toml::Value, user: &toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (key, val) in u {
                match b.get_mut(key) {
                    Some(slot) => merge(slot, val),
                    None => {
                        b.insert(key.clone(), val.clone());
                    }
                }
            }
        }
        (slot, val) => *slot = val.clone(),
    }
}

/// Apply one `key.path=value` override. The path must already exist in the
/// tree; the value is parsed as TOML, falling back to a bare string.
fn apply_set(tree: &mut toml::Value, item: &str) -> Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        return Err(GaeError::config(format!(
            "override '{item}' must have the form key.path=value"
        )));
    };
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(GaeError::config(format!("override '{item}' has an empty key")));
    }
    let value = parse_override_value(raw)?;
    let mut slot = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let toml::Value::Table(table) = slot else {
            return Err(GaeError::config(format!(
                "invalid config key: {} is not a section",
                parts[..i].join(".")
            )));
        };
        slot = table
            .get_mut(*part)
            .ok_or_else(|| GaeError::config(format!("invalid config key: {key}")))?;
        if i + 1 == parts.len() {
            if matches!(slot, toml::Value::Table(_)) {
                return Err(GaeError::config(format!(
                    "invalid config key: {key} names a section, not a value"
                )));
            }
            *slot = value;
            return Ok(());
        }
    }
    unreachable!("loop returns on the last path segment");
}

fn parse_override_value(raw: &str) -> Result<toml::Value> {
    let doc = format!("v = {raw}");
    if let Ok(toml::Value::Table(mut t)) = toml::from_str::<toml::Value>(&doc) {
        if let Some(v) = t.remove("v") {
            return Ok(v);
        }
    }
    // Not valid TOML on its own (e.g. an unquoted string): treat as string.
    Ok(toml::Value::String(raw.to_string()))
}
