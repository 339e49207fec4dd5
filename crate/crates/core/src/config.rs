//! Run configuration: one TOML document, defaulted field by field, with
//! `section.key=value` overrides applied before parsing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::dataio::{ProfileShape, SnrProfile, SyntheticSpec};
use crate::error::{Error, Result};
use crate::features::Modality;
use crate::fusion::{FusionDims, FusionStrategy};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::optim::TrainConfig;
use crate::probe::LossKind;
use crate::schedule::{NoiseMode, NoiseSchedule};
use crate::search::SearchSpace;

pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mode: NoiseMode::Deterministic,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub init_seed: u64,
    pub image_seq_len: usize,
    pub patch_dim: usize,
    pub text_seq_len: usize,
    pub vocab_size: usize,
    pub eos_id: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 64,
            heads: 4,
            init_seed: 0,
            image_seq_len: 8,
            patch_dim: 16,
            text_seq_len: 8,
            vocab_size: 32,
            eos_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub image: SearchSpace,
    pub text: SearchSpace,
    /// Depth the block lists are written for; blocks are mapped
    /// proportionally onto a shallower backbone.
    pub reference_depth: usize,
    pub radius: usize,
    pub exhaustive_budget: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let blocks = vec![8, 12, 16, 20, 24];
        Self {
            image: SearchSpace {
                timesteps: vec![10, 20, 30, 50, 100, 150],
                blocks: blocks.clone(),
            },
            text: SearchSpace {
                timesteps: vec![0, 10, 20, 30],
                blocks,
            },
            reference_depth: 24,
            radius: 1,
            exhaustive_budget: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub d_alg: usize,
    pub d_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::LinearAddition,
            d_alg: 32,
            d_k: 32,
        }
    }
}

/// Dataset files; all unset means the synthetic benchmark.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub classes: usize,
    pub label_density: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_frequencies: Option<Vec<f64>>,
    pub seed: u64,
    pub image_profile: ProfileShape,
    pub text_profile: ProfileShape,
    pub image_signal: f64,
    pub image_class_strength: Vec<f64>,
    pub text_class_strength: Vec<f64>,
    pub word_repeats: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 480,
            n_val: 320,
            classes: 6,
            label_density: 1.6,
            class_frequencies: None,
            seed: 0,
            image_profile: ProfileShape::Peaked {
                peak: [2, 1],
                spread: 0.9,
                floor: 0.05,
            },
            text_profile: ProfileShape::Monotone {
                t_scale: 1.2,
                b_scale: 1.5,
                floor: 0.05,
            },
            image_signal: 0.5,
            image_class_strength: vec![1.0, 1.0, 1.0, 0.35, 0.35, 0.35],
            text_class_strength: vec![0.35, 0.35, 0.35, 1.0, 1.0, 1.0],
            word_repeats: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub loss: LossKind,
    pub threshold: f64,
    pub schedule: ScheduleConfig,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            loss: LossKind::BceMultilabel,
            threshold: DEFAULT_THRESHOLD,
            schedule: ScheduleConfig::default(),
            noise: NoiseConfig::default(),
            model: ModelConfig::default(),
            search: SearchConfig::default(),
            train: TrainConfig {
                lr0: 1e-2,
                ..TrainConfig::default()
            },
            fusion: FusionConfig::default(),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Proportional mapping of a block index written for `reference` blocks
/// onto a backbone with `depth` blocks; identity when `depth >= reference`.
pub fn rescale_block(b: usize, reference: usize, depth: usize) -> usize {
    if depth >= reference || reference == 0 {
        return b;
    }
    (((b * depth) as f64 / reference as f64).round() as usize).clamp(1, depth)
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Bare words that are not valid TOML values are taken as strings.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Recursively overlays `top` on `base`; non-table values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value` to a TOML table, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} is malformed")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses a TOML document with overrides, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut doc = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut doc, user);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_SNAPSHOT);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.build_schedule().map_err(cfg)?;
        self.backbone_config(Modality::Image).validate().map_err(cfg)?;
        self.backbone_config(Modality::Text).validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        let (img, txt) = self.spaces().map_err(cfg)?;
        img.validate(self.model.depth, self.schedule.steps).map_err(cfg)?;
        txt.validate(self.model.depth, self.schedule.steps).map_err(cfg)?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.fusion.d_alg == 0 || self.fusion.d_k == 0 {
            return Err(Error::Config("fusion dimensions must be >= 1".into()));
        }
        let files = [&self.data.train, &self.data.val, &self.data.catalog];
        let set = files.iter().filter(|f| f.is_some()).count();
        if set != 0 && set != 3 {
            return Err(Error::Config("data.train, data.val and data.catalog must be given together".into()));
        }
        if set == 0 {
            self.synthetic_spec().map_err(cfg)?.validate().map_err(cfg)?;
        }
        Ok(())
    }

    pub fn uses_synthetic(&self) -> bool {
        self.data.train.is_none()
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_min, self.schedule.beta_max)
    }

    pub fn backbone_config(&self, modality: Modality) -> BackboneConfig {
        let m = &self.model;
        match modality {
            Modality::Image => BackboneConfig::image(m.depth, m.width, m.heads, m.image_seq_len, m.patch_dim, m.init_seed),
            _ => BackboneConfig::text(m.depth, m.width, m.heads, m.text_seq_len, m.vocab_size, m.init_seed),
        }
    }

    fn rescaled(&self, space: &SearchSpace) -> Result<SearchSpace> {
        let blocks: Vec<usize> = space
            .blocks
            .iter()
            .map(|&b| rescale_block(b, self.search.reference_depth, self.model.depth))
            .collect();
        SearchSpace::new(space.timesteps.clone(), blocks).map_err(|e| {
            Error::Config(format!(
                "blocks {:?} do not stay distinct on a depth-{} backbone: {e}",
                space.blocks, self.model.depth
            ))
        })
    }

    /// Image and text search spaces in backbone block units.
    pub fn spaces(&self) -> Result<(SearchSpace, SearchSpace)> {
        Ok((self.rescaled(&self.search.image)?, self.rescaled(&self.search.text)?))
    }

    pub fn fusion_dims(&self) -> FusionDims {
        FusionDims {
            d_alg: self.fusion.d_alg,
            d_k: self.fusion.d_k,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone()
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let (img, txt) = self.spaces()?;
        let s = &self.synthetic;
        Ok(SyntheticSpec {
            n_train: s.n_train,
            n_val: s.n_val,
            classes: s.classes,
            label_density: s.label_density,
            class_frequencies: s.class_frequencies.clone(),
            seed: s.seed,
            image_profile: SnrProfile::from_shape(img.timesteps, img.blocks, &s.image_profile)?,
            text_profile: SnrProfile::from_shape(txt.timesteps, txt.blocks, &s.text_profile)?,
            image_seq_len: self.model.image_seq_len,
            patch_dim: self.model.patch_dim,
            image_signal: s.image_signal,
            image_class_strength: s.image_class_strength.clone(),
            text_seq_len: self.model.text_seq_len,
            vocab_size: self.model.vocab_size,
            word_repeats: s.word_repeats,
            text_class_strength: s.text_class_strength.clone(),
        })
    }
}
