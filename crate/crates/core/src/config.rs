//! Configuration types and the sectioned TOML config file.
//!
//! Every field has a default, so an empty file describes the synthetic toy
//! setup. Overrides use dotted keys (`optim.lr_g=1e-4`) and are applied on
//! top of the file before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of semantic regions K (region 0 is background).
    pub regions: usize,
    pub noise_dim: usize,
    pub style_dim: usize,
    /// Width of the sine-activated hidden layers.
    pub hidden_dim: usize,
    pub geo_feature_dim: usize,
    pub tex_feature_dim: usize,
    /// Frequency of the first geometry layer; later layers use 1.
    pub first_omega: f64,
    pub beta_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            regions: 3,
            noise_dim: 256,
            style_dim: 128,
            hidden_dim: 64,
            geo_feature_dim: 64,
            tex_feature_dim: 64,
            first_omega: 30.0,
            beta_init: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.regions", self.regions),
            ("model.noise_dim", self.noise_dim),
            ("model.style_dim", self.style_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.geo_feature_dim", self.geo_feature_dim),
            ("model.tex_feature_dim", self.tex_feature_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.regions < 2 {
            return Err(Error::Config("model.regions must be at least 2".into()));
        }
        if !(self.beta_init > 0.0) || !(self.first_omega > 0.0) {
            return Err(Error::Config(
                "model.beta_init and model.first_omega must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Camera intrinsics shared by every view of a dataset, and ray bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub resolution: usize,
    pub samples: usize,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
    /// Vertical field of view, radians.
    pub fov: f64,
}

impl Default for RenderConfig {
    /// Face-scale defaults: camera on the unit sphere, rays from 0.88 to 1.12.
    fn default() -> Self {
        Self {
            resolution: 64,
            samples: 18,
            radius: 1.0,
            near: 0.88,
            far: 1.12,
            fov: 12f64.to_radians(),
        }
    }
}

impl RenderConfig {
    /// Camera setup matched to the synthetic toy scenes (objects inside a
    /// sphere of radius ~0.6 around the origin).
    pub fn toy() -> Self {
        Self {
            resolution: 32,
            samples: 18,
            radius: 2.0,
            near: 1.3,
            far: 2.7,
            fov: 36f64.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.samples == 0 {
            return Err(Error::Config(
                "render.resolution and render.samples must be positive".into(),
            ));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(Error::Config("render.near must be in [0, render.far)".into()));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::Config("render.fov must be in (0, pi)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_g: f64,
    pub lr_di: f64,
    pub lr_dim: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_g: 2e-5,
            lr_di: 2e-4,
            lr_dim: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, lr) in [("optim.lr_g", self.lr_g), ("optim.lr_di", self.lr_di), ("optim.lr_dim", self.lr_dim)] {
            if !(lr >= 0.0) {
                return Err(Error::Config(format!("{key} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optim.beta1/beta2 must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Weights of the discriminator and generator objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_i_reg: f64,
    pub lambda_pose: f64,
    pub lambda_im: f64,
    pub lambda_im_reg: f64,
    pub lambda_eik: f64,
    pub lambda_sur: f64,
    /// Ray samples drawn per image for the eikonal term; the same number of
    /// uniform points in the scene box is added.
    pub eikonal_points: usize,
    /// Half-width of the cubic scene box.
    pub scene_box: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_i_reg: 10.0,
            lambda_pose: 15.0,
            lambda_im: 0.5,
            lambda_im_reg: 10.0,
            lambda_eik: 0.1,
            lambda_sur: 0.05,
            eikonal_points: 256,
            scene_box: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_i_reg,
            self.lambda_pose,
            self.lambda_im,
            self.lambda_im_reg,
            self.lambda_eik,
            self.lambda_sur,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Regression of the generator SDF onto a sphere before adversarial
/// training, so early renders are a solid object instead of fog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub radius: f64,
    pub lr: f64,
    /// Points per step, half uniform in the scene box and half near the sphere.
    pub points: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            radius: 0.5,
            lr: 1e-4,
            points: 512,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && (!(self.radius > 0.0) || !(self.lr > 0.0) || self.points == 0) {
            return Err(Error::Config("pretrain.radius, pretrain.lr and pretrain.points must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Toy,
    Celeba,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    /// Region count including background, in [2, 5].
    pub regions: usize,
    pub views: usize,
    /// Poses are uniform in [-azimuth_range, azimuth_range] x [-elevation_range, elevation_range].
    pub azimuth_range: f64,
    pub elevation_range: f64,
    /// Minimum share of frontal-view pixels each class must cover.
    pub min_class_share: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regions: 3,
            views: 64,
            azimuth_range: 0.5,
            elevation_range: 0.25,
            min_class_share: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// CelebAMask-HQ root (`images/`, `masks/`), or a cache directory for toy renders.
    pub root: Option<PathBuf>,
    /// Number of CelebA samples to index (`0..count`).
    pub count: usize,
    /// Source-id to merged-id table replacing the default 19-to-13 merge.
    pub label_map: Option<Vec<u8>>,
    pub toy: ToyConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Toy,
            root: None,
            count: 30_000,
            label_map: None,
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    pub deterministic: bool,
    pub device: String,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 2,
            checkpoint_every: 0,
            deterministic: true,
            device: "cpu".into(),
            model: ModelConfig::default(),
            render: RenderConfig::toy(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "device `{}` is not available; only `cpu` is supported",
                self.device
            )));
        }
        self.model.validate()?;
        self.render.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.pretrain.validate()?;
        match self.data.kind {
            DatasetKind::Toy => {
                let k = self.data.toy.regions;
                if !(2..=5).contains(&k) {
                    return Err(Error::Config("data.toy.regions must be in [2, 5]".into()));
                }
                if k != self.model.regions {
                    return Err(Error::Config(format!(
                        "model.regions ({}) must equal data.toy.regions ({k})",
                        self.model.regions
                    )));
                }
            }
            DatasetKind::Celeba => {
                if self.data.root.is_none() {
                    return Err(Error::Config("data.root is required for celeba".into()));
                }
            }
        }
        Ok(())
    }

    /// Parse a config from TOML text plus dotted `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let config: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply `a.b.c=value` to a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = parse_literal(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_toy_setup_with_paper_defaults() {
        let c = TrainConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c.data.kind, DatasetKind::Toy);
        assert_eq!(c.render.samples, 18);
        assert_eq!((c.optim.lr_g, c.optim.lr_di, c.optim.lr_dim), (2e-5, 2e-4, 2e-4));
        assert_eq!((c.optim.beta1, c.optim.beta2), (0.0, 0.9));
        let w = &c.loss;
        assert_eq!(
            (w.lambda_i_reg, w.lambda_pose, w.lambda_im, w.lambda_im_reg, w.lambda_eik, w.lambda_sur),
            (10.0, 15.0, 0.5, 10.0, 0.1, 0.05)
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let c = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn overrides_apply_after_file() {
        let c = TrainConfig::from_toml_str(
            "steps = 5\n[optim]\nlr_g = 0.1\n",
            &["optim.lr_g=0.25".into(), "data.kind=toy".into(), "steps=7".into()],
        )
        .unwrap();
        assert_eq!(c.optim.lr_g, 0.25);
        assert_eq!(c.steps, 7);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml_str("", &["optim.lr_x=1".into()]).unwrap_err();
        assert!(err.to_string().contains("lr_x"), "{err}");
        let err = TrainConfig::from_toml_str("bogus = 1", &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn toy_region_count_must_match_model() {
        let err = TrainConfig::from_toml_str("[model]\nregions = 4\n", &[]).unwrap_err();
        assert!(err.to_string().contains("data.toy.regions"));
    }
}
