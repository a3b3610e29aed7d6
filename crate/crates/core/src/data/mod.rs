//! Training data: segmented samples, the label schema, camera-pose priors,
//! the CelebAMask-HQ loader and the synthetic toy scenes.

mod celeba;
mod schema;
mod toy;

pub use celeba::{load_celeba, resize_area, resize_nearest, CelebaDataset};
pub use schema::{LabelSchema, CELEBA_REGIONS, CELEBA_SOURCE};
pub use toy::{class_shares, Ellipsoid, ToyDataset, ToyScene, TOY_REGIONS};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DataConfig, DatasetKind, RenderConfig};
use crate::error::{Error, Result};

/// One image with its label mask and, when known, its camera pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedSample {
    /// `H x W x 3` in `[0, 1]`.
    pub image: Array3<f32>,
    /// `H x W` class ids.
    pub labels: Array2<u8>,
    /// `(azimuth, elevation)` in radians.
    pub pose: Option<(f64, f64)>,
}

impl SegmentedSample {
    pub fn validate(&self, regions: usize) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 || self.labels.dim() != (h, w) {
            return Err(Error::shape(
                "sample",
                format!("image {h}x{w}x3 with matching labels"),
                format!("image {:?}, labels {:?}", self.image.dim(), self.labels.dim()),
            ));
        }
        if let Some(((row, col), &label)) = self.labels.indexed_iter().find(|(_, &l)| l as usize >= regions) {
            return Err(Error::LabelOutOfRange {
                label: label as u32,
                row,
                col,
                limit: regions,
            });
        }
        Ok(())
    }
}

/// Distribution of camera poses for generated images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PosePrior {
    /// Zero-mean Gaussian per angle, truncated at two standard deviations.
    Gaussian { azimuth_std: f64, elevation_std: f64 },
    /// Uniform in `[-azimuth, azimuth] x [-elevation, elevation]`.
    Uniform { azimuth: f64, elevation: f64 },
}

impl PosePrior {
    pub const CELEBA: PosePrior = PosePrior::Gaussian {
        azimuth_std: 0.3,
        elevation_std: 0.15,
    };

    pub fn for_data(config: &DataConfig) -> Self {
        match config.kind {
            DatasetKind::Celeba => Self::CELEBA,
            DatasetKind::Toy => PosePrior::Uniform {
                azimuth: config.toy.azimuth_range,
                elevation: config.toy.elevation_range,
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match *self {
            PosePrior::Gaussian {
                azimuth_std,
                elevation_std,
            } => (truncated_normal(rng, azimuth_std), truncated_normal(rng, elevation_std)),
            PosePrior::Uniform { azimuth, elevation } => {
                let a = if azimuth > 0.0 { rng.gen_range(-azimuth..=azimuth) } else { 0.0 };
                let e = if elevation > 0.0 { rng.gen_range(-elevation..=elevation) } else { 0.0 };
                (a, e)
            }
        }
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, std).expect("positive std");
    loop {
        let x = n.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Random-access training data.
pub trait Dataset {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<SegmentedSample>;
    fn regions(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for ToyDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<SegmentedSample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("sample {index} out of range ({} samples)", self.samples.len())))
    }

    fn regions(&self) -> usize {
        self.scene.regions()
    }
}

/// Display names of the `regions` merged classes produced by `config`.
pub fn region_names(config: &DataConfig, regions: usize) -> Vec<String> {
    let known: Vec<String> = match config.kind {
        DatasetKind::Toy => TOY_REGIONS.iter().map(|s| s.to_string()).collect(),
        DatasetKind::Celeba => match &config.label_map {
            Some(map) => LabelSchema::custom(map.clone()).map(|s| s.names().to_vec()).unwrap_or_default(),
            None => LabelSchema::celeba().names().to_vec(),
        },
    };
    (0..regions)
        .map(|i| known.get(i).cloned().unwrap_or_else(|| format!("region{i}")))
        .collect()
}

/// Open the dataset described by `config` at the render resolution.
pub fn open_dataset(config: &DataConfig, render: &RenderConfig) -> Result<Box<dyn Dataset>> {
    match config.kind {
        DatasetKind::Toy => {
            let ds = match &config.root {
                Some(root) => ToyDataset::load_or_generate(root, &config.toy, render)?,
                None => ToyDataset::generate(&config.toy, render)?,
            };
            Ok(Box::new(ds))
        }
        DatasetKind::Celeba => {
            let root = config
                .root
                .clone()
                .ok_or_else(|| Error::Config("data.root is required for celeba".into()))?;
            let schema = match &config.label_map {
                Some(map) => LabelSchema::custom(map.clone())?,
                None => LabelSchema::celeba(),
            };
            Ok(Box::new(CelebaDataset::new(root, config.count, render.resolution, schema)?))
        }
    }
}
