use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::{Dataset, LabelSchema, SegmentedSample};
use crate::error::{Error, Result};
use crate::io;

/// Area-weighted resampling: every output pixel averages the input pixels it
/// covers, weighted by overlap.
pub fn resize_area(image: &Array3<f32>, height: usize, width: usize) -> Array3<f32> {
    let (h, w, c) = image.dim();
    if (h, w) == (height, width) {
        return image.clone();
    }
    let rows = overlap_weights(h, height);
    let cols = overlap_weights(w, width);
    let mut out = Array3::zeros((height, width, c));
    for (i, rw) in rows.iter().enumerate() {
        for (j, cw) in cols.iter().enumerate() {
            let mut total = 0.0f64;
            let mut acc = vec![0.0f64; c];
            for &(si, wi) in rw {
                for &(sj, wj) in cw {
                    let wt = wi * wj;
                    total += wt;
                    for k in 0..c {
                        acc[k] += wt * image[[si, sj, k]] as f64;
                    }
                }
            }
            for k in 0..c {
                out[[i, j, k]] = (acc[k] / total) as f32;
            }
        }
    }
    out
}

/// For each output cell, the source cells it overlaps and the overlap length.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut cells = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let a = lo.max(s as f64);
                let b = hi.min((s + 1) as f64);
                if b > a {
                    cells.push((s, b - a));
                }
                s += 1;
            }
            cells
        })
        .collect()
}

/// Nearest-neighbor resampling of a label map (pixel centers).
pub fn resize_nearest(labels: &Array2<u8>, height: usize, width: usize) -> Array2<u8> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((height, width), |(i, j)| {
        let si = (((i as f64 + 0.5) * h as f64 / height as f64) as usize).min(h - 1);
        let sj = (((j as f64 + 0.5) * w as f64 / width as f64) as usize).min(w - 1);
        labels[[si, sj]]
    })
}

/// Load `images/{index}.jpg` and `masks/{index}.png` under `root`, resized
/// to `resolution` and merged with `schema`. Real images carry no pose.
pub fn load_celeba(root: &Path, index: usize, resolution: usize, schema: &LabelSchema) -> Result<SegmentedSample> {
    let img_path = root.join("images").join(format!("{index}.jpg"));
    let mask_path = root.join("masks").join(format!("{index}.png"));
    for p in [&img_path, &mask_path] {
        if !p.is_file() {
            return Err(Error::io(
                p.as_path(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            ));
        }
    }
    let image = resize_area(&io::read_rgb(&img_path)?, resolution, resolution);
    let raw = io::read_mask(&mask_path)?;
    let labels = schema.merge(&resize_nearest(&raw, resolution, resolution)).map_err(|e| match e {
        Error::LabelOutOfRange { label, row, col, limit } => Error::Image {
            path: mask_path.clone(),
            message: format!("label {label} at (row {row}, col {col}) is not below {limit}"),
        },
        other => other,
    })?;
    Ok(SegmentedSample {
        image,
        labels,
        pose: None,
    })
}

/// Lazily loaded CelebAMask-HQ directory.
pub struct CelebaDataset {
    root: PathBuf,
    count: usize,
    resolution: usize,
    schema: LabelSchema,
}

impl CelebaDataset {
    pub fn new(root: PathBuf, count: usize, resolution: usize, schema: LabelSchema) -> Result<Self> {
        for sub in ["images", "masks"] {
            let dir = root.join(sub);
            if !dir.is_dir() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
                ));
            }
        }
        Ok(Self {
            root,
            count,
            resolution,
            schema,
        })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }
}

impl Dataset for CelebaDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<SegmentedSample> {
        load_celeba(&self.root, index, self.resolution, &self.schema)
    }

    fn regions(&self) -> usize {
        self.schema.regions()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(root: &Path, index: usize, size: usize) {
        let img = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
            image::Rgb([(x * 9 % 256) as u8, (y * 5 % 256) as u8, 128])
        });
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        img.save(root.join("images").join(format!("{index}.jpg"))).unwrap();
        let mask = Array2::from_shape_fn((size, size), |(i, j)| ((i / 4 + j / 4) % 19) as u8);
        io::write_mask(&root.join("masks").join(format!("{index}.png")), &mask).unwrap();
    }

    #[test]
    fn loads_resizes_and_merges() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 3, 40);
        let s = load_celeba(dir.path(), 3, 16, &LabelSchema::celeba()).unwrap();
        assert_eq!(s.image.dim(), (16, 16, 3));
        assert!(s.labels.iter().all(|&l| l < 13));
        assert!(s.pose.is_none());
        let again = load_celeba(dir.path(), 3, 16, &LabelSchema::celeba()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 0, 8);
        let err = load_celeba(dir.path(), 1, 8, &LabelSchema::celeba()).unwrap_err();
        assert!(err.to_string().contains("1.jpg"), "{err}");
    }

    #[test]
    fn area_resize_averages_blocks() {
        let img = Array3::from_shape_fn((4, 4, 1), |(i, j, _)| (i * 4 + j) as f32);
        let out = resize_area(&img, 2, 2);
        assert_eq!(out[[0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let up = resize_area(&img, 3, 3);
        let mean_in = img.mean().unwrap();
        let mean_out = up.mean().unwrap();
        assert!((mean_in - mean_out).abs() < 1e-4);
    }

    #[test]
    fn nearest_resize_keeps_label_set() {
        let l = Array2::from_shape_fn((5, 5), |(i, j)| ((i + j) % 3) as u8);
        let r = resize_nearest(&l, 12, 7);
        assert!(r.iter().all(|v| *v < 3));
        assert_eq!(resize_nearest(&l, 5, 5), l);
    }
}
