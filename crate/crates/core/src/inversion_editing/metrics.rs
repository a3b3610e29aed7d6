//! Editing-fidelity metrics: pixel difference over the non-edit region,
//! mask consistency and per-class IoU.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn check_labels(m: &Array2<u8>, regions: usize) -> Result<()> {
    if let Some(((row, col), &label)) = m.indexed_iter().find(|(_, &l)| l as usize >= regions) {
        return Err(Error::LabelOutOfRange {
            label: label as u32,
            row,
            col,
            limit: regions,
        });
    }
    Ok(())
}

/// Mean of `|a - b|` over pixels where `region` is set, channels averaged.
pub fn pixel_difference(a: &Array3<f32>, b: &Array3<f32>, region: &Array2<bool>) -> Result<f64> {
    let (h, w, c) = a.dim();
    if b.dim() != a.dim() {
        return Err(Error::shape("edited image", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    if region.dim() != (h, w) {
        return Err(Error::shape("non-edit region", format!("{h}x{w}"), format!("{:?}", region.dim())));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ((i, j), &keep) in region.indexed_iter() {
        if keep {
            for k in 0..c {
                sum += (a[[i, j, k]] as f64 - b[[i, j, k]] as f64).abs();
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("non-edit region is empty".into()));
    }
    Ok(sum / (count * c) as f64)
}

/// Fraction of pixels whose class ids differ.
pub fn mask_consistency(target: &Array2<u8>, parsed: &Array2<u8>, regions: usize) -> Result<f64> {
    if target.dim() != parsed.dim() {
        return Err(Error::shape("parsed mask", format!("{:?}", target.dim()), format!("{:?}", parsed.dim())));
    }
    check_labels(target, regions)?;
    check_labels(parsed, regions)?;
    let differ = target.iter().zip(parsed).filter(|(a, b)| a != b).count();
    Ok(differ as f64 / target.len().max(1) as f64)
}

/// IoU per class; `None` where the class is absent from both masks.
pub fn class_iou(a: &Array2<u8>, b: &Array2<u8>, regions: usize) -> Result<Vec<Option<f64>>> {
    if a.dim() != b.dim() {
        return Err(Error::shape("mask", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    check_labels(a, regions)?;
    check_labels(b, regions)?;
    let mut inter = vec![0usize; regions];
    let mut union = vec![0usize; regions];
    for (&x, &y) in a.iter().zip(b) {
        if x == y {
            inter[x as usize] += 1;
            union[x as usize] += 1;
        } else {
            union[x as usize] += 1;
            union[y as usize] += 1;
        }
    }
    Ok(inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect())
}

/// Mean IoU over classes present in either mask.
pub fn mean_iou(a: &Array2<u8>, b: &Array2<u8>, regions: usize) -> Result<f64> {
    let per = class_iou(a, b, regions)?;
    let present: Vec<f64> = per.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len().max(1) as f64)
}

/// Disk dilation of a binary mask by `radius` pixels.
pub fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = radius as isize;
    let mut out = mask.clone();
    for ((i, j), &set) in mask.indexed_iter() {
        if !set {
            continue;
        }
        for di in -r..=r {
            for dj in -r..=r {
                if di * di + dj * dj > r * r {
                    continue;
                }
                let (y, x) = (i as isize + di, j as isize + dj);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    out[[y as usize, x as usize]] = true;
                }
            }
        }
    }
    out
}

/// Pixels outside the dilated union of `regions` in either mask.
pub fn non_edit_region(before: &Array2<u8>, after: &Array2<u8>, regions: &[usize], dilation: usize) -> Result<Array2<bool>> {
    if before.dim() != after.dim() {
        return Err(Error::shape("mask", format!("{:?}", before.dim()), format!("{:?}", after.dim())));
    }
    let edited = Array2::from_shape_fn(before.dim(), |ij| {
        regions.contains(&(before[ij] as usize)) || regions.contains(&(after[ij] as usize))
    });
    Ok(dilate(&edited, dilation).mapv(|e| !e))
}

/// Classes whose pixel sets differ between two masks, largest change first.
pub fn changed_regions(before: &Array2<u8>, after: &Array2<u8>, regions: usize) -> Vec<usize> {
    let mut changed = vec![0usize; regions];
    for (&a, &b) in before.iter().zip(after) {
        if a != b {
            if (a as usize) < regions {
                changed[a as usize] += 1;
            }
            if (b as usize) < regions {
                changed[b as usize] += 1;
            }
        }
    }
    let mut ids: Vec<usize> = (0..regions).filter(|&k| changed[k] > 0).collect();
    ids.sort_by(|&x, &y| changed[y].cmp(&changed[x]).then(x.cmp(&y)));
    ids
}
