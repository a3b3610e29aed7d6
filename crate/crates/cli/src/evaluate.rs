//! Editing-fidelity table over before/after sample directories.
//!
//! Each directory holds `{name}_img.png` and `{name}_mask.png` per sample.
//! The edited mask for a sample is `{name}_target.png` in the after
//! directory or `{name}_mask.png` in a separate target directory. The
//! edited regions are the classes that gain pixels from the before mask to
//! the edited mask (or the after mask when no edited mask is given), so a
//! region painted over its neighbour counts as the edit and the neighbour
//! stays scored. Pixel difference is taken outside the dilated union of the
//! edited regions in every mask; mask consistency compares the edited mask
//! with the after mask and needs an edited mask.

use std::collections::BTreeMap;
use std::path::Path;

use lcnerf_core::inversion_editing::{mask_consistency, non_edit_region, pixel_difference};
use lcnerf_core::{io, Error, Result};
use ndarray::{Array2, Array3, Zip};
use serde::Serialize;

pub struct Sample {
    pub name: String,
    pub before_image: Array3<f32>,
    pub before_mask: Array2<u8>,
    pub after_image: Array3<f32>,
    pub after_mask: Array2<u8>,
    pub target: Option<Array2<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleScore {
    pub name: String,
    pub regions: Vec<usize>,
    pub pd: f64,
    pub mc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub region: String,
    pub samples: usize,
    pub pd: f64,
    pub mc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<Row>,
    pub average: Row,
    pub samples: Vec<SampleScore>,
}

fn sample_names(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        if let Some(stem) = entry.file_name().to_str().and_then(|f| f.strip_suffix("_img.png")) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    Ok(names)
}

/// Pair samples of `before` and `after` by name.
pub fn load_samples(before: &Path, after: &Path, targets: Option<&Path>) -> Result<Vec<Sample>> {
    let names = sample_names(before)?;
    if names.is_empty() {
        return Err(Error::Invalid(format!("{}: no `*_img.png` samples", before.display())));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let target_path = match targets {
            Some(t) => Some(t.join(format!("{name}_mask.png"))),
            None => Some(after.join(format!("{name}_target.png"))).filter(|p| p.is_file()),
        };
        out.push(Sample {
            before_image: io::read_rgb(&before.join(format!("{name}_img.png")))?,
            before_mask: io::read_mask(&before.join(format!("{name}_mask.png")))?,
            after_image: io::read_rgb(&after.join(format!("{name}_img.png")))?,
            after_mask: io::read_mask(&after.join(format!("{name}_mask.png")))?,
            target: target_path.map(|p| io::read_mask(&p)).transpose()?,
            name,
        });
    }
    Ok(out)
}

/// Classes that take over pixels from `before` to `after`, most gained first.
pub fn gained_regions(before: &Array2<u8>, after: &Array2<u8>, regions: usize) -> Vec<usize> {
    let mut gained = vec![0usize; regions];
    for (&a, &b) in before.iter().zip(after) {
        if a != b && (b as usize) < regions {
            gained[b as usize] += 1;
        }
    }
    let mut ids: Vec<usize> = (0..regions).filter(|&r| gained[r] > 0).collect();
    ids.sort_by_key(|&r| std::cmp::Reverse(gained[r]));
    ids
}

pub fn score(sample: &Sample, regions: usize, dilation: usize) -> Result<SampleScore> {
    let reference = sample.target.as_ref().unwrap_or(&sample.after_mask);
    let edited = gained_regions(&sample.before_mask, reference, regions);
    let mut keep = non_edit_region(&sample.before_mask, reference, &edited, dilation)?;
    let also = non_edit_region(&sample.before_mask, &sample.after_mask, &edited, dilation)?;
    Zip::from(&mut keep).and(&also).for_each(|k, &a| *k = *k && a);
    let pd = pixel_difference(&sample.before_image, &sample.after_image, &keep)
        .map_err(|e| Error::Invalid(format!("sample `{}`: {e}", sample.name)))?;
    let mc = sample
        .target
        .as_ref()
        .map(|t| mask_consistency(t, &sample.after_mask, regions))
        .transpose()?;
    Ok(SampleScore {
        name: sample.name.clone(),
        regions: edited,
        pd,
        mc,
    })
}

fn title(name: &str) -> String {
    let mut c = name.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn summarize(region: String, scores: &[&SampleScore]) -> Row {
    let n = scores.len().max(1) as f64;
    let mcs: Vec<f64> = scores.iter().filter_map(|s| s.mc).collect();
    Row {
        region,
        samples: scores.len(),
        pd: scores.iter().map(|s| s.pd).sum::<f64>() / n,
        mc: (!mcs.is_empty()).then(|| mcs.iter().sum::<f64>() / mcs.len() as f64),
    }
}

/// Score every sample and group rows by the most-changed foreground region.
pub fn evaluate(samples: &[Sample], names: &[String], dilation: usize) -> Result<Report> {
    let regions = names.len();
    let scores = samples.iter().map(|s| score(s, regions, dilation)).collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<Option<usize>, Vec<&SampleScore>> = BTreeMap::new();
    for s in &scores {
        let main = s.regions.iter().copied().find(|&r| r != 0).or(s.regions.first().copied());
        groups.entry(main).or_default().push(s);
    }
    let rows = groups
        .iter()
        .map(|(k, v)| {
            let label = match k {
                Some(i) => title(&names[*i]),
                None => "Unchanged".to_string(),
            };
            summarize(label, v)
        })
        .collect();
    let all: Vec<&SampleScore> = scores.iter().collect();
    Ok(Report {
        rows,
        average: summarize("Average".into(), &all),
        samples: scores,
    })
}

pub fn format_table(report: &Report) -> String {
    let mut out = format!("{:<12} {:>7} {:>10} {:>10}\n", "Region", "Samples", "PD", "MC");
    for r in report.rows.iter().chain(std::iter::once(&report.average)) {
        let mc = r.mc.map(|m| format!("{m:.4}")).unwrap_or_else(|| "n/a".into());
        out.push_str(&format!("{:<12} {:>7} {:>10.4} {:>10}\n", r.region, r.samples, r.pd, mc));
    }
    out
}
