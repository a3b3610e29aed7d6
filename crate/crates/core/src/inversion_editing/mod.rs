//! Inversion of a given view into the latent space, mask-driven geometry
//! editing, latent swaps between banks and the editing metrics.
//!
//! A session holds the generator parameters (possibly fine-tuned by
//! inversion), the bank it started from and the current bank. Every change
//! to the bank is recorded so the current state can be replayed from the
//! start.

mod latent_file;
pub mod metrics;

pub use latent_file::{decode_bank, encode_bank, read_bank, write_bank};
pub use metrics::{changed_regions, class_iou, dilate, mask_consistency, mean_iou, non_edit_region, pixel_difference};

use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use lcnerf_autograd::{grad, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RenderConfig;
use crate::error::{Error, Result};
use crate::field_generators::{mean_latents, sample_noise, LatentBank, LatentVars};
use crate::fusion::RadianceField;
use crate::optim::Adam;
use crate::params::{Binding, Grads, ParamStore};
use crate::volume_renderer::{render, render_view, Camera, RenderResult};

/// Which half of a bank an operation touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Geometry,
    Texture,
    Both,
}

impl FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometry" => Ok(Which::Geometry),
            "texture" => Ok(Which::Texture),
            "both" => Ok(Which::Both),
            other => Err(Error::Invalid(format!("`{other}` is not geometry, texture or both"))),
        }
    }
}

/// One recorded change to a session bank.
#[derive(Clone, Debug, PartialEq)]
pub enum HistoryEntry {
    /// `delta` (`K x L_w`) added to the geometry styles; rows outside
    /// `region_ids` are zero.
    Edit { region_ids: Vec<usize>, delta: Array2<f32> },
    /// Rows of `region_ids` copied from `donor`.
    Swap {
        region_ids: Vec<usize>,
        which: Which,
        donor: LatentBank<f32>,
    },
}

fn check_regions(ids: &[usize], regions: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Invalid("no region ids given".into()));
    }
    for &id in ids {
        if id >= regions {
            return Err(Error::UnknownRegion { id, regions });
        }
    }
    Ok(())
}

/// Replace the rows of `region_ids` with the donor's; all other rows are
/// copied unchanged.
pub fn swap_region_latents(
    bank: &LatentBank<f32>,
    donor: &LatentBank<f32>,
    region_ids: &[usize],
    which: Which,
) -> Result<LatentBank<f32>> {
    if donor.w_g.dim() != bank.w_g.dim() {
        return Err(Error::shape(
            "donor bank",
            format!("{:?}", bank.w_g.dim()),
            format!("{:?}", donor.w_g.dim()),
        ));
    }
    check_regions(region_ids, bank.regions())?;
    let mut out = bank.clone();
    for &i in region_ids {
        if which != Which::Texture {
            out.w_g.row_mut(i).assign(&donor.w_g.row(i));
        }
        if which != Which::Geometry {
            out.w_t.row_mut(i).assign(&donor.w_t.row(i));
        }
    }
    Ok(out)
}

/// All region ids of a `K`-region bank, for global transfers.
pub fn all_regions(regions: usize) -> Vec<usize> {
    (0..regions).collect()
}

/// `w_g + delta`, element by element.
pub fn apply_delta(bank: &LatentBank<f32>, delta: &Array2<f32>) -> Result<LatentBank<f32>> {
    if delta.dim() != bank.w_g.dim() {
        return Err(Error::shape("editing vector", format!("{:?}", bank.w_g.dim()), format!("{:?}", delta.dim())));
    }
    LatentBank::new(&bank.w_g + delta, bank.w_t.clone())
}

pub fn apply_entry(bank: &LatentBank<f32>, entry: &HistoryEntry) -> Result<LatentBank<f32>> {
    match entry {
        HistoryEntry::Edit { delta, .. } => apply_delta(bank, delta),
        HistoryEntry::Swap {
            region_ids,
            which,
            donor,
        } => swap_region_latents(bank, donor, region_ids, *which),
    }
}

#[derive(Serialize, Deserialize)]
struct HistoryLine {
    region_ids: Vec<usize>,
    which: Which,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_ref: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    donor_ref: Option<String>,
}

/// Generator state plus the evolving latent bank of one subject.
#[derive(Clone, Debug)]
pub struct EditSession {
    pub field: RadianceField,
    pub params: ParamStore<f32>,
    pub base: LatentBank<f32>,
    pub bank: LatentBank<f32>,
    pub camera: Camera,
    pub render: RenderConfig,
    pub history: Vec<HistoryEntry>,
}

/// Iteration report from inversion or editing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress<'a> {
    pub phase: &'static str,
    pub iteration: usize,
    pub loss: f64,
    /// Current editing vector (editing only).
    pub delta: Option<&'a Array2<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertOptions {
    /// Phase 1: steps and learning rate on all style rows.
    pub latent_steps: usize,
    pub latent_lr: f64,
    /// Phase 2: steps and learning rate on the generator weights.
    pub tune_steps: usize,
    pub tune_lr: f64,
    pub pixel_weight: f64,
    pub mask_weight: f64,
    /// Noise draws averaged for the starting bank.
    pub mean_samples: usize,
    pub seed: u64,
}

impl Default for InvertOptions {
    fn default() -> Self {
        Self {
            latent_steps: 200,
            latent_lr: 1e-2,
            tune_steps: 100,
            tune_lr: 3e-4,
            pixel_weight: 1.0,
            mask_weight: 0.5,
            mean_samples: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditOptions {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub session: EditSession,
    pub latent_losses: Vec<f64>,
    pub tune_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutcome {
    /// `K x L_w`; zero outside the edited rows.
    pub delta: Array2<f32>,
    /// Loss at every iteration, before that iteration's update.
    pub losses: Vec<f64>,
    /// Iteration whose editing vector is returned (lowest loss).
    pub best_iteration: usize,
}

impl EditOutcome {
    pub fn final_loss(&self) -> f64 {
        self.losses[self.best_iteration]
    }
}

impl PartialEq for EditSession {
    fn eq(&self, other: &Self) -> bool {
        self.field.config() == other.field.config()
            && self.params == other.params
            && self.base == other.base
            && self.bank == other.bank
            && self.camera == other.camera
            && self.render == other.render
            && self.history == other.history
    }
}

fn flat_image(image: &Array3<f32>) -> ArrayD<f32> {
    let (h, w, c) = image.dim();
    image.as_standard_layout().to_owned().into_shape_with_order(IxDyn(&[h * w, c])).expect("pixels")
}

/// `[P, K]` one-hot targets.
fn flat_one_hot(labels: &Array2<u8>, regions: usize) -> Result<ArrayD<f32>> {
    let mut out = ArrayD::zeros(IxDyn(&[labels.len(), regions]));
    for (p, ((row, col), &l)) in labels.indexed_iter().enumerate() {
        if l as usize >= regions {
            return Err(Error::LabelOutOfRange {
                label: l as u32,
                row,
                col,
                limit: regions,
            });
        }
        out[[p, l as usize]] = 1.0;
    }
    Ok(out)
}

fn finite(phase: &'static str, step: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::LossNotFinite {
            term: phase,
            value: v,
            step: step as u64,
        })
    }
}

fn grads_of(loss: &Var<f32>, named: &[(String, Var<f32>)]) -> Grads<f32> {
    let refs: Vec<&Var<f32>> = named.iter().map(|(_, v)| v).collect();
    named
        .iter()
        .zip(grad(loss, &refs, false))
        .map(|((n, _), g)| (n.clone(), g.value().clone()))
        .collect()
}

impl EditSession {
    pub fn new(
        field: RadianceField,
        params: ParamStore<f32>,
        bank: LatentBank<f32>,
        camera: Camera,
        render: RenderConfig,
    ) -> Result<Self> {
        bank.check_matches(field.config())?;
        camera.validate()?;
        Ok(Self {
            field,
            params,
            base: bank.clone(),
            bank,
            camera,
            render,
            history: Vec::new(),
        })
    }

    /// Session on the bank mapped from noise drawn with `seed`.
    pub fn from_seed(field: RadianceField, params: ParamStore<f32>, seed: u64, camera: Camera, render: RenderConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z_g, z_t) = sample_noise::<f32, _>(&mut rng, field.config());
        let bank = field.map_latents(&params, &z_g, &z_t)?;
        Self::new(field, params, bank, camera, render)
    }

    pub fn regions(&self) -> usize {
        self.field.regions()
    }

    pub fn render_at(&self, camera: &Camera) -> Result<RenderResult<f32>> {
        render_view(&self.field, &self.params, &self.bank, camera, &self.render)
    }

    pub fn render_bank(&self, bank: &LatentBank<f32>, camera: &Camera) -> Result<RenderResult<f32>> {
        render_view(&self.field, &self.params, bank, camera, &self.render)
    }

    pub fn render_current(&self) -> Result<RenderResult<f32>> {
        self.render_at(&self.camera)
    }

    pub fn apply(&mut self, entry: HistoryEntry) -> Result<()> {
        self.bank = apply_entry(&self.bank, &entry)?;
        self.history.push(entry);
        Ok(())
    }

    /// The bank obtained by applying the history to the starting bank.
    pub fn replay(&self) -> Result<LatentBank<f32>> {
        self.history.iter().try_fold(self.base.clone(), |b, e| apply_entry(&b, e))
    }

    pub fn swap(&mut self, region_ids: &[usize], donor: &LatentBank<f32>, which: Which) -> Result<()> {
        let bank = swap_region_latents(&self.bank, donor, region_ids, which)?;
        self.history.push(HistoryEntry::Swap {
            region_ids: region_ids.to_vec(),
            which,
            donor: donor.clone(),
        });
        self.bank = bank;
        Ok(())
    }

    /// Optimize an editing vector on the geometry rows of `region_ids` so
    /// the rendered mask at the session camera matches `target`.
    pub fn optimize_edit(
        &self,
        target: &Array2<u8>,
        region_ids: &[usize],
        options: &EditOptions,
        mut progress: impl FnMut(&Progress),
    ) -> Result<EditOutcome> {
        let k = self.regions();
        check_regions(region_ids, k)?;
        let (h, w) = (self.camera.height, self.camera.width);
        if target.dim() != (h, w) {
            return Err(Error::shape("target mask", format!("{h}x{w}"), format!("{:?}", target.dim())));
        }
        if options.iterations == 0 {
            return Err(Error::Invalid("iteration budget must be at least 1".into()));
        }
        let mut ids = region_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let onehot = Var::constant(flat_one_hot(target, k)?);
        let l = self.bank.style_dim();
        let base_g = Var::constant(self.bank.w_g.clone().into_dyn());
        let w_t = Var::constant(self.bank.w_t.clone().into_dyn());
        let b = Binding::frozen(&self.params);

        let mut rows = ParamStore::<f32>::new();
        rows.insert("delta", ArrayD::zeros(IxDyn(&[ids.len(), l])));
        let mut opt = Adam::new(options.lr, 0.9, 0.999, 1e-8);
        let scatter = |rows: &Array2<f32>| -> Array2<f32> {
            let mut full = Array2::zeros((k, l));
            for (j, &i) in ids.iter().enumerate() {
                full.row_mut(i).assign(&rows.row(j));
            }
            full
        };
        let mut losses = Vec::with_capacity(options.iterations);
        let mut best: Option<(f64, usize, Array2<f32>)> = None;
        for it in 0..options.iterations {
            let current: Array2<f32> = rows.get("delta").expect("delta").clone().into_dimensionality().expect("2-D");
            let full = scatter(&current);
            let d = Var::param(current.clone().into_dyn());
            let pieces: Vec<Var<f32>> = (0..k)
                .map(|i| match ids.iter().position(|&r| r == i) {
                    Some(j) => d.narrow(0, j, 1),
                    None => Var::zeros(&[1, l]),
                })
                .collect();
            let latents = LatentVars {
                w_g: base_g.add(&Var::concat(&pieces, 0)),
                w_t: w_t.clone(),
            };
            let out = render(&self.field, &b, &latents, &self.camera, &self.render, None)?;
            let loss = out.mask_with_background().sub(&onehot).square().mean();
            let v = finite("edit_mask_mse", it, loss.item() as f64)?;
            progress(&Progress {
                phase: "edit",
                iteration: it,
                loss: v,
                delta: Some(&full),
            });
            losses.push(v);
            if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                best = Some((v, it, full));
            }
            if it + 1 < options.iterations {
                let g = grad(&loss, &[&d], false).remove(0);
                let grads: Grads<f32> = [("delta".to_string(), g.value().clone())].into_iter().collect();
                opt.update(&mut rows, &grads)?;
            }
        }
        let (_, best_iteration, delta) = best.expect("at least one iteration");
        Ok(EditOutcome {
            delta,
            losses,
            best_iteration,
        })
    }

    /// [`EditSession::optimize_edit`] followed by recording the result.
    pub fn edit(
        &mut self,
        target: &Array2<u8>,
        region_ids: &[usize],
        options: &EditOptions,
        progress: impl FnMut(&Progress),
    ) -> Result<EditOutcome> {
        let outcome = self.optimize_edit(target, region_ids, options, progress)?;
        self.apply(HistoryEntry::Edit {
            region_ids: region_ids.to_vec(),
            delta: outcome.delta.clone(),
        })?;
        Ok(outcome)
    }

    /// Write `history.jsonl` and the referenced bank files into `dir`.
    pub fn write_history(&self, dir: &Path) -> Result<()> {
        let mut text = String::new();
        for (n, entry) in self.history.iter().enumerate() {
            let line = match entry {
                HistoryEntry::Edit { region_ids, delta } => {
                    let name = format!("delta_{:04}.lclw", n + 1);
                    let bank = LatentBank::new(delta.clone(), Array2::zeros(delta.dim()))?;
                    write_bank(&dir.join(&name), &bank)?;
                    HistoryLine {
                        region_ids: region_ids.clone(),
                        which: Which::Geometry,
                        delta_ref: Some(name),
                        donor_ref: None,
                    }
                }
                HistoryEntry::Swap {
                    region_ids,
                    which,
                    donor,
                } => {
                    let name = format!("donor_{:04}.lclw", n + 1);
                    write_bank(&dir.join(&name), donor)?;
                    HistoryLine {
                        region_ids: region_ids.clone(),
                        which: *which,
                        delta_ref: None,
                        donor_ref: Some(name),
                    }
                }
            };
            text.push_str(&serde_json::to_string(&line).expect("history serializes"));
            text.push('\n');
        }
        crate::io::write_file(&dir.join("history.jsonl"), text.as_bytes())
    }
}

/// Entries of a `history.jsonl` written by [`EditSession::write_history`].
pub fn read_history(dir: &Path) -> Result<Vec<HistoryEntry>> {
    let path = dir.join("history.jsonl");
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let h: HistoryLine = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        out.push(match (h.delta_ref, h.donor_ref) {
            (Some(d), None) => HistoryEntry::Edit {
                region_ids: h.region_ids,
                delta: read_bank(&dir.join(d))?.w_g,
            },
            (None, Some(d)) => HistoryEntry::Swap {
                region_ids: h.region_ids,
                which: h.which,
                donor: read_bank(&dir.join(d))?,
            },
            _ => return Err(Error::Parse(format!("{}: entry needs exactly one of delta_ref, donor_ref", path.display()))),
        });
    }
    Ok(out)
}

/// Two-phase inversion of `image`/`labels` seen from `camera`: first all
/// style rows, then the generator weights around the frozen styles.
#[allow(clippy::too_many_arguments)]
pub fn invert(
    field: RadianceField,
    params: ParamStore<f32>,
    image: &Array3<f32>,
    labels: &Array2<u8>,
    camera: Camera,
    render_config: RenderConfig,
    options: &InvertOptions,
    mut progress: impl FnMut(&Progress),
) -> Result<Inversion> {
    let k = field.regions();
    let (h, w) = (camera.height, camera.width);
    if image.dim() != (h, w, 3) || labels.dim() != (h, w) {
        return Err(Error::shape(
            "inversion target",
            format!("{h}x{w}x3 image with {h}x{w} mask"),
            format!("image {:?}, mask {:?}", image.dim(), labels.dim()),
        ));
    }
    let target_rgb = Var::constant(flat_image(image));
    let target_mask = Var::constant(flat_one_hot(labels, k)?);
    let p = (h * w) as f64;
    let objective = |b: &Binding<f32>, latents: &LatentVars<f32>| -> Result<Var<f32>> {
        let out = render(&field, b, latents, &camera, &render_config, None)?;
        let pixel = out.image_on_white().sub(&target_rgb).square().mean();
        let ce = target_mask
            .mul(&out.mask_with_background().add_scalar(1e-6).ln())
            .sum()
            .scale(-1.0 / p);
        Ok(pixel.scale(options.pixel_weight).add(&ce.scale(options.mask_weight)))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let start = mean_latents(&params, field.config(), &mut rng, options.mean_samples)?;
    let mut latents = ParamStore::<f32>::new();
    latents.insert("w_g", start.w_g.clone().into_dyn());
    latents.insert("w_t", start.w_t.clone().into_dyn());
    let mut opt = Adam::new(options.latent_lr, 0.9, 0.999, 1e-8);
    let mut latent_losses = Vec::with_capacity(options.latent_steps);
    {
        let b = Binding::frozen(&params);
        for it in 0..options.latent_steps {
            let lb = Binding::with(&latents, |_| true);
            let vars = LatentVars {
                w_g: lb.var("w_g"),
                w_t: lb.var("w_t"),
            };
            let loss = objective(&b, &vars)?;
            let v = finite("invert_latent", it, loss.item() as f64)?;
            progress(&Progress {
                phase: "latent",
                iteration: it,
                loss: v,
                delta: None,
            });
            latent_losses.push(v);
            let grads = grads_of(&loss, &lb.trainable_vars());
            drop(vars);
            drop(lb);
            opt.update(&mut latents, &grads)?;
        }
    }
    let to2 = |name: &str| -> Array2<f32> { latents.get(name).expect("latent").clone().into_dimensionality().expect("2-D") };
    let bank = LatentBank::new(to2("w_g"), to2("w_t"))?;

    let mut tuned = params;
    let mut opt = Adam::new(options.tune_lr, 0.9, 0.999, 1e-8);
    let mut tune_losses = Vec::with_capacity(options.tune_steps);
    let frozen = bank.to_vars();
    for it in 0..options.tune_steps {
        let snapshot = tuned.clone();
        let grads = {
            let b = Binding::with(&snapshot, |n: &str| !n.starts_with("map."));
            let loss = objective(&b, &frozen)?;
            let v = finite("invert_tune", it, loss.item() as f64)?;
            progress(&Progress {
                phase: "tune",
                iteration: it,
                loss: v,
                delta: None,
            });
            tune_losses.push(v);
            grads_of(&loss, &b.trainable_vars())
        };
        drop(snapshot);
        opt.update(&mut tuned, &grads)?;
    }
    let session = EditSession::new(field, tuned, bank, camera, render_config)?;
    Ok(Inversion {
        session,
        latent_losses,
        tune_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny() -> (RadianceField, ParamStore<f32>, RenderConfig) {
        let cfg = ModelConfig {
            regions: 3,
            noise_dim: 8,
            style_dim: 8,
            hidden_dim: 8,
            geo_feature_dim: 8,
            tex_feature_dim: 8,
            first_omega: 10.0,
            beta_init: 0.05,
        };
        let field = RadianceField::new(&cfg);
        let params = field.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let render = RenderConfig {
            resolution: 6,
            samples: 6,
            ..RenderConfig::toy()
        };
        (field, params, render)
    }

    fn session(seed: u64) -> EditSession {
        let (field, params, render) = tiny();
        let cam = Camera::from_config(0.1, 0.05, &render);
        EditSession::from_seed(field, params, seed, cam, render).unwrap()
    }

    #[test]
    fn swap_replaces_only_named_rows() {
        let a = session(1).bank;
        let d = session(2).bank;
        let s = swap_region_latents(&a, &d, &[1], Which::Geometry).unwrap();
        assert_eq!(s.w_g.row(1), d.w_g.row(1));
        assert_eq!(s.w_g.row(0), a.w_g.row(0));
        assert_eq!(s.w_t, a.w_t);
        let all = swap_region_latents(&a, &d, &all_regions(3), Which::Texture).unwrap();
        assert_eq!((all.w_g, all.w_t), (a.w_g.clone(), d.w_t.clone()));
        assert_eq!(swap_region_latents(&a, &a, &[0, 2], Which::Both).unwrap(), a);
        assert!(matches!(swap_region_latents(&a, &d, &[3], Which::Both), Err(Error::UnknownRegion { id: 3, .. })));
        let small = LatentBank::<f32>::zeros(2, 8);
        assert!(swap_region_latents(&a, &small, &[0], Which::Both).is_err());
    }

    #[test]
    fn texture_swap_keeps_mask_and_self_swap_is_identity() {
        let mut s = session(1);
        let before = s.render_current().unwrap();
        let donor = session(5).bank;
        s.swap(&[0, 1, 2], &donor, Which::Texture).unwrap();
        let after = s.render_current().unwrap();
        assert_eq!(before.mask_probs, after.mask_probs);
        assert_eq!(before.alpha, after.alpha);
        assert_ne!(before.image, after.image);
        let mut t = session(1);
        let me = t.bank.clone();
        t.swap(&[1], &me, Which::Both).unwrap();
        assert_eq!(t.render_current().unwrap(), before);
    }

    #[test]
    fn edit_touches_only_named_geometry_rows_and_never_worsens() {
        let mut s = session(4);
        let current = s.render_current().unwrap().labels();
        let mut target = current.clone();
        for j in 0..6 {
            target[[2, j]] = 1;
            target[[3, j]] = 1;
        }
        let before = s.bank.clone();
        let mut seen = Vec::new();
        let out = s
            .edit(&target, &[1], &EditOptions { iterations: 12, lr: 5e-2 }, |p| {
                seen.push(p.iteration);
                let d = p.delta.unwrap();
                assert!(d.row(0).iter().chain(d.row(2).iter()).all(|&x| x == 0.0));
            })
            .unwrap();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert_eq!(out.losses.len(), 12);
        assert!(out.final_loss() <= out.losses[0]);
        assert_eq!(s.bank.w_t, before.w_t);
        assert_eq!(s.bank.w_g.row(0), before.w_g.row(0));
        assert_eq!(s.bank.w_g.row(2), before.w_g.row(2));
        assert_eq!(s.replay().unwrap(), s.bank);
    }

    #[test]
    fn identical_target_is_a_fixed_point_and_budget_one_logs_once() {
        let s = session(4);
        let labels = s.render_current().unwrap().labels();
        let out = s.optimize_edit(&labels, &[2], &EditOptions { iterations: 1, lr: 1e-2 }, |_| {}).unwrap();
        assert_eq!(out.losses.len(), 1);
        assert!(out.delta.iter().all(|&x| x == 0.0));
        assert!(matches!(
            s.optimize_edit(&labels, &[7], &EditOptions::default(), |_| {}),
            Err(Error::UnknownRegion { id: 7, .. })
        ));
        assert!(s.optimize_edit(&Array2::zeros((2, 2)), &[1], &EditOptions::default(), |_| {}).is_err());
    }

    #[test]
    fn history_round_trips_through_files_and_replays_exactly() {
        let mut s = session(4);
        let target = Array2::from_shape_fn((6, 6), |(i, _)| if i < 3 { 1u8 } else { 0 });
        s.edit(&target, &[1, 2], &EditOptions { iterations: 3, lr: 1e-2 }, |_| {}).unwrap();
        let donor = session(9).bank;
        s.swap(&[0], &donor, Which::Texture).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write_history(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
        assert!(text.lines().next().unwrap().contains("delta_ref"));
        let back = read_history(dir.path()).unwrap();
        assert_eq!(back, s.history);
        let replayed = back.iter().try_fold(s.base.clone(), |b, e| apply_entry(&b, e)).unwrap();
        assert_eq!(replayed, s.bank);
        let mut fresh = session(4);
        fresh.history = back;
        fresh.bank = fresh.replay().unwrap();
        assert_eq!(fresh.render_current().unwrap(), s.render_current().unwrap());
    }

    #[test]
    fn inversion_phases_and_determinism() {
        let (field, params, render) = tiny();
        let cam = Camera::from_config(0.0, 0.0, &render);
        let target = session(6).render_at(&cam).unwrap();
        let opts = InvertOptions {
            latent_steps: 4,
            tune_steps: 3,
            mean_samples: 4,
            ..InvertOptions::default()
        };
        let run = || {
            invert(field.clone(), params.clone(), &target.image_on_white(), &target.labels(), cam.clone(), render.clone(), &opts, |_| {})
                .unwrap()
        };
        let a = run();
        assert_eq!(a.latent_losses.len(), 4);
        assert_eq!(a.tune_losses.len(), 3);
        assert!(a.latent_losses.last().unwrap() < &a.latent_losses[0]);
        assert_ne!(a.session.params, params);
        assert_eq!(a.session.params.subset("map."), params.subset("map."));
        let b = run();
        assert_eq!(a, b);
        let mut phases = Vec::new();
        invert(field, params, &target.image_on_white(), &target.labels(), cam, render, &opts, |p| phases.push(p.phase)).unwrap();
        assert_eq!(phases.iter().filter(|p| **p == "tune").count(), 3);
    }

    #[test]
    fn which_parses() {
        assert_eq!("texture".parse::<Which>().unwrap(), Which::Texture);
        assert!("colour".parse::<Which>().is_err());
    }
}
