//! Alternating adversarial optimization, checkpoints and the metrics log.
//!
//! Each step updates the image discriminator, then the image-mask
//! discriminator, then the generator. The generated batch is rendered once
//! per step; the discriminators see it detached and the generator loss
//! re-scores it with the freshly updated discriminators.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use lcnerf_autograd::{grad, Var};
use ndarray::{Array2, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adversarial::{
    discriminator_i_loss, discriminator_im_loss, generator_loss, one_hot, Discriminator, GeneratorTerms, LossBreakdown,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
use crate::config::{PretrainConfig, TrainConfig};
use crate::data::{open_dataset, Dataset, PosePrior, SegmentedSample};
use crate::error::{Error, Result};
use crate::field_generators::{sample_noise, LatentVars, MappingNetwork};
use crate::fusion::RadianceField;
use crate::optim::Adam;
use crate::params::{grad_norm, Binding, Grads, ParamStore};
use crate::volume_renderer::{pixels_to_nchw, render, Camera};

/// Names in the generator store start with one of these.
pub const GENERATOR_PREFIXES: [&str; 4] = ["map.", "geo.", "tex.", "fuse."];

/// Noise and poses for one generated batch.
#[derive(Clone, Debug)]
pub struct FakeBatch {
    pub noise: Vec<(Array2<f32>, Array2<f32>)>,
    /// `[B, 2]` (azimuth, elevation).
    pub poses: Array2<f64>,
}

impl FakeBatch {
    pub fn len(&self) -> usize {
        self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
    }
}

/// Differentiable renders of a [`FakeBatch`].
struct Rendered {
    image: Var<f32>,
    image_mask: Var<f32>,
    sdf: Var<f32>,
    sdf_gradients: Var<f32>,
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

impl StepMetrics {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub struct Trainer {
    config: TrainConfig,
    field: RadianceField,
    d_i: Discriminator,
    d_im: Discriminator,
    gen: ParamStore<f32>,
    disc_i: ParamStore<f32>,
    disc_im: ParamStore<f32>,
    opt_g: Adam<f32>,
    opt_di: Adam<f32>,
    opt_dim: Adam<f32>,
    prior: PosePrior,
    rng: ChaCha8Rng,
    step: u64,
    dataset: Box<dyn Dataset>,
}

fn adam(lr: f64, config: &TrainConfig) -> Adam<f32> {
    Adam::new(lr, config.optim.beta1, config.optim.beta2, config.optim.eps)
}

fn gradients(total: &Var<f32>, b: &Binding<f32>) -> Grads<f32> {
    let vars = b.trainable_vars();
    let refs: Vec<&Var<f32>> = vars.iter().map(|(_, v)| v).collect();
    let gs = grad(total, &refs, false);
    vars.into_iter().zip(gs).map(|((name, _), g)| (name, g.value().clone())).collect()
}

fn is_generator_param(name: &str) -> bool {
    GENERATOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

fn check_grads(what: &str, grads: &Grads<f32>, step: u64) -> Result<f64> {
    let n = grad_norm(grads);
    if !n.is_finite() {
        return Err(Error::NonFinite(format!("{what} gradients at step {step}")));
    }
    Ok(n)
}

impl Trainer {
    /// Fresh run on the configured dataset.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let dataset = open_dataset(&config.data, &config.render)?;
        Self::with_dataset(config, dataset)
    }

    /// Fresh run: parameters drawn from the seed, then the optional sphere
    /// warm-up.
    pub fn with_dataset(mut config: TrainConfig, dataset: Box<dyn Dataset>) -> Result<Self> {
        config.validate()?;
        if !config.deterministic {
            config.seed = rand::random();
            log::info!("non-deterministic run: seed {}", config.seed);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let field = RadianceField::new(&config.model);
        let gen = field.init_params(&mut rng);
        let res = config.render.resolution;
        let d_i = Discriminator::image(res)?;
        let d_im = Discriminator::image_mask(res, config.model.regions)?;
        let mut disc_i = ParamStore::new();
        d_i.init(&mut disc_i, &mut rng);
        let mut disc_im = ParamStore::new();
        d_im.init(&mut disc_im, &mut rng);
        let mut t = Self::assemble(config, dataset, field, d_i, d_im, gen, disc_i, disc_im, rng)?;
        if t.config.pretrain.steps > 0 {
            let pre = t.config.pretrain.clone();
            t.pretrain_sphere(&pre)?;
        }
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        dataset: Box<dyn Dataset>,
        field: RadianceField,
        d_i: Discriminator,
        d_im: Discriminator,
        gen: ParamStore<f32>,
        disc_i: ParamStore<f32>,
        disc_im: ParamStore<f32>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if dataset.regions() != config.model.regions {
            return Err(Error::Config(format!(
                "dataset has {} regions but model.regions is {}",
                dataset.regions(),
                config.model.regions
            )));
        }
        if dataset.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(Self {
            opt_g: adam(config.optim.lr_g, &config),
            opt_di: adam(config.optim.lr_di, &config),
            opt_dim: adam(config.optim.lr_dim, &config),
            prior: PosePrior::for_data(&config.data),
            config,
            field,
            d_i,
            d_im,
            gen,
            disc_i,
            disc_im,
            rng,
            step: 0,
            dataset,
        })
    }

    /// Continue from a checkpoint; the stored config is authoritative except
    /// for `steps` and `checkpoint_every`, which may be extended.
    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: Box<dyn Dataset>, steps: Option<u64>) -> Result<Self> {
        let mut config = ckpt.config.clone();
        if let Some(s) = steps {
            config.steps = s;
        }
        config.validate()?;
        let field = RadianceField::new(&config.model);
        let res = config.render.resolution;
        let d_i = Discriminator::image(res)?;
        let d_im = Discriminator::image_mask(res, config.model.regions)?;
        let (mut gen, mut disc_i, mut disc_im) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        for (name, t) in &ckpt.tensors {
            if name.starts_with("opt.") {
                continue;
            }
            let store = if is_generator_param(name) {
                &mut gen
            } else if name.starts_with("disc_im.") {
                &mut disc_im
            } else if name.starts_with("disc_i.") {
                &mut disc_i
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            };
            store.insert(name.clone(), t.clone());
        }
        let mut t = Self::assemble(config, dataset, field, d_i, d_im, gen, disc_i, disc_im, ckpt.rng.restore())?;
        t.check_complete()?;
        t.step = ckpt.step;
        for (tag, opt) in [("g", &mut t.opt_g), ("di", &mut t.opt_di), ("dim", &mut t.opt_dim)] {
            let prefix = format!("opt.{tag}.");
            for (key, value) in ckpt.strip(&prefix) {
                opt.load_state(key, value.clone())?;
            }
            opt.step = ckpt.counters.get(&format!("opt.{tag}.step")).copied().unwrap_or(0);
        }
        Ok(t)
    }

    /// Every parameter a fresh initialization would create is present with
    /// the same shape.
    fn check_complete(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = self.field.init_params::<f32, _>(&mut rng);
        let mut di = ParamStore::new();
        self.d_i.init(&mut di, &mut rng);
        let mut dim = ParamStore::new();
        self.d_im.init(&mut dim, &mut rng);
        for (want, have) in [(&reference, &self.gen), (&di, &self.disc_i), (&dim, &self.disc_im)] {
            for (name, a) in want.iter() {
                match have.get(name) {
                    Some(b) if b.shape() == a.shape() => {}
                    Some(b) => {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{name}` has shape {:?}, expected {:?}",
                            b.shape(),
                            a.shape()
                        )))
                    }
                    None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
        for store in [&self.gen, &self.disc_i, &self.disc_im] {
            for (k, v) in store.iter() {
                tensors.insert(k.to_string(), v.clone());
            }
        }
        let mut counters = BTreeMap::new();
        for (tag, opt) in [("g", &self.opt_g), ("di", &self.opt_di), ("dim", &self.opt_dim)] {
            for (k, v) in opt.state() {
                tensors.insert(format!("opt.{tag}.{k}"), v.clone());
            }
            counters.insert(format!("opt.{tag}.step"), opt.step);
        }
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            counters,
            tensors,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn field(&self) -> &RadianceField {
        &self.field
    }

    pub fn generator_params(&self) -> &ParamStore<f32> {
        &self.gen
    }

    pub fn discriminator_params(&self) -> (&ParamStore<f32>, &ParamStore<f32>) {
        (&self.disc_i, &self.disc_im)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn dataset(&self) -> &dyn Dataset {
        self.dataset.as_ref()
    }

    /// Draw noise and poses for `n` generated images.
    pub fn sample_fakes(&mut self, n: usize) -> FakeBatch {
        let mut noise = Vec::with_capacity(n);
        let mut poses = Array2::zeros((n, 2));
        for i in 0..n {
            noise.push(sample_noise::<f32, _>(&mut self.rng, &self.config.model));
            let (a, e) = self.prior.sample(&mut self.rng);
            poses[[i, 0]] = a;
            poses[[i, 1]] = e;
        }
        FakeBatch { noise, poses }
    }

    /// `n` dataset samples at uniformly drawn indices.
    pub fn sample_real(&mut self, n: usize) -> Result<Vec<SegmentedSample>> {
        (0..n)
            .map(|_| {
                let i = self.rng.gen_range(0..self.dataset.len());
                self.dataset.get(i)
            })
            .collect()
    }

    fn render_fakes(&mut self, b: &Binding<f32>, fakes: &FakeBatch) -> Result<Rendered> {
        let cfg = &self.config;
        let (map_g, map_t) = (MappingNetwork::geometry(&cfg.model), MappingNetwork::texture(&cfg.model));
        let res = cfg.render.resolution;
        let box_half = cfg.loss.scene_box;
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut sdfs = Vec::new();
        let mut grads = Vec::new();
        for (i, (z_g, z_t)) in fakes.noise.iter().enumerate() {
            let latents = LatentVars {
                w_g: map_g.forward(b, &Var::constant(z_g.clone().into_dyn())),
                w_t: map_t.forward(b, &Var::constant(z_t.clone().into_dyn())),
            };
            let cam = Camera::from_config(fakes.poses[[i, 0]], fakes.poses[[i, 1]], &cfg.render);
            let out = render(&self.field, b, &latents, &cam, &cfg.render, Some(&mut self.rng))?;
            images.push(pixels_to_nchw(&out.image_on_white(), res, res));
            masks.push(pixels_to_nchw(&out.mask_with_background(), res, res));
            sdfs.push(out.sdf.clone());

            let n = cfg.loss.eikonal_points;
            let mut pts = Array2::<f32>::zeros((2 * n, 3));
            for r in 0..n {
                let src = self.rng.gen_range(0..out.points.nrows());
                for k in 0..3 {
                    pts[[r, k]] = out.points[[src, k]] as f32;
                    pts[[n + r, k]] = self.rng.gen_range(-box_half..=box_half) as f32;
                }
            }
            let x = Var::param(pts.into_dyn());
            let geo = self.field.geometry(b, &latents.w_g, &x)?;
            grads.push(grad(&geo.d, &[&x], true).remove(0));
        }
        let image = Var::concat(&images, 0);
        let mask = Var::concat(&masks, 0);
        Ok(Rendered {
            image_mask: Var::concat(&[image.clone(), mask], 1),
            image,
            sdf: Var::concat(&sdfs, 0),
            sdf_gradients: Var::concat(&grads, 0),
        })
    }

    fn real_tensors(&self, real: &[SegmentedSample]) -> Result<(ArrayD<f32>, ArrayD<f32>)> {
        let res = self.config.render.resolution;
        let k = self.config.model.regions;
        for s in real {
            s.validate(k)?;
            if s.labels.dim() != (res, res) {
                return Err(Error::shape(
                    "real sample",
                    format!("{res}x{res}"),
                    format!("{:?}", s.labels.dim()),
                ));
            }
        }
        let views: Vec<_> = real.iter().map(|s| s.image.view().permuted_axes([2, 0, 1])).collect();
        let images = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::Invalid(e.to_string()))?
            .into_dyn();
        let labels: Vec<Array2<u8>> = real.iter().map(|s| s.labels.clone()).collect();
        let masks = one_hot::<f32>(&labels, k)?;
        let both = ndarray::concatenate(Axis(1), &[images.view(), masks.view()])
            .map_err(|e| Error::Invalid(e.to_string()))?;
        Ok((images.as_standard_layout().to_owned(), both))
    }

    /// One D_I, one D_IM and one G update on `real`.
    pub fn train_step(&mut self, real: &[SegmentedSample]) -> Result<StepMetrics> {
        if real.is_empty() {
            return Err(Error::Invalid("empty real batch".into()));
        }
        let (real_images, real_pairs) = self.real_tensors(real)?;
        let step = self.step + 1;
        let fakes = self.sample_fakes(real.len());
        let gen = self.gen.clone();
        let gb = Binding::with(&gen, is_generator_param);
        let rendered = self.render_fakes(&gb, &fakes)?;
        let mut values = BTreeMap::new();

        let (di_loss, di_grads) = {
            let b = Binding::with(&self.disc_i, |_| true);
            let loss = discriminator_i_loss(
                &self.d_i,
                &b,
                &rendered.image.detach(),
                &Var::param(real_images),
                &fakes.poses,
                &self.config.loss,
            )?;
            loss.check_finite(step)?;
            let g = gradients(&loss.total, &b);
            (summary(loss), g)
        };
        values.insert("grad_norm_di".into(), check_grads("D_I", &di_grads, step)?);
        self.opt_di.update(&mut self.disc_i, &di_grads)?;

        let (dim_loss, dim_grads) = {
            let b = Binding::with(&self.disc_im, |_| true);
            let loss = discriminator_im_loss(
                &self.d_im,
                &b,
                &rendered.image_mask.detach(),
                &Var::param(real_pairs),
                &self.config.loss,
            )?;
            loss.check_finite(step)?;
            let g = gradients(&loss.total, &b);
            (summary(loss), g)
        };
        values.insert("grad_norm_dim".into(), check_grads("D_IM", &dim_grads, step)?);
        self.opt_dim.update(&mut self.disc_im, &dim_grads)?;

        let (g_loss, g_grads) = self.generator_objective(&gb, &rendered, &fakes, step)?;
        values.insert("grad_norm_g".into(), check_grads("generator", &g_grads, step)?);
        drop(rendered);
        drop(gb);
        drop(gen);
        self.opt_g.update(&mut self.gen, &g_grads)?;

        for (name, total, terms) in [("d_i", di_loss.0, di_loss.1), ("d_im", dim_loss.0, dim_loss.1), ("g", g_loss.0, g_loss.1)] {
            values.insert(format!("{name}_total"), total);
            for (term, v) in terms {
                values.insert(term.to_string(), v);
            }
        }
        values.insert("beta".into(), self.field.beta_value(&self.gen));
        values.insert("lr_g".into(), self.opt_g.lr);
        values.insert("lr_di".into(), self.opt_di.lr);
        values.insert("lr_dim".into(), self.opt_dim.lr);
        self.step = step;
        Ok(StepMetrics { step, values })
    }

    fn generator_objective(
        &self,
        gb: &Binding<f32>,
        rendered: &Rendered,
        fakes: &FakeBatch,
        step: u64,
    ) -> Result<((f64, Vec<(&'static str, f64)>), Grads<f32>)> {
        // the discriminators read disjoint names, so one frozen binding serves both
        let mut merged = self.disc_i.clone();
        merged.extend(&self.disc_im);
        let b = Binding::frozen(&merged);
        let loss = generator_loss(
            &self.d_i,
            &self.d_im,
            &b,
            GeneratorTerms {
                image: &rendered.image,
                image_mask: &rendered.image_mask,
                pose: &fakes.poses,
                sdf: &rendered.sdf,
                sdf_gradients: &rendered.sdf_gradients,
            },
            &self.config.loss,
        )?;
        loss.check_finite(step)?;
        let g = gradients(&loss.total, gb);
        Ok((summary(loss), g))
    }

    /// A generator update with the discriminators frozen, on fixed noise and
    /// poses. Returns the generator terms before the update.
    pub fn generator_step(&mut self, fakes: &FakeBatch) -> Result<BTreeMap<String, f64>> {
        let gen = self.gen.clone();
        let gb = Binding::with(&gen, is_generator_param);
        let rendered = self.render_fakes(&gb, fakes)?;
        let ((total, terms), grads) = self.generator_objective(&gb, &rendered, fakes, self.step + 1)?;
        check_grads("generator", &grads, self.step + 1)?;
        drop(rendered);
        drop(gb);
        drop(gen);
        self.opt_g.update(&mut self.gen, &grads)?;
        let mut out: BTreeMap<String, f64> = terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        out.insert("g_total".into(), total);
        Ok(out)
    }

    /// Draw a real batch of the configured size and run [`Trainer::train_step`].
    pub fn step(&mut self) -> Result<StepMetrics> {
        let real = self.sample_real(self.config.batch_size)?;
        self.train_step(&real)
    }

    /// Regress the SDF of randomly drawn latents onto a sphere. Returns the
    /// loss per step.
    pub fn pretrain_sphere(&mut self, cfg: &PretrainConfig) -> Result<Vec<f64>> {
        let model = self.config.model.clone();
        let box_half = self.config.loss.scene_box;
        let mut opt = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
        let mut history = Vec::with_capacity(cfg.steps as usize);
        for s in 0..cfg.steps {
            let (z_g, _) = sample_noise::<f32, _>(&mut self.rng, &model);
            let n = cfg.points;
            let mut pts = Array2::<f32>::zeros((n, 3));
            let mut target = Array2::<f32>::zeros((n, 1));
            for r in 0..n {
                let p: [f64; 3] = if r % 2 == 0 {
                    std::array::from_fn(|_| self.rng.gen_range(-box_half..=box_half))
                } else {
                    let v: [f64; 3] = std::array::from_fn(|_| self.rng.sample(rand_distr::StandardNormal));
                    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                    let rad = cfg.radius + self.rng.gen_range(-0.1..=0.1);
                    std::array::from_fn(|k| v[k] / len * rad)
                };
                for k in 0..3 {
                    pts[[r, k]] = p[k] as f32;
                }
                target[[r, 0]] = ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - cfg.radius) as f32;
            }
            let gen = self.gen.clone();
            let grads = {
                let b = Binding::with(&gen, |n: &str| n.starts_with("map.g") || n.starts_with("geo.") || n.starts_with("fuse.sdf"));
                let w_g = MappingNetwork::geometry(&model).forward(&b, &Var::constant(z_g.into_dyn()));
                let geo = self.field.geometry(&b, &w_g, &Var::constant(pts.into_dyn()))?;
                let loss = geo.d.sub(&Var::constant(target.into_dyn())).square().mean();
                let v = loss.item() as f64;
                if !v.is_finite() {
                    return Err(Error::LossNotFinite {
                        term: "sphere_init",
                        value: v,
                        step: s,
                    });
                }
                history.push(v);
                gradients(&loss, &b)
            };
            drop(gen);
            opt.update(&mut self.gen, &grads)?;
        }
        if let Some(last) = history.last() {
            log::info!("sphere warm-up: {} steps, final loss {last:.3e}", history.len());
        }
        Ok(history)
    }
}

fn summary(loss: LossBreakdown<f32>) -> (f64, Vec<(&'static str, f64)>) {
    let total = loss.total_value();
    (total, loss.terms.into_iter().map(|(n, _, v)| (n, v)).collect())
}

/// Output layout of a training run.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    /// Latest checkpoint.
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.lcnf")
    }

    pub fn checkpoint_at(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:08}.lcnf"))
    }
}

/// Keep only log rows up to `step` (a resumed run rewrites later rows).
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let row: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if row.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Run (or resume) training, writing the effective config, the metrics log
/// and checkpoints under `out`. `on_step` sees every row as it is logged.
pub fn train(
    config: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Checkpoint> {
    let paths = RunPaths::new(out);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let dataset = open_dataset(&ckpt.config.data, &ckpt.config.render)?;
            truncate_metrics(&paths.metrics(), ckpt.step)?;
            Trainer::from_checkpoint(&ckpt, dataset, Some(config.steps))?
        }
        None => {
            if paths.metrics().exists() {
                std::fs::remove_file(paths.metrics()).map_err(|e| Error::io(paths.metrics(), e))?;
            }
            Trainer::new(config.clone())?
        }
    };
    crate::io::write_file(&paths.config(), trainer.config().to_toml().as_bytes())?;
    let metrics_path = paths.metrics();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let total = trainer.config().steps;
    let every = trainer.config().checkpoint_every;
    while trainer.step_count() < total {
        let m = trainer.step()?;
        writeln!(log, "{}", m.to_json()).map_err(|e| Error::io(&metrics_path, e))?;
        on_step(&m);
        if every > 0 && m.step % every == 0 && m.step < total {
            let ck = trainer.checkpoint();
            save_checkpoint(&ck, &paths.checkpoint_at(m.step))?;
            save_checkpoint(&ck, &paths.checkpoint())?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let ck = trainer.checkpoint();
    save_checkpoint(&ck, &paths.checkpoint())?;
    Ok(ck)
}

/// Generator parameters and model config from a checkpoint.
pub fn load_generator(path: &Path) -> Result<(TrainConfig, ParamStore<f32>)> {
    let ckpt = load_checkpoint(path)?;
    let mut store = ParamStore::new();
    for (name, t) in &ckpt.tensors {
        if is_generator_param(name) {
            store.insert(name.clone(), t.clone());
        }
    }
    let field = RadianceField::new(&ckpt.config.model);
    let reference = field.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0));
    for (name, a) in reference.iter() {
        match store.get(name) {
            Some(b) if b.shape() == a.shape() => {}
            _ => return Err(Error::Checkpoint(format!("{}: generator tensor `{name}` missing or misshapen", path.display()))),
        }
    }
    Ok((ckpt.config, store))
}

/// Checkpoint holding only generator parameters, readable by
/// [`load_generator`] (for example a generator tuned by inversion).
pub fn generator_checkpoint(config: &TrainConfig, params: &ParamStore<f32>) -> Checkpoint {
    Checkpoint {
        config: config.clone(),
        step: 0,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(config.seed)),
        counters: BTreeMap::new(),
        tensors: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    }
}

/// Tiny dataset-independent configuration used by tests and smoke runs.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.noise_dim = 8;
    c.model.style_dim = 8;
    c.model.hidden_dim = 8;
    c.model.geo_feature_dim = 8;
    c.model.tex_feature_dim = 8;
    c.render.resolution = 8;
    c.render.samples = 6;
    c.loss.eikonal_points = 16;
    c.data.toy.views = 4;
    c.data.toy.min_class_share = 0.0;
    c.batch_size = 2;
    c.steps = 4;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_equal(a: &Trainer, b: &Trainer) -> bool {
        let ca = a.checkpoint();
        let cb = b.checkpoint();
        ca.encode() == cb.encode()
    }

    #[test]
    fn zero_learning_rates_keep_parameters_bit_identical() {
        let mut c = tiny_config();
        c.optim.lr_g = 0.0;
        c.optim.lr_di = 0.0;
        c.optim.lr_dim = 0.0;
        let mut t = Trainer::new(c).unwrap();
        let before = t.checkpoint().tensors;
        let m = t.step().unwrap();
        let after = t.checkpoint().tensors;
        for (k, v) in &before {
            if !k.starts_with("opt.") {
                assert!(v.iter().zip(after[k].iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{k}");
            }
        }
        for key in ["di_fake", "di_real", "di_r1", "di_pose", "dim_fake", "dim_real", "dim_r1", "g_adv_i", "g_pose", "g_adv_im", "g_eik", "g_sur", "beta", "grad_norm_g"] {
            assert!(m.get(key).unwrap().is_finite(), "{key}");
        }
    }

    #[test]
    fn fixed_seed_runs_match_and_metrics_decompose() {
        let run = || {
            let mut t = Trainer::new(tiny_config()).unwrap();
            (0..2).map(|_| t.step().unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        let w = tiny_config().loss;
        let m = &a[1];
        let di = m.get("di_fake").unwrap() + m.get("di_real").unwrap()
            + w.lambda_i_reg * m.get("di_r1").unwrap()
            + w.lambda_pose * m.get("di_pose").unwrap();
        assert!((di - m.get("d_i_total").unwrap()).abs() < 1e-4 * (1.0 + di.abs()));
    }

    #[test]
    fn resume_equals_straight_run() {
        let mut c = tiny_config();
        c.steps = 4;
        let mut straight = Trainer::new(c.clone()).unwrap();
        for _ in 0..4 {
            straight.step().unwrap();
        }
        let mut first = Trainer::new(c.clone()).unwrap();
        for _ in 0..2 {
            first.step().unwrap();
        }
        let bytes = first.checkpoint().encode();
        let ck = Checkpoint::decode(&bytes).unwrap();
        let ds = open_dataset(&c.data, &c.render).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck, ds, None).unwrap();
        assert_eq!(resumed.checkpoint().encode(), bytes);
        for _ in 0..2 {
            resumed.step().unwrap();
        }
        assert!(params_equal(&straight, &resumed));
    }

    #[test]
    fn generator_term_decreases_against_frozen_discriminators() {
        let mut c = tiny_config();
        c.optim.lr_g = 1e-3;
        let mut t = Trainer::new(c).unwrap();
        let fakes = t.sample_fakes(2);
        let disc = t.discriminator_params().0.clone();
        let first = t.generator_step(&fakes).unwrap()["g_adv_i"];
        let mut last = first;
        for _ in 0..50 {
            last = t.generator_step(&fakes).unwrap()["g_adv_i"];
        }
        assert!(last < first, "{first} -> {last}");
        assert_eq!(t.discriminator_params().0, &disc);
    }

    #[test]
    fn shape_mismatch_rejected_before_update() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let before = t.checkpoint().encode();
        let bad = SegmentedSample {
            image: ndarray::Array3::zeros((4, 4, 3)),
            labels: Array2::zeros((4, 4)),
            pose: None,
        };
        assert!(t.train_step(&[bad]).is_err());
        assert_eq!(t.checkpoint().encode(), before);
    }

    #[test]
    fn sphere_warm_up_reduces_its_loss() {
        let mut c = tiny_config();
        c.pretrain.steps = 0;
        let mut t = Trainer::new(c).unwrap();
        let pre = PretrainConfig {
            steps: 60,
            lr: 1e-3,
            points: 64,
            ..PretrainConfig::default()
        };
        let h = t.pretrain_sphere(&pre).unwrap();
        let head: f64 = h[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = h[h.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn train_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config();
        c.steps = 3;
        c.checkpoint_every = 2;
        let mut seen = 0;
        let ck = train(&c, dir.path(), None, |_| seen += 1).unwrap();
        assert_eq!((seen, ck.step), (3, 3));
        let paths = RunPaths::new(dir.path());
        let text = std::fs::read_to_string(paths.metrics()).unwrap();
        let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 3);
        let keys: Vec<_> = rows[0].as_object().unwrap().keys().cloned().collect();
        for r in &rows {
            assert_eq!(r.as_object().unwrap().keys().cloned().collect::<Vec<_>>(), keys);
            assert!(r["beta"].as_f64().unwrap() > 0.0);
        }
        assert!(paths.checkpoint_at(2).is_file());
        assert_eq!(load_checkpoint(&paths.checkpoint()).unwrap().encode(), ck.encode());
        let (cfg, store) = load_generator(&paths.checkpoint()).unwrap();
        assert_eq!(cfg.model, c.model);
        assert!(store.contains("fuse.rho"));
    }
}
