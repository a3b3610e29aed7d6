//! Discriminators and every training objective.
//!
//! `D_I` scores RGB images and regresses their camera pose; `D_IM` scores
//! RGB images concatenated with K-channel masks. GAN terms use the
//! non-saturating softplus form, both discriminators carry an R1 penalty on
//! real inputs, and the generator is additionally regularized with the
//! eikonal and minimal-surface terms on its signed distance field.

use lcnerf_autograd::{grad, Conv2dSpec, Element, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::params::{uniform, zeros, Binding, ParamStore};

const SLOPE: f64 = 0.2;
const BASE_WIDTH: usize = 32;
const MAX_WIDTH: usize = 256;

/// Strided convolutional encoder with a realness head and an optional pose
/// head.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    prefix: &'static str,
    in_channels: usize,
    resolution: usize,
    widths: Vec<usize>,
    pose_head: bool,
}

/// Discriminator outputs for a batch.
#[derive(Clone, Debug)]
pub struct Scores<T: Element> {
    /// `[B, 1]`
    pub score: Var<T>,
    /// `[B, 2]` azimuth and elevation, for `D_I` only.
    pub pose: Option<Var<T>>,
}

impl Discriminator {
    fn new(prefix: &'static str, in_channels: usize, resolution: usize, pose_head: bool) -> Result<Self> {
        if resolution < 4 || !resolution.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "discriminator resolution {resolution} must be a power of two >= 4"
            )));
        }
        let stages = resolution.trailing_zeros() as usize - 2;
        let widths = (0..=stages).map(|s| (BASE_WIDTH << s).min(MAX_WIDTH)).collect();
        Ok(Self {
            prefix,
            in_channels,
            resolution,
            widths,
            pose_head,
        })
    }

    /// Image and pose discriminator over RGB.
    pub fn image(resolution: usize) -> Result<Self> {
        Self::new("disc_i", 3, resolution, true)
    }

    /// Image and mask discriminator over RGB plus `regions` mask channels.
    pub fn image_mask(resolution: usize, regions: usize) -> Result<Self> {
        Self::new("disc_im", 3 + regions, resolution, false)
    }

    pub fn prefix(&self) -> &'static str {
        self.prefix
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let p = self.prefix;
        let gain = 6.0 / (1.0 + SLOPE * SLOPE);
        let w0 = self.widths[0];
        store.insert(
            format!("{p}.from_input.weight"),
            uniform(rng, &[w0, self.in_channels, 1, 1], (gain / self.in_channels as f64).sqrt()),
        );
        store.insert(format!("{p}.from_input.bias"), zeros(&[w0]));
        for (n, pair) in self.widths.windows(2).enumerate() {
            let fan_in = pair[0] * 16;
            store.insert(
                format!("{p}.stage{n}.weight"),
                uniform(rng, &[pair[1], pair[0], 4, 4], (gain / fan_in as f64).sqrt()),
            );
            store.insert(format!("{p}.stage{n}.bias"), zeros(&[pair[1]]));
        }
        let flat = self.flat_features();
        let bound = (1.0 / flat as f64).sqrt();
        store.insert(format!("{p}.score.weight"), uniform(rng, &[flat, 1], bound));
        store.insert(format!("{p}.score.bias"), zeros(&[1]));
        if self.pose_head {
            store.insert(format!("{p}.pose.weight"), uniform(rng, &[flat, 2], bound));
            store.insert(format!("{p}.pose.bias"), zeros(&[2]));
        }
    }

    fn flat_features(&self) -> usize {
        self.widths.last().copied().unwrap_or(BASE_WIDTH) * 16
    }

    /// Score a `[B, C, H, W]` batch.
    pub fn forward<T: Element>(&self, b: &Binding<T>, x: &Var<T>) -> Result<Scores<T>> {
        let want = [self.in_channels, self.resolution, self.resolution];
        if x.ndim() != 4 || x.shape()[1..] != want {
            return Err(Error::shape(
                "discriminator input",
                format!("[B, {}, {}, {}]", want[0], want[1], want[2]),
                format!("{:?}", x.shape()),
            ));
        }
        let p = self.prefix;
        let bias = |name: String, c: usize| b.var(&name).reshape(&[1, c, 1, 1]);
        let mut h = x
            .conv2d(&b.var(&format!("{p}.from_input.weight")), Conv2dSpec::new(1, 0))
            .add(&bias(format!("{p}.from_input.bias"), self.widths[0]))
            .leaky_relu(SLOPE);
        for (n, pair) in self.widths.windows(2).enumerate() {
            h = h
                .conv2d(&b.var(&format!("{p}.stage{n}.weight")), Conv2dSpec::new(2, 1))
                .add(&bias(format!("{p}.stage{n}.bias"), pair[1]))
                .leaky_relu(SLOPE);
        }
        let batch = x.shape()[0];
        let flat = h.reshape(&[batch, self.flat_features()]);
        let head = |name: &str| flat.matmul(&b.var(&format!("{p}.{name}.weight"))).add(&b.var(&format!("{p}.{name}.bias")));
        Ok(Scores {
            score: head("score"),
            pose: self.pose_head.then(|| head("pose")),
        })
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean softplus of a score tensor.
pub fn gan_softplus<T: Element>(score: &Var<T>) -> Var<T> {
    score.softplus().mean()
}

/// Smooth-L1 of one difference with transition at 1.
pub fn smooth_l1(diff: f64) -> f64 {
    let a = diff.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Smooth-L1 summed over (azimuth, elevation) and averaged over the batch.
pub fn pose_loss<T: Element>(theta: &Array2<f64>, predicted: &Var<T>) -> Result<Var<T>> {
    if predicted.shape() != [theta.nrows(), 2] || theta.ncols() != 2 {
        return Err(Error::shape("pose", format!("[{}, 2]", theta.nrows()), format!("{:?}", predicted.shape())));
    }
    let target = Var::constant(theta.mapv(T::of).into_dyn());
    let diff = predicted.sub(&target);
    let inner = diff.value().mapv(|d| if d.abs() < T::one() { T::one() } else { T::zero() });
    let outer = inner.mapv(|m| T::one() - m);
    let quadratic = diff.square().scale(0.5).mul(&Var::constant(inner));
    let linear = diff.abs().add_scalar(-0.5).mul(&Var::constant(outer));
    Ok(quadratic.add(&linear).sum().scale(1.0 / theta.nrows().max(1) as f64))
}

/// Mean over the batch of `||grad_x D(x)||^2`. `real` must be a leaf that
/// requires gradients; the result is differentiable in the discriminator
/// parameters.
pub fn r1_penalty<T: Element>(score: &Var<T>, real: &Var<T>) -> Var<T> {
    let g = grad(&score.sum(), &[real], true).remove(0);
    let batch = real.shape().first().copied().unwrap_or(1).max(1);
    g.square().sum().scale(1.0 / batch as f64)
}

/// Mean of `(||g|| - 1)^2` over rows of `gradients [B, 3]`.
pub fn eikonal_loss<T: Element>(gradients: &Var<T>) -> Var<T> {
    gradients
        .square()
        .sum_axis(1, false)
        .add_scalar(1e-12)
        .sqrt()
        .add_scalar(-1.0)
        .square()
        .mean()
}

/// Mean of `exp(-100 |d|)`.
pub fn minimal_surface_loss<T: Element>(d: &Var<T>) -> Var<T> {
    d.abs().scale(-100.0).exp().mean()
}

/// A weighted objective with its unweighted terms.
#[derive(Clone, Debug)]
pub struct LossBreakdown<T: Element> {
    pub total: Var<T>,
    /// `(name, weight, value)` for every term, in summation order.
    pub terms: Vec<(&'static str, f64, f64)>,
}

impl<T: Element> LossBreakdown<T> {
    fn build(parts: Vec<(&'static str, f64, Var<T>)>) -> Self {
        let mut total: Option<Var<T>> = None;
        let mut terms = Vec::with_capacity(parts.len());
        for (name, weight, v) in parts {
            terms.push((name, weight, v.item().as_f64()));
            let weighted = if weight == 1.0 { v } else { v.scale(weight) };
            total = Some(match total {
                None => weighted,
                Some(t) => t.add(&weighted),
            });
        }
        Self {
            total: total.unwrap_or_else(|| Var::scalar(T::zero())),
            terms,
        }
    }

    pub fn total_value(&self) -> f64 {
        self.total.item().as_f64()
    }

    /// The first non-finite term, reported against `step`.
    pub fn check_finite(&self, step: u64) -> Result<()> {
        for &(term, _, value) in &self.terms {
            if !value.is_finite() {
                return Err(Error::LossNotFinite { term, value, step });
            }
        }
        Ok(())
    }
}

fn check_batch<T: Element>(what: &'static str, x: &Var<T>, batch: usize) -> Result<()> {
    if x.shape().first() != Some(&batch) {
        return Err(Error::shape(what, format!("batch {batch}"), format!("{:?}", x.shape())));
    }
    Ok(())
}

/// `E[softplus(D_I(fake))] + E[softplus(-D_I(real))] + l_reg R1(real) + l_pose L_pose(fake)`.
/// `real` must require gradients for the R1 term.
pub fn discriminator_i_loss<T: Element>(
    disc: &Discriminator,
    b: &Binding<T>,
    fake: &Var<T>,
    real: &Var<T>,
    fake_pose: &Array2<f64>,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>> {
    check_batch("fake images", fake, fake_pose.nrows())?;
    let f = disc.forward(b, fake)?;
    let r = disc.forward(b, real)?;
    let pose = f.pose.as_ref().ok_or_else(|| Error::Invalid("image discriminator has no pose head".into()))?;
    Ok(LossBreakdown::build(vec![
        ("di_fake", 1.0, gan_softplus(&f.score)),
        ("di_real", 1.0, gan_softplus(&r.score.neg())),
        ("di_r1", weights.lambda_i_reg, r1_penalty(&r.score, real)),
        ("di_pose", weights.lambda_pose, pose_loss(fake_pose, pose)?),
    ]))
}

/// `E[softplus(D_IM(fake))] + E[softplus(-D_IM(real))] + l_reg R1(real)`.
pub fn discriminator_im_loss<T: Element>(
    disc: &Discriminator,
    b: &Binding<T>,
    fake: &Var<T>,
    real: &Var<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>> {
    let f = disc.forward(b, fake)?;
    let r = disc.forward(b, real)?;
    Ok(LossBreakdown::build(vec![
        ("dim_fake", 1.0, gan_softplus(&f.score)),
        ("dim_real", 1.0, gan_softplus(&r.score.neg())),
        ("dim_r1", weights.lambda_im_reg, r1_penalty(&r.score, real)),
    ]))
}

/// Generator inputs for one objective evaluation.
pub struct GeneratorTerms<'a, T: Element> {
    /// `[B, 3, H, W]` rendered images.
    pub image: &'a Var<T>,
    /// `[B, 3 + K, H, W]` rendered images with masks.
    pub image_mask: &'a Var<T>,
    /// `[B, 2]` poses the images were rendered from.
    pub pose: &'a Array2<f64>,
    /// Signed distances at the render samples.
    pub sdf: &'a Var<T>,
    /// `[P, 3]` SDF gradients at the eikonal points.
    pub sdf_gradients: &'a Var<T>,
}

/// `E[softplus(-D_I)] + l_pose L_pose + l_IM E[softplus(-D_IM)] + l_eik L_eik + l_sur L_sur`.
pub fn generator_loss<T: Element>(
    d_i: &Discriminator,
    d_im: &Discriminator,
    b: &Binding<T>,
    inputs: GeneratorTerms<'_, T>,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>> {
    check_batch("generated images", inputs.image, inputs.pose.nrows())?;
    let si = d_i.forward(b, inputs.image)?;
    let sim = d_im.forward(b, inputs.image_mask)?;
    let pose = si.pose.as_ref().ok_or_else(|| Error::Invalid("image discriminator has no pose head".into()))?;
    Ok(LossBreakdown::build(vec![
        ("g_adv_i", 1.0, gan_softplus(&si.score.neg())),
        ("g_pose", weights.lambda_pose, pose_loss(inputs.pose, pose)?),
        ("g_adv_im", weights.lambda_im, gan_softplus(&sim.score.neg())),
        ("g_eik", weights.lambda_eik, eikonal_loss(inputs.sdf_gradients)),
        ("g_sur", weights.lambda_sur, minimal_surface_loss(inputs.sdf)),
    ]))
}

/// One-hot `[B, K, H, W]` encoding of `labels` (`B` masks of `H x W`).
pub fn one_hot<T: Element>(labels: &[Array2<u8>], regions: usize) -> Result<ArrayD<T>> {
    let (h, w) = labels.first().map(|l| l.dim()).unwrap_or((0, 0));
    let mut out = ArrayD::zeros(IxDyn(&[labels.len(), regions, h, w]));
    for (n, l) in labels.iter().enumerate() {
        if l.dim() != (h, w) {
            return Err(Error::shape("mask batch", format!("{h}x{w}"), format!("{:?}", l.dim())));
        }
        for ((i, j), &c) in l.indexed_iter() {
            if c as usize >= regions {
                return Err(Error::LabelOutOfRange {
                    label: c as u32,
                    row: i,
                    col: j,
                    limit: regions,
                });
            }
            out[[n, c as usize, i, j]] = T::one();
        }
    }
    Ok(out)
}
