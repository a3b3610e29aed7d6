//! Pinhole cameras, ray sampling and the discrete volume-rendering
//! quadrature that turns the radiance field into an image and a K-channel
//! semantic mask sharing the same compositing weights.

use std::ops::Range;

use lcnerf_autograd::{no_grad, Element, Var};
use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, RngCore};

use crate::config::RenderConfig;
use crate::error::{Error, Result};
use crate::field_generators::{LatentBank, LatentVars};
use crate::fusion::RadianceField;
use crate::params::{Binding, ParamStore};

/// Camera orbiting `look_at` at fixed distance. Right-handed, y up; at zero
/// azimuth and elevation it sits on +z looking down -z. Positive azimuth
/// moves it towards +x, positive elevation towards +y.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    /// Vertical field of view, radians.
    pub fov: f64,
    pub look_at: [f64; 3],
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn from_config(azimuth: f64, elevation: f64, config: &RenderConfig) -> Self {
        Self {
            azimuth,
            elevation,
            radius: config.radius,
            fov: config.fov,
            look_at: [0.0; 3],
            height: config.resolution,
            width: config.resolution,
        }
    }

    pub fn with_resolution(mut self, size: usize) -> Self {
        self.height = size;
        self.width = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::Invalid(format!("field of view {} is outside (0, pi)", self.fov)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("camera resolution must be at least 1x1".into()));
        }
        if ![self.azimuth, self.elevation, self.radius].iter().all(|v| v.is_finite()) || !(self.radius > 0.0) {
            return Err(Error::Invalid("camera pose must be finite with positive radius".into()));
        }
        if self.elevation.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Invalid(format!("elevation {} must be inside (-pi/2, pi/2)", self.elevation)));
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [
            self.look_at[0] + self.radius * ce * sa,
            self.look_at[1] + self.radius * se,
            self.look_at[2] + self.radius * ce * ca,
        ]
    }

    /// `(right, up, forward)` unit vectors.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let p = self.position();
        let forward = normalize(sub(self.look_at, p));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        (right, up, forward)
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// One ray per pixel in row-major order (row 0 at the top).
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Array2<f64>,
    pub directions: Array2<f64>,
    pub near: f64,
    pub far: f64,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, range: Range<usize>) -> RayBatch {
        RayBatch {
            origins: self.origins.slice(s![range.clone(), ..]).to_owned(),
            directions: self.directions.slice(s![range, ..]).to_owned(),
            near: self.near,
            far: self.far,
        }
    }
}

pub fn generate_rays(camera: &Camera, near: f64, far: f64) -> Result<RayBatch> {
    camera.validate()?;
    if !(near >= 0.0 && near < far) {
        return Err(Error::Invalid(format!("ray bounds [{near}, {far}] are not increasing")));
    }
    let (h, w) = (camera.height, camera.width);
    let (right, up, forward) = camera.basis();
    let tan = (camera.fov / 2.0).tan();
    let aspect = w as f64 / h as f64;
    let origin = camera.position();
    let mut origins = Array2::zeros((h * w, 3));
    let mut directions = Array2::zeros((h * w, 3));
    for i in 0..h {
        let y = (1.0 - 2.0 * (i as f64 + 0.5) / h as f64) * tan;
        for j in 0..w {
            let x = (2.0 * (j as f64 + 0.5) / w as f64 - 1.0) * tan * aspect;
            let d = normalize([
                forward[0] + x * right[0] + y * up[0],
                forward[1] + x * right[1] + y * up[1],
                forward[2] + x * right[2] + y * up[2],
            ]);
            let p = i * w + j;
            for k in 0..3 {
                origins[[p, k]] = origin[k];
                directions[[p, k]] = d[k];
            }
        }
    }
    Ok(RayBatch {
        origins,
        directions,
        near,
        far,
    })
}

/// Depth samples `[P, N]` and their spacings. Without an RNG every sample is
/// the midpoint of one of `N` equal bins; with one, each is drawn uniformly
/// inside its bin. The last spacing is the bin width.
pub fn sample_depths(rays: &RayBatch, n: usize, rng: Option<&mut dyn RngCore>) -> Result<(Array2<f64>, Array2<f64>)> {
    if n == 0 {
        return Err(Error::Invalid("at least one sample per ray is required".into()));
    }
    let p = rays.len();
    let bin = (rays.far - rays.near) / n as f64;
    let depths = match rng {
        None => Array2::from_shape_fn((p, n), |(_, j)| rays.near + (j as f64 + 0.5) * bin),
        Some(rng) => {
            let mut out = Array2::zeros((p, n));
            for r in 0..p {
                for j in 0..n {
                    let u: f64 = rng.gen();
                    out[[r, j]] = rays.near + (j as f64 + u) * bin;
                }
            }
            out
        }
    };
    let mut deltas = Array2::from_elem((p, n), bin);
    for r in 0..p {
        for j in 0..n.saturating_sub(1) {
            deltas[[r, j]] = depths[[r, j + 1]] - depths[[r, j]];
        }
    }
    Ok((depths, deltas))
}

/// Per-ray outputs of the quadrature.
#[derive(Clone, Debug)]
pub struct Composite<T: Element> {
    /// `[P, 3]`
    pub color: Var<T>,
    /// `[P, K]`
    pub mask: Var<T>,
    /// `[P, 1]`
    pub alpha: Var<T>,
    /// `[P, N]`
    pub weights: Var<T>,
}

/// `w_j = T_j (1 - exp(-sigma_j delta_j))` with `T_j = exp(-sum_{l<j} sigma_l delta_l)`;
/// color, mask and alpha are the `w`-weighted sums of `c`, `m` and 1.
pub fn composite<T: Element>(sigma: &Var<T>, c: &Var<T>, m: &Var<T>, deltas: &Array2<f64>) -> Result<Composite<T>> {
    let (p, n) = deltas.dim();
    if sigma.shape() != [p, n] {
        return Err(Error::shape("densities", format!("[{p}, {n}]"), format!("{:?}", sigma.shape())));
    }
    if c.ndim() != 3 || c.shape()[..2] != [p, n] || c.shape()[2] != 3 {
        return Err(Error::shape("colors", format!("[{p}, {n}, 3]"), format!("{:?}", c.shape())));
    }
    if m.ndim() != 3 || m.shape()[..2] != [p, n] {
        return Err(Error::shape("mask samples", format!("[{p}, {n}, K]"), format!("{:?}", m.shape())));
    }
    if let Some(bad) = sigma.value().iter().find(|s| !(**s >= T::zero())) {
        return Err(Error::Invalid(format!("density must be non-negative, got {bad}")));
    }
    Ok(composite_unchecked(sigma, c, m, deltas))
}

fn composite_unchecked<T: Element>(sigma: &Var<T>, c: &Var<T>, m: &Var<T>, deltas: &Array2<f64>) -> Composite<T> {
    let (p, n) = deltas.dim();
    let delta = Var::constant(deltas.mapv(T::of).into_dyn());
    let tau = sigma.mul(&delta);
    let transmittance = tau.cumsum(1, true, false).neg().exp();
    let opacity = tau.neg().exp().neg().add_scalar(1.0);
    let weights = transmittance.mul(&opacity);
    let w3 = weights.reshape(&[p, n, 1]);
    let color = w3.mul(c).sum_axis(1, false);
    let mask = w3.mul(m).sum_axis(1, false);
    let alpha = weights.sum_axis(1, true);
    Composite {
        color,
        mask,
        alpha,
        weights,
    }
}

/// Stratified sampling draws from this RNG; `None` renders at bin midpoints.
pub type Sampling<'a> = Option<&'a mut dyn RngCore>;

/// Differentiable render of one view.
#[derive(Clone, Debug)]
pub struct RenderOutput<T: Element> {
    pub height: usize,
    pub width: usize,
    pub composite: Composite<T>,
    /// Sample points `[P * N, 3]`.
    pub points: Array2<f64>,
    /// Signed distance at every sample, `[P * N, 1]`.
    pub sdf: Var<T>,
    /// Expected depth per ray (the far bound where nothing is hit).
    pub depth: Array1<f64>,
}

impl<T: Element> RenderOutput<T> {
    /// `[P, 3]` color over a white background.
    pub fn image_on_white(&self) -> Var<T> {
        let a = &self.composite.alpha;
        self.composite.color.add(&a.neg().add_scalar(1.0))
    }

    /// `[P, K]` mask with the uncovered mass assigned to background (class 0);
    /// rows sum to one.
    pub fn mask_with_background(&self) -> Var<T> {
        let k = self.composite.mask.shape()[1];
        let rest = self.composite.alpha.neg().add_scalar(1.0).pad_axis(1, 0, k);
        self.composite.mask.add(&rest)
    }

    pub fn to_result(&self) -> RenderResult<T> {
        let (h, w) = (self.height, self.width);
        let k = self.composite.mask.shape()[1];
        let grid = |v: &Var<T>, c: usize| -> Array3<T> {
            v.value()
                .clone()
                .into_shape_with_order(IxDyn(&[h, w, c]))
                .expect("pixel grid")
                .into_dimensionality()
                .expect("3-D")
        };
        RenderResult {
            image: grid(&self.composite.color, 3),
            mask_probs: grid(&self.composite.mask, k),
            alpha: grid(&self.composite.alpha, 1).index_axis_move(Axis(2), 0),
            depth: Array1::from_iter(self.depth.iter().map(|&d| T::of(d)))
                .into_shape_with_order((h, w))
                .expect("depth grid"),
        }
    }
}

/// `[P, C]` pixels to a `[1, C, H, W]` tensor.
pub fn pixels_to_nchw<T: Element>(x: &Var<T>, height: usize, width: usize) -> Var<T> {
    let c = x.shape()[1];
    x.t().reshape(&[1, c, height, width])
}

/// Plain-array render.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult<T: Element = f32> {
    /// `H x W x 3`, premultiplied by alpha.
    pub image: Array3<T>,
    /// `H x W x K`; sums to alpha per pixel.
    pub mask_probs: Array3<T>,
    pub alpha: Array2<T>,
    pub depth: Array2<T>,
}

impl<T: Element> RenderResult<T> {
    pub fn height(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn width(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn regions(&self) -> usize {
        self.mask_probs.shape()[2]
    }

    /// Image over a white background.
    pub fn image_on_white(&self) -> Array3<T> {
        let mut out = self.image.clone();
        for ((i, j, _), v) in out.indexed_iter_mut() {
            *v = *v + (T::one() - self.alpha[[i, j]]);
        }
        out
    }

    /// Mask with uncovered mass assigned to background.
    pub fn mask_with_background(&self) -> Array3<T> {
        let mut out = self.mask_probs.clone();
        for ((i, j), a) in self.alpha.indexed_iter() {
            out[[i, j, 0]] = out[[i, j, 0]] + (T::one() - *a);
        }
        out
    }

    /// Per-pixel argmax class (ties go to the lower id).
    pub fn labels(&self) -> Array2<u8> {
        let full = self.mask_with_background();
        Array2::from_shape_fn((self.height(), self.width()), |(i, j)| {
            let mut best = 0;
            for k in 1..full.shape()[2] {
                if full[[i, j, k]] > full[[i, j, best]] {
                    best = k;
                }
            }
            best as u8
        })
    }
}

/// Field inputs for a ray batch: points, directions and depths.
struct SamplePoints {
    points: Array2<f64>,
    dirs: Array2<f64>,
    depths: Array2<f64>,
    deltas: Array2<f64>,
}

fn sample_points(rays: &RayBatch, n: usize, rng: Sampling) -> Result<SamplePoints> {
    let (depths, deltas) = sample_depths(rays, n, rng)?;
    let p = rays.len();
    let mut points = Array2::zeros((p * n, 3));
    let mut dirs = Array2::zeros((p * n, 3));
    for r in 0..p {
        for j in 0..n {
            let t = depths[[r, j]];
            for k in 0..3 {
                points[[r * n + j, k]] = rays.origins[[r, k]] + t * rays.directions[[r, k]];
                dirs[[r * n + j, k]] = rays.directions[[r, k]];
            }
        }
    }
    Ok(SamplePoints {
        points,
        dirs,
        depths,
        deltas,
    })
}

fn to_var<T: Element>(a: &Array2<f64>) -> Var<T> {
    Var::constant(a.mapv(T::of).into_dyn())
}

fn expected_depth<T: Element>(weights: &Var<T>, depths: &Array2<f64>, far: f64) -> Array1<f64> {
    let w = weights.value();
    Array1::from_shape_fn(depths.nrows(), |r| {
        let mut acc = 0.0;
        let mut total = 0.0;
        for j in 0..depths.ncols() {
            let wj = w[[r, j]].as_f64();
            acc += wj * depths[[r, j]];
            total += wj;
        }
        if total > 1e-6 {
            acc / total
        } else {
            far
        }
    })
}

fn render_rays<T: Element>(
    field: &RadianceField,
    b: &Binding<T>,
    latents: &LatentVars<T>,
    rays: &RayBatch,
    samples: usize,
    sampling: Sampling,
) -> Result<(Composite<T>, Var<T>, SamplePoints)> {
    let pts = sample_points(rays, samples, sampling)?;
    let (p, n) = pts.depths.dim();
    let k = field.regions();
    let f = field.sample(b, latents, &to_var(&pts.points), &to_var(&pts.dirs))?;
    let sigma = f.sigma.reshape(&[p, n]);
    let c = f.c.reshape(&[p, n, 3]);
    let m = f.m.reshape(&[p, n, k]);
    let comp = composite_unchecked(&sigma, &c, &m, &pts.deltas);
    Ok((comp, f.d, pts))
}

/// Differentiable render of a full view.
pub fn render<T: Element>(
    field: &RadianceField,
    b: &Binding<T>,
    latents: &LatentVars<T>,
    camera: &Camera,
    config: &RenderConfig,
    sampling: Sampling,
) -> Result<RenderOutput<T>> {
    let rays = generate_rays(camera, config.near, config.far)?;
    let (composite, sdf, pts) = render_rays(field, b, latents, &rays, config.samples, sampling)?;
    let depth = expected_depth(&composite.weights, &pts.depths, rays.far);
    Ok(RenderOutput {
        height: camera.height,
        width: camera.width,
        composite,
        points: pts.points,
        sdf,
        depth,
    })
}

const CHUNK_RAYS: usize = 1024;

/// Gradient-free render at bin midpoints, evaluated in ray chunks to bound
/// memory.
pub fn render_view<T: Element>(
    field: &RadianceField,
    store: &ParamStore<T>,
    bank: &LatentBank<T>,
    camera: &Camera,
    config: &RenderConfig,
) -> Result<RenderResult<T>> {
    bank.check_matches(field.config())?;
    let rays = generate_rays(camera, config.near, config.far)?;
    let k = field.regions();
    let p = rays.len();
    let mut image = Array2::<T>::zeros((p, 3));
    let mut mask = Array2::<T>::zeros((p, k));
    let mut alpha = Array1::<T>::zeros(p);
    let mut depth = Array1::<f64>::zeros(p);
    no_grad(|| -> Result<()> {
        let b = Binding::frozen(store);
        let latents = bank.to_vars();
        let mut start = 0;
        while start < p {
            let end = (start + CHUNK_RAYS).min(p);
            let chunk = rays.slice(start..end);
            let (comp, _, pts) = render_rays(field, &b, &latents, &chunk, config.samples, None)?;
            let color = comp.color.value().view().into_dimensionality::<ndarray::Ix2>().expect("2-D");
            image.slice_mut(s![start..end, ..]).assign(&color);
            let m = comp.mask.value().view().into_dimensionality::<ndarray::Ix2>().expect("2-D");
            mask.slice_mut(s![start..end, ..]).assign(&m);
            for (r, a) in comp.alpha.value().iter().enumerate() {
                alpha[start + r] = *a;
            }
            let dd = expected_depth(&comp.weights, &pts.depths, rays.far);
            depth.slice_mut(s![start..end]).assign(&dd);
            start = end;
        }
        Ok(())
    })?;
    let (h, w) = (camera.height, camera.width);
    Ok(RenderResult {
        image: image.into_shape_with_order((h, w, 3)).expect("grid"),
        mask_probs: mask.into_shape_with_order((h, w, k)).expect("grid"),
        alpha: alpha.into_shape_with_order((h, w)).expect("grid"),
        depth: depth.mapv(T::of).into_shape_with_order((h, w)).expect("grid"),
    })
}

#[allow(dead_code)]
pub(crate) fn flat_pixels<T: Element>(a: &ArrayD<T>) -> Array2<T> {
    let c = a.shape()[a.ndim() - 1];
    let p = a.len() / c;
    a.clone().into_shape_with_order((p, c)).expect("flatten")
}
