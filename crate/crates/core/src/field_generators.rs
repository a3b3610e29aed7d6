//! Per-region geometry and texture generators and the latent mapping.
//!
//! Every region `i` owns a geometry network (six style-modulated sine
//! layers) producing a pre-softmax confidence `s_i(x)` and a geometry feature
//! `f_{g_i}(x)`, and a texture network (four modulated sine layers) that
//! reads `f_{g_i}(x)` and the view direction. Styles modulate each layer's
//! frequency and phase through an affine map of the region's latent row.

use lcnerf_autograd::{Element, Var};
use ndarray::{Array2, Axis};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{uniform, zeros, Binding, ParamStore};

pub const GEOMETRY_LAYERS: usize = 6;
pub const TEXTURE_LAYERS: usize = 4;
pub const MAPPING_LAYERS: usize = 3;
const MAPPING_SLOPE: f64 = 0.2;

/// Geometry and texture style vectors for every region.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBank<T: Element = f32> {
    /// `K x L_w` geometry styles.
    pub w_g: Array2<T>,
    /// `K x L_w` texture styles.
    pub w_t: Array2<T>,
}

impl<T: Element> LatentBank<T> {
    pub fn new(w_g: Array2<T>, w_t: Array2<T>) -> Result<Self> {
        if w_g.dim() != w_t.dim() {
            return Err(Error::shape(
                "latent bank",
                format!("{:?}", w_g.dim()),
                format!("{:?}", w_t.dim()),
            ));
        }
        let bank = Self { w_g, w_t };
        if !bank.is_finite() {
            return Err(Error::NonFinite("latent bank".into()));
        }
        Ok(bank)
    }

    pub fn zeros(regions: usize, style_dim: usize) -> Self {
        Self {
            w_g: Array2::zeros((regions, style_dim)),
            w_t: Array2::zeros((regions, style_dim)),
        }
    }

    pub fn regions(&self) -> usize {
        self.w_g.nrows()
    }

    pub fn style_dim(&self) -> usize {
        self.w_g.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_g.iter().chain(self.w_t.iter()).all(|x| x.is_finite())
    }

    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        let want = (config.regions, config.style_dim);
        if self.w_g.dim() != want || self.w_t.dim() != want {
            return Err(Error::shape(
                "latent bank",
                format!("{want:?}"),
                format!("{:?}", self.w_g.dim()),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> LatentBank<U> {
        LatentBank {
            w_g: self.w_g.mapv(|x| U::of(x.as_f64())),
            w_t: self.w_t.mapv(|x| U::of(x.as_f64())),
        }
    }

    /// Constant graph leaves for both halves.
    pub fn to_vars(&self) -> LatentVars<T> {
        LatentVars {
            w_g: Var::constant(self.w_g.clone().into_dyn()),
            w_t: Var::constant(self.w_t.clone().into_dyn()),
        }
    }

    /// Differentiable leaves for both halves.
    pub fn to_params(&self) -> LatentVars<T> {
        LatentVars {
            w_g: Var::param(self.w_g.clone().into_dyn()),
            w_t: Var::param(self.w_t.clone().into_dyn()),
        }
    }
}

/// Latent bank as graph values.
#[derive(Clone, Debug)]
pub struct LatentVars<T: Element> {
    pub w_g: Var<T>,
    pub w_t: Var<T>,
}

/// Widths shared by all region generators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorDims {
    pub style: usize,
    pub hidden: usize,
    pub geo_feature: usize,
    pub tex_feature: usize,
    pub first_omega: f64,
}

impl From<&ModelConfig> for GeneratorDims {
    fn from(c: &ModelConfig) -> Self {
        Self {
            style: c.style_dim,
            hidden: c.hidden_dim,
            geo_feature: c.geo_feature_dim,
            tex_feature: c.tex_feature_dim,
            first_omega: c.first_omega,
        }
    }
}

/// Sine layer whose frequency and phase are set by a style vector:
/// `h' = sin(omega * gamma * (h W + b) + beta)` with `(gamma - 1, beta)`
/// an affine function of the style.
#[derive(Clone, Debug)]
struct SineLayer {
    prefix: String,
    input: usize,
    width: usize,
    omega: f64,
}

impl SineLayer {
    fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, style: usize, first: bool) {
        let bound = if first {
            1.0 / self.input as f64
        } else {
            (6.0 / self.input as f64).sqrt()
        };
        let p = &self.prefix;
        store.insert(format!("{p}.weight"), uniform(rng, &[self.input, self.width], bound));
        store.insert(
            format!("{p}.bias"),
            uniform(rng, &[self.width], 1.0 / (self.input as f64).sqrt()),
        );
        store.insert(
            format!("{p}.film.weight"),
            uniform(rng, &[style, 2 * self.width], 1.0 / (style as f64).sqrt()),
        );
        store.insert(format!("{p}.film.bias"), zeros(&[2 * self.width]));
    }

    fn forward<T: Element>(&self, b: &Binding<T>, h: &Var<T>, style: &Var<T>) -> Var<T> {
        let p = &self.prefix;
        let film = style
            .matmul(&b.var(&format!("{p}.film.weight")))
            .add(&b.var(&format!("{p}.film.bias")));
        let gamma = film.narrow(1, 0, self.width).add_scalar(1.0);
        let beta = film.narrow(1, self.width, self.width);
        // omega * gamma * (hW + b) + beta, folded so that only two full-size
        // elementwise ops follow the matmul.
        let scale = gamma.scale(self.omega);
        let shift = b.var(&format!("{p}.bias")).mul(&scale).add(&beta);
        h.matmul(&b.var(&format!("{p}.weight")))
            .mul(&scale)
            .add(&shift)
            .sin()
    }
}

fn affine_init<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, input: usize, output: usize, bound: f64) {
    store.insert(format!("{prefix}.weight"), uniform(rng, &[input, output], bound));
    store.insert(format!("{prefix}.bias"), zeros(&[output]));
}

fn affine<T: Element>(b: &Binding<T>, prefix: &str, x: &Var<T>) -> Var<T> {
    x.matmul(&b.var(&format!("{prefix}.weight")))
        .add(&b.var(&format!("{prefix}.bias")))
}

fn check_points<T: Element>(what: &'static str, x: &Var<T>, width: usize) -> Result<()> {
    if x.ndim() != 2 || x.shape()[1] != width {
        return Err(Error::shape(what, format!("[B, {width}]"), format!("{:?}", x.shape())));
    }
    if !x.value().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Geometry network of one region.
#[derive(Clone, Debug)]
pub struct GeometryGenerator {
    region: usize,
    dims: GeneratorDims,
    layers: Vec<SineLayer>,
}

impl GeometryGenerator {
    pub fn new(region: usize, dims: GeneratorDims) -> Self {
        let layers = (0..GEOMETRY_LAYERS)
            .map(|n| SineLayer {
                prefix: format!("geo.{region}.layer{n}"),
                input: if n == 0 { 3 } else { dims.hidden },
                width: dims.hidden,
                omega: if n == 0 { dims.first_omega } else { 1.0 },
            })
            .collect();
        Self { region, dims, layers }
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for (n, layer) in self.layers.iter().enumerate() {
            layer.init(store, rng, self.dims.style, n == 0);
        }
        let h = self.dims.hidden as f64;
        let fg = self.dims.geo_feature as f64;
        let r = self.region;
        affine_init(store, rng, &format!("geo.{r}.feature"), self.dims.hidden, self.dims.geo_feature, (6.0 / h).sqrt());
        affine_init(store, rng, &format!("geo.{r}.confidence"), self.dims.geo_feature, 1, (1.0 / fg).sqrt());
    }

    /// `(s_i [B, 1], f_g_i [B, F_g])` for points `x [B, 3]` and style `[1, L_w]`.
    pub fn forward<T: Element>(&self, b: &Binding<T>, x: &Var<T>, style: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        check_points("geometry input points", x, 3)?;
        Ok(self.forward_unchecked(b, x, style))
    }

    pub(crate) fn forward_unchecked<T: Element>(&self, b: &Binding<T>, x: &Var<T>, style: &Var<T>) -> (Var<T>, Var<T>) {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(b, &h, style);
        }
        let r = self.region;
        let feature = affine(b, &format!("geo.{r}.feature"), &h);
        let confidence = affine(b, &format!("geo.{r}.confidence"), &feature);
        (confidence, feature)
    }
}

/// Texture network of one region.
#[derive(Clone, Debug)]
pub struct TextureGenerator {
    region: usize,
    dims: GeneratorDims,
    layers: Vec<SineLayer>,
}

impl TextureGenerator {
    pub fn new(region: usize, dims: GeneratorDims) -> Self {
        let layers = (0..TEXTURE_LAYERS)
            .map(|n| SineLayer {
                prefix: format!("tex.{region}.layer{n}"),
                input: if n == 0 { dims.geo_feature + 3 } else { dims.hidden },
                width: dims.hidden,
                omega: 1.0,
            })
            .collect();
        Self { region, dims, layers }
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for layer in &self.layers {
            layer.init(store, rng, self.dims.style, false);
        }
        let h = self.dims.hidden as f64;
        affine_init(store, rng, &format!("tex.{}.head", self.region), self.dims.hidden, self.dims.tex_feature, (6.0 / h).sqrt());
    }

    /// `f_t_i [B, F_t]` from geometry features `[B, F_g]`, unit view directions
    /// `[B, 3]` and style `[1, L_w]`.
    pub fn forward<T: Element>(&self, b: &Binding<T>, f_g: &Var<T>, dirs: &Var<T>, style: &Var<T>) -> Result<Var<T>> {
        if f_g.ndim() != 2 || f_g.shape()[1] != self.dims.geo_feature {
            return Err(Error::shape(
                "texture input feature",
                format!("[B, {}]", self.dims.geo_feature),
                format!("{:?}", f_g.shape()),
            ));
        }
        check_points("view directions", dirs, 3)?;
        if dirs.shape()[0] != f_g.shape()[0] {
            return Err(Error::shape("view directions", f_g.shape()[0], dirs.shape()[0]));
        }
        for row in dirs.value().rows() {
            let n = row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("view direction norm {n} is not 1")));
            }
        }
        Ok(self.forward_unchecked(b, f_g, dirs, style))
    }

    pub(crate) fn forward_unchecked<T: Element>(&self, b: &Binding<T>, f_g: &Var<T>, dirs: &Var<T>, style: &Var<T>) -> Var<T> {
        let mut h = Var::concat(&[f_g.clone(), dirs.clone()], 1);
        for layer in &self.layers {
            h = layer.forward(b, &h, style);
        }
        affine(b, &format!("tex.{}.head", self.region), &h)
    }
}

/// Noise-to-style MLP, shared by all regions and applied row by row.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    prefix: &'static str,
    noise_dim: usize,
    style_dim: usize,
}

impl MappingNetwork {
    pub fn geometry(config: &ModelConfig) -> Self {
        Self {
            prefix: "map.g",
            noise_dim: config.noise_dim,
            style_dim: config.style_dim,
        }
    }

    pub fn texture(config: &ModelConfig) -> Self {
        Self {
            prefix: "map.t",
            noise_dim: config.noise_dim,
            style_dim: config.style_dim,
        }
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for n in 0..MAPPING_LAYERS {
            let input = if n == 0 { self.noise_dim } else { self.style_dim };
            // unit-norm input rows: scale the first layer up so styles are O(1)
            let gain = if n == 0 { (self.noise_dim as f64).sqrt() } else { 1.0 };
            let bound = gain * (6.0 / (1.0 + MAPPING_SLOPE * MAPPING_SLOPE) / input as f64).sqrt();
            affine_init(store, rng, &format!("{}.layer{n}", self.prefix), input, self.style_dim, bound);
        }
    }

    pub fn forward<T: Element>(&self, b: &Binding<T>, z: &Var<T>) -> Var<T> {
        let norm = z.square().sum_axis(1, true).add_scalar(1e-8).sqrt();
        let mut h = z.div(&norm);
        for n in 0..MAPPING_LAYERS {
            h = affine(b, &format!("{}.layer{n}", self.prefix), &h).leaky_relu(MAPPING_SLOPE);
        }
        h
    }
}

/// Map per-region noise (`K x L_z` each) to a latent bank.
pub fn map_latents<T: Element>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    z_g: &Array2<T>,
    z_t: &Array2<T>,
) -> Result<LatentBank<T>> {
    let want = (config.regions, config.noise_dim);
    for (what, z) in [("geometry noise", z_g), ("texture noise", z_t)] {
        if z.dim() != want {
            return Err(Error::shape(what, format!("{want:?}"), format!("{:?}", z.dim())));
        }
        if !z.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
    }
    let b = Binding::frozen(store);
    let run = |net: MappingNetwork, z: &Array2<T>| -> Array2<T> {
        let w = net.forward(&b, &Var::constant(z.clone().into_dyn()));
        w.value()
            .clone()
            .into_dimensionality()
            .expect("mapping output is 2-D")
    };
    let w_g = run(MappingNetwork::geometry(config), z_g);
    let w_t = run(MappingNetwork::texture(config), z_t);
    LatentBank::new(w_g, w_t)
}

/// Standard normal noise for both branches.
pub fn sample_noise<T: Element, R: Rng>(rng: &mut R, config: &ModelConfig) -> (Array2<T>, Array2<T>) {
    use rand_distr::StandardNormal;
    let mut draw = || {
        Array2::from_shape_simple_fn((config.regions, config.noise_dim), || {
            T::of(rng.sample::<f64, _>(StandardNormal))
        })
    };
    let z_g = draw();
    let z_t = draw();
    (z_g, z_t)
}

/// Average of mapped styles over `n` noise draws, used as an inversion start.
pub fn mean_latents<T: Element, R: Rng>(store: &ParamStore<T>, config: &ModelConfig, rng: &mut R, n: usize) -> Result<LatentBank<T>> {
    let mut acc = LatentBank::<f64>::zeros(config.regions, config.style_dim);
    for _ in 0..n.max(1) {
        let (zg, zt) = sample_noise::<T, _>(rng, config);
        let bank = map_latents(store, config, &zg, &zt)?;
        acc.w_g += &bank.w_g.mapv(|x| x.as_f64());
        acc.w_t += &bank.w_t.mapv(|x| x.as_f64());
    }
    let n = n.max(1) as f64;
    acc.w_g.mapv_inplace(|x| x / n);
    acc.w_t.mapv_inplace(|x| x / n);
    Ok(acc.cast())
}

/// Row `i` of a `[K, L_w]` style matrix as `[1, L_w]`.
pub(crate) fn style_row<T: Element>(w: &Var<T>, i: usize) -> Var<T> {
    w.narrow(0, i, 1)
}

#[allow(dead_code)]
pub(crate) fn row_of<T: Element>(a: &Array2<T>, i: usize) -> Array2<T> {
    a.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            regions: 3,
            noise_dim: 8,
            style_dim: 6,
            hidden_dim: 5,
            geo_feature_dim: 4,
            tex_feature_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn store(config: &ModelConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = GeneratorDims::from(config);
        let mut s = ParamStore::new();
        MappingNetwork::geometry(config).init(&mut s, &mut rng);
        MappingNetwork::texture(config).init(&mut s, &mut rng);
        for i in 0..config.regions {
            GeometryGenerator::new(i, dims).init(&mut s, &mut rng);
            TextureGenerator::new(i, dims).init(&mut s, &mut rng);
        }
        s
    }

    fn zeroed(store: &ParamStore<f64>) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        for (k, v) in store.iter() {
            out.insert(k, v.mapv(|_| 0.0));
        }
        out
    }

    fn points(n: usize, seed: u64) -> Var<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(uniform(&mut rng, &[n, 3], 0.8))
    }

    #[test]
    fn layer_counts_match_architecture() {
        let c = small_config();
        let s = store(&c, 0);
        let geo = s.names().filter(|n| n.starts_with("geo.0.layer") && n.ends_with(".weight") && !n.contains("film")).count();
        let tex = s.names().filter(|n| n.starts_with("tex.0.layer") && n.ends_with(".weight") && !n.contains("film")).count();
        assert_eq!((geo, tex), (6, 4));
    }

    #[test]
    fn zero_origin_noise_gives_identical_rows() {
        let c = small_config();
        let s = store(&c, 1);
        let z = Array2::zeros((3, 8));
        let bank = map_latents(&s, &c, &z, &z).unwrap();
        for i in 1..3 {
            assert_eq!(bank.w_g.row(0), bank.w_g.row(i));
            assert_eq!(bank.w_t.row(0), bank.w_t.row(i));
        }
    }

    #[test]
    fn mapping_is_deterministic_and_row_independent() {
        let c = small_config();
        let s = store(&c, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (zg, zt) = sample_noise::<f64, _>(&mut rng, &c);
        let a = map_latents(&s, &c, &zg, &zt).unwrap();
        let b = map_latents(&s, &c, &zg, &zt).unwrap();
        assert_eq!(a, b);
        let mut zg2 = zg.clone();
        zg2.row_mut(1).mapv_inplace(|x| x + 0.5);
        let c2 = map_latents(&s, &c, &zg2, &zt).unwrap();
        assert_eq!(c2.w_t, a.w_t);
        assert_eq!(c2.w_g.row(0), a.w_g.row(0));
        assert_eq!(c2.w_g.row(2), a.w_g.row(2));
        assert_ne!(c2.w_g.row(1), a.w_g.row(1));
    }

    #[test]
    fn mapping_rejects_wrong_region_count() {
        let c = small_config();
        let s = store(&c, 3);
        let z = Array2::zeros((2, 8));
        assert!(matches!(map_latents(&s, &c, &z, &z), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_geometry_network_outputs_head_bias() {
        let c = small_config();
        let mut s = zeroed(&store(&c, 4));
        s.get_mut("geo.1.confidence.bias").unwrap().fill(0.75);
        let g = GeometryGenerator::new(1, GeneratorDims::from(&c));
        let b = Binding::frozen(&s);
        let style = Var::constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 6]), 0.3));
        let (conf, feat) = g.forward(&b, &points(7, 0), &style).unwrap();
        assert!(conf.value().iter().all(|&v| v == 0.75));
        assert!(feat.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_texture_network_ignores_view() {
        let c = small_config();
        let mut s = zeroed(&store(&c, 5));
        s.get_mut("tex.0.head.bias").unwrap().fill(-0.5);
        let t = TextureGenerator::new(0, GeneratorDims::from(&c));
        let b = Binding::frozen(&s);
        let style = Var::constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 6]), 1.0));
        let fg = Var::constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[2, 4]), 0.2));
        let v = Var::constant(ndarray::arr2(&[[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).into_dyn());
        let out = t.forward(&b, &fg, &v, &style).unwrap();
        assert!(out.value().iter().all(|&x| x == -0.5));
    }

    #[test]
    fn modulation_and_view_dependence_are_live() {
        let c = small_config();
        let s = store(&c, 6);
        let b = Binding::frozen(&s);
        let dims = GeneratorDims::from(&c);
        let g = GeometryGenerator::new(0, dims);
        let x = points(4, 1);
        let s1 = Var::constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 6]), 0.1));
        let s2 = Var::constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 6]), -0.4));
        let (a, fa) = g.forward(&b, &x, &s1).unwrap();
        let (bb, _) = g.forward(&b, &x, &s2).unwrap();
        assert_ne!(a.value(), bb.value());

        let t = TextureGenerator::new(0, dims);
        let v = Var::constant(ndarray::arr2(&[[0.0, 0.0, 1.0]; 4]).into_dyn());
        let f1 = t.forward(&b, &fa, &v, &s1).unwrap();
        let f2 = t.forward(&b, &fa, &v.neg(), &s1).unwrap();
        assert_ne!(f1.value(), f2.value());
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = small_config();
        let s = store(&c, 7);
        let b = Binding::frozen(&s);
        let dims = GeneratorDims::from(&c);
        let style = Var::constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 6])));
        let bad = Var::constant(ndarray::arr2(&[[f64::NAN, 0.0, 0.0]]).into_dyn());
        assert!(matches!(
            GeometryGenerator::new(0, dims).forward(&b, &bad, &style),
            Err(Error::NonFinite(_))
        ));
        let fg = Var::constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 3])));
        let v = Var::constant(ndarray::arr2(&[[0.0, 0.0, 1.0]]).into_dyn());
        assert!(matches!(
            TextureGenerator::new(0, dims).forward(&b, &fg, &v, &style),
            Err(Error::Shape { .. })
        ));
    }
}
