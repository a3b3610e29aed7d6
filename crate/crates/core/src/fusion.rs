//! Spatial-aware fusion of the per-region fields.
//!
//! At each point the K confidences are normalized with a softmax into the
//! semantic field `m(x)`, which blends the region features. The fused
//! geometry feature drives a signed-distance head (converted to density with
//! a learnable sharpness `beta`), and the fused texture feature drives the
//! color head. [`RadianceField`] assembles all generators into one field.

use lcnerf_autograd::{Element, Var};
use ndarray::Array2;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::field_generators::{
    map_latents, style_row, GeneratorDims, GeometryGenerator, LatentBank, LatentVars,
    MappingNetwork, TextureGenerator,
};
use crate::params::{uniform, zeros, Binding, ParamStore};

/// Softmax over the K confidences of each point.
pub fn fuse_confidences<T: Element>(s: &Var<T>, regions: usize) -> Result<Var<T>> {
    if s.ndim() != 2 || s.shape()[1] != regions {
        return Err(Error::shape(
            "confidences",
            format!("[B, {regions}]"),
            format!("{:?}", s.shape()),
        ));
    }
    if !s.value().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("confidences".into()));
    }
    Ok(s.softmax(1))
}

/// `sum_i m[:, i] * f_i` for `f_stack[i]` of shape `[B, F]`.
pub fn fuse_features<T: Element>(m: &Var<T>, f_stack: &[Var<T>]) -> Result<Var<T>> {
    if m.ndim() != 2 || m.shape()[1] != f_stack.len() || f_stack.is_empty() {
        return Err(Error::shape(
            "fusion weights",
            format!("[B, {}]", f_stack.len()),
            format!("{:?}", m.shape()),
        ));
    }
    let want = f_stack[0].shape().to_vec();
    if want.len() != 2 || want[0] != m.shape()[0] {
        return Err(Error::shape("region feature", format!("[{}, F]", m.shape()[0]), format!("{want:?}")));
    }
    for f in &f_stack[1..] {
        if f.shape() != want.as_slice() {
            return Err(Error::shape("region feature", format!("{want:?}"), format!("{:?}", f.shape())));
        }
    }
    Ok(fuse_unchecked(m, f_stack))
}

fn fuse_unchecked<T: Element>(m: &Var<T>, f_stack: &[Var<T>]) -> Var<T> {
    let mut acc = m.narrow(1, 0, 1).mul(&f_stack[0]);
    for (i, f) in f_stack.iter().enumerate().skip(1) {
        acc = acc.add(&m.narrow(1, i, 1).mul(f));
    }
    acc
}

/// `sigma = sigmoid(-d / beta) / beta`; density is high inside the surface.
pub fn sdf_to_density<T: Element>(d: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
    if beta.len() != 1 {
        return Err(Error::shape("beta", "scalar", format!("{:?}", beta.shape())));
    }
    let b = beta.value().iter().next().copied().unwrap_or(T::zero());
    if !(b > T::zero()) {
        return Err(Error::Invalid(format!("beta must be positive, got {b}")));
    }
    Ok(d.neg().div(beta).sigmoid().div(beta))
}

/// Scalar form of [`sdf_to_density`].
pub fn density(d: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Invalid(format!("beta must be positive, got {beta}")));
    }
    let x = -d / beta;
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    Ok(s / beta)
}

/// Per-point geometry record.
#[derive(Clone, Debug)]
pub struct GeometrySample<T: Element> {
    /// `[B, K]` pre-softmax confidences.
    pub s: Var<T>,
    /// `[B, K]` fused semantic mask.
    pub m: Var<T>,
    /// Per-region `[B, F_g]` features.
    pub region_features: Vec<Var<T>>,
    /// `[B, F_g]` fused feature.
    pub f_g: Var<T>,
    /// `[B, 1]` signed distance.
    pub d: Var<T>,
}

/// Full per-point record.
#[derive(Clone, Debug)]
pub struct FieldSample<T: Element> {
    pub s: Var<T>,
    pub m: Var<T>,
    pub f_g: Var<T>,
    /// `[B, F_t]` fused texture feature.
    pub f_t: Var<T>,
    pub d: Var<T>,
    /// `[B, 1]` density.
    pub sigma: Var<T>,
    /// `[B, 3]` color in `[0, 1]`.
    pub c: Var<T>,
}

/// All generators, the mapping networks and the fusion heads.
#[derive(Clone, Debug)]
pub struct RadianceField {
    config: ModelConfig,
    geometry: Vec<GeometryGenerator>,
    texture: Vec<TextureGenerator>,
}

impl RadianceField {
    pub fn new(config: &ModelConfig) -> Self {
        let dims = GeneratorDims::from(config);
        Self {
            config: config.clone(),
            geometry: (0..config.regions).map(|i| GeometryGenerator::new(i, dims)).collect(),
            texture: (0..config.regions).map(|i| TextureGenerator::new(i, dims)).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn regions(&self) -> usize {
        self.config.regions
    }

    pub fn geometry_generator(&self, i: usize) -> &GeometryGenerator {
        &self.geometry[i]
    }

    pub fn texture_generator(&self, i: usize) -> &TextureGenerator {
        &self.texture[i]
    }

    /// Fresh parameters for every entry the field reads.
    pub fn init_params<T: Element, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let c = &self.config;
        let mut store = ParamStore::new();
        MappingNetwork::geometry(c).init(&mut store, rng);
        MappingNetwork::texture(c).init(&mut store, rng);
        for (g, t) in self.geometry.iter().zip(&self.texture) {
            g.init(&mut store, rng);
            t.init(&mut store, rng);
        }
        let fg = c.geo_feature_dim as f64;
        let ft = c.tex_feature_dim as f64;
        store.insert("fuse.sdf_head.weight", uniform(rng, &[c.geo_feature_dim, 1], (1.0 / fg).sqrt()));
        store.insert("fuse.sdf_head.bias", zeros(&[1]));
        store.insert("fuse.color_head.weight", uniform(rng, &[c.tex_feature_dim, 3], (1.0 / ft).sqrt()));
        store.insert("fuse.color_head.bias", zeros(&[3]));
        store.insert(
            "fuse.rho",
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), T::of(c.beta_init.ln())),
        );
        store
    }

    pub fn map_latents<T: Element>(&self, store: &ParamStore<T>, z_g: &Array2<T>, z_t: &Array2<T>) -> Result<LatentBank<T>> {
        map_latents(store, &self.config, z_g, z_t)
    }

    /// `beta = exp(rho)`.
    pub fn beta<T: Element>(&self, b: &Binding<T>) -> Var<T> {
        b.var("fuse.rho").exp()
    }

    pub fn beta_value<T: Element>(&self, store: &ParamStore<T>) -> f64 {
        store
            .get("fuse.rho")
            .and_then(|a| a.iter().next().copied())
            .map(|r| r.as_f64().exp())
            .unwrap_or(f64::NAN)
    }

    fn check_styles<T: Element>(&self, what: &'static str, w: &Var<T>) -> Result<()> {
        let want = [self.config.regions, self.config.style_dim];
        if w.shape() != want {
            return Err(Error::shape(what, format!("{want:?}"), format!("{:?}", w.shape())));
        }
        Ok(())
    }

    fn check_points<T: Element>(what: &'static str, x: &Var<T>) -> Result<()> {
        if x.ndim() != 2 || x.shape()[1] != 3 {
            return Err(Error::shape(what, "[B, 3]", format!("{:?}", x.shape())));
        }
        if !x.value().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }

    /// Geometry branch only: confidences, mask, features and SDF.
    pub fn geometry<T: Element>(&self, b: &Binding<T>, w_g: &Var<T>, x: &Var<T>) -> Result<GeometrySample<T>> {
        self.check_styles("geometry styles", w_g)?;
        Self::check_points("sample points", x)?;
        Ok(self.geometry_unchecked(b, w_g, x))
    }

    pub(crate) fn geometry_unchecked<T: Element>(&self, b: &Binding<T>, w_g: &Var<T>, x: &Var<T>) -> GeometrySample<T> {
        let mut confidences = Vec::with_capacity(self.geometry.len());
        let mut region_features = Vec::with_capacity(self.geometry.len());
        for (i, g) in self.geometry.iter().enumerate() {
            let (s_i, f_i) = g.forward_unchecked(b, x, &style_row(w_g, i));
            confidences.push(s_i);
            region_features.push(f_i);
        }
        let s = Var::concat(&confidences, 1);
        let m = s.softmax(1);
        let f_g = fuse_unchecked(&m, &region_features);
        let d = f_g
            .matmul(&b.var("fuse.sdf_head.weight"))
            .add(&b.var("fuse.sdf_head.bias"));
        GeometrySample {
            s,
            m,
            region_features,
            f_g,
            d,
        }
    }

    /// Evaluate the whole field at points `x [B, 3]` seen along unit
    /// directions `dirs [B, 3]`.
    pub fn sample<T: Element>(&self, b: &Binding<T>, latents: &LatentVars<T>, x: &Var<T>, dirs: &Var<T>) -> Result<FieldSample<T>> {
        self.check_styles("geometry styles", &latents.w_g)?;
        self.check_styles("texture styles", &latents.w_t)?;
        Self::check_points("sample points", x)?;
        Self::check_points("view directions", dirs)?;
        if x.shape()[0] != dirs.shape()[0] {
            return Err(Error::shape("view directions", x.shape()[0], dirs.shape()[0]));
        }
        Ok(self.sample_unchecked(b, latents, x, dirs))
    }

    pub(crate) fn sample_unchecked<T: Element>(&self, b: &Binding<T>, latents: &LatentVars<T>, x: &Var<T>, dirs: &Var<T>) -> FieldSample<T> {
        let geo = self.geometry_unchecked(b, &latents.w_g, x);
        let textures: Vec<Var<T>> = self
            .texture
            .iter()
            .enumerate()
            .map(|(i, t)| t.forward_unchecked(b, &geo.region_features[i], dirs, &style_row(&latents.w_t, i)))
            .collect();
        let f_t = fuse_unchecked(&geo.m, &textures);
        let beta = self.beta(b);
        let sigma = geo.d.neg().div(&beta).sigmoid().div(&beta);
        let c = f_t
            .matmul(&b.var("fuse.color_head.weight"))
            .add(&b.var("fuse.color_head.bias"))
            .sigmoid();
        FieldSample {
            s: geo.s,
            m: geo.m,
            f_g: geo.f_g,
            f_t,
            d: geo.d,
            sigma,
            c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcnerf_autograd::grad;
    use ndarray::{arr2, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(v: ArrayD<f64>) -> Var<f64> {
        Var::constant(v)
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            regions: 3,
            noise_dim: 6,
            style_dim: 5,
            hidden_dim: 6,
            geo_feature_dim: 4,
            tex_feature_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn softmax_examples() {
        let m = fuse_confidences(&c(arr2(&[[0.0, 0.0, 0.0]]).into_dyn()), 3).unwrap();
        for &v in m.value() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = fuse_confidences(&c(arr2(&[[2f64.ln(), 0.0]]).into_dyn()), 2).unwrap();
        let v: Vec<f64> = m.value().iter().copied().collect();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(fuse_confidences(&c(arr2(&[[0.0, 0.0]]).into_dyn()), 3).is_err());
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: ArrayD<f64> = uniform(&mut rng, &[20, 5], 8.0);
        let m = fuse_confidences(&c(s.clone()), 5).unwrap();
        for (row, mrow) in s.rows().into_iter().zip(m.value().rows()) {
            // no max shift: plain exponentials are exact enough at |s| <= 8
            let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
            let z: f64 = e.iter().sum();
            for (ei, mi) in e.iter().zip(mrow) {
                assert!((ei / z - mi).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn feature_fusion_examples() {
        let f0 = c(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let f1 = c(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let f2 = c(arr2(&[[-1.0, 0.5], [0.0, 9.0]]).into_dyn());
        let onehot = c(arr2(&[[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).into_dyn());
        let out = fuse_features(&onehot, &[f0.clone(), f1.clone(), f2.clone()]).unwrap();
        assert_eq!(out.value(), f1.value());

        let same = fuse_features(&c(arr2(&[[0.25, 0.25, 0.5]]).into_dyn()), &[
            c(arr2(&[[1.5, -2.0]]).into_dyn()),
            c(arr2(&[[1.5, -2.0]]).into_dyn()),
            c(arr2(&[[1.5, -2.0]]).into_dyn()),
        ])
        .unwrap();
        assert_eq!(same.value(), &arr2(&[[1.5, -2.0]]).into_dyn());

        let m = arr2(&[[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]]);
        let out = fuse_features(&c(m.clone().into_dyn()), &[f0.clone(), f1.clone(), f2.clone()]).unwrap();
        let fs = [f0.value().clone(), f1.value().clone(), f2.value().clone()];
        for p in 0..2 {
            for k in 0..2 {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += m[[p, i]] * fs[i][[p, k]];
                }
                assert!((acc - out.value()[[p, k]]).abs() <= 1e-6);
            }
        }
        assert!(fuse_features(&c(m.into_dyn()), &[f0, f1, c(ArrayD::zeros(IxDyn(&[2, 3])))]).is_err());
    }

    #[test]
    fn density_examples() {
        assert!((density(0.0, 0.1).unwrap() - 5.0).abs() < 1e-9);
        let want = 1.0 / (1.0 + 1f64.exp()) / 0.1;
        assert!((density(0.1, 0.1).unwrap() - want).abs() < 1e-12);
        assert!((density(0.1, 0.1).unwrap() - 2.6894).abs() < 1e-4);
        assert!(density(1e3, 0.1).unwrap() < 1e-300);
        assert!((density(-1e3, 0.1).unwrap() - 10.0).abs() < 1e-12);
        assert!(density(0.0, 0.0).is_err());
        let d = c(arr2(&[[0.0], [0.1]]).into_dyn());
        let s = sdf_to_density(&d, &Var::scalar(0.1)).unwrap();
        assert!((s.value()[[0, 0]] - 5.0).abs() < 1e-12);
        assert!(sdf_to_density(&d, &Var::scalar(-0.1)).is_err());
    }

    fn setup(seed: u64) -> (RadianceField, ParamStore<f64>, LatentBank<f64>) {
        let cfg = tiny();
        let field = RadianceField::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = field.init_params::<f64, _>(&mut rng);
        let (zg, zt) = crate::field_generators::sample_noise::<f64, _>(&mut rng, &cfg);
        let bank = field.map_latents(&store, &zg, &zt).unwrap();
        (field, store, bank)
    }

    fn unit_dirs(n: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let mut v: ArrayD<f64> = uniform(rng, &[n, 3], 1.0);
        for mut row in v.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        v
    }

    #[test]
    fn field_invariants_hold() {
        let (field, store, bank) = setup(1);
        let b = Binding::frozen(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = c(uniform(&mut rng, &[64, 3], 1.0));
        let v = c(unit_dirs(64, &mut rng));
        let out = field.sample(&b, &bank.to_vars(), &x, &v).unwrap();
        for row in out.m.value().rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-12 && row.iter().all(|&p| p >= 0.0));
        }
        let beta = field.beta_value(&store);
        assert!((beta - 0.1).abs() < 1e-12);
        assert!(out.sigma.value().iter().all(|&s| s > 0.0 && s < 1.0 / beta));
        assert!(out.c.value().iter().all(|&c| (0.0..=1.0).contains(&c)));

        let mut other = bank.clone();
        other.w_t.mapv_inplace(|x| -3.0 * x + 0.7);
        let out2 = field.sample(&b, &other.to_vars(), &x, &v).unwrap();
        assert_eq!(out.m.value(), out2.m.value());
        assert_eq!(out.d.value(), out2.d.value());
        assert_eq!(out.sigma.value(), out2.sigma.value());
        assert_ne!(out.c.value(), out2.c.value());
    }

    #[test]
    fn zero_heads_give_bias() {
        let (field, mut store, bank) = setup(2);
        store.get_mut("fuse.sdf_head.weight").unwrap().fill(0.0);
        store.get_mut("fuse.sdf_head.bias").unwrap().fill(0.3);
        store.get_mut("fuse.color_head.weight").unwrap().fill(0.0);
        store.get_mut("fuse.color_head.bias").unwrap().fill(0.0);
        let b = Binding::frozen(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = c(uniform(&mut rng, &[5, 3], 1.0));
        let v = c(unit_dirs(5, &mut rng));
        let out = field.sample(&b, &bank.to_vars(), &x, &v).unwrap();
        assert!(out.d.value().iter().all(|&d| d == 0.3));
        assert!(out.c.value().iter().all(|&c| c == 0.5));
    }

    #[test]
    fn sdf_gradient_matches_finite_differences() {
        let (field, store, bank) = setup(3);
        let b = Binding::frozen(&store);
        let pts = arr2(&[[0.1, -0.2, 0.3], [0.4, 0.05, -0.1]]).into_dyn();
        let x = Var::param(pts.clone());
        let d = field.geometry(&b, &bank.to_vars().w_g, &x).unwrap().d;
        let g = grad(&d.sum(), &[&x], false)[0].value().clone();
        let h = 1e-5;
        for p in 0..2 {
            for k in 0..3 {
                let eval = |delta: f64| {
                    let mut q = pts.clone();
                    q[[p, k]] += delta;
                    let d = field.geometry(&b, &bank.to_vars().w_g, &c(q)).unwrap().d;
                    d.value()[[p, 0]]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - g[[p, k]]).abs() / fd.abs().max(g[[p, k]].abs()).max(1e-6);
                assert!(rel <= 1e-3, "p={p} k={k} fd={fd} ad={}", g[[p, k]]);
            }
        }
    }

    #[test]
    fn color_gradient_matches_finite_differences() {
        let (field, store, bank) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = c(uniform(&mut rng, &[3, 3], 0.5));
        let v = c(unit_dirs(3, &mut rng));
        let name = "fuse.color_head.weight";
        let b = Binding::with(&store, |n| n == name);
        let out = field.sample(&b, &bank.to_vars(), &x, &v).unwrap();
        let w = b.var(name);
        let g = grad(&out.c.sum(), &[&w], false)[0].value().clone();
        let h = 1e-5;
        for (idx, &ad) in g.indexed_iter() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(name).unwrap()[&idx] += delta;
                let b = Binding::frozen(&s);
                field.sample(&b, &bank.to_vars(), &x, &v).unwrap().c.value().sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6) <= 1e-3);
        }
    }
}
