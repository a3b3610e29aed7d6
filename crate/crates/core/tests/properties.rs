//! Randomized invariants of the field, fusion, renderer and file formats.

use lcnerf_autograd::{no_grad, Var};
use lcnerf_core::field_generators::sample_noise;
use lcnerf_core::fusion::{density, fuse_features, sdf_to_density};
use lcnerf_core::inversion_editing::{decode_bank, encode_bank};
use lcnerf_core::volume_renderer::{composite, render_view};
use lcnerf_core::{io, Binding, Camera, LatentBank, ModelConfig, ParamStore, RadianceField, RenderConfig};
use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        regions: 3,
        noise_dim: 8,
        style_dim: 8,
        hidden_dim: 8,
        geo_feature_dim: 6,
        tex_feature_dim: 6,
        ..ModelConfig::default()
    }
}

fn setup(seed: u64) -> (RadianceField, ParamStore<f64>, LatentBank<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = RadianceField::new(&small_model());
    let params = field.init_params(&mut rng);
    let (zg, zt) = sample_noise::<f64, _>(&mut rng, field.config());
    let bank = field.map_latents(&params, &zg, &zt).unwrap();
    (field, params, bank, rng)
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Var<f64> {
    Var::constant(ArrayD::from_shape_fn(IxDyn(&[n, 3]), |_| rng.gen_range(-1.0..1.0)))
}

fn directions(rng: &mut ChaCha8Rng, n: usize) -> Var<f64> {
    let mut d = ArrayD::from_shape_fn(IxDyn(&[n, 3]), |_| rng.gen_range(-1.0..1.0f64));
    for mut row in d.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        row.mapv_inplace(|v| v / norm);
    }
    Var::constant(d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn field_samples_are_normalized_and_bounded(seed in any::<u64>()) {
        let (field, params, bank, mut rng) = setup(seed);
        let b = Binding::frozen(&params);
        let (x, dirs) = (points(&mut rng, 32), directions(&mut rng, 32));
        let f = no_grad(|| field.sample(&b, &bank.to_vars(), &x, &dirs).unwrap());
        let beta = field.beta_value(&params);
        for row in f.m.value().rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
        prop_assert!(f.sigma.value().iter().all(|&s| s > 0.0 && s < 1.0 / beta));
        prop_assert!(f.c.value().iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn texture_latents_never_reach_geometry(seed in any::<u64>()) {
        let (field, params, bank, mut rng) = setup(seed);
        let b = Binding::frozen(&params);
        let (x, dirs) = (points(&mut rng, 16), directions(&mut rng, 16));
        let other = LatentBank::new(
            bank.w_g.clone(),
            Array2::from_shape_fn(bank.w_t.dim(), |_| rng.gen_range(-3.0..3.0)),
        ).unwrap();
        let f0 = no_grad(|| field.sample(&b, &bank.to_vars(), &x, &dirs).unwrap());
        let f1 = no_grad(|| field.sample(&b, &other.to_vars(), &x, &dirs).unwrap());
        prop_assert_eq!(f0.m.value(), f1.m.value());
        prop_assert_eq!(f0.d.value(), f1.d.value());
        prop_assert_eq!(f0.sigma.value(), f1.sigma.value());
        prop_assert_eq!(f0.s.value(), f1.s.value());
    }

    #[test]
    fn geometry_latents_stay_in_their_region(seed in any::<u64>(), region in 0usize..3) {
        let (field, params, bank, mut rng) = setup(seed);
        let b = Binding::frozen(&params);
        let x = points(&mut rng, 16);
        let mut moved = bank.w_g.clone();
        moved.row_mut(region).mapv_inplace(|v| v + 0.3);
        let geo = |w: &Array2<f64>| no_grad(|| field.geometry(&b, &Var::constant(w.clone().into_dyn()), &x).unwrap());
        let (g0, g1) = (geo(&bank.w_g), geo(&moved));
        for j in (0..3).filter(|&j| j != region) {
            prop_assert_eq!(g0.region_features[j].value(), g1.region_features[j].value());
            prop_assert_eq!(g0.s.value().index_axis(ndarray::Axis(1), j), g1.s.value().index_axis(ndarray::Axis(1), j));
        }
        prop_assert_ne!(g0.region_features[region].value(), g1.region_features[region].value());
    }

    #[test]
    fn feature_fusion_is_linear(seed in any::<u64>(), a in -2.0..2.0f64, c in -2.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Var::constant(ArrayD::from_shape_fn(IxDyn(&[5, 3]), |_| rng.gen::<f64>())).softmax(1);
        let mut stack = || (0..3).map(|_| Var::constant(ArrayD::from_shape_fn(IxDyn(&[5, 4]), |_| rng.gen_range(-1.0..1.0)))).collect::<Vec<_>>();
        let (f, g) = (stack(), stack());
        let mixed: Vec<Var<f64>> = f.iter().zip(&g).map(|(f, g)| f.scale(a).add(&g.scale(c))).collect();
        let lhs = fuse_features(&m, &mixed).unwrap();
        let rhs = fuse_features(&m, &f).unwrap().scale(a).add(&fuse_features(&m, &g).unwrap().scale(c));
        for (l, r) in lhs.value().iter().zip(rhs.value()) {
            prop_assert!((l - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn density_is_bounded_and_decreasing(d0 in -1.0..1.0f64, step in 1e-3..0.5f64, beta in 1e-3..1.0f64) {
        let (lo, hi) = (density(d0 + step, beta).unwrap(), density(d0, beta).unwrap());
        prop_assert!(lo <= hi);
        prop_assert!(hi > 0.0 && hi <= 1.0 / beta);
        let d = Var::constant(ArrayD::from_elem(IxDyn(&[1, 1]), d0));
        let v = sdf_to_density(&d, &Var::constant(ArrayD::from_elem(IxDyn(&[1]), beta))).unwrap();
        prop_assert!((v.item() - hi).abs() <= 1e-12 * hi.max(1.0));
    }

    #[test]
    fn compositing_weights_are_a_sub_partition(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, n, k) = (8, 10, 3);
        let sigma = Var::constant(ArrayD::from_shape_fn(IxDyn(&[p, n]), |_| rng.gen_range(0.0..50.0)));
        let c = Var::constant(ArrayD::from_shape_fn(IxDyn(&[p, n, 3]), |_| rng.gen::<f64>()));
        let m = Var::constant(ArrayD::from_shape_fn(IxDyn(&[p, n, k]), |_| rng.gen::<f64>())).softmax(2);
        let deltas = Array2::from_shape_fn((p, n), |_| rng.gen_range(0.0..0.2));
        let out = composite(&sigma, &c, &m, &deltas).unwrap();
        for r in 0..p {
            let w = out.weights.value().index_axis(ndarray::Axis(0), r).to_owned();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!(w.sum() <= 1.0 + 1e-12);
            let mask_sum: f64 = (0..k).map(|i| out.mask.value()[[r, i]]).sum();
            prop_assert!((mask_sum - out.alpha.value()[[r, 0]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn renders_sum_mask_to_alpha(seed in any::<u64>()) {
        let (field, params, bank, mut rng) = setup(seed);
        let rc = RenderConfig { resolution: 4, samples: 6, ..RenderConfig::toy() };
        let cam = Camera::from_config(rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3), &rc);
        let r = render_view(&field, &params, &bank, &cam, &rc).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|k| r.mask_probs[[i, j, k]]).sum();
                prop_assert!((s - r.alpha[[i, j]]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn latent_files_round_trip(rows in 2usize..6, width in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || Array2::from_shape_fn((rows, width), |_| rng.gen_range(-5.0..5.0f32));
        let bank = LatentBank::new(draw(), draw()).unwrap();
        prop_assert_eq!(decode_bank(&encode_bank(&bank)).unwrap(), bank);
    }

    #[test]
    fn mask_pngs_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = Array2::from_shape_fn((h, w), |_| rng.gen_range(0u8..13));
        prop_assert_eq!(io::decode_mask(&io::encode_mask(&labels).unwrap()).unwrap(), labels);
    }
}

