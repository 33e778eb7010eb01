use deig_core::dfm::{
    assign_visual_membership, build_instance_mask, masked_attention_blocksparse, masked_gated_attention, DfmLayer,
};
use deig_core::geometry::BoundingBox;
use deig_core::params::{Init, ParamStore};
use deig_core::synth::attributes::{COLORS, MATERIALS, OBJECT_NOUNS, TEXTURES};
use deig_core::synth::bench::sample_layout;
use deig_core::synth::scene::{caption_from_attrs, parse_caption, AttributeSpec, InstanceAttrs};
use deig_core::synth::{generate_scene, BenchConfig, LatentCodec};
use deig_core::tensor::{Tensor, MASK_NEG};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn boxes(max: usize) -> impl Strategy<Value = Vec<BoundingBox>> {
    prop::collection::vec((0.0..0.8f64, 0.0..0.8f64, 0.05..0.5f64, 0.05..0.5f64), 1..=max).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h)| BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mask_is_symmetric_and_binary(bs in boxes(6), gh in 1usize..10, gw in 1usize..10, s in 1usize..5) {
        let n = bs.len();
        let mask = build_instance_mask(&assign_visual_membership(&bs, gh, gw), n, s);
        let l = gh * gw + n * s;
        prop_assert_eq!(mask.len(), l);
        let m = mask.m.data();
        for i in 0..l {
            prop_assert_eq!(m[i * l + i], 0.0);
            for j in 0..l {
                prop_assert!(m[i * l + j] == 0.0 || m[i * l + j] == MASK_NEG);
                prop_assert_eq!(m[i * l + j], m[j * l + i]);
            }
        }
        // instance tokens of different instances never see each other
        let nv = gh * gw;
        for a in 0..n {
            for b in 0..n {
                let open = mask.allowed(nv + a * s, nv + b * s);
                prop_assert_eq!(open, a == b);
            }
        }
    }

    #[test]
    fn blocksparse_matches_dense(seed in any::<u64>(), grid in 3usize..9, n in 2usize..5, s in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bs = sample_layout(&mut rng, n, &BenchConfig::default()).unwrap();
        let dim = 8;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let layer = DfmLayer::new(&mut store, &mut init, "dfm.block0", dim, 2).unwrap();
        store.set_data(layer.gamma, vec![0.7]).unwrap();
        let mask = build_instance_mask(&assign_visual_membership(&bs, grid, grid), n, s);
        let x = Tensor::new(init.normal(grid * grid * dim, 1.0), &[1, grid * grid, dim]).unwrap();
        let g = Tensor::new(init.normal(n * s * dim, 1.0), &[1, n, s, dim]).unwrap();
        let dense = masked_gated_attention(&store, &layer, &x, &g, &mask).unwrap();
        let (fast, skip) = masked_attention_blocksparse(&store, &layer, &x, &g, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&skip));
        for (a, b) in dense.data().iter().zip(fast.data()) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn masked_softmax_rows(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut init = Init::new(seed);
        let x = Tensor::new(init.normal(rows * cols, 3.0), &[rows, cols]).unwrap();
        let m: Vec<f64> = init.normal(rows * cols, 1.0).into_iter().map(|v| if v > 0.3 { MASK_NEG } else { 0.0 }).collect();
        let y = x.masked_softmax(&Tensor::new(m.clone(), &[rows, cols]).unwrap()).unwrap();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            let blocked = &m[r * cols..(r + 1) * cols];
            let total: f64 = row.iter().sum();
            if blocked.iter().all(|&v| v != 0.0) {
                prop_assert_eq!(total, 0.0);
            } else {
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
            for (w, b) in row.iter().zip(blocked) {
                prop_assert!(*b == 0.0 || *w == 0.0);
            }
        }
    }

    #[test]
    fn object_captions_parse_back(
        noun in 0..OBJECT_NOUNS.len(),
        color in 0..COLORS.len(),
        material in prop::option::of(0..MATERIALS.len()),
        texture in prop::option::of(0..TEXTURES.len()),
    ) {
        let attrs = InstanceAttrs::Object { noun, attrs: AttributeSpec { color, material, texture } };
        prop_assert_eq!(parse_caption(&caption_from_attrs(&attrs)).unwrap(), attrs);
    }

    #[test]
    fn generated_scenes_respect_constraints(seed in any::<u64>()) {
        let cfg = BenchConfig::default();
        let scene = generate_scene(seed, &cfg).unwrap();
        prop_assert!(scene.validate(cfg.min_instances, cfg.max_instances, (cfg.area_min, cfg.area_max)).is_ok());
        prop_assert!(scene.instances.iter().all(|i| i.attrs.level() == scene.level));
    }

    #[test]
    fn latent_codec_inverts(gh in 1usize..4, gw in 1usize..4, patch in 1usize..4, seed in any::<u64>()) {
        let codec = LatentCodec::new(gh, gw, patch);
        let (w, h) = codec.raster_size();
        let values = Init::new(seed).normal(w * h * 3, 0.5);
        let latent = codec.encode_values(&values);
        let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        prop_assert!((energy(&values) - energy(&latent)).abs() <= 1e-9 * (1.0 + energy(&values)));
        for (a, b) in values.iter().zip(codec.decode_values(&latent)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
