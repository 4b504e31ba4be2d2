use bilagrid::grid::{self, BilateralGrid, ConfidenceGrid, ConfidenceMap, GridDims, AFFINE_PARAMS};
use bilagrid::io::{decode_grid, encode_grid, GridFile};
use bilagrid::metrics;
use bilagrid::model::{self, ModelConfig, ModelParams};
use bilagrid::optim::{clip_gradients, grad_norm};
use bilagrid::recon;
use bilagrid::Image;
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = GridDims> {
    (1usize..5, 1usize..5, 2usize..6).prop_map(|(r, c, b)| GridDims::new(r, c, b).unwrap())
}

fn image(max: usize) -> impl Strategy<Value = Image> {
    (1..max, 1..max).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..1.0, h * w * 3).prop_map(move |d| Image::new(h, w, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_grid_reproduces_any_image(d in dims(), img in image(12)) {
        let out = grid::slice_affine(&BilateralGrid::identity(d).unwrap(), &img).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn constant_grid_applies_one_affine_map(d in dims(), img in image(10), m in prop::array::uniform12(-2.0f64..2.0)) {
        let out = grid::slice_affine(&BilateralGrid::constant(d, m).unwrap(), &img).unwrap();
        for (p, q) in img.pixels().zip(out.pixels()) {
            for c in 0..3 {
                let want = m[c * 4] * p[0] + m[c * 4 + 1] * p[1] + m[c * 4 + 2] * p[2] + m[c * 4 + 3];
                prop_assert!((q[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_log_confidence_is_unit_confidence(d in dims(), img in image(10)) {
        let c = grid::slice_confidence(&ConfidenceGrid::zeros(d).unwrap(), &img).unwrap();
        prop_assert!(c.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tv_is_nonnegative_and_shift_invariant(d in dims(), shift in -3.0f64..3.0, seed in any::<u64>()) {
        let n = d.vertex_count() * AFFINE_PARAMS;
        let vals: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64) / 500.0 - 1.0).collect();
        let g = BilateralGrid::new(d, vals.clone()).unwrap();
        let shifted = BilateralGrid::new(d, vals.iter().map(|v| v + shift).collect()).unwrap();
        let t = grid::tv_loss(&g);
        prop_assert!(t >= 0.0);
        prop_assert!((t - grid::tv_loss(&shifted)).abs() < 1e-9);
    }

    #[test]
    fn clipping_never_increases_norm_or_turns(g in prop::collection::vec(-10.0f64..10.0, 1..40), clip in 0.01f64..5.0) {
        let mut c = g.clone();
        let before = clip_gradients(&mut c, clip).unwrap();
        let after = grad_norm(&c);
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= clip + 1e-9 || before <= clip);
        if before > 0.0 {
            let dot: f64 = g.iter().zip(&c).map(|(a, b)| a * b).sum();
            prop_assert!((dot / (before * after) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_threshold_output_in_unit_interval(vals in prop::collection::vec(0.01f64..10.0, 4..40)) {
        let map = ConfidenceMap::new(1, vals.len(), vals).unwrap();
        let mods = recon::modified_confidences(&[map]).unwrap();
        let norm = recon::normalize_confidences(&[ConfidenceMap::new(1, mods[0].len(), mods[0].iter().map(|v| v + 1.0).collect()).unwrap()]).unwrap();
        prop_assert!(mods[0].iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(norm[0].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn soft_threshold_is_monotone(vals in prop::collection::vec(0.0f64..1.0, 2..30), bump in 0.0f64..0.5, k in any::<prop::sample::Index>()) {
        let (mu, s2) = recon::confidence_stats(&vals);
        let i = k.index(vals.len());
        let mut raised = vals.clone();
        raised[i] += bump;
        prop_assert!(recon::soft_threshold(&raised, mu, s2)[i] >= recon::soft_threshold(&vals, mu, s2)[i]);
    }

    #[test]
    fn color_corrected_psnr_dominates(a in image(14), seed in any::<u64>()) {
        let b = Image::from_fn(a.height(), a.width(), |v, u| {
            let p = a.pixel(v, u);
            let n = ((seed ^ (v * 31 + u) as u64) % 97) as f64 / 970.0;
            [0.8 * p[1] + n, 0.5 * p[0] + 0.2, (1.0 - p[2]) * 0.9]
        });
        if a.pixel_count() >= 4 {
            let cc = metrics::fit_color_correction(&a, &b).unwrap().apply(&a);
            prop_assert!(metrics::psnr(&cc, &b).unwrap() >= metrics::psnr(&a, &b).unwrap() - 1e-9);
        }
    }

    #[test]
    fn grid_files_round_trip(d in dims(), seed in any::<u64>()) {
        let vals: Vec<f64> = (0..d.vertex_count() * AFFINE_PARAMS)
            .map(|i| (((seed >> (i % 32)) & 0xffff) as f32 / 65536.0) as f64)
            .collect();
        let g = GridFile::Affine(BilateralGrid::new(d, vals).unwrap());
        let bytes = encode_grid(&g);
        prop_assert_eq!(decode_grid(&bytes).unwrap(), g);
    }

    #[test]
    fn patchify_round_trips(gr in 1usize..4, gc in 1usize..4, ph in 1usize..5, pw in 1usize..5, seed in any::<u64>()) {
        let (h, w) = (gr * ph, gc * pw);
        let img = Image::from_fn(h, w, |v, u| {
            let x = ((seed.wrapping_mul(v as u64 + 1) ^ u as u64) % 255) as f64 / 255.0;
            [x, 1.0 - x, 0.5]
        });
        let p = model::patchify(&img, (ph, pw)).unwrap();
        prop_assert_eq!(p.rows, gr * gc);
        prop_assert_eq!(model::unpatchify(&p, h, w, (ph, pw)).unwrap(), img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let p = ModelParams::init(ModelConfig::tiny(), seed).unwrap();
        let bytes = model::encode_checkpoint(&p);
        let q = model::decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(q.values(), p.values());
        prop_assert_eq!(model::encode_checkpoint(&q), bytes);
    }
}
