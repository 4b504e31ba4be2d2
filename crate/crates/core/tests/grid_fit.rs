use bilagrid::fit::{fit_grid_pair, FitConfig};
use bilagrid::grid::{self, BilateralGrid, GridDims, AFFINE_PARAMS};
use bilagrid::isp;
use bilagrid::Image;

fn corrupted_pair(seed: u64, h: usize, w: usize) -> (Image, Image) {
    let clean = isp::synth_scene(seed, 1, h, w).unwrap().remove(0);
    let p = isp::sample_isp_params(seed + 1, 0.7).unwrap().affine_only();
    (isp::apply_isp_variation(&clean, &p).unwrap(), clean)
}

#[test]
fn huge_tv_weight_forces_a_constant_grid() {
    let (source, target) = corrupted_pair(3, 32, 32);
    let cfg = FitConfig {
        lambda_tv: 1e9,
        steps: 300,
        ..FitConfig::default()
    };
    let res = fit_grid_pair(&source, &target, &cfg).unwrap();
    assert!(grid::tv_loss(&res.grid) < 1e-6, "tv {}", grid::tv_loss(&res.grid));
}

#[test]
fn realizable_target_is_recovered_without_regularization() {
    let dims = GridDims::new(8, 8, 8).unwrap();
    // Spatially varying map that does not depend on the luminance bin.
    let mut params = Vec::with_capacity(dims.vertex_count() * AFFINE_PARAMS);
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let gain = 0.85 + 0.03 * r as f64;
            let bias = 0.01 * c as f64 - 0.03;
            for _ in 0..dims.bins {
                params.extend([gain, 0.05, 0.0, bias, 0.0, gain, 0.05, bias, 0.05, 0.0, gain, -bias]);
            }
        }
    }
    let truth = BilateralGrid::new(dims, params).unwrap();
    let source = isp::synth_scene(11, 1, 64, 64).unwrap().remove(0);
    let target = grid::slice_affine(&truth, &source).unwrap();
    let cfg = FitConfig {
        lambda_tv: 0.0,
        ..FitConfig::default()
    };
    let res = fit_grid_pair(&source, &target, &cfg).unwrap();
    let out = grid::slice_affine(&res.grid, &source).unwrap();
    let mae = out.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.data().len() as f64;
    assert!(mae < 1e-3, "mae {mae}");
}

#[test]
fn fitted_loss_is_resolution_independent() {
    // Full ISP variation, so the residual is well above optimizer noise.
    let target = isp::synth_scene(21, 1, 32, 32).unwrap().remove(0);
    let p = isp::sample_isp_params(22, 1.0).unwrap();
    let source = isp::apply_isp_variation(&target, &p).unwrap();
    let up = |img: &Image| Image::from_fn(64, 64, |v, u| img.pixel(v / 2, u / 2));
    let cfg = FitConfig::default();
    let small = fit_grid_pair(&source, &target, &cfg).unwrap().final_loss();
    let large = fit_grid_pair(&up(&source), &up(&target), &cfg).unwrap().final_loss();
    let rel = (small - large).abs() / small;
    assert!(rel < 0.1, "losses {small} vs {large}");
}
