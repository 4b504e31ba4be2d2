//! Quick built-in verification run by the `selfcheck` command.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Mat, Tape};
use crate::error::Result;
use crate::grid::{self, BilateralGrid, ConfidenceGrid, GridDims, AFFINE_PARAMS};
use crate::image::Image;
use crate::recon;
use crate::train;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
        }
    }
}

/// Sum of tent-weighted vertices over the whole grid.
fn tent_slice(dims: GridDims, values: &[f64], channels: usize, h: usize, w: usize, v: usize, u: usize, guide: f64) -> Vec<f64> {
    let coord = |p: usize, extent: usize, n: usize| {
        ((p as f64 + 0.5) / extent as f64 * n as f64 - 0.5).clamp(0.0, (n - 1) as f64)
    };
    let (y, x) = (coord(v, h, dims.rows), coord(u, w, dims.cols));
    let z = (guide * (dims.bins - 1) as f64).clamp(0.0, (dims.bins - 1) as f64);
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; channels];
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            for b in 0..dims.bins {
                let wgt = tent(y - r as f64) * tent(x - c as f64) * tent(z - b as f64);
                if wgt == 0.0 {
                    continue;
                }
                let base = dims.vertex_index(r, c, b) * channels;
                for (o, val) in out.iter_mut().zip(&values[base..base + channels]) {
                    *o += wgt * val;
                }
            }
        }
    }
    out
}

/// Max abs error of slicing against tent-function enumeration over
/// `cases` random (grid, pixel) draws.
pub fn slicing_oracle_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dims = GridDims::new(rng.random_range(1..6), rng.random_range(1..6), rng.random_range(2..9))?;
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let params: Vec<f64> = (0..dims.vertex_count() * AFFINE_PARAMS).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logc: Vec<f64> = (0..dims.vertex_count()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (v, u) = (rng.random_range(0..h), rng.random_range(0..w));
        let px: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let img = Image::from_fn(h, w, |a, b| if (a, b) == (v, u) { px } else { [0.5; 3] });
        let out = grid::slice_affine(&BilateralGrid::new(dims, params.clone())?, &img)?;
        let conf = grid::slice_confidence(&ConfidenceGrid::new(dims, logc.clone())?, &img)?;
        let theta = tent_slice(dims, &params, AFFINE_PARAMS, h, w, v, u, grid::luma(px));
        let got = out.pixel(v, u);
        for c in 0..3 {
            let m = &theta[c * 4..c * 4 + 4];
            let want = m[0] * px[0] + m[1] * px[1] + m[2] * px[2] + m[3];
            worst = worst.max((got[c] - want).abs());
        }
        let lc = tent_slice(dims, &logc, 1, h, w, v, u, grid::luma(px))[0];
        worst = worst.max((conf.get(v, u) - lc.exp()).abs());
    }
    Ok(worst)
}

/// Finite-difference error of the slice, TV and confidence-loss ops.
pub fn op_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = GridDims::new(2, 3, 4)?;
    let n = dims.vertex_count();
    let img = Rc::new(Image::from_fn(6, 9, |_, _| [rng.random(), rng.random(), rng.random()]));
    let target = Rc::new(Image::from_fn(6, 9, |_, _| [rng.random(), rng.random(), rng.random()]));
    let mut x: Vec<f64> = (0..n * AFFINE_PARAMS).map(|_| rng.random_range(-0.3..0.3)).collect();
    x.extend((0..n).map(|_| rng.random_range(-0.5..0.5)));
    let eval = |x: &[f64]| {
        let mut t = Tape::new();
        let g = t.leaf(Mat::from_vec(n, AFFINE_PARAMS, x[..n * AFFINE_PARAMS].to_vec()));
        let c = t.leaf(Mat::from_vec(n, 1, x[n * AFFINE_PARAMS..].to_vec()));
        let out = t.slice_affine(g, dims, Rc::clone(&img));
        let conf = t.slice_confidence(c, dims, Rc::clone(&img));
        let l = t.confidence_loss(out, conf, Rc::clone(&target), 0.1);
        let tg = t.tv(g, dims);
        let tc = t.tv(c, dims);
        let root = t.weighted_sum(&[(l, 1.0), (tg, 0.5), (tc, 0.5)]);
        (t, g, c, root)
    };
    let (t, g, c, root) = eval(&x);
    let grads = t.backward(root);
    let mut analytic = grads.get(g).map(|m| m.data.clone()).unwrap_or_default();
    analytic.extend(grads.get(c).map(|m| m.data.clone()).unwrap_or_default());
    let coords: Vec<usize> = (0..x.len()).collect();
    Ok(train::finite_diff_check_fn(
        |p| {
            let (t, _, _, r) = eval(p);
            t.scalar(r)
        },
        &x,
        &analytic,
        &coords,
        1e-6,
    ))
}

/// End-to-end finite-difference error on the tiny model.
pub fn model_gradient_error(seed: u64) -> Result<f64> {
    let (params, pair) = train::tiny_check_setup(seed)?;
    let coords = train::sample_param_coords(&params, 10, seed);
    train::finite_diff_check(&params, &pair, 0.1, 1e-3, &coords, 1e-4)
}

/// Max deviation from the expected soft-threshold outputs.
pub fn soft_threshold_error() -> f64 {
    let constant = recon::soft_threshold(&[0.6; 4], 0.6, 0.0);
    let (mu, s2) = recon::confidence_stats(&[0.2, 0.8]);
    let pair = recon::soft_threshold(&[0.2, 0.8], mu, s2);
    constant
        .iter()
        .map(|v| (v - 1.0).abs())
        .chain([(pair[0] - 0.2).abs(), (pair[1] - 1.0).abs()])
        .fold(0.0, f64::max)
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        CheckResult::below("slicing oracle (1000 cases)", slicing_oracle_error(1000, seed)?, 1e-6),
        CheckResult::below("op gradients", op_gradient_error(seed)?, 1e-4),
        CheckResult::below("model gradients", model_gradient_error(seed)?, 1e-3),
        CheckResult::below("soft threshold", soft_threshold_error(), 1e-12),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all(0).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
