//! Image quality metrics, raw and after a per-frame affine colour fit.

use nalgebra::{Matrix4, Matrix4x3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported PSNR when two images are identical.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const CC_DAMPING: f64 = 1e-8;

/// Mean squared error after clamping both images to `[0, 1]`.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Valid-mode separable filtering of a single-channel `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5, L = 1) over the valid
/// region, averaged across channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidDimensions(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|v| v.clamp(0.0, 1.0)).collect();
        let y: Vec<f64> = b.data().iter().skip(c).step_by(3).map(|v| v.clamp(0.0, 1.0)).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(s, t)| s * t).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Global affine colour map `out = A·rgb + b`, stored as rows `[A | b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorCorrection {
    pub matrix: [[f64; 4]; 3],
}

impl ColorCorrection {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    pub fn apply_pixel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|r| {
            let m = &self.matrix[r];
            m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3]
        })
    }

    /// Apply and clamp to `[0, 1]`.
    pub fn apply(&self, image: &Image) -> Image {
        let (h, w) = image.dims();
        Image::from_fn(h, w, |v, u| self.apply_pixel(image.pixel(v, u)).map(|x| x.clamp(0.0, 1.0)))
    }
}

/// Least-squares affine map from `render` (clamped) to `gt`. The damping
/// pulls toward the identity map, so the fit never does worse than leaving
/// the render alone. A constant render yields a bias-only map.
pub fn fit_color_correction(render: &Image, gt: &Image) -> Result<ColorCorrection> {
    render.same_dims(gt)?;
    let n = render.pixel_count();
    if n < 4 {
        return Err(Error::InvalidDimensions(format!("{n} pixels, need at least 4")));
    }
    let r = render.clamped();
    let mut mean_r = [0.0; 3];
    let mut mean_g = [0.0; 3];
    for (p, q) in r.pixels().zip(gt.pixels()) {
        for c in 0..3 {
            mean_r[c] += p[c] / n as f64;
            mean_g[c] += q[c] / n as f64;
        }
    }
    let spread: f64 = r
        .pixels()
        .map(|p| (0..3).map(|c| (p[c] - mean_r[c]).powi(2)).sum::<f64>())
        .sum();
    if spread < 1e-24 {
        let mut m = [[0.0; 4]; 3];
        for c in 0..3 {
            m[c][3] = mean_g[c];
        }
        return Ok(ColorCorrection { matrix: m });
    }
    let mut xtx = Matrix4::<f64>::zeros();
    let mut xtg = Matrix4x3::<f64>::zeros();
    for (p, q) in r.pixels().zip(gt.pixels()) {
        let x = [p[0], p[1], p[2], 1.0];
        for i in 0..4 {
            for j in 0..4 {
                xtx[(i, j)] += x[i] * x[j];
            }
            for j in 0..3 {
                xtg[(i, j)] += x[i] * q[j];
            }
        }
    }
    let mut anchor = Matrix4x3::<f64>::zeros();
    for c in 0..3 {
        anchor[(c, c)] = 1.0;
    }
    let lhs = xtx + Matrix4::identity() * CC_DAMPING;
    let rhs = xtg + anchor * CC_DAMPING;
    let sol = lhs
        .cholesky()
        .ok_or_else(|| Error::NonFinite("colour-correction normal equations".into()))?
        .solve(&rhs);
    let matrix = std::array::from_fn(|c| std::array::from_fn(|i| sol[(i, c)]));
    Ok(ColorCorrection { matrix })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_cc: f64,
    pub ssim_cc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_count: usize,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_psnr_cc: f64,
    pub mean_ssim_cc: f64,
}

pub fn evaluate_frame(render: &Image, gt: &Image) -> Result<FrameMetrics> {
    let cc = fit_color_correction(render, gt)?;
    let corrected = cc.apply(render);
    Ok(FrameMetrics {
        psnr: psnr(render, gt)?,
        ssim: ssim(render, gt)?,
        psnr_cc: psnr(&corrected, gt)?,
        ssim_cc: ssim(&corrected, gt)?,
    })
}

pub fn evaluate_sequence(renders: &[Image], gts: &[Image]) -> Result<EvalReport> {
    if renders.is_empty() || renders.len() != gts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} renders vs {} ground-truth frames",
            renders.len(),
            gts.len()
        )));
    }
    let frames = renders
        .iter()
        .zip(gts)
        .map(|(r, g)| evaluate_frame(r, g))
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        frame_count: frames.len(),
        mean_psnr: mean(|m| m.psnr),
        mean_ssim: mean(|m| m.ssim),
        mean_psnr_cc: mean(|m| m.psnr_cc),
        mean_ssim_cc: mean(|m| m.ssim_cc),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_reference_values() {
        let a = Image::filled(8, 8, [0.4; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, [0.5; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let (x, y) = (random_image(1, 9, 7), random_image(2, 9, 7));
        let m: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / (9.0 * 7.0 * 3.0);
        assert!((psnr(&x, &y).unwrap() + 10.0 * m.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let x = random_image(3, 20, 24);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let y = random_image(4, 20, 24);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        let half = Image::filled(12, 12, [0.5; 3]);
        assert!((ssim(&half, &half).unwrap() - 1.0).abs() < 1e-12);
        let checker = Image::from_fn(16, 16, |v, u| [((v + u) % 2) as f64; 3]);
        let inv = checker.map(|v| 1.0 - v);
        assert!(ssim(&checker, &inv).unwrap() < 0.1);
        assert!(ssim(&Image::filled(10, 30, [0.0; 3]), &Image::filled(10, 30, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let x = random_image(5, 12, 13);
        let y = random_image(6, 12, 13);
        let k = gaussian_window();
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            for oy in 0..2 {
                for ox in 0..3 {
                    let (mut ux, mut uy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k[i] * k[j];
                            let p = x.pixel(oy + i, ox + j)[c];
                            let q = y.pixel(oy + i, ox + j)[c];
                            ux += wgt * p;
                            uy += wgt * q;
                            sxx += wgt * p * p;
                            syy += wgt * q * q;
                            sxy += wgt * p * q;
                        }
                    }
                    let (vx, vy, cv) = (sxx - ux * ux, syy - uy * uy, sxy - ux * uy);
                    acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cv + SSIM_C2))
                        / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
                }
            }
            total += acc / 6.0;
        }
        assert!((ssim(&x, &y).unwrap() - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn color_fit_identity_and_affine() {
        let x = random_image(7, 10, 10);
        let m = fit_color_correction(&x, &x).unwrap();
        let id = ColorCorrection::identity();
        for r in 0..3 {
            for c in 0..4 {
                assert!((m.matrix[r][c] - id.matrix[r][c]).abs() < 1e-6);
            }
        }
        let y = x.map(|v| 2.0 * v + 0.1);
        let m = fit_color_correction(&x, &y).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 2.0 } else { 0.0 };
                assert!((m.matrix[r][c] - want).abs() < 1e-4);
            }
            assert!((m.matrix[r][3] - 0.1).abs() < 1e-4);
        }
    }

    #[test]
    fn color_fit_matches_pseudo_inverse() {
        let x = random_image(8, 6, 9);
        let y = random_image(9, 6, 9);
        let m = fit_color_correction(&x, &y).unwrap();
        let n = x.pixel_count();
        let xm = nalgebra::DMatrix::from_fn(n, 4, |i, j| if j == 3 { 1.0 } else { x.data()[i * 3 + j] });
        let ym = nalgebra::DMatrix::from_fn(n, 3, |i, j| y.data()[i * 3 + j]);
        let sol = xm.pseudo_inverse(1e-12).unwrap() * ym;
        for r in 0..3 {
            for c in 0..4 {
                assert!((m.matrix[r][c] - sol[(c, r)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_render_gets_bias_only_map() {
        let x = Image::filled(5, 5, [0.3; 3]);
        let y = random_image(10, 5, 5);
        let m = fit_color_correction(&x, &y).unwrap();
        let mean: f64 = y.pixels().map(|p| p[1]).sum::<f64>() / 25.0;
        assert_eq!(m.matrix[1][..3], [0.0; 3]);
        assert!((m.matrix[1][3] - mean).abs() < 1e-12);
    }

    #[test]
    fn report_means_and_cc_dominance() {
        let gts: Vec<Image> = (0..3).map(|s| random_image(20 + s, 16, 16)).collect();
        let renders: Vec<Image> = gts.iter().map(|g| g.map(|v| 0.7 * v + 0.1)).collect();
        let rep = evaluate_sequence(&renders, &gts).unwrap();
        assert_eq!(rep.frame_count, 3);
        let avg = rep.frames.iter().map(|f| f.psnr).sum::<f64>() / 3.0;
        assert_eq!(rep.mean_psnr, avg);
        for f in &rep.frames {
            assert!(f.psnr_cc >= 60.0 && f.psnr < 30.0);
        }
        let same = evaluate_sequence(&gts, &gts).unwrap();
        assert_eq!(same.mean_psnr, PSNR_CAP);
        assert_eq!(same.mean_psnr_cc, PSNR_CAP);
        assert!((same.mean_ssim - 1.0).abs() < 1e-9);
        assert!(evaluate_sequence(&gts, &gts[..2]).is_err());
    }
}
