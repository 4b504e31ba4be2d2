//! Confidence-weighted downstream reconstruction.
//!
//! Predicted confidence maps are normalized jointly, soft-thresholded per
//! image, and used to weight an L1 reconstruction loss for the first part of
//! fitting. The reconstructor here is a single latent image shared by all
//! aligned views, which is enough to observe the effect of the weighting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ConfidenceMap;
use crate::image::Image;
use crate::isp;
use crate::optim::{adamw_step, AdamConfig, AdamState};

pub const DEFAULT_WEIGHTED_FRACTION: f64 = 0.25;
pub const RECON_LR: f64 = 0.05;

/// Joint min-max normalization of every map to `[0, 1]`; a set with a single
/// distinct value maps to all ones.
pub fn normalize_confidences(maps: &[ConfidenceMap]) -> Result<Vec<Vec<f64>>> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no confidence maps".into()));
    }
    let all = || maps.iter().flat_map(|m| m.values().iter().copied());
    let lo = all().fold(f64::INFINITY, f64::min);
    let hi = all().fold(f64::NEG_INFINITY, f64::max);
    Ok(maps
        .iter()
        .map(|m| {
            m.values()
                .iter()
                .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })
                .collect()
        })
        .collect())
}

/// Mean and biased variance of one map.
pub fn confidence_stats(map: &[f64]) -> (f64, f64) {
    let n = map.len() as f64;
    let mu = map.iter().sum::<f64>() / n;
    let var = map.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

/// Values at or above `mu − sigma2` become 1; the rest are kept.
pub fn soft_threshold(map: &[f64], mu: f64, sigma2: f64) -> Vec<f64> {
    let t = mu - sigma2;
    map.iter().map(|&v| if v >= t { 1.0 } else { v }).collect()
}

/// Normalize, then soft-threshold each map with its own statistics.
pub fn modified_confidences(maps: &[ConfidenceMap]) -> Result<Vec<Vec<f64>>> {
    Ok(normalize_confidences(maps)?
        .into_iter()
        .map(|m| {
            let (mu, s2) = confidence_stats(&m);
            soft_threshold(&m, mu, s2)
        })
        .collect())
}

/// Mean over pixels of `w · Σ_ch |target − render|`.
pub fn weighted_recon_loss(render: &Image, target: &Image, weights: &[f64]) -> Result<f64> {
    render.same_dims(target)?;
    if weights.len() != render.pixel_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} pixels",
            weights.len(),
            render.pixel_count()
        )));
    }
    let sum: f64 = weights
        .iter()
        .zip(render.pixels().zip(target.pixels()))
        .map(|(&w, (r, t))| w * (0..3).map(|c| (t[c] - r[c]).abs()).sum::<f64>())
        .sum();
    Ok(sum / render.pixel_count() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub iterations: usize,
    pub weighted_fraction: f64,
    pub lr: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            weighted_fraction: DEFAULT_WEIGHTED_FRACTION,
            lr: RECON_LR,
        }
    }
}

impl ReconConfig {
    /// Iterations `0..weighted_steps()` use the confidence weights.
    pub fn weighted_steps(&self) -> usize {
        (self.weighted_fraction * self.iterations as f64).ceil() as usize
    }
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub latent: Image,
    /// Latent when the weighted stage ended.
    pub stage1: Image,
    /// Objective before each step.
    pub loss_history: Vec<f64>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fit one latent image to aligned views. `confidences = None` runs the
/// unweighted baseline throughout.
pub fn toy_reconstruct(
    frames: &[Image],
    confidences: Option<&[ConfidenceMap]>,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to reconstruct from".into()));
    }
    if !(cfg.weighted_fraction > 0.0 && cfg.weighted_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "weighted fraction {} outside (0, 1]",
            cfg.weighted_fraction
        )));
    }
    for f in &frames[1..] {
        frames[0].same_dims(f)?;
    }
    let (h, w) = frames[0].dims();
    let n_px = h * w;
    let weights = match confidences {
        Some(maps) => {
            if maps.len() != frames.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} confidence maps for {} frames",
                    maps.len(),
                    frames.len()
                )));
            }
            if maps.iter().any(|m| (m.height(), m.width()) != (h, w)) {
                return Err(Error::DimensionMismatch("confidence map size".into()));
            }
            Some(modified_confidences(maps)?)
        }
        None => None,
    };
    let mut latent: Vec<f64> = (0..n_px * 3)
        .map(|i| median(&mut frames.iter().map(|f| f.data()[i]).collect::<Vec<_>>()))
        .collect();
    let mut state = AdamState::new(latent.len());
    let mut grad = vec![0.0; latent.len()];
    let switch = cfg.weighted_steps();
    let scale = 1.0 / (frames.len() * n_px) as f64;
    let mut stage1 = None;
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it == switch {
            stage1 = Some(Image::new(h, w, latent.clone())?);
        }
        let active = weights.as_ref().filter(|_| it < switch);
        grad.fill(0.0);
        let mut loss = 0.0;
        for (k, f) in frames.iter().enumerate() {
            for (i, (g, (&l, &t))) in grad.iter_mut().zip(latent.iter().zip(f.data())).enumerate() {
                let wgt = active.map_or(1.0, |ws| ws[k][i / 3]);
                loss += wgt * (l - t).abs() * scale;
                *g += wgt * sign(l - t) * scale;
            }
        }
        loss_history.push(loss);
        adamw_step(&mut latent, &grad, &mut state, cfg.lr, 0.0, AdamConfig::default())?;
    }
    let latent = Image::new(h, w, latent)?;
    Ok(ReconResult {
        stage1: stage1.unwrap_or_else(|| latent.clone()),
        latent,
        loss_history,
    })
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over all pixels and channels.
pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
}

/// Aligned views of one clean image, each with a flat-coloured elliptical
/// blob pasted in, and confidence maps that are low inside each frame's
/// blob.
#[derive(Debug, Clone)]
pub struct BlobScene {
    pub clean: Image,
    pub frames: Vec<Image>,
    pub confidences: Vec<ConfidenceMap>,
}

pub fn corrupted_blob_scene(seed: u64, frames: usize, height: usize, width: usize) -> Result<BlobScene> {
    if frames == 0 {
        return Err(Error::InvalidArgument("no frames requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = isp::synth_scene(rng.random(), 1, height, width)?.remove(0);
    let mut out = Vec::with_capacity(frames);
    let mut confs = Vec::with_capacity(frames);
    for _ in 0..frames {
        let cy = rng.random_range(0.2..0.8) * height as f64;
        let cx = rng.random_range(0.2..0.8) * width as f64;
        let ry = rng.random_range(0.12..0.25) * height as f64;
        let rx = rng.random_range(0.12..0.25) * width as f64;
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let mut conf = Vec::with_capacity(height * width);
        let frame = Image::from_fn(height, width, |v, u| {
            let dy = (v as f64 + 0.5 - cy) / ry;
            let dx = (u as f64 + 0.5 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                conf.push(0.1);
                color
            } else {
                conf.push(1.0);
                clean.pixel(v, u)
            }
        });
        out.push(frame);
        confs.push(ConfidenceMap::new(height, width, conf)?);
    }
    Ok(BlobScene {
        clean,
        frames: out,
        confidences: confs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: Vec<f64>) -> ConfidenceMap {
        ConfidenceMap::new(h, w, v).unwrap()
    }

    #[test]
    fn normalization_is_joint() {
        let n = normalize_confidences(&[map(1, 2, vec![2.0, 4.0]), map(1, 2, vec![6.0, 3.0])]).unwrap();
        assert_eq!(n[0], vec![0.0, 0.5]);
        assert_eq!(n[1], vec![1.0, 0.25]);
        let flat = normalize_confidences(&[map(2, 2, vec![0.7; 4])]).unwrap();
        assert_eq!(flat[0], vec![1.0; 4]);
        assert!(normalize_confidences(&[]).is_err());
    }

    #[test]
    fn stats_and_threshold_examples() {
        assert_eq!(confidence_stats(&[0.3; 5]), (0.3, 0.0));
        assert_eq!(confidence_stats(&[0.0, 1.0, 0.0, 1.0]), (0.5, 0.25));
        assert_eq!(soft_threshold(&[0.4; 3], 0.4, 0.0), vec![1.0; 3]);
        let m = [0.2, 0.8];
        let (mu, s2) = confidence_stats(&m);
        assert!((mu - 0.5).abs() < 1e-15 && (s2 - 0.09).abs() < 1e-15);
        assert_eq!(soft_threshold(&m, mu, s2), vec![0.2, 1.0]);
    }

    #[test]
    fn weighted_loss_masks() {
        let clean = Image::filled(2, 2, [0.5; 3]);
        let mut bad = clean.clone();
        bad.set_pixel(0, 0, [1.0, 0.0, 1.0]);
        assert_eq!(weighted_recon_loss(&bad, &clean, &[0.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((weighted_recon_loss(&bad, &clean, &[1.0; 4]).unwrap() - 1.5 / 4.0).abs() < 1e-15);
        assert!(weighted_recon_loss(&bad, &clean, &[1.0; 3]).is_err());
    }

    #[test]
    fn stage_switch_index() {
        let cfg = ReconConfig {
            iterations: 10,
            weighted_fraction: 0.25,
            lr: 0.05,
        };
        assert_eq!(cfg.weighted_steps(), 3);
        let one = ReconConfig {
            weighted_fraction: 1.0,
            ..cfg
        };
        assert_eq!(one.weighted_steps(), 10);
    }

    #[test]
    fn single_frame_and_identical_frames() {
        let scene = corrupted_blob_scene(1, 1, 16, 16).unwrap();
        let target = &scene.frames[0];
        let ones = [ConfidenceMap::filled(16, 16, 1.0).unwrap()];
        let r = toy_reconstruct(&scene.frames, Some(&ones), &ReconConfig::default()).unwrap();
        assert!(mae(&r.latent, target).unwrap() < 1e-3);
        let same = vec![target.clone(); 3];
        let r = toy_reconstruct(&same, None, &ReconConfig::default()).unwrap();
        assert_eq!(r.loss_history[0], 0.0);
        assert!(toy_reconstruct(&[], None, &ReconConfig::default()).is_err());
    }

    #[test]
    fn weighting_beats_unweighted_on_blobs() {
        let cfg = ReconConfig::default();
        let scene = corrupted_blob_scene(3, 2, 24, 24).unwrap();
        let w = toy_reconstruct(&scene.frames, Some(&scene.confidences), &cfg).unwrap();
        let u = toy_reconstruct(&scene.frames, None, &cfg).unwrap();
        assert!(mae(&w.stage1, &scene.clean).unwrap() < mae(&u.stage1, &scene.clean).unwrap());
    }
}
