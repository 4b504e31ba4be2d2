//! Losses, augmentation and the optimization loop for the grid transformer.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{self, BilateralGrid, ConfidenceGrid, ConfidenceMap};
use crate::image::Image;
use crate::isp::{self, TrainingPair};
use crate::model::{grids_on_tape, ModelConfig, ModelParams, ParamVars};
use crate::optim::{adamw_step, clip_gradients, AdamConfig, AdamState};

/// Which augmentations [`augment_sequence`] may apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale_crop: bool,
    pub blur: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            scale_crop: true,
            blur: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            scale_crop: false,
            blur: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda_tv: f64,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    /// Floor of the cosine schedule (capped at `lr`).
    pub min_lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub frames_per_batch: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// ISP corruption severity for synthesized training pairs.
    pub severity: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda_tv: 1e-3,
            lr: 2e-4,
            min_lr: 1e-5,
            weight_decay: 1e-4,
            iterations: 5000,
            frames_per_batch: 10,
            clip_norm: 1.0,
            seed: 0,
            severity: 0.7,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} = {v}")));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", self.alpha);
        }
        if !(self.lambda_tv >= 0.0 && self.lambda_tv.is_finite()) {
            return bad("lambda_tv", self.lambda_tv);
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm", self.clip_norm);
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr);
        }
        if !(self.min_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("min_lr / weight_decay", self.min_lr.min(self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return bad("severity", self.severity);
        }
        if self.frames_per_batch < 2 {
            return Err(Error::InvalidArgument(
                "frames_per_batch must be at least 2".into(),
            ));
        }
        Ok(())
    }

    /// Cosine decay from `lr` to `min(min_lr, lr)` over `iterations` steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        let floor = self.min_lr.min(self.lr);
        let t = step as f64 / self.iterations.max(1) as f64;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Mean over pixels of `c·Σ_ch |target − corrected| − α·ln c`.
pub fn confidence_loss(corrected: &Image, target: &Image, conf: &ConfidenceMap, alpha: f64) -> Result<f64> {
    corrected.same_dims(target)?;
    if conf.height() != target.height() || conf.width() != target.width() {
        return Err(Error::DimensionMismatch("confidence map size".into()));
    }
    if let Some(c) = conf.values().iter().find(|&&c| !(c > 0.0)) {
        return Err(Error::InvalidArgument(format!("non-positive confidence {c}")));
    }
    let sum: f64 = conf
        .values()
        .iter()
        .zip(corrected.pixels().zip(target.pixels()))
        .map(|(&c, (o, t))| {
            let r: f64 = (0..3).map(|ch| (t[ch] - o[ch]).abs()).sum();
            c * r - alpha * c.ln()
        })
        .sum();
    Ok(sum / target.pixel_count() as f64)
}

/// Loss value and its two components, each averaged over source frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub confidence: f64,
    /// Unweighted TV (affine plus confidence grid).
    pub tv: f64,
}

/// Training objective for predicted grids against a pair's targets, slicing
/// against the pair's source frames.
pub fn total_loss(
    pair: &TrainingPair,
    grids: &[(BilateralGrid, ConfidenceGrid)],
    alpha: f64,
    lambda_tv: f64,
) -> Result<LossParts> {
    let sources = pair.sources();
    if grids.len() != sources.len() || pair.targets.len() != sources.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} grids for {} sources and {} targets",
            grids.len(),
            sources.len(),
            pair.targets.len()
        )));
    }
    let (mut conf_sum, mut tv_sum) = (0.0, 0.0);
    for ((g, c), (src, tgt)) in grids.iter().zip(sources.iter().zip(&pair.targets)) {
        let corrected = grid::slice_affine(g, src)?;
        let map = grid::slice_confidence(c, src)?;
        conf_sum += confidence_loss(&corrected, tgt, &map, alpha)?;
        tv_sum += grid::tv_loss(g) + grid::tv_loss_confidence(c);
    }
    let n = sources.len() as f64;
    let (confidence, tv) = (conf_sum / n, tv_sum / n);
    Ok(LossParts {
        total: confidence + lambda_tv * tv,
        confidence,
        tv,
    })
}

struct Objective {
    root: Var,
    confidence: Var,
    tv: Var,
}

fn objective_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    pair: &TrainingPair,
    alpha: f64,
    lambda_tv: f64,
) -> Result<Objective> {
    let frames: Vec<&Image> = pair.inputs.iter().collect();
    let handles = grids_on_tape(tape, pv, &frames)?;
    let dims = pv.config().grid_dims();
    let n = handles.len() as f64;
    let mut conf_terms = Vec::with_capacity(handles.len());
    let mut tv_terms = Vec::with_capacity(2 * handles.len());
    for (g, (src, tgt)) in handles.iter().zip(pair.sources().iter().zip(&pair.targets)) {
        let src = Rc::new(src.clone());
        let corrected = tape.slice_affine(g.affine, dims, Rc::clone(&src));
        let conf = tape.slice_confidence(g.log_conf, dims, src);
        conf_terms.push((tape.confidence_loss(corrected, conf, Rc::new(tgt.clone()), alpha), 1.0 / n));
        tv_terms.push((tape.tv(g.affine, dims), 1.0 / n));
        tv_terms.push((tape.tv(g.log_conf, dims), 1.0 / n));
    }
    let confidence = tape.weighted_sum(&conf_terms);
    let tv = tape.weighted_sum(&tv_terms);
    let root = tape.weighted_sum(&[(confidence, 1.0), (tv, lambda_tv)]);
    Ok(Objective {
        root,
        confidence,
        tv,
    })
}

/// Loss of the model on one pair (frames at model resolution).
pub fn batch_loss(params: &ModelParams, pair: &TrainingPair, alpha: f64, lambda_tv: f64) -> Result<LossParts> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let obj = objective_on_tape(&mut tape, &pv, pair, alpha, lambda_tv)?;
    Ok(LossParts {
        total: tape.scalar(obj.root),
        confidence: tape.scalar(obj.confidence),
        tv: tape.scalar(obj.tv),
    })
}

/// Loss and flat parameter gradient on one pair.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    pair: &TrainingPair,
    alpha: f64,
    lambda_tv: f64,
) -> Result<(LossParts, Vec<f64>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let obj = objective_on_tape(&mut tape, &pv, pair, alpha, lambda_tv)?;
    let grads = tape.backward(obj.root);
    let flat = tape.param_grads(&grads, params.len());
    Ok((
        LossParts {
            total: tape.scalar(obj.root),
            confidence: tape.scalar(obj.confidence),
            tv: tape.scalar(obj.tv),
        },
        flat,
    ))
}

/// One augmentation draw, shared by every frame of a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub scale: f64,
    pub blur_sigma: Option<f64>,
}

impl AugmentDraw {
    pub fn sample(seed: u64, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.random_bool(0.5);
        let scale = rng.random_range(1.0..=1.3);
        let blur = rng.random_bool(0.3);
        let sigma = rng.random_range(0.3..=1.2);
        Self {
            flip: cfg.flip && flip,
            scale: if cfg.scale_crop { scale } else { 1.0 },
            blur_sigma: (cfg.blur && blur).then_some(sigma),
        }
    }

    /// Apply to one frame. A scale that rounds to the original size is a
    /// no-op.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        let (h, w) = image.dims();
        let mut out = if self.flip {
            image.flip_horizontal()
        } else {
            image.clone()
        };
        let (sh, sw) = (
            (h as f64 * self.scale).round() as usize,
            (w as f64 * self.scale).round() as usize,
        );
        if (sh, sw) != (h, w) {
            out = out.resize_bilinear(sh, sw)?.crop((sh - h) / 2, (sw - w) / 2, h, w)?;
        }
        if let Some(sigma) = self.blur_sigma {
            out = out.gaussian_blur(sigma)?;
        }
        Ok(out)
    }

    pub fn is_noop(&self, height: usize, width: usize) -> bool {
        !self.flip
            && self.blur_sigma.is_none()
            && (height as f64 * self.scale).round() as usize == height
            && (width as f64 * self.scale).round() as usize == width
    }
}

/// Flip, scale-crop and blur every input and target frame with one draw.
pub fn augment_sequence(pair: &TrainingPair, seed: u64, cfg: &AugmentConfig) -> Result<TrainingPair> {
    let draw = AugmentDraw::sample(seed, cfg);
    Ok(TrainingPair {
        inputs: pair.inputs.iter().map(|f| draw.apply(f)).collect::<Result<_>>()?,
        targets: pair.targets.iter().map(|f| draw.apply(f)).collect::<Result<_>>()?,
        params: pair.params.clone(),
    })
}

/// Clean multi-view sequences at model resolution.
#[derive(Debug, Clone)]
pub struct Dataset {
    scenes: Vec<Vec<Image>>,
}

impl Dataset {
    /// Resize every frame to `resolution`; sequences need ≥ 2 frames.
    pub fn new(scenes: Vec<Vec<Image>>, resolution: (usize, usize)) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("dataset has no scenes".into()));
        }
        let scenes = scenes
            .into_iter()
            .map(|s| {
                if s.len() < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "scene with {} frame(s); need at least 2",
                        s.len()
                    )));
                }
                s.iter().map(|f| f.resize(resolution.0, resolution.1)).collect()
            })
            .collect::<Result<_>>()?;
        Ok(Self { scenes })
    }

    /// Procedural scenes from [`isp::synth_scene`], seeded by `scene_seed(seed, k)`.
    pub fn synthetic(count: usize, frames: usize, resolution: (usize, usize), seed: u64) -> Result<Self> {
        let scenes = (0..count)
            .map(|k| isp::synth_scene(scene_seed(seed, k), frames, resolution.0, resolution.1))
            .collect::<Result<_>>()?;
        Self::new(scenes, resolution)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene(&self, k: usize) -> &[Image] {
        &self.scenes[k]
    }
}

/// Seed of synthetic scene `k` for a dataset seed.
pub fn scene_seed(seed: u64, k: usize) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)).next_u64()
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub conf_loss: f64,
    pub tv_loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("step,loss,conf_loss,tv_loss,grad_norm\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.loss, r.conf_loss, r.tv_loss, r.grad_norm);
    }
    s
}

pub fn write_log_csv(path: impl AsRef<Path>, rows: &[TrainLogRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Draw a training pair: random scene, random frame subset (order kept),
/// ISP corruption, augmentation. Returns the pair and its corruption seed.
pub fn sample_batch(
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TrainingPair, u64)> {
    let scene = data.scene(rng.random_range(0..data.len()));
    let k = cfg.frames_per_batch.min(scene.len());
    let mut idx = sample(rng, scene.len(), k).into_vec();
    idx.sort_unstable();
    let frames: Vec<Image> = idx.iter().map(|&i| scene[i].clone()).collect();
    let pair_seed = rng.next_u64();
    let aug_seed = rng.next_u64();
    let pair = isp::generate_training_pair(&frames, pair_seed, cfg.severity)?;
    Ok((augment_sequence(&pair, aug_seed, &cfg.augment)?, pair_seed))
}

/// Train from `params` in place. `on_step` sees every log row as it is
/// produced. Parameters are rounded to `f32` at the end so the result
/// round-trips through a checkpoint exactly.
pub fn train(
    params: &mut ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(params.len());
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let (pair, pair_seed) = sample_batch(data, cfg, &mut rng)?;
        let (loss, mut grads) = batch_loss_and_grad(params, &pair, cfg.alpha, cfg.lambda_tv)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("loss {} on pair seed {pair_seed}", loss.total),
            });
        }
        let grad_norm = clip_gradients(&mut grads, cfg.clip_norm).map_err(|e| Error::Diverged {
            step,
            message: format!("{e} on pair seed {pair_seed}"),
        })?;
        adamw_step(
            params.values_mut(),
            &grads,
            &mut state,
            cfg.lr_at(step),
            cfg.weight_decay,
            AdamConfig::default(),
        )?;
        let row = TrainLogRow {
            step,
            loss: loss.total,
            conf_loss: loss.confidence,
            tv_loss: loss.tv,
            grad_norm,
        };
        on_step(&row);
        log.push(row);
    }
    params.round_to_f32();
    Ok(log)
}

/// Max relative error between `grad` and central differences of `f` at the
/// listed coordinates; denominator `max(|a|, |fd|, 1e-8)`.
pub fn finite_diff_check_fn(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
    step: f64,
) -> f64 {
    let mut work = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            work[i] = x[i] + step;
            let plus = f(&work);
            work[i] = x[i] - step;
            let minus = f(&work);
            work[i] = x[i];
            let fd = (plus - minus) / (2.0 * step);
            let a = grad[i];
            (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

/// Finite-difference check of the training objective on `pair`.
pub fn finite_diff_check(
    params: &ModelParams,
    pair: &TrainingPair,
    alpha: f64,
    lambda_tv: f64,
    coords: &[usize],
    step: f64,
) -> Result<f64> {
    let (_, grad) = batch_loss_and_grad(params, pair, alpha, lambda_tv)?;
    let config = *params.config();
    let mut failure = None;
    let err = finite_diff_check_fn(
        |x| {
            let p = ModelParams::from_values(config, x.to_vec()).expect("same layout");
            match batch_loss(&p, pair, alpha, lambda_tv) {
                Ok(l) => l.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        params.values(),
        &grad,
        coords,
        step,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

/// `per_group` random coordinates from every parameter tensor.
pub fn sample_param_coords(params: &ModelParams, per_group: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params
        .layout()
        .entries()
        .iter()
        .flat_map(|e| {
            let n = per_group.min(e.len());
            sample(&mut rng, e.len(), n)
                .into_iter()
                .map(|i| e.offset + i)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Tiny model, batch and random head used by gradient checks.
pub fn tiny_check_setup(seed: u64) -> Result<(ModelParams, TrainingPair)> {
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for name in ["head.fc2.weight", "head.fc2.bias"] {
        for v in params.tensor_mut(name) {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let frames = isp::synth_scene(seed, 3, cfg.image_size.0, cfg.image_size.1)?;
    let pair = isp::generate_training_pair(&frames, seed, 0.7)?;
    Ok((params, pair))
}
