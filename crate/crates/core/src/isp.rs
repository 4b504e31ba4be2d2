//! Camera-ISP variation simulator used to synthesize paired training data.
//!
//! The forward chain works in linear light: decode sRGB, white balance and
//! exposure gain, colour-correction matrix, spatially varying shadow and
//! highlight gain, re-encode, then a gamma perturbation and final clamp.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LUMA_WEIGHTS;
use crate::image::Image;

/// Knots per side of the coarse tone field.
pub const TONE_FIELD_KNOTS: usize = 4;

pub const WB_LOG2_RANGE: f64 = 1.0;
pub const EXPOSURE_EV_RANGE: f64 = 2.5;
pub const CCM_OFFDIAG_RANGE: f64 = 0.2;
pub const GAMMA_LOW: f64 = 0.7;
pub const GAMMA_HIGH: f64 = 1.4;
pub const SHADOW_LIFT_MAX: f64 = 0.3;
pub const HIGHLIGHT_COMPRESS_MAX: f64 = 0.5;

/// One sampled set of corruption parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IspParams {
    pub wb_gain_r: f64,
    pub wb_gain_b: f64,
    pub exposure_ev: f64,
    pub ccm: [[f64; 3]; 3],
    pub gamma: f64,
    pub shadow_lift: f64,
    pub highlight_compress: f64,
    pub tone_field_seed: u64,
    pub tone_field_strength: f64,
}

impl IspParams {
    pub fn neutral() -> Self {
        Self {
            wb_gain_r: 1.0,
            wb_gain_b: 1.0,
            exposure_ev: 0.0,
            ccm: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: 1.0,
            shadow_lift: 0.0,
            highlight_compress: 0.0,
            tone_field_seed: 0,
            tone_field_strength: 0.0,
        }
    }

    pub fn is_neutral(&self) -> bool {
        let n = Self::neutral();
        self.wb_gain_r == n.wb_gain_r
            && self.wb_gain_b == n.wb_gain_b
            && self.exposure_ev == n.exposure_ev
            && self.ccm == n.ccm
            && self.gamma == n.gamma
            && !self.has_tone_adjustment()
    }

    pub fn has_tone_adjustment(&self) -> bool {
        self.tone_field_strength != 0.0 && (self.shadow_lift != 0.0 || self.highlight_compress != 0.0)
    }

    /// Drop the gamma and tone-field stages, leaving a transform that is
    /// affine in linear RGB.
    pub fn affine_only(&self) -> Self {
        Self {
            gamma: 1.0,
            shadow_lift: 0.0,
            highlight_compress: 0.0,
            tone_field_strength: 0.0,
            ..self.clone()
        }
    }

    /// Combined linear-light 3×3 map: CCM · diag(wb_r, 1, wb_b) · 2^ev.
    pub fn linear_matrix(&self) -> [[f64; 3]; 3] {
        let gain = self.exposure_ev.exp2();
        let wb = [self.wb_gain_r, 1.0, self.wb_gain_b];
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = self.ccm[r][c] * wb[c] * gain;
            }
        }
        m
    }

    pub fn check_invariants(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("isp params: {what}")));
        if !(0.5..=2.0).contains(&self.wb_gain_r) || !(0.5..=2.0).contains(&self.wb_gain_b) {
            return bad("white-balance gain outside [0.5, 2]");
        }
        if self.exposure_ev.abs() > EXPOSURE_EV_RANGE {
            return bad("exposure outside ±2.5 EV");
        }
        if self.ccm.iter().any(|row| (row.iter().sum::<f64>() - 1.0).abs() > 1e-6) {
            return bad("ccm row does not sum to 1");
        }
        if !(GAMMA_LOW..=GAMMA_HIGH).contains(&self.gamma) {
            return bad("gamma outside [0.7, 1.4]");
        }
        if !(0.0..=SHADOW_LIFT_MAX).contains(&self.shadow_lift)
            || !(0.0..=HIGHLIGHT_COMPRESS_MAX).contains(&self.highlight_compress)
            || !(0.0..=1.0).contains(&self.tone_field_strength)
        {
            return bad("tone adjustment outside its range");
        }
        Ok(())
    }
}

/// sRGB decode of one value; negatives clamp to 0.
#[inline]
pub fn srgb_decode(v: f64) -> f64 {
    let v = v.max(0.0);
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB encode of one linear value; negatives clamp to 0.
#[inline]
pub fn srgb_encode(v: f64) -> f64 {
    let v = v.max(0.0);
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(image: &Image) -> Image {
    image.map(srgb_decode)
}

pub fn linear_to_srgb(image: &Image) -> Image {
    image.map(srgb_encode)
}

fn unit(rng: &mut impl Rng) -> f64 {
    rng.random_range(-1.0..=1.0)
}

/// Draw corruption parameters; `severity` in `[0, 1]` scales every range
/// around its neutral value, and severity 0 gives exactly neutral params.
pub fn sample_isp_params(seed: u64, severity: f64) -> Result<IspParams> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!(
            "severity must be in [0, 1], got {severity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = severity;
    let wb_gain_r = (WB_LOG2_RANGE * s * unit(&mut rng)).exp2();
    let wb_gain_b = (WB_LOG2_RANGE * s * unit(&mut rng)).exp2();
    let exposure_ev = EXPOSURE_EV_RANGE * s * unit(&mut rng);
    let mut ccm = [[0.0; 3]; 3];
    for (r, row) in ccm.iter_mut().enumerate() {
        let mut off = 0.0;
        for (c, v) in row.iter_mut().enumerate() {
            if c != r {
                *v = CCM_OFFDIAG_RANGE * s * unit(&mut rng);
                off += *v;
            }
        }
        row[r] = 1.0 - off;
    }
    let g = unit(&mut rng);
    let gamma = if g < 0.0 {
        1.0 + s * g * (1.0 - GAMMA_LOW)
    } else {
        1.0 + s * g * (GAMMA_HIGH - 1.0)
    };
    let shadow_lift = SHADOW_LIFT_MAX * s * rng.random::<f64>();
    let highlight_compress = HIGHLIGHT_COMPRESS_MAX * s * rng.random::<f64>();
    let tone_field_strength = s * rng.random::<f64>();
    let tone_field_seed = rng.next_u64();
    Ok(IspParams {
        wb_gain_r,
        wb_gain_b,
        exposure_ev,
        ccm,
        gamma,
        shadow_lift,
        highlight_compress,
        tone_field_seed,
        tone_field_strength,
    })
}

/// Bilinearly upsample a `4 × 4` knot grid to `height × width`
/// (half-pixel centred, clamped borders).
pub fn upsample_knots(
    knots: &[[f64; TONE_FIELD_KNOTS]; TONE_FIELD_KNOTS],
    height: usize,
    width: usize,
) -> Vec<f64> {
    let n = TONE_FIELD_KNOTS as f64;
    let coord = |p: usize, extent: usize| {
        let c = ((p as f64 + 0.5) / extent as f64 * n - 0.5).clamp(0.0, n - 1.0);
        let lo = (c.floor() as usize).min(TONE_FIELD_KNOTS - 1);
        let hi = (lo + 1).min(TONE_FIELD_KNOTS - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for v in 0..height {
        let (y0, y1, fy) = coord(v, height);
        for u in 0..width {
            let (x0, x1, fx) = coord(u, width);
            let top = knots[y0][x0] * (1.0 - fx) + knots[y0][x1] * fx;
            let bottom = knots[y1][x0] * (1.0 - fx) + knots[y1][x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Smooth random field in `[-1, 1]`, row-major `height × width`.
pub fn spatial_tone_field(seed: u64, height: usize, width: usize) -> Result<Vec<f64>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions(format!(
            "tone field {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut knots = [[0.0; TONE_FIELD_KNOTS]; TONE_FIELD_KNOTS];
    for row in knots.iter_mut() {
        for k in row.iter_mut() {
            *k = unit(&mut rng);
        }
    }
    Ok(upsample_knots(&knots, height, width))
}

/// Run the forward corruption chain on an sRGB image.
pub fn apply_isp_variation(image: &Image, params: &IspParams) -> Result<Image> {
    if params.is_neutral() {
        return Ok(image.clamped());
    }
    let (h, w) = image.dims();
    let m = params.linear_matrix();
    let field = if params.has_tone_adjustment() {
        Some(spatial_tone_field(params.tone_field_seed, h, w)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(h * w * 3);
    for (i, rgb) in image.pixels().enumerate() {
        let lin = rgb.map(srgb_decode);
        let mut x = [0.0; 3];
        for r in 0..3 {
            x[r] = m[r][0] * lin[0] + m[r][1] * lin[1] + m[r][2] * lin[2];
        }
        if let Some(field) = &field {
            let y = LUMA_WEIGHTS[0] * x[0] + LUMA_WEIGHTS[1] * x[1] + LUMA_WEIGHTS[2] * x[2];
            let g = 1.0
                + params.tone_field_strength
                    * field[i]
                    * (params.shadow_lift * (1.0 - y) - params.highlight_compress * y);
            for v in x.iter_mut() {
                *v *= g;
            }
        }
        for v in x {
            let e = srgb_encode(v).powf(params.gamma).clamp(0.0, 1.0);
            if !e.is_finite() {
                return Err(Error::NonFinite(format!("isp output at pixel {i}")));
            }
            out.push(e);
        }
    }
    Image::new(h, w, out)
}

/// Paired multi-view data: `inputs[0]` is the reference, `inputs[i]` for
/// `i ≥ 1` are corrupted sources whose desired appearance is `targets[i - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub inputs: Vec<Image>,
    pub targets: Vec<Image>,
    /// `params[0]` is the shared reference transform; `params[i]` is the
    /// extra per-frame corruption of source `i`.
    pub params: Vec<IspParams>,
}

impl TrainingPair {
    pub fn frame_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn reference(&self) -> &Image {
        &self.inputs[0]
    }

    pub fn sources(&self) -> &[Image] {
        &self.inputs[1..]
    }
}

/// Corrupt a consistent sequence: one shared reference look (at half
/// severity) defines the targets, and every source frame gets an
/// independent extra variation on top.
pub fn generate_training_pair(sequence: &[Image], seed: u64, severity: f64) -> Result<TrainingPair> {
    if sequence.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 frames, got {}",
            sequence.len()
        )));
    }
    for f in &sequence[1..] {
        sequence[0].same_dims(f)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = sample_isp_params(rng.next_u64(), severity * 0.5)?;
    let mut params = vec![reference.clone()];
    let mut inputs = Vec::with_capacity(sequence.len());
    let mut targets = Vec::with_capacity(sequence.len() - 1);
    for (i, frame) in sequence.iter().enumerate() {
        let look = apply_isp_variation(frame, &reference)?;
        if i == 0 {
            inputs.push(look);
            continue;
        }
        let extra = sample_isp_params(rng.next_u64(), severity)?;
        inputs.push(apply_isp_variation(&look, &extra)?);
        targets.push(look);
        params.push(extra);
    }
    Ok(TrainingPair {
        inputs,
        targets,
        params,
    })
}

/// Crop offsets used by [`synth_scene`]; each step moves at most a quarter
/// of the crop size along each axis.
pub fn crop_offsets(seed: u64, frames: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (jy, jx) = ((height / 4) as i64, (width / 4) as i64);
    let (mut top, mut left) = ((height / 2) as i64, (width / 2) as i64);
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        if i > 0 {
            top = (top + rng.random_range(-jy..=jy)).clamp(0, height as i64);
            left = (left + rng.random_range(-jx..=jx)).clamp(0, width as i64);
        }
        out.push((top as usize, left as usize));
    }
    out
}

/// Procedural appearance-consistent sequence: one `2H × 2W` canvas (smooth
/// gradient plus 5–15 coloured rectangles and ellipses) viewed through `n`
/// overlapping jittered `H × W` crops.
pub fn synth_scene(seed: u64, n: usize, height: usize, width: usize) -> Result<Vec<Image>> {
    if n == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidDimensions(format!(
            "scene of {n} frames at {height}x{width}"
        )));
    }
    let canvas = synth_canvas(seed, 2 * height, 2 * width);
    crop_offsets(seed, n, height, width)
        .into_iter()
        .map(|(top, left)| canvas.crop(top, left, height, width))
        .collect()
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.random_range(0.08..0.92),
        rng.random_range(0.08..0.92),
        rng.random_range(0.08..0.92),
    ]
}

/// The base canvas behind [`synth_scene`].
pub fn synth_canvas(seed: u64, height: usize, width: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut canvas = Image::from_fn(height, width, |v, u| {
        let y = v as f64 / height as f64 - 0.5;
        let x = u as f64 / width as f64 - 0.5;
        let t = (0.5 + x * dx + y * dy).clamp(0.0, 1.0);
        std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t)
    });
    let shapes = rng.random_range(5..=15);
    for _ in 0..shapes {
        let color = random_color(&mut rng);
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(0.05..0.25) * height as f64;
        let rx = rng.random_range(0.05..0.25) * width as f64;
        let ellipse = rng.random_bool(0.5);
        for v in 0..height {
            for u in 0..width {
                let ny = (v as f64 + 0.5 - cy) / ry;
                let nx = (u as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    nx * nx + ny * ny <= 1.0
                } else {
                    nx.abs() <= 1.0 && ny.abs() <= 1.0
                };
                if inside {
                    canvas.set_pixel(v, u, color);
                }
            }
        }
    }
    canvas
}
