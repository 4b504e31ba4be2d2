//! Forward pass of the grid transformer, expressed on the autodiff tape.
//!
//! Layout conventions: a frame's tokens are `J` consecutive rows of a
//! `(frames·J) × C` matrix, ordered row-major over the patch grid; the head
//! emits `D·13` values per token, the first `D·12` being that grid column's
//! `D` affine transforms (bin-major) and the last `D` its log-confidences.

use std::rc::Rc;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::autodiff::{AttnGroups, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{self, BilateralGrid, ConfidenceGrid, ConfidenceMap, AFFINE_PARAMS};
use crate::image::Image;

/// Tokens of `n_frames` frames, `n_patches` each, as one `(N·J) × C` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub n_frames: usize,
    pub n_patches: usize,
    pub channels: usize,
    pub tokens: Mat,
}

impl TokenSequence {
    pub fn new(n_frames: usize, n_patches: usize, tokens: Mat) -> Result<Self> {
        if tokens.rows != n_frames * n_patches {
            return Err(Error::DimensionMismatch(format!(
                "{} token rows for {n_frames} frames of {n_patches} patches",
                tokens.rows
            )));
        }
        Ok(Self {
            n_frames,
            n_patches,
            channels: tokens.cols,
            tokens,
        })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.n_patches * self.channels;
        &self.tokens.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.data.iter().all(|v| v.is_finite())
    }
}

/// Split an image into non-overlapping patches: `J × (H_P·W_P·3)`, patches
/// row-major over the patch grid, pixels row-major within a patch with
/// interleaved R, G, B.
pub fn patchify(image: &Image, patch: (usize, usize)) -> Result<Mat> {
    let (h, w) = image.dims();
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::InvalidDimensions(format!(
            "image {h}x{w} not divisible into {ph}x{pw} patches"
        )));
    }
    let (gr, gc) = (h / ph, w / pw);
    let len = ph * pw * 3;
    let mut out = Mat::zeros(gr * gc, len);
    for pr in 0..gr {
        for pc in 0..gc {
            let row = out.row_mut(pr * gc + pc);
            for y in 0..ph {
                for x in 0..pw {
                    let px = image.pixel(pr * ph + y, pc * pw + x);
                    row[(y * pw + x) * 3..(y * pw + x) * 3 + 3].copy_from_slice(&px);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Mat, height: usize, width: usize, patch: (usize, usize)) -> Result<Image> {
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || !height.is_multiple_of(ph) || !width.is_multiple_of(pw) {
        return Err(Error::InvalidDimensions(format!(
            "{height}x{width} not divisible into {ph}x{pw} patches"
        )));
    }
    let gc = width / pw;
    if patches.rows != (height / ph) * gc || patches.cols != ph * pw * 3 {
        return Err(Error::DimensionMismatch(format!(
            "patch matrix {}x{} for {height}x{width}",
            patches.rows, patches.cols
        )));
    }
    Ok(Image::from_fn(height, width, |v, u| {
        let row = patches.row((v / ph) * gc + u / pw);
        let i = ((v % ph) * pw + u % pw) * 3;
        [row[i], row[i + 1], row[i + 2]]
    }))
}

/// Tape handles for every parameter tensor.
pub struct ParamVars<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> ParamVars<'p> {
    pub fn register(tape: &mut Tape, params: &'p ModelParams) -> Self {
        let vars = params
            .layout()
            .entries()
            .iter()
            .map(|e| {
                let (r, c) = e.matrix_shape();
                tape.param(params.values(), e.offset, r, c)
            })
            .collect();
        Self { params, vars }
    }

    pub fn get(&self, name: &str) -> Var {
        let layout = self.params.layout();
        let e = layout.entry(name);
        let idx = layout
            .entries()
            .iter()
            .position(|x| x.offset == e.offset)
            .expect("entry belongs to layout");
        self.vars[idx]
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }
}

fn linear(tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let w = pv.get(&format!("{prefix}.weight"));
    let b = pv.get(&format!("{prefix}.bias"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn norm(tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let g = pv.get(&format!("{prefix}.weight"));
    let b = pv.get(&format!("{prefix}.bias"));
    tape.layer_norm(x, g, b)
}

/// Projected multi-head attention: queries from `q_in`, keys and values
/// from `kv_in`, then the output projection.
pub fn attention_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    groups: AttnGroups,
) -> Var {
    let heads = pv.config().heads;
    let q = linear(tape, pv, &format!("{prefix}.attn.q"), q_in);
    let k = linear(tape, pv, &format!("{prefix}.attn.k"), kv_in);
    let v = linear(tape, pv, &format!("{prefix}.attn.v"), kv_in);
    let a = tape.attention(q, k, v, heads, groups);
    linear(tape, pv, &format!("{prefix}.attn.o"), a)
}

/// One pre-norm residual block: attention (self, or cross when `kv` is
/// given) then a GELU MLP.
pub fn block_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    kv: Option<Var>,
    groups: AttnGroups,
) -> Var {
    let h = norm(tape, pv, &format!("{prefix}.norm1"), x);
    let kv_n = match kv {
        Some(r) => norm(tape, pv, &format!("{prefix}.norm_kv"), r),
        None => h,
    };
    let a = attention_on_tape(tape, pv, prefix, h, kv_n, groups);
    let x = tape.add(x, a);
    let h2 = norm(tape, pv, &format!("{prefix}.norm2"), x);
    let m = linear(tape, pv, &format!("{prefix}.mlp.fc1"), h2);
    let m = tape.gelu(m);
    let m = linear(tape, pv, &format!("{prefix}.mlp.fc2"), m);
    tape.add(x, m)
}

fn frame_groups(j: usize) -> AttnGroups {
    AttnGroups {
        q_block: j,
        kv_block: j,
        kv_shared: false,
    }
}

/// Patch embedding plus the shared positional table.
pub fn embed_on_tape(tape: &mut Tape, pv: &ParamVars, patches: Var) -> Var {
    let x = linear(tape, pv, "embed", patches);
    let pe = pv.get("pos_embed");
    tape.add_tiled(x, pe)
}

/// Alternating frame-wise and global self-attention blocks.
pub fn encoder_on_tape(tape: &mut Tape, pv: &ParamVars, x: Var, n_frames: usize) -> Var {
    let cfg = *pv.config();
    let j = cfg.tokens_per_frame();
    let mut x = x;
    for b in 0..cfg.enc_blocks {
        x = block_on_tape(tape, pv, &format!("enc.{b}.frame"), x, None, frame_groups(j));
        x = block_on_tape(
            tape,
            pv,
            &format!("enc.{b}.global"),
            x,
            None,
            frame_groups(n_frames * j),
        );
    }
    x
}

/// Alternating frame-wise self-attention on the sources and cross-attention
/// from each source (queries) to the reference (keys and values).
pub fn decoder_on_tape(tape: &mut Tape, pv: &ParamVars, reference: Var, sources: Var) -> Var {
    let cfg = *pv.config();
    let j = cfg.tokens_per_frame();
    let cross = AttnGroups {
        q_block: j,
        kv_block: j,
        kv_shared: true,
    };
    let mut x = sources;
    for b in 0..cfg.dec_blocks {
        x = block_on_tape(tape, pv, &format!("dec.{b}.frame"), x, None, frame_groups(j));
        x = block_on_tape(tape, pv, &format!("dec.{b}.cross"), x, Some(reference), cross);
    }
    x
}

/// Per-source-frame grid handles: `(vertices × 12)` affine parameters and
/// `(vertices × 1)` log-confidence.
#[derive(Debug, Clone, Copy)]
pub struct GridVars {
    pub affine: Var,
    pub log_conf: Var,
}

/// Grid prediction head with the identity-anchored affine parameterization.
pub fn head_on_tape(tape: &mut Tape, pv: &ParamVars, decoded: Var, n_src: usize) -> Vec<GridVars> {
    let cfg = *pv.config();
    let d = cfg.guidance_bins;
    let verts = cfg.tokens_per_frame() * d;
    let h = norm(tape, pv, "head.norm", decoded);
    let h = linear(tape, pv, "head.fc1", h);
    let h = tape.gelu(h);
    let out = linear(tape, pv, "head.fc2", h);
    let rows = n_src * verts;
    let affine = tape.col_slice(out, 0, d * AFFINE_PARAMS);
    let affine = tape.reshape(affine, rows, AFFINE_PARAMS);
    let identity = identity_offsets(rows);
    let affine = tape.add_const(affine, &identity);
    let log_conf = tape.col_slice(out, d * AFFINE_PARAMS, d);
    let log_conf = tape.reshape(log_conf, rows, 1);
    (0..n_src)
        .map(|i| GridVars {
            affine: tape.row_slice(affine, i * verts, verts),
            log_conf: tape.row_slice(log_conf, i * verts, verts),
        })
        .collect()
}

fn identity_offsets(rows: usize) -> Mat {
    let mut m = Mat::zeros(rows, AFFINE_PARAMS);
    for r in 0..rows {
        let row = m.row_mut(r);
        row[0] = 1.0;
        row[5] = 1.0;
        row[10] = 1.0;
    }
    m
}

/// Resize to the network resolution when needed.
pub fn model_input(image: &Image, cfg: &ModelConfig) -> Result<Image> {
    let (h, w) = cfg.image_size;
    if image.dims() == (h, w) {
        Ok(image.clone())
    } else {
        image.resize(h, w)
    }
}

/// Stack the patches of every frame (reference first) into one leaf.
pub fn patches_on_tape(tape: &mut Tape, cfg: &ModelConfig, frames: &[&Image]) -> Result<Var> {
    let mut data = Vec::new();
    for f in frames {
        if f.dims() != cfg.image_size {
            return Err(Error::DimensionMismatch(format!(
                "frame {:?} does not match model resolution {:?}",
                f.dims(),
                cfg.image_size
            )));
        }
        data.extend(patchify(f, cfg.patch_size)?.data);
    }
    let rows = frames.len() * cfg.tokens_per_frame();
    Ok(tape.leaf(Mat::from_vec(rows, cfg.patch_len(), data)))
}

/// Everything from patches to per-source grid handles. `frames[0]` is the
/// reference; all frames must already be at model resolution.
pub fn grids_on_tape(tape: &mut Tape, pv: &ParamVars, frames: &[&Image]) -> Result<Vec<GridVars>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(
            "need a reference and at least one source frame".into(),
        ));
    }
    let cfg = *pv.config();
    let j = cfg.tokens_per_frame();
    let n = frames.len();
    let patches = patches_on_tape(tape, &cfg, frames)?;
    let x = embed_on_tape(tape, pv, patches);
    let x = encoder_on_tape(tape, pv, x, n);
    let reference = tape.row_slice(x, 0, j);
    let sources = tape.row_slice(x, j, (n - 1) * j);
    let decoded = decoder_on_tape(tape, pv, reference, sources);
    Ok(head_on_tape(tape, pv, decoded, n - 1))
}

/// Output of [`harmonize_sequence`], one entry per source frame.
#[derive(Debug, Clone)]
pub struct Harmonized {
    pub images: Vec<Image>,
    pub confidences: Vec<ConfidenceMap>,
    pub grids: Vec<BilateralGrid>,
    pub confidence_grids: Vec<ConfidenceGrid>,
}

/// Embed already-patchified frames: `Φ(patch) + PE`, no frame index.
pub fn embed(params: &ModelParams, patches: &[Mat]) -> Result<TokenSequence> {
    let cfg = params.config();
    let j = cfg.tokens_per_frame();
    let mut data = Vec::new();
    for p in patches {
        if p.rows != j || p.cols != cfg.patch_len() {
            return Err(Error::DimensionMismatch(format!(
                "patch matrix {}x{}, expected {}x{}",
                p.rows,
                p.cols,
                j,
                cfg.patch_len()
            )));
        }
        data.extend_from_slice(&p.data);
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let leaf = tape.leaf(Mat::from_vec(patches.len() * j, cfg.patch_len(), data));
    let x = embed_on_tape(&mut tape, &pv, leaf);
    TokenSequence::new(patches.len(), j, tape.value(x).clone())
}

/// Projected attention using the weights of block `prefix` (e.g.
/// `"enc.0.frame"`), queries attending to all rows of `keys_values`.
pub fn attention(params: &ModelParams, prefix: &str, queries: &Mat, keys_values: &Mat) -> Result<Mat> {
    let c = params.config().embed_dim;
    if queries.cols != c || keys_values.cols != c || keys_values.rows == 0 || queries.rows == 0 {
        return Err(Error::DimensionMismatch(format!(
            "attention inputs {}x{} / {}x{} with C = {c}",
            queries.rows, queries.cols, keys_values.rows, keys_values.cols
        )));
    }
    if !queries.data.iter().chain(&keys_values.data).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("attention inputs".into()));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let q = tape.leaf(queries.clone());
    let kv = tape.leaf(keys_values.clone());
    let groups = AttnGroups {
        q_block: queries.rows,
        kv_block: keys_values.rows,
        kv_shared: true,
    };
    let out = attention_on_tape(&mut tape, &pv, prefix, q, kv, groups);
    Ok(tape.value(out).clone())
}

/// One residual block applied with explicit grouping (see [`block_on_tape`]).
pub fn transformer_block(
    params: &ModelParams,
    prefix: &str,
    x: &Mat,
    kv: Option<&Mat>,
    groups: AttnGroups,
) -> Mat {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let kvv = kv.map(|m| tape.leaf(m.clone()));
    let out = block_on_tape(&mut tape, &pv, prefix, xv, kvv, groups);
    tape.value(out).clone()
}

fn check_tokens(params: &ModelParams, t: &TokenSequence) -> Result<()> {
    let cfg = params.config();
    if t.n_patches != cfg.tokens_per_frame() || t.channels != cfg.embed_dim {
        return Err(Error::DimensionMismatch(format!(
            "token sequence {}x{}x{} vs model J = {}, C = {}",
            t.n_frames,
            t.n_patches,
            t.channels,
            cfg.tokens_per_frame(),
            cfg.embed_dim
        )));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("token sequence".into()));
    }
    Ok(())
}

pub fn encoder_forward(params: &ModelParams, tokens: &TokenSequence) -> Result<TokenSequence> {
    check_tokens(params, tokens)?;
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let x = tape.leaf(tokens.tokens.clone());
    let out = encoder_on_tape(&mut tape, &pv, x, tokens.n_frames);
    TokenSequence::new(tokens.n_frames, tokens.n_patches, tape.value(out).clone())
}

pub fn decoder_forward(
    params: &ModelParams,
    reference: &TokenSequence,
    sources: &TokenSequence,
) -> Result<TokenSequence> {
    check_tokens(params, reference)?;
    check_tokens(params, sources)?;
    if reference.n_frames != 1 {
        return Err(Error::InvalidArgument("reference must be a single frame".into()));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let r = tape.leaf(reference.tokens.clone());
    let s = tape.leaf(sources.tokens.clone());
    let out = decoder_on_tape(&mut tape, &pv, r, s);
    TokenSequence::new(sources.n_frames, sources.n_patches, tape.value(out).clone())
}

/// Decoded source tokens to per-frame affine and confidence grids.
pub fn predict_grids(
    params: &ModelParams,
    decoded: &TokenSequence,
) -> Result<Vec<(BilateralGrid, ConfidenceGrid)>> {
    check_tokens(params, decoded)?;
    let dims = params.config().grid_dims();
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let x = tape.leaf(decoded.tokens.clone());
    let grids = head_on_tape(&mut tape, &pv, x, decoded.n_frames);
    grids
        .iter()
        .map(|g| {
            Ok((
                BilateralGrid::new(dims, tape.value(g.affine).data.clone())?,
                ConfidenceGrid::new(dims, tape.value(g.log_conf).data.clone())?,
            ))
        })
        .collect()
}

/// Predict grids from model-resolution copies of the frames and slice them
/// against the original, native-resolution sources.
pub fn harmonize_sequence(params: &ModelParams, reference: &Image, sources: &[Image]) -> Result<Harmonized> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no source frames to harmonize".into()));
    }
    let cfg = params.config();
    let small: Vec<Image> = std::iter::once(reference)
        .chain(sources)
        .map(|f| model_input(f, cfg))
        .collect::<Result<_>>()?;
    let refs: Vec<&Image> = small.iter().collect();
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let handles = grids_on_tape(&mut tape, &pv, &refs)?;
    let dims = cfg.grid_dims();
    let mut out = Harmonized {
        images: Vec::with_capacity(sources.len()),
        confidences: Vec::with_capacity(sources.len()),
        grids: Vec::with_capacity(sources.len()),
        confidence_grids: Vec::with_capacity(sources.len()),
    };
    for (g, src) in handles.iter().zip(sources) {
        let grid = BilateralGrid::new(dims, tape.value(g.affine).data.clone())?;
        let cgrid = ConfidenceGrid::new(dims, tape.value(g.log_conf).data.clone())?;
        out.images.push(grid::slice_affine(&grid, src)?);
        out.confidences.push(grid::slice_confidence(&cgrid, src)?);
        out.grids.push(grid);
        out.confidence_grids.push(cgrid);
    }
    Ok(out)
}

/// Slice handles against model-resolution sources inside the tape.
pub fn slice_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    grids: &[GridVars],
    sources: &[Rc<Image>],
) -> Vec<(Var, Var)> {
    let dims = cfg.grid_dims();
    grids
        .iter()
        .zip(sources)
        .map(|(g, s)| {
            (
                tape.slice_affine(g.affine, dims, Rc::clone(s)),
                tape.slice_confidence(g.log_conf, dims, Rc::clone(s)),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64) -> ModelParams {
        let mut p = ModelParams::init(ModelConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in p.tensor_mut("head.fc2.weight") {
            *v = rng.random_range(-0.05..0.05);
        }
        for v in p.tensor_mut("head.fc2.bias") {
            *v = rng.random_range(-0.05..0.05);
        }
        p
    }

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize, cfg: &ModelConfig) -> TokenSequence {
        let j = cfg.tokens_per_frame();
        let c = cfg.embed_dim;
        let data = (0..n * j * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        TokenSequence::new(n, j, Mat::from_vec(n * j, c, data)).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn permute_frames(t: &TokenSequence, order: &[usize]) -> TokenSequence {
        let n = t.n_patches * t.channels;
        let data = order.iter().flat_map(|&i| t.tokens.data[i * n..(i + 1) * n].to_vec()).collect();
        TokenSequence::new(t.n_frames, t.n_patches, Mat::from_vec(t.tokens.rows, t.channels, data)).unwrap()
    }

    #[test]
    fn patchify_layout_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(&mut rng, 32, 32);
        let p = patchify(&img, (16, 16)).unwrap();
        assert_eq!((p.rows, p.cols), (4, 16 * 16 * 3));
        assert_eq!(&p.row(1)[..3], &img.pixel(0, 16));
        assert_eq!(&p.row(2)[3..6], &img.pixel(16, 1));
        assert_eq!(unpatchify(&p, 32, 32, (16, 16)).unwrap(), img);
        let flat = patchify(&Image::filled(16, 16, [0.3; 3]), (8, 8)).unwrap();
        assert!(flat.data.iter().all(|&v| v == 0.3));
        assert!(patchify(&img, (5, 16)).is_err());
    }

    #[test]
    fn embed_is_affine_and_frame_agnostic() {
        let mut p = random_params(1);
        let cfg = *p.config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = cfg.tokens_per_frame();
        let len = cfg.patch_len();
        let mk = |rng: &mut ChaCha8Rng| Mat::from_vec(j, len, (0..j * len).map(|_| rng.random()).collect());
        let (p1, p2) = (mk(&mut rng), mk(&mut rng));
        let mut sum = p1.clone();
        sum.add_assign(&p2);
        let zero = Mat::zeros(j, len);
        let e = embed(&p, &[p1.clone(), p2.clone(), sum, zero.clone(), p1.clone()]).unwrap();
        let n = j * cfg.embed_dim;
        for i in 0..n {
            let lin = e.frame(2)[i] - e.frame(0)[i] - e.frame(1)[i] + e.frame(3)[i];
            assert!(lin.abs() < 1e-12);
        }
        assert_eq!(e.frame(0), e.frame(4));
        p.tensor_mut("embed.bias").fill(0.0);
        let e = embed(&p, &[zero]).unwrap();
        assert_eq!(e.frame(0), p.tensor("pos_embed"));
    }

    #[test]
    fn attention_single_key_and_permutation() {
        let p = random_params(3);
        let cfg = *p.config();
        let c = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Mat::from_vec(5, c, (0..5 * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let one = Mat::from_vec(1, c, (0..c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let out = attention(&p, "enc.0.frame", &q, &one).unwrap();
        let (v, o) = ("enc.0.frame.attn.v", "enc.0.frame.attn.o");
        let vw = Mat::from_vec(c, c, p.tensor(&format!("{v}.weight")).to_vec());
        let ow = Mat::from_vec(c, c, p.tensor(&format!("{o}.weight")).to_vec());
        let mut vp = crate::autodiff::matmul(&one, &vw);
        vp.data.iter_mut().zip(p.tensor(&format!("{v}.bias"))).for_each(|(a, b)| *a += b);
        let mut want = crate::autodiff::matmul(&vp, &ow);
        want.data.iter_mut().zip(p.tensor(&format!("{o}.bias"))).for_each(|(a, b)| *a += b);
        for r in 0..5 {
            assert!(max_diff(out.row(r), want.row(0)) < 1e-12);
        }
        let kv = Mat::from_vec(4, c, (0..4 * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut swapped = kv.clone();
        swapped.row_mut(0).copy_from_slice(kv.row(3));
        swapped.row_mut(3).copy_from_slice(kv.row(0));
        let a = attention(&p, "enc.0.frame", &q, &kv).unwrap();
        let b = attention(&p, "enc.0.frame", &q, &swapped).unwrap();
        assert!(max_diff(&a.data, &b.data) < 1e-12);
    }

    #[test]
    fn encoder_single_frame_is_two_frame_blocks() {
        let p = random_params(5);
        let cfg = *p.config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_tokens(&mut rng, 1, &cfg);
        let out = encoder_forward(&p, &t).unwrap();
        let g = AttnGroups {
            q_block: cfg.tokens_per_frame(),
            kv_block: cfg.tokens_per_frame(),
            kv_shared: false,
        };
        let mut x = t.tokens.clone();
        for b in 0..cfg.enc_blocks {
            x = transformer_block(&p, &format!("enc.{b}.frame"), &x, None, g);
            x = transformer_block(&p, &format!("enc.{b}.global"), &x, None, g);
        }
        assert!(max_diff(&out.tokens.data, &x.data) < 1e-12);
    }

    #[test]
    fn encoder_and_decoder_are_frame_permutation_equivariant() {
        let p = random_params(7);
        let cfg = *p.config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_tokens(&mut rng, 4, &cfg);
        let order = [0, 3, 1, 2];
        let a = permute_frames(&encoder_forward(&p, &t).unwrap(), &order);
        let b = encoder_forward(&p, &permute_frames(&t, &order)).unwrap();
        assert!(max_diff(&a.tokens.data, &b.tokens.data) < 1e-10);

        let r = random_tokens(&mut rng, 1, &cfg);
        let s = random_tokens(&mut rng, 3, &cfg);
        let order = [2, 0, 1];
        let a = permute_frames(&decoder_forward(&p, &r, &s).unwrap(), &order);
        let b = decoder_forward(&p, &r, &permute_frames(&s, &order)).unwrap();
        assert!(max_diff(&a.tokens.data, &b.tokens.data) < 1e-10);
    }

    #[test]
    fn decoder_ignores_reference_without_cross_values() {
        let mut p = random_params(9);
        let cfg = *p.config();
        for b in 0..cfg.dec_blocks {
            for t in ["attn.v.weight", "attn.v.bias", "attn.o.weight", "attn.o.bias"] {
                p.tensor_mut(&format!("dec.{b}.cross.{t}")).fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_tokens(&mut rng, 2, &cfg);
        let r1 = random_tokens(&mut rng, 1, &cfg);
        let r2 = random_tokens(&mut rng, 1, &cfg);
        let a = decoder_forward(&p, &r1, &s).unwrap();
        let b = decoder_forward(&p, &r2, &s).unwrap();
        assert!(max_diff(&a.tokens.data, &b.tokens.data) < 1e-12);

        // Self-attention-only path: the cross block reduces to its MLP.
        let j = cfg.tokens_per_frame();
        let g = AttnGroups { q_block: j, kv_block: j, kv_shared: false };
        let mut x = s.tokens.clone();
        for blk in 0..cfg.dec_blocks {
            x = transformer_block(&p, &format!("dec.{blk}.frame"), &x, None, g);
            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &p);
            let xv = tape.leaf(x.clone());
            let prefix = format!("dec.{blk}.cross");
            let h = norm(&mut tape, &pv, &format!("{prefix}.norm2"), xv);
            let m = linear(&mut tape, &pv, &format!("{prefix}.mlp.fc1"), h);
            let m = tape.gelu(m);
            let m = linear(&mut tape, &pv, &format!("{prefix}.mlp.fc2"), m);
            let y = tape.add(xv, m);
            x = tape.value(y).clone();
        }
        assert!(max_diff(&a.tokens.data, &x.data) < 1e-12);
    }

    #[test]
    fn zero_head_gives_identity_grids_and_unchanged_images() {
        let p = ModelParams::init(ModelConfig::tiny(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = random_image(&mut rng, 16, 16);
        let srcs: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 16, 16)).collect();
        let out = harmonize_sequence(&p, &r, &srcs).unwrap();
        let dims = p.config().grid_dims();
        for i in 0..3 {
            assert_eq!(out.grids[i], BilateralGrid::identity(dims).unwrap());
            assert!(out.confidence_grids[i].values().iter().all(|&v| v == 0.0));
            assert_eq!(out.images[i], srcs[i]);
            assert!((0..16).all(|v| (0..16).all(|u| out.confidences[i].get(v, u) == 1.0)));
        }
    }

    #[test]
    fn head_matches_naive_per_token_oracle() {
        let p = random_params(13);
        let cfg = *p.config();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = random_tokens(&mut rng, 2, &cfg);
        let grids = predict_grids(&p, &t).unwrap();
        let c = cfg.embed_dim;
        let d = cfg.guidance_bins;
        let j = cfg.tokens_per_frame();
        let lin = |x: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
            (0..out).map(|o| b[o] + (0..x.len()).map(|i| x[i] * w[i * out + o]).sum::<f64>()).collect()
        };
        for f in 0..2 {
            for tok in 0..j {
                let x = &t.frame(f)[tok * c..(tok + 1) * c];
                let mean = x.iter().sum::<f64>() / c as f64;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let g = p.tensor("head.norm.weight");
                let b = p.tensor("head.norm.bias");
                let n: Vec<f64> = (0..c).map(|i| (x[i] - mean) / (var + 1e-5).sqrt() * g[i] + b[i]).collect();
                let h = lin(&n, p.tensor("head.fc1.weight"), p.tensor("head.fc1.bias"), c);
                let h: Vec<f64> = h
                    .iter()
                    .map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()))
                    .collect();
                let o = lin(&h, p.tensor("head.fc2.weight"), p.tensor("head.fc2.bias"), d * 13);
                let (grid, conf) = &grids[f];
                for bin in 0..d {
                    let vert = tok * d + bin;
                    for k in 0..12 {
                        let id = if k == 0 || k == 5 || k == 10 { 1.0 } else { 0.0 };
                        assert!((grid.params()[vert * 12 + k] - (o[bin * 12 + k] + id)).abs() < 1e-10);
                    }
                    assert!((conf.values()[vert] - o[d * 12 + bin]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn perturbing_one_token_changes_one_grid_column() {
        let p = random_params(15);
        let cfg = *p.config();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let t = random_tokens(&mut rng, 1, &cfg);
        let mut t2 = t.clone();
        let tok = 2;
        t2.tokens.row_mut(tok)[0] += 0.5;
        let a = predict_grids(&p, &t).unwrap();
        let b = predict_grids(&p, &t2).unwrap();
        let d = cfg.guidance_bins;
        for vert in 0..cfg.tokens_per_frame() * d {
            let same = a[0].0.params()[vert * 12..(vert + 1) * 12] == b[0].0.params()[vert * 12..(vert + 1) * 12];
            assert_eq!(same, vert / d != tok, "vertex {vert}");
        }
    }

    #[test]
    fn native_resolution_slicing_matches_direct_slicing() {
        let p = random_params(17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let r = random_image(&mut rng, 64, 64);
        let srcs: Vec<Image> = (0..2).map(|_| random_image(&mut rng, 64, 64)).collect();
        let out = harmonize_sequence(&p, &r, &srcs).unwrap();
        for i in 0..2 {
            let direct = grid::slice_affine(&out.grids[i], &srcs[i]).unwrap();
            assert_eq!(out.images[i], direct);
            assert_eq!(out.images[i].dims(), (64, 64));
        }
        let again = harmonize_sequence(&p, &r, &srcs).unwrap();
        assert_eq!(again.images, out.images);
    }

    #[test]
    fn harmonize_permutes_with_sources() {
        let p = random_params(19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let r = random_image(&mut rng, 16, 16);
        let srcs: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 16, 16)).collect();
        let a = harmonize_sequence(&p, &r, &srcs).unwrap();
        let perm = vec![srcs[2].clone(), srcs[0].clone(), srcs[1].clone()];
        let b = harmonize_sequence(&p, &r, &perm).unwrap();
        for (i, &k) in [2, 0, 1].iter().enumerate() {
            assert!(max_diff(a.grids[k].params(), b.grids[i].params()) < 1e-10);
        }
        assert!(harmonize_sequence(&p, &r, &[]).is_err());
    }
}
