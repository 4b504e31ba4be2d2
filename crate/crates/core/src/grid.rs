//! Bilateral grids of local affine colour transforms and their slicing.
//!
//! A grid spans `(rows, cols, guidance bins)`; every vertex holds either a
//! 3×4 affine transform `[A | b]` flattened row-major (12 values) or a single
//! log-confidence value. Slicing reads per-pixel parameters by trilinear
//! interpolation at `(x, y, luminance)` and is linear in the grid values,
//! which is what makes the backward passes here simple scatters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Values per vertex of an affine grid.
pub const AFFINE_PARAMS: usize = 12;

/// Rec. 709 luma weights, applied to the encoded (non-linear) values.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Grid resolution: `rows × cols` spatial vertices and `bins` guidance vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
}

impl GridDims {
    pub fn new(rows: usize, cols: usize, bins: usize) -> Result<Self> {
        let dims = Self { rows, cols, bins };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.bins < 2 {
            return Err(Error::InvalidDimensions(format!(
                "grid needs rows, cols >= 1 and bins >= 2, got {}x{}x{}",
                self.rows, self.cols, self.bins
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn vertex_count(&self) -> usize {
        self.rows * self.cols * self.bins
    }

    #[inline]
    pub fn vertex_index(&self, row: usize, col: usize, bin: usize) -> usize {
        (row * self.cols + col) * self.bins + bin
    }
}

/// Per-vertex affine colour transforms, layout `(rows, cols, bins, 12)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilateralGrid {
    dims: GridDims,
    params: Vec<f64>,
}

/// Per-vertex log-confidence, layout `(rows, cols, bins, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceGrid {
    dims: GridDims,
    values: Vec<f64>,
}

/// Full-resolution, strictly positive confidence map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

const IDENTITY_VERTEX: [f64; AFFINE_PARAMS] = [1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.];

impl BilateralGrid {
    pub fn new(dims: GridDims, params: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if params.len() != dims.vertex_count() * AFFINE_PARAMS {
            return Err(Error::DimensionMismatch(format!(
                "grid {}x{}x{} needs {} params, got {}",
                dims.rows,
                dims.cols,
                dims.bins,
                dims.vertex_count() * AFFINE_PARAMS,
                params.len()
            )));
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bilateral grid parameters".into()));
        }
        Ok(Self { dims, params })
    }

    /// Every vertex holds `A = I`, `b = 0`.
    pub fn identity(dims: GridDims) -> Result<Self> {
        dims.validate()?;
        let params = (0..dims.vertex_count())
            .flat_map(|_| IDENTITY_VERTEX)
            .collect();
        Ok(Self { dims, params })
    }

    /// Every vertex holds the same transform.
    pub fn constant(dims: GridDims, vertex: [f64; AFFINE_PARAMS]) -> Result<Self> {
        Self::new(
            dims,
            (0..dims.vertex_count()).flat_map(|_| vertex).collect(),
        )
    }

    #[inline]
    pub fn dims(&self) -> GridDims {
        self.dims
    }

    #[inline]
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    #[inline]
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn vertex(&self, row: usize, col: usize, bin: usize) -> &[f64] {
        let i = self.dims.vertex_index(row, col, bin) * AFFINE_PARAMS;
        &self.params[i..i + AFFINE_PARAMS]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// Identity-initialized grid (`A = I`, `b = 0` at every vertex).
pub fn identity_grid(rows: usize, cols: usize, bins: usize) -> Result<BilateralGrid> {
    BilateralGrid::identity(GridDims::new(rows, cols, bins)?)
}

impl ConfidenceGrid {
    pub fn new(dims: GridDims, values: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.vertex_count() {
            return Err(Error::DimensionMismatch(format!(
                "confidence grid needs {} values, got {}",
                dims.vertex_count(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("confidence grid values".into()));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: GridDims) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.vertex_count()])
    }

    #[inline]
    pub fn dims(&self) -> GridDims {
        self.dims
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "confidence map {height}x{width} with {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "confidence values must be positive and finite, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Luma of one encoded RGB triple.
#[inline]
pub fn luma(rgb: [f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2]
}

/// Per-pixel guidance values, row-major `H × W`.
pub fn luminance(image: &Image) -> Vec<f64> {
    image.pixels().map(luma).collect()
}

/// The eight vertices touched by one pixel and their trilinear weights.
#[derive(Debug, Clone, Copy)]
pub struct SliceStencil {
    pub vertices: [usize; 8],
    pub weights: [f64; 8],
    /// Fractional offsets along `(y, x, z)`.
    pub frac: [f64; 3],
}

#[inline]
fn axis_coord(pixel: usize, extent: usize, vertices: usize) -> (usize, usize, f64) {
    let c = ((pixel as f64 + 0.5) / extent as f64 * vertices as f64 - 0.5)
        .clamp(0.0, (vertices - 1) as f64);
    split_coord(c, vertices)
}

#[inline]
fn split_coord(c: f64, vertices: usize) -> (usize, usize, f64) {
    let lo = (c.floor() as usize).min(vertices - 1);
    let hi = (lo + 1).min(vertices - 1);
    (lo, hi, c - lo as f64)
}

/// Trilinear stencil for the pixel at `(row, col)` of an `height × width`
/// image whose guidance value is `guide`.
#[inline]
pub fn stencil(
    dims: GridDims,
    height: usize,
    width: usize,
    row: usize,
    col: usize,
    guide: f64,
) -> SliceStencil {
    let (y0, y1, fy) = axis_coord(row, height, dims.rows);
    let (x0, x1, fx) = axis_coord(col, width, dims.cols);
    let z = (guide * (dims.bins - 1) as f64).clamp(0.0, (dims.bins - 1) as f64);
    let (z0, z1, fz) = split_coord(z, dims.bins);
    let mut vertices = [0; 8];
    let mut weights = [0.0; 8];
    let mut k = 0;
    for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                vertices[k] = dims.vertex_index(yi, xi, zi);
                weights[k] = wy * wx * wz;
                k += 1;
            }
        }
    }
    debug_assert!(weights.iter().all(|&w| w >= 0.0));
    debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    SliceStencil {
        vertices,
        weights,
        frac: [fy, fx, fz],
    }
}

/// Stencils for every pixel of `image`, row-major.
pub fn stencils(dims: GridDims, image: &Image) -> Vec<SliceStencil> {
    let (h, w) = image.dims();
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            out.push(stencil(dims, h, w, v, u, luma(image.pixel(v, u))));
        }
    }
    out
}

/// Trilinear interpolation as nested lerps (`a + f·(b − a)`), so constant
/// neighbourhoods reproduce their value exactly. The stencil's vertex order
/// is `(y, x, z)` with `z` fastest.
#[inline]
fn interpolate<const P: usize>(values: &[f64], st: &SliceStencil) -> [f64; P] {
    let [fy, fx, fz] = st.frac;
    let vtx = |k: usize| &values[st.vertices[k] * P..st.vertices[k] * P + P];
    let mut theta = [0.0; P];
    for (p, t) in theta.iter_mut().enumerate() {
        let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
        let z00 = lerp(vtx(0)[p], vtx(1)[p], fz);
        let z01 = lerp(vtx(2)[p], vtx(3)[p], fz);
        let z10 = lerp(vtx(4)[p], vtx(5)[p], fz);
        let z11 = lerp(vtx(6)[p], vtx(7)[p], fz);
        *t = lerp(lerp(z00, z01, fx), lerp(z10, z11, fx), fy);
    }
    theta
}

#[inline]
fn apply_affine(theta: &[f64; AFFINE_PARAMS], rgb: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let row = &theta[c * 4..c * 4 + 4];
        *o = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2] + row[3];
    }
    out
}

/// Per-pixel interpolated affine parameters `θ_d`, row-major.
pub fn slice_theta(grid: &BilateralGrid, image: &Image) -> Vec<[f64; AFFINE_PARAMS]> {
    stencils(grid.dims, image)
        .iter()
        .map(|st| interpolate::<AFFINE_PARAMS>(&grid.params, st))
        .collect()
}

/// Apply the grid to `image`. The output is not clamped.
pub fn slice_affine(grid: &BilateralGrid, image: &Image) -> Result<Image> {
    if !grid.is_finite() {
        return Err(Error::NonFinite("bilateral grid parameters".into()));
    }
    let data = slice_affine_raw(grid.dims, &grid.params, image);
    Image::new(image.height(), image.width(), data)
}

/// Slicing on a raw `(vertices × 12)` parameter buffer; returns `H·W·3` values.
pub fn slice_affine_raw(dims: GridDims, params: &[f64], image: &Image) -> Vec<f64> {
    debug_assert_eq!(params.len(), dims.vertex_count() * AFFINE_PARAMS);
    let (h, w) = image.dims();
    let mut out = Vec::with_capacity(h * w * 3);
    for v in 0..h {
        for u in 0..w {
            let rgb = image.pixel(v, u);
            let st = stencil(dims, h, w, v, u, luma(rgb));
            let theta = interpolate::<AFFINE_PARAMS>(params, &st);
            out.extend_from_slice(&apply_affine(&theta, rgb));
        }
    }
    out
}

/// Gradient of a scalar loss w.r.t. the grid parameters, given the loss
/// gradient w.r.t. the sliced output (`H·W·3`). Accumulates into `grad_params`.
pub fn slice_affine_backward(
    dims: GridDims,
    image: &Image,
    grad_output: &[f64],
    grad_params: &mut [f64],
) {
    let (h, w) = image.dims();
    debug_assert_eq!(grad_output.len(), h * w * 3);
    debug_assert_eq!(grad_params.len(), dims.vertex_count() * AFFINE_PARAMS);
    for v in 0..h {
        for u in 0..w {
            let rgb = image.pixel(v, u);
            let st = stencil(dims, h, w, v, u, luma(rgb));
            let g = &grad_output[(v * w + u) * 3..(v * w + u) * 3 + 3];
            let mut dtheta = [0.0; AFFINE_PARAMS];
            for c in 0..3 {
                dtheta[c * 4] = g[c] * rgb[0];
                dtheta[c * 4 + 1] = g[c] * rgb[1];
                dtheta[c * 4 + 2] = g[c] * rgb[2];
                dtheta[c * 4 + 3] = g[c];
            }
            for (&vi, &wt) in st.vertices.iter().zip(&st.weights) {
                let dst = &mut grad_params[vi * AFFINE_PARAMS..(vi + 1) * AFFINE_PARAMS];
                for p in 0..AFFINE_PARAMS {
                    dst[p] += wt * dtheta[p];
                }
            }
        }
    }
}

/// Slice log-confidence with the affine stencil, then exponentiate.
pub fn slice_confidence(grid: &ConfidenceGrid, image: &Image) -> Result<ConfidenceMap> {
    if !grid.values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("confidence grid values".into()));
    }
    let values = slice_confidence_raw(grid.dims, &grid.values, image);
    ConfidenceMap::new(image.height(), image.width(), values).map_err(|_| {
        Error::NonFinite("confidence map overflowed; log-confidence too large".into())
    })
}

/// Raw confidence slicing; returns `H·W` positive values.
pub fn slice_confidence_raw(dims: GridDims, log_conf: &[f64], image: &Image) -> Vec<f64> {
    debug_assert_eq!(log_conf.len(), dims.vertex_count());
    stencils(dims, image)
        .iter()
        .map(|st| interpolate::<1>(log_conf, st)[0].exp())
        .collect()
}

/// Backward for [`slice_confidence_raw`] given its output and the loss
/// gradient w.r.t. that output. Accumulates into `grad_log_conf`.
pub fn slice_confidence_backward(
    dims: GridDims,
    image: &Image,
    conf: &[f64],
    grad_conf: &[f64],
    grad_log_conf: &mut [f64],
) {
    for ((st, &c), &g) in stencils(dims, image).iter().zip(conf).zip(grad_conf) {
        let dz = g * c;
        for (&vi, &wt) in st.vertices.iter().zip(&st.weights) {
            grad_log_conf[vi] += wt * dz;
        }
    }
}

/// Total variation on a raw `(vertices × channels)` buffer: for each grid
/// axis with at least two vertices, the mean over adjacent pairs of the
/// squared L2 difference between their parameter vectors; the per-axis
/// means are summed.
pub fn tv_loss_raw(dims: GridDims, channels: usize, values: &[f64]) -> f64 {
    let mut total = 0.0;
    for_each_axis_pair(dims, |axis_pairs, pairs| {
        let mut acc = 0.0;
        pairs(&mut |a, b| {
            for p in 0..channels {
                let d = values[b * channels + p] - values[a * channels + p];
                acc += d * d;
            }
        });
        total += acc / axis_pairs as f64;
    });
    total
}

/// Gradient of [`tv_loss_raw`], scaled by `scale` and accumulated into `grad`.
pub fn tv_grad_raw(dims: GridDims, channels: usize, values: &[f64], scale: f64, grad: &mut [f64]) {
    for_each_axis_pair(dims, |axis_pairs, pairs| {
        let k = 2.0 * scale / axis_pairs as f64;
        pairs(&mut |a, b| {
            for p in 0..channels {
                let d = values[b * channels + p] - values[a * channels + p];
                grad[b * channels + p] += k * d;
                grad[a * channels + p] -= k * d;
            }
        });
    });
}

type PairVisitor<'a> = &'a mut dyn FnMut(usize, usize);

/// Calls `per_axis(pair_count, enumerate)` once for every axis that has pairs.
fn for_each_axis_pair(dims: GridDims, mut per_axis: impl FnMut(usize, &mut dyn FnMut(PairVisitor))) {
    let GridDims { rows, cols, bins } = dims;
    if rows > 1 {
        per_axis((rows - 1) * cols * bins, &mut |visit| {
            for r in 0..rows - 1 {
                for c in 0..cols {
                    for k in 0..bins {
                        visit(dims.vertex_index(r, c, k), dims.vertex_index(r + 1, c, k));
                    }
                }
            }
        });
    }
    if cols > 1 {
        per_axis(rows * (cols - 1) * bins, &mut |visit| {
            for r in 0..rows {
                for c in 0..cols - 1 {
                    for k in 0..bins {
                        visit(dims.vertex_index(r, c, k), dims.vertex_index(r, c + 1, k));
                    }
                }
            }
        });
    }
    if bins > 1 {
        per_axis(rows * cols * (bins - 1), &mut |visit| {
            for r in 0..rows {
                for c in 0..cols {
                    for k in 0..bins - 1 {
                        visit(dims.vertex_index(r, c, k), dims.vertex_index(r, c, k + 1));
                    }
                }
            }
        });
    }
}

/// Smoothness penalty on an affine grid.
pub fn tv_loss(grid: &BilateralGrid) -> f64 {
    tv_loss_raw(grid.dims, AFFINE_PARAMS, &grid.params)
}

/// Smoothness penalty on a confidence grid.
pub fn tv_loss_confidence(grid: &ConfidenceGrid) -> f64 {
    tv_loss_raw(grid.dims, 1, &grid.values)
}
