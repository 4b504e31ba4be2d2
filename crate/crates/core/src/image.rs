//! In-memory RGB images.

use crate::error::{Error, Result};

/// An `height × width × 3` image stored row-major with interleaved R, G, B.
///
/// Loaded and saved images live in `[0, 1]`; intermediate values (linear
/// light, unclamped grid output) may leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for v in 0..height {
            for u in 0..width {
                data.extend_from_slice(&f(v, u));
            }
        }
        Self {
            height,
            width,
            data,
        }
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
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |v, u| self.pixel(v, self.width - 1 - u))
    }

    /// Bilinear resample with half-pixel-centred coordinates and clamped borders.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "cannot resize to {height}x{width}"
            )));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Ok(Self::from_fn(height, width, |v, u| {
            let y = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let x = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            self.sample_bilinear(y, x)
        }))
    }

    /// Area-average downsample when shrinking, bilinear otherwise.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height > 0
            && width > 0
            && self.height.is_multiple_of(height)
            && self.width.is_multiple_of(width)
            && (self.height > height || self.width > width)
        {
            let fy = self.height / height;
            let fx = self.width / width;
            let norm = 1.0 / (fy * fx) as f64;
            return Ok(Self::from_fn(height, width, |v, u| {
                let mut acc = [0.0; 3];
                for dy in 0..fy {
                    for dx in 0..fx {
                        let p = self.pixel(v * fy + dy, u * fx + dx);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                acc.map(|a| a * norm)
            }));
        }
        self.resize_bilinear(height, width)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Self {
        Self::from_fn(self.height * factor, self.width * factor, |v, u| {
            self.pixel(v / factor, u / factor)
        })
    }

    pub(crate) fn sample_bilinear(&self, y: f64, x: f64) -> [f64; 3] {
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let p00 = self.pixel(y0, x0);
        let p01 = self.pixel(y0, x1);
        let p10 = self.pixel(y1, x0);
        let p11 = self.pixel(y1, x1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p01[c] * fx;
            let bottom = p10[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Separable Gaussian blur with a `⌈3σ⌉` radius and clamp-to-edge borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("blur sigma {sigma}")));
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let pass = |img: &Image, vertical: bool| {
            let (h, w) = img.dims();
            Image::from_fn(h, w, |v, u| {
                let mut acc = [0.0; 3];
                for (k, &wgt) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (y, x) = if vertical {
                        ((v as isize + off).clamp(0, h as isize - 1) as usize, u)
                    } else {
                        (v, (u as isize + off).clamp(0, w as isize - 1) as usize)
                    };
                    let p = img.pixel(y, x);
                    for c in 0..3 {
                        acc[c] += wgt * p[c];
                    }
                }
                acc
            })
        };
        Ok(pass(&pass(self, false), true))
    }

    /// Crop a `height × width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |v, u| self.pixel(top + v, left + u)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(Image::new(0, 4, vec![]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn flip_is_involution() {
        let img = Image::from_fn(3, 5, |v, u| [v as f64, u as f64, (v * u) as f64]);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().pixel(1, 0), img.pixel(1, 4));
    }

    #[test]
    fn area_resize_averages_blocks() {
        let img = Image::from_fn(4, 4, |v, u| [(v * 4 + u) as f64, 0.0, 1.0]);
        let small = img.resize(2, 2).unwrap();
        assert_eq!(small.pixel(0, 0), [(0.0 + 1.0 + 4.0 + 5.0) / 4.0, 0.0, 1.0]);
    }

    #[test]
    fn nearest_then_area_roundtrips() {
        let img = Image::from_fn(3, 2, |v, u| [v as f64 * 0.1, u as f64 * 0.2, 0.5]);
        let back = img.upsample_nearest(4).resize(3, 2).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let flat = Image::filled(6, 7, [0.2, 0.5, 0.9]);
        let b = flat.gaussian_blur(1.1).unwrap();
        for (a, b) in flat.data().iter().zip(b.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut spike = Image::filled(15, 15, [0.0; 3]);
        spike.set_pixel(7, 7, [1.0, 1.0, 1.0]);
        let b = spike.gaussian_blur(0.8).unwrap();
        let sum: f64 = b.pixels().map(|p| p[0]).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(b.pixel(7, 6), b.pixel(7, 8));
        assert!(b.pixel(7, 7)[0] > b.pixel(7, 6)[0]);
        assert!(spike.gaussian_blur(0.0).is_err());
    }
}
