//! PNG images, sequence manifests and the `BGRD` binary grid format.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BilateralGrid, ConfidenceGrid, GridDims, AFFINE_PARAMS};
use crate::image::Image;

/// Load an 8- or 16-bit PNG as RGB in `[0, 1]`. Grayscale is replicated;
/// alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(image::ImageFormat::Png) {
        return Err(Error::UnsupportedFormat {
            path: path.into(),
            message: format!("expected PNG, detected {:?}", reader.format()),
        });
    }
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.into(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidDimensions(format!(
            "{} has zero-sized dimensions",
            path.display()
        )));
    }
    let data: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => decoded
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => decoded
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                message: format!("unsupported pixel layout {:?}", other.color()),
            })
        }
    };
    Image::new(h, w, data)
}

/// Quantize one channel value the way [`save_image`] does.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Clamp to `[0, 1]`, quantize with `round(v·255)` and write an 8-bit RGB PNG.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !image.is_finite() {
        return Err(Error::NonFinite(format!(
            "refusing to save non-finite image to {}",
            path.display()
        )));
    }
    let raw: Vec<u8> = image.data().iter().map(|&v| quantize_u8(v)).collect();
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, raw)
        .expect("buffer length matches image dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Encode {
                path: path.into(),
                message: other.to_string(),
            },
        })
}

/// Write a single-channel map (values expected in `[0, 1]`) as a gray PNG.
pub fn save_gray(height: usize, width: usize, values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let data = values.iter().flat_map(|&v| [v, v, v]).collect();
    save_image(&Image::new(height, width, data)?, path)
}

/// An ordered multi-view sequence on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceManifest {
    #[serde(rename = "scene")]
    pub scene_id: String,
    #[serde(rename = "reference")]
    pub reference_index: usize,
    #[serde(rename = "frames")]
    pub frame_paths: Vec<String>,
    #[serde(
        rename = "ground_truth",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub ground_truth_paths: Option<Vec<String>>,
}

impl SequenceManifest {
    pub fn validate(&self) -> Result<()> {
        if self.frame_paths.is_empty() {
            return Err(Error::InvalidManifest("no frames listed".into()));
        }
        if self.reference_index >= self.frame_paths.len() {
            return Err(Error::InvalidManifest(format!(
                "reference index {} out of range for {} frames",
                self.reference_index,
                self.frame_paths.len()
            )));
        }
        if let Some(gt) = &self.ground_truth_paths {
            if gt.len() != self.frame_paths.len() {
                return Err(Error::InvalidManifest(format!(
                    "{} ground-truth paths for {} frames",
                    gt.len(),
                    self.frame_paths.len()
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Resolve a listed path relative to the manifest's directory.
    pub fn resolve(base: &Path, entry: &str) -> PathBuf {
        let p = Path::new(entry);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// A manifest with its frames (and ground truth, when listed) loaded.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub manifest: SequenceManifest,
    pub frames: Vec<Image>,
    pub ground_truth: Option<Vec<Image>>,
}

impl LoadedSequence {
    pub fn reference(&self) -> &Image {
        &self.frames[self.manifest.reference_index]
    }

    /// Indices of every non-reference frame, in manifest order.
    pub fn source_indices(&self) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| i != self.manifest.reference_index)
            .collect()
    }
}

/// Load a manifest and every image it lists; all frames must share a size.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<LoadedSequence> {
    let path = path.as_ref();
    let manifest = SequenceManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load_all = |entries: &[String]| -> Result<Vec<Image>> {
        entries
            .iter()
            .map(|e| load_image(SequenceManifest::resolve(base, e)))
            .collect()
    };
    let frames = load_all(&manifest.frame_paths)?;
    let ground_truth = manifest.ground_truth_paths.as_deref().map(load_all).transpose()?;
    for f in frames.iter().chain(ground_truth.iter().flatten()) {
        frames[0].same_dims(f)?;
    }
    Ok(LoadedSequence {
        manifest,
        frames,
        ground_truth,
    })
}

pub const GRID_MAGIC: [u8; 4] = *b"BGRD";
pub const GRID_VERSION: u32 = 1;
const GRID_HEADER_BYTES: usize = 4 + 4 * 5;

/// Either kind of grid stored in a `BGRD` file.
#[derive(Debug, Clone, PartialEq)]
pub enum GridFile {
    Affine(BilateralGrid),
    Confidence(ConfidenceGrid),
}

impl From<BilateralGrid> for GridFile {
    fn from(g: BilateralGrid) -> Self {
        GridFile::Affine(g)
    }
}

impl From<ConfidenceGrid> for GridFile {
    fn from(g: ConfidenceGrid) -> Self {
        GridFile::Confidence(g)
    }
}

impl GridFile {
    fn parts(&self) -> (GridDims, usize, &[f64]) {
        match self {
            GridFile::Affine(g) => (g.dims(), AFFINE_PARAMS, g.params()),
            GridFile::Confidence(g) => (g.dims(), 1, g.values()),
        }
    }
}

/// Serialize to the `BGRD` layout: magic, version, `rows, cols, bins,
/// channels` as little-endian u32, then f32 values in `(rows, cols, bins,
/// channels)` order.
pub fn encode_grid(grid: &GridFile) -> Vec<u8> {
    let (dims, channels, values) = grid.parts();
    let mut out = Vec::with_capacity(GRID_HEADER_BYTES + values.len() * 4);
    out.extend_from_slice(&GRID_MAGIC);
    for v in [
        GRID_VERSION,
        dims.rows as u32,
        dims.cols as u32,
        dims.bins as u32,
        channels as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridFile> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} byte grid file", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != GRID_MAGIC {
        return Err(Error::BadMagic {
            expected: GRID_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < GRID_HEADER_BYTES {
        return Err(Error::Truncated("grid header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != GRID_VERSION {
        return Err(Error::BadVersion {
            expected: GRID_VERSION,
            found: version,
        });
    }
    let (rows, cols, bins, channels) = (
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
    );
    let dims = GridDims::new(rows, cols, bins)?;
    if channels != AFFINE_PARAMS && channels != 1 {
        return Err(Error::InvalidDimensions(format!(
            "grid channel count must be 12 or 1, got {channels}"
        )));
    }
    let count = dims.vertex_count() * channels;
    let payload = &bytes[GRID_HEADER_BYTES..];
    if payload.len() != count * 4 {
        return Err(Error::Truncated(format!(
            "expected {} payload bytes, found {}",
            count * 4,
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(if channels == AFFINE_PARAMS {
        GridFile::Affine(BilateralGrid::new(dims, values)?)
    } else {
        GridFile::Confidence(ConfidenceGrid::new(dims, values)?)
    })
}

pub fn write_grid(grid: &GridFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<GridFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_quantization_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.png");
        let img = Image::new(1, 2, vec![1.2, 0.5, -0.1, 0.0, 1.0, 128.0 / 255.0]).unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.data()[0], 1.0);
        assert_eq!(back.data()[1], 128.0 / 255.0);
        assert_eq!(back.data()[2], 0.0);
        assert_eq!(back.data()[5], 128.0 / 255.0);
    }

    #[test]
    fn loads_gray_and_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("g8.png");
        image::GrayImage::from_raw(2, 1, vec![0, 255]).unwrap().save(&p8).unwrap();
        let g = load_image(&p8).unwrap();
        assert_eq!(g.data(), &[0., 0., 0., 1., 1., 1.]);

        let p16 = dir.path().join("c16.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(1, 1, vec![65535u16, 0, 32768])
            .unwrap()
            .save(&p16)
            .unwrap();
        let c = load_image(&p16).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0, 32768.0 / 65535.0]);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let bogus = dir.path().join("bogus.png");
        fs::write(&bogus, b"definitely not an image").unwrap();
        assert!(load_image(&bogus).is_err());
    }

    #[test]
    fn unwritable_path() {
        let img = Image::filled(2, 2, [0.5; 3]);
        assert!(save_image(&img, "/nonexistent-dir/x/y.png").is_err());
    }

    #[test]
    fn manifest_json_shape() {
        let m = SequenceManifest::from_json(
            r#"{"scene": "s", "reference": 1, "frames": ["a.png", "b.png"]}"#,
        )
        .unwrap();
        assert_eq!(m.reference_index, 1);
        assert!(m.ground_truth_paths.is_none());
        assert!(!m.to_json().unwrap().contains("ground_truth"));
        assert!(SequenceManifest::from_json(r#"{"scene": "s", "reference": 2, "frames": ["a", "b"]}"#).is_err());
        assert!(SequenceManifest::from_json(r#"{"scene": "s", "reference": 0, "frames": []}"#).is_err());
        assert!(SequenceManifest::from_json(
            r#"{"scene": "s", "reference": 0, "frames": ["a"], "ground_truth": ["x", "y"]}"#
        )
        .is_err());
    }

    #[test]
    fn grid_file_size_and_errors() {
        let g = BilateralGrid::new(GridDims::new(2, 2, 2).unwrap(), vec![0.0; 96]).unwrap();
        let bytes = encode_grid(&g.into());
        assert_eq!(bytes.len(), 24 + 2 * 2 * 2 * 12 * 4);
        assert_eq!(&bytes[..4], b"BGRD");

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_grid(&bad), Err(Error::BadMagic { .. })));

        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(decode_grid(&ver), Err(Error::BadVersion { found: 2, .. })));

        assert!(matches!(decode_grid(&bytes[..403]), Err(Error::Truncated(_))));
        assert!(matches!(decode_grid(&bytes[..10]), Err(Error::Truncated(_))));
    }
}
