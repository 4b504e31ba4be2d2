use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridDims;

/// Architecture hyper-parameters of the grid transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Network input resolution `(H, W)`.
    pub image_size: (usize, usize),
    /// Patch size `(H_P, W_P)`; one token and one grid column per patch.
    pub patch_size: (usize, usize),
    pub embed_dim: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Guidance (luminance) bins `D` of the predicted grids.
    pub guidance_bins: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    /// Desk-scale model: 64×64 input, 16×16 patches, 4×4×8 grids.
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            patch_size: (16, 16),
            embed_dim: 64,
            heads: 4,
            enc_blocks: 3,
            dec_blocks: 3,
            guidance_bins: 8,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// The smallest useful model, used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: (16, 16),
            patch_size: (8, 8),
            embed_dim: 16,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            guidance_bins: 4,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (ph, pw) = self.patch_size;
        let bad = |m: String| Err(Error::InvalidArgument(format!("model config: {m}")));
        if h == 0 || w == 0 || ph == 0 || pw == 0 {
            return bad("zero image or patch size".into());
        }
        if h % ph != 0 || w % pw != 0 {
            return bad(format!("image {h}x{w} not divisible by patch {ph}x{pw}"));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.guidance_bins < 2 || self.mlp_ratio == 0 {
            return bad("guidance_bins >= 2 and mlp_ratio >= 1 required".into());
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)`; equal to the spatial grid resolution.
    pub fn patch_grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch_size.0,
            self.image_size.1 / self.patch_size.1,
        )
    }

    /// Tokens per frame, `J`.
    pub fn tokens_per_frame(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }

    /// Values in one flattened patch, `H_P·W_P·3`.
    pub fn patch_len(&self) -> usize {
        self.patch_size.0 * self.patch_size.1 * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Head outputs per token: 12 affine values plus one log-confidence per bin.
    pub fn head_out(&self) -> usize {
        self.guidance_bins * 13
    }

    pub fn grid_dims(&self) -> GridDims {
        let (rows, cols) = self.patch_grid();
        GridDims {
            rows,
            cols,
            bins: self.guidance_bins,
        }
    }

    /// Field order used by the checkpoint header.
    pub(crate) fn to_words(self) -> [u32; 10] {
        [
            self.image_size.0 as u32,
            self.image_size.1 as u32,
            self.patch_size.0 as u32,
            self.patch_size.1 as u32,
            self.embed_dim as u32,
            self.heads as u32,
            self.enc_blocks as u32,
            self.dec_blocks as u32,
            self.guidance_bins as u32,
            self.mlp_ratio as u32,
        ]
    }

    pub(crate) fn from_words(w: [u32; 10]) -> Self {
        let u = |i: usize| w[i] as usize;
        Self {
            image_size: (u(0), u(1)),
            patch_size: (u(2), u(3)),
            embed_dim: u(4),
            heads: u(5),
            enc_blocks: u(6),
            dec_blocks: u(7),
            guidance_bins: u(8),
            mlp_ratio: u(9),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_sizes() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens_per_frame(), 16);
        assert_eq!(c.grid_dims(), GridDims { rows: 4, cols: 4, bins: 8 });
        let c32 = ModelConfig {
            image_size: (32, 32),
            ..c
        };
        assert_eq!(c32.tokens_per_frame(), 4);
    }

    #[test]
    fn rejects_bad_configs() {
        let c = ModelConfig::default();
        assert!(ModelConfig { image_size: (60, 64), ..c }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..c }.validate().is_err());
        assert!(ModelConfig { guidance_bins: 1, ..c }.validate().is_err());
    }
}
