//! Block-wise negative/positive transformation.
//!
//! Images are held as 8-bit samples, so inverting a sample is a byte XOR
//! with `2^L - 1 = 255`. This is exactly what the `[0, 1]` formulation
//! computes after scaling by 255, transforming, and scaling back, minus the
//! floating point round trip.
//!
//! The image is divided into `M x M` blocks; every block is flattened with
//! the canonical key order (channel, row, column) and sample `k` of every
//! block is inverted when bit `k` of the key is set. Blocks are indexed
//! from zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::key::Key;

/// Bits per sample.
pub const BIT_DEPTH: u32 = 8;
/// `2^L - 1`, the XOR mask for an inverted sample.
pub const SAMPLE_MASK: u8 = ((1u32 << BIT_DEPTH) - 1) as u8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransformError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image is {width}x{height}, not divisible into {block_size}x{block_size} blocks")]
    Dimension { width: usize, height: usize, block_size: usize },
    #[error("image has {image} channels but the key has {key}")]
    ChannelMismatch { image: usize, key: usize },
    #[error("block size must be positive")]
    ZeroBlockSize,
}

/// What to do with images whose sides are not multiples of the block size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    #[default]
    Error,
    CenterCrop,
}

/// Planar `channels x height x width` array of 8-bit samples.
///
/// Sample `(ch, y, x)` lives at `(ch * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    channels: usize,
    width: usize,
    height: usize,
    samples: Vec<u8>,
}

impl ImageTensor {
    pub fn new(channels: usize, width: usize, height: usize, samples: Vec<u8>) -> Result<Self, TransformError> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(TransformError::InvalidImage(format!(
                "dimensions must be positive (got {channels}x{width}x{height})"
            )));
        }
        if samples.len() != channels * width * height {
            return Err(TransformError::InvalidImage(format!(
                "{} samples for a {channels}x{width}x{height} tensor",
                samples.len()
            )));
        }
        Ok(Self { channels, width, height, samples })
    }

    /// Builds a planar tensor from interleaved (pixel-major) samples.
    pub fn from_interleaved(channels: usize, width: usize, height: usize, data: &[u8]) -> Result<Self, TransformError> {
        if data.len() != channels * width * height {
            return Err(TransformError::InvalidImage(format!(
                "{} interleaved samples for a {channels}x{width}x{height} image",
                data.len()
            )));
        }
        let plane = width * height;
        let mut samples = vec![0u8; data.len()];
        for (p, px) in data.chunks_exact(channels.max(1)).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                samples[ch * plane + p] = v;
            }
        }
        Self::new(channels, width, height, samples)
    }

    pub fn to_interleaved(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = vec![0u8; self.samples.len()];
        for ch in 0..self.channels {
            for (p, &v) in self.samples[ch * plane..(ch + 1) * plane].iter().enumerate() {
                out[p * self.channels + ch] = v;
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.samples
    }

    pub fn offset(&self, channel: usize, y: usize, x: usize) -> usize {
        (channel * self.height + y) * self.width + x
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> u8 {
        self.samples[self.offset(channel, y, x)]
    }

    /// Sub-image of `width x height` starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self, TransformError> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(TransformError::InvalidImage(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut samples = Vec::with_capacity(self.channels * width * height);
        for ch in 0..self.channels {
            for y in y0..y0 + height {
                let start = self.offset(ch, y, x0);
                samples.extend_from_slice(&self.samples[start..start + width]);
            }
        }
        Self::new(self.channels, width, height, samples)
    }

    /// Center crop to the largest multiple of `block_size` on each side.
    pub fn center_crop_to_multiple(&self, block_size: usize) -> Result<Self, TransformError> {
        if block_size == 0 {
            return Err(TransformError::ZeroBlockSize);
        }
        let w = self.width / block_size * block_size;
        let h = self.height / block_size * block_size;
        if w == 0 || h == 0 {
            return Err(TransformError::Dimension { width: self.width, height: self.height, block_size });
        }
        if w == self.width && h == self.height {
            return Ok(self.clone());
        }
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
    }

    fn check_divisible(&self, block_size: usize) -> Result<(), TransformError> {
        if block_size == 0 {
            return Err(TransformError::ZeroBlockSize);
        }
        if !self.width.is_multiple_of(block_size) || !self.height.is_multiple_of(block_size) {
            return Err(TransformError::Dimension { width: self.width, height: self.height, block_size });
        }
        Ok(())
    }
}

/// View of an image partitioned into `M x M` blocks.
#[derive(Debug, Clone, Copy)]
pub struct BlockGrid<'a> {
    image: &'a ImageTensor,
    block_size: usize,
    blocks_w: usize,
    blocks_h: usize,
}

impl<'a> BlockGrid<'a> {
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks_w(&self) -> usize {
        self.blocks_w
    }

    pub fn blocks_h(&self) -> usize {
        self.blocks_h
    }

    pub fn block_count(&self) -> usize {
        self.blocks_w * self.blocks_h
    }

    pub fn block_len(&self) -> usize {
        self.image.channels * self.block_size * self.block_size
    }

    /// Tensor offset of intra-block index `k` of block `(bx, by)`.
    pub fn sample_offset(&self, bx: usize, by: usize, k: usize) -> usize {
        let m = self.block_size;
        let ch = k / (m * m);
        let row = (k / m) % m;
        let col = k % m;
        self.image.offset(ch, by * m + row, bx * m + col)
    }

    /// Flattened block vector in canonical key order.
    pub fn block(&self, bx: usize, by: usize) -> Vec<u8> {
        (0..self.block_len())
            .map(|k| self.image.samples[self.sample_offset(bx, by, k)])
            .collect()
    }
}

pub fn split_blocks(image: &ImageTensor, block_size: usize) -> Result<BlockGrid<'_>, TransformError> {
    image.check_divisible(block_size)?;
    Ok(BlockGrid {
        image,
        block_size,
        blocks_w: image.width / block_size,
        blocks_h: image.height / block_size,
    })
}

/// Applies the keyed transform in place.
pub fn negpos_transform_in_place(image: &mut ImageTensor, key: &Key) -> Result<(), TransformError> {
    if image.channels != key.channels() {
        return Err(TransformError::ChannelMismatch { image: image.channels, key: key.channels() });
    }
    let m = key.block_size();
    image.check_divisible(m)?;

    // One mask row per (channel, intra-block row), tiled across the width.
    let width = image.width;
    let mut row_mask = vec![0u8; width];
    for ch in 0..image.channels {
        for r in 0..m {
            for (x, mask) in row_mask.iter_mut().enumerate() {
                *mask = if key.bit(key.index_of(ch, r, x % m)) { SAMPLE_MASK } else { 0 };
            }
            for y in (r..image.height).step_by(m) {
                let start = image.offset(ch, y, 0);
                for (s, mask) in image.samples[start..start + width].iter_mut().zip(&row_mask) {
                    *s ^= mask;
                }
            }
        }
    }
    Ok(())
}

pub fn negpos_transform(image: &ImageTensor, key: &Key) -> Result<ImageTensor, TransformError> {
    let mut out = image.clone();
    negpos_transform_in_place(&mut out, key)?;
    Ok(out)
}

/// Transform with an explicit policy for non-divisible dimensions.
pub fn negpos_transform_with(image: &ImageTensor, key: &Key, crop: CropMode) -> Result<ImageTensor, TransformError> {
    let mut out = match crop {
        CropMode::Error => image.clone(),
        CropMode::CenterCrop => image.center_crop_to_multiple(key.block_size())?,
    };
    negpos_transform_in_place(&mut out, key)?;
    Ok(out)
}

/// Inverse transform. The transform is an involution, so this is the same
/// operation as [`negpos_transform`].
pub fn transform_inverse(image: &ImageTensor, key: &Key) -> Result<ImageTensor, TransformError> {
    negpos_transform(image, key)
}
