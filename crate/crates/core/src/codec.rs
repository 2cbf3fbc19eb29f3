//! Image decoding and lossless encoding.
//!
//! Only 8-bit grayscale and RGB images are accepted. Alpha channels and
//! deeper sample formats are rejected rather than converted.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::codecs::png::PngEncoder;
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transform::ImageTensor;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("decode failed: {0}")]
    Decode(String),
    #[error("unsupported pixel format {0:?} (only 8-bit gray or RGB without alpha)")]
    Unsupported(ColorType),
    #[error("cannot encode {0}-channel image")]
    Channels(usize),
    #[error("encode failed: {0}")]
    Encode(String),
}

/// Lossless output formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Png,
    /// Binary PNM: P6 for RGB, P5 (PGM) for grayscale.
    Ppm,
}

impl OutputFormat {
    /// File extension for an image with `channels` channels.
    pub fn extension(self, channels: usize) -> &'static str {
        match (self, channels) {
            (OutputFormat::Png, _) => "png",
            (OutputFormat::Ppm, 1) => "pgm",
            (OutputFormat::Ppm, _) => "ppm",
        }
    }
}

/// Input file kinds recognized by extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Png,
    Pnm,
    Jpeg,
}

impl InputKind {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(InputKind::Png),
            "ppm" | "pgm" | "pnm" => Some(InputKind::Pnm),
            "jpg" | "jpeg" => Some(InputKind::Jpeg),
            _ => None,
        }
    }

    pub fn is_lossy(self) -> bool {
        matches!(self, InputKind::Jpeg)
    }

    fn format(self) -> ImageFormat {
        match self {
            InputKind::Png => ImageFormat::Png,
            InputKind::Pnm => ImageFormat::Pnm,
            InputKind::Jpeg => ImageFormat::Jpeg,
        }
    }
}

fn tensor_from_dynamic(img: DynamicImage) -> Result<ImageTensor, CodecError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => return Err(CodecError::Unsupported(other.color())),
    };
    ImageTensor::from_interleaved(channels, w, h, &data).map_err(|e| CodecError::Decode(e.to_string()))
}

/// Decodes an image, guessing the format from its content.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, CodecError> {
    let img = image::load_from_memory(bytes).map_err(|e| CodecError::Decode(e.to_string()))?;
    tensor_from_dynamic(img)
}

pub fn decode_image_as(bytes: &[u8], kind: InputKind) -> Result<ImageTensor, CodecError> {
    let img = image::load_from_memory_with_format(bytes, kind.format())
        .map_err(|e| CodecError::Decode(e.to_string()))?;
    tensor_from_dynamic(img)
}

pub fn encode_image(image: &ImageTensor, format: OutputFormat) -> Result<Vec<u8>, CodecError> {
    let color = match image.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        n => return Err(CodecError::Channels(n)),
    };
    let (w, h) = (image.width() as u32, image.height() as u32);
    let data = image.to_interleaved();
    let mut out = Vec::new();
    let result = match format {
        OutputFormat::Png => PngEncoder::new(Cursor::new(&mut out)).write_image(&data, w, h, color),
        OutputFormat::Ppm => {
            let subtype = if image.channels() == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(Cursor::new(&mut out)).with_subtype(subtype).write_image(&data, w, h, color)
        }
    };
    result.map_err(|e| CodecError::Encode(e.to_string()))?;
    Ok(out)
}
