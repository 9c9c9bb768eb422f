//! Pixel-space images in `[-1, 1]`, stored height-major with interleaved
//! channels, plus the 8-bit PNG encoding used for every emitted image.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Number of scalar values in one image.
    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(32, 32, 3)
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f64>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("Image::new", shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: ImageShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel values of pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let c = self.shape.channels;
        let start = (y * self.shape.width + x) * c;
        &self.data[start..start + c]
    }

    /// Quantizes to 8 bits as `round((v + 1) * 127.5)`, clamped to `0..=255`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(shape: ImageShape, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != shape.len() {
            return Err(Error::shape("Image::from_u8", shape.len(), bytes.len()));
        }
        let data = bytes.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
        Ok(Self { shape, data })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.shape.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => {
                return Err(Error::Format {
                    what: "png",
                    reason: format!("unsupported channel count {c}"),
                })
            }
        };
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.shape.width as u32, self.shape.height as u32);
            encoder.set_color(color);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header().map_err(png_err)?;
            writer.write_image_data(&self.to_u8()).map_err(png_err)?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(png_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format {
                what: "png",
                reason: format!("unsupported bit depth {:?}", info.bit_depth),
            });
        }
        let channels = info.color_type.samples();
        let shape = ImageShape::new(info.height as usize, info.width as usize, channels);
        Self::from_u8(shape, &buf[..info.buffer_size()])
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::persist::write_atomic(path.as_ref(), &self.encode_png()?)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }

    /// SHA-256 of the PNG encoding; identifies an image by what a viewer sees.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.encode_png()?)))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Tiles equally shaped images row-major into `cols` columns separated
    /// by a one-pixel border of value `-1`.
    pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
        let first = images.first().ok_or_else(|| Error::invalid("images", "empty grid"))?;
        let s = first.shape;
        if let Some(bad) = images.iter().find(|im| im.shape != s) {
            return Err(Error::shape("image grid", s, bad.shape));
        }
        let cols = cols.clamp(1, images.len());
        let rows = images.len().div_ceil(cols);
        let out_shape = ImageShape::new(rows * (s.height + 1) + 1, cols * (s.width + 1) + 1, s.channels);
        let mut out = Image::filled(out_shape, -1.0);
        for (k, im) in images.iter().enumerate() {
            let (oy, ox) = (1 + (k / cols) * (s.height + 1), 1 + (k % cols) * (s.width + 1));
            for y in 0..s.height {
                let src = &im.data[y * s.width * s.channels..(y + 1) * s.width * s.channels];
                let start = ((oy + y) * out_shape.width + ox) * s.channels;
                out.data[start..start + src.len()].copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format {
        what: "png",
        reason: e.to_string(),
    }
}
