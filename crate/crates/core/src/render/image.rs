use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{contract, Error, Result};

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageRGB8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        contract!(
            data.len() == width * height * 3,
            "image data has {} bytes, expected {}",
            data.len(),
            width * height * 3
        );
        Ok(ImageRGB8 {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        ImageRGB8 {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Places `self` and `right` next to each other; heights must match.
    pub fn hconcat(&self, right: &ImageRGB8) -> Result<ImageRGB8> {
        contract!(
            self.height == right.height,
            "cannot join images of heights {} and {}",
            self.height,
            right.height
        );
        let width = self.width + right.width;
        let mut data = Vec::with_capacity(width * self.height * 3);
        for y in 0..self.height {
            data.extend_from_slice(&self.data[y * self.width * 3..(y + 1) * self.width * 3]);
            data.extend_from_slice(&right.data[y * right.width * 3..(y + 1) * right.width * 3]);
        }
        ImageRGB8::new(width, self.height, data)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let png_err = |e: png::EncodingError| Error::Png {
            path: "<memory>".into(),
            msg: e.to_string(),
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&self.data).map_err(png_err)?;
            writer.finish().map_err(png_err)?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png().map_err(|e| match e {
            Error::Png { msg, .. } => Error::Png {
                path: path.into(),
                msg,
            },
            other => other,
        })?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads an 8-bit PNG; gray and alpha channels are expanded or dropped
    /// to RGB.
    pub fn read_png(path: &Path) -> Result<ImageRGB8> {
        let png_err = |msg: String| Error::Png {
            path: path.into(),
            msg,
        };
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| png_err(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| png_err("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src = &buf[..info.buffer_size()];
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(png_err(format!("unsupported colour type {other:?}"))),
        };
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let row = &src[y * info.line_size..y * info.line_size + w * channels];
            for px in row.chunks_exact(channels) {
                match channels {
                    1 | 2 => data.extend_from_slice(&[px[0], px[0], px[0]]),
                    _ => data.extend_from_slice(&px[..3]),
                }
            }
        }
        ImageRGB8::new(w, h, data)
    }
}
