//! Pixel containers and binary PPM I/O.
//!
//! [`ImageU8`] is the interleaved `H×W×3` form the renderer and the dataset
//! shards use. [`Image`] is the planar `[C, H, W]` float form the model, the
//! sampler and the metrics work on, with values nominally in `[0, 1]`.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("expected {expected} bytes of pixel data, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("ppm i/o: {0}")]
    Codec(#[from] image::ImageError),
}

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const BLACK: [u8; 3] = [0, 0, 0];
pub const GREEN: [u8; 3] = [0, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        let expected = height * width * 3;
        if data.len() != expected {
            return Err(ImageError::BadLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let o = (row * self.width + col) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Planar float copy scaled by 1/255.
    pub fn to_float<T: Scalar>(&self) -> Image<T> {
        let plane = self.height * self.width;
        let scale = T::from_f64(1.0 / 255.0);
        let mut data = vec![T::zero(); 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::from_f64(px[c] as f64) * scale;
            }
        }
        Image {
            channels: 3,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Pnm,
        )?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let img = image::ImageReader::open(path)
            .map_err(image::ImageError::IoError)?
            .with_guessed_format()
            .map_err(image::ImageError::IoError)?
            .decode()?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Self::from_raw(h as usize, w as usize, img.into_raw())
    }
}

/// Planar float image `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type ImageF32 = Image<f32>;

impl<T: Scalar> Image<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self, ImageError> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(ImageError::BadLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), ImageError> {
        if self.shape() != other.shape() {
            return Err(ImageError::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> T {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn clamp01(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.max(T::zero()).min(T::one());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Quantizes a 3-channel image for display, clamping to `[0, 1]` first.
    pub fn to_u8(&self) -> ImageU8 {
        assert_eq!(self.channels, 3, "display conversion needs RGB");
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                let v = self.data[c * plane + i].as_f64().clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
        ImageU8 {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Tiles equally sized images into a grid with `cols` columns and a
/// `gap`-pixel black border between cells.
pub fn tile_grid(cells: &[ImageU8], cols: usize, gap: usize) -> ImageU8 {
    if cells.is_empty() || cols == 0 {
        return ImageU8::filled(0, 0, BLACK);
    }
    let (h, w) = (cells[0].height, cells[0].width);
    let rows = cells.len().div_ceil(cols);
    let out_h = rows * h + (rows + 1) * gap;
    let out_w = cols * w + (cols + 1) * gap;
    let mut out = ImageU8::filled(out_h, out_w, BLACK);
    for (k, cell) in cells.iter().enumerate() {
        let (r0, c0) = (gap + (k / cols) * (h + gap), gap + (k % cols) * (w + gap));
        for r in 0..h.min(cell.height) {
            for c in 0..w.min(cell.width) {
                out.set_pixel(r0 + r, c0 + c, cell.pixel(r, c));
            }
        }
    }
    out
}
