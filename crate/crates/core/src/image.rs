//! RGB images stored as `H×W×3` `f32` values in `[0, 1]`.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::vit::interp::catmull_rom_weights;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image extents must be positive"));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::invalid(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
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

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Translate content by `(dx, dy)` pixels; vacated pixels take `pad`.
    pub fn shifted(&self, dx: i64, dy: i64, pad: [f32; 3]) -> Image {
        let mut out = Image::filled(self.height, self.width, pad);
        for y in 0..self.height {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for x in 0..self.width {
                let sx = x as i64 - dx;
                if sx < 0 || sx >= self.width as i64 {
                    continue;
                }
                out.set_pixel(y, x, self.pixel(sy as usize, sx as usize));
            }
        }
        out
    }

    /// Mirror left-right.
    pub fn flipped(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Image::new(height, width, data)
    }

    /// Uniformly placed `side×side` crop.
    pub fn random_square_crop<R: Rng + ?Sized>(&self, side: usize, rng: &mut R) -> Result<Image> {
        if side == 0 || side > self.height || side > self.width {
            return Err(Error::invalid(format!(
                "square crop of side {side} does not fit a {}x{} image",
                self.height, self.width
            )));
        }
        let top = rng.gen_range(0..=self.height - side);
        let left = rng.gen_range(0..=self.width - side);
        self.crop(top, left, side, side)
    }

    /// Separable Catmull-Rom resize, clamped to `[0, 1]`.
    pub fn resize_bicubic(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be positive"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let wy = catmull_rom_weights(self.height, height);
        let wx = catmull_rom_weights(self.width, width);
        // Horizontal pass then vertical pass.
        let mut tmp = vec![0.0f32; self.height * width * 3];
        for y in 0..self.height {
            for (x, taps) in wx.iter().enumerate() {
                for c in 0..3 {
                    let mut acc = 0.0f32;
                    for &(sx, w) in taps {
                        acc += w as f32 * self.data[(y * self.width + sx) * 3 + c];
                    }
                    tmp[(y * width + x) * 3 + c] = acc;
                }
            }
        }
        let mut data = vec![0.0f32; height * width * 3];
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..width {
                for c in 0..3 {
                    let mut acc = 0.0f32;
                    for &(sy, w) in taps {
                        acc += w as f32 * tmp[(sy * width + x) * 3 + c];
                    }
                    data[(y * width + x) * 3 + c] = acc.clamp(0.0, 1.0);
                }
            }
        }
        Image::new(height, width, data)
    }

    /// Resize so the shorter side equals `target`, keeping the aspect ratio.
    pub fn resize_shorter_side(&self, target: usize) -> Result<Image> {
        let short = self.height.min(self.width);
        let scale = target as f64 / short as f64;
        let h = ((self.height as f64 * scale).round() as usize).max(target);
        let w = ((self.width as f64 * scale).round() as usize).max(target);
        self.resize_bicubic(h, w)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::invalid("image buffer size"))?;
        buf.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = ::image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }
}
