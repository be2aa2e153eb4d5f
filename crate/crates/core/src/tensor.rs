use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::LesionMask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-major `C x H x W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width || data.is_empty() {
            return Err(Error::Shape {
                expected: format!("{channels}x{height}x{width}"),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Channel values at one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<T> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    /// Reads an 8-bit image as RGB scaled to `[0, 1]`.
    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![T::zero(); 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = T::lit(p.0[c] as f64 / 255.0);
            }
        }
        ImageTensor::new(3, h, w, data)
    }

    /// 8-bit RGB buffer, values clamped to `[0, 1]` and rounded.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height, self.width);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let ch = c.min(self.channels - 1);
                let val = self.get(ch, y as usize, x as usize).as_f64().clamp(0.0, 1.0);
                *v = (val * 255.0).round() as u8;
            }
            image::Rgb(px)
        })
    }

    pub fn save_rgb(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Area-averaged resampling to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.spatial() {
            return self.clone();
        }
        let mut out = ImageTensor::zeros(self.channels, height, width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for c in 0..self.channels {
            for oy in 0..height {
                let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
                for ox in 0..width {
                    let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
                    let (mut acc, mut tot) = (0.0, 0.0);
                    let mut y = y0.floor() as usize;
                    while (y as f64) < y1 && y < self.height {
                        let fy = y1.min(y as f64 + 1.0) - y0.max(y as f64);
                        let mut x = x0.floor() as usize;
                        while (x as f64) < x1 && x < self.width {
                            let fx = x1.min(x as f64 + 1.0) - x0.max(x as f64);
                            acc += fy * fx * self.get(c, y, x).as_f64();
                            tot += fy * fx;
                            x += 1;
                        }
                        y += 1;
                    }
                    out.set(c, oy, ox, T::lit(acc / tot));
                }
            }
        }
        out
    }

    /// Elementwise product with a single-channel map broadcast over channels.
    pub(crate) fn mul_spatial(&self, map: &[T], scale: T) -> Self {
        let hw = self.height * self.width;
        let mut out = self.clone();
        for ch in out.data.chunks_mut(hw) {
            for (v, &m) in ch.iter_mut().zip(map) {
                *v = *v * m * scale;
            }
        }
        out
    }

    pub(crate) fn check_mask_shape(&self, mask: &LesionMask) -> Result<()> {
        if mask.shape() != self.spatial() {
            return Err(Error::Shape {
                expected: format!("{}x{} mask", self.height, self.width),
                actual: format!("{}x{}", mask.height(), mask.width()),
            });
        }
        Ok(())
    }
}
