//! 8-bit image container shared by every stage, plus PNG IO and bilinear resampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::round_half_up;

/// Interleaved (HWC) 8-bit image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image8 {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn from_raw(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "buffer of {} bytes for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, c)` for every sample.
    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies the rectangle `[x, x+w) × [y, y+h)`, which must lie inside the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::invalid(format!(
                "crop ({x},{y},{w},{h}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, self.channels, |x, y, c| {
            self.get(self.width - 1 - x, y, c)
        })
    }

    /// One channel as a row-major plane of `f64` in the 0..=255 range.
    pub fn plane_f64(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|&v| f64::from(v))
            .collect()
    }

    /// Reassembles an image from per-channel planes, rounding half-up and clipping to 0..=255.
    pub fn from_planes_f64(width: usize, height: usize, planes: &[Vec<f64>]) -> Self {
        let channels = planes.len();
        Self::from_fn(width, height, channels, |x, y, c| quantize_u8(planes[c][y * width + x]))
    }

    /// Bilinear resize with half-pixel centres (no antialiasing).
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Self {
        let planes: Vec<Vec<f64>> = (0..self.channels)
            .map(|c| resize_plane_bilinear(&self.plane_f64(c), self.width, self.height, out_w, out_h))
            .collect();
        Self::from_planes_f64(out_w, out_h, &planes)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let out = match img.color().channel_count() {
            1 | 2 => Self::from_raw(w, h, 1, img.into_luma8().into_raw())?,
            _ => Self::from_raw(w, h, 3, img.into_rgb8().into_raw())?,
        };
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => return Err(Error::invalid(format!("cannot encode {n}-channel image as PNG"))),
        };
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, color).map_err(|source| {
            Error::Image {
                path: path.to_path_buf(),
                source,
            }
        })
    }
}

#[inline]
pub(crate) fn quantize_u8(v: f64) -> u8 {
    round_half_up(v).clamp(0.0, 255.0) as u8
}

/// Bilinear resampling of a single plane, half-pixel centre convention with edge clamping.
pub fn resize_plane_bilinear(src: &[f64], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), in_w * in_h);
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    let axis = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, in_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, in_h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * in_w + x0] * (1.0 - fx) + src[y0 * in_w + x1] * fx;
            let bot = src[y1 * in_w + x0] * (1.0 - fx) + src[y1 * in_w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_copies_rectangle() {
        let img = Image8::from_fn(4, 3, 1, |x, y, _| (y * 4 + x) as u8);
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[5, 6, 9, 10]);
        assert!(img.crop(3, 0, 2, 1).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image8::from_fn(5, 7, 3, |x, y, c| (x * 10 + y * 3 + c) as u8);
        assert_eq!(img.resize_bilinear(5, 7), img);
        let flat = Image8::filled(9, 9, 1, 77);
        assert_eq!(flat.resize_bilinear(4, 4), Image8::filled(4, 4, 1, 77));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        // With half-pixel centres a 2x downsample samples exactly between source pixels.
        let src = [0.0, 10.0, 20.0, 30.0];
        let out = resize_plane_bilinear(&src, 4, 1, 2, 1);
        assert_eq!(out, vec![5.0, 25.0]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image8::from_fn(6, 4, 3, |x, y, c| (x * 40 + y * 7 + c * 3) as u8);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image8::load_png(&p).unwrap(), img);
    }
}
