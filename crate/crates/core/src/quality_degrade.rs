//! Surveillance-grade degradation (bilinear downsampling plus Gaussian blur) and the
//! PSNR / SSIM distortion measures used to characterise it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{resize_plane_bilinear, Image8};

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Degradation parameters. Blur is applied after resizing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeSpec {
    pub target_resolution: usize,
    pub blur_enabled: bool,
    pub kernel_size: usize,
    pub sigma: f64,
}

impl DegradeSpec {
    /// Resize to `target_resolution` with the default 3x3, sigma 1.5 blur toggled by `blur`.
    pub fn new(target_resolution: usize, blur: bool) -> Self {
        Self {
            target_resolution,
            blur_enabled: blur,
            kernel_size: 3,
            sigma: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_resolution == 0 {
            return Err(Error::invalid("target resolution must be at least 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

/// PSNR in dB (may be infinite) and mean SSIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityScore {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Square, normalized 2-D Gaussian sampled at integer offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    size: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<GaussianKernel> {
    if size.is_multiple_of(2) {
        return Err(Error::invalid(format!("kernel size {size} must be odd")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    let half = (size / 2) as f64;
    let one_d: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut weights: Vec<f64> = one_d.iter().flat_map(|a| one_d.iter().map(move |b| a * b)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianKernel { size, weights })
}

/// Convolution of one plane with edge-replicate padding.
pub fn convolve_plane(src: &[f64], width: usize, height: usize, k: &GaussianKernel) -> Vec<f64> {
    let r = (k.size / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for ky in 0..k.size {
                let sy = clamp(y as isize + ky as isize - r, height);
                for kx in 0..k.size {
                    let sx = clamp(x as isize + kx as isize - r, width);
                    acc += k.at(ky, kx) * src[sy * width + sx];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Resizes to `target_resolution` (square) bilinearly, optionally blurs, then quantizes once.
pub fn degrade(image: &Image8, spec: &DegradeSpec) -> Result<Image8> {
    spec.validate()?;
    let kernel = if spec.blur_enabled {
        Some(gaussian_kernel(spec.kernel_size, spec.sigma)?)
    } else {
        None
    };
    let r = spec.target_resolution;
    let planes: Vec<Vec<f64>> = (0..image.channels())
        .map(|c| {
            let resized = resize_plane_bilinear(&image.plane_f64(c), image.width(), image.height(), r, r);
            match &kernel {
                Some(k) => convolve_plane(&resized, r, r, k),
                None => resized,
            }
        })
        .collect();
    Ok(Image8::from_planes_f64(r, r, &planes))
}

fn check_same_dims(a: &Image8, b: &Image8) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(Error::invalid(format!(
            "image dims differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(reference: &Image8, test: &Image8) -> Result<f64> {
    check_same_dims(reference, test)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sum / reference.data().len() as f64)
}

/// `10 log10(255² / MSE)`; identical images give `+inf`.
pub fn psnr(reference: &Image8, test: &Image8) -> Result<f64> {
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / m).log10())
}

/// Summed-area table with a zero row and column prepended.
fn integral(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let w1 = width + 1;
    let mut t = vec![0.0; w1 * (height + 1)];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += plane[y * width + x];
            t[(y + 1) * w1 + x + 1] = t[y * w1 + x + 1] + row;
        }
    }
    t
}

fn window_sum(t: &[f64], width: usize, x: usize, y: usize, n: usize) -> f64 {
    let w1 = width + 1;
    t[(y + n) * w1 + x + n] - t[y * w1 + x + n] - t[(y + n) * w1 + x] + t[y * w1 + x]
}

fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let n = SSIM_WINDOW;
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let ta = integral(a, width, height);
    let tb = integral(b, width, height);
    let taa = integral(&sq(a, a), width, height);
    let tbb = integral(&sq(b, b), width, height);
    let tab = integral(&sq(a, b), width, height);
    let count = (n * n) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y in 0..=height - n {
        for x in 0..=width - n {
            let ma = window_sum(&ta, width, x, y, n) / count;
            let mb = window_sum(&tb, width, x, y, n) / count;
            let va = (window_sum(&taa, width, x, y, n) / count - ma * ma).max(0.0);
            let vb = (window_sum(&tbb, width, x, y, n) / count - mb * mb).max(0.0);
            let cov = window_sum(&tab, width, x, y, n) / count - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    total / windows as f64
}

/// Mean SSIM over all 8x8 windows (stride 1, uniform weights, population moments),
/// averaged over channels.
pub fn ssim(reference: &Image8, test: &Image8) -> Result<f64> {
    check_same_dims(reference, test)?;
    let (w, h) = (reference.width(), reference.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {w}x{h}"
        )));
    }
    let c = reference.channels();
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(&reference.plane_f64(ch), &test.plane_f64(ch), w, h))
        .sum();
    Ok(total / c as f64)
}

/// Degrades `reference`, upsamples the result back to the reference size bilinearly and scores it.
pub fn degraded_quality(reference: &Image8, spec: &DegradeSpec) -> Result<QualityScore> {
    let low = degrade(reference, spec)?;
    let back = low.resize_bilinear(reference.width(), reference.height());
    quality(reference, &back)
}

pub fn quality(reference: &Image8, test: &Image8) -> Result<QualityScore> {
    Ok(QualityScore {
        psnr_db: psnr(reference, test)?,
        ssim: ssim(reference, test)?,
    })
}

/// Seeded 3-channel texture with a roughly 1/f spectrum: a sum of randomly oriented sinusoids
/// whose amplitude falls off with frequency, plus a few smooth blobs.
pub fn synthetic_texture(size: usize, seed: u64) -> Image8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..24)
        .map(|_| {
            let freq: f64 = rng.random_range(1.0..24.0);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let a = 40.0 / freq.sqrt();
            Wave {
                fx: freq * theta.cos(),
                fy: freq * theta.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [
                    a * rng.random_range(0.5..1.0),
                    a * rng.random_range(0.5..1.0),
                    a * rng.random_range(0.5..1.0),
                ],
            }
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.25),
                rng.random_range(-60.0..60.0),
            )
        })
        .collect();
    let n = size as f64;
    let mut planes = vec![vec![0.0; size * size]; 3];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            let mut base = [128.0; 3];
            for w in &waves {
                let s = (std::f64::consts::TAU * (w.fx * u + w.fy * v) + w.phase).sin();
                for c in 0..3 {
                    base[c] += w.amp[c] * s;
                }
            }
            for &(cx, cy, r, a) in &blobs {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                let g = a * (-d2 / (2.0 * r * r)).exp();
                base.iter_mut().for_each(|b| *b += g);
            }
            for c in 0..3 {
                planes[c][y * size + x] = base[c];
            }
        }
    }
    Image8::from_planes_f64(size, size, &planes)
}
