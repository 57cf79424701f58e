//! Raw depth / IR conversion to 8-bit face crops.
//!
//! Depth frames arrive as wide-range integer maps (millimetres, zero marks a hole). The face
//! box from an external detector is used to collect depth statistics, fill holes inside the
//! expanded portrait region and map the face depth range onto the full 8-bit scale, saturating
//! everything outside that window.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image8;
use crate::round_half_up;

/// Full-scale value of a 24-bit sensor.
pub const DEFAULT_MAX_RAW: u32 = (1 << 24) - 1;

/// Expansion factor applied to detector boxes to include forehead and some background.
pub const PORTRAIT_FACTOR: f64 = 1.3;

/// Half-width of the fixed window used by [`normalize_depth_alg2`], in millimetres.
pub const FIXED_WINDOW_HALF_WIDTH: f64 = 50.0;

const FASD_MAGIC: &[u8; 4] = b"FASD";

/// Single-channel integer depth (or raw IR) image. A value of zero is a hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDepthMap {
    height: usize,
    width: usize,
    max_raw: u32,
    values: Vec<u32>,
}

impl RawDepthMap {
    pub fn new(height: usize, width: usize, values: Vec<u32>) -> Result<Self> {
        Self::with_max_raw(height, width, values, DEFAULT_MAX_RAW)
    }

    pub fn with_max_raw(height: usize, width: usize, values: Vec<u32>, max_raw: u32) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("depth map dimensions must be at least 1x1"));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} depth map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            max_raw,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        Self {
            height,
            width,
            max_raw: DEFAULT_MAX_RAW,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_raw(&self) -> u32 {
        self.max_raw
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u32) {
        self.values[y * self.width + x] = v;
    }

    /// Reads either the `FASD` binary tile format or a 16-bit single-channel PNG.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(FASD_MAGIC) {
            return Self::read_fasd(&mut bytes.as_slice());
        }
        let img = image::load_from_memory(&bytes).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color() == image::ColorType::L8 {
            let values = img.into_luma8().into_raw().into_iter().map(u32::from).collect();
            return Self::with_max_raw(h, w, values, u8::MAX as u32);
        }
        let values = img.into_luma16().into_raw().into_iter().map(u32::from).collect();
        Self::with_max_raw(h, w, values, u16::MAX as u32)
    }

    /// Little-endian tile: magic `FASD`, u32 height, u32 width, u32 max_raw, row-major u32 values.
    pub fn read_fasd(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)
            .map_err(|e| Error::invalid(format!("truncated FASD header: {e}")))?;
        if &head[..4] != FASD_MAGIC {
            return Err(Error::invalid("missing FASD magic"));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
        let (height, width, max_raw) = (word(4) as usize, word(8) as usize, word(12));
        let mut body = vec![0u8; height * width * 4];
        r.read_exact(&mut body)
            .map_err(|e| Error::invalid(format!("truncated FASD body: {e}")))?;
        let values: Vec<u32> = body
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(v) = values.iter().find(|&&v| v > max_raw) {
            return Err(Error::invalid(format!("value {v} exceeds max_raw {max_raw}")));
        }
        Self::with_max_raw(height, width, values, max_raw)
    }

    pub fn write_fasd(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(FASD_MAGIC)?;
        for v in [self.height as u32, self.width as u32, self.max_raw] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_fasd(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(16 + self.values.len() * 4);
        self.write_fasd(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Axis-aligned box in pixel coordinates: top-left `(x, y)` and extents `(w, h)`.
///
/// Coordinates are signed so that an expansion can be expressed before it is clipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FaceBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl FaceBox {
    pub const fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }

    /// Checks positive extents and containment in an image of `(height, width)`.
    fn check_inside(&self, dims: (usize, usize)) -> Result<()> {
        if self.w <= 0 || self.h <= 0 {
            return Err(Error::invalid(format!("degenerate face box {self:?}")));
        }
        let (h, w) = (dims.0 as i64, dims.1 as i64);
        if self.x < 0 || self.y < 0 || self.x + self.w > w || self.y + self.h > h {
            return Err(Error::invalid(format!(
                "face box {self:?} outside {}x{} image",
                dims.0, dims.1
            )));
        }
        Ok(())
    }

    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| (x as usize, y as usize)))
    }
}

impl std::str::FromStr for FaceBox {
    type Err = Error;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<i64> = s
            .split(',')
            .map(|p| p.trim().parse::<i64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad box `{s}`: {e}")))?;
        match parts[..] {
            [x, y, w, h] => Ok(Self::new(x, y, w, h)),
            _ => Err(Error::invalid(format!("box `{s}` must have four fields x,y,w,h"))),
        }
    }
}

/// Scales the box about its centre without clipping.
///
/// The new extent is `round(factor * w)`; the origin moves by half the growth, rounded so that
/// odd growth keeps the extra pixel on the right/bottom.
pub fn expand_bbox_unclipped(b: FaceBox, factor: f64) -> Result<FaceBox> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(format!("expansion factor {factor} must be positive")));
    }
    if factor < 1.0 {
        return Err(Error::invalid(format!("expansion factor {factor} is below 1")));
    }
    if b.w <= 0 || b.h <= 0 {
        return Err(Error::invalid(format!("degenerate face box {b:?}")));
    }
    let nw = round_half_up(factor * b.w as f64) as i64;
    let nh = round_half_up(factor * b.h as f64) as i64;
    Ok(FaceBox::new(b.x - (nw - b.w) / 2, b.y - (nh - b.h) / 2, nw, nh))
}

/// Expands `b` by `factor` about its centre, then clips to an image of `(height, width)`.
pub fn expand_bbox(b: FaceBox, factor: f64, image_dims: (usize, usize)) -> Result<FaceBox> {
    b.check_inside(image_dims)?;
    let e = expand_bbox_unclipped(b, factor)?;
    let (h, w) = (image_dims.0 as i64, image_dims.1 as i64);
    let x0 = e.x.max(0);
    let y0 = e.y.max(0);
    let x1 = (e.x + e.w).min(w);
    let y1 = (e.y + e.h).min(h);
    // The input box is inside the image and contained in the expansion, so this is never empty.
    Ok(FaceBox::new(x0, y0, x1 - x0, y1 - y0))
}

/// Statistics of the valid (non-zero) depth values inside the face box, in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthStats {
    pub mean: f64,
    pub minimum: f64,
    pub maximum: f64,
}

pub fn face_depth_stats(depth: &RawDepthMap, face: FaceBox) -> Result<DepthStats> {
    face.check_inside((depth.height, depth.width))?;
    let mut sum = 0u64;
    let mut count = 0u64;
    let mut lo = u32::MAX;
    let mut hi = 0u32;
    for (x, y) in face.pixels() {
        let v = depth.get(x, y);
        if v == 0 {
            continue;
        }
        sum += u64::from(v);
        count += 1;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if count == 0 {
        return Err(Error::EmptyFaceDepth);
    }
    Ok(DepthStats {
        mean: sum as f64 / count as f64,
        minimum: f64::from(lo),
        maximum: f64::from(hi),
    })
}

/// 8-bit depth map produced by the normalization algorithms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormalizedDepthMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl NormalizedDepthMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn to_image(&self) -> Image8 {
        Image8::from_raw(self.width, self.height, 1, self.values.clone()).expect("normalized map dimensions are valid")
    }
}

/// Clamp-to-window then linear map of `[lo, hi]` onto `[0, 255]`; a zero-width window maps to 128.
#[inline]
pub fn window_map(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 128;
    }
    let t = (v.clamp(lo, hi) - lo) / (hi - lo);
    round_half_up(255.0 * t).clamp(0.0, 255.0) as u8
}

fn normalize_with_window(
    depth: &RawDepthMap,
    face: FaceBox,
    stats: DepthStats,
    lo: f64,
    hi: f64,
) -> Result<NormalizedDepthMap> {
    let dims = (depth.height, depth.width);
    let portrait = expand_bbox(face, PORTRAIT_FACTOR, dims)?;
    let inside = |x: usize, y: usize| {
        let (x, y) = (x as i64, y as i64);
        x >= portrait.x && x < portrait.x + portrait.w && y >= portrait.y && y < portrait.y + portrait.h
    };
    let mut values = Vec::with_capacity(depth.values.len());
    for y in 0..depth.height {
        for x in 0..depth.width {
            let raw = depth.get(x, y);
            let v = if raw == 0 && inside(x, y) {
                stats.mean
            } else {
                f64::from(raw)
            };
            values.push(window_map(v, lo, hi));
        }
    }
    Ok(NormalizedDepthMap {
        height: depth.height,
        width: depth.width,
        values,
    })
}

/// Hole-fills the portrait region with the face mean, then maps the observed face
/// `[minimum, maximum]` range onto the 8-bit scale.
pub fn normalize_depth_alg1(depth: &RawDepthMap, face: FaceBox) -> Result<NormalizedDepthMap> {
    let stats = face_depth_stats(depth, face)?;
    normalize_with_window(depth, face, stats, stats.minimum, stats.maximum)
}

/// Same as [`normalize_depth_alg1`] but with the window fixed to `mean ± 50` mm.
pub fn normalize_depth_alg2(depth: &RawDepthMap, face: FaceBox) -> Result<NormalizedDepthMap> {
    let stats = face_depth_stats(depth, face)?;
    let (lo, hi) = (
        stats.mean - FIXED_WINDOW_HALF_WIDTH,
        stats.mean + FIXED_WINDOW_HALF_WIDTH,
    );
    normalize_with_window(depth, face, stats, lo, hi)
}

/// Which depth normalization to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthAlgorithm {
    /// Window is the observed face min..max.
    Alg1,
    /// Window is mean ± 50 mm.
    Alg2,
}

impl std::str::FromStr for DepthAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg1" => Ok(Self::Alg1),
            "alg2" => Ok(Self::Alg2),
            other => Err(Error::invalid(format!("unknown depth algorithm `{other}`"))),
        }
    }
}

pub fn normalize_depth(algo: DepthAlgorithm, depth: &RawDepthMap, face: FaceBox) -> Result<NormalizedDepthMap> {
    match algo {
        DepthAlgorithm::Alg1 => normalize_depth_alg1(depth, face),
        DepthAlgorithm::Alg2 => normalize_depth_alg2(depth, face),
    }
}

/// Uniform quantization of the full raw range: `floor(v * 256 / (max_raw + 1))`, saturating.
pub fn quantize_ir_uniform(ir: &RawDepthMap) -> Result<Image8> {
    let full = u64::from(ir.max_raw) + 1;
    let data = ir
        .values
        .iter()
        .map(|&v| {
            if v > ir.max_raw {
                return Err(Error::invalid(format!("raw value {v} exceeds max_raw {}", ir.max_raw)));
            }
            Ok((u64::from(v) * 256 / full).min(255) as u8)
        })
        .collect::<Result<Vec<_>>>()?;
    Image8::from_raw(ir.width, ir.height, 1, data)
}

/// Crops the same expanded, clipped portrait box out of three aligned modalities.
pub fn crop_multimodal(
    rgb: &Image8,
    depth: &Image8,
    ir: &Image8,
    face: FaceBox,
    factor: f64,
) -> Result<(Image8, Image8, Image8)> {
    if rgb.dims() != depth.dims() || rgb.dims() != ir.dims() {
        return Err(Error::Alignment(format!(
            "rgb {:?}, depth {:?}, ir {:?} (height, width)",
            rgb.dims(),
            depth.dims(),
            ir.dims()
        )));
    }
    let b = expand_bbox(face, factor, rgb.dims())?;
    let (x, y, w, h) = (b.x as usize, b.y as usize, b.w as usize, b.h as usize);
    Ok((rgb.crop(x, y, w, h)?, depth.crop(x, y, w, h)?, ir.crop(x, y, w, h)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DIMS: (usize, usize) = (480, 640);

    #[test]
    fn expand_identity() {
        let b = FaceBox::new(10, 10, 100, 100);
        assert_eq!(expand_bbox(b, 1.0, DIMS).unwrap(), b);
    }

    #[test]
    fn expand_preserves_centre() {
        let b = FaceBox::new(100, 100, 100, 100);
        let e = expand_bbox(b, 1.3, DIMS).unwrap();
        assert_eq!(e, FaceBox::new(85, 85, 130, 130));
        // independent re-derivation: x' = x - (factor - 1) * w / 2
        assert_eq!(e.x as f64, 100.0 - 0.3 * 100.0 / 2.0);
    }

    #[test]
    fn expand_clips_against_pixel_set() {
        let b = FaceBox::new(0, 0, 100, 100);
        let e = expand_bbox(b, 1.3, DIMS).unwrap();
        assert_eq!(e, FaceBox::new(0, 0, 115, 115));
        // pixel-set oracle: intersect the unclipped square [-15, 115) with the image
        let inside: Vec<i64> = (-15..115).filter(|&p| (0..640).contains(&p)).collect();
        assert_eq!(inside.len() as i64, e.w);
        assert_eq!(inside[0], e.x);
    }

    #[test]
    fn expand_rejects_bad_input() {
        let b = FaceBox::new(0, 0, 10, 10);
        assert!(expand_bbox(b, 0.0, DIMS).is_err());
        assert!(expand_bbox(b, -1.0, DIMS).is_err());
        assert!(expand_bbox(FaceBox::new(0, 0, 0, 10), 1.3, DIMS).is_err());
        assert!(expand_bbox(FaceBox::new(600, 0, 100, 10), 1.3, DIMS).is_err());
    }

    fn map_with_face(face_vals: &[(usize, usize, u32)], fill: u32) -> RawDepthMap {
        let mut m = RawDepthMap::filled(20, 20, fill);
        for &(x, y, v) in face_vals {
            m.set(x, y, v);
        }
        m
    }

    #[test]
    fn stats_constant_with_holes() {
        let mut m = RawDepthMap::filled(10, 10, 800);
        m.set(3, 3, 0);
        m.set(4, 5, 0);
        let s = face_depth_stats(&m, FaceBox::new(2, 2, 5, 5)).unwrap();
        assert_eq!((s.mean, s.minimum, s.maximum), (800.0, 800.0, 800.0));
    }

    #[test]
    fn stats_exclude_zeros() {
        let m = map_with_face(&[(0, 0, 700), (1, 0, 800), (0, 1, 900), (1, 1, 0)], 0);
        let s = face_depth_stats(&m, FaceBox::new(0, 0, 2, 2)).unwrap();
        assert_eq!((s.mean, s.minimum, s.maximum), (800.0, 700.0, 900.0));
    }

    #[test]
    fn stats_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<u32> = (0..256)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0
                } else {
                    rng.random_range(300..3000)
                }
            })
            .collect();
        let m = RawDepthMap::new(16, 16, values.clone()).unwrap();
        let s = face_depth_stats(&m, FaceBox::new(0, 0, 16, 16)).unwrap();
        let nz: Vec<f64> = values.iter().filter(|&&v| v != 0).map(|&v| v as f64).collect();
        let mean = nz.iter().sum::<f64>() / nz.len() as f64;
        let lo = nz.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = nz.iter().cloned().fold(0.0, f64::max);
        assert_eq!((s.mean, s.minimum, s.maximum), (mean, lo, hi));
    }

    #[test]
    fn stats_all_holes_is_error() {
        let m = RawDepthMap::filled(8, 8, 0);
        assert!(matches!(
            face_depth_stats(&m, FaceBox::new(1, 1, 4, 4)),
            Err(Error::EmptyFaceDepth)
        ));
        assert!(matches!(
            normalize_depth_alg2(&m, FaceBox::new(1, 1, 4, 4)),
            Err(Error::EmptyFaceDepth)
        ));
    }

    #[test]
    fn alg1_constant_face_maps_to_mid_gray() {
        let mut m = RawDepthMap::filled(40, 40, 800);
        m.set(12, 12, 0);
        m.set(10, 18, 0);
        let face = FaceBox::new(10, 10, 10, 10);
        let out = normalize_depth_alg1(&m, face).unwrap();
        let p = expand_bbox(face, 1.3, (40, 40)).unwrap();
        for y in p.y..p.y + p.h {
            for x in p.x..p.x + p.w {
                assert_eq!(out.get(x as usize, y as usize), 128);
            }
        }
    }

    #[test]
    fn alg1_linear_window() {
        // face box covers (0..3, 0..2); (1,1) is a hole inside it
        let mut m = RawDepthMap::filled(10, 10, 800);
        m.set(0, 0, 700);
        m.set(1, 0, 800);
        m.set(2, 0, 900);
        m.set(1, 1, 0);
        let face = FaceBox::new(0, 0, 3, 2);
        let out = normalize_depth_alg1(&m, face).unwrap();
        assert_eq!(out.get(0, 0), 0);
        assert_eq!(out.get(1, 0), 128);
        assert_eq!(out.get(2, 0), 255);
        // hole becomes the mean (800) and then 255 * 100 / 200 = 127.5 -> 128
        assert_eq!(out.get(1, 1), 128);
    }

    #[test]
    fn alg2_fixed_window() {
        let m = RawDepthMap::filled(10, 10, 800);
        let face = FaceBox::new(2, 2, 4, 4);
        let out = normalize_depth_alg2(&m, face).unwrap();
        assert_eq!(out.get(3, 3), 128);

        // scalar oracle for the decided linear map
        let oracle = |v: f64, mean: f64| {
            let lo = mean - 50.0;
            ((255.0 * (v.clamp(lo, mean + 50.0) - lo) / 100.0) + 0.5).floor() as u8
        };
        assert_eq!(window_map(760.0, 750.0, 850.0), 26);
        assert_eq!(oracle(760.0, 800.0), 26);
        assert_eq!(window_map(2000.0, 750.0, 850.0), 255);
    }

    #[test]
    fn alg2_pixel_values_in_context() {
        // a face of mean 800 with one pixel at 760 and a far background at 2000
        let mut m = RawDepthMap::filled(30, 30, 2000);
        let face = FaceBox::new(10, 10, 5, 5);
        let mut vals = vec![];
        for (x, y) in face.pixels() {
            m.set(x, y, 800);
            vals.push((x, y));
        }
        // keep the mean at exactly 800 with a symmetric pair
        m.set(10, 10, 760);
        m.set(11, 10, 840);
        let out = normalize_depth_alg2(&m, face).unwrap();
        assert_eq!(out.get(10, 10), 26);
        assert_eq!(out.get(0, 0), 255);
    }

    #[test]
    fn holes_outside_portrait_saturate_low() {
        let mut m = RawDepthMap::filled(40, 40, 800);
        m.set(0, 0, 0);
        let out = normalize_depth_alg2(&m, FaceBox::new(20, 20, 5, 5)).unwrap();
        assert_eq!(out.get(0, 0), 0);
    }

    #[test]
    fn ir_uniform_quantization() {
        let m = RawDepthMap::new(1, 3, vec![0, DEFAULT_MAX_RAW, DEFAULT_MAX_RAW / 2]).unwrap();
        let q = quantize_ir_uniform(&m).unwrap();
        assert_eq!(q.data(), &[0, 255, 127]);
        let bad = RawDepthMap::with_max_raw(1, 1, vec![300], 255).unwrap();
        assert!(quantize_ir_uniform(&bad).is_err());
    }

    #[test]
    fn crop_multimodal_shapes() {
        let rgb = Image8::new(640, 480, 3);
        let d = Image8::new(640, 480, 1);
        let ir = Image8::new(640, 480, 1);
        let (a, b, c) = crop_multimodal(&rgb, &d, &ir, FaceBox::new(100, 100, 100, 100), 1.3).unwrap();
        for img in [&a, &b, &c] {
            assert_eq!(img.dims(), (130, 130));
        }
        let small = Image8::new(320, 240, 1);
        assert!(matches!(
            crop_multimodal(&rgb, &small, &ir, FaceBox::new(0, 0, 10, 10), 1.3),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn crop_factor_one_is_face_region() {
        let rgb = Image8::from_fn(50, 40, 3, |x, y, c| (x + y + c) as u8);
        let d = Image8::from_fn(50, 40, 1, |x, y, _| (x * y) as u8);
        let ir = Image8::from_fn(50, 40, 1, |x, _, _| x as u8);
        let face = FaceBox::new(5, 6, 10, 12);
        let (a, b, c) = crop_multimodal(&rgb, &d, &ir, face, 1.0).unwrap();
        assert_eq!(a, rgb.crop(5, 6, 10, 12).unwrap());
        assert_eq!(b, d.crop(5, 6, 10, 12).unwrap());
        assert_eq!(c, ir.crop(5, 6, 10, 12).unwrap());
    }

    #[test]
    fn fasd_round_trip() {
        let m = RawDepthMap::new(2, 3, vec![0, 1, 2, 3, 70000, DEFAULT_MAX_RAW]).unwrap();
        let mut buf = vec![];
        m.write_fasd(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FASD");
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(RawDepthMap::read_fasd(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn parse_box() {
        assert_eq!("1, 2,3,4".parse::<FaceBox>().unwrap(), FaceBox::new(1, 2, 3, 4));
        assert!("1,2,3".parse::<FaceBox>().is_err());
    }
}
