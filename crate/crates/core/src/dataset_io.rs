//! Manifest-based dataset loading, batching and a seeded synthetic multi-modal generator.
//!
//! A manifest is a tab-separated text file with a header line and the columns
//! `sample_id rgb depth ir rgb_gt depth_gt ir_gt label attack_type camera_tag`.
//! Image paths are relative to the directory holding the manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::afa_net::Modality;
use crate::image::{quantize_u8, Image8};
use crate::objective_metrics::Label;
use crate::quality_degrade::{degrade, DegradeSpec};
use crate::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 10] = [
    "sample_id",
    "rgb",
    "depth",
    "ir",
    "rgb_gt",
    "depth_gt",
    "ir_gt",
    "label",
    "attack_type",
    "camera_tag",
];

/// File stems of the six images stored per sample, in manifest column order.
const IMAGE_STEMS: [&str; 6] = ["rgb", "depth", "ir", "rgb_gt", "depth_gt", "ir_gt"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackType {
    None,
    PrintBw,
    PrintColor,
    Screen,
    Mask3d,
}

impl AttackType {
    pub const SPOOFS: [AttackType; 4] = [
        AttackType::PrintBw,
        AttackType::PrintColor,
        AttackType::Screen,
        AttackType::Mask3d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackType::None => "none",
            AttackType::PrintBw => "print_bw",
            AttackType::PrintColor => "print_color",
            AttackType::Screen => "screen",
            AttackType::Mask3d => "mask3d",
        }
    }

    /// Flat artifacts: prints and screens.
    pub fn is_planar(self) -> bool {
        matches!(self, AttackType::PrintBw | AttackType::PrintColor | AttackType::Screen)
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AttackType::None]
            .into_iter()
            .chain(AttackType::SPOOFS)
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attack type `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Low-resolution crops, in [`Modality::ALL`] order.
    pub inputs: [PathBuf; 3],
    /// Double-resolution ground-truth crops, in [`Modality::ALL`] order.
    pub ground_truth: [PathBuf; 3],
    pub label: Label,
    pub attack_type: AttackType,
    pub camera_tag: String,
}

impl ManifestEntry {
    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        self.inputs.iter().chain(&self.ground_truth)
    }

    /// Loads and validates the six images, resolving paths against `root`.
    pub fn load(&self, root: &Path) -> Result<MultiModalSample> {
        let err = |msg: String| Error::Manifest {
            entry: self.sample_id.clone(),
            msg,
        };
        let mut images = Vec::with_capacity(6);
        for (col, rel) in IMAGE_STEMS.iter().zip(self.paths()) {
            let path = root.join(rel);
            if !path.is_file() {
                return Err(err(format!("{col}: file {} does not exist", path.display())));
            }
            let img = Image8::load_png(&path).map_err(|e| err(format!("{col}: {e}")))?;
            images.push(img);
        }
        let mut it = images.into_iter();
        let mut next = || it.next().expect("six images");
        let sample = MultiModalSample {
            sample_id: self.sample_id.clone(),
            inputs: [next(), next(), next()],
            ground_truth: [next(), next(), next()],
            label: self.label,
            attack_type: self.attack_type,
            camera_tag: self.camera_tag.clone(),
            erased: None,
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Aligned low-resolution crops with their double-resolution ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: String,
    pub inputs: [Image8; 3],
    pub ground_truth: [Image8; 3],
    pub label: Label,
    pub attack_type: AttackType,
    pub camera_tag: String,
    /// Modality zeroed by modal erasing; its reconstruction is not supervised.
    pub erased: Option<Modality>,
}

impl MultiModalSample {
    pub fn resolution(&self) -> usize {
        self.inputs[0].width()
    }

    pub fn input(&self, m: Modality) -> &Image8 {
        &self.inputs[m.index()]
    }

    pub fn gt(&self, m: Modality) -> &Image8 {
        &self.ground_truth[m.index()]
    }

    /// Checks square crops of a common size `r`, ground truth at `2r`, and channel counts.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::Manifest {
            entry: self.sample_id.clone(),
            msg,
        };
        let r = self.resolution();
        for m in Modality::ALL {
            let (lo, hi) = (self.input(m), self.gt(m));
            if lo.width() != lo.height() || lo.width() != r {
                return Err(err(format!(
                    "{m}: low-res crop is {}x{}, expected {r}x{r}",
                    lo.width(),
                    lo.height()
                )));
            }
            if hi.width() != 2 * r || hi.height() != 2 * r {
                return Err(err(format!(
                    "{m}_gt: ground truth is {}x{}, expected {}x{}",
                    hi.width(),
                    hi.height(),
                    2 * r,
                    2 * r
                )));
            }
            if lo.channels() != m.channels() || hi.channels() != m.channels() {
                return Err(err(format!(
                    "{m}: expected {} channel(s), got {} / {}",
                    m.channels(),
                    lo.channels(),
                    hi.channels()
                )));
            }
        }
        if self.label == Label::Live && self.attack_type != AttackType::None {
            return Err(err(format!("live sample with attack type {}", self.attack_type)));
        }
        Ok(())
    }
}

/// Parsed manifest plus the directory its relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load_samples(&self) -> Result<Vec<MultiModalSample>> {
        self.entries.iter().map(|e| e.load(&self.root)).collect()
    }

    pub fn find(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut out = MANIFEST_COLUMNS.join("\t");
    out.push('\n');
    for e in entries {
        let mut fields = vec![e.sample_id.clone()];
        fields.extend(e.paths().map(|p| p.to_string_lossy().replace('\\', "/")));
        fields.push(e.label.as_str().to_string());
        fields.push(e.attack_type.as_str().to_string());
        fields.push(e.camera_tag.clone());
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, manifest_to_string(entries)).map_err(|e| Error::io(path, e))
}

/// Parses manifest text without touching the referenced files.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split('\t').collect();
    if cols != MANIFEST_COLUMNS {
        return Err(Error::Manifest {
            entry: "header".into(),
            msg: format!("expected columns {:?}, got {cols:?}", MANIFEST_COLUMNS),
        });
    }
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let entry = f.first().copied().unwrap_or("").to_string();
            let err = |msg: String| Error::Manifest {
                entry: format!("{entry} (line {})", i + 1),
                msg,
            };
            if f.len() != MANIFEST_COLUMNS.len() {
                return Err(err(format!(
                    "expected {} fields, got {}",
                    MANIFEST_COLUMNS.len(),
                    f.len()
                )));
            }
            if entry.is_empty() {
                return Err(err("sample_id: empty".into()));
            }
            for (col, v) in MANIFEST_COLUMNS[1..7].iter().zip(&f[1..7]) {
                if v.is_empty() {
                    return Err(err(format!("{col}: empty path")));
                }
            }
            let label = match f[7] {
                "live" | "1" => Label::Live,
                "spoof" | "0" => Label::Spoof,
                other => return Err(err(format!("label: unknown value `{other}`"))),
            };
            let attack_type = f[8]
                .parse::<AttackType>()
                .map_err(|_| err(format!("attack_type: unknown value `{}`", f[8])))?;
            let p = |k: usize| PathBuf::from(f[k]);
            Ok(ManifestEntry {
                sample_id: entry.clone(),
                inputs: [p(1), p(2), p(3)],
                ground_truth: [p(4), p(5), p(6)],
                label,
                attack_type,
                camera_tag: f[9].to_string(),
            })
        })
        .collect()
}

/// Reads a manifest and eagerly validates every entry (files exist, dims, channels, labels).
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_manifest(&text)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(e.sample_id.as_str()) {
            return Err(Error::Manifest {
                entry: e.sample_id.clone(),
                msg: "sample_id: duplicate".into(),
            });
        }
        e.load(&root)?;
    }
    Ok(Manifest { root, entries })
}

/// Builds manifest entries from a `ROOT/<label>/<attack_type>/<sample_id>/` tree where each
/// sample directory holds `rgb.png depth.png ir.png rgb_gt.png depth_gt.png ir_gt.png`.
/// Paths are made relative to `root`; entries are sorted by path.
pub fn make_manifest(root: &Path, camera_tag: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for label in [Label::Live, Label::Spoof] {
        let label_dir = root.join(label.as_str());
        if !label_dir.is_dir() {
            continue;
        }
        for attack_dir in sorted_dirs(&label_dir)? {
            let name = attack_dir.file_name().unwrap_or_default().to_string_lossy().to_string();
            let attack_type: AttackType = name.parse().map_err(|_| Error::Manifest {
                entry: attack_dir.display().to_string(),
                msg: format!("attack_type: unknown directory `{name}`"),
            })?;
            for sample_dir in sorted_dirs(&attack_dir)? {
                let id = sample_dir.file_name().unwrap_or_default().to_string_lossy().to_string();
                let rel = |stem: &str| {
                    PathBuf::from(label.as_str())
                        .join(&name)
                        .join(&id)
                        .join(format!("{stem}.png"))
                };
                entries.push(ManifestEntry {
                    sample_id: id.clone(),
                    inputs: [rel("rgb"), rel("depth"), rel("ir")],
                    ground_truth: [rel("rgb_gt"), rel("depth_gt"), rel("ir_gt")],
                    label,
                    attack_type,
                    camera_tag: camera_tag.to_string(),
                });
            }
        }
    }
    Ok(entries)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Index batches for one epoch. With `shuffle` the order is a permutation drawn from a
/// generator keyed by `(seed, epoch)`; the final batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Borrowing batches of `items` for one epoch, see [`batch_indices`].
pub fn batches<'a, T>(
    items: &'a [T],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> impl Iterator<Item = Vec<&'a T>> + 'a {
    batch_indices(items.len(), batch_size, seed, epoch, shuffle)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &items[i]).collect())
}

/// Parameters of the synthetic face-like data generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_live: usize,
    pub n_spoof: usize,
    /// Low-resolution crop size; ground truth is rendered at twice this.
    pub resolution: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise_level: f64,
    /// Range of the live face depth relief above its base level.
    pub live_relief: (f64, f64),
    /// Range of the live IR reflectance peak.
    pub live_ir: (f64, f64),
    /// Range of the flat IR level of printed spoofs.
    pub print_ir: (f64, f64),
    /// Range of the IR level of screen replays.
    pub screen_ir: (f64, f64),
    pub camera_tag: String,
}

impl SyntheticSpec {
    pub fn new(n_live: usize, n_spoof: usize, resolution: usize, seed: u64) -> Self {
        Self {
            n_live,
            n_spoof,
            resolution,
            seed,
            noise_level: 4.0,
            live_relief: (70.0, 110.0),
            live_ir: (150.0, 210.0),
            print_ir: (90.0, 150.0),
            screen_ir: (10.0, 40.0),
            camera_tag: "synthetic".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_live == 0 || self.n_spoof == 0 {
            return Err(Error::invalid(
                "synthetic set needs at least one live and one spoof sample",
            ));
        }
        if self.resolution < 4 {
            return Err(Error::invalid(format!("resolution {} is below 4", self.resolution)));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::invalid("noise level must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-sample face geometry shared by all modalities.
struct FaceShape {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl FaceShape {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            cx: rng.random_range(-0.1..0.1),
            cy: rng.random_range(-0.1..0.1),
            ax: rng.random_range(0.55..0.7),
            ay: rng.random_range(0.7..0.85),
        }
    }

    /// Squared normalized elliptic radius at pixel `(x, y)` of an `n`x`n` grid.
    fn d2(&self, x: usize, y: usize, n: usize) -> f64 {
        let u = (x as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        let v = (y as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        ((u - self.cx) / self.ax).powi(2) + ((v - self.cy) / self.ay).powi(2)
    }
}

fn coords(x: usize, y: usize, n: usize) -> (f64, f64) {
    (
        (x as f64 + 0.5) / n as f64 * 2.0 - 1.0,
        (y as f64 + 0.5) / n as f64 * 2.0 - 1.0,
    )
}

/// Renders the double-resolution ground truth of one sample.
fn render_ground_truth(spec: &SyntheticSpec, label: Label, attack: AttackType, rng: &mut ChaCha8Rng) -> [Image8; 3] {
    let n = 2 * spec.resolution;
    let face = FaceShape::random(rng);
    let skin = [
        rng.random_range(150.0..230.0),
        rng.random_range(110.0..180.0),
        rng.random_range(90.0..150.0),
    ];
    let bg = [
        rng.random_range(20.0..120.0),
        rng.random_range(20.0..120.0),
        rng.random_range(20.0..120.0),
    ];
    let bg_depth = rng.random_range(20.0..40.0);
    let base = rng.random_range(90.0..110.0);
    let relief = rng.random_range(spec.live_relief.0..spec.live_relief.1);
    let live_ir = rng.random_range(spec.live_ir.0..spec.live_ir.1);
    let plane = rng.random_range(100.0..160.0);
    let tilt = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
    let flat_ir = match attack {
        AttackType::Screen => rng.random_range(spec.screen_ir.0..spec.screen_ir.1),
        _ => rng.random_range(spec.print_ir.0..spec.print_ir.1),
    };
    let ir_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let ir_freq = rng.random_range(2.0..5.0);
    let noise = Normal::new(0.0, spec.noise_level.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut planes = [vec![0.0; n * n * 3], vec![0.0; n * n], vec![0.0; n * n]];
    for y in 0..n {
        for x in 0..n {
            let d2 = face.d2(x, y, n);
            let inside = d2 < 1.0;
            let bump = (1.0 - d2).max(0.0).sqrt();
            let (u, v) = coords(x, y, n);
            let shade = 0.6 + 0.4 * bump;
            let mut rgb = if inside { skin.map(|s| s * shade) } else { bg };
            let (depth, ir) = match (label, attack) {
                (Label::Live, _) | (_, AttackType::None) => (
                    if inside { base + relief * bump } else { bg_depth },
                    if inside { 60.0 + (live_ir - 60.0) * bump } else { 30.0 },
                ),
                (_, AttackType::Mask3d) => {
                    let rim = (-((d2.sqrt() - 0.9) / 0.12).powi(2)).exp();
                    (
                        if d2 < 1.2 { base + 0.6 * relief * rim } else { bg_depth },
                        if inside { flat_ir } else { 30.0 },
                    )
                }
                (_, planar) => {
                    if planar == AttackType::PrintBw {
                        let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                        rgb = [luma; 3];
                    }
                    if planar == AttackType::Screen {
                        let moire = 20.0 * (8.0 * std::f64::consts::PI * u).sin();
                        rgb = [rgb[0] * 0.85 + moire, rgb[1] * 0.9 + moire, rgb[2] + 25.0 + moire];
                    }
                    (
                        plane + tilt.0 * u + tilt.1 * v,
                        flat_ir + 15.0 * (ir_freq * u + ir_phase).sin(),
                    )
                }
            };
            let i = y * n + x;
            for c in 0..3 {
                planes[0][c * n * n + i] = rgb[c] + noise.sample(rng);
            }
            planes[1][i] = depth + noise.sample(rng);
            planes[2][i] = ir + noise.sample(rng);
        }
    }
    let to_image = |p: &[f64], c: usize| Image8::from_fn(n, n, c, |x, y, ch| quantize_u8(p[ch * n * n + y * n + x]));
    [
        to_image(&planes[0], 3),
        to_image(&planes[1], 1),
        to_image(&planes[2], 1),
    ]
}

/// Generates the samples in memory. Live samples come first, then spoofs cycling through the
/// four attack types. Each sample draws from its own generator stream, so the output only
/// depends on the `SyntheticSpec`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<MultiModalSample>> {
    spec.validate()?;
    let degrade_spec = DegradeSpec::new(spec.resolution, true);
    let mut out = Vec::with_capacity(spec.n_live + spec.n_spoof);
    for i in 0..spec.n_live + spec.n_spoof {
        let (label, attack, id) = if i < spec.n_live {
            (Label::Live, AttackType::None, format!("live_{i:05}"))
        } else {
            let k = i - spec.n_live;
            (Label::Spoof, AttackType::SPOOFS[k % 4], format!("spoof_{k:05}"))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let gt = render_ground_truth(spec, label, attack, &mut rng);
        let inputs = [
            degrade(&gt[0], &degrade_spec)?,
            degrade(&gt[1], &degrade_spec)?,
            degrade(&gt[2], &degrade_spec)?,
        ];
        out.push(MultiModalSample {
            sample_id: id,
            inputs,
            ground_truth: gt,
            label,
            attack_type: attack,
            camera_tag: spec.camera_tag.clone(),
            erased: None,
        });
    }
    Ok(out)
}

/// Writes a synthetic set under `out_dir` in the layout read by [`make_manifest`], plus
/// `out_dir/manifest.tsv`. Returns the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    let samples = synthesize(spec)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel_dir = PathBuf::from(s.label.as_str())
            .join(s.attack_type.as_str())
            .join(&s.sample_id);
        let dir = out_dir.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel: Vec<PathBuf> = IMAGE_STEMS
            .iter()
            .map(|stem| rel_dir.join(format!("{stem}.png")))
            .collect();
        for (img, r) in s.inputs.iter().chain(&s.ground_truth).zip(&rel) {
            img.save_png(out_dir.join(r))?;
        }
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            inputs: [rel[0].clone(), rel[1].clone(), rel[2].clone()],
            ground_truth: [rel[3].clone(), rel[4].clone(), rel[5].clone()],
            label: s.label,
            attack_type: s.attack_type,
            camera_tag: s.camera_tag.clone(),
        });
    }
    let path = out_dir.join("manifest.tsv");
    write_manifest(&path, &entries)?;
    Ok(path)
}

/// Variance of depth values inside the central face region of the ground-truth depth crop.
pub fn face_depth_variance(sample: &MultiModalSample) -> f64 {
    let d = sample.gt(Modality::Depth);
    let n = d.width();
    let (lo, hi) = (n / 4, n - n / 4);
    let vals: Vec<f64> = (lo..hi)
        .flat_map(|y| (lo..hi).map(move |x| (x, y)))
        .map(|(x, y)| d.get(x, y, 0) as f64)
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}
