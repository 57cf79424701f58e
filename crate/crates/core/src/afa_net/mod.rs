//! The multi-modal anti-spoofing network: three modality branches with super-resolution feature
//! augmentation, SE-weighted fusion, a shared attention trunk and a two-layer classifier head.

mod checkpoint;
mod context;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use context::{apply_bn_updates, BnUpdate, Ctx, GateOverrides, Mode, BN_EPS, BN_MOMENTUM};

use crate::nn::{ParamStore, Real, Tensor, Var};
use crate::{Error, Result};
use layers::{Builder, Conv, Dam, DamSe, InputConvBlock, Linear, Mfam, SeBlock};

/// Input modalities in their fixed network order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Ir,
}

pub const MODALITY_NAMES: [&str; 3] = ["rgb", "depth", "ir"];

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Ir];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth | Modality::Ir => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        MODALITY_NAMES[self.index()]
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "ir" => Ok(Modality::Ir),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Transposed,
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "transposed" => Ok(UpsampleMode::Transposed),
            other => Err(Error::Config(format!("unknown upsample mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_resolution: usize,
    pub sr_resolution: usize,
    /// Output widths of the three stacked modules of every input conv block. The first entry is
    /// also the working width of the augment modules, the last the width of branch features.
    pub branch_channels: Vec<usize>,
    pub upsample_mode: UpsampleMode,
    pub num_classes: usize,
    pub fc_hidden: usize,
    pub se_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_resolution: 8,
            sr_resolution: 16,
            branch_channels: vec![32, 64, 128],
            upsample_mode: UpsampleMode::Nearest,
            num_classes: 2,
            fc_hidden: 256,
            se_reduction: 4,
        }
    }
}

impl ModelConfig {
    /// A config with every channel width (and the hidden layer) set to `c`.
    pub fn uniform(c: usize) -> Self {
        Self {
            branch_channels: vec![c; 3],
            fc_hidden: c,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_resolution < 2 || !self.in_resolution.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "in_resolution must be even and at least 2, got {}",
                self.in_resolution
            )));
        }
        if self.sr_resolution != 2 * self.in_resolution {
            return Err(Error::Config(format!(
                "sr_resolution must be twice in_resolution ({}), got {}",
                2 * self.in_resolution,
                self.sr_resolution
            )));
        }
        if self.branch_channels.is_empty() || self.branch_channels.contains(&0) {
            return Err(Error::Config(format!(
                "branch_channels must be non-empty and positive, got {:?}",
                self.branch_channels
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.fc_hidden == 0 || self.se_reduction == 0 {
            return Err(Error::Config("fc_hidden and se_reduction must be at least 1".into()));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.branch_channels[0]
    }

    fn feature_channels(&self) -> usize {
        *self.branch_channels.last().expect("validated")
    }
}

/// One modality branch: input conv block and MFAM in parallel, fused and refined.
#[derive(Clone, Debug)]
pub struct Branch {
    pub input: InputConvBlock,
    pub mfam: Mfam,
    pub fuse: Conv,
    pub dam_se: DamSe,
    pub se: SeBlock,
}

/// Layer graph; holds parameter ids only, so it is shared between precisions.
#[derive(Clone, Debug)]
pub struct Network {
    pub branches: Vec<Branch>,
    pub trunk_fuse: Conv,
    pub trunk_dam1: Dam,
    pub trunk_dam2: Dam,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Reconstructions at `sr_resolution`, in [`Modality::ALL`] order.
    pub sr: [Var; 3],
}

/// Concrete outputs of an evaluation pass.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub sr: [Tensor<T>; 3],
}

#[derive(Clone, Debug)]
pub struct AfaModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub net: Network,
}

impl<T: Real> AfaModel<T> {
    /// Builds the network with He-normal weights drawn from a generator seeded by `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = {
            let mut b = Builder::new(&mut params, seed);
            build(&mut b, &config)
        };
        Ok(Self { config, params, net })
    }

    pub fn cast<U: Real>(&self) -> AfaModel<U> {
        AfaModel {
            config: self.config.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.trainable_ids().map(|id| self.params.get(id).len()).sum()
    }

    /// Checks input tensors against the configured channels and resolution.
    pub fn check_inputs(&self, inputs: [&Tensor<T>; 3]) -> Result<usize> {
        let n = inputs[0].shape()[0];
        let r = self.config.in_resolution;
        for (m, t) in Modality::ALL.iter().zip(inputs) {
            let want = [n, m.channels(), r, r];
            if t.shape() != want || n == 0 {
                return Err(Error::shape(format!(
                    "{m} input has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(n)
    }

    pub fn forward(&self, cx: &mut Ctx<'_, T>, inputs: [Var; 3]) -> ForwardVars {
        let net = &self.net;
        let mut feats = Vec::with_capacity(3);
        let mut sr = [inputs[0]; 3];
        for (i, br) in net.branches.iter().enumerate() {
            let main = br.input.forward(cx, inputs[i]);
            let aug = br.mfam.forward(cx, &inputs);
            sr[i] = aug.sr_image;
            let f = cx.tape.concat(&[main, aug.features]);
            let f = br.fuse.forward(cx, f);
            let f = br.dam_se.forward(cx, f);
            feats.push(br.se.forward(cx, f));
        }
        let f = cx.tape.concat(&feats);
        let f = net.trunk_fuse.forward(cx, f);
        let f = net.trunk_dam1.forward(cx, f);
        let f = net.trunk_dam2.forward(cx, f);
        let f = cx.tape.global_avg_pool(f);
        let h = net.fc1.forward(cx, f);
        let h = cx.tape.relu(h);
        let logits = net.fc2.forward(cx, h);
        ForwardVars { logits, sr }
    }

    /// Eval-mode forward over a batch.
    pub fn predict(&self, inputs: [&Tensor<T>; 3]) -> Result<Prediction<T>> {
        self.predict_with(inputs, None)
    }

    pub fn predict_with(&self, inputs: [&Tensor<T>; 3], overrides: Option<&GateOverrides>) -> Result<Prediction<T>> {
        self.check_inputs(inputs)?;
        let mut cx = Ctx::new(&self.params, Mode::Eval);
        if let Some(o) = overrides {
            cx = cx.with_overrides(o);
        }
        let vars = inputs.map(|t| cx.input(t.clone()));
        let out = self.forward(&mut cx, vars);
        Ok(Prediction {
            logits: cx.tape.value(out.logits).clone(),
            sr: out.sr.map(|v| cx.tape.value(v).clone()),
        })
    }
}

fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Network {
    let width = cfg.width();
    let c = cfg.feature_channels();
    let red = cfg.se_reduction;
    let chans: Vec<usize> = Modality::ALL.iter().map(|m| m.channels()).collect();
    let branches = Modality::ALL
        .iter()
        .map(|&m| {
            let p = m.as_str();
            Branch {
                input: b.input_block(&format!("{p}.input"), m.channels(), &cfg.branch_channels, 1),
                mfam: b.mfam(
                    &format!("{p}.mfam"),
                    m.index(),
                    &chans,
                    width,
                    cfg.upsample_mode,
                    &cfg.branch_channels,
                    red,
                ),
                fuse: b.conv(&format!("{p}.fuse"), 2 * c, c, 1, 1, 1, true),
                dam_se: b.dam_se(&format!("{p}.dam_se"), c, red),
                se: b.se(&format!("{p}.se"), c, red),
            }
        })
        .collect();
    Network {
        branches,
        trunk_fuse: b.conv("trunk.fuse", 3 * c, c, 1, 1, 1, true),
        trunk_dam1: b.dam("trunk.dam1", c, c),
        trunk_dam2: b.dam("trunk.dam2", c, c),
        fc1: b.linear("head.fc1", c, cfg.fc_hidden),
        fc2: b.linear("head.fc2", cfg.fc_hidden, cfg.num_classes),
    }
}

/// Converts 8-bit images of one modality into a `[n, c, h, w]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor<T: Real>(images: &[&crate::image::Image8]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot build a tensor from zero images"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    let scale = T::from_f64_lossy(1.0 / 255.0);
    for img in images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::shape(format!(
                "image {}x{}x{} does not match batch shape {c}x{h}x{w}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(T::from_f64_lossy(img.get(x, y, ch) as f64) * scale);
                }
            }
        }
    }
    Ok(Tensor::from_vec([images.len(), c, h, w], data))
}

/// Converts sample `n` of a `[n, c, h, w]` tensor in `[0, 1]` back to an 8-bit image.
pub fn tensor_to_image<T: Real>(t: &Tensor<T>, n: usize) -> crate::image::Image8 {
    let [_, c, h, w] = t.shape();
    let s = t.sample(n);
    crate::image::Image8::from_fn(w, h, c, |x, y, ch| {
        crate::image::quantize_u8(s[(ch * h + y) * w + x].to_f64_lossy() * 255.0)
    })
}

#[cfg(test)]
mod tests;
