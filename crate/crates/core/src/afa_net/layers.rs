//! Building blocks of the network: plain convolutions, batch norm, SE gating, the
//! depthwise-separable attention module (DAM), its SE variant and the feature augment modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::context::{BnUpdate, Ctx, Mode, BN_EPS};
use crate::nn::{ParamId, ParamKind, ParamStore, Real, Tensor, Var};

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Registers parameters with deterministic He-normal initialization.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn he_normal(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut self.rng))).collect();
        self.store
            .insert(name, ParamKind::Trainable, Tensor::from_vec(shape, data))
    }

    fn constant(&mut self, name: String, kind: ParamKind, shape: [usize; 4], v: f64) -> ParamId {
        self.store.insert(name, kind, Tensor::full(shape, T::from_f64_lossy(v)))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Conv {
        let weight = self.he_normal(
            format!("{name}.weight"),
            [out_c, in_c / groups, k, k],
            in_c / groups * k * k,
        );
        let bias = bias.then(|| self.constant(format!("{name}.bias"), ParamKind::Trainable, [out_c, 1, 1, 1], 0.0));
        Conv {
            weight,
            bias,
            in_c,
            out_c,
            stride,
            pad: k / 2,
            groups,
            transposed: false,
        }
    }

    /// Exact 2x transposed convolution (kernel 4, stride 2, padding 1).
    pub fn conv_transpose2x(&mut self, name: &str, in_c: usize, out_c: usize) -> Conv {
        let weight = self.he_normal(format!("{name}.weight"), [in_c, out_c, 4, 4], in_c * 4);
        let bias = Some(self.constant(format!("{name}.bias"), ParamKind::Trainable, [out_c, 1, 1, 1], 0.0));
        Conv {
            weight,
            bias,
            in_c,
            out_c,
            stride: 2,
            pad: 1,
            groups: 1,
            transposed: true,
        }
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.constant(format!("{name}.gamma"), ParamKind::Trainable, [c, 1, 1, 1], 1.0),
            beta: self.constant(format!("{name}.beta"), ParamKind::Trainable, [c, 1, 1, 1], 0.0),
            running_mean: self.constant(format!("{name}.running_mean"), ParamKind::Buffer, [c, 1, 1, 1], 0.0),
            running_var: self.constant(format!("{name}.running_var"), ParamKind::Buffer, [c, 1, 1, 1], 1.0),
        }
    }

    pub fn linear(&mut self, name: &str, in_f: usize, out_f: usize) -> Linear {
        Linear {
            weight: self.he_normal(format!("{name}.weight"), [out_f, in_f, 1, 1], in_f),
            bias: self.constant(format!("{name}.bias"), ParamKind::Trainable, [out_f, 1, 1, 1], 0.0),
        }
    }

    /// 3x3 convolution without bias followed by batch norm.
    pub fn conv_bn(&mut self, name: &str, in_c: usize, out_c: usize, stride: usize) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), in_c, out_c, 3, stride, 1, false),
            bn: self.batch_norm(&format!("{name}.bn"), out_c),
        }
    }

    pub fn input_block(&mut self, name: &str, in_c: usize, channels: &[usize], stride: usize) -> InputConvBlock {
        let mut layers = Vec::with_capacity(channels.len());
        let mut c = in_c;
        for (i, &out) in channels.iter().enumerate() {
            layers.push(self.conv_bn(&format!("{name}.{i}"), c, out, if i == 0 { stride } else { 1 }));
            c = out;
        }
        InputConvBlock { layers }
    }

    pub fn se(&mut self, name: &str, c: usize, reduction: usize) -> SeBlock {
        let hidden = (c / reduction).max(1);
        SeBlock {
            gate_name: format!("{name}.gate"),
            fc1: self.linear(&format!("{name}.fc1"), c, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, c),
        }
    }

    pub fn dam(&mut self, name: &str, in_c: usize, out_c: usize) -> Dam {
        let groups = gcd(in_c, out_c);
        Dam {
            name: name.to_string(),
            groups,
            stage1: self.conv_bn(&format!("{name}.stage1"), in_c, out_c, 1),
            stage2: self.conv_bn(&format!("{name}.stage2"), out_c, out_c, 1),
            spatial: self.conv(&format!("{name}.spatial"), in_c, groups, 3, 1, groups, true),
            channel: self.conv(&format!("{name}.channel"), out_c, out_c, 1, 1, 1, true),
            proj: (in_c != out_c).then(|| self.conv(&format!("{name}.proj"), in_c, out_c, 1, 1, 1, true)),
        }
    }

    pub fn dam_se(&mut self, name: &str, c: usize, reduction: usize) -> DamSe {
        DamSe {
            dam: self.dam(&format!("{name}.dam"), c, c),
            extra: self.conv_bn(&format!("{name}.extra"), c, c, 1),
            se: self.se(&format!("{name}.se"), c, reduction),
        }
    }

    pub fn upsample(&mut self, name: &str, mode: super::UpsampleMode, c: usize) -> Upsample {
        match mode {
            super::UpsampleMode::Nearest => Upsample::Nearest,
            super::UpsampleMode::Transposed => Upsample::Transposed(self.conv_transpose2x(name, c, c)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub transposed: bool,
}

impl Conv {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        if self.transposed {
            cx.tape.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            cx.tape.conv2d(x, w, b, self.stride, self.pad, self.groups)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        match cx.mode() {
            Mode::Train => {
                let (y, stats) = cx.tape.batch_norm(x, g, b, None, eps);
                let (batch_mean, batch_var) = stats.expect("training batch norm yields statistics");
                cx.push_bn_update(BnUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    batch_mean,
                    batch_var,
                });
                y
            }
            Mode::Eval => {
                let params = cx.params();
                let rm = params.get(self.running_mean).data();
                let rv = params.get(self.running_var).data();
                cx.tape.batch_norm(x, g, b, Some((rm, rv)), eps).0
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        self.bn.forward(cx, y)
    }

    pub fn forward_relu<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.forward(cx, x);
        cx.tape.relu(y)
    }
}

/// Stacked conv-BN-ReLU modules; only the first one is strided.
#[derive(Clone, Debug)]
pub struct InputConvBlock {
    pub layers: Vec<ConvBn>,
}

impl InputConvBlock {
    pub fn in_channels(&self) -> usize {
        self.layers[0].conv.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.out_c)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        self.layers.iter().fold(x, |h, l| l.forward_relu(cx, h))
    }
}

/// Squeeze-and-excitation: pooled channel statistics → bottleneck → sigmoid channel gates.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub gate_name: String,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeBlock {
    /// Per-channel gates `[n, c, 1, 1]` in `(0, 1)`.
    pub fn gates<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let pooled = cx.tape.global_avg_pool(x);
        let h = self.fc1.forward(cx, pooled);
        let h = cx.tape.relu(h);
        let h = self.fc2.forward(cx, h);
        let g = cx.tape.sigmoid(h);
        cx.gate(&self.gate_name, g)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = self.gates(cx, x);
        cx.tape.mul_channel(x, g)
    }
}

/// Residual block with a grouped-conv spatial gate on the first stage and a channel gate on
/// the second. The spatial branch has `gcd(in, out)` groups and emits one map per group.
#[derive(Clone, Debug)]
pub struct Dam {
    pub name: String,
    pub groups: usize,
    pub stage1: ConvBn,
    pub stage2: ConvBn,
    pub spatial: Conv,
    pub channel: Conv,
    pub proj: Option<Conv>,
}

impl Dam {
    pub fn spatial_gate_name(&self) -> String {
        format!("{}.spatial_gate", self.name)
    }

    pub fn channel_gate_name(&self) -> String {
        format!("{}.channel_gate", self.name)
    }

    fn skip<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        match &self.proj {
            Some(p) => p.forward(cx, x),
            None => x,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let h = self.stage1.forward(cx, x);
        let sa = self.spatial.forward(cx, x);
        let sa = cx.tape.sigmoid(sa);
        let sa = cx.gate(&self.spatial_gate_name(), sa);
        let h = cx.tape.mul_groups(h, sa);
        let h = cx.tape.relu(h);

        let h = self.stage2.forward(cx, h);
        let pooled = cx.tape.global_avg_pool(h);
        let ca = self.channel.forward(cx, pooled);
        let ca = cx.tape.sigmoid(ca);
        let ca = cx.gate(&self.channel_gate_name(), ca);
        let h = cx.tape.mul_channel(h, ca);

        let s = self.skip(cx, x);
        let y = cx.tape.add(h, s);
        cx.tape.relu(y)
    }

    /// The same block with both attention branches removed (a plain residual block).
    pub fn forward_residual<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let h = self.stage1.forward_relu(cx, x);
        let h = self.stage2.forward(cx, h);
        let s = self.skip(cx, x);
        let y = cx.tape.add(h, s);
        cx.tape.relu(y)
    }
}

/// DAM followed by conv-BN and SE, wrapped in an outer skip connection.
#[derive(Clone, Debug)]
pub struct DamSe {
    pub dam: Dam,
    pub extra: ConvBn,
    pub se: SeBlock,
}

impl DamSe {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        self.forward_with(cx, x, true)
    }

    /// `outer_skip = false` drops the outer skip connection (ablation).
    pub fn forward_with<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, outer_skip: bool) -> Var {
        let h = self.dam.forward(cx, x);
        let h = self.extra.forward(cx, h);
        let h = self.se.forward(cx, h);
        let h = if outer_skip { cx.tape.add(h, x) } else { h };
        cx.tape.relu(h)
    }
}

#[derive(Clone, Debug)]
pub enum Upsample {
    Nearest,
    Transposed(Conv),
}

impl Upsample {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        match self {
            Upsample::Nearest => cx.tape.upsample_nearest2x(x),
            Upsample::Transposed(c) => c.forward(cx, x),
        }
    }
}

/// Output of a feature augment module.
#[derive(Clone, Copy, Debug)]
pub struct AugmentOutput {
    /// Re-encoded reconstruction at the input resolution.
    pub features: Var,
    /// 2x reconstruction in image space.
    pub sr_image: Var,
}

/// Shared tail of both augment modules: upsample → DAM → conv to image → strided input block.
#[derive(Clone, Debug)]
pub struct ReconstructionTail {
    pub up: Upsample,
    pub dam: Dam,
    pub to_image: Conv,
    pub augment: InputConvBlock,
}

impl ReconstructionTail {
    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, f: Var) -> AugmentOutput {
        let f = self.up.forward(cx, f);
        let f = self.dam.forward(cx, f);
        let sr_image = self.to_image.forward(cx, f);
        let features = self.augment.forward(cx, sr_image);
        AugmentOutput { features, sr_image }
    }
}

/// Single-modality feature augment module.
#[derive(Clone, Debug)]
pub struct Sfam {
    pub stem: ConvBn,
    pub dam1: Dam,
    pub se: SeBlock,
    pub tail: ReconstructionTail,
}

impl Sfam {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> AugmentOutput {
        let f = self.stem.forward_relu(cx, x);
        let f = self.dam1.forward(cx, f);
        let f = self.se.forward(cx, f);
        self.tail.forward(cx, f)
    }
}

/// Per-modality shallow extractor inside [`Mfam`].
#[derive(Clone, Debug)]
pub struct Shallow {
    pub stem: ConvBn,
    pub dam1: Dam,
}

/// Multi-modality feature augment module: reconstructs `target` from all three modalities.
#[derive(Clone, Debug)]
pub struct Mfam {
    pub target: usize,
    pub shallow: Vec<Shallow>,
    pub se: SeBlock,
    /// 1x1 projection of the re-weighted concatenation back to the per-modality width.
    pub fuse: Conv,
    pub tail: ReconstructionTail,
}

impl Mfam {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, inputs: &[Var]) -> AugmentOutput {
        assert_eq!(inputs.len(), self.shallow.len(), "one input per modality");
        let feats: Vec<Var> = self
            .shallow
            .iter()
            .zip(inputs)
            .map(|(s, &x)| {
                let f = s.stem.forward_relu(cx, x);
                s.dam1.forward(cx, f)
            })
            .collect();
        let f = cx.tape.concat(&feats);
        let f = self.se.forward(cx, f);
        let f = self.fuse.forward(cx, f);
        self.tail.forward(cx, f)
    }
}

impl<'a, T: Real> Builder<'a, T> {
    #[allow(clippy::too_many_arguments)]
    fn tail(
        &mut self,
        name: &str,
        image_c: usize,
        width: usize,
        mode: super::UpsampleMode,
        block_channels: &[usize],
    ) -> ReconstructionTail {
        ReconstructionTail {
            up: self.upsample(&format!("{name}.up"), mode, width),
            dam: self.dam(&format!("{name}.dam2"), width, width),
            to_image: self.conv(&format!("{name}.to_image"), width, image_c, 3, 1, 1, true),
            augment: self.input_block(&format!("{name}.augment"), image_c, block_channels, 2),
        }
    }

    pub fn sfam(
        &mut self,
        name: &str,
        image_c: usize,
        width: usize,
        mode: super::UpsampleMode,
        block_channels: &[usize],
        reduction: usize,
    ) -> Sfam {
        Sfam {
            stem: self.conv_bn(&format!("{name}.stem"), image_c, width, 1),
            dam1: self.dam(&format!("{name}.dam1"), width, width),
            se: self.se(&format!("{name}.se"), width, reduction),
            tail: self.tail(name, image_c, width, mode, block_channels),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn mfam(
        &mut self,
        name: &str,
        target: usize,
        modality_channels: &[usize],
        width: usize,
        mode: super::UpsampleMode,
        block_channels: &[usize],
        reduction: usize,
    ) -> Mfam {
        let shallow = modality_channels
            .iter()
            .zip(super::MODALITY_NAMES)
            .map(|(&c, m)| Shallow {
                stem: self.conv_bn(&format!("{name}.shallow.{m}.stem"), c, width, 1),
                dam1: self.dam(&format!("{name}.shallow.{m}.dam1"), width, width),
            })
            .collect();
        let cat = width * modality_channels.len();
        Mfam {
            target,
            shallow,
            se: self.se(&format!("{name}.se"), cat, reduction),
            fuse: self.conv(&format!("{name}.fuse"), cat, width, 1, 1, 1, true),
            tail: self.tail(name, modality_channels[target], width, mode, block_channels),
        }
    }
}
