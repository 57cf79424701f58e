use super::kernels::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, gemm, ConvSpec,
};
use super::{ParamId, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulChannel {
        x: Var,
        g: Var,
    },
    MulGroups {
        x: Var,
        g: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    Upsample2x(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MaskedMse {
        pred: Var,
        target: Tensor<T>,
        weight: Vec<T>,
        denom: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// `(param id, gradient)` for every parameter leaf that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(move |&(p, node)| self.grads[node].as_ref().map(|g| (p, g)))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient and reports it under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Weight `[out, in/groups, k, k]`; bias `[out, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let [o, cg, k, _] = self.shape(w);
        let in_c = self.shape(x)[1];
        assert_eq!(in_c, cg * groups, "conv input channels {in_c} != {cg}x{groups}");
        let spec = ConvSpec {
            in_c,
            out_c: o,
            k,
            stride,
            pad,
            groups,
        };
        let (out, shape) = conv2d_forward(
            self.value(x).data(),
            self.shape(x),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            spec,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_vec(shape, out), Op::Conv { x, w, b, spec }, &inputs)
    }

    /// Weight `[in, out, k, k]`; bias `[out, 1, 1, 1]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [ci, o, k, _] = self.shape(w);
        assert_eq!(self.shape(x)[1], ci, "transposed conv input channel mismatch");
        let spec = ConvSpec {
            in_c: ci,
            out_c: o,
            k,
            stride,
            pad,
            groups: 1,
        };
        let (out, shape) = conv_transpose2d_forward(
            self.value(x).data(),
            self.shape(x),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            spec,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::from_vec(shape, out),
            Op::ConvTranspose { x, w, b, spec },
            &inputs,
        )
    }

    /// Per-channel normalization. With `running = None` batch statistics are used and returned
    /// as `(mean, unbiased variance)`; otherwise the given running statistics are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let [n, c, h, w] = self.shape(x);
        let p = h * w;
        let m = n * p;
        let xv = self.value(x).data();
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mt = T::from_usize(m).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + xv[(b * c + ch) * p..][..p].iter().copied().sum::<T>();
                    }
                    let mu = s / mt;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * p..][..p] {
                            ss = ss + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / mt;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let batch_stats = running.is_none();
        let stats = batch_stats.then(|| {
            let corr = if m > 1 {
                T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
            } else {
                T::one()
            };
            (mean, var.iter().map(|&v| v * corr).collect())
        });
        let shape = self.shape(x);
        let v = self.push(
            Tensor::from_vec(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `x[n, c, :, :] * g[n, c]` with `g` of shape `[n, c, 1, 1]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert_eq!(self.shape(g), [n, c, 1, 1], "channel gate shape");
        let p = h * w;
        let gv = self.value(g).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * gv[i]);
        }
        self.push(out, Op::MulChannel { x, g }, &[x, g])
    }

    /// `x[n, c, y, x] * g[n, c / (C/G), y, x]`: each gate plane covers a contiguous channel group.
    pub fn mul_groups(&mut self, x: Var, g: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let [gn, groups, gh, gw] = self.shape(g);
        assert!(gn == n && gh == h && gw == w && c % groups == 0, "group gate shape");
        let per = c / groups;
        let p = h * w;
        let gv = self.value(g).data();
        let mut out = self.value(x).clone();
        for b in 0..n {
            for ch in 0..c {
                let gate = &gv[(b * groups + ch / per) * p..][..p];
                let dst = &mut out.data_mut()[(b * c + ch) * p..][..p];
                dst.iter_mut().zip(gate).for_each(|(v, &s)| *v = *v * s);
            }
        }
        self.push(out, Op::MulGroups { x, g }, &[x, g])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let p = h * w;
        let denom = T::from_usize(p).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(p)
            .map(|ch| ch.iter().copied().sum::<T>() / denom)
            .collect();
        self.push(Tensor::from_vec([n, c, 1, 1], data), Op::GlobalAvgPool(x), &[x])
    }

    /// `y = x · wᵀ + b` on `[n, f, 1, 1]` inputs; weight `[out, f, 1, 1]`, bias `[out, 1, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let [n, f, h, wd] = self.shape(x);
        assert_eq!(h * wd, 1, "linear expects flattened features");
        let [o, wf, _, _] = self.shape(w);
        assert_eq!(f, wf, "linear feature mismatch");
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            f,
            o,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bv).for_each(|(v, &bb)| *v = *v + bb);
        }
        self.push(Tensor::from_vec([n, o, 1, 1], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [n, _, h, w] = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch");
            total += s[1];
        }
        let mut data = Vec::with_capacity(n * total * h * w);
        for b in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(b));
            }
        }
        self.push(
            Tensor::from_vec([n, total, h, w], data),
            Op::Concat(parts.to_vec()),
            parts,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (pi, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[pi * 4 * h * w..][..4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::from_vec([n, c, 2 * h, 2 * w], out), Op::Upsample2x(x), &[x])
    }

    /// Mean negative log-softmax of the labelled class (log-sum-exp stabilized).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let [n, k, _, _] = self.shape(logits);
        assert_eq!(labels.len(), n, "one label per sample");
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total = total + lse - row[y];
        }
        let value = Tensor::scalar(total / T::from_usize(n).unwrap());
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `Σ w[n] (pred − target)² / denom`, with a per-sample weight (0 masks a sample out).
    pub fn masked_mse(&mut self, pred: Var, target: Tensor<T>, weight: &[T], denom: T) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "sr target shape mismatch");
        let per = target.sample_len();
        let pv = self.value(pred).data();
        let mut total = T::zero();
        for (i, (&p, &t)) in pv.iter().zip(target.data()).enumerate() {
            let d = p - t;
            total = total + weight[i / per] * d * d;
        }
        let value = Tensor::scalar(total / denom);
        self.push(
            value,
            Op::MaskedMse {
                pred,
                target,
                weight: weight.to_vec(),
                denom,
            },
            &[pred],
        )
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Grads { grads, params }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x).data(),
                    self.shape(*x),
                    self.value(*w).data(),
                    d,
                    *spec,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_vec(self.shape(*x), dx));
                }
                acc(*w, Tensor::from_vec(self.shape(*w), dw));
                if let Some(b) = b {
                    acc(*b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::ConvTranspose { x, w, b, spec } => {
                let (dx, dw, db) = conv_transpose2d_backward(
                    self.value(*x).data(),
                    self.shape(*x),
                    self.value(*w).data(),
                    d,
                    *spec,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_vec(self.shape(*x), dx));
                }
                acc(*w, Tensor::from_vec(self.shape(*w), dw));
                if let Some(b) = b {
                    acc(*b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = self.shape(*x);
                let p = h * w;
                let m = T::from_usize(n * p).unwrap();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); d.len()];
                for ch in 0..c {
                    let idx = |b: usize| (b * c + ch) * p..(b * c + ch + 1) * p;
                    let (mut s_dy, mut s_dyx) = (T::zero(), T::zero());
                    for b in 0..n {
                        for i in idx(b) {
                            s_dy = s_dy + d[i];
                            s_dyx = s_dyx + d[i] * xhat[i];
                        }
                    }
                    dgamma[ch] = s_dyx;
                    dbeta[ch] = s_dy;
                    let k = g[ch] * inv_std[ch];
                    for b in 0..n {
                        for i in idx(b) {
                            dx[i] = if *batch_stats {
                                k * (d[i] - s_dy / m - xhat[i] * s_dyx / m)
                            } else {
                                k * d[i]
                            };
                        }
                    }
                }
                acc(*x, Tensor::from_vec(self.shape(*x), dx));
                acc(*gamma, Tensor::from_vec(self.shape(*gamma), dgamma));
                acc(*beta, Tensor::from_vec(self.shape(*beta), dbeta));
            }
            Op::Relu(x) => {
                let y = node.value.data();
                let dx = d
                    .iter()
                    .zip(y)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*x, Tensor::from_vec(dy.shape(), dx));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = d.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                acc(*x, Tensor::from_vec(dy.shape(), dx));
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = d.iter().zip(bv).map(|(&g, &v)| g * v).collect();
                let db = d.iter().zip(av).map(|(&g, &v)| g * v).collect();
                acc(*a, Tensor::from_vec(dy.shape(), da));
                acc(*b, Tensor::from_vec(dy.shape(), db));
            }
            Op::Scale(x, s) => acc(*x, dy.map(|g| g * *s)),
            Op::MulChannel { x, g } => {
                let [_, _, h, w] = self.shape(*x);
                let p = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*g).data();
                let mut dx = vec![T::zero(); d.len()];
                let mut dg = vec![T::zero(); gv.len()];
                for i in 0..gv.len() {
                    let r = i * p..(i + 1) * p;
                    let mut s = T::zero();
                    for j in r {
                        dx[j] = d[j] * gv[i];
                        s = s + d[j] * xv[j];
                    }
                    dg[i] = s;
                }
                acc(*x, Tensor::from_vec(self.shape(*x), dx));
                acc(*g, Tensor::from_vec(self.shape(*g), dg));
            }
            Op::MulGroups { x, g } => {
                let [n, c, h, w] = self.shape(*x);
                let groups = self.shape(*g)[1];
                let per = c / groups;
                let p = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*g).data();
                let mut dx = vec![T::zero(); d.len()];
                let mut dg = vec![T::zero(); gv.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let gbase = (b * groups + ch / per) * p;
                        let base = (b * c + ch) * p;
                        for j in 0..p {
                            dx[base + j] = d[base + j] * gv[gbase + j];
                            dg[gbase + j] = dg[gbase + j] + d[base + j] * xv[base + j];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(self.shape(*x), dx));
                acc(*g, Tensor::from_vec(self.shape(*g), dg));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let p = shape[2] * shape[3];
                let denom = T::from_usize(p).unwrap();
                let mut dx = Vec::with_capacity(p * d.len());
                for &g in d {
                    dx.extend(std::iter::repeat_n(g / denom, p));
                }
                acc(*x, Tensor::from_vec(shape, dx));
            }
            Op::Linear { x, w, b } => {
                let [n, f, _, _] = self.shape(*x);
                let o = self.shape(*w)[0];
                let mut dx = vec![T::zero(); n * f];
                gemm(
                    n,
                    o,
                    f,
                    T::one(),
                    d,
                    false,
                    self.value(*w).data(),
                    false,
                    T::zero(),
                    &mut dx,
                );
                let mut dw = vec![T::zero(); o * f];
                gemm(
                    o,
                    n,
                    f,
                    T::one(),
                    d,
                    true,
                    self.value(*x).data(),
                    false,
                    T::zero(),
                    &mut dw,
                );
                let mut db = vec![T::zero(); o];
                for row in d.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                acc(*x, Tensor::from_vec(self.shape(*x), dx));
                acc(*w, Tensor::from_vec(self.shape(*w), dw));
                acc(*b, Tensor::from_vec(self.shape(*b), db));
            }
            Op::Concat(parts) => {
                let [n, total, h, w] = dy.shape();
                let p = h * w;
                let mut offset = 0;
                for &part in parts {
                    let s = self.shape(part);
                    let cpart = s[1];
                    let mut g = Vec::with_capacity(n * cpart * p);
                    for b in 0..n {
                        g.extend_from_slice(&d[(b * total + offset) * p..][..cpart * p]);
                    }
                    acc(part, Tensor::from_vec(s, g));
                    offset += cpart;
                }
            }
            Op::Upsample2x(x) => {
                let shape = self.shape(*x);
                let [_, _, h, w] = shape;
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (pi, plane) in d.chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[pi * h * w..][..h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let t = &mut dst[(y / 2) * w + xx / 2];
                            *t = *t + plane[y * 2 * w + xx];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(shape, dx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.shape(*logits);
                let k = shape[1];
                let scale = d[0] / T::from_usize(labels.len()).unwrap();
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    g[i * k + y] = g[i * k + y] - scale;
                }
                acc(*logits, Tensor::from_vec(shape, g));
            }
            Op::MaskedMse {
                pred,
                target,
                weight,
                denom,
            } => {
                let per = target.sample_len();
                let two = T::from_f64_lossy(2.0);
                let pv = self.value(*pred).data();
                let g = pv
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (&p, &t))| two * weight[i / per] * (p - t) * d[0] / *denom)
                    .collect();
                acc(*pred, Tensor::from_vec(target.shape(), g));
            }
        }
    }
}
