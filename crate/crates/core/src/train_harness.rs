//! Training loop: augmentation with modal erasing, SGD with momentum under a cyclic cosine
//! schedule, checkpointing with optimizer state, line-delimited JSON logs, periodic evaluation,
//! and the MFAM reconstruction-difference visualization.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afa_net::{
    apply_bn_updates, images_to_tensor, tensor_to_image, AfaModel, BnUpdate, Checkpoint, Ctx, Modality, Mode,
    ModelConfig,
};
use crate::dataset_io::{batch_indices, MultiModalSample};
use crate::image::{quantize_u8, Image8};
use crate::nn::{Grads, ParamStore, Real, Tensor};
use crate::objective_metrics::{evaluate, live_scores, total_loss, EvalRecord, Label, LossBreakdown, DEFAULT_ALPHA};
use crate::{Error, Result};

/// Training hyperparameters. Serialized as a flat TOML table; model fields sit alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cycles: u64,
    pub steps_per_cycle: u64,
    pub seed: u64,
    /// Weight of the super-resolution loss.
    pub alpha: f64,
    pub flip: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_degrees: f64,
    /// Maximum zoom-in / shift as a fraction of the crop size.
    pub crop_jitter: f64,
    pub modal_erase_prob: f64,
    /// Evaluate on the training set every this many steps (0: only at cycle ends).
    pub eval_every: u64,
    /// Decision threshold on the live score used for reported rates.
    pub threshold: f64,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_init: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 0.0005,
            cycles: 3,
            steps_per_cycle: 100,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            flip: true,
            rotation_degrees: 15.0,
            crop_jitter: 0.12,
            modal_erase_prob: 0.3,
            eval_every: 0,
            threshold: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.steps_per_cycle == 0 || self.cycles == 0 {
            return bad("cycles and steps_per_cycle must be at least 1".into());
        }
        if !(self.lr_init > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return bad(format!(
                "need 0 <= lr_min <= lr_init, lr_init > 0 (got {} / {})",
                self.lr_min, self.lr_init
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.alpha >= 0.0) {
            return bad("weight_decay and alpha must be non-negative".into());
        }
        if !(0.0..=180.0).contains(&self.rotation_degrees) || !(0.0..0.5).contains(&self.crop_jitter) {
            return bad("rotation_degrees must lie in [0, 180] and crop_jitter in [0, 0.5)".into());
        }
        if !(0.0..=1.0).contains(&self.modal_erase_prob) || !(0.0..=1.0).contains(&self.threshold) {
            return bad("modal_erase_prob and threshold must lie in [0, 1]".into());
        }
        self.model.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.cycles * self.steps_per_cycle
    }

    /// Turns every augmentation off.
    pub fn without_augmentation(mut self) -> Self {
        self.flip = false;
        self.rotation_degrees = 0.0;
        self.crop_jitter = 0.0;
        self.modal_erase_prob = 0.0;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Cyclic cosine annealing: restarts at `lr_init` every `steps_per_cycle` steps.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let t = (step % cfg.steps_per_cycle) as f64;
    let l = cfg.steps_per_cycle as f64;
    cfg.lr_min + (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t / l).cos()) / 2.0
}

/// Generator for the augmentation of sample `k` of the batch at `step`.
pub fn augment_rng(seed: u64, step: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_D00D_F00D);
    rng.set_stream((step << 24) | k as u64);
    rng
}

/// Samples an image with an affine map given in normalized `[-1, 1]` coordinates, so the
/// same map aligns images of different resolutions. Bilinear with edge clamping.
fn warp(img: &Image8, inv: &[[f64; 3]; 2]) -> Image8 {
    let (w, h) = (img.width(), img.height());
    let mut out = Image8::new(w, h, img.channels());
    let sample = |px: f64, py: f64, c: usize| {
        let x = px.clamp(0.0, (w - 1) as f64);
        let y = py.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let g = |xx, yy| img.get(xx, yy, c) as f64;
        (g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx) * (1.0 - fy) + (g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx) * fy
    };
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            let su = inv[0][0] * u + inv[0][1] * v + inv[0][2];
            let sv = inv[1][0] * u + inv[1][1] * v + inv[1][2];
            let px = (su + 1.0) / 2.0 * w as f64 - 0.5;
            let py = (sv + 1.0) / 2.0 * h as f64 - 0.5;
            for c in 0..img.channels() {
                out.set(x, y, c, quantize_u8(sample(px, py, c)));
            }
        }
    }
    out
}

/// Random flip, rotation and zoom/shift applied identically to all inputs and ground truth,
/// then modal erasing of one input modality.
pub fn augment(sample: &MultiModalSample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> MultiModalSample {
    let mut s = sample.clone();
    let apply = |s: &mut MultiModalSample, f: &dyn Fn(&Image8) -> Image8| {
        for img in s.inputs.iter_mut().chain(s.ground_truth.iter_mut()) {
            *img = f(img);
        }
    };
    if cfg.flip && rng.random_bool(0.5) {
        apply(&mut s, &Image8::flip_horizontal);
    }
    let angle = if cfg.rotation_degrees > 0.0 {
        rng.random_range(-cfg.rotation_degrees..=cfg.rotation_degrees)
            .to_radians()
    } else {
        0.0
    };
    let (zoom, tx, ty) = if cfg.crop_jitter > 0.0 {
        let j = cfg.crop_jitter;
        (
            rng.random_range(1.0..=1.0 / (1.0 - j)),
            rng.random_range(-j..=j),
            rng.random_range(-j..=j),
        )
    } else {
        (1.0, 0.0, 0.0)
    };
    if angle != 0.0 || zoom != 1.0 || tx != 0.0 || ty != 0.0 {
        // output point p maps to source R(angle) p / zoom + t
        let (c, sn) = (angle.cos() / zoom, angle.sin() / zoom);
        let inv = [[c, -sn, tx], [sn, c, ty]];
        apply(&mut s, &|img| warp(img, &inv));
    }
    if cfg.modal_erase_prob > 0.0 && rng.random_bool(cfg.modal_erase_prob) {
        let m = Modality::ALL[rng.random_range(0..3)];
        let img = &mut s.inputs[m.index()];
        img.data_mut().iter_mut().for_each(|v| *v = 0);
        s.erased = Some(m);
    }
    s
}

/// Network-ready tensors for a batch of samples.
#[derive(Clone, Debug)]
pub struct SampleBatch<T> {
    pub inputs: [Tensor<T>; 3],
    pub targets: [Tensor<T>; 3],
    pub labels: Vec<usize>,
    /// Per-modality, per-sample weights of the reconstruction loss (0 for erased modalities).
    pub sr_weights: [Vec<T>; 3],
}

impl<T: Real> SampleBatch<T> {
    pub fn from_samples(samples: &[&MultiModalSample]) -> Result<Self> {
        let per = |f: &dyn Fn(&MultiModalSample, Modality) -> &Image8| -> Result<[Tensor<T>; 3]> {
            let mut out = Vec::with_capacity(3);
            for m in Modality::ALL {
                let imgs: Vec<&Image8> = samples.iter().map(|s| f(s, m)).collect();
                out.push(images_to_tensor(&imgs)?);
            }
            Ok(out.try_into().expect("three modalities"))
        };
        Ok(Self {
            inputs: per(&|s, m| s.input(m))?,
            targets: per(&|s, m| s.gt(m))?,
            labels: samples.iter().map(|s| s.label.index()).collect(),
            sr_weights: Modality::ALL.map(|m| {
                samples
                    .iter()
                    .map(|s| if s.erased == Some(m) { T::zero() } else { T::one() })
                    .collect()
            }),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss value, parameter gradients and pending batch-norm updates of one pass.
pub struct Objective<T> {
    pub loss: LossBreakdown,
    pub grads: Grads<T>,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub logits: Tensor<T>,
}

/// `L = L_c + alpha * L_s`, where `L_s` averages the per-modality reconstruction MSE (erased
/// modalities contribute zero for their sample but keep the full denominator).
pub fn objective<T: Real>(model: &AfaModel<T>, batch: &SampleBatch<T>, alpha: f64, mode: Mode) -> Result<Objective<T>> {
    let inputs = [&batch.inputs[0], &batch.inputs[1], &batch.inputs[2]];
    model.check_inputs(inputs)?;
    let mut cx = Ctx::new(&model.params, mode);
    let vars = inputs.map(|t| cx.input(t.clone()));
    let out = model.forward(&mut cx, vars);
    let lc = cx.tape.cross_entropy(out.logits, &batch.labels);
    let mut ls = None;
    for (i, target) in batch.targets.iter().enumerate() {
        if cx.tape.shape(out.sr[i]) != target.shape() {
            return Err(Error::shape(format!(
                "{} target has shape {:?}, reconstruction {:?}",
                Modality::ALL[i],
                target.shape(),
                cx.tape.shape(out.sr[i])
            )));
        }
        let denom = T::from_usize(target.len()).expect("size fits");
        let term = cx
            .tape
            .masked_mse(out.sr[i], target.clone(), &batch.sr_weights[i], denom);
        ls = Some(match ls {
            None => term,
            Some(acc) => cx.tape.add(acc, term),
        });
    }
    let ls = cx
        .tape
        .scale(ls.expect("three modalities"), T::from_f64_lossy(1.0 / 3.0));
    let weighted = cx.tape.scale(ls, T::from_f64_lossy(alpha));
    let total = cx.tape.add(lc, weighted);
    let grads = cx.tape.backward(total);
    Ok(Objective {
        loss: total_loss(
            cx.tape.value(lc).item().to_f64_lossy(),
            cx.tape.value(ls).item().to_f64_lossy(),
            alpha,
        ),
        grads,
        bn_updates: cx.take_bn_updates(),
        logits: cx.tape.value(out.logits).clone(),
    })
}

/// Momentum buffers, one per parameter slot (buffers keep an empty tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            velocity: params.iter().map(|(.., t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `v <- m v + g + wd w; w <- w - lr v` for every trainable parameter. All gradients are
    /// checked before any update; a non-finite one aborts with the parameter's name.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, cfg: &TrainConfig, lr: f64) -> Result<()> {
        let mut g_by_id: Vec<Option<&Tensor<T>>> = vec![None; params.len()];
        for (id, g) in grads.params() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
            g_by_id[id] = Some(g);
        }
        self.apply(params, &g_by_id, cfg, lr);
        Ok(())
    }

    /// Same update from explicit per-parameter gradients (missing ones count as zero).
    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &[Option<&Tensor<T>>], cfg: &TrainConfig, lr: f64) {
        let m = T::from_f64_lossy(cfg.momentum);
        let wd = T::from_f64_lossy(cfg.weight_decay);
        let lr = T::from_f64_lossy(lr);
        let ids: Vec<usize> = params.trainable_ids().collect();
        for id in ids {
            let w = params.get_mut(id);
            let v = &mut self.velocity[id];
            let g = grads[id];
            for (k, (vk, wk)) in v.data_mut().iter_mut().zip(w.data_mut()).enumerate() {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                *vk = m * *vk + gk + wd * *wk;
                *wk = *wk - lr * *vk;
            }
        }
    }
}

/// Fixed-field log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalRecord>,
}

/// Model, optimizer state and step counter; everything needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: AfaModel<f32>,
    pub sgd: Sgd<f32>,
    /// Number of completed steps.
    pub step: u64,
}

const MOMENTUM_PREFIX: &str = "optim.momentum.";

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = AfaModel::init(cfg.model.clone(), cfg.seed)?;
        let sgd = Sgd::new(&model.params);
        Ok(Self { model, sgd, step: 0 })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let meta = serde_json::json!({
            "step": self.step,
            "train_config": serde_json::to_value(cfg).expect("config serializes"),
        });
        let mut ck = Checkpoint::from_model(&self.model, meta);
        for id in self.model.params.trainable_ids() {
            ck.tensors.push((
                format!("{MOMENTUM_PREFIX}{}", self.model.params.name(id)),
                self.sgd.velocity[id].clone(),
            ));
        }
        ck
    }

    /// Restores model, momentum and step. Momentum tensors absent from the checkpoint start at 0.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model()?;
        let mut sgd = Sgd::new(&model.params);
        for id in model.params.trainable_ids() {
            if let Some(v) = ck.get(&format!("{MOMENTUM_PREFIX}{}", model.params.name(id))) {
                if v.shape() != sgd.velocity[id].shape() {
                    return Err(Error::Checkpoint(format!(
                        "momentum for `{}` has wrong shape",
                        model.params.name(id)
                    )));
                }
                sgd.velocity[id] = v.clone();
            }
        }
        let step = ck.meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
        Ok(Self { model, sgd, step })
    }
}

/// Reads the training config stored in a checkpoint, if any.
pub fn checkpoint_train_config(ck: &Checkpoint) -> Option<TrainConfig> {
    ck.meta
        .get("train_config")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

/// Eval-mode live scores, computed in fixed-size batches.
pub fn score_samples(model: &AfaModel<f32>, samples: &[MultiModalSample], batch_size: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&MultiModalSample> = chunk.iter().collect();
        let batch = SampleBatch::<f32>::from_samples(&refs)?;
        let p = model.predict([&batch.inputs[0], &batch.inputs[1], &batch.inputs[2]])?;
        let logits: Vec<f64> = p.logits.data().iter().map(|&v| v as f64).collect();
        scores.extend(live_scores(&logits));
    }
    Ok(scores)
}

pub fn evaluate_samples(
    model: &AfaModel<f32>,
    samples: &[MultiModalSample],
    batch_size: usize,
    threshold: f64,
) -> Result<crate::objective_metrics::EvalReport> {
    let scores = score_samples(model, samples, batch_size)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    evaluate(&scores, &labels, threshold)
}

/// Runs training over an in-memory sample set.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub state: TrainState,
    samples: &'a [MultiModalSample],
    run_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Validates the config and data before any step runs.
    pub fn new(cfg: TrainConfig, samples: &'a [MultiModalSample]) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::with_state(cfg, samples, state)
    }

    pub fn with_state(cfg: TrainConfig, samples: &'a [MultiModalSample], state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.model.config != cfg.model {
            return Err(Error::Config(
                "checkpoint model config differs from the training config".into(),
            ));
        }
        let has = |l: Label| samples.iter().any(|s| s.label == l);
        if !has(Label::Live) || !has(Label::Spoof) {
            return Err(Error::invalid("training data must contain both live and spoof samples"));
        }
        for s in samples {
            s.validate()?;
            if s.resolution() != cfg.model.in_resolution {
                return Err(Error::Manifest {
                    entry: s.sample_id.clone(),
                    msg: format!(
                        "resolution {} does not match in_resolution {}",
                        s.resolution(),
                        cfg.model.in_resolution
                    ),
                });
            }
        }
        Ok(Self {
            cfg,
            state,
            samples,
            run_dir: None,
            log: None,
            started: Instant::now(),
        })
    }

    /// Writes logs to `dir/train_log.jsonl` (appending) and checkpoints into `dir`.
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        self.log = Some(BufWriter::new(f));
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn batches_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.cfg.batch_size) as u64
    }

    /// The augmented batch used at `step`.
    pub fn batch_for_step(&self, step: u64) -> Vec<MultiModalSample> {
        let bpe = self.batches_per_epoch();
        let (epoch, k) = (step / bpe, (step % bpe) as usize);
        let order = batch_indices(self.samples.len(), self.cfg.batch_size, self.cfg.seed, epoch, true);
        order[k]
            .iter()
            .enumerate()
            .map(|(j, &i)| augment(&self.samples[i], &self.cfg, &mut augment_rng(self.cfg.seed, step, j)))
            .collect()
    }

    /// Runs one step and returns its log record.
    pub fn step(&mut self) -> Result<TrainLogRecord> {
        let step = self.state.step;
        let batch = self.batch_for_step(step);
        let refs: Vec<&MultiModalSample> = batch.iter().collect();
        let tensors = SampleBatch::<f32>::from_samples(&refs)?;
        let obj = objective(&self.state.model, &tensors, self.cfg.alpha, Mode::Train)?;
        if !obj.loss.total.is_finite() {
            return Err(Error::NonFiniteGradient(format!("loss at step {step}")));
        }
        let lr = lr_schedule(step, &self.cfg);
        self.state
            .sgd
            .step(&mut self.state.model.params, &obj.grads, &self.cfg, lr)?;
        apply_bn_updates(&mut self.state.model.params, &obj.bn_updates);
        self.state.step += 1;

        let done = self.state.step;
        let cycle_end = done.is_multiple_of(self.cfg.steps_per_cycle);
        let periodic = self.cfg.eval_every > 0 && done.is_multiple_of(self.cfg.eval_every);
        let eval = if cycle_end || periodic {
            Some(evaluate_samples(&self.state.model, self.samples, self.cfg.batch_size, self.cfg.threshold)?.record())
        } else {
            None
        };
        let record = TrainLogRecord {
            step,
            epoch: step / self.batches_per_epoch(),
            lr,
            loss: obj.loss,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            eval,
        };
        if let Some(log) = &mut self.log {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        if cycle_end {
            if let Some(dir) = &self.run_dir {
                let cycle = done / self.cfg.steps_per_cycle;
                self.state
                    .to_checkpoint(&self.cfg)
                    .save(&dir.join(format!("cycle_{cycle:03}.afac")))?;
            }
        }
        Ok(record)
    }

    /// Runs until `total_steps` (or `limit` more steps, whichever comes first).
    pub fn run(&mut self, limit: Option<u64>) -> Result<Vec<TrainLogRecord>> {
        let end = match limit {
            Some(n) => (self.state.step + n).min(self.cfg.total_steps()),
            None => self.cfg.total_steps(),
        };
        let mut records = Vec::new();
        while self.state.step < end {
            records.push(self.step()?);
        }
        if let Some(dir) = &self.run_dir {
            if self.state.step == self.cfg.total_steps() {
                self.state.to_checkpoint(&self.cfg).save(&dir.join("final.afac"))?;
            }
        }
        Ok(records)
    }
}

/// Bilinear upsample, network reconstruction and their signed difference for one modality.
#[derive(Clone, Debug)]
pub struct MfamView {
    pub modality: Modality,
    pub bilinear: Image8,
    pub reconstruction: Image8,
    /// `reconstruction - bilinear` mapped symmetrically around mid-gray 128.
    pub difference: Image8,
    pub mean_abs_difference: f64,
}

/// Renders a signed difference symmetrically around 128 (largest magnitude maps to 1 or 255).
pub fn render_difference(diff: &[f64], width: usize, height: usize, channels: usize) -> Image8 {
    let scale = diff.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Image8::from_fn(width, height, channels, |x, y, c| {
        let d = diff[(c * height + y) * width + x];
        if scale == 0.0 {
            128
        } else {
            quantize_u8(128.0 + 127.0 * d / scale)
        }
    })
}

/// Differences between the MFAM reconstructions and plain bilinear upsampling of the inputs.
pub fn visualize_mfam(model: &AfaModel<f32>, sample: &MultiModalSample) -> Result<[MfamView; 3]> {
    let batch = SampleBatch::<f32>::from_samples(&[sample])?;
    let p = model.predict([&batch.inputs[0], &batch.inputs[1], &batch.inputs[2]])?;
    let views = Modality::ALL.map(|m| {
        let input = sample.input(m);
        let (w, h) = (2 * input.width(), 2 * input.height());
        let bilinear = input.resize_bilinear(w, h);
        let sr = &p.sr[m.index()];
        let c = m.channels();
        let mut diff = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = (ch * h + y) * w + x;
                    diff[i] = sr.data()[i] as f64 * 255.0 - bilinear.get(x, y, ch) as f64;
                }
            }
        }
        let mean_abs_difference = diff.iter().map(|d| d.abs()).sum::<f64>() / diff.len() as f64;
        MfamView {
            modality: m,
            bilinear,
            reconstruction: tensor_to_image(sr, 0),
            difference: render_difference(&diff, w, h, c),
            mean_abs_difference,
        }
    });
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::{synthesize, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            cycles: 2,
            steps_per_cycle: 3,
            model: ModelConfig::uniform(4),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            steps_per_cycle: 10,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.1);
        assert_eq!(lr_schedule(10, &cfg), 0.1);
        assert!((lr_schedule(5, &cfg) - 0.05).abs() < 1e-15);
        let long = TrainConfig {
            steps_per_cycle: 1_000_000,
            lr_min: 0.01,
            ..TrainConfig::default()
        };
        assert!((lr_schedule(999_999, &long) - 0.01).abs() < 1e-9);
        for s in 1..10 {
            assert!(lr_schedule(s, &cfg) < lr_schedule(s - 1, &cfg));
        }
    }

    #[test]
    fn config_toml_round_trip_is_flat() {
        let cfg = TrainConfig {
            seed: 9,
            model: ModelConfig {
                upsample_mode: crate::afa_net::UpsampleMode::Transposed,
                ..ModelConfig::uniform(8)
            },
            ..TrainConfig::default()
        };
        let text = cfg.to_toml();
        assert!(text.contains("upsample_mode = \"transposed\""), "{text}");
        assert!(!text.contains('['.to_string().repeat(2).as_str()));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        let partial = TrainConfig::from_toml("batch_size = 8\nfc_hidden = 16\n").unwrap();
        assert_eq!(partial.batch_size, 8);
        assert_eq!(partial.model.fc_hidden, 16);
        assert!(TrainConfig::from_toml("steps_per_cycle = 0").is_err());
        assert!(TrainConfig::from_toml("momentum = 1.5").is_err());
    }

    #[test]
    fn augmentation_off_is_identity_and_seeded_runs_repeat() {
        let samples = synthesize(&SyntheticSpec::new(2, 2, 8, 3)).unwrap();
        let off = TrainConfig::default().without_augmentation();
        for s in &samples {
            assert_eq!(&augment(s, &off, &mut augment_rng(1, 0, 0)), s);
        }
        let on = TrainConfig::default();
        let a: Vec<_> = samples
            .iter()
            .enumerate()
            .map(|(k, s)| augment(s, &on, &mut augment_rng(4, 7, k)))
            .collect();
        let b: Vec<_> = samples
            .iter()
            .enumerate()
            .map(|(k, s)| augment(s, &on, &mut augment_rng(4, 7, k)))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_is_applied_to_every_image() {
        let s = &synthesize(&SyntheticSpec::new(1, 1, 8, 3)).unwrap()[0];
        let cfg = TrainConfig {
            flip: true,
            ..TrainConfig::default().without_augmentation()
        };
        let mut flipped = None;
        for k in 0..64 {
            let out = augment(s, &cfg, &mut augment_rng(0, 0, k));
            if out != *s {
                flipped = Some(out);
                break;
            }
        }
        let out = flipped.expect("a flip within 64 draws");
        for (a, b) in out
            .inputs
            .iter()
            .chain(&out.ground_truth)
            .zip(s.inputs.iter().chain(&s.ground_truth))
        {
            for y in 0..a.height() {
                for x in 0..a.width() {
                    for c in 0..a.channels() {
                        assert_eq!(a.get(x, y, c), b.get(a.width() - 1 - x, y, c));
                    }
                }
            }
        }
    }

    #[test]
    fn geometric_warp_keeps_inputs_and_ground_truth_aligned() {
        // a vertical edge at the centre stays at matching normalized positions in both sizes
        let mut s = synthesize(&SyntheticSpec::new(1, 1, 8, 3)).unwrap().remove(0);
        let edge = |n: usize| Image8::from_fn(n, n, 1, |x, _, _| if x < n / 2 { 0 } else { 255 });
        s.inputs[1] = edge(8);
        s.ground_truth[1] = edge(16);
        let cfg = TrainConfig {
            crop_jitter: 0.12,
            ..TrainConfig::default().without_augmentation()
        };
        for k in 0..8 {
            let out = augment(&s, &cfg, &mut augment_rng(2, 0, k));
            let crossing = |img: &Image8| {
                let n = img.width();
                let row: Vec<f64> = (0..n).map(|x| img.get(x, n / 2, 0) as f64).collect();
                let i = row.iter().position(|&v| v >= 128.0).unwrap_or(n);
                i as f64 / n as f64
            };
            assert!((crossing(&out.inputs[1]) - crossing(&out.ground_truth[1])).abs() <= 1.0 / 8.0);
        }
    }

    #[test]
    fn modal_erasing_zeroes_one_modality_and_masks_its_loss() {
        let samples = synthesize(&SyntheticSpec::new(2, 2, 8, 3)).unwrap();
        let cfg = TrainConfig {
            modal_erase_prob: 1.0,
            ..TrainConfig::default().without_augmentation()
        };
        let out = augment(&samples[0], &cfg, &mut augment_rng(0, 0, 0));
        let m = out.erased.expect("erased");
        assert!(out.input(m).data().iter().all(|&v| v == 0));
        assert_eq!(out.gt(m), samples[0].gt(m));
        for other in Modality::ALL.into_iter().filter(|&o| o != m) {
            assert_eq!(out.input(other), samples[0].input(other));
        }

        let model = AfaModel::<f64>::init(ModelConfig::uniform(4), 1).unwrap();
        let refs = [&out, &samples[1]];
        let batch = SampleBatch::<f64>::from_samples(&refs).unwrap();
        assert_eq!(batch.sr_weights[m.index()], vec![0.0, 1.0]);
        let obj = objective(&model, &batch, 1.0, Mode::Train).unwrap();
        // the reconstruction gradient of sample 0 in the erased modality is zero: changing its
        // target leaves the loss unchanged
        let mut moved = batch.clone();
        let len = moved.targets[m.index()].sample_len();
        moved.targets[m.index()].data_mut()[..len]
            .iter_mut()
            .for_each(|v| *v = 0.5);
        let obj2 = objective(&model, &moved, 1.0, Mode::Train).unwrap();
        assert_eq!(obj.loss.sr, obj2.loss.sr);
    }

    #[test]
    fn sgd_updates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", crate::nn::ParamKind::Trainable, Tensor::scalar(1.0));
        let mut cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let g = Tensor::scalar(0.5);
        let mut sgd = Sgd::new(&store);
        sgd.apply(&mut store, &[Some(&g)], &cfg, 0.1);
        assert!((store.get(id).item() - 0.95).abs() < 1e-15);

        // hand trace with momentum 0.9: v1 = g1, v2 = 0.9 g1 + g2
        cfg.momentum = 0.9;
        store.get_mut(id).data_mut()[0] = 1.0;
        let mut sgd = Sgd::new(&store);
        sgd.apply(&mut store, &[Some(&Tensor::scalar(1.0))], &cfg, 0.1);
        sgd.apply(&mut store, &[Some(&Tensor::scalar(2.0))], &cfg, 0.1);
        assert!((sgd.velocity[id].item() - 2.9).abs() < 1e-12);
        assert!((store.get(id).item() - (1.0 - 0.1 - 0.29)).abs() < 1e-12);

        cfg.momentum = 0.0;
        cfg.weight_decay = 0.1;
        let mut prev = store.get(id).item();
        for _ in 0..5 {
            sgd.apply(&mut store, &[None], &cfg, 0.1);
            let w = store.get(id).item();
            assert!(w.abs() < prev.abs() && w.signum() == prev.signum());
            prev = w;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let model = AfaModel::<f64>::init(ModelConfig::uniform(4), 1).unwrap();
        let samples = synthesize(&SyntheticSpec::new(1, 1, 8, 3)).unwrap();
        let refs: Vec<&MultiModalSample> = samples.iter().collect();
        let mut batch = SampleBatch::<f64>::from_samples(&refs).unwrap();
        batch.inputs[0].data_mut()[0] = f64::NAN;
        let obj = objective(&model, &batch, 0.001, Mode::Train).unwrap();
        let mut m2 = model.clone();
        let mut sgd = Sgd::new(&m2.params);
        let err = sgd
            .step(&mut m2.params, &obj.grads, &TrainConfig::default(), 0.1)
            .unwrap_err();
        match err {
            Error::NonFiniteGradient(name) => assert!(model.params.id(&name).is_some(), "{name}"),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(m2.params.get(0), model.params.get(0));
    }

    #[test]
    fn sr_loss_reaches_the_mfam_tail() {
        let model = AfaModel::<f64>::init(ModelConfig::uniform(4), 1).unwrap();
        let samples = synthesize(&SyntheticSpec::new(2, 2, 8, 3)).unwrap();
        let refs: Vec<&MultiModalSample> = samples.iter().collect();
        let batch = SampleBatch::<f64>::from_samples(&refs).unwrap();
        let obj = objective(&model, &batch, 0.001, Mode::Train).unwrap();
        let id = model.params.id("rgb.mfam.to_image.weight").unwrap();
        let g = obj.grads.params().find(|(i, _)| *i == id).unwrap().1;
        assert!(g.data().iter().map(|v| v * v).sum::<f64>() > 0.0);
    }

    #[test]
    fn data_errors_surface_before_training() {
        let samples = synthesize(&SyntheticSpec::new(2, 2, 8, 3)).unwrap();
        let live_only: Vec<_> = samples.iter().filter(|s| s.label == Label::Live).cloned().collect();
        assert!(Trainer::new(tiny_cfg(), &live_only).is_err());
        let wrong_res = TrainConfig {
            model: ModelConfig {
                in_resolution: 4,
                sr_resolution: 8,
                ..ModelConfig::uniform(4)
            },
            ..tiny_cfg()
        };
        assert!(Trainer::new(wrong_res, &samples).is_err());
    }

    #[test]
    fn resume_reproduces_uninterrupted_trace() {
        let samples = synthesize(&SyntheticSpec::new(4, 4, 8, 3)).unwrap();
        let mut full = Trainer::new(tiny_cfg(), &samples).unwrap();
        let trace = full.run(None).unwrap();
        assert_eq!(trace.len(), 6);

        let mut first = Trainer::new(tiny_cfg(), &samples).unwrap();
        let mut resumed_trace = first.run(Some(4)).unwrap();
        let bytes = first.state.to_checkpoint(&first.cfg).to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let state = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(state.step, 4);
        let cfg = checkpoint_train_config(&ck).unwrap();
        let mut second = Trainer::with_state(cfg, &samples, state).unwrap();
        resumed_trace.extend(second.run(None).unwrap());
        let losses = |t: &[TrainLogRecord]| t.iter().map(|r| (r.step, r.lr, r.loss)).collect::<Vec<_>>();
        assert_eq!(losses(&trace), losses(&resumed_trace));
        assert_eq!(
            full.state.to_checkpoint(&full.cfg).to_bytes(),
            second.state.to_checkpoint(&second.cfg).to_bytes()
        );
        assert!(trace[2].eval.is_some() && trace[1].eval.is_none());
    }

    #[test]
    fn run_dir_gets_logs_and_cycle_checkpoints() {
        let samples = synthesize(&SyntheticSpec::new(4, 4, 8, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_cfg(), &samples)
            .unwrap()
            .with_run_dir(dir.path())
            .unwrap();
        let trace = t.run(None).unwrap();
        for name in ["cycle_001.afac", "cycle_002.afac", "final.afac"] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let parsed: Vec<TrainLogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed.len(), trace.len());
        for (i, r) in parsed.iter().enumerate() {
            assert_eq!(r.step, i as u64);
            assert_eq!(r.lr, lr_schedule(r.step, &t.cfg));
            assert_eq!(r.loss, trace[i].loss);
        }
        let v: serde_json::Value = serde_json::from_str(log.lines().nth(2).unwrap()).unwrap();
        for key in ["step", "epoch", "lr", "loss", "wall_time_s", "eval"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn difference_rendering() {
        let same = render_difference(&[0.0; 8], 2, 2, 2);
        assert!(same.data().iter().all(|&v| v == 128));
        let d = render_difference(&[-10.0, 5.0, 10.0, 0.0], 2, 2, 1);
        assert_eq!(d.data(), &[1, 192, 255, 128]);
    }

    #[test]
    fn zero_reconstruction_difference_is_negated_bilinear() {
        let mut model = AfaModel::<f32>::init(ModelConfig::uniform(4), 1).unwrap();
        for m in Modality::ALL {
            for suffix in ["weight", "bias"] {
                let name = format!("{m}.mfam.to_image.{suffix}");
                model
                    .params
                    .by_name_mut(&name)
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let s = &synthesize(&SyntheticSpec::new(1, 1, 8, 3)).unwrap()[0];
        let views = visualize_mfam(&model, s).unwrap();
        for v in &views {
            let b = &v.bilinear;
            let expect: Vec<f64> = b.data().iter().map(|&x| -(x as f64)).collect();
            let (w, h, c) = (b.width(), b.height(), b.channels());
            let planar: Vec<f64> = (0..c)
                .flat_map(|ch| (0..h).flat_map(move |y| (0..w).map(move |x| (x, y, ch))))
                .map(|(x, y, ch)| expect[(y * w + x) * c + ch])
                .collect();
            assert_eq!(v.difference, render_difference(&planar, w, h, c));
            assert!(v.reconstruction.data().iter().all(|&x| x == 0));
            assert!(v.mean_abs_difference.is_finite() && v.mean_abs_difference > 0.0);
        }
    }

    #[test]
    fn random_model_difference_statistics_are_finite() {
        let model = AfaModel::<f32>::init(ModelConfig::uniform(4), 5).unwrap();
        let s = &synthesize(&SyntheticSpec::new(1, 1, 8, 3)).unwrap()[1];
        for v in visualize_mfam(&model, s).unwrap() {
            assert!(v.mean_abs_difference.is_finite());
            assert_eq!(v.difference.width(), 16);
        }
    }
}
