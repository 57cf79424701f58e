use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Builder;
use super::*;
use crate::nn::{ParamStore, Tensor};

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_inputs(n: usize, r: usize, seed: u64) -> [Tensor<f64>; 3] {
    [
        random_tensor([n, 3, r, r], seed),
        random_tensor([n, 1, r, r], seed + 1),
        random_tensor([n, 1, r, r], seed + 2),
    ]
}

fn small() -> ModelConfig {
    ModelConfig::uniform(8)
}

/// Perturbs BN buffers so eval-mode batch norm is not the identity map.
fn perturb_buffers(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = store.iter().map(|(id, ..)| id).collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        if name.ends_with("running_mean") || name.ends_with(".bias") || name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        } else if name.ends_with("running_var") || name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
}

fn run<F: FnOnce(&mut Ctx<'_, f64>, Var) -> Var>(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    overrides: Option<&GateOverrides>,
    f: F,
) -> Tensor<f64> {
    let mut cx = Ctx::new(store, Mode::Eval);
    if let Some(o) = overrides {
        cx = cx.with_overrides(o);
    }
    let v = cx.input(x.clone());
    let y = f(&mut cx, v);
    cx.tape.value(y).clone()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn input_block_shapes() {
    let mut store = ParamStore::<f64>::new();
    let (b1, b2) = {
        let mut b = Builder::new(&mut store, 1);
        (
            b.input_block("a", 3, &[32, 64, 128], 1),
            b.input_block("b", 3, &[32, 64, 128], 2),
        )
    };
    let y = run(&store, &random_tensor([4, 3, 8, 8], 0), None, |cx, x| b1.forward(cx, x));
    assert_eq!(y.shape(), [4, 128, 8, 8]);
    let y = run(&store, &random_tensor([2, 3, 16, 16], 0), None, |cx, x| {
        b2.forward(cx, x)
    });
    assert_eq!(y.shape(), [2, 128, 8, 8]);
    assert_eq!(b1.out_channels(), 128);
}

#[test]
fn input_block_zero_input_is_identical_across_batch() {
    let mut store = ParamStore::<f64>::new();
    let blk = Builder::new(&mut store, 3).input_block("a", 3, &[8, 8, 8], 1);
    perturb_buffers(&mut store, 4);
    let y = run(&store, &Tensor::zeros([3, 3, 8, 8]), None, |cx, x| blk.forward(cx, x));
    assert_eq!(y.sample(0), y.sample(1));
    assert_eq!(y.sample(0), y.sample(2));
}

#[test]
fn dam_group_count_is_gcd() {
    let mut store = ParamStore::<f64>::new();
    let dam = Builder::new(&mut store, 0).dam("d", 64, 128);
    assert_eq!(dam.groups, 64);
    assert_eq!(store.by_name("d.spatial.weight").unwrap().shape(), [64, 1, 3, 3]);
    assert!(dam.proj.is_some());
    assert_eq!(layers::gcd(48, 32), 16);
}

#[test]
fn dam_shape_and_gate_range() {
    let mut store = ParamStore::<f64>::new();
    let dam = Builder::new(&mut store, 0).dam("d", 32, 32);
    let mut cx = Ctx::new(&store, Mode::Eval).record_gates();
    let x = cx.input(random_tensor([2, 32, 8, 8], 1));
    let y = dam.forward(&mut cx, x);
    assert_eq!(cx.tape.shape(y), [2, 32, 8, 8]);
    let gates = cx.recorded_gates();
    assert_eq!(gates.len(), 2);
    assert_eq!(gates[0].1.shape(), [2, 32, 8, 8]);
    for (_, g) in gates {
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn dam_with_unit_gates_is_residual_block() {
    for (cin, cout) in [(16, 16), (8, 12)] {
        let mut store = ParamStore::<f64>::new();
        let dam = Builder::new(&mut store, 5).dam("d", cin, cout);
        perturb_buffers(&mut store, 6);
        let mut ov = GateOverrides::new();
        ov.ones(dam.spatial_gate_name()).ones(dam.channel_gate_name());
        let x = random_tensor([2, cin, 8, 8], 7);
        let gated = run(&store, &x, Some(&ov), |cx, x| dam.forward(cx, x));
        let plain = run(&store, &x, None, |cx, x| dam.forward_residual(cx, x));
        assert!(max_abs_diff(&gated, &plain) < 1e-12);
        let free = run(&store, &x, None, |cx, x| dam.forward(cx, x));
        assert!(max_abs_diff(&free, &plain) > 1e-3);
    }
}

#[test]
fn dam_se_identity_and_outer_skip_ablation() {
    let mut store = ParamStore::<f64>::new();
    let blk = Builder::new(&mut store, 8).dam_se("b", 16, 4);
    perturb_buffers(&mut store, 9);
    let x = random_tensor([4, 16, 8, 8], 10);
    let mut ov = GateOverrides::new();
    ov.ones(blk.dam.spatial_gate_name())
        .ones(blk.dam.channel_gate_name())
        .ones(blk.se.gate_name.clone());
    let got = run(&store, &x, Some(&ov), |cx, x| blk.forward(cx, x));
    assert_eq!(got.shape(), [4, 16, 8, 8]);
    // residual block, then conv-BN with the input added back
    let want = run(&store, &x, None, |cx, x| {
        let h = blk.dam.forward_residual(cx, x);
        let h = blk.extra.forward(cx, h);
        let h = cx.tape.add(h, x);
        cx.tape.relu(h)
    });
    assert!(max_abs_diff(&got, &want) < 1e-12);

    let with = run(&store, &x, None, |cx, x| blk.forward_with(cx, x, true));
    let without = run(&store, &x, None, |cx, x| blk.forward_with(cx, x, false));
    assert!(max_abs_diff(&with, &without) > 1e-3);
}

#[test]
fn se_gate_identity_and_pooling_linearity() {
    let mut store = ParamStore::<f64>::new();
    let se = Builder::new(&mut store, 11).se("s", 8, 4);
    let x = random_tensor([2, 8, 4, 4], 12);
    let mut ov = GateOverrides::new();
    ov.ones(se.gate_name.clone());
    assert_eq!(run(&store, &x, Some(&ov), |cx, x| se.forward(cx, x)), x);

    let g = run(&store, &x, None, |cx, x| se.gates(cx, x));
    assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));

    let mut x2 = x.clone();
    x2.data_mut()[16 * 3..16 * 4].iter_mut().for_each(|v| *v *= 2.0);
    let p1 = run(&store, &x, None, |cx, x| cx.tape.global_avg_pool(x));
    let p2 = run(&store, &x2, None, |cx, x| cx.tape.global_avg_pool(x));
    assert!((p2.data()[3] - 2.0 * p1.data()[3]).abs() < 1e-12);
    assert_eq!(p1.data()[2], p2.data()[2]);
}

#[test]
fn sfam_shapes_and_nearest_upsample() {
    for mode in [UpsampleMode::Nearest, UpsampleMode::Transposed] {
        let mut store = ParamStore::<f64>::new();
        let s = Builder::new(&mut store, 1).sfam("s", 3, 8, mode, &[8, 8, 16], 4);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let x = cx.input(random_tensor([2, 3, 8, 8], 2));
        let out = s.forward(&mut cx, x);
        assert_eq!(cx.tape.shape(out.sr_image), [2, 3, 16, 16]);
        assert_eq!(cx.tape.shape(out.features), [2, 16, 8, 8]);
    }
    let store = ParamStore::<f64>::new();
    let up = run(&store, &Tensor::full([1, 2, 3, 3], 0.7), None, |cx, x| {
        cx.tape.upsample_nearest2x(x)
    });
    assert_eq!(up.shape(), [1, 2, 6, 6]);
    assert!(up.data().iter().all(|&v| v == 0.7));
}

/// Builds an SFAM and an MFAM sharing weights so that, with the MFAM SE gate passing only the
/// target modality, both compute the same function.
pub(super) fn mfam_sfam_harness(mode: UpsampleMode, target: Modality, seed: u64) -> f64 {
    let w = 8;
    let chans = [3, 1, 1];
    let block = [8, 8, 8];
    let mut store = ParamStore::<f64>::new();
    let (sfam, mfam) = {
        let mut b = Builder::new(&mut store, seed);
        (
            b.sfam("sfam", target.channels(), w, mode, &block, 4),
            b.mfam("mfam", target.index(), &chans, w, mode, &block, 4),
        )
    };
    perturb_buffers(&mut store, seed + 1);
    let src = store.clone();
    let m = target.as_str();
    store.copy_prefix(&format!("mfam.shallow.{m}.stem"), &src, "sfam.stem");
    store.copy_prefix(&format!("mfam.shallow.{m}.dam1"), &src, "sfam.dam1");
    for part in ["up", "dam2", "to_image", "augment"] {
        store.copy_prefix(&format!("mfam.{part}"), &src, &format!("sfam.{part}"));
    }
    let fuse = store.by_name_mut("mfam.fuse.weight").unwrap();
    fuse.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let t = target.index();
    for o in 0..w {
        fuse.data_mut()[o * 3 * w + t * w + o] = 1.0;
    }
    store
        .by_name_mut("mfam.fuse.bias")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);

    let mut ov = GateOverrides::new();
    ov.set(
        mfam.se.gate_name.clone(),
        (0..3 * w).map(|c| if c / w == t { 1.0 } else { 0.0 }).collect(),
    );
    ov.ones(sfam.se.gate_name.clone());
    let inputs = random_inputs(2, 8, seed + 2);

    let mut cx = Ctx::new(&store, Mode::Eval).with_overrides(&ov);
    let vars = [0, 1, 2].map(|i| cx.input(inputs[i].clone()));
    let a = mfam.forward(&mut cx, &vars);
    let b = sfam.forward(&mut cx, vars[t]);
    max_abs_diff(cx.tape.value(a.sr_image), cx.tape.value(b.sr_image))
        .max(max_abs_diff(cx.tape.value(a.features), cx.tape.value(b.features)))
}

#[test]
fn mfam_reduces_to_sfam() {
    for mode in [UpsampleMode::Nearest, UpsampleMode::Transposed] {
        for m in Modality::ALL {
            assert!(mfam_sfam_harness(mode, m, 20) < 1e-9, "{mode:?} {m}");
        }
    }
}

#[test]
fn mfam_shapes_and_zeroed_modalities() {
    let mut store = ParamStore::<f64>::new();
    let mfam = Builder::new(&mut store, 3).mfam("m", 0, &[3, 1, 1], 8, UpsampleMode::Nearest, &[8, 8, 8], 4);
    let mut inputs = random_inputs(2, 8, 4);
    inputs[1] = Tensor::zeros([2, 1, 8, 8]);
    inputs[2] = Tensor::zeros([2, 1, 8, 8]);
    let mut cx = Ctx::new(&store, Mode::Eval);
    let vars = [0, 1, 2].map(|i| cx.input(inputs[i].clone()));
    let out = mfam.forward(&mut cx, &vars);
    assert_eq!(cx.tape.shape(out.sr_image), [2, 3, 16, 16]);
    assert!(cx.tape.value(out.sr_image).is_finite());
    assert!(cx.tape.value(out.features).is_finite());
}

#[test]
fn forward_shapes_both_modes() {
    for mode in [UpsampleMode::Nearest, UpsampleMode::Transposed] {
        let cfg = ModelConfig {
            upsample_mode: mode,
            ..small()
        };
        let model = AfaModel::<f64>::init(cfg, 1).unwrap();
        let inputs = random_inputs(4, 8, 2);
        let p = model.predict([&inputs[0], &inputs[1], &inputs[2]]).unwrap();
        assert_eq!(p.logits.shape(), [4, 2, 1, 1]);
        for (m, sr) in Modality::ALL.iter().zip(&p.sr) {
            assert_eq!(sr.shape(), [4, m.channels(), 16, 16]);
        }
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = AfaModel::<f64>::init(small(), 1).unwrap();
    let inputs = random_inputs(2, 8, 2);
    let bad = random_tensor([2, 1, 9, 9], 0);
    assert!(matches!(
        model.predict([&inputs[0], &bad, &inputs[2]]),
        Err(crate::Error::Shape(_))
    ));
}

#[test]
fn eval_forward_has_no_cross_sample_mixing() {
    let mut model = AfaModel::<f64>::init(small(), 3).unwrap();
    perturb_buffers(&mut model.params, 4);
    let inputs = random_inputs(4, 8, 5);
    let p = model.predict([&inputs[0], &inputs[1], &inputs[2]]).unwrap();
    let perm = [2, 0, 3, 1];
    let permuted = inputs.clone().map(|t| t.select(&perm));
    let q = model.predict([&permuted[0], &permuted[1], &permuted[2]]).unwrap();
    assert_eq!(q.logits, p.logits.select(&perm));
    for i in 0..3 {
        assert_eq!(q.sr[i], p.sr[i].select(&perm));
    }
    let dup = inputs.clone().map(|t| t.select(&[1, 1]));
    let d = model.predict([&dup[0], &dup[1], &dup[2]]).unwrap();
    assert_eq!(d.logits.sample(0), d.logits.sample(1));
    let again = model.predict([&inputs[0], &inputs[1], &inputs[2]]).unwrap();
    assert_eq!(again.logits, p.logits);
}

#[test]
fn init_is_deterministic_and_seeded() {
    let a = AfaModel::<f32>::init(small(), 7).unwrap();
    let b = AfaModel::<f32>::init(small(), 7).unwrap();
    let c = AfaModel::<f32>::init(small(), 8).unwrap();
    let same = a
        .params
        .iter()
        .zip(b.params.iter())
        .all(|(x, y)| x.1 == y.1 && x.3 == y.3);
    assert!(same);
    assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x.3 != y.3));
    for (_, name, _, t) in a.params.iter() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".gamma") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = ModelConfig {
        sr_resolution: 15,
        ..ModelConfig::default()
    };
    assert!(matches!(AfaModel::<f32>::init(cfg, 0), Err(crate::Error::Config(_))));
    let cfg = ModelConfig {
        branch_channels: vec![32, 0, 8],
        ..ModelConfig::default()
    };
    assert!(AfaModel::<f32>::init(cfg, 0).is_err());
}

fn enumerate_parameters(cfg: &ModelConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize, g: usize, bias: bool| o * (i / g) * k * k + if bias { o } else { 0 };
    let bn = |c: usize| 2 * c;
    let conv_bn = |i: usize, o: usize| conv(i, o, 3, 1, false) + bn(o);
    let block = |i: usize| {
        let mut c = i;
        let mut n = 0;
        for &o in &cfg.branch_channels {
            n += conv_bn(c, o);
            c = o;
        }
        n
    };
    let se = |c: usize| {
        let h = (c / cfg.se_reduction).max(1);
        c * h + h + h * c + c
    };
    let gcd = layers::gcd;
    let dam = |i: usize, o: usize| {
        let g = gcd(i, o);
        conv_bn(i, o)
            + conv_bn(o, o)
            + conv(i, g, 3, g, true)
            + conv(o, o, 1, 1, true)
            + if i != o { conv(i, o, 1, 1, true) } else { 0 }
    };
    let w = cfg.branch_channels[0];
    let c = *cfg.branch_channels.last().unwrap();
    let up = match cfg.upsample_mode {
        UpsampleMode::Nearest => 0,
        UpsampleMode::Transposed => w * w * 16 + w,
    };
    let mut total = 0;
    for m in Modality::ALL {
        let cm = m.channels();
        let shallow: usize = Modality::ALL.iter().map(|s| conv_bn(s.channels(), w) + dam(w, w)).sum();
        let mfam =
            shallow + se(3 * w) + conv(3 * w, w, 1, 1, true) + up + dam(w, w) + conv(w, cm, 3, 1, true) + block(cm);
        total += block(cm) + mfam + conv(2 * c, c, 1, 1, true) + dam(c, c) + conv_bn(c, c) + se(c) + se(c);
    }
    total + conv(3 * c, c, 1, 1, true) + 2 * dam(c, c) + (c * cfg.fc_hidden + cfg.fc_hidden) + (cfg.fc_hidden * 2 + 2)
}

/// Trainable parameter count of the default configuration.
const DEFAULT_PARAMETER_COUNT: usize = 3_068_431;

#[test]
fn parameter_count_matches_enumeration() {
    for cfg in [
        ModelConfig::default(),
        small(),
        ModelConfig {
            upsample_mode: UpsampleMode::Transposed,
            ..ModelConfig::default()
        },
    ] {
        let model = AfaModel::<f32>::init(cfg.clone(), 0).unwrap();
        assert_eq!(model.num_parameters(), enumerate_parameters(&cfg), "{cfg:?}");
    }
    let model = AfaModel::<f32>::init(ModelConfig::default(), 0).unwrap();
    assert_eq!(model.num_parameters(), DEFAULT_PARAMETER_COUNT);
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    let model = AfaModel::<f64>::init(small(), 2).unwrap();
    let inputs = random_inputs(4, 8, 3);
    let mut cx = Ctx::new(&model.params, Mode::Train);
    let vars = [0, 1, 2].map(|i| cx.input(inputs[i].clone()));
    let out = model.forward(&mut cx, vars);
    let lc = cx.tape.cross_entropy(out.logits, &[0, 1, 1, 0]);
    let mut terms = vec![lc];
    for (i, m) in Modality::ALL.iter().enumerate() {
        let target = random_tensor([4, m.channels(), 16, 16], 10 + i as u64);
        let l = cx.tape.masked_mse(out.sr[i], target, &[1.0; 4], 3.0);
        terms.push(cx.tape.scale(l, 1e-3));
    }
    let loss = terms[1..].iter().fold(terms[0], |acc, &t| cx.tape.add(acc, t));
    let grads = cx.tape.backward(loss);
    let mut seen = vec![false; model.params.len()];
    for (id, g) in grads.params() {
        assert!(g.is_finite(), "{}", model.params.name(id));
        if g.data().iter().any(|&v| v != 0.0) {
            seen[id] = true;
        }
    }
    for id in model.params.trainable_ids() {
        assert!(seen[id], "no gradient reaches {}", model.params.name(id));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = AfaModel::<f32>::init(
        ModelConfig {
            upsample_mode: UpsampleMode::Transposed,
            ..small()
        },
        4,
    )
    .unwrap();
    model.params.by_name_mut("rgb.fuse.bias").unwrap().data_mut()[0] = -0.0;
    let ck = Checkpoint::from_model(&model, serde_json::json!({"step": 3}));
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.meta["step"], 3);
    let restored = back.to_model().unwrap();
    for ((_, n1, _, a), (_, n2, _, b)) in model.params.iter().zip(restored.params.iter()) {
        assert_eq!(n1, n2);
        let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut wrong = bytes.clone();
    wrong[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&wrong),
        Err(crate::Error::Checkpoint(_))
    ));
}
