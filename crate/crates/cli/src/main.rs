use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use afa_core::afa_net::Checkpoint;
use afa_core::dataset_io::{generate_synthetic, load_manifest, make_manifest, write_manifest, SyntheticSpec};
use afa_core::depth_prep::{expand_bbox, normalize_depth, quantize_ir_uniform, DepthAlgorithm, FaceBox, RawDepthMap};
use afa_core::image::Image8;
use afa_core::objective_metrics::{evaluate, write_scores, Label, ScoreLine};
use afa_core::quality_degrade::{degrade, quality, DegradeSpec};
use afa_core::train_harness::{score_samples, visualize_mfam, TrainConfig, TrainState, Trainer};
use afa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "afa", version, about = "Multi-modal face anti-spoofing pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw depth map and crop the expanded face region from each given modality.
    Prep {
        #[arg(long, default_value = "alg2")]
        algo: String,
        #[arg(long, default_value_t = 1.3)]
        factor: f64,
        /// Face box as x,y,w,h.
        #[arg(long)]
        bbox: FaceBox,
        /// Raw depth (FASD tile or 16-bit PNG).
        #[arg(long)]
        depth: PathBuf,
        /// Optional 8-bit RGB frame aligned with the depth map.
        #[arg(long)]
        rgb: Option<PathBuf>,
        /// Optional raw IR (FASD tile or 16-bit PNG), quantized uniformly.
        #[arg(long)]
        ir: Option<PathBuf>,
        /// Output directory for depth.png, rgb.png, ir.png.
        #[arg(long)]
        out: PathBuf,
    },
    /// Resize (and optionally blur) an image.
    Degrade {
        #[arg(long)]
        res: usize,
        #[arg(long)]
        blur: bool,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 1.5)]
        sigma: f64,
        input: PathBuf,
        output: PathBuf,
    },
    /// Print PSNR and SSIM of a test image against a reference of the same size.
    Quality { reference: PathBuf, test: PathBuf },
    /// Train a model on a manifest directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory containing manifest.tsv (or a manifest file).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a dataset and write the score file and evaluation report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Key=value report; a JSON twin is written next to it with a .json extension.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Write bilinear / reconstruction / difference images for one sample.
    VizMfam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        /// Dataset directory containing manifest.tsv (or a manifest file).
        #[arg(long, default_value = ".")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic multi-modal dataset with its manifest.
    GenSynth {
        #[arg(long)]
        n_live: usize,
        #[arg(long)]
        n_spoof: usize,
        #[arg(long, default_value_t = 8)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a manifest from a ROOT/<label>/<attack_type>/<sample_id>/ tree.
    MakeManifest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "unknown")]
        camera_tag: String,
    },
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.tsv")
    } else {
        data.to_path_buf()
    }
}

fn prep(
    algo: &str,
    factor: f64,
    bbox: FaceBox,
    depth: &Path,
    rgb: Option<&Path>,
    ir: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let algo: DepthAlgorithm = algo.parse()?;
    let raw = RawDepthMap::load(depth)?;
    let dims = (raw.height(), raw.width());
    let portrait = expand_bbox(bbox, factor, dims)?;
    let (x, y, w, h) = (
        portrait.x as usize,
        portrait.y as usize,
        portrait.w as usize,
        portrait.h as usize,
    );
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let depth_img = normalize_depth(algo, &raw, bbox)?.to_image();
    depth_img.crop(x, y, w, h)?.save_png(out.join("depth.png"))?;
    if let Some(p) = rgb {
        let img = Image8::load_png(p)?;
        if img.dims() != dims {
            return Err(Error::Alignment(format!(
                "rgb is {:?}, depth is {dims:?} (height, width)",
                img.dims()
            )));
        }
        img.crop(x, y, w, h)?.save_png(out.join("rgb.png"))?;
    }
    if let Some(p) = ir {
        let raw_ir = RawDepthMap::load(p)?;
        if (raw_ir.height(), raw_ir.width()) != dims {
            return Err(Error::Alignment(format!(
                "ir is {:?}, depth is {dims:?} (height, width)",
                (raw_ir.height(), raw_ir.width())
            )));
        }
        quantize_ir_uniform(&raw_ir)?
            .crop(x, y, w, h)?
            .save_png(out.join("ir.png"))?;
    }
    println!("portrait={},{},{},{}", portrait.x, portrait.y, portrait.w, portrait.h);
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let manifest = load_manifest(&manifest_path(data))?;
    let samples = manifest.load_samples()?;
    let trainer = match resume {
        Some(p) => Trainer::with_state(
            cfg.clone(),
            &samples,
            TrainState::from_checkpoint(&Checkpoint::load(p)?)?,
        )?,
        None => Trainer::new(cfg.clone(), &samples)?,
    };
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::Io {
        path: cfg_path,
        source: e,
    })?;
    let mut trainer = trainer.with_run_dir(out)?;
    let records = trainer.run(None)?;
    if let Some(last) = records.last() {
        println!(
            "steps={} loss={:.6} checkpoint={}",
            trainer.state.step,
            last.loss.total,
            out.join("final.afac").display()
        );
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, scores: &Path, report: &Path, threshold: f64, batch_size: usize) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let manifest = load_manifest(&manifest_path(data))?;
    let samples = manifest.load_samples()?;
    let s = score_samples(&model, &samples, batch_size)?;
    let lines: Vec<ScoreLine> = samples
        .iter()
        .zip(&s)
        .map(|(x, &score)| ScoreLine {
            sample_id: x.sample_id.clone(),
            label: x.label,
            score,
        })
        .collect();
    write_scores(scores, &lines)?;
    let labels: Vec<Label> = samples.iter().map(|x| x.label).collect();
    let r = evaluate(&s, &labels, threshold)?;
    let text = r.to_text();
    fs::write(report, &text).map_err(|e| Error::Io {
        path: report.to_path_buf(),
        source: e,
    })?;
    let json = report.with_extension("json");
    fs::write(&json, r.to_json()).map_err(|e| Error::Io { path: json, source: e })?;
    print!("{text}");
    Ok(())
}

fn viz(checkpoint: &Path, sample: &str, data: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let manifest = load_manifest(&manifest_path(data))?;
    let entry = manifest
        .find(sample)
        .ok_or_else(|| Error::InvalidArgument(format!("sample `{sample}` is not in the manifest")))?;
    let s = entry.load(&manifest.root)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for v in visualize_mfam(&model, &s)? {
        let m = v.modality;
        v.bilinear.save_png(out.join(format!("{m}_bilinear.png")))?;
        v.reconstruction.save_png(out.join(format!("{m}_sr.png")))?;
        v.difference.save_png(out.join(format!("{m}_diff.png")))?;
        println!("{m} mean_abs_diff={:.4}", v.mean_abs_difference);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep {
            algo,
            factor,
            bbox,
            depth,
            rgb,
            ir,
            out,
        } => prep(&algo, factor, bbox, &depth, rgb.as_deref(), ir.as_deref(), &out),
        Command::Degrade {
            res,
            blur,
            kernel,
            sigma,
            input,
            output,
        } => {
            let spec = DegradeSpec {
                target_resolution: res,
                blur_enabled: blur,
                kernel_size: kernel,
                sigma,
            };
            degrade(&Image8::load_png(&input)?, &spec)?.save_png(&output)
        }
        Command::Quality { reference, test } => {
            let q = quality(&Image8::load_png(&reference)?, &Image8::load_png(&test)?)?;
            println!("psnr={:.4} ssim={:.4}", q.psnr_db, q.ssim);
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(&config, &data, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            scores,
            report,
            threshold,
            batch_size,
        } => eval(&checkpoint, &data, &scores, &report, threshold, batch_size),
        Command::VizMfam {
            checkpoint,
            sample,
            data,
            out,
        } => viz(&checkpoint, &sample, &data, &out),
        Command::GenSynth {
            n_live,
            n_spoof,
            res,
            seed,
            out,
        } => {
            let path = generate_synthetic(&SyntheticSpec::new(n_live, n_spoof, res, seed), &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::MakeManifest { root, out, camera_tag } => {
            let entries = make_manifest(&root, &camera_tag)?;
            // paths in the manifest are relative to its own directory
            let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let prefix = relative_prefix(&root, &out_dir);
            let entries: Vec<_> = entries
                .into_iter()
                .map(|mut e| {
                    for p in e.inputs.iter_mut().chain(e.ground_truth.iter_mut()) {
                        *p = prefix.join(&*p);
                    }
                    e
                })
                .collect();
            write_manifest(&out, &entries)?;
            println!("{} entries", entries.len());
            Ok(())
        }
    }
}

/// Path of `root` as seen from `from`, falling back to an absolute path when unrelated.
fn relative_prefix(root: &Path, from: &Path) -> PathBuf {
    let abs = |p: &Path| {
        fs::canonicalize(if p.as_os_str().is_empty() { Path::new(".") } else { p }).unwrap_or_else(|_| p.to_path_buf())
    };
    let (root, from) = (abs(root), abs(from));
    match root.strip_prefix(&from) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => root,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
