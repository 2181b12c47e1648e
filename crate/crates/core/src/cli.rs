//! Command-line surface: `synth`, `rasterize`, `pretrain-attention`,
//! `train`, `eval`, and `infer`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing or
//! malformed inputs), 3 runtime failure.

use std::fs;
use std::path::PathBuf;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use crate::data::{self, Split};
use crate::img::ImagePlane;
use crate::network::{Model, NetworkConfig};
use crate::nn::Init;
use crate::trainer::{self, TrainConfig, TrainOptions};
use crate::{checkpoint, metrics, Error, Result};

#[derive(Parser)]
#[command(
    name = "hadeblur",
    about = "Human-aware motion deblurring: train, evaluate, and run the attentive multi-scale model",
    version
)]
struct Cli {
    /// Seed for all random choices (overrides the config file's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Strict-deterministic mode: identical inputs, flags, and seed give
    /// byte-identical outputs.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct NetArgs {
    /// Encoder width at the finest level (doubled at each reduction).
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    /// Residual units in the encoder (multiple of 3).
    #[arg(long, default_value_t = 9)]
    residual_units: usize,
    /// Pyramid depth of the multi-scale wrapper.
    #[arg(long, default_value_t = 3)]
    scales: usize,
    /// Ablation: drop the attention subnet (domain branches see ungated
    /// features).
    #[arg(long)]
    no_attention: bool,
    /// Ablation: run only the primary decoder, no FG/BG branches.
    #[arg(long)]
    single_branch: bool,
    /// Predict a residual over the blurred input instead of the image.
    #[arg(long)]
    predict_residual: bool,
}

impl NetArgs {
    fn to_config(&self) -> NetworkConfig {
        NetworkConfig {
            base_channels: self.base_channels,
            n_residual_units: self.residual_units,
            scales: self.scales,
            use_attention: !self.no_attention,
            fuse_branches: !self.single_branch,
            predict_residual: self.predict_residual,
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Average windows of sequential frames into blurred/sharp pairs.
    Synth {
        /// Directory of sequential PNG frames (sorted by name).
        #[arg(long)]
        frames: PathBuf,
        /// Frames per window (odd, >= 3).
        #[arg(long, default_value_t = 11)]
        window: usize,
        /// Window stride; defaults to the window size (disjoint windows).
        #[arg(long)]
        stride: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize annotation files into binary mask PNGs.
    Rasterize {
        /// Directory of annotation JSON records.
        #[arg(long)]
        annotations: PathBuf,
        /// Output directory for mask PNGs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised pretraining of the attention subnet.
    PretrainAttention {
        /// Dataset root (train/test layout).
        #[arg(long)]
        data: PathBuf,
        /// key=value training config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's pretrain iteration count.
        #[arg(long)]
        iters: Option<usize>,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Train the full deblurring model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from a pretrained-attention (or full) checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Resume a run: restores parameters, optimizer state, and the
        /// step counter.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train without pretrained attention (joint from scratch).
        #[arg(long)]
        from_scratch: bool,
        /// Keep attention parameters frozen.
        #[arg(long)]
        freeze_attention: bool,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Evaluate a checkpoint over the test split; writes the CSV report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Score the ground-truth sharp images as the prediction
        /// (metric-path check; emits only inf/1.0 rows).
        #[arg(long)]
        identity: bool,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Which split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Deblur a single image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the attention map as an 8-bit grayscale PNG next to
        /// the output (suffix `.attention.png`).
        #[arg(long)]
        save_attention: bool,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::MissingSplit(_)
        | Error::NameMismatch(_)
        | Error::MalformedAnnotation { .. }
        | Error::Image { .. }
        | Error::Io(_) => 2,
        _ => 3,
    }
}

fn run_command(cli: Cli) -> Result<()> {
    let device = Device::Cpu;
    match cli.command {
        Command::Synth {
            frames,
            window,
            stride,
            out,
        } => {
            let mut names: Vec<PathBuf> = fs::read_dir(&frames)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| {
                    p.extension()
                        .map(|e| e.eq_ignore_ascii_case("png"))
                        .unwrap_or(false)
                })
                .collect();
            names.sort();
            if names.len() < window {
                return Err(Error::arg(format!(
                    "need at least {window} frames, found {}",
                    names.len()
                )));
            }
            fs::create_dir_all(&out)?;
            let stride = stride.unwrap_or(window);
            if stride == 0 {
                return Err(Error::arg("stride must be positive"));
            }
            let starts: Vec<usize> = (0..=(names.len() - window)).step_by(stride).collect();
            for (i, &start) in starts.iter().enumerate() {
                let frames: Vec<ImagePlane> = names[start..start + window]
                    .iter()
                    .map(|p| ImagePlane::load_png(p))
                    .collect::<Result<_>>()?;
                let (blurred, sharp) = data::synthesize_blur(&frames)?;
                let (bname, sname) = if starts.len() == 1 {
                    ("blur.png".to_string(), "sharp.png".to_string())
                } else {
                    (format!("blur_{i:04}.png"), format!("sharp_{i:04}.png"))
                };
                blurred.save_png(&out.join(bname))?;
                sharp.save_png(&out.join(sname))?;
            }
            Ok(())
        }
        Command::Rasterize { annotations, out } => {
            fs::create_dir_all(&out)?;
            let mut paths: Vec<PathBuf> = fs::read_dir(&annotations)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
                .collect();
            paths.sort();
            for path in paths {
                let text = fs::read_to_string(&path)?;
                let record: data::AnnotationRecord =
                    serde_json::from_str(&text).map_err(|e| Error::MalformedAnnotation {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?;
                let boxes: Vec<data::BoundingBox> = record
                    .boxes
                    .iter()
                    .map(|&[x0, y0, x1, y1]| data::BoundingBox::new(x0, y0, x1, y1))
                    .collect();
                let mask = data::rasterize_mask(&boxes, record.width, record.height)?;
                let name = PathBuf::from(&record.image).with_extension("png");
                mask.to_image().save_png(&out.join(name))?;
            }
            Ok(())
        }
        Command::PretrainAttention {
            data: root,
            config,
            iters,
            out,
            checkpoint_every,
            net,
        } => {
            let mut cfg = load_train_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let samples = data::load_dataset(&root, Split::Train)?;
            let model = Model::new(net.to_config(), &device, Init::FanInNormal, cfg.seed)?;
            let iters = iters.unwrap_or(cfg.pretrain_iters);
            let opts = TrainOptions {
                out_dir: Some(out),
                checkpoint_every,
                verbose: true,
                ..Default::default()
            };
            let report = trainer::pretrain_attention(&model, &samples, &cfg, iters, &opts)?;
            eprintln!(
                "pretraining done: {} steps, final l_att={:.6}",
                report.steps, report.final_loss
            );
            Ok(())
        }
        Command::Train {
            data: root,
            config,
            out,
            init_from,
            resume,
            from_scratch,
            freeze_attention,
            max_steps,
            checkpoint_every,
            net,
        } => {
            let mut cfg = load_train_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let net_cfg = net.to_config();
            if init_from.is_none() && resume.is_none() && !from_scratch && net_cfg.use_attention {
                return Err(Error::Config(
                    "no pretrained attention given; pass --init-from <ckpt> or opt in with --from-scratch"
                        .into(),
                ));
            }
            let samples = data::load_dataset(&root, Split::Train)?;
            let model = Model::new(net_cfg.clone(), &device, Init::FanInNormal, cfg.seed)?;
            if let Some(init) = &init_from {
                let (init_model, _, _) = checkpoint::load_model(init, &device, Some(&net_cfg))?;
                let values: std::collections::HashMap<String, candle_core::Tensor> = init_model
                    .store()
                    .named()
                    .iter()
                    .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
                    .collect();
                model.store().load_values(&values)?;
            }
            let opts = TrainOptions {
                out_dir: Some(out),
                checkpoint_every,
                max_steps,
                freeze_attention,
                resume,
                verbose: true,
            };
            let report = trainer::train(&model, &samples, &cfg, &opts)?;
            eprintln!(
                "training done: {} steps, loss {:.6} -> {:.6}",
                report.steps, report.first_loss, report.final_loss
            );
            Ok(())
        }
        Command::Eval {
            data: root,
            ckpt,
            identity,
            out,
            split,
        } => {
            let split: Split = split.parse()?;
            let samples = data::load_dataset(&root, split)?;
            let rows = if identity {
                trainer::evaluate_with(&samples, |s| Ok(s.sharp.clone()))?
            } else {
                let ckpt = ckpt.ok_or_else(|| {
                    Error::Config("eval needs --ckpt (or --identity)".into())
                })?;
                let (model, _, _) = checkpoint::load_model(&ckpt, &device, None)?;
                trainer::evaluate_model(&model, &samples)?
            };
            fs::write(&out, metrics::csv_report(&rows))?;
            Ok(())
        }
        Command::Infer {
            ckpt,
            input,
            output,
            save_attention,
        } => {
            let (model, _, _) = checkpoint::load_model(&ckpt, &device, None)?;
            let blurred = ImagePlane::load_png(&input)?;
            let (restored, attention) = trainer::infer(&model, &blurred)?;
            restored.save_png(&output)?;
            if save_attention {
                match attention {
                    Some(a) => {
                        let path = output.with_extension("attention.png");
                        a.save_png(&path)?;
                    }
                    None => eprintln!("model has no attention subnet; skipping attention map"),
                }
            }
            Ok(())
        }
    }
}

fn load_train_config(path: Option<&std::path::Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p),
        None => Ok(TrainConfig::default()),
    }
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successful exits
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
