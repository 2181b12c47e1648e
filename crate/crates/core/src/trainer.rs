//! Training: attention pretraining, the main optimization loop with
//! balanced mini-batches, checkpointing, and evaluation.
//!
//! Mini-batches mix FG-constrained crops (taken from samples that carry
//! boxes) with unconstrained crops at a configurable fraction. Samples
//! without boxes have an all-zero mask, so their FG loss term vanishes and
//! they train the BG decoder only.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::{build_mask_pyramid, sample_patch, AnnotatedSample};
use crate::img::{BinaryMask, ImagePlane};
use crate::losses::{total_loss, LossWeights};
use crate::metrics::{region_metrics, MetricReport};
use crate::network::Model;
use crate::nn::Adam;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub pretrain_iters: usize,
    pub epochs: usize,
    pub w_attention: f64,
    pub w_fg: f64,
    pub w_bg: f64,
    pub w_primary: f64,
    pub fg_batch_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 10,
            crop: 256,
            pretrain_iters: 70_000,
            epochs: 500,
            w_attention: 1.0,
            w_fg: 1.0,
            w_bg: 1.0,
            w_primary: 1.0,
            fg_batch_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.crop == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size, crop, and epochs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.fg_batch_fraction) {
            return Err(Error::Config("fg_batch_fraction must be in [0,1]".into()));
        }
        if self.w_attention < 0.0 || self.w_fg < 0.0 || self.w_bg < 0.0 || self.w_primary < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            attention: self.w_attention,
            fg: self.w_fg,
            bg: self.w_bg,
            primary: self.w_primary,
        }
    }

    /// Parse the flat `key=value` config format. Unknown keys are errors;
    /// missing keys keep their defaults. Lines that are empty or start
    /// with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Config(format!("line {}: {key}: {e}", lineno + 1));
            match key {
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "crop" => cfg.crop = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "pretrain_iters" => cfg.pretrain_iters = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "epochs" => cfg.epochs = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "w_attention" => cfg.w_attention = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "w_fg" => cfg.w_fg = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "w_bg" => cfg.w_bg = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "w_primary" => cfg.w_primary = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "fg_batch_fraction" => cfg.fg_batch_fraction = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "seed" => cfg.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// One assembled mini-batch: finest-scale blurred input plus coarse-to-fine
/// sharp and mask pyramids.
pub struct Batch {
    pub blurred: Tensor,
    pub sharp_pyramid: Vec<Tensor>,
    pub mask_pyramid: Vec<Tensor>,
}

/// Draw a balanced mini-batch of crops.
pub fn sample_batch(
    samples: &[AnnotatedSample],
    cfg: &TrainConfig,
    scales: usize,
    rng: &mut ChaCha8Rng,
    device: &candle_core::Device,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::arg("empty dataset"));
    }
    let boxed: Vec<usize> = (0..samples.len())
        .filter(|&i| !samples[i].boxes.is_empty())
        .collect();
    let mut n_fg = (cfg.batch_size as f64 * cfg.fg_batch_fraction).round() as usize;
    if boxed.is_empty() {
        n_fg = 0;
    }
    let mut blur_t = Vec::with_capacity(cfg.batch_size);
    let mut sharp_planes = Vec::with_capacity(cfg.batch_size);
    let mut mask_planes: Vec<BinaryMask> = Vec::with_capacity(cfg.batch_size);
    for i in 0..cfg.batch_size {
        let require_fg = i < n_fg;
        let idx = if require_fg {
            boxed[rng.gen_range(0..boxed.len())]
        } else {
            rng.gen_range(0..samples.len())
        };
        let (blur, sharp, mask) = sample_patch(&samples[idx], cfg.crop, rng, require_fg)?;
        blur_t.push(blur.to_tensor(device)?);
        sharp_planes.push(sharp);
        mask_planes.push(mask);
    }
    let blurred = Tensor::cat(&blur_t, 0)?;
    // sharp pyramid by area averaging, mask pyramid by block thresholding
    let mut sharp_pyramid = Vec::with_capacity(scales);
    let mut mask_pyramid = Vec::with_capacity(scales);
    let sharp_t: Vec<Tensor> = sharp_planes
        .iter()
        .map(|p| p.to_tensor(device))
        .collect::<Result<_>>()?;
    let sharp_full = Tensor::cat(&sharp_t, 0)?;
    for s in 0..scales {
        let factor = 1usize << (scales - 1 - s);
        sharp_pyramid.push(if factor == 1 {
            sharp_full.clone()
        } else {
            sharp_full.avg_pool2d(factor)?
        });
        let level_masks: Vec<Tensor> = mask_planes
            .iter()
            .map(|m| {
                let levels = build_mask_pyramid(m, scales)?;
                levels[s].to_tensor(device)
            })
            .collect::<Result<_>>()?;
        mask_pyramid.push(Tensor::cat(&level_masks, 0)?);
    }
    Ok(Batch {
        blurred,
        sharp_pyramid,
        mask_pyramid,
    })
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the training log go; nothing is written when
    /// unset.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint every N steps (0 = only at the end, and only with an
    /// out_dir).
    pub checkpoint_every: usize,
    /// Hard cap on optimization steps, overriding epochs * steps_per_epoch.
    pub max_steps: Option<usize>,
    /// Keep attention parameters fixed during the main phase.
    pub freeze_attention: bool,
    /// Resume parameters, optimizer state, and step counter from this
    /// checkpoint.
    pub resume: Option<PathBuf>,
    /// Echo log lines to stderr.
    pub verbose: bool,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

struct TrainLogger {
    file: Option<fs::File>,
    verbose: bool,
}

impl TrainLogger {
    fn new(out_dir: Option<&Path>, name: &str, verbose: bool) -> Result<Self> {
        let file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(fs::File::create(dir.join(name))?)
            }
            None => None,
        };
        Ok(Self { file, verbose })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{text}")?;
        }
        if self.verbose {
            eprintln!("{text}");
        }
        Ok(())
    }
}

/// Supervise the attention subnet alone: crops of (blurred, mask), l2 loss
/// on the predicted map, Adam at the configured rate. Zero iterations
/// return the model untouched.
pub fn pretrain_attention(
    model: &Model,
    samples: &[AnnotatedSample],
    cfg: &TrainConfig,
    iters: usize,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::arg("empty dataset"));
    }
    let mut logger = TrainLogger::new(opts.out_dir.as_deref(), "pretrain.log", opts.verbose)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.attention_params(), cfg.learning_rate)?;
    let mut history = Vec::with_capacity(iters);
    let mut checkpoints = Vec::new();
    let device = model.device().clone();
    for step in 1..=iters {
        let batch = sample_batch(samples, cfg, 1, &mut rng, &device)?;
        let out = model.attention_forward(&batch.blurred)?;
        let loss = crate::attention::attention_loss(&out.map, &batch.mask_pyramid[0])?;
        let value = loss.to_scalar::<f32>()? as f64;
        let grads = loss.backward()?;
        opt.step(&grads)?;
        history.push(value);
        logger.line(&format!("step={step} l_att={value:.6}"))?;
        if let Some(dir) = &opts.out_dir {
            let at_interval = opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0;
            if at_interval || step == iters {
                let path = dir.join(format!("attention_{step:07}.ckpt"));
                checkpoint::save_model(&path, model, step as u64, Some(value), None)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainReport {
        steps: iters,
        first_loss: history.first().copied().unwrap_or(0.0),
        final_loss: history.last().copied().unwrap_or(0.0),
        loss_history: history,
        checkpoints,
    })
}

/// The main loop: balanced batches, combined per-scale objective, Adam,
/// periodic checkpoints with optimizer state.
pub fn train(
    model: &Model,
    samples: &[AnnotatedSample],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::arg("empty dataset"));
    }
    let div = model.config.input_divisor();
    if cfg.crop % div != 0 {
        return Err(Error::Config(format!(
            "crop {} must be divisible by {div} for {} scales",
            cfg.crop, model.config.scales
        )));
    }
    let params = if opts.freeze_attention {
        model.non_attention_params()
    } else {
        model.store().named_vars()
    };
    let mut opt = Adam::new(params, cfg.learning_rate)?;
    let mut start_step = 0usize;
    if let Some(resume) = &opts.resume {
        let (meta, tensors) = checkpoint::load(resume, model.device())?;
        if meta.config != model.config {
            return Err(Error::ConfigMismatch(format!(
                "resume checkpoint {} does not match the model config",
                resume.display()
            )));
        }
        let params: std::collections::HashMap<String, Tensor> = tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("opt."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        model.store().load_values(&params)?;
        if tensors.keys().any(|n| n.starts_with("opt.")) {
            opt.load_state(&tensors, meta.iteration as usize)?;
        }
        start_step = meta.iteration as usize;
    }

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs.saturating_mul(steps_per_epoch);
    if let Some(cap) = opts.max_steps {
        total_steps = total_steps.min(cap);
    }

    let mut logger = TrainLogger::new(opts.out_dir.as_deref(), "train.log", opts.verbose)?;
    // offset the stream so resumed runs do not replay the same batches
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(start_step as u64));
    let weights = cfg.weights();
    let scales = model.config.scales;
    let device = model.device().clone();
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    for step in (start_step + 1)..=(start_step + total_steps) {
        let batch = sample_batch(samples, cfg, scales, &mut rng, &device)?;
        let outputs = model.forward_full(&batch.blurred)?;
        let breakdown = total_loss(&outputs, &batch.sharp_pyramid, &batch.mask_pyramid, &weights)?;
        let grads = breakdown.total.backward()?;
        opt.step(&grads)?;
        history.push(breakdown.total_value);
        logger.line(&breakdown.log_line(step))?;
        if let Some(dir) = &opts.out_dir {
            let at_interval = opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0;
            if at_interval || step == start_step + total_steps {
                let path = dir.join(format!("model_{step:07}.ckpt"));
                checkpoint::save_model(&path, model, step as u64, Some(breakdown.total_value), Some(&opt))?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainReport {
        steps: total_steps,
        first_loss: history.first().copied().unwrap_or(0.0),
        final_loss: history.last().copied().unwrap_or(0.0),
        loss_history: history,
        checkpoints,
    })
}

/// Deblur one image: pad to the model's required divisor, take the
/// finest-scale primary output, crop back. Returns the restored image
/// (unclipped) and the attention map when the model has one.
pub fn infer(model: &Model, blurred: &ImagePlane) -> Result<(ImagePlane, Option<ImagePlane>)> {
    let div = model.config.input_divisor();
    let (w, h) = (blurred.width, blurred.height);
    let pad_w = (div - w % div) % div;
    let pad_h = (div - h % div) % div;
    let mut x = blurred.to_tensor(model.device())?;
    if pad_w > 0 {
        x = x.pad_with_zeros(3, 0, pad_w)?;
    }
    if pad_h > 0 {
        x = x.pad_with_zeros(2, 0, pad_h)?;
    }
    let outputs = model.forward_full(&x)?;
    let finest = outputs.last().expect("at least one scale");
    let restored = finest.s_pri.narrow(2, 0, h)?.narrow(3, 0, w)?;
    let attention = match &finest.attention {
        Some(a) => Some(ImagePlane::from_tensor(&a.narrow(2, 0, h)?.narrow(3, 0, w)?)?),
        None => None,
    };
    Ok((ImagePlane::from_tensor(&restored)?, attention))
}

/// Per-image metric rows for an evaluation set: a global row (PSNR+SSIM)
/// always, FG/BG region rows when the sample has boxes. Predictions are
/// clipped to [0,1] before scoring.
pub fn evaluate_with(
    samples: &[AnnotatedSample],
    mut predict: impl FnMut(&AnnotatedSample) -> Result<ImagePlane>,
) -> Result<Vec<(String, MetricReport)>> {
    let mut rows = Vec::new();
    for sample in samples {
        let prediction = predict(sample)?.clipped();
        let (fg, bg, global) = region_metrics(&prediction, &sample.sharp, &sample.mask)?;
        rows.push((sample.source_id.clone(), global));
        if !sample.boxes.is_empty() {
            if let Some(fg) = fg {
                rows.push((sample.source_id.clone(), fg));
            }
            if let Some(bg) = bg {
                rows.push((sample.source_id.clone(), bg));
            }
        }
    }
    Ok(rows)
}

pub fn evaluate_model(
    model: &Model,
    samples: &[AnnotatedSample],
) -> Result<Vec<(String, MetricReport)>> {
    evaluate_with(samples, |sample| Ok(infer(model, &sample.blurred)?.0))
}
