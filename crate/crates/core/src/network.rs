//! The full forward model: residual encoder, triple-branch decoder with
//! deep fusion, and the weight-shared multi-scale wrapper.
//!
//! Encoder: an initial 5x5 convolution, then three groups of residual
//! units at channel widths `base -> 2*base -> 4*base`, with a stride-2
//! 5x5 reduction convolution between groups. The feature `H` sits at 1/4
//! resolution. Each decoder branch mirrors this: residual units per level,
//! 4x4 stride-2 transposed convolutions to upsample, a final 5x5
//! convolution to 3 channels, and additive encoder shortcuts at matching
//! resolutions. The primary branch consumes the concatenation of all three
//! branches' previous-level features through a 1x1 compression layer.
//!
//! One parameter set serves every scale: the coarsest scale sees the image
//! concatenated with itself, finer scales see the image concatenated with
//! the upsampled previous estimate (a learned 4x4 transposed convolution).

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{gate_features, AttentionNet, DEFAULT_ATTENTION_WIDTHS};
use crate::nn::{Conv2d, ConvTranspose2d, Init, ParamStore, ResidualUnit};
use crate::{Error, Result};

/// Number of resolution levels in the encoder/decoders (two stride-2
/// reductions). The decoder block count must match for symmetry.
pub const LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub n_residual_units: usize,
    pub decoder_blocks: usize,
    pub scales: usize,
    pub input_channels: usize,
    pub use_attention: bool,
    /// When false, only the primary decoder runs (single-branch ablation).
    pub fuse_branches: bool,
    /// When true, decoders predict a residual added to the scale's input
    /// image instead of the sharp image directly.
    pub predict_residual: bool,
    pub attention_widths: [usize; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            n_residual_units: 9,
            decoder_blocks: LEVELS,
            scales: 3,
            input_channels: 6,
            use_attention: true,
            fuse_branches: true,
            predict_residual: false,
            attention_widths: DEFAULT_ATTENTION_WIDTHS,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::arg("base_channels must be positive"));
        }
        if self.n_residual_units == 0 || self.n_residual_units % LEVELS != 0 {
            return Err(Error::arg(format!(
                "n_residual_units must be a positive multiple of {LEVELS}"
            )));
        }
        if self.decoder_blocks != LEVELS {
            return Err(Error::arg(format!(
                "decoder_blocks must equal the encoder depth ({LEVELS})"
            )));
        }
        if self.scales == 0 {
            return Err(Error::arg("scales must be >= 1"));
        }
        if self.input_channels != 6 {
            return Err(Error::arg(
                "input_channels must be 6 (image concatenated with previous estimate)",
            ));
        }
        Ok(())
    }

    /// Channel width at each resolution level, finest first.
    fn widths(&self) -> [usize; LEVELS] {
        [
            self.base_channels,
            self.base_channels * 2,
            self.base_channels * 4,
        ]
    }

    /// Required divisor of the finest image dimensions: pyramid halvings
    /// plus the attention subnet's three x2 poolings.
    pub fn input_divisor(&self) -> usize {
        (1 << (self.scales - 1)) * 8
    }
}

struct Encoder {
    init_conv: Conv2d,
    groups: Vec<Vec<ResidualUnit>>,
    reductions: Vec<Conv2d>,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &NetworkConfig) -> Result<Self> {
        let widths = cfg.widths();
        let per_group = cfg.n_residual_units / LEVELS;
        let init_conv = store.conv2d("encoder.init", cfg.input_channels, widths[0], 5, 1)?;
        let mut groups = Vec::new();
        let mut reductions = Vec::new();
        for level in 0..LEVELS {
            let mut units = Vec::new();
            for u in 0..per_group {
                units.push(ResidualUnit::new(
                    store,
                    &format!("encoder.level{level}.res{u}"),
                    widths[level],
                )?);
            }
            groups.push(units);
            if level + 1 < LEVELS {
                reductions.push(store.conv2d(
                    &format!("encoder.reduce{level}"),
                    widths[level],
                    widths[level + 1],
                    5,
                    2,
                )?);
            }
        }
        Ok(Self {
            init_conv,
            groups,
            reductions,
        })
    }

    /// Returns `H` (1/4 resolution, 4*base channels) and the pre-reduction
    /// feature at each resolution level, finest first. The last skip is `H`
    /// itself.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (_, c, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::arg(format!(
                "encoder input {w}x{h} must be divisible by 4"
            )));
        }
        let expected = self.init_conv.w.dims()[1];
        if c != expected {
            return Err(Error::dims(format!(
                "encoder expects {expected} input channels, got {c}"
            )));
        }
        let mut feat = self.init_conv.forward(x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            for unit in &self.groups[level] {
                feat = unit.forward(&feat)?;
            }
            skips.push(feat.clone());
            if level + 1 < LEVELS {
                feat = self.reductions[level].forward(&feat)?;
            }
        }
        Ok((feat, skips))
    }
}

struct DecoderBlock {
    units: Vec<ResidualUnit>,
    /// Transposed-conv upsampler for inner blocks, final 5x5 conv to 3
    /// channels for the last block.
    up: Option<ConvTranspose2d>,
    final_conv: Option<Conv2d>,
}

impl DecoderBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut feat = x.clone();
        for unit in &self.units {
            feat = unit.forward(&feat)?;
        }
        if let Some(up) = &self.up {
            feat = up.forward(&feat)?.relu()?;
        }
        if let Some(conv) = &self.final_conv {
            feat = conv.forward(&feat)?;
        }
        Ok(feat)
    }
}

struct DecoderBranch {
    blocks: Vec<DecoderBlock>,
}

impl DecoderBranch {
    fn new(store: &mut ParamStore, cfg: &NetworkConfig, name: &str) -> Result<Self> {
        let widths = cfg.widths();
        let per_group = cfg.n_residual_units / LEVELS;
        let mut blocks = Vec::new();
        for block in 0..cfg.decoder_blocks {
            let level = LEVELS - 1 - block; // coarse to fine
            let mut units = Vec::new();
            for u in 0..per_group {
                units.push(ResidualUnit::new(
                    store,
                    &format!("{name}.block{block}.res{u}"),
                    widths[level],
                )?);
            }
            let (up, final_conv) = if level > 0 {
                (
                    Some(store.conv_transpose2d(
                        &format!("{name}.block{block}.up"),
                        widths[level],
                        widths[level - 1],
                        4,
                        2,
                    )?),
                    None,
                )
            } else {
                (
                    None,
                    Some(store.conv2d(&format!("{name}.block{block}.out"), widths[0], 3, 5, 1)?),
                )
            };
            blocks.push(DecoderBlock {
                units,
                up,
                final_conv,
            });
        }
        Ok(Self { blocks })
    }

    /// Input feature to block `l` (1-based), given the previous block's
    /// output: adds the encoder shortcut at matching resolutions.
    fn block_input(&self, l: usize, prev: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        if l == 1 {
            Ok(prev.clone())
        } else {
            // prev left block l-1 at resolution level LEVELS - l
            Ok((prev + &skips[LEVELS - l])?)
        }
    }

    /// Plain (non-fused) decode. Returns the restored image and the
    /// intermediates `D^0..D^L` with `D^0` the input feature.
    fn forward(&self, h: &Tensor, skips: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut intermediates = vec![h.clone()];
        let mut prev = h.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let input = self.block_input(i + 1, &prev, skips)?;
            prev = block.forward(&input)?;
            intermediates.push(prev.clone());
        }
        Ok((prev, intermediates))
    }
}

/// Per-scale forward outputs, coarse to fine.
pub struct ScaleOutput {
    /// Primary-branch restored image at this scale's resolution.
    pub s_pri: Tensor,
    pub s_fg: Option<Tensor>,
    pub s_bg: Option<Tensor>,
    /// Attention map at this scale's image resolution, in (0,1).
    pub attention: Option<Tensor>,
}

pub struct Model {
    pub config: NetworkConfig,
    store: ParamStore,
    attention: AttentionNet,
    encoder: Encoder,
    dec_fg: DecoderBranch,
    dec_bg: DecoderBranch,
    dec_pri: DecoderBranch,
    /// 1x1 compression layers, one per primary block.
    fusion: Vec<Conv2d>,
    /// Learned x2 upsampler carrying the previous scale's estimate.
    estimate_up: ConvTranspose2d,
}

impl Model {
    /// Build with fresh parameters. The parameter set is identical for any
    /// `scales` value: every scale reuses the same weights.
    pub fn new(config: NetworkConfig, device: &Device, init: Init, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(device.clone(), init, seed);
        let attention = AttentionNet::new(&mut store, config.attention_widths)?;
        let encoder = Encoder::new(&mut store, &config)?;
        let dec_fg = DecoderBranch::new(&mut store, &config, "decoder.fg")?;
        let dec_bg = DecoderBranch::new(&mut store, &config, "decoder.bg")?;
        let dec_pri = DecoderBranch::new(&mut store, &config, "decoder.pri")?;
        let widths = config.widths();
        let mut fusion = Vec::new();
        for block in 0..config.decoder_blocks {
            let c = widths[LEVELS - 1 - block];
            fusion.push(store.conv2d(&format!("fusion.block{block}"), 3 * c, c, 1, 1)?);
        }
        let estimate_up = store.conv_transpose2d("estimate_up", 3, 3, 4, 2)?;
        Ok(Self {
            config,
            store,
            attention,
            encoder,
            dec_fg,
            dec_bg,
            dec_pri,
            fusion,
            estimate_up,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Named parameters whose names start with `attention.`.
    pub fn attention_params(&self) -> Vec<(String, candle_core::Var)> {
        self.store
            .named()
            .iter()
            .filter(|(n, _)| n.starts_with("attention."))
            .cloned()
            .collect()
    }

    pub fn non_attention_params(&self) -> Vec<(String, candle_core::Var)> {
        self.store
            .named()
            .iter()
            .filter(|(n, _)| !n.starts_with("attention."))
            .cloned()
            .collect()
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.encoder.forward(x)
    }

    /// Run the attention subnet alone on a (N, 3, H, W) image batch.
    pub fn attention_forward(&self, image: &Tensor) -> Result<crate::attention::AttentionMap> {
        self.attention.forward(image)
    }

    pub fn decode_fg(&self, h_fg: &Tensor, skips: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        self.dec_fg.forward(h_fg, skips)
    }

    pub fn decode_bg(&self, h_bg: &Tensor, skips: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        self.dec_bg.forward(h_bg, skips)
    }

    /// Plain primary decode, used by the single-branch ablation.
    pub fn decode_primary_plain(&self, h: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        Ok(self.dec_pri.forward(h, skips)?.0)
    }

    /// Fused primary decode: block `l` consumes the concatenation of the
    /// three branches' level `l-1` features through a 1x1 compression.
    pub fn decode_primary(
        &self,
        h: &Tensor,
        fg_intermediates: &[Tensor],
        bg_intermediates: &[Tensor],
        skips: &[Tensor],
    ) -> Result<Tensor> {
        let blocks = self.dec_pri.blocks.len();
        if fg_intermediates.len() != blocks + 1 || bg_intermediates.len() != blocks + 1 {
            return Err(Error::dims(
                "branch intermediates do not align with the primary decoder depth",
            ));
        }
        let mut prev = h.clone();
        for (i, block) in self.dec_pri.blocks.iter().enumerate() {
            let fused = Tensor::cat(&[&fg_intermediates[i], &bg_intermediates[i], &prev], 1)?;
            let compressed = self.fusion[i].forward(&fused)?;
            let input = self.dec_pri.block_input(i + 1, &compressed, skips)?;
            prev = block.forward(&input)?;
        }
        Ok(prev)
    }

    /// Single-scale forward on a (N, 3, h, w) image plus the previous
    /// estimate (same shape).
    fn forward_scale(&self, image: &Tensor, previous: &Tensor) -> Result<ScaleOutput> {
        let x = Tensor::cat(&[image, previous], 1)?;
        let (h, skips) = self.encoder.forward(&x)?;

        let attention = if self.config.use_attention {
            Some(self.attention.forward(image)?)
        } else {
            None
        };

        let finish = |raw: Tensor| -> Result<Tensor> {
            if self.config.predict_residual {
                Ok((raw + image)?)
            } else {
                Ok(raw)
            }
        };

        if !self.config.fuse_branches {
            let s_pri = finish(self.dec_pri.forward(&h, &skips)?.0)?;
            return Ok(ScaleOutput {
                s_pri,
                s_fg: None,
                s_bg: None,
                attention: attention.map(|a| a.map),
            });
        }

        let (h_fg, h_bg) = match &attention {
            Some(a) => gate_features(&h, &a.map)?,
            // Ablation without attention: both domain branches see the
            // ungated feature.
            None => (h.clone(), h.clone()),
        };
        let (s_fg, fg_inter) = self.dec_fg.forward(&h_fg, &skips)?;
        let (s_bg, bg_inter) = self.dec_bg.forward(&h_bg, &skips)?;
        let s_pri = self.decode_primary(&h, &fg_inter, &bg_inter, &skips)?;
        Ok(ScaleOutput {
            s_pri: finish(s_pri)?,
            s_fg: Some(finish(s_fg)?),
            s_bg: Some(finish(s_bg)?),
            attention: attention.map(|a| a.map),
        })
    }

    /// Multi-scale forward over the full pyramid, coarse to fine. `image`
    /// is the finest (N, 3, H, W) batch; H and W must be divisible by
    /// [`NetworkConfig::input_divisor`].
    pub fn forward_full(&self, image: &Tensor) -> Result<Vec<ScaleOutput>> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::dims(format!("expected 3-channel input, got {c}")));
        }
        let div = self.config.input_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::arg(format!(
                "input {w}x{h} must be divisible by {div} for {} scales",
                self.config.scales
            )));
        }
        let scales = self.config.scales;
        let mut pyramid = Vec::with_capacity(scales);
        for s in 0..scales {
            let factor = 1usize << (scales - 1 - s);
            pyramid.push(if factor == 1 {
                image.clone()
            } else {
                image.avg_pool2d(factor)?
            });
        }
        let mut outputs = Vec::with_capacity(scales);
        let mut previous: Option<Tensor> = None;
        for level in &pyramid {
            let prev = match &previous {
                // coarsest scale: the blurry image is repeated
                None => level.clone(),
                Some(estimate) => self.estimate_up.forward(estimate)?,
            };
            let out = self.forward_scale(level, &prev)?;
            previous = Some(out.s_pri.clone());
            outputs.push(out);
        }
        Ok(outputs)
    }
}
