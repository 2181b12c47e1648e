//! Loss terms: masked FG/BG reconstruction losses, the whole-image primary
//! loss, and the combined per-scale objective.
//!
//! All terms normalize by the total element count so loss magnitudes are
//! independent of crop size. The masked variants admit a per-masked-pixel
//! normalization as an explicit alternative.

use candle_core::Tensor;

use crate::attention::attention_loss;
use crate::network::ScaleOutput;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub attention: f64,
    pub fg: f64,
    pub bg: f64,
    pub primary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            attention: 1.0,
            fg: 1.0,
            bg: 1.0,
            primary: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskNorm {
    /// Divide by the total pixel count (default): gradients stay bounded
    /// when masks are tiny.
    #[default]
    TotalPixels,
    /// Divide by the number of masked pixels.
    MaskedPixels,
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::dims(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn primary_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair(pred, target)?;
    Ok((target - pred)?.sqr()?.mean_all()?)
}

fn masked_loss(pred: &Tensor, target: &Tensor, mask: &Tensor, norm: MaskNorm) -> Result<Tensor> {
    check_pair(pred, target)?;
    let (_, _, h, w) = pred.dims4()?;
    let (_, mc, mh, mw) = mask.dims4()?;
    if mc != 1 || mh != h || mw != w {
        return Err(Error::dims(format!(
            "mask {:?} incompatible with prediction {:?}",
            mask.dims(),
            pred.dims()
        )));
    }
    let weighted = (target - pred)?.sqr()?.broadcast_mul(mask)?;
    match norm {
        MaskNorm::TotalPixels => Ok(weighted.mean_all()?),
        MaskNorm::MaskedPixels => {
            let channels = pred.dims()[1] as f64;
            let denom = (mask.sum_all()?.to_scalar::<f32>()? as f64 * channels).max(1.0);
            Ok((weighted.sum_all()? / denom)?)
        }
    }
}

/// `mean(G .* (S - S_fg)^2)`: errors outside the mask cannot propagate.
pub fn fg_loss(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_loss(pred, target, mask, MaskNorm::TotalPixels)
}

pub fn fg_loss_with_norm(
    pred: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    norm: MaskNorm,
) -> Result<Tensor> {
    masked_loss(pred, target, mask, norm)
}

/// As [`fg_loss`] with the mask complement `1 - G`.
pub fn bg_loss(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_loss(pred, target, &(1.0 - mask)?, MaskNorm::TotalPixels)
}

pub fn bg_loss_with_norm(
    pred: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    norm: MaskNorm,
) -> Result<Tensor> {
    masked_loss(pred, target, &(1.0 - mask)?, norm)
}

/// Per-scale loss values (plain numbers, for logging).
#[derive(Debug, Clone, Copy, Default)]
pub struct ScaleLosses {
    pub attention: f64,
    pub fg: f64,
    pub bg: f64,
    pub primary: f64,
}

pub struct LossBreakdown {
    pub per_scale: Vec<ScaleLosses>,
    /// Weighted sum across scales and terms, as a scalar graph node.
    pub total: Tensor,
    pub total_value: f64,
}

impl LossBreakdown {
    pub fn log_line(&self, step: usize) -> String {
        let mut sums = ScaleLosses::default();
        for s in &self.per_scale {
            sums.attention += s.attention;
            sums.fg += s.fg;
            sums.bg += s.bg;
            sums.primary += s.primary;
        }
        format!(
            "step={step} l_att={:.6} l_fg={:.6} l_bg={:.6} l_pri={:.6} total={:.6}",
            sums.attention, sums.fg, sums.bg, sums.primary, self.total_value
        )
    }
}

/// Combine the four terms over every scale. `sharp_pyramid` and
/// `mask_pyramid` are coarse-to-fine and must align with `outputs`;
/// terms absent from an output (ablations) contribute nothing.
pub fn total_loss(
    outputs: &[ScaleOutput],
    sharp_pyramid: &[Tensor],
    mask_pyramid: &[Tensor],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if outputs.len() != sharp_pyramid.len() || outputs.len() != mask_pyramid.len() {
        return Err(Error::dims("pyramid lengths do not align"));
    }
    let mut per_scale = Vec::with_capacity(outputs.len());
    let mut total: Option<Tensor> = None;
    let add = |acc: &mut Option<Tensor>, term: Tensor, weight: f64| -> Result<f64> {
        let value = term.to_scalar::<f32>()? as f64;
        if weight != 0.0 {
            let weighted = (term * weight)?;
            *acc = Some(match acc.take() {
                Some(t) => (t + weighted)?,
                None => weighted,
            });
        }
        Ok(value)
    };
    for ((out, sharp), mask) in outputs.iter().zip(sharp_pyramid).zip(mask_pyramid) {
        let mut losses = ScaleLosses::default();
        if let Some(a) = &out.attention {
            losses.attention = add(&mut total, attention_loss(a, mask)?, weights.attention)?;
        }
        if let Some(s_fg) = &out.s_fg {
            losses.fg = add(&mut total, fg_loss(s_fg, sharp, mask)?, weights.fg)?;
        }
        if let Some(s_bg) = &out.s_bg {
            losses.bg = add(&mut total, bg_loss(s_bg, sharp, mask)?, weights.bg)?;
        }
        losses.primary = add(&mut total, primary_loss(&out.s_pri, sharp)?, weights.primary)?;
        per_scale.push(losses);
    }
    let total = match total {
        Some(t) => t,
        None => return Err(Error::arg("all loss weights are zero")),
    };
    let total_value = total.to_scalar::<f32>()? as f64;
    Ok(LossBreakdown {
        per_scale,
        total,
        total_value,
    })
}
