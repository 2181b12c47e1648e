//! Supervised human-aware attention: a small subnet that predicts a soft
//! foreground mask from the blurred image, the pixel-wise l2 loss that
//! supervises it against the binary box mask, and the gating that splits
//! encoder features into FG/BG streams.

use candle_core::Tensor;

use crate::nn::{Conv2d, ConvTranspose2d, ParamStore};
use crate::{Error, Result};

/// Widths of the three downsampling stages; the up path mirrors them.
pub const DEFAULT_ATTENTION_WIDTHS: [usize; 3] = [32, 64, 128];

/// Soft FG prediction: `map = sigmoid(logits)`, same spatial size as the
/// input image.
pub struct AttentionMap {
    pub logits: Tensor,
    pub map: Tensor,
}

/// Three conv layers interleaved with x2 max pooling and ReLU, three
/// transposed-conv layers restoring resolution, and a 1x1 sigmoid head.
pub struct AttentionNet {
    down: Vec<Conv2d>,
    up: Vec<ConvTranspose2d>,
    head: Conv2d,
}

impl AttentionNet {
    pub fn new(store: &mut ParamStore, widths: [usize; 3]) -> Result<Self> {
        let [w0, w1, w2] = widths;
        let down = vec![
            store.conv2d("attention.down0", 3, w0, 3, 1)?,
            store.conv2d("attention.down1", w0, w1, 3, 1)?,
            store.conv2d("attention.down2", w1, w2, 3, 1)?,
        ];
        let up = vec![
            store.conv_transpose2d("attention.up0", w2, w1, 4, 2)?,
            store.conv_transpose2d("attention.up1", w1, w0, 4, 2)?,
            store.conv_transpose2d("attention.up2", w0, w0, 4, 2)?,
        ];
        let head = store.conv2d("attention.head", w0, 1, 1, 1)?;
        Ok(Self { down, up, head })
    }

    /// Predict the attention map for a (N, 3, H, W) image batch; H and W
    /// must be divisible by 8 (three x2 poolings).
    pub fn forward(&self, image: &Tensor) -> Result<AttentionMap> {
        let (_, _, h, w) = image.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::arg(format!(
                "attention input {w}x{h} must be divisible by 8"
            )));
        }
        let mut x = image.clone();
        for conv in &self.down {
            x = conv.forward(&x)?.relu()?.max_pool2d(2)?;
        }
        for deconv in &self.up {
            x = deconv.forward(&x)?.relu()?;
        }
        let logits = self.head.forward(&x)?;
        let map = candle_nn::ops::sigmoid(&logits)?;
        Ok(AttentionMap { logits, map })
    }
}

/// Mean over pixels of `(G - A)^2`.
pub fn attention_loss(map: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if map.dims() != mask.dims() {
        return Err(Error::dims(format!(
            "attention map {:?} vs mask {:?}",
            map.dims(),
            mask.dims()
        )));
    }
    Ok((mask - map)?.sqr()?.mean_all()?)
}

/// Resample the attention map (area-average) to the spatial size of `h`
/// and gate: `H_FG[i] = A .* H[i]`, `H_BG[i] = (1-A) .* H[i]`.
pub fn gate_features(h: &Tensor, attention: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, fh, fw) = h.dims4()?;
    let (_, _, ah, aw) = attention.dims4()?;
    if ah % fh != 0 || aw % fw != 0 || ah / fh != aw / fw {
        return Err(Error::dims(format!(
            "attention {aw}x{ah} incompatible with features {fw}x{fh}"
        )));
    }
    let factor = ah / fh;
    let a = if factor == 1 {
        attention.clone()
    } else {
        attention.avg_pool2d(factor)?
    };
    let fg = h.broadcast_mul(&a)?;
    let bg = h.broadcast_mul(&(1.0 - &a)?)?;
    Ok((fg, bg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::Device;

    fn net(init: Init, seed: u64) -> AttentionNet {
        let mut store = ParamStore::new(Device::Cpu, init, seed);
        AttentionNet::new(&mut store, DEFAULT_ATTENTION_WIDTHS).unwrap()
    }

    #[test]
    fn zero_params_give_half_everywhere() {
        let net = net(Init::Zeros, 0);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let out = net.forward(&x).unwrap();
        let vals = out.map.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn output_matches_input_size_and_open_range() {
        let net = net(Init::FanInNormal, 3);
        let x = Tensor::rand(0f32, 1f32, (2, 3, 32, 24), &Device::Cpu).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.map.dims(), &[2, 1, 32, 24]);
        let vals = out.map.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = net(Init::Zeros, 0);
        let x = Tensor::zeros((1, 3, 12, 16), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn loss_examples() {
        let dev = Device::Cpu;
        let g = Tensor::from_slice(&[0f32, 1.0, 1.0, 0.0], (1, 1, 2, 2), &dev).unwrap();
        let half = Tensor::full(0.5f32, (1, 1, 2, 2), &dev).unwrap();
        let l = attention_loss(&half, &g).unwrap().to_scalar::<f32>().unwrap();
        assert!((l - 0.25).abs() < 1e-7);
        let flipped = (1.0 - &g).unwrap();
        let l = attention_loss(&flipped, &g).unwrap().to_scalar::<f32>().unwrap();
        assert!((l - 1.0).abs() < 1e-7);
        let l = attention_loss(&g, &g).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn gating_extremes() {
        let dev = Device::Cpu;
        let h = Tensor::rand(-1f32, 1f32, (1, 4, 8, 8), &dev).unwrap();
        let ones = Tensor::ones((1, 1, 8, 8), candle_core::DType::F32, &dev).unwrap();
        let (fg, bg) = gate_features(&h, &ones).unwrap();
        assert_eq!(
            (fg - &h).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(),
            0.0
        );
        assert_eq!(bg.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn gating_elementwise_values() {
        let dev = Device::Cpu;
        // H = (4, 8) across two channels at a pixel where A = 0.25
        let h = Tensor::from_slice(&[4f32, 8.0], (1, 2, 1, 1), &dev).unwrap();
        let a = Tensor::from_slice(&[0.25f32], (1, 1, 1, 1), &dev).unwrap();
        let (fg, bg) = gate_features(&h, &a).unwrap();
        assert_eq!(fg.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 2.0]);
        assert_eq!(bg.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![3.0, 6.0]);
    }

    #[test]
    fn gating_downsamples_attention() {
        let dev = Device::Cpu;
        let h = Tensor::ones((1, 3, 4, 4), candle_core::DType::F32, &dev).unwrap();
        let a = Tensor::rand(0f32, 1f32, (1, 1, 16, 16), &dev).unwrap();
        let (fg, bg) = gate_features(&h, &a).unwrap();
        assert_eq!(fg.dims(), &[1, 3, 4, 4]);
        // partition identity
        let sum = (fg + bg).unwrap();
        let diff = (sum - &h).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff <= 1e-6);
    }

    #[test]
    fn gating_rejects_incompatible_ratio() {
        let dev = Device::Cpu;
        let h = Tensor::ones((1, 3, 4, 6), candle_core::DType::F32, &dev).unwrap();
        let a = Tensor::ones((1, 1, 16, 16), candle_core::DType::F32, &dev).unwrap();
        assert!(gate_features(&h, &a).is_err());
    }
}
