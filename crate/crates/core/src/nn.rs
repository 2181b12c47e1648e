//! Parameter store, conv layers, and the Adam optimizer.
//!
//! Parameters are created through [`ParamStore`] so that initialization is
//! reproducible from a seed (fan-in-scaled normal weights, zero biases) and
//! serialization order is stable. Zero initialization is a distinct explicit
//! mode used by shape/identity tests.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Fan-in-scaled random normal weights, zero biases.
    #[default]
    FanInNormal,
    /// Everything zero. Zero kernels and biases make linear stacks exact.
    Zeros,
}

/// Named, ordered collection of learnable arrays.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    init: Init,
    rng: ChaCha8Rng,
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(device: Device, init: Init, seed: u64) -> Self {
        Self {
            device,
            dtype: DType::F32,
            init,
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: Vec::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn normal(&mut self) -> f64 {
        // Box-Muller on the store's own stream keeps init independent of
        // any platform normal-sampling implementation.
        let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match self.init {
            Init::Zeros => vec![0.0; n],
            Init::FanInNormal => {
                let std = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| (self.normal() * std) as f32).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Conv2d> {
        let w = self.weight(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
        )?;
        let b = self.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Conv2d {
            w,
            b,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn conv_transpose2d(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<ConvTranspose2d> {
        let w = self.weight(
            &format!("{name}.weight"),
            &[c_in, c_out, kernel, kernel],
            c_in * kernel * kernel,
        )?;
        let b = self.zeros(&format!("{name}.bias"), &[c_out])?;
        // padding chosen so that output = input * stride for k = 2*stride
        Ok(ConvTranspose2d {
            w,
            b,
            stride,
            padding: (kernel - stride) / 2,
        })
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.entries.clone()
    }

    /// Overwrite every parameter from a name -> tensor map; every parameter
    /// must be present with a matching shape.
    pub fn load_values(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let t = values.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {name} in checkpoint"))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// 2D convolution with bias, `same`-style padding of `kernel/2`.
#[derive(Clone)]
pub struct Conv2d {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_out = self.b.dims()[0];
        let y = x.conv2d(self.w.as_tensor(), self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c_out, 1, 1))?)?)
    }
}

/// 2D transposed convolution with bias; with kernel = 2*stride the spatial
/// size is exactly multiplied by the stride.
#[derive(Clone)]
pub struct ConvTranspose2d {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_out = self.b.dims()[0];
        let y = x.conv_transpose2d(self.w.as_tensor(), self.padding, 0, self.stride, 1)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c_out, 1, 1))?)?)
    }
}

/// Residual unit: two 3x3 convolutions with a ReLU between, identity skip,
/// no normalization.
#[derive(Clone)]
pub struct ResidualUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualUnit {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: store.conv2d(&format!("{name}.conv1"), channels, channels, 3, 1)?,
            conv2: store.conv2d(&format!("{name}.conv2"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        Ok((x + h)?)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam over a fixed set of named variables, with externally serializable
/// moment state.
pub struct Adam {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    pub lr: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.dims(), p.dtype(), p.device()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            t: 0,
            lr,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p) else { continue };
            let m = ((&self.m[i] * ADAM_BETA1)? + (g * (1.0 - ADAM_BETA1))?)?;
            let v = ((&self.v[i] * ADAM_BETA2)? + (g.sqr()? * (1.0 - ADAM_BETA2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + ADAM_EPS)?)?;
            p.set(&p.sub(&update)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    /// Moment tensors under `opt.m.` / `opt.v.` prefixes, for checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("opt.m.{name}"), self.m[i].clone()));
            out.push((format!("opt.v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, t: usize) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            let m = tensors
                .get(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for {name}")))?;
            let v = tensors
                .get(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for {name}")))?;
            if m.dims() != p.dims() || v.dims() != p.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shape mismatch for {name}"
                )));
            }
            self.m[i] = m.clone();
            self.v[i] = v.clone();
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_reproducible_across_stores() {
        let mut a = ParamStore::new(Device::Cpu, Init::FanInNormal, 42);
        let mut b = ParamStore::new(Device::Cpu, Init::FanInNormal, 42);
        let ca = a.conv2d("c", 3, 8, 3, 1).unwrap();
        let cb = b.conv2d("c", 3, 8, 3, 1).unwrap();
        let va = ca.w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = cb.w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
        assert!(va.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut store = ParamStore::new(Device::Cpu, Init::FanInNormal, 0);
        let up = store.conv_transpose2d("up", 4, 2, 4, 2).unwrap();
        let x = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let y = up.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 16, 16]);
    }

    #[test]
    fn residual_unit_zero_init_is_identity() {
        let mut store = ParamStore::new(Device::Cpu, Init::Zeros, 0);
        let unit = ResidualUnit::new(&mut store, "r", 4).unwrap();
        let x = Tensor::rand(-1f32, 1f32, (1, 4, 8, 8), &Device::Cpu).unwrap();
        let y = unit.forward(&x).unwrap();
        let diff = (y - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // minimize |x - 3|^2 from 0
        let x = Var::from_tensor(&Tensor::zeros((1,), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], 0.1).unwrap();
        for _ in 0..300 {
            let loss = ((x.as_tensor() - 3.0).unwrap()).sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads).unwrap();
        }
        let v = x.to_vec1::<f32>().unwrap()[0];
        assert!((v - 3.0).abs() < 1e-2, "{v}");
    }

    #[test]
    fn adam_state_round_trip() {
        let x = Var::from_tensor(&Tensor::ones((2,), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], 0.05).unwrap();
        for _ in 0..5 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let state: HashMap<String, Tensor> = opt.state_tensors().into_iter().collect();
        let mut opt2 = Adam::new(vec![("x".into(), x.clone())], 0.05).unwrap();
        opt2.load_state(&state, opt.iteration()).unwrap();
        assert_eq!(opt2.iteration(), 5);
    }
}
