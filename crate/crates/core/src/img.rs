//! Raster types shared by the whole crate.
//!
//! Intensities live in `[0,1]` as `f32`; 8-bit files are divided by 255 on
//! load and scaled back (with rounding) on save. Layout is row-major HWC.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::{Error, Result};

/// A real-valued raster, height x width x channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major HWC.
    pub data: Vec<f32>,
}

impl ImagePlane {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clipped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Extract the crop `[x, x+size) x [y, y+size)`.
    pub fn crop(&self, x: usize, y: usize, size: usize) -> Self {
        assert!(x + size <= self.width && y + size <= self.height);
        Self::from_fn(size, size, self.channels, |px, py, c| {
            self.get(x + px, y + py, c)
        })
    }

    /// Area-average downsampling by an integer factor.
    pub fn area_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::arg("downsample factor must be positive"));
        }
        if self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::arg(format!(
                "dimensions {}x{} not divisible by factor {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f32;
        Ok(Self::from_fn(w, h, self.channels, |x, y, c| {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(x * factor + dx, y * factor + dy, c);
                }
            }
            acc * norm
        }))
    }

    /// Nearest-neighbour (block-replicate) upsampling; the inverse of
    /// `area_downsample` on block-constant images.
    pub fn replicate_upsample(&self, factor: usize) -> Self {
        Self::from_fn(
            self.width * factor,
            self.height * factor,
            self.channels,
            |x, y, c| self.get(x / factor, y / factor, c),
        )
    }

    /// (1, C, H, W) tensor on the given device.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .contiguous()?;
        Ok(t)
    }

    /// Back from a (1, C, H, W) or (C, H, W) f32 tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.dims().len() == 4 {
            t.squeeze(0)?
        } else {
            t.clone()
        };
        let (c, h, w) = t.dims3()?;
        let data = t
            .permute((1, 2, 0))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Ok(Self {
            width: w,
            height: h,
            channels: 3,
            data,
        })
    }

    /// Save as 8-bit PNG (RGB for 3 channels, grayscale for 1), values
    /// clipped to `[0,1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant =
            |v: f32| -> u8 { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
        match self.channels {
            3 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer sized to dimensions")
                    .save(path)
                    .map_err(|source| Error::Image {
                        path: path.to_path_buf(),
                        source,
                    })
            }
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer sized to dimensions")
                    .save(path)
                    .map_err(|source| Error::Image {
                        path: path.to_path_buf(),
                        source,
                    })
            }
            c => Err(Error::arg(format!("cannot save {c}-channel image as PNG"))),
        }
    }
}

/// A {0,1}-valued raster at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel, each 0 or 1.
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn crop(&self, x: usize, y: usize, size: usize) -> Self {
        assert!(x + size <= self.width && y + size <= self.height);
        let mut out = Self::zeros(size, size);
        for py in 0..size {
            for px in 0..size {
                out.set(px, py, self.get(x + px, y + py));
            }
        }
        out
    }

    /// Single-channel float image in {0.0, 1.0}.
    pub fn to_image(&self) -> ImagePlane {
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// (1, 1, H, W) float tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        self.to_image().to_tensor(device)
    }
}
