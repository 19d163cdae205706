//! 1-D convolutional encoder/decoder over `(batch, time, channels)` tensors.
//!
//! Convolutions are written as gather + matmul so their gradients only rely on
//! `index_select` and `matmul`.

use candle_core::{Device, Tensor};

use super::VqConfig;
use crate::nn::{join, Init, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
    kernel: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((input * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.get_or_init(&join(name, "weight"), (kernel * input, output), Init::Uniform(bound))?,
            bias: ps.get_or_init(&join(name, "bias"), output, Init::Zeros)?,
            stride,
            padding,
            dilation,
            kernel,
        })
    }

    fn zeroed(ps: &mut ParamStore, name: &str, input: usize, output: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get_or_init(&join(name, "weight"), (kernel * input, output), Init::Zeros)?,
            bias: ps.get_or_init(&join(name, "bias"), output, Init::Zeros)?,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            kernel,
        })
    }

    /// `(B, T, C_in)` → `(B, T_out, C_out)`; the weight is laid out `(kernel · C_in, C_out)`
    /// with the tap index outermost.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded_len = t + 2 * self.padding;
        if padded_len < span {
            return Err(Error::Invalid(format!("sequence of {t} frames is shorter than the kernel span")));
        }
        let t_out = (padded_len - span) / self.stride + 1;
        let xp = if self.padding > 0 { x.pad_with_zeros(1, self.padding, self.padding)? } else { x.clone() };
        let mut taps = Vec::with_capacity(self.kernel);
        for k in 0..self.kernel {
            let idx: Vec<u32> = (0..t_out).map(|i| (i * self.stride + k * self.dilation) as u32).collect();
            let idx = Tensor::from_vec(idx, t_out, &Device::Cpu)?;
            taps.push(xp.index_select(&idx, 1)?);
        }
        let cols = if taps.len() == 1 { taps.pop().expect("one tap") } else { Tensor::cat(&taps, 2)? };
        let y = cols.reshape((b * t_out, self.kernel * c))?.matmul(&self.weight)?;
        Ok(y.broadcast_add(&self.bias)?.reshape((b, t_out, ()))?)
    }
}

/// `x + conv1x1(relu(conv3_dilated(relu(x))))`, repeated `depth` times with growing dilation.
#[derive(Debug, Clone)]
struct ResStack {
    blocks: Vec<(Conv1d, Conv1d)>,
}

impl ResStack {
    fn new(ps: &mut ParamStore, name: &str, width: usize, depth: usize, growth: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let dil = growth.pow(i as u32).max(1);
            let n = join(name, &i.to_string());
            blocks.push((
                Conv1d::new(ps, &join(&n, "conv"), width, width, 3, 1, dil, dil)?,
                Conv1d::new(ps, &join(&n, "proj"), width, width, 1, 1, 0, 1)?,
            ));
        }
        Ok(Self { blocks })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (conv, proj) in &self.blocks {
            let h = proj.forward(&conv.forward(&x.relu()?)?.relu()?)?;
            x = (x + h)?;
        }
        Ok(x)
    }
}

fn stages(ratio: usize) -> Result<usize> {
    if ratio == 0 || !ratio.is_power_of_two() {
        return Err(Error::Config(format!("downsample ratio {ratio} must be a power of two")));
    }
    Ok(ratio.trailing_zeros() as usize)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv1d,
    downs: Vec<(Conv1d, ResStack)>,
    conv_out: Conv1d,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, input_dim: usize, cfg: &VqConfig) -> Result<Self> {
        let w = cfg.width;
        let mut downs = Vec::new();
        for s in 0..stages(cfg.downsample_ratio)? {
            let n = format!("encoder.down{s}");
            downs.push((
                Conv1d::new(ps, &join(&n, "conv"), w, w, 4, 2, 1, 1)?,
                ResStack::new(ps, &join(&n, "res"), w, cfg.depth, cfg.dilation_growth)?,
            ));
        }
        Ok(Self {
            conv_in: Conv1d::new(ps, "encoder.conv_in", input_dim, w, 3, 1, 1, 1)?,
            downs,
            conv_out: Conv1d::new(ps, "encoder.conv_out", w, cfg.code_dim, 3, 1, 1, 1)?,
        })
    }

    /// `(B, T, D)` with `T` a multiple of the ratio → `(B, T / ratio, d)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?.relu()?;
        for (down, res) in &self.downs {
            h = res.forward(&down.forward(&h)?)?;
        }
        self.conv_out.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    conv_in: Conv1d,
    ups: Vec<(ResStack, Conv1d)>,
    conv_mid: Conv1d,
    conv_out: Conv1d,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, output_dim: usize, cfg: &VqConfig, zero_final: bool) -> Result<Self> {
        let w = cfg.width;
        let mut ups = Vec::new();
        for s in 0..stages(cfg.downsample_ratio)? {
            let n = format!("decoder.up{s}");
            ups.push((
                ResStack::new(ps, &join(&n, "res"), w, cfg.depth, cfg.dilation_growth)?,
                Conv1d::new(ps, &join(&n, "conv"), w, w, 3, 1, 1, 1)?,
            ));
        }
        let conv_in = Conv1d::new(ps, "decoder.conv_in", cfg.code_dim, w, 3, 1, 1, 1)?;
        let conv_mid = Conv1d::new(ps, "decoder.conv_mid", w, w, 3, 1, 1, 1)?;
        let conv_out = if zero_final {
            Conv1d::zeroed(ps, "decoder.conv_out", w, output_dim, 3)?
        } else {
            Conv1d::new(ps, "decoder.conv_out", w, output_dim, 3, 1, 1, 1)?
        };
        Ok(Self { conv_in, ups, conv_mid, conv_out })
    }

    /// `(B, n, d)` → `(B, n · ratio, D)` with nearest-neighbour upsampling.
    pub fn forward(&self, q: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(q)?.relu()?;
        for (res, conv) in &self.ups {
            h = res.forward(&h)?;
            let (b, t, c) = h.dims3()?;
            h = h.unsqueeze(2)?.broadcast_as((b, t, 2, c))?.reshape((b, 2 * t, c))?;
            h = conv.forward(&h)?;
        }
        let h = self.conv_mid.forward(&h)?.relu()?;
        self.conv_out.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::DType;

    #[test]
    fn conv_matches_direct_convolution() {
        let mut ps = ParamStore::new(4, DType::F64);
        for (k, s, p, d) in [(3, 1, 1, 1), (4, 2, 1, 1), (3, 1, 3, 3), (1, 1, 0, 1)] {
            let conv = Conv1d::new(&mut ps, &format!("c{k}{s}{p}{d}"), 2, 3, k, s, p, d).unwrap();
            let x = Tensor::randn(0f64, 1.0, (1, 9, 2), &Device::Cpu).unwrap();
            let y = to_vec_f64(&conv.forward(&x).unwrap()).unwrap();
            let xv = to_vec_f64(&x).unwrap();
            let w = to_vec_f64(&conv.weight).unwrap();
            let t_out = (9 + 2 * p - d * (k - 1) - 1) / s + 1;
            assert_eq!(y.len(), t_out * 3);
            for t in 0..t_out {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for tap in 0..k {
                        let pos = (t * s + tap * d) as isize - p as isize;
                        if pos < 0 || pos >= 9 {
                            continue;
                        }
                        for i in 0..2 {
                            acc += xv[pos as usize * 2 + i] * w[(tap * 2 + i) * 3 + o];
                        }
                    }
                    assert!((y[t * 3 + o] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
