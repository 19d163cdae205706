use candle_core::{Tensor, D};

use super::{join, softmax, Init, ParamStore};
use crate::Result;

const INIT_STD: f64 = 0.02;

/// Affine map `y = x Wᵀ + b`, optionally with a low-rank additive adapter `x Aᵀ Bᵀ`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    adapter: Option<(Tensor, Tensor)>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(ps, name, input, output, Init::Normal(INIT_STD), true)
    }

    pub fn no_bias(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(ps, name, input, output, Init::Normal(INIT_STD), false)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = ps.get_or_init(&join(name, "weight"), (output, input), init)?;
        let bias = if bias {
            Some(ps.get_or_init(&join(name, "bias"), output, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, adapter: None })
    }

    /// Adds a rank-`rank` adapter under `name.adapter_{a,b}`; `b` starts at zero so the
    /// layer's function is unchanged at initialization.
    pub fn with_adapter(mut self, ps: &mut ParamStore, name: &str, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Ok(self);
        }
        let (output, input) = self.weight.dims2()?;
        let a = ps.get_or_init(&join(name, "adapter_a"), (rank, input), Init::Normal(1.0 / (input as f64).sqrt()))?;
        let b = ps.get_or_init(&join(name, "adapter_b"), (output, rank), Init::Zeros)?;
        self.adapter = Some((a, b));
        Ok(self)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / input;
        let flat = x.reshape((rows, input))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some((a, b)) = &self.adapter {
            y = (y + flat.matmul(&a.t()?)?.matmul(&b.t()?)?)?;
        }
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get_or_init(&join(name, "weight"), dim, Init::Ones)?,
            bias: ps.get_or_init(&join(name, "bias"), dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, count: usize, dim: usize) -> Result<Self> {
        Ok(Self { table: ps.get_or_init(&join(name, "weight"), (count, dim), Init::Normal(INIT_STD))? })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// `ids` of any shape → `ids.shape × dim`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        dims.push(self.table.dim(1)?);
        Ok(self.table.index_select(&ids.flatten_all()?, 0)?.reshape(dims)?)
    }

    /// The first `n` rows, shaped `(1, n, dim)` for broadcasting over a batch.
    pub fn prefix(&self, n: usize) -> Result<Tensor> {
        Ok(self.table.narrow(0, 0, n)?.unsqueeze(0)?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, hidden: usize, heads: usize, adapter_rank: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(crate::Error::Config(format!("hidden {hidden} not divisible by {heads} heads")));
        }
        let mk = |ps: &mut ParamStore, n: &str| -> Result<Linear> {
            let full = join(name, n);
            Linear::new(ps, &full, hidden, hidden)?.with_adapter(ps, &full, adapter_rank)
        };
        Ok(Self { q: mk(ps, "q")?, k: mk(ps, "k")?, v: mk(ps, "v")?, o: mk(ps, "o")?, heads })
    }

    /// `xq (B, Tq, H)`, `xkv (B, Tk, H)`, `bias` broadcastable to `(B, heads, Tq, Tk)`.
    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, hidden) = xq.dims3()?;
        let tk = xkv.dim(1)?;
        let dh = hidden / self.heads;
        let split = |x: Tensor, t: usize| -> Result<Tensor> {
            Ok(x.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(xq)?, tq)?;
        let k = split(self.k.forward(xkv)?, tk)?;
        let v = split(self.v.forward(xkv)?, tk)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = softmax(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, hidden))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, hidden: usize, inner: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(ps, &join(name, "up"), hidden, inner)?,
            down: Linear::new(ps, &join(name, "down"), inner, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{attention_bias, to_vec_f64};
    use candle_core::{DType, Device};

    #[test]
    fn linear_matches_manual() {
        let mut ps = ParamStore::new(1, DType::F64);
        let lin = Linear::new(&mut ps, "l", 3, 2).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0]], &Device::Cpu).unwrap();
        let y = to_vec_f64(&lin.forward(&x).unwrap()).unwrap();
        let w = to_vec_f64(lin.weight()).unwrap();
        for r in 0..2 {
            let manual: f64 = (0..3).map(|c| w[r * 3 + c] * (c as f64 + 1.0)).sum();
            assert!((y[r] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_adapter_is_identity_at_init() {
        let mut ps = ParamStore::new(1, DType::F64);
        let plain = Linear::new(&mut ps, "l", 4, 4).unwrap();
        let adapted = plain.clone().with_adapter(&mut ps, "l", 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 4), &Device::Cpu).unwrap();
        let a = to_vec_f64(&plain.forward(&x).unwrap()).unwrap();
        let b = to_vec_f64(&adapted.forward(&x).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut ps = ParamStore::new(1, DType::F64);
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = to_vec_f64(&ln.forward(&x).unwrap()).unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn masked_keys_have_no_influence() {
        let mut ps = ParamStore::new(2, DType::F64);
        let attn = MultiHeadAttention::new(&mut ps, "a", 8, 2, 0).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 3, 8), &Device::Cpu).unwrap();
        let allowed = [true, false, false, true, true, false, true, true, true];
        let bias = attention_bias(&allowed, 1, 3, 3, DType::F64).unwrap();
        let y1 = to_vec_f64(&attn.forward(&x, &x, Some(&bias)).unwrap()).unwrap();
        // perturb the last position: row 0 and row 1 must not change
        let mut xv = to_vec_f64(&x).unwrap();
        for v in &mut xv[16..] {
            *v += 1.0;
        }
        let x2 = Tensor::from_vec(xv, (1, 3, 8), &Device::Cpu).unwrap();
        let y2 = to_vec_f64(&attn.forward(&x2, &x2, Some(&bias)).unwrap()).unwrap();
        assert_eq!(y1[..16], y2[..16]);
        assert_ne!(y1[16..], y2[16..]);
    }
}
