//! Minimal neural-network toolkit over `candle`: a named, seeded parameter store, the layers
//! the models share, masking helpers, losses and the optimizer loop.

pub mod gradcheck;
mod layers;
mod optim;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{seed, Error, Result};

pub use layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{global_grad_norm, OptimConfig, Trainer};

/// Additive bias for disallowed attention edges. Large but finite so fully masked
/// gradients stay finite.
pub const NEG_INF: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// Named trainable parameters in a deterministic (sorted) order.
///
/// Parameters are created on first request and initialized from the store's seeded RNG,
/// so building the same model twice from the same seed yields identical weights. A store
/// built from a checkpoint hands back the stored tensors instead and rejects unknown names.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    loaded: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: seed::rng(seed),
            loaded: false,
        }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self { vars, dtype, device: Device::Cpu, rng: seed::rng(0), loaded: true })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get_or_init(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        if let Some(v) = self.vars.get(name) {
            if v.shape() != &shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    v.shape(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        if self.loaded {
            return Err(Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| self.rng.gen_range(-a..=a)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_where(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars.iter().filter(|(k, _)| pred(k)).map(|(_, v)| v.clone()).collect()
    }

    /// Detached copies of all parameters.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }
}

/// Joins parameter path segments with `.`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn from_f32(values: Vec<f32>, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn ids(values: Vec<u32>, shape: impl Into<Shape>) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
}

/// Builds a `(B, 1, Tq, Tk)` additive attention bias from a row-major allow matrix.
pub fn attention_bias(allowed: &[bool], b: usize, tq: usize, tk: usize, dtype: DType) -> Result<Tensor> {
    debug_assert_eq!(allowed.len(), b * tq * tk);
    let v: Vec<f32> = allowed.iter().map(|&a| if a { 0.0 } else { NEG_INF as f32 }).collect();
    from_f32(v, (b, 1, tq, tk), dtype)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Per-row negative log-likelihood of `targets` under `logits` `(N, V)`.
pub fn nll_rows(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let logp = log_softmax(logits)?;
    Ok(logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?)
}

/// Weighted mean cross-entropy; rows with zero weight do not contribute.
pub fn cross_entropy_weighted(logits: &Tensor, targets: &Tensor, weights: &[f32]) -> Result<Tensor> {
    let total: f32 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("cross-entropy over an empty selection".into()));
    }
    let nll = nll_rows(logits, targets)?;
    let w = from_f32(weights.to_vec(), weights.len(), logits.dtype())?;
    Ok((nll * w)?.sum_all()?.affine(1.0 / total as f64, 0.0)?)
}

/// Smooth L1 (Huber, transition 1.0) averaged over all elements.
pub fn smooth_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = (a - b)?.abs()?;
    let small = d.minimum(1.0)?;
    let per = ((small.sqr()? * 0.5)? + (d - &small)?)?;
    Ok(per.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_is_seeded_and_sorted() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        let ta = a.get_or_init("z", (2, 3), Init::Normal(1.0)).unwrap();
        let tb = b.get_or_init("z", (2, 3), Init::Normal(1.0)).unwrap();
        assert_eq!(to_vec_f32(&ta).unwrap(), to_vec_f32(&tb).unwrap());
        a.get_or_init("a", 1, Init::Zeros).unwrap();
        assert_eq!(a.named_vars().keys().collect::<Vec<_>>(), vec!["a", "z"]);
        assert!(a.get_or_init("z", (3, 2), Init::Zeros).is_err());
    }

    #[test]
    fn loaded_store_rejects_unknown_names() {
        let mut a = ParamStore::new(0, DType::F32);
        a.get_or_init("w", 4, Init::Ones).unwrap();
        let mut b = ParamStore::from_tensors(a.snapshot().unwrap(), DType::F32).unwrap();
        assert!(b.get_or_init("w", 4, Init::Zeros).is_ok());
        assert!(b.get_or_init("other", 4, Init::Zeros).is_err());
    }

    #[test]
    fn smooth_l1_branches() {
        let a = Tensor::new(&[0.5f64, 3.0], &Device::Cpu).unwrap();
        let b = Tensor::new(&[0.0f64, 0.0], &Device::Cpu).unwrap();
        let v = scalar(&smooth_l1(&a, &b).unwrap()).unwrap();
        assert!((v - (0.125 + 2.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_cross_entropy_uniform() {
        let logits = Tensor::zeros((3, 8), DType::F64, &Device::Cpu).unwrap();
        let t = ids(vec![1, 2, 3], 3).unwrap();
        let v = scalar(&cross_entropy_weighted(&logits, &t, &[1.0, 0.0, 1.0]).unwrap()).unwrap();
        assert!((v - 8f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_weighted(&logits, &t, &[0.0; 3]).is_err());
    }
}
