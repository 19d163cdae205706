//! Loss kernels shared by the alignment objectives. Each takes plain tensors so it can be
//! checked in isolation.

use candle_core::{Tensor, D};

use crate::nn::{self, cross_entropy_weighted};
use crate::{Error, Result};

/// `max_l ⟨f_m[l], f_t⟩` for plain row-major buffers (`f_m` is `L × p`).
pub fn pair_similarity(f_m: &[f32], f_t: &[f32]) -> f32 {
    let p = f_t.len();
    if p == 0 {
        return 0.0;
    }
    f_m.chunks(p)
        .map(|row| row.iter().zip(f_t).map(|(a, b)| a * b).sum::<f32>())
        .fold(f32::NEG_INFINITY, f32::max)
}

/// `(Bm, L, p)` motion features against `(Bt, p)` text features → `(Bm, Bt)` similarities.
pub fn similarity_matrix(f_m: &Tensor, f_t: &Tensor) -> Result<Tensor> {
    let (bm, l, p) = f_m.dims3()?;
    let bt = f_t.dim(0)?;
    let dots = f_m.reshape((bm * l, p))?.matmul(&f_t.t()?)?.reshape((bm, l, bt))?;
    Ok(dots.max(1)?)
}

/// Symmetric InfoNCE over a square similarity matrix with positives on the diagonal.
/// `scale` is `1/τ`, either a scalar tensor or a shape-`(1)` parameter.
pub fn contrastive_from_similarity(sims: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let (b, b2) = sims.dims2()?;
    if b != b2 || b == 0 {
        return Err(Error::DimMismatch(format!("similarity matrix must be square, got {b}x{b2}")));
    }
    let logits = sims.broadcast_mul(&scale.reshape(())?)?;
    let targets = nn::ids((0..b as u32).collect(), b)?;
    let w = vec![1.0f32; b];
    let m2t = cross_entropy_weighted(&logits, &targets, &w)?;
    let t2m = cross_entropy_weighted(&logits.t()?.contiguous()?, &targets, &w)?;
    Ok(((m2t + t2m)? * 0.5)?)
}

/// Mean of per-query matching logits `(N, L)` → one logit per pair `(N)`.
pub fn pair_logits(per_query: &Tensor) -> Result<Tensor> {
    Ok(per_query.mean(D::Minus1)?)
}

/// Mean binary cross-entropy of `logits (N)` against 0/1 `labels`, computed stably as
/// `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
pub fn bce_with_logits(logits: &Tensor, labels: &[f32]) -> Result<Tensor> {
    let n = logits.dim(0)?;
    if n != labels.len() || n == 0 {
        return Err(Error::DimMismatch(format!("{n} logits vs {} labels", labels.len())));
    }
    let y = nn::from_f32(labels.to_vec(), n, logits.dtype())?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((logits.relu()? - (logits * y)?)? + soft)?;
    Ok(per.mean_all()?)
}

/// Token-level cross-entropy averaged over positions with non-zero weight.
pub fn token_cross_entropy(logits: &Tensor, targets: &[u32], weights: &[f32]) -> Result<Tensor> {
    let v = logits.dim(D::Minus1)?;
    let rows = logits.elem_count() / v;
    if rows != targets.len() || rows != weights.len() {
        return Err(Error::DimMismatch(format!("{rows} logit rows vs {} targets", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::TokenOutOfRange { token: t, size: v });
    }
    let t = nn::ids(targets.to_vec(), rows)?;
    cross_entropy_weighted(&logits.reshape((rows, v))?, &t, weights)
}
