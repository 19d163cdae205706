//! Decoder-only transformer over motion tokens with a condition prefix.

use candle_core::{DType, Tensor};

use super::{AttentionMode, T2MConfig};
use crate::nn::{attention_bias, join, Embedding, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::{Error, Result};

struct Block {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

pub(crate) struct Network {
    tok_emb: Embedding,
    pos_emb: Embedding,
    cond_proj: Linear,
    cond_pos: Tensor,
    null_cond: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
    cond_rows: usize,
    codebook_size: usize,
    max_len: usize,
}

impl Network {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &T2MConfig,
        codebook_size: usize,
        cond_rows: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let n = format!("layers.{i}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(ps, &join(&n, "attn_norm"), h)?,
                attn: MultiHeadAttention::new(ps, &join(&n, "attn"), h, cfg.heads, 0)?,
                ln_ffn: LayerNorm::new(ps, &join(&n, "ffn_norm"), h)?,
                ffn: FeedForward::new(ps, &join(&n, "ffn"), h, h * cfg.ffn_mult)?,
            });
        }
        Ok(Self {
            // the extra row is the mask token
            tok_emb: Embedding::new(ps, "tok_emb", codebook_size + 1, h)?,
            pos_emb: Embedding::new(ps, "pos_emb", cfg.max_len, h)?,
            cond_proj: Linear::new(ps, "cond.proj", cond_dim, h)?,
            cond_pos: ps.get_or_init("cond.pos", (cond_rows, h), Init::Normal(0.02))?,
            null_cond: ps.get_or_init("cond.null", (cond_rows, h), Init::Normal(0.02))?,
            blocks,
            ln_out: LayerNorm::new(ps, "final_norm", h)?,
            head: Linear::new(ps, "head", h, codebook_size)?,
            cond_rows,
            codebook_size,
            max_len: cfg.max_len,
        })
    }

    /// `tokens` are `B` rows of equal length `n` (values in `0..=S`, `S` being the mask
    /// token); `valid` flags real positions. `conditions[b]` is `cond_rows × cond_dim`
    /// values or `None` for the null condition. Returns `(B, n, S)` logits.
    pub fn forward(
        &self,
        tokens: &[Vec<u32>],
        valid: &[Vec<bool>],
        conditions: &[Option<&[f32]>],
        mode: AttentionMode,
        dtype: DType,
    ) -> Result<Tensor> {
        let b = tokens.len();
        let n = tokens.first().map_or(0, Vec::len);
        if b == 0 || n == 0 {
            return Err(Error::Invalid("empty token batch".into()));
        }
        if n > self.max_len {
            return Err(Error::Invalid(format!("sequence of {n} tokens exceeds maximum {}", self.max_len)));
        }
        if conditions.len() != b || valid.len() != b {
            return Err(Error::DimMismatch(format!("{b} sequences, {} conditions", conditions.len())));
        }
        let mut flat = Vec::with_capacity(b * n);
        for row in tokens {
            if row.len() != n {
                return Err(Error::DimMismatch("ragged token batch".into()));
            }
            if let Some(&t) = row.iter().find(|&&t| t as usize > self.codebook_size) {
                return Err(Error::TokenOutOfRange { token: t, size: self.codebook_size + 1 });
            }
            flat.extend_from_slice(row);
        }
        let ids = Tensor::from_vec(flat, (b, n), &candle_core::Device::Cpu)?;
        let x = self.tok_emb.forward(&ids)?.broadcast_add(&self.pos_emb.prefix(n)?)?;
        let prefix = self.prefix(conditions, dtype)?;
        let lc = self.cond_rows;
        let mut h = Tensor::cat(&[&prefix, &x], 1)?;
        let bias = mask(mode, lc, valid, dtype)?;
        for blk in &self.blocks {
            let a = blk.ln_attn.forward(&h)?;
            h = (&h + blk.attn.forward(&a, &a, Some(&bias))?)?;
            h = (&h + blk.ffn.forward(&blk.ln_ffn.forward(&h)?)?)?;
        }
        let out = self.ln_out.forward(&h.narrow(1, lc, n)?)?;
        self.head.forward(&out)
    }

    fn prefix(&self, conditions: &[Option<&[f32]>], dtype: DType) -> Result<Tensor> {
        let (lc, dim) = (self.cond_rows, self.cond_proj.weight().dim(1)?);
        let mut rows = Vec::with_capacity(conditions.len());
        for c in conditions {
            let row = match c {
                Some(v) => {
                    if v.len() != lc * dim {
                        return Err(Error::DimMismatch(format!(
                            "condition has {} values, expected {lc}x{dim}",
                            v.len()
                        )));
                    }
                    let t = crate::nn::from_f32(v.to_vec(), (lc, dim), dtype)?;
                    (self.cond_proj.forward(&t)? + &self.cond_pos)?
                }
                None => self.null_cond.clone(),
            };
            rows.push(row.unsqueeze(0)?);
        }
        Ok(Tensor::cat(&rows, 0)?)
    }
}

/// `(B, 1, Lc + n, Lc + n)` bias. The condition prefix sees only itself and is visible to
/// every token; tokens see earlier tokens (causal) or all tokens (bidirectional). Padding
/// keys are hidden, and the diagonal always stays open.
pub(crate) fn mask(mode: AttentionMode, lc: usize, valid: &[Vec<bool>], dtype: DType) -> Result<Tensor> {
    let b = valid.len();
    let n = valid.first().map_or(0, Vec::len);
    let t = lc + n;
    let mut allowed = vec![false; b * t * t];
    for (bi, v) in valid.iter().enumerate() {
        for i in 0..t {
            for j in 0..t {
                let ok = if j < lc {
                    true
                } else if i < lc {
                    false
                } else {
                    v[j - lc]
                        && match mode {
                            AttentionMode::Causal => j <= i,
                            AttentionMode::Bidirectional => true,
                        }
                };
                allowed[(bi * t + i) * t + j] = ok || i == j;
            }
        }
    }
    attention_bias(&allowed, b, t, t, dtype)
}
