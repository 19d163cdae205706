//! The dual transformer: a motion stream (learnable queries, optionally followed by motion
//! tokens) and a text stream, sharing every self-attention block.

use candle_core::{DType, Tensor, D};

use super::LampConfig;
use crate::nn::{
    self, attention_bias, join, Embedding, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore,
};
use crate::text::PAD;
use crate::{Error, Result};

/// Attention visibility between the two streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMaskMode {
    /// Streams run in separate passes and never see each other.
    Unimodal,
    /// Every position sees every non-padding position.
    Bidirectional,
    /// Text attends left-only and to all queries; queries never see text.
    CausalText,
    /// Motion tokens attend left-only and to all queries; queries never see motion tokens.
    CausalMotion,
}

struct Block {
    ln_sa: LayerNorm,
    sa: MultiHeadAttention,
    ln_ca: LayerNorm,
    ca: MultiHeadAttention,
    ln_ff_m: LayerNorm,
    ff_m: FeedForward,
    ln_ff_t: LayerNorm,
    ff_t: FeedForward,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, cfg: &LampConfig) -> Result<Self> {
        let h = cfg.hidden;
        let inner = h * cfg.ffn_mult;
        Ok(Self {
            ln_sa: LayerNorm::new(ps, &join(name, "shared_attn_norm"), h)?,
            sa: MultiHeadAttention::new(ps, &join(name, "shared_attn"), h, cfg.heads, 0)?,
            ln_ca: LayerNorm::new(ps, &join(name, "motion.cross_attn_norm"), h)?,
            ca: MultiHeadAttention::new(ps, &join(name, "motion.cross_attn"), h, cfg.heads, 0)?,
            ln_ff_m: LayerNorm::new(ps, &join(name, "motion.ffn_norm"), h)?,
            ff_m: FeedForward::new(ps, &join(name, "motion.ffn"), h, inner)?,
            ln_ff_t: LayerNorm::new(ps, &join(name, "text.ffn_norm"), h)?,
            ff_t: FeedForward::new(ps, &join(name, "text.ffn"), h, inner)?,
        })
    }
}

/// Keys for the motion stream's cross-attention with their `(B, 1, 1, Tk)` padding bias.
pub(crate) struct CrossKeys {
    pub keys: Tensor,
    pub bias: Tensor,
}

pub(crate) struct Streams {
    pub motion: Option<Tensor>,
    pub text: Option<Tensor>,
}

/// Parameters of the alignment model. Shapes depend on the config plus the text vocabulary
/// size `vocab`, the motion codebook size `codes` and the motion latent width `code_dim`.
pub(crate) struct Network {
    pub queries: Tensor,
    tok_emb: Embedding,
    text_pos: Embedding,
    motion_in: Linear,
    motion_pos: Embedding,
    code_emb: Embedding,
    code_pos: Embedding,
    blocks: Vec<Block>,
    ln_motion: LayerNorm,
    ln_text: LayerNorm,
    pub motion_proj: Linear,
    pub text_proj: Linear,
    pub logit_scale: Tensor,
    pub match_head: Linear,
    pub lm_head: Linear,
    pub tgm_head: Linear,
    dtype: DType,
}

impl Network {
    pub fn new(ps: &mut ParamStore, cfg: &LampConfig, vocab: usize, codes: usize, code_dim: usize) -> Result<Self> {
        let h = cfg.hidden;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(ps, &format!("layers.{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries: ps.get_or_init("motion.queries", (cfg.num_queries, h), Init::Normal(0.02))?,
            tok_emb: Embedding::new(ps, "text.tok_emb", vocab, h)?,
            text_pos: Embedding::new(ps, "text.pos_emb", cfg.max_text_len, h)?,
            motion_in: Linear::new(ps, "motion.latent_in", code_dim, h)?,
            motion_pos: Embedding::new(ps, "motion.latent_pos", cfg.max_motion_tokens, h)?,
            // one extra row for the start-of-motion token
            code_emb: Embedding::new(ps, "motion.code_emb", codes + 1, h)?,
            code_pos: Embedding::new(ps, "motion.code_pos", cfg.max_motion_tokens, h)?,
            blocks,
            ln_motion: LayerNorm::new(ps, "motion.final_norm", h)?,
            ln_text: LayerNorm::new(ps, "text.final_norm", h)?,
            motion_proj: Linear::new(ps, "motion.proj", h, cfg.proj_dim)?,
            text_proj: Linear::new(ps, "text.proj", h, cfg.proj_dim)?,
            logit_scale: ps.get_or_init("logit_scale", 1, Init::Const((1.0 / cfg.temperature).ln()))?,
            match_head: Linear::new(ps, "heads.matching", h, 1)?,
            lm_head: Linear::new(ps, "heads.text_generation", h, vocab)?,
            tgm_head: Linear::new(ps, "heads.motion_generation", h, codes)?,
            dtype: ps.dtype(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// `(B, L, h)` copies of the learnable queries.
    pub fn query_stream(&self, b: usize) -> Result<Tensor> {
        let (l, h) = self.queries.dims2()?;
        Ok(self.queries.unsqueeze(0)?.broadcast_as((b, l, h))?.contiguous()?)
    }

    /// Embeds padded `(B, T)` text ids.
    pub fn text_stream(&self, ids: &Tensor) -> Result<Tensor> {
        let t = ids.dim(1)?;
        if t > self.text_pos.table().dim(0)? {
            return Err(Error::Invalid(format!("text of {t} tokens exceeds max_text_len")));
        }
        Ok(self.tok_emb.forward(ids)?.broadcast_add(&self.text_pos.prefix(t)?)?)
    }

    /// Cross-attention keys from padded motion latents `(B, n, d)`.
    pub fn latent_keys(&self, latents: &Tensor, lens: &[usize]) -> Result<CrossKeys> {
        let (b, n, _) = latents.dims3()?;
        if n > self.motion_pos.table().dim(0)? {
            return Err(Error::Invalid(format!("motion of {n} tokens exceeds max_motion_tokens")));
        }
        let keys = self.motion_in.forward(latents)?.broadcast_add(&self.motion_pos.prefix(n)?)?;
        Ok(CrossKeys { keys, bias: self.key_padding(lens, b, n)? })
    }

    /// Cross-attention keys from text hidden states, skipping padding.
    pub fn text_keys(&self, states: &Tensor, ids: &[Vec<u32>]) -> Result<CrossKeys> {
        let (b, t, _) = states.dims3()?;
        let allowed: Vec<bool> = (0..b).flat_map(|i| (0..t).map(move |j| ids[i][j] != PAD)).collect();
        Ok(CrossKeys { keys: states.clone(), bias: attention_bias(&allowed, b, 1, t, self.dtype)? })
    }

    /// Motion-token stream `[start, b_0 .. b_{n-2}]` for teacher-forced motion generation.
    pub fn code_stream(&self, inputs: &Tensor) -> Result<Tensor> {
        let n = inputs.dim(1)?;
        if n > self.code_pos.table().dim(0)? {
            return Err(Error::Invalid(format!("motion of {n} tokens exceeds max_motion_tokens")));
        }
        Ok(self.code_emb.forward(inputs)?.broadcast_add(&self.code_pos.prefix(n)?)?)
    }

    fn key_padding(&self, lens: &[usize], b: usize, n: usize) -> Result<Tensor> {
        let allowed: Vec<bool> = (0..b).flat_map(|i| (0..n).map(move |j| j < lens[i])).collect();
        attention_bias(&allowed, b, 1, n, self.dtype)
    }

    /// Runs the blocks over one or both streams. `self_bias` covers the concatenated
    /// `[motion; text]` sequence; `cross` feeds the motion stream's cross-attention.
    pub fn run(
        &self,
        motion: Option<Tensor>,
        text: Option<Tensor>,
        self_bias: Option<&Tensor>,
        cross: Option<&CrossKeys>,
    ) -> Result<Streams> {
        let tm = match &motion {
            Some(m) => m.dim(1)?,
            None => 0,
        };
        let mut m = motion;
        let mut t = text;
        for blk in &self.blocks {
            let x = match (&m, &t) {
                (Some(a), Some(b)) => Tensor::cat(&[a, b], 1)?,
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b.clone(),
                (None, None) => return Err(Error::Invalid("no input stream".into())),
            };
            let xn = blk.ln_sa.forward(&x)?;
            let x = (&x + blk.sa.forward(&xn, &xn, self_bias)?)?;
            let total = x.dim(1)?;
            m = if tm > 0 { Some(x.narrow(1, 0, tm)?) } else { None };
            t = if total > tm { Some(x.narrow(1, tm, total - tm)?) } else { None };
            if let Some(mm) = &m {
                let mut mm = mm.clone();
                if let Some(c) = cross {
                    mm = (&mm + blk.ca.forward(&blk.ln_ca.forward(&mm)?, &c.keys, Some(&c.bias))?)?;
                }
                mm = (&mm + blk.ff_m.forward(&blk.ln_ff_m.forward(&mm)?)?)?;
                m = Some(mm);
            }
            if let Some(tt) = &t {
                t = Some((tt + blk.ff_t.forward(&blk.ln_ff_t.forward(tt)?)?)?);
            }
        }
        Ok(Streams {
            motion: m.map(|x| self.ln_motion.forward(&x)).transpose()?,
            text: t.map(|x| self.ln_text.forward(&x)).transpose()?,
        })
    }
}

/// Row-wise L2 normalization over the last axis.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Self-attention allow matrix for the concatenated `[motion (tm); text (tt)]` sequence.
/// `text_valid[b][j]` marks non-padding text positions; `motion_valid[b][i]` likewise for
/// the motion stream (queries always valid).
pub(crate) fn self_mask(
    mode: AttentionMaskMode,
    num_queries: usize,
    motion_valid: &[Vec<bool>],
    text_valid: &[Vec<bool>],
    dtype: DType,
) -> Result<Tensor> {
    let b = motion_valid.len().max(text_valid.len());
    let tm = motion_valid.first().map_or(0, Vec::len);
    let tt = text_valid.first().map_or(0, Vec::len);
    let n = tm + tt;
    let mut allowed = vec![false; b * n * n];
    for bi in 0..b {
        let key_ok = |j: usize| -> bool {
            if j < tm {
                motion_valid[bi][j]
            } else {
                text_valid[bi][j - tm]
            }
        };
        for i in 0..n {
            for j in 0..n {
                let (qi_m, kj_m) = (i < tm, j < tm);
                let ok = match mode {
                    AttentionMaskMode::Unimodal => qi_m == kj_m,
                    AttentionMaskMode::Bidirectional => true,
                    AttentionMaskMode::CausalText => match (qi_m, kj_m) {
                        (true, true) => true,
                        (true, false) => false,
                        (false, true) => true,
                        (false, false) => j <= i,
                    },
                    AttentionMaskMode::CausalMotion => {
                        // within the motion stream the first `num_queries` rows are a prefix
                        if qi_m && kj_m {
                            if j < num_queries {
                                true
                            } else {
                                i >= num_queries && j <= i
                            }
                        } else {
                            qi_m == kj_m
                        }
                    }
                };
                // the diagonal stays open so padded rows have a finite softmax
                allowed[(bi * n + i) * n + j] = (ok && key_ok(j)) || i == j;
            }
        }
    }
    attention_bias(&allowed, b, n, n, dtype)
}

/// Pads id rows with `PAD` to a common length, returning the `(B, T)` tensor.
pub(crate) fn pad_ids(rows: &[Vec<u32>], pad: u32) -> Result<(Tensor, Vec<Vec<u32>>)> {
    let t = rows.iter().map(Vec::len).max().unwrap_or(0);
    let padded: Vec<Vec<u32>> = rows
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(t, pad);
            r
        })
        .collect();
    let flat = padded.iter().flatten().copied().collect();
    Ok((nn::ids(flat, (rows.len(), t))?, padded))
}
