//! Language–motion alignment.
//!
//! Learnable query tokens read the frozen tokenizer's motion latents through
//! cross-attention, while a text transformer sharing the same self-attention blocks reads
//! the caption. Four objectives train the pair jointly: contrastive alignment, pair
//! matching, motion-grounded text generation and text-grounded motion generation.

mod losses;
mod model;

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{self, Dataset, MotionSequence};
use crate::nn::{self, OptimConfig, ParamStore, Trainer};
use crate::text::{Vocabulary, BOS, CLS, PAD, SEP};
use crate::vq::MotionTokenizer;
use crate::{seed, Error, Result};

pub use losses::{
    bce_with_logits, contrastive_from_similarity, pair_logits, pair_similarity, similarity_matrix,
    token_cross_entropy,
};
pub use model::{l2_normalize, AttentionMaskMode};
use model::{pad_ids, self_mask, Network};

pub const MODULE_TAG: &str = "lamp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskWeights {
    pub contrastive: f64,
    pub matching: f64,
    pub mgt: f64,
    pub tgm: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { contrastive: 1.0, matching: 1.0, mgt: 1.0, tgm: 1.0 }
    }
}

impl TaskWeights {
    pub fn contrastive_only() -> Self {
        Self { contrastive: 1.0, matching: 0.0, mgt: 0.0, tgm: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LampConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_mult: usize,
    pub num_queries: usize,
    pub proj_dim: usize,
    /// Initial contrastive temperature τ; `1/τ` is learned in log space.
    pub temperature: f64,
    pub weights: TaskWeights,
    pub max_text_len: usize,
    pub max_motion_tokens: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for LampConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 128,
            ffn_mult: 4,
            num_queries: 8,
            proj_dim: 64,
            temperature: 0.07,
            weights: TaskWeights::default(),
            max_text_len: 32,
            max_motion_tokens: 64,
            batch_size: 32,
            iterations: 3000,
            optim: OptimConfig { lr: 1e-4, warmup: 200, ..Default::default() },
            seed: 0,
        }
    }
}

impl LampConfig {
    /// Shape of the full-size model (49 queries, hidden 768, 12 layers).
    pub fn full_scale() -> Self {
        Self { layers: 12, heads: 12, hidden: 768, num_queries: 49, proj_dim: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.num_queries == 0 || self.hidden == 0 || self.proj_dim == 0 || self.layers == 0 {
            return Err(Error::Config("num_queries, hidden, proj_dim and layers must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config("hidden must be divisible by heads".into()));
        }
        if self.max_text_len < 3 || self.max_motion_tokens == 0 {
            return Err(Error::Config("max_text_len must be >= 3 and max_motion_tokens > 0".into()));
        }
        let w = &self.weights;
        if [w.contrastive, w.matching, w.mgt, w.tgm].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("task weights must be finite and non-negative".into()));
        }
        if self.batch_size < 2 && w.matching > 0.0 {
            return Err(Error::Config("matching needs batch_size >= 2".into()));
        }
        Ok(())
    }
}

/// Frozen-encoder view of one motion: latents `n × d` and their codebook tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionInput {
    pub n: usize,
    pub latents: Vec<f32>,
    pub tokens: Vec<u32>,
}

impl MotionInput {
    /// Normalizes, encodes and quantizes a raw motion with the frozen tokenizer.
    pub fn from_raw(tokenizer: &MotionTokenizer, raw: &MotionSequence) -> Result<Self> {
        let normed = corpus::normalize(raw, tokenizer.stats())?;
        let latents = tokenizer.encode(&normed)?;
        let (tokens, _) = tokenizer.quantize(&latents)?;
        Ok(Self { n: latents.n, latents: latents.vectors, tokens: tokens.tokens })
    }
}

/// Projected, L2-normalized motion feature: `rows × dim`, one row per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedMotion {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl AlignedMotion {
    pub fn row(&self, l: usize) -> &[f32] {
        &self.values[l * self.dim..(l + 1) * self.dim]
    }

    pub fn similarity(&self, f_t: &[f32]) -> f32 {
        pair_similarity(&self.values, f_t)
    }
}

/// Loss components of one step. Skipped (zero-weight) tasks are exact zeros.
#[derive(Debug, Clone)]
pub struct AlignmentLosses {
    pub contrastive: Tensor,
    pub matching: Tensor,
    pub mgt: Tensor,
    pub tgm: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLossValues {
    pub contrastive: f64,
    pub matching: f64,
    pub mgt: f64,
    pub tgm: f64,
    pub total: f64,
}

impl AlignmentLosses {
    pub fn values(&self) -> Result<AlignmentLossValues> {
        Ok(AlignmentLossValues {
            contrastive: nn::scalar(&self.contrastive)?,
            matching: nn::scalar(&self.matching)?,
            mgt: nn::scalar(&self.mgt)?,
            tgm: nn::scalar(&self.tgm)?,
            total: nn::scalar(&self.total)?,
        })
    }
}

/// One training batch: motions with one paired text each.
#[derive(Debug, Clone)]
pub struct LampBatch {
    pub motions: Vec<MotionInput>,
    /// Word ids without special tokens.
    pub texts: Vec<Vec<u32>>,
    /// Attribute group of each pair; pairs in one group are never used as negatives.
    pub groups: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LampMeta {
    vocab: Vec<String>,
    codebook_size: usize,
    code_dim: usize,
}

/// Trained (or freshly initialized) alignment model with its text vocabulary.
pub struct LampModel {
    config: LampConfig,
    vocab: Vocabulary,
    codebook_size: usize,
    code_dim: usize,
    tokenizer_hash: String,
    store: ParamStore,
    net: Network,
}

impl LampModel {
    pub fn init(config: &LampConfig, vocab: Vocabulary, codebook_size: usize, code_dim: usize) -> Result<Self> {
        Self::init_with_dtype(config, vocab, codebook_size, code_dim, DType::F32)
    }

    pub fn init_with_dtype(
        config: &LampConfig,
        vocab: Vocabulary,
        codebook_size: usize,
        code_dim: usize,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed::derive(config.seed, "lamp/params"), dtype);
        let net = Network::new(&mut store, config, vocab.len(), codebook_size, code_dim)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            codebook_size,
            code_dim,
            tokenizer_hash: String::new(),
            store,
            net,
        })
    }

    pub fn config(&self) -> &LampConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn tokenizer_hash(&self) -> &str {
        &self.tokenizer_hash
    }

    pub fn set_tokenizer_hash(&mut self, hash: &str) {
        self.tokenizer_hash = hash.to_string();
    }

    pub fn dtype(&self) -> DType {
        self.net.dtype()
    }

    pub fn num_queries(&self) -> usize {
        self.config.num_queries
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn proj_dim(&self) -> usize {
        self.config.proj_dim
    }

    pub fn logit_scale(&self) -> Result<f64> {
        Ok(nn::scalar(&self.net.logit_scale)?.exp())
    }

    /// Fails when the frozen tokenizer is not the one this model was trained with.
    pub fn check_tokenizer(&self, tokenizer: &MotionTokenizer) -> Result<()> {
        let cb = tokenizer.codebook();
        if cb.size() != self.codebook_size || cb.dim() != self.code_dim {
            return Err(Error::Checkpoint(format!(
                "tokenizer codebook {}x{} does not match alignment model {}x{}",
                cb.size(),
                cb.dim(),
                self.codebook_size,
                self.code_dim
            )));
        }
        if !self.tokenizer_hash.is_empty() && self.tokenizer_hash != tokenizer.stats_hash() {
            return Err(Error::Checkpoint("tokenizer statistics differ from the alignment model's".into()));
        }
        Ok(())
    }

    fn word_ids(&self, text: &str) -> Result<Vec<u32>> {
        let ids = self.vocab.sample(text)?.token_ids;
        Ok(self.truncate(ids))
    }

    fn truncate(&self, mut ids: Vec<u32>) -> Vec<u32> {
        ids.truncate(self.config.max_text_len - 2);
        ids
    }

    fn latent_batch(&self, motions: &[&MotionInput]) -> Result<(Tensor, Vec<usize>)> {
        let n = motions.iter().map(|m| m.n).max().unwrap_or(0);
        let d = self.code_dim;
        let mut data = vec![0f32; motions.len() * n * d];
        for (b, m) in motions.iter().enumerate() {
            if m.latents.len() != m.n * d {
                return Err(Error::DimMismatch(format!("latents of {} values for n={} d={d}", m.latents.len(), m.n)));
            }
            data[b * n * d..b * n * d + m.n * d].copy_from_slice(&m.latents);
        }
        let lens = motions.iter().map(|m| m.n).collect();
        Ok((nn::from_f32(data, (motions.len(), n, d), self.dtype())?, lens))
    }

    /// Query outputs `(B, L, h)` after reading each motion (unimodal pass).
    fn motion_hidden(&self, motions: &[&MotionInput]) -> Result<Tensor> {
        let (lat, lens) = self.latent_batch(motions)?;
        let keys = self.net.latent_keys(&lat, &lens)?;
        let out = self.net.run(Some(self.net.query_stream(motions.len())?), None, None, Some(&keys))?;
        out.motion.ok_or_else(|| Error::Invalid("motion stream missing".into()))
    }

    fn motion_features_t(&self, motions: &[&MotionInput]) -> Result<Tensor> {
        l2_normalize(&self.net.motion_proj.forward(&self.motion_hidden(motions)?)?)
    }

    /// Unimodal text pass over `[CLS] words [SEP]`; returns hidden states and padded ids.
    fn text_hidden(&self, texts: &[Vec<u32>]) -> Result<(Tensor, Vec<Vec<u32>>)> {
        let rows: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| std::iter::once(CLS).chain(t.iter().copied()).chain(std::iter::once(SEP)).collect())
            .collect();
        let (ids, padded) = pad_ids(&rows, PAD)?;
        let valid: Vec<Vec<bool>> = padded.iter().map(|r| r.iter().map(|&t| t != PAD).collect()).collect();
        let bias = self_mask(AttentionMaskMode::Bidirectional, 0, &[], &valid, self.dtype())?;
        let out = self.net.run(None, Some(self.net.text_stream(&ids)?), Some(&bias), None)?;
        Ok((out.text.ok_or_else(|| Error::Invalid("text stream missing".into()))?, padded))
    }

    fn text_features_t(&self, states: &Tensor) -> Result<Tensor> {
        let cls = states.narrow(1, 0, 1)?.squeeze(1)?;
        l2_normalize(&self.net.text_proj.forward(&cls)?)
    }

    /// Query outputs `(B, L, h)` after the queries read the text states (no motion input).
    fn query_text_interaction(&self, states: &Tensor, padded: &[Vec<u32>]) -> Result<Tensor> {
        let keys = self.net.text_keys(states, padded)?;
        let out = self.net.run(Some(self.net.query_stream(padded.len())?), None, None, Some(&keys))?;
        out.motion.ok_or_else(|| Error::Invalid("motion stream missing".into()))
    }

    pub fn motion_features(&self, motion: &MotionInput) -> Result<AlignedMotion> {
        Ok(self.motion_features_many(std::slice::from_ref(motion))?.remove(0))
    }

    pub fn motion_features_many(&self, motions: &[MotionInput]) -> Result<Vec<AlignedMotion>> {
        let (l, p) = (self.num_queries(), self.proj_dim());
        let mut out = Vec::with_capacity(motions.len());
        for chunk in motions.chunks(64) {
            let refs: Vec<&MotionInput> = chunk.iter().collect();
            let f = nn::to_vec_f32(&self.motion_features_t(&refs)?)?;
            out.extend(f.chunks(l * p).map(|v| AlignedMotion { rows: l, dim: p, values: v.to_vec() }));
        }
        Ok(out)
    }

    pub fn text_features(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.text_features_many(&[text])?.remove(0))
    }

    pub fn text_features_many(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let p = self.proj_dim();
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(64) {
            let ids = chunk.iter().map(|t| self.word_ids(t)).collect::<Result<Vec<_>>>()?;
            let (states, _) = self.text_hidden(&ids)?;
            let f = nn::to_vec_f32(&self.text_features_t(&states)?)?;
            out.extend(f.chunks(p).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Per-word contextual embeddings (hidden width, `[CLS]`/`[SEP]` excluded).
    pub fn token_embeddings(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let ids = self.word_ids(text)?;
        let (states, _) = self.text_hidden(std::slice::from_ref(&ids))?;
        let h = self.hidden();
        let v = nn::to_vec_f64(&states.narrow(1, 1, ids.len())?)?;
        Ok(v.chunks(h).map(<[f64]>::to_vec).collect())
    }

    /// Text condition rows for generation. With `query_interaction` these are the `L`
    /// query outputs after reading the text (hidden width); otherwise the single text
    /// feature `f_t` (projection width).
    pub fn condition_many(&self, texts: &[&str], query_interaction: bool) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(64) {
            let ids = chunk.iter().map(|t| self.word_ids(t)).collect::<Result<Vec<_>>>()?;
            let (states, padded) = self.text_hidden(&ids)?;
            let rows = if query_interaction {
                self.query_text_interaction(&states, &padded)?
            } else {
                self.text_features_t(&states)?
            };
            let per = rows.elem_count() / chunk.len();
            out.extend(nn::to_vec_f32(&rows)?.chunks(per).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// `(rows, width)` of [`Self::condition_many`] outputs.
    pub fn condition_shape(&self, query_interaction: bool) -> (usize, usize) {
        if query_interaction {
            (self.num_queries(), self.hidden())
        } else {
            (1, self.proj_dim())
        }
    }

    /// Matching probability for each (motion, text) pair.
    pub fn matching_scores(&self, motions: &[&MotionInput], texts: &[&str]) -> Result<Vec<f32>> {
        let ids = texts.iter().map(|t| self.word_ids(t)).collect::<Result<Vec<_>>>()?;
        let logits = self.matching_logits(motions, &ids)?;
        Ok(nn::to_vec_f32(&candle_nn::ops::sigmoid(&logits)?)?)
    }

    fn matching_logits(&self, motions: &[&MotionInput], texts: &[Vec<u32>]) -> Result<Tensor> {
        let b = motions.len();
        let l = self.num_queries();
        let (lat, lens) = self.latent_batch(motions)?;
        let keys = self.net.latent_keys(&lat, &lens)?;
        let rows: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| std::iter::once(CLS).chain(t.iter().copied()).chain(std::iter::once(SEP)).collect())
            .collect();
        let (ids, padded) = pad_ids(&rows, PAD)?;
        let text_valid: Vec<Vec<bool>> = padded.iter().map(|r| r.iter().map(|&t| t != PAD).collect()).collect();
        let motion_valid = vec![vec![true; l]; b];
        let bias = self_mask(AttentionMaskMode::Bidirectional, l, &motion_valid, &text_valid, self.dtype())?;
        let out = self.net.run(
            Some(self.net.query_stream(b)?),
            Some(self.net.text_stream(&ids)?),
            Some(&bias),
            Some(&keys),
        )?;
        let q = out.motion.ok_or_else(|| Error::Invalid("motion stream missing".into()))?;
        pair_logits(&self.net.match_head.forward(&q)?.squeeze(2)?)
    }

    /// Per-position text logits `(B, T, V)` for `[BOS] words` given the motion, under the
    /// causal text mask; position `j` predicts word `j` (or `[SEP]` after the last word).
    pub fn mgt_logits(&self, motions: &[&MotionInput], texts: &[Vec<u32>]) -> Result<Tensor> {
        let b = motions.len();
        let l = self.num_queries();
        let (lat, lens) = self.latent_batch(motions)?;
        let keys = self.net.latent_keys(&lat, &lens)?;
        let rows: Vec<Vec<u32>> = texts.iter().map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect()).collect();
        let (ids, padded) = pad_ids(&rows, PAD)?;
        let text_valid: Vec<Vec<bool>> =
            padded.iter().enumerate().map(|(i, r)| (0..r.len()).map(|j| j < rows[i].len()).collect()).collect();
        let motion_valid = vec![vec![true; l]; b];
        let bias = self_mask(AttentionMaskMode::CausalText, l, &motion_valid, &text_valid, self.dtype())?;
        let out = self.net.run(
            Some(self.net.query_stream(b)?),
            Some(self.net.text_stream(&ids)?),
            Some(&bias),
            Some(&keys),
        )?;
        let t = out.text.ok_or_else(|| Error::Invalid("text stream missing".into()))?;
        self.net.lm_head.forward(&t)
    }

    /// Per-position motion-code logits `(B, n, S)` for teacher-forced text-grounded motion
    /// generation; position `i` predicts token `i` from the text and tokens `< i`.
    pub fn tgm_logits(&self, texts: &[Vec<u32>], tokens: &[Vec<u32>]) -> Result<Tensor> {
        let (states, padded) = self.text_hidden(texts)?;
        self.tgm_logits_from_states(&states, &padded, tokens)
    }

    fn tgm_logits_from_states(&self, states: &Tensor, padded: &[Vec<u32>], tokens: &[Vec<u32>]) -> Result<Tensor> {
        let b = tokens.len();
        let l = self.num_queries();
        let start = self.codebook_size as u32;
        for t in tokens.iter().flatten() {
            if *t >= start {
                return Err(Error::TokenOutOfRange { token: *t, size: self.codebook_size });
            }
        }
        let inputs: Vec<Vec<u32>> = tokens
            .iter()
            .map(|t| std::iter::once(start).chain(t.iter().take(t.len().saturating_sub(1)).copied()).collect())
            .collect();
        let (ids, _) = pad_ids(&inputs, start)?;
        let n = ids.dim(1)?;
        let stream = Tensor::cat(&[&self.net.query_stream(b)?, &self.net.code_stream(&ids)?], 1)?;
        let motion_valid: Vec<Vec<bool>> = tokens
            .iter()
            .map(|t| (0..l + n).map(|j| j < l || j - l < t.len()).collect())
            .collect();
        let bias = self_mask(AttentionMaskMode::CausalMotion, l, &motion_valid, &[], self.dtype())?;
        let keys = self.net.text_keys(states, padded)?;
        let out = self.net.run(Some(stream), None, Some(&bias), Some(&keys))?;
        let m = out.motion.ok_or_else(|| Error::Invalid("motion stream missing".into()))?;
        self.net.tgm_head.forward(&m.narrow(1, l, n)?)
    }

    /// Samples one hard negative text per motion, proportional to `softmax(scale · sim)`
    /// over the batch, skipping texts of the same group.
    pub fn sample_negatives(&self, sims: &[f32], groups: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
        let b = groups.len();
        let scale = self.logit_scale()?;
        (0..b)
            .map(|i| {
                let cands: Vec<usize> = (0..b).filter(|&j| j != i && groups[j] != groups[i]).collect();
                let cands = if cands.is_empty() { (0..b).filter(|&j| j != i).collect() } else { cands };
                if cands.is_empty() {
                    return Err(Error::Invalid("matching needs at least two pairs".into()));
                }
                let max = cands.iter().map(|&j| sims[i * b + j]).fold(f32::NEG_INFINITY, f32::max);
                let w: Vec<f64> =
                    cands.iter().map(|&j| (scale * (sims[i * b + j] - max) as f64).exp()).collect();
                let dist = rand_distr::WeightedIndex::new(&w).map_err(|e| Error::Invalid(e.to_string()))?;
                Ok(cands[rng.sample(dist)])
            })
            .collect()
    }

    /// All four losses on a batch. Hard negatives for matching come from `rng`.
    pub fn losses(&self, batch: &LampBatch, rng: &mut impl Rng) -> Result<AlignmentLosses> {
        let b = batch.motions.len();
        if b == 0 || batch.texts.len() != b || batch.groups.len() != b {
            return Err(Error::Invalid("batch needs one text and group per motion".into()));
        }
        let w = &self.config.weights;
        let zero = Tensor::zeros((), self.dtype(), self.net.queries.device())?;
        let motions: Vec<&MotionInput> = batch.motions.iter().collect();
        let texts: Vec<Vec<u32>> = batch.texts.iter().map(|t| self.truncate(t.clone())).collect();
        let (states, padded) = self.text_hidden(&texts)?;

        let mut sims_host = None;
        let contrastive = if w.contrastive > 0.0 || w.matching > 0.0 {
            let f_m = self.motion_features_t(&motions)?;
            let f_t = self.text_features_t(&states)?;
            let sims = similarity_matrix(&f_m, &f_t)?;
            sims_host = Some(nn::to_vec_f32(&sims)?);
            if w.contrastive > 0.0 {
                contrastive_from_similarity(&sims, &self.net.logit_scale.exp()?)?
            } else {
                zero.clone()
            }
        } else {
            zero.clone()
        };

        let matching = if w.matching > 0.0 {
            let negs = self.sample_negatives(sims_host.as_deref().unwrap_or(&[]), &batch.groups, rng)?;
            self.matching_loss(&motions, &texts, &negs)?
        } else {
            zero.clone()
        };

        let mgt = if w.mgt > 0.0 { self.mgt_loss(&motions, &texts)? } else { zero.clone() };

        let tgm = if w.tgm > 0.0 {
            let tokens: Vec<Vec<u32>> = batch.motions.iter().map(|m| m.tokens.clone()).collect();
            let logits = self.tgm_logits_from_states(&states, &padded, &tokens)?;
            tgm_loss_from_logits(&logits, &tokens)?
        } else {
            zero.clone()
        };

        let total = ((((&contrastive * w.contrastive)? + (&matching * w.matching)?)? + (&mgt * w.mgt)?)?
            + (&tgm * w.tgm)?)?;
        Ok(AlignmentLosses { contrastive, matching, mgt, tgm, total })
    }

    /// Binary cross-entropy over `B` positive pairs and `B` negatives pairing motion `i`
    /// with text `negatives[i]`.
    pub fn matching_loss(&self, motions: &[&MotionInput], texts: &[Vec<u32>], negatives: &[usize]) -> Result<Tensor> {
        let b = motions.len();
        if b < 2 {
            return Err(Error::Invalid("matching needs at least two pairs".into()));
        }
        let mut pm: Vec<&MotionInput> = motions.to_vec();
        pm.extend(motions.iter().copied());
        let mut pt: Vec<Vec<u32>> = texts.to_vec();
        pt.extend(negatives.iter().map(|&j| texts[j].clone()));
        let labels: Vec<f32> = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
        bce_with_logits(&self.matching_logits(&pm, &pt)?, &labels)
    }

    pub fn mgt_loss(&self, motions: &[&MotionInput], texts: &[Vec<u32>]) -> Result<Tensor> {
        let logits = self.mgt_logits(motions, texts)?;
        let t = logits.dim(1)?;
        let mut targets = Vec::with_capacity(texts.len() * t);
        let mut weights = Vec::with_capacity(texts.len() * t);
        for text in texts {
            for j in 0..t {
                let (target, w) = match j.cmp(&text.len()) {
                    std::cmp::Ordering::Less => (text[j], 1.0),
                    std::cmp::Ordering::Equal => (SEP, 1.0),
                    std::cmp::Ordering::Greater => (PAD, 0.0),
                };
                targets.push(target);
                weights.push(w);
            }
        }
        token_cross_entropy(&logits, &targets, &weights)
    }

    pub fn tgm_loss(&self, texts: &[Vec<u32>], tokens: &[Vec<u32>]) -> Result<Tensor> {
        tgm_loss_from_logits(&self.tgm_logits(texts, tokens)?, tokens)
    }

    /// Texts as word ids under this model's vocabulary (truncated to `max_text_len`).
    pub fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<u32>>> {
        texts.iter().map(|t| self.word_ids(t)).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(MODULE_TAG, &self.config)?;
        ck.stats_hash = self.tokenizer_hash.clone();
        ck.extra = serde_json::to_value(LampMeta {
            vocab: self.vocab.words().to_vec(),
            codebook_size: self.codebook_size,
            code_dim: self.code_dim,
        })?;
        ck.tensors = self.store.snapshot()?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.module != MODULE_TAG {
            return Err(Error::Checkpoint(format!("expected `{MODULE_TAG}` checkpoint, got `{}`", ck.module)));
        }
        let config: LampConfig = ck.config_as()?;
        config.validate()?;
        let meta: LampMeta = ck.extra_as()?;
        let vocab = Vocabulary::from_words(meta.vocab);
        let mut store = ParamStore::from_tensors(ck.tensors.clone(), DType::F32)?;
        let net = Network::new(&mut store, &config, vocab.len(), meta.codebook_size, meta.code_dim)?;
        if store.len() != ck.tensors.len() {
            return Err(Error::Checkpoint("alignment checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            config,
            vocab,
            codebook_size: meta.codebook_size,
            code_dim: meta.code_dim,
            tokenizer_hash: ck.stats_hash.clone(),
            store,
            net,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, MODULE_TAG)?)
    }
}

fn tgm_loss_from_logits(logits: &Tensor, tokens: &[Vec<u32>]) -> Result<Tensor> {
    let n = logits.dim(1)?;
    let mut targets = Vec::with_capacity(tokens.len() * n);
    let mut weights = Vec::with_capacity(tokens.len() * n);
    for t in tokens {
        for i in 0..n {
            targets.push(t.get(i).copied().unwrap_or(0));
            weights.push(if i < t.len() { 1.0 } else { 0.0 });
        }
    }
    token_cross_entropy(logits, &targets, &weights)
}

/// Motions of a dataset as seen by the frozen tokenizer, plus every (sample, text) pair.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub motions: Vec<MotionInput>,
    pub groups: Vec<usize>,
    /// `(sample index, text)` for every caption.
    pub texts: Vec<(usize, String)>,
}

impl PreparedCorpus {
    pub fn new(dataset: &Dataset, tokenizer: &MotionTokenizer) -> Result<Self> {
        let motions = dataset
            .motions()
            .iter()
            .map(|m| MotionInput::from_raw(tokenizer, m))
            .collect::<Result<Vec<_>>>()?;
        let mut keys: Vec<String> = (0..dataset.len()).map(|i| dataset.group_key(i)).collect();
        let all = keys.clone();
        keys.sort();
        keys.dedup();
        let groups = all.iter().map(|k| keys.binary_search(k).unwrap_or(0)).collect();
        let texts = dataset
            .records()
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.texts.iter().map(move |t| (i, t.clone())))
            .collect();
        Ok(Self { motions, groups, texts })
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    /// Draws a batch of samples from distinct groups (as far as possible), each with one
    /// random caption.
    pub fn sample_batch(&self, vocab: &Vocabulary, size: usize, rng: &mut impl Rng) -> Result<LampBatch> {
        let mut by_sample: Vec<Vec<&str>> = vec![Vec::new(); self.len()];
        for (i, t) in &self.texts {
            by_sample[*i].push(t);
        }
        let mut order: Vec<usize> = (0..self.len()).filter(|&i| !by_sample[i].is_empty()).collect();
        if order.is_empty() {
            return Err(Error::EmptyDataset);
        }
        order.shuffle(rng);
        let mut seen = std::collections::BTreeSet::new();
        let mut picked: Vec<usize> = Vec::with_capacity(size);
        for &i in &order {
            if picked.len() == size {
                break;
            }
            if seen.insert(self.groups[i]) {
                picked.push(i);
            }
        }
        for &i in &order {
            if picked.len() == size {
                break;
            }
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        let mut batch = LampBatch { motions: Vec::new(), texts: Vec::new(), groups: Vec::new() };
        for i in picked {
            let text = by_sample[i][rng.gen_range(0..by_sample[i].len())];
            batch.motions.push(self.motions[i].clone());
            batch.texts.push(vocab.sample(text)?.token_ids);
            batch.groups.push(self.groups[i]);
        }
        Ok(batch)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LampTrainReport {
    pub initial: AlignmentLossValues,
    pub final_: AlignmentLossValues,
    pub curve: Vec<(usize, AlignmentLossValues)>,
}

/// Trains the alignment model on every sample of `dataset` against a frozen tokenizer.
pub fn train_lamp(
    dataset: &Dataset,
    tokenizer: &MotionTokenizer,
    config: &LampConfig,
) -> Result<(LampModel, LampTrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = Vocabulary::build(dataset.records().iter().flat_map(|r| r.texts.iter().map(String::as_str)));
    let cb = tokenizer.codebook();
    let mut model = LampModel::init(config, vocab, cb.size(), cb.dim())?;
    model.set_tokenizer_hash(&tokenizer.stats_hash());
    let data = PreparedCorpus::new(dataset, tokenizer)?;
    let mut report = LampTrainReport::default();
    if config.iterations == 0 {
        return Ok((model, report));
    }
    let held = data.sample_batch(&model.vocab, config.batch_size, &mut seed::stage_rng(config.seed, "lamp/held"))?;
    let held_eval = |m: &LampModel| -> Result<AlignmentLossValues> {
        m.losses(&held, &mut seed::stage_rng(config.seed, "lamp/held-negatives"))?.values()
    };
    report.initial = held_eval(&model)?;
    let mut trainer = Trainer::new(model.store.vars(), config.optim.clone(), config.iterations)?;
    let mut rng = seed::stage_rng(config.seed, "lamp/batches");
    for step in 0..config.iterations {
        let batch = data.sample_batch(&model.vocab, config.batch_size, &mut rng)?;
        let losses = model.losses(&batch, &mut rng)?;
        trainer.step(&losses.total)?;
        if step % 50 == 0 || step + 1 == config.iterations {
            let v = losses.values()?;
            log::info!(
                "lamp step {step}: total {:.4} (contrastive {:.4}, matching {:.4}, mgt {:.4}, tgm {:.4})",
                v.total,
                v.contrastive,
                v.matching,
                v.mgt,
                v.tgm
            );
            report.curve.push((step, v));
        }
    }
    report.final_ = held_eval(&model)?;
    Ok((model, report))
}
