//! Motion captioning: aligned motion features are projected into the input space of a
//! small decoder-only language model, followed by a fixed prompt, and the caption is
//! decoded greedily. [`bertscore`] holds the token-level caption metric.

pub mod bertscore;
#[cfg(test)]
mod tests;

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedMotion, LampModel, MotionInput};
use crate::checkpoint::Checkpoint;
use crate::corpus::{Dataset, MotionSequence};
use crate::nn::{self, attention_bias, join, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, OptimConfig, ParamStore, Trainer};
use crate::text::{self, Vocabulary};
use crate::vq::MotionTokenizer;
use crate::{seed, Error, Result};

pub use bertscore::{lamp_bertscore, BertScore, TokenEmbedder};

pub const MODULE_TAG: &str = "m2t";
pub const DEFAULT_PROMPT: &str = "Describe the motion:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_mult: usize,
    /// Rank of the low-rank adapters on attention projections; 0 trains every weight.
    pub adapter_rank: usize,
    pub prompt: String,
    /// Longest caption in words, end token excluded.
    pub max_caption_len: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 128,
            ffn_mult: 4,
            adapter_rank: 0,
            prompt: DEFAULT_PROMPT.into(),
            max_caption_len: 16,
            batch_size: 32,
            iterations: 2000,
            optim: OptimConfig { lr: 5e-4, warmup: 100, ..Default::default() },
            seed: 0,
        }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.batch_size == 0 || self.max_caption_len == 0 {
            return Err(Error::Config("layers, hidden, batch_size and max_caption_len must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config("hidden must be divisible by heads".into()));
        }
        if self.prompt.split_whitespace().next().is_none() {
            return Err(Error::Config("prompt must contain at least one word".into()));
        }
        Ok(())
    }
}

struct Block {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

struct Network {
    proj: Linear,
    tok_emb: Embedding,
    pos_emb: Embedding,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
}

impl Network {
    fn new(ps: &mut ParamStore, cfg: &CaptionerConfig, vocab: usize, feat_dim: usize, positions: usize) -> Result<Self> {
        let h = cfg.hidden;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let n = format!("lm.layers.{i}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(ps, &join(&n, "attn_norm"), h)?,
                attn: MultiHeadAttention::new(ps, &join(&n, "attn"), h, cfg.heads, cfg.adapter_rank)?,
                ln_ffn: LayerNorm::new(ps, &join(&n, "ffn_norm"), h)?,
                ffn: FeedForward::new(ps, &join(&n, "ffn"), h, h * cfg.ffn_mult)?,
            });
        }
        Ok(Self {
            proj: Linear::new(ps, "proj", feat_dim, h)?,
            tok_emb: Embedding::new(ps, "lm.tok_emb", vocab, h)?,
            pos_emb: Embedding::new(ps, "lm.pos_emb", positions, h)?,
            blocks,
            ln_out: LayerNorm::new(ps, "lm.final_norm", h)?,
            head: Linear::new(ps, "lm.head", h, vocab)?,
        })
    }

    /// `prefix (B, L, H)` followed by `ids (B, m)`; causal over the whole sequence.
    /// Returns logits `(B, m, V)` for the token positions.
    fn forward(&self, prefix: &Tensor, ids: &[Vec<u32>]) -> Result<Tensor> {
        let (b, l, _) = prefix.dims3()?;
        let m = ids[0].len();
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        let x = self.tok_emb.forward(&nn::ids(flat, (b, m))?)?;
        let t = l + m;
        let h0 = Tensor::cat(&[prefix, &x], 1)?.broadcast_add(&self.pos_emb.prefix(t)?)?;
        let allowed: Vec<bool> = (0..t * t).map(|k| k % t <= k / t).collect();
        let bias = attention_bias(&allowed, 1, t, t, prefix.dtype())?;
        let mut h = h0;
        for blk in &self.blocks {
            let a = blk.ln_attn.forward(&h)?;
            h = (&h + blk.attn.forward(&a, &a, Some(&bias))?)?;
            h = (&h + blk.ffn.forward(&blk.ln_ffn.forward(&h)?)?)?;
        }
        self.head.forward(&self.ln_out.forward(&h.narrow(1, l, m)?)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CaptionerMeta {
    vocab: Vocabulary,
    feature_rows: usize,
    feature_dim: usize,
}

pub struct CaptionerModel {
    config: CaptionerConfig,
    vocab: Vocabulary,
    prompt_ids: Vec<u32>,
    feature_rows: usize,
    feature_dim: usize,
    tokenizer_hash: String,
    store: ParamStore,
    net: Network,
}

impl CaptionerModel {
    /// `vocab` should cover the prompt words; unknown words map to `[UNK]`.
    pub fn init(config: &CaptionerConfig, vocab: Vocabulary, feature_rows: usize, feature_dim: usize) -> Result<Self> {
        Self::init_with_dtype(config, vocab, feature_rows, feature_dim, DType::F32)
    }

    pub fn init_with_dtype(
        config: &CaptionerConfig,
        vocab: Vocabulary,
        feature_rows: usize,
        feature_dim: usize,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        if feature_rows == 0 || feature_dim == 0 {
            return Err(Error::Config("feature shape must be positive".into()));
        }
        let mut store = ParamStore::new(seed::derive(config.seed, "m2t/init"), dtype);
        let net = Self::build(&mut store, config, &vocab, feature_rows, feature_dim)?;
        Ok(Self {
            prompt_ids: vocab.encode(&config.prompt),
            config: config.clone(),
            vocab,
            feature_rows,
            feature_dim,
            tokenizer_hash: String::new(),
            store,
            net,
        })
    }

    fn build(store: &mut ParamStore, config: &CaptionerConfig, vocab: &Vocabulary, rows: usize, dim: usize) -> Result<Network> {
        let positions = rows + vocab.encode(&config.prompt).len() + 1 + config.max_caption_len + 1;
        Network::new(store, config, vocab.len(), dim, positions)
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn set_tokenizer_hash(&mut self, hash: &str) {
        self.tokenizer_hash = hash.to_string();
    }

    /// Parameters updated by training: the projection, plus either every language-model
    /// weight (rank 0) or only the adapters.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.config.adapter_rank == 0 || name.starts_with("proj.") || name.contains("adapter_")
    }

    pub fn check_compatible(&self, lamp: &LampModel) -> Result<()> {
        if (lamp.num_queries(), lamp.proj_dim()) != (self.feature_rows, self.feature_dim) {
            return Err(Error::Checkpoint(format!(
                "captioner expects {}x{} features, alignment model gives {}x{}",
                self.feature_rows,
                self.feature_dim,
                lamp.num_queries(),
                lamp.proj_dim()
            )));
        }
        if !self.tokenizer_hash.is_empty() && self.tokenizer_hash != lamp.tokenizer_hash() {
            return Err(Error::Checkpoint("captioner and alignment model were built on different tokenizers".into()));
        }
        Ok(())
    }

    /// Affine projection of `L × p` features into `L × hidden` prefix embeddings.
    pub fn project_features(&self, features: &[&AlignedMotion]) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(features.len() * self.feature_rows * self.feature_dim);
        for f in features {
            if (f.rows, f.dim) != (self.feature_rows, self.feature_dim) {
                return Err(Error::DimMismatch(format!(
                    "features are {}x{}, expected {}x{}",
                    f.rows, f.dim, self.feature_rows, self.feature_dim
                )));
            }
            flat.extend_from_slice(&f.values);
        }
        let x = nn::from_f32(flat, (features.len(), self.feature_rows, self.feature_dim), self.store.dtype())?;
        self.net.proj.forward(&x)
    }

    fn caption_ids(&self, caption: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode(caption);
        ids.truncate(self.config.max_caption_len);
        ids
    }

    /// Teacher-forced cross-entropy of each caption (and its end token) given the motion.
    pub fn loss(&self, features: &[&AlignedMotion], captions: &[&str]) -> Result<Tensor> {
        if features.len() != captions.len() || features.is_empty() {
            return Err(Error::DimMismatch(format!("{} motions vs {} captions", features.len(), captions.len())));
        }
        let prefix = self.project_features(features)?;
        let p = self.prompt_ids.len();
        let seqs: Vec<Vec<u32>> = captions
            .iter()
            .map(|c| {
                let mut s = self.prompt_ids.clone();
                s.push(text::BOS);
                s.extend(self.caption_ids(c));
                s.push(text::SEP);
                s
            })
            .collect();
        let m = seqs.iter().map(Vec::len).max().expect("non-empty");
        let mut inputs = Vec::with_capacity(seqs.len());
        let (mut targets, mut weights) = (Vec::new(), Vec::new());
        for s in &seqs {
            let mut row = s.clone();
            row.resize(m, text::PAD);
            for i in 0..m {
                let live = i >= p && i + 1 < s.len();
                targets.push(if live { s[i + 1] } else { text::PAD });
                weights.push(if live { 1.0 } else { 0.0 });
            }
            inputs.push(row);
        }
        let logits = self.net.forward(&prefix, &inputs)?;
        crate::alignment::token_cross_entropy(&logits, &targets, &weights)
    }

    /// Greedy captions for a batch of motions. Decoding stops at the end token or after
    /// `max_caption_len` words.
    pub fn caption_features(&self, features: &[&AlignedMotion]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(64) {
            let prefix = self.project_features(chunk)?;
            let mut seqs: Vec<Vec<u32>> = vec![self.prompt_ids.iter().copied().chain([text::BOS]).collect(); chunk.len()];
            let start = seqs[0].len();
            let mut done = vec![false; chunk.len()];
            for _ in 0..self.config.max_caption_len {
                let logits = self.net.forward(&prefix, &seqs)?;
                let m = seqs[0].len();
                let last = nn::to_vec_f64(&logits.narrow(1, m - 1, 1)?)?;
                let v = self.vocab.len();
                for (b, seq) in seqs.iter_mut().enumerate() {
                    let next = if done[b] { text::PAD } else { best_word(&last[b * v..(b + 1) * v]) };
                    if next == text::SEP {
                        done[b] = true;
                    }
                    seq.push(if done[b] { text::PAD } else { next });
                }
                if done.iter().all(|&d| d) {
                    break;
                }
            }
            out.extend(seqs.iter().map(|s| self.vocab.decode(&s[start..])));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(MODULE_TAG, &self.config)?;
        ck.stats_hash = self.tokenizer_hash.clone();
        ck.extra = serde_json::to_value(CaptionerMeta {
            vocab: self.vocab.clone(),
            feature_rows: self.feature_rows,
            feature_dim: self.feature_dim,
        })?;
        ck.tensors = self.store.snapshot()?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.module != MODULE_TAG {
            return Err(Error::Checkpoint(format!("expected `{MODULE_TAG}` checkpoint, got `{}`", ck.module)));
        }
        let config: CaptionerConfig = ck.config_as()?;
        config.validate()?;
        let meta: CaptionerMeta = ck.extra_as()?;
        let mut store = ParamStore::from_tensors(ck.tensors.clone(), DType::F32)?;
        let net = Self::build(&mut store, &config, &meta.vocab, meta.feature_rows, meta.feature_dim)?;
        if store.len() != ck.tensors.len() {
            return Err(Error::Checkpoint("captioner checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            prompt_ids: meta.vocab.encode(&config.prompt),
            config,
            vocab: meta.vocab,
            feature_rows: meta.feature_rows,
            feature_dim: meta.feature_dim,
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

/// Arg-max over word ids, never emitting padding, `[CLS]`, `[BOS]` or `[UNK]`; lowest id
/// wins ties.
fn best_word(logits: &[f64]) -> u32 {
    let banned = [text::PAD, text::CLS, text::BOS, text::UNK];
    let mut best = text::SEP as usize;
    for (i, &v) in logits.iter().enumerate() {
        if !banned.contains(&(i as u32)) && v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Captions raw motions: tokenize, extract aligned features, decode.
pub fn caption_many(
    motions: &[MotionSequence],
    tokenizer: &MotionTokenizer,
    lamp: &LampModel,
    captioner: &CaptionerModel,
) -> Result<Vec<String>> {
    lamp.check_tokenizer(tokenizer)?;
    captioner.check_compatible(lamp)?;
    let inputs = motions.iter().map(|m| MotionInput::from_raw(tokenizer, m)).collect::<Result<Vec<_>>>()?;
    let feats = lamp.motion_features_many(&inputs)?;
    captioner.caption_features(&feats.iter().collect::<Vec<_>>())
}

pub fn caption(motion: &MotionSequence, tokenizer: &MotionTokenizer, lamp: &LampModel, captioner: &CaptionerModel) -> Result<String> {
    Ok(caption_many(std::slice::from_ref(motion), tokenizer, lamp, captioner)?.remove(0))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct M2TTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<(usize, f64)>,
}

/// Trains the projection and language model (or only the adapters) with the alignment
/// model frozen. The vocabulary is built from the dataset texts and the prompt.
pub fn train_m2t(
    dataset: &Dataset,
    tokenizer: &MotionTokenizer,
    lamp: &LampModel,
    config: &CaptionerConfig,
) -> Result<(CaptionerModel, M2TTrainReport)> {
    config.validate()?;
    if dataset.is_empty() || dataset.num_texts() == 0 {
        return Err(Error::EmptyDataset);
    }
    lamp.check_tokenizer(tokenizer)?;
    let texts = dataset.records().iter().flat_map(|r| r.texts.iter().map(String::as_str));
    let vocab = Vocabulary::build(texts.chain([config.prompt.as_str()]));
    let mut model = CaptionerModel::init(config, vocab, lamp.num_queries(), lamp.proj_dim())?;
    model.set_tokenizer_hash(lamp.tokenizer_hash());
    if config.iterations == 0 {
        return Ok((model, M2TTrainReport::default()));
    }
    let inputs = dataset.motions().iter().map(|m| MotionInput::from_raw(tokenizer, m)).collect::<Result<Vec<_>>>()?;
    let feats = lamp.motion_features_many(&inputs)?;
    let texts: Vec<&[String]> = dataset.records().iter().map(|r| r.texts.as_slice()).collect();
    let report = fit(&mut model, &feats, &texts)?;
    Ok((model, report))
}

/// Runs `config.iterations` updates over `(features[i], one of texts[i])` pairs.
pub(crate) fn fit(model: &mut CaptionerModel, feats: &[AlignedMotion], texts: &[&[String]]) -> Result<M2TTrainReport> {
    let config = model.config.clone();
    let usable: Vec<usize> = (0..feats.len()).filter(|&i| !texts[i].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = |rng: &mut rand_chacha::ChaCha8Rng| -> (Vec<&AlignedMotion>, Vec<&str>) {
        (0..config.batch_size)
            .map(|_| {
                let i = *usable.choose(rng).expect("non-empty");
                (&feats[i], texts[i][rng.gen_range(0..texts[i].len())].as_str())
            })
            .unzip()
    };
    let held_loss = |m: &CaptionerModel| -> Result<f64> {
        let mut rng = seed::stage_rng(config.seed, "m2t/held");
        let (f, c) = batch(&mut rng);
        nn::scalar(&m.loss(&f, &c)?)
    };
    let mut report = M2TTrainReport { initial_loss: held_loss(model)?, ..Default::default() };
    let vars = model.store.vars_where(|n| model.is_trainable(n));
    let mut trainer = Trainer::new(vars, config.optim.clone(), config.iterations)?;
    let mut rng = seed::stage_rng(config.seed, "m2t/batches");
    for step in 0..config.iterations {
        let (f, c) = batch(&mut rng);
        let loss = trainer.step(&model.loss(&f, &c)?)?;
        if step % 50 == 0 || step + 1 == config.iterations {
            log::info!("m2t step {step}: loss {loss:.4}");
            report.curve.push((step, loss));
        }
    }
    report.final_loss = held_loss(model)?;
    Ok(report)
}

/// Fraction of captions containing every attribute word of their sample. Samples without
/// attributes are skipped.
pub fn attribute_fidelity(dataset: &Dataset, captions: &[String]) -> Result<f64> {
    if captions.len() != dataset.len() {
        return Err(Error::DimMismatch(format!("{} captions for {} samples", captions.len(), dataset.len())));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (r, c) in dataset.records().iter().zip(captions) {
        let Some(attrs) = &r.attributes else { continue };
        let words: Vec<String> = c.split_whitespace().map(str::to_lowercase).collect();
        total += 1;
        if attrs.words().iter().all(|w| words.contains(w)) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no samples carry attributes".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub attribute_fidelity: f64,
    /// Mean over samples of the best F1 against the sample's own references.
    pub bertscore_f1: f64,
    /// The same score with references taken from another sample (a seeded derangement).
    pub shuffled_bertscore_f1: f64,
}

fn best_f1(caption: &str, refs: &[String], embedder: &impl TokenEmbedder) -> Result<f64> {
    if caption.trim().is_empty() {
        return Ok(0.0);
    }
    let mut best = f64::NEG_INFINITY;
    for r in refs {
        best = best.max(lamp_bertscore(caption, r, embedder)?.f1);
    }
    Ok(best)
}

/// Scores one caption per sample against matched and mismatched references.
pub fn evaluate_captions(
    dataset: &Dataset,
    captions: &[String],
    embedder: &impl TokenEmbedder,
    seed_value: u64,
) -> Result<CaptionReport> {
    if captions.len() != dataset.len() || dataset.len() < 2 {
        return Err(Error::DimMismatch(format!("{} captions for {} samples", captions.len(), dataset.len())));
    }
    let n = dataset.len();
    let offset = seed::stage_rng(seed_value, "m2t/shuffle").gen_range(1..n);
    let (mut matched, mut shuffled) = (0.0, 0.0);
    for (i, c) in captions.iter().enumerate() {
        matched += best_f1(c, &dataset.record(i).texts, embedder)?;
        shuffled += best_f1(c, &dataset.record((i + offset) % n).texts, embedder)?;
    }
    Ok(CaptionReport {
        attribute_fidelity: attribute_fidelity(dataset, captions)?,
        bertscore_f1: matched / n as f64,
        shuffled_bertscore_f1: shuffled / n as f64,
    })
}
