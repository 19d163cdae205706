//! Masked-prediction text-to-motion generation.
//!
//! A decoder-only transformer reads a prefix built from alignment-model text features and
//! predicts motion tokens at corrupted positions. Training corrupts `⌈γ(r)·n⌉` positions
//! under the cosine schedule `γ(r) = cos(πr/2)` and drops the condition 10% of the time so
//! that classifier-free guidance can mix conditional and unconditional logits. Inference
//! starts fully masked and, over `K` iterations, keeps the most confident samples and
//! re-masks the rest.

mod model;

use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::alignment::{token_cross_entropy, LampModel};
use crate::checkpoint::Checkpoint;
use crate::corpus::{Dataset, MotionSequence};
use crate::nn::{self, OptimConfig, ParamStore, Trainer};
use crate::vq::{MotionTokenizer, TokenSequence};
use crate::{seed, Error, Result};

use model::Network;

pub const MODULE_TAG: &str = "t2m";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Causal,
    Bidirectional,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Self::Causal),
            "bidirectional" => Ok(Self::Bidirectional),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Outcome probabilities for a selected position during training corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionPolicy {
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        Self { p_mask: 0.8, p_random: 0.1, p_keep: 0.1 }
    }
}

impl CorruptionPolicy {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_mask, self.p_random, self.p_keep];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("corruption probabilities {ps:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionConfig {
    /// Condition on the query tokens after they read the text instead of the pooled text
    /// feature.
    pub use_query_interaction: bool,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self { use_query_interaction: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T2MConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_mult: usize,
    /// Longest token sequence the position table covers.
    pub max_len: usize,
    pub condition: ConditionConfig,
    pub uncond_prob: f64,
    pub corruption: CorruptionPolicy,
    pub batch_size: usize,
    pub iterations: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for T2MConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 128,
            ffn_mult: 4,
            max_len: 64,
            condition: ConditionConfig::default(),
            uncond_prob: 0.1,
            corruption: CorruptionPolicy::default(),
            batch_size: 32,
            iterations: 3000,
            optim: OptimConfig { lr: 2e-4, warmup: 200, ..Default::default() },
            seed: 0,
        }
    }
}

impl T2MConfig {
    /// Shape of the full-size generator (6 layers, 6 heads, hidden 384).
    pub fn full_scale() -> Self {
        Self { layers: 6, heads: 6, hidden: 384, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.max_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("layers, hidden, max_len and batch_size must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config("hidden must be divisible by heads".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Config("uncond_prob must lie in [0, 1]".into()));
        }
        self.corruption.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Guidance scale α in `(1 + α)·l_c − α·l_uc`.
    pub alpha: f64,
    /// Decoding iterations K.
    pub iterations: usize,
    /// Target length in tokens.
    pub length: usize,
    pub seed: u64,
    pub temperature: f64,
    /// Take the arg-max instead of sampling.
    pub greedy: bool,
    pub attention: AttentionMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            iterations: 10,
            length: 16,
            seed: 0,
            temperature: 1.0,
            greedy: false,
            attention: AttentionMode::Causal,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be finite and >= 0".into()));
        }
        if self.iterations == 0 || self.length == 0 {
            return Err(Error::Config("iterations and length must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// `γ(r) = cos(πr/2)`, exactly 0 at `r = 1`.
pub fn mask_ratio(r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invalid(format!("mask schedule argument {r} outside [0, 1]")));
    }
    if r == 1.0 {
        return Ok(0.0);
    }
    Ok((std::f64::consts::FRAC_PI_2 * r).cos())
}

/// `⌈γ(r)·n⌉`, with a small tolerance so that rounding noise does not add a position.
pub fn mask_count(n: usize, r: f64) -> Result<usize> {
    let x = mask_ratio(r)? * n as f64;
    Ok(((x - 1e-9).ceil().max(0.0) as usize).min(n))
}

/// What happened to one selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Remask {
    Mask,
    /// Replaced by a uniform draw over the codebook, which may equal the original.
    Random,
    Keep,
}

/// Selects `⌈γ(r)·n⌉` positions uniformly without replacement and replaces each with the
/// mask token, a uniform random code or itself according to `policy`. Returns the
/// corrupted sequence and the sorted selected positions.
pub fn corrupt(
    tokens: &TokenSequence,
    r: f64,
    policy: &CorruptionPolicy,
    rng: &mut impl Rng,
) -> Result<(TokenSequence, Vec<usize>)> {
    let (out, positions, _) = corrupt_traced(tokens, r, policy, rng)?;
    Ok((out, positions))
}

/// [`corrupt`] that also reports the category drawn for each selected position.
pub fn corrupt_traced(
    tokens: &TokenSequence,
    r: f64,
    policy: &CorruptionPolicy,
    rng: &mut impl Rng,
) -> Result<(TokenSequence, Vec<usize>, Vec<Remask>)> {
    policy.validate()?;
    let s = tokens.codebook_size;
    let mask = tokens.mask_id();
    if let Some(&t) = tokens.tokens.iter().find(|&&t| t as usize >= s) {
        return Err(if t == mask {
            Error::Invalid("input already contains the mask token".into())
        } else {
            Error::TokenOutOfRange { token: t, size: s }
        });
    }
    let n = tokens.len();
    let count = mask_count(n, r)?;
    let mut positions = sample_indices(rng, n, count).into_vec();
    positions.sort_unstable();
    let mut out = tokens.tokens.clone();
    let mut kinds = Vec::with_capacity(count);
    for &p in &positions {
        let u: f64 = rng.gen();
        if u < policy.p_mask {
            out[p] = mask;
            kinds.push(Remask::Mask);
        } else if u < policy.p_mask + policy.p_random {
            out[p] = rng.gen_range(0..s as u32);
            kinds.push(Remask::Random);
        } else {
            kinds.push(Remask::Keep);
        }
    }
    Ok((TokenSequence { tokens: out, codebook_size: s }, positions, kinds))
}

/// Mean negative log-likelihood over the selected positions of `logits` `(…, n, S)`.
/// `targets` and `positions` index the flattened rows.
pub fn masked_nll(logits: &Tensor, targets: &[u32], positions: &[usize]) -> Result<Tensor> {
    if positions.is_empty() {
        return Err(Error::Invalid("masked_nll needs at least one masked position".into()));
    }
    let mut weights = vec![0f32; targets.len()];
    for &p in positions {
        *weights
            .get_mut(p)
            .ok_or_else(|| Error::Invalid(format!("mask position {p} outside {} rows", targets.len())))? = 1.0;
    }
    token_cross_entropy(logits, targets, &weights)
}

/// `(1 + α)·l_c − α·l_uc`.
pub fn cfg_mix(l_c: &Tensor, l_uc: &Tensor, alpha: f64) -> Result<Tensor> {
    if l_c.dims() != l_uc.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", l_c.dims(), l_uc.dims())));
    }
    Ok(((l_c * (1.0 + alpha))? - (l_uc * alpha)?)?)
}

/// One decoding iteration as seen by tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub remasked: Vec<usize>,
    /// Positions whose token is final after this iteration.
    pub fixed: Vec<usize>,
}

pub struct T2MModel {
    config: T2MConfig,
    codebook_size: usize,
    cond_rows: usize,
    cond_dim: usize,
    tokenizer_hash: String,
    store: ParamStore,
    net: Network,
}

#[derive(Serialize, Deserialize)]
struct T2MMeta {
    codebook_size: usize,
    cond_rows: usize,
    cond_dim: usize,
}

impl T2MModel {
    pub fn init(config: &T2MConfig, codebook_size: usize, cond_rows: usize, cond_dim: usize) -> Result<Self> {
        Self::init_with_dtype(config, codebook_size, cond_rows, cond_dim, DType::F32)
    }

    pub fn init_with_dtype(
        config: &T2MConfig,
        codebook_size: usize,
        cond_rows: usize,
        cond_dim: usize,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        if codebook_size == 0 || cond_rows == 0 || cond_dim == 0 {
            return Err(Error::Config("codebook size and condition shape must be positive".into()));
        }
        let mut store = ParamStore::new(seed::derive(config.seed, "t2m/init"), dtype);
        let net = Network::new(&mut store, config, codebook_size, cond_rows, cond_dim)?;
        Ok(Self {
            config: config.clone(),
            codebook_size,
            cond_rows,
            cond_dim,
            tokenizer_hash: String::new(),
            store,
            net,
        })
    }

    pub fn config(&self) -> &T2MConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn condition_shape(&self) -> (usize, usize) {
        (self.cond_rows, self.cond_dim)
    }

    pub fn mask_id(&self) -> u32 {
        self.codebook_size as u32
    }

    pub fn set_tokenizer_hash(&mut self, hash: &str) {
        self.tokenizer_hash = hash.to_string();
    }

    /// Rejects a tokenizer or alignment model whose shapes disagree with this generator.
    pub fn check_compatible(&self, tokenizer: &MotionTokenizer, lamp: &LampModel) -> Result<()> {
        let s = tokenizer.codebook().size();
        if s != self.codebook_size || lamp.codebook_size() != s {
            return Err(Error::Checkpoint(format!(
                "codebook size mismatch: generator {}, tokenizer {s}, alignment {}",
                self.codebook_size,
                lamp.codebook_size()
            )));
        }
        if !self.tokenizer_hash.is_empty() && self.tokenizer_hash != tokenizer.stats_hash() {
            return Err(Error::Checkpoint("generator was trained against a different tokenizer".into()));
        }
        let want = lamp.condition_shape(self.config.condition.use_query_interaction);
        if want != self.condition_shape() {
            return Err(Error::Checkpoint(format!(
                "condition shape mismatch: generator {:?}, alignment model {want:?}",
                self.condition_shape()
            )));
        }
        Ok(())
    }

    /// Logits `(B, n, S)` for equal-length token rows with per-row optional conditions.
    pub fn forward(&self, tokens: &[Vec<u32>], conditions: &[Option<&[f32]>], mode: AttentionMode) -> Result<Tensor> {
        let valid: Vec<Vec<bool>> = tokens.iter().map(|r| vec![true; r.len()]).collect();
        self.net.forward(tokens, &valid, conditions, mode, self.store.dtype())
    }

    fn forward_padded(&self, tokens: &[Vec<u32>], conditions: &[Option<&[f32]>]) -> Result<(Tensor, Vec<Vec<bool>>)> {
        let n = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let padded: Vec<Vec<u32>> = tokens
            .iter()
            .map(|r| r.iter().copied().chain(std::iter::repeat(self.mask_id())).take(n).collect())
            .collect();
        let valid: Vec<Vec<bool>> = tokens.iter().map(|r| (0..n).map(|i| i < r.len()).collect()).collect();
        let logits = self.net.forward(&padded, &valid, conditions, AttentionMode::Causal, self.store.dtype())?;
        Ok((logits, valid))
    }

    /// Training loss on a batch of clean token rows: corrupt each row at its own `r`, drop
    /// conditions with probability `uncond_prob` and score the selected positions.
    pub fn training_loss(&self, tokens: &[Vec<u32>], conditions: &[&[f32]], rng: &mut impl Rng) -> Result<Tensor> {
        if tokens.len() != conditions.len() || tokens.is_empty() {
            return Err(Error::DimMismatch("token rows and conditions disagree".into()));
        }
        let mut corrupted = Vec::with_capacity(tokens.len());
        let mut selected = Vec::with_capacity(tokens.len());
        for row in tokens {
            let seq = TokenSequence { tokens: row.clone(), codebook_size: self.codebook_size };
            let r: f64 = rng.gen_range(0.0..1.0);
            let (c, pos) = corrupt(&seq, r, &self.config.corruption, rng)?;
            corrupted.push(c.tokens);
            selected.push(pos);
        }
        let conds: Vec<Option<&[f32]>> =
            conditions.iter().map(|&c| (rng.gen::<f64>() >= self.config.uncond_prob).then_some(c)).collect();
        self.loss_for(tokens, &corrupted, &selected, &conds)
    }

    /// Masked NLL of `clean` targets given `corrupted` inputs and per-row `selected`
    /// positions.
    pub fn loss_for(
        &self,
        clean: &[Vec<u32>],
        corrupted: &[Vec<u32>],
        selected: &[Vec<usize>],
        conditions: &[Option<&[f32]>],
    ) -> Result<Tensor> {
        let (logits, valid) = self.forward_padded(corrupted, conditions)?;
        let n = valid.first().map_or(0, Vec::len);
        let mut targets = Vec::with_capacity(clean.len() * n);
        let mut positions = Vec::new();
        for (b, row) in clean.iter().enumerate() {
            for i in 0..n {
                targets.push(row.get(i).copied().unwrap_or(0));
            }
            positions.extend(selected[b].iter().map(|&p| b * n + p));
        }
        masked_nll(&logits, &targets, &positions)
    }

    /// Confidence-based iterative decoding from an all-mask sequence.
    pub fn iterative_decode(&self, condition: &[f32], config: &GenerationConfig) -> Result<TokenSequence> {
        Ok(self.iterative_decode_traced(condition, config)?.0)
    }

    pub fn iterative_decode_traced(
        &self,
        condition: &[f32],
        config: &GenerationConfig,
    ) -> Result<(TokenSequence, Vec<DecodeStep>)> {
        config.validate()?;
        let n = config.length;
        let k_total = config.iterations;
        let mask = self.mask_id();
        let mut rng = seed::stage_rng(config.seed, "t2m/decode");
        let mut tokens = vec![mask; n];
        let mut trace = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let rows = vec![tokens.clone(), tokens.clone()];
            let logits = self.forward(&rows, &[Some(condition), None], config.attention)?;
            let l_c = logits.narrow(0, 0, 1)?;
            let l_uc = logits.narrow(0, 1, 1)?;
            let mixed = cfg_mix(&l_c, &l_uc, config.alpha)?;
            let probs = nn::to_vec_f64(&nn::softmax(&(mixed / config.temperature)?)?)?;
            let s = self.codebook_size;
            let mut confidence = vec![f64::INFINITY; n];
            for i in 0..n {
                if tokens[i] != mask {
                    continue;
                }
                let p = &probs[i * s..(i + 1) * s];
                let choice = if config.greedy {
                    argmax(p)
                } else {
                    WeightedIndex::new(p)
                        .map_err(|e| Error::Invalid(format!("degenerate sampling distribution: {e}")))?
                        .sample(&mut rng)
                };
                tokens[i] = choice as u32;
                confidence[i] = p[choice];
            }
            let count = mask_count(n, (k + 1) as f64 / k_total as f64)?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
            let mut remasked: Vec<usize> = order[..count].to_vec();
            remasked.sort_unstable();
            for &p in &remasked {
                tokens[p] = mask;
            }
            let fixed = (0..n).filter(|&i| tokens[i] != mask).collect();
            trace.push(DecodeStep { remasked, fixed });
        }
        debug_assert!(tokens.iter().all(|&t| t != mask));
        Ok((TokenSequence { tokens, codebook_size: self.codebook_size }, trace))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(MODULE_TAG, &self.config)?;
        ck.stats_hash = self.tokenizer_hash.clone();
        ck.extra = serde_json::to_value(T2MMeta {
            codebook_size: self.codebook_size,
            cond_rows: self.cond_rows,
            cond_dim: self.cond_dim,
        })?;
        ck.tensors = self.store.snapshot()?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.module != MODULE_TAG {
            return Err(Error::Checkpoint(format!("expected `{MODULE_TAG}` checkpoint, got `{}`", ck.module)));
        }
        let config: T2MConfig = ck.config_as()?;
        config.validate()?;
        let meta: T2MMeta = ck.extra_as()?;
        let mut store = ParamStore::from_tensors(ck.tensors.clone(), DType::F32)?;
        let net = Network::new(&mut store, &config, meta.codebook_size, meta.cond_rows, meta.cond_dim)?;
        if store.len() != ck.tensors.len() {
            return Err(Error::Checkpoint("generator checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            config,
            codebook_size: meta.codebook_size,
            cond_rows: meta.cond_rows,
            cond_dim: meta.cond_dim,
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

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Generated motion in raw (denormalized) units, plus its token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub motion: MotionSequence,
    pub tokens: TokenSequence,
}

pub fn generate(
    text: &str,
    lamp: &LampModel,
    tokenizer: &MotionTokenizer,
    t2m: &T2MModel,
    config: &GenerationConfig,
) -> Result<Generated> {
    Ok(generate_many(&[text], lamp, tokenizer, t2m, config)?.remove(0))
}

/// Generates one motion per text, each decoded with the same configuration and seed.
pub fn generate_many(
    texts: &[&str],
    lamp: &LampModel,
    tokenizer: &MotionTokenizer,
    t2m: &T2MModel,
    config: &GenerationConfig,
) -> Result<Vec<Generated>> {
    t2m.check_compatible(tokenizer, lamp)?;
    let conds = lamp.condition_many(texts, t2m.config.condition.use_query_interaction)?;
    conds
        .iter()
        .map(|c| {
            let tokens = t2m.iterative_decode(c, config)?;
            let motion = tokenizer.detokenize(&tokens.tokens)?;
            Ok(Generated { motion, tokens })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct T2MTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<(usize, f64)>,
}

struct T2MData {
    tokens: Vec<Vec<u32>>,
    /// `(sample index, condition values)` per caption.
    conditions: Vec<(usize, Vec<f32>)>,
}

impl T2MData {
    fn new(dataset: &Dataset, tokenizer: &MotionTokenizer, lamp: &LampModel, interaction: bool) -> Result<Self> {
        let tokens = dataset
            .motions()
            .iter()
            .map(|m| Ok(tokenizer.tokenize(m)?.tokens))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(usize, &str)> = dataset
            .records()
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.texts.iter().map(move |t| (i, t.as_str())))
            .collect();
        let texts: Vec<&str> = pairs.iter().map(|p| p.1).collect();
        let conds = lamp.condition_many(&texts, interaction)?;
        let conditions = pairs.iter().map(|p| p.0).zip(conds).collect();
        Ok(Self { tokens, conditions })
    }

    fn batch(&self, size: usize, rng: &mut impl Rng) -> (Vec<Vec<u32>>, Vec<&[f32]>) {
        let mut rows = Vec::with_capacity(size);
        let mut conds = Vec::with_capacity(size);
        for _ in 0..size {
            let (i, c) = &self.conditions[rng.gen_range(0..self.conditions.len())];
            rows.push(self.tokens[*i].clone());
            conds.push(c.as_slice());
        }
        (rows, conds)
    }
}

/// Trains the generator against a frozen tokenizer and a frozen alignment model.
pub fn train_t2m(
    dataset: &Dataset,
    tokenizer: &MotionTokenizer,
    lamp: &LampModel,
    config: &T2MConfig,
) -> Result<(T2MModel, T2MTrainReport)> {
    config.validate()?;
    if dataset.is_empty() || dataset.num_texts() == 0 {
        return Err(Error::EmptyDataset);
    }
    lamp.check_tokenizer(tokenizer)?;
    let interaction = config.condition.use_query_interaction;
    let (rows, dim) = lamp.condition_shape(interaction);
    let mut model = T2MModel::init(config, tokenizer.codebook().size(), rows, dim)?;
    model.set_tokenizer_hash(&tokenizer.stats_hash());
    let longest = dataset.motions().iter().map(|m| tokenizer.token_len(m.frames())).max().unwrap_or(0);
    if longest > config.max_len {
        return Err(Error::Config(format!("corpus needs {longest} tokens but max_len is {}", config.max_len)));
    }
    let mut report = T2MTrainReport::default();
    if config.iterations == 0 {
        return Ok((model, report));
    }
    let data = T2MData::new(dataset, tokenizer, lamp, interaction)?;
    let held_loss = |m: &T2MModel| -> Result<f64> {
        let mut rng = seed::stage_rng(config.seed, "t2m/held");
        let (rows, conds) = data.batch(config.batch_size, &mut rng);
        nn::scalar(&m.training_loss(&rows, &conds, &mut rng)?)
    };
    report.initial_loss = held_loss(&model)?;
    let mut trainer = Trainer::new(model.store.vars(), config.optim.clone(), config.iterations)?;
    let mut rng = seed::stage_rng(config.seed, "t2m/batches");
    for step in 0..config.iterations {
        let (rows, conds) = data.batch(config.batch_size, &mut rng);
        let loss = trainer.step(&model.training_loss(&rows, &conds, &mut rng)?)?;
        if step % 50 == 0 || step + 1 == config.iterations {
            log::info!("t2m step {step}: loss {loss:.4}");
            report.curve.push((step, loss));
        }
    }
    report.final_loss = held_loss(&model)?;
    Ok((model, report))
}

/// Rank statistics of random softmax attention matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub mode: AttentionMode,
    pub n: usize,
    pub d_head: usize,
    pub ranks: Vec<usize>,
    /// Causal only: every matrix was lower-triangular with a positive diagonal, its rows
    /// summed to 1 and it had full rank.
    pub causal_invariants_hold: bool,
    pub min_diagonal: f64,
}

impl RankReport {
    pub fn full_rank_fraction(&self) -> f64 {
        if self.ranks.is_empty() {
            return 0.0;
        }
        self.ranks.iter().filter(|&&r| r == self.n).count() as f64 / self.ranks.len() as f64
    }
}

/// Builds `trials` softmax attention matrices `softmax(QKᵀ/√d)` from standard-normal
/// `Q, K ∈ ℝ^{n×d}` and measures their numerical rank. With `n > d` the bidirectional
/// matrix has rank at most `d` before the softmax; the causal one is triangular with a
/// positive diagonal and therefore always invertible.
pub fn attention_rank_check(n: usize, d_head: usize, mode: AttentionMode, trials: usize, seed_value: u64) -> Result<RankReport> {
    if n <= d_head || d_head == 0 {
        return Err(Error::Invalid(format!("rank check needs n > d_head > 0, got n={n}, d_head={d_head}")));
    }
    let mut rng = seed::stage_rng(seed_value, "t2m/rank-check");
    let normal = rand_distr::StandardNormal;
    let mut ranks = Vec::with_capacity(trials);
    let mut invariants = true;
    let mut min_diag = f64::INFINITY;
    for _ in 0..trials {
        let q = DMatrix::<f64>::from_fn(n, d_head, |_, _| normal.sample(&mut rng));
        let k = DMatrix::<f64>::from_fn(n, d_head, |_, _| normal.sample(&mut rng));
        let scores = (&q * k.transpose()) / (d_head as f64).sqrt();
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let visible = match mode {
                AttentionMode::Causal => i + 1,
                AttentionMode::Bidirectional => n,
            };
            let m = (0..visible).map(|j| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..visible).map(|j| (scores[(i, j)] - m).exp()).sum();
            for j in 0..visible {
                a[(i, j)] = (scores[(i, j)] - m).exp() / z;
            }
        }
        // the usual numerical-rank tolerance: σ_max · n · machine epsilon
        let sv = a.singular_values();
        let tol = sv.max() * n as f64 * f64::EPSILON;
        let rank = sv.iter().filter(|&&s| s > tol).count();
        if mode == AttentionMode::Causal {
            for i in 0..n {
                min_diag = min_diag.min(a[(i, i)]);
                let row: f64 = a.row(i).iter().sum();
                let upper_zero = (i + 1..n).all(|j| a[(i, j)] == 0.0);
                if a[(i, i)] <= 0.0 || (row - 1.0).abs() > 1e-9 || !upper_zero {
                    invariants = false;
                }
            }
            if rank != n {
                invariants = false;
            }
        }
        ranks.push(rank);
    }
    Ok(RankReport {
        mode,
        n,
        d_head,
        ranks,
        causal_invariants_hold: mode == AttentionMode::Causal && invariants,
        min_diagonal: if mode == AttentionMode::Causal { min_diag } else { f64::NAN },
    })
}

#[cfg(test)]
mod tests;
