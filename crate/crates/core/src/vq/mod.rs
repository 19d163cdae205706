//! VQ-VAE motion tokenizer: convolutional encoder, nearest-code quantizer with EMA updates
//! and dead-code reset, and a nearest-neighbour-upsampling decoder.

mod codebook;
mod model;

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{self, Dataset, FeatureStats, MotionSequence};
use crate::nn::{self, OptimConfig, ParamStore, Trainer};
use crate::{seed, Error, Result};

pub use codebook::Codebook;
pub use model::{Decoder, Encoder};

pub const MODULE_TAG: &str = "vq";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub downsample_ratio: usize,
    pub width: usize,
    pub depth: usize,
    pub dilation_growth: usize,
    /// Commitment weight β.
    pub commit_beta: f64,
    /// Velocity reconstruction weight.
    pub velocity_weight: f64,
    /// EMA constant λ.
    pub ema_decay: f64,
    pub reset_threshold: f32,
    pub reset_every: usize,
    pub zero_init_output: bool,
    pub window: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            code_dim: 64,
            downsample_ratio: 4,
            width: 64,
            depth: 2,
            dilation_growth: 3,
            commit_beta: 0.02,
            velocity_weight: 0.5,
            ema_decay: 0.99,
            reset_threshold: 1.0,
            reset_every: 20,
            zero_init_output: false,
            window: 32,
            batch_size: 64,
            iterations: 2000,
            optim: OptimConfig { lr: 2e-4, warmup: 2000, ..Default::default() },
            seed: 0,
        }
    }
}

impl VqConfig {
    /// Shape of the full-size tokenizer (512 codes of dimension 512).
    pub fn full_scale() -> Self {
        Self { codebook_size: 512, code_dim: 512, width: 512, depth: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be >= 2".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema_decay must lie in (0, 1)".into()));
        }
        if self.commit_beta <= 0.0 {
            return Err(Error::Config("commit_beta must be > 0".into()));
        }
        if self.velocity_weight < 0.0 {
            return Err(Error::Config("velocity_weight must be >= 0".into()));
        }
        if self.downsample_ratio == 0 || !self.downsample_ratio.is_power_of_two() {
            return Err(Error::Config("downsample_ratio must be a power of two".into()));
        }
        if self.window < self.downsample_ratio || self.window % self.downsample_ratio != 0 {
            return Err(Error::Config("window must be a positive multiple of downsample_ratio".into()));
        }
        if self.batch_size == 0 || self.code_dim == 0 || self.width == 0 {
            return Err(Error::Config("batch_size, code_dim and width must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder output for one sequence, `n × d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub n: usize,
    pub dim: usize,
    pub vectors: Vec<f32>,
    pub downsample_ratio: usize,
}

/// Motion token ids in `[0, S)`, or `S` for the mask token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub codebook_size: usize,
}

impl TokenSequence {
    pub fn mask_id(&self) -> u32 {
        self.codebook_size as u32
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id()).count()
    }
}

/// Loss components. Tensors keep the autograd graph; `values` holds their scalars.
#[derive(Debug, Clone)]
pub struct VqLosses {
    pub recon: Tensor,
    pub emb: Tensor,
    pub com: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLossValues {
    pub recon: f64,
    pub emb: f64,
    pub com: f64,
    pub total: f64,
}

impl VqLosses {
    pub fn values(&self) -> Result<VqLossValues> {
        Ok(VqLossValues {
            recon: nn::scalar(&self.recon)?,
            emb: nn::scalar(&self.emb)?,
            com: nn::scalar(&self.com)?,
            total: nn::scalar(&self.total)?,
        })
    }
}

const NORM_EPS: f64 = 1e-12;

/// Per-position Euclidean norm averaged over batch and positions, with a gradient-safe
/// offset that keeps the value exactly 0 at 0.
fn mean_norm(diff: &Tensor) -> Result<Tensor> {
    let sq = diff.sqr()?.sum(candle_core::D::Minus1)?;
    let norm = ((sq + NORM_EPS)?.sqrt()? - NORM_EPS.sqrt())?;
    Ok(norm.mean_all()?)
}

fn velocity(x: &Tensor) -> Result<Option<Tensor>> {
    let t = x.dim(1)?;
    if t < 2 {
        return Ok(None);
    }
    Ok(Some((x.narrow(1, 1, t - 1)? - x.narrow(1, 0, t - 1)?)?))
}

/// `recon = SmoothL1(m, m̂) + α_vel·SmoothL1(V(m), V(m̂))`, `emb = mean‖sg[z_e] − z_q‖`,
/// `com = mean‖z_e − sg[z_q]‖`, `total = recon + emb + β·com`. Motions are `(B, T, D)`,
/// latents and quantized vectors `(B, n, d)`.
pub fn vq_losses(
    motion: &Tensor,
    reconstruction: &Tensor,
    latents: &Tensor,
    quantized: &Tensor,
    config: &VqConfig,
) -> Result<VqLosses> {
    if motion.dims() != reconstruction.dims() {
        return Err(Error::DimMismatch(format!(
            "motion {:?} vs reconstruction {:?}",
            motion.dims(),
            reconstruction.dims()
        )));
    }
    if latents.dims() != quantized.dims() {
        return Err(Error::DimMismatch(format!(
            "latents {:?} vs quantized {:?}",
            latents.dims(),
            quantized.dims()
        )));
    }
    let mut recon = nn::smooth_l1(motion, reconstruction)?;
    if let (Some(vm), Some(vr)) = (velocity(motion)?, velocity(reconstruction)?) {
        recon = (recon + (nn::smooth_l1(&vm, &vr)? * config.velocity_weight)?)?;
    }
    let emb = mean_norm(&(latents.detach() - quantized)?)?;
    let com = mean_norm(&(latents - quantized.detach())?)?;
    let total = ((&recon + &emb)? + (&com * config.commit_beta)?)?;
    Ok(VqLosses { recon, emb, com, total })
}

/// Encoder, codebook and decoder bound to the normalization statistics they were trained on.
pub struct MotionTokenizer {
    config: VqConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Codebook,
    stats: FeatureStats,
}

impl MotionTokenizer {
    pub fn init(input_dim: usize, config: &VqConfig, stats: FeatureStats) -> Result<Self> {
        Self::init_with_dtype(input_dim, config, stats, DType::F32)
    }

    pub fn init_with_dtype(input_dim: usize, config: &VqConfig, stats: FeatureStats, dtype: DType) -> Result<Self> {
        config.validate()?;
        if stats.dim() != input_dim {
            return Err(Error::DimMismatch("stats dim differs from input dim".into()));
        }
        let mut store = ParamStore::new(seed::derive(config.seed, "vq/params"), dtype);
        let encoder = Encoder::new(&mut store, input_dim, config)?;
        let decoder = Decoder::new(&mut store, input_dim, config, config.zero_init_output)?;
        let mut rng = seed::stage_rng(config.seed, "vq/codebook");
        let codes = (0..config.codebook_size * config.code_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let codebook = Codebook::new(config.codebook_size, config.code_dim, codes)?;
        Ok(Self { config: config.clone(), store, encoder, decoder, codebook, stats })
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut Codebook {
        &mut self.codebook
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn input_dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn ratio(&self) -> usize {
        self.config.downsample_ratio
    }

    pub fn stats_hash(&self) -> String {
        seed::sha256_hex(serde_json::to_string(&self.stats).unwrap_or_default().as_bytes())
    }

    /// Token count for a clip of `frames` frames.
    pub fn token_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.ratio())
    }

    /// Encodes a normalized motion; frames are edge-padded up to a multiple of the ratio.
    pub fn encode(&self, motion: &MotionSequence) -> Result<LatentSequence> {
        let r = self.ratio();
        if motion.frames() < r {
            return Err(Error::TooShort { frames: motion.frames(), ratio: r });
        }
        if motion.dim() != self.input_dim() {
            return Err(Error::DimMismatch(format!("motion dim {} vs tokenizer {}", motion.dim(), self.input_dim())));
        }
        let n = self.token_len(motion.frames());
        let padded = n * r;
        let mut data = motion.data().to_vec();
        let last = motion.frame(motion.frames() - 1).to_vec();
        for _ in motion.frames()..padded {
            data.extend_from_slice(&last);
        }
        let x = nn::from_f32(data, (1, padded, motion.dim()), self.dtype())?;
        let z = self.encoder.forward(&x)?;
        Ok(LatentSequence { n, dim: self.config.code_dim, vectors: nn::to_vec_f32(&z)?, downsample_ratio: r })
    }

    pub fn quantize(&self, latents: &LatentSequence) -> Result<(TokenSequence, Vec<f32>)> {
        if latents.dim != self.codebook.dim() {
            return Err(Error::DimMismatch(format!("latent dim {} vs codebook {}", latents.dim, self.codebook.dim())));
        }
        let (tokens, q) = self.codebook.quantize(&latents.vectors)?;
        Ok((TokenSequence { tokens, codebook_size: self.codebook.size() }, q))
    }

    /// Decodes `n × d` quantized vectors to a normalized motion of `n · ratio` frames.
    pub fn decode(&self, quantized: &[f32]) -> Result<MotionSequence> {
        let d = self.config.code_dim;
        if quantized.is_empty() || quantized.len() % d != 0 {
            return Err(Error::DimMismatch(format!("{} values is not n x {d}", quantized.len())));
        }
        let n = quantized.len() / d;
        let q = nn::from_f32(quantized.to_vec(), (1, n, d), self.dtype())?;
        let out = self.decoder.forward(&q)?;
        MotionSequence::new(n * self.ratio(), self.input_dim(), nn::to_vec_f32(&out)?)
    }

    pub fn decode_tokens(&self, tokens: &[u32]) -> Result<MotionSequence> {
        self.decode(&self.codebook.lookup(tokens)?)
    }

    /// Raw motion → tokens (normalize, encode, quantize).
    pub fn tokenize(&self, raw: &MotionSequence) -> Result<TokenSequence> {
        let normed = corpus::normalize(raw, &self.stats)?;
        Ok(self.quantize(&self.encode(&normed)?)?.0)
    }

    /// Tokens → raw motion (decode, denormalize).
    pub fn detokenize(&self, tokens: &[u32]) -> Result<MotionSequence> {
        corpus::denormalize(&self.decode_tokens(tokens)?, &self.stats)
    }

    /// Normalized reconstruction truncated to the input length.
    pub fn reconstruct(&self, normalized: &MotionSequence) -> Result<MotionSequence> {
        let (_, q) = self.quantize(&self.encode(normalized)?)?;
        let out = self.decode(&q)?;
        let keep = normalized.frames() * normalized.dim();
        MotionSequence::new(normalized.frames(), normalized.dim(), out.data()[..keep].to_vec())
    }

    /// Forward pass over a `(B, T, D)` batch returning every loss component.
    pub fn batch_losses(&mut self, x: &Tensor, update_codebook: bool) -> Result<(VqLosses, Vec<f32>, Vec<u32>)> {
        let z = self.encoder.forward(x)?;
        let (b, n, d) = z.dims3()?;
        let flat = nn::to_vec_f32(&z)?;
        let (tokens, q) = self.codebook.quantize(&flat)?;
        let q = nn::from_f32(q, (b, n, d), self.dtype())?;
        // straight-through: the forward value is exactly q, the backward pass hands the
        // decoder gradient to z unchanged
        let z_st = (&q + (&z - z.detach())?)?;
        let recon = self.decoder.forward(&z_st)?;
        let losses = vq_losses(x, &recon, &z, &q, &self.config)?;
        if update_codebook {
            self.codebook.ema_update(&flat, &tokens, self.config.ema_decay)?;
            self.codebook.record_usage(&tokens);
        }
        Ok((losses, flat, tokens))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(MODULE_TAG, &self.config)?;
        ck.stats_hash = self.stats_hash();
        ck.extra = serde_json::json!({ "stats": self.stats });
        ck.tensors = self.store.snapshot()?;
        let cb = &self.codebook;
        let (s, d) = (cb.size(), cb.dim());
        ck.tensors.insert("codebook.codes".into(), nn::from_f32(cb.codes().to_vec(), (s, d), DType::F32)?);
        ck.tensors.insert("codebook.ema_counts".into(), nn::from_f32(cb.ema_counts().to_vec(), s, DType::F32)?);
        ck.tensors.insert("codebook.ema_sums".into(), nn::from_f32(cb.ema_sums().to_vec(), (s, d), DType::F32)?);
        ck.tensors.insert("codebook.usage".into(), nn::from_f32(cb.usage().to_vec(), s, DType::F32)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.module != MODULE_TAG {
            return Err(Error::Checkpoint(format!("expected `{MODULE_TAG}` checkpoint, got `{}`", ck.module)));
        }
        let config: VqConfig = ck.config_as()?;
        config.validate()?;
        #[derive(Deserialize)]
        struct Extra {
            stats: FeatureStats,
        }
        let extra: Extra = ck.extra_as()?;
        let mut params = ck.tensors.clone();
        let take = |params: &mut std::collections::BTreeMap<String, Tensor>, k: &str| -> Result<Vec<f32>> {
            let t = params.remove(k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))?;
            nn::to_vec_f32(&t)
        };
        let codes = take(&mut params, "codebook.codes")?;
        let counts = take(&mut params, "codebook.ema_counts")?;
        let sums = take(&mut params, "codebook.ema_sums")?;
        let usage = take(&mut params, "codebook.usage")?;
        let codebook = Codebook::from_parts(config.codebook_size, config.code_dim, codes, counts, sums, usage)?;
        let input_dim = extra.stats.dim();
        let mut store = ParamStore::from_tensors(params, DType::F32)?;
        let encoder = Encoder::new(&mut store, input_dim, &config)?;
        let decoder = Decoder::new(&mut store, input_dim, &config, config.zero_init_output)?;
        if store.len() != ck.tensors.len() - 4 {
            return Err(Error::Checkpoint("vq checkpoint has unexpected parameters".into()));
        }
        Ok(Self { config, store, encoder, decoder, codebook, stats: extra.stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, MODULE_TAG)?)
    }
}

/// Loss curve and endpoint evaluations on a fixed held batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<(usize, f64)>,
}

fn sample_windows(
    motions: &[MotionSequence],
    window: usize,
    align: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let dim = motions[0].dim();
    let mut data = Vec::with_capacity(batch * window * dim);
    for _ in 0..batch {
        let m = &motions[rng.gen_range(0..motions.len())];
        // windows start on token boundaries
        let start = rng.gen_range(0..=(m.frames() - window) / align) * align;
        data.extend_from_slice(&m.data()[start * dim..(start + window) * dim]);
    }
    nn::from_f32(data, (batch, window, dim), DType::F32)
}

/// Trains the tokenizer on every sample of `dataset`; pass the training split.
pub fn train_vq(dataset: &Dataset, config: &VqConfig) -> Result<(MotionTokenizer, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = corpus::compute_stats(dataset)?;
    let mut tok = MotionTokenizer::init(dataset.dim(), config, stats)?;
    let motions: Vec<MotionSequence> = dataset
        .motions()
        .iter()
        .map(|m| corpus::normalize(m, tok.stats()))
        .collect::<Result<_>>()?;
    let shortest = motions.iter().map(|m| m.frames()).min().unwrap_or(0);
    let r = config.downsample_ratio;
    let window = config.window.min(shortest / r * r);
    if window < r {
        return Err(Error::TooShort { frames: shortest, ratio: r });
    }
    let mut rng = seed::stage_rng(config.seed, "vq/batches");
    let held = sample_windows(&motions, window, r, config.batch_size, &mut seed::stage_rng(config.seed, "vq/held"))?;
    let mut report = TrainReport::default();
    if config.iterations == 0 {
        return Ok((tok, report));
    }
    report.initial_loss = nn::scalar(&tok.batch_losses(&held, false)?.0.total)?;
    let mut trainer = Trainer::new(tok.store.vars(), config.optim.clone(), config.iterations)?;
    let mut reset_rng = seed::stage_rng(config.seed, "vq/reset");
    for step in 0..config.iterations {
        let x = sample_windows(&motions, window, r, config.batch_size, &mut rng)?;
        let (losses, latents, _) = tok.batch_losses(&x, true)?;
        let loss = trainer.step(&losses.total)?;
        if step % config.reset_every == 0 {
            let replaced = tok.codebook.code_reset(config.reset_threshold, &latents, &mut reset_rng)?;
            if !replaced.is_empty() {
                log::debug!("vq step {step}: reset {} codes", replaced.len());
            }
            tok.codebook.clear_usage();
        }
        if step % 50 == 0 || step + 1 == config.iterations {
            log::info!("vq step {step}: loss {loss:.5}");
            report.curve.push((step, loss));
        }
    }
    report.final_loss = nn::scalar(&tok.batch_losses(&held, false)?.0.total)?;
    Ok((tok, report))
}

/// Relative reconstruction error `‖m − m̂‖ / ‖m‖` over normalized motions.
pub fn relative_reconstruction_error(tok: &MotionTokenizer, dataset: &Dataset) -> Result<f64> {
    let mut num = 0f64;
    let mut den = 0f64;
    for m in dataset.motions() {
        let x = corpus::normalize(m, tok.stats())?;
        let y = tok.reconstruct(&x)?;
        for (a, b) in x.data().iter().zip(y.data()) {
            num += ((a - b) as f64).powi(2);
            den += (*a as f64).powi(2);
        }
    }
    if den == 0.0 {
        return Err(Error::Invalid("zero-energy dataset".into()));
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthConfig};

    fn small_cfg() -> VqConfig {
        VqConfig {
            codebook_size: 16,
            code_dim: 8,
            width: 16,
            depth: 1,
            batch_size: 8,
            window: 16,
            iterations: 0,
            optim: OptimConfig { lr: 1e-3, warmup: 10, ..Default::default() },
            ..Default::default()
        }
    }

    fn tok(cfg: &VqConfig) -> MotionTokenizer {
        MotionTokenizer::init(6, cfg, FeatureStats::identity(6)).unwrap()
    }

    fn motion(frames: usize) -> MotionSequence {
        let data = (0..frames * 6).map(|i| ((i as f32) * 0.37).sin()).collect();
        MotionSequence::new(frames, 6, data).unwrap()
    }

    #[test]
    fn encode_lengths_follow_ceiling_rule() {
        let t = tok(&small_cfg());
        assert_eq!(t.encode(&motion(64)).unwrap().n, 16);
        assert_eq!(t.encode(&motion(4)).unwrap().n, 1);
        assert_eq!(t.encode(&motion(65)).unwrap().n, 17);
        assert!(matches!(t.encode(&motion(3)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn decode_shapes() {
        let t = tok(&small_cfg());
        let q = vec![0.1f32; 16 * 8];
        assert_eq!(t.decode(&q).unwrap().frames(), 64);
        let x = motion(64);
        let (_, qx) = t.quantize(&t.encode(&x).unwrap()).unwrap();
        let y = t.decode(&qx).unwrap();
        assert_eq!((y.frames(), y.dim()), (x.frames(), x.dim()));
        assert!(t.decode(&[]).is_err());
    }

    #[test]
    fn zero_codes_through_zero_output_layer() {
        let t = tok(&VqConfig { zero_init_output: true, ..small_cfg() });
        let y = t.decode(&vec![0.0; 3 * 8]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_examples() {
        let dev = candle_core::Device::Cpu;
        let cfg = VqConfig { commit_beta: 0.25, ..small_cfg() };
        let m = Tensor::new(&[[[1.0f64, 2.0], [3.0, 4.0]]], &dev).unwrap();
        let z = Tensor::new(&[[[0.5f64, 0.5]]], &dev).unwrap();
        let v = vq_losses(&m, &m, &z, &z, &cfg).unwrap().values().unwrap();
        assert_eq!((v.recon, v.emb, v.com, v.total), (0.0, 0.0, 0.0, 0.0));

        let constant = Tensor::new(&[[[1.0f64, 1.0], [1.0, 1.0], [1.0, 1.0]]], &dev).unwrap();
        let shifted = (&constant + 0.5).unwrap();
        let only = VqConfig { velocity_weight: 0.0, ..cfg.clone() };
        let a = vq_losses(&constant, &shifted, &z, &z, &cfg).unwrap().values().unwrap();
        let b = vq_losses(&constant, &shifted, &z, &z, &only).unwrap().values().unwrap();
        assert!((a.recon - b.recon).abs() < 1e-12);

        let lat = Tensor::new(&[[[1.0f64, 0.0]]], &dev).unwrap();
        let code = Tensor::new(&[[[0.0f64, 0.0]]], &dev).unwrap();
        let v = vq_losses(&m, &m, &lat, &code, &cfg).unwrap().values().unwrap();
        assert!((v.emb - 1.0).abs() < 1e-5 && (v.com - 1.0).abs() < 1e-5);
        assert!((v.total - 1.25).abs() < 1e-5);
        assert!(vq_losses(&m, &constant, &lat, &code, &cfg).is_err());
    }

    #[test]
    fn zero_iterations_is_initialization() {
        let ds = synth_generate(&SynthConfig { num_samples: 8, dim: 6, ..Default::default() }).unwrap();
        let cfg = small_cfg();
        let (trained, _) = train_vq(&ds, &cfg).unwrap();
        let init = MotionTokenizer::init(6, &cfg, corpus::compute_stats(&ds).unwrap()).unwrap();
        assert_eq!(
            trained.to_checkpoint().unwrap().to_bytes().unwrap(),
            init.to_checkpoint().unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn training_reduces_loss_and_reload_is_exact() {
        let ds = synth_generate(&SynthConfig { num_samples: 32, dim: 6, ..Default::default() }).unwrap();
        let cfg = VqConfig { iterations: 60, ..small_cfg() };
        let (t, report) = train_vq(&ds, &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vq.ckpt");
        t.save(&p).unwrap();
        let back = MotionTokenizer::load(&p).unwrap();
        let x = corpus::normalize(ds.motion(0), t.stats()).unwrap();
        assert_eq!(t.reconstruct(&x).unwrap(), back.reconstruct(&x).unwrap());
        let (t2, _) = train_vq(&ds, &cfg).unwrap();
        assert_eq!(t.to_checkpoint().unwrap().to_bytes().unwrap(), t2.to_checkpoint().unwrap().to_bytes().unwrap());
    }
}

#[cfg(test)]
mod gradtests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;

    fn setup() -> (MotionTokenizer, Tensor) {
        let cfg = VqConfig { codebook_size: 4, code_dim: 4, width: 8, depth: 1, window: 8, ..Default::default() };
        let t = MotionTokenizer::init_with_dtype(3, &cfg, FeatureStats::identity(3), DType::F64).unwrap();
        let mut rng = crate::seed::rng(3);
        let x: Vec<f32> = (0..2 * 8 * 3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        (t, nn::from_f32(x, (2, 8, 3), DType::F64).unwrap())
    }

    #[test]
    fn autoencoder_gradients() {
        let (t, x) = setup();
        let mut f = || -> Result<Tensor> { nn::smooth_l1(&x, &t.decoder().forward(&t.encoder().forward(&x)?)?) };
        let r = check_gradients(t.store(), |_| true, 3, 1e-6, &mut f).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn frozen_codes(t: &MotionTokenizer, x: &Tensor) -> Tensor {
        let z0 = t.encoder().forward(x).unwrap();
        let (tokens, _) = t.codebook().quantize(&nn::to_vec_f32(&z0).unwrap()).unwrap();
        nn::from_f32(t.codebook().lookup(&tokens).unwrap(), z0.dims3().unwrap(), DType::F64).unwrap()
    }

    // Finite differences cannot see through the straight-through path, so the decoder is
    // checked on the reconstruction term and the encoder on the commitment term.
    #[test]
    fn vq_loss_component_gradients() {
        let (t, x) = setup();
        let q = frozen_codes(&t, &x);
        let cfg = t.config().clone();
        let mut recon = || -> Result<Tensor> {
            let z = t.encoder().forward(&x)?;
            Ok(vq_losses(&x, &t.decoder().forward(&q)?, &z, &q, &cfg)?.recon)
        };
        let r = check_gradients(t.store(), |n| n.starts_with("decoder."), 3, 1e-6, &mut recon).unwrap();
        assert!(r.max_rel_error < 1e-4, "recon: {r:?}");
        let mut com = || -> Result<Tensor> {
            let z = t.encoder().forward(&x)?;
            Ok(vq_losses(&x, &x, &z, &q, &cfg)?.com)
        };
        let r = check_gradients(t.store(), |n| n.starts_with("encoder."), 3, 1e-6, &mut com).unwrap();
        assert!(r.max_rel_error < 1e-4, "com: {r:?}");
    }

    #[test]
    fn straight_through_copies_decoder_gradient() {
        let (t, x) = setup();
        let q = frozen_codes(&t, &x);
        let z = candle_core::Var::from_tensor(&t.encoder().forward(&x).unwrap().detach()).unwrap();
        let z = z.as_tensor();
        let st = (&q + (z - z.detach()).unwrap()).unwrap();
        let grads = nn::smooth_l1(&x, &t.decoder().forward(&st).unwrap()).unwrap().backward().unwrap();
        let via_st = nn::to_vec_f64(grads.get(z).unwrap()).unwrap();
        let qv = candle_core::Var::from_tensor(&q).unwrap();
        let grads = nn::smooth_l1(&x, &t.decoder().forward(qv.as_tensor()).unwrap()).unwrap().backward().unwrap();
        assert_eq!(via_st, nn::to_vec_f64(grads.get(qv.as_tensor()).unwrap()).unwrap());
    }
}
