//! Property checks run by `lamp selftest`: the masking schedule, corruption policy,
//! guidance, causal masking, decoding, quantization, gradients, EMA and metric kernels.
//! Each check is self-contained on small random instances with fixed seeds.

use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::alignment::{LampBatch, LampConfig, LampModel, MotionInput};
use crate::captioner::lamp_bertscore;
use crate::corpus::FeatureStats;
use crate::generator::{
    attention_rank_check, cfg_mix, corrupt, corrupt_traced, mask_count, mask_ratio, AttentionMode, CorruptionPolicy,
    GenerationConfig, Remask, T2MConfig, T2MModel,
};
use crate::metrics;
use crate::nn::{self, gradcheck::check_gradients};
use crate::text::Vocabulary;
use crate::vq::{vq_losses, Codebook, MotionTokenizer, TokenSequence, VqConfig};
use crate::{seed, Result};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// `⌈γ(r)·n⌉` selections for 1,000 random `(n, r)`; exact endpoints and `γ(½) = √2/2`.
pub fn schedule_exactness() -> Check {
    timed("schedule exactness", || {
        let mut rng = seed::stage_rng(0, "check/schedule");
        let mut bad = 0;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=256);
            let r: f64 = rng.gen();
            let tokens = TokenSequence { tokens: vec![0; n], codebook_size: 8 };
            let (_, pos) = corrupt(&tokens, r, &CorruptionPolicy::default(), &mut rng)?;
            if pos.len() != (mask_ratio(r)? * n as f64).ceil() as usize || pos.len() != mask_count(n, r)? {
                bad += 1;
            }
        }
        let half = (mask_ratio(0.5)? - std::f64::consts::FRAC_1_SQRT_2).abs();
        let ends = mask_ratio(0.0)? == 1.0 && mask_ratio(1.0)? == 0.0;
        Ok((bad == 0 && ends && half <= 1e-12, format!("{bad} count mismatches, |γ(0.5) − √2/2| = {half:.1e}, endpoints exact: {ends}")))
    })
}

/// Mask/random/keep frequencies over 10⁵ selected positions within ±0.01.
pub fn remask_categories() -> Check {
    timed("remask categories", || {
        let mut rng = seed::stage_rng(0, "check/remask");
        let tokens = TokenSequence { tokens: vec![1; 64], codebook_size: 16 };
        let mut counts = [0usize; 3];
        let mut total = 0;
        while total < 100_000 {
            let (_, _, kinds) = corrupt_traced(&tokens, 0.0, &CorruptionPolicy::default(), &mut rng)?;
            for k in kinds {
                counts[match k {
                    Remask::Mask => 0,
                    Remask::Random => 1,
                    Remask::Keep => 2,
                }] += 1;
                total += 1;
            }
        }
        let f: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let ok = f.iter().zip([0.8, 0.1, 0.1]).all(|(a, b)| (a - b).abs() <= 0.01);
        Ok((ok, format!("(mask, random, keep) = ({:.4}, {:.4}, {:.4}) over {total}", f[0], f[1], f[2])))
    })
}

fn toy_t2m() -> Result<T2MModel> {
    let cfg = T2MConfig { layers: 2, heads: 2, hidden: 16, ffn_mult: 2, max_len: 16, batch_size: 2, iterations: 0, ..Default::default() };
    T2MModel::init_with_dtype(&cfg, 8, 2, 4, DType::F64)
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `α = 0` returns the conditional logits exactly; the mix is affine in `α`.
pub fn guidance_mixing() -> Check {
    timed("classifier-free guidance", || {
        let m = toy_t2m()?;
        let mut rng = seed::stage_rng(0, "check/cfg");
        let c = random_vec(&mut rng, 8);
        let tokens = vec![(0..6).map(|_| rng.gen_range(0..9)).collect::<Vec<u32>>()];
        let l_c = m.forward(&tokens, &[Some(&c)], AttentionMode::Causal)?;
        let l_uc = m.forward(&tokens, &[None], AttentionMode::Causal)?;
        let exact = nn::to_vec_f64(&cfg_mix(&l_c, &l_uc, 0.0)?)? == nn::to_vec_f64(&l_c)?;
        let at = |a: f64| nn::to_vec_f64(&cfg_mix(&l_c, &l_uc, a).unwrap());
        let (f1, f2, f3) = (at(0.5)?, at(2.0)?, at(5.0)?);
        let t = (2.0 - 0.5) / (5.0 - 0.5);
        let dev = f1.iter().zip(&f2).zip(&f3).map(|((a, b), c)| (b - (a + t * (c - a))).abs()).fold(0.0, f64::max);
        Ok((exact && dev <= 1e-6, format!("α=0 exact: {exact}, affinity deviation {dev:.1e}")))
    })
}

/// Perturbing a suffix never moves earlier logits by more than 1e-5 (50 instances).
pub fn causal_independence() -> Check {
    timed("causal independence", || {
        let m = toy_t2m()?;
        let mut rng = seed::stage_rng(0, "check/causal");
        let mut worst = 0f64;
        for _ in 0..50 {
            let n = rng.gen_range(2..=16);
            let cut = rng.gen_range(1..n);
            let a: Vec<u32> = (0..n).map(|_| rng.gen_range(0..9)).collect();
            let mut b = a.clone();
            for t in &mut b[cut..] {
                *t = rng.gen_range(0..9);
            }
            let c = random_vec(&mut rng, 8);
            let la = nn::to_vec_f64(&m.forward(&[a], &[Some(&c)], AttentionMode::Causal)?)?;
            let lb = nn::to_vec_f64(&m.forward(&[b], &[Some(&c)], AttentionMode::Causal)?)?;
            let prefix = cut * 8;
            worst = la[..prefix].iter().zip(&lb[..prefix]).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
        }
        Ok((worst <= 1e-5, format!("max prefix logit change {worst:.1e}")))
    })
}

/// 100 causal softmax attention matrices at n = 32, d_head = 4: full rank, positive
/// diagonal, rows summing to 1.
pub fn causal_full_rank() -> Check {
    timed("causal attention full rank", || {
        let r = attention_rank_check(32, 4, AttentionMode::Causal, 100, 0)?;
        let ok = r.full_rank_fraction() == 1.0 && r.causal_invariants_hold && r.min_diagonal > 0.0;
        let bi = attention_rank_check(32, 4, AttentionMode::Bidirectional, 20, 0)?;
        let max_bi = bi.ranks.iter().max().copied().unwrap_or(0);
        Ok((ok, format!("full-rank fraction {}, min diagonal {:.2e}; bidirectional max rank {max_bi}", r.full_rank_fraction(), r.min_diagonal)))
    })
}

/// Decoding for K = 1..10 ends mask-free, fixed sets only grow, and per-step remask
/// counts follow the schedule grid.
pub fn decoding_schedule() -> Check {
    timed("iterative decoding", || {
        let m = toy_t2m()?;
        let c = random_vec(&mut seed::stage_rng(0, "check/decode"), 8);
        let mut problems = Vec::new();
        for k in 1..=10 {
            let cfg = GenerationConfig { iterations: k, length: 16, seed: k as u64, ..Default::default() };
            let (out, trace) = m.iterative_decode_traced(&c, &cfg)?;
            if out.tokens.iter().any(|&t| t == m.mask_id()) {
                problems.push(format!("K={k}: masks remain"));
            }
            for w in trace.windows(2) {
                if !w[0].fixed.iter().all(|p| w[1].fixed.contains(p)) {
                    problems.push(format!("K={k}: fixed set shrank"));
                }
            }
            let counts: Vec<usize> = trace.iter().map(|s| s.remasked.len()).collect();
            let expect = (1..=k).map(|i| mask_count(16, i as f64 / k as f64)).collect::<Result<Vec<_>>>()?;
            if counts != expect {
                problems.push(format!("K={k}: remask counts {counts:?} != {expect:?}"));
            }
            if k == 4 && counts != [15, 12, 7, 0] {
                problems.push(format!("K=4 grid {counts:?}"));
            }
        }
        Ok((problems.is_empty(), if problems.is_empty() { "K = 1..10 ok; n=16, K=4 → 15, 12, 7, 0".into() } else { problems.join("; ") }))
    })
}

/// Quantization of 1,000 latents against a 128-code book equals brute force, including
/// the lowest-index tie-break (the book holds duplicated codes).
pub fn quantizer_oracle() -> Check {
    timed("quantizer oracle", || {
        let (s, d) = (128, 8);
        let mut rng = seed::stage_rng(0, "check/quantize");
        let mut codes = random_vec(&mut rng, s * d);
        for dup in 0..16 {
            let (src, dst) = (dup * 2, 64 + dup * 3);
            let v = codes[src * d..(src + 1) * d].to_vec();
            codes[dst * d..(dst + 1) * d].copy_from_slice(&v);
        }
        let cb = Codebook::new(s, d, codes.clone())?;
        let mut latents = random_vec(&mut rng, 1000 * d);
        // every tenth latent sits exactly on a duplicated code
        for i in (0..1000).step_by(10) {
            let src = (i / 10 % 16) * 2;
            latents[i * d..(i + 1) * d].copy_from_slice(&codes[src * d..(src + 1) * d]);
        }
        let (tokens, _) = cb.quantize(&latents)?;
        let mut mismatches = 0;
        for (i, v) in latents.chunks(d).enumerate() {
            let mut best = (0usize, f32::INFINITY);
            for (k, c) in codes.chunks(d).enumerate() {
                let dist: f32 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            if tokens[i] as usize != best.0 {
                mismatches += 1;
            }
        }
        Ok((mismatches == 0, format!("{mismatches} mismatches over 1000 latents")))
    })
}

fn toy_tokenizer() -> Result<(MotionTokenizer, Tensor)> {
    let cfg = VqConfig { codebook_size: 4, code_dim: 4, width: 8, depth: 1, window: 8, ..Default::default() };
    let t = MotionTokenizer::init_with_dtype(3, &cfg, FeatureStats::identity(3), DType::F64)?;
    let x = random_vec(&mut seed::stage_rng(0, "check/vq-input"), 2 * 8 * 3);
    Ok((t, nn::from_f32(x, (2, 8, 3), DType::F64)?))
}

fn frozen_codes(t: &MotionTokenizer, x: &Tensor) -> Result<Tensor> {
    let z = t.encoder().forward(x)?;
    let (tokens, _) = t.codebook().quantize(&nn::to_vec_f32(&z)?)?;
    nn::from_f32(t.codebook().lookup(&tokens)?, z.dims3()?, DType::F64)
}

fn toy_lamp() -> Result<(LampModel, LampBatch)> {
    let cfg = LampConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        ffn_mult: 2,
        num_queries: 3,
        proj_dim: 8,
        max_text_len: 12,
        max_motion_tokens: 8,
        batch_size: 3,
        iterations: 0,
        ..Default::default()
    };
    let vocab = Vocabulary::build(["a person walks left", "someone waves right quickly"]);
    let m = LampModel::init_with_dtype(&cfg, vocab, 6, 4, DType::F64)?;
    let mut rng = seed::stage_rng(0, "check/lamp");
    let motions = [4, 3, 4]
        .iter()
        .map(|&n| MotionInput { n, latents: random_vec(&mut rng, n * 4), tokens: (0..n).map(|_| rng.gen_range(0..6)).collect() })
        .collect();
    let texts = m.encode_texts(&["a person walks left", "someone waves", "walks right quickly"])?;
    Ok((m, LampBatch { motions, texts, groups: vec![0, 1, 2] }))
}

/// Central differences against backward for every training loss, relative error ≤ 1e-4.
pub fn gradient_checks() -> Check {
    timed("gradient checks", || {
        let mut results: Vec<(&str, f64)> = Vec::new();
        let (t, x) = toy_tokenizer()?;
        let q = frozen_codes(&t, &x)?;
        let cfg = t.config().clone();
        let mut recon = || -> Result<Tensor> {
            let z = t.encoder().forward(&x)?;
            Ok(vq_losses(&x, &t.decoder().forward(&q)?, &z, &q, &cfg)?.recon)
        };
        results.push(("vq recon", check_gradients(t.store(), |n| n.starts_with("decoder."), 3, 1e-6, &mut recon)?.max_rel_error));
        let mut com = || -> Result<Tensor> {
            let z = t.encoder().forward(&x)?;
            Ok(vq_losses(&x, &x, &z, &q, &cfg)?.com)
        };
        results.push(("vq com", check_gradients(t.store(), |n| n.starts_with("encoder."), 3, 1e-6, &mut com)?.max_rel_error));
        let mut ae = || -> Result<Tensor> { nn::smooth_l1(&x, &t.decoder().forward(&t.encoder().forward(&x)?)?) };
        results.push(("vq autoencoder", check_gradients(t.store(), |_| true, 2, 1e-6, &mut ae)?.max_rel_error));

        let (m, b) = toy_lamp()?;
        let motions: Vec<&MotionInput> = b.motions.iter().collect();
        let tokens: Vec<Vec<u32>> = b.motions.iter().map(|x| x.tokens.clone()).collect();
        let negs = [1usize, 2, 0];
        let mut contrastive = || Ok(m.losses(&b, &mut seed::rng(0))?.contrastive);
        results.push(("contrastive", check_gradients(m.store(), |_| true, 2, 1e-5, &mut contrastive)?.max_rel_error));
        let mut matching = || m.matching_loss(&motions, &b.texts, &negs);
        results.push(("matching", check_gradients(m.store(), |_| true, 2, 1e-5, &mut matching)?.max_rel_error));
        let mut mgt = || m.mgt_loss(&motions, &b.texts);
        results.push(("mgt", check_gradients(m.store(), |_| true, 2, 1e-5, &mut mgt)?.max_rel_error));
        let mut tgm = || m.tgm_loss(&b.texts, &tokens);
        results.push(("tgm", check_gradients(m.store(), |_| true, 2, 1e-5, &mut tgm)?.max_rel_error));

        let g = toy_t2m()?;
        let clean = vec![vec![1u32, 2, 3, 4], vec![5, 6, 0, 1]];
        let corrupted = vec![vec![1u32, 8, 3, 8], vec![8, 6, 2, 1]];
        let selected = vec![vec![1, 3], vec![0, 2]];
        let c = random_vec(&mut seed::stage_rng(1, "check/grad-cond"), 8);
        let mut nll = || g.loss_for(&clean, &corrupted, &selected, &[Some(&c), None]);
        results.push(("masked_nll", check_gradients(g.store(), |_| true, 2, 1e-5, &mut nll)?.max_rel_error));

        let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
        let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
        Ok((worst <= 1e-4, detail))
    })
}

/// `com` has no gradient path to the codebook; decay → 1 freezes codes; a single repeated
/// vector pulls its code within 1e-3 after 2,000 EMA steps.
pub fn stop_gradient_and_ema() -> Check {
    timed("stop-gradient and EMA", || {
        let (t, x) = toy_tokenizer()?;
        let z = t.encoder().forward(&x)?;
        let (tokens, _) = t.codebook().quantize(&nn::to_vec_f32(&z)?)?;
        let (s, d) = (t.codebook().size(), t.codebook().dim());
        let book = Var::from_tensor(&nn::from_f32(t.codebook().codes().to_vec(), (s, d), DType::F64)?)?;
        let q = book.as_tensor().index_select(&nn::ids(tokens, z.elem_count() / d)?, 0)?.reshape(z.dims())?;
        let grads = vq_losses(&x, &x, &z, &q, t.config())?.com.backward()?;
        let com_grad = match grads.get(book.as_tensor()) {
            Some(g) => nn::to_vec_f64(g)?.iter().fold(0.0, |a: f64, v| a.max(v.abs())),
            None => 0.0,
        };

        let mut cb = Codebook::new(2, 2, vec![0.0, 0.0, 2.0, 2.0])?;
        cb.ema_update(&[1.0, 1.0], &[0], 0.5)?;
        let before = cb.codes().to_vec();
        cb.ema_update(&[9.0, -9.0], &[0], 1.0 - 1e-9)?;
        let frozen = before.iter().zip(cb.codes()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);

        let mut single = Codebook::new(2, 3, vec![5.0, -5.0, 0.0, 1.0, 1.0, 1.0])?;
        let target = [0.25f32, 0.5, -1.0];
        for _ in 0..2000 {
            single.ema_update(&target, &[0], 0.99)?;
        }
        let conv = single.code(0).iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        let ok = com_grad == 0.0 && frozen < 1e-6 && conv <= 1e-3;
        Ok((ok, format!("max |∂com/∂codebook| = {com_grad}, frozen drift {frozen:.1e}, single-vector error {conv:.1e}")))
    })
}

/// FID(X, X), shifted-Gaussian FID, self BertScore and the R-precision null model.
pub fn metric_self_tests() -> Check {
    timed("metric self-tests", || {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seed::stage_rng(0, "check/metrics");
        let mut normal = |n: usize, p: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
        };
        let x = normal(500, 4);
        let self_fid = metrics::fid(&x, &x)?;
        let v = [0.5, -1.0, 0.25, 2.0];
        let shifted: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a + b).collect()).collect();
        let expect: f64 = v.iter().map(|a| a * a).sum();
        let shift_err = (metrics::fid(&x, &shifted)? - expect).abs();

        let (lamp, _) = toy_lamp()?;
        let s = lamp_bertscore("a person walks left", "a person walks left", &lamp)?;
        let self_bs = s.precision == 1.0 && s.recall == 1.0 && s.f1 == 1.0;

        let n = 1000;
        let table: Vec<f32> = (0..n * n).map(|_| rng.gen()).collect();
        let r = metrics::r_precision_with(n, 32, 7, |i, j| table[i * n + j])?;
        let null_ok = (0..3).all(|k| {
            let p = (k + 1) as f64 / 32.0;
            (r[k] - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
        });
        let ok = self_fid <= 1e-6 && shift_err <= 1e-3 && self_bs && null_ok;
        Ok((
            ok,
            format!(
                "FID(X,X) {self_fid:.1e}, shift error {shift_err:.1e}, self BertScore exact: {self_bs}, null R@1..3 = {:.4}/{:.4}/{:.4}",
                r[0], r[1], r[2]
            ),
        ))
    })
}

pub fn run_all() -> Vec<Check> {
    vec![
        schedule_exactness(),
        remask_categories(),
        guidance_mixing(),
        causal_independence(),
        causal_full_rank(),
        decoding_schedule(),
        quantizer_oracle(),
        gradient_checks(),
        stop_gradient_and_ema(),
        metric_self_tests(),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
