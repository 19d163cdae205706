use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `S` code vectors of dimension `d` plus the running statistics used by the EMA update
/// and dead-code reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    size: usize,
    dim: usize,
    codes: Vec<f32>,
    ema_counts: Vec<f32>,
    ema_sums: Vec<f32>,
    usage: Vec<f32>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, codes: Vec<f32>) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 codes, got {size}")));
        }
        if codes.len() != size * dim {
            return Err(Error::DimMismatch(format!("{} values for a {size}x{dim} codebook", codes.len())));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("codebook contains non-finite values".into()));
        }
        Ok(Self {
            size,
            dim,
            codes,
            ema_counts: vec![0.0; size],
            ema_sums: vec![0.0; size * dim],
            usage: vec![0.0; size],
        })
    }

    pub(crate) fn from_parts(
        size: usize,
        dim: usize,
        codes: Vec<f32>,
        ema_counts: Vec<f32>,
        ema_sums: Vec<f32>,
        usage: Vec<f32>,
    ) -> Result<Self> {
        let mut cb = Self::new(size, dim, codes)?;
        if ema_counts.len() != size || ema_sums.len() != size * dim || usage.len() != size {
            return Err(Error::Checkpoint("codebook statistics have inconsistent shapes".into()));
        }
        cb.ema_counts = ema_counts;
        cb.ema_sums = ema_sums;
        cb.usage = usage;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The reserved mask token id, one past the last code.
    pub fn mask_id(&self) -> u32 {
        self.size as u32
    }

    pub fn codes(&self) -> &[f32] {
        &self.codes
    }

    pub fn code(&self, s: usize) -> &[f32] {
        &self.codes[s * self.dim..(s + 1) * self.dim]
    }

    pub fn ema_counts(&self) -> &[f32] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f32] {
        &self.ema_sums
    }

    pub fn usage(&self) -> &[f32] {
        &self.usage
    }

    pub fn set_usage(&mut self, usage: Vec<f32>) -> Result<()> {
        if usage.len() != self.size {
            return Err(Error::DimMismatch("usage length".into()));
        }
        self.usage = usage;
        Ok(())
    }

    pub fn clear_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0.0);
    }

    pub fn nearest(&self, v: &[f32]) -> u32 {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for s in 0..self.size {
            let d: f64 = self
                .code(s)
                .iter()
                .zip(v)
                .map(|(z, m)| {
                    let diff = *z as f64 - *m as f64;
                    diff * diff
                })
                .sum();
            // strict comparison keeps the lowest index on ties
            if d < best_d {
                best_d = d;
                best = s;
            }
        }
        best as u32
    }

    /// Nearest-code assignment for `n × d` row-major latents: tokens and quantized rows.
    pub fn quantize(&self, latents: &[f32]) -> Result<(Vec<u32>, Vec<f32>)> {
        if latents.len() % self.dim != 0 {
            return Err(Error::DimMismatch(format!(
                "{} latent values is not a multiple of code dim {}",
                latents.len(),
                self.dim
            )));
        }
        let tokens: Vec<u32> = latents.chunks_exact(self.dim).map(|v| self.nearest(v)).collect();
        let quantized = self.lookup(&tokens)?;
        Ok((tokens, quantized))
    }

    pub fn lookup(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens {
            if t as usize >= self.size {
                return Err(Error::TokenOutOfRange { token: t, size: self.size });
            }
            out.extend_from_slice(self.code(t as usize));
        }
        Ok(out)
    }

    /// Accumulates assignment counts into the usage window.
    pub fn record_usage(&mut self, tokens: &[u32]) {
        for &t in tokens {
            self.usage[t as usize] += 1.0;
        }
    }

    /// EMA step: counts and sums decay by `decay` and absorb `(1 - decay)` of the batch
    /// statistics; codes become `sums / counts` wherever count mass remains.
    pub fn ema_update(&mut self, latents: &[f32], tokens: &[u32], decay: f64) -> Result<()> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("EMA decay {decay} outside (0, 1)")));
        }
        if latents.len() != tokens.len() * self.dim {
            return Err(Error::DimMismatch("latents and assignments disagree".into()));
        }
        let mut counts = vec![0f64; self.size];
        let mut sums = vec![0f64; self.size * self.dim];
        for (v, &t) in latents.chunks_exact(self.dim).zip(tokens) {
            let t = t as usize;
            if t >= self.size {
                return Err(Error::TokenOutOfRange { token: t as u32, size: self.size });
            }
            counts[t] += 1.0;
            for (s, x) in sums[t * self.dim..(t + 1) * self.dim].iter_mut().zip(v) {
                *s += *x as f64;
            }
        }
        let keep = decay;
        let take = 1.0 - decay;
        for s in 0..self.size {
            self.ema_counts[s] = (keep * self.ema_counts[s] as f64 + take * counts[s]) as f32;
            for j in 0..self.dim {
                let i = s * self.dim + j;
                self.ema_sums[i] = (keep * self.ema_sums[i] as f64 + take * sums[i]) as f32;
            }
            if self.ema_counts[s] > EMA_EPS {
                let c = self.ema_counts[s] as f64;
                for j in 0..self.dim {
                    let i = s * self.dim + j;
                    self.codes[i] = (self.ema_sums[i] as f64 / c) as f32;
                }
            }
        }
        Ok(())
    }

    /// Replaces every code whose usage is below `threshold` with a randomly drawn donor
    /// latent. Returns the replaced indices.
    pub fn code_reset(&mut self, threshold: f32, donors: &[f32], rng: &mut impl Rng) -> Result<Vec<usize>> {
        if donors.is_empty() || donors.len() % self.dim != 0 {
            return Err(Error::Invalid("donor pool must be a non-empty set of code-dim vectors".into()));
        }
        let pool = donors.len() / self.dim;
        let mut replaced = Vec::new();
        for s in 0..self.size {
            if self.usage[s] >= threshold {
                continue;
            }
            let d = rng.gen_range(0..pool);
            let donor = &donors[d * self.dim..(d + 1) * self.dim];
            self.codes[s * self.dim..(s + 1) * self.dim].copy_from_slice(donor);
            self.ema_sums[s * self.dim..(s + 1) * self.dim].copy_from_slice(donor);
            self.ema_counts[s] = 1.0;
            self.usage[s] = 0.0;
            replaced.push(s);
        }
        Ok(replaced)
    }

    /// Perplexity of the usage histogram, a code-utilisation diagnostic.
    pub fn usage_perplexity(&self) -> f64 {
        let total: f64 = self.usage.iter().map(|&u| u as f64).sum();
        if total <= 0.0 {
            return 0.0;
        }
        let h: f64 = self
            .usage
            .iter()
            .filter(|&&u| u > 0.0)
            .map(|&u| {
                let p = u as f64 / total;
                -p * p.ln()
            })
            .sum();
        h.exp()
    }
}

const EMA_EPS: f32 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn two_codes() -> Codebook {
        Codebook::new(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap()
    }

    #[test]
    fn nearest_code_examples() {
        let cb = two_codes();
        assert_eq!(cb.quantize(&[0.4, 0.1]).unwrap().0, vec![0]);
        let (t, q) = cb.quantize(&[2.0, 2.0]).unwrap();
        assert_eq!((t, q), (vec![1], vec![2.0, 2.0]));
        // equidistant from both codes
        assert_eq!(cb.quantize(&[1.0, 1.0]).unwrap().0, vec![0]);
        assert_eq!(cb.quantize(&[2.0, 0.0]).unwrap().0, vec![0]);
    }

    #[test]
    fn dim_mismatch_rejected() {
        assert!(matches!(two_codes().quantize(&[1.0, 2.0, 3.0]), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn quantize_is_idempotent_on_codes() {
        let mut rng = seed::rng(5);
        let codes: Vec<f32> = (0..16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::new(16, 4, codes).unwrap();
        let (tokens, q) = cb.quantize(cb.codes()).unwrap();
        assert_eq!(tokens, (0..16).collect::<Vec<u32>>());
        assert_eq!(cb.quantize(&q).unwrap().0, tokens);
    }

    #[test]
    fn empty_batch_decays_counts_only() {
        let mut cb = two_codes();
        cb.ema_update(&[0.5, 0.5], &[0], 0.9).unwrap();
        let codes = cb.codes().to_vec();
        let c0 = cb.ema_counts()[0];
        cb.ema_update(&[], &[], 0.9).unwrap();
        assert!((cb.ema_counts()[0] - 0.9 * c0).abs() < 1e-7);
        assert_eq!(cb.codes()[..2], codes[..2]);
        // code 1 never received mass and keeps its initial value
        assert_eq!(cb.code(1), &[2.0, 2.0]);
    }

    #[test]
    fn decay_near_one_freezes_codes() {
        let mut cb = two_codes();
        cb.ema_update(&[1.0, 1.0], &[0], 0.5).unwrap();
        let before = cb.codes().to_vec();
        cb.ema_update(&[9.0, -9.0], &[0], 1.0 - 1e-9).unwrap();
        for (a, b) in before.iter().zip(cb.codes()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(cb.ema_update(&[], &[], 1.0).is_err());
        assert!(cb.ema_update(&[], &[], 0.0).is_err());
    }

    #[test]
    fn reset_examples() {
        let mut cb = two_codes();
        cb.set_usage(vec![5.0, 5.0]).unwrap();
        let mut rng = seed::rng(0);
        assert!(cb.code_reset(1.0, &[7.0, 7.0], &mut rng).unwrap().is_empty());
        assert_eq!(cb.codes(), &[0.0, 0.0, 2.0, 2.0]);

        cb.set_usage(vec![5.0, 0.0]).unwrap();
        assert_eq!(cb.code_reset(1.0, &[7.0, -7.0], &mut rng).unwrap(), vec![1]);
        assert_eq!(cb.code(1), &[7.0, -7.0]);
        assert_eq!(cb.usage(), &[5.0, 0.0]);
        assert!(cb.code_reset(1.0, &[], &mut rng).is_err());
    }
}
