//! Generation metrics over aligned features and the evaluation protocol.
//!
//! Motion features are `L × p` query rows. Distance metrics reduce them to one vector per
//! motion, by default the row that best matches the paired text (the same row that
//! decides the pair similarity). R-precision ranks with the full pair similarity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{pair_similarity, AlignedMotion, LampModel, MotionInput};
use crate::captioner::{bertscore, CaptionerModel};
use crate::corpus::Dataset;
use crate::generator::{GenerationConfig, T2MModel};
use crate::vq::MotionTokenizer;
use crate::{seed, Error, Result};

pub const REPORT_VERSION: &str = "lamp-eval/1";

/// Eigenvalues above `-EIG_CLIP` are treated as round-off and clipped to zero.
pub const EIG_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance of the rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Invalid(format!("a Gaussian fit needs at least 2 rows, got {}", rows.len())));
        }
        let p = rows[0].len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimMismatch("ragged feature rows".into()));
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        let mean = DVector::from_fn(p, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, count: n })
    }
}

/// Symmetric PSD square root by eigendecomposition, clipping round-off negatives.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIG_CLIP * m.norm().max(1.0) {
            return Err(Error::Invalid(format!("matrix is not positive semidefinite (eigenvalue {v})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians. `Tr((Σ₁Σ₂)^{1/2})` is computed as
/// `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, which is symmetric PSD.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimMismatch(format!("feature dims {} vs {}", a.mean.len(), b.mean.len())));
    }
    let diff = &a.mean - &b.mean;
    let s1 = sqrt_psd(&a.cov)?;
    let cross = sqrt_psd(&(&s1 * &b.cov * &s1))?;
    let value = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianSummary::fit(real)?, &GaussianSummary::fit(generated)?)
}

/// R-precision at k = 1, 2, 3 with a pool of `pool_size` texts per motion: the true text
/// and `pool_size − 1` distinct others drawn uniformly. Ties count against the true text.
pub fn r_precision_with(n: usize, pool_size: usize, seed_value: u64, score: impl Fn(usize, usize) -> f32) -> Result<[f64; 3]> {
    if pool_size == 0 {
        return Err(Error::Invalid("pool_size must be >= 1".into()));
    }
    if n < pool_size {
        return Err(Error::Invalid(format!("batch of {n} is smaller than the pool size {pool_size}")));
    }
    let mut rng = seed::stage_rng(seed_value, "metrics/r-precision");
    let mut hits = [0usize; 3];
    for i in 0..n {
        let truth = score(i, i);
        let others = index::sample(&mut rng, n - 1, pool_size - 1);
        let better = others
            .iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .filter(|&j| score(i, j) >= truth)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if better <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

/// R-precision of motions against their paired texts, scored by pair similarity.
pub fn r_precision(texts: &[Vec<f32>], motions: &[AlignedMotion], pool_size: usize, seed_value: u64) -> Result<[f64; 3]> {
    if texts.len() != motions.len() {
        return Err(Error::DimMismatch(format!("{} texts vs {} motions", texts.len(), motions.len())));
    }
    r_precision_with(texts.len(), pool_size, seed_value, |i, j| motions[i].similarity(&texts[j]))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionReduction {
    /// The query row with the highest similarity to the paired text.
    #[default]
    BestRow,
    MeanRow,
}

pub fn reduce_motion(f_m: &AlignedMotion, f_t: &[f32], mode: MotionReduction) -> Vec<f64> {
    match mode {
        MotionReduction::BestRow => {
            let best = (0..f_m.rows)
                .map(|l| (l, pair_similarity(f_m.row(l), f_t)))
                .fold((0, f32::NEG_INFINITY), |acc, (l, s)| if s > acc.1 { (l, s) } else { acc })
                .0;
            f_m.row(best).iter().map(|&v| v as f64).collect()
        }
        MotionReduction::MeanRow => (0..f_m.dim)
            .map(|j| (0..f_m.rows).map(|l| f_m.row(l)[j] as f64).sum::<f64>() / f_m.rows as f64)
            .collect(),
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance between paired feature vectors.
pub fn mm_dist(texts: &[Vec<f64>], motions: &[Vec<f64>]) -> Result<f64> {
    if texts.len() != motions.len() || texts.is_empty() {
        return Err(Error::DimMismatch(format!("{} texts vs {} motions", texts.len(), motions.len())));
    }
    Ok(texts.iter().zip(motions).map(|(t, m)| euclid(t, m)).sum::<f64>() / texts.len() as f64)
}

fn disjoint_pair_mean(feats: &[Vec<f64>], num_pairs: usize, rng: &mut impl Rng) -> Result<f64> {
    if num_pairs == 0 || feats.len() < 2 * num_pairs {
        return Err(Error::Invalid(format!("{} samples cannot form {num_pairs} disjoint pairs", feats.len())));
    }
    let mut idx: Vec<usize> = (0..feats.len()).collect();
    idx.shuffle(rng);
    Ok(idx.chunks_exact(2).take(num_pairs).map(|p| euclid(&feats[p[0]], &feats[p[1]])).sum::<f64>() / num_pairs as f64)
}

/// Mean distance over `num_pairs` seeded random disjoint pairs.
pub fn diversity(feats: &[Vec<f64>], num_pairs: usize, seed_value: u64) -> Result<f64> {
    disjoint_pair_mean(feats, num_pairs, &mut seed::stage_rng(seed_value, "metrics/diversity"))
}

/// Diversity within each prompt's repeated generations, averaged over prompts.
pub fn multimodality(per_prompt: &[Vec<Vec<f64>>], num_pairs: usize, seed_value: u64) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::Invalid("multimodality needs at least one prompt".into()));
    }
    let mut rng = seed::stage_rng(seed_value, "metrics/multimodality");
    let mut total = 0.0;
    for feats in per_prompt {
        total += disjoint_pair_mean(feats, num_pairs, &mut rng)?;
    }
    Ok(total / per_prompt.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repeats: usize,
    pub pool_size: usize,
    pub diversity_pairs: usize,
    /// Prompts and generations per prompt for multimodality.
    pub mm_prompts: usize,
    pub mm_generations: usize,
    pub mm_pairs: usize,
    /// Captions evaluated per sample; `None` uses every caption.
    pub texts_per_sample: Option<usize>,
    pub reduction: MotionReduction,
    pub generation: GenerationConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 3,
            pool_size: 32,
            diversity_pairs: 100,
            mm_prompts: 20,
            mm_generations: 10,
            mm_pairs: 5,
            texts_per_sample: None,
            reduction: MotionReduction::BestRow,
            generation: GenerationConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.pool_size == 0 {
            return Err(Error::Config("repeats and pool_size must be positive".into()));
        }
        if self.mm_prompts > 0 && self.mm_generations < 2 * self.mm_pairs.max(1) {
            return Err(Error::Config("mm_generations must cover 2 * mm_pairs".into()));
        }
        Ok(())
    }
}

/// Mean and 95% normal-approximation half-width over repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ci95 = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, ci95 }
    }
}

/// One run's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fid: f64,
    pub r_precision: [f64; 3],
    pub mm_dist: f64,
    pub diversity: f64,
    pub multimodality: Option<f64>,
    pub lamp_bertscore: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub fid: Summary,
    pub r_precision: [Summary; 3],
    pub mm_dist: Summary,
    pub diversity: Summary,
    pub multimodality: Option<Summary>,
    pub lamp_bertscore: Option<Summary>,
}

impl MetricSummary {
    pub fn of(rows: &[MetricRow]) -> Self {
        let col = |f: &dyn Fn(&MetricRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
        let opt = |f: &dyn Fn(&MetricRow) -> Option<f64>| {
            rows.iter().map(f).collect::<Option<Vec<_>>>().map(|v| Summary::of(&v))
        };
        Self {
            fid: col(&|r| r.fid),
            r_precision: [0, 1, 2].map(|k| col(&|r| r.r_precision[k])),
            mm_dist: col(&|r| r.mm_dist),
            diversity: col(&|r| r.diversity),
            multimodality: opt(&|r| r.multimodality),
            lamp_bertscore: opt(&|r| r.lamp_bertscore),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub num_texts: usize,
    pub repeats: usize,
    /// Real motions scored as if generated.
    pub ground_truth: MetricRow,
    pub generated: MetricSummary,
    pub runs: Vec<MetricRow>,
}

pub struct EvalModels<'a> {
    pub tokenizer: &'a MotionTokenizer,
    pub lamp: &'a LampModel,
    pub t2m: &'a T2MModel,
    pub captioner: Option<&'a CaptionerModel>,
    /// Text encoder that conditions the generator when it is not the evaluator `lamp`.
    pub conditioner: Option<&'a LampModel>,
}

fn pairs(dataset: &Dataset, per_sample: Option<usize>) -> Vec<(usize, &str)> {
    dataset
        .records()
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.texts.iter().take(per_sample.unwrap_or(usize::MAX)).map(move |t| (i, t.as_str())))
        .collect()
}

fn motion_features(models: &EvalModels, motions: &[crate::corpus::MotionSequence]) -> Result<Vec<AlignedMotion>> {
    let inputs = motions.iter().map(|m| MotionInput::from_raw(models.tokenizer, m)).collect::<Result<Vec<_>>>()?;
    models.lamp.motion_features_many(&inputs)
}

fn generate_for(models: &EvalModels, conds: &[Vec<f32>], base: &GenerationConfig, seed_value: u64, tag: &str) -> Result<Vec<crate::corpus::MotionSequence>> {
    conds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cfg = GenerationConfig { seed: seed::derive(seed_value, &format!("{tag}/{i}")), ..base.clone() };
            let tokens = models.t2m.iterative_decode(c, &cfg)?;
            models.tokenizer.detokenize(&tokens.tokens)
        })
        .collect()
}

/// Metrics of `motion_feats` against their paired texts; FID is taken against `real`
/// (or the motions themselves). Also returns the reduced motion vectors.
fn score_row(
    text_feats: &[Vec<f32>],
    motion_feats: &[AlignedMotion],
    real: Option<&[Vec<f64>]>,
    config: &EvalConfig,
    seed_value: u64,
) -> Result<(MetricRow, Vec<Vec<f64>>)> {
    let motion_vecs: Vec<Vec<f64>> =
        motion_feats.iter().zip(text_feats).map(|(m, t)| reduce_motion(m, t, config.reduction)).collect();
    let text_vecs: Vec<Vec<f64>> = text_feats.iter().map(|t| t.iter().map(|&v| v as f64).collect()).collect();
    let row = MetricRow {
        fid: fid(real.unwrap_or(&motion_vecs), &motion_vecs)?,
        r_precision: r_precision(text_feats, motion_feats, config.pool_size, seed_value)?,
        mm_dist: mm_dist(&text_vecs, &motion_vecs)?,
        diversity: diversity(&motion_vecs, config.diversity_pairs.min(motion_vecs.len() / 2), seed_value)?,
        multimodality: None,
        lamp_bertscore: None,
    };
    Ok((row, motion_vecs))
}

/// Generates one motion per evaluated caption for each repeat (seeds derived from the
/// repeat index and caption index), extracts aligned features and computes every metric.
/// Real motions are scored the same way as a calibration row.
pub fn evaluate_generation(dataset: &Dataset, models: &EvalModels, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let conditioner = models.conditioner.unwrap_or(models.lamp);
    models.t2m.check_compatible(models.tokenizer, conditioner).map_err(|e| e.in_stage("evaluate"))?;
    if let Some(c) = models.captioner {
        c.check_compatible(models.lamp)?;
    }
    let pairs = pairs(dataset, config.texts_per_sample);
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let texts: Vec<&str> = pairs.iter().map(|p| p.1).collect();
    let text_feats = models.lamp.text_features_many(&texts)?;
    let real_motions: Vec<_> = pairs.iter().map(|p| dataset.motion(p.0).clone()).collect();
    let real_feats = motion_features(models, &real_motions).map_err(|e| e.in_stage("features"))?;
    let (mut ground_truth, real) = score_row(&text_feats, &real_feats, None, config, config.seed)?;
    if let Some(c) = models.captioner {
        ground_truth.lamp_bertscore = Some(caption_score(c, models.lamp, &real_feats, &texts)?);
    }

    let interaction = models.t2m.config().condition.use_query_interaction;
    let conds = conditioner.condition_many(&texts, interaction)?;
    let mut runs = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let run_seed = seed::derive(config.seed, &format!("eval/repeat/{r}"));
        let motions = generate_for(models, &conds, &config.generation, run_seed, "text").map_err(|e| e.in_stage("generate"))?;
        let feats = motion_features(models, &motions)?;
        let (mut row, _) = score_row(&text_feats, &feats, Some(&real), config, run_seed)?;
        if config.mm_prompts > 0 {
            row.multimodality = Some(multimodality_run(models, &texts, &text_feats, &conds, config, run_seed)?);
        }
        if let Some(c) = models.captioner {
            row.lamp_bertscore = Some(caption_score(c, models.lamp, &feats, &texts)?);
        }
        log::info!("eval repeat {r}: fid {:.4}, top1 {:.3}", row.fid, row.r_precision[0]);
        runs.push(row);
    }
    Ok(EvalReport {
        version: REPORT_VERSION.into(),
        num_texts: texts.len(),
        repeats: config.repeats,
        ground_truth,
        generated: MetricSummary::of(&runs),
        runs,
    })
}

fn multimodality_run(
    models: &EvalModels,
    texts: &[&str],
    text_feats: &[Vec<f32>],
    conds: &[Vec<f32>],
    config: &EvalConfig,
    run_seed: u64,
) -> Result<f64> {
    let mut rng = seed::stage_rng(run_seed, "eval/mm-prompts");
    let chosen = index::sample(&mut rng, texts.len(), config.mm_prompts.min(texts.len())).into_vec();
    let mut per_prompt = Vec::with_capacity(chosen.len());
    for &p in &chosen {
        let repeated = vec![conds[p].clone(); config.mm_generations];
        let motions = generate_for(models, &repeated, &config.generation, run_seed, &format!("mm/{p}"))?;
        let feats = motion_features(models, &motions)?;
        per_prompt.push(feats.iter().map(|f| reduce_motion(f, &text_feats[p], config.reduction)).collect());
    }
    multimodality(&per_prompt, config.mm_pairs, run_seed)
}

fn caption_score(captioner: &CaptionerModel, lamp: &LampModel, feats: &[AlignedMotion], texts: &[&str]) -> Result<f64> {
    let captions = captioner.caption_features(&feats.iter().collect::<Vec<_>>())?;
    let refs: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
    bertscore::mean_f1(&captions, &refs, lamp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, p: usize, scale: &[f64], shift: &[f64], seed_value: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
        (0..n)
            .map(|_| (0..p).map(|j| scale[j] * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) + shift[j]).collect())
            .collect()
    }

    fn summary(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianSummary {
        GaussianSummary { mean: DVector::from_vec(mean), cov, count: 100 }
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let x = gaussian(200, 5, &[1.0, 2.0, 0.5, 1.0, 3.0], &[0.0; 5], 1);
        assert!(fid(&x, &x).unwrap() <= 1e-6);
    }

    #[test]
    fn fid_closed_forms() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let d = frechet_distance(&summary(vec![0.0, 0.0], cov.clone()), &summary(vec![1.0, -2.0], cov)).unwrap();
        assert!((d - 5.0).abs() < 1e-9, "{d}");
        let four = DMatrix::identity(2, 2) * 4.0;
        let d = frechet_distance(&summary(vec![0.0; 2], four), &summary(vec![0.0; 2], DMatrix::identity(2, 2))).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn fid_of_shifted_samples_matches_shift() {
        let shift = [0.3, -0.4, 1.0];
        let x = gaussian(500, 3, &[1.0; 3], &[0.0; 3], 2);
        let y: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let expect: f64 = shift.iter().map(|s| s * s).sum();
        assert!((fid(&x, &y).unwrap() - expect).abs() < 1e-3);
    }

    #[test]
    fn fid_errors() {
        assert!(fid(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(fid(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn r_precision_examples() {
        assert_eq!(r_precision_with(40, 32, 0, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap(), [1.0; 3]);
        assert_eq!(r_precision_with(5, 1, 0, |_, _| 0.0).unwrap(), [1.0; 3]);
        assert!(r_precision_with(5, 32, 0, |_, _| 0.0).is_err());
    }

    #[test]
    fn r_precision_null_model() {
        // independent scores: P(top-k) = k / 32
        let n = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table: Vec<f32> = (0..n * n).map(|_| rng.gen()).collect();
        let r = r_precision_with(n, 32, 4, |i, j| table[i * n + j]).unwrap();
        for k in 0..3 {
            let p = (k + 1) as f64 / 32.0;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((r[k] - p).abs() <= 3.0 * sigma, "k={} got {} expected {p}", k + 1, r[k]);
        }
    }

    #[test]
    fn mm_dist_and_diversity_examples() {
        assert_eq!(mm_dist(&[vec![0.0, 0.0]], &[vec![3.0, 0.0]]).unwrap(), 3.0);
        assert_eq!(mm_dist(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert!(mm_dist(&[vec![1.0]], &[]).is_err());
        assert_eq!(diversity(&[vec![0.0, 0.0], vec![3.0, 4.0]], 1, 0).unwrap(), 5.0);
        assert_eq!(diversity(&vec![vec![1.0, 1.0]; 10], 5, 0).unwrap(), 0.0);
        assert_eq!(multimodality(&[vec![vec![2.0]; 4], vec![vec![0.0]; 4]], 2, 0).unwrap(), 0.0);
        assert!(diversity(&vec![vec![0.0]; 3], 2, 0).is_err());
    }

    #[test]
    fn diversity_of_standard_normals() {
        // E‖x − y‖ = √2 · E‖N(0, I_p)‖ = 2 Γ((p+1)/2) / Γ(p/2), which is 3√π/2 for p = 4
        let x = gaussian(20_000, 4, &[1.0; 4], &[0.0; 4], 3);
        let expect = 1.5 * std::f64::consts::PI.sqrt();
        let d = diversity(&x, 10_000, 1).unwrap();
        assert!((d - expect).abs() / expect < 0.05, "{d} vs {expect}");
    }

    #[test]
    fn best_row_reduction() {
        let f = AlignedMotion { rows: 2, dim: 2, values: vec![1.0, 0.0, 0.0, 1.0] };
        assert_eq!(reduce_motion(&f, &[0.1, 0.9], MotionReduction::BestRow), vec![0.0, 1.0]);
        assert_eq!(reduce_motion(&f, &[0.1, 0.9], MotionReduction::MeanRow), vec![0.5, 0.5]);
    }

    #[test]
    fn summary_interval() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.ci95 - 1.96).abs() < 1e-12);
        assert_eq!(Summary::of(&[4.0]).ci95, 0.0);
    }

    fn rows(p: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-2.0f64..2.0, p), 4..12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn fid_is_symmetric_and_nonnegative(a in rows(3), b in rows(3)) {
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-6, "{} vs {}", ab, ba);
            prop_assert!(fid(&a, &a).unwrap() <= 1e-6);
        }

        #[test]
        fn r_precision_is_monotone(scores in prop::collection::vec(-1.0f32..1.0, 64), pool in 1usize..8) {
            let r = r_precision_with(8, pool, 0, |i, j| scores[i * 8 + j]).unwrap();
            prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn mm_dist_rotation_invariant(t in rows(3), angle in 0.0f64..6.28) {
            let m: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| v * 0.5 + 0.1).collect()).collect();
            let rot = nalgebra::Rotation3::from_euler_angles(angle, 0.3 * angle, -angle);
            let apply = |x: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                x.iter().map(|r| (rot * nalgebra::Vector3::new(r[0], r[1], r[2])).iter().copied().collect()).collect()
            };
            let before = mm_dist(&t, &m).unwrap();
            let after = mm_dist(&apply(&t), &apply(&m)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
