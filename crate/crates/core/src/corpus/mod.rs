//! Motion-text datasets: on-disk format, validation and feature normalization.
//!
//! A dataset directory holds a UTF-8 JSON manifest (`manifest.json`) and one payload
//! file per sample with raw little-endian `f32` values, row-major `frames × dim`.

mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use synth::{clean_trajectory, synth_generate, Attributes, SynthConfig, OSCILLATOR_CHANNEL};

pub const MANIFEST_VERSION: &str = "lamp-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Lower bound applied to per-channel standard deviations.
pub const STD_FLOOR: f32 = 1e-6;

/// A `frames × dim` motion clip stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl MotionSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Invalid(format!("motion must be non-empty, got {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(Error::DimMismatch(format!(
                "motion data has {} values, expected {frames}x{dim}",
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self { frames, dim, data: vec![0.0; frames * dim] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        (0..self.frames).map(|t| self.data[t * self.dim + c]).collect()
    }

    /// First non-finite entry as `(frame, channel)`.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data.iter().position(|v| !v.is_finite()).map(|i| (i / self.dim, i % self.dim))
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8], dim: usize) -> Result<Self> {
        if dim == 0 || bytes.len() % (4 * dim) != 0 {
            return Err(Error::DimMismatch(format!(
                "{} bytes is not a whole number of {dim}-channel frames",
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(data.len() / dim, dim, data)
    }

    pub fn write_f32(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_le_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_f32(path: &Path, dim: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_le_bytes(&bytes, dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub motion_file: String,
    pub num_frames: usize,
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Attributes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub dim: usize,
    pub samples: Vec<SampleRecord>,
}

/// In-memory dataset; immutable once built.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    motions: Vec<MotionSequence>,
}

impl Dataset {
    /// Builds a dataset from records and motions, validating every invariant.
    pub fn new(dim: usize, samples: Vec<SampleRecord>, motions: Vec<MotionSequence>) -> Result<Self> {
        if samples.len() != motions.len() {
            return Err(Error::Manifest(format!(
                "{} records but {} motions",
                samples.len(),
                motions.len()
            )));
        }
        let mut seen = HashSet::new();
        for (rec, m) in samples.iter().zip(&motions) {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id `{}`", rec.id)));
            }
            if m.dim() != dim {
                return Err(Error::DimMismatch(format!(
                    "sample {}: motion dim {} but manifest declares {dim}",
                    rec.id,
                    m.dim()
                )));
            }
            if m.frames() != rec.num_frames {
                return Err(Error::Manifest(format!(
                    "sample {}: {} frames but record says {}",
                    rec.id,
                    m.frames(),
                    rec.num_frames
                )));
            }
            if let Some((frame, channel)) = m.find_non_finite() {
                return Err(Error::NonFinite { id: rec.id.clone(), frame, channel });
            }
        }
        Ok(Self {
            manifest: DatasetManifest { version: MANIFEST_VERSION.to_string(), dim, samples },
            motions,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            manifest: DatasetManifest { version: MANIFEST_VERSION.to_string(), dim, samples: vec![] },
            motions: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.manifest.samples[i]
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.manifest.samples
    }

    pub fn motion(&self, i: usize) -> &MotionSequence {
        &self.motions[i]
    }

    pub fn motions(&self) -> &[MotionSequence] {
        &self.motions
    }

    pub fn num_texts(&self) -> usize {
        self.manifest.samples.iter().map(|r| r.texts.len()).sum()
    }

    /// Samples whose `split` tag equals `name`; untagged samples count as `"train"`.
    pub fn split(&self, name: &str) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.record(i).split.as_deref().unwrap_or("train") == name)
            .collect();
        self.subset(&keep)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: DatasetManifest {
                version: self.manifest.version.clone(),
                dim: self.manifest.dim,
                samples: indices.iter().map(|&i| self.manifest.samples[i].clone()).collect(),
            },
            motions: indices.iter().map(|&i| self.motions[i].clone()).collect(),
        }
    }

    /// Grouping key for samples that are semantically indistinguishable (same attribute
    /// tuple); falls back to the sample id when attributes are absent.
    pub fn group_key(&self, i: usize) -> String {
        let rec = self.record(i);
        rec.attributes.as_ref().map(|a| a.key()).unwrap_or_else(|| rec.id.clone())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let motion_dir = dir.join("motions");
        fs::create_dir_all(&motion_dir).map_err(|e| Error::io(&motion_dir, e))?;
        for (rec, m) in self.manifest.samples.iter().zip(&self.motions) {
            m.write_f32(&dir.join(&rec.motion_file))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Loads and validates a dataset. `path` may be the manifest file or its directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (manifest_path, root): (PathBuf, PathBuf) = if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!("unsupported version `{}`", manifest.version)));
    }
    let mut motions = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let file = root.join(&rec.motion_file);
        let meta = fs::metadata(&file).map_err(|_| Error::MissingFile(file.clone()))?;
        let expected = 4 * (rec.num_frames * manifest.dim) as u64;
        if meta.len() != expected {
            return Err(Error::SizeMismatch { id: rec.id.clone(), expected, found: meta.len() });
        }
        motions.push(MotionSequence::read_f32(&file, manifest.dim)?);
    }
    Dataset::new(manifest.dim, manifest.samples, motions)
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }
}

/// Population statistics over every frame of every sample, std floored at [`STD_FLOOR`].
pub fn compute_stats(dataset: &Dataset) -> Result<FeatureStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = dataset.dim();
    let mut sum = vec![0f64; dim];
    let mut count = 0usize;
    for m in dataset.motions() {
        for row in m.data().chunks_exact(dim) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += *v as f64;
            }
        }
        count += m.frames();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0f64; dim];
    for m in dataset.motions() {
        for row in m.data().chunks_exact(dim) {
            for ((s, v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                let d = *v as f64 - mu;
                *s += d * d;
            }
        }
    }
    let std = sq.iter().map(|s| ((s / count as f64).sqrt() as f32).max(STD_FLOOR)).collect();
    Ok(FeatureStats { mean: mean.iter().map(|&m| m as f32).collect(), std })
}

pub fn normalize(seq: &MotionSequence, stats: &FeatureStats) -> Result<MotionSequence> {
    check_stats_dim(seq, stats)?;
    let mut out = seq.clone();
    for row in out.data.chunks_exact_mut(seq.dim) {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

pub fn denormalize(seq: &MotionSequence, stats: &FeatureStats) -> Result<MotionSequence> {
    check_stats_dim(seq, stats)?;
    let mut out = seq.clone();
    for row in out.data.chunks_exact_mut(seq.dim) {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = *v * s + m;
        }
    }
    Ok(out)
}

fn check_stats_dim(seq: &MotionSequence, stats: &FeatureStats) -> Result<()> {
    if seq.dim() != stats.dim() {
        return Err(Error::DimMismatch(format!(
            "motion dim {} vs stats dim {}",
            seq.dim(),
            stats.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, frames: usize) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            motion_file: format!("motions/{id}.f32"),
            num_frames: frames,
            texts: vec![format!("text {id}")],
            attributes: None,
            split: None,
        }
    }

    fn two_sample(dim: usize) -> Dataset {
        let a = MotionSequence::new(3, dim, vec![0.0; 3 * dim]).unwrap();
        let b = MotionSequence::new(3, dim, vec![2.0; 3 * dim]).unwrap();
        Dataset::new(dim, vec![record("a", 3), record("b", 3)], vec![a, b]).unwrap()
    }

    #[test]
    fn load_echoes_metadata() {
        let dir = tempfile::tempdir().unwrap();
        two_sample(16).write(dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 16);
        let ds2 = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ds2.motions(), ds.motions());
    }

    #[test]
    fn wrong_byte_length_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        two_sample(4).write(dir.path()).unwrap();
        fs::write(dir.path().join("motions/b.f32"), [0u8; 20]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::SizeMismatch { id, expected, found }) => {
                assert_eq!(id, "b");
                assert_eq!(expected, 48);
                assert_eq!(found, 20);
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        two_sample(4).write(dir.path()).unwrap();
        let mut bytes = fs::read(dir.path().join("motions/a.f32")).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(dir.path().join("motions/a.f32"), bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::NonFinite { id, frame, channel }) => {
                assert_eq!((id.as_str(), frame, channel), ("a", 1, 1));
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        two_sample(4).write(dir.path()).unwrap();
        fs::remove_file(dir.path().join("motions/a.f32")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
        assert!(matches!(
            load_dataset(&dir.path().join("nope")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = MotionSequence::new(2, 3, vec![0.0; 6]).unwrap();
        let err = Dataset::new(4, vec![record("x", 2)], vec![m]).unwrap_err();
        assert!(matches!(err, Error::DimMismatch(_)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = MotionSequence::zeros(2, 2);
        let err = Dataset::new(2, vec![record("x", 2), record("x", 2)], vec![m.clone(), m]).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }

    #[test]
    fn two_point_stats() {
        let stats = compute_stats(&two_sample(3)).unwrap();
        assert_eq!(stats.mean, vec![1.0; 3]);
        assert_eq!(stats.std, vec![1.0; 3]);
    }

    #[test]
    fn constant_channel_is_floored() {
        let m = MotionSequence::new(4, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]).unwrap();
        let ds = Dataset::new(2, vec![record("c", 4)], vec![m.clone()]).unwrap();
        let stats = compute_stats(&ds).unwrap();
        assert_eq!(stats.std[1], STD_FLOOR);
        let n = normalize(&m, &stats).unwrap();
        assert!(n.channel(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_dataset_has_no_stats() {
        assert!(matches!(compute_stats(&Dataset::empty(4)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn normalized_corpus_is_standardized() {
        let cfg = SynthConfig { num_samples: 40, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        let stats = compute_stats(&ds).unwrap();
        let normed: Vec<MotionSequence> =
            ds.motions().iter().map(|m| normalize(m, &stats).unwrap()).collect();
        let nds = Dataset::new(ds.dim(), ds.records().to_vec(), normed).unwrap();
        let s2 = compute_stats(&nds).unwrap();
        for (m, s) in s2.mean.iter().zip(&s2.std) {
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((s - 1.0).abs() < 1e-3, "std {s}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_roundtrip(
                data in proptest::collection::vec(-100f32..100f32, 24),
                mean in proptest::collection::vec(-10f32..10f32, 4),
                std in proptest::collection::vec(0.01f32..10f32, 4),
            ) {
                let m = MotionSequence::new(6, 4, data).unwrap();
                let stats = FeatureStats { mean, std };
                let back = denormalize(&normalize(&m, &stats).unwrap(), &stats).unwrap();
                for (a, b) in m.data().iter().zip(back.data()) {
                    let scale = a.abs().max(1.0);
                    prop_assert!((a - b).abs() / scale <= 1e-5);
                }
            }

            #[test]
            fn write_load_roundtrip(data in proptest::collection::vec(-1e6f32..1e6f32, 1..40)) {
                let frames = data.len();
                let m = MotionSequence::new(frames, 1, data).unwrap();
                let ds = Dataset::new(1, vec![record("p", frames)], vec![m]).unwrap();
                let dir = tempfile::tempdir().unwrap();
                ds.write(dir.path()).unwrap();
                let back = load_dataset(dir.path()).unwrap();
                prop_assert_eq!(back.motions(), ds.motions());
            }
        }
    }
}
