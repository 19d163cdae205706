//! Text↔motion retrieval over aligned features.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{LampModel, MotionInput};
use crate::corpus::Dataset;
use crate::vq::MotionTokenizer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Motion,
    Text,
}

/// One indexed item: `rows × dim` L2-normalized feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    /// Sample the entry came from.
    pub sample: usize,
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl IndexEntry {
    pub fn rows_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks(self.dim.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub modality: Modality,
    pub entries: Vec<IndexEntry>,
}

impl FeatureIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let index: Self = serde_json::from_slice(&bytes)?;
        let mut ids = BTreeSet::new();
        for e in &index.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate index id `{}`", e.id)));
            }
        }
        Ok(index)
    }
}

/// Builds a motion index (one entry per sample, id = sample id) or a text index (one entry
/// per caption, id = `sample_id#k`).
pub fn build_index(
    dataset: &Dataset,
    lamp: &LampModel,
    tokenizer: &MotionTokenizer,
    modality: Modality,
) -> Result<FeatureIndex> {
    lamp.check_tokenizer(tokenizer)?;
    let entries = match modality {
        Modality::Motion => {
            let inputs = dataset
                .motions()
                .iter()
                .map(|m| MotionInput::from_raw(tokenizer, m))
                .collect::<Result<Vec<_>>>()?;
            let feats = lamp.motion_features_many(&inputs)?;
            feats
                .into_iter()
                .enumerate()
                .map(|(i, f)| IndexEntry {
                    id: dataset.record(i).id.clone(),
                    sample: i,
                    rows: f.rows,
                    dim: f.dim,
                    values: f.values,
                })
                .collect()
        }
        Modality::Text => {
            let pairs = text_pairs(dataset);
            let texts: Vec<&str> = pairs.iter().map(|p| p.2).collect();
            let feats = lamp.text_features_many(&texts)?;
            pairs
                .into_iter()
                .zip(feats)
                .map(|((sample, id, _), f)| IndexEntry { id, sample, rows: 1, dim: f.len(), values: f })
                .collect()
        }
    };
    Ok(FeatureIndex { modality, entries })
}

fn text_pairs(dataset: &Dataset) -> Vec<(usize, String, &str)> {
    dataset
        .records()
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.texts.iter().enumerate().map(move |(k, t)| (i, format!("{}#{k}", r.id), t.as_str())))
        .collect()
}

/// `max` over all row pairs of `⟨a_i, b_j⟩`. With a single-row side this is the
/// max-over-queries pair similarity, and it is symmetric in its arguments.
pub fn score(a: &[f32], b: &[f32], dim: usize) -> f32 {
    let mut best = f32::NEG_INFINITY;
    for x in a.chunks(dim) {
        for y in b.chunks(dim) {
            best = best.max(x.iter().zip(y).map(|(p, q)| p * q).sum());
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    /// `(candidate id, score)`, best first.
    pub ranked: Vec<(String, f32)>,
}

/// Ranks every index entry against `query` (`rows × dim` values) and keeps the top `k`.
pub fn retrieve(query_id: &str, query: &[f32], index: &FeatureIndex, k: usize) -> Result<RetrievalResult> {
    if index.is_empty() {
        return Err(Error::Invalid("retrieval over an empty index".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let dim = index.entries[0].dim;
    if dim == 0 || query.is_empty() || query.len() % dim != 0 {
        return Err(Error::DimMismatch(format!("query of {} values vs feature dim {dim}", query.len())));
    }
    let mut ranked: Vec<(String, f32)> =
        index.entries.iter().map(|e| (e.id.clone(), score(query, &e.values, dim))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(RetrievalResult { query: query_id.to_string(), ranked })
}

/// Replaces the scores of the top `top` motions with matching-head probabilities and
/// re-sorts them; the tail keeps its contrastive order below the re-ranked head.
pub fn rerank_matching(
    result: &RetrievalResult,
    text: &str,
    motions: &BTreeMap<String, MotionInput>,
    lamp: &LampModel,
    top: usize,
) -> Result<RetrievalResult> {
    let head = top.min(result.ranked.len());
    let inputs = result.ranked[..head]
        .iter()
        .map(|(id, _)| motions.get(id).ok_or_else(|| Error::Invalid(format!("no motion for candidate `{id}`"))))
        .collect::<Result<Vec<_>>>()?;
    let texts = vec![text; head];
    let scores = lamp.matching_scores(&inputs, &texts)?;
    let mut reranked: Vec<(String, f32)> =
        result.ranked[..head].iter().zip(scores).map(|((id, _), s)| (id.clone(), s)).collect();
    reranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    // keep the tail strictly below the re-ranked head
    let floor = reranked.iter().map(|r| r.1).fold(f32::INFINITY, f32::min);
    for (i, (id, _)) in result.ranked[head..].iter().enumerate() {
        reranked.push((id.clone(), floor - 1.0 - i as f32));
    }
    Ok(RetrievalResult { query: result.query.clone(), ranked: reranked })
}

/// Fraction of queries with at least one ground-truth id in their top `k`.
pub fn recall_at_k(results: &[RetrievalResult], ground_truth: &BTreeMap<String, BTreeSet<String>>, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Invalid("no retrieval results".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let gt = ground_truth
            .get(&r.query)
            .filter(|g| !g.is_empty())
            .ok_or_else(|| Error::Invalid(format!("query `{}` has no ground truth", r.query)))?;
        if r.ranked.iter().take(k).any(|(id, _)| gt.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

pub const RECALL_KS: [usize; 5] = [1, 2, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Recall at 1, 2, 3, 5 and 10, text queries against motions.
    pub text_to_motion: Vec<f64>,
    /// Recall at 1, 2, 3, 5 and 10, motion queries against texts.
    pub motion_to_text: Vec<f64>,
    pub pool: usize,
}

/// Both retrieval directions over one dataset. A candidate counts as correct when its
/// sample shares the query sample's attribute tuple (or is the same sample when the corpus
/// has no attributes).
pub fn evaluate_retrieval(dataset: &Dataset, lamp: &LampModel, tokenizer: &MotionTokenizer) -> Result<RetrievalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let motions = build_index(dataset, lamp, tokenizer, Modality::Motion)?;
    let texts = build_index(dataset, lamp, tokenizer, Modality::Text)?;
    let kmax = *RECALL_KS.last().expect("non-empty");
    let group: Vec<String> = (0..dataset.len()).map(|i| dataset.group_key(i)).collect();
    let same = |a: usize, b: usize| group[a] == group[b];

    let mut t2m = Vec::with_capacity(texts.len());
    let mut t2m_gt = BTreeMap::new();
    for q in &texts.entries {
        t2m.push(retrieve(&q.id, &q.values, &motions, kmax)?);
        let gt = motions.entries.iter().filter(|m| same(q.sample, m.sample)).map(|m| m.id.clone()).collect();
        t2m_gt.insert(q.id.clone(), gt);
    }
    let mut m2t = Vec::with_capacity(motions.len());
    let mut m2t_gt = BTreeMap::new();
    for q in &motions.entries {
        m2t.push(retrieve(&q.id, &q.values, &texts, kmax)?);
        let gt = texts.entries.iter().filter(|t| same(q.sample, t.sample)).map(|t| t.id.clone()).collect();
        m2t_gt.insert(q.id.clone(), gt);
    }
    Ok(RetrievalReport {
        text_to_motion: RECALL_KS.iter().map(|&k| recall_at_k(&t2m, &t2m_gt, k)).collect::<Result<_>>()?,
        motion_to_text: RECALL_KS.iter().map(|&k| recall_at_k(&m2t, &m2t_gt, k)).collect::<Result<_>>()?,
        pool: dataset.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: &str, rows: usize, values: Vec<f32>) -> IndexEntry {
        let dim = values.len() / rows;
        IndexEntry { id: id.into(), sample: 0, rows, dim, values }
    }

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn single_item_index() {
        let idx = FeatureIndex { modality: Modality::Motion, entries: vec![entry("a", 2, vec![1.0, 0.0, 0.0, 1.0])] };
        let r = retrieve("q", &[0.6, 0.8], &idx, 5).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.ranked[0].0, "a");
        assert!(retrieve("q", &[1.0, 0.0], &FeatureIndex { modality: Modality::Motion, entries: vec![] }, 1).is_err());
    }

    #[test]
    fn exact_row_match_ranks_first() {
        let idx = FeatureIndex {
            modality: Modality::Motion,
            entries: vec![
                entry("a", 2, vec![0.6, 0.8, 1.0, 0.0]),
                entry("b", 2, vec![0.0, 1.0, 0.8, 0.6]),
            ],
        };
        let r = retrieve("q", &[0.8, 0.6], &idx, 2).unwrap();
        assert_eq!(r.ranked[0].0, "b");
        assert!((r.ranked[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = FeatureIndex {
            modality: Modality::Text,
            entries: vec![entry("z", 1, vec![1.0, 0.0]), entry("m", 1, vec![1.0, 0.0]), entry("a", 1, vec![0.0, 1.0])],
        };
        let r = retrieve("q", &[1.0, 0.0], &idx, 3).unwrap();
        let ids: Vec<&str> = r.ranked.iter().map(|x| x.0.as_str()).collect();
        assert_eq!(ids, vec!["m", "z", "a"]);
    }

    #[test]
    fn recall_examples() {
        let results = vec![RetrievalResult { query: "q".into(), ranked: vec![("a".into(), 0.9), ("b".into(), 0.1)] }];
        let mut gt = BTreeMap::new();
        gt.insert("q".to_string(), BTreeSet::from(["a".to_string()]));
        assert_eq!(recall_at_k(&results, &gt, 1).unwrap(), 1.0);
        gt.insert("q".to_string(), BTreeSet::from(["b".to_string()]));
        assert_eq!(recall_at_k(&results, &gt, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&results, &gt, 2).unwrap(), 1.0);
        assert!(recall_at_k(&results, &BTreeMap::new(), 1).is_err());
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(
            raw in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 1..20),
            q in prop::collection::vec(-1.0f32..1.0, 3),
            k in 1usize..25,
        ) {
            let entries: Vec<IndexEntry> = raw
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let rows: Vec<f32> = v.chunks(3).flat_map(|r| unit(r.to_vec())).collect();
                    entry(&format!("id{i:02}"), 2, rows)
                })
                .collect();
            let idx = FeatureIndex { modality: Modality::Motion, entries };
            let q = unit(q);
            let r = retrieve("q", &q, &idx, k).unwrap();
            let mut all: Vec<(String, f32)> = idx.entries.iter().map(|e| (e.id.clone(), score(&q, &e.values, 3))).collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            all.truncate(k);
            prop_assert_eq!(&r.ranked, &all);
            for w in r.ranked.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
        }

        #[test]
        fn recall_is_monotone_in_k(
            scores in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 8), 1..10),
            truth in prop::collection::vec(0usize..8, 1..10),
        ) {
            let results: Vec<RetrievalResult> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut ranked: Vec<(String, f32)> = s.iter().enumerate().map(|(j, &v)| (format!("c{j}"), v)).collect();
                    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
                    RetrievalResult { query: format!("q{i}"), ranked }
                })
                .collect();
            let gt: BTreeMap<String, BTreeSet<String>> = (0..results.len())
                .map(|i| (format!("q{i}"), BTreeSet::from([format!("c{}", truth[i % truth.len()])])))
                .collect();
            let rs: Vec<f64> = RECALL_KS.iter().map(|&k| recall_at_k(&results, &gt, k).unwrap()).collect();
            for w in rs.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert_eq!(recall_at_k(&results, &gt, 8).unwrap(), 1.0);
        }

        #[test]
        fn score_matrix_is_symmetric(
            a in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..5),
            b in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..5),
        ) {
            // text→motion and motion→text score matrices are transposes
            for x in &a {
                for y in &b {
                    prop_assert_eq!(score(x, y, 2), score(y, x, 2));
                }
            }
        }
    }
}
