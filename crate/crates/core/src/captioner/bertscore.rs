//! Token-level BertScore with a pluggable contextual embedder.

use serde::{Deserialize, Serialize};

use crate::alignment::LampModel;
use crate::{Error, Result};

/// Produces one contextual vector per token of a text.
pub trait TokenEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>>;
}

impl TokenEmbedder for LampModel {
    fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        self.token_embeddings(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn normalized(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                r.into_iter().map(|x| x / n).collect()
            } else {
                r
            }
        })
        .collect()
}

/// Cosine of unit vectors; identical rows give exactly 1 despite rounding in the norm.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

fn greedy(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let total: f64 = from.iter().map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max)).sum();
    total / from.len() as f64
}

/// Precision is the mean over candidate tokens of the best cosine against the reference
/// tokens, recall the same with roles swapped. No IDF weighting or baseline rescaling.
pub fn score_embeddings(candidate: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> Result<BertScore> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Invalid("bertscore needs at least one token on each side".into()));
    }
    let (c, r) = (normalized(candidate), normalized(reference));
    let precision = greedy(&c, &r);
    let recall = greedy(&r, &c);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(BertScore { precision, recall, f1 })
}

pub fn lamp_bertscore(candidate: &str, reference: &str, embedder: &impl TokenEmbedder) -> Result<BertScore> {
    if candidate.split_whitespace().next().is_none() || reference.split_whitespace().next().is_none() {
        return Err(Error::Invalid("bertscore of an empty text".into()));
    }
    score_embeddings(embedder.embed(candidate)?, embedder.embed(reference)?)
}

/// Mean F1 over aligned candidate/reference lists.
pub fn mean_f1(candidates: &[String], references: &[String], embedder: &impl TokenEmbedder) -> Result<f64> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::DimMismatch(format!("{} candidates vs {} references", candidates.len(), references.len())));
    }
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        // an empty caption scores zero rather than failing the whole batch
        total += if c.trim().is_empty() { 0.0 } else { lamp_bertscore(c, r, embedder)?.f1 };
    }
    Ok(total / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Each word maps to a fixed vector, independent of context.
    struct Table(HashMap<&'static str, Vec<f64>>);

    impl TokenEmbedder for Table {
        fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>> {
            Ok(text.split_whitespace().map(|w| self.0[w].clone()).collect())
        }
    }

    fn table() -> Table {
        Table(HashMap::from([
            ("a", vec![1.0, 0.0, 0.0]),
            ("b", vec![0.0, 2.0, 0.0]),
            ("c", vec![0.0, 0.0, 1.0]),
        ]))
    }

    #[test]
    fn self_score_is_one() {
        let s = lamp_bertscore("a b c", "a b c", &table()).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn orthogonal_tokens_score_zero() {
        let s = lamp_bertscore("a", "b c", &table()).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn subset_candidate() {
        let s = lamp_bertscore("a", "a b", &table()).unwrap();
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.5);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(lamp_bertscore("", "a", &table()).is_err());
        assert!(lamp_bertscore("a", "  ", &table()).is_err());
    }

    fn rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6)
    }

    proptest! {
        #[test]
        fn swapping_exchanges_precision_and_recall(c in rows(), r in rows()) {
            let a = score_embeddings(c.clone(), r.clone()).unwrap();
            let b = score_embeddings(r, c).unwrap();
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
        }

        #[test]
        fn f1_lies_between_precision_and_recall(c in rows(), r in rows()) {
            let s = score_embeddings(c, r).unwrap();
            if s.precision > 0.0 && s.recall > 0.0 {
                prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-12);
                prop_assert!(s.f1 >= s.precision.min(s.recall) - 1e-12);
            }
        }
    }
}
