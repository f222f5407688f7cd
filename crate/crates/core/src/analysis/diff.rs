//! Splits two scans' concerns into unique concerns and similar pairs.

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::domain::ScanRecord;
use crate::merge::{check_threshold, concern_text, cosine};
use crate::providers::{embed_texts, EmbeddingBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SimilarPair {
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ScanDiff {
    pub scan_a: String,
    pub scan_b: String,
    pub unique_a: Vec<String>,
    pub unique_b: Vec<String>,
    pub similar_pairs: Vec<SimilarPair>,
}

/// Greedy matching over a similarity matrix: candidate edges above `theta`
/// are taken highest first, ties by lower `i` then lower `j`, and each side
/// is matched at most once. Returns `(i, j)` pairs in the order taken.
pub fn greedy_matching(sims: &[Vec<f64>], theta: f64) -> Vec<(usize, usize)> {
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for (i, row) in sims.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            if s > theta {
                edges.push((s, i, j));
            }
        }
    }
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let rows = sims.len();
    let cols = sims.first().map_or(0, |r| r.len());
    let mut used_a = vec![false; rows];
    let mut used_b = vec![false; cols];
    let mut out = Vec::new();
    for (_, i, j) in edges {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Embeds both scans' concerns once and matches them.
pub async fn diff_scans(
    a: &ScanRecord,
    b: &ScanRecord,
    embedder: &dyn EmbeddingBackend,
    theta: f64,
) -> Result<ScanDiff, AnalysisError> {
    check_threshold(theta)?;
    let texts: Vec<String> = a.concerns.iter().chain(&b.concerns).map(concern_text).collect();
    let vectors = embed_texts(embedder, &texts).await?;
    let (va, vb) = vectors.split_at(a.concerns.len());
    let sims = va
        .iter()
        .map(|x| vb.iter().map(|y| cosine(x, y)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let pairs = greedy_matching(&sims, theta);
    let mut matched_a = vec![false; a.concerns.len()];
    let mut matched_b = vec![false; b.concerns.len()];
    let similar_pairs = pairs
        .iter()
        .map(|&(i, j)| {
            matched_a[i] = true;
            matched_b[j] = true;
            SimilarPair {
                a: a.concerns[i].id.clone(),
                b: b.concerns[j].id.clone(),
                similarity: sims[i][j],
            }
        })
        .collect();
    let unmatched = |scan: &ScanRecord, matched: &[bool]| {
        scan.concerns
            .iter()
            .zip(matched)
            .filter(|(_, &m)| !m)
            .map(|(c, _)| c.id.clone())
            .collect()
    };
    Ok(ScanDiff {
        scan_a: a.id.clone(),
        scan_b: b.id.clone(),
        unique_a: unmatched(a, &matched_a),
        unique_b: unmatched(b, &matched_b),
        similar_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn highest_similarity_taken_first() {
        let sims = vec![vec![0.9, 0.95], vec![0.8, 0.1]];
        assert_eq!(greedy_matching(&sims, 0.7), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn threshold_is_strict() {
        let sims = vec![vec![0.7, 0.71]];
        assert_eq!(greedy_matching(&sims, 0.7), vec![(0, 1)]);
        assert!(greedy_matching(&[vec![0.7]], 0.7).is_empty());
    }

    #[test]
    fn ties_prefer_lower_indices() {
        let sims = vec![vec![0.9, 0.9], vec![0.9, 0.9]];
        assert_eq!(greedy_matching(&sims, 0.5), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn empty_sides() {
        assert!(greedy_matching(&[], 0.7).is_empty());
        assert!(greedy_matching(&[vec![], vec![]], 0.7).is_empty());
    }
}
