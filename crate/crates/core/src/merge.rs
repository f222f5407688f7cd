//! Merging of near-duplicate concerns from parallel task requests.
//!
//! Concerns are embedded once as `name - reason`. Any two whose cosine
//! similarity exceeds the threshold are linked, and each connected component
//! becomes one merged concern (single linkage). The representative is the
//! member with the highest mean similarity to the rest of its group.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::domain::{Concern, ModelKind};
use crate::providers::{embed_texts, EmbeddingBackend, EmbeddingVector, ProviderError};

pub const DEFAULT_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("threshold {0} is outside (0, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MergeError> {
    if a.dim() != b.dim() {
        return Err(MergeError::DimensionMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Text embedded for a concern.
pub fn concern_text(c: &Concern) -> String {
    format!("{} - {}", c.name, c.reason)
}

/// Pairwise cosine similarities; the diagonal is 1.
pub fn similarity_matrix(vectors: &[EmbeddingVector]) -> Result<Vec<Vec<f64>>, MergeError> {
    let n = vectors.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine(&vectors[i], &vectors[j])?;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

pub fn check_threshold(theta: f64) -> Result<(), MergeError> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(MergeError::InvalidThreshold(theta))
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the graph with an edge wherever similarity
/// exceeds `theta`. Members ascend; groups are ordered by first member.
pub fn components(sims: &[Vec<f64>], theta: f64) -> Vec<Vec<usize>> {
    let n = sims.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if sims[i][j] > theta {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// Means closer than this count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Member with the highest mean similarity to the other members; ties go
/// to the earliest member. Members with identical vectors sum the same
/// similarities in different orders, so ties are judged within
/// `TIE_TOLERANCE`.
pub fn representative(group: &[usize], sims: &[Vec<f64>]) -> usize {
    if group.len() == 1 {
        return group[0];
    }
    let mut best = group[0];
    let mut best_mean = f64::NEG_INFINITY;
    for &i in group {
        let total: f64 = group.iter().filter(|&&j| j != i).map(|&j| sims[i][j]).sum();
        let mean = total / (group.len() - 1) as f64;
        if mean > best_mean + TIE_TOLERANCE {
            best = i;
            best_mean = mean;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedConcern {
    pub representative: Concern,
    /// Ids of every member, in input order.
    pub members: Vec<String>,
    /// Locations cited by the non-representative members.
    pub alternate_locations: BTreeSet<u32>,
}

/// Groups `concerns` given precomputed similarities.
pub fn merge_with_similarities(
    concerns: &[Concern],
    sims: &[Vec<f64>],
    theta: f64,
) -> Result<Vec<MergedConcern>, MergeError> {
    check_threshold(theta)?;
    Ok(components(sims, theta)
        .into_iter()
        .map(|group| {
            let rep = representative(&group, sims);
            let mut merged = concerns[rep].clone();
            let mut alternate_locations = BTreeSet::new();
            for &i in &group {
                let c = &concerns[i];
                merged.source_tasks.extend(c.source_tasks.iter().cloned());
                if c.model_kind == Some(ModelKind::Personalized) {
                    merged.model_kind = Some(ModelKind::Personalized);
                }
                if i != rep {
                    alternate_locations.extend(c.location);
                }
            }
            MergedConcern {
                representative: merged,
                members: group.iter().map(|&i| concerns[i].id.clone()).collect(),
                alternate_locations,
            }
        })
        .collect())
}

/// Embeds every concern once, in a single batched call, and merges.
pub async fn dedup(
    concerns: &[Concern],
    embedder: &dyn EmbeddingBackend,
    theta: f64,
) -> Result<Vec<MergedConcern>, MergeError> {
    check_threshold(theta)?;
    if concerns.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = concerns.iter().map(concern_text).collect();
    let vectors = embed_texts(embedder, &texts).await?;
    let sims = similarity_matrix(&vectors)?;
    merge_with_similarities(concerns, &sims, theta)
}
