//! Corpus-level analytics over stored scans.
//!
//! Concerns from many scans are clustered by embedding, each cluster is
//! labelled by its top TF-IDF terms, and the labels are mapped to categories
//! by [`CategoryRules`]. Every concern inherits its cluster's category, which
//! gives per-group [`CategoryDistribution`]s and earth mover's distances
//! between them. Scan diffs, hallucination rates and cost reports sit
//! alongside.

mod categories;
mod cluster;
mod cost;
mod diff;
mod distribution;
pub mod report;
mod review;
mod terms;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use categories::{assign_categories, CategoryRule, CategoryRules, DEFAULT_RULES_JSON};
pub use cluster::{cluster_vectors, ClusterParams, DEFAULT_DISTANCE_THRESHOLD};
pub use cost::{cost_report, mean_std, CostReport};
pub use diff::{diff_scans, greedy_matching, ScanDiff, SimilarPair};
pub use distribution::{
    distribution, emd_1d, wasserstein, wasserstein_matrix, CategoryDistribution, DistanceMatrix, GroupKey, Scaling,
};
pub use review::{
    check_verdicts, hallucination_rate, percent_2dp, HallucinationSummary, ReviewVerdict, REVIEW_QUESTIONS,
};
pub use terms::{term_counts, tokenize, top_terms, ScoredTerm, TermOptions, DEFAULT_STOPWORDS};

use crate::domain::{Concern, ScanRecord};
use crate::merge::{concern_text, MergeError};
use crate::providers::{embed_texts, EmbeddingBackend, ProviderError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error("distributions use different category orders")]
    OrderMismatch,
    #[error("distribution has no concerns")]
    EmptyDistribution,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("duplicate verdict for concern {concern_id} of scan {scan_id}")]
    DuplicateVerdict { scan_id: String, concern_id: String },
    #[error("scan {scan_id} has no concern {concern_id}")]
    UnknownConcern { scan_id: String, concern_id: String },
    #[error("invalid category rules: {0}")]
    InvalidRules(String),
    #[error("invalid group key {0:?}; expected all, model:<id> or env:<description>")]
    InvalidGroup(String),
    #[error("no input records")]
    EmptyCorpus,
}

/// Clusters concerns by the embedding of their name and reason.
pub async fn cluster_concerns(
    concerns: &[Concern],
    embedder: &dyn EmbeddingBackend,
    params: ClusterParams,
) -> Result<Vec<Vec<usize>>, AnalysisError> {
    if concerns.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let texts: Vec<String> = concerns.iter().map(concern_text).collect();
    let vectors = embed_texts(embedder, &texts).await?;
    Ok(cluster_vectors(&vectors, params)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ConcernRef {
    pub scan_id: String,
    pub concern_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ClusterSummary {
    pub members: Vec<ConcernRef>,
    pub terms: Vec<ScoredTerm>,
    pub category: String,
}

/// Clusters, labels and categories for a whole corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CorpusCategories {
    pub categories: Vec<String>,
    pub clusters: Vec<ClusterSummary>,
    #[serde(skip)]
    index: HashMap<ConcernRef, usize>,
}

impl CorpusCategories {
    /// Builds the lookup from cluster summaries; categories absent from
    /// `categories` are ignored.
    pub fn new(categories: Vec<String>, clusters: Vec<ClusterSummary>) -> Self {
        let mut index = HashMap::new();
        for c in &clusters {
            if let Some(k) = categories.iter().position(|n| n == &c.category) {
                for m in &c.members {
                    index.insert(m.clone(), k);
                }
            }
        }
        Self {
            categories,
            clusters,
            index,
        }
    }

    pub fn category_of(&self, scan_id: &str, concern_id: &str) -> Option<usize> {
        self.index
            .get(&ConcernRef {
                scan_id: scan_id.into(),
                concern_id: concern_id.into(),
            })
            .copied()
    }

    /// Concern count per category across the corpus.
    pub fn category_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.categories.len()];
        for &k in self.index.values() {
            totals[k] += 1;
        }
        totals
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusOptions {
    pub cluster: ClusterParams,
    pub terms: TermOptions,
}

/// Clusters every concern in `scans`, labels each cluster with its top terms
/// and assigns it a category.
pub async fn categorize_corpus(
    scans: &[ScanRecord],
    embedder: &dyn EmbeddingBackend,
    rules: &CategoryRules,
    opts: &CorpusOptions,
) -> Result<CorpusCategories, AnalysisError> {
    let mut refs = Vec::new();
    let mut concerns = Vec::new();
    for s in scans {
        for c in &s.concerns {
            refs.push(ConcernRef {
                scan_id: s.id.clone(),
                concern_id: c.id.clone(),
            });
            concerns.push(c.clone());
        }
    }
    if concerns.is_empty() {
        return Ok(CorpusCategories::new(rules.names(), Vec::new()));
    }
    let groups = cluster_concerns(&concerns, embedder, opts.cluster).await?;
    let texts: Vec<Vec<String>> = groups
        .iter()
        .map(|g| g.iter().map(|&i| concern_text(&concerns[i])).collect())
        .collect();
    let terms = top_terms(&texts, &opts.terms);
    let term_strings: Vec<Vec<&str>> = terms.iter().map(|t| t.iter().map(|s| s.term.as_str()).collect()).collect();
    let cats = assign_categories(&term_strings, rules);
    let names = rules.names();
    let clusters = groups
        .into_iter()
        .zip(terms)
        .zip(cats)
        .map(|((g, terms), k)| ClusterSummary {
            members: g.into_iter().map(|i| refs[i].clone()).collect(),
            terms,
            category: names[k].clone(),
        })
        .collect();
    Ok(CorpusCategories::new(names, clusters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::HashEmbedder;

    #[tokio::test]
    async fn empty_concern_list_is_an_error() {
        let e = HashEmbedder::default();
        assert!(matches!(
            cluster_concerns(&[], &e, ClusterParams::default()).await,
            Err(AnalysisError::EmptyCorpus)
        ));
    }

    #[tokio::test]
    async fn identical_texts_cluster_together() {
        let e = HashEmbedder::default();
        let cs: Vec<Concern> = (0..4)
            .map(|i| Concern::generated(format!("c{i}"), "High Shelf", "too high to reach", None))
            .collect();
        assert_eq!(cluster_concerns(&cs, &e, ClusterParams::default()).await.unwrap(), vec![vec![0, 1, 2, 3]]);
    }
}
