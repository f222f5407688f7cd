//! Class-based TF-IDF labels for concern clusters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// English stopwords removed before unigrams and bigrams are formed.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any", "are", "as",
    "at", "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had",
    "has", "have", "having", "he", "her", "here", "hers", "herself", "him", "himself", "his", "how", "i",
    "if", "in", "into", "is", "it", "its", "itself", "just", "may", "me", "might", "more", "most", "must",
    "my", "myself", "no", "nor", "not", "of", "off", "on", "once", "only", "or", "other", "our", "ours",
    "ourselves", "out", "over", "own", "same", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this", "those", "through",
    "to", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which", "while",
    "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself", "yourselves",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TermOptions {
    pub n: usize,
    pub stopwords: BTreeSet<String>,
}

impl Default for TermOptions {
    fn default() -> Self {
        Self {
            n: 3,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ScoredTerm {
    pub term: String,
    pub score: f64,
}

/// Lowercase alphanumeric unigrams with stopwords removed, followed by the
/// bigrams of adjacent surviving unigrams.
pub fn tokenize(text: &str, stopwords: &BTreeSet<String>) -> Vec<String> {
    let lower = text.to_lowercase();
    let unigrams: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !stopwords.contains(*t))
        .collect();
    let mut out: Vec<String> = unigrams.iter().map(|s| s.to_string()).collect();
    out.extend(unigrams.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

/// Term counts per cluster. Each text is tokenized on its own, so no
/// bigram spans two texts.
pub fn term_counts(clusters: &[Vec<String>], stopwords: &BTreeSet<String>) -> Vec<BTreeMap<String, u64>> {
    clusters
        .iter()
        .map(|texts| {
            let mut tf = BTreeMap::new();
            for t in texts {
                for term in tokenize(t, stopwords) {
                    *tf.entry(term).or_insert(0) += 1;
                }
            }
            tf
        })
        .collect()
}

/// Top `n` terms per cluster by `tf × ln(clusters / df)`, ties broken
/// lexicographically. Only terms occurring in the cluster are candidates,
/// so a cluster of stopwords yields fewer than `n` terms.
pub fn top_terms(clusters: &[Vec<String>], opts: &TermOptions) -> Vec<Vec<ScoredTerm>> {
    let counts = term_counts(clusters, &opts.stopwords);
    let mut df: BTreeMap<&str, u64> = BTreeMap::new();
    for tf in &counts {
        for term in tf.keys() {
            *df.entry(term.as_str()).or_insert(0) += 1;
        }
    }
    let n_clusters = clusters.len() as f64;
    counts
        .iter()
        .map(|tf| {
            let mut scored: Vec<ScoredTerm> = tf
                .iter()
                .map(|(term, &count)| ScoredTerm {
                    term: term.clone(),
                    score: count as f64 * (n_clusters / df[term.as_str()] as f64).ln(),
                })
                .collect();
            scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.term.cmp(&b.term)));
            scored.truncate(opts.n);
            scored
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer_drops_stopwords_before_bigrams() {
        let sw = TermOptions::default().stopwords;
        assert_eq!(
            tokenize("The Fixed seating - is too low!", &sw),
            ["fixed", "seating", "too", "low", "fixed seating", "seating too", "too low"]
        );
    }

    #[test]
    fn shared_terms_score_zero_and_rank_last() {
        let clusters = vec![texts(&["high shelf", "high shelf"]), texts(&["shelf door"])];
        let top = top_terms(&clusters, &TermOptions::default());
        assert_eq!(top[0][0].term, "high");
        assert!((top[0][0].score - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(top[0][1].term, "high shelf");
        assert_eq!(top[0][2].term, "shelf");
        assert_eq!(top[0][2].score, 0.0);
    }

    #[test]
    fn stopword_cluster_returns_fewer_terms() {
        let clusters = vec![texts(&["the and of"]), texts(&["ramp"])];
        let top = top_terms(&clusters, &TermOptions::default());
        assert!(top[0].is_empty());
        assert_eq!(top[1].len(), 1);
    }
}
