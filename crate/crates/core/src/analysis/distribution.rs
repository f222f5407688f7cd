//! Category distributions per group and the earth mover's distance between them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, CorpusCategories};
use crate::domain::ScanRecord;

/// Selects the scans that form one group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GroupKey {
    All,
    Model(String),
    Env(String),
}

impl GroupKey {
    pub fn matches(&self, scan: &ScanRecord) -> bool {
        match self {
            GroupKey::All => true,
            GroupKey::Model(id) => &scan.model_id == id,
            GroupKey::Env(desc) => &scan.env.description == desc,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::All => write!(f, "all"),
            GroupKey::Model(id) => write!(f, "model:{id}"),
            GroupKey::Env(desc) => write!(f, "env:{desc}"),
        }
    }
}

impl FromStr for GroupKey {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(GroupKey::All);
        }
        match s.split_once(':') {
            Some(("model", id)) if !id.is_empty() => Ok(GroupKey::Model(id.into())),
            Some(("env", desc)) if !desc.is_empty() => Ok(GroupKey::Env(desc.into())),
            _ => Err(AnalysisError::InvalidGroup(s.into())),
        }
    }
}

impl TryFrom<String> for GroupKey {
    type Error = AnalysisError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<GroupKey> for String {
    fn from(k: GroupKey) -> String {
        k.to_string()
    }
}

/// How raw category counts become a distribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Counts divided by the group total.
    #[default]
    Proportion,
    /// Each count divided by its category's corpus-wide total, then
    /// renormalized.
    CategoryTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CategoryDistribution {
    pub categories: Vec<String>,
    pub proportions: Vec<f64>,
    /// Raw concern counts per category.
    pub counts: Vec<u64>,
    /// True when the group holds no concerns; proportions are then all zero.
    pub empty: bool,
}

impl CategoryDistribution {
    /// Proportions from counts; all zero when the counts are.
    pub fn from_counts(categories: Vec<String>, counts: Vec<u64>) -> Self {
        let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        Self::from_weights(categories, counts, &weights)
    }

    fn from_weights(categories: Vec<String>, counts: Vec<u64>, weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let empty = total <= 0.0;
        let proportions = weights.iter().map(|&w| if empty { 0.0 } else { w / total }).collect();
        Self {
            categories,
            proportions,
            counts,
            empty,
        }
    }

    /// A distribution given directly by proportions; counts are left zero.
    pub fn from_proportions(categories: Vec<String>, proportions: Vec<f64>) -> Result<Self, AnalysisError> {
        if categories.len() != proportions.len() {
            return Err(AnalysisError::OrderMismatch);
        }
        if proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(AnalysisError::InvalidDistribution("proportions must be finite and non-negative".into()));
        }
        let sum: f64 = proportions.iter().sum();
        let empty = sum == 0.0;
        if !empty && (sum - 1.0).abs() > 1e-9 {
            return Err(AnalysisError::InvalidDistribution(format!("proportions sum to {sum}")));
        }
        let counts = vec![0; proportions.len()];
        Ok(Self {
            categories,
            proportions,
            counts,
            empty,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Category distribution of the concerns in scans matching `group`.
pub fn distribution(
    scans: &[ScanRecord],
    group: &GroupKey,
    corpus: &CorpusCategories,
    scaling: Scaling,
) -> CategoryDistribution {
    let k = corpus.categories.len();
    let mut counts = vec![0u64; k];
    for scan in scans.iter().filter(|s| group.matches(s)) {
        for c in &scan.concerns {
            if let Some(cat) = corpus.category_of(&scan.id, &c.id) {
                counts[cat] += 1;
            }
        }
    }
    match scaling {
        Scaling::Proportion => CategoryDistribution::from_counts(corpus.categories.clone(), counts),
        Scaling::CategoryTotals => {
            let totals = corpus.category_totals();
            let weights: Vec<f64> = counts
                .iter()
                .zip(&totals)
                .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                .collect();
            CategoryDistribution::from_weights(corpus.categories.clone(), counts, &weights)
        }
    }
}

/// One-dimensional earth mover's distance with unit spacing between
/// adjacent categories: the sum of absolute CDF differences.
pub fn wasserstein(p: &CategoryDistribution, q: &CategoryDistribution) -> Result<f64, AnalysisError> {
    if p.categories != q.categories || p.proportions.len() != q.proportions.len() {
        return Err(AnalysisError::OrderMismatch);
    }
    if p.empty || q.empty {
        return Err(AnalysisError::EmptyDistribution);
    }
    Ok(emd_1d(&p.proportions, &q.proportions))
}

/// Sum of |CDF_p(k) − CDF_q(k)| over k = 1..K−1.
pub fn emd_1d(p: &[f64], q: &[f64]) -> f64 {
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for k in 0..p.len().saturating_sub(1) {
        cp += p[k];
        cq += q[k];
        total += (cp - cq).abs();
    }
    total
}

/// Pairwise distances between named distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct DistanceMatrix {
    pub names: Vec<String>,
    pub distances: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    /// Mean distance from each entry to every other entry.
    pub fn row_means(&self) -> Vec<f64> {
        let n = self.names.len();
        self.distances
            .iter()
            .map(|row| if n < 2 { 0.0 } else { row.iter().sum::<f64>() / (n - 1) as f64 })
            .collect()
    }
}

pub fn wasserstein_matrix(named: &[(String, CategoryDistribution)]) -> Result<DistanceMatrix, AnalysisError> {
    let n = named.len();
    let mut distances = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = wasserstein(&named[i].1, &named[j].1)?;
            distances[i][j] = d;
            distances[j][i] = d;
        }
    }
    Ok(DistanceMatrix {
        names: named.iter().map(|(n, _)| n.clone()).collect(),
        distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cats(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn dist(p: &[f64]) -> CategoryDistribution {
        CategoryDistribution::from_proportions(cats(p.len()), p.to_vec()).unwrap()
    }

    /// Minimum-cost transport by exhaustive search over integer flows when
    /// masses are multiples of 1/units.
    fn transport_oracle(p: &[u32], q: &[u32]) -> u32 {
        fn go(i: usize, supply: &mut Vec<u32>, demand: &mut Vec<u32>) -> u32 {
            if i == supply.len() {
                return 0;
            }
            if supply[i] == 0 {
                return go(i + 1, supply, demand);
            }
            let mut best = u32::MAX;
            for j in 0..demand.len() {
                if demand[j] > 0 {
                    supply[i] -= 1;
                    demand[j] -= 1;
                    let rest = go(i, supply, demand);
                    supply[i] += 1;
                    demand[j] += 1;
                    best = best.min(rest + (i as i64 - j as i64).unsigned_abs() as u32);
                }
            }
            best
        }
        go(0, &mut p.to_vec(), &mut q.to_vec())
    }

    #[test]
    fn analytic_examples() {
        assert_eq!(wasserstein(&dist(&[1.0, 0.0, 0.0]), &dist(&[0.0, 0.0, 1.0])).unwrap(), 2.0);
        assert_eq!(wasserstein(&dist(&[0.5, 0.5, 0.0]), &dist(&[0.0, 0.5, 0.5])).unwrap(), 1.0);
        assert_eq!(wasserstein(&dist(&[0.3, 0.7]), &dist(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(transport_oracle(&[1, 1, 0], &[0, 1, 1]), 2);
    }

    #[test]
    fn mismatched_or_empty_inputs() {
        let a = dist(&[1.0, 0.0]);
        let b = CategoryDistribution::from_proportions(vec!["x".into(), "y".into()], vec![1.0, 0.0]).unwrap();
        assert!(matches!(wasserstein(&a, &b), Err(AnalysisError::OrderMismatch)));
        let e = CategoryDistribution::from_counts(cats(2), vec![0, 0]);
        assert!(e.empty);
        assert_eq!(e.proportions, vec![0.0, 0.0]);
        assert!(matches!(wasserstein(&a, &e), Err(AnalysisError::EmptyDistribution)));
    }

    #[test]
    fn group_keys_parse() {
        assert_eq!("model:p4".parse::<GroupKey>().unwrap(), GroupKey::Model("p4".into()));
        assert_eq!("env:a restaurant".parse::<GroupKey>().unwrap(), GroupKey::Env("a restaurant".into()));
        assert_eq!("all".parse::<GroupKey>().unwrap(), GroupKey::All);
        assert!("model:".parse::<GroupKey>().is_err());
        assert!("x".parse::<GroupKey>().is_err());
        assert_eq!(GroupKey::Env("a:b".into()).to_string().parse::<GroupKey>().unwrap(), GroupKey::Env("a:b".into()));
    }

    #[test]
    fn matrix_is_symmetric_with_row_means() {
        let m = wasserstein_matrix(&[
            ("a".into(), dist(&[1.0, 0.0, 0.0])),
            ("b".into(), dist(&[0.0, 1.0, 0.0])),
            ("c".into(), dist(&[0.0, 0.0, 1.0])),
        ])
        .unwrap();
        assert_eq!(m.distances[0][2], 2.0);
        assert_eq!(m.distances[2][0], 2.0);
        assert_eq!(m.row_means(), vec![1.5, 1.0, 1.5]);
    }

    fn units(k: usize, total: u32) -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec(0u32..=total, k - 1).prop_map(move |mut cuts| {
            cuts.sort_unstable();
            let mut out = Vec::with_capacity(cuts.len() + 1);
            let mut prev = 0;
            for c in cuts {
                out.push(c - prev);
                prev = c;
            }
            out.push(total - prev);
            out
        })
    }

    proptest! {
        #[test]
        fn matches_transport_oracle(
            (p, q) in (2usize..=6).prop_flat_map(|k| (units(k, 6), units(k, 6)))
        ) {
            let pf: Vec<f64> = p.iter().map(|&x| x as f64 / 6.0).collect();
            let qf: Vec<f64> = q.iter().map(|&x| x as f64 / 6.0).collect();
            let oracle = transport_oracle(&p, &q) as f64 / 6.0;
            prop_assert!((emd_1d(&pf, &qf) - oracle).abs() < 1e-9);
        }
    }
}
