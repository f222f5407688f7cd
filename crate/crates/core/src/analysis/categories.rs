//! Keyword rules that bucket labelled clusters into named categories.

use std::collections::BTreeSet;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Rules shipped with the crate: ten ADA-derived categories plus "Beyond ADA".
pub const DEFAULT_RULES_JSON: &str = include_str!("../../../../config/categories.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CategoryRule {
    pub name: String,
    #[serde(default)]
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RulesFile {
    categories: Vec<CategoryRule>,
}

/// Ordered category rules. The last category is the fallback and carries
/// no patterns.
#[derive(Debug, Clone)]
pub struct CategoryRules {
    rules: Vec<CategoryRule>,
    compiled: Vec<Vec<Regex>>,
}

impl PartialEq for CategoryRules {
    fn eq(&self, other: &Self) -> bool {
        self.rules == other.rules
    }
}

impl CategoryRules {
    pub fn new(rules: Vec<CategoryRule>) -> Result<Self, AnalysisError> {
        let invalid = |m: String| Err(AnalysisError::InvalidRules(m));
        let Some((fallback, ordered)) = rules.split_last() else {
            return invalid("no categories".into());
        };
        if !fallback.patterns.is_empty() {
            return invalid(format!("fallback category {:?} must have no patterns", fallback.name));
        }
        let mut seen = BTreeSet::new();
        for r in &rules {
            if r.name.trim().is_empty() {
                return invalid("category name is empty".into());
            }
            if !seen.insert(r.name.as_str()) {
                return invalid(format!("duplicate category {:?}", r.name));
            }
        }
        if let Some(r) = ordered.iter().find(|r| r.patterns.is_empty()) {
            return invalid(format!("category {:?} has no patterns", r.name));
        }
        let compiled = rules
            .iter()
            .map(|r| {
                r.patterns
                    .iter()
                    .map(|p| Regex::new(p).map_err(|e| AnalysisError::InvalidRules(format!("{}: {e}", r.name))))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { rules, compiled })
    }

    pub fn parse(json: &str) -> Result<Self, AnalysisError> {
        let file: RulesFile =
            serde_json::from_str(json).map_err(|e| AnalysisError::InvalidRules(e.to_string()))?;
        Self::new(file.categories)
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AnalysisError::InvalidRules(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Only the fallback category.
    pub fn fallback_only(name: &str) -> Self {
        Self::new(vec![CategoryRule {
            name: name.into(),
            patterns: Vec::new(),
        }])
        .expect("single fallback is valid")
    }

    pub fn to_json(&self) -> String {
        crate::domain::canonical_json(&RulesFile {
            categories: self.rules.clone(),
        })
    }

    pub fn rules(&self) -> &[CategoryRule] {
        &self.rules
    }

    pub fn names(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fallback_index(&self) -> usize {
        self.rules.len() - 1
    }

    /// Index of the first category with a pattern matching any term.
    pub fn categorize<S: AsRef<str>>(&self, terms: &[S]) -> usize {
        self.compiled
            .iter()
            .position(|pats| pats.iter().any(|re| terms.iter().any(|t| re.is_match(t.as_ref()))))
            .unwrap_or(self.fallback_index())
    }
}

impl Default for CategoryRules {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES_JSON).expect("bundled category rules are valid")
    }
}

/// Category index per cluster, from each cluster's top terms.
pub fn assign_categories<S: AsRef<str>>(terms: &[Vec<S>], rules: &CategoryRules) -> Vec<usize> {
    terms.iter().map(|t| rules.categorize(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(name: &str, patterns: &[&str]) -> CategoryRule {
        CategoryRule {
            name: name.into(),
            patterns: patterns.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn default_rules_have_eleven_categories_with_fallback_last() {
        let r = CategoryRules::default();
        assert_eq!(r.len(), 11);
        assert_eq!(r.names().last().unwrap(), "Beyond ADA");
    }

    #[test]
    fn beyond_ada_examples() {
        let r = CategoryRules::default();
        let name = |t: &[&str]| r.names()[r.categorize(t)].clone();
        assert_eq!(name(&["tv", "television", "remote"]), "Beyond ADA");
        assert_eq!(name(&["noise", "noise sensitivity", "sensitivity"]), "Beyond ADA");
        assert_eq!(name(&["seating", "fixed", "fixed seating"]), "Fixed Seating");
    }

    #[test]
    fn first_matching_rule_wins() {
        let r = CategoryRules::new(vec![rule("A", &["^x"]), rule("B", &["x"]), rule("Other", &[])]).unwrap();
        assert_eq!(r.categorize(&["yx"]), 1);
        assert_eq!(r.categorize(&["yx", "xy"]), 0);
        assert_eq!(r.categorize(&["q"]), 2);
        assert_eq!(assign_categories(&[vec!["xa"], vec![]], &r), vec![0, 2]);
    }

    #[test]
    fn fallback_only_takes_everything() {
        let r = CategoryRules::fallback_only("Beyond ADA");
        assert_eq!(r.categorize(&["high", "reach"]), 0);
    }

    #[test]
    fn invalid_rules_rejected() {
        for rules in [
            vec![],
            vec![rule("A", &["x"])],
            vec![rule("A", &["x"]), rule("A", &[])],
            vec![rule("A", &[]), rule("B", &[])],
            vec![rule("A", &["("]), rule("B", &[])],
        ] {
            assert!(matches!(CategoryRules::new(rules), Err(AnalysisError::InvalidRules(_))));
        }
    }

    #[test]
    fn json_round_trip() {
        let r = CategoryRules::default();
        assert_eq!(CategoryRules::parse(&r.to_json()).unwrap(), r);
    }
}
