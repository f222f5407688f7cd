//! Fact-check verdicts and the hallucination rate over a reviewed corpus.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::domain::ScanRecord;

/// Questions asked per concern during review.
pub const REVIEW_QUESTIONS: [&str; 2] = [
    "Is the object this concern refers to actually present in the image?",
    "Does the concern name that object correctly?",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ReviewVerdict {
    pub scan_id: String,
    pub concern_id: String,
    pub exists_in_image: bool,
    pub object_correct: bool,
    pub reviewer: String,
}

impl ReviewVerdict {
    pub fn flagged(&self) -> bool {
        !(self.exists_in_image && self.object_correct)
    }
}

/// Every verdict must name a concern of `scan`.
pub fn check_verdicts(scan: &ScanRecord, verdicts: &[ReviewVerdict]) -> Result<(), AnalysisError> {
    for v in verdicts {
        if v.scan_id != scan.id || scan.concern(&v.concern_id).is_none() {
            return Err(AnalysisError::UnknownConcern {
                scan_id: v.scan_id.clone(),
                concern_id: v.concern_id.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct HallucinationSummary {
    pub flagged: u64,
    pub total: u64,
    /// `flagged / total`; absent with no verdicts.
    pub rate: Option<f64>,
}

impl HallucinationSummary {
    /// Rate as a percentage rounded to two decimals, e.g. "6.60%".
    pub fn percent(&self) -> Option<String> {
        percent_2dp(self.flagged, self.total).map(|p| format!("{p:.2}%"))
    }
}

/// `100·f/t` rounded half-up to two decimals using integer arithmetic.
pub fn percent_2dp(flagged: u64, total: u64) -> Option<f64> {
    if total == 0 {
        return None;
    }
    let hundredths = (flagged as u128 * 20_000 + total as u128) / (2 * total as u128);
    Some(hundredths as f64 / 100.0)
}

pub fn hallucination_rate(verdicts: &[ReviewVerdict]) -> Result<HallucinationSummary, AnalysisError> {
    let mut seen = BTreeSet::new();
    for v in verdicts {
        if !seen.insert((v.scan_id.as_str(), v.concern_id.as_str())) {
            return Err(AnalysisError::DuplicateVerdict {
                scan_id: v.scan_id.clone(),
                concern_id: v.concern_id.clone(),
            });
        }
    }
    let total = verdicts.len() as u64;
    let flagged = verdicts.iter().filter(|v| v.flagged()).count() as u64;
    Ok(HallucinationSummary {
        flagged,
        total,
        rate: (total > 0).then(|| flagged as f64 / total as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn verdict(i: usize, ok: bool) -> ReviewVerdict {
        ReviewVerdict {
            scan_id: format!("s{}", i / 10),
            concern_id: format!("c{i}"),
            exists_in_image: ok,
            object_correct: true,
            reviewer: "r".into(),
        }
    }

    #[test]
    fn empty_and_clean_corpora() {
        let s = hallucination_rate(&[]).unwrap();
        assert_eq!((s.flagged, s.total, s.rate), (0, 0, None));
        assert_eq!(s.percent(), None);
        let clean: Vec<_> = (0..5).map(|i| verdict(i, true)).collect();
        assert_eq!(hallucination_rate(&clean).unwrap().rate, Some(0.0));
    }

    #[test]
    fn either_failed_question_flags() {
        let mut v = verdict(0, true);
        assert!(!v.flagged());
        v.object_correct = false;
        assert!(v.flagged());
        v.exists_in_image = false;
        assert!(v.flagged());
    }

    #[test]
    fn duplicates_rejected_per_scan() {
        let a = verdict(0, true);
        let mut b = a.clone();
        assert!(matches!(hallucination_rate(&[a.clone(), b.clone()]), Err(AnalysisError::DuplicateVerdict { .. })));
        b.scan_id = "other".into();
        assert!(hallucination_rate(&[a, b]).is_ok());
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent_2dp(237, 3590), Some(6.60));
        assert_eq!(percent_2dp(1, 8), Some(12.5));
        assert_eq!(percent_2dp(1, 3), Some(33.33));
        assert_eq!(percent_2dp(2, 3), Some(66.67));
    }

    proptest! {
        #[test]
        fn rate_is_exact_ratio(flags in proptest::collection::vec(any::<bool>(), 1..200)) {
            let vs: Vec<_> = flags.iter().enumerate().map(|(i, &f)| verdict(i, !f)).collect();
            let s = hallucination_rate(&vs).unwrap();
            let f = flags.iter().filter(|&&x| x).count() as u64;
            prop_assert_eq!(s.flagged, f);
            prop_assert_eq!(s.rate.unwrap(), f as f64 / flags.len() as f64);
        }
    }
}
