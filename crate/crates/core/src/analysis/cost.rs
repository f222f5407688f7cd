//! Token, request, latency and cost aggregates over scan records.

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::domain::ScanRecord;
use crate::providers::PriceTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CostReport {
    pub images: usize,
    pub mean_tokens: f64,
    /// Population standard deviation.
    pub std_tokens: f64,
    pub mean_prompt_tokens: f64,
    pub mean_completion_tokens: f64,
    pub mean_requests: f64,
    /// Seconds per scan.
    pub mean_latency: f64,
    pub std_latency: f64,
    /// USD per image.
    pub cost_per_image: f64,
    pub parallelism: usize,
    /// `parallelism × 60 / mean_latency`; absent when latency is zero.
    pub images_per_minute: Option<f64>,
    pub prices: PriceTable,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cost_report(
    records: &[ScanRecord],
    prices: &PriceTable,
    parallelism: usize,
) -> Result<CostReport, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let col = |f: &dyn Fn(&ScanRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    let (mean_tokens, std_tokens) = mean_std(&col(&|r| r.usage.total_tokens() as f64));
    let (mean_prompt_tokens, _) = mean_std(&col(&|r| r.usage.prompt_tokens as f64));
    let (mean_completion_tokens, _) = mean_std(&col(&|r| r.usage.completion_tokens as f64));
    let (mean_requests, _) = mean_std(&col(&|r| r.usage.requests as f64));
    let (mean_latency, std_latency) = mean_std(&col(&|r| r.elapsed_seconds));
    let (cost_per_image, _) = mean_std(&col(&|r| prices.cost(r.usage.prompt_tokens, r.usage.completion_tokens)));
    Ok(CostReport {
        images: records.len(),
        mean_tokens,
        std_tokens,
        mean_prompt_tokens,
        mean_completion_tokens,
        mean_requests,
        mean_latency,
        std_latency,
        cost_per_image,
        parallelism,
        images_per_minute: (mean_latency > 0.0).then(|| parallelism as f64 * 60.0 / mean_latency),
        prices: *prices,
    })
}
