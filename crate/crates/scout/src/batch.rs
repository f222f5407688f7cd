//! Batch manifests: many scans described by rows of image, description,
//! intent and model.

use std::path::Path;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::json;

use scout_core::digest::{digest_json, is_digest};
use scout_core::domain::{sniff_media_type, EnvironmentInput, ScanStatus, UserModel};
use scout_core::store::FileStore;

use crate::engine::{Engine, EngineError, GENERIC_MODEL_ID};
use crate::jobs::{failure_summary, Gauge, JobState};

fn generic() -> String {
    GENERIC_MODEL_ID.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BatchRow {
    /// Blob digest, http(s) URL, or (CLI only) a file path relative to the
    /// manifest.
    pub image: String,
    pub env_description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default = "generic")]
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BatchManifest {
    pub rows: Vec<BatchRow>,
    /// Rows of this batch running at once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concurrency: Option<usize>,
}

impl BatchManifest {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.rows.is_empty() {
            return Err(EngineError::invalid("rows", "a manifest needs at least one row"));
        }
        if self.concurrency == Some(0) {
            return Err(EngineError::invalid("concurrency", "must be at least 1"));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.image.trim().is_empty() {
                return Err(EngineError::invalid(format!("rows[{i}].image"), "must not be empty"));
            }
            if r.env_description.trim().is_empty() {
                return Err(EngineError::invalid(format!("rows[{i}].env_description"), "must not be empty"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::invalid("manifest", format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let m: BatchManifest = serde_path_to_error::deserialize(de)
            .map_err(|e| EngineError::invalid(e.path().to_string(), e.inner().to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// Loads image bytes named by a row. Paths are only honoured when `base`
/// is given.
pub async fn fetch_image(spec: &str, base: Option<&Path>, store: &FileStore) -> Result<Vec<u8>, EngineError> {
    if is_digest(spec) {
        return Ok(store.get_blob(spec)?);
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        let resp = reqwest::get(spec)
            .await
            .map_err(|e| EngineError::Provider(format!("fetching {spec}: {e}")))?;
        if !resp.status().is_success() {
            return Err(EngineError::Provider(format!("fetching {spec}: HTTP {}", resp.status())));
        }
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| EngineError::Provider(format!("fetching {spec}: {e}")))?;
        return Ok(bytes.to_vec());
    }
    let Some(base) = base else {
        return Err(EngineError::invalid("image", "expected a blob digest or an http(s) URL"));
    };
    let path = base.join(spec);
    std::fs::read(&path).map_err(|e| EngineError::invalid("image", format!("{}: {e}", path.display())))
}

pub async fn row_environment(
    row: &BatchRow,
    base: Option<&Path>,
    store: &FileStore,
) -> Result<EnvironmentInput, EngineError> {
    let bytes = fetch_image(&row.image, base, store).await?;
    let media = sniff_media_type(&bytes).ok_or_else(|| EngineError::invalid("image", "not a PNG or JPEG image"))?;
    let mut env = EnvironmentInput::new(bytes, media, row.env_description.clone());
    if let Some(i) = row.intent.as_deref().filter(|i| !i.trim().is_empty()) {
        env = env.with_intent(i);
    }
    Ok(env)
}

/// Scan id of a row, independent of when it runs, so reruns can skip it.
pub fn row_scan_id(env: &EnvironmentInput, model: &UserModel) -> String {
    let d = digest_json(&json!({
        "image": env.digest(),
        "description": env.env_description,
        "intent": env.intent,
        "model": model.id,
        "version": model.version,
    }));
    format!("scan-{}", &d[..16])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOutcome {
    pub row: usize,
    pub image: String,
    /// `skipped` rows already had a stored scan.
    pub state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub rows: Vec<RowOutcome>,
    pub complete: usize,
    pub partial: usize,
    pub failed: usize,
    pub skipped: usize,
    pub concurrency: usize,
    pub peak_running: usize,
}

impl BatchReport {
    pub fn all_succeeded(&self) -> bool {
        self.partial == 0 && self.failed == 0
    }
}

/// Runs every row with at most `concurrency` scans in flight. With
/// `resume`, rows whose scan is already stored are skipped.
pub async fn run_manifest(
    engine: Arc<Engine>,
    manifest: &BatchManifest,
    base: &Path,
    concurrency: usize,
    resume: bool,
) -> BatchReport {
    let concurrency = concurrency.max(1);
    let gauge = Arc::new(Gauge::default());
    let outcomes: Vec<RowOutcome> = stream::iter(manifest.rows.iter().enumerate())
        .map(|(i, row)| {
            let engine = engine.clone();
            let gauge = gauge.clone();
            async move {
                let _g = gauge.enter();
                let (state, scan_id, error) = match run_row(&engine, row, base, resume).await {
                    Ok(RowResult::Skipped(id)) => ("skipped".to_string(), Some(id), None),
                    Ok(RowResult::Scanned(rec)) => {
                        let state = match rec.status {
                            ScanStatus::Complete => JobState::Complete,
                            ScanStatus::Partial => JobState::Partial,
                            ScanStatus::Failed => JobState::Failed,
                        };
                        let error = (state == JobState::Failed).then(|| failure_summary(&rec));
                        let id = (state != JobState::Failed).then_some(rec.id);
                        (state_name(state), id, error)
                    }
                    Err(e) => (state_name(JobState::Failed), None, Some(e.to_string())),
                };
                RowOutcome {
                    row: i,
                    image: row.image.clone(),
                    state,
                    scan_id,
                    error,
                }
            }
        })
        .buffered(concurrency)
        .collect()
        .await;
    let count = |s: &str| outcomes.iter().filter(|o| o.state == s).count();
    BatchReport {
        complete: count("complete"),
        partial: count("partial"),
        failed: count("failed"),
        skipped: count("skipped"),
        concurrency,
        peak_running: gauge.peak(),
        rows: outcomes,
    }
}

fn state_name(s: JobState) -> String {
    serde_json::to_value(s).unwrap().as_str().unwrap().to_string()
}

enum RowResult {
    Skipped(String),
    Scanned(scout_core::domain::ScanRecord),
}

async fn run_row(engine: &Engine, row: &BatchRow, base: &Path, resume: bool) -> Result<RowResult, EngineError> {
    let env = row_environment(row, Some(base), &engine.store).await?;
    let model = engine.model(&row.model_id, None)?;
    let id = row_scan_id(&env, &model);
    if resume && engine.store.has_scan(&id) {
        return Ok(RowResult::Skipped(id));
    }
    Ok(RowResult::Scanned(engine.scan(env, &row.model_id, Some(id)).await?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_needs_rows() {
        let m = BatchManifest {
            rows: vec![],
            concurrency: None,
        };
        assert!(m.validate().is_err());
        let row: BatchRow = serde_json::from_str(r#"{"image":"a.png","env_description":"a kitchen"}"#).unwrap();
        assert_eq!(row.model_id, "generic");
    }

    #[test]
    fn row_ids_ignore_time_but_track_inputs() {
        let env = EnvironmentInput::new(vec![1, 2, 3], "image/png", "a kitchen");
        let m = UserModel::generic("generic");
        let a = row_scan_id(&env, &m);
        assert_eq!(a, row_scan_id(&env, &m));
        assert_ne!(a, row_scan_id(&env.clone().with_intent("cook"), &m));
        assert!(a.starts_with("scan-") && a.len() == 21);
    }
}
