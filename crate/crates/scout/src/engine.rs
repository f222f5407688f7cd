//! Store-backed operations shared by the HTTP service and the CLI.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use scout_core::analysis::{
    categorize_corpus, diff_scans, distribution, wasserstein, AnalysisError, CategoryDistribution, CategoryRules,
    CorpusCategories, CorpusOptions, GroupKey, ReviewVerdict, Scaling, ScanDiff,
};
use scout_core::domain::{
    diff_user_models, Concern, ConcernOrigin, ElicitationChannel, EnvironmentInput, Feedback, ModelDiff, ScanRecord,
    ScanStatus, UserModel,
};
use scout_core::elicitation::{
    self, elicit_from_annotations, elicit_from_text, Annotation, AnnotationInput, ElicitationError, NewConcern,
};
use scout_core::pipeline::{run_scan, PipelineError, ScanConfig, ScanProviders};
use scout_core::providers::{
    ChatClient, HashEmbedder, ImageAttachment, ProviderConfig, ScriptFile,
};
use scout_core::providers::live::{HttpSegmenter, LiveChat, LiveEmbedder};
use scout_core::store::{FileStore, ScanFilter, StoreError};
use scout_core::{mock, Clock, FixedClock, SystemClock};

/// Model every deployment serves without creating it first.
pub const GENERIC_MODEL_ID: &str = "generic";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("provider request budget exhausted; retry in {retry_after}s")]
    Budget { retry_after: u64 },
    #[error("internal error: {0}")]
    Internal(String),
}

impl EngineError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        EngineError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            EngineError::NotFound(_) => "not_found",
            EngineError::Invalid { .. } => "invalid",
            EngineError::Conflict(_) => "conflict",
            EngineError::Provider(_) => "provider_failure",
            EngineError::Budget { .. } => "budget_exhausted",
            EngineError::Internal(_) => "internal",
        }
    }
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => EngineError::NotFound(what),
            StoreError::VersionConflict { .. } | StoreError::ScanConflict(_) | StoreError::DuplicateVerdict { .. } => {
                EngineError::Conflict(e.to_string())
            }
            StoreError::UnknownConcern { .. } => EngineError::invalid("concern_id", e.to_string()),
            StoreError::Invalid(m) => EngineError::invalid("", m),
            other => EngineError::Internal(other.to_string()),
        }
    }
}

impl From<ElicitationError> for EngineError {
    fn from(e: ElicitationError) -> Self {
        match e {
            ElicitationError::Provider(f) => EngineError::Provider(f.to_string()),
            ElicitationError::EmptyInput => EngineError::invalid("text", e.to_string()),
            ElicitationError::NoAnnotations => EngineError::invalid("annotations", e.to_string()),
            ElicitationError::UnknownConcern(_) => EngineError::invalid("concern_id", e.to_string()),
            ElicitationError::InvalidInput(m) => EngineError::invalid("", m),
            ElicitationError::Template(t) => EngineError::Internal(t.to_string()),
        }
    }
}

impl From<AnalysisError> for EngineError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Provider(p) => EngineError::Provider(p.to_string()),
            AnalysisError::InvalidGroup(_) => EngineError::invalid("group", e.to_string()),
            other => EngineError::invalid("", other.to_string()),
        }
    }
}

impl From<PipelineError> for EngineError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidInput(m) => EngineError::invalid("", m),
            PipelineError::Domain(d) => EngineError::invalid("", d.to_string()),
            PipelineError::Template(t) => EngineError::Internal(t.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSettings {
    /// Provider requests allowed per window.
    pub requests: u64,
    pub window_seconds: u64,
}

/// Fixed-window cap on provider requests. Work already admitted may
/// overshoot the cap; new work is refused until the window rolls over.
#[derive(Debug)]
pub struct RequestBudget {
    settings: BudgetSettings,
    state: Mutex<(Instant, u64)>,
}

impl RequestBudget {
    pub fn new(settings: BudgetSettings) -> Self {
        Self {
            settings,
            state: Mutex::new((Instant::now(), 0)),
        }
    }

    fn roll(&self, state: &mut (Instant, u64)) {
        if state.0.elapsed() >= Duration::from_secs(self.settings.window_seconds) {
            *state = (Instant::now(), 0);
        }
    }

    pub fn check(&self) -> Result<(), EngineError> {
        let mut s = self.state.lock().unwrap();
        self.roll(&mut s);
        if s.1 >= self.settings.requests {
            let left = Duration::from_secs(self.settings.window_seconds).saturating_sub(s.0.elapsed());
            return Err(EngineError::Budget {
                retry_after: left.as_secs_f64().ceil().max(1.0) as u64,
            });
        }
        Ok(())
    }

    pub fn charge(&self, requests: u64) {
        let mut s = self.state.lock().unwrap();
        self.roll(&mut s);
        s.1 += requests;
    }
}

/// Optional JSON settings file; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub chat: ProviderConfig,
    pub embed: ProviderConfig,
    pub segment: ProviderConfig,
    pub scan: ScanConfig,
    /// Scan jobs running at once in the service.
    pub workers: Option<usize>,
    pub request_budget: Option<BudgetSettings>,
    /// Category rules file for analysis; the bundled rules otherwise.
    pub rules: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            chat: ProviderConfig::default(),
            embed: ProviderConfig {
                model: "text-embedding-3-small".into(),
                ..ProviderConfig::default()
            },
            segment: ProviderConfig::default(),
            scan: ScanConfig::default(),
            workers: None,
            request_budget: None,
            rules: None,
        }
    }
}

impl Settings {
    pub fn load(path: &std::path::Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::invalid("config", format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let s: Settings = serde_path_to_error::deserialize(de)
            .map_err(|e| EngineError::invalid(e.path().to_string(), e.inner().to_string()))?;
        s.scan.validate().map_err(|m| EngineError::invalid("scan", m))?;
        for (name, c) in [("chat", &s.chat), ("embed", &s.embed), ("segment", &s.segment)] {
            c.validate().map_err(|m| EngineError::invalid(name, m))?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderMode {
    /// Scripted chat, hash embeddings, fixture segmentation and a fixed clock.
    Mock { script: Option<PathBuf> },
    Live,
}

pub fn mock_script(script: Option<&std::path::Path>) -> Result<ScriptFile, EngineError> {
    match script {
        Some(p) => mock::load_script(p).map_err(|e| EngineError::invalid("mock_script", e.to_string())),
        None => Ok(mock::default_script()),
    }
}

pub fn build_providers(
    mode: &ProviderMode,
    settings: &Settings,
) -> Result<(ScanProviders, Arc<dyn Clock>), EngineError> {
    match mode {
        ProviderMode::Mock { script } => {
            let clock: Arc<dyn Clock> = Arc::new(FixedClock::default());
            let script = mock_script(script.as_deref())?;
            Ok((mock::providers(script, clock.clone()), clock))
        }
        ProviderMode::Live => {
            let provider = |e: scout_core::providers::ProviderError| EngineError::Provider(e.to_string());
            let chat = LiveChat::from_env(&settings.chat).map_err(provider)?;
            let embedder = LiveEmbedder::from_env(&settings.embed).map_err(provider)?;
            let segmenter = HttpSegmenter::from_env(&settings.segment).map_err(provider)?;
            Ok((
                ScanProviders {
                    chat: Arc::new(ChatClient::new(Arc::new(chat), settings.chat.clone())),
                    embedder: Arc::new(embedder),
                    segmenter: Arc::new(segmenter),
                },
                Arc::new(SystemClock),
            ))
        }
    }
}

/// Embedding backend alone, for analyses that never call chat.
pub fn build_embedder(
    mode: &ProviderMode,
    settings: &Settings,
) -> Result<Arc<dyn scout_core::providers::EmbeddingBackend>, EngineError> {
    match mode {
        ProviderMode::Mock { .. } => Ok(Arc::new(HashEmbedder::default())),
        ProviderMode::Live => Ok(Arc::new(
            LiveEmbedder::from_env(&settings.embed).map_err(|e| EngineError::Provider(e.to_string()))?,
        )),
    }
}

/// Source of a new user model.
#[derive(Debug, Clone)]
pub enum ModelSource {
    SelfDescription(String),
    Annotations { image: ImageAttachment, annotations: Vec<Annotation> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ModelUpdate {
    pub new_version: u64,
    pub diff: ModelDiff,
    pub model: UserModel,
}

fn model_exists(store: &FileStore, id: &str) -> Result<bool, EngineError> {
    match store.model_versions(id) {
        Ok(v) => Ok(!v.is_empty()),
        Err(StoreError::NotFound(_)) => Ok(false),
        Err(e) => Err(e.into()),
    }
}

pub struct Engine {
    pub store: FileStore,
    pub providers: ScanProviders,
    pub clock: Arc<dyn Clock>,
    pub scan_config: ScanConfig,
    pub rules: CategoryRules,
    budget: Option<RequestBudget>,
    updating: Mutex<HashSet<String>>,
}

struct UpdateGuard<'a> {
    set: &'a Mutex<HashSet<String>>,
    id: String,
}

impl Drop for UpdateGuard<'_> {
    fn drop(&mut self) {
        self.set.lock().unwrap().remove(&self.id);
    }
}

impl Engine {
    /// Opens the store and makes sure the generic model exists in it.
    pub fn new(
        store: FileStore,
        providers: ScanProviders,
        clock: Arc<dyn Clock>,
        settings: &Settings,
    ) -> Result<Self, EngineError> {
        let rules = match &settings.rules {
            Some(p) => CategoryRules::load(p)?,
            None => CategoryRules::default(),
        };
        if !model_exists(&store, GENERIC_MODEL_ID)? {
            store.put_model(&UserModel::generic(GENERIC_MODEL_ID))?;
        }
        Ok(Self {
            store,
            providers,
            clock,
            scan_config: settings.scan.clone(),
            rules,
            budget: settings.request_budget.map(RequestBudget::new),
            updating: Mutex::new(HashSet::new()),
        })
    }

    /// Fails with `Budget` while the provider request budget is spent.
    pub fn admit(&self) -> Result<(), EngineError> {
        self.budget.as_ref().map_or(Ok(()), |b| b.check())
    }

    fn charge(&self, requests: u64) {
        if let Some(b) = &self.budget {
            b.charge(requests);
        }
    }

    pub fn chat(&self) -> &ChatClient {
        &self.providers.chat
    }

    pub fn model(&self, id: &str, version: Option<u64>) -> Result<UserModel, EngineError> {
        Ok(self.store.get_model(id, version)?)
    }

    /// Runs one scan and stores it unless it failed outright. A stored scan
    /// with the same id is returned as is.
    pub async fn scan(&self, env: EnvironmentInput, model_id: &str, scan_id: Option<String>) -> Result<ScanRecord, EngineError> {
        let model = self.model(model_id, None)?;
        env.validate().map_err(|e| EngineError::invalid("image", e.to_string()))?;
        if let Some(id) = &scan_id {
            if self.store.has_scan(id) {
                return Ok(self.store.get_scan(id)?);
            }
        }
        self.admit()?;
        self.store.put_blob(&env.image)?;
        let record = run_scan(&env, &model, &self.scan_config, &self.providers, self.clock.as_ref(), scan_id).await?;
        self.charge(record.usage.requests);
        if record.status != ScanStatus::Failed {
            match self.store.put_scan(&record) {
                Ok(()) => {}
                Err(StoreError::ScanConflict(_)) => return Ok(self.store.get_scan(&record.id)?),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(record)
    }

    pub async fn create_model(&self, id: Option<String>, source: ModelSource) -> Result<UserModel, EngineError> {
        self.admit()?;
        let (elicited, channel) = match &source {
            ModelSource::SelfDescription(text) => {
                (elicit_from_text(text, self.chat()).await?, ElicitationChannel::SelfDescription)
            }
            ModelSource::Annotations { image, annotations } => {
                let input = AnnotationInput {
                    image: image.clone(),
                    annotations: annotations.clone(),
                };
                (elicit_from_annotations(&input, self.chat()).await?, ElicitationChannel::Annotations)
            }
        };
        self.charge(elicited.usage.requests);
        let id = id.unwrap_or_else(|| format!("model-{}", &elicited.input_digest[..16]));
        scout_core::store::check_id(&id).map_err(|e| EngineError::invalid("id", e.to_string()))?;
        if model_exists(&self.store, &id)? {
            return Err(EngineError::Conflict(format!("model {id} already exists")));
        }
        let model = elicitation::create_model(id, channel, elicited, self.clock.as_ref());
        self.store.put_model(&model)?;
        Ok(model)
    }

    /// Folds every stored feedback entry and user-added concern of the scan
    /// into the next model version. Nothing is written unless the provider
    /// call succeeds.
    pub async fn apply_feedback(&self, model_id: &str, scan_id: &str) -> Result<ModelUpdate, EngineError> {
        let _guard = {
            let mut set = self.updating.lock().unwrap();
            if !set.insert(model_id.to_string()) {
                return Err(EngineError::Conflict(format!("model {model_id} is already being updated")));
            }
            UpdateGuard {
                set: &self.updating,
                id: model_id.to_string(),
            }
        };
        let model = self.model(model_id, None)?;
        let scan = self.store.get_scan(scan_id)?;
        let feedback = self.store.feedback(scan_id)?;
        let new_concerns: Vec<NewConcern> = scan
            .concerns
            .iter()
            .filter(|c| c.origin == ConcernOrigin::UserAdded)
            .map(|c| NewConcern {
                name: c.name.clone(),
                reason: c.reason.clone(),
            })
            .collect();
        self.admit()?;
        let update =
            elicitation::apply_feedback(&model, &scan, &feedback, &new_concerns, self.chat(), self.clock.as_ref())
                .await
                .inspect_err(|e| {
                    if let ElicitationError::Provider(f) = e {
                        self.charge(f.usage.requests);
                    }
                })?;
        self.charge(update.usage.requests);
        self.store.put_model(&update.model)?;
        Ok(ModelUpdate {
            new_version: update.model.version,
            diff: diff_user_models(&model, &update.model),
            model: update.model,
        })
    }

    /// Adds a user-written concern. Without a name the text is normalized
    /// into a named concern by the chat provider.
    pub async fn add_concern(&self, scan_id: &str, name: Option<&str>, text: &str) -> Result<Concern, EngineError> {
        let scan = self.store.get_scan(scan_id)?;
        if text.trim().is_empty() {
            return Err(EngineError::invalid("text", "must not be empty"));
        }
        let (name, reason) = match name.map(str::trim).filter(|n| !n.is_empty()) {
            Some(n) => (n.to_string(), text.trim().to_string()),
            None => {
                self.admit()?;
                let (c, usage) = elicitation::normalize_concern(text, &scan.env.description, self.chat()).await?;
                self.charge(usage.requests);
                if c.name.is_empty() {
                    return Err(EngineError::Provider("normalized concern has no name".into()));
                }
                let reason = if c.reason.is_empty() { text.trim().to_string() } else { c.reason };
                (c.name, reason)
            }
        };
        Ok(self.store.add_user_concern(scan_id, &name, &reason)?)
    }

    pub fn add_feedback(&self, scan_id: &str, feedback: &[Feedback]) -> Result<(), EngineError> {
        Ok(self.store.append_feedback(scan_id, feedback)?)
    }

    pub fn add_verdicts(&self, scan_id: &str, verdicts: &[ReviewVerdict]) -> Result<(), EngineError> {
        for (i, v) in verdicts.iter().enumerate() {
            if v.scan_id != scan_id {
                return Err(EngineError::invalid(format!("[{i}].scan_id"), "does not match the scan in the path"));
            }
        }
        Ok(self.store.append_verdicts(scan_id, verdicts)?)
    }

    pub fn scans(&self) -> Result<Vec<ScanRecord>, EngineError> {
        Ok(self.store.list_scans(&ScanFilter::default())?)
    }

    pub async fn corpus(&self, scans: &[ScanRecord]) -> Result<CorpusCategories, EngineError> {
        Ok(categorize_corpus(scans, self.providers.embedder.as_ref(), &self.rules, &CorpusOptions::default()).await?)
    }

    pub async fn distribution(&self, group: &GroupKey, scaling: Scaling) -> Result<CategoryDistribution, EngineError> {
        let scans = self.scans()?;
        let corpus = self.corpus(&scans).await?;
        Ok(distribution(&scans, group, &corpus, scaling))
    }

    pub async fn wasserstein(&self, a: &GroupKey, b: &GroupKey, scaling: Scaling) -> Result<f64, EngineError> {
        let scans = self.scans()?;
        let corpus = self.corpus(&scans).await?;
        let p = distribution(&scans, a, &corpus, scaling);
        let q = distribution(&scans, b, &corpus, scaling);
        Ok(wasserstein(&p, &q)?)
    }

    pub async fn diff(&self, scan_a: &str, scan_b: &str) -> Result<ScanDiff, EngineError> {
        let a = self.store.get_scan(scan_a)?;
        let b = self.store.get_scan(scan_b)?;
        Ok(diff_scans(&a, &b, self.providers.embedder.as_ref(), self.scan_config.similarity_threshold).await?)
    }
}
