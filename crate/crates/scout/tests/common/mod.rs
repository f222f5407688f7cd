//! In-process server on an ephemeral port, with every JSON response checked
//! against the published API schema.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use reqwest::{Method, RequestBuilder, StatusCode};
use serde_json::{json, Value};
use tempfile::TempDir;

use scout_core::mock;
use scout_core::pipeline::ScanProviders;
use scout_core::providers::{
    BackendRequest, ChatBackend, ChatClient, ProviderConfig, ProviderError, RawReply, ScriptFile, ScriptedChat,
};
use scout_core::store::FileStore;
use scout_core::{Clock, FixedClock};
use scout::api::{router, AppState};
use scout::engine::{Engine, Settings};
use scout::jobs::JobRegistry;
use scout::schema::{api_schema, response_schema};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn script(json: Value) -> ScriptFile {
    ScriptFile::parse(&json.to_string()).unwrap()
}

/// Rules tried before the bundled mock script.
pub fn script_before_default(rules: Value) -> ScriptFile {
    script(json!({ "rules": rules })).then(mock::default_script())
}

/// Scripted chat that waits before every reply.
pub struct SlowChat {
    pub inner: ScriptedChat,
    pub delay: Duration,
}

#[async_trait]
impl ChatBackend for SlowChat {
    async fn send(&self, request: &BackendRequest) -> Result<RawReply, ProviderError> {
        tokio::time::sleep(self.delay).await;
        self.inner.send(request).await
    }
}

pub fn providers_with(backend: Arc<dyn ChatBackend>, clock: Arc<dyn Clock>) -> ScanProviders {
    let mut p = mock::providers(mock::default_script(), clock.clone());
    p.chat = Arc::new(ChatClient::new(backend, ProviderConfig::scripted()).with_clock(clock));
    p
}

pub struct Server {
    pub base: String,
    pub jobs: Arc<JobRegistry>,
    pub client: reqwest::Client,
    pub token: Option<String>,
    doc: Value,
    _dir: TempDir,
}

pub struct Builder {
    providers: Option<ScanProviders>,
    settings: Settings,
    token: Option<String>,
    workers: usize,
}

impl Builder {
    pub fn script(mut self, script: ScriptFile) -> Self {
        self.providers = Some(mock::providers(script, Arc::new(FixedClock::default())));
        self
    }

    pub fn providers(mut self, providers: ScanProviders) -> Self {
        self.providers = Some(providers);
        self
    }

    pub fn settings(mut self, f: impl FnOnce(&mut Settings)) -> Self {
        f(&mut self.settings);
        self
    }

    pub fn token(mut self, token: &str) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn workers(mut self, n: usize) -> Self {
        self.workers = n;
        self
    }

    pub async fn start(self) -> Server {
        let dir = TempDir::new().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let clock: Arc<dyn Clock> = Arc::new(FixedClock::default());
        let providers = self
            .providers
            .unwrap_or_else(|| mock::providers(mock::default_script(), clock.clone()));
        let engine = Arc::new(Engine::new(store, providers, clock, &self.settings).unwrap());
        let jobs = JobRegistry::new(engine, self.workers);
        let state = AppState {
            jobs: jobs.clone(),
            token: self.token.as_deref().map(Arc::from),
        };
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
        Server {
            base: format!("http://{addr}"),
            jobs,
            client: reqwest::Client::new(),
            token: self.token,
            doc: api_schema(),
            _dir: dir,
        }
    }
}

pub fn server() -> Builder {
    Builder {
        providers: None,
        settings: Settings::default(),
        token: None,
        workers: 4,
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: reqwest::header::HeaderMap,
    pub body: Value,
}

impl Server {
    /// Request to `template` with `{name}` segments filled from `args` in
    /// order.
    pub fn request(&self, method: Method, template: &str, args: &[&str]) -> Call<'_> {
        let mut path = template.to_string();
        for a in args {
            let start = path.find('{').expect("more args than placeholders");
            let end = path[start..].find('}').unwrap() + start;
            path.replace_range(start..=end, a);
        }
        let mut builder = self.client.request(method.clone(), format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            builder = builder.bearer_auth(t);
        }
        Call {
            server: self,
            method,
            template: template.split('?').next().unwrap().to_string(),
            builder,
        }
    }

    pub fn get(&self, template: &str, args: &[&str]) -> Call<'_> {
        self.request(Method::GET, template, args)
    }

    pub fn post(&self, template: &str, args: &[&str]) -> Call<'_> {
        self.request(Method::POST, template, args)
    }

    /// Validates `body` against the documented response for the operation.
    pub fn check(&self, method: &Method, template: &str, status: StatusCode, body: &Value) {
        let m = method.as_str().to_ascii_lowercase();
        let responses = &self.doc["paths"][template][&m]["responses"];
        assert!(
            responses.get(status.as_str()).is_some(),
            "{m} {template} returned undocumented status {status}: {body}"
        );
        if body.is_null() {
            return;
        }
        let schema = response_schema(&self.doc, &m, template, status.as_u16())
            .unwrap_or_else(|| panic!("{m} {template} {status} has no JSON schema"));
        let root = json!({ "components": self.doc["components"], "allOf": [schema] });
        let validator = jsonschema::draft202012::new(&root).unwrap();
        let errors: Vec<String> = validator.iter_errors(body).map(|e| format!("{} at {}", e, e.instance_path)).collect();
        assert!(errors.is_empty(), "{m} {template} {status} violates its schema: {errors:?}\n{body}");
    }

    pub async fn wait_job(&self, job_id: &str) -> Value {
        for _ in 0..500 {
            let r = self.get("/v1/scans/jobs/{job_id}", &[job_id]).send().await;
            assert_eq!(r.status, StatusCode::OK);
            let state = r.body["state"].as_str().unwrap();
            if !matches!(state, "queued" | "running") {
                return r.body;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {job_id} did not finish");
    }

    pub async fn wait_batch(&self, batch_id: &str) -> Value {
        for _ in 0..500 {
            let r = self.get("/v1/batch/{id}", &[batch_id]).send().await;
            assert_eq!(r.status, StatusCode::OK);
            if r.body["done"] == json!(true) {
                return r.body;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("batch {batch_id} did not finish");
    }

    pub async fn upload_bathroom(&self) -> String {
        let r = self
            .post("/v1/blobs", &[])
            .with(|b| b.header("content-type", "image/png").body(mock::bathroom_png()))
            .send()
            .await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
        r.body["digest"].as_str().unwrap().to_string()
    }

    /// Runs the golden bathroom scan and returns its id.
    pub async fn bathroom_scan(&self) -> String {
        let digest = self.upload_bathroom().await;
        let r = self
            .post("/v1/scans", &[])
            .json(&json!({"image_digest": digest, "env_description": mock::BATHROOM_DESCRIPTION}))
            .send()
            .await;
        assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.body);
        let job = self.wait_job(r.body["job_id"].as_str().unwrap()).await;
        assert_eq!(job["state"], "complete", "{job}");
        job["scan_id"].as_str().unwrap().to_string()
    }
}

pub struct Call<'a> {
    server: &'a Server,
    method: Method,
    template: String,
    builder: RequestBuilder,
}

impl Call<'_> {
    pub fn with(mut self, f: impl FnOnce(RequestBuilder) -> RequestBuilder) -> Self {
        self.builder = f(self.builder);
        self
    }

    pub fn json(self, body: &Value) -> Self {
        let body = body.clone();
        self.with(|b| b.json(&body))
    }

    pub async fn send(self) -> Reply {
        let resp = self.builder.send().await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.bytes().await.unwrap();
        let is_json = headers
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("application/json"));
        let body = if bytes.is_empty() || !is_json {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        self.server.check(&self.method, &self.template, status, &body);
        Reply { status, headers, body }
    }
}
