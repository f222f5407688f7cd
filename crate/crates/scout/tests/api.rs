mod common;

use std::sync::Arc;
use std::time::Duration;

use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde_json::{json, Value};

use common::{fixture, providers_with, script_before_default, server, SlowChat};
use scout::engine::BudgetSettings;
use scout_core::domain::canonical_json;
use scout_core::mock;
use scout_core::providers::ScriptedChat;
use scout_core::FixedClock;

fn concern_ids(scan: &Value) -> Vec<String> {
    scan["concerns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["id"].as_str().unwrap().to_string())
        .collect()
}

fn slow(delay_ms: u64) -> scout_core::pipeline::ScanProviders {
    let chat = SlowChat {
        inner: ScriptedChat::from_rules(mock::default_script()),
        delay: Duration::from_millis(delay_ms),
    };
    providers_with(Arc::new(chat), Arc::new(FixedClock::default()))
}

#[tokio::test]
async fn multipart_scan_matches_golden_record() {
    let s = server().start().await;
    let form = Form::new()
        .part("image", Part::bytes(mock::bathroom_png()).file_name("bathroom.png").mime_str("image/png").unwrap())
        .text("env_description", mock::BATHROOM_DESCRIPTION);
    let r = s.post("/v1/scans", &[]).with(|b| b.multipart(form)).send().await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.body);
    let job = s.wait_job(r.body["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "complete");
    let id = job["scan_id"].as_str().unwrap();
    let scan = s.get("/v1/scans/{scan_id}", &[id]).send().await;
    assert_eq!(scan.status, StatusCode::OK);
    let golden = std::fs::read_to_string(fixture("mock/bathroom_scan.json")).unwrap();
    let got = canonical_json(&scan.body);
    assert!(got.trim_end() == golden.trim_end(), "scan differs from the golden record");
}

#[tokio::test]
async fn json_scan_by_digest_and_blob_roundtrip() {
    let s = server().start().await;
    let digest = s.upload_bathroom().await;
    let raw = s.client.get(format!("{}/v1/blobs/{digest}", s.base)).send().await.unwrap();
    assert_eq!(raw.status(), StatusCode::OK);
    assert_eq!(raw.headers()["content-type"], "image/png");
    assert_eq!(raw.bytes().await.unwrap().to_vec(), mock::bathroom_png());
    let id = s.bathroom_scan().await;
    assert_eq!(id, "scan-519a0a1856cbee1e");
}

#[tokio::test]
async fn non_image_blob_is_rejected() {
    let s = server().start().await;
    let r = s.post("/v1/blobs", &[]).with(|b| b.body("plain text")).send().await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.body["path"], "image");
}

#[tokio::test]
async fn idempotency_key_returns_same_job_or_conflicts() {
    let s = server().start().await;
    let digest = s.upload_bathroom().await;
    let body = json!({"image_digest": digest, "env_description": mock::BATHROOM_DESCRIPTION});
    let send = |body: Value| {
        s.post("/v1/scans", &[])
            .with(|b| b.header("Idempotency-Key", "k-1"))
            .json(&body)
            .send()
    };
    let a = send(body.clone()).await;
    let b = send(body.clone()).await;
    assert_eq!(a.status, StatusCode::ACCEPTED);
    assert_eq!(a.body["job_id"], b.body["job_id"]);
    let mut other = body.clone();
    other["intent"] = json!("take a bath");
    let c = send(other).await;
    assert_eq!(c.status, StatusCode::CONFLICT);
    assert_eq!(c.body["code"], "conflict");
}

#[tokio::test]
async fn unknown_resources_are_404() {
    let s = server().start().await;
    assert_eq!(s.get("/v1/scans/jobs/{job_id}", &["job-999999"]).send().await.status, StatusCode::NOT_FOUND);
    assert_eq!(s.get("/v1/scans/{scan_id}", &["scan-0000000000000000"]).send().await.status, StatusCode::NOT_FOUND);
    assert_eq!(s.get("/v1/models/{id}", &["nobody"]).send().await.status, StatusCode::NOT_FOUND);
    assert_eq!(s.get("/v1/models/{id}/versions", &["nobody"]).send().await.status, StatusCode::NOT_FOUND);
    assert_eq!(s.get("/v1/batch/{id}", &["batch-000009"]).send().await.status, StatusCode::NOT_FOUND);
    let r = s
        .post("/v1/scans", &[])
        .json(&json!({"image_digest": "0".repeat(64), "env_description": "a room"}))
        .send()
        .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.body["path"], "image_digest");
}

#[tokio::test]
async fn malformed_bodies_report_field_paths() {
    let s = server().start().await;
    let id = s.bathroom_scan().await;
    let r = s
        .post("/v1/scans/{scan_id}/feedback", &[&id])
        .json(&json!([{"concern_id": "c", "is_concern": "yes"}]))
        .send()
        .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.body["path"], "[0].is_concern");
    let r = s.post("/v1/scans", &[]).json(&json!({"env_description": "x"})).send().await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = s.post("/v1/scans", &[]).with(|b| b.body("hello")).send().await;
    assert_eq!(r.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn feedback_concerns_and_model_update() {
    let s = server().start().await;
    let id = s.bathroom_scan().await;
    let scan = s.get("/v1/scans/{scan_id}", &[&id]).send().await.body;
    let ids = concern_ids(&scan);

    let r = s
        .post("/v1/scans/{scan_id}/feedback", &[&id])
        .json(&json!([
            {"concern_id": ids[0], "is_concern": true},
            {"concern_id": ids[1], "is_concern": false, "text": "I use a shower chair"}
        ]))
        .send()
        .await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    let fb = s.get("/v1/scans/{scan_id}/feedback", &[&id]).send().await;
    assert_eq!(fb.body.as_array().unwrap().len(), 2);

    let r = s
        .post("/v1/scans/{scan_id}/concerns", &[&id])
        .json(&json!({"text": "the outlet by the door is too high"}))
        .send()
        .await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(r.body["name"], "Tall Outlet");
    assert_eq!(r.body["origin"], "user_added");

    let before = s.get("/v1/models/{id}", &["generic"]).send().await.body;
    assert_eq!(before["version"], 0);
    let r = s
        .post("/v1/models/{id}/apply-feedback", &["generic"])
        .json(&json!({"scan_id": id}))
        .send()
        .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_eq!(r.body["new_version"], 1);
    assert!(!r.body["diff"]["added"].as_array().unwrap().is_empty());
    let v0 = s.get("/v1/models/{id}?version=0", &["generic"]).send().await;
    assert_eq!(v0.body, before);
    let versions = s.get("/v1/models/{id}/versions", &["generic"]).send().await;
    assert_eq!(versions.body["versions"], json!([0, 1]));
}

#[tokio::test]
async fn model_creation_from_self_description() {
    let s = server().start().await;
    let r = s
        .post("/v1/models", &[])
        .json(&json!({"id": "pat", "self_description": "I use a wheelchair and cannot stand for long."}))
        .send()
        .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
    assert_eq!(r.body["version"], 0);
    assert!(!r.body["attributes"].as_array().unwrap().is_empty());
    let again = s
        .post("/v1/models", &[])
        .json(&json!({"id": "pat", "self_description": "anything"}))
        .send()
        .await;
    assert_eq!(again.status, StatusCode::CONFLICT);
    let neither = s.post("/v1/models", &[]).json(&json!({"id": "q"})).send().await;
    assert_eq!(neither.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn concurrent_update_of_one_model_conflicts() {
    let s = server().providers(slow(150)).start().await;
    let id = s.bathroom_scan().await;
    let ids = concern_ids(&s.get("/v1/scans/{scan_id}", &[&id]).send().await.body);
    s.post("/v1/scans/{scan_id}/feedback", &[&id])
        .json(&json!([{"concern_id": ids[0], "is_concern": true}]))
        .send()
        .await;
    let call = || {
        s.post("/v1/models/{id}/apply-feedback", &["generic"])
            .json(&json!({"scan_id": id}))
            .send()
    };
    let (a, b) = tokio::join!(call(), call());
    let mut statuses = [a.status, b.status];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let versions = s.get("/v1/models/{id}/versions", &["generic"]).send().await;
    assert_eq!(versions.body["versions"], json!([0, 1]));
}

#[tokio::test]
async fn provider_failure_leaves_model_unchanged() {
    let script = script_before_default(json!([
        {"schema": "user_attributes", "error": "transport"}
    ]));
    let s = server().script(script).start().await;
    let id = s.bathroom_scan().await;
    let ids = concern_ids(&s.get("/v1/scans/{scan_id}", &[&id]).send().await.body);
    s.post("/v1/scans/{scan_id}/feedback", &[&id])
        .json(&json!([{"concern_id": ids[0], "is_concern": true}]))
        .send()
        .await;
    let r = s
        .post("/v1/models/{id}/apply-feedback", &["generic"])
        .json(&json!({"scan_id": id}))
        .send()
        .await;
    assert_eq!(r.status, StatusCode::BAD_GATEWAY);
    assert_eq!(r.body["code"], "provider_failure");
    let versions = s.get("/v1/models/{id}/versions", &["generic"]).send().await;
    assert_eq!(versions.body["versions"], json!([0]));
}

#[tokio::test]
async fn spent_budget_returns_503_with_retry_after() {
    let s = server()
        .settings(|st| {
            st.request_budget = Some(BudgetSettings {
                requests: 6,
                window_seconds: 3600,
            })
        })
        .start()
        .await;
    s.bathroom_scan().await;
    let digest = s.upload_bathroom().await;
    let r = s
        .post("/v1/scans", &[])
        .json(&json!({"image_digest": digest, "env_description": "another bathroom"}))
        .send()
        .await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    let retry: u64 = r.headers["retry-after"].to_str().unwrap().parse().unwrap();
    assert!(retry >= 1 && retry <= 3600);
}

#[tokio::test]
async fn bearer_token_is_required_when_configured() {
    let s = server().token("sesame").start().await;
    let anon = s.client.get(format!("{}/v1/models/generic", s.base)).send().await.unwrap();
    assert_eq!(anon.status(), StatusCode::UNAUTHORIZED);
    assert!(anon.headers().contains_key("www-authenticate"));
    let body: Value = anon.json().await.unwrap();
    s.check(&reqwest::Method::GET, "/v1/models/{id}", StatusCode::UNAUTHORIZED, &body);
    let wrong = s
        .client
        .get(format!("{}/v1/models/generic", s.base))
        .bearer_auth("nope")
        .send()
        .await
        .unwrap();
    assert_eq!(wrong.status(), StatusCode::UNAUTHORIZED);
    assert_eq!(s.get("/v1/models/{id}", &["generic"]).send().await.status, StatusCode::OK);
}

#[tokio::test]
async fn batch_respects_its_concurrency() {
    let s = server().providers(slow(40)).workers(8).start().await;
    let digest = s.upload_bathroom().await;
    let rows: Vec<Value> = (0..4)
        .map(|i| json!({"image": digest, "env_description": format!("bathroom number {i}")}))
        .collect();
    let r = s.post("/v1/batch", &[]).json(&json!({"rows": rows, "concurrency": 2})).send().await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.body);
    let status = s.wait_batch(r.body["batch_id"].as_str().unwrap()).await;
    assert_eq!(status["complete"], 4, "{status}");
    let peak = status["peak_running"].as_u64().unwrap();
    assert!((1..=2).contains(&peak), "peak {peak}");
    let bad = s
        .post("/v1/batch", &[])
        .json(&json!({"rows": [{"image": "local.png", "env_description": "x"}]}))
        .send()
        .await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(bad.body["path"], "rows[0].image");
}

#[tokio::test]
async fn verdicts_are_recorded_once() {
    let s = server().start().await;
    let id = s.bathroom_scan().await;
    let ids = concern_ids(&s.get("/v1/scans/{scan_id}", &[&id]).send().await.body);
    let v = json!([{"scan_id": id, "concern_id": ids[0], "exists_in_image": true, "object_correct": false, "reviewer": "r1"}]);
    let r = s.post("/v1/scans/{scan_id}/verdicts", &[&id]).json(&v).send().await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    let again = s.post("/v1/scans/{scan_id}/verdicts", &[&id]).json(&v).send().await;
    assert_eq!(again.status, StatusCode::CONFLICT);
    let mut wrong = v.clone();
    wrong[0]["scan_id"] = json!("scan-0000000000000000");
    wrong[0]["concern_id"] = json!(ids[1]);
    let r = s.post("/v1/scans/{scan_id}/verdicts", &[&id]).json(&wrong).send().await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let list = s.get("/v1/scans/{scan_id}/verdicts", &[&id]).send().await;
    assert_eq!(list.body.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn analysis_endpoints() {
    let s = server().start().await;
    let id = s.bathroom_scan().await;
    let d = s.get("/v1/analysis/distribution?group=all", &[]).send().await;
    assert_eq!(d.status, StatusCode::OK, "{}", d.body);
    let total: f64 = d.body["distribution"]["values"]
        .as_array()
        .map(|v| v.iter().map(|x| x.as_f64().unwrap()).sum())
        .unwrap_or(1.0);
    assert!(total > 0.0);
    let w = s.get("/v1/analysis/wasserstein?a=all&b=model:generic", &[]).send().await;
    assert_eq!(w.status, StatusCode::OK, "{}", w.body);
    assert_eq!(w.body["distance"].as_f64().unwrap(), 0.0);
    let bad = s.get("/v1/analysis/wasserstein?a=everyone&b=all", &[]).send().await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    let diff = s.post("/v1/analysis/diff", &[]).json(&json!({"scan_a": id, "scan_b": id})).send().await;
    assert_eq!(diff.status, StatusCode::OK, "{}", diff.body);
}
