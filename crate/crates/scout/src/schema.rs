//! OpenAPI-style description of the HTTP surface, generated from the
//! request and response types.

use schemars::generate::{SchemaGenerator, SchemaSettings};
use schemars::JsonSchema;
use serde_json::{json, Map, Value};

use scout_core::analysis::{ReviewVerdict, ScanDiff};
use scout_core::domain::{Concern, Feedback, ScanRecord, UserModel};

use crate::api::{
    ApplyFeedbackRequest, BatchAccepted, BlobRef, CreateModelRequest, DiffRequest, ErrorBody, GroupDistribution,
    JobAccepted, ModelVersions, NewConcernRequest, ScanRequest, WassersteinResult,
};
use crate::batch::BatchManifest;
use crate::engine::ModelUpdate;
use crate::jobs::{BatchStatus, ScanJob};

/// Where a request or response body comes from.
enum Content {
    Json(Value),
    Multipart,
    Image,
}

struct Op {
    method: &'static str,
    path: &'static str,
    summary: &'static str,
    params: &'static [(&'static str, &'static str, bool)],
    request: Option<Content>,
    responses: Vec<(u16, Option<Content>)>,
}

struct Builder {
    gen: SchemaGenerator,
}

impl Builder {
    fn new() -> Self {
        let settings = SchemaSettings::draft2020_12().for_serialize().with(|s| {
            s.definitions_path = "/components/schemas".into();
            s.meta_schema = None;
        });
        Self {
            gen: settings.into_generator(),
        }
    }

    fn of<T: JsonSchema>(&mut self) -> Content {
        Content::Json(self.gen.subschema_for::<T>().to_value())
    }

    fn list_of<T: JsonSchema>(&mut self) -> Content {
        Content::Json(self.gen.subschema_for::<Vec<T>>().to_value())
    }
}

fn content(c: &Content) -> Value {
    match c {
        Content::Json(schema) => json!({"application/json": {"schema": schema}}),
        Content::Multipart => json!({"multipart/form-data": {"schema": {
            "type": "object",
            "required": ["image", "env_description"],
            "properties": {
                "image": {"type": "string", "contentEncoding": "binary"},
                "env_description": {"type": "string"},
                "intent": {"type": "string"},
                "model_id": {"type": "string"}
            }
        }}}),
        Content::Image => json!({
            "image/png": {"schema": {"type": "string", "contentEncoding": "binary"}},
            "image/jpeg": {"schema": {"type": "string", "contentEncoding": "binary"}}
        }),
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        201 => "Created",
        202 => "Accepted",
        204 => "No Content",
        401 => "Missing or invalid bearer token",
        404 => "Unknown id",
        409 => "Conflict",
        415 => "Unsupported media type",
        422 => "Invalid request body",
        502 => "Provider failure",
        503 => "Provider request budget exhausted",
        _ => "Error",
    }
}

fn operations(b: &mut Builder) -> Vec<Op> {
    let err = |b: &mut Builder| Some(b.of::<ErrorBody>());
    let errors = |b: &mut Builder, codes: &[u16]| -> Vec<(u16, Option<Content>)> {
        codes.iter().map(|&c| (c, err(b))).collect()
    };
    let with = |ok: Vec<(u16, Option<Content>)>, rest: Vec<(u16, Option<Content>)>| {
        let mut v = ok;
        v.extend(rest);
        v
    };
    vec![
        Op {
            method: "post",
            path: "/v1/blobs",
            summary: "Upload an image; returns its content digest.",
            params: &[],
            request: Some(Content::Image),
            responses: with(vec![(201, Some(b.of::<BlobRef>()))], errors(b, &[422])),
        },
        Op {
            method: "get",
            path: "/v1/blobs/{digest}",
            summary: "Fetch an uploaded image.",
            params: &[("digest", "path", true)],
            request: None,
            responses: with(vec![(200, Some(Content::Image))], errors(b, &[404])),
        },
        Op {
            method: "post",
            path: "/v1/scans",
            summary: "Queue a scan. Idempotent under the Idempotency-Key header.",
            params: &[("Idempotency-Key", "header", false)],
            request: Some(Content::Multipart),
            responses: with(vec![(202, Some(b.of::<JobAccepted>()))], errors(b, &[404, 409, 415, 422, 503])),
        },
        Op {
            method: "get",
            path: "/v1/scans/jobs/{job_id}",
            summary: "Scan job state.",
            params: &[("job_id", "path", true)],
            request: None,
            responses: with(vec![(200, Some(b.of::<ScanJob>()))], errors(b, &[404])),
        },
        Op {
            method: "get",
            path: "/v1/scans/{scan_id}",
            summary: "A stored scan with masks as run lengths.",
            params: &[("scan_id", "path", true)],
            request: None,
            responses: with(vec![(200, Some(b.of::<ScanRecord>()))], errors(b, &[404])),
        },
        Op {
            method: "post",
            path: "/v1/scans/{scan_id}/feedback",
            summary: "Append feedback on concerns of a scan.",
            params: &[("scan_id", "path", true)],
            request: Some(b.list_of::<Feedback>()),
            responses: with(vec![(204, None)], errors(b, &[404, 422])),
        },
        Op {
            method: "get",
            path: "/v1/scans/{scan_id}/feedback",
            summary: "Stored feedback for a scan, oldest first.",
            params: &[("scan_id", "path", true)],
            request: None,
            responses: with(vec![(200, Some(b.list_of::<Feedback>()))], errors(b, &[404])),
        },
        Op {
            method: "post",
            path: "/v1/scans/{scan_id}/concerns",
            summary: "Add a user-written concern; free text without a name is normalized by the chat provider.",
            params: &[("scan_id", "path", true)],
            request: Some(b.of::<NewConcernRequest>()),
            responses: with(vec![(201, Some(b.of::<Concern>()))], errors(b, &[404, 422, 502, 503])),
        },
        Op {
            method: "post",
            path: "/v1/scans/{scan_id}/verdicts",
            summary: "Record fact-check verdicts for concerns of a scan.",
            params: &[("scan_id", "path", true)],
            request: Some(b.list_of::<ReviewVerdict>()),
            responses: with(vec![(204, None)], errors(b, &[404, 409, 422])),
        },
        Op {
            method: "get",
            path: "/v1/scans/{scan_id}/verdicts",
            summary: "Stored verdicts for a scan.",
            params: &[("scan_id", "path", true)],
            request: None,
            responses: with(vec![(200, Some(b.list_of::<ReviewVerdict>()))], errors(b, &[404])),
        },
        Op {
            method: "post",
            path: "/v1/models",
            summary: "Create a user model from a self-description or image annotations.",
            params: &[],
            request: Some(b.of::<CreateModelRequest>()),
            responses: with(vec![(201, Some(b.of::<UserModel>()))], errors(b, &[409, 422, 502, 503])),
        },
        Op {
            method: "get",
            path: "/v1/models/{id}",
            summary: "A user model; the latest version unless one is given.",
            params: &[("id", "path", true), ("version", "query", false)],
            request: None,
            responses: with(vec![(200, Some(b.of::<UserModel>()))], errors(b, &[404])),
        },
        Op {
            method: "get",
            path: "/v1/models/{id}/versions",
            summary: "Stored versions of a user model.",
            params: &[("id", "path", true)],
            request: None,
            responses: with(vec![(200, Some(b.of::<ModelVersions>()))], errors(b, &[404])),
        },
        Op {
            method: "post",
            path: "/v1/models/{id}/apply-feedback",
            summary: "Fold a scan's feedback and user-added concerns into the next model version, atomically.",
            params: &[("id", "path", true)],
            request: Some(b.of::<ApplyFeedbackRequest>()),
            responses: with(vec![(200, Some(b.of::<ModelUpdate>()))], errors(b, &[404, 409, 422, 502, 503])),
        },
        Op {
            method: "post",
            path: "/v1/batch",
            summary: "Queue every row of a manifest.",
            params: &[],
            request: Some(b.of::<BatchManifest>()),
            responses: with(vec![(202, Some(b.of::<BatchAccepted>()))], errors(b, &[404, 422, 503])),
        },
        Op {
            method: "get",
            path: "/v1/batch/{id}",
            summary: "Batch progress with per-row job states.",
            params: &[("id", "path", true)],
            request: None,
            responses: with(vec![(200, Some(b.of::<BatchStatus>()))], errors(b, &[404])),
        },
        Op {
            method: "get",
            path: "/v1/analysis/distribution",
            summary: "Category distribution of a group: all, model:<id> or env:<description>.",
            params: &[("group", "query", false), ("scaling", "query", false)],
            request: None,
            responses: with(vec![(200, Some(b.of::<GroupDistribution>()))], errors(b, &[422, 502])),
        },
        Op {
            method: "get",
            path: "/v1/analysis/wasserstein",
            summary: "Earth mover's distance between two groups' category distributions.",
            params: &[("a", "query", true), ("b", "query", true), ("scaling", "query", false)],
            request: None,
            responses: with(vec![(200, Some(b.of::<WassersteinResult>()))], errors(b, &[422, 502])),
        },
        Op {
            method: "post",
            path: "/v1/analysis/diff",
            summary: "Unique and similar concerns between two scans.",
            params: &[],
            request: Some(b.of::<DiffRequest>()),
            responses: with(vec![(200, Some(b.of::<ScanDiff>()))], errors(b, &[404, 422, 502])),
        },
    ]
}

/// The full document, as committed at `api/schema.json`.
pub fn api_schema() -> Value {
    let mut b = Builder::new();
    // JSON alternative for POST /v1/scans.
    let scan_json = b.of::<ScanRequest>();
    let ops = operations(&mut b);
    let mut paths = Map::new();
    for op in &ops {
        let mut o = Map::new();
        o.insert("summary".into(), op.summary.into());
        if !op.params.is_empty() {
            let params: Vec<Value> = op
                .params
                .iter()
                .map(|(name, loc, required)| {
                    json!({"name": name, "in": loc, "required": required, "schema": {"type": "string"}})
                })
                .collect();
            o.insert("parameters".into(), params.into());
        }
        if let Some(req) = &op.request {
            let mut c = content(req);
            if op.path == "/v1/scans" {
                c.as_object_mut()
                    .unwrap()
                    .extend(content(&scan_json).as_object().unwrap().clone());
            }
            o.insert("requestBody".into(), json!({"required": true, "content": c}));
        }
        let mut responses = Map::new();
        responses.insert(
            "401".into(),
            json!({"description": reason(401), "content": content(&b.of::<ErrorBody>())}),
        );
        for (status, body) in &op.responses {
            let mut r = Map::new();
            r.insert("description".into(), reason(*status).into());
            if let Some(body) = body {
                r.insert("content".into(), content(body));
            }
            responses.insert(status.to_string(), r.into());
        }
        o.insert("responses".into(), responses.into());
        paths
            .entry(op.path)
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .unwrap()
            .insert(op.method.into(), o.into());
    }
    let schemas = b.gen.take_definitions(true);
    json!({
        "openapi": "3.1.0",
        "info": {
            "title": "scout",
            "version": env!("CARGO_PKG_VERSION"),
            "description": "Personalized accessibility scanning service."
        },
        "components": {
            "schemas": schemas,
            "securitySchemes": {"bearer": {"type": "http", "scheme": "bearer"}}
        },
        "paths": paths
    })
}

/// Schema of the JSON body returned by `method path` with `status`.
pub fn response_schema(doc: &Value, method: &str, path: &str, status: u16) -> Option<Value> {
    doc["paths"][path][method]["responses"][status.to_string()]["content"]["application/json"]["schema"]
        .as_object()
        .map(|s| Value::Object(s.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_ref_resolves() {
        let doc = api_schema();
        let text = doc.to_string();
        let schemas = doc["components"]["schemas"].as_object().unwrap();
        for part in text.split("\"$ref\":\"#/components/schemas/").skip(1) {
            let name = &part[..part.find('"').unwrap()];
            assert!(schemas.contains_key(name), "dangling ref {name}");
        }
        assert!(schemas.contains_key("ScanRecord"));
        assert!(response_schema(&doc, "get", "/v1/scans/jobs/{job_id}", 200).is_some());
        assert!(response_schema(&doc, "post", "/v1/scans/{scan_id}/feedback", 204).is_none());
    }
}
