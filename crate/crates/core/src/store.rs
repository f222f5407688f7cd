//! Plain-file persistence for images, user models, scans, feedback and
//! review verdicts.
//!
//! ```text
//! root/
//!   blobs/{sha256}                 image bytes, content-addressed
//!   models/{id}/v{N}.json          immutable snapshots
//!   models/{id}/events.jsonl       one line per stored version
//!   scans/{id}.json
//!   scans/index.jsonl              scan ids in write order
//!   feedback/{scan_id}.jsonl
//!   verdicts/{scan_id}.jsonl
//! ```
//!
//! Documents are written to a temporary file and renamed into place, so a
//! snapshot is either complete or absent. Logs are only appended to, one
//! whole line per write. Writers on the same key are serialized.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ReviewVerdict;
use crate::digest::{is_digest, sha256_hex};
use crate::domain::{canonical_json_bytes, canonicalize, Concern, ConcernOrigin, ElicitationEvent, Feedback, ScanRecord, ScanStatus, UserModel};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("model {id} already has a different version {version}")]
    VersionConflict { id: String, version: u64 },
    #[error("scan {0} already exists with different content")]
    ScanConflict(String),
    #[error("scan {scan_id} has no concern {concern_id}")]
    UnknownConcern { scan_id: String, concern_id: String },
    #[error("concern {concern_id} of scan {scan_id} already has a verdict")]
    DuplicateVerdict { scan_id: String, concern_id: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("corrupt store entry {path}: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

/// Called with the destination of every write; returning true makes the
/// write fail before it becomes visible.
pub type FaultHook = Arc<dyn Fn(&Path) -> bool + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub id: String,
    pub version: u64,
    pub digest: String,
}

/// One line of a model's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct StoredVersion {
    pub version: u64,
    pub digest: String,
    #[serde(default)]
    pub event: Option<ElicitationEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ScanIndexEntry {
    id: String,
    model_id: String,
    env_digest: String,
    status: ScanStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanFilter {
    pub model_id: Option<String>,
    pub env_digest: Option<String>,
    pub status: Option<ScanStatus>,
}

impl ScanFilter {
    fn accepts(&self, scan: &ScanRecord) -> bool {
        self.model_id.as_ref().is_none_or(|m| &scan.model_id == m)
            && self.env_digest.as_ref().is_none_or(|d| &scan.env.digest == d)
            && self.status.is_none_or(|s| scan.status == s)
    }
}

#[derive(Clone)]
pub struct FileStore {
    root: PathBuf,
    locks: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
    fault: Arc<Mutex<Option<FaultHook>>>,
}

impl std::fmt::Debug for FileStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileStore").field("root", &self.root).finish()
    }
}

/// Ids become path components, so only a conservative alphabet is allowed.
pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::Invalid(format!("invalid id {id:?}")))
    }
}

fn jsonl_line<T: Serialize>(value: &T) -> Vec<u8> {
    let v = canonicalize(serde_json::to_value(value).expect("store records serialize"));
    let mut line = serde_json::to_vec(&v).expect("json values serialize");
    line.push(b'\n');
    line
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for d in ["blobs", "models", "scans", "feedback", "verdicts"] {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Self {
            root,
            locks: Arc::new(Mutex::new(HashMap::new())),
            fault: Arc::new(Mutex::new(None)),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_fault_hook(&self, hook: Option<FaultHook>) {
        *self.fault.lock().expect("fault hook lock") = hook;
    }

    fn key_lock(&self, key: String) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table");
        locks.entry(key).or_default().clone()
    }

    fn injected(&self, path: &Path) -> Result<(), StoreError> {
        let hook = self.fault.lock().expect("fault hook lock").clone();
        match hook {
            Some(h) if h(path) => Err(StoreError::Io(format!("injected write failure at {}", path.display()))),
            _ => Ok(()),
        }
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().expect("store paths have parents");
        fs::create_dir_all(dir)?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("doc");
        let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        if let Err(e) = self.injected(path) {
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    fn append(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        self.injected(path)?;
        fs::create_dir_all(path.parent().expect("store paths have parents"))?;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(bytes)?;
        f.sync_data()?;
        Ok(())
    }

    fn read_opt(path: &Path) -> Result<Option<Vec<u8>>, StoreError> {
        match fs::read(path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn parse<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T, StoreError> {
        serde_json::from_slice(bytes).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
        let Some(bytes) = Self::read_opt(path)? else {
            return Ok(Vec::new());
        };
        bytes
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| Self::parse(path, l))
            .collect()
    }

    // Blobs

    fn blob_path(&self, digest: &str) -> PathBuf {
        self.root.join("blobs").join(digest)
    }

    /// Stores `bytes` once under their digest.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let digest = sha256_hex(bytes);
        let path = self.blob_path(&digest);
        let lock = self.key_lock(format!("blob/{digest}"));
        let _g = lock.lock().expect("blob lock");
        if !path.exists() {
            self.write_atomic(&path, bytes)?;
        }
        Ok(digest)
    }

    /// Reads a blob and checks its digest.
    pub fn get_blob(&self, digest: &str) -> Result<Vec<u8>, StoreError> {
        if !is_digest(digest) {
            return Err(StoreError::Invalid(format!("not a digest: {digest:?}")));
        }
        let path = self.blob_path(digest);
        let bytes = Self::read_opt(&path)?.ok_or_else(|| StoreError::NotFound(format!("blob {digest}")))?;
        let actual = sha256_hex(&bytes);
        if actual != digest {
            return Err(StoreError::Corrupt {
                path: path.display().to_string(),
                detail: format!("content digest {actual}"),
            });
        }
        Ok(bytes)
    }

    pub fn has_blob(&self, digest: &str) -> bool {
        is_digest(digest) && self.blob_path(digest).exists()
    }

    // Models

    fn model_dir(&self, id: &str) -> PathBuf {
        self.root.join("models").join(id)
    }

    /// Writes the snapshot for `model.version`. Rewriting identical content
    /// succeeds without a new event; different content is a conflict.
    pub fn put_model(&self, model: &UserModel) -> Result<ModelRef, StoreError> {
        check_id(&model.id)?;
        model.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
        let bytes = canonical_json_bytes(model).expect("models serialize");
        let digest = sha256_hex(&bytes);
        let dir = self.model_dir(&model.id);
        let path = dir.join(format!("v{}.json", model.version));
        let events = dir.join("events.jsonl");
        let lock = self.key_lock(format!("model/{}", model.id));
        let _g = lock.lock().expect("model lock");
        match Self::read_opt(&path)? {
            Some(existing) if existing != bytes => {
                return Err(StoreError::VersionConflict {
                    id: model.id.clone(),
                    version: model.version,
                })
            }
            Some(_) => {}
            None => self.write_atomic(&path, &bytes)?,
        }
        let logged: Vec<StoredVersion> = Self::read_jsonl(&events)?;
        if !logged.iter().any(|e| e.version == model.version) {
            let entry = StoredVersion {
                version: model.version,
                digest: digest.clone(),
                event: model.history.last().cloned(),
            };
            self.append(&events, &jsonl_line(&entry))?;
        }
        Ok(ModelRef {
            id: model.id.clone(),
            version: model.version,
            digest,
        })
    }

    /// Stored snapshot versions, ascending.
    pub fn model_versions(&self, id: &str) -> Result<Vec<u64>, StoreError> {
        check_id(id)?;
        let dir = self.model_dir(id);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(StoreError::NotFound(format!("model {id}"))),
            Err(e) => return Err(e.into()),
        };
        let mut versions = Vec::new();
        for e in entries {
            let name = e?.file_name();
            let name = name.to_string_lossy();
            if let Some(v) = name.strip_prefix('v').and_then(|r| r.strip_suffix(".json")) {
                if let Ok(v) = v.parse::<u64>() {
                    versions.push(v);
                }
            }
        }
        if versions.is_empty() {
            return Err(StoreError::NotFound(format!("model {id}")));
        }
        versions.sort_unstable();
        Ok(versions)
    }

    /// Snapshot at `version`, or the latest.
    pub fn get_model(&self, id: &str, version: Option<u64>) -> Result<UserModel, StoreError> {
        let version = match version {
            Some(v) => {
                check_id(id)?;
                v
            }
            None => *self.model_versions(id)?.last().expect("non-empty"),
        };
        let path = self.model_dir(id).join(format!("v{version}.json"));
        let bytes =
            Self::read_opt(&path)?.ok_or_else(|| StoreError::NotFound(format!("model {id} version {version}")))?;
        Self::parse(&path, &bytes)
    }

    pub fn model_history(&self, id: &str) -> Result<Vec<StoredVersion>, StoreError> {
        self.model_versions(id)?;
        Self::read_jsonl(&self.model_dir(id).join("events.jsonl"))
    }

    pub fn list_models(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join("models"))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    // Scans

    fn scan_path(&self, id: &str) -> PathBuf {
        self.root.join("scans").join(format!("{id}.json"))
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("scans").join("index.jsonl")
    }

    /// Writes a new scan record; identical rewrites succeed.
    pub fn put_scan(&self, scan: &ScanRecord) -> Result<(), StoreError> {
        check_id(&scan.id)?;
        scan.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
        let bytes = canonical_json_bytes(scan).expect("scans serialize");
        let path = self.scan_path(&scan.id);
        let lock = self.key_lock(format!("scan/{}", scan.id));
        let _g = lock.lock().expect("scan lock");
        match Self::read_opt(&path)? {
            Some(existing) if existing != bytes => Err(StoreError::ScanConflict(scan.id.clone())),
            Some(_) => Ok(()),
            None => {
                self.write_atomic(&path, &bytes)?;
                let entry = ScanIndexEntry {
                    id: scan.id.clone(),
                    model_id: scan.model_id.clone(),
                    env_digest: scan.env.digest.clone(),
                    status: scan.status,
                };
                let index_lock = self.key_lock("scan-index".into());
                let _ig = index_lock.lock().expect("index lock");
                self.append(&self.index_path(), &jsonl_line(&entry))
            }
        }
    }

    pub fn has_scan(&self, id: &str) -> bool {
        check_id(id).is_ok() && self.scan_path(id).exists()
    }

    pub fn get_scan(&self, id: &str) -> Result<ScanRecord, StoreError> {
        check_id(id)?;
        let path = self.scan_path(id);
        let bytes = Self::read_opt(&path)?.ok_or_else(|| StoreError::NotFound(format!("scan {id}")))?;
        Self::parse(&path, &bytes)
    }

    /// Scans matching `filter`, in write order.
    pub fn list_scans(&self, filter: &ScanFilter) -> Result<Vec<ScanRecord>, StoreError> {
        let index: Vec<ScanIndexEntry> = Self::read_jsonl(&self.index_path())?;
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in index {
            if !seen.insert(e.id.clone()) || !self.scan_path(&e.id).exists() {
                continue;
            }
            let scan = self.get_scan(&e.id)?;
            if filter.accepts(&scan) {
                out.push(scan);
            }
        }
        Ok(out)
    }

    /// Appends a user-added concern to a stored scan. Its id is `u{n}` with
    /// `n` one past the number of user-added concerns already present.
    pub fn add_user_concern(&self, scan_id: &str, name: &str, reason: &str) -> Result<Concern, StoreError> {
        check_id(scan_id)?;
        let lock = self.key_lock(format!("scan/{scan_id}"));
        let _g = lock.lock().expect("scan lock");
        let mut scan = self.get_scan(scan_id)?;
        let mut n = scan.concerns.iter().filter(|c| c.origin == ConcernOrigin::UserAdded).count() + 1;
        while scan.concern(&format!("u{n}")).is_some() {
            n += 1;
        }
        let concern = Concern::user_added(format!("u{n}"), name, reason);
        scan.concerns.push(concern.clone());
        scan.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
        self.write_atomic(&self.scan_path(scan_id), &canonical_json_bytes(&scan).expect("scans serialize"))?;
        Ok(concern)
    }

    // Feedback and verdicts

    pub fn append_feedback(&self, scan_id: &str, feedback: &[Feedback]) -> Result<(), StoreError> {
        let scan = self.get_scan(scan_id)?;
        for f in feedback {
            if scan.concern(&f.concern_id).is_none() {
                return Err(StoreError::UnknownConcern {
                    scan_id: scan_id.into(),
                    concern_id: f.concern_id.clone(),
                });
            }
        }
        let bytes: Vec<u8> = feedback.iter().flat_map(jsonl_line).collect();
        if bytes.is_empty() {
            return Ok(());
        }
        let lock = self.key_lock(format!("feedback/{scan_id}"));
        let _g = lock.lock().expect("feedback lock");
        self.append(&self.root.join("feedback").join(format!("{scan_id}.jsonl")), &bytes)
    }

    pub fn feedback(&self, scan_id: &str) -> Result<Vec<Feedback>, StoreError> {
        check_id(scan_id)?;
        Self::read_jsonl(&self.root.join("feedback").join(format!("{scan_id}.jsonl")))
    }

    /// Appends verdicts for concerns of `scan_id`; a concern reviewed before,
    /// or twice in one call, is rejected.
    pub fn append_verdicts(&self, scan_id: &str, verdicts: &[ReviewVerdict]) -> Result<(), StoreError> {
        let scan = self.get_scan(scan_id)?;
        let lock = self.key_lock(format!("verdicts/{scan_id}"));
        let _g = lock.lock().expect("verdict lock");
        let mut reviewed: BTreeSet<String> = self.verdicts(scan_id)?.into_iter().map(|v| v.concern_id).collect();
        for v in verdicts {
            if v.scan_id != scan_id || scan.concern(&v.concern_id).is_none() {
                return Err(StoreError::UnknownConcern {
                    scan_id: v.scan_id.clone(),
                    concern_id: v.concern_id.clone(),
                });
            }
            if !reviewed.insert(v.concern_id.clone()) {
                return Err(StoreError::DuplicateVerdict {
                    scan_id: scan_id.into(),
                    concern_id: v.concern_id.clone(),
                });
            }
        }
        let bytes: Vec<u8> = verdicts.iter().flat_map(jsonl_line).collect();
        if bytes.is_empty() {
            return Ok(());
        }
        self.append(&self.root.join("verdicts").join(format!("{scan_id}.jsonl")), &bytes)
    }

    pub fn verdicts(&self, scan_id: &str) -> Result<Vec<ReviewVerdict>, StoreError> {
        check_id(scan_id)?;
        Self::read_jsonl(&self.root.join("verdicts").join(format!("{scan_id}.jsonl")))
    }

    /// Every stored verdict, grouped by scan id in lexicographic order.
    pub fn all_verdicts(&self) -> Result<Vec<ReviewVerdict>, StoreError> {
        let mut files: Vec<PathBuf> = fs::read_dir(self.root.join("verdicts"))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(Self::read_jsonl::<ReviewVerdict>(&f)?);
        }
        Ok(out)
    }
}
