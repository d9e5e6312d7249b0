//! Append-only JSON-lines store of `(digest, response)` pairs.
//!
//! Each line is `{"digest":..,"response":{..},"checksum":..}` where the
//! checksum is the SHA-256 of the digest, a newline and the response JSON.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::digest::sha256_hex;

#[derive(Serialize, Deserialize)]
struct StoreLine {
    digest: String,
    response: ChatResponse,
    checksum: String,
}

fn checksum(digest: &str, response_json: &str) -> String {
    sha256_hex(format!("{digest}\n{response_json}"))
}

pub struct ReplayStore {
    path: PathBuf,
    entries: RwLock<HashMap<String, ChatResponse>>,
    writer: Mutex<Option<File>>,
}

impl std::fmt::Debug for ReplayStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayStore")
            .field("path", &self.path)
            .field("entries", &self.len())
            .finish()
    }
}

impl ReplayStore {
    /// Opens a store read-only. A missing file is an error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let entries = read_entries(&path)?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
        })
    }

    /// Opens a store for appending, creating it if needed.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| GatewayError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let entries = if path.exists() {
            read_entries(&path)?
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<ChatResponse> {
        self.entries.read().unwrap().get(digest).cloned()
    }

    pub fn digests(&self) -> Vec<String> {
        let mut d: Vec<String> = self.entries.read().unwrap().keys().cloned().collect();
        d.sort();
        d
    }

    /// Appends an entry. The first response stored under a digest is kept.
    pub fn append(&self, digest: &str, response: &ChatResponse) -> Result<(), GatewayError> {
        let mut writer = self.writer.lock().unwrap();
        let file = writer.as_mut().ok_or_else(|| GatewayError::Io {
            path: self.path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::PermissionDenied, "store is read-only"),
        })?;
        let mut entries = self.entries.write().unwrap();
        if entries.contains_key(digest) {
            return Ok(());
        }
        let response_json = serde_json::to_string(response).expect("response serializes");
        let line = StoreLine {
            digest: digest.to_string(),
            response: response.clone(),
            checksum: checksum(digest, &response_json),
        };
        let mut text = serde_json::to_string(&line).expect("line serializes");
        text.push('\n');
        file.write_all(text.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| GatewayError::Io {
                path: self.path.display().to_string(),
                source,
            })?;
        entries.insert(digest.to_string(), response.clone());
        Ok(())
    }
}

fn read_entries(path: &Path) -> Result<HashMap<String, ChatResponse>, GatewayError> {
    let file = File::open(path).map_err(|source| GatewayError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let corrupt = |line: usize, reason: String| GatewayError::StoreCorrupt {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut entries = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| corrupt(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StoreLine =
            serde_json::from_str(&line).map_err(|e| corrupt(i + 1, e.to_string()))?;
        let response_json = serde_json::to_string(&parsed.response).expect("response serializes");
        if checksum(&parsed.digest, &response_json) != parsed.checksum {
            return Err(corrupt(i + 1, "checksum mismatch".into()));
        }
        entries.entry(parsed.digest).or_insert(parsed.response);
    }
    Ok(entries)
}

/// Serves responses only from a store; unknown digests are fatal.
#[derive(Debug)]
pub struct ReplayBackend {
    store: ReplayStore,
}

impl ReplayBackend {
    pub fn new(store: ReplayStore) -> Self {
        Self { store }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(Self::new(ReplayStore::load(path)?))
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> String {
        format!("replay:{}", self.store.path().display())
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let digest = request.digest();
        self.store
            .get(&digest)
            .ok_or(GatewayError::ReplayMiss(digest))
    }
}

/// Tees every live response into a store and serves cached digests without
/// calling the inner backend, so interrupted runs resume where they stopped.
pub struct Recorder<B> {
    inner: B,
    store: ReplayStore,
    live_calls: AtomicUsize,
}

impl<B: ChatBackend> Recorder<B> {
    pub fn new(inner: B, store: ReplayStore) -> Self {
        Self {
            inner,
            store,
            live_calls: AtomicUsize::new(0),
        }
    }

    /// Calls that reached the inner backend.
    pub fn live_calls(&self) -> usize {
        self.live_calls.load(Ordering::SeqCst)
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let digest = request.digest();
        if let Some(hit) = self.store.get(&digest) {
            return Ok(hit);
        }
        self.live_calls.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(request)?;
        self.store.append(&digest, &response)?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::RequestParams;
    use crate::prompt::{Message, MessageSequence, Role};
    use crate::testing::ScriptedBackend;

    fn request(model: &str, text: &str) -> ChatRequest {
        let seq = MessageSequence::new(vec![Message::new(Role::User, text)]).unwrap();
        ChatRequest::new(seq, &RequestParams::new(model), 0)
    }

    #[test]
    fn record_then_replay_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let live = ScriptedBackend::new("live").with_reply(|r| {
            format!("echo {} True", r.messages.messages()[0].content.len())
        });
        let rec = Recorder::new(&live, ReplayStore::open(&path).unwrap());
        let a = rec.complete(&request("m", "q1")).unwrap();
        let b = rec.complete(&request("m", "q2")).unwrap();
        // cached
        rec.complete(&request("m", "q1")).unwrap();
        assert_eq!(rec.live_calls(), 2);
        drop(rec);

        let replay = ReplayBackend::load(&path).unwrap();
        assert_eq!(replay.complete(&request("m", "q1")).unwrap(), a);
        assert_eq!(replay.complete(&request("m", "q2")).unwrap(), b);
        assert!(matches!(
            replay.complete(&request("m", "q3")),
            Err(GatewayError::ReplayMiss(_))
        ));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let store = ReplayStore::open(&path).unwrap();
        let live = ScriptedBackend::new("live");
        let resp = live.complete(&request("m", "q")).unwrap();
        store.append("abc", &resp).unwrap();
        drop(store);

        let text = std::fs::read_to_string(&path).unwrap();
        // flip one character of the checksum
        let pos = text.find("\"checksum\":\"").unwrap() + 12;
        let mut bytes = text.into_bytes();
        bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ReplayStore::load(&path),
            Err(GatewayError::StoreCorrupt { line: 1, .. })
        ));

        // and one character of the response text
        let store = ReplayStore::open(dir.path().join("b.jsonl")).unwrap();
        store.append("abc", &resp).unwrap();
        drop(store);
        let text = std::fs::read_to_string(dir.path().join("b.jsonl")).unwrap();
        std::fs::write(dir.path().join("b.jsonl"), text.replace("True", "Trve")).unwrap();
        assert!(ReplayStore::load(dir.path().join("b.jsonl")).is_err());
    }

    #[test]
    fn stores_from_two_models_stay_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let live_a = ScriptedBackend::new("a").with_reply(|_| "True".into());
        let live_b = ScriptedBackend::new("b").with_reply(|_| "False".into());
        let rec_a = Recorder::new(&live_a, ReplayStore::open(dir.path().join("a.jsonl")).unwrap());
        let rec_b = Recorder::new(&live_b, ReplayStore::open(dir.path().join("b.jsonl")).unwrap());
        rec_a.complete(&request("model-a", "same prompt")).unwrap();
        rec_b.complete(&request("model-b", "same prompt")).unwrap();
        let da = rec_a.store().digests();
        let db = rec_b.store().digests();
        assert_eq!(da.len(), 1);
        assert_eq!(db.len(), 1);
        assert_ne!(da, db);

        let replay_a = ReplayBackend::load(dir.path().join("a.jsonl")).unwrap();
        assert!(replay_a.complete(&request("model-b", "same prompt")).is_err());
        assert_eq!(replay_a.complete(&request("model-a", "same prompt")).unwrap().text, "True");
    }

    #[test]
    fn read_only_store_rejects_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "").unwrap();
        let store = ReplayStore::load(&path).unwrap();
        let resp = ScriptedBackend::new("x").complete(&request("m", "q")).unwrap();
        assert!(store.append("d", &resp).is_err());
    }
}
