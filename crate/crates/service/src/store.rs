//! Session registry and on-disk persistence.
//!
//! Layout under the data directory:
//!
//! ```text
//! sessions/<id>/session.json      immutable configuration
//! sessions/<id>/events.jsonl      interpretation log
//! sessions/<id>/adjustments.jsonl s* extensions
//! ```
//!
//! Writes to one session are serialized by its mutex; readers take the
//! current `Arc<Session>` snapshot and never block on writers.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use kcut_core::audit::{parse_interpretation_log, render_interpretation_log};
use kcut_core::distributions::CutRecordSet;

use crate::error::{ApiError, ApiResult};
use crate::session::{
    parse_extension_log, parse_session_request, DrawRequest, DrawResponse, ExtensionRequest, ExtensionResponse,
    Session, SessionConfig, SessionView,
};

const CONFIG_FILE: &str = "session.json";
const EVENTS_FILE: &str = "events.jsonl";
const ADJUSTMENTS_FILE: &str = "adjustments.jsonl";

struct Slot {
    writer: tokio::sync::Mutex<()>,
    current: RwLock<Arc<Session>>,
}

impl Slot {
    fn new(session: Session) -> Self {
        Self { writer: tokio::sync::Mutex::new(()), current: RwLock::new(Arc::new(session)) }
    }

    fn snapshot(&self) -> Arc<Session> {
        self.current.read().expect("snapshot lock").clone()
    }

    fn publish(&self, session: Session) {
        *self.current.write().expect("snapshot lock") = Arc::new(session);
    }
}

pub struct SessionStore {
    root: PathBuf,
    records: Arc<CutRecordSet>,
    sessions: RwLock<BTreeMap<String, Arc<Slot>>>,
    counter: AtomicU64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub version: u64,
    pub status: kcut_core::audit::AuditStatus,
    pub s: u64,
    pub s_star: u64,
    pub created_at: String,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl SessionStore {
    /// Open the data directory and replay every stored session.
    pub fn open(data_dir: impl AsRef<Path>, records: CutRecordSet) -> ApiResult<Self> {
        let root = data_dir.as_ref().join("sessions");
        fs::create_dir_all(&root)?;
        let mut sessions = BTreeMap::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(CONFIG_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let session = load(&dir).map_err(|e| {
                ApiError::internal(format!("cannot replay {}: {}", dir.display(), e.message))
            })?;
            sessions.insert(session.config.session_id.clone(), Arc::new(Slot::new(session)));
        }
        tracing::info!(count = sessions.len(), root = %root.display(), "sessions replayed");
        Ok(Self { root, records: Arc::new(records), sessions: RwLock::new(sessions), counter: AtomicU64::new(0) })
    }

    pub fn records(&self) -> &CutRecordSet {
        &self.records
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn get(&self, id: &str) -> ApiResult<Arc<Session>> {
        Ok(self.slot(id)?.snapshot())
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        let slots: Vec<Arc<Slot>> = self.sessions.read().expect("registry lock").values().cloned().collect();
        slots
            .iter()
            .map(|slot| {
                let s = slot.snapshot();
                SessionSummary {
                    session_id: s.config.session_id.clone(),
                    version: s.version(),
                    status: s.state.status,
                    s: s.state.draws(),
                    s_star: s.s_star(),
                    created_at: s.config.created_at.clone(),
                }
            })
            .collect()
    }

    fn fresh_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        format!("{:x}-{n}", chrono::Utc::now().timestamp_millis())
    }

    pub async fn create(self: &Arc<Self>, body: &[u8]) -> ApiResult<SessionView> {
        let req = parse_session_request(body)?;
        let id = match &req.session_id {
            Some(id) => id.clone(),
            None => self.fresh_id(),
        };
        if self.sessions.read().expect("registry lock").contains_key(&id) {
            return Err(ApiError::conflict("session-exists", format!("session {id:?} already exists")));
        }
        let store = self.clone();
        let created_at = now_rfc3339();
        let session = tokio::task::spawn_blocking(move || {
            let config = SessionConfig::create(req, id, created_at, &store.records)?;
            Session::new(config)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;

        let id = session.config.session_id.clone();
        let mut registry = self.sessions.write().expect("registry lock");
        if registry.contains_key(&id) {
            return Err(ApiError::conflict("session-exists", format!("session {id:?} already exists")));
        }
        let dir = self.root.join(&id);
        fs::create_dir(&dir)?;
        write_atomic(&dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(&*session.config).expect("serializes"))?;
        File::create(dir.join(EVENTS_FILE))?.sync_all()?;
        File::create(dir.join(ADJUSTMENTS_FILE))?.sync_all()?;
        let view = session.view();
        registry.insert(id, Arc::new(Slot::new(session)));
        Ok(view)
    }

    pub async fn record_draw(&self, id: &str, req: DrawRequest) -> ApiResult<DrawResponse> {
        let slot = self.slot(id)?;
        let _guard = slot.writer.lock().await;
        let current = slot.snapshot();
        let (record, next) = current.record_draw(req, now_rfc3339())?;
        append_line(&self.root.join(id).join(EVENTS_FILE), &render_interpretation_log(std::slice::from_ref(&record)))?;
        let response = next.draw_response();
        slot.publish(next);
        Ok(response)
    }

    pub async fn extend(&self, id: &str, req: ExtensionRequest) -> ApiResult<ExtensionResponse> {
        let slot = self.slot(id)?;
        let _guard = slot.writer.lock().await;
        let current = slot.snapshot();
        let (record, next) = tokio::task::spawn_blocking(move || current.extend(&req, now_rfc3339()))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        let mut line = serde_json::to_string(&record).expect("serializes");
        line.push('\n');
        append_line(&self.root.join(id).join(ADJUSTMENTS_FILE), &line)?;
        let response = ExtensionResponse {
            version: next.version(),
            d: record.d,
            s: record.s,
            s_star: record.s_star,
            unlikely_to_complete: record.unlikely_to_complete,
            completed_fraction: record.completed_fraction,
        };
        slot.publish(next);
        Ok(response)
    }

    /// The raw interpretation log of a session.
    pub fn events(&self, id: &str) -> ApiResult<String> {
        Ok(render_interpretation_log(&self.get(id)?.events))
    }
}

fn load(dir: &Path) -> ApiResult<Session> {
    let config: SessionConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)
        .map_err(|e| ApiError::internal(format!("session.json: {e}")))?;
    let events = parse_interpretation_log(&read_optional(&dir.join(EVENTS_FILE))?)?;
    let extensions = parse_extension_log(&read_optional(&dir.join(ADJUSTMENTS_FILE))?)
        .map_err(|e| ApiError::internal(format!("adjustments.jsonl {e}")))?;
    Session::replay(Arc::new(config), events, extensions)
}

fn read_optional(path: &Path) -> std::io::Result<String> {
    match fs::read_to_string(path) {
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
        other => other,
    }
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}
