use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use scopilot_core::orchestrator::SessionState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session store {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt session file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("session {0} already exists")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSession {
    #[serde(flatten)]
    pub state: SessionState,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
    #[serde(default)]
    pub owner: String,
}

impl ApiSession {
    pub fn new(state: SessionState, owner: impl Into<String>) -> Self {
        let now = now_ms();
        Self { state, created_at: now, updated_at: now, owner: owner.into() }
    }

    pub fn touch(&mut self) {
        self.updated_at = now_ms().max(self.created_at).max(self.updated_at);
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Failure injected into the next session write, for crash-safety tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteFault {
    /// Stop halfway through writing the temporary file.
    TruncatedTemp,
    /// Write the temporary file fully but never rename it into place.
    BeforeRename,
}

pub struct Slot {
    session: Mutex<ApiSession>,
    busy: AtomicBool,
}

impl Slot {
    pub fn snapshot(&self) -> ApiSession {
        self.session.lock().expect("session lock").clone()
    }

    /// Claims the single writer role; `None` while another holder is active.
    pub fn try_begin(self: &Arc<Self>) -> Option<WriteGuard> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| WriteGuard { slot: self.clone() })
    }
}

pub struct WriteGuard {
    slot: Arc<Slot>,
}

impl WriteGuard {
    pub fn snapshot(&self) -> ApiSession {
        self.slot.snapshot()
    }
}

impl Drop for WriteGuard {
    fn drop(&mut self) {
        self.slot.busy.store(false, Ordering::Release);
    }
}

/// One JSON file per session under a directory, mirrored in memory.
pub struct SessionStore {
    dir: PathBuf,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
    fault: Mutex<Option<WriteFault>>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

impl SessionStore {
    /// Loads every session file, removing temporaries a crash left behind.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut slots = HashMap::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name.starts_with('.') && name.contains(".tmp") {
                fs::remove_file(&path).map_err(io_err(&path))?;
                continue;
            }
            if !name.ends_with(".json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let s: ApiSession = serde_json::from_str(&text)
                .map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })?;
            slots.insert(
                s.state.session_id.clone(),
                Arc::new(Slot { session: Mutex::new(s), busy: AtomicBool::new(false) }),
            );
        }
        Ok(Self { dir: dir.to_path_buf(), slots: Mutex::new(slots), fault: Mutex::new(None) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<Arc<Slot>> {
        self.slots.lock().expect("store lock").get(id).cloned()
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Makes the next write fail at the given point.
    pub fn inject_fault(&self, fault: Option<WriteFault>) {
        *self.fault.lock().expect("fault lock") = fault;
    }

    /// Persists a new session, then makes it visible.
    pub fn create(&self, session: ApiSession) -> Result<(), StoreError> {
        let id = session.state.session_id.clone();
        let mut slots = self.slots.lock().expect("store lock");
        if slots.contains_key(&id) {
            return Err(StoreError::Duplicate(id));
        }
        self.write(&session)?;
        slots.insert(id, Arc::new(Slot { session: Mutex::new(session), busy: AtomicBool::new(false) }));
        Ok(())
    }

    /// Persists `next` and swaps it in. On failure memory and disk both keep
    /// the previous state.
    pub fn commit(&self, guard: &WriteGuard, mut next: ApiSession) -> Result<ApiSession, StoreError> {
        next.touch();
        self.write(&next)?;
        *guard.slot.session.lock().expect("session lock") = next.clone();
        Ok(next)
    }

    fn write(&self, s: &ApiSession) -> Result<(), StoreError> {
        let path = self.path_of(&s.state.session_id);
        let bytes = serde_json::to_vec_pretty(s).expect("plain data");
        let fault = self.fault.lock().expect("fault lock").take();
        write_atomic(&path, &bytes, fault).map_err(io_err(&path))
    }
}

fn write_atomic(path: &Path, bytes: &[u8], fault: Option<WriteFault>) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("session");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp)?;
    if fault == Some(WriteFault::TruncatedTemp) {
        f.write_all(&bytes[..bytes.len() / 2])?;
        return Err(io::Error::other("injected fault: write interrupted"));
    }
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    if fault == Some(WriteFault::BeforeRename) {
        return Err(io::Error::other("injected fault: crashed before rename"));
    }
    fs::rename(&tmp, path)
}
