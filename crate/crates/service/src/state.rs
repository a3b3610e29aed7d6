//! Process-wide server state: loaded checkpoints, sessions, jobs and the
//! render queue.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use lcnerf_core::inversion_editing::EditSession;
use lcnerf_core::training::load_generator;
use lcnerf_core::{Camera, ParamStore, RadianceField, TrainConfig};
use ndarray::Array2;
use serde::Serialize;
use tokio::sync::oneshot;

use crate::error::{ApiError, ApiResult};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Directory holding checkpoint files; a checkpoint `name` resolves to
    /// `name`, `name.lcnf` or `name/checkpoint.lcnf` inside it.
    pub checkpoint_dir: PathBuf,
    /// Largest render side length accepted by the render endpoints.
    pub max_size: usize,
    /// Largest iteration budget accepted for edits.
    pub max_iterations: usize,
}

impl ServiceConfig {
    pub fn new(checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint_dir: checkpoint_dir.into(),
            max_size: 256,
            max_iterations: 5000,
        }
    }
}

/// Generator loaded from a checkpoint.
pub struct Model {
    pub name: String,
    pub config: TrainConfig,
    pub field: RadianceField,
    pub params: ParamStore<f32>,
}

pub struct SessionSlot {
    pub id: String,
    pub checkpoint: String,
    pub created: u64,
    pub session: Mutex<EditSession>,
    pub active_job: Mutex<Option<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Edit,
    Invert,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobProgress {
    pub status: JobStatus,
    pub phase: String,
    /// Iterations reported so far; never decreases.
    pub iteration: usize,
    pub total: usize,
    pub loss: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub session_id: Option<String>,
    pub error: Option<String>,
}

pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub progress: Mutex<JobProgress>,
    /// Session state at submission, for previews of edit jobs.
    pub snapshot: Option<EditSession>,
    /// Latest editing vector reported by the optimizer.
    pub preview_delta: Mutex<Option<Array2<f32>>>,
}

type Work = Box<dyn FnOnce() + Send>;

/// Single worker thread executing render requests in arrival order.
pub struct RenderQueue {
    tx: Mutex<mpsc::Sender<Work>>,
}

impl RenderQueue {
    fn start() -> Self {
        let (tx, rx) = mpsc::channel::<Work>();
        std::thread::Builder::new()
            .name("render-queue".into())
            .spawn(move || {
                for work in rx {
                    work();
                }
            })
            .expect("render thread");
        Self { tx: Mutex::new(tx) }
    }

    pub async fn run<T: Send + 'static>(&self, f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
        let (done, wait) = oneshot::channel();
        let work: Work = Box::new(move || {
            let _ = done.send(f());
        });
        self.tx
            .lock()
            .expect("queue lock")
            .send(work)
            .map_err(|_| ApiError::internal("render queue stopped"))?;
        wait.await.map_err(|_| ApiError::internal("render failed"))
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    models: Mutex<HashMap<String, Arc<Model>>>,
    pub sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    pub jobs: Mutex<HashMap<String, Arc<Job>>>,
    pub queue: RenderQueue,
    next_session: AtomicU64,
    next_job: AtomicU64,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.contains(['/', '\\']) && name != "." && name != ".."
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config,
            models: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            queue: RenderQueue::start(),
            next_session: AtomicU64::new(1),
            next_job: AtomicU64::new(1),
        }
    }

    fn resolve(&self, name: &str) -> Option<PathBuf> {
        if !valid_name(name) {
            return None;
        }
        let dir: &Path = &self.config.checkpoint_dir;
        [dir.join(name), dir.join(format!("{name}.lcnf")), dir.join(name).join("checkpoint.lcnf")]
            .into_iter()
            .find(|p| p.is_file())
    }

    /// Load (once) and return the generator of checkpoint `name`.
    pub fn model(&self, name: &str) -> ApiResult<Arc<Model>> {
        if let Some(m) = self.models.lock().expect("models lock").get(name) {
            return Ok(m.clone());
        }
        let path = self.resolve(name).ok_or_else(|| ApiError::not_found("unknown_checkpoint", "checkpoint", name))?;
        let (config, params) = load_generator(&path).map_err(|e| ApiError::internal(e.to_string()))?;
        let model = Arc::new(Model {
            name: name.to_string(),
            field: RadianceField::new(&config.model),
            config,
            params,
        });
        self.models.lock().expect("models lock").insert(name.to_string(), model.clone());
        Ok(model)
    }

    pub fn default_camera(model: &Model) -> Camera {
        Camera::from_config(0.0, 0.0, &model.config.render)
    }

    pub fn add_session(&self, checkpoint: &str, session: EditSession) -> Arc<SessionSlot> {
        let id = format!("s{}", self.next_session.fetch_add(1, Ordering::SeqCst));
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let slot = Arc::new(SessionSlot {
            id: id.clone(),
            checkpoint: checkpoint.to_string(),
            created,
            session: Mutex::new(session),
            active_job: Mutex::new(None),
        });
        self.sessions.lock().expect("sessions lock").insert(id, slot.clone());
        slot
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", "session", id))
    }

    pub fn add_job(&self, kind: JobKind, total: usize, snapshot: Option<EditSession>) -> Arc<Job> {
        let id = format!("j{}", self.next_job.fetch_add(1, Ordering::SeqCst));
        let job = Arc::new(Job {
            id: id.clone(),
            kind,
            progress: Mutex::new(JobProgress {
                status: JobStatus::Running,
                phase: "queued".into(),
                iteration: 0,
                total,
                loss: None,
                initial_loss: None,
                final_loss: None,
                session_id: None,
                error: None,
            }),
            snapshot,
            preview_delta: Mutex::new(None),
        });
        self.jobs.lock().expect("jobs lock").insert(id, job.clone());
        job
    }

    pub fn job(&self, id: &str) -> ApiResult<Arc<Job>> {
        self.jobs
            .lock()
            .expect("jobs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_job", "job", id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_names_cannot_escape_the_directory() {
        assert!(valid_name("toy"));
        assert!(!valid_name("../toy"));
        assert!(!valid_name(".."));
        assert!(!valid_name(""));
    }

    #[tokio::test]
    async fn render_queue_runs_in_order() {
        let q = RenderQueue::start();
        let log = Arc::new(Mutex::new(Vec::new()));
        let mut waits = Vec::new();
        for i in 0..5 {
            let log = log.clone();
            waits.push(q.run(move || log.lock().unwrap().push(i)));
        }
        for w in waits {
            w.await.unwrap();
        }
        assert_eq!(*log.lock().unwrap(), vec![0, 1, 2, 3, 4]);
    }
}
