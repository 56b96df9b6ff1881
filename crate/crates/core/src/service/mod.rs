//! HTTP edit service: clients upload an adapter and a concept bundle, the
//! edit runs on a worker pool against a pre-loaded base model, and the edited
//! adapter and report are downloaded afterwards.
//!
//! Jobs live in a spool directory (one subdirectory per job with a
//! `state.json`), so a restarted service picks up where it stopped: jobs that
//! were queued or running are queued again.

mod job;
mod routes;

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::Duration;

use chrono::Utc;
use tokio::sync::{mpsc, oneshot, Mutex};

use crate::adapter::BaseWeights;
use crate::error::{Error, Result};

pub use job::{ArtifactKind, Artifact, EditJob, JobFailure, JobRequest, JobState, Spool};
pub use routes::{router, ApiError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub spool_dir: PathBuf,
    /// Registered base models by name.
    pub bases: BTreeMap<String, PathBuf>,
    /// Concurrent edit jobs.
    pub workers: usize,
    /// Jobs waiting beyond this are refused with 503.
    pub queue_depth: usize,
    /// Finished jobs older than this are deleted.
    pub ttl: Duration,
    pub reap_interval: Duration,
    /// Request body limit; larger uploads get 413.
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            spool_dir: PathBuf::from("spool"),
            bases: BTreeMap::new(),
            workers: 1,
            queue_depth: 64,
            ttl: Duration::from_secs(24 * 3600),
            reap_interval: Duration::from_secs(60),
            max_upload_bytes: 512 * 1024 * 1024,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid_config("workers", "must be at least 1"));
        }
        if self.queue_depth == 0 {
            return Err(Error::invalid_config("queue_depth", "must be at least 1"));
        }
        if self.ttl.is_zero() {
            return Err(Error::invalid_config("ttl", "must be positive"));
        }
        Ok(())
    }
}

struct Inner {
    config: ServiceConfig,
    spool: Spool,
    bases: BTreeMap<String, Arc<BaseWeights>>,
    jobs: RwLock<BTreeMap<String, Arc<EditJob>>>,
    queue: mpsc::Sender<String>,
}

/// Handle to a started service; cheap to clone.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

impl Service {
    /// Loads the base models, recovers the spool and starts the workers and
    /// the reaper. Must be called inside a Tokio runtime.
    pub fn start(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let spool = Spool::open(&config.spool_dir)?;
        let mut bases = BTreeMap::new();
        for (name, path) in &config.bases {
            log::info!("loading base `{name}` from {}", path.display());
            bases.insert(name.clone(), Arc::new(BaseWeights::load(path)?));
        }

        let mut recovered = Vec::new();
        let mut jobs = BTreeMap::new();
        for mut job in spool.load_all()? {
            if !job.state.is_terminal() {
                job.state = JobState::Queued;
                job.started_at = None;
                spool.save_state(&job)?;
                recovered.push(job.job_id.clone());
            }
            jobs.insert(job.job_id.clone(), Arc::new(job));
        }

        let (tx, rx) = mpsc::channel(config.queue_depth);
        let service = Self {
            inner: Arc::new(Inner {
                config,
                spool,
                bases,
                jobs: RwLock::new(jobs),
                queue: tx,
            }),
        };

        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..service.inner.config.workers {
            tokio::spawn(service.clone().worker(rx.clone()));
        }
        if !recovered.is_empty() {
            log::info!("re-queueing {} unfinished jobs", recovered.len());
            let queue = service.inner.queue.clone();
            tokio::spawn(async move {
                for id in recovered {
                    if queue.send(id).await.is_err() {
                        break;
                    }
                }
            });
        }
        let reaper = service.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(reaper.inner.config.reap_interval);
            loop {
                tick.tick().await;
                let svc = reaper.clone();
                let _ = tokio::task::spawn_blocking(move || svc.reap_expired(Utc::now())).await;
            }
        });
        Ok(service)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn base_names(&self) -> Vec<String> {
        self.inner.bases.keys().cloned().collect()
    }

    /// Snapshot of a job's current state.
    pub fn job(&self, id: &str) -> Option<Arc<EditJob>> {
        self.inner.jobs.read().expect("job table lock").get(id).cloned()
    }

    pub fn jobs(&self) -> Vec<Arc<EditJob>> {
        self.inner.jobs.read().expect("job table lock").values().cloned().collect()
    }

    fn spool(&self) -> &Spool {
        &self.inner.spool
    }

    /// Persists `job` and publishes it.
    fn publish(&self, job: EditJob) -> Result<Arc<EditJob>> {
        self.spool().save_state(&job)?;
        let job = Arc::new(job);
        self.inner
            .jobs
            .write()
            .expect("job table lock")
            .insert(job.job_id.clone(), job.clone());
        Ok(job)
    }

    async fn worker(self, rx: Arc<Mutex<mpsc::Receiver<String>>>) {
        loop {
            let Some(id) = rx.lock().await.recv().await else { break };
            let svc = self.clone();
            let result = tokio::task::spawn_blocking(move || svc.run_job(&id)).await;
            if let Err(e) = result {
                log::error!("edit worker panicked: {e}");
            }
        }
    }

    fn run_job(&self, id: &str) {
        let Some(job) = self.job(id) else { return };
        if job.state != JobState::Queued {
            return;
        }
        let mut running = (*job).clone();
        running.state = JobState::Running;
        running.started_at = Some(Utc::now());
        if let Err(e) = self.publish(running.clone()) {
            log::error!("job {id}: cannot record running state: {e}");
            return;
        }

        let result = match self.inner.bases.get(&running.base) {
            Some(base) => self.spool().execute(&running, base),
            None => Err(Error::invalid_config("base", format!("unknown base model `{}`", running.base))),
        };
        let mut done = running;
        done.completed_at = Some(Utc::now());
        match result {
            Ok(artifacts) => {
                done.state = JobState::Succeeded;
                done.artifacts = Some(artifacts);
                log::info!("job {id} succeeded");
            }
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                done.state = JobState::Failed;
                done.failure = Some(JobFailure::from(&e));
            }
        }
        if let Err(e) = self.publish(done) {
            log::error!("job {id}: cannot record final state: {e}");
        }
    }

    /// Deletes finished jobs whose completion is older than the TTL; returns
    /// their ids.
    pub fn reap_expired(&self, now: chrono::DateTime<Utc>) -> Vec<String> {
        let ttl = chrono::Duration::from_std(self.inner.config.ttl).unwrap_or(chrono::Duration::MAX);
        let expired: Vec<String> = self
            .jobs()
            .into_iter()
            .filter(|j| j.state.is_terminal() && j.completed_at.is_some_and(|t| now - t >= ttl))
            .map(|j| j.job_id.clone())
            .collect();
        for id in &expired {
            if let Err(e) = self.spool().remove(id) {
                log::warn!("cannot remove expired job {id}: {e}");
                continue;
            }
            self.inner.jobs.write().expect("job table lock").remove(id);
        }
        expired
    }
}

/// Binds `config.bind` and serves until `shutdown` resolves.
pub async fn serve(config: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    let service = Service::start(config)?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

/// Runs the service on a fresh multi-threaded runtime until Ctrl-C.
pub fn run(config: ServiceConfig) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(serve(config, async {
        let _ = tokio::signal::ctrl_c().await;
    }))
}

/// A service running on a background thread; stops when dropped.
pub struct RunningService {
    pub addr: SocketAddr,
    pub service: Service,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<Result<()>>>,
}

impl RunningService {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> Result<()> {
        self.shutdown_and_join()
    }

    fn shutdown_and_join(&mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(handle) => handle.join().unwrap_or_else(|_| Err(Error::Io(std::io::Error::other("service thread panicked")))),
            None => Ok(()),
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        let _ = self.shutdown_and_join();
    }
}

/// Starts the service on its own thread and runtime; `config.bind` may use
/// port 0.
pub fn spawn(config: ServiceConfig) -> Result<RunningService> {
    let (ready_tx, ready_rx) = std::sync::mpsc::channel::<Result<(SocketAddr, Service)>>();
    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let thread = thread::Builder::new().name("edit-service".into()).spawn(move || -> Result<()> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        runtime.block_on(async move {
            let started = async {
                let listener = tokio::net::TcpListener::bind(config.bind).await?;
                let addr = listener.local_addr()?;
                let service = Service::start(config)?;
                Ok::<_, Error>((listener, addr, service))
            }
            .await;
            let (listener, addr, service) = match started {
                Ok(s) => s,
                Err(e) => {
                    let _ = ready_tx.send(Err(Error::Io(std::io::Error::other(e.to_string()))));
                    return Err(e);
                }
            };
            let _ = ready_tx.send(Ok((addr, service.clone())));
            axum::serve(listener, router(service))
                .with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                })
                .await?;
            Ok(())
        })
    })?;
    match ready_rx.recv() {
        Ok(Ok((addr, service))) => Ok(RunningService {
            addr,
            service,
            shutdown: Some(shutdown_tx),
            thread: Some(thread),
        }),
        Ok(Err(_)) | Err(_) => Err(thread
            .join()
            .unwrap_or_else(|_| Err(Error::Io(std::io::Error::other("service thread panicked"))))
            .err()
            .unwrap_or_else(|| Error::Io(std::io::Error::other("service failed to start")))),
    }
}
