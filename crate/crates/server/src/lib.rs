//! HTTP+JSON service over [`vrlab_core::Platform`].
//!
//! Errors map onto statuses by kind: not found → 404, validation → 422,
//! conflict → 409, backpressure → 429 with `Retry-After`.

mod error;
mod routes;

use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tracing::{info, warn};
use vrlab_core::dataplane::{DataStore, IdMinter};
use vrlab_core::{Platform, Settings};

pub use error::{ApiError, ErrorBody};
pub use routes::{router, AppState, QuestionnaireId, Revision};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    /// Append-only log directory; in-memory only when absent.
    pub storage: Option<PathBuf>,
    pub session_timeout_s: f64,
    /// Shared researcher token for registry, questionnaire and export routes.
    pub token: Option<String>,
    /// Deterministic identifiers, for reproducible simulation runs.
    pub id_seed: Option<u64>,
    pub worker_threads: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            storage: None,
            session_timeout_s: Settings::default().session_timeout_s,
            token: None,
            id_seed: None,
            worker_threads: 4,
        }
    }
}

impl ServerConfig {
    pub fn platform(&self) -> io::Result<Platform> {
        let data = match &self.storage {
            Some(dir) => DataStore::with_dir(dir).map_err(|e| io::Error::other(e.to_string()))?,
            None => DataStore::in_memory(),
        };
        let mut builder = Platform::builder(data).settings(Settings {
            session_timeout_s: self.session_timeout_s,
        });
        if let Some(seed) = self.id_seed {
            builder = builder.ids(IdMinter::seeded(seed));
        }
        Ok(builder.build())
    }

    fn sweep_interval(&self) -> Duration {
        Duration::from_secs_f64((self.session_timeout_s / 4.0).clamp(0.05, 30.0))
    }
}

/// Serves until `shutdown` resolves, sweeping idle sessions in the background.
pub async fn serve(
    listener: TcpListener,
    platform: Arc<Platform>,
    config: &ServerConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    let sweeper = {
        let platform = platform.clone();
        let every = config.sweep_interval();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                match platform.sweep_timeouts() {
                    Ok(dropped) if !dropped.is_empty() => info!(count = dropped.len(), "sessions timed out"),
                    Ok(_) => {}
                    Err(e) => warn!(error = %e, "timeout sweep failed"),
                }
            }
        })
    };
    let app = router(AppState {
        platform,
        token: config.token.as_deref().map(Arc::from),
    });
    info!(addr = %listener.local_addr()?, "listening");
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    result
}

/// A server on its own runtime thread, stopped on drop.
pub struct RunningServer {
    addr: SocketAddr,
    platform: Arc<Platform>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<io::Result<()>>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// In-process handle, for tests that cross-check service state.
    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| io::Error::other("server thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Binds `config.bind` (port 0 picks a free port) and serves in the background.
pub fn spawn(config: ServerConfig) -> io::Result<RunningServer> {
    let platform = Arc::new(config.platform()?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(config.worker_threads.max(1))
        .enable_all()
        .build()?;
    let listener = runtime.block_on(TcpListener::bind(config.bind))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let served = platform.clone();
    let thread = std::thread::Builder::new()
        .name("vrlab-server".into())
        .spawn(move || {
            runtime.block_on(serve(listener, served, &config, async {
                let _ = rx.await;
            }))
        })?;
    Ok(RunningServer {
        addr,
        platform,
        stop: Some(tx),
        thread: Some(thread),
    })
}
