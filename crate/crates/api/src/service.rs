//! Assembles a running service from a [`ServerConfig`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use acm_control::backend::local::{LocalBackend, LocalConfig};
use acm_control::backend::sim::{SimBackend, SimConfig, SIM_RENDEZVOUS_ENDPOINT};
use acm_control::events::EventLog;
use acm_control::harness::{RendezvousServer, WireServer};
use acm_control::plane::{ControlPlane, PlaneConfig};
use acm_core::{InstanceCatalog, InstanceType, NodeId};
use acm_storage::{CodeStore, LogStore, MountTable, RecordLog};
use anyhow::{bail, Context};
use axum::Router;
use tokio::sync::oneshot;

use crate::config::{BackendSettings, ServerConfig};
use crate::control::ControlLoop;
use crate::routes::{router, AppState};

pub struct Service {
    state: AppState,
    static_dir: Option<PathBuf>,
    control: ControlLoop,
    wire: Option<WireServer>,
}

fn initial_nodes(config: &ServerConfig, catalog: &InstanceCatalog) -> anyhow::Result<Vec<InstanceType>> {
    let mut out = Vec::new();
    for (name, &count) in &config.nodes {
        let ty = catalog
            .get(name)
            .with_context(|| format!("nodes: unknown instance type {name:?}"))?;
        out.extend(std::iter::repeat_n(ty.clone(), count as usize));
    }
    Ok(out)
}

fn add_nodes(types: &[InstanceType], mut add: impl FnMut(&InstanceType) -> NodeId) {
    for ty in types {
        let id = add(ty);
        tracing::info!(node = %id, instance_type = %ty.name, "node ready");
    }
}

impl Service {
    pub fn start(config: &ServerConfig) -> anyhow::Result<Self> {
        let catalog = InstanceCatalog::new(config.instance_types.clone()).context("instance_types")?;
        let nodes = initial_nodes(config, &catalog)?;
        if config.page_size == 0 {
            bail!("page_size must be positive");
        }

        let mut tokens = HashMap::new();
        for entry in &config.tokens {
            if entry.token.is_empty() {
                bail!("token for {} is empty", entry.principal);
            }
            if tokens.insert(entry.token.clone(), entry.principal.clone()).is_some() {
                bail!("token for {} is listed twice", entry.principal);
            }
        }

        let code = Arc::new(match &config.code_dir {
            Some(dir) => CodeStore::open(dir, config.max_archive_bytes).context("code_dir")?,
            None => CodeStore::in_memory(config.max_archive_bytes),
        });
        let logs = Arc::new(LogStore::new());
        let events = Arc::new(match &config.event_log {
            Some(path) => EventLog::with_mirror(RecordLog::with_file(path).context("event_log")?),
            None => EventLog::new(),
        });
        let mounts = MountTable::new(&config.mount_root);
        let plane_config = PlaneConfig {
            scheduler: config.scheduler.into(),
            autoscaler: config.autoscaler,
        };

        let (control, wire) = match &config.backend {
            BackendSettings::Sim {
                tick_ms,
                init_ticks,
                default_duration,
                seed,
                quotas,
            } => {
                let rendezvous = Arc::new(seed.map_or_else(RendezvousServer::random, RendezvousServer::new));
                let mut sim = SimBackend::new(SimConfig {
                    init_ticks: (*init_ticks).max(1),
                    default_duration: (*default_duration).max(1),
                    quotas: quotas.clone(),
                })
                .with_rendezvous(rendezvous.clone())
                .with_code_store(code.clone())
                .with_logs(logs.clone());
                add_nodes(&nodes, |ty| sim.add_ready_node(ty));
                let plane = ControlPlane::new(
                    sim,
                    catalog,
                    plane_config,
                    rendezvous,
                    SIM_RENDEZVOUS_ENDPOINT,
                    events.clone(),
                )?
                .with_code_store(code.clone());
                let pace = Duration::from_millis((*tick_ms).max(1));
                (ControlLoop::spawn(plane, Some(pace)), None)
            }
            BackendSettings::Local {
                sandbox,
                tick_ms,
                kill_grace_ms,
                rendezvous_listen,
                quotas,
            } => {
                let rendezvous = Arc::new(RendezvousServer::random());
                let wire = WireServer::bind(rendezvous_listen, rendezvous.clone()).context("rendezvous_listen")?;
                let mut local_config = LocalConfig::new(sandbox, &config.mount_root);
                local_config.tick = Duration::from_millis((*tick_ms).max(1));
                local_config.kill_grace = Duration::from_millis(*kill_grace_ms);
                local_config.quotas = quotas.clone();
                let mut local = LocalBackend::new(local_config, logs.clone())
                    .context("sandbox")?
                    .with_code_store(code.clone());
                add_nodes(&nodes, |ty| local.add_ready_node(ty));
                let endpoint = wire.local_addr().to_string();
                tracing::info!(%endpoint, "rendezvous listening");
                let plane = ControlPlane::new(local, catalog, plane_config, rendezvous, endpoint, events.clone())?
                    .with_code_store(code.clone());
                (ControlLoop::spawn(plane, None), Some(wire))
            }
        };

        let state = AppState {
            commands: control.sender(),
            published: control.published(),
            events,
            logs,
            code,
            mounts,
            tokens: Arc::new(tokens),
            page_size: config.page_size,
        };
        Ok(Self {
            state,
            static_dir: config.static_dir.clone(),
            control,
            wire,
        })
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    pub fn router(&self) -> Router {
        router(self.state.clone(), self.static_dir.as_deref())
    }

    /// Stops the control loop, which stops every local task.
    pub fn shutdown(&mut self) {
        self.control.shutdown();
        if let Some(wire) = self.wire.as_mut() {
            wire.shutdown();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// A service answering HTTP on its own runtime thread, for tests and
/// embedding.
pub struct HttpServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    service: Service,
}

impl HttpServer {
    pub fn start(service: Service, addr: SocketAddr) -> anyhow::Result<Self> {
        let listener = std::net::TcpListener::bind(addr).context("bind")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let app = service.router();
        let (stop, stopped) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::Builder::new().name("acm-http".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => return tracing::error!("listener: {e}"),
                };
                let shutdown = async {
                    let _ = stopped.await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                    tracing::error!("http server: {e}");
                }
            });
        })?;
        Ok(Self {
            addr,
            stop: Some(stop),
            thread: Some(thread),
            service,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn service(&self) -> &Service {
        &self.service
    }

    pub fn stop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.service.shutdown();
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop();
    }
}
