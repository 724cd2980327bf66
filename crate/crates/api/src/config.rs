//! Server configuration file.
//!
//! ```yaml
//! listen: 127.0.0.1:8080
//! tokens:
//!   - token: s3cret
//!     principal: alice
//! static_dir: webui/dist
//! mount_root: /srv/acm/mounts
//! instance_types:
//!   - name: gpu8
//!     capacity: { cpu: 64, gpu: 8, memory: 512Gi }
//!     boot_delay_ticks: 3
//! nodes: { gpu8: 2 }
//! backend:
//!   kind: sim
//!   tick_ms: 100
//! ```

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use acm_control::autoscaler::AutoscalerConfig;
use acm_control::scheduler::SchedulerConfig;
use acm_core::{InstanceType, Tick};
use serde::{Deserialize, Serialize};

/// Default page size for job lists and per-job task lists.
pub const DEFAULT_PAGE_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub principal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    pub tokens: Vec<TokenEntry>,
    /// Web UI build output, served at `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    /// Code archives go here; in memory when unset.
    #[serde(default)]
    pub code_dir: Option<PathBuf>,
    #[serde(default = "default_max_archive_bytes")]
    pub max_archive_bytes: u64,
    /// Root for `local://` dataset and workspace URIs.
    pub mount_root: PathBuf,
    /// Mirror of the event log, one JSON record per line.
    #[serde(default)]
    pub event_log: Option<PathBuf>,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
    pub instance_types: Vec<InstanceType>,
    /// Nodes that are Ready at startup, per instance type.
    #[serde(default)]
    pub nodes: BTreeMap<String, u32>,
    #[serde(default)]
    pub scheduler: SchedulerSettings,
    #[serde(default)]
    pub autoscaler: Option<AutoscalerConfig>,
    pub backend: BackendSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSettings {
    #[serde(default)]
    pub backfill_enabled: bool,
    #[serde(default = "one")]
    pub schedule_interval_ticks: Tick,
}

impl Default for SchedulerSettings {
    fn default() -> Self {
        Self {
            backfill_enabled: false,
            schedule_interval_ticks: 1,
        }
    }
}

impl From<SchedulerSettings> for SchedulerConfig {
    fn from(s: SchedulerSettings) -> Self {
        SchedulerConfig {
            backfill_enabled: s.backfill_enabled,
            schedule_interval_ticks: s.schedule_interval_ticks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSettings {
    /// Simulated cluster paced against wall time.
    Sim {
        #[serde(default = "default_sim_tick_ms")]
        tick_ms: u64,
        #[serde(default = "one")]
        init_ticks: Tick,
        #[serde(default = "default_duration")]
        default_duration: Tick,
        /// Seeds rendezvous credentials; random when unset.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        quotas: BTreeMap<String, u32>,
    },
    /// Tasks run as processes on this machine.
    Local {
        sandbox: PathBuf,
        #[serde(default = "default_local_tick_ms")]
        tick_ms: u64,
        #[serde(default = "default_kill_grace_ms")]
        kill_grace_ms: u64,
        #[serde(default = "default_rendezvous_listen")]
        rendezvous_listen: SocketAddr,
        #[serde(default)]
        quotas: BTreeMap<String, u32>,
    },
}

impl ServerConfig {
    pub fn from_yaml(text: &str) -> Result<Self, serde_yaml::Error> {
        serde_yaml::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Self::from_yaml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }
}

fn default_listen() -> SocketAddr {
    ([127, 0, 0, 1], 8080).into()
}

fn default_rendezvous_listen() -> SocketAddr {
    ([127, 0, 0, 1], 0).into()
}

fn default_max_archive_bytes() -> u64 {
    acm_storage::DEFAULT_MAX_ARCHIVE_BYTES
}

fn default_page_size() -> usize {
    DEFAULT_PAGE_SIZE
}

fn default_sim_tick_ms() -> u64 {
    100
}

fn default_local_tick_ms() -> u64 {
    20
}

fn default_kill_grace_ms() -> u64 {
    2000
}

fn default_duration() -> Tick {
    10
}

fn one() -> Tick {
    1
}
