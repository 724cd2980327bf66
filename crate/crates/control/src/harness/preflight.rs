//! Init phase: fetch code, verify it, and run preflight checks. Stops at the
//! first failing check so a broken task never reaches the user command.

use acm_core::{CodeDigest, Tick};
use acm_storage::{digest_of, MountRef};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECK_CODE_FETCH: &str = "code_fetch";
pub const CHECK_CODE_DIGEST: &str = "code_digest";
pub const CHECK_WORKSPACE: &str = "workspace_writable";
pub const CHECK_DATASET: &str = "dataset_readable";
pub const CHECK_RENDEZVOUS: &str = "rendezvous_reachable";
pub const CHECK_DEVICES: &str = "devices";

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code")]
pub enum InitError {
    #[error("code fetch failed: {detail}")]
    CodeFetchFailed { detail: String },
    #[error("code digest mismatch: expected {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("mount {uri} unavailable: {detail}")]
    MountUnavailable { uri: String, detail: String },
    #[error("rendezvous endpoint {endpoint} unreachable: {detail}")]
    RendezvousUnreachable { endpoint: String, detail: String },
    #[error("devices unavailable: {detail}")]
    DeviceUnavailable { detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreflightReport {
    pub checks: Vec<CheckResult>,
    pub duration_ticks: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<InitError>,
}

impl PreflightReport {
    /// The task may proceed iff every check passed.
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.checks.iter().all(|c| c.passed)
    }
}

/// What one task's init phase must verify.
#[derive(Debug, Clone, Default)]
pub struct InitPlan {
    pub code_ref: Option<CodeDigest>,
    pub workspace: Option<MountRef>,
    pub dataset: Option<MountRef>,
    pub rendezvous_endpoint: Option<String>,
    pub gpus: u32,
}

/// The node-side operations the init phase depends on.
pub trait InitEnvironment {
    fn fetch_code(&mut self, digest: &CodeDigest) -> Result<Vec<u8>, String>;
    /// Unpacks a verified archive into the task's code directory.
    fn install_code(&mut self, archive: &[u8]) -> Result<(), String>;
    fn check_mount(&mut self, mount: &MountRef) -> Result<(), String>;
    fn probe_rendezvous(&mut self, endpoint: &str) -> Result<(), String>;
    fn check_devices(&mut self, gpus: u32) -> Result<(), String>;
}

struct Checks {
    done: Vec<CheckResult>,
}

impl Checks {
    fn pass(&mut self, name: &str, detail: impl Into<String>) {
        self.done.push(CheckResult {
            name: name.to_string(),
            passed: true,
            detail: detail.into(),
        });
    }

    fn fail(mut self, name: &str, error: InitError) -> PreflightReport {
        self.done.push(CheckResult {
            name: name.to_string(),
            passed: false,
            detail: error.to_string(),
        });
        PreflightReport {
            checks: self.done,
            duration_ticks: 0,
            failure: Some(error),
        }
    }
}

/// Runs the init phase. `duration_ticks` is left at 0 for the backend to
/// fill in.
pub fn run_init(plan: &InitPlan, env: &mut dyn InitEnvironment) -> PreflightReport {
    let mut checks = Checks { done: Vec::new() };

    if let Some(digest) = &plan.code_ref {
        let bytes = match env.fetch_code(digest) {
            Ok(b) => b,
            Err(detail) => return checks.fail(CHECK_CODE_FETCH, InitError::CodeFetchFailed { detail }),
        };
        checks.pass(CHECK_CODE_FETCH, format!("{} bytes", bytes.len()));
        let actual = digest_of(&bytes);
        if actual != *digest {
            return checks.fail(
                CHECK_CODE_DIGEST,
                InitError::DigestMismatch {
                    expected: digest.to_string(),
                    actual: actual.to_string(),
                },
            );
        }
        if let Err(detail) = env.install_code(&bytes) {
            return checks.fail(CHECK_CODE_DIGEST, InitError::CodeFetchFailed { detail });
        }
        checks.pass(CHECK_CODE_DIGEST, digest.to_string());
    }

    for (name, mount) in [(CHECK_WORKSPACE, &plan.workspace), (CHECK_DATASET, &plan.dataset)] {
        if let Some(mount) = mount {
            if let Err(detail) = env.check_mount(mount) {
                let error = InitError::MountUnavailable {
                    uri: mount.uri.clone(),
                    detail,
                };
                return checks.fail(name, error);
            }
            checks.pass(name, mount.uri.clone());
        }
    }

    if let Some(endpoint) = &plan.rendezvous_endpoint {
        if let Err(detail) = env.probe_rendezvous(endpoint) {
            let error = InitError::RendezvousUnreachable {
                endpoint: endpoint.clone(),
                detail,
            };
            return checks.fail(CHECK_RENDEZVOUS, error);
        }
        checks.pass(CHECK_RENDEZVOUS, endpoint.clone());
    }

    if let Err(detail) = env.check_devices(plan.gpus) {
        return checks.fail(CHECK_DEVICES, InitError::DeviceUnavailable { detail });
    }
    checks.pass(CHECK_DEVICES, format!("{} gpu(s)", plan.gpus));

    PreflightReport {
        checks: checks.done,
        duration_ticks: 0,
        failure: None,
    }
}
