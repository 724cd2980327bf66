//! A local-process cluster behind a real HTTP server, driven through the
//! `acmctl` binary.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acm_api::{HttpServer, ServerConfig, Service};

pub const TOKEN: &str = "t-ci";

pub struct Cluster {
    pub server: HttpServer,
    pub root: tempfile::TempDir,
}

impl Cluster {
    /// One "local" node with 8 cores and 8 GiB.
    pub fn local() -> Self {
        let root = tempfile::tempdir().unwrap();
        let text = format!(
            "
tokens:
  - {{ token: {TOKEN}, principal: ci }}
mount_root: {r}/mounts
instance_types:
  - name: local
    capacity: {{ cpu: 8, memory: 8Gi }}
nodes: {{ local: 1 }}
backend:
  kind: local
  sandbox: {r}/sandbox
  tick_ms: 10
  kill_grace_ms: 300
",
            r = root.path().display()
        );
        let config = ServerConfig::from_yaml(&text).unwrap();
        let service = Service::start(&config).unwrap();
        let server = HttpServer::start(service, "127.0.0.1:0".parse().unwrap()).unwrap();
        Self { server, root }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }

    /// Writes a file under the cluster's scratch root and returns its path.
    pub fn write(&self, rel: &str, contents: &str) -> PathBuf {
        let path = self.path(rel);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, contents).unwrap();
        path
    }

    pub fn acmctl(&self, args: &[&str]) -> Output {
        acmctl_at(&self.server.endpoint(), TOKEN, args)
    }
}

pub fn acmctl_at(endpoint: &str, token: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acmctl"))
        .args(args)
        .env("ACM_ENDPOINT", endpoint)
        .env("ACM_TOKEN", token)
        .env("ACM_POLL_MS", "50")
        .output()
        .expect("run acmctl")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("acmctl exited normally")
}

/// A job document for a group of `replicas` tasks running `script`.
pub fn job_yaml(name: &str, replicas: u32, harness: &str, script: &str, workspace: Option<&str>) -> String {
    let ws = workspace.map(|w| format!("workspace: {w}\n")).unwrap_or_default();
    format!(
        "name: {name}
{ws}failure_policy: terminate_all
tasks:
  - name: worker
    replicas: {replicas}
    instance_type: local
    resources: {{ cpu: 1, memory: 256Mi }}
    harness: {harness}
    command: [sh, -c, {script:?}]
"
    )
}

pub fn read_dir_sorted(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read_to_string(e.path()).unwrap_or_default(),
                )
            })
            .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}
