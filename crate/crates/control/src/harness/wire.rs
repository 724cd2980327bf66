//! Rendezvous wire protocol: newline-delimited JSON over TCP.
//!
//! Request:
//! `{"version":1,"verb":"REGISTER","job_id":"job-1","task_name":"worker-0","generation":0,"address":"127.0.0.1:4100"}`
//! with verbs `REGISTER`, `POLL` and `STOP-ACK` (`address` only for
//! `REGISTER`). Responses carry `version` and a `status` of `wait`,
//! `proceed`, `stop`, `ack` or `error`. A `proceed` response adds
//! `generation`, `credentials` (hex), `peers`, `rank` and `size`; an `error`
//! adds `error: {code, message, current_generation?}`.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use acm_core::JobId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::rendezvous::{Credentials, Peer, Proceed, RendezvousError, RendezvousServer, Reply};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verb {
    #[serde(rename = "REGISTER")]
    Register,
    #[serde(rename = "POLL")]
    Poll,
    #[serde(rename = "STOP-ACK")]
    StopAck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    /// Mandatory; a request without it is answered with `UnsupportedVersion`.
    #[serde(default)]
    pub version: Option<u32>,
    pub verb: Verb,
    pub job_id: JobId,
    pub task_name: String,
    pub generation: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Wait,
    Proceed,
    Stop,
    Ack,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_generation: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub version: u32,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peers: Option<Vec<Peer>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Response {
    fn status(status: Status) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            status,
            generation: None,
            credentials: None,
            peers: None,
            rank: None,
            size: None,
            error: None,
        }
    }

    fn error(code: &str, message: impl Into<String>, current_generation: Option<u64>) -> Self {
        Self {
            error: Some(WireError {
                code: code.to_string(),
                message: message.into(),
                current_generation,
            }),
            ..Self::status(Status::Error)
        }
    }

    fn from_reply(reply: Reply) -> Self {
        match reply {
            Reply::Wait { generation } => Self {
                generation: Some(generation),
                ..Self::status(Status::Wait)
            },
            Reply::Stop => Self::status(Status::Stop),
            Reply::Proceed(p) => Self {
                generation: Some(p.generation),
                credentials: Some(p.credentials.to_hex()),
                peers: Some(p.peers),
                rank: Some(p.rank),
                size: Some(p.size),
                ..Self::status(Status::Proceed)
            },
        }
    }

    fn from_error(e: RendezvousError) -> Self {
        let (code, current) = match &e {
            RendezvousError::UnknownJob(_) => ("UnknownJob", None),
            RendezvousError::UnknownTask { .. } => ("UnknownTask", None),
            RendezvousError::StaleGeneration { current, .. } => ("StaleGeneration", Some(*current)),
            RendezvousError::NotRegistered { .. } => ("NotRegistered", None),
        };
        Self::error(code, e.to_string(), current)
    }
}

/// Applies one request to the server.
pub fn handle(server: &RendezvousServer, request: &Request) -> Response {
    if request.version != Some(PROTOCOL_VERSION) {
        return Response::error(
            "UnsupportedVersion",
            format!(
                "protocol version {PROTOCOL_VERSION} required, got {:?}",
                request.version
            ),
            None,
        );
    }
    let job = request.job_id;
    let task = &request.task_name;
    let result = match request.verb {
        Verb::Register => {
            let Some(address) = &request.address else {
                return Response::error("BadRequest", "REGISTER requires an address", None);
            };
            server
                .register(job, task, address, request.generation)
                .map(Response::from_reply)
        }
        Verb::Poll => server.poll(job, task, request.generation).map(Response::from_reply),
        Verb::StopAck => server
            .stop_ack(job, task, request.generation)
            .map(|()| Response::status(Status::Ack)),
    };
    result.unwrap_or_else(Response::from_error)
}

fn handle_line(server: &RendezvousServer, line: &str) -> Response {
    match serde_json::from_str::<Request>(line) {
        Ok(req) => handle(server, &req),
        Err(e) => Response::error("BadRequest", e.to_string(), None),
    }
}

fn serve_connection(server: &RendezvousServer, stream: TcpStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_line(server, &line);
        let mut out = serde_json::to_vec(&response).map_err(io::Error::other)?;
        out.push(b'\n');
        writer.write_all(&out)?;
    }
    Ok(())
}

/// TCP front end for a [`RendezvousServer`]. One thread per connection.
pub struct WireServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl WireServer {
    pub fn bind(addr: impl ToSocketAddrs, server: Arc<RendezvousServer>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = thread::Builder::new().name("rendezvous-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let server = server.clone();
                let _ = thread::Builder::new().name("rendezvous-conn".into()).spawn(move || {
                    if let Err(e) = serve_connection(&server, stream) {
                        tracing::debug!("rendezvous connection closed: {e}");
                    }
                });
            }
        })?;
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for WireServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("{code}: {message}")]
    Server {
        code: String,
        message: String,
        current_generation: Option<u64>,
    },
}

/// Blocking client used by the in-task harness.
pub struct RendezvousClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl RendezvousClient {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        let sock = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    pub fn call(&mut self, request: &Request) -> Result<Response, ClientError> {
        let mut line = serde_json::to_vec(request).map_err(|e| ClientError::Malformed(e.to_string()))?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf)? == 0 {
            return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into());
        }
        serde_json::from_str(&buf).map_err(|e| ClientError::Malformed(e.to_string()))
    }

    fn request(
        &mut self,
        verb: Verb,
        job: JobId,
        task: &str,
        generation: u64,
        address: Option<&str>,
    ) -> Result<Reply, ClientError> {
        let response = self.call(&Request {
            version: Some(PROTOCOL_VERSION),
            verb,
            job_id: job,
            task_name: task.to_string(),
            generation,
            address: address.map(str::to_string),
        })?;
        reply_of(response)
    }

    pub fn register(&mut self, job: JobId, task: &str, address: &str, generation: u64) -> Result<Reply, ClientError> {
        self.request(Verb::Register, job, task, generation, Some(address))
    }

    pub fn poll(&mut self, job: JobId, task: &str, generation: u64) -> Result<Reply, ClientError> {
        self.request(Verb::Poll, job, task, generation, None)
    }

    pub fn stop_ack(&mut self, job: JobId, task: &str, generation: u64) -> Result<(), ClientError> {
        self.request(Verb::StopAck, job, task, generation, None).map(|_| ())
    }
}

impl Drop for RendezvousClient {
    fn drop(&mut self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

fn reply_of(response: Response) -> Result<Reply, ClientError> {
    let malformed = |what: &str| ClientError::Malformed(format!("proceed without {what}"));
    match response.status {
        Status::Wait => Ok(Reply::Wait {
            generation: response.generation.unwrap_or_default(),
        }),
        // An ack is reported as Stop: the stop was acknowledged.
        Status::Stop | Status::Ack => Ok(Reply::Stop),
        Status::Proceed => Ok(Reply::Proceed(Proceed {
            generation: response.generation.ok_or_else(|| malformed("generation"))?,
            credentials: response
                .credentials
                .as_deref()
                .and_then(Credentials::from_hex)
                .ok_or_else(|| malformed("credentials"))?,
            peers: response.peers.ok_or_else(|| malformed("peers"))?,
            rank: response.rank.ok_or_else(|| malformed("rank"))?,
            size: response.size.ok_or_else(|| malformed("size"))?,
        })),
        Status::Error => {
            let e = response.error.unwrap_or(WireError {
                code: "Unknown".into(),
                message: String::new(),
                current_generation: None,
            });
            Err(ClientError::Server {
                code: e.code,
                message: e.message,
                current_generation: e.current_generation,
            })
        }
    }
}
