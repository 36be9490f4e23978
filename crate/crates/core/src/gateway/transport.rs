//! Line transports: the in-process mock, a spawned subprocess speaking over
//! stdio, and a TCP stream.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use super::mock::MockWorker;
use super::protocol::{Handshake, PROTOCOL_VERSION};
use super::GatewayError;

/// A request line tagged with its id.
#[derive(Debug, Clone)]
pub struct Outgoing {
    pub id: String,
    pub line: String,
}

pub trait Transport: Send + Sync {
    fn handshake(&self) -> &Handshake;

    /// Sends a batch of request lines and returns the raw response lines,
    /// in whatever order the worker produced them.
    fn exchange(&self, batch: &[Outgoing], timeout: Duration) -> Result<Vec<String>, GatewayError>;
}

pub struct MockTransport {
    worker: MockWorker,
    handshake: Handshake,
}

impl MockTransport {
    pub fn new(worker: MockWorker) -> Self {
        let handshake = worker.handshake();
        MockTransport { worker, handshake }
    }
}

impl Transport for MockTransport {
    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn exchange(
        &self,
        batch: &[Outgoing],
        _timeout: Duration,
    ) -> Result<Vec<String>, GatewayError> {
        Ok(batch
            .iter()
            .map(|o| self.worker.handle_line(&o.line))
            .collect())
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    /// Ids of requests given up on after a timeout; late answers are dropped.
    abandoned: HashSet<String>,
}

/// A worker reached over a byte stream (child stdio or TCP).
pub struct StreamTransport {
    conn: Mutex<Connection>,
    handshake: Handshake,
    child: Option<Mutex<Child>>,
}

fn spawn_reader<R: std::io::Read + Send + 'static>(reader: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

fn read_handshake(
    rx: &Receiver<std::io::Result<String>>,
    timeout: Duration,
) -> Result<Handshake, GatewayError> {
    let line = match rx.recv_timeout(timeout) {
        Ok(Ok(line)) => line,
        Ok(Err(e)) => return Err(GatewayError::Handshake(e.to_string())),
        Err(RecvTimeoutError::Timeout) => {
            return Err(GatewayError::Handshake(
                "no handshake before timeout".into(),
            ))
        }
        Err(RecvTimeoutError::Disconnected) => {
            return Err(GatewayError::Handshake(
                "worker closed the stream before its handshake".into(),
            ))
        }
    };
    let hs: Handshake = serde_json::from_str(&line)
        .map_err(|e| GatewayError::Handshake(format!("bad handshake line `{line}`: {e}")))?;
    if hs.protocol != PROTOCOL_VERSION {
        return Err(GatewayError::Handshake(format!(
            "unsupported protocol version {}",
            hs.protocol
        )));
    }
    if hs.batch_limit == 0 {
        return Err(GatewayError::Handshake(
            "batch_limit must be positive".into(),
        ));
    }
    Ok(hs)
}

impl StreamTransport {
    /// Spawns `command` through `sh -c` and waits for its handshake.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| GatewayError::Handshake(format!("cannot spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let lines = spawn_reader(stdout);
        let handshake = match read_handshake(&lines, timeout) {
            Ok(hs) => hs,
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(e);
            }
        };
        Ok(StreamTransport {
            conn: Mutex::new(Connection {
                writer: Box::new(stdin),
                lines,
                abandoned: HashSet::new(),
            }),
            handshake,
            child: Some(Mutex::new(child)),
        })
    }

    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| GatewayError::Handshake(format!("cannot connect to {addr}: {e}")))?;
        let reader = stream
            .try_clone()
            .map_err(|e| GatewayError::Io(e.to_string()))?;
        let lines = spawn_reader(reader);
        let handshake = read_handshake(&lines, timeout)?;
        Ok(StreamTransport {
            conn: Mutex::new(Connection {
                writer: Box::new(stream),
                lines,
                abandoned: HashSet::new(),
            }),
            handshake,
            child: None,
        })
    }
}

impl Transport for StreamTransport {
    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn exchange(&self, batch: &[Outgoing], timeout: Duration) -> Result<Vec<String>, GatewayError> {
        let mut conn = self.conn.lock().expect("connection lock poisoned");
        let mut pending: HashSet<&str> = batch.iter().map(|o| o.id.as_str()).collect();
        for o in batch {
            writeln!(conn.writer, "{}", o.line).map_err(|e| GatewayError::Io(e.to_string()))?;
        }
        conn.writer
            .flush()
            .map_err(|e| GatewayError::Io(e.to_string()))?;

        let deadline = Instant::now() + timeout;
        let mut out = Vec::with_capacity(batch.len());
        while !pending.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            match conn.lines.recv_timeout(left) {
                Ok(Ok(line)) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let id = serde_json::from_str::<Value>(&line)
                        .ok()
                        .and_then(|v| v.get("id").and_then(Value::as_str).map(str::to_string));
                    match id {
                        Some(id) if pending.remove(id.as_str()) => out.push(line),
                        Some(id) if conn.abandoned.remove(&id) => {}
                        // Uncorrelated lines go to the gateway, which reports them.
                        _ => out.push(line),
                    }
                }
                Ok(Err(e)) => return Err(GatewayError::Io(e.to_string())),
                Err(RecvTimeoutError::Timeout) => {
                    let late: Vec<String> = pending.iter().map(|s| s.to_string()).collect();
                    conn.abandoned.extend(late);
                    return Err(GatewayError::Timeout(timeout));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(GatewayError::Io("worker closed the stream".into()))
                }
            }
            if out.len() > batch.len() {
                break;
            }
        }
        Ok(out)
    }
}

impl Drop for StreamTransport {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut child) = child.lock() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}
