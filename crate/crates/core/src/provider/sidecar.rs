//! Client for an external model process speaking the JSON-lines protocol on
//! its standard input and output.
//!
//! Writes are serialized through a mutex; a reader thread routes each
//! response line to the waiting caller by `id`, so several workers can have
//! requests in flight at once.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::{ModelRequest, ModelResponse, Provider, ProviderError, Query};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

type Reply = Result<ModelResponse, ProviderError>;
type Pending = Arc<Mutex<HashMap<u64, Sender<Reply>>>>;

pub struct SidecarClient {
    writer: Mutex<Option<Box<dyn Write + Send>>>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    next_id: AtomicU64,
    timeout: Duration,
    child: Option<Child>,
    reader: Option<JoinHandle<()>>,
}

impl SidecarClient {
    /// Starts `program args…` and connects to its stdio.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, ProviderError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Transport(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_streams(BufReader::new(stdout), stdin, timeout);
        client.child = Some(child);
        Ok(client)
    }

    /// Starts a whitespace-separated command line, e.g. `python sidecar.py --model bert-base-uncased`.
    pub fn spawn_command_line(command: &str, timeout: Duration) -> Result<Self, ProviderError> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| ProviderError::Transport("empty sidecar command".into()))?;
        let args: Vec<String> = parts.map(String::from).collect();
        Self::spawn(program, &args, timeout)
    }

    /// Connects to an already running peer.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let pending: Pending = Arc::new(Mutex::new(HashMap::new()));
        let closed = Arc::new(AtomicBool::new(false));
        let handle = {
            let pending = Arc::clone(&pending);
            let closed = Arc::clone(&closed);
            thread::spawn(move || read_loop(reader, pending, closed))
        };
        SidecarClient {
            writer: Mutex::new(Some(Box::new(writer))),
            pending,
            closed,
            next_id: AtomicU64::new(1),
            timeout,
            child: None,
            reader: Some(handle),
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }
}

fn read_loop<R: BufRead>(reader: R, pending: Pending, closed: Arc<AtomicBool>) {
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                warn!("sidecar read failed: {e}");
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ModelResponse>(&line) {
            Ok(resp) => {
                let waiter = pending.lock().unwrap().remove(&resp.id);
                match waiter {
                    Some(tx) => {
                        let _ = tx.send(Ok(resp));
                    }
                    None => debug!("dropping response for unknown id {}", resp.id),
                }
            }
            Err(e) => warn!("unparseable sidecar line: {e}"),
        }
    }
    closed.store(true, Ordering::SeqCst);
    for (_, tx) in pending.lock().unwrap().drain() {
        let _ = tx.send(Err(ProviderError::Transport("sidecar closed its output".into())));
    }
}

impl Provider for SidecarClient {
    fn request(&self, query: &Query) -> Result<ModelResponse, ProviderError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(ProviderError::Transport("sidecar is closed".into()));
        }
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().unwrap().insert(id, tx);
        // the reader may have shut down between the check above and the insert
        if self.closed.load(Ordering::SeqCst) {
            self.pending.lock().unwrap().remove(&id);
            return Err(ProviderError::Transport("sidecar is closed".into()));
        }

        let mut line = serde_json::to_vec(&ModelRequest {
            id,
            query: query.clone(),
        })
        .map_err(|e| ProviderError::Protocol(e.to_string()))?;
        line.push(b'\n');
        {
            let mut guard = self.writer.lock().unwrap();
            let writer = guard
                .as_mut()
                .ok_or_else(|| ProviderError::Transport("sidecar input closed".into()))?;
            if let Err(e) = writer.write_all(&line).and_then(|_| writer.flush()) {
                self.pending.lock().unwrap().remove(&id);
                return Err(ProviderError::Transport(format!("write failed: {e}")));
            }
        }

        match rx.recv_timeout(self.timeout) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().unwrap().remove(&id);
                Err(ProviderError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(ProviderError::Transport("sidecar closed its output".into()))
            }
        }
    }
}

impl Drop for SidecarClient {
    fn drop(&mut self) {
        // closing stdin asks the sidecar to exit
        self.writer.lock().unwrap().take();
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + Duration::from_secs(5);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
            if let Some(h) = self.reader.take() {
                let _ = h.join();
            }
        }
        // in-process peers may outlive the client; the reader thread is detached
    }
}
