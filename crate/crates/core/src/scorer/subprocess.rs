use std::collections::VecDeque;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use super::protocol::{Handshake, Request, Response, ScoreMessage, TokenizeMessage};
use super::{Backend, BridgeError, Result, ScoreRequest};
use crate::{MASK, SEP};

#[derive(Debug, Clone)]
pub struct SubprocessConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub timeout: Duration,
    pub startup_timeout: Duration,
    /// Refuse to talk to a backend announcing a different model.
    pub expected_model_id: Option<String>,
}

impl SubprocessConfig {
    pub fn new(command: Vec<String>) -> Self {
        SubprocessConfig {
            command,
            timeout: Duration::from_secs(60),
            startup_timeout: Duration::from_secs(120),
            expected_model_id: None,
        }
    }

    /// Splits a shell-like command line on whitespace.
    pub fn from_command_line(line: &str) -> Self {
        Self::new(line.split_whitespace().map(str::to_string).collect())
    }
}

struct Live {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    lines: Receiver<String>,
    model_id: String,
}

impl Drop for Live {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Backend served by a child process over stdin/stdout.
///
/// The process is spawned on first use and respawned after a timeout or a
/// protocol failure. Requests are pipelined up to the in-flight window and
/// responses must come back in request order.
pub struct SubprocessBackend {
    config: SubprocessConfig,
    live: Mutex<Option<Live>>,
    next_id: AtomicU64,
}

impl SubprocessBackend {
    pub fn new(config: SubprocessConfig) -> Self {
        SubprocessBackend {
            config,
            live: Mutex::new(None),
            next_id: AtomicU64::new(0),
        }
    }

    fn spawn(&self) -> Result<Live> {
        let (program, args) = self
            .config
            .command
            .split_first()
            .ok_or_else(|| BridgeError::Unavailable("empty scorer command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BridgeError::Unavailable(format!("cannot start `{program}`: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        let mut live = Live {
            child,
            stdin,
            lines: rx,
            model_id: String::new(),
        };
        let first = recv(&live.lines, self.config.startup_timeout, "handshake")?;
        let hs: Handshake = serde_json::from_str(&first).map_err(|e| BridgeError::Protocol {
            raw: first.clone(),
            reason: format!("bad handshake: {e}"),
        })?;
        if hs.op != "ready" || hs.mask_sentinel != MASK || hs.separator != SEP {
            return Err(BridgeError::Protocol {
                raw: first,
                reason: "handshake does not match the expected sentinels".into(),
            });
        }
        if let Some(expected) = &self.config.expected_model_id {
            if *expected != hs.model_id {
                return Err(BridgeError::Unavailable(format!(
                    "backend serves `{}`, expected `{expected}`",
                    hs.model_id
                )));
            }
        }
        log::info!("scorer ready: {}", hs.model_id);
        live.model_id = hs.model_id;
        Ok(live)
    }

    /// Runs `f` against the live process, spawning it if needed. Any
    /// transport-level failure discards the process.
    fn with_live<T>(&self, f: impl FnOnce(&mut Live) -> Result<T>) -> Result<T> {
        let mut guard = self.live.lock().expect("scorer lock");
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let result = f(guard.as_mut().expect("spawned"));
        if let Err(e) = &result {
            if matches!(
                e,
                BridgeError::Timeout(_) | BridgeError::Protocol { .. } | BridgeError::Unavailable(_)
            ) {
                log::warn!("discarding scorer process after: {e}");
                *guard = None;
            }
        }
        result
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn exchange(&self, requests: Vec<Request>, window: usize) -> Result<Vec<Response>> {
        let timeout = self.config.timeout;
        self.with_live(|live| {
            let window = window.max(1);
            let mut out = Vec::with_capacity(requests.len());
            let mut waiting: VecDeque<String> = VecDeque::new();
            let mut queue = requests.into_iter();
            loop {
                while waiting.len() < window {
                    let Some(r) = queue.next() else { break };
                    writeln!(live.stdin, "{}", r.to_line()).map_err(|e| broken(&e))?;
                    waiting.push_back(r.id().to_string());
                }
                live.stdin.flush().map_err(|e| broken(&e))?;
                let Some(expected) = waiting.pop_front() else { break };
                let line = recv(&live.lines, timeout, &expected)?;
                let response = Response::parse(&line)?;
                if response.id != expected {
                    return Err(BridgeError::Protocol {
                        raw: line,
                        reason: format!("expected response for `{expected}`, got `{}`", response.id),
                    });
                }
                out.push(response);
            }
            Ok(out)
        })
    }
}

fn broken(e: &std::io::Error) -> BridgeError {
    BridgeError::Unavailable(format!("scorer pipe closed: {e}"))
}

fn recv(lines: &Receiver<String>, timeout: Duration, id: &str) -> Result<String> {
    match lines.recv_timeout(timeout) {
        Ok(l) => Ok(l),
        Err(RecvTimeoutError::Timeout) => Err(BridgeError::Timeout(id.to_string())),
        Err(RecvTimeoutError::Disconnected) => Err(BridgeError::Unavailable("scorer process exited".into())),
    }
}

fn score_message(r: &ScoreRequest) -> Request {
    Request::Score(ScoreMessage {
        id: r.id.clone(),
        op: "score".into(),
        text: r.text.clone(),
        mask_index: r.mask_index,
        top_k: r.top_k,
        candidates: r.candidates.clone(),
    })
}

fn predictions_of(response: Response) -> Result<Vec<(String, f64)>> {
    let response = response.into_result()?;
    match response.predictions {
        Some(p) => Ok(p),
        None => Err(BridgeError::Protocol {
            raw: response.to_line(),
            reason: "missing predictions".into(),
        }),
    }
}

impl Backend for SubprocessBackend {
    fn model_id(&self) -> Result<String> {
        self.with_live(|live| Ok(live.model_id.clone()))
    }

    fn predict(&self, request: &ScoreRequest) -> Result<Vec<(String, f64)>> {
        let mut out = self.exchange(vec![score_message(request)], 1)?;
        predictions_of(out.pop().expect("one response"))
    }

    fn tokenize(&self, label: &str) -> Result<usize> {
        let msg = Request::Tokenize(TokenizeMessage {
            id: self.fresh_id("tok-"),
            op: "tokenize".into(),
            label: label.to_string(),
        });
        let response = self.exchange(vec![msg], 1)?.pop().expect("one response").into_result()?;
        response.n_tokens.ok_or_else(|| BridgeError::Protocol {
            raw: response.to_line(),
            reason: "missing n_tokens".into(),
        })
    }

    fn predict_many(&self, requests: &[ScoreRequest], max_in_flight: usize) -> Vec<Result<Vec<(String, f64)>>> {
        let messages = requests.iter().map(score_message).collect();
        match self.exchange(messages, max_in_flight) {
            Ok(responses) => responses.into_iter().map(predictions_of).collect(),
            Err(e) => requests.iter().map(|_| Err(e.clone())).collect(),
        }
    }
}
