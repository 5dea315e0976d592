//! Cross-validated scoring of pipeline configurations.
//!
//! An [`Evaluator`] turns an [`EvaluationRequest`] into an
//! [`EvaluationResult`]. The built-in synthetic benchmark implements it
//! in-process; [`ExternalEvaluator`] forwards requests to worker processes
//! speaking a line-delimited JSON protocol over stdin/stdout:
//!
//! ```text
//! worker -> {"type":"hello","protocol_version":1,"capabilities":{"metrics":[..],"algorithms":[..]}}
//! engine -> {"type":"eval","request_id":..,"dataset":..,"metric":..,"folds":..,"seed":..,
//!            "pipeline":{stage:algorithm},"hyperparams":{algorithm:{name:value}},"time_budget_s":..}
//! worker -> {"type":"result","request_id":..,"status":"ok"|"failed"|"timeout","fold_scores":[..],"message":..}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::metrics::{exact_mean, Metric};
use crate::space::{ParamValue, PipelineConfig};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRequest {
    pub request_id: String,
    pub config: PipelineConfig,
    pub dataset: String,
    pub metric: Metric,
    pub folds: usize,
    pub seed: u64,
    pub time_budget_s: f64,
}

impl EvaluationRequest {
    pub fn check(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidArgument("evaluation needs at least 2 folds".into()));
        }
        if !(self.time_budget_s > 0.0) {
            return Err(Error::InvalidArgument("time budget must be positive".into()));
        }
        Ok(())
    }

    /// The request as one protocol line (without the newline).
    pub fn to_wire(&self) -> String {
        let pipeline: BTreeMap<&str, &str> =
            self.config.stages.iter().map(|c| (c.stage.as_str(), c.algorithm.as_str())).collect();
        let hyperparams: BTreeMap<&str, &BTreeMap<String, ParamValue>> =
            self.config.stages.iter().map(|c| (c.algorithm.as_str(), &c.params)).collect();
        json!({
            "type": "eval",
            "request_id": self.request_id,
            "dataset": self.dataset,
            "metric": self.metric,
            "folds": self.folds,
            "seed": self.seed,
            "pipeline": pipeline,
            "hyperparams": hyperparams,
            "time_budget_s": self.time_budget_s,
        })
        .to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    Failed,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub request_id: String,
    pub fold_scores: Vec<f64>,
    /// Mean of `fold_scores`; `None` unless `status` is `Ok`.
    pub mean_score: Option<f64>,
    pub status: EvalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl EvaluationResult {
    /// A successful result; fails if any score lies outside `[0, 1]`.
    pub fn ok(request_id: impl Into<String>, fold_scores: Vec<f64>) -> Result<Self> {
        if fold_scores.is_empty() {
            return Err(Error::InvalidArgument("no fold scores".into()));
        }
        if let Some(bad) = fold_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("fold score {bad} outside [0, 1]")));
        }
        let mean = exact_mean(&fold_scores);
        Ok(EvaluationResult {
            request_id: request_id.into(),
            fold_scores,
            mean_score: Some(mean),
            status: EvalStatus::Ok,
            message: None,
        })
    }

    pub fn failed(request_id: impl Into<String>, status: EvalStatus, message: impl Into<String>) -> Self {
        EvaluationResult {
            request_id: request_id.into(),
            fold_scores: Vec::new(),
            mean_score: None,
            status,
            message: Some(message.into()),
        }
    }

    /// Score fed to the surrogate: the mean when ok, `penalty` otherwise.
    pub fn observed_score(&self, penalty: f64) -> f64 {
        match (self.status, self.mean_score) {
            (EvalStatus::Ok, Some(m)) => m,
            _ => penalty,
        }
    }

    /// Sample variance of the fold scores divided by their count.
    pub fn mean_variance(&self) -> Option<f64> {
        let j = self.fold_scores.len();
        if self.status != EvalStatus::Ok || j < 2 {
            return None;
        }
        let m = self.mean_score?;
        let var = self.fold_scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (j - 1) as f64;
        Some(var / j as f64)
    }
}

/// A scoring backend. Implementations must tolerate concurrent calls.
///
/// `Err` means the backend itself is unusable (the run should stop and
/// keep its checkpoint); problems with a single request come back as a
/// non-ok [`EvaluationResult`].
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, request: &EvaluationRequest) -> Result<EvaluationResult>;
}

// ---------------------------------------------------------------------------
// External workers

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub metrics: BTreeSet<String>,
    pub algorithms: BTreeSet<String>,
}

/// Parses a handshake line. Capabilities may be an object with `metrics`
/// and `algorithms` lists, or a two-element list `[metrics, algorithms]`.
pub fn parse_hello(line: &str) -> Result<Capabilities> {
    let v: Value = serde_json::from_str(line).map_err(|e| Error::Backend(format!("malformed handshake: {e}")))?;
    if v.get("type").and_then(Value::as_str) != Some("hello") {
        return Err(Error::Backend(format!("expected hello, got: {line}")));
    }
    match v.get("protocol_version").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => {}
        other => return Err(Error::Backend(format!("unsupported protocol version {other:?}"))),
    }
    let strings = |v: Option<&Value>| -> Result<BTreeSet<String>> {
        let arr =
            v.and_then(Value::as_array).ok_or_else(|| Error::Backend("handshake capabilities must be lists".into()))?;
        arr.iter()
            .map(|x| {
                x.as_str().map(str::to_owned).ok_or_else(|| Error::Backend("capability names must be strings".into()))
            })
            .collect()
    };
    let caps = v.get("capabilities").ok_or_else(|| Error::Backend("handshake lacks capabilities".into()))?;
    match caps {
        Value::Object(o) => {
            Ok(Capabilities { metrics: strings(o.get("metrics"))?, algorithms: strings(o.get("algorithms"))? })
        }
        Value::Array(a) if a.len() == 2 => {
            Ok(Capabilities { metrics: strings(a.first())?, algorithms: strings(a.get(1))? })
        }
        _ => Err(Error::Backend("unrecognized capabilities".into())),
    }
}

/// Validates a worker reply against the request it answers.
pub fn parse_result(line: &str, request: &EvaluationRequest) -> EvaluationResult {
    let id = request.request_id.as_str();
    let v: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return EvaluationResult::failed(id, EvalStatus::Failed, format!("malformed reply: {e}")),
    };
    if v.get("type").and_then(Value::as_str) != Some("result") {
        return EvaluationResult::failed(id, EvalStatus::Failed, "reply is not a result record");
    }
    if v.get("request_id").and_then(Value::as_str) != Some(id) {
        return EvaluationResult::failed(id, EvalStatus::Failed, "reply names a different request_id");
    }
    let message = v.get("message").and_then(Value::as_str).map(str::to_owned);
    match v.get("status").and_then(Value::as_str) {
        Some("ok") => {}
        Some("failed") => {
            return EvaluationResult::failed(
                id,
                EvalStatus::Failed,
                message.unwrap_or_else(|| "worker reported failure".into()),
            )
        }
        Some("timeout") => {
            return EvaluationResult::failed(
                id,
                EvalStatus::Timeout,
                message.unwrap_or_else(|| "worker reported timeout".into()),
            )
        }
        _ => return EvaluationResult::failed(id, EvalStatus::Failed, "reply has an invalid status"),
    }
    let scores: Option<Vec<f64>> =
        v.get("fold_scores").and_then(Value::as_array).map(|a| a.iter().filter_map(Value::as_f64).collect());
    let Some(scores) = scores else {
        return EvaluationResult::failed(id, EvalStatus::Failed, "reply lacks fold_scores");
    };
    let raw_len = v["fold_scores"].as_array().map_or(0, Vec::len);
    if scores.len() != raw_len || scores.len() != request.folds {
        return EvaluationResult::failed(
            id,
            EvalStatus::Failed,
            format!("expected {} numeric fold scores", request.folds),
        );
    }
    match EvaluationResult::ok(id, scores) {
        Ok(mut r) => {
            r.message = message;
            r
        }
        Err(e) => EvaluationResult::failed(id, EvalStatus::Failed, e.to_string()),
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Worker {
    fn spawn(command: &[String], handshake_timeout: Duration) -> Result<(Worker, Capabilities)> {
        let (program, args) =
            command.split_first().ok_or_else(|| Error::InvalidConfig("empty worker command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start worker '{program}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut worker = Worker { child, stdin, lines: rx };
        let hello = match worker.lines.recv_timeout(handshake_timeout) {
            Ok(line) => line,
            Err(_) => {
                worker.kill();
                return Err(Error::Backend("worker did not complete the handshake".into()));
            }
        };
        match parse_hello(&hello) {
            Ok(caps) => Ok((worker, caps)),
            Err(e) => {
                worker.kill();
                Err(e)
            }
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct PoolState {
    idle: Vec<Worker>,
    live: usize,
}

/// A pool of worker processes; each handles one request at a time, so
/// up to `max_workers` requests run concurrently.
pub struct ExternalEvaluator {
    command: Vec<String>,
    max_workers: usize,
    /// Extra wait beyond a request's own budget before declaring a timeout.
    pub grace: Duration,
    pub handshake_timeout: Duration,
    capabilities: Mutex<Option<Capabilities>>,
    state: Mutex<PoolState>,
    available: Condvar,
}

impl ExternalEvaluator {
    pub fn new(command: Vec<String>, max_workers: usize) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::InvalidConfig("empty worker command".into()));
        }
        Ok(ExternalEvaluator {
            command,
            max_workers: max_workers.max(1),
            grace: Duration::from_secs(2),
            handshake_timeout: Duration::from_secs(30),
            capabilities: Mutex::new(None),
            state: Mutex::new(PoolState { idle: Vec::new(), live: 0 }),
            available: Condvar::new(),
        })
    }

    /// Starts one worker (if none is running) and returns its advertised capabilities.
    pub fn capabilities(&self) -> Result<Capabilities> {
        if let Some(c) = self.capabilities.lock().unwrap().clone() {
            return Ok(c);
        }
        let w = self.acquire()?;
        self.release(Some(w));
        Ok(self.capabilities.lock().unwrap().clone().unwrap_or_default())
    }

    fn acquire(&self) -> Result<Worker> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(w) = st.idle.pop() {
                return Ok(w);
            }
            if st.live < self.max_workers {
                st.live += 1;
                drop(st);
                return match Worker::spawn(&self.command, self.handshake_timeout) {
                    Ok((w, caps)) => {
                        *self.capabilities.lock().unwrap() = Some(caps);
                        Ok(w)
                    }
                    Err(e) => {
                        self.release(None);
                        Err(e)
                    }
                };
            }
            st = self.available.wait(st).unwrap();
        }
    }

    /// Returns a healthy worker to the pool, or frees the slot of a dead one.
    fn release(&self, worker: Option<Worker>) {
        let mut st = self.state.lock().unwrap();
        match worker {
            Some(w) => st.idle.push(w),
            None => st.live -= 1,
        }
        self.available.notify_one();
    }

    fn unsupported(&self, request: &EvaluationRequest) -> Option<String> {
        let caps = self.capabilities.lock().unwrap();
        let caps = caps.as_ref()?;
        if !caps.metrics.contains(request.metric.as_str()) {
            return Some(format!("worker does not support metric {}", request.metric.as_str()));
        }
        request
            .config
            .stages
            .iter()
            .find(|c| !caps.algorithms.contains(&c.algorithm))
            .map(|c| format!("worker does not support algorithm {}", c.algorithm))
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, request: &EvaluationRequest) -> Result<EvaluationResult> {
        request.check()?;
        let mut worker = self.acquire()?;
        if let Some(msg) = self.unsupported(request) {
            self.release(Some(worker));
            return Ok(EvaluationResult::failed(&request.request_id, EvalStatus::Failed, msg));
        }
        let line = request.to_wire();
        if writeln!(worker.stdin, "{line}").and_then(|_| worker.stdin.flush()).is_err() {
            worker.kill();
            self.release(None);
            return Ok(EvaluationResult::failed(&request.request_id, EvalStatus::Failed, "worker closed its input"));
        }
        let wait = Duration::from_secs_f64(request.time_budget_s) + self.grace;
        match worker.lines.recv_timeout(wait) {
            Ok(reply) => {
                let result = parse_result(&reply, request);
                if reply_is_for(&reply, &request.request_id) {
                    self.release(Some(worker));
                } else {
                    // a desynchronized worker cannot be trusted with the next request
                    worker.kill();
                    self.release(None);
                }
                Ok(result)
            }
            Err(RecvTimeoutError::Timeout) => {
                worker.kill();
                self.release(None);
                Ok(EvaluationResult::failed(
                    &request.request_id,
                    EvalStatus::Timeout,
                    format!("no reply within {:.1}s", wait.as_secs_f64()),
                ))
            }
            Err(RecvTimeoutError::Disconnected) => {
                worker.kill();
                self.release(None);
                Ok(EvaluationResult::failed(&request.request_id, EvalStatus::Failed, "worker exited"))
            }
        }
    }
}

fn reply_is_for(line: &str, id: &str) -> bool {
    serde_json::from_str::<Value>(line)
        .ok()
        .and_then(|v| v.get("request_id").and_then(Value::as_str).map(|s| s == id))
        .unwrap_or(false)
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        if let Ok(mut st) = self.state.lock() {
            for w in st.idle.drain(..) {
                shutdown(w);
            }
        }
    }
}

/// Closes a worker's input, gives it a moment to exit, then kills it.
fn shutdown(worker: Worker) {
    let Worker { mut child, stdin, .. } = worker;
    drop(stdin);
    for _ in 0..20 {
        if matches!(child.try_wait(), Ok(Some(_))) {
            return;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    let _ = child.kill();
    let _ = child.wait();
}
