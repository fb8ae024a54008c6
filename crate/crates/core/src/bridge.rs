//! Line-delimited JSON protocol to an external model worker process.
//!
//! Model backends whose weights live in another runtime (DinoV2 and SAM2
//! checkpoints) run as a child process. The parent writes one JSON request
//! per line on the child's stdin and reads one JSON response per line from
//! its stdout. Every response carries `"ok": true` or `"ok": false` with an
//! `"error"` string. Bulk data travels through files in a private temp dir.
//!
//! The first request is always `{"op": "load", "backend", "checkpoint",
//! "options"}`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// How to launch and configure one external backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// Program and arguments of the worker.
    pub command: Vec<String>,
    /// Model checkpoint; checked for existence before the worker starts.
    pub checkpoint: PathBuf,
    /// Environment variable that overrides `checkpoint`, for error messages.
    #[serde(default)]
    pub env_var: String,
    /// Backend-specific settings forwarded verbatim in the load request.
    #[serde(default)]
    pub options: Value,
}

pub(crate) struct Worker {
    backend: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    scratch: tempfile::TempDir,
    pub(crate) info: Value,
}

impl Worker {
    pub(crate) fn spawn(backend: &str, config: &BridgeConfig) -> Result<Self> {
        if !config.checkpoint.exists() {
            return Err(Error::MissingWeights {
                backend: backend.to_string(),
                path: config.checkpoint.clone(),
                env_var: config.env_var.clone(),
            });
        }
        let (program, args) = config.command.split_first().ok_or_else(|| Error::Backend {
            backend: backend.to_string(),
            message: "empty worker command".into(),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend {
                backend: backend.to_string(),
                message: format!("cannot start worker `{program}`: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut worker = Self {
            backend: backend.to_string(),
            child,
            stdin,
            stdout,
            scratch: tempfile::tempdir()?,
            info: Value::Null,
        };
        let reply = worker.call(json!({
            "op": "load",
            "backend": backend,
            "checkpoint": config.checkpoint,
            "options": config.options,
        }))?;
        worker.info = reply.get("info").cloned().unwrap_or(Value::Null);
        Ok(worker)
    }

    pub(crate) fn scratch(&self) -> &Path {
        self.scratch.path()
    }

    pub(crate) fn call(&mut self, request: Value) -> Result<Value> {
        let fail = |message: String| Error::Backend {
            backend: self.backend.clone(),
            message,
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| fail(format!("worker stdin closed: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| fail(format!("reading worker reply: {e}")))?;
        if n == 0 {
            return Err(fail("worker exited without replying".into()));
        }
        let reply: Value =
            serde_json::from_str(&reply).map_err(|e| fail(format!("unparseable reply: {e}")))?;
        if reply.get("ok").and_then(Value::as_bool) != Some(true) {
            let msg = reply
                .get("error")
                .and_then(Value::as_str)
                .unwrap_or("unspecified worker error");
            return Err(fail(msg.to_string()));
        }
        Ok(reply)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.stdin.write_all(b"{\"op\":\"shutdown\"}\n");
        let _ = self.stdin.flush();
        if self.child.try_wait().ok().flatten().is_none() {
            // give the worker a moment to exit on its own
            std::thread::sleep(std::time::Duration::from_millis(20));
            if self.child.try_wait().ok().flatten().is_none() {
                let _ = self.child.kill();
            }
        }
        let _ = self.child.wait();
    }
}
