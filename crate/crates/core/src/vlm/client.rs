//! Chat-completion client with bounded retries and an audit log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use log::{info, warn};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::prompt::Prompt;
use crate::config::{VlmConfig, VlmMode, VLM_KEY_ENV};
use crate::error::{Error, Result};

/// Returned instead of a reply when the VLM stage is disabled.
pub const VLM_DISABLED: &str = "vlm-disabled";
pub const AUDIT_FILE: &str = "vlm_audit.jsonl";

/// Anything that can answer a prompt for one view.
pub trait VlmBackend: Sync {
    fn query(&self, view: usize, prompt: &Prompt) -> Result<String>;
}

/// Append-only JSON-lines log of every request and response.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl AuditLog {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(AUDIT_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(AuditLog {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&self, entry: &Value) -> Result<()> {
        let mut f = self.file.lock().expect("audit log poisoned");
        writeln!(f, "{entry}").map_err(|e| Error::io(&self.path, e))
    }
}

/// HTTP backend speaking the common chat-completion schema.
pub struct HttpVlm {
    config: VlmConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    audit: Option<AuditLog>,
}

impl HttpVlm {
    /// Reads the credential from `MASKPRIOR_VLM_KEY`.
    pub fn from_env(config: VlmConfig, audit: Option<AuditLog>) -> Result<Self> {
        let key = std::env::var(VLM_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(config, key, audit)
    }

    pub fn new(config: VlmConfig, api_key: Option<String>, audit: Option<AuditLog>) -> Result<Self> {
        if config.mode == VlmMode::Endpoint && config.url.is_none() {
            return Err(Error::InvalidArgument("vlm endpoint mode needs a url".into()));
        }
        if config.mode == VlmMode::Endpoint && api_key.is_none() {
            warn!("{VLM_KEY_ENV} is not set; sending requests without authorization");
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Vlm {
                status: None,
                message: e.to_string(),
            })?;
        Ok(HttpVlm {
            config,
            api_key,
            client,
            audit,
        })
    }

    fn request_body(&self, prompt: &Prompt) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD.encode(&prompt.image_png);
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt.text},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}
                ]
            }]
        })
    }

    fn audit(&self, view: usize, attempt: u32, prompt: &Prompt, status: Option<u16>, outcome: &str) {
        let Some(log) = &self.audit else { return };
        let entry = json!({
            "view": view,
            "attempt": attempt,
            "url": self.config.url,
            "model": self.config.model,
            "authorization": self.api_key.as_ref().map(|_| "Bearer [REDACTED]"),
            "prompt": prompt.text,
            "image_png_bytes": prompt.image_png.len(),
            "image_png_sha256": hex(&Sha256::digest(&prompt.image_png)),
            "status": status,
            "response": outcome,
        });
        if let Err(e) = log.record(&entry) {
            warn!("failed to write vlm audit entry: {e}");
        }
    }

    fn attempt(&self, body: &Value) -> Result<String> {
        let url = self.config.url.as_deref().expect("checked in new");
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| self.transport_error(e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.transport_error(e))?;
        if !status.is_success() {
            return Err(Error::Vlm {
                status: Some(status.as_u16()),
                message: truncate(&text, 200),
            });
        }
        extract_content(&text)
    }

    fn transport_error(&self, e: reqwest::Error) -> Error {
        if e.is_timeout() {
            Error::VlmTimeout(Duration::from_secs_f64(self.config.timeout_secs))
        } else {
            Error::Vlm {
                status: e.status().map(|s| s.as_u16()),
                message: e.to_string(),
            }
        }
    }
}

impl VlmBackend for HttpVlm {
    fn query(&self, view: usize, prompt: &Prompt) -> Result<String> {
        query_vlm(self, view, prompt)
    }
}

/// Sends the prompt, retrying up to `max_attempts` times with exponential
/// backoff. With mode `off` no request is made and [`VLM_DISABLED`] is
/// returned.
pub fn query_vlm(backend: &HttpVlm, view: usize, prompt: &Prompt) -> Result<String> {
    if backend.config.mode == VlmMode::Off {
        return Ok(VLM_DISABLED.to_string());
    }
    let body = backend.request_body(prompt);
    let mut delay = Duration::from_millis(backend.config.backoff_ms);
    let mut last = None;
    for attempt in 1..=backend.config.max_attempts {
        match backend.attempt(&body) {
            Ok(text) => {
                backend.audit(view, attempt, prompt, Some(200), &text);
                info!("vlm reply for view {view} after {attempt} attempt(s)");
                return Ok(text);
            }
            Err(e) => {
                let status = match &e {
                    Error::Vlm { status, .. } => *status,
                    _ => None,
                };
                backend.audit(view, attempt, prompt, status, &format!("error: {e}"));
                warn!("vlm attempt {attempt} for view {view} failed: {e}");
                last = Some(e);
                if attempt < backend.config.max_attempts {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Pulls `choices[0].message.content` out of a chat-completion reply.
/// Content given as a list of parts is concatenated.
pub fn extract_content(body: &str) -> Result<String> {
    let bad = |m: &str| Error::Vlm {
        status: Some(200),
        message: m.to_string(),
    };
    let v: Value = serde_json::from_str(body).map_err(|e| bad(&format!("reply is not json: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("\n")),
        _ => Err(bad("reply has no choices[0].message.content")),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Backend that never answers; used when the stage is disabled.
#[derive(Debug, Default, Clone, Copy)]
pub struct DisabledVlm;

impl VlmBackend for DisabledVlm {
    fn query(&self, _view: usize, _prompt: &Prompt) -> Result<String> {
        Ok(VLM_DISABLED.to_string())
    }
}
