//! Text judges: the prompt templates and the remote request/response client.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Text-quality prompt; `{TEXT}` is replaced by the document text.
pub const TEXT_QUALITY_PROMPT: &str = include_str!("../../resources/text_quality_prompt.txt");
/// Instruction-annotation prompt; `{TEXT}` is replaced by the document text.
pub const INSTRUCTION_PROMPT: &str = include_str!("../../resources/instruction_prompt.txt");

pub const TEXT_PLACEHOLDER: &str = "{TEXT}";

/// Environment variable naming the remote judge endpoint.
pub const JUDGE_URL_ENV: &str = "LATERAL_JUDGE_URL";

pub fn fill_prompt(template: &str, text: &str) -> String {
    template.replace(TEXT_PLACEHOLDER, text)
}

/// Anything that turns a prompt into a completion.
pub trait Judge: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Parse a quality verdict. Only `0` or `1` (surrounding whitespace
/// ignored) is accepted.
pub fn parse_binary(reply: &str) -> Result<bool> {
    match reply.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::Judge(format!(
            "expected `0` or `1`, got {:?}",
            other.chars().take(80).collect::<String>()
        ))),
    }
}

/// Parse an annotated instruction: trimmed, non-empty.
pub fn parse_instruction(reply: &str) -> Result<String> {
    let s = reply.trim();
    if s.is_empty() {
        return Err(Error::Judge("empty instruction".into()));
    }
    Ok(s.to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteJudgeConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Attempts after the first failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Minimum spacing between requests; 0 disables rate limiting.
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    200
}

impl RemoteJudgeConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            min_interval_ms: 0,
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(JUDGE_URL_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .map(Self::new)
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct JudgeResponse {
    text: String,
}

/// HTTP judge: POSTs `{"prompt": ...}` and reads `{"text": ...}`.
pub struct RemoteJudge {
    cfg: RemoteJudgeConfig,
    agent: ureq::Agent,
    last: Mutex<Option<Instant>>,
}

impl RemoteJudge {
    pub fn new(cfg: RemoteJudgeConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Self {
            cfg,
            agent,
            last: Mutex::new(None),
        }
    }

    fn throttle(&self) {
        if self.cfg.min_interval_ms == 0 {
            return;
        }
        let gap = Duration::from_millis(self.cfg.min_interval_ms);
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < gap {
                std::thread::sleep(gap - since);
            }
        }
        *last = Some(Instant::now());
    }

    fn attempt(&self, prompt: &str) -> Result<String> {
        self.throttle();
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .send_json(JudgeRequest { prompt })
            .map_err(|e| Error::Judge(format!("{}: {e}", self.cfg.endpoint)))?;
        let body: JudgeResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Judge(format!("malformed reply: {e}")))?;
        Ok(body.text)
    }
}

impl Judge for RemoteJudge {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut last_err = None;
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            match self.attempt(prompt) {
                Ok(t) => return Ok(t),
                Err(e) => {
                    log::warn!("judge attempt {} failed: {e}", attempt + 1);
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.expect("at least one attempt"))
    }
}
