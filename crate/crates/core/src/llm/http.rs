//! Blocking HTTP client for completions endpoints, plus an offline replay
//! backend fed by the client's request log.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use crate::llm::wire::{CompletionRequest, CompletionResponse};
use crate::llm::{Backend, ClientError, TokenLogprobs};
use crate::rng::sha256_hex;

/// Connection settings for a remote completions endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token; empty disables auth.
    pub api_key_env: String,
    pub top_logprobs: usize,
    pub timeout_secs: u64,
    pub retries: usize,
    pub max_parallel: usize,
    /// When set, every completion is appended here as one JSON line for
    /// offline replay.
    pub replay_log: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:18080".to_string(),
            model: "base".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            top_logprobs: 20,
            timeout_secs: 30,
            retries: 2,
            max_parallel: 4,
            replay_log: None,
        }
    }
}

/// One line of the replay log.
#[derive(Serialize, Deserialize)]
struct ReplayEntry {
    prompt_sha256: String,
    top: Vec<(String, f64)>,
}

pub struct HttpBackend {
    cfg: BackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    log: Option<Mutex<std::fs::File>>,
}

impl HttpBackend {
    /// Builds the client, resolving the API key env var up front so a
    /// missing key fails before any work is scheduled.
    pub fn new(cfg: BackendConfig) -> Result<Self, ClientError> {
        let api_key = if cfg.api_key_env.is_empty() {
            None
        } else {
            Some(
                std::env::var(&cfg.api_key_env)
                    .map_err(|_| ClientError::MissingApiKey(cfg.api_key_env.clone()))?,
            )
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let log = match &cfg.replay_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(path)?,
            )),
            None => None,
        };
        Ok(Self { cfg, api_key, client, log })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn call_once(&self, request: &CompletionRequest) -> Result<TokenLogprobs, ClientError> {
        let mut builder = self.client.post(self.endpoint()).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .text()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            let mut body = body;
            body.truncate(500);
            return Err(ClientError::Http { status, body });
        }
        let parsed: CompletionResponse = serde_json::from_str(&body)
            .map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .first()
            .ok_or_else(|| ClientError::MalformedResponse("no choices".into()))?;
        let payload = choice
            .logprobs
            .as_ref()
            .ok_or_else(|| ClientError::MalformedResponse("no logprobs in choice".into()))?;
        let table = payload
            .top_logprobs
            .first()
            .ok_or_else(|| ClientError::MalformedResponse("empty top_logprobs".into()))?;
        let mut top: Vec<(String, f64)> =
            table.iter().map(|(t, lp)| (t.clone(), *lp)).collect();
        top.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        Ok(TokenLogprobs { top })
    }

    fn log_replay(&self, prompt_text: &str, top: &TokenLogprobs) -> Result<(), ClientError> {
        if let Some(log) = &self.log {
            let entry = ReplayEntry {
                prompt_sha256: sha256_hex(prompt_text.as_bytes()),
                top: top.top.clone(),
            };
            let mut file = log.lock().expect("replay log lock");
            serde_json::to_writer(&mut *file, &entry)?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn retryable(err: &ClientError) -> bool {
    match err {
        ClientError::Transport(_) => true,
        ClientError::Http { status, .. } => *status >= 500 || *status == 429,
        _ => false,
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt_text: &str) -> Result<TokenLogprobs, ClientError> {
        let request = CompletionRequest {
            model: self.cfg.model.clone(),
            prompt: prompt_text.to_string(),
            max_tokens: 1,
            logprobs: self.cfg.top_logprobs as u32,
            temperature: 0.0,
        };
        let mut delay = Duration::from_millis(100);
        let mut attempt = 0;
        loop {
            match self.call_once(&request) {
                Ok(top) => {
                    self.log_replay(prompt_text, &top)?;
                    return Ok(top);
                }
                Err(err) if retryable(&err) && attempt < self.cfg.retries => {
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(Duration::from_secs(2));
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn name(&self) -> String {
        format!("http:{}", self.cfg.model)
    }
}

/// Offline backend serving completions recorded by [`HttpBackend`]'s replay
/// log; looks prompts up by content hash.
pub struct ReplayBackend {
    entries: HashMap<String, TokenLogprobs>,
}

impl ReplayBackend {
    pub fn from_path(path: &Path) -> Result<Self, ClientError> {
        let file = std::fs::File::open(path)?;
        let mut entries = HashMap::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line)?;
            entries.insert(entry.prompt_sha256, TokenLogprobs { top: entry.top });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, prompt_text: &str) -> Result<TokenLogprobs, ClientError> {
        self.entries
            .get(&sha256_hex(prompt_text.as_bytes()))
            .cloned()
            .ok_or(ClientError::ReplayMiss)
    }

    fn name(&self) -> String {
        "replay".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_api_key_env_fails_at_construction() {
        let cfg = BackendConfig {
            api_key_env: "ICL_DEMOD_TEST_KEY_THAT_IS_NOT_SET".to_string(),
            ..BackendConfig::default()
        };
        let err = HttpBackend::new(cfg).err().expect("construction must fail");
        assert!(matches!(err, ClientError::MissingApiKey(v) if v.contains("NOT_SET")));
    }

    #[test]
    fn empty_api_key_env_disables_auth() {
        let cfg = BackendConfig { api_key_env: String::new(), ..BackendConfig::default() };
        let backend = HttpBackend::new(cfg).unwrap();
        assert!(backend.api_key.is_none());
    }

    #[test]
    fn endpoint_normalizes_trailing_slash() {
        let cfg = BackendConfig {
            base_url: "http://localhost:1234/".to_string(),
            api_key_env: String::new(),
            ..BackendConfig::default()
        };
        let backend = HttpBackend::new(cfg).unwrap();
        assert_eq!(backend.endpoint(), "http://localhost:1234/v1/completions");
    }

    #[test]
    fn retryable_classification_covers_transport_and_5xx() {
        assert!(retryable(&ClientError::Transport("reset".into())));
        assert!(retryable(&ClientError::Http { status: 500, body: String::new() }));
        assert!(retryable(&ClientError::Http { status: 429, body: String::new() }));
        assert!(!retryable(&ClientError::Http { status: 400, body: String::new() }));
        assert!(!retryable(&ClientError::MalformedResponse("x".into())));
    }

    #[test]
    fn replay_backend_round_trips_logged_completions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        let cfg = BackendConfig {
            api_key_env: String::new(),
            replay_log: Some(path.clone()),
            ..BackendConfig::default()
        };
        let backend = HttpBackend::new(cfg).unwrap();
        let top = TokenLogprobs { top: vec![("5".into(), -0.1), ("3".into(), -1.6)] };
        backend.log_replay("prompt text", &top).unwrap();
        backend
            .log_replay("other prompt", &TokenLogprobs { top: vec![("0".into(), -0.5)] })
            .unwrap();
        let replay = ReplayBackend::from_path(&path).unwrap();
        assert_eq!(replay.len(), 2);
        assert_eq!(replay.complete("prompt text").unwrap(), top);
        assert!(matches!(
            replay.complete("never seen").unwrap_err(),
            ClientError::ReplayMiss
        ));
    }
}
