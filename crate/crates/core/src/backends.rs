//! Generation backends and trainable text classifiers.
//!
//! Vision-language models attach through [`GenerationBackend`]: a remote
//! HTTP endpoint ([`RemoteBackend`]), a local helper process
//! ([`LocalProcessBackend`]), or the deterministic [`MockBackend`] that lets
//! every experiment run on a laptop. Adapter fine-tuning is delegated to the
//! backend; this module only validates the hyperparameters.
//!
//! # Wire format
//!
//! Remote and local-process backends exchange one JSON object per request:
//!
//! ```text
//! request:  {"sample_id": "...", "image_uri": "...", "image_base64": null,
//!            "prompt": "...", "temperature": 0.1, "max_new_tokens": 512,
//!            "stop_sequences": []}
//! response: {"text": "..."}  or  {"refused": true, "reason": "..."}
//! ```
//!
//! Remote backends receive it as an HTTP `POST` to the configured endpoint;
//! a local process receives it on stdin and answers on stdout. Fine-tuning
//! requests go to `<endpoint>/finetune` with
//! `{"pairs": [{"text": "...", "label": "..."}], "config": {...}}` and are
//! acknowledged by any 2xx response. When the environment variable named by
//! [`CREDENTIALS_ENV`] is set, its value is sent as a bearer token. It is
//! never logged.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskSpec;
use crate::text::{self, TermVector};

/// Environment variable holding the bearer token for remote backends.
pub const CREDENTIALS_ENV: &str = "MEMESCOPE_BACKEND_TOKEN";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend `{backend}` unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable {
        backend: String,
        attempts: usize,
        message: String,
    },
    #[error("backend `{backend}` timed out after {attempts} attempt(s)")]
    Timeout { backend: String, attempts: usize },
    #[error("backend `{backend}` refused the request: {reason}")]
    ContentRefused { backend: String, reason: String },
    #[error("backend `{0}` does not support adapter training")]
    BackendLacksTraining(String),
    #[error("invalid hyperparameter {field} = {value}")]
    InvalidHyperparameter { field: String, value: String },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("backend config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: u64,
}

fn default_temperature() -> f64 {
    0.1
}
fn default_max_new_tokens() -> u32 {
    512
}
fn default_timeout() -> u64 {
    120
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            max_new_tokens: default_max_new_tokens(),
            stop_sequences: Vec::new(),
            request_timeout: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_few_shot: bool,
    pub supports_training: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub sample_id: &'a str,
    pub image_ref: &'a str,
    pub prompt: &'a str,
    pub config: &'a GenerationConfig,
}

/// One supervised example handed to adapter training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub text: String,
    pub label: String,
}

pub trait GenerationBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// Upper bound on concurrent `generate` calls.
    fn max_concurrency(&self) -> usize {
        1
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, BackendError>;

    /// Train adapters on `(caption, label)` pairs. The hyperparameters are
    /// already validated.
    fn fine_tune(&mut self, pairs: &[TrainingPair], config: &FineTuneConfig) -> Result<(), BackendError> {
        let _ = (pairs, config);
        Err(BackendError::BackendLacksTraining(self.backend_id().to_string()))
    }
}

/// Validate the request, then forward it.
pub fn generate(
    backend: &dyn GenerationBackend,
    request: &GenerationRequest<'_>,
) -> Result<String, BackendError> {
    if request.prompt.trim().is_empty() {
        return Err(BackendError::EmptyPrompt);
    }
    backend.generate(request)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: usize,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            backoff_ms: 500,
        }
    }
}

enum Attempt {
    Done(String),
    Refused(String),
    Retryable { timeout: bool, message: String },
}

fn with_retries(
    backend: &str,
    policy: RetryPolicy,
    mut attempt: impl FnMut() -> Attempt,
) -> Result<String, BackendError> {
    let attempts = policy.retries + 1;
    let mut last_timeout = false;
    let mut last_message = String::new();
    for i in 0..attempts {
        if i > 0 && policy.backoff_ms > 0 {
            std::thread::sleep(Duration::from_millis(policy.backoff_ms << (i - 1).min(6)));
        }
        match attempt() {
            Attempt::Done(text) => return Ok(text),
            Attempt::Refused(reason) => {
                return Err(BackendError::ContentRefused {
                    backend: backend.to_string(),
                    reason,
                })
            }
            Attempt::Retryable { timeout, message } => {
                log::debug!("backend {backend}: attempt {} failed: {message}", i + 1);
                last_timeout = timeout;
                last_message = message;
            }
        }
    }
    if last_timeout {
        Err(BackendError::Timeout {
            backend: backend.to_string(),
            attempts,
        })
    } else {
        Err(BackendError::BackendUnavailable {
            backend: backend.to_string(),
            attempts,
            message: last_message,
        })
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    sample_id: &'a str,
    image_uri: &'a str,
    image_base64: Option<String>,
    prompt: &'a str,
    temperature: f64,
    max_new_tokens: u32,
    stop_sequences: &'a [String],
}

impl<'a> WireRequest<'a> {
    fn new(request: &GenerationRequest<'a>, inline_images: bool) -> Self {
        use base64::Engine as _;
        let image_base64 = inline_images
            .then(|| std::fs::read(request.image_ref).ok())
            .flatten()
            .map(|bytes| base64::engine::general_purpose::STANDARD.encode(bytes));
        WireRequest {
            sample_id: request.sample_id,
            image_uri: request.image_ref,
            image_base64,
            prompt: request.prompt,
            temperature: request.config.temperature,
            max_new_tokens: request.config.max_new_tokens,
            stop_sequences: &request.config.stop_sequences,
        }
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    refused: bool,
    #[serde(default)]
    reason: Option<String>,
}

impl WireResponse {
    fn into_attempt(self) -> Attempt {
        if self.refused {
            return Attempt::Refused(self.reason.unwrap_or_else(|| "no reason given".into()));
        }
        match self.text {
            Some(text) => Attempt::Done(text),
            None => Attempt::Retryable {
                timeout: false,
                message: "response carried neither text nor refusal".into(),
            },
        }
    }
}

#[derive(Debug, Serialize)]
struct WireFineTune<'a> {
    pairs: &'a [TrainingPair],
    config: &'a FineTuneConfig,
}

/// HTTP backend speaking the JSON wire format above.
pub struct RemoteBackend {
    id: String,
    endpoint: String,
    capabilities: Capabilities,
    max_concurrency: usize,
    retry: RetryPolicy,
    inline_images: bool,
}

impl RemoteBackend {
    pub fn new(id: &str, endpoint: &str, capabilities: Capabilities) -> Self {
        Self {
            id: id.to_string(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            capabilities,
            max_concurrency: 4,
            retry: RetryPolicy::default(),
            inline_images: true,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n.max(1);
        self
    }

    pub fn with_inline_images(mut self, inline: bool) -> Self {
        self.inline_images = inline;
        self
    }

    fn agent(timeout_secs: u64) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn post<T: Serialize>(&self, agent: &ureq::Agent, url: &str, body: &T) -> Result<ureq::http::Response<ureq::Body>, ureq::Error> {
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Ok(token) = std::env::var(CREDENTIALS_ENV) {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        req.send_json(body)
    }
}

fn classify_transport(err: ureq::Error) -> Attempt {
    let timeout = matches!(err, ureq::Error::Timeout(_));
    Attempt::Retryable {
        timeout,
        message: err.to_string(),
    }
}

impl GenerationBackend for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, BackendError> {
        let agent = Self::agent(request.config.request_timeout);
        let body = WireRequest::new(request, self.inline_images);
        with_retries(&self.id, self.retry, || {
            let mut resp = match self.post(&agent, &self.endpoint, &body) {
                Ok(resp) => resp,
                Err(e) => return classify_transport(e),
            };
            let status = resp.status().as_u16();
            if status == 451 {
                let reason = resp.body_mut().read_to_string().unwrap_or_default();
                return Attempt::Refused(reason);
            }
            if !(200..300).contains(&status) {
                return Attempt::Retryable {
                    timeout: status == 408 || status == 504,
                    message: format!("HTTP {status}"),
                };
            }
            match resp.body_mut().read_json::<WireResponse>() {
                Ok(wire) => wire.into_attempt(),
                Err(e) => classify_transport(e),
            }
        })
    }

    fn fine_tune(&mut self, pairs: &[TrainingPair], config: &FineTuneConfig) -> Result<(), BackendError> {
        if !self.capabilities.supports_training {
            return Err(BackendError::BackendLacksTraining(self.id.clone()));
        }
        let agent = Self::agent(24 * 3600);
        let url = format!("{}/finetune", self.endpoint);
        let body = WireFineTune { pairs, config };
        with_retries(&self.id, self.retry, || match self.post(&agent, &url, &body) {
            Ok(resp) if resp.status().is_success() => Attempt::Done(String::new()),
            Ok(resp) => Attempt::Retryable {
                timeout: false,
                message: format!("HTTP {}", resp.status().as_u16()),
            },
            Err(e) => classify_transport(e),
        })
        .map(|_| ())
    }
}

/// Spawns `command` once per request, writing the JSON request to its stdin
/// and reading the JSON response from its stdout.
pub struct LocalProcessBackend {
    id: String,
    command: PathBuf,
    args: Vec<String>,
    capabilities: Capabilities,
    max_concurrency: usize,
    retry: RetryPolicy,
}

impl LocalProcessBackend {
    pub fn new(id: &str, command: impl Into<PathBuf>, args: Vec<String>, capabilities: Capabilities) -> Self {
        Self {
            id: id.to_string(),
            command: command.into(),
            args,
            capabilities,
            max_concurrency: 1,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n.max(1);
        self
    }

    fn run_once(&self, payload: &[u8], timeout: Duration) -> Attempt {
        let mut child = match Command::new(&self.command)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
        {
            Ok(child) => child,
            Err(e) => {
                return Attempt::Retryable {
                    timeout: false,
                    message: format!("spawn {}: {e}", self.command.display()),
                }
            }
        };
        if let Some(mut stdin) = child.stdin.take() {
            if let Err(e) = stdin.write_all(payload) {
                let _ = child.kill();
                let _ = child.wait();
                return Attempt::Retryable {
                    timeout: false,
                    message: format!("write request: {e}"),
                };
            }
        }
        let started = std::time::Instant::now();
        loop {
            match child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if started.elapsed() > timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Attempt::Retryable {
                        timeout: true,
                        message: "process timed out".into(),
                    };
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => {
                    return Attempt::Retryable {
                        timeout: false,
                        message: e.to_string(),
                    }
                }
            }
        }
        let output = match child.wait_with_output() {
            Ok(out) => out,
            Err(e) => {
                return Attempt::Retryable {
                    timeout: false,
                    message: e.to_string(),
                }
            }
        };
        if !output.status.success() {
            return Attempt::Retryable {
                timeout: false,
                message: format!("process exited with {}", output.status),
            };
        }
        match serde_json::from_slice::<WireResponse>(&output.stdout) {
            Ok(wire) => wire.into_attempt(),
            Err(e) => Attempt::Retryable {
                timeout: false,
                message: format!("bad response: {e}"),
            },
        }
    }
}

impl GenerationBackend for LocalProcessBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, BackendError> {
        let payload = serde_json::to_vec(&WireRequest::new(request, false)).expect("request serializes");
        let timeout = Duration::from_secs(request.config.request_timeout.max(1));
        with_retries(&self.id, self.retry, || self.run_once(&payload, timeout))
    }
}

const CANNED_SCENES: [&str; 8] = [
    "The image shows a person looking straight at the camera with an exaggerated expression.",
    "The picture is a screenshot from a well known film scene with bold white lettering.",
    "A cartoon character stands in the centre of the frame, reacting to something off screen.",
    "The meme places two contrasting photos side by side to set up a comparison.",
    "A crowd is visible in the background while the caption sits over the top of the image.",
    "The photo shows an animal in a human-like pose, which the caption plays on.",
    "A celebrity appears in a candid shot, cropped tightly around the face.",
    "The layout follows a familiar reaction-image template with a short punchline.",
];

const CANNED_READINGS: [&str; 6] = [
    "The text and image together suggest the author is mocking an everyday situation.",
    "The caption reframes the picture so that the intended reading is ironic.",
    "Read together, the words and the picture point at a shared cultural reference.",
    "The combination appears to exaggerate a common frustration for comic effect.",
    "The wording is blunt and the image amplifies its tone.",
    "The joke relies on the viewer recognising the situation in the picture.",
];

/// Deterministic offline backend.
///
/// Each response is a pure function of `(sample_id, prompt, config)`: two
/// canned sentences picked by a stable hash, a sentence restating the chosen
/// label, and a final answer-marker line. The label is, in order of
/// precedence: the label memorized for a training caption contained in the
/// prompt (after [`GenerationBackend::fine_tune`]); a scripted answer for the
/// sample id; or a hash-picked entry from the prompt's `- label` lines.
pub struct MockBackend {
    id: String,
    capabilities: Capabilities,
    max_concurrency: usize,
    answer_marker: String,
    scripted: HashMap<String, String>,
    refusals: HashSet<String>,
    unavailable: bool,
    memorized: Vec<TrainingPair>,
    calls: AtomicUsize,
    tuned_with: Mutex<Option<FineTuneConfig>>,
}

impl MockBackend {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            capabilities: Capabilities {
                supports_few_shot: true,
                supports_training: false,
            },
            max_concurrency: 8,
            answer_marker: crate::prompting::DEFAULT_ANSWER_MARKER.to_string(),
            scripted: HashMap::new(),
            refusals: HashSet::new(),
            unavailable: false,
            memorized: Vec::new(),
            calls: AtomicUsize::new(0),
            tuned_with: Mutex::new(None),
        }
    }

    /// Mock that accepts adapter training by memorizing the pairs.
    pub fn trainable(id: &str) -> Self {
        let mut m = Self::new(id);
        m.capabilities.supports_training = true;
        m
    }

    pub fn without_few_shot(mut self) -> Self {
        self.capabilities.supports_few_shot = false;
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n.max(1);
        self
    }

    pub fn with_answer_marker(mut self, marker: &str) -> Self {
        self.answer_marker = marker.to_string();
        self
    }

    /// Answer `label` (verbatim, may be several comma-separated labels) for
    /// `sample_id`.
    pub fn with_scripted<I, K, V>(mut self, answers: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        self.scripted
            .extend(answers.into_iter().map(|(k, v)| (k.into(), v.into())));
        self
    }

    pub fn with_refusals<I: IntoIterator<Item = S>, S: Into<String>>(mut self, ids: I) -> Self {
        self.refusals.extend(ids.into_iter().map(Into::into));
        self
    }

    /// Every call fails as if the endpoint were unreachable.
    pub fn unavailable(mut self) -> Self {
        self.unavailable = true;
        self
    }

    /// Number of `generate` calls so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn tuned_with(&self) -> Option<FineTuneConfig> {
        self.tuned_with.lock().expect("lock").clone()
    }

    /// Label of the longest memorized caption that appears quoted in the
    /// prompt; the first such pair wins ties.
    fn memorized_label(&self, prompt: &str) -> Option<&str> {
        let mut best: Option<&TrainingPair> = None;
        for pair in &self.memorized {
            let caption = pair.text.trim();
            if caption.is_empty() || !prompt.contains(&format!("\"{caption}\"")) {
                continue;
            }
            if best.map_or(true, |b| caption.len() > b.text.trim().len()) {
                best = Some(pair);
            }
        }
        best.map(|p| p.label.as_str())
    }

    fn label_lines(prompt: &str) -> Vec<&str> {
        let mut seen = HashSet::new();
        prompt
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .map(str::trim)
            .filter(|l| !l.is_empty() && seen.insert(*l))
            .collect()
    }
}

impl GenerationBackend for MockBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.unavailable {
            return Err(BackendError::BackendUnavailable {
                backend: self.id.clone(),
                attempts: 1,
                message: "mock configured as unavailable".into(),
            });
        }
        if self.refusals.contains(request.sample_id) {
            return Err(BackendError::ContentRefused {
                backend: self.id.clone(),
                reason: "mock refusal".into(),
            });
        }
        let cfg = request.config;
        let h = text::stable_hash64(&[
            request.sample_id,
            request.prompt,
            &cfg.temperature.to_bits().to_string(),
            &cfg.max_new_tokens.to_string(),
        ]);
        let scene = CANNED_SCENES[(h % CANNED_SCENES.len() as u64) as usize];
        let reading = CANNED_READINGS[((h >> 16) % CANNED_READINGS.len() as u64) as usize];

        let answer = if !self.memorized.is_empty() {
            self.memorized_label(request.prompt).map(str::to_string)
        } else if let Some(s) = self.scripted.get(request.sample_id) {
            Some(s.clone())
        } else {
            let options = Self::label_lines(request.prompt);
            (!options.is_empty()).then(|| options[((h >> 32) % options.len() as u64) as usize].to_string())
        };
        let out = match answer {
            Some(answer) => format!(
                "{scene} {reading} Overall the meme comes across as {}.\n{} {answer}",
                answer.replace('_', " "),
                self.answer_marker
            ),
            None => format!("{scene} {reading} It is hard to say which category fits."),
        };
        Ok(out)
    }

    fn fine_tune(&mut self, pairs: &[TrainingPair], config: &FineTuneConfig) -> Result<(), BackendError> {
        if !self.capabilities.supports_training {
            return Err(BackendError::BackendLacksTraining(self.id.clone()));
        }
        self.memorized = pairs
            .iter()
            .map(|p| TrainingPair {
                text: p.text.trim().replace('\n', " "),
                label: p.label.clone(),
            })
            .collect();
        *self.tuned_with.lock().expect("lock") = Some(config.clone());
        Ok(())
    }
}

/// Which kind of backend a plugin entry describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Local,
    Remote,
}

/// One backend plugin entry from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub backend_id: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "yes")]
    pub supports_few_shot: bool,
    #[serde(default)]
    pub supports_training: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub generation: GenerationConfig,
}

fn default_max_concurrency() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl BackendSpec {
    /// Built-in offline backends addressable by name: `mock`,
    /// `mock-trainable`, and `ib-like` / `lm-like` (no few-shot support).
    pub fn builtin(name: &str) -> Option<Self> {
        let base = |few_shot: bool, training: bool| BackendSpec {
            backend_id: name.to_string(),
            kind: BackendKind::Mock,
            endpoint: None,
            command: None,
            args: Vec::new(),
            max_concurrency: 8,
            supports_few_shot: few_shot,
            supports_training: training,
            retry: RetryPolicy::default(),
            generation: GenerationConfig::default(),
        };
        match name {
            "mock" => Some(base(true, false)),
            "mock-trainable" => Some(base(true, true)),
            "ib-like" | "lm-like" => Some(base(false, false)),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<Box<dyn GenerationBackend>, BackendError> {
        let caps = Capabilities {
            supports_few_shot: self.supports_few_shot,
            supports_training: self.supports_training,
        };
        Ok(match self.kind {
            BackendKind::Mock => {
                let mut m = MockBackend::new(&self.backend_id).with_max_concurrency(self.max_concurrency);
                m.capabilities = caps;
                Box::new(m)
            }
            BackendKind::Remote => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| BackendError::Config(format!("{}: remote backend needs an endpoint", self.backend_id)))?;
                Box::new(
                    RemoteBackend::new(&self.backend_id, endpoint, caps)
                        .with_retry(self.retry)
                        .with_max_concurrency(self.max_concurrency),
                )
            }
            BackendKind::Local => {
                let command = self
                    .command
                    .as_deref()
                    .ok_or_else(|| BackendError::Config(format!("{}: local backend needs a command", self.backend_id)))?;
                Box::new(
                    LocalProcessBackend::new(&self.backend_id, command, self.args.clone(), caps)
                        .with_retry(self.retry)
                        .with_max_concurrency(self.max_concurrency),
                )
            }
        })
    }
}

/// Shipped default hyperparameters.
pub const DEFAULT_FINETUNE: &str = include_str!("../data/finetune.toml");

fn finetune_defaults() -> &'static FineTuneSettings {
    static DEFAULTS: OnceLock<FineTuneSettings> = OnceLock::new();
    DEFAULTS.get_or_init(|| toml::from_str(DEFAULT_FINETUNE).expect("shipped finetune.toml parses"))
}

/// Partially specified adapter hyperparameters, as read from config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSettings {
    pub rank: Option<i64>,
    pub alpha: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<i64>,
    pub optimizer_id: Option<String>,
    pub target_layer_groups: Option<Vec<String>>,
}

/// Validated adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub rank: u32,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: u32,
    /// Passed through to the backend untouched.
    pub optimizer_id: String,
    pub target_layer_groups: Vec<String>,
}

impl FineTuneConfig {
    pub fn alpha_rank_ratio(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        validate_finetune_config(&FineTuneSettings::default()).expect("defaults are valid")
    }
}

impl From<&FineTuneConfig> for FineTuneSettings {
    fn from(cfg: &FineTuneConfig) -> Self {
        FineTuneSettings {
            rank: Some(cfg.rank as i64),
            alpha: Some(cfg.alpha),
            learning_rate: Some(cfg.learning_rate),
            epochs: Some(cfg.epochs as i64),
            optimizer_id: Some(cfg.optimizer_id.clone()),
            target_layer_groups: Some(cfg.target_layer_groups.clone()),
        }
    }
}

/// Fill unset fields from [`DEFAULT_FINETUNE`] and reject non-positive
/// values.
pub fn validate_finetune_config(settings: &FineTuneSettings) -> Result<FineTuneConfig, BackendError> {
    let invalid = |field: &str, value: String| BackendError::InvalidHyperparameter {
        field: field.to_string(),
        value,
    };
    let positive_int = |field: &str, v: Option<i64>, default: u32| -> Result<u32, BackendError> {
        match v {
            None => Ok(default),
            Some(v) if v > 0 && v <= u32::MAX as i64 => Ok(v as u32),
            Some(v) => Err(invalid(field, v.to_string())),
        }
    };
    let positive_real = |field: &str, v: Option<f64>, default: f64| -> Result<f64, BackendError> {
        match v {
            None => Ok(default),
            Some(v) if v.is_finite() && v > 0.0 => Ok(v),
            Some(v) => Err(invalid(field, v.to_string())),
        }
    };
    let d = finetune_defaults();
    let rank = positive_int("rank", settings.rank.or(d.rank), 16)?;
    let alpha = positive_real("alpha", settings.alpha.or(d.alpha), 32.0)?;
    let learning_rate = positive_real("learning_rate", settings.learning_rate.or(d.learning_rate), 2e-4)?;
    let epochs = positive_int("epochs", settings.epochs.or(d.epochs), 2)?;
    let target_layer_groups = settings
        .target_layer_groups
        .clone()
        .or_else(|| d.target_layer_groups.clone())
        .unwrap_or_default();
    if target_layer_groups.is_empty() {
        return Err(invalid("target_layer_groups", "[]".into()));
    }
    Ok(FineTuneConfig {
        rank,
        alpha,
        learning_rate,
        epochs,
        optimizer_id: settings
            .optimizer_id
            .clone()
            .or_else(|| d.optimizer_id.clone())
            .unwrap_or_else(|| "adamw_8bit".to_string()),
        target_layer_groups,
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training label `{0}` is not in the task vocabulary")]
    UnknownLabel(String),
    #[error("classifier has not been trained")]
    NotTrained,
}

/// A text classifier trained on (text, label) pairs.
pub trait TrainableClassifier: Send + Sync {
    fn classifier_id(&self) -> &str;

    fn train(&mut self, train_set: &[(String, String)], task: &TaskSpec, seed: u64) -> Result<(), ClassifierError>;

    /// Always returns a vocabulary label.
    fn predict(&self, text: &str) -> Result<String, ClassifierError>;
}

#[derive(Debug, Clone)]
struct Trained {
    labels: Vec<String>,
    /// Centroid per label; `None` for labels absent from training data.
    centroids: Vec<Option<TermVector>>,
    constant: Option<String>,
}

/// Nearest-centroid classifier over length-normalized term-frequency
/// vectors. Fully deterministic; the seed is accepted for interface
/// compatibility and unused.
#[derive(Debug, Clone, Default)]
pub struct ReferenceClassifier {
    state: Option<Trained>,
}

impl ReferenceClassifier {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TrainableClassifier for ReferenceClassifier {
    fn classifier_id(&self) -> &str {
        "tf-centroid"
    }

    fn train(&mut self, train_set: &[(String, String)], task: &TaskSpec, _seed: u64) -> Result<(), ClassifierError> {
        if train_set.is_empty() {
            return Err(ClassifierError::EmptyTrainSet);
        }
        let mut indexed = train_set
            .iter()
            .map(|(text, label)| {
                task.label_index(label)
                    .map(|idx| (idx, text.as_str()))
                    .ok_or_else(|| ClassifierError::UnknownLabel(label.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        // Summation order fixed so the centroids depend only on the multiset.
        indexed.sort_unstable();
        let mut sums: Vec<Option<TermVector>> = vec![None; task.labels.len()];
        for (idx, text) in indexed {
            let vector = TermVector::from_text(text).normalized();
            sums[idx].get_or_insert_with(TermVector::default).add_assign(&vector);
        }
        let present: Vec<usize> = (0..sums.len()).filter(|&i| sums[i].is_some()).collect();
        let constant = if present.len() == 1 {
            log::warn!(
                "training set for {} holds a single class; classifier is constant",
                task.task_id
            );
            Some(task.labels[present[0]].clone())
        } else {
            None
        };
        self.state = Some(Trained {
            labels: task.labels.clone(),
            centroids: sums,
            constant,
        });
        Ok(())
    }

    fn predict(&self, text: &str) -> Result<String, ClassifierError> {
        let state = self.state.as_ref().ok_or(ClassifierError::NotTrained)?;
        if let Some(label) = &state.constant {
            return Ok(label.clone());
        }
        let query = TermVector::from_text(text);
        if query.is_empty() {
            log::debug!("empty query text; falling back to the first label");
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, centroid) in state.centroids.iter().enumerate() {
            let score = centroid.as_ref().map_or(0.0, |c| query.cosine(c));
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        Ok(state.labels[best].clone())
    }
}

/// Train the reference classifier.
pub fn train_classifier(
    train_set: &[(String, String)],
    task: &TaskSpec,
    seed: u64,
) -> Result<ReferenceClassifier, ClassifierError> {
    let mut clf = ReferenceClassifier::new();
    clf.train(train_set, task, seed)?;
    Ok(clf)
}

/// Named backend configurations, e.g. loaded from the `[[backends]]` array
/// of a config file.
pub fn index_specs(specs: &[BackendSpec]) -> BTreeMap<String, BackendSpec> {
    specs.iter().map(|s| (s.backend_id.clone(), s.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskId;

    fn req<'a>(id: &'a str, prompt: &'a str, cfg: &'a GenerationConfig) -> GenerationRequest<'a> {
        GenerationRequest {
            sample_id: id,
            image_ref: "x.jpg",
            prompt,
            config: cfg,
        }
    }

    #[test]
    fn generation_defaults() {
        let cfg = GenerationConfig::default();
        assert_eq!(cfg.temperature, 0.1);
    }

    #[test]
    fn mock_is_deterministic() {
        let cfg = GenerationConfig::default();
        let prompt = "Possible labels:\n- positive\n- negative\nAnswer:";
        let a = MockBackend::new("mock");
        let b = MockBackend::new("mock");
        let out = a.generate(&req("s1", prompt, &cfg)).unwrap();
        assert_eq!(out, b.generate(&req("s1", prompt, &cfg)).unwrap());
        assert_eq!(a.calls(), 1);
        assert!(out.lines().last().unwrap().starts_with("Answer: "));
    }

    #[test]
    fn canned_text_never_parses_as_a_label() {
        use crate::corpus::{TaskId, TaskSpec};
        use crate::prompting::{parse_label, DEFAULT_ANSWER_MARKER};
        for scene in CANNED_SCENES {
            for reading in CANNED_READINGS {
                let text = format!("{scene} {reading} It is hard to say which category fits.");
                for task in TaskId::ALL {
                    let parsed = parse_label(&text, TaskSpec::get(task), DEFAULT_ANSWER_MARKER);
                    assert!(parsed.is_unparsed(), "{task}: {text}");
                }
            }
        }
    }

    #[test]
    fn mock_failures() {
        let cfg = GenerationConfig::default();
        let m = MockBackend::new("m").with_refusals(["bad"]);
        assert!(matches!(m.generate(&req("bad", "p", &cfg)), Err(BackendError::ContentRefused { .. })));
        let m = MockBackend::new("m").unavailable();
        assert!(matches!(m.generate(&req("a", "p", &cfg)), Err(BackendError::BackendUnavailable { .. })));
        assert_eq!(generate(&m, &req("a", "  ", &cfg)).unwrap_err(), BackendError::EmptyPrompt);
    }

    #[test]
    fn unreachable_remote_reports_unavailable() {
        let backend = RemoteBackend::new(
            "remote",
            "http://127.0.0.1:9/generate",
            Capabilities {
                supports_few_shot: true,
                supports_training: false,
            },
        )
        .with_retry(RetryPolicy {
            retries: 2,
            backoff_ms: 1,
        });
        let cfg = GenerationConfig {
            request_timeout: 2,
            ..Default::default()
        };
        match backend.generate(&req("a", "prompt", &cfg)) {
            Err(BackendError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn finetune_defaults_and_validation() {
        let cfg = validate_finetune_config(&FineTuneSettings::default()).unwrap();
        assert_eq!((cfg.rank, cfg.alpha, cfg.learning_rate, cfg.epochs), (16, 32.0, 2e-4, 2));
        assert_eq!(cfg.optimizer_id, "adamw_8bit");
        assert_eq!(cfg.target_layer_groups.len(), 6);
        assert!(cfg.target_layer_groups.iter().any(|g| g == "q_proj"));
        let err = validate_finetune_config(&FineTuneSettings {
            rank: Some(0),
            ..Default::default()
        })
        .unwrap_err();
        assert_eq!(
            err,
            BackendError::InvalidHyperparameter {
                field: "rank".into(),
                value: "0".into()
            }
        );
        let cfg = validate_finetune_config(&FineTuneSettings {
            rank: Some(8),
            alpha: Some(32.0),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.alpha_rank_ratio(), 4.0);
        assert_eq!(validate_finetune_config(&(&cfg).into()).unwrap(), cfg);
        for bad in [
            FineTuneSettings { alpha: Some(-1.0), ..Default::default() },
            FineTuneSettings { learning_rate: Some(0.0), ..Default::default() },
            FineTuneSettings { epochs: Some(-2), ..Default::default() },
        ] {
            assert!(validate_finetune_config(&bad).is_err());
        }
    }

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(t, l)| (t.to_string(), l.to_string())).collect()
    }

    #[test]
    fn centroid_classifier_hand_example() {
        let task = TaskSpec::get(TaskId::SN);
        let clf = train_classifier(&pairs(&[("happy joyful", "positive"), ("sad awful", "negative")]), task, 0).unwrap();
        assert_eq!(clf.predict("joyful day").unwrap(), "positive");
        assert_eq!(clf.predict("sad awful").unwrap(), "negative");
        assert_eq!(clf.predict("zebra").unwrap(), "positive");
        assert_eq!(clf.predict("").unwrap(), "positive");
    }

    #[test]
    fn centroid_classifier_degenerate_cases() {
        let task = TaskSpec::get(TaskId::SN);
        let clf = train_classifier(&pairs(&[("a b", "negative"), ("c", "negative")]), task, 0).unwrap();
        assert_eq!(clf.predict("anything").unwrap(), "negative");
        assert_eq!(train_classifier(&[], task, 0).unwrap_err(), ClassifierError::EmptyTrainSet);
        assert_eq!(ReferenceClassifier::new().predict("x").unwrap_err(), ClassifierError::NotTrained);
        assert!(matches!(
            train_classifier(&pairs(&[("x", "funny")]), task, 0),
            Err(ClassifierError::UnknownLabel(_))
        ));
    }

    #[test]
    fn builtin_specs() {
        let ib = BackendSpec::builtin("ib-like").unwrap().build().unwrap();
        assert!(!ib.capabilities().supports_few_shot);
        assert!(BackendSpec::builtin("mock-trainable").unwrap().build().unwrap().capabilities().supports_training);
        assert!(BackendSpec::builtin("nope").is_none());
    }
}
