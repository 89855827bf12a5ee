//! HTTP clients for the chat-completions and image-generation protocols.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::parse::{parse_diagnosis, parse_evaluation, parse_plan, parse_reflection, parse_validity};
use super::templates::{render, PromptTemplates};
use super::{Analyzer, CallSite, EvaluateRequest, GatewayError, Generator, ReflectRequest, TextRole};
use crate::image_store::{sniff_mime, ImageStore};
use crate::trajectory::{EvaluationResult, FailureCause, ImageRef, InstructionText, ReflectionText};

pub const ANALYZER_URL_ENV: &str = "FORGE_ANALYZER_URL";
pub const ANALYZER_KEY_ENV: &str = "FORGE_ANALYZER_KEY";
pub const GENERATOR_URL_ENV: &str = "FORGE_GENERATOR_URL";
pub const GENERATOR_KEY_ENV: &str = "FORGE_GENERATOR_KEY";

const MAX_BODY_BYTES: u64 = 128 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Bearer token. Normally injected from the environment rather than the
    /// config file.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            api_key: None,
            model: String::new(),
            timeout_secs: 120,
            max_retries: 3,
            backoff_base_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    /// Fills `base_url` and `api_key` from the given environment variables
    /// when they are set.
    pub fn with_env(mut self, url_var: &str, key_var: &str) -> Self {
        if let Ok(url) = std::env::var(url_var) {
            self.base_url = url;
        }
        if let Ok(key) = std::env::var(key_var) {
            self.api_key = Some(key);
        }
        self
    }

    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

/// Counting gate bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> GatePass<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GatePass(self)
    }
}

struct GatePass<'a>(&'a Gate);

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// JSON-over-HTTP transport with bounded exponential-backoff retries on
/// 429, 5xx and connection failures.
struct Transport {
    agent: ureq::Agent,
    config: EndpointConfig,
    gate: Gate,
    backoffs: AtomicU64,
}

impl Transport {
    fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, gate: Gate::new(config.max_in_flight), config, backoffs: AtomicU64::new(0) }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_json(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(path);
        let _pass = self.gate.acquire();
        let mut retry = 0;
        loop {
            let mut req = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(key) = &self.config.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            let outcome = req.send_json(body).and_then(|mut resp| {
                let status = resp.status().as_u16();
                resp.body_mut().with_config().limit(MAX_BODY_BYTES).read_to_string().map(|text| (status, text))
            });
            let retryable = match outcome {
                Ok((status, text)) if (200..300).contains(&status) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| GatewayError::MalformedResponse(format!("{url}: body is not JSON: {e}")));
                }
                Ok((status, text)) if status == 429 || status >= 500 => format!("HTTP {status}: {}", snippet(&text)),
                Ok((status, text)) => {
                    return Err(GatewayError::Client(format!("{url}: HTTP {status}: {}", snippet(&text))));
                }
                Err(e) => e.to_string(),
            };
            if retry >= self.config.max_retries {
                return Err(GatewayError::Client(format!(
                    "{url}: giving up after {} attempts: {retryable}",
                    retry + 1
                )));
            }
            let wait = self.config.backoff(retry);
            warn!(%url, retry, ?wait, "retrying: {retryable}");
            self.backoffs.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(wait);
            retry += 1;
        }
    }

    fn get_bytes(&self, url: &str) -> Result<Vec<u8>, GatewayError> {
        let mut resp = self.agent.get(url).call().map_err(|e| GatewayError::Client(format!("{url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(GatewayError::Client(format!("{url}: HTTP {}", resp.status().as_u16())));
        }
        resp.body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_vec()
            .map_err(|e| GatewayError::Client(format!("{url}: {e}")))
    }
}

fn snippet(text: &str) -> &str {
    let end = text.char_indices().nth(200).map_or(text.len(), |(i, _)| i);
    &text[..end]
}

/// Remote URLs pass through; readable local files become data URLs.
fn image_url(image: &ImageRef) -> String {
    if image.uri.starts_with("http://") || image.uri.starts_with("https://") || image.uri.starts_with("data:") {
        return image.uri.clone();
    }
    let path = image.uri.strip_prefix("file://").unwrap_or(&image.uri);
    match std::fs::read(path) {
        Ok(bytes) => format!("data:{};base64,{}", sniff_mime(&bytes), B64.encode(&bytes)),
        Err(_) => image.uri.clone(),
    }
}

pub struct LiveAnalyzer {
    id: String,
    transport: Transport,
    templates: PromptTemplates,
    max_plan_steps: u32,
}

impl LiveAnalyzer {
    pub fn new(config: EndpointConfig, templates: PromptTemplates, max_plan_steps: u32) -> Self {
        Self { id: format!("analyzer:{}", config.model), transport: Transport::new(config), templates, max_plan_steps }
    }

    /// Number of backoff waits performed so far.
    pub fn backoff_waits(&self) -> u64 {
        self.transport.backoffs.load(Ordering::SeqCst)
    }

    fn chat(&self, prompt: String, images: &[&ImageRef]) -> Result<String, GatewayError> {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        content.extend(images.iter().map(|i| json!({"type": "image_url", "image_url": {"url": image_url(i)}})));
        let body = json!({
            "model": self.transport.config.model,
            "messages": [{"role": "user", "content": content}],
        });
        let reply = self.transport.post_json("/v1/chat/completions", &body)?;
        let text = chat_reply_text(&reply)?;
        debug!(len = text.len(), "analyzer reply");
        Ok(text)
    }
}

/// Extracts `choices[0].message.content`, joining text parts if the content
/// is an array.
pub fn chat_reply_text(reply: &Value) -> Result<String, GatewayError> {
    match reply.pointer("/choices/0/message/content") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Array(parts)) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(GatewayError::MalformedResponse("reply has no choices[0].message.content".into())),
    }
}

fn history_text(history: &[EvaluationResult]) -> String {
    history
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let [a, b, c, d] = e.scores.as_array();
            format!("attempt {}: instruction={a} consistency={b} quality={c} knowledge={d}; {}", i + 1, e.rationale)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl Analyzer for LiveAnalyzer {
    fn id(&self) -> &str {
        &self.id
    }

    fn evaluate(&self, req: &EvaluateRequest<'_>) -> Result<EvaluationResult, GatewayError> {
        let threshold = req.pass_threshold.to_string();
        let prompt = render(
            &self.templates.evaluate,
            &[("instruction", req.instruction), ("threshold", &threshold)],
        );
        let mut images: Vec<&ImageRef> = req.references.iter().collect();
        images.push(req.image);
        parse_evaluation(&self.chat(prompt, &images)?, req.pass_threshold)
    }

    fn reflect(&self, req: &ReflectRequest<'_>) -> Result<ReflectionText, GatewayError> {
        let evaluation = serde_json::to_string(req.evaluation).unwrap_or_default();
        let prompt = render(
            &self.templates.reflect,
            &[("instruction", req.instruction), ("evaluation", &evaluation), ("rationale", &req.evaluation.rationale)],
        );
        let mut images: Vec<&ImageRef> = req.references.iter().collect();
        images.push(req.image);
        parse_reflection(&self.chat(prompt, &images)?)
    }

    fn diagnose(&self, instruction: &str, history: &[EvaluationResult]) -> Result<FailureCause, GatewayError> {
        let history = history_text(history);
        let prompt = render(&self.templates.diagnose, &[("instruction", instruction), ("history", &history)]);
        parse_diagnosis(&self.chat(prompt, &[])?)
    }

    fn plan(
        &self,
        instruction: &str,
        references: &[ImageRef],
        history: &[EvaluationResult],
    ) -> Result<Vec<InstructionText>, GatewayError> {
        let history = history_text(history);
        let max_steps = self.max_plan_steps.to_string();
        let prompt = render(
            &self.templates.plan,
            &[("instruction", instruction), ("history", &history), ("max_steps", &max_steps)],
        );
        let images: Vec<&ImageRef> = references.iter().collect();
        parse_plan(&self.chat(prompt, &images)?)
    }

    fn validate_text(&self, text: &str, role: TextRole) -> Result<f64, GatewayError> {
        let prompt = render(&self.templates.validate_text, &[("text", text), ("role", role.as_str())]);
        parse_validity(&self.chat(prompt, &[])?)
    }
}

pub struct LiveGenerator {
    id: String,
    transport: Transport,
    images: ImageStore,
}

impl LiveGenerator {
    pub fn new(config: EndpointConfig, images: ImageStore) -> Self {
        Self { id: format!("generator:{}", config.model), transport: Transport::new(config), images }
    }

    pub fn backoff_waits(&self) -> u64 {
        self.transport.backoffs.load(Ordering::SeqCst)
    }

    fn request(&self, prompt: &str, inputs: &[&ImageRef]) -> Result<ImageRef, GatewayError> {
        let (path, body) = if inputs.is_empty() {
            ("/v1/images/generations", json!({"model": self.transport.config.model, "prompt": prompt}))
        } else {
            let urls: Vec<String> = inputs.iter().map(|i| image_url(i)).collect();
            ("/v1/images/edits", json!({"model": self.transport.config.model, "prompt": prompt, "image": urls}))
        };
        let reply = self.transport.post_json(path, &body)?;
        let first = reply
            .pointer("/data/0")
            .ok_or_else(|| GatewayError::MalformedResponse("image reply has no data[0]".into()))?;
        let bytes = if let Some(b64) = first.get("b64_json").and_then(Value::as_str) {
            B64.decode(b64.trim()).map_err(|e| GatewayError::MalformedResponse(format!("b64_json: {e}")))?
        } else if let Some(url) = first.get("url").and_then(Value::as_str) {
            self.transport.get_bytes(url)?
        } else {
            return Err(GatewayError::MalformedResponse("data[0] has neither url nor b64_json".into()));
        };
        self.images.put(&bytes).map_err(|e| GatewayError::Client(format!("persisting image: {e}")))
    }
}

impl Generator for LiveGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, instruction: &str, references: &[ImageRef], _site: CallSite) -> Result<ImageRef, GatewayError> {
        self.request(instruction, &references.iter().collect::<Vec<_>>())
    }

    fn revise(
        &self,
        reflection: &ReflectionText,
        previous: &ImageRef,
        references: &[ImageRef],
        _site: CallSite,
    ) -> Result<ImageRef, GatewayError> {
        let mut inputs = vec![previous];
        inputs.extend(references.iter());
        self.request(&reflection.as_prompt(), &inputs)
    }

    fn execute_step(
        &self,
        sub_instruction: &InstructionText,
        previous: &[ImageRef],
        _site: CallSite,
    ) -> Result<ImageRef, GatewayError> {
        self.request(&sub_instruction.text, &previous.iter().collect::<Vec<_>>())
    }
}

/// Builds the live pair. Base URLs and keys are read from the
/// `FORGE_*` environment variables when set.
pub fn live_client(
    analyzer: EndpointConfig,
    generator: EndpointConfig,
    templates: PromptTemplates,
    images: ImageStore,
    max_plan_steps: u32,
) -> Result<(LiveAnalyzer, LiveGenerator), GatewayError> {
    let analyzer = analyzer.with_env(ANALYZER_URL_ENV, ANALYZER_KEY_ENV);
    let generator = generator.with_env(GENERATOR_URL_ENV, GENERATOR_KEY_ENV);
    for (role, cfg) in [("analyzer", &analyzer), ("generator", &generator)] {
        if cfg.base_url.is_empty() {
            return Err(GatewayError::Client(format!("{role} base URL is not configured")));
        }
    }
    Ok((LiveAnalyzer::new(analyzer, templates, max_plan_steps), LiveGenerator::new(generator, images)))
}
