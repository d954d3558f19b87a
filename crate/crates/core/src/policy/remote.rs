//! Chat-completions client used for rollouts against a served model.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{Backend, Completion, Context, Guidance, Policy, PolicyError, ReflectionRequest, SamplingParams};
use crate::prompts;
use crate::qa::TOOL_NAME;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
    #[serde(with = "millis")]
    pub max_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff before retry number `retry` (0-based), capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry as i32);
        let ms = self.initial_backoff.as_secs_f64() * 1000.0 * factor;
        Duration::from_millis(ms.min(self.max_backoff.as_millis() as f64) as u64)
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub max_concurrency: usize,
    pub timeout_secs: u64,
    pub request_logprobs: bool,
    pub retry: RetryPolicy,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            max_concurrency: 8,
            timeout_secs: 120,
            request_logprobs: true,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionCall {
    pub name: String,
    /// JSON-encoded arguments, as the wire format carries them.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallMessage {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub function: FunctionCall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_calls: Option<Vec<ToolCallMessage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage { role: role.into(), content: Some(content.into()), tool_calls: None, tool_call_id: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    pub max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tools: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Choice {
    pub message: ChatMessage,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<Choice>,
}

impl ChatResponse {
    /// Assistant text of the first choice, with any tool call rendered in
    /// the `<tool_call>` text form the QA environment parses.
    pub fn into_completion(self) -> Result<Completion, PolicyError> {
        let choice = self
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| PolicyError::Protocol("response has no choices".into()))?;
        let mut text = choice.message.content.unwrap_or_default();
        for call in choice.message.tool_calls.unwrap_or_default() {
            let args: serde_json::Value = serde_json::from_str(&call.function.arguments)
                .map_err(|e| PolicyError::Protocol(format!("tool call arguments: {e}")))?;
            let body = serde_json::json!({ "name": call.function.name, "arguments": args });
            text.push_str(&format!("<tool_call>{body}</tool_call>"));
        }
        let (tokens, logprobs) = match choice.logprobs.and_then(|l| l.content) {
            Some(items) => {
                let (t, l): (Vec<String>, Vec<f64>) = items.into_iter().map(|i| (i.token, i.logprob)).unzip();
                if l.iter().any(|v| *v > 0.0 || v.is_nan()) {
                    return Err(PolicyError::Protocol("log-probabilities must be ≤ 0".into()));
                }
                (t, Some(l))
            }
            None => (Vec::new(), None),
        };
        Ok(Completion { text, tokens, logprobs, backend: Backend::Remote })
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteClient {
    config: RemoteConfig,
    http: reqwest::blocking::Client,
    slots: Semaphore,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Result<Self, PolicyError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        let slots = Semaphore { free: Mutex::new(config.max_concurrency.max(1)), cv: Condvar::new() };
        Ok(RemoteClient { config, http, slots })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self) -> String {
        let base = self.config.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    fn send_once(&self, request: &ChatRequest) -> Result<ChatResponse, (PolicyError, Option<Duration>)> {
        let mut builder = self.http.post(self.url()).json(request);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| (PolicyError::Transport(e.to_string()), None))?;
        let status = resp.status();
        if !status.is_success() {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let body = resp.text().unwrap_or_default();
            return Err((PolicyError::Http { status: status.as_u16(), body }, retry_after));
        }
        let body = resp.text().map_err(|e| (PolicyError::Transport(e.to_string()), None))?;
        serde_json::from_str(&body).map_err(|e| (PolicyError::Protocol(format!("malformed response: {e}")), None))
    }

    /// One logical request: retried on transport failures and non-2xx
    /// statuses with exponential backoff, up to the configured cap.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, PolicyError> {
        let _permit = self.slots.acquire();
        let retry = &self.config.retry;
        let mut attempt = 0u32;
        loop {
            match self.send_once(request) {
                Ok(resp) => return Ok(resp),
                Err((err, _)) if !err.is_retryable() => return Err(err),
                Err((err, retry_after)) => {
                    if attempt >= retry.max_retries {
                        return Err(PolicyError::Exhausted { attempts: attempt + 1, last: err.to_string() });
                    }
                    let wait = retry_after.unwrap_or_else(|| retry.delay(attempt)).min(retry.max_backoff);
                    tracing::warn!(attempt, ?wait, error = %err, "retrying chat completion");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }

    fn request(&self, messages: Vec<ChatMessage>, sampling: &SamplingParams, tools: Option<serde_json::Value>) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            top_k: (sampling.top_k > 0).then_some(sampling.top_k),
            max_tokens: sampling.max_tokens,
            logprobs: self.config.request_logprobs.then_some(true),
            tools,
        }
    }
}

fn tool_call_of(output: &str) -> Option<FunctionCall> {
    let start = output.rfind("<tool_call>")? + "<tool_call>".len();
    let end = output[start..].find("</tool_call>")? + start;
    let v: serde_json::Value = serde_json::from_str(output[start..end].trim()).ok()?;
    Some(FunctionCall {
        name: v.get("name")?.as_str()?.to_string(),
        arguments: v.get("arguments").cloned().unwrap_or_default().to_string(),
    })
}

/// Chat transcript for a context: system text (with memory and guidance),
/// then alternating observation/output turns. Feedback is prepended to the
/// following observation; QA tool calls travel as native tool messages.
pub fn messages_for(ctx: &Context<'_>) -> Vec<ChatMessage> {
    let mut system = ctx.system.trim_end().to_string();
    if let Some(m) = &ctx.conditioning.memory {
        system.push_str("\n\n");
        system.push_str(m);
    }
    match &ctx.conditioning.guidance {
        Guidance::None => {}
        Guidance::Reflection(r) => {
            system.push_str("\n\n");
            system.push_str(prompts::extract_prompt_block(r));
        }
        Guidance::Retry(r) => {
            system.push_str("\n\n");
            system.push_str(r);
        }
    }
    let mut messages = vec![ChatMessage::new("system", system)];
    let mut pending_tool: Option<String> = None;
    let mut pending_feedback: Option<&str> = None;
    let push_observation = |messages: &mut Vec<ChatMessage>, obs: &str, fb: Option<&str>, tool: Option<String>| {
        match tool {
            Some(id) => messages.push(ChatMessage {
                role: "tool".into(),
                content: Some(obs.to_string()),
                tool_calls: None,
                tool_call_id: Some(id),
            }),
            None => {
                let text = match fb.filter(|f| !f.is_empty()) {
                    Some(f) => format!("{f}\n\n{obs}"),
                    None => obs.to_string(),
                };
                messages.push(ChatMessage::new("user", text));
            }
        }
    };
    for (i, step) in ctx.history.iter().enumerate() {
        push_observation(&mut messages, &step.observation, pending_feedback, pending_tool.take());
        match tool_call_of(&step.output).filter(|c| c.name == TOOL_NAME) {
            Some(call) => {
                let id = format!("call_{i}");
                let prose = step.output[..step.output.rfind("<tool_call>").unwrap_or(0)].trim();
                messages.push(ChatMessage {
                    role: "assistant".into(),
                    content: (!prose.is_empty()).then(|| prose.to_string()),
                    tool_calls: Some(vec![ToolCallMessage { id: id.clone(), kind: "function".into(), function: call }]),
                    tool_call_id: None,
                });
                pending_tool = Some(id);
            }
            None => messages.push(ChatMessage::new("assistant", step.output.clone())),
        }
        pending_feedback = Some(&step.feedback);
    }
    push_observation(&mut messages, ctx.observation, pending_feedback, pending_tool);
    messages
}

impl Policy for RemoteClient {
    fn backend(&self) -> Backend {
        Backend::Remote
    }

    fn generate(
        &self,
        ctx: &Context<'_>,
        sampling: &SamplingParams,
        _rng: &mut dyn RngCore,
    ) -> Result<Completion, PolicyError> {
        let req = self.request(messages_for(ctx), sampling, ctx.tools.cloned());
        self.complete(&req)?.into_completion()
    }

    fn reflect(
        &self,
        request: &ReflectionRequest<'_>,
        sampling: &SamplingParams,
        _rng: &mut dyn RngCore,
    ) -> Result<Completion, PolicyError> {
        let messages = vec![
            ChatMessage::new("system", prompts::reflection_prompt(request.env_name)),
            ChatMessage::new("user", request.user_message()),
        ];
        let req = self.request(messages, sampling, None);
        self.complete(&req)?.into_completion()
    }
}
