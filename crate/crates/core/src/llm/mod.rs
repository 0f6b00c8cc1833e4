//! Provider-agnostic chat interface: conversations persisted as JSON Lines
//! transcripts, token accounting, an OpenAI-compatible HTTP provider and a
//! scripted provider that replays canned replies for offline runs.

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subject::token_estimate;

pub mod prompts;

pub use prompts::{
    render_generation_prompt, render_identification_prompt, render_refinement_prompt, Stage,
    STATE_CHANGING_COMMENT,
};

pub const ENV_PROVIDER_URL: &str = "FC_PROVIDER_URL";
pub const ENV_API_KEY: &str = "FC_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("script exhausted after {used} replies")]
    ScriptExhausted { used: usize },
    #[error("cannot load script {path}: {message}")]
    Script { path: PathBuf, message: String },
    #[error("http request failed: {0}")]
    Http(String),
    #[error("unexpected provider response: {0}")]
    BadResponse(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("conversation is empty")]
    EmptyConversation,
    #[error("cannot write transcript {path}: {source}")]
    Transcript {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One message of a conversation as persisted in the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExchange {
    pub role: Role,
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_time_ms: u64,
}

impl PromptExchange {
    pub fn user(content: impl Into<String>) -> Self {
        PromptExchange {
            role: Role::User,
            content: content.into(),
            input_tokens: 0,
            output_tokens: 0,
            wall_time_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Chat-completion URL; falls back to `FC_PROVIDER_URL`.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "one")]
    pub max_completions: u32,
    #[serde(default)]
    pub script_path: Option<PathBuf>,
}

fn one() -> u32 {
    1
}

impl ProviderConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        ProviderConfig {
            kind: ProviderKind::Scripted,
            endpoint: None,
            model_name: "scripted".into(),
            max_completions: 1,
            script_path: Some(path.into()),
        }
    }

    pub fn http(model_name: impl Into<String>, endpoint: Option<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::Http,
            endpoint,
            model_name: model_name.into(),
            max_completions: 1,
            script_path: None,
        }
    }

    pub fn check(&self) -> crate::Result<()> {
        let fail = |m: &str| Err(crate::Error::Config(m.to_string()));
        if self.max_completions != 1 {
            return fail("provider.max_completions must be 1");
        }
        match self.kind {
            ProviderKind::Scripted if self.script_path.is_none() => {
                fail("scripted provider needs script_path")
            }
            ProviderKind::Http if self.model_name.is_empty() => {
                fail("http provider needs model_name")
            }
            _ => Ok(()),
        }
    }
}

/// A provider reply with its accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_time_ms: u64,
}

pub trait ChatProvider: Send {
    fn complete(&mut self, conversation: &[PromptExchange]) -> Result<Completion, LlmError>;
}

/// Replays a fixed list of replies in order. Token counts are estimated
/// from text length and latency is reported as zero, so runs are
/// bit-reproducible.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    replies: VecDeque<String>,
    used: usize,
}

impl ScriptedProvider {
    pub fn new(replies: impl IntoIterator<Item = String>) -> Self {
        ScriptedProvider {
            replies: replies.into_iter().collect(),
            used: 0,
        }
    }

    /// Loads a JSON array of strings.
    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let err = |message: String| LlmError::Script {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let replies: Vec<String> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Ok(Self::new(replies))
    }

    pub fn remaining(&self) -> usize {
        self.replies.len()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&mut self, conversation: &[PromptExchange]) -> Result<Completion, LlmError> {
        let content = self
            .replies
            .pop_front()
            .ok_or(LlmError::ScriptExhausted { used: self.used })?;
        self.used += 1;
        let input: usize = conversation.iter().map(|m| token_estimate(&m.content)).sum();
        Ok(Completion {
            output_tokens: token_estimate(&content) as u64,
            input_tokens: input as u64,
            wall_time_ms: 0,
            content,
        })
    }
}

/// OpenAI-compatible chat-completion client.
pub struct HttpProvider {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpProvider {
    pub fn new(config: &ProviderConfig) -> Result<Self, LlmError> {
        let endpoint = config
            .endpoint
            .clone()
            .or_else(|| std::env::var(ENV_PROVIDER_URL).ok())
            .ok_or_else(|| {
                LlmError::Config(format!("no endpoint configured and {ENV_PROVIDER_URL} unset"))
            })?;
        Ok(HttpProvider {
            agent: ureq::Agent::new_with_defaults(),
            endpoint,
            model: config.model_name.clone(),
            api_key: std::env::var(ENV_API_KEY).ok(),
        })
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&mut self, conversation: &[PromptExchange]) -> Result<Completion, LlmError> {
        let messages: Vec<serde_json::Value> = conversation
            .iter()
            .map(|m| serde_json::json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let body = serde_json::json!({"model": self.model, "messages": messages, "n": 1});
        let started = Instant::now();
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| LlmError::Http(e.to_string()))?;
        let reply: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::BadResponse(e.to_string()))?;
        let wall_time_ms = started.elapsed().as_millis() as u64;
        let content = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))?
            .to_string();
        let usage = &reply["usage"];
        let input: usize = conversation.iter().map(|m| token_estimate(&m.content)).sum();
        Ok(Completion {
            input_tokens: usage["prompt_tokens"].as_u64().unwrap_or(input as u64),
            output_tokens: usage["completion_tokens"]
                .as_u64()
                .unwrap_or(token_estimate(&content) as u64),
            wall_time_ms,
            content,
        })
    }
}

pub fn build_provider(config: &ProviderConfig) -> Result<Box<dyn ChatProvider>, LlmError> {
    match config.kind {
        ProviderKind::Scripted => {
            let path = config
                .script_path
                .as_deref()
                .ok_or_else(|| LlmError::Config("scripted provider needs script_path".into()))?;
            Ok(Box::new(ScriptedProvider::from_path(path)?))
        }
        ProviderKind::Http => Ok(Box::new(HttpProvider::new(config)?)),
    }
}

/// Sends `conversation` (whose last message is the prompt) and returns the
/// assistant message with accounting filled in.
pub fn send(
    conversation: &[PromptExchange],
    provider: &mut dyn ChatProvider,
) -> Result<PromptExchange, LlmError> {
    if conversation.is_empty() {
        return Err(LlmError::EmptyConversation);
    }
    let c = provider.complete(conversation)?;
    Ok(PromptExchange {
        role: Role::Assistant,
        content: c.content,
        input_tokens: c.input_tokens,
        output_tokens: c.output_tokens,
        wall_time_ms: c.wall_time_ms,
    })
}

/// Accumulated provider usage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_time_ms: u64,
    pub calls: u64,
}

impl Usage {
    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    pub fn add(&mut self, other: Usage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.wall_time_ms += other.wall_time_ms;
        self.calls += other.calls;
    }
}

/// An append-only conversation, optionally mirrored to a JSONL transcript
/// that may be shared with other conversations.
#[derive(Debug, Clone, Default)]
pub struct Conversation {
    messages: Vec<PromptExchange>,
    transcript: Option<PathBuf>,
    usage: Usage,
}

impl Conversation {
    pub fn new(transcript: Option<PathBuf>) -> Self {
        Conversation {
            messages: Vec::new(),
            transcript,
            usage: Usage::default(),
        }
    }

    pub fn messages(&self) -> &[PromptExchange] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn usage(&self) -> Usage {
        self.usage
    }

    /// Appends a user message, sends the whole conversation and appends the
    /// reply. On provider failure the user message stays in the
    /// conversation but is not persisted.
    pub fn send(
        &mut self,
        provider: &mut dyn ChatProvider,
        user: impl Into<String>,
    ) -> Result<String, LlmError> {
        self.messages.push(PromptExchange::user(user));
        let reply = send(&self.messages, provider)?;
        self.usage.add(Usage {
            input_tokens: reply.input_tokens,
            output_tokens: reply.output_tokens,
            wall_time_ms: reply.wall_time_ms,
            calls: 1,
        });
        self.messages.push(reply);
        let n = self.messages.len();
        self.persist(&self.messages[n - 2..])?;
        Ok(self.messages[n - 1].content.clone())
    }

    /// Sends a refinement message; the conversation must already hold the
    /// checker being refined.
    pub fn refine(
        &mut self,
        provider: &mut dyn ChatProvider,
        stage: Stage,
        error: &str,
    ) -> Result<String, LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::EmptyConversation);
        }
        self.send(provider, render_refinement_prompt(stage, error))
    }

    fn persist(&self, new: &[PromptExchange]) -> Result<(), LlmError> {
        let Some(path) = &self.transcript else {
            return Ok(());
        };
        let io = |source| LlmError::Transcript {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        for m in new {
            let line = serde_json::to_string(m).expect("exchange serializes");
            writeln!(file, "{line}").map_err(io)?;
        }
        Ok(())
    }
}

/// Reads a JSONL transcript back.
pub fn read_transcript(path: &Path) -> crate::Result<Vec<PromptExchange>> {
    let text = crate::error::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
