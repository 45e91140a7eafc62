//! Completion generation: a remote streaming client and an offline stub.

mod remote;
mod stub;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::RemoteLlm;
pub use stub::{first_sentence, stub_generate, StubLlm, StubMarkers};

pub const LLM_TOKEN_ENV: &str = "RCG_LLM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("prompt estimate of {estimate} tokens exceeds the context budget of {budget}")]
    Budget { estimate: usize, budget: usize },
    #[error("LLM endpoint timed out after {elapsed_ms} ms")]
    Timeout { elapsed_ms: u64 },
    #[error("LLM endpoint unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("LLM endpoint returned HTTP {status}: {message}")]
    Upstream { status: u16, message: String },
    #[error("malformed LLM response: {0}")]
    Protocol(String),
    #[error("invalid LLM spec: {0}")]
    InvalidSpec(String),
}

impl LlmError {
    pub fn code(&self) -> &'static str {
        match self {
            LlmError::Budget { .. } => "llm.budget",
            LlmError::Timeout { .. } => "llm.timeout",
            LlmError::Unreachable { .. } => "llm.unreachable",
            LlmError::Upstream { .. } => "llm.upstream",
            LlmError::Protocol(_) => "llm.protocol",
            LlmError::InvalidSpec(_) => "llm.spec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmKind {
    Remote,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSpec {
    pub kind: LlmKind,
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub request_timeout_ms: u64,
    pub context_budget: usize,
    pub stop: Vec<String>,
    pub stream: bool,
    /// Connection attempts before giving up; never retried once a chunk arrived.
    pub retries: u32,
    pub stub: StubMarkers,
}

impl Default for LlmSpec {
    fn default() -> Self {
        LlmSpec {
            kind: LlmKind::Stub,
            endpoint_url: String::new(),
            model_name: "stub".into(),
            temperature: 0.0,
            max_new_tokens: 512,
            request_timeout_ms: 60_000,
            context_budget: 4096,
            stop: vec!["\n\n".into()],
            stream: true,
            retries: 2,
            stub: StubMarkers::default(),
        }
    }
}

impl LlmSpec {
    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: &str| Err(LlmError::InvalidSpec(m.to_string()));
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1");
        }
        if self.context_budget == 0 {
            return bad("context_budget must be positive");
        }
        if self.request_timeout_ms == 0 {
            return bad("request_timeout_ms must be positive");
        }
        if self.kind == LlmKind::Remote && self.endpoint_url.is_empty() {
            return bad("remote LLM needs endpoint_url");
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn LanguageModel>, LlmError> {
        self.validate()?;
        Ok(match self.kind {
            LlmKind::Stub => Box::new(StubLlm::new(self.clone())),
            LlmKind::Remote => Box::new(RemoteLlm::new(self.clone())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Usage {
    pub prompt_tokens_est: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GenerationEvent {
    TokenChunk { text: String },
    Done { finish_reason: String, usage: Usage },
    Error { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: String,
    pub usage: Usage,
}

/// Whitespace tokens times 1.3, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    let n = text.split_whitespace().count();
    (n * 13).div_ceil(10)
}

pub fn check_budget(spec: &LlmSpec, prompt: &str) -> Result<usize, LlmError> {
    let estimate = estimate_tokens(prompt);
    if estimate > spec.context_budget {
        return Err(LlmError::Budget {
            estimate,
            budget: spec.context_budget,
        });
    }
    Ok(estimate)
}

pub trait LanguageModel: Send + Sync {
    fn spec(&self) -> &LlmSpec;

    /// Produce the completion, passing each chunk to `on_chunk` as it arrives.
    /// The budget has already been checked by the caller.
    fn complete(&self, prompt: &str, on_chunk: &mut dyn FnMut(&str)) -> Result<(String, String), LlmError>;
}

/// Budget check, then stream. Emits zero or more chunks followed by exactly
/// one `Done` or `Error`.
pub fn generate_stream(
    model: &dyn LanguageModel,
    prompt: &str,
    emit: &mut dyn FnMut(GenerationEvent),
) -> Result<Completion, LlmError> {
    let result = check_budget(model.spec(), prompt).and_then(|estimate| {
        let mut text = String::new();
        let (_, finish_reason) = model.complete(prompt, &mut |chunk| {
            text.push_str(chunk);
            emit(GenerationEvent::TokenChunk { text: chunk.to_string() });
        })?;
        let usage = Usage {
            prompt_tokens_est: estimate,
            completion_tokens: text.split_whitespace().count(),
        };
        Ok(Completion {
            text,
            finish_reason,
            usage,
        })
    });
    match &result {
        Ok(c) => emit(GenerationEvent::Done {
            finish_reason: c.finish_reason.clone(),
            usage: c.usage,
        }),
        Err(e) => emit(GenerationEvent::Error {
            code: e.code().to_string(),
            message: e.to_string(),
        }),
    }
    result
}

/// Non-streaming convenience wrapper.
pub fn generate(model: &dyn LanguageModel, prompt: &str) -> Result<Completion, LlmError> {
    generate_stream(model, prompt, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("a"), 2);
        assert_eq!(estimate_tokens("a b c d e f g h i j"), 13);
    }

    #[test]
    fn over_budget_prompt_is_rejected_before_generation() {
        let spec = LlmSpec {
            context_budget: 4096,
            ..Default::default()
        };
        let model = spec.build().unwrap();
        let prompt = "w ".repeat(7693);
        assert_eq!(estimate_tokens(&prompt), 10_001);
        let mut events = Vec::new();
        let err = generate_stream(model.as_ref(), &prompt, &mut |e| events.push(e)).unwrap_err();
        assert_eq!(
            err,
            LlmError::Budget {
                estimate: 10_001,
                budget: 4096
            }
        );
        assert_eq!(events.len(), 1);
        assert!(matches!(&events[0], GenerationEvent::Error { code, .. } if code == "llm.budget"));
    }

    #[test]
    fn stream_shape_with_stub() {
        let model = LlmSpec::default().build().unwrap();
        let prompt = format!("\"Kioxia has factories in Yokkaichi. More.{}Q\nAI:", crate::prompt::RCG_SUFFIX);
        let mut events = Vec::new();
        let c = generate_stream(model.as_ref(), &prompt, &mut |e| events.push(e)).unwrap();
        assert_eq!(c.text, "Kioxia has factories in Yokkaichi.");
        let (last, chunks) = events.split_last().unwrap();
        let joined: String = chunks
            .iter()
            .map(|e| match e {
                GenerationEvent::TokenChunk { text } => text.as_str(),
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(joined, c.text);
        assert!(matches!(last, GenerationEvent::Done { .. }));
    }

    #[test]
    fn spec_validation() {
        assert!(LlmSpec::default().validate().is_ok());
        let neg = LlmSpec {
            temperature: -0.1,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
        let zero = LlmSpec {
            max_new_tokens: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let remote = LlmSpec {
            kind: LlmKind::Remote,
            ..Default::default()
        };
        assert!(remote.validate().is_err());
    }
}
