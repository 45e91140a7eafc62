use std::io::{BufRead, BufReader};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LlmError, LlmSpec, LLM_TOKEN_ENV};

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
    stream: bool,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct CompletionChunk {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

/// Client for completion-style endpoints, streamed over server-sent events.
///
/// `request_timeout_ms` is a deadline for the whole generation including
/// reconnect attempts.
pub struct RemoteLlm {
    spec: LlmSpec,
    agent: ureq::Agent,
    token: Option<String>,
}

enum Failure {
    Retry(LlmError),
    Fatal(LlmError),
}

impl RemoteLlm {
    pub fn new(spec: LlmSpec) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        RemoteLlm {
            spec,
            agent,
            token: std::env::var(LLM_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        }
    }

    fn attempt(
        &self,
        prompt: &str,
        deadline: Instant,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<(String, String), Failure> {
        let started = Instant::now();
        let timeout = |elapsed: Duration| {
            Failure::Fatal(LlmError::Timeout {
                elapsed_ms: elapsed.as_millis() as u64,
            })
        };
        let remaining = deadline.saturating_duration_since(started);
        if remaining.is_zero() {
            return Err(timeout(Duration::ZERO));
        }
        let mut req = self
            .agent
            .post(&self.spec.endpoint_url)
            .config()
            .timeout_global(Some(remaining))
            .build();
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let body = CompletionRequest {
            model: &self.spec.model_name,
            prompt,
            temperature: self.spec.temperature,
            max_tokens: self.spec.max_new_tokens,
            stream: self.spec.stream,
            stop: &self.spec.stop,
        };
        let resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(timeout(started.elapsed())),
            Err(e) => {
                return Err(Failure::Retry(LlmError::Unreachable {
                    attempts: 1,
                    message: e.to_string(),
                }))
            }
        };
        let status = resp.status().as_u16();
        let is_sse = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("text/event-stream"));
        let mut reader = BufReader::new(resp.into_body().into_reader());
        if status >= 400 {
            let mut msg = String::new();
            let _ = reader.read_line(&mut msg);
            let err = LlmError::Upstream {
                status,
                message: msg.trim().to_string(),
            };
            return Err(if status >= 500 || status == 429 {
                Failure::Retry(err)
            } else {
                Failure::Fatal(err)
            });
        }
        let read_err = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::TimedOut || Instant::now() >= deadline {
                timeout(started.elapsed())
            } else {
                Failure::Fatal(LlmError::Protocol(format!("read failed: {e}")))
            }
        };

        if !is_sse {
            let mut raw = String::new();
            std::io::Read::read_to_string(&mut reader, &mut raw).map_err(read_err)?;
            let parsed: CompletionChunk = serde_json::from_str(&raw)
                .map_err(|e| Failure::Fatal(LlmError::Protocol(format!("bad JSON body: {e}"))))?;
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| Failure::Fatal(LlmError::Protocol("no choices".into())))?;
            if !choice.text.is_empty() {
                on_chunk(&choice.text);
            }
            return Ok((choice.text, choice.finish_reason.unwrap_or_else(|| "stop".into())));
        }

        let mut text = String::new();
        let mut finish = None;
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(read_err)?;
            if n == 0 {
                return Err(Failure::Fatal(LlmError::Protocol("stream ended without [DONE]".into())));
            }
            let Some(data) = line.trim_end_matches(['\r', '\n']).strip_prefix("data:") else {
                continue;
            };
            let data = data.trim_start();
            if data == "[DONE]" {
                break;
            }
            let chunk: CompletionChunk = serde_json::from_str(data)
                .map_err(|e| Failure::Fatal(LlmError::Protocol(format!("bad event payload: {e}"))))?;
            for c in chunk.choices {
                if !c.text.is_empty() {
                    on_chunk(&c.text);
                    text.push_str(&c.text);
                }
                if c.finish_reason.is_some() {
                    finish = c.finish_reason;
                }
            }
        }
        Ok((text, finish.unwrap_or_else(|| "stop".into())))
    }
}

impl LanguageModel for RemoteLlm {
    fn spec(&self) -> &LlmSpec {
        &self.spec
    }

    fn complete(&self, prompt: &str, on_chunk: &mut dyn FnMut(&str)) -> Result<(String, String), LlmError> {
        let start = Instant::now();
        let deadline = start + Duration::from_millis(self.spec.request_timeout_ms);
        let attempts = self.spec.retries + 1;
        let mut backoff = Duration::from_millis(100);
        let mut last = None;
        for attempt in 1..=attempts {
            let mut emitted = false;
            let res = self.attempt(prompt, deadline, &mut |c| {
                emitted = true;
                on_chunk(c)
            });
            match res {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(err)) => {
                    tracing::debug!(attempt, error = %err, "LLM request failed");
                    last = Some(err);
                    if emitted {
                        break;
                    }
                    if attempt < attempts {
                        if Instant::now() + backoff >= deadline {
                            return Err(LlmError::Timeout {
                                elapsed_ms: start.elapsed().as_millis() as u64,
                            });
                        }
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        // An HTTP status is more useful to the caller than the attempt count.
        Err(match last {
            Some(e @ LlmError::Upstream { .. }) => e,
            Some(LlmError::Unreachable { message, .. }) => LlmError::Unreachable { attempts, message },
            Some(other) => other,
            None => LlmError::Unreachable {
                attempts,
                message: String::new(),
            },
        })
    }
}
