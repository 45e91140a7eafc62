use serde::{Deserialize, Serialize};

use super::{LanguageModel, LlmError, LlmSpec};
use crate::prompt::RCG_SUFFIX;

/// Markers the stub uses to find knowledge inside a prompt.
///
/// The closing marker defaults to the full `rcg` retriever suffix, so only
/// retrieval-centric prompts yield an echoed knowledge sentence. A prompt
/// built with a different suffix falls through to the `NO-KNOWLEDGE` form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubMarkers {
    pub knowledge_open: String,
    pub knowledge_close: String,
    /// Stripped from the end of the prompt before anything else.
    pub answer_cue: String,
}

impl Default for StubMarkers {
    fn default() -> Self {
        StubMarkers {
            knowledge_open: "\"".into(),
            knowledge_close: RCG_SUFFIX.into(),
            answer_cue: "\nAI:".into(),
        }
    }
}

/// Text up to and including the first `.`, `!` or `?` that ends the text or
/// is followed by whitespace. Whole trimmed text when there is none.
pub fn first_sentence(text: &str) -> &str {
    let t = text.trim();
    let mut it = t.char_indices().peekable();
    while let Some((i, c)) = it.next() {
        if matches!(c, '.' | '!' | '?') {
            match it.peek() {
                None => return t,
                Some((_, n)) if n.is_whitespace() => return &t[..i + c.len_utf8()],
                _ => {}
            }
        }
    }
    t
}

pub fn stub_generate(prompt: &str, markers: &StubMarkers) -> String {
    let body = if markers.answer_cue.is_empty() {
        prompt
    } else {
        prompt.strip_suffix(markers.answer_cue.as_str()).unwrap_or(prompt)
    };
    if !markers.knowledge_open.is_empty() && !markers.knowledge_close.is_empty() {
        if let Some(open) = body.find(markers.knowledge_open.as_str()) {
            let after = &body[open + markers.knowledge_open.len()..];
            if let Some(close) = after.find(markers.knowledge_close.as_str()) {
                let sentence = first_sentence(&after[..close]);
                if !sentence.is_empty() {
                    return sentence.to_string();
                }
            }
        }
    }
    let head: Vec<&str> = body.split_whitespace().take(8).collect();
    format!("NO-KNOWLEDGE: {}", head.join(" "))
}

/// Deterministic in-process generator.
pub struct StubLlm {
    spec: LlmSpec,
}

impl StubLlm {
    pub fn new(spec: LlmSpec) -> Self {
        StubLlm { spec }
    }
}

/// Split into chunks that each end after a run of whitespace.
fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_space = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_space = true;
        } else if in_space {
            out.push(&text[start..i]);
            start = i;
            in_space = false;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl LanguageModel for StubLlm {
    fn spec(&self) -> &LlmSpec {
        &self.spec
    }

    fn complete(&self, prompt: &str, on_chunk: &mut dyn FnMut(&str)) -> Result<(String, String), LlmError> {
        let full = stub_generate(prompt, &self.spec.stub);
        let pieces = chunks(&full);
        let limit = self.spec.max_new_tokens;
        let finish = if pieces.len() > limit { "length" } else { "stop" };
        let mut text = String::new();
        for (i, p) in pieces.into_iter().take(limit).enumerate() {
            let p = if i + 1 == limit && finish == "length" { p.trim_end() } else { p };
            on_chunk(p);
            text.push_str(p);
        }
        Ok((text, finish.to_string()))
    }
}
