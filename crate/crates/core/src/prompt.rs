//! Five-slot prompt sets and the named prompt catalog.
//!
//! A prompt is always assembled as
//! `ai_prefix + retriever_prefix + knowledge + retriever_suffix + model_prefix + query + model_suffix`
//! with no separators added; slots carry all of their own whitespace.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("malformed prompt catalog at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown prompt set '{0}'")]
    UnknownSet(String),
    #[error("prompt catalog I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    #[serde(default)]
    pub ai_prefix: String,
    #[serde(default)]
    pub retriever_prefix: String,
    #[serde(default)]
    pub retriever_suffix: String,
    #[serde(default)]
    pub model_prefix: String,
    #[serde(default)]
    pub model_suffix: String,
}

impl PromptSet {
    pub fn assemble(&self, knowledge: &str, query: &str) -> String {
        assemble(self, knowledge, query)
    }
}

pub fn assemble(ps: &PromptSet, knowledge: &str, query: &str) -> String {
    let parts = [
        ps.ai_prefix.as_str(),
        ps.retriever_prefix.as_str(),
        knowledge,
        ps.retriever_suffix.as_str(),
        ps.model_prefix.as_str(),
        query,
        ps.model_suffix.as_str(),
    ];
    let mut out = String::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        out.push_str(p);
    }
    out
}

pub const RCG: &str = "rcg";
pub const RAG: &str = "rag";
pub const ROG: &str = "rog";
pub const BUILTIN_NAMES: [&str; 3] = [RCG, RAG, ROG];

const PERSONA: &str = "you are a Retrieval-Centric AI. Knowledge below are provided.\n";
/// Retriever suffix of the built-in `rcg` set.
pub const RCG_SUFFIX: &str = "\"\nanswer the following question with the provided knowledge.\n";
const RAG_SUFFIX: &str = "\"\nanswer the following question. You may use the provided knowledge.\n";
const ONLY_USE_SUFFIX: &str = "\"\nonly use the provided knowledge to answer the following question.\n";

fn set(ai: &str, rp: &str, rs: &str, ms: &str) -> PromptSet {
    PromptSet {
        ai_prefix: ai.into(),
        retriever_prefix: rp.into(),
        retriever_suffix: rs.into(),
        model_prefix: String::new(),
        model_suffix: ms.into(),
    }
}

/// Default for one of the built-in names.
pub fn builtin(name: &str) -> Option<PromptSet> {
    match name {
        RCG => Some(set("", "\"", RCG_SUFFIX, "\nAI:")),
        RAG => Some(set("", "\"", RAG_SUFFIX, "\nAI:")),
        ROG => Some(set("", "", "", "\nAI:")),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCatalog {
    sets: BTreeMap<String, PromptSet>,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        builtin_defaults()
    }
}

/// The three built-ins plus the retrieval-centric samples.
pub fn builtin_defaults() -> PromptCatalog {
    let mut sets = BTreeMap::new();
    for name in BUILTIN_NAMES {
        sets.insert(name.to_string(), builtin(name).expect("builtin"));
    }
    sets.insert("rcg-persona-response".into(), set(PERSONA, "\"", ONLY_USE_SUFFIX, "\nResponse:"));
    sets.insert("rcg-only".into(), set("", "\"", ONLY_USE_SUFFIX, "\nAI:"));
    sets.insert("rcg-persona".into(), set(PERSONA, "\"", ONLY_USE_SUFFIX, "\nAI:"));
    PromptCatalog { sets }
}

impl PromptCatalog {
    pub fn empty() -> Self {
        PromptCatalog { sets: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&PromptSet> {
        self.sets.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&PromptSet, PromptError> {
        self.get(name).ok_or_else(|| PromptError::UnknownSet(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, ps: PromptSet) {
        self.sets.insert(name.into(), ps);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PromptSet)> {
        self.sets.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Restore a shipped set (built-in or sample) to its default.
    pub fn reset(&mut self, name: &str) -> Result<(), PromptError> {
        let defaults = builtin_defaults();
        match defaults.get(name) {
            Some(ps) => {
                self.sets.insert(name.to_string(), ps.clone());
                Ok(())
            }
            None => Err(PromptError::UnknownSet(name.to_string())),
        }
    }

    /// Re-add any missing built-in names.
    pub fn ensure_builtins(&mut self) {
        for name in BUILTIN_NAMES {
            self.sets
                .entry(name.to_string())
                .or_insert_with(|| builtin(name).expect("builtin"));
        }
    }

    /// JSON object keyed by set name; newlines inside slots are escaped.
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.sets).expect("catalog serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PromptError> {
        let sets: BTreeMap<String, PromptSet> =
            serde_json::from_str(text).map_err(|e| PromptError::Malformed {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        let mut cat = PromptCatalog { sets };
        cat.ensure_builtins();
        Ok(cat)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        PromptCatalog::from_text(&fs::read_to_string(path)?)
    }

    /// Load `path`, falling back to the defaults when the file does not exist.
    pub fn load_or_default(path: &Path) -> Result<Self, PromptError> {
        if path.exists() {
            PromptCatalog::load(path)
        } else {
            Ok(builtin_defaults())
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_text())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_prompt_example() {
        let ps = PromptSet {
            ai_prefix: String::new(),
            retriever_prefix: "\"".into(),
            retriever_suffix: "\"\nanswer the following question with the provided knowledge.\n".into(),
            model_prefix: String::new(),
            model_suffix: "\nAI:".into(),
        };
        assert_eq!(
            assemble(&ps, "K", "Q"),
            "\"K\"\nanswer the following question with the provided knowledge.\nQ\nAI:"
        );
        assert_eq!(&ps, builtin_defaults().get(RCG).unwrap());
    }

    #[test]
    fn empty_set_is_identity_on_query() {
        assert_eq!(assemble(&PromptSet::default(), "", "Q"), "Q");
    }

    #[test]
    fn builtins() {
        let cat = builtin_defaults();
        assert!(cat.get(RCG).unwrap().retriever_suffix.contains("answer the following question with the provided knowledge."));
        assert!(cat.get(RAG).unwrap().retriever_suffix.contains("answer the following question. You may use the provided knowledge."));
        let rog = cat.get(ROG).unwrap();
        assert_eq!(rog.retriever_prefix, "");
        assert_eq!(rog.model_suffix, "\nAI:");
    }

    #[test]
    fn reset_restores_defaults() {
        let mut cat = builtin_defaults();
        let before = cat.to_text();
        cat.insert(RCG, PromptSet { ai_prefix: "edited".into(), ..Default::default() });
        assert_ne!(cat.to_text(), before);
        cat.reset(RCG).unwrap();
        assert_eq!(cat.to_text(), before);
        assert!(cat.reset("nope").is_err());
    }

    #[test]
    fn catalog_text_round_trip() {
        let mut cat = builtin_defaults();
        cat.insert("custom", PromptSet { model_suffix: "\n\t AI: \r\n".into(), ..Default::default() });
        let text = cat.to_text();
        assert!(text.contains("\\n"));
        let back = PromptCatalog::from_text(&text).unwrap();
        assert_eq!(back, cat);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_and_unknown_fields() {
        let err = PromptCatalog::from_text("{\n  \"rcg\": {\n    \"ai_prefix\": 3\n  }\n}").unwrap_err();
        match err {
            PromptError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let err = PromptCatalog::from_text("{\"x\": {\"bogus\": \"\"}}").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn missing_builtins_are_restored_on_load() {
        let cat = PromptCatalog::from_text("{\"mine\": {\"ai_prefix\": \"hi\"}}").unwrap();
        assert!(cat.get(ROG).is_some());
        assert_eq!(cat.get("mine").unwrap().ai_prefix, "hi");
    }
}
