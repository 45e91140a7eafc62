//! One chat turn end to end: resolve settings, retrieve, assemble, generate.

use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{run_eval, turn_similarities, AnalysisRecord, Approach, EvalPair, EvalReport, LatencyMs, RetrievedRef};
use crate::config::ToolConfig;
use crate::embed::{embed_one, Embedder};
use crate::llm::{check_budget, generate_stream, Completion, GenerationEvent, LanguageModel, LlmError};
use crate::prompt::{PromptCatalog, ROG};
use crate::retrieval::{
    retrieve_with_vec, select_by_description, KnowledgeBase, RetrievalConfig, RetrievalError, RetrievalMode,
    RetrievalResult,
};

#[derive(Debug, Error)]
pub enum EngineError {
    /// Caller error; maps to HTTP 400 and CLI usage errors.
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Budget(LlmError),
    /// Embedder or LLM failure.
    #[error("{code}: {message}")]
    Upstream { code: String, message: String },
    #[error("configuration error: {0}")]
    Config(String),
}

impl From<RetrievalError> for EngineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Embed(e) => EngineError::Upstream {
                code: "embed".into(),
                message: e.to_string(),
            },
            RetrievalError::Index(_) | RetrievalError::Ingest(_) | RetrievalError::Inconsistent { .. } => {
                EngineError::Config(e.to_string())
            }
            other => EngineError::BadRequest(other.to_string()),
        }
    }
}

impl From<LlmError> for EngineError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Budget { .. } => EngineError::Budget(e),
            LlmError::InvalidSpec(m) => EngineError::Config(m),
            other => EngineError::Upstream {
                code: other.code().to_string(),
                message: other.to_string(),
            },
        }
    }
}

/// Per-turn settings; unset fields fall back to the configured defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurnRequest {
    pub query: String,
    pub approach: Option<String>,
    pub mode: Option<RetrievalMode>,
    pub kb_id: Option<String>,
    pub k: Option<usize>,
    pub epw_weight: Option<u8>,
    pub ef_search: Option<usize>,
}

impl TurnRequest {
    pub fn new(query: impl Into<String>) -> Self {
        TurnRequest {
            query: query.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnPlan {
    pub query: String,
    pub approach: String,
    pub retrieval_config: RetrievalConfig,
    pub retrieval: Option<RetrievalResult>,
    pub prompt: String,
    pub prompt_tokens_est: usize,
    pub retrieve_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutcome {
    pub plan: TurnPlan,
    pub completion: Completion,
    pub record: AnalysisRecord,
}

/// Embedder, LLM and opened knowledge bases for one configuration.
pub struct Engine {
    config: ToolConfig,
    embedder: Arc<dyn Embedder>,
    llm: Arc<dyn LanguageModel>,
    kbs: Vec<Arc<KnowledgeBase>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Engine {
    /// Validate the configuration and open every knowledge base. Nothing is
    /// kept if any step fails.
    pub fn from_config(config: ToolConfig) -> Result<Self, EngineError> {
        config.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        let embedder: Arc<dyn Embedder> =
            Arc::from(config.embedder.build().map_err(|e| EngineError::Config(format!("embedder: {e}")))?);
        let llm: Arc<dyn LanguageModel> = Arc::from(config.llm.build()?);
        Engine::with_parts(config, embedder, llm)
    }

    pub fn with_parts(
        config: ToolConfig,
        embedder: Arc<dyn Embedder>,
        llm: Arc<dyn LanguageModel>,
    ) -> Result<Self, EngineError> {
        let mut kbs = Vec::with_capacity(config.kbs.len());
        for entry in &config.kbs {
            let kb = KnowledgeBase::open(
                &entry.kb_id,
                &entry.name,
                &entry.description,
                &config.passage_store_path(entry),
                &config.index_path(entry),
                embedder.as_ref(),
            )
            .map_err(|e| match e {
                RetrievalError::Embed(e) => EngineError::Upstream {
                    code: "embed".into(),
                    message: e.to_string(),
                },
                other => EngineError::Config(format!("knowledge base '{}': {other}", entry.kb_id)),
            })?;
            kbs.push(Arc::new(kb));
        }
        Ok(Engine {
            config,
            embedder,
            llm,
            kbs,
        })
    }

    pub fn config(&self) -> &ToolConfig {
        &self.config
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn llm(&self) -> &dyn LanguageModel {
        self.llm.as_ref()
    }

    pub fn knowledge_bases(&self) -> &[Arc<KnowledgeBase>] {
        &self.kbs
    }

    /// Resolve settings, retrieve and assemble. No generation happens here,
    /// and the prompt is checked against the context budget.
    pub fn plan_turn(&self, catalog: &PromptCatalog, req: &TurnRequest) -> Result<TurnPlan, EngineError> {
        let d = &self.config.defaults;
        if req.query.trim().is_empty() {
            return Err(EngineError::BadRequest("query must not be empty".into()));
        }
        // With retrieval switched off and no approach named, use the
        // retrieval-free prompt rather than an empty knowledge block.
        let approach = match (&req.approach, req.mode) {
            (Some(a), _) => a.clone(),
            (None, Some(RetrievalMode::Off)) => ROG.to_string(),
            (None, _) => d.approach.clone(),
        };
        let prompt_set = catalog
            .require(&approach)
            .map_err(|e| EngineError::BadRequest(e.to_string()))?;
        let mode = if approach == ROG {
            RetrievalMode::Off
        } else {
            req.mode.unwrap_or(d.mode)
        };
        let mut selected_kb = req.kb_id.clone().or_else(|| d.kb_id.clone());
        if mode == RetrievalMode::Manual && selected_kb.is_none() && self.kbs.len() == 1 {
            selected_kb = Some(self.kbs[0].kb_id.clone());
        }
        let rc = RetrievalConfig {
            mode,
            selected_kb,
            k: req.k.unwrap_or(d.k),
            epw_weight: req.epw_weight.unwrap_or(d.epw_weight),
            ef_search: req.ef_search.unwrap_or(d.ef_search),
        };
        rc.validate()?;

        let started = Instant::now();
        let retrieval = match mode {
            RetrievalMode::Off => None,
            RetrievalMode::Manual => {
                let id = rc.selected_kb.as_deref().expect("validated");
                let kb = self
                    .kbs
                    .iter()
                    .find(|kb| kb.kb_id == id)
                    .ok_or_else(|| RetrievalError::UnknownKb(id.to_string()))?;
                let qv = embed_one(self.embedder(), &req.query).map_err(RetrievalError::from)?;
                Some(retrieve_with_vec(&qv, kb, &rc)?)
            }
            RetrievalMode::Mokb => {
                let qv = embed_one(self.embedder(), &req.query).map_err(RetrievalError::from)?;
                let i = select_by_description(&qv, &self.kbs)?;
                Some(retrieve_with_vec(&qv, &self.kbs[i], &rc)?)
            }
        };
        let retrieve_ms = started.elapsed().as_millis() as u64;
        let knowledge = retrieval.as_ref().map_or("", |r| r.knowledge_text.as_str());
        let prompt = prompt_set.assemble(knowledge, &req.query);
        let prompt_tokens_est = check_budget(self.llm.spec(), &prompt)?;
        Ok(TurnPlan {
            query: req.query.clone(),
            approach,
            retrieval_config: rc,
            retrieval,
            prompt,
            prompt_tokens_est,
            retrieve_ms,
        })
    }

    pub fn generate(
        &self,
        plan: &TurnPlan,
        emit: &mut dyn FnMut(GenerationEvent),
    ) -> Result<Completion, LlmError> {
        generate_stream(self.llm.as_ref(), &plan.prompt, emit)
    }

    /// Analysis record for a finished turn. Similarity failures are logged
    /// and recorded as zeros.
    pub fn record(&self, plan: &TurnPlan, response: &str, generate_ms: u64, error: Option<String>) -> AnalysisRecord {
        let hits = plan.retrieval.as_ref().map(|r| r.hits.as_slice()).unwrap_or(&[]);
        let texts: Vec<&str> = hits.iter().map(|h| h.text.as_str()).collect();
        let (sentence_sim, token_sim) = turn_similarities(&plan.query, &texts, self.embedder()).unwrap_or_else(|e| {
            tracing::warn!(error = %e, "similarity diagnostics failed");
            (vec![0.0; texts.len()], vec![0.0; texts.len()])
        });
        AnalysisRecord {
            timestamp: now_ms(),
            mode: plan.retrieval_config.mode.to_string(),
            approach: plan.approach.clone(),
            kb_id: plan.retrieval.as_ref().map(|r| r.kb_id.clone()),
            query: plan.query.clone(),
            retrieved: hits
                .iter()
                .map(|h| RetrievedRef {
                    passage_id: h.passage_id.clone(),
                    score: h.score,
                    text: h.text.clone(),
                })
                .collect(),
            epw_weight: plan.retrieval_config.epw_weight,
            prompt_chars: plan.prompt.chars().count(),
            response: response.to_string(),
            sentence_sim,
            token_sim,
            latency_ms: LatencyMs {
                retrieve: plan.retrieve_ms,
                generate: generate_ms,
                total: plan.retrieve_ms + generate_ms,
            },
            error,
        }
    }

    /// Plan, generate and record in one call.
    pub fn answer(
        &self,
        catalog: &PromptCatalog,
        req: &TurnRequest,
        emit: &mut dyn FnMut(GenerationEvent),
    ) -> Result<TurnOutcome, EngineError> {
        let plan = self.plan_turn(catalog, req)?;
        let t = Instant::now();
        let completion = self.generate(&plan, emit)?;
        let record = self.record(&plan, &completion.text, t.elapsed().as_millis() as u64, None);
        Ok(TurnOutcome {
            plan,
            completion,
            record,
        })
    }

    /// Request for one evaluation query under `approach`.
    pub fn eval_request(approach: &Approach, query: &str) -> TurnRequest {
        TurnRequest {
            query: query.to_string(),
            approach: Some(approach.prompt_set.clone()),
            epw_weight: approach.epw_weight,
            ..Default::default()
        }
    }

    pub fn evaluate(&self, catalog: &PromptCatalog, dataset: &[EvalPair], approaches: &[Approach]) -> Vec<EvalReport> {
        run_eval(dataset, approaches, &mut |approach, query| {
            self.answer(catalog, &Engine::eval_request(approach, query), &mut |_| {})
                .map(|o| o.completion.text)
                .map_err(|e| e.to_string())
        })
    }
}
