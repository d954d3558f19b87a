//! Tool-augmented multi-hop question answering.
//!
//! The agent may call `local_search` or submit an answer inside `\boxed{}`.
//! Each tool call and the final answer consume one of five turns.

mod search;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{
    read_jsonl, DatasetError, EnvError, EnvInstance, Environment, Episode, Split, StepOutcome,
    MAX_STEPS_FEEDBACK,
};
use crate::prompts;

pub use search::{
    search_tokens, CorpusDoc, CorpusError, SearchError, SearchHit, SearchIndex, SearchRequest,
    DEFAULT_TOP_K, MAX_TOP_K,
};

pub const TURN_BUDGET: usize = 5;
pub const F1_THRESHOLD: f64 = 0.3;
pub const TOOL_NAME: &str = "local_search";

pub const SEARCH_FEEDBACK: &str = "The search tool returned results.";
pub const TOOL_ERROR_FEEDBACK: &str = "The tool call was rejected.";
pub const ANSWER_FEEDBACK: &str = "A final answer was submitted.";
pub const INVALID_FEEDBACK: &str = "No valid actions were recorded.";

/// Small built-in corpus and question set for smoke runs.
pub const BUNDLED_CORPUS: &str = include_str!("../../assets/qa/corpus.jsonl");
pub const BUNDLED_QUESTIONS: &str = include_str!("../../assets/qa/questions.jsonl");

pub fn bundled_index() -> SearchIndex {
    let docs: Vec<CorpusDoc> = BUNDLED_CORPUS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled corpus parses"))
        .collect();
    SearchIndex::build(docs).expect("bundled corpus has unique ids")
}

pub fn bundled_records() -> Vec<QaRecord> {
    BUNDLED_QUESTIONS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled questions parse"))
        .collect()
}

pub const FEEDBACK: [&str; 5] =
    [SEARCH_FEEDBACK, TOOL_ERROR_FEEDBACK, ANSWER_FEEDBACK, INVALID_FEEDBACK, MAX_STEPS_FEEDBACK];

/// Line format of QA dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub question: String,
    pub gold_answer: String,
}

impl QaRecord {
    pub fn into_instance(self, seed: u64) -> EnvInstance {
        EnvInstance {
            id: self.id,
            seed,
            split: self.split,
            payload: serde_json::json!({ "question": self.question, "gold_answer": self.gold_answer }),
        }
    }
}

pub fn read_qa_records(path: &Path) -> Result<Vec<QaRecord>, DatasetError> {
    read_jsonl(path)
}

impl QaInstance {
    pub fn from_payload(instance: &EnvInstance) -> Result<Self, EnvError> {
        let qa: QaInstance =
            serde_json::from_value(instance.payload.clone()).map_err(|e| EnvError::Payload {
                id: instance.id.clone(),
                reason: e.to_string(),
            })?;
        if normalize(&qa.gold_answer).is_empty() {
            return Err(EnvError::Payload {
                id: instance.id.clone(),
                reason: "gold answer is empty after normalization".into(),
            });
        }
        Ok(qa)
    }
}

/// Lowercases and collapses whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Content of the last `\boxed{...}` span, with nested braces balanced.
pub fn extract_boxed(text: &str) -> Option<String> {
    boxed_span(text).map(|(_, content)| content.to_string())
}

fn boxed_span(text: &str) -> Option<(usize, &str)> {
    const OPEN: &str = "\\boxed{";
    let start = text.rfind(OPEN)?;
    let body = start + OPEN.len();
    let mut depth = 1usize;
    for (i, ch) in text[body..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((start, &text[body..body + i]));
                }
            }
            _ => {}
        }
    }
    None
}

/// Token-multiset F1 over whitespace tokens.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let pred: Vec<&str> = pred.split_whitespace().collect();
    let gold: Vec<&str> = gold.split_whitespace().collect();
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1.0 on normalized exact match, the F1 itself when it reaches the
/// threshold, 0 otherwise (including a missing answer).
pub fn qa_reward(pred: Option<&str>, gold: &str) -> f64 {
    let Some(pred) = pred else { return 0.0 };
    let (pred, gold) = (normalize(pred), normalize(gold));
    if pred == gold && !gold.is_empty() {
        return 1.0;
    }
    let f1 = token_f1(&pred, &gold);
    if f1 >= F1_THRESHOLD {
        f1
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QaAction {
    Search(SearchRequest),
    BadToolCall(String),
    Answer(String),
    Invalid,
}

#[derive(Debug, Deserialize)]
struct ToolCall {
    name: String,
    #[serde(default)]
    arguments: serde_json::Value,
}

/// Renders a tool call in the text form the environment parses.
pub fn format_tool_call(request: &SearchRequest) -> String {
    let call = serde_json::json!({ "name": TOOL_NAME, "arguments": request });
    format!("<tool_call>{call}</tool_call>")
}

fn last_tool_call(text: &str) -> Option<(usize, &str)> {
    let start = text.rfind("<tool_call>")?;
    let body = start + "<tool_call>".len();
    let end = text[body..].find("</tool_call>")?;
    Some((start, text[body..body + end].trim()))
}

/// Whichever of a tool call or a boxed answer appears last decides the action.
pub fn parse_qa_action(output: &str) -> QaAction {
    let boxed = boxed_span(output);
    let call = last_tool_call(output);
    let use_call = match (&boxed, &call) {
        (Some((b, _)), Some((c, _))) => c > b,
        (None, Some(_)) => true,
        _ => false,
    };
    if use_call {
        let (_, body) = call.expect("checked above");
        return match serde_json::from_str::<ToolCall>(body) {
            Ok(tc) if tc.name == TOOL_NAME => match serde_json::from_value::<SearchRequest>(tc.arguments) {
                Ok(req) => QaAction::Search(req),
                Err(e) => QaAction::BadToolCall(format!("invalid arguments: {e}")),
            },
            Ok(tc) => QaAction::BadToolCall(format!("unknown tool {:?}", tc.name)),
            Err(e) => QaAction::BadToolCall(format!("malformed tool call: {e}")),
        };
    }
    match boxed {
        Some((_, content)) => QaAction::Answer(content.to_string()),
        None => QaAction::Invalid,
    }
}

pub struct QaEnv {
    index: Arc<SearchIndex>,
}

impl QaEnv {
    pub fn new(index: Arc<SearchIndex>) -> Self {
        QaEnv { index }
    }

    pub fn index(&self) -> &SearchIndex {
        &self.index
    }
}

struct QaEpisode<'a> {
    index: &'a SearchIndex,
    instance: QaInstance,
    turns: usize,
    terminal: bool,
    observation: String,
}

impl QaEpisode<'_> {
    fn question_text(&self) -> String {
        format!("Question:\n{}", self.instance.question)
    }
}

impl Episode for QaEpisode<'_> {
    fn observation(&self) -> String {
        self.observation.clone()
    }

    fn step(&mut self, model_output: &str) -> (Option<String>, StepOutcome) {
        assert!(!self.terminal, "qa step called on a terminal episode");
        self.turns += 1;
        let action = parse_qa_action(model_output);
        let (label, observation, feedback, reward, terminal) = match action {
            QaAction::Answer(ans) => {
                let r = qa_reward(Some(&ans), &self.instance.gold_answer);
                (Some("answer".to_string()), format!("Submitted answer: {ans}"), ANSWER_FEEDBACK, r, true)
            }
            QaAction::Search(req) => match self.index.search(&req) {
                Ok(hits) => {
                    let mut text = format!("{TOOL_NAME} results for {:?}:\n", req.query);
                    for (i, h) in hits.iter().enumerate() {
                        text.push_str(&format!("{}. [{}] {}\n", i + 1, h.doc_id, h.snippet));
                    }
                    (Some(TOOL_NAME.to_string()), text, SEARCH_FEEDBACK, 0.0, false)
                }
                Err(e) => (
                    Some(TOOL_NAME.to_string()),
                    format!("{TOOL_NAME} error: {e}"),
                    TOOL_ERROR_FEEDBACK,
                    0.0,
                    false,
                ),
            },
            QaAction::BadToolCall(msg) => {
                (None, format!("Tool error: {msg}"), TOOL_ERROR_FEEDBACK, 0.0, false)
            }
            QaAction::Invalid => (
                None,
                format!("{}\nCall {TOOL_NAME} or give the final answer in \\boxed{{}}.", self.question_text()),
                INVALID_FEEDBACK,
                0.0,
                false,
            ),
        };
        let (feedback, terminal) = if !terminal && self.turns >= TURN_BUDGET {
            (MAX_STEPS_FEEDBACK, true)
        } else {
            (feedback, terminal)
        };
        self.terminal = terminal;
        self.observation = observation.clone();
        (label, StepOutcome { observation, feedback, reward, terminal })
    }
}

impl Environment for QaEnv {
    fn name(&self) -> &'static str {
        "qa"
    }

    fn system_prompt(&self) -> &'static str {
        prompts::QA_SYSTEM
    }

    fn action_space(&self) -> &'static [&'static str] {
        &[]
    }

    fn budget(&self) -> usize {
        TURN_BUDGET
    }

    fn feedback_set(&self) -> &'static [&'static str] {
        &FEEDBACK
    }

    fn tools(&self) -> Option<serde_json::Value> {
        Some(prompts::qa_tools())
    }

    fn start<'a>(&'a self, instance: &EnvInstance) -> Result<Box<dyn Episode + 'a>, EnvError> {
        let qa = QaInstance::from_payload(instance)?;
        let mut ep = QaEpisode {
            index: &self.index,
            instance: qa,
            turns: 0,
            terminal: false,
            observation: String::new(),
        };
        ep.observation = ep.question_text();
        Ok(Box::new(ep))
    }
}
