//! Lexical tf-idf retriever exposed as the `local_search` tool.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{read_jsonl, DatasetError};

pub const DEFAULT_TOP_K: u32 = 5;
pub const MAX_TOP_K: u32 = 50;
const SNIPPET_CHARS: usize = 240;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
}

impl SearchRequest {
    pub fn new(query: impl Into<String>) -> Self {
        SearchRequest { query: query.into(), top_k: None }
    }

    pub fn with_top_k(mut self, k: u32) -> Self {
        self.top_k = Some(k);
        self
    }

    pub fn effective_top_k(&self) -> Result<usize, SearchError> {
        match self.top_k.unwrap_or(DEFAULT_TOP_K) {
            k @ 1..=MAX_TOP_K => Ok(k as usize),
            k => Err(SearchError::TopK(k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub doc_id: String,
    pub snippet: String,
    pub score: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("top_k must be between 1 and {MAX_TOP_K}, got {0}")]
    TopK(u32),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Read(#[from] DatasetError),
    #[error("duplicate doc_id {0}")]
    DuplicateId(String),
}

/// Lowercased alphanumeric runs.
pub fn search_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Immutable after construction; safe to query from many threads.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    docs: Vec<CorpusDoc>,
    postings: HashMap<String, Vec<(usize, u32)>>,
}

impl SearchIndex {
    pub fn build(docs: Vec<CorpusDoc>) -> Result<Self, CorpusError> {
        let mut seen = std::collections::HashSet::new();
        for d in &docs {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(CorpusError::DuplicateId(d.doc_id.clone()));
            }
        }
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (i, doc) in docs.iter().enumerate() {
            let mut tf: HashMap<String, u32> = HashMap::new();
            for tok in search_tokens(&doc.title).chain(search_tokens(&doc.text)) {
                *tf.entry(tok).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((i, count));
            }
        }
        Ok(SearchIndex { docs, postings })
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, CorpusError> {
        Self::build(read_jsonl(path)?)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Smoothed inverse document frequency, `ln(1 + N / df)`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, Vec::len);
        if df == 0 {
            return 0.0;
        }
        (1.0 + self.docs.len() as f64 / df as f64).ln()
    }

    /// Scores every document as Σ over distinct query terms of `tf · idf` and
    /// returns the best `top_k`, ties broken by ascending `doc_id`.
    pub fn search(&self, request: &SearchRequest) -> Result<Vec<SearchHit>, SearchError> {
        let k = request.effective_top_k()?;
        let mut scores = vec![0.0f64; self.docs.len()];
        let mut terms: Vec<String> = search_tokens(&request.query).collect();
        terms.sort();
        terms.dedup();
        for term in &terms {
            if let Some(list) = self.postings.get(term) {
                let idf = self.idf(term);
                for &(doc, tf) in list {
                    scores[doc] += tf as f64 * idf;
                }
            }
        }
        let mut order: Vec<usize> = (0..self.docs.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.docs[a].doc_id.cmp(&self.docs[b].doc_id))
        });
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| SearchHit {
                doc_id: self.docs[i].doc_id.clone(),
                snippet: snippet(&self.docs[i]),
                score: scores[i],
            })
            .collect())
    }
}

fn snippet(doc: &CorpusDoc) -> String {
    let mut s = format!("{}: {}", doc.title, doc.text);
    if s.chars().count() > SNIPPET_CHARS {
        s = s.chars().take(SNIPPET_CHARS).collect::<String>() + "...";
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, title: &str, text: &str) -> CorpusDoc {
        CorpusDoc { doc_id: id.into(), title: title.into(), text: text.into() }
    }

    fn toy() -> SearchIndex {
        SearchIndex::build(vec![
            doc("a", "Paris", "capital city of france"),
            doc("b", "Berlin", "capital city of germany"),
            doc("c", "Rome", "ancient city in italy"),
        ])
        .unwrap()
    }

    #[test]
    fn title_match_ranks_first_with_hand_scored_values() {
        // "berlin" appears only in doc b: tf 1, df 1, idf ln(1 + 3/1) = ln 4.
        // "city" appears in all three: tf 1, idf ln(1 + 3/3) = ln 2.
        let hits = toy().search(&SearchRequest::new("Berlin city")).unwrap();
        assert_eq!(hits[0].doc_id, "b");
        assert!((hits[0].score - (4f64.ln() + 2f64.ln())).abs() < 1e-12);
        assert!((hits[1].score - 2f64.ln()).abs() < 1e-12);
        // Equal scores fall back to doc_id order.
        assert_eq!(hits[1].doc_id, "a");
        assert_eq!(hits[2].doc_id, "c");
    }

    #[test]
    fn top_k_bounds() {
        let idx = toy();
        assert_eq!(SearchRequest::new("x").effective_top_k(), Ok(5));
        assert_eq!(idx.search(&SearchRequest::new("x").with_top_k(51)), Err(SearchError::TopK(51)));
        assert_eq!(idx.search(&SearchRequest::new("x").with_top_k(0)), Err(SearchError::TopK(0)));
        assert_eq!(idx.search(&SearchRequest::new("city").with_top_k(50)).unwrap().len(), 3);
        assert_eq!(idx.search(&SearchRequest::new("city").with_top_k(1)).unwrap().len(), 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = SearchIndex::build(vec![doc("a", "x", "y"), doc("a", "z", "w")]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(id) if id == "a"));
    }
}
