//! Okapi BM25 over a user's posts.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::text;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone)]
struct Doc {
    text: String,
    tf: HashMap<String, usize>,
    len: usize,
}

/// Immutable index; document ids are positions in the input list.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    docs: Vec<Doc>,
    df: HashMap<String, usize>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub doc_id: usize,
    pub score: f64,
}

/// Hits sorted by score descending, ties by ascending document id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn doc_ids(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.doc_id).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// `rank<TAB>doc_id<TAB>score` lines, rank from 1, 6 decimals.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, h) in self.hits.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{:.6}", i + 1, h.doc_id, h.score);
        }
        s
    }
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(docs: &[S], k1: f64, b: f64) -> Result<Self> {
        if !(k1 > 0.0 && k1.is_finite()) || !(0.0..=1.0).contains(&b) {
            return Err(Error::Config(format!("BM25 needs k1 > 0 and b in [0, 1], got k1={k1} b={b}")));
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        let docs: Vec<Doc> = docs
            .iter()
            .map(|d| {
                let terms = text::terms(d.as_ref());
                let mut tf: HashMap<String, usize> = HashMap::new();
                for t in &terms {
                    *tf.entry(t.clone()).or_default() += 1;
                }
                for t in tf.keys() {
                    *df.entry(t.clone()).or_default() += 1;
                }
                Doc {
                    text: d.as_ref().to_string(),
                    len: terms.len(),
                    tf,
                }
            })
            .collect();
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            docs.iter().map(|d| d.len as f64).sum::<f64>() / docs.len() as f64
        };
        Ok(Bm25Index { docs, df, avg_len, k1, b })
    }

    pub fn with_defaults<S: AsRef<str>>(docs: &[S]) -> Self {
        Self::build(docs, DEFAULT_K1, DEFAULT_B).expect("default parameters are valid")
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, id: usize) -> usize {
        self.docs[id].len
    }

    pub fn doc_text(&self, id: usize) -> &str {
        &self.docs[id].text
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of one document; repeated query terms count repeatedly.
    pub fn score(&self, doc_id: usize, query_terms: &[String]) -> f64 {
        let d = &self.docs[doc_id];
        let norm = if self.avg_len > 0.0 {
            1.0 - self.b + self.b * d.len as f64 / self.avg_len
        } else {
            1.0
        };
        query_terms
            .iter()
            .map(|t| match d.tf.get(t) {
                Some(&f) => {
                    let f = f as f64;
                    self.idf(t) * f * (self.k1 + 1.0) / (f + self.k1 * norm)
                }
                None => 0.0,
            })
            .sum()
    }

    pub fn retrieve_topk(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        self.retrieve_topk_with(query, k, Execution::Sequential)
    }

    /// Scores documents under `exec`; ranking is independent of the strategy.
    pub fn retrieve_topk_with(&self, query: &str, k: usize, exec: Execution) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::contract("top-k needs k >= 1"));
        }
        let terms: Vec<String> = text::terms(query).into_iter().filter(|t| self.df.contains_key(t)).collect();
        if terms.is_empty() {
            return Ok(RetrievalResult::default());
        }
        let scores = exec.map_range(self.docs.len(), |i| self.score(i, &terms));
        let mut hits: Vec<Hit> = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .map(|(doc_id, score)| Hit { doc_id, score })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
        hits.truncate(k);
        Ok(RetrievalResult { hits })
    }
}
