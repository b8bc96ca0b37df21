//! Seven-label sentiment taxonomy: micro classification, macro aggregation,
//! Jensen-Shannon alignment, accuracy / macro-F1 and judge scoring.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::persona::Persona;
use crate::provider::{fill_template, template_hash, ProviderClient, ProviderRequest};
use crate::text;

pub const SENTIMENT_TEMPLATE_ID: &str = "sentiment_v1";
pub const SENTIMENT_TEMPLATE: &str = include_str!("../templates/sentiment_v1.txt");
pub const JUDGE_TEMPLATE_ID: &str = "judge_v1";
pub const JUDGE_TEMPLATE: &str = include_str!("../templates/judge_v1.txt");
const BUNDLED_LEXICON: &str = include_str!("../assets/sentiment_lexicon_v1.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Happy,
    Sad,
    Angry,
    Calm,
    Fear,
    Surprised,
    Disgusted,
}

impl SentimentLabel {
    /// Fixed label order used by distributions and tie-breaking.
    pub const ALL: [SentimentLabel; 7] = [
        SentimentLabel::Happy,
        SentimentLabel::Sad,
        SentimentLabel::Angry,
        SentimentLabel::Calm,
        SentimentLabel::Fear,
        SentimentLabel::Surprised,
        SentimentLabel::Disgusted,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SentimentLabel::Happy => "happy",
            SentimentLabel::Sad => "sad",
            SentimentLabel::Angry => "angry",
            SentimentLabel::Calm => "calm",
            SentimentLabel::Fear => "fear",
            SentimentLabel::Surprised => "surprised",
            SentimentLabel::Disgusted => "disgusted",
        }
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SentimentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sentiment label {s:?}")))
    }
}

/// Normalized weights over the seven labels in [`SentimentLabel::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SentimentDistribution([f64; 7]);

impl SentimentDistribution {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(weights: [f64; 7]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::contract(format!("distribution has negative or non-finite weight: {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::contract(format!("distribution sums to {sum}, not 1")));
        }
        Ok(SentimentDistribution(weights))
    }

    pub fn uniform() -> Self {
        SentimentDistribution([1.0 / 7.0; 7])
    }

    pub fn one_hot(label: SentimentLabel) -> Self {
        let mut w = [0.0; 7];
        w[label.index()] = 1.0;
        SentimentDistribution(w)
    }

    pub fn weights(&self) -> &[f64; 7] {
        &self.0
    }

    pub fn get(&self, label: SentimentLabel) -> f64 {
        self.0[label.index()]
    }

    /// Seven tab-separated values with six decimals.
    pub fn to_tsv(&self) -> String {
        self.0.iter().map(|w| format!("{w:.6}")).collect::<Vec<_>>().join("\t")
    }
}

impl TryFrom<Vec<f64>> for SentimentDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let arr: [f64; 7] = v
            .try_into()
            .map_err(|v: Vec<f64>| Error::contract(format!("distribution needs 7 weights, got {}", v.len())))?;
        SentimentDistribution::new(arr)
    }
}

impl From<SentimentDistribution> for Vec<f64> {
    fn from(d: SentimentDistribution) -> Self {
        d.0.to_vec()
    }
}

/// Keyword lexicon for the offline classifier.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<(SentimentLabel, String)>,
}

impl Lexicon {
    /// Parses `label<TAB>term` lines; `#` starts a comment line.
    pub fn parse(src: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, term) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("lexicon line {}: expected label<TAB>term", i + 1)))?;
            entries.push((label.parse()?, term.trim().to_lowercase()));
        }
        Ok(Lexicon { entries })
    }

    pub fn bundled() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| Lexicon::parse(BUNDLED_LEXICON).expect("bundled lexicon parses"))
    }

    pub fn entries(&self) -> &[(SentimentLabel, String)] {
        &self.entries
    }

    /// Hit counts per label.
    pub fn scores(&self, text: &str) -> [usize; 7] {
        let words = text::words(text);
        let lowered = text.to_lowercase();
        let mut s = [0usize; 7];
        for (label, term) in &self.entries {
            s[label.index()] += text::count_entry(term, &words, &lowered);
        }
        s
    }

    /// Highest score wins, ties go to the earlier label, no hits → calm.
    pub fn classify(&self, text: &str) -> SentimentLabel {
        let s = self.scores(text);
        let mut best = None;
        for (i, &v) in s.iter().enumerate() {
            if v > 0 && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        best.map_or(SentimentLabel::Calm, |(i, _)| SentimentLabel::ALL[i])
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Classifier<'a> {
    Lexicon,
    Provider(&'a ProviderClient),
}

/// Strictly parses a one-word provider label reply.
pub fn parse_label_reply(raw: &str) -> Result<SentimentLabel> {
    raw.trim().to_ascii_lowercase().parse().map_err(|_| Error::ProviderFormat {
        msg: "reply is not one of the seven labels".into(),
        raw: raw.to_string(),
    })
}

pub fn classify_sentiment(comment: &str, classifier: Classifier<'_>) -> Result<SentimentLabel> {
    if comment.trim().is_empty() {
        return Err(Error::contract("cannot classify an empty comment"));
    }
    match classifier {
        Classifier::Lexicon => Ok(Lexicon::bundled().classify(comment)),
        Classifier::Provider(client) => {
            let prompt = fill_template(SENTIMENT_TEMPLATE, &[("comment", comment)]);
            let req = ProviderRequest::new(SENTIMENT_TEMPLATE_ID, prompt, 8, 0.0)?;
            parse_label_reply(&client.chat_complete(&req)?.raw)
        }
    }
}

/// Classifies many comments, fanning out under `exec`; order is preserved.
pub fn classify_batch(comments: &[String], classifier: Classifier<'_>, exec: Execution) -> Result<Vec<SentimentLabel>> {
    exec.try_map(comments, |c| classify_sentiment(c, classifier))
}

/// Normalized label counts.
pub fn aggregate_distribution(labels: &[SentimentLabel]) -> Result<SentimentDistribution> {
    if labels.is_empty() {
        return Err(Error::EmptyCollection("sentiment labels"));
    }
    let mut counts = [0usize; 7];
    for l in labels {
        counts[l.index()] += 1;
    }
    let n = labels.len() as f64;
    // Exact proportions can miss 1.0 by an ulp; new() tolerates 1e-9.
    SentimentDistribution::new(counts.map(|c| c as f64 / n))
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).log2())
        .sum()
}

/// Jensen-Shannon divergence in bits, in [0, 1].
pub fn js_divergence(p: &SentimentDistribution, q: &SentimentDistribution) -> f64 {
    js_bits(p.weights(), q.weights())
}

/// Jensen-Shannon divergence of two arbitrary-length probability vectors.
pub fn js_divergence_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::contract(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for d in [p, q] {
        if d.iter().any(|w| !w.is_finite() || *w < 0.0) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("{d:?} is not a probability vector")));
        }
    }
    Ok(js_bits(p, q))
}

fn js_bits(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    js.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1; classes absent from both sides are skipped.
pub fn sentiment_metrics(pred: &[SentimentLabel], gold: &[SentimentLabel]) -> Result<Metrics> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyCollection("sentiment predictions"));
    }
    let mut tp = [0usize; 7];
    let mut fp = [0usize; 7];
    let mut fn_ = [0usize; 7];
    let mut correct = 0;
    for (p, g) in pred.iter().zip(gold) {
        if p == g {
            tp[p.index()] += 1;
            correct += 1;
        } else {
            fp[p.index()] += 1;
            fn_[g.index()] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut classes = 0;
    for c in 0..7 {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        classes += 1;
        let precision = if tp[c] + fp[c] > 0 { tp[c] as f64 / (tp[c] + fp[c]) as f64 } else { 0.0 };
        let recall = if tp[c] + fn_[c] > 0 { tp[c] as f64 / (tp[c] + fn_[c]) as f64 } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(Metrics {
        accuracy: correct as f64 / pred.len() as f64,
        macro_f1: f1_sum / classes as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub language_style: f64,
    pub content_focus: f64,
    pub persona_dynamics: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgedComment {
    pub score: JudgeScore,
    pub template_hash: String,
    pub request_hash: String,
}

/// Parses `"a / b / c"` with each number in [0, 10].
pub fn parse_judge_reply(raw: &str) -> Result<JudgeScore> {
    let bad = |msg: &str| Error::ProviderFormat {
        msg: msg.to_string(),
        raw: raw.to_string(),
    };
    let parts: Vec<&str> = raw.trim().split('/').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad("expected three slash-separated scores"));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        let x: f64 = p.parse().map_err(|_| bad("score is not a number"))?;
        if !(0.0..=10.0).contains(&x) {
            return Err(bad("score outside 0-10"));
        }
        *slot = x;
    }
    Ok(JudgeScore {
        language_style: v[0],
        content_focus: v[1],
        persona_dynamics: v[2],
    })
}

pub fn judge_comment(generated: &str, reference: &str, persona: &Persona, judge: &ProviderClient) -> Result<JudgedComment> {
    if generated.trim().is_empty() || reference.trim().is_empty() {
        return Err(Error::contract("judge needs nonempty generated and reference comments"));
    }
    let prompt = fill_template(
        JUDGE_TEMPLATE,
        &[
            ("persona", &persona.render()),
            ("reference", reference),
            ("generated", generated),
        ],
    );
    let req = ProviderRequest::new(JUDGE_TEMPLATE_ID, prompt, 16, 0.0)?;
    let reply = judge.chat_complete(&req)?;
    let score = parse_judge_reply(&reply.raw)?;
    let template_hash = template_hash(JUDGE_TEMPLATE);
    log::info!("judge template {} request {}", &template_hash[..12], &reply.request_hash[..12]);
    Ok(JudgedComment {
        score,
        template_hash,
        request_hash: reply.request_hash,
    })
}
