//! End-to-end stages: retrieve → persona → prompt → generate → classify →
//! aggregate → compare.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Post, UserHistory};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{build_prompt, generate, PromptSequence, ToyModel, ToyModelConfig};
use crate::pac_lora::GateRecord;
use crate::persona::{Extractor, Persona, PersonaCache};
use crate::retrieval::Bm25Index;
use crate::sentiment::{
    aggregate_distribution, classify_sentiment, js_divergence, sentiment_metrics, Classifier, Metrics,
    SentimentDistribution, SentimentLabel,
};

/// Top-k posts of `history` for `query`; when nothing matches, the `k`
/// most recent posts.
pub fn retrieve_history(history: &[Post], query: &str, k: usize) -> Result<Vec<Post>> {
    let texts: Vec<&str> = history.iter().map(|p| p.text.as_str()).collect();
    let idx = Bm25Index::with_defaults(&texts);
    let hits = idx.retrieve_topk(query, k)?;
    if hits.is_empty() {
        let skip = history.len().saturating_sub(k);
        return Ok(history[skip..].to_vec());
    }
    Ok(hits.hits.iter().map(|h| history[h.doc_id].clone()).collect())
}

/// The posts a persona is built from: the user's top-k posts ranked
/// against the whole history's text.
pub fn persona_posts(history: &UserHistory, k: usize) -> Result<Vec<Post>> {
    let query = history.posts.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join(" ");
    retrieve_history(&history.posts, &query, k)
}

/// One persona per user, in user-id order.
pub fn build_personas(
    corpus: &Corpus,
    k: usize,
    extractor: Extractor<'_>,
    cache: &PersonaCache,
    exec: Execution,
) -> Result<BTreeMap<String, Persona>> {
    let jobs = corpus
        .histories
        .iter()
        .map(|h| Ok((h.user_id.clone(), persona_posts(h, k)?)))
        .collect::<Result<Vec<_>>>()?;
    let personas = cache.extract_batch(&jobs, extractor, exec)?;
    Ok(personas.into_iter().map(|p| (p.user_id.clone(), p)).collect())
}

/// A (topic, user) pair with its prompt and, for supervised use, the
/// user's actual response.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub topic_id: String,
    pub user_id: String,
    /// The response post this example predicts.
    pub post_id: String,
    pub prompt: PromptSequence,
    pub reference: String,
}

/// Builds one example per response post of every listed topic. History
/// is restricted to posts older than the response.
pub fn build_examples(
    corpus: &Corpus,
    topic_ids: &[String],
    personas: &BTreeMap<String, Persona>,
    cfg: &ToyModelConfig,
    with_response: bool,
) -> Result<Vec<Example>> {
    let histories = corpus.history_map();
    let mut out = Vec::new();
    for tid in topic_ids {
        let topic = corpus
            .topic(tid)
            .ok_or_else(|| Error::contract(format!("unknown topic {tid}")))?;
        for post in &topic.posts {
            let history: Vec<Post> = match histories.get(post.user_id.as_str()) {
                Some(h) if !cfg.ablations.no_history => {
                    let older: Vec<Post> = h
                        .posts
                        .iter()
                        .filter(|p| p.timestamp < post.timestamp && p.post_id != post.post_id)
                        .cloned()
                        .collect();
                    retrieve_history(&older, &topic.hashtag, cfg.top_k)?
                }
                _ => Vec::new(),
            };
            let persona = if cfg.ablations.no_persona {
                None
            } else {
                personas.get(&post.user_id)
            };
            let reference = post.body();
            let response = (with_response && !reference.is_empty()).then_some(reference.as_str());
            let prompt = build_prompt(persona, &history, &topic.hashtag, response, cfg.context_len)?;
            out.push(Example {
                topic_id: tid.clone(),
                user_id: post.user_id.clone(),
                post_id: post.post_id.clone(),
                prompt,
                reference,
            });
        }
    }
    Ok(out)
}

/// A generated response to the topic post `post_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generation {
    pub topic_id: String,
    pub user_id: String,
    pub post_id: String,
    pub text: String,
}

/// Greedy (temperature 0) or seeded generation for each example, where
/// example `i` samples with seed `seed + i`.
pub fn generate_responses(model: &ToyModel, examples: &[Example], temperature: f64, seed: u64, exec: Execution) -> Result<Vec<Generation>> {
    let prompts: Vec<(usize, PromptSequence)> = examples.iter().map(|e| e.prompt.prompt_only()).enumerate().collect();
    let max = model.config().max_new_tokens;
    let texts = exec.try_map(&prompts, |(i, p)| generate(model, p, max, temperature, seed.wrapping_add(*i as u64)))?;
    Ok(examples
        .iter()
        .zip(texts)
        .map(|(e, text)| Generation {
            topic_id: e.topic_id.clone(),
            user_id: e.user_id.clone(),
            post_id: e.post_id.clone(),
            text,
        })
        .collect())
}

pub fn gate_records(model: &ToyModel, examples: &[Example], exec: Execution) -> Result<Vec<GateRecord>> {
    exec.try_map(examples, |e| {
        let (ga, gb) = model.gates(&e.prompt)?;
        Ok(GateRecord {
            topic_id: e.topic_id.clone(),
            user_id: e.user_id.clone(),
            layer_id: 0,
            ga,
            gb,
        })
    })
}

/// Labels a generated response; an empty generation carries no signal and
/// is labeled calm.
pub fn label_response(text: &str, classifier: Classifier<'_>) -> Result<SentimentLabel> {
    if text.trim().is_empty() {
        return Ok(SentimentLabel::Calm);
    }
    classify_sentiment(text, classifier)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicEval {
    pub topic_id: String,
    pub predicted: SentimentDistribution,
    pub truth: SentimentDistribution,
    pub js: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub micro: Metrics,
    pub topics: Vec<TopicEval>,
}

impl Evaluation {
    pub fn mean_js(&self) -> f64 {
        self.topics.iter().map(|t| t.js).sum::<f64>() / self.topics.len() as f64
    }
}

/// Predicted and reference labels of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGeneration {
    pub topic_id: String,
    pub post_id: String,
    pub predicted: SentimentLabel,
    pub gold: SentimentLabel,
}

/// Micro accuracy / macro-F1 of generated against reference labels and
/// per-topic JS divergence between aggregated predictions and the
/// topic's ground-truth distribution. References are the bodies of the
/// posts the generations answer.
pub fn evaluate(corpus: &Corpus, generated: &[Generation], classifier: Classifier<'_>, exec: Execution) -> Result<Evaluation> {
    evaluate_labeled(corpus, &label_generations(corpus, generated, classifier, exec)?)
}

pub fn label_generations(
    corpus: &Corpus,
    generated: &[Generation],
    classifier: Classifier<'_>,
    exec: Execution,
) -> Result<Vec<LabeledGeneration>> {
    if generated.is_empty() {
        return Err(Error::EmptyCollection("generations"));
    }
    let references = generated
        .iter()
        .map(|g| {
            let topic = corpus
                .topic(&g.topic_id)
                .ok_or_else(|| Error::contract(format!("unknown topic {}", g.topic_id)))?;
            let post = topic
                .posts
                .iter()
                .find(|p| p.post_id == g.post_id && p.user_id == g.user_id)
                .ok_or_else(|| Error::contract(format!("topic {} has no post {} by {}", g.topic_id, g.post_id, g.user_id)))?;
            Ok(post.body())
        })
        .collect::<Result<Vec<_>>>()?;
    let pred = exec.try_map(generated, |g| label_response(&g.text, classifier))?;
    let gold = exec.try_map(&references, |r| label_response(r, classifier))?;
    Ok(generated
        .iter()
        .zip(pred.into_iter().zip(gold))
        .map(|(g, (predicted, gold))| LabeledGeneration {
            topic_id: g.topic_id.clone(),
            post_id: g.post_id.clone(),
            predicted,
            gold,
        })
        .collect())
}

/// Metrics from already-labeled generations.
pub fn evaluate_labeled(corpus: &Corpus, labeled: &[LabeledGeneration]) -> Result<Evaluation> {
    if labeled.is_empty() {
        return Err(Error::EmptyCollection("labeled generations"));
    }
    let pred: Vec<SentimentLabel> = labeled.iter().map(|l| l.predicted).collect();
    let gold: Vec<SentimentLabel> = labeled.iter().map(|l| l.gold).collect();
    let micro = sentiment_metrics(&pred, &gold)?;
    let mut by_topic: BTreeMap<&str, Vec<SentimentLabel>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for l in labeled {
        let entry = by_topic.entry(l.topic_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(l.topic_id.as_str());
        }
        entry.push(l.predicted);
    }
    let topics = order
        .into_iter()
        .map(|tid| {
            let truth = corpus
                .topic(tid)
                .ok_or_else(|| Error::contract(format!("unknown topic {tid}")))?
                .distribution;
            let predicted = aggregate_distribution(&by_topic[tid])?;
            Ok(TopicEval {
                topic_id: tid.to_string(),
                js: js_divergence(&predicted, &truth),
                predicted,
                truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { micro, topics })
}

/// Mean JS divergence of a fixed predicted distribution against each topic.
pub fn constant_predictor_js(corpus: &Corpus, topic_ids: &[String], predicted: &SentimentDistribution) -> Result<f64> {
    if topic_ids.is_empty() {
        return Err(Error::EmptyCollection("topics"));
    }
    let mut total = 0.0;
    for tid in topic_ids {
        let t = corpus
            .topic(tid)
            .ok_or_else(|| Error::contract(format!("unknown topic {tid}")))?;
        total += js_divergence(predicted, &t.distribution);
    }
    Ok(total / topic_ids.len() as f64)
}
