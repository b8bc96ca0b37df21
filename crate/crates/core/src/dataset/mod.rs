//! Post/topic/history data model, the two-rule preprocessing filter,
//! seeded 8/1/1 splitting, JSONL import/export and a synthetic corpus
//! generator.

pub mod io;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::sentiment::SentimentDistribution;
use crate::text;

pub use io::Corpus;
pub use synth::{synth_generate, SynthConfig};

pub const NOISE_KEYWORDS_V1: &str = include_str!("../../assets/noise_keywords_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Post {
    pub post_id: String,
    pub user_id: String,
    pub text: String,
    pub hashtags: Vec<String>,
    pub timestamp: i64,
}

impl Post {
    /// Normalizes the text and extracts its hashtags.
    pub fn new(post_id: impl Into<String>, user_id: impl Into<String>, text: &str, timestamp: i64) -> Result<Self> {
        let text = text::normalize(text);
        if text.is_empty() {
            return Err(Error::contract("post text is empty after normalization"));
        }
        Ok(Post {
            post_id: post_id.into(),
            user_id: user_id.into(),
            hashtags: text::extract_hashtags(&text),
            text,
            timestamp,
        })
    }

    /// Checks the record invariants; returns a description of the first violation.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.post_id.is_empty() || self.user_id.is_empty() {
            return Err("post id and user id must be nonempty".into());
        }
        if self.text.is_empty() || text::normalize(&self.text) != self.text {
            return Err(format!("post {} text is empty or not normalized", self.post_id));
        }
        let mut seen = HashSet::new();
        for h in &self.hashtags {
            if h.is_empty() || *h != h.to_lowercase() || !seen.insert(h) {
                return Err(format!("post {} hashtags must be lowercase and unique", self.post_id));
            }
        }
        Ok(())
    }

    pub fn has_hashtag(&self, tag: &str) -> bool {
        self.hashtags.iter().any(|h| h == tag)
    }

    /// Text with `#...#` / `#token` markers removed.
    pub fn body(&self) -> String {
        strip_hashtags(&self.text)
    }
}

/// Removes `#topic#` pairs and `#` signs, then renormalizes.
pub fn strip_hashtags(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find('#') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        match after.find('#') {
            Some(end)
                if end > 0
                    && !after[..end].starts_with(char::is_whitespace)
                    && !after[..end].ends_with(char::is_whitespace) =>
            {
                rest = &after[end + 1..];
            }
            _ => rest = after,
        }
        out.push(' ');
    }
    out.push_str(rest);
    text::normalize(&out)
}

/// A user's posts in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub user_id: String,
    pub posts: Vec<Post>,
}

impl UserHistory {
    /// Lower and upper bound on history size enforced by strict import.
    pub const STRICT_RANGE: std::ops::RangeInclusive<usize> = 10..=953;

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicRecord {
    pub topic_id: String,
    /// Lowercased hashtag text; doubles as the news text shown to the model.
    pub hashtag: String,
    pub posts: Vec<Post>,
    pub distribution: SentimentDistribution,
    pub participants: usize,
}

impl TopicRecord {
    pub fn check(&self) -> std::result::Result<(), String> {
        if let Some(p) = self.posts.iter().find(|p| !p.has_hashtag(&self.hashtag)) {
            return Err(format!("post {} lacks topic hashtag #{}#", p.post_id, self.hashtag));
        }
        let users: HashSet<&str> = self.posts.iter().map(|p| p.user_id.as_str()).collect();
        if users.len() != self.participants {
            return Err(format!(
                "topic {} lists {} participants but posts come from {} users",
                self.topic_id,
                self.participants,
                users.len()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DropReason {
    NoHashtag,
    NoiseKeyword(String),
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::NoHashtag => f.write_str("no_hashtag"),
            DropReason::NoiseKeyword(k) => write!(f, "noise_keyword:{k}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Post>,
    pub dropped: Vec<(Post, DropReason)>,
}

/// Parses a keyword list: one per line, `#` comments, blank lines ignored.
pub fn parse_keywords(src: &str) -> Vec<String> {
    src.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| text::normalize(l).to_lowercase())
        .collect()
}

/// Keeps a post iff it carries a hashtag and contains none of the noise
/// keywords (case-insensitive substring match on normalized text).
pub fn dual_filter(posts: &[Post], noise_keywords: &[String], exec: Execution) -> FilterOutcome {
    let keywords: Vec<String> = noise_keywords
        .iter()
        .map(|k| text::normalize(k).to_lowercase())
        .filter(|k| !k.is_empty())
        .collect();
    let verdicts = exec.map(posts, |p| {
        if p.hashtags.is_empty() {
            return Some(DropReason::NoHashtag);
        }
        let lowered = text::normalize(&p.text).to_lowercase();
        keywords
            .iter()
            .find(|k| lowered.contains(k.as_str()))
            .map(|k| DropReason::NoiseKeyword(k.clone()))
    });
    let mut out = FilterOutcome::default();
    for (p, v) in posts.iter().zip(verdicts) {
        match v {
            None => out.kept.push(p.clone()),
            Some(r) => out.dropped.push((p.clone(), r)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    /// Ids in shuffled order, each with its split.
    pub order: Vec<(String, Split)>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.order.iter().find(|(i, _)| i == id).map(|(_, s)| *s)
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.order
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(i, _)| i.as_str())
            .collect()
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |s| self.order.iter().filter(|(_, x)| *x == s).count();
        (count(Split::Train), count(Split::Valid), count(Split::Test))
    }

    pub fn as_map(&self) -> BTreeMap<&str, Split> {
        self.order.iter().map(|(i, s)| (i.as_str(), *s)).collect()
    }
}

/// Split sizes for `n` records: train and valid rounded half-up from
/// 80% / 10%, test takes the rest. 97 → (78, 10, 9).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n * 8 + 5) / 10;
    let valid = ((n + 5) / 10).min(n - train);
    (train, valid, n - train - valid)
}

/// Seeded shuffle followed by contiguous train/valid/test slices.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<SplitAssignment> {
    if ids.len() < 3 {
        return Err(Error::contract(format!("need at least 3 records to split, got {}", ids.len())));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|i| !seen.insert(i.as_str())) {
        return Err(Error::contract(format!("duplicate id {dup:?}")));
    }
    if ids.len() < 10 {
        log::warn!("splitting only {} records", ids.len());
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, valid, _) = split_sizes(ids.len());
    let order = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < train {
                Split::Train
            } else if i < train + valid {
                Split::Valid
            } else {
                Split::Test
            };
            (id, s)
        })
        .collect();
    Ok(SplitAssignment { seed, order })
}
