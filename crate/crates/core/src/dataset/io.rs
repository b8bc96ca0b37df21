//! Line-delimited corpus files: `posts.jsonl`, `topics.jsonl`,
//! `histories.jsonl` and `splits.tsv`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{dual_filter, FilterOutcome, Post, Split, SplitAssignment, TopicRecord, UserHistory};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::sentiment::SentimentDistribution;

pub const POSTS_FILE: &str = "posts.jsonl";
pub const TOPICS_FILE: &str = "topics.jsonl";
pub const HISTORIES_FILE: &str = "histories.jsonl";
pub const SPLITS_FILE: &str = "splits.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopicLine {
    topic_id: String,
    hashtag: String,
    post_ids: Vec<String>,
    distribution: [f64; 7],
    participants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HistoryLine {
    user_id: String,
    post_ids: Vec<String>,
}

/// Writes through a sibling temp file and renames on success.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads one JSON value per nonblank line; `f` validates each record.
pub fn read_jsonl<T, R>(path: &Path, mut f: impl FnMut(T, usize) -> std::result::Result<R, String>) -> Result<Vec<R>>
where
    T: DeserializeOwned,
{
    let src = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(f(rec, i + 1).map_err(|msg| Error::Validation {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn import_posts(path: &Path) -> Result<Vec<Post>> {
    let mut ids = HashSet::new();
    read_jsonl(path, |p: Post, _| {
        p.check()?;
        if !ids.insert(p.post_id.clone()) {
            return Err(format!("duplicate post id {}", p.post_id));
        }
        Ok(p)
    })
}

pub fn export_posts(path: &Path, posts: &[Post]) -> Result<()> {
    write_atomic(path, to_jsonl(posts)?.as_bytes())
}

pub fn write_splits(path: &Path, split: &SplitAssignment) -> Result<()> {
    let mut s = String::new();
    for (id, sp) in &split.order {
        s.push_str(id);
        s.push('\t');
        s.push_str(sp.as_str());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Reads `id<TAB>split` lines. The seed is not stored in the file.
pub fn read_splits(path: &Path) -> Result<SplitAssignment> {
    let src = fs::read_to_string(path)?;
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (id, sp) = line.split_once('\t').ok_or_else(|| err("expected id<TAB>split".into()))?;
        let sp: Split = sp.parse().map_err(|e: Error| err(e.to_string()))?;
        if !seen.insert(id.to_string()) {
            return Err(err(format!("duplicate id {id}")));
        }
        order.push((id.to_string(), sp));
    }
    Ok(SplitAssignment { seed: 0, order })
}

/// A complete validated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub posts: Vec<Post>,
    pub topics: Vec<TopicRecord>,
    pub histories: Vec<UserHistory>,
}

impl Corpus {
    /// Loads the three JSONL files from `dir`. `strict` enforces the
    /// 10–953 history-size range.
    pub fn load(dir: &Path, strict: bool) -> Result<Self> {
        let posts = import_posts(&dir.join(POSTS_FILE))?;
        let by_id: HashMap<&str, &Post> = posts.iter().map(|p| (p.post_id.as_str(), p)).collect();
        let lookup = |ids: &[String]| -> std::result::Result<Vec<Post>, String> {
            ids.iter()
                .map(|id| by_id.get(id.as_str()).map(|p| (*p).clone()).ok_or_else(|| format!("unknown post id {id}")))
                .collect()
        };

        let mut topic_ids = HashSet::new();
        let topics = read_jsonl(&dir.join(TOPICS_FILE), |t: TopicLine, _| {
            let distribution = SentimentDistribution::new(t.distribution).map_err(|e| e.to_string())?;
            if !topic_ids.insert(t.topic_id.clone()) {
                return Err(format!("duplicate topic id {}", t.topic_id));
            }
            let rec = TopicRecord {
                topic_id: t.topic_id,
                hashtag: t.hashtag,
                posts: lookup(&t.post_ids)?,
                distribution,
                participants: t.participants,
            };
            rec.check()?;
            Ok(rec)
        })?;

        let mut users = HashSet::new();
        let histories = read_jsonl(&dir.join(HISTORIES_FILE), |h: HistoryLine, _| {
            if !users.insert(h.user_id.clone()) {
                return Err(format!("duplicate user id {}", h.user_id));
            }
            let hist = UserHistory {
                posts: lookup(&h.post_ids)?,
                user_id: h.user_id,
            };
            check_history(&hist, strict)?;
            Ok(hist)
        })?;
        Ok(Corpus { posts, topics, histories })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        export_posts(&dir.join(POSTS_FILE), &self.posts)?;
        let topics: Vec<TopicLine> = self
            .topics
            .iter()
            .map(|t| TopicLine {
                topic_id: t.topic_id.clone(),
                hashtag: t.hashtag.clone(),
                post_ids: t.posts.iter().map(|p| p.post_id.clone()).collect(),
                distribution: *t.distribution.weights(),
                participants: t.participants,
            })
            .collect();
        write_atomic(&dir.join(TOPICS_FILE), to_jsonl(&topics)?.as_bytes())?;
        let histories: Vec<HistoryLine> = self
            .histories
            .iter()
            .map(|h| HistoryLine {
                user_id: h.user_id.clone(),
                post_ids: h.posts.iter().map(|p| p.post_id.clone()).collect(),
            })
            .collect();
        write_atomic(&dir.join(HISTORIES_FILE), to_jsonl(&histories)?.as_bytes())
    }

    pub fn files(dir: &Path) -> [PathBuf; 3] {
        [dir.join(POSTS_FILE), dir.join(TOPICS_FILE), dir.join(HISTORIES_FILE)]
    }

    pub fn topic(&self, id: &str) -> Option<&TopicRecord> {
        self.topics.iter().find(|t| t.topic_id == id)
    }

    pub fn history(&self, user_id: &str) -> Option<&UserHistory> {
        self.histories.iter().find(|h| h.user_id == user_id)
    }

    pub fn history_map(&self) -> BTreeMap<&str, &UserHistory> {
        self.histories.iter().map(|h| (h.user_id.as_str(), h)).collect()
    }

    /// Applies the dual filter to every post, then drops filtered posts
    /// from topics and histories. Topics or users left without posts are
    /// removed; the ground-truth distribution is kept as published.
    pub fn filtered(&self, noise_keywords: &[String], exec: Execution) -> (Corpus, FilterOutcome) {
        let outcome = dual_filter(&self.posts, noise_keywords, exec);
        let kept: HashSet<&str> = outcome.kept.iter().map(|p| p.post_id.as_str()).collect();
        let keep = |posts: &[Post]| -> Vec<Post> {
            posts.iter().filter(|p| kept.contains(p.post_id.as_str())).cloned().collect()
        };
        let topics = self
            .topics
            .iter()
            .filter_map(|t| {
                let posts = keep(&t.posts);
                let participants = posts.iter().map(|p| p.user_id.as_str()).collect::<HashSet<_>>().len();
                (!posts.is_empty()).then(|| TopicRecord {
                    posts,
                    participants,
                    ..t.clone()
                })
            })
            .collect();
        let histories = self
            .histories
            .iter()
            .filter_map(|h| {
                let posts = keep(&h.posts);
                (!posts.is_empty()).then(|| UserHistory {
                    user_id: h.user_id.clone(),
                    posts,
                })
            })
            .collect();
        let corpus = Corpus {
            posts: outcome.kept.clone(),
            topics,
            histories,
        };
        (corpus, outcome)
    }
}

fn check_history(h: &UserHistory, strict: bool) -> std::result::Result<(), String> {
    if h.posts.is_empty() {
        return Err(format!("user {} has an empty history", h.user_id));
    }
    if strict && !UserHistory::STRICT_RANGE.contains(&h.len()) {
        return Err(format!(
            "user {} has {} history posts, outside {}..={}",
            h.user_id,
            h.len(),
            UserHistory::STRICT_RANGE.start(),
            UserHistory::STRICT_RANGE.end()
        ));
    }
    if let Some(p) = h.posts.iter().find(|p| p.user_id != h.user_id) {
        return Err(format!("post {} belongs to {}, not {}", p.post_id, p.user_id, h.user_id));
    }
    if h.posts.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(format!("history of {} is not time-ordered", h.user_id));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_dataset, synth_generate, SynthConfig};

    #[test]
    fn empty_file_is_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("posts.jsonl");
        fs::write(&p, "").unwrap();
        assert!(import_posts(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_user_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("posts.jsonl");
        fs::write(
            &p,
            "{\"post_id\":\"a\",\"user_id\":\"u\",\"text\":\"#x# hi\",\"hashtags\":[\"x\"],\"timestamp\":1}\n\
             {\"post_id\":\"b\",\"text\":\"#x# hi\",\"hashtags\":[\"x\"],\"timestamp\":2}\n",
        )
        .unwrap();
        match import_posts(&p) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("user_id"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invariant_violation_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("posts.jsonl");
        fs::write(&p, "{\"post_id\":\"a\",\"user_id\":\"u\",\"text\":\"hi\",\"hashtags\":[\"X\"],\"timestamp\":1}\n").unwrap();
        assert!(matches!(import_posts(&p), Err(Error::Validation { line: 1, .. })));
    }

    #[test]
    fn corpus_round_trip_is_identity() {
        let corpus = synth_generate(&SynthConfig {
            n_topics: 4,
            n_users: 6,
            posts_per_user: 5,
            seed: 11,
        })
        .unwrap()
        .corpus;
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path(), false).unwrap();
        assert_eq!(back, corpus);
        // Strict mode rejects 5-post histories.
        assert!(matches!(Corpus::load(dir.path(), true), Err(Error::Validation { .. })));
    }

    #[test]
    fn splits_round_trip() {
        let ids: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
        let s = split_dataset(&ids, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SPLITS_FILE);
        write_splits(&p, &s).unwrap();
        assert_eq!(read_splits(&p).unwrap().order, s.order);
        fs::write(&p, "a\ttrain\nb\tbogus\n").unwrap();
        assert!(matches!(read_splits(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn filtered_corpus_drops_noise() {
        let corpus = synth_generate(&SynthConfig {
            n_topics: 3,
            n_users: 5,
            posts_per_user: 20,
            seed: 2,
        })
        .unwrap()
        .corpus;
        let kw = super::super::parse_keywords(super::super::NOISE_KEYWORDS_V1);
        let (clean, outcome) = corpus.filtered(&kw, Execution::Sequential);
        assert!(!outcome.dropped.is_empty());
        assert_eq!(clean.posts.len() + outcome.dropped.len(), corpus.posts.len());
        assert!(clean.histories.iter().flat_map(|h| &h.posts).all(|p| !p.hashtags.is_empty()));
    }
}
