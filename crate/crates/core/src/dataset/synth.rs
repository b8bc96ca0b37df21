//! Seeded synthetic corpus with vocabulary-separable topic clusters and
//! user archetypes that differ in style token and sentiment propensity.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Post, TopicRecord, UserHistory};
use crate::error::{Error, Result};
use crate::sentiment::{aggregate_distribution, Lexicon, SentimentLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_topics: usize,
    pub n_users: usize,
    pub posts_per_user: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_topics: 8,
            n_users: 60,
            posts_per_user: 12,
            seed: 0,
        }
    }
}

/// The response a user gave to a topic, with the label the offline
/// classifier assigns to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldResponse {
    pub topic_id: String,
    pub user_id: String,
    pub post_id: String,
    pub text: String,
    pub label: SentimentLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub responses: Vec<GoldResponse>,
    /// Style token of each user, in user order.
    pub styles: Vec<(String, &'static str)>,
}

const CLUSTERS: [(&str, [&str; 4]); 8] = [
    ("housing", ["rent", "mortgage", "landlord", "apartment"]),
    ("jobs", ["salary", "interview", "hiring", "overtime"]),
    ("health", ["hospital", "vaccine", "doctor", "clinic"]),
    ("education", ["exam", "school", "teacher", "campus"]),
    ("fraud", ["scam", "fraud", "refund", "police"]),
    ("food", ["hotpot", "restaurant", "kitchen", "poison"]),
    ("travel", ["train", "ticket", "airport", "tourist"]),
    ("sports", ["match", "coach", "team", "stadium"]),
];

/// (style token, dominant label, population weight).
const ARCHETYPES: [(&str, SentimentLabel, f64); 7] = [
    ("lol", SentimentLabel::Happy, 0.40),
    ("honestly", SentimentLabel::Angry, 0.22),
    ("sigh", SentimentLabel::Fear, 0.12),
    ("alas", SentimentLabel::Sad, 0.09),
    ("whatever", SentimentLabel::Disgusted, 0.08),
    ("indeed", SentimentLabel::Calm, 0.05),
    ("omg", SentimentLabel::Surprised, 0.04),
];

const NOISE_SNIPPETS: [&str; 3] = ["giveaway", "discount code", "fashionable outfit"];

pub fn sentiment_word(label: SentimentLabel) -> &'static str {
    match label {
        SentimentLabel::Happy => "joy",
        SentimentLabel::Sad => "sad",
        SentimentLabel::Angry => "rage",
        SentimentLabel::Calm => "calm",
        SentimentLabel::Fear => "fear",
        SentimentLabel::Surprised => "wow",
        SentimentLabel::Disgusted => "yuck",
    }
}

struct Cluster {
    name: String,
    words: Vec<String>,
    mood: SentimentLabel,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    loop {
        let w: String = (0..3)
            .flat_map(|_| {
                [
                    CONS[rng.random_range(0..CONS.len())] as char,
                    VOW[rng.random_range(0..VOW.len())] as char,
                ]
            })
            .collect();
        if Lexicon::bundled().scores(&w).iter().all(|&s| s == 0) {
            return w;
        }
    }
}

fn clusters(n: usize, rng: &mut ChaCha8Rng) -> Vec<Cluster> {
    (0..n)
        .map(|i| {
            let (name, words) = match CLUSTERS.get(i) {
                Some((name, words)) => (name.to_string(), words.iter().map(|w| w.to_string()).collect()),
                None => (format!("{}{i}", pseudo_word(rng)), (0..4).map(|_| pseudo_word(rng)).collect()),
            };
            Cluster {
                name,
                words,
                mood: SentimentLabel::ALL[rng.random_range(0..7)],
            }
        })
        .collect()
}

fn sample_label(rng: &mut ChaCha8Rng, dominant: SentimentLabel, mood: SentimentLabel) -> SentimentLabel {
    let u: f64 = rng.random();
    if u < 0.85 {
        dominant
    } else if u < 0.95 {
        mood
    } else {
        SentimentLabel::ALL[rng.random_range(0..7)]
    }
}

/// Generates the corpus. Ground-truth distributions are the offline
/// classifier's labels over the gold responses, aggregated per topic.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_topics == 0 || cfg.n_users == 0 || cfg.posts_per_user == 0 {
        return Err(Error::contract("synthetic corpus counts must all be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clusters = clusters(cfg.n_topics, &mut rng);
    let weights = WeightedIndex::new(ARCHETYPES.iter().map(|a| a.2)).expect("positive weights");
    let archetypes: Vec<usize> = (0..cfg.n_users).map(|_| weights.sample(&mut rng)).collect();

    let mut posts = Vec::new();
    let mut histories = Vec::new();
    let mut styles = Vec::new();
    for (u, &a) in archetypes.iter().enumerate() {
        let user_id = format!("u{u:03}");
        let (style, dominant, _) = ARCHETYPES[a];
        styles.push((user_id.clone(), style));
        let mut hist = Vec::new();
        for i in 0..cfg.posts_per_user {
            let c = &clusters[rng.random_range(0..clusters.len())];
            let word = &c.words[rng.random_range(0..c.words.len())];
            let label = sample_label(&mut rng, dominant, c.mood);
            let clean = format!("{word} {} {style}", sentiment_word(label));
            let text = match (i > 0).then(|| rng.random_range(0..10)) {
                Some(0) => format!("{clean} nothing tagged"),
                Some(1) => format!("#{}# {clean} {}", c.name, NOISE_SNIPPETS[rng.random_range(0..NOISE_SNIPPETS.len())]),
                _ => format!("#{}# {clean}", c.name),
            };
            let ts = (u * cfg.posts_per_user + i) as i64 * 60;
            hist.push(Post::new(format!("h{u:03}_{i:04}"), user_id.clone(), &text, ts)?);
        }
        posts.extend(hist.iter().cloned());
        histories.push(UserHistory { user_id, posts: hist });
    }

    let base_ts = (cfg.n_users * cfg.posts_per_user) as i64 * 60;
    let mut topics = Vec::new();
    let mut responses = Vec::new();
    for (t, c) in clusters.iter().enumerate() {
        let topic_id = format!("t{t:03}");
        let mut topic_posts = Vec::new();
        let mut labels = Vec::new();
        for (u, &a) in archetypes.iter().enumerate() {
            let (style, dominant, _) = ARCHETYPES[a];
            let label = sample_label(&mut rng, dominant, c.mood);
            let response = format!("{} {} {style}", sentiment_word(label), c.words[0]);
            let classified = Lexicon::bundled().classify(&response);
            debug_assert_eq!(classified, label);
            let post = Post::new(
                format!("p{t:03}_{u:03}"),
                histories[u].user_id.clone(),
                &format!("#{}# {response}", c.name),
                base_ts + (t * cfg.n_users + u) as i64,
            )?;
            responses.push(GoldResponse {
                topic_id: topic_id.clone(),
                user_id: post.user_id.clone(),
                post_id: post.post_id.clone(),
                text: response,
                label: classified,
            });
            labels.push(classified);
            topic_posts.push(post);
        }
        posts.extend(topic_posts.iter().cloned());
        topics.push(TopicRecord {
            topic_id,
            hashtag: c.name.clone(),
            distribution: aggregate_distribution(&labels)?,
            participants: cfg.n_users,
            posts: topic_posts,
        });
    }
    Ok(SynthCorpus {
        corpus: Corpus {
            posts,
            topics,
            histories,
        },
        responses,
        styles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sentiment::{classify_sentiment, Classifier};

    fn cfg(n_topics: usize, n_users: usize) -> SynthConfig {
        SynthConfig {
            n_topics,
            n_users,
            posts_per_user: 6,
            seed: 9,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_generate(&cfg(5, 10)).unwrap(), synth_generate(&cfg(5, 10)).unwrap());
        assert_ne!(
            synth_generate(&cfg(5, 10)).unwrap(),
            synth_generate(&SynthConfig { seed: 10, ..cfg(5, 10) }).unwrap()
        );
    }

    #[test]
    fn minimal_instance() {
        let s = synth_generate(&cfg(1, 1)).unwrap();
        assert_eq!(s.corpus.topics.len(), 1);
        assert_eq!(s.corpus.topics[0].participants, 1);
        let w = s.corpus.topics[0].distribution.weights();
        assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 1);
        assert!(synth_generate(&cfg(0, 1)).is_err());
    }

    #[test]
    fn ground_truth_recomputes_from_stub_classifier() {
        let s = synth_generate(&cfg(12, 30)).unwrap();
        for t in &s.corpus.topics {
            let labels: Vec<_> = t
                .posts
                .iter()
                .map(|p| classify_sentiment(&p.body(), Classifier::Lexicon).unwrap())
                .collect();
            assert_eq!(aggregate_distribution(&labels).unwrap(), t.distribution);
            assert!(t.check().is_ok());
        }
        assert_eq!(s.responses.len(), 12 * 30);
    }

    #[test]
    fn clusters_have_disjoint_vocabulary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cs = clusters(12, &mut rng);
        for (i, a) in cs.iter().enumerate() {
            for b in &cs[i + 1..] {
                assert_ne!(a.name, b.name);
                assert!(a.words.iter().all(|w| !b.words.contains(w)));
            }
        }
    }
}
