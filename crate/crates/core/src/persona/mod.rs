//! Five-dimension user personas built from retrieved history posts, either
//! by a text-analysis provider or by the offline rule-based extractor.

mod stub;

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::io::{read_jsonl, to_jsonl, write_atomic};
use crate::dataset::Post;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::provider::{fill_template, ProviderClient, ProviderRequest};

pub use stub::{stub_persona, PersonaRules};

pub const PERSONA_TEMPLATE_ID: &str = "persona_v1";
pub const PERSONA_TEMPLATE: &str = include_str!("../../templates/persona_v1.txt");
pub const MAX_PHRASES: usize = 8;
pub const MAX_PHRASE_CHARS: usize = 64;

/// Reply labels in the order they are requested.
pub const DIMENSIONS: [&str; 5] = ["Interests", "Language style", "Emotional tone", "Personality traits", "Values"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaSource {
    Provider,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub user_id: String,
    pub interests: Vec<String>,
    pub language_style: Vec<String>,
    pub emotional_tone: Vec<String>,
    pub personality_traits: Vec<String>,
    pub values: Vec<String>,
    pub source: PersonaSource,
    /// Timestamp of the newest post the persona was built from.
    pub created_at: i64,
}

impl Persona {
    pub fn empty(user_id: impl Into<String>) -> Self {
        Persona {
            user_id: user_id.into(),
            interests: Vec::new(),
            language_style: Vec::new(),
            emotional_tone: Vec::new(),
            personality_traits: Vec::new(),
            values: Vec::new(),
            source: PersonaSource::Stub,
            created_at: 0,
        }
    }

    /// The five dimensions in canonical order.
    pub fn dimensions(&self) -> [&Vec<String>; 5] {
        [
            &self.interests,
            &self.language_style,
            &self.emotional_tone,
            &self.personality_traits,
            &self.values,
        ]
    }

    fn dimensions_mut(&mut self) -> [&mut Vec<String>; 5] {
        [
            &mut self.interests,
            &mut self.language_style,
            &mut self.emotional_tone,
            &mut self.personality_traits,
            &mut self.values,
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions().iter().all(|d| d.is_empty())
    }

    /// Compact single-line rendering used in prompts, e.g.
    /// `interests: housing, travel; emotional tone: negative`.
    pub fn render(&self) -> String {
        DIMENSIONS
            .iter()
            .zip(self.dimensions())
            .filter(|(_, d)| !d.is_empty())
            .map(|(name, d)| format!("{}: {}", name.to_lowercase(), d.join(", ")))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Checks every persona invariant, never mutating.
pub fn validate_persona(p: &Persona) -> std::result::Result<(), Vec<String>> {
    let mut v = Vec::new();
    for (name, dim) in DIMENSIONS.iter().zip(p.dimensions()) {
        if dim.len() > MAX_PHRASES {
            v.push(format!("{name}: {} phrases exceeds limit {MAX_PHRASES}", dim.len()));
        }
        for phrase in dim {
            if phrase.trim().is_empty() {
                v.push(format!("{name}: empty phrase"));
            } else if phrase.chars().count() > MAX_PHRASE_CHARS {
                v.push(format!("{name}: phrase {phrase:?} exceeds {MAX_PHRASE_CHARS} characters"));
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Extractor<'a> {
    Stub,
    Provider(&'a ProviderClient),
}

/// Content hash of the posts a persona is built from.
pub fn history_hash(history: &[Post]) -> String {
    let mut h = Sha256::new();
    for p in history {
        for field in [&p.post_id, &p.text] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn persona_prompt(history: &[Post]) -> String {
    let posts: Vec<String> = history.iter().map(|p| format!("- {}", p.text)).collect();
    fill_template(PERSONA_TEMPLATE, &[("posts", &posts.join("\n"))])
}

/// Strictly parses the five-line provider reply.
pub fn parse_persona_reply(user_id: &str, raw: &str, created_at: i64) -> Result<Persona> {
    let bad = |msg: String| Error::ProviderFormat {
        msg,
        raw: raw.to_string(),
    };
    let mut persona = Persona {
        source: PersonaSource::Provider,
        created_at,
        ..Persona::empty(user_id)
    };
    let mut seen = [false; 5];
    for line in raw.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (label, rest) = line.split_once(':').ok_or_else(|| bad(format!("unlabeled line {line:?}")))?;
        let idx = DIMENSIONS
            .iter()
            .position(|d| d.eq_ignore_ascii_case(label.trim()))
            .ok_or_else(|| bad(format!("unknown section {label:?}")))?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(bad(format!("section {} repeated", DIMENSIONS[idx])));
        }
        let phrases: Vec<String> = rest
            .split([',', '，'])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        *persona.dimensions_mut()[idx] = phrases;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("section {} missing", DIMENSIONS[i])));
    }
    validate_persona(&persona).map_err(|v| bad(v.join("; ")))?;
    Ok(persona)
}

/// Builds a persona from the retrieved history without caching.
pub fn extract_persona(user_id: &str, history: &[Post], extractor: Extractor<'_>) -> Result<Persona> {
    if history.is_empty() {
        return Err(Error::contract(format!("persona for {user_id} needs a nonempty history")));
    }
    let created_at = history.iter().map(|p| p.timestamp).max().unwrap_or_default();
    match extractor {
        Extractor::Stub => Ok(stub_persona(user_id, history, PersonaRules::bundled())),
        Extractor::Provider(client) => {
            let req = ProviderRequest::new(PERSONA_TEMPLATE_ID, persona_prompt(history), 512, 0.0)?;
            parse_persona_reply(user_id, &client.chat_complete(&req)?.raw, created_at)
        }
    }
}

/// Personas keyed by user id, each tagged with the hash of the history it
/// was built from. Reads are concurrent; writes are serialized.
#[derive(Debug, Default)]
pub struct PersonaCache {
    entries: RwLock<HashMap<String, (String, Persona)>>,
}

impl PersonaCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached persona, only when its history hash matches.
    pub fn get(&self, user_id: &str, hash: &str) -> Option<Persona> {
        let map = self.entries.read().expect("cache lock");
        map.get(user_id).filter(|(h, _)| h == hash).map(|(_, p)| p.clone())
    }

    pub fn insert(&self, hash: String, persona: Persona) {
        self.entries
            .write()
            .expect("cache lock")
            .insert(persona.user_id.clone(), (hash, persona));
    }

    pub fn extract(&self, user_id: &str, history: &[Post], extractor: Extractor<'_>) -> Result<Persona> {
        let hash = history_hash(history);
        if let Some(p) = self.get(user_id, &hash) {
            return Ok(p);
        }
        let p = extract_persona(user_id, history, extractor)?;
        self.insert(hash, p.clone());
        Ok(p)
    }

    /// Extracts many personas, fanning out under `exec`; order is preserved.
    pub fn extract_batch(&self, jobs: &[(String, Vec<Post>)], extractor: Extractor<'_>, exec: Execution) -> Result<Vec<Persona>> {
        exec.try_map(jobs, |(u, h)| self.extract(u, h, extractor))
    }

    /// Snapshot sorted by user id.
    pub fn records(&self) -> Vec<StoredPersona> {
        let map = self.entries.read().expect("cache lock");
        let mut v: Vec<StoredPersona> = map
            .values()
            .map(|(h, p)| StoredPersona {
                persona: p.clone(),
                history_hash: h.clone(),
            })
            .collect();
        v.sort_by(|a, b| a.persona.user_id.cmp(&b.persona.user_id));
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, to_jsonl(&self.records())?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cache = PersonaCache::new();
        for rec in read_jsonl(path, |r: StoredPersona, _| {
            validate_persona(&r.persona).map_err(|v| v.join("; "))?;
            Ok(r)
        })? {
            cache.insert(rec.history_hash, rec.persona);
        }
        Ok(cache)
    }
}

/// One line of `personas.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPersona {
    #[serde(flatten)]
    pub persona: Persona,
    pub history_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn posts(texts: &[&str]) -> Vec<Post> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Post::new(format!("p{i}"), "u1", t, i as i64 * 10).unwrap())
            .collect()
    }

    const GOOD_REPLY: &str = "Interests: housing, travel\nLanguage style: direct\nEmotional tone:\n\
                              Personality traits: curious, blunt\nValues: fairness\n";

    fn replay_with(reply: &str, history: &[Post]) -> (tempfile::TempDir, ProviderClient) {
        let dir = tempfile::tempdir().unwrap();
        let req = ProviderRequest::new(PERSONA_TEMPLATE_ID, persona_prompt(history), 512, 0.0).unwrap();
        let path: PathBuf = crate::provider::fixture_path(dir.path(), &req.hash());
        std::fs::write(path, reply).unwrap();
        let client = ProviderClient::replay(dir.path());
        (dir, client)
    }

    #[test]
    fn validation_examples() {
        let mut p = Persona::empty("u");
        assert!(validate_persona(&p).is_ok());
        p.interests = (0..9).map(|i| format!("x{i}")).collect();
        let v = validate_persona(&p).unwrap_err();
        assert!(v[0].contains("Interests") && v[0].contains('8'), "{v:?}");
        p.interests = vec!["a".repeat(65)];
        assert_eq!(validate_persona(&p).unwrap_err().len(), 1);
        p.interests = vec!["a".repeat(64)];
        assert!(validate_persona(&p).is_ok());
    }

    #[test]
    fn empty_history_is_contract_error() {
        assert!(matches!(extract_persona("u", &[], Extractor::Stub), Err(Error::Contract(_))));
    }

    #[test]
    fn cache_serves_identical_persona() {
        let h = posts(&["#a# rent is up lol", "#b# salary talk lol"]);
        let cache = PersonaCache::new();
        let a = cache.extract("u1", &h, Extractor::Stub).unwrap();
        let b = cache.extract("u1", &h, Extractor::Stub).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(cache.len(), 1);
        // A different history never gets the cached entry.
        assert!(cache.get("u1", &history_hash(&h[..1])).is_none());
    }

    #[test]
    fn provider_reply_parses() {
        let h = posts(&["#a# hello"]);
        let (_dir, client) = replay_with(GOOD_REPLY, &h);
        let p = extract_persona("u1", &h, Extractor::Provider(&client)).unwrap();
        assert_eq!(p.interests, vec!["housing", "travel"]);
        assert!(p.emotional_tone.is_empty());
        assert_eq!(p.source, PersonaSource::Provider);
        assert_eq!(p.created_at, 0);
    }

    #[test]
    fn missing_section_is_format_error_and_not_cached() {
        let h = posts(&["#a# hello"]);
        let reply = "Interests: housing\nLanguage style: direct\nEmotional tone: calm\nPersonality traits: x\n";
        let (_dir, client) = replay_with(reply, &h);
        let cache = PersonaCache::new();
        match cache.extract("u1", &h, Extractor::Provider(&client)) {
            Err(Error::ProviderFormat { raw, .. }) => assert_eq!(raw, reply),
            other => panic!("{other:?}"),
        }
        assert!(cache.is_empty());
    }

    #[test]
    fn strict_parse_rejects_oddities() {
        assert!(parse_persona_reply("u", &format!("{GOOD_REPLY}Values: again"), 0).is_err());
        assert!(parse_persona_reply("u", &format!("{GOOD_REPLY}Mood: x"), 0).is_err());
        let nine = GOOD_REPLY.replace("housing, travel", "a,b,c,d,e,f,g,h,i");
        assert!(parse_persona_reply("u", &nine, 0).is_err());
    }

    #[test]
    fn providers_and_stub_share_shape() {
        let h = posts(&["#a# rent is up lol"]);
        let stub = extract_persona("u1", &h, Extractor::Stub).unwrap();
        let prov = parse_persona_reply("u1", GOOD_REPLY, 0).unwrap();
        let keys = |p: &Persona| {
            let v = serde_json::to_value(p).unwrap();
            v.as_object().unwrap().keys().cloned().collect::<Vec<_>>()
        };
        assert_eq!(keys(&stub), keys(&prov));
    }

    #[test]
    fn store_round_trip() {
        let cache = PersonaCache::new();
        for u in ["u2", "u1"] {
            let h: Vec<Post> = posts(&["#x# exam stress sigh", "#y# rent lol"])
                .into_iter()
                .map(|p| Post { user_id: u.into(), ..p })
                .collect();
            cache.extract(u, &h, Extractor::Stub).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("personas.jsonl");
        cache.save(&path).unwrap();
        let back = PersonaCache::load(&path).unwrap();
        assert_eq!(back.records(), cache.records());
        assert_eq!(cache.records()[0].persona.user_id, "u1");
    }

    #[test]
    fn render_skips_empty_dimensions() {
        let mut p = Persona::empty("u");
        assert_eq!(p.render(), "");
        p.interests = vec!["housing".into(), "travel".into()];
        p.values = vec!["fairness".into()];
        assert_eq!(p.render(), "interests: housing, travel; values: fairness");
    }
}
