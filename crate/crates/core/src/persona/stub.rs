//! Offline persona extractor: keyword rules plus lexicon polarity.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use super::{Persona, PersonaSource, MAX_PHRASES};
use crate::dataset::Post;
use crate::error::{Error, Result};
use crate::sentiment::{Lexicon, SentimentLabel};
use crate::text;

const BUNDLED_RULES: &str = include_str!("../../assets/persona_rules_v1.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RuleDimension {
    Interests,
    LanguageStyle,
    PersonalityTraits,
    Values,
}

#[derive(Debug, Clone)]
struct Rule {
    dim: RuleDimension,
    keyword: String,
    phrase: String,
}

/// `dimension<TAB>keyword<TAB>phrase` table.
#[derive(Debug, Clone)]
pub struct PersonaRules {
    rules: Vec<Rule>,
}

impl PersonaRules {
    pub fn parse(src: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let err = |m: &str| Error::Config(format!("persona rules line {}: {m}", i + 1));
            let [dim, keyword, phrase] = cols[..] else {
                return Err(err("expected dimension<TAB>keyword<TAB>phrase"));
            };
            let dim = match dim {
                "interests" => RuleDimension::Interests,
                "language_style" => RuleDimension::LanguageStyle,
                "personality_traits" => RuleDimension::PersonalityTraits,
                "values" => RuleDimension::Values,
                _ => return Err(err("unknown dimension")),
            };
            if keyword.is_empty() || phrase.is_empty() {
                return Err(err("empty keyword or phrase"));
            }
            rules.push(Rule {
                dim,
                keyword: keyword.to_lowercase(),
                phrase: phrase.to_string(),
            });
        }
        Ok(PersonaRules { rules })
    }

    pub fn bundled() -> &'static PersonaRules {
        static RULES: OnceLock<PersonaRules> = OnceLock::new();
        RULES.get_or_init(|| PersonaRules::parse(BUNDLED_RULES).expect("bundled persona rules parse"))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

fn ranked(scores: BTreeMap<&str, usize>) -> Vec<String> {
    let mut v: Vec<(&str, usize)> = scores.into_iter().filter(|(_, s)| *s > 0).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().take(MAX_PHRASES).map(|(p, _)| p.to_string()).collect()
}

fn emotion_word(label: SentimentLabel) -> &'static str {
    match label {
        SentimentLabel::Happy => "joy",
        SentimentLabel::Sad => "sadness",
        SentimentLabel::Angry => "anger",
        SentimentLabel::Calm => "composure",
        SentimentLabel::Fear => "anxiety",
        SentimentLabel::Surprised => "surprise",
        SentimentLabel::Disgusted => "disgust",
    }
}

/// Emotional tone from the lexicon: a polarity word from the
/// positive/negative hit ratio, then the dominant emotion.
fn emotional_tone(scores: [usize; 7]) -> Vec<String> {
    use SentimentLabel::*;
    let pos = scores[Happy.index()];
    let neg: usize = [Sad, Angry, Fear, Disgusted].iter().map(|l| scores[l.index()]).sum();
    let polarity = if pos + neg == 0 {
        "neutral"
    } else {
        let ratio = pos as f64 / (pos + neg) as f64;
        if ratio >= 0.6 {
            "positive"
        } else if ratio <= 0.4 {
            "negative"
        } else {
            "mixed"
        }
    };
    let mut tone = vec![polarity.to_string()];
    let best = (0..7).filter(|&i| scores[i] > 0).max_by(|&a, &b| scores[a].cmp(&scores[b]).then(b.cmp(&a)));
    if let Some(i) = best {
        tone.push(emotion_word(SentimentLabel::ALL[i]).to_string());
    }
    tone
}

/// Pure function of the history text: phrases ranked by keyword
/// frequency (ties alphabetical), at most eight per dimension.
pub fn stub_persona(user_id: &str, history: &[Post], rules: &PersonaRules) -> Persona {
    let joined = history.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join("\n");
    let words = text::words(&joined);
    let lowered = joined.to_lowercase();
    let mut per_dim: [BTreeMap<&str, usize>; 4] = Default::default();
    for r in &rules.rules {
        let n = text::count_entry(&r.keyword, &words, &lowered);
        *per_dim[r.dim as usize].entry(r.phrase.as_str()).or_default() += n;
    }
    let [interests, language_style, personality_traits, values] = per_dim.map(ranked);
    Persona {
        user_id: user_id.to_string(),
        interests,
        language_style,
        emotional_tone: emotional_tone(Lexicon::bundled().scores(&joined)),
        personality_traits,
        values,
        source: PersonaSource::Stub,
        created_at: history.iter().map(|p| p.timestamp).max().unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::validate_persona;

    fn history(texts: &[&str]) -> Vec<Post> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Post::new(format!("p{i}"), "u", t, 100 + i as i64).unwrap())
            .collect()
    }

    #[test]
    fn housing_keyword_maps_to_interest() {
        let h = history(&["#a# housing costs", "#b# housing again", "#c# more housing news"]);
        let p = stub_persona("u", &h, PersonaRules::bundled());
        assert!(p.interests.contains(&"housing".to_string()), "{p:?}");
        assert_eq!(p.created_at, 102);
    }

    #[test]
    fn ranking_by_hand() {
        let rules = PersonaRules::parse(
            "interests\trent\thousing\ninterests\tlandlord\thousing\ninterests\texam\teducation\n\
             interests\tticket\ttravel\nvalues\tfair\tequity\n",
        )
        .unwrap();
        let h = history(&["#a# rent exam ticket", "#b# landlord exam ticket"]);
        let p = stub_persona("u", &h, &rules);
        // housing 2, education 2, travel 2: ties resolved alphabetically.
        assert_eq!(p.interests, vec!["education", "housing", "travel"]);
        assert!(p.values.is_empty() && p.language_style.is_empty());
    }

    #[test]
    fn tone_thresholds() {
        let s = |h: usize, n: usize| {
            let mut a = [0; 7];
            a[SentimentLabel::Happy.index()] = h;
            a[SentimentLabel::Angry.index()] = n;
            emotional_tone(a)
        };
        assert_eq!(s(0, 0), vec!["neutral"]);
        assert_eq!(s(3, 2), vec!["positive", "joy"]);
        assert_eq!(s(2, 3), vec!["negative", "anger"]);
        assert_eq!(s(1, 1), vec!["mixed", "joy"]);
    }

    #[test]
    fn stub_is_pure_and_valid() {
        let h = history(&["#a# 房价 rent lol happy", "#b# honestly outrageous fairness"]);
        let a = stub_persona("u", &h, PersonaRules::bundled());
        assert_eq!(a, stub_persona("u", &h, PersonaRules::bundled()));
        assert!(validate_persona(&a).is_ok());
        assert!(PersonaRules::parse("moods\tx\ty").is_err());
    }
}
