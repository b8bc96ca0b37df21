//! Byte-level prompt layout: persona, retrieved history, news, separator,
//! response.

use std::ops::Range;

use crate::dataset::Post;
use crate::error::{Error, Result};
use crate::persona::Persona;

pub const BOS: usize = 256;
pub const SEG: usize = 257;
pub const SEP: usize = 258;
pub const EOS: usize = 259;
pub const BYTE_VOCAB: usize = 260;

/// Token ids with the position of every segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSequence {
    pub tokens: Vec<usize>,
    pub persona: Range<usize>,
    pub history: Range<usize>,
    pub news: Range<usize>,
    /// Index of the separator token.
    pub sep: usize,
    /// Response tokens after the separator (empty for generation prompts).
    pub response: Range<usize>,
}

impl PromptSequence {
    /// Concatenates already tokenized segments around a separator id.
    pub fn from_segments(
        persona: &[usize],
        history: &[usize],
        news: &[usize],
        sep_token: usize,
        response: &[usize],
    ) -> Result<Self> {
        if news.is_empty() {
            return Err(Error::contract("news segment is empty"));
        }
        let mut tokens = Vec::with_capacity(persona.len() + history.len() + news.len() + 1 + response.len());
        let mut seg = |s: &[usize]| {
            let lo = tokens.len();
            tokens.extend_from_slice(s);
            lo..tokens.len()
        };
        let persona = seg(persona);
        let history = seg(history);
        let news = seg(news);
        let sep = seg(&[sep_token]).start;
        let response = seg(response);
        Ok(PromptSequence {
            tokens,
            persona,
            history,
            news,
            sep,
            response,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Persona plus history: the rows pooled for the writing gate.
    pub fn user_range(&self) -> Range<usize> {
        self.persona.start..self.history.end
    }

    /// The sequence up to and including the separator.
    pub fn prompt_only(&self) -> PromptSequence {
        PromptSequence {
            tokens: self.tokens[..=self.sep].to_vec(),
            response: self.sep + 1..self.sep + 1,
            ..self.clone()
        }
    }

    /// Cumulative segment ends: persona, history, news, separator, response.
    pub fn boundaries(&self) -> [usize; 5] {
        [self.persona.end, self.history.end, self.news.end, self.sep + 1, self.response.end]
    }

    /// Positions whose next-token prediction is scored, with their targets:
    /// every response token, predicted from the position before it.
    pub fn loss_positions(&self) -> (Vec<usize>, Vec<usize>) {
        self.response.clone().map(|i| (i - 1, self.tokens[i])).unzip()
    }

    pub fn check(&self, vocab: usize, context: usize) -> Result<()> {
        if self.len() > context {
            return Err(Error::Length {
                len: self.len(),
                max: context,
            });
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }
}

pub fn tokenize_text(s: &str) -> Vec<usize> {
    s.bytes().map(usize::from).collect()
}

/// Rendered persona followed by a segment marker; empty for an empty persona.
pub fn tokenize_persona(p: &Persona) -> Vec<usize> {
    let r = p.render();
    if r.is_empty() {
        return Vec::new();
    }
    let mut t = tokenize_text(&r);
    t.push(SEG);
    t
}

/// Posts oldest first, newline separated, closed by a segment marker.
pub fn tokenize_history(posts: &[Post]) -> Vec<usize> {
    if posts.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<&Post> = posts.iter().collect();
    sorted.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.post_id.cmp(&b.post_id)));
    let mut t = Vec::new();
    for (i, p) in sorted.iter().enumerate() {
        if i > 0 {
            t.push(usize::from(b'\n'));
        }
        t.extend(tokenize_text(&p.text));
    }
    t.push(SEG);
    t
}

pub fn tokenize_response(r: &str) -> Vec<usize> {
    let mut t = tokenize_text(r);
    t.push(EOS);
    t
}

pub fn detokenize(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Builds the prompt, dropping the oldest history posts until it fits.
pub fn build_prompt(
    persona: Option<&Persona>,
    history: &[Post],
    news: &str,
    response: Option<&str>,
    context_len: usize,
) -> Result<PromptSequence> {
    if news.trim().is_empty() {
        return Err(Error::contract("news text is empty"));
    }
    let p = persona.map(tokenize_persona).unwrap_or_default();
    let n = tokenize_text(news);
    let r = response.map(tokenize_response).unwrap_or_default();
    let mut kept: Vec<&Post> = history.iter().collect();
    kept.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.post_id.cmp(&b.post_id)));
    loop {
        let posts: Vec<Post> = kept.iter().map(|p| (*p).clone()).collect();
        let h = tokenize_history(&posts);
        let total = p.len() + h.len() + n.len() + 1 + r.len();
        if total <= context_len {
            return PromptSequence::from_segments(&p, &h, &n, SEP, &r);
        }
        if kept.is_empty() {
            return Err(Error::Length {
                len: total,
                max: context_len,
            });
        }
        kept.remove(0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, text: &str, ts: i64) -> Post {
        Post::new(id, "u", text, ts).unwrap()
    }

    #[test]
    fn degenerate_prompt_is_news_and_separator() {
        let s = build_prompt(None, &[], "rent", None, 64).unwrap();
        assert_eq!(s.tokens, vec![114, 101, 110, 116, SEP]);
        assert!(s.persona.is_empty() && s.history.is_empty() && s.response.is_empty());
        let e = build_prompt(Some(&Persona::empty("u")), &[], "rent", Some("ok"), 64).unwrap();
        assert_eq!(e.tokens, vec![114, 101, 110, 116, SEP, 111, 107, EOS]);
        assert!(build_prompt(None, &[], "  ", None, 64).is_err());
    }

    #[test]
    fn boundaries_are_cumulative_segment_lengths() {
        let mut persona = Persona::empty("u");
        persona.interests = vec!["housing".into()];
        let hist = vec![post("b", "#x# second", 2), post("a", "#x# first", 1)];
        let s = build_prompt(Some(&persona), &hist, "news", Some("hi"), 512).unwrap();
        let lens = [
            tokenize_persona(&persona).len(),
            tokenize_history(&hist).len(),
            tokenize_text("news").len(),
            1,
            tokenize_response("hi").len(),
        ];
        let mut acc = 0;
        let cum: Vec<usize> = lens.iter().map(|l| {
            acc += l;
            acc
        }).collect();
        assert_eq!(s.boundaries().to_vec(), cum);
        // Oldest history first.
        assert_eq!(detokenize(&s.tokens[s.history.clone()]), "#x# first\n#x# second");
        assert_eq!(s, build_prompt(Some(&persona), &hist, "news", Some("hi"), 512).unwrap());
    }

    #[test]
    fn truncation_drops_oldest_history() {
        let hist = vec![post("a", "#x# aaaaaaaaaa", 1), post("b", "#x# bb", 2)];
        let full = build_prompt(None, &hist, "n", None, 100).unwrap();
        let limit = full.len() - 5;
        let s = build_prompt(None, &hist, "n", None, limit).unwrap();
        assert_eq!(detokenize(&s.tokens[s.history.clone()]), "#x# bb");
        assert!(matches!(build_prompt(None, &hist, "news", None, 3), Err(Error::Length { .. })));
    }

    #[test]
    fn loss_positions_cover_response() {
        let s = PromptSequence::from_segments(&[1], &[], &[2, 3], 9, &[4, 5]).unwrap();
        assert_eq!(s.loss_positions(), (vec![3, 4], vec![4, 5]));
        assert_eq!(s.prompt_only().tokens, vec![1, 2, 3, 9]);
        assert!(s.check(6, 10).is_err());
        assert!(s.check(10, 5).is_err());
    }
}
