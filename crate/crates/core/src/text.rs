//! Text normalization and term extraction shared by the dataset, retrieval,
//! persona and sentiment modules.

use unicode_normalization::UnicodeNormalization;

/// Unicode NFC, whitespace runs collapsed to one space, trimmed.
pub fn normalize(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF      // extension A
        | 0x4E00..=0x9FFF    // unified ideographs
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F  // extensions B+
        | 0x3040..=0x30FF    // kana
        | 0xAC00..=0xD7AF)   // hangul syllables
}

/// Hashtags in Weibo `#topic text#` form, plus `#token` for a `#` that
/// does not open such a pair. A pair's inner text must not start or end
/// with whitespace. Lowercased, deduplicated, first-seen order.
pub fn extract_hashtags(text: &str) -> Vec<String> {
    let mut tags: Vec<String> = Vec::new();
    let mut push = |t: &str| {
        let t = normalize(t).to_lowercase();
        if !t.is_empty() && !tags.contains(&t) {
            tags.push(t);
        }
    };
    let mut rest = text;
    while let Some(start) = rest.find('#') {
        let after = &rest[start + 1..];
        if let Some(end) = after.find('#') {
            let inner = &after[..end];
            let tight = !inner.is_empty()
                && !inner.starts_with(char::is_whitespace)
                && !inner.ends_with(char::is_whitespace)
                && !inner.contains('\n');
            if tight {
                push(inner);
                rest = &after[end + 1..];
                continue;
            }
        }
        let tok: String = after.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
        push(&tok);
        rest = &after[tok.len()..];
    }
    tags
}

/// Retrieval terms: lowercase alphanumeric runs for non-CJK text,
/// overlapping character bigrams for CJK runs (a lone CJK character is
/// kept as a unigram).
pub fn terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut latin = String::new();
    let mut cjk: Vec<char> = Vec::new();

    fn flush_cjk(cjk: &mut Vec<char>, out: &mut Vec<String>) {
        match cjk.len() {
            0 => {}
            1 => out.push(cjk[0].to_string()),
            _ => out.extend(cjk.windows(2).map(|w| w.iter().collect())),
        }
        cjk.clear();
    }
    fn flush_latin(latin: &mut String, out: &mut Vec<String>) {
        if !latin.is_empty() {
            out.push(std::mem::take(latin));
        }
    }

    for c in text.nfc() {
        if is_cjk(c) {
            flush_latin(&mut latin, &mut out);
            cjk.push(c);
        } else if c.is_alphanumeric() {
            flush_cjk(&mut cjk, &mut out);
            latin.extend(c.to_lowercase());
        } else {
            flush_latin(&mut latin, &mut out);
            flush_cjk(&mut cjk, &mut out);
        }
    }
    flush_latin(&mut latin, &mut out);
    flush_cjk(&mut cjk, &mut out);
    out
}

/// Lowercase alphanumeric words (CJK characters are kept inside words);
/// used for lexicon lookups.
pub fn words(text: &str) -> Vec<String> {
    text.nfc()
        .collect::<String>()
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Counts how often a lexicon entry occurs: whole-word matches for
/// entries without CJK characters, substring matches otherwise.
pub fn count_entry(entry: &str, words: &[String], lowered: &str) -> usize {
    if entry.chars().any(is_cjk) {
        lowered.matches(entry).count()
    } else {
        words.iter().filter(|w| *w == entry).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize("  a \t b\n\nc "), "a b c");
        // Decomposed e + combining acute becomes the precomposed form.
        assert_eq!(normalize("e\u{301}"), "\u{e9}");
    }

    #[test]
    fn weibo_hashtags() {
        assert_eq!(
            extract_hashtags("#房价上涨# 太难了 #Rent Crisis# ok"),
            vec!["房价上涨".to_string(), "rent crisis".to_string()]
        );
        assert_eq!(extract_hashtags("I love #Jobs and #jobs"), vec!["jobs".to_string()]);
        assert_eq!(
            extract_hashtags("#rust and #租房难# too"),
            vec!["rust".to_string(), "租房难".to_string()]
        );
        assert!(extract_hashtags("no tags here").is_empty());
        assert_eq!(extract_hashtags("#A# and #a#"), vec!["a".to_string()]);
    }

    #[test]
    fn cjk_bigrams_and_latin_words() {
        assert_eq!(terms("房价涨 Rent-Price!"), vec!["房价", "价涨", "rent", "price"]);
        assert_eq!(terms("好 ok"), vec!["好", "ok"]);
        assert!(terms("  ,.; ").is_empty());
    }

    #[test]
    fn entry_counting() {
        let text = "so happy, happy day 开心开心";
        let w = words(text);
        let lowered = text.to_lowercase();
        assert_eq!(count_entry("happy", &w, &lowered), 2);
        assert_eq!(count_entry("hap", &w, &lowered), 0);
        assert_eq!(count_entry("开心", &w, &lowered), 2);
    }
}
