use std::collections::HashMap;
use std::sync::OnceLock;

use super::{Comment, Sample};

const CONTRACTIONS: &str = include_str!("../../data/contractions.tsv");

fn contractions() -> &'static HashMap<&'static str, &'static str> {
    static TABLE: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    TABLE.get_or_init(|| {
        CONTRACTIONS
            .lines()
            .filter_map(|line| line.split_once('\t'))
            .collect()
    })
}

/// Removes `<...>` markup. A `<` only opens a tag when followed by a letter,
/// `/` or `!` and closed by a later `>`; anything else is kept as text.
fn strip_tags(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(pos) = rest.find('<') {
        let after = &rest[pos + 1..];
        let opens = after
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '/' || c == '!');
        match after.find('>') {
            Some(close) if opens => {
                out.push_str(&rest[..pos]);
                // Tags separate words: "a<br>b" is two words.
                out.push(' ');
                rest = &after[close + 1..];
            }
            _ => {
                out.push_str(&rest[..=pos]);
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    s.replace("&nbsp;", " ")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&apos;", "'")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&amp;", "&")
}

fn is_edge_punct(c: char) -> bool {
    !c.is_alphanumeric() && c != '\''
}

fn expand_chunk(chunk: &str, out: &mut String) {
    let core_start = chunk.find(|c: char| !is_edge_punct(c)).unwrap_or(chunk.len());
    let core_end = chunk
        .rfind(|c: char| !is_edge_punct(c))
        .map_or(core_start, |i| i + chunk[i..].chars().next().map_or(1, char::len_utf8));
    let core = &chunk[core_start..core_end.max(core_start)];
    match contractions().get(core) {
        Some(expanded) => {
            out.push_str(&chunk[..core_start]);
            out.push_str(expanded);
            out.push_str(&chunk[core_end..]);
        }
        None => out.push_str(chunk),
    }
}

/// Strips markup, decodes common entities, lowercases, expands contractions
/// and collapses whitespace.
pub fn normalize_text(raw: &str) -> String {
    let text = decode_entities(&strip_tags(raw))
        .to_lowercase()
        .replace(['\u{2019}', '\u{2018}', '\u{02bc}'], "'");
    let mut out = String::with_capacity(text.len());
    for chunk in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        expand_chunk(chunk, &mut out);
    }
    out
}

/// Splits normalized text into word and punctuation tokens.
///
/// Words are runs of alphanumerics, with an apostrophe kept when it sits
/// between two alphanumerics ("o'neil"). Every other non-space character is
/// a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let inner_apostrophe = c == '\''
                && !word.is_empty()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if c.is_alphanumeric() || inner_apostrophe {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Applies [`normalize_text`] to every text field of a sample.
pub fn normalize_sample(sample: &Sample) -> Sample {
    Sample {
        id: sample.id.clone(),
        title: normalize_text(&sample.title),
        text: normalize_text(&sample.text),
        image_ref: sample.image_ref.clone(),
        comments: sample
            .comments
            .iter()
            .map(|c| Comment::new(normalize_text(&c.text), c.likes))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn expands_contractions() {
        assert_eq!(normalize_text("don't"), "do not");
        assert_eq!(normalize_text("I Can't, really."), "i cannot, really.");
        assert_eq!(normalize_text("\u{201c}They\u{2019}re\u{201d}"), "\u{201c}they are\u{201d}");
        assert_eq!(normalize_text("rock'n'roll"), "rock'n'roll");
    }

    #[test]
    fn table_has_expected_size() {
        let n = contractions().len();
        assert!((110..=130).contains(&n), "{n}");
    }

    #[test]
    fn strips_html() {
        assert_eq!(normalize_text("<b>Hello</b> world"), "hello world");
        assert_eq!(normalize_text("a<br/>b"), "a b");
        assert_eq!(normalize_text("1 < 2 and 3 > 2"), "1 < 2 and 3 > 2");
        assert_eq!(normalize_text("<p class=\"x\">Tom &amp; Jerry</p>"), "tom & jerry");
    }

    #[test]
    fn empty_and_whitespace() {
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  \n\t "), "");
        assert_eq!(normalize_text(" a \n  b "), "a b");
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("hello, world! it's 3.5"),
            ["hello", ",", "world", "!", "it's", "3", ".", "5"]
        );
        assert_eq!(tokenize("'quoted'"), ["'", "quoted", "'"]);
        assert!(tokenize("").is_empty());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[a-zA-Z' ,.!<>/\n]{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn tokens_have_no_whitespace(s in "\\PC{0,40}") {
            for t in tokenize(&normalize_text(&s)) {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
        }
    }
}
