//! Pluggable token counting.
//!
//! The runtime never needs token ids, only counts: the cache ledger, the
//! budget reports and the per-turn context series are all expressed in
//! tokens. Counters are registered by name in a [`TokenizerRegistry`] so a
//! real BPE counter can be dropped in without touching call sites.
//!
//! Every counter must be deterministic, return 0 for the empty string and be
//! sub-additive up to one boundary token:
//! `count(a + b) <= count(a) + count(b) + 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

/// Counts tokens in a piece of text.
pub trait Tokenizer: Send + Sync + fmt::Debug {
    /// Registry name, e.g. `"approx-bpe"`.
    fn name(&self) -> &str;

    fn count_tokens(&self, text: &str) -> usize;

    /// Count of `prefix + suffix`, given `prefix_tokens == count(prefix)`.
    /// Counters whose tokens only interact across a short seam override this
    /// so growing prompts are not rescanned from the start.
    fn count_appended(&self, prefix: &str, prefix_tokens: usize, suffix: &str) -> usize {
        let _ = prefix_tokens;
        self.count_tokens(&[prefix, suffix].concat())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    Space,
    Symbol,
}

fn classify(c: char) -> CharClass {
    if c.is_ascii() {
        return if c.is_ascii_alphanumeric() {
            CharClass::Word
        } else if c.is_ascii_whitespace() || c == '\x0b' {
            CharClass::Space
        } else {
            CharClass::Symbol
        };
    }
    if c.is_alphanumeric() {
        CharClass::Word
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Symbol
    }
}

/// Splits `text` into maximal runs of one character class.
fn runs(text: &str) -> impl Iterator<Item = (CharClass, &str)> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let first = rest.chars().next()?;
        let class = classify(first);
        let end = rest
            .char_indices()
            .find(|&(_, c)| classify(c) != class)
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let (run, tail) = rest.split_at(end);
        rest = tail;
        Some((class, run))
    })
}

/// Default counter approximating a byte-pair tokenizer.
///
/// Each maximal run of alphanumerics, of punctuation/symbols, or of
/// whitespace is one token, except that a lone `' '` directly in front of
/// another run is folded into it (the way BPE vocabularies carry `" word"`).
/// JSON punctuation clusters such as `":"` or `"},"` therefore cost one
/// token, and indentation costs one token per line.
#[derive(Debug, Default, Clone, Copy)]
pub struct ApproxBpeTokenizer;

impl Tokenizer for ApproxBpeTokenizer {
    fn name(&self) -> &str {
        "approx-bpe"
    }

    fn count_tokens(&self, text: &str) -> usize {
        // Single pass: a run is counted when the next one starts, unless it
        // is a lone space; the final run always counts.
        let mut count = 0;
        let mut current: Option<CharClass> = None;
        let mut lone_space = false;
        for c in text.chars() {
            let class = classify(c);
            if current == Some(class) {
                lone_space = false;
                continue;
            }
            if current.is_some() && !lone_space {
                count += 1;
            }
            current = Some(class);
            lone_space = c == ' ';
        }
        count + usize::from(current.is_some())
    }

    // A run's token depends only on its class, its text and whether another
    // run follows it, so only the last run of the prefix and the first two
    // runs of the suffix can change when the two are joined.
    fn count_appended(&self, prefix: &str, prefix_tokens: usize, suffix: &str) -> usize {
        if suffix.is_empty() {
            return prefix_tokens;
        }
        if prefix.is_empty() {
            return self.count_tokens(suffix);
        }
        let tail_class = classify(prefix.chars().next_back().expect("non-empty"));
        let tail_start = prefix
            .char_indices()
            .rev()
            .find(|&(_, c)| classify(c) != tail_class)
            .map_or(0, |(i, c)| i + c.len_utf8());
        let head_end: usize = runs(suffix).take(2).map(|(_, r)| r.len()).sum();
        let tail = &prefix[tail_start..];
        let head = &suffix[..head_end];
        let seam = self.count_tokens(&[tail, head].concat()) as isize
            - self.count_tokens(tail) as isize
            - self.count_tokens(head) as isize;
        (prefix_tokens as isize + self.count_tokens(suffix) as isize + seam) as usize
    }
}

/// Whitespace-blind counter: alphanumeric runs plus one token per
/// punctuation character.
#[derive(Debug, Default, Clone, Copy)]
pub struct WordPunctTokenizer;

impl Tokenizer for WordPunctTokenizer {
    fn name(&self) -> &str {
        "word-punct"
    }

    fn count_tokens(&self, text: &str) -> usize {
        runs(text)
            .map(|(class, run)| match class {
                CharClass::Word => 1,
                CharClass::Space => 0,
                CharClass::Symbol => run.chars().count(),
            })
            .sum()
    }
}

/// One token per started block of four bytes.
#[derive(Debug, Default, Clone, Copy)]
pub struct Bytes4Tokenizer;

impl Tokenizer for Bytes4Tokenizer {
    fn name(&self) -> &str {
        "bytes4"
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown tokenizer '{0}'")]
pub struct UnknownTokenizer(pub String);

/// Name → tokenizer lookup.
#[derive(Debug, Clone)]
pub struct TokenizerRegistry {
    entries: BTreeMap<String, Arc<dyn Tokenizer>>,
}

impl TokenizerRegistry {
    pub const DEFAULT: &'static str = "approx-bpe";

    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, tokenizer: Arc<dyn Tokenizer>) {
        self.entries.insert(tokenizer.name().to_string(), tokenizer);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Tokenizer>, UnknownTokenizer> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| UnknownTokenizer(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(ApproxBpeTokenizer));
        reg.register(Arc::new(WordPunctTokenizer));
        reg.register(Arc::new(Bytes4Tokenizer));
        reg
    }
}

/// The tokenizer used when nothing else is configured.
pub fn default_tokenizer() -> Arc<dyn Tokenizer> {
    Arc::new(ApproxBpeTokenizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn approx_bpe_folds_single_spaces() {
        let t = ApproxBpeTokenizer;
        assert_eq!(t.count_tokens(""), 0);
        assert_eq!(t.count_tokens("hello world"), 2);
        assert_eq!(t.count_tokens("hello  world"), 3);
        assert_eq!(t.count_tokens("{\"a\":\"b\"}"), 5);
        assert_eq!(t.count_tokens("x "), 2);
        assert_eq!(t.count_tokens("\n  - issue"), 3);
    }

    #[test]
    fn word_punct_ignores_whitespace() {
        let t = WordPunctTokenizer;
        assert_eq!(t.count_tokens("set_timer: 20"), 5);
        assert_eq!(t.count_tokens("  \n "), 0);
    }

    #[test]
    fn registry_lookup() {
        let reg = TokenizerRegistry::default();
        assert_eq!(reg.get("bytes4").unwrap().count_tokens("abcde"), 2);
        assert!(reg.get("nope").is_err());
        assert_eq!(reg.names().count(), 3);
    }

    fn reference_count(text: &str) -> usize {
        let all: Vec<_> = runs(text).collect();
        all.iter()
            .enumerate()
            .filter(|(i, (class, run))| {
                !(*class == CharClass::Space && *run == " " && i + 1 < all.len())
            })
            .count()
    }

    proptest! {
        #[test]
        fn single_pass_matches_run_split(text in "\\PC{0,60}", ws in "[ \t\n\x0b\x0c\ra_{}]{0,20}") {
            prop_assert_eq!(ApproxBpeTokenizer.count_tokens(&text), reference_count(&text));
            prop_assert_eq!(ApproxBpeTokenizer.count_tokens(&ws), reference_count(&ws));
        }

        #[test]
        fn concatenation_is_subadditive(a in "[ a-z0-9_:,{}\"\\n\\-]{0,40}", b in "[ a-z0-9_:,{}\"\\n\\-]{0,40}") {
            let reg = TokenizerRegistry::default();
            for name in ["approx-bpe", "word-punct", "bytes4"] {
                let t = reg.get(name).unwrap();
                let joined = format!("{a}{b}");
                prop_assert!(t.count_tokens(&joined) <= t.count_tokens(&a) + t.count_tokens(&b) + 1);
            }
        }

        #[test]
        fn appended_count_matches_recount(a in "[ a-zé0-9_:,{}\"\\n\\-]{0,40}", b in "[ a-zé0-9_:,{}\"\\n\\-]{0,40}") {
            let reg = TokenizerRegistry::default();
            for name in ["approx-bpe", "word-punct", "bytes4"] {
                let t = reg.get(name).unwrap();
                let joined = format!("{a}{b}");
                prop_assert_eq!(t.count_appended(&a, t.count_tokens(&a), &b), t.count_tokens(&joined));
            }
        }
    }
}
