//! Word normalization shared by entity extraction and the synthetic text
//! encoder.

use std::collections::HashSet;
use std::sync::OnceLock;

const STOPWORDS: &str = include_str!("../data/stopwords.txt");
const CHANGE_VERBS: &str = include_str!("../data/change_verbs.txt");

/// Suffixes tried in order; the first whose removal leaves a stem of at
/// least [`MIN_STRIPPED_LEN`] characters is removed, until none applies.
const SUFFIXES: [&str; 5] = ["ing", "ed", "es", "s", "e"];
const MIN_STRIPPED_LEN: usize = 4;
/// Shorter tokens are not entities.
pub const MIN_TOKEN_LEN: usize = 3;

/// Parses a word list: one token per line, `#` starts a comment.
pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Suffix stripping, iterated to a fixed point so `stem(stem(w)) == stem(w)`.
pub fn stem(word: &str) -> String {
    let mut cur = word.to_string();
    loop {
        let next = SUFFIXES.iter().find_map(|suf| {
            let rest = cur.strip_suffix(suf)?;
            (rest.chars().count() >= MIN_STRIPPED_LEN).then(|| rest.to_string())
        });
        match next {
            Some(n) => cur = n,
            None => return cur,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    stopwords: HashSet<String>,
    change_verbs: HashSet<String>,
}

impl Lexicon {
    pub fn from_lists(stopwords: &str, change_verbs: &str) -> Self {
        // Both raw and stemmed forms so a stem can never collide with a
        // dropped word.
        let expand = |list: Vec<String>| -> HashSet<String> {
            list.into_iter().flat_map(|w| [stem(&w), w]).collect()
        };
        Self {
            stopwords: expand(parse_word_list(stopwords)),
            change_verbs: expand(parse_word_list(change_verbs)),
        }
    }

    /// The shipped English lists.
    pub fn builtin() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(|| Lexicon::from_lists(STOPWORDS, CHANGE_VERBS))
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(word)
    }

    pub fn is_change_verb(&self, word: &str) -> bool {
        self.change_verbs.contains(word)
    }

    /// Stemmed non-stopword tokens in text order, repeats kept.
    pub fn content_tokens(&self, text: &str) -> Vec<String> {
        words(text)
            .filter_map(|w| {
                if self.is_stopword(&w) {
                    return None;
                }
                let s = stem(&w);
                (s.chars().count() >= MIN_TOKEN_LEN && !self.is_stopword(&s)).then_some(s)
            })
            .collect()
    }

    /// Content tokens minus editing verbs, in first-occurrence order without
    /// repeats.
    pub fn entity_tokens(&self, text: &str) -> Vec<String> {
        let mut seen = HashSet::new();
        words(text)
            .filter(|w| !self.is_change_verb(w))
            .flat_map(|w| self.content_tokens(&w))
            .filter(|s| !self.is_change_verb(s))
            .filter(|s| seen.insert(s.clone()))
            .collect()
    }
}
