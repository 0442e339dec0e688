//! Vocabulary of navigation-irrelevant words.
//!
//! Built offline: a lexicon is extracted from an instruction corpus, each
//! word is labelled relevant or irrelevant by a completion service (with a
//! cache and a deterministic fallback), and the irrelevant words are written
//! to a small versioned text file that pruning reads at run time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

mod classify;
mod client;

pub use classify::{
    classify_words, parse_response, prompt, ClassificationRecord, ClassifyOptions, Label,
    LabelCache, Source,
};
pub use client::{ClientError, CompletionClient, HttpCompletionClient};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

const VOCAB_HEADER: &str = "# navprune-vocabulary v1";
const FUNCTION_WORDS: &str = include_str!("../../data/function_words.txt");

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("version header mismatch: expected {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },
    #[error("malformed line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unresolved words (service unreachable, not cached, fallback disabled): {}", .0.join(", "))]
    Unresolved(Vec<String>),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn is_punctuation(word: &str) -> bool {
    !word.is_empty() && word.chars().all(|c| !c.is_alphanumeric())
}

fn is_delimiter(word: &str) -> bool {
    word == BOS || word == EOS
}

/// Lowercase and strip leading/trailing punctuation. Standalone punctuation
/// and the sentence delimiters are returned unchanged.
pub fn normalize(word: &str) -> String {
    let w = word.trim();
    let lower = w.to_lowercase();
    if is_delimiter(&lower) || is_punctuation(w) {
        return lower;
    }
    lower.trim_matches(|c: char| !c.is_alphanumeric()).to_string()
}

/// Split on whitespace and peel leading/trailing punctuation into tokens of
/// their own. Internal punctuation ("don't", "2nd-floor") stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if is_delimiter(&chunk.to_lowercase()) {
            out.push(chunk.to_string());
            continue;
        }
        let Some(start) = chunk.find(|c: char| c.is_alphanumeric()) else {
            out.extend(chunk.chars().map(String::from));
            continue;
        };
        let end = chunk
            .char_indices()
            .filter(|(_, c)| c.is_alphanumeric())
            .map(|(i, c)| i + c.len_utf8())
            .last()
            .unwrap_or(chunk.len());
        out.extend(chunk[..start].chars().map(String::from));
        out.push(chunk[start..end].to_string());
        out.extend(chunk[end..].chars().map(String::from));
    }
    out
}

/// Corpus words with frequencies: words before punctuation, then by
/// descending frequency, then alphabetically.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    entries: Vec<(String, usize)>,
}

impl Lexicon {
    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(w, _)| w.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn extract_lexicon<S: AsRef<str>>(corpus: &[S]) -> Result<Lexicon, VocabError> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for tok in tokenize(line.as_ref()) {
            let w = normalize(&tok);
            if !w.is_empty() {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| {
        (is_punctuation(&a.0), std::cmp::Reverse(a.1), &a.0).cmp(&(
            is_punctuation(&b.0),
            std::cmp::Reverse(b.1),
            &b.0,
        ))
    });
    Ok(Lexicon { entries })
}

fn function_words() -> &'static BTreeSet<&'static str> {
    static WORDS: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        FUNCTION_WORDS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Version line of the shipped function-word list.
pub fn function_words_version() -> &'static str {
    FUNCTION_WORDS.lines().next().unwrap_or_default().trim_start_matches('#').trim()
}

/// The shipped function-word list, sorted.
pub fn function_word_list() -> Vec<&'static str> {
    function_words().iter().copied().collect()
}

fn is_numeral(word: &str) -> bool {
    word.chars().next().is_some_and(|c| c.is_ascii_digit())
        && word.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

/// Offline label: punctuation, delimiters, numerals and listed function
/// words are irrelevant; everything else, including unseen words, is
/// relevant.
pub fn fallback_classify(word: &str) -> Label {
    let w = normalize(word);
    if is_punctuation(&w) || is_delimiter(&w) || is_numeral(&w) || function_words().contains(w.as_str()) {
        Label::Irrelevant
    } else {
        Label::Relevant
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VocabMeta {
    pub source: String,
    pub builder: String,
    /// Seconds since the Unix epoch.
    pub created: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    words: BTreeSet<String>,
    pub meta: VocabMeta,
}

impl Vocabulary {
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        Vocabulary {
            words: words
                .into_iter()
                .map(|w| normalize(w.as_ref()))
                .filter(|w| !w.is_empty())
                .collect(),
            meta: VocabMeta::default(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&normalize(word))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{VOCAB_HEADER}");
        let _ = writeln!(s, "# source: {}", self.meta.source);
        let _ = writeln!(s, "# builder: {}", self.meta.builder);
        let _ = writeln!(s, "# created: {}", self.meta.created);
        for w in &self.words {
            let _ = writeln!(s, "{w}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines();
        let first = lines.next().unwrap_or_default();
        if first != VOCAB_HEADER {
            return Err(VocabError::VersionMismatch {
                expected: VOCAB_HEADER.into(),
                found: first.into(),
            });
        }
        let mut vocab = Vocabulary::default();
        for (i, line) in lines.enumerate() {
            if let Some(h) = line.strip_prefix("# ") {
                let (key, value) = h.split_once(": ").unwrap_or((h.trim_end_matches(':'), ""));
                match key {
                    "source" => vocab.meta.source = value.into(),
                    "builder" => vocab.meta.builder = value.into(),
                    "created" => {
                        vocab.meta.created = value.parse().map_err(|_| VocabError::Malformed {
                            line: i + 2,
                            message: format!("bad timestamp {value:?}"),
                        })?
                    }
                    _ => {}
                }
            } else if !line.is_empty() {
                vocab.words.insert(normalize(line));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// The irrelevant-labelled words of `records`.
pub fn build_vocabulary(records: &[ClassificationRecord], meta: VocabMeta) -> Vocabulary {
    let mut v = Vocabulary::from_words(
        records
            .iter()
            .filter(|r| r.label == Label::Irrelevant)
            .map(|r| r.word.as_str()),
    );
    v.meta = meta;
    v
}
