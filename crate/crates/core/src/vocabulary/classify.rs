use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, warn};

use super::{fallback_classify, normalize, CompletionClient, Lexicon, VocabError};

const CACHE_HEADER: &str = "# navprune-label-cache v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Relevant,
    Irrelevant,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Relevant => "relevant",
            Label::Irrelevant => "irrelevant",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relevant" => Ok(Label::Relevant),
            "irrelevant" => Ok(Label::Irrelevant),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Service,
    Cache,
    Fallback,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Service => "service",
            Source::Cache => "cache",
            Source::Fallback => "fallback",
        })
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "service" => Ok(Source::Service),
            "cache" => Ok(Source::Cache),
            "fallback" => Ok(Source::Fallback),
            _ => Err(format!("unknown source {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationRecord {
    pub word: String,
    pub label: Label,
    pub explanation: String,
    pub source: Source,
}

/// The classification prompt with `words` quoted into it.
pub fn prompt<S: AsRef<str>>(words: &[S]) -> String {
    let list = words
        .iter()
        .map(|w| format!("\"{}\"", w.as_ref()))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "Given the following set of words: {list}, \n\
         can you point out which of them are irrelevant to the following types of information: \n\
         1. A direction to go; 2. Describing the environment; 3. Object(s) in the indoor/outdoor environments. \n\
         Please don't change the word in the quotation mark and explain why. \n\
         Please answer in the following: format: \"{{word}} : relevant/irrelevant {{explanation}}\""
    )
}

/// Parse `{word} : relevant|irrelevant {explanation}` lines. Lines of any
/// other shape are skipped.
pub fn parse_response(text: &str) -> Vec<(String, Label, String)> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(|c: char| c == '-' || c == '*' || c.is_whitespace());
        let Some((word, rest)) = line.split_once(" : ").or_else(|| line.split_once(':')) else {
            continue;
        };
        let word = normalize(word.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`'));
        let rest = rest.trim();
        let (head, tail) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
        let head = head.trim_end_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        let Ok(label) = head.parse::<Label>() else {
            continue;
        };
        if word.is_empty() {
            continue;
        }
        let explanation = tail.trim_start_matches(|c: char| c == '-' || c == ',' || c == ':' || c.is_whitespace());
        out.push((word, label, explanation.trim().to_string()));
    }
    out
}

/// Line-oriented label cache, `word<TAB>label<TAB>source` per line.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelCache {
    path: Option<PathBuf>,
    pub builder: String,
    entries: BTreeMap<String, (Label, Source)>,
}

impl LabelCache {
    pub fn in_memory(builder: &str) -> Self {
        LabelCache {
            path: None,
            builder: builder.to_string(),
            entries: BTreeMap::new(),
        }
    }

    /// Open `path`, starting empty when it does not exist yet.
    pub fn open(path: &Path, builder: &str) -> Result<Self, VocabError> {
        let mut cache = match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Self::in_memory(builder),
            Err(e) => return Err(e.into()),
        };
        cache.path = Some(path.to_path_buf());
        Ok(cache)
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines();
        let first = lines.next().unwrap_or_default();
        if first != CACHE_HEADER {
            return Err(VocabError::VersionMismatch {
                expected: CACHE_HEADER.into(),
                found: first.into(),
            });
        }
        let mut cache = LabelCache::default();
        for (i, line) in lines.enumerate() {
            if let Some(b) = line.strip_prefix("# builder: ") {
                cache.builder = b.to_string();
                continue;
            }
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let bad = |message: String| VocabError::Malformed { line: i + 2, message };
            let cols: Vec<&str> = line.split('\t').collect();
            let [word, label, source] = cols[..] else {
                return Err(bad(format!("expected 3 tab-separated columns, got {}", cols.len())));
            };
            cache
                .entries
                .insert(word.to_string(), (label.parse().map_err(bad)?, source.parse().map_err(bad)?));
        }
        Ok(cache)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CACHE_HEADER}\n# builder: {}\n", self.builder);
        for (w, (l, src)) in &self.entries {
            let _ = writeln!(s, "{w}\t{l}\t{src}");
        }
        s
    }

    pub fn save(&self) -> Result<(), VocabError> {
        if let Some(p) = &self.path {
            std::fs::write(p, self.to_text())?;
        }
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<Label> {
        self.entries.get(word).map(|e| e.0)
    }

    pub fn insert(&mut self, word: &str, label: Label, source: Source) {
        self.entries.insert(word.to_string(), (label, source));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ClassifyOptions {
    pub batch_size: usize,
    pub attempts: usize,
    pub backoff: Duration,
    pub concurrency: usize,
    pub fallback: bool,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            batch_size: 40,
            attempts: 3,
            backoff: Duration::from_millis(250),
            concurrency: 4,
            fallback: true,
        }
    }
}

fn classify_batch(
    client: &dyn CompletionClient,
    words: &[String],
    opts: &ClassifyOptions,
) -> BTreeMap<String, (Label, String)> {
    let text = prompt(words);
    for attempt in 0..opts.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(opts.backoff * 2u32.pow(attempt as u32 - 1));
        }
        match client.complete(&text) {
            Ok(resp) => {
                return parse_response(&resp)
                    .into_iter()
                    .filter(|(w, _, _)| words.contains(w))
                    .map(|(w, l, e)| (w, (l, e)))
                    .collect()
            }
            Err(e) => warn!("classification request failed (attempt {}): {e}", attempt + 1),
        }
    }
    BTreeMap::new()
}

/// Label every lexicon word: cache first, then the service in batches, then
/// the fallback for whatever is left. New labels are written to the cache.
pub fn classify_words(
    lexicon: &Lexicon,
    client: Option<&dyn CompletionClient>,
    cache: &mut LabelCache,
    opts: &ClassifyOptions,
) -> Result<Vec<ClassificationRecord>, VocabError> {
    let mut resolved: BTreeMap<String, ClassificationRecord> = BTreeMap::new();
    let mut misses: Vec<String> = Vec::new();
    for w in lexicon.words() {
        match cache.get(w) {
            Some(label) => {
                resolved.insert(
                    w.to_string(),
                    ClassificationRecord {
                        word: w.to_string(),
                        label,
                        explanation: String::new(),
                        source: super::Source::Cache,
                    },
                );
            }
            None => misses.push(w.to_string()),
        }
    }

    let fresh = Mutex::new(BTreeMap::new());
    if let Some(client) = client.filter(|_| !misses.is_empty()) {
        let batches: Vec<&[String]> = misses.chunks(opts.batch_size.max(1)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..opts.concurrency.clamp(1, batches.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(batch) = batches.get(i) else { break };
                    debug!("classifying batch {i} ({} words)", batch.len());
                    let got = classify_batch(client, batch, opts);
                    fresh.lock().expect("poisoned").extend(got);
                });
            }
        });
    }
    let fresh = fresh.into_inner().expect("poisoned");

    let mut unresolved = Vec::new();
    for w in misses {
        let record = match fresh.get(&w) {
            Some((label, explanation)) => ClassificationRecord {
                word: w.clone(),
                label: *label,
                explanation: explanation.clone(),
                source: Source::Service,
            },
            None if opts.fallback => ClassificationRecord {
                word: w.clone(),
                label: fallback_classify(&w),
                explanation: "built-in function-word rule".into(),
                source: Source::Fallback,
            },
            None => {
                unresolved.push(w);
                continue;
            }
        };
        cache.insert(&w, record.label, record.source);
        resolved.insert(w, record);
    }
    if !unresolved.is_empty() {
        return Err(VocabError::Unresolved(unresolved));
    }
    cache.save()?;
    Ok(lexicon
        .words()
        .map(|w| resolved.remove(w).expect("every word resolved"))
        .collect())
}
