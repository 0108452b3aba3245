//! Whitespace-segmented corpora, BMES labels and corpus statistics.

mod synthetic;
mod vocab;

use std::fmt;
use std::io::BufRead;
use std::ops::Add;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use synthetic::{Granularity, SyntheticLanguage, SyntheticParams};
pub use vocab::{CharVocab, CLS_ID, MASK_ID, PAD_ID, RESERVED, SEP_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty line")]
    EmptyLine,
    #[error("invalid character {ch:?} at char offset {offset}")]
    InvalidChar { ch: char, offset: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid word spans: {0}")]
    InvalidSpans(String),
    #[error("{path}:{line}: {source}")]
    AtLine {
        path: String,
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("vocabulary line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A sentence as a character sequence plus the gold word spans that
/// partition it. Spans are half-open `(start, end)` character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentedSentence {
    chars: Vec<char>,
    spans: Vec<(usize, usize)>,
}

impl SegmentedSentence {
    pub fn new(chars: Vec<char>, spans: Vec<(usize, usize)>) -> Result<Self, CorpusError> {
        if chars.is_empty() {
            return Err(CorpusError::EmptyLine);
        }
        if let Some((offset, &ch)) = chars.iter().enumerate().find(|(_, c)| c.is_whitespace()) {
            return Err(CorpusError::InvalidChar { ch, offset });
        }
        validate_spans(&spans, chars.len())?;
        Ok(SegmentedSentence { chars, spans })
    }

    /// Build from a word list; every word must be non-empty.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self, CorpusError> {
        let mut chars = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let start = chars.len();
            chars.extend(w.as_ref().chars());
            if chars.len() == start {
                return Err(CorpusError::InvalidSpans("empty word".into()));
            }
            spans.push((start, chars.len()));
        }
        Self::new(chars, spans)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.spans.len()
    }

    pub fn words(&self) -> impl Iterator<Item = String> + '_ {
        self.spans.iter().map(move |&(s, e)| self.chars[s..e].iter().collect())
    }

    /// Index of the word containing each character.
    pub fn word_index(&self) -> Vec<usize> {
        let mut out = vec![0; self.chars.len()];
        for (k, &(s, e)) in self.spans.iter().enumerate() {
            out[s..e].iter_mut().for_each(|w| *w = k);
        }
        out
    }

    /// Unsegmented text.
    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    /// Split into pieces of at most `max_chars` characters, cutting at word
    /// boundaries where possible. Words longer than the limit are cut hard.
    pub fn split_to_fit(&self, max_chars: usize) -> Vec<SegmentedSentence> {
        assert!(max_chars > 0);
        if self.len() <= max_chars {
            return vec![self.clone()];
        }
        let mut pieces = Vec::new();
        let mut words: Vec<Vec<char>> = Vec::new();
        let mut used = 0;
        for &(s, e) in &self.spans {
            let mut word = &self.chars[s..e];
            while !word.is_empty() {
                if used == max_chars {
                    pieces.push(Self::from_char_words(std::mem::take(&mut words)));
                    used = 0;
                }
                if word.len() <= max_chars - used {
                    used += word.len();
                    words.push(word.to_vec());
                    word = &[];
                } else if used > 0 && word.len() <= max_chars {
                    pieces.push(Self::from_char_words(std::mem::take(&mut words)));
                    used = 0;
                } else {
                    let take = max_chars - used;
                    words.push(word[..take].to_vec());
                    used += take;
                    word = &word[take..];
                }
            }
        }
        if !words.is_empty() {
            pieces.push(Self::from_char_words(words));
        }
        pieces
    }

    fn from_char_words(words: Vec<Vec<char>>) -> SegmentedSentence {
        let mut chars = Vec::new();
        let mut spans = Vec::new();
        for w in words {
            let start = chars.len();
            chars.extend(w);
            spans.push((start, chars.len()));
        }
        SegmentedSentence { chars, spans }
    }
}

impl fmt::Display for SegmentedSentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, &(s, e)) in self.spans.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            for c in &self.chars[s..e] {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

/// Check that `spans` partition `[0, n)` in order.
pub fn validate_spans(spans: &[(usize, usize)], n: usize) -> Result<(), CorpusError> {
    let mut expected = 0;
    for &(s, e) in spans {
        if s != expected {
            return Err(CorpusError::InvalidSpans(format!("span ({s},{e}) does not start at {expected}")));
        }
        if e <= s {
            return Err(CorpusError::InvalidSpans(format!("span ({s},{e}) is empty")));
        }
        expected = e;
    }
    if expected != n {
        return Err(CorpusError::InvalidSpans(format!("spans cover [0,{expected}) but sentence has {n} characters")));
    }
    Ok(())
}

/// Parse one whitespace-segmented line.
pub fn parse_segmented_line(line: &str) -> Result<SegmentedSentence, CorpusError> {
    let mut chars = Vec::new();
    let mut spans = Vec::new();
    for word in line.split_whitespace() {
        let start = chars.len();
        for ch in word.chars() {
            if ch.is_control() {
                return Err(CorpusError::InvalidChar { ch, offset: chars.len() });
            }
            chars.push(ch);
        }
        spans.push((start, chars.len()));
    }
    if chars.is_empty() {
        return Err(CorpusError::EmptyLine);
    }
    Ok(SegmentedSentence { chars, spans })
}

/// Parse a whole corpus; blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<SegmentedSentence>, CorpusError> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())), "<memory>")
}

pub fn read_corpus(path: &Path) -> Result<Vec<SegmentedSentence>, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let reader = std::io::BufReader::new(file);
    parse_lines(reader.lines(), &path.display().to_string())
}

fn parse_lines<I>(lines: I, name: &str) -> Result<Vec<SegmentedSentence>, CorpusError>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: name.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let sent = parse_segmented_line(&line).map_err(|e| CorpusError::AtLine {
            path: name.to_string(),
            line: i + 1,
            source: Box::new(e),
        })?;
        out.push(sent);
    }
    Ok(out)
}

/// Per-character word-position tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BmesLabel {
    B,
    M,
    E,
    S,
}

impl BmesLabel {
    pub const ALL: [BmesLabel; 4] = [BmesLabel::B, BmesLabel::M, BmesLabel::E, BmesLabel::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BmesLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        match self {
            BmesLabel::B => 'B',
            BmesLabel::M => 'M',
            BmesLabel::E => 'E',
            BmesLabel::S => 'S',
        }
    }
}

impl fmt::Display for BmesLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

pub fn derive_bmes(sent: &SegmentedSentence) -> Vec<BmesLabel> {
    let mut labels = Vec::with_capacity(sent.len());
    for &(s, e) in sent.spans() {
        if e - s == 1 {
            labels.push(BmesLabel::S);
        } else {
            labels.push(BmesLabel::B);
            labels.extend(std::iter::repeat_n(BmesLabel::M, e - s - 2));
            labels.push(BmesLabel::E);
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub word_count: usize,
    pub char_count: usize,
    /// Characters per sentence, excluding `[CLS]`/`[SEP]`.
    pub avg_sentence_length_chars: f64,
}

impl CorpusStats {
    fn from_counts(sentence_count: usize, word_count: usize, char_count: usize) -> Self {
        let avg = if sentence_count > 0 { char_count as f64 / sentence_count as f64 } else { 0.0 };
        CorpusStats { sentence_count, word_count, char_count, avg_sentence_length_chars: avg }
    }

    /// Expected attention mass on any single target under uniform attention.
    pub fn random_baseline(&self) -> f64 {
        random_baseline(self.avg_sentence_length_chars)
    }
}

impl Add for CorpusStats {
    type Output = CorpusStats;

    fn add(self, rhs: CorpusStats) -> CorpusStats {
        CorpusStats::from_counts(
            self.sentence_count + rhs.sentence_count,
            self.word_count + rhs.word_count,
            self.char_count + rhs.char_count,
        )
    }
}

pub fn corpus_stats<'a, I>(corpus: I) -> Result<CorpusStats, CorpusError>
where
    I: IntoIterator<Item = &'a SegmentedSentence>,
{
    let (mut s, mut w, mut c) = (0, 0, 0);
    for sent in corpus {
        s += 1;
        w += sent.word_count();
        c += sent.len();
    }
    if s == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(CorpusStats::from_counts(s, w, c))
}

/// `1 / avg_len`: the share one target gets when a character attends
/// uniformly over an average-length sentence.
pub fn random_baseline(avg_sentence_length_chars: f64) -> f64 {
    1.0 / avg_sentence_length_chars
}

/// Three decimals, truncated rather than rounded, the way baselines are
/// usually quoted: 1/35.8 = 0.02793 prints as `0.027`.
pub fn format_baseline(baseline: f64) -> String {
    let milli = (baseline * 1000.0 + 1e-9).floor();
    format!("{:.3}", milli / 1000.0)
}
