use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CorpusError, SegmentedSentence};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Names of the reserved tokens, indexed by id.
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Character vocabulary. Ids `0..5` are reserved; corpus characters get ids
/// from 5 upwards, ordered by descending frequency then code point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    ids: HashMap<char, u32>,
}

impl CharVocab {
    pub fn build<'a, I>(corpus: I, min_freq: usize) -> Result<CharVocab, CorpusError>
    where
        I: IntoIterator<Item = &'a SegmentedSentence>,
    {
        let mut counts: HashMap<char, usize> = HashMap::new();
        let mut sentences = 0usize;
        for sent in corpus {
            sentences += 1;
            for &c in sent.chars() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if sentences == 0 {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut kept: Vec<(char, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_freq.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self::from_chars(kept.into_iter().map(|(c, _)| c).collect()))
    }

    fn from_chars(chars: Vec<char>) -> CharVocab {
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, (i + RESERVED.len()) as u32)).collect();
        CharVocab { chars, ids }
    }

    /// Total id count including the reserved tokens.
    pub fn size(&self) -> usize {
        RESERVED.len() + self.chars.len()
    }

    pub fn id(&self, c: char) -> u32 {
        self.ids.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, c: char) -> bool {
        self.ids.contains_key(&c)
    }

    pub fn token_text(&self, id: u32) -> String {
        match RESERVED.get(id as usize) {
            Some(name) => (*name).to_string(),
            None => self
                .chars
                .get(id as usize - RESERVED.len())
                .map(|c| c.to_string())
                .unwrap_or_else(|| RESERVED[UNK_ID as usize].to_string()),
        }
    }

    /// `[CLS] c_1 .. c_n [SEP]`.
    pub fn encode(&self, sent: &SegmentedSentence) -> Vec<u32> {
        let mut ids = Vec::with_capacity(sent.len() + 2);
        ids.push(CLS_ID);
        ids.extend(sent.chars().iter().map(|&c| self.id(c)));
        ids.push(SEP_ID);
        ids
    }

    /// `[CLS] a [SEP] b [SEP]` with segment ids `0..0 1..1`.
    pub fn encode_pair(&self, a: &SegmentedSentence, b: &SegmentedSentence) -> (Vec<u32>, Vec<u32>) {
        let mut ids = self.encode(a);
        let mut segs = vec![0; ids.len()];
        ids.extend(b.chars().iter().map(|&c| self.id(c)));
        ids.push(SEP_ID);
        segs.resize(ids.len(), 1);
        (ids, segs)
    }

    /// `char<TAB>id` lines, reserved tokens first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, name) in RESERVED.iter().enumerate() {
            writeln!(out, "{name}\t{id}").unwrap();
        }
        for (i, c) in self.chars.iter().enumerate() {
            writeln!(out, "{c}\t{}", i + RESERVED.len()).unwrap();
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<CharVocab, CorpusError> {
        let mut chars = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: &str| CorpusError::VocabFormat { line: i + 1, reason: reason.into() };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != i {
                return Err(bad("ids must be dense and in order"));
            }
            if id < RESERVED.len() {
                if tok != RESERVED[id] {
                    return Err(bad("reserved token out of place"));
                }
                continue;
            }
            let mut it = tok.chars();
            match (it.next(), it.next()) {
                (Some(c), None) if !c.is_whitespace() => chars.push(c),
                _ => return Err(bad("entry must be a single non-space character")),
            }
        }
        if chars.len() + RESERVED.len() != text.lines().count() {
            return Err(CorpusError::VocabFormat { line: 0, reason: "missing reserved tokens".into() });
        }
        let vocab = Self::from_chars(chars);
        if vocab.ids.len() != vocab.chars.len() {
            return Err(CorpusError::VocabFormat { line: 0, reason: "duplicate character".into() });
        }
        Ok(vocab)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_tsv()).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<CharVocab, CorpusError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        Self::from_tsv(&text)
    }

    /// SHA-256 of the TSV form, lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }
}
