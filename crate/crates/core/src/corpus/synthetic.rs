//! Synthetic word-structured corpora.
//!
//! A [`SyntheticLanguage`] is a fixed lexicon over a small shared alphabet
//! plus a sparse word-bigram table. Characters recur in every word position,
//! so a character's BMES tag is only recoverable from its context. Two
//! segmentation standards are available: `Fine` emits the lexicon words,
//! `Coarse` additionally merges designated word pairs into compounds.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SegmentedSentence;

/// Relative frequency by word length: short words are the common ones, so
/// single-character words dominate running text.
fn word_frequency(len: usize) -> f64 {
    match len {
        1 => 10.0,
        2 => 3.0,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Fine,
    Coarse,
}

#[derive(Debug, Clone)]
pub struct SyntheticParams {
    pub alphabet_size: usize,
    pub lexicon_size: usize,
    /// Successors per word in the bigram table.
    pub branching: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub max_chars: usize,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            alphabet_size: 32,
            lexicon_size: 160,
            branching: 3,
            min_words: 3,
            max_words: 10,
            max_chars: 30,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    params: SyntheticParams,
    alphabet: Vec<char>,
    words: Vec<Vec<char>>,
    successors: Vec<Vec<usize>>,
    compounds: HashSet<(usize, usize)>,
}

impl SyntheticLanguage {
    pub fn new(params: SyntheticParams) -> SyntheticLanguage {
        assert!(params.alphabet_size >= 2 && params.lexicon_size >= 2);
        assert!(params.branching >= 1 && params.min_words >= 1);
        assert!(params.max_words >= params.min_words && params.max_chars >= 4);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let alphabet: Vec<char> =
            (0..params.alphabet_size as u32).map(|i| char::from_u32(0x4E00 + i * 37).expect("CJK block")).collect();

        let mut seen = HashSet::new();
        let mut words = Vec::with_capacity(params.lexicon_size);
        let mut attempts = 0;
        while words.len() < params.lexicon_size {
            attempts += 1;
            assert!(attempts < 1_000_000, "alphabet too small for lexicon");
            let len = match rng.random_range(0..20) {
                0..=4 => 1,
                5..=13 => 2,
                14..=17 => 3,
                _ => 4,
            };
            let w: Vec<char> = (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }

        let branching = params.branching.min(params.lexicon_size);
        let mut successors = Vec::with_capacity(words.len());
        let all: Vec<usize> = (0..words.len()).collect();
        let weight = |w: &usize| word_frequency(words[*w].len());
        for _ in 0..words.len() {
            let mut next: Vec<usize> =
                all.choose_multiple_weighted(&mut rng, branching, weight).expect("positive weights").copied().collect();
            next.shuffle(&mut rng);
            successors.push(next);
        }

        let mut compounds = HashSet::new();
        for (a, next) in successors.iter().enumerate() {
            let b = next[0];
            if words[a].len() + words[b].len() <= 5 && rng.random_bool(0.3) {
                compounds.insert((a, b));
            }
        }

        SyntheticLanguage { params, alphabet, words, successors, compounds }
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn lexicon(&self) -> &[Vec<char>] {
        &self.words
    }

    /// Label that ignores word structure: 1 when more than half of the
    /// characters come from the first half of the alphabet.
    pub fn char_set_label(&self, sentence: &SegmentedSentence) -> usize {
        let half = &self.alphabet[..self.alphabet.len() / 2];
        let hits = sentence.chars().iter().filter(|c| half.contains(c)).count();
        usize::from(2 * hits > sentence.len())
    }

    /// Sample `count` sentences; identical arguments give identical output.
    pub fn sample(&self, count: usize, granularity: Granularity, seed: u64) -> Vec<SegmentedSentence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_sentence(&mut rng, granularity)).collect()
    }

    pub fn sample_sentence<R: Rng>(&self, rng: &mut R, granularity: Granularity) -> SegmentedSentence {
        let p = &self.params;
        let target = rng.random_range(p.min_words..=p.max_words);
        let mut ids = vec![rng.random_range(0..self.words.len())];
        let mut chars = self.words[ids[0]].len();
        while ids.len() < target {
            let prev = *ids.last().unwrap();
            let next = *self.successors[prev].choose_weighted(rng, |&w| word_frequency(self.words[w].len())).unwrap();
            if chars + self.words[next].len() > p.max_chars {
                break;
            }
            chars += self.words[next].len();
            ids.push(next);
        }

        let mut words: Vec<Vec<char>> = Vec::with_capacity(ids.len());
        let mut i = 0;
        while i < ids.len() {
            let mut w = self.words[ids[i]].clone();
            if granularity == Granularity::Coarse && i + 1 < ids.len() && self.compounds.contains(&(ids[i], ids[i + 1]))
            {
                w.extend_from_slice(&self.words[ids[i + 1]]);
                i += 1;
            }
            words.push(w);
            i += 1;
        }
        let words: Vec<String> = words.into_iter().map(|w| w.into_iter().collect()).collect();
        SegmentedSentence::from_words(&words).expect("lexicon words are non-empty")
    }
}
