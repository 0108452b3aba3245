//! Attention-distribution statistics against gold word boundaries.
//!
//! For every content character (never `[CLS]`/`[SEP]`) acting as the
//! attention source, three families of targets are measured:
//!
//! * specific characters: itself, the previous and next character, `[CLS]`
//!   and `[SEP]`;
//! * word boundaries: first→last and last→first character of the same word
//!   (words of two or more characters only), first→first of the next word,
//!   last→last of the previous word;
//! * word windows: the mean attention onto the characters of the word at
//!   offset `k ∈ [-5, 5]` from the source character's word.
//!
//! Targets that do not exist (the previous character of the first
//! character, a word beyond the sentence) are skipped and do not count.
//! Statistics are micro-averaged: per pattern, the corpus-wide sum of
//! contributions divided by the corpus-wide number of contributions.

mod export;

use std::fmt;
use std::io::Write;

use ndarray::ArrayView2;
use thiserror::Error;

use crate::corpus::SegmentedSentence;
use crate::encoder::ForwardTrace;
use crate::exec::Exec;

pub use export::{export_matrix, render_svg, AttentionMatrix};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("trace has {got_layers} layers x {got_heads} heads, expected {layers} x {heads}")]
    ConfigMismatch { layers: usize, heads: usize, got_layers: usize, got_heads: usize },
    #[error("statistics table is empty")]
    EmptyTable,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("malformed matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Largest word offset covered by the window statistics.
pub const WINDOW: i8 = 5;
pub const PATTERN_COUNT: usize = 9 + (2 * WINDOW as usize + 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Curr,
    Next,
    Prev,
    ToCls,
    ToSep,
    FirstToLast,
    LastToFirst,
    FirstToNextFirst,
    LastToPrevLast,
    /// Mean attention onto the word `k` words away; `WordOffset(0)` is the
    /// character's own word.
    WordOffset(i8),
}

impl PatternKind {
    /// The nine character-level columns, in report order.
    pub const CHARACTER_PATTERNS: [PatternKind; 9] = [
        PatternKind::Curr,
        PatternKind::Next,
        PatternKind::Prev,
        PatternKind::ToCls,
        PatternKind::ToSep,
        PatternKind::FirstToLast,
        PatternKind::LastToFirst,
        PatternKind::FirstToNextFirst,
        PatternKind::LastToPrevLast,
    ];

    pub fn index(self) -> usize {
        match self {
            PatternKind::WordOffset(k) => {
                assert!((-WINDOW..=WINDOW).contains(&k), "word offset {k} outside window");
                9 + (k + WINDOW) as usize
            }
            other => Self::CHARACTER_PATTERNS.iter().position(|&p| p == other).unwrap(),
        }
    }

    pub fn from_index(i: usize) -> Option<PatternKind> {
        if i < 9 {
            Some(Self::CHARACTER_PATTERNS[i])
        } else if i < PATTERN_COUNT {
            Some(PatternKind::WordOffset(i as i8 - 9 - WINDOW))
        } else {
            None
        }
    }

    pub fn all() -> impl Iterator<Item = PatternKind> {
        (0..PATTERN_COUNT).map(|i| Self::from_index(i).unwrap())
    }

    /// Short column label used in the best-head table.
    pub fn label(self) -> String {
        match self {
            PatternKind::Curr => "Curr".into(),
            PatternKind::Next => "Next".into(),
            PatternKind::Prev => "Prev".into(),
            PatternKind::ToCls => "CLS".into(),
            PatternKind::ToSep => "SEP".into(),
            PatternKind::FirstToLast => "F->L".into(),
            PatternKind::LastToFirst => "L->F".into(),
            PatternKind::FirstToNextFirst => "F->F1".into(),
            PatternKind::LastToPrevLast => "L->L-1".into(),
            PatternKind::WordOffset(k) => format!("word{k:+}"),
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PatternKind::Curr => "curr",
            PatternKind::Next => "next",
            PatternKind::Prev => "prev",
            PatternKind::ToCls => "cls",
            PatternKind::ToSep => "sep",
            PatternKind::FirstToLast => "first_to_last",
            PatternKind::LastToFirst => "last_to_first",
            PatternKind::FirstToNextFirst => "first_to_next_first",
            PatternKind::LastToPrevLast => "last_to_prev_last",
            PatternKind::WordOffset(k) => return write!(f, "word{k:+}"),
        };
        f.write_str(s)
    }
}

/// Running sum and contribution count.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Acc {
    pub sum: f64,
    pub count: u64,
}

/// One [`Acc`] per pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSums(pub [Acc; PATTERN_COUNT]);

impl Default for PatternSums {
    fn default() -> Self {
        PatternSums([Acc::default(); PATTERN_COUNT])
    }
}

impl PatternSums {
    pub fn add(&mut self, kind: PatternKind, value: f64) {
        let a = &mut self.0[kind.index()];
        a.sum += value;
        a.count += 1;
    }

    pub fn get(&self, kind: PatternKind) -> Acc {
        self.0[kind.index()]
    }

    pub fn mean(&self, kind: PatternKind) -> Option<f64> {
        let a = self.get(kind);
        (a.count > 0).then(|| a.sum / a.count as f64)
    }

    pub fn merge(&mut self, other: &PatternSums) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            a.sum += b.sum;
            a.count += b.count;
        }
    }
}

/// Where the content characters sit in the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_tokens: usize,
    pub cls: usize,
    pub sep: usize,
    pub first_char: usize,
}

impl TokenLayout {
    /// `[CLS] c_1 .. c_n [SEP]`.
    pub fn single(n_chars: usize) -> TokenLayout {
        TokenLayout { n_tokens: n_chars + 2, cls: 0, sep: n_chars + 1, first_char: 1 }
    }

    fn check(&self, alpha: &ArrayView2<'_, f32>, sent: &SegmentedSentence) -> Result<(), StatsError> {
        if alpha.nrows() != self.n_tokens || alpha.ncols() != self.n_tokens {
            return Err(StatsError::ShapeMismatch(format!(
                "attention is {:?} but layout has {} tokens",
                alpha.dim(),
                self.n_tokens
            )));
        }
        if self.first_char + sent.len() > self.n_tokens || self.cls >= self.n_tokens || self.sep >= self.n_tokens {
            return Err(StatsError::ShapeMismatch(format!(
                "{} characters do not fit a layout of {} tokens",
                sent.len(),
                self.n_tokens
            )));
        }
        Ok(())
    }
}

/// Curr / Prev / Next / `[CLS]` / `[SEP]` contributions of one head.
pub fn specific_char_stats(
    alpha: ArrayView2<'_, f32>,
    sent: &SegmentedSentence,
    layout: &TokenLayout,
) -> Result<PatternSums, StatsError> {
    layout.check(&alpha, sent)?;
    let mut sums = PatternSums::default();
    let n = sent.len();
    for i in 0..n {
        let t = layout.first_char + i;
        let row = alpha.row(t);
        sums.add(PatternKind::Curr, row[t] as f64);
        if i > 0 {
            sums.add(PatternKind::Prev, row[t - 1] as f64);
        }
        if i + 1 < n {
            sums.add(PatternKind::Next, row[t + 1] as f64);
        }
        sums.add(PatternKind::ToCls, row[layout.cls] as f64);
        sums.add(PatternKind::ToSep, row[layout.sep] as f64);
    }
    Ok(sums)
}

/// First/last-character contributions of one head.
pub fn boundary_stats(
    alpha: ArrayView2<'_, f32>,
    sent: &SegmentedSentence,
    layout: &TokenLayout,
) -> Result<PatternSums, StatsError> {
    layout.check(&alpha, sent)?;
    let mut sums = PatternSums::default();
    let tok = |c: usize| layout.first_char + c;
    let spans = sent.spans();
    for (k, &(start, end)) in spans.iter().enumerate() {
        let (first, last) = (tok(start), tok(end - 1));
        if end - start >= 2 {
            sums.add(PatternKind::FirstToLast, alpha[[first, last]] as f64);
            sums.add(PatternKind::LastToFirst, alpha[[last, first]] as f64);
        }
        if let Some(&(next_start, _)) = spans.get(k + 1) {
            sums.add(PatternKind::FirstToNextFirst, alpha[[first, tok(next_start)]] as f64);
        }
        if k > 0 {
            let prev_last = tok(spans[k - 1].1 - 1);
            sums.add(PatternKind::LastToPrevLast, alpha[[last, prev_last]] as f64);
        }
    }
    Ok(sums)
}

/// Character-to-word contributions for offsets `-5..=5` of one head.
pub fn word_window_stats(
    alpha: ArrayView2<'_, f32>,
    sent: &SegmentedSentence,
    layout: &TokenLayout,
) -> Result<PatternSums, StatsError> {
    layout.check(&alpha, sent)?;
    let mut sums = PatternSums::default();
    let spans = sent.spans();
    let word_of = sent.word_index();
    for (j, &k) in word_of.iter().enumerate() {
        let row = alpha.row(layout.first_char + j);
        for off in -WINDOW..=WINDOW {
            let target = k as isize + off as isize;
            if target < 0 || target as usize >= spans.len() {
                continue;
            }
            let (s, e) = spans[target as usize];
            let total: f64 = (s..e).map(|c| row[layout.first_char + c] as f64).sum();
            sums.add(PatternKind::WordOffset(off), total / (e - s) as f64);
        }
    }
    Ok(sums)
}

/// All patterns for one head.
pub fn head_stats(
    alpha: ArrayView2<'_, f32>,
    sent: &SegmentedSentence,
    layout: &TokenLayout,
) -> Result<PatternSums, StatsError> {
    let mut sums = specific_char_stats(alpha, sent, layout)?;
    sums.merge(&boundary_stats(alpha, sent, layout)?);
    sums.merge(&word_window_stats(alpha, sent, layout)?);
    Ok(sums)
}

/// Per `(layer, head)` pattern sums. Layers and heads are 0-based here and
/// 1-based in every CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStatTable {
    layers: usize,
    heads: usize,
    cells: Vec<PatternSums>,
}

impl HeadStatTable {
    pub fn empty(layers: usize, heads: usize) -> HeadStatTable {
        HeadStatTable { layers, heads, cells: vec![PatternSums::default(); layers * heads] }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn cell(&self, layer: usize, head: usize) -> &PatternSums {
        &self.cells[layer * self.heads + head]
    }

    pub fn mean(&self, layer: usize, head: usize, kind: PatternKind) -> Option<f64> {
        self.cell(layer, head).mean(kind)
    }

    pub fn count(&self, layer: usize, head: usize, kind: PatternKind) -> u64 {
        self.cell(layer, head).get(kind).count
    }

    /// No contributions recorded for any pattern.
    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|c| c.0.iter().all(|a| a.count == 0))
    }

    pub fn merge(&mut self, other: &HeadStatTable) -> Result<(), StatsError> {
        if other.layers != self.layers || other.heads != self.heads {
            return Err(StatsError::ConfigMismatch {
                layers: self.layers,
                heads: self.heads,
                got_layers: other.layers,
                got_heads: other.heads,
            });
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
        Ok(())
    }

    /// Statistics of a single sentence.
    pub fn from_trace(trace: &ForwardTrace, sent: &SegmentedSentence) -> Result<HeadStatTable, StatsError> {
        let layout = TokenLayout::single(sent.len());
        if trace.n_tokens() != layout.n_tokens {
            return Err(StatsError::ShapeMismatch(format!(
                "trace has {} tokens for a {}-character sentence",
                trace.n_tokens(),
                sent.len()
            )));
        }
        let mut table = HeadStatTable::empty(trace.layers, trace.heads);
        for l in 0..trace.layers {
            for m in 0..trace.heads {
                table.cells[l * trace.heads + m] = head_stats(trace.attention(l, m), sent, &layout)?;
            }
        }
        Ok(table)
    }

    /// `layer,head,pattern,mean_pct,count`; undefined means are left blank.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), StatsError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "head", "pattern", "mean_pct", "count"])?;
        for l in 0..self.layers {
            for m in 0..self.heads {
                for kind in PatternKind::all() {
                    let mean = self.mean(l, m, kind).map(|v| format!("{:.1}", v * 100.0)).unwrap_or_default();
                    out.write_record([
                        (l + 1).to_string(),
                        (m + 1).to_string(),
                        kind.to_string(),
                        mean,
                        self.count(l, m, kind).to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn check_dims(trace: &ForwardTrace, layers: usize, heads: usize) -> Result<(), StatsError> {
    if trace.layers != layers || trace.heads != heads {
        return Err(StatsError::ConfigMismatch { layers, heads, got_layers: trace.layers, got_heads: trace.heads });
    }
    Ok(())
}

/// Micro-averaged statistics over a corpus of traces. Per-sentence tables
/// are computed under `exec` and merged in input order.
pub fn aggregate(
    layers: usize,
    heads: usize,
    items: &[(&ForwardTrace, &SegmentedSentence)],
    exec: Exec,
) -> Result<HeadStatTable, StatsError> {
    let partial = exec.map(items, |(trace, sent)| {
        check_dims(trace, layers, heads)?;
        HeadStatTable::from_trace(trace, sent)
    });
    let mut table = HeadStatTable::empty(layers, heads);
    for p in partial {
        table.merge(&p?)?;
    }
    Ok(table)
}

/// Sequential fold over a stream, for archives too large to hold at once.
/// Produces the same table as [`aggregate`] on the same sequence.
pub fn aggregate_stream<I, E>(layers: usize, heads: usize, items: I) -> Result<HeadStatTable, E>
where
    I: IntoIterator<Item = Result<(ForwardTrace, SegmentedSentence), E>>,
    E: From<StatsError>,
{
    let mut table = HeadStatTable::empty(layers, heads);
    for item in items {
        let (trace, sent) = item?;
        check_dims(&trace, layers, heads)?;
        table.merge(&HeadStatTable::from_trace(&trace, &sent)?)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestCell {
    /// 0-based head index.
    pub head: usize,
    pub value: f64,
}

/// Per layer and pattern, the head with the largest mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BestHeadReport {
    /// `cells[layer][pattern.index()]`.
    pub cells: Vec<Vec<Option<BestCell>>>,
    /// Per pattern, the `(layer, head, value)` of the overall maximum.
    pub global: Vec<Option<(usize, usize, f64)>>,
}

impl BestHeadReport {
    pub fn best(&self, layer: usize, kind: PatternKind) -> Option<BestCell> {
        self.cells[layer][kind.index()]
    }

    /// Table layout: one row per layer, one column per character pattern,
    /// each cell `pct(head)`; the overall maximum of a column carries `*`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), StatsError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["layer".to_string()];
        header.extend(PatternKind::CHARACTER_PATTERNS.iter().map(|k| k.label()));
        out.write_record(&header)?;
        for (l, row) in self.cells.iter().enumerate() {
            let mut rec = vec![(l + 1).to_string()];
            for kind in PatternKind::CHARACTER_PATTERNS {
                let cell = row[kind.index()];
                rec.push(match cell {
                    None => String::new(),
                    Some(c) => {
                        let star = match self.global[kind.index()] {
                            Some((gl, gh, _)) if gl == l && gh == c.head => "*",
                            _ => "",
                        };
                        format!("{:.1}({}){star}", c.value * 100.0, c.head + 1)
                    }
                });
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Argmax over heads per `(layer, pattern)`; ties go to the lowest head.
pub fn best_heads(table: &HeadStatTable) -> Result<BestHeadReport, StatsError> {
    if table.layers == 0 || table.heads == 0 || table.is_empty() {
        return Err(StatsError::EmptyTable);
    }
    let mut cells = Vec::with_capacity(table.layers);
    let mut global: Vec<Option<(usize, usize, f64)>> = vec![None; PATTERN_COUNT];
    for l in 0..table.layers {
        let mut row = vec![None; PATTERN_COUNT];
        for kind in PatternKind::all() {
            let mut best: Option<BestCell> = None;
            for m in 0..table.heads {
                if let Some(v) = table.mean(l, m, kind) {
                    if best.is_none_or(|b| v > b.value) {
                        best = Some(BestCell { head: m, value: v });
                    }
                }
            }
            if let Some(b) = best {
                let g = &mut global[kind.index()];
                if g.is_none_or(|(_, _, gv)| b.value > gv) {
                    *g = Some((l, b.head, b.value));
                }
            }
            row[kind.index()] = best;
        }
        cells.push(row);
    }
    Ok(BestHeadReport { cells, global })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPoint {
    pub offset: i8,
    pub layer: usize,
    pub head: usize,
    pub mean: f64,
}

/// Best head for each word offset: the character-to-word curve.
pub fn window_curve(table: &HeadStatTable) -> Result<Vec<WindowPoint>, StatsError> {
    let report = best_heads(table)?;
    Ok((-WINDOW..=WINDOW)
        .filter_map(|k| {
            report.global[PatternKind::WordOffset(k).index()].map(|(layer, head, mean)| WindowPoint {
                offset: k,
                layer,
                head,
                mean,
            })
        })
        .collect())
}

pub fn write_window_csv<W: Write>(points: &[WindowPoint], w: W) -> Result<(), StatsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["offset", "layer", "head", "mean_pct"])?;
    for p in points {
        out.write_record([
            p.offset.to_string(),
            (p.layer + 1).to_string(),
            (p.head + 1).to_string(),
            format!("{:.1}", p.mean * 100.0),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
