//! Label decoding and span-level segmentation scores.

use std::collections::BTreeSet;

use crate::corpus::BmesLabel;

use super::ProbeError;

/// Turn a (possibly invalid) label sequence into a partition of `[0, n)`.
///
/// A word starts at position 0, at every `B` or `S`, and at any `M`/`E`
/// that directly follows an `E` or `S`. Every word runs up to the next start.
pub fn decode_spans(labels: &[BmesLabel]) -> Vec<(usize, usize)> {
    use BmesLabel::*;
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 1..labels.len() {
        let begins = matches!(labels[i], B | S) || matches!(labels[i - 1], E | S);
        if begins {
            spans.push((start, i));
            start = i;
        }
    }
    if !labels.is_empty() {
        spans.push((start, labels.len()));
    }
    spans
}

/// Raw span counts; pooled over a corpus before computing scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpanCounts {
    pub correct: u64,
    pub predicted: u64,
    pub gold: u64,
}

impl SpanCounts {
    pub fn add(&mut self, other: SpanCounts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn scores(&self) -> Prf {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Prf::new(ratio(self.correct, self.predicted), ratio(self.correct, self.gold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

fn covered(spans: &[(usize, usize)]) -> usize {
    spans.iter().map(|&(_, e)| e).max().unwrap_or(0)
}

/// Exact `(start, end)` matches between two segmentations of one sequence.
pub fn span_counts(gold: &[(usize, usize)], pred: &[(usize, usize)]) -> Result<SpanCounts, ProbeError> {
    let (g, p) = (covered(gold), covered(pred));
    if g != p {
        return Err(ProbeError::LengthMismatch { expected: g, got: p });
    }
    let gold_set: BTreeSet<_> = gold.iter().collect();
    let correct = pred.iter().collect::<BTreeSet<_>>().intersection(&gold_set).count() as u64;
    Ok(SpanCounts { correct, predicted: pred.len() as u64, gold: gold.len() as u64 })
}

pub fn seg_f1(gold: &[(usize, usize)], pred: &[(usize, usize)]) -> Result<Prf, ProbeError> {
    Ok(span_counts(gold, pred)?.scores())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use BmesLabel::*;

    /// Literal transcription of the repair rule: mark starts, then cut.
    fn reference_decode(labels: &[BmesLabel]) -> Vec<(usize, usize)> {
        let n = labels.len();
        let is_start: Vec<bool> = (0..n)
            .map(|i| i == 0 || labels[i] == B || labels[i] == S || labels[i - 1] == E || labels[i - 1] == S)
            .collect();
        let starts: Vec<usize> = (0..n).filter(|&i| is_start[i]).collect();
        starts.iter().enumerate().map(|(k, &s)| (s, starts.get(k + 1).copied().unwrap_or(n))).collect()
    }

    fn is_partition(spans: &[(usize, usize)], n: usize) -> bool {
        let mut pos = 0;
        for &(s, e) in spans {
            if s != pos || e <= s {
                return false;
            }
            pos = e;
        }
        pos == n
    }

    #[test]
    fn decodes_valid_sequences() {
        assert_eq!(decode_spans(&[B, E, S]), vec![(0, 2), (2, 3)]);
        assert_eq!(decode_spans(&[B, M, E]), vec![(0, 3)]);
        assert_eq!(decode_spans(&[S]), vec![(0, 1)]);
        assert!(decode_spans(&[]).is_empty());
    }

    #[test]
    fn repairs_invalid_sequences() {
        // E closes the first word, M after E opens a new one, B opens another
        assert_eq!(decode_spans(&[E, M, B]), vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(decode_spans(&[M, M, E]), vec![(0, 3)]);
        assert_eq!(decode_spans(&[B, B, M]), vec![(0, 1), (1, 3)]);
    }

    #[test]
    fn every_short_sequence_decodes_to_a_partition() {
        for n in 1..=8usize {
            for code in 0..4usize.pow(n as u32) {
                let labels: Vec<BmesLabel> =
                    (0..n).map(|i| BmesLabel::from_index((code >> (2 * i)) & 3).unwrap()).collect();
                let spans = decode_spans(&labels);
                assert!(is_partition(&spans, n), "{labels:?} -> {spans:?}");
                assert_eq!(spans, reference_decode(&labels));
            }
        }
    }

    #[test]
    fn worked_f1_example() {
        let s = seg_f1(&[(0, 2), (2, 3)], &[(0, 1), (1, 2), (2, 3)]).unwrap();
        assert_abs_diff_eq!(s.precision, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.recall, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.f1, 0.4, epsilon = 1e-12);
        let same = seg_f1(&[(0, 2), (2, 3)], &[(0, 2), (2, 3)]).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        assert!(matches!(seg_f1(&[(0, 2)], &[(0, 3)]), Err(ProbeError::LengthMismatch { .. })));
    }

    fn labels(max: usize) -> impl Strategy<Value = Vec<BmesLabel>> {
        prop::collection::vec((0usize..4).prop_map(|i| BmesLabel::from_index(i).unwrap()), 1..=max)
    }

    proptest! {
        #[test]
        fn swapping_gold_and_pred_swaps_p_and_r((g, p) in (1usize..20).prop_flat_map(|n| (
            prop::collection::vec((0usize..4).prop_map(|i| BmesLabel::from_index(i).unwrap()), n),
            prop::collection::vec((0usize..4).prop_map(|i| BmesLabel::from_index(i).unwrap()), n),
        ))) {
            let (gs, ps) = (decode_spans(&g), decode_spans(&p));
            let a = seg_f1(&gs, &ps).unwrap();
            let b = seg_f1(&ps, &gs).unwrap();
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }

        #[test]
        fn decode_is_a_partition(l in labels(40)) {
            prop_assert!(is_partition(&decode_spans(&l), l.len()));
        }

        #[test]
        fn trading_a_wrong_span_for_a_right_one_never_lowers_f1((g, p) in (2usize..20).prop_flat_map(|n| (
            prop::collection::vec((0usize..4).prop_map(|i| BmesLabel::from_index(i).unwrap()), n),
            prop::collection::vec((0usize..4).prop_map(|i| BmesLabel::from_index(i).unwrap()), n),
        ))) {
            let (gold, pred) = (decode_spans(&g), decode_spans(&p));
            let n = g.len();
            let wrong = pred.iter().position(|s| s.1 < n && !gold.contains(s));
            let missing = gold.iter().find(|s| !pred.contains(s));
            if let (Some(w), Some(&m)) = (wrong, missing) {
                let mut better = pred.clone();
                better[w] = m;
                let before = seg_f1(&gold, &pred).unwrap();
                let after = seg_f1(&gold, &better).unwrap();
                prop_assert!(after.f1 >= before.f1);
            }
        }
    }
}
