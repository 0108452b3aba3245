use super::*;
use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sentence(lengths: &[usize]) -> SegmentedSentence {
    let mut c = 0u32;
    let words: Vec<String> = lengths
        .iter()
        .map(|&len| {
            (0..len)
                .map(|_| {
                    c += 1;
                    char::from_u32(0x4e00 + c).unwrap()
                })
                .collect()
        })
        .collect();
    SegmentedSentence::from_words(&words).unwrap()
}

fn random_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3) + 1e-6).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|x| (x / s) as f32));
    }
    out
}

fn random_trace(sent: &SegmentedSentence, layers: usize, heads: usize, seed: u64) -> ForwardTrace {
    let n = sent.len() + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attention = Vec::new();
    for _ in 0..layers * heads {
        attention.extend(random_rows(n, &mut rng));
    }
    ForwardTrace::new(vec![0; n], layers, heads, 1, attention, vec![0.0; layers * n], None).unwrap()
}

/// Brute-force reference: every (source, target) pair is classified from
/// word membership alone.
fn oracle(alpha: &Array2<f32>, lengths: &[usize]) -> PatternSums {
    let mut word = Vec::new();
    for (w, &len) in lengths.iter().enumerate() {
        word.extend(std::iter::repeat_n(w, len));
    }
    let n = word.len();
    let first = |i: usize| i == 0 || word[i - 1] != word[i];
    let last = |i: usize| i + 1 == n || word[i + 1] != word[i];
    let a = |i: usize, j: usize| alpha[[i + 1, j + 1]] as f64;
    let mut s = PatternSums::default();
    for i in 0..n {
        s.add(PatternKind::ToCls, alpha[[i + 1, 0]] as f64);
        s.add(PatternKind::ToSep, alpha[[i + 1, n + 1]] as f64);
        for j in 0..n {
            if j == i {
                s.add(PatternKind::Curr, a(i, j));
            }
            if j == i + 1 {
                s.add(PatternKind::Next, a(i, j));
            }
            if j + 1 == i {
                s.add(PatternKind::Prev, a(i, j));
            }
            if i != j && word[i] == word[j] && first(i) && last(j) {
                s.add(PatternKind::FirstToLast, a(i, j));
            }
            if i != j && word[i] == word[j] && last(i) && first(j) {
                s.add(PatternKind::LastToFirst, a(i, j));
            }
            if first(i) && first(j) && word[j] == word[i] + 1 {
                s.add(PatternKind::FirstToNextFirst, a(i, j));
            }
            if last(i) && last(j) && word[j] + 1 == word[i] {
                s.add(PatternKind::LastToPrevLast, a(i, j));
            }
        }
        for k in -WINDOW..=WINDOW {
            let target = word[i] as i64 + k as i64;
            if target < 0 || target >= lengths.len() as i64 {
                continue;
            }
            let target = target as usize;
            let mut total = 0.0;
            for (j, &w) in word.iter().enumerate() {
                if w == target {
                    total += a(i, j) / lengths[target] as f64;
                }
            }
            s.add(PatternKind::WordOffset(k), total);
        }
    }
    s
}

fn assert_close(a: &PatternSums, b: &PatternSums, tol: f64) {
    for kind in PatternKind::all() {
        let (x, y) = (a.get(kind), b.get(kind));
        assert_eq!(x.count, y.count, "{kind} count");
        assert!((x.sum - y.sum).abs() <= tol, "{kind}: {} vs {}", x.sum, y.sum);
    }
}

#[test]
fn pattern_indices_round_trip() {
    for (i, kind) in PatternKind::all().enumerate() {
        assert_eq!(kind.index(), i);
        assert_eq!(PatternKind::from_index(i), Some(kind));
    }
    assert_eq!(PatternKind::from_index(PATTERN_COUNT), None);
    assert_eq!(PatternKind::WordOffset(-5).to_string(), "word-5");
    assert_eq!(PatternKind::WordOffset(0).to_string(), "word+0");
}

#[test]
fn hand_computed_example() {
    // [CLS] a b | c [SEP]
    let sent = sentence(&[2, 1]);
    let alpha = array![
        [1.0f32, 0.0, 0.0, 0.0, 0.0],
        [0.1, 0.2, 0.3, 0.3, 0.1],
        [0.0, 0.5, 0.25, 0.125, 0.125],
        [0.2, 0.2, 0.2, 0.2, 0.2],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ];
    let layout = TokenLayout::single(3);
    let s = head_stats(alpha.view(), &sent, &layout).unwrap();
    assert_abs_diff_eq!(s.mean(PatternKind::Curr).unwrap(), (0.2 + 0.25 + 0.2) / 3.0, epsilon = 1e-7);
    assert_abs_diff_eq!(s.mean(PatternKind::Next).unwrap(), (0.3 + 0.125) / 2.0, epsilon = 1e-7);
    assert_abs_diff_eq!(s.mean(PatternKind::Prev).unwrap(), (0.5 + 0.2) / 2.0, epsilon = 1e-7);
    assert_abs_diff_eq!(s.mean(PatternKind::ToCls).unwrap(), 0.3 / 3.0, epsilon = 1e-7);
    assert_abs_diff_eq!(s.mean(PatternKind::FirstToLast).unwrap(), 0.3, epsilon = 1e-7);
    assert_abs_diff_eq!(s.mean(PatternKind::LastToFirst).unwrap(), 0.5, epsilon = 1e-7);
    assert_abs_diff_eq!(s.mean(PatternKind::FirstToNextFirst).unwrap(), 0.3, epsilon = 1e-7);
    assert_abs_diff_eq!(s.mean(PatternKind::LastToPrevLast).unwrap(), 0.2, epsilon = 1e-7);
    // own word: a -> (0.2+0.3)/2, b -> (0.5+0.25)/2, c -> 0.2
    assert_abs_diff_eq!(s.mean(PatternKind::WordOffset(0)).unwrap(), (0.25 + 0.375 + 0.2) / 3.0, epsilon = 1e-7);
    // a, b -> c; c -> (a+b)/2
    assert_eq!(s.get(PatternKind::WordOffset(1)).count, 2);
    assert_eq!(s.get(PatternKind::WordOffset(-1)).count, 1);
    assert_abs_diff_eq!(s.mean(PatternKind::WordOffset(-1)).unwrap(), 0.2, epsilon = 1e-7);
    assert_eq!(s.get(PatternKind::WordOffset(2)).count, 0);
}

#[test]
fn single_character_words_have_no_intra_word_pairs() {
    let sent = sentence(&[1, 1, 1]);
    let trace = random_trace(&sent, 1, 1, 0);
    let s = head_stats(trace.attention(0, 0), &sent, &TokenLayout::single(3)).unwrap();
    assert_eq!(s.get(PatternKind::FirstToLast).count, 0);
    assert_eq!(s.mean(PatternKind::LastToFirst), None);
    assert_eq!(s.get(PatternKind::FirstToNextFirst).count, 2);
}

#[test]
fn uniform_attention_gives_one_over_n_everywhere() {
    for lengths in [vec![1], vec![2, 3], vec![4, 1, 1, 2, 3, 1, 1]] {
        let sent = sentence(&lengths);
        let n = sent.len() + 2;
        let alpha = Array2::from_elem((n, n), 1.0 / n as f32);
        let s = head_stats(alpha.view(), &sent, &TokenLayout::single(sent.len())).unwrap();
        for kind in PatternKind::all() {
            if let Some(m) = s.mean(kind) {
                assert_abs_diff_eq!(m, 1.0 / n as f64, epsilon = 1e-6);
            }
        }
    }
}

#[test]
fn shape_errors() {
    let sent = sentence(&[2]);
    let alpha = Array2::<f32>::zeros((3, 3));
    assert!(matches!(
        specific_char_stats(alpha.view(), &sent, &TokenLayout::single(2)),
        Err(StatsError::ShapeMismatch(_))
    ));
    let trace = random_trace(&sent, 2, 2, 0);
    let other = sentence(&[1]);
    assert!(HeadStatTable::from_trace(&trace, &other).is_err());
}

#[test]
fn mismatched_traces_are_rejected() {
    let sent = sentence(&[2, 1]);
    let a = random_trace(&sent, 2, 2, 0);
    let b = random_trace(&sent, 2, 3, 1);
    let items = vec![(&a, &sent), (&b, &sent)];
    assert!(matches!(aggregate(2, 2, &items, Exec::Sequential), Err(StatsError::ConfigMismatch { .. })));
}

#[test]
fn empty_stream_has_zero_counts() {
    let table = aggregate_stream::<_, StatsError>(2, 3, std::iter::empty()).unwrap();
    assert!(table.is_empty());
    assert_eq!(table.count(1, 2, PatternKind::Curr), 0);
    assert_eq!(table.mean(1, 2, PatternKind::Curr), None);
    assert!(matches!(best_heads(&table), Err(StatsError::EmptyTable)));
    let mut out = Vec::new();
    table.write_csv(&mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().contains("1,1,curr,,0"));
}

fn corpus(n: usize, seed: u64) -> (Vec<SegmentedSentence>, Vec<ForwardTrace>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sents: Vec<SegmentedSentence> = (0..n)
        .map(|_| {
            let words = rng.random_range(1..12);
            let lengths: Vec<usize> = (0..words).map(|_| rng.random_range(1..=4)).collect();
            sentence(&lengths)
        })
        .collect();
    let traces = sents.iter().enumerate().map(|(i, s)| random_trace(s, 2, 3, seed * 1000 + i as u64)).collect();
    (sents, traces)
}

#[test]
fn parallel_stream_and_sequential_agree_bitwise() {
    let (sents, traces) = corpus(40, 5);
    let items: Vec<_> = traces.iter().zip(&sents).collect();
    let seq = aggregate(2, 3, &items, Exec::Sequential).unwrap();
    let par = aggregate(2, 3, &items, Exec::Parallel).unwrap();
    let stream =
        aggregate_stream::<_, StatsError>(2, 3, traces.iter().cloned().zip(sents.iter().cloned()).map(Ok)).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq, stream);
}

#[test]
fn best_heads_ties_go_to_lowest_head() {
    let sent = sentence(&[2, 2]);
    let n = 6;
    let uniform = vec![1.0 / n as f32; n * n];
    let mut attention = uniform.clone();
    attention.extend(&uniform);
    let trace = ForwardTrace::new(vec![0; n], 1, 2, 1, attention, vec![0.0; n], None).unwrap();
    let table = HeadStatTable::from_trace(&trace, &sent).unwrap();
    let report = best_heads(&table).unwrap();
    assert_eq!(report.best(0, PatternKind::Curr).unwrap().head, 0);
    assert_eq!(report.global[PatternKind::Curr.index()].unwrap().1, 0);
}

#[test]
fn best_head_csv_marks_the_global_maximum() {
    let (sents, traces) = corpus(10, 9);
    let items: Vec<_> = traces.iter().zip(&sents).collect();
    let table = aggregate(2, 3, &items, Exec::Sequential).unwrap();
    let report = best_heads(&table).unwrap();
    for kind in PatternKind::all() {
        let (gl, gh, gv) = report.global[kind.index()].unwrap();
        for l in 0..2 {
            for m in 0..3 {
                assert!(table.mean(l, m, kind).unwrap() <= gv);
            }
        }
        assert_eq!(table.mean(gl, gh, kind), Some(gv));
    }
    let mut out = Vec::new();
    report.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layer,Curr,Next,Prev,CLS,SEP,F->L,L->F,F->F1,L->L-1");
    assert_eq!(lines.len(), 3);
    assert_eq!(text.matches('*').count(), 9);

    let curve = window_curve(&table).unwrap();
    assert_eq!(curve.len(), 11);
    let mut out = Vec::new();
    write_window_csv(&curve, &mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().starts_with("offset,layer,head,mean_pct\n-5,"));
}

#[test]
fn matrix_export_round_trips() {
    let sent = sentence(&[2, 1, 3]);
    let trace = random_trace(&sent, 2, 2, 3);
    let mut tokens = vec!["[CLS]".to_string()];
    tokens.extend(sent.chars().iter().map(|c| c.to_string()));
    tokens.push("[SEP]".into());
    let m = export_matrix(&trace, 1, 0, &sent, tokens.clone()).unwrap();
    assert_eq!(m.boundaries, vec![1, 3, 4]);
    let mut out = Vec::new();
    m.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out.clone()).unwrap();
    assert!(text.contains("# boundaries: 1,3,4\n"));
    let back = AttentionMatrix::read_csv(&out[..]).unwrap();
    assert_eq!(back, m);
    let svg = render_svg(&m, 20);
    assert!(svg.starts_with("<svg") && svg.contains("stroke=\"red\""));
    assert!(matches!(export_matrix(&trace, 2, 0, &sent, tokens), Err(StatsError::IndexOutOfRange(_))));
}

fn lengths_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..14)
}

proptest! {
    #[test]
    fn matches_brute_force_oracle(lengths in lengths_strategy(), seed in any::<u64>()) {
        let sent = sentence(&lengths);
        let trace = random_trace(&sent, 1, 1, seed);
        let alpha = trace.attention(0, 0).to_owned();
        let got = head_stats(alpha.view(), &sent, &TokenLayout::single(sent.len())).unwrap();
        assert_close(&got, &oracle(&alpha, &lengths), 1e-9);
    }

    #[test]
    fn counts_follow_from_segmentation(lengths in lengths_strategy()) {
        let sent = sentence(&lengths);
        let trace = random_trace(&sent, 1, 1, 0);
        let s = head_stats(trace.attention(0, 0), &sent, &TokenLayout::single(sent.len())).unwrap();
        let n = sent.len() as u64;
        let w = lengths.len() as u64;
        let multi = lengths.iter().filter(|&&l| l >= 2).count() as u64;
        prop_assert_eq!(s.get(PatternKind::Curr).count, n);
        prop_assert_eq!(s.get(PatternKind::Next).count, n - 1);
        prop_assert_eq!(s.get(PatternKind::Prev).count, n - 1);
        prop_assert_eq!(s.get(PatternKind::FirstToLast).count, multi);
        prop_assert_eq!(s.get(PatternKind::FirstToNextFirst).count, w - 1);
        prop_assert_eq!(s.get(PatternKind::LastToPrevLast).count, w - 1);
        prop_assert_eq!(s.get(PatternKind::WordOffset(0)).count, n);
        for kind in PatternKind::all() {
            if let Some(m) = s.mean(kind) {
                prop_assert!((0.0..=1.0 + 1e-6).contains(&m));
            }
        }
    }

    #[test]
    fn aggregate_is_order_invariant(seed in 0u64..1000, rot in 0usize..20) {
        let (sents, traces) = corpus(20, seed);
        let items: Vec<_> = traces.iter().zip(&sents).collect();
        let mut rotated = items.clone();
        rotated.rotate_left(rot);
        let a = aggregate(2, 3, &items, Exec::Sequential).unwrap();
        let b = aggregate(2, 3, &rotated, Exec::Sequential).unwrap();
        for l in 0..2 {
            for m in 0..3 {
                assert_close(a.cell(l, m), b.cell(l, m), 1e-9);
            }
        }
    }
}
