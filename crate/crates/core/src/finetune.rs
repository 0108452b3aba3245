//! Fine-tuning the whole encoder on a downstream task, then re-probing.
//!
//! A task head is a linear map `d -> K` applied to every content token
//! (tagging) or to the `[CLS]` output (sentence and sentence-pair
//! classification). All encoder parameters are trained together with the
//! head; the base model is never modified.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::{derive_bmes, BmesLabel, CharVocab, SegmentedSentence};
use crate::encoder::{argmax, batch_gradient, clip_grad_norm, warmup_lr, Adam, Encoder, EncoderError};
use crate::exec::Exec;
use crate::probe::{layer_sweep, FeatureSet, ProbeConfig, ProbeError, ProbeResult};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("label {label} out of range for {count} labels")]
    LabelOutOfRange { label: usize, count: usize },
    #[error("example kind does not match a {0:?} task")]
    WrongExampleKind(TaskKind),
    #[error("task has no examples")]
    EmptyTask,
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("models disagree: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    TokenTagging,
    SentenceClassification,
    SentencePairClassification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub labels: Vec<String>,
}

impl TaskSpec {
    /// Per-character BMES tagging of gold segmentations.
    pub fn bmes_tagging(name: &str) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::TokenTagging,
            labels: BmesLabel::ALL.iter().map(|l| l.as_char().to_string()).collect(),
        }
    }

    fn validate(&self) -> Result<(), FinetuneError> {
        if self.labels.is_empty() {
            return Err(FinetuneError::InvalidTask("empty label set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskExample {
    /// One tag per character.
    Tagging {
        sentence: SegmentedSentence,
        tags: Vec<usize>,
    },
    Single {
        sentence: SegmentedSentence,
        label: usize,
    },
    Pair {
        first: SegmentedSentence,
        second: SegmentedSentence,
        label: usize,
    },
}

impl TaskExample {
    /// Tags are the BMES indices of the gold segmentation.
    pub fn bmes(sentence: SegmentedSentence) -> TaskExample {
        let tags = derive_bmes(&sentence).iter().map(|l| l.index()).collect();
        TaskExample::Tagging { sentence, tags }
    }

    fn kind(&self) -> TaskKind {
        match self {
            TaskExample::Tagging { .. } => TaskKind::TokenTagging,
            TaskExample::Single { .. } => TaskKind::SentenceClassification,
            TaskExample::Pair { .. } => TaskKind::SentencePairClassification,
        }
    }
}

/// Linear task head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    /// `K x d`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl TaskHead {
    pub fn new(labels: usize, dim: usize, seed: u64) -> TaskHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        TaskHead {
            weight: Array2::from_shape_fn((labels, dim), |_| normal.sample(&mut rng)),
            bias: Array1::zeros(labels),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn flat(&self) -> Vec<f32> {
        self.weight.iter().chain(self.bias.iter()).copied().collect()
    }

    fn from_flat(labels: usize, dim: usize, flat: &[f32]) -> TaskHead {
        TaskHead {
            weight: Array2::from_shape_vec((labels, dim), flat[..labels * dim].to_vec()).unwrap(),
            bias: Array1::from(flat[labels * dim..].to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        FinetuneHyper { lr: 2e-5, epochs: 3, batch_size: 32, seed: 42, warmup_steps: 0, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub model: Encoder<f32>,
    pub head: TaskHead,
    /// Mean task cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Encoded input: ids, segments and the rows the head reads with their labels.
struct Encoded {
    ids: Vec<u32>,
    segs: Vec<u32>,
    rows: Vec<usize>,
    labels: Vec<usize>,
}

fn truncate(s: &SegmentedSentence, max_chars: usize) -> SegmentedSentence {
    if s.len() <= max_chars {
        return s.clone();
    }
    let chars = s.chars()[..max_chars].to_vec();
    SegmentedSentence::new(chars.clone(), vec![(0, chars.len())]).expect("non-empty prefix")
}

/// Tagging sentences are split at word boundaries to fit `max_len`;
/// classification inputs are truncated.
fn encode_examples(
    vocab: &CharVocab,
    task: &TaskSpec,
    examples: &[TaskExample],
    max_len: usize,
) -> Result<Vec<Encoded>, FinetuneError> {
    let k = task.labels.len();
    let check = |l: usize| if l < k { Ok(l) } else { Err(FinetuneError::LabelOutOfRange { label: l, count: k }) };
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.kind() != task.kind {
            return Err(FinetuneError::WrongExampleKind(task.kind));
        }
        match ex {
            TaskExample::Tagging { sentence, tags } => {
                if tags.len() != sentence.len() {
                    return Err(FinetuneError::InvalidTask(format!(
                        "{} tags for {} characters",
                        tags.len(),
                        sentence.len()
                    )));
                }
                let mut at = 0;
                for piece in sentence.split_to_fit(max_len - 2) {
                    let ids = vocab.encode(&piece);
                    let labels = tags[at..at + piece.len()].iter().map(|&t| check(t)).collect::<Result<_, _>>()?;
                    at += piece.len();
                    out.push(Encoded { segs: vec![0; ids.len()], ids, rows: (1..=piece.len()).collect(), labels });
                }
            }
            TaskExample::Single { sentence, label } => {
                let ids = vocab.encode(&truncate(sentence, max_len - 2));
                out.push(Encoded { segs: vec![0; ids.len()], ids, rows: vec![0], labels: vec![check(*label)?] });
            }
            TaskExample::Pair { first, second, label } => {
                let room = max_len - 3;
                let a_len = first.len().min(room.saturating_sub(second.len().min(room / 2)).max(1));
                let b_len = second.len().min(room - a_len);
                let (a, b) = (truncate(first, a_len), truncate(second, b_len.max(1)));
                let (ids, segs) = vocab.encode_pair(&a, &b);
                if ids.len() > max_len {
                    return Err(FinetuneError::InvalidTask("pair does not fit the model".into()));
                }
                out.push(Encoded { ids, segs, rows: vec![0], labels: vec![check(*label)?] });
            }
        }
    }
    Ok(out)
}

fn log_softmax_rows(z: &mut Array2<f32>) {
    for mut row in z.rows_mut() {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f32>().ln();
        row.mapv_inplace(|x| x - lse);
    }
}

/// Loss sum of one example; gradients of that sum go into `grads`
/// (encoder parameters first, then the head).
fn example_grad(
    model: &Encoder<f32>,
    head: &TaskHead,
    ex: &Encoded,
    rng: Option<&mut ChaCha8Rng>,
    grads: &mut [f32],
) -> Result<f64, EncoderError> {
    let cache = match rng {
        Some(r) => model.forward_train(&ex.ids, &ex.segs, r)?,
        None => model.forward(&ex.ids, &ex.segs)?,
    };
    let out = cache.output();
    let h = out.select(Axis(0), &ex.rows);
    let mut logp = h.dot(&head.weight.t()) + &head.bias;
    log_softmax_rows(&mut logp);
    let mut delta = logp.mapv(f32::exp);
    let mut loss = 0.0;
    for (r, &y) in ex.labels.iter().enumerate() {
        loss -= logp[[r, y]] as f64;
        delta[[r, y]] -= 1.0;
    }
    let (enc, hd) = grads.split_at_mut(model.param_count());
    let (k, d) = head.weight.dim();
    let mut gw = ndarray::ArrayViewMut2::from_shape((k, d), &mut hd[..k * d]).unwrap();
    gw.scaled_add(1.0, &delta.t().dot(&h));
    let mut gb = ndarray::ArrayViewMut1::from(&mut hd[k * d..]);
    gb.scaled_add(1.0, &delta.sum_axis(Axis(0)));
    let dh = delta.dot(&head.weight);
    let mut d_out = Array2::zeros(out.dim());
    for (row, &p) in dh.rows().into_iter().zip(&ex.rows) {
        d_out.row_mut(p).assign(&row);
    }
    model.backward(&cache, d_out, enc);
    Ok(loss)
}

/// Train a copy of `base` plus a fresh head on `examples`.
pub fn finetune(
    base: &Encoder<f32>,
    vocab: &CharVocab,
    task: &TaskSpec,
    examples: &[TaskExample],
    hyper: &FinetuneHyper,
    exec: Exec,
) -> Result<Finetuned, FinetuneError> {
    task.validate()?;
    if examples.is_empty() {
        return Err(FinetuneError::EmptyTask);
    }
    if hyper.batch_size == 0 {
        return Err(FinetuneError::InvalidTask("batch size must be positive".into()));
    }
    let cfg = base.config().clone();
    let data = encode_examples(vocab, task, examples, cfg.max_len)?;
    let mut model = base.clone();
    let mut head = TaskHead::new(task.labels.len(), cfg.dim, hyper.seed ^ 0x6865_6164);
    let n_enc = model.param_count();
    let total = n_enc + head.len();
    let mut params: Vec<f32> = model.params().iter().copied().chain(head.flat()).collect();
    let mut adam = Adam::<f32>::new(total, hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let use_dropout = cfg.dropout > 0.0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for batch in order.chunks(hyper.batch_size) {
            let items: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.random())).collect();
            let (m, h) = (&model, &head);
            let (mut grads, loss, count) = batch_gradient(exec, &items, total, |&(i, seed), g| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let dropout = if use_dropout { Some(&mut r) } else { None };
                let l = example_grad(m, h, &data[i], dropout, g)?;
                Ok((l, data[i].labels.len()))
            })?;
            let inv = 1.0 / count as f32;
            grads.iter_mut().for_each(|g| *g *= inv);
            if let Some(c) = hyper.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            adam.lr = warmup_lr(hyper.lr, adam.steps() as usize + 1, hyper.warmup_steps);
            adam.step(&mut params, &grads);
            model.params_mut().copy_from_slice(&params[..n_enc]);
            head = TaskHead::from_flat(task.labels.len(), cfg.dim, &params[n_enc..]);
            loss_sum += loss;
            loss_count += count;
        }
        epoch_losses.push(loss_sum / loss_count as f64);
    }
    Ok(Finetuned { model, head, epoch_losses })
}

/// Label accuracy (per token for tagging, per example otherwise).
pub fn task_accuracy(
    model: &Encoder<f32>,
    head: &TaskHead,
    vocab: &CharVocab,
    task: &TaskSpec,
    examples: &[TaskExample],
) -> Result<f64, FinetuneError> {
    let data = encode_examples(vocab, task, examples, model.config().max_len)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in &data {
        let cache = model.forward(&ex.ids, &ex.segs)?;
        let h = cache.output().select(Axis(0), &ex.rows);
        let logits = h.dot(&head.weight.t()) + &head.bias;
        for (row, &y) in logits.rows().into_iter().zip(&ex.labels) {
            hit += usize::from(argmax(row.iter().copied()) == y);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Probe corpora sharing one segmentation standard.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub name: String,
    pub train: Vec<SegmentedSentence>,
    pub dev: Vec<SegmentedSentence>,
    pub test: Vec<SegmentedSentence>,
}

/// Probe results of one model on every dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelProbe {
    pub name: String,
    pub results: Vec<ProbeResult>,
}

impl ModelProbe {
    /// Best-layer test F1 on dataset `i`.
    pub fn f1(&self, i: usize) -> f64 {
        self.results[i].best().f1
    }
}

/// Run the same probe protocol on `model` for every dataset.
pub fn probe_model(
    name: &str,
    model: &Encoder<f32>,
    vocab: &CharVocab,
    datasets: &[ProbeDataset],
    cfg: &ProbeConfig,
    exec: Exec,
) -> Result<ModelProbe, FinetuneError> {
    let mut results = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let f = |s: &[SegmentedSentence]| FeatureSet::from_encoder(model, vocab, s, exec);
        results.push(layer_sweep(&f(&ds.train)?, &f(&ds.dev)?, &f(&ds.test)?, cfg, exec)?);
    }
    Ok(ModelProbe { name: name.into(), results })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Improved,
    Unchanged,
    Degraded,
}

impl Direction {
    pub fn of(delta: f64) -> Direction {
        if delta.abs() < 1e-12 {
            Direction::Unchanged
        } else if delta > 0.0 {
            Direction::Improved
        } else {
            Direction::Degraded
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Improved => "improved",
            Direction::Unchanged => "unchanged",
            Direction::Degraded => "degraded",
        }
    }
}

/// Probe F1 of fine-tuned models relative to their base.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaReport {
    pub datasets: Vec<String>,
    pub base: ModelProbe,
    pub tuned: Vec<ModelProbe>,
}

impl DeltaReport {
    pub fn new(datasets: Vec<String>, base: ModelProbe, tuned: Vec<ModelProbe>) -> Result<DeltaReport, FinetuneError> {
        for m in std::iter::once(&base).chain(&tuned) {
            if m.results.len() != datasets.len() {
                return Err(FinetuneError::ConfigMismatch(format!(
                    "{} has {} results for {} datasets",
                    m.name,
                    m.results.len(),
                    datasets.len()
                )));
            }
        }
        Ok(DeltaReport { datasets, base, tuned })
    }

    /// F1 change of tuned model `t` on dataset `i`, as a fraction.
    pub fn delta(&self, t: usize, i: usize) -> f64 {
        self.tuned[t].f1(i) - self.base.f1(i)
    }

    pub fn average_delta(&self, t: usize) -> f64 {
        let n = self.datasets.len().max(1) as f64;
        (0..self.datasets.len()).map(|i| self.delta(t, i)).sum::<f64>() / n
    }

    pub fn direction(&self, t: usize) -> Direction {
        Direction::of(self.average_delta(t))
    }

    /// `model,<dataset F1 in points>...,delta_avg,direction`; the base row
    /// leaves the last two columns empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["model".to_string()];
        header.extend(self.datasets.iter().cloned());
        header.extend(["delta_avg".to_string(), "direction".to_string()]);
        out.write_record(&header)?;
        let pts = |x: f64| format!("{:.2}", 100.0 * x);
        let mut base = vec![self.base.name.clone()];
        base.extend((0..self.datasets.len()).map(|i| pts(self.base.f1(i))));
        base.extend([String::new(), String::new()]);
        out.write_record(&base)?;
        for (t, m) in self.tuned.iter().enumerate() {
            let mut row = vec![m.name.clone()];
            row.extend((0..self.datasets.len()).map(|i| pts(m.f1(i))));
            let avg = self.average_delta(t);
            row.push(format!("{:+.2}", 100.0 * avg));
            row.push(Direction::of(avg).as_str().into());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// `model,dataset,layer,f1` for every model, dataset and layer.
    pub fn write_layer_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model", "dataset", "layer", "f1"])?;
        for m in std::iter::once(&self.base).chain(&self.tuned) {
            for (name, r) in self.datasets.iter().zip(&m.results) {
                for (l, s) in r.layers.iter().enumerate() {
                    out.write_record([m.name.clone(), name.clone(), (l + 1).to_string(), format!("{:.6}", s.f1)])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Probe `base` and every tuned model with one protocol and report deltas.
pub fn probe_after_finetune(
    base: (&str, &Encoder<f32>),
    tuned: &[(&str, &Encoder<f32>)],
    vocab: &CharVocab,
    datasets: &[ProbeDataset],
    cfg: &ProbeConfig,
    exec: Exec,
) -> Result<DeltaReport, FinetuneError> {
    for (name, m) in tuned {
        if !m.config().same_shape(base.1.config()) {
            return Err(FinetuneError::ConfigMismatch(format!("{name} differs in shape from {}", base.0)));
        }
    }
    let base_probe = probe_model(base.0, base.1, vocab, datasets, cfg, exec)?;
    let tuned_probes = tuned
        .iter()
        .map(|(name, m)| probe_model(name, m, vocab, datasets, cfg, exec))
        .collect::<Result<Vec<_>, _>>()?;
    DeltaReport::new(datasets.iter().map(|d| d.name.clone()).collect(), base_probe, tuned_probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Granularity, SyntheticLanguage, SyntheticParams};
    use crate::encoder::ModelConfig;

    fn setup() -> (Encoder<f32>, CharVocab, SyntheticLanguage) {
        let lang = SyntheticLanguage::new(SyntheticParams::default());
        let vocab = CharVocab::build(&lang.sample(200, Granularity::Fine, 0), 1).unwrap();
        let cfg =
            ModelConfig { layers: 2, heads: 2, dim: 16, vocab_size: vocab.size(), max_len: 32, dropout: 0.1, seed: 3 };
        (Encoder::new(cfg).unwrap(), vocab, lang)
    }

    #[test]
    fn zero_epochs_returns_the_base_model() {
        let (base, vocab, lang) = setup();
        let ex: Vec<_> = lang.sample(5, Granularity::Fine, 1).into_iter().map(TaskExample::bmes).collect();
        let hyper = FinetuneHyper { epochs: 0, ..Default::default() };
        let out = finetune(&base, &vocab, &TaskSpec::bmes_tagging("tag"), &ex, &hyper, Exec::Sequential).unwrap();
        assert_eq!(out.model.params(), base.params());
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn tagging_beats_all_single_and_leaves_base_intact() {
        let (base, vocab, lang) = setup();
        let before = base.checksum();
        let ex: Vec<_> = lang.sample(300, Granularity::Fine, 2).into_iter().map(TaskExample::bmes).collect();
        let task = TaskSpec::bmes_tagging("tag");
        let hyper = FinetuneHyper { lr: 1e-3, epochs: 3, ..Default::default() };
        let out = finetune(&base, &vocab, &task, &ex, &hyper, Exec::Parallel).unwrap();
        assert_eq!(base.checksum(), before);
        assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0], "{:?}", out.epoch_losses);
        let held: Vec<_> = lang.sample(100, Granularity::Fine, 3).into_iter().map(TaskExample::bmes).collect();
        let acc = task_accuracy(&out.model, &out.head, &vocab, &task, &held).unwrap();
        let s_share = held
            .iter()
            .map(|e| match e {
                TaskExample::Tagging { tags, .. } => tags.iter().filter(|&&t| t == BmesLabel::S.index()).count(),
                _ => 0,
            })
            .sum::<usize>() as f64
            / held
                .iter()
                .map(|e| match e {
                    TaskExample::Tagging { tags, .. } => tags.len(),
                    _ => 0,
                })
                .sum::<usize>() as f64;
        assert!(acc > s_share, "{acc} vs {s_share}");
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let (base, vocab, lang) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let make = |n, seed, rng: &mut ChaCha8Rng| -> Vec<TaskExample> {
            lang.sample(n, Granularity::Fine, seed)
                .into_iter()
                .map(|s| TaskExample::Single { sentence: s, label: rng.random_range(0..2) })
                .collect()
        };
        let train = make(200, 5, &mut rng);
        let held = make(300, 6, &mut rng);
        let task = TaskSpec {
            name: "noise".into(),
            kind: TaskKind::SentenceClassification,
            labels: vec!["a".into(), "b".into()],
        };
        let hyper = FinetuneHyper { lr: 1e-3, epochs: 2, ..Default::default() };
        let out = finetune(&base, &vocab, &task, &train, &hyper, Exec::Sequential).unwrap();
        let acc = task_accuracy(&out.model, &out.head, &vocab, &task, &held).unwrap();
        assert!((acc - 0.5).abs() <= 0.10, "{acc}");
    }

    #[test]
    fn pair_inputs_and_label_checks() {
        let (base, vocab, lang) = setup();
        let s = lang.sample(4, Granularity::Fine, 7);
        let pair = vec![TaskExample::Pair { first: s[0].clone(), second: s[1].clone(), label: 1 }];
        let task = TaskSpec {
            name: "pair".into(),
            kind: TaskKind::SentencePairClassification,
            labels: vec!["x".into(), "y".into()],
        };
        let hyper = FinetuneHyper { epochs: 1, ..Default::default() };
        assert!(finetune(&base, &vocab, &task, &pair, &hyper, Exec::Sequential).is_ok());
        let bad = vec![TaskExample::Pair { first: s[0].clone(), second: s[1].clone(), label: 2 }];
        assert!(matches!(
            finetune(&base, &vocab, &task, &bad, &hyper, Exec::Sequential),
            Err(FinetuneError::LabelOutOfRange { label: 2, count: 2 })
        ));
        let wrong = vec![TaskExample::bmes(s[2].clone())];
        assert!(matches!(
            finetune(&base, &vocab, &task, &wrong, &hyper, Exec::Sequential),
            Err(FinetuneError::WrongExampleKind(_))
        ));
        let empty = TaskSpec { labels: vec![], ..task };
        assert!(finetune(&base, &vocab, &empty, &pair, &hyper, Exec::Sequential).is_err());
    }

    #[test]
    fn base_against_itself_has_zero_deltas() {
        let (base, vocab, lang) = setup();
        let ds = vec![ProbeDataset {
            name: "fine".into(),
            train: lang.sample(40, Granularity::Fine, 8),
            dev: lang.sample(10, Granularity::Fine, 9),
            test: lang.sample(10, Granularity::Fine, 10),
        }];
        let cfg = ProbeConfig { lr: 1e-3, ..Default::default() };
        let r = probe_after_finetune(("base", &base), &[("same", &base)], &vocab, &ds, &cfg, Exec::Parallel).unwrap();
        assert_eq!(r.delta(0, 0), 0.0);
        assert_eq!(r.direction(0), Direction::Unchanged);
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model,fine,delta_avg,direction");
        assert!(lines[2].ends_with(",+0.00,unchanged"));
        let mut out = Vec::new();
        r.write_layer_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1 + 2 * 2);

        let other = Encoder::new(ModelConfig { layers: 3, ..base.config().clone() }).unwrap();
        assert!(matches!(
            probe_after_finetune(("base", &base), &[("x", &other)], &vocab, &ds, &cfg, Exec::Sequential),
            Err(FinetuneError::ConfigMismatch(_))
        ));
    }
}
