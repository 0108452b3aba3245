//! Linear BMES probes on frozen per-layer character representations.
//!
//! A probe is `softmax(W h + b)` with `W` of shape `4 x d`. One probe is
//! trained per layer (and optionally on the embedding output) on content
//! characters only; `[CLS]`/`[SEP]` rows are never probed. Predicted label
//! sequences are decoded to words per sentence and scored with span F1
//! pooled over the whole corpus.

mod spans;

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{derive_bmes, BmesLabel, CharVocab, SegmentedSentence};
use crate::encoder::{argmax, Adam, Encoder, EncoderError, ForwardTrace};
use crate::exec::Exec;

pub use spans::{decode_spans, seg_f1, span_counts, Prf, SpanCounts};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error("feature sets disagree: {0}")]
    ConfigMismatch(String),
    #[error("no training data")]
    EmptyData,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

const LABELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `4 x d`, rows in `B, M, E, S` order.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl ProbeModel {
    pub fn zeros(dim: usize) -> ProbeModel {
        ProbeModel { weight: Array2::zeros((LABELS, dim)), bias: Array1::zeros(LABELS) }
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    fn flat(&self) -> Vec<f32> {
        self.weight.iter().chain(self.bias.iter()).copied().collect()
    }

    fn from_flat(dim: usize, flat: &[f32]) -> ProbeModel {
        ProbeModel {
            weight: Array2::from_shape_vec((LABELS, dim), flat[..LABELS * dim].to_vec()).unwrap(),
            bias: Array1::from(flat[LABELS * dim..].to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|x| x.is_finite())
    }

    /// Label distribution for one representation.
    pub fn probabilities(&self, h: ArrayView1<'_, f32>) -> Result<[f64; LABELS], ProbeError> {
        if h.len() != self.dim() {
            return Err(ProbeError::ShapeMismatch(format!("{}-dim input for a {}-dim probe", h.len(), self.dim())));
        }
        Ok(softmax(self.logits(h)))
    }

    fn logits(&self, h: ArrayView1<'_, f32>) -> [f64; LABELS] {
        let mut z = [0.0; LABELS];
        for (k, zk) in z.iter_mut().enumerate() {
            let w = self.weight.row(k);
            *zk = self.bias[k] as f64 + w.iter().zip(h.iter()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
        }
        z
    }

    pub fn predict(&self, features: ArrayView2<'_, f32>) -> Vec<BmesLabel> {
        features.rows().into_iter().map(|h| BmesLabel::from_index(argmax(self.logits(h))).unwrap()).collect()
    }
}

fn softmax(z: [f64; LABELS]) -> [f64; LABELS] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|x| (x - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|x| x / s)
}

/// `softmax(W h + b)`.
pub fn probe_logits(h: ArrayView1<'_, f32>, model: &ProbeModel) -> Result<[f64; LABELS], ProbeError> {
    model.probabilities(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    /// Dropout rate on probe inputs during training.
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 2e-5, dropout: 0.1, epochs: 3, batch_size: 32, seed: 42 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ProbeError::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ProbeError::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ProbeError::InvalidConfig(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

/// Character representations of one layer with gold labels, grouped by
/// sentence in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub features: Array2<f32>,
    pub labels: Vec<BmesLabel>,
    /// Character count of each sentence.
    pub lengths: Vec<usize>,
}

impl ProbeData {
    pub fn new(features: Array2<f32>, labels: Vec<BmesLabel>, lengths: Vec<usize>) -> Result<ProbeData, ProbeError> {
        if features.nrows() != labels.len() {
            return Err(ProbeError::LengthMismatch { expected: features.nrows(), got: labels.len() });
        }
        let total: usize = lengths.iter().sum();
        if total != labels.len() {
            return Err(ProbeError::LengthMismatch { expected: labels.len(), got: total });
        }
        Ok(ProbeData { features, labels, lengths })
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pooled span counts of `predicted` against the gold labels.
    pub fn span_counts(&self, predicted: &[BmesLabel]) -> Result<SpanCounts, ProbeError> {
        if predicted.len() != self.labels.len() {
            return Err(ProbeError::LengthMismatch { expected: self.labels.len(), got: predicted.len() });
        }
        let mut total = SpanCounts::default();
        let mut at = 0;
        for &n in &self.lengths {
            let range = at..at + n;
            total.add(span_counts(&decode_spans(&self.labels[range.clone()]), &decode_spans(&predicted[range]))?);
            at += n;
        }
        Ok(total)
    }

    pub fn evaluate(&self, model: &ProbeModel) -> Result<Prf, ProbeError> {
        if model.dim() != self.dim() {
            return Err(ProbeError::ShapeMismatch(format!("{}-dim data for a {}-dim probe", self.dim(), model.dim())));
        }
        Ok(self.span_counts(&model.predict(self.features.view()))?.scores())
    }

    /// Scores of labelling every character `S`.
    pub fn all_single_baseline(&self) -> Prf {
        self.span_counts(&vec![BmesLabel::S; self.len()]).expect("lengths are consistent").scores()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTraining {
    pub model: ProbeModel,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
}

/// Train a probe on `train`. With `dev`, the epoch with the best dev F1 is
/// kept (earliest on ties); otherwise the final epoch.
pub fn train_probe(train: &ProbeData, dev: Option<&ProbeData>, cfg: &ProbeConfig) -> Result<ProbeTraining, ProbeError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ProbeError::EmptyData);
    }
    let d = train.dim();
    if let Some(dev) = dev {
        if dev.dim() != d {
            return Err(ProbeError::ShapeMismatch(format!("dev features are {}-dim, train {d}-dim", dev.dim())));
        }
    }
    let mut params = ProbeModel::zeros(d).flat();
    let mut adam = Adam::<f32>::new(params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let keep = 1.0 - cfg.dropout;
    let mut grads = vec![0.0f32; params.len()];
    let mut x = vec![0.0f32; d];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let model = ProbeModel::from_flat(d, &params);
            for &i in batch {
                for (xj, &hj) in x.iter_mut().zip(train.features.row(i)) {
                    *xj = if cfg.dropout > 0.0 {
                        if rng.random::<f64>() < keep {
                            hj / keep as f32
                        } else {
                            0.0
                        }
                    } else {
                        hj
                    };
                }
                let p = softmax(model.logits(ArrayView1::from(&x[..])));
                let y = train.labels[i].index();
                loss_sum -= p[y].max(f64::MIN_POSITIVE).ln();
                for (k, &pk) in p.iter().enumerate() {
                    let delta = (pk - if k == y { 1.0 } else { 0.0 }) as f32;
                    let row = &mut grads[k * d..(k + 1) * d];
                    row.iter_mut().zip(&x).for_each(|(g, &xj)| *g += delta * xj);
                    grads[LABELS * d + k] += delta;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut params, &grads);
        }
        epoch_losses.push(loss_sum / train.len() as f64);
        if let Some(dev) = dev {
            let f1 = dev.evaluate(&ProbeModel::from_flat(d, &params))?.f1;
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, params.clone()));
            }
        }
    }
    let (selected_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (cfg.epochs, params),
    };
    Ok(ProbeTraining { model: ProbeModel::from_flat(d, &params), epoch_losses, selected_epoch })
}

/// Which representation a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Embedding,
    /// 1-based layer index.
    Layer(usize),
}

/// Per-representation probe data for one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub embedding: Option<ProbeData>,
    /// `layers[l - 1]` holds layer `l`.
    pub layers: Vec<ProbeData>,
}

impl FeatureSet {
    pub fn get(&self, rep: Representation) -> Option<&ProbeData> {
        match rep {
            Representation::Embedding => self.embedding.as_ref(),
            Representation::Layer(l) => l.checked_sub(1).and_then(|i| self.layers.get(i)),
        }
    }

    fn assemble(
        n_layers: usize,
        with_embed: bool,
        dim: usize,
        rows: Vec<SentenceRows>,
    ) -> Result<FeatureSet, ProbeError> {
        let lengths: Vec<usize> = rows.iter().map(|(_, l)| l.len()).collect();
        let labels: Vec<BmesLabel> = rows.iter().flat_map(|(_, l)| l.iter().copied()).collect();
        let n = labels.len();
        let reps = n_layers + usize::from(with_embed);
        let build = |r: usize| -> Result<ProbeData, ProbeError> {
            let flat: Vec<f32> = rows.iter().flat_map(|(f, _)| f[r].iter().copied()).collect();
            let features =
                Array2::from_shape_vec((n, dim), flat).map_err(|e| ProbeError::ShapeMismatch(e.to_string()))?;
            ProbeData::new(features, labels.clone(), lengths.clone())
        };
        let mut all: Vec<ProbeData> = (0..reps).map(build).collect::<Result<_, _>>()?;
        let embedding = if with_embed { Some(all.remove(0)) } else { None };
        Ok(FeatureSet { embedding, layers: all })
    }

    /// Features from stored traces of `[CLS] sentence [SEP]`.
    pub fn from_traces(items: &[(&ForwardTrace, &SegmentedSentence)]) -> Result<FeatureSet, ProbeError> {
        let Some((first, _)) = items.first() else {
            return Err(ProbeError::EmptyData);
        };
        let (n_layers, dim) = (first.layers, first.dim);
        let with_embed = items.iter().all(|(t, _)| t.embed_out.is_some());
        let rows = items
            .iter()
            .map(|(trace, sent)| trace_rows(trace, sent, n_layers, dim, with_embed))
            .collect::<Result<_, _>>()?;
        Self::assemble(n_layers, with_embed, dim, rows)
    }

    /// Features computed by running `model` over `sentences` (split to fit
    /// the model's length limit at word boundaries).
    pub fn from_encoder(
        model: &Encoder<f32>,
        vocab: &CharVocab,
        sentences: &[SegmentedSentence],
        exec: Exec,
    ) -> Result<FeatureSet, ProbeError> {
        let max_chars = model.config().max_len - 2;
        let pieces: Vec<SegmentedSentence> = sentences.iter().flat_map(|s| s.split_to_fit(max_chars)).collect();
        if pieces.is_empty() {
            return Err(ProbeError::EmptyData);
        }
        let cfg = model.config();
        let rows = exec
            .map(&pieces, |s| {
                let trace = model.trace_sentence(vocab, s)?;
                trace_rows(&trace, s, cfg.layers, cfg.dim, true)
            })
            .into_iter()
            .collect::<Result<_, _>>()?;
        Self::assemble(cfg.layers, true, cfg.dim, rows)
    }
}

type SentenceRows = (Vec<Vec<f32>>, Vec<BmesLabel>);

/// Content-character rows of every representation of one trace.
fn trace_rows(
    trace: &ForwardTrace,
    sent: &SegmentedSentence,
    n_layers: usize,
    dim: usize,
    with_embed: bool,
) -> Result<SentenceRows, ProbeError> {
    if trace.layers != n_layers || trace.dim != dim {
        return Err(ProbeError::ConfigMismatch(format!(
            "trace with {} layers x {} dims among {n_layers} x {dim}",
            trace.layers, trace.dim
        )));
    }
    if trace.n_tokens() != sent.len() + 2 {
        return Err(ProbeError::LengthMismatch { expected: sent.len() + 2, got: trace.n_tokens() });
    }
    let content = |m: ArrayView2<'_, f32>| m.slice(ndarray::s![1..=sent.len(), ..]).iter().copied().collect();
    let mut per_rep: Vec<Vec<f32>> = Vec::with_capacity(n_layers + 1);
    if with_embed {
        let e = trace.embed_out().ok_or_else(|| ProbeError::ConfigMismatch("missing embedding output".into()))?;
        per_rep.push(content(e));
    }
    per_rep.extend((0..n_layers).map(|l| content(trace.hidden(l))));
    Ok((per_rep, derive_bmes(sent)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Test scores of layers `1..=L`.
    pub layers: Vec<Prf>,
    pub embedding: Option<Prf>,
    pub baseline_all_s: Prf,
    /// 1-based argmax of layer F1; ties go to the lowest layer.
    pub best_layer: usize,
}

impl ProbeResult {
    pub fn best(&self) -> Prf {
        self.layers[self.best_layer - 1]
    }

    /// `layer,precision,recall,f1`, then an `embed` row when present and a
    /// `baseline_all_s` footer.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "precision", "recall", "f1"])?;
        let row = |name: String, s: &Prf| {
            [name, format!("{:.6}", s.precision), format!("{:.6}", s.recall), format!("{:.6}", s.f1)]
        };
        for (l, s) in self.layers.iter().enumerate() {
            out.write_record(row((l + 1).to_string(), s))?;
        }
        if let Some(e) = &self.embedding {
            out.write_record(row("embed".into(), e))?;
        }
        out.write_record(row("baseline_all_s".into(), &self.baseline_all_s))?;
        out.flush()?;
        Ok(())
    }
}

/// Train one probe per representation on `train`, select epochs on `dev`,
/// and score on `test`. Probes are independent and run under `exec`.
pub fn layer_sweep(
    train: &FeatureSet,
    dev: &FeatureSet,
    test: &FeatureSet,
    cfg: &ProbeConfig,
    exec: Exec,
) -> Result<ProbeResult, ProbeError> {
    cfg.validate()?;
    let n_layers = train.layers.len();
    if n_layers == 0 {
        return Err(ProbeError::EmptyData);
    }
    if dev.layers.len() != n_layers || test.layers.len() != n_layers {
        return Err(ProbeError::ConfigMismatch(format!(
            "{n_layers} train layers, {} dev, {} test",
            dev.layers.len(),
            test.layers.len()
        )));
    }
    let with_embed = train.embedding.is_some() && dev.embedding.is_some() && test.embedding.is_some();
    let mut reps: Vec<Representation> = (1..=n_layers).map(Representation::Layer).collect();
    if with_embed {
        reps.push(Representation::Embedding);
    }
    let scores = exec.map(&reps, |&rep| {
        let seed_offset = match rep {
            Representation::Embedding => 0,
            Representation::Layer(l) => l as u64,
        };
        let layer_cfg = ProbeConfig { seed: cfg.seed.wrapping_add(seed_offset), ..cfg.clone() };
        let (tr, dv, te) = (train.get(rep).unwrap(), dev.get(rep).unwrap(), test.get(rep).unwrap());
        let trained = train_probe(tr, Some(dv), &layer_cfg)?;
        te.evaluate(&trained.model)
    });
    let mut scores: Vec<Prf> = scores.into_iter().collect::<Result<_, _>>()?;
    let embedding = if with_embed { scores.pop() } else { None };
    let best_layer = 1 + argmax(scores.iter().map(|s| s.f1));
    Ok(ProbeResult { layers: scores, embedding, baseline_all_s: test.layers[0].all_single_baseline(), best_layer })
}

/// Convenience sweep over a frozen encoder.
pub fn sweep_encoder(
    model: &Encoder<f32>,
    vocab: &CharVocab,
    train: &[SegmentedSentence],
    dev: &[SegmentedSentence],
    test: &[SegmentedSentence],
    cfg: &ProbeConfig,
    exec: Exec,
) -> Result<ProbeResult, ProbeError> {
    let f = |s: &[SegmentedSentence]| FeatureSet::from_encoder(model, vocab, s, exec);
    layer_sweep(&f(train)?, &f(dev)?, &f(test)?, cfg, exec)
}
