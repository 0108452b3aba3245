use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{clip_grad_norm, Adam};
use super::{Encoder, EncoderError, ModelConfig, Real};
use crate::corpus::{CharVocab, SegmentedSentence, CLS_ID, MASK_ID, PAD_ID, RESERVED, SEP_ID};
use crate::exec::Exec;

/// A corrupted input sequence with the positions to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input_ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub original_ids: Vec<u32>,
}

/// Select each non-special position with probability `mask_ratio` (at least
/// one per sequence). Selected positions become `[MASK]` 80% of the time, a
/// random character id 10%, and stay unchanged 10%.
pub fn mask_sequence<R: Rng>(ids: &[u32], vocab_size: usize, mask_ratio: f64, rng: &mut R) -> MaskedSequence {
    let maskable: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != CLS_ID && id != SEP_ID && id != PAD_ID)
        .map(|(i, _)| i)
        .collect();
    let mut positions: Vec<usize> = maskable.iter().copied().filter(|_| rng.random::<f64>() < mask_ratio).collect();
    if positions.is_empty() && !maskable.is_empty() {
        positions.push(maskable[rng.random_range(0..maskable.len())]);
    }
    let mut input_ids = ids.to_vec();
    let original_ids = positions.iter().map(|&p| ids[p]).collect();
    let first_char = RESERVED.len() as u32;
    for &p in &positions {
        let r: f64 = rng.random();
        if r < 0.8 {
            input_ids[p] = MASK_ID;
        } else if r < 0.9 {
            input_ids[p] =
                if vocab_size as u32 > first_char { rng.random_range(first_char..vocab_size as u32) } else { MASK_ID };
        }
    }
    MaskedSequence { input_ids, positions, original_ids }
}

pub fn mask_batch<R: Rng>(
    sentences: &[SegmentedSentence],
    vocab: &CharVocab,
    mask_ratio: f64,
    rng: &mut R,
) -> Vec<MaskedSequence> {
    sentences.iter().map(|s| mask_sequence(&vocab.encode(s), vocab.size(), mask_ratio, rng)).collect()
}

fn gather_rows<T: Real>(h: ArrayView2<'_, T>, positions: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((positions.len(), h.ncols()));
    for (mut row, &p) in out.rows_mut().into_iter().zip(positions) {
        row.assign(&h.row(p));
    }
    out
}

/// `log softmax` of each row.
fn log_softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

impl<T: Real> Encoder<T> {
    /// MLM logits `h E^T + b` for the rows of `hidden` at `positions`; the
    /// output projection is tied to the token embedding table.
    pub fn mlm_logits(&self, hidden: ArrayView2<'_, T>, positions: &[usize]) -> Array2<T> {
        let l = self.layout();
        let h = gather_rows(hidden, positions);
        h.dot(&l.tok_emb.mat(self.params()).t()) + l.mlm_bias.vec(self.params())
    }

    fn check_targets(&self, n: usize, positions: &[usize], original_ids: &[u32]) -> Result<(), EncoderError> {
        if positions.is_empty() {
            return Err(EncoderError::NoMaskedPositions);
        }
        if positions.len() != original_ids.len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "{} positions but {} original ids",
                positions.len(),
                original_ids.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= n) {
            return Err(EncoderError::ShapeMismatch(format!("masked position {p} outside sequence of {n}")));
        }
        let v = self.config().vocab_size;
        if let Some(&id) = original_ids.iter().find(|&&id| id as usize >= v) {
            return Err(EncoderError::IdOutOfRange { id, limit: v });
        }
        Ok(())
    }

    /// Mean negative log-likelihood of the original ids at the masked
    /// positions, in evaluation mode with segment ids 0.
    pub fn mlm_loss(
        &self,
        token_ids: &[u32],
        masked_positions: &[usize],
        original_ids: &[u32],
    ) -> Result<T, EncoderError> {
        self.check_targets(token_ids.len(), masked_positions, original_ids)?;
        let cache = self.forward(token_ids, &vec![0; token_ids.len()])?;
        let logp = log_softmax_rows(&self.mlm_logits(cache.output().view(), masked_positions));
        let nll: T = original_ids.iter().enumerate().map(|(r, &id)| -logp[[r, id as usize]]).sum();
        Ok(nll / T::c(masked_positions.len() as f64))
    }

    /// Sum of MLM negative log-likelihoods for one sequence; gradients of
    /// that sum are added into `grads`. Dropout is applied when `rng` is given.
    pub fn mlm_sentence_grad(
        &self,
        masked: &MaskedSequence,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut [T],
    ) -> Result<T, EncoderError> {
        let ids = &masked.input_ids;
        self.check_targets(ids.len(), &masked.positions, &masked.original_ids)?;
        let segs = vec![0; ids.len()];
        let cache = match rng {
            Some(r) => self.forward_train(ids, &segs, r)?,
            None => self.forward(ids, &segs)?,
        };
        let positions = &masked.positions;
        let h = gather_rows(cache.output().view(), positions);
        let logits = self.mlm_logits(cache.output().view(), positions);
        let logp = log_softmax_rows(&logits);
        let mut dlogits = logp.mapv(|x| x.exp());
        let mut loss = T::zero();
        for (r, &id) in masked.original_ids.iter().enumerate() {
            loss += -logp[[r, id as usize]];
            dlogits[[r, id as usize]] -= T::one();
        }
        let l = self.layout();
        l.tok_emb.mat_mut(grads).scaled_add(T::one(), &dlogits.t().dot(&h));
        l.mlm_bias.vec_mut(grads).scaled_add(T::one(), &dlogits.sum_axis(Axis(0)));
        let dh = dlogits.dot(&l.tok_emb.mat(self.params()));
        let mut d_out = Array2::zeros(cache.output().dim());
        for (row, &p) in dh.rows().into_iter().zip(positions) {
            d_out.row_mut(p).scaled_add(T::one(), &row);
        }
        self.backward(&cache, d_out, grads);
        Ok(loss)
    }

    /// Argmax prediction at each masked position (evaluation mode).
    pub fn predict_masked(&self, token_ids: &[u32], positions: &[usize]) -> Result<Vec<u32>, EncoderError> {
        let cache = self.forward(token_ids, &vec![0; token_ids.len()])?;
        let logits = self.mlm_logits(cache.output().view(), positions);
        Ok(logits.rows().into_iter().map(|row| argmax(row.iter().copied()) as u32).collect())
    }
}

pub(crate) fn argmax<T: PartialOrd>(it: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in it.into_iter().enumerate() {
        match &best {
            // first maximum wins; NaN never replaces a value
            Some((_, b)) if x.partial_cmp(b) != Some(std::cmp::Ordering::Greater) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Items per gradient accumulation group. Fixed so that the summation order
/// does not depend on how many workers run.
const GRAD_GROUP: usize = 4;

/// Sum per-item gradients of a batch. `f` adds one item's gradient into the
/// buffer and returns `(loss_sum, target_count)`.
pub(crate) fn batch_gradient<T, I, F>(
    exec: Exec,
    items: &[I],
    len: usize,
    f: F,
) -> Result<(Vec<T>, f64, usize), EncoderError>
where
    T: Real,
    I: Sync,
    F: Fn(&I, &mut [T]) -> Result<(f64, usize), EncoderError> + Sync + Send,
{
    let groups: Vec<&[I]> = items.chunks(GRAD_GROUP).collect();
    let partial = exec.map(&groups, |group| {
        let mut g = vec![T::zero(); len];
        let mut loss = 0.0;
        let mut count = 0;
        for item in group.iter() {
            let (l, c) = f(item, &mut g)?;
            loss += l;
            count += c;
        }
        Ok::<_, EncoderError>((g, loss, count))
    });
    let mut total = vec![T::zero(); len];
    let mut loss = 0.0;
    let mut count = 0;
    for p in partial {
        let (g, l, c) = p?;
        total.iter_mut().zip(&g).for_each(|(t, &x)| *t += x);
        loss += l;
        count += c;
    }
    Ok((total, loss, count))
}

#[derive(Debug, Clone)]
pub struct MlmHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
}

impl Default for MlmHyper {
    fn default() -> Self {
        MlmHyper { lr: 1e-3, epochs: 5, batch_size: 32, mask_ratio: 0.15, warmup_steps: 50, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct MlmTraining {
    pub model: Encoder<f32>,
    /// Mean masked-token NLL per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Learning rate at optimizer step `step` (1-based) with linear warmup.
pub(crate) fn warmup_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

/// Train a fresh encoder on `corpus` with the MLM objective. Sentences
/// longer than `max_len - 2` characters are split at word boundaries.
pub fn train_mlm(
    corpus: &[SegmentedSentence],
    vocab: &CharVocab,
    config: ModelConfig,
    hyper: &MlmHyper,
    exec: Exec,
) -> Result<MlmTraining, EncoderError> {
    if corpus.is_empty() {
        return Err(EncoderError::EmptyCorpus);
    }
    if config.vocab_size != vocab.size() {
        return Err(EncoderError::InvalidConfig(format!(
            "vocab_size {} but vocabulary has {} ids",
            config.vocab_size,
            vocab.size()
        )));
    }
    if hyper.batch_size == 0 || !(hyper.mask_ratio > 0.0 && hyper.mask_ratio < 1.0) {
        return Err(EncoderError::InvalidConfig("batch_size must be positive and mask_ratio in (0,1)".into()));
    }
    let max_chars = config.max_len - 2;
    let sequences: Vec<Vec<u32>> =
        corpus.iter().flat_map(|s| s.split_to_fit(max_chars)).map(|s| vocab.encode(&s)).collect();

    let mut model = Encoder::<f32>::new(config)?;
    let n_params = model.param_count();
    let mut adam = Adam::<f32>::new(n_params, hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(model.config().seed ^ 0x6d6c_6d5f_7472_6169);
    let vocab_size = model.config().vocab_size;
    let use_dropout = model.config().dropout > 0.0;
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(hyper.batch_size) {
            let items: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.random())).collect();
            let current = &model;
            let (mut grads, loss, count) = batch_gradient(exec, &items, n_params, |&(i, seed), g| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let masked = mask_sequence(&sequences[i], vocab_size, hyper.mask_ratio, &mut r);
                let dropout = if use_dropout { Some(&mut r) } else { None };
                let l = current.mlm_sentence_grad(&masked, dropout, g)?;
                Ok((l as f64, masked.positions.len()))
            })?;
            let inv = 1.0 / count as f32;
            grads.iter_mut().for_each(|g| *g *= inv);
            if let Some(c) = hyper.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            adam.lr = warmup_lr(hyper.lr, adam.steps() as usize + 1, hyper.warmup_steps);
            adam.step(model.params_mut(), &grads);
            loss_sum += loss;
            loss_count += count;
        }
        epoch_losses.push(loss_sum / loss_count as f64);
    }
    Ok(MlmTraining { model, epoch_losses })
}

/// Fraction of masked positions predicted exactly, over `sentences`.
pub fn masked_accuracy(
    model: &Encoder<f32>,
    vocab: &CharVocab,
    sentences: &[SegmentedSentence],
    mask_ratio: f64,
    seed: u64,
) -> Result<f64, EncoderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    let max_chars = model.config().max_len - 2;
    for s in sentences.iter().flat_map(|s| s.split_to_fit(max_chars)) {
        let masked = mask_sequence(&vocab.encode(&s), vocab.size(), mask_ratio, &mut rng);
        let pred = model.predict_masked(&masked.input_ids, &masked.positions)?;
        hit += pred.iter().zip(&masked.original_ids).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}
