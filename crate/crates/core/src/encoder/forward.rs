use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Encoder, EncoderError, Real};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Borrowed views of the three embedding tables.
pub struct EmbeddingTables<'a, T> {
    pub token: ArrayView2<'a, T>,
    pub segment: ArrayView2<'a, T>,
    pub position: ArrayView2<'a, T>,
}

/// Row `i` is `token[ids[i]] + segment[segs[i]] + position[i]`.
pub fn embed<T: Real>(
    token_ids: &[u32],
    segment_ids: &[u32],
    tables: &EmbeddingTables<'_, T>,
) -> Result<Array2<T>, EncoderError> {
    let n = token_ids.len();
    if segment_ids.len() != n {
        return Err(EncoderError::ShapeMismatch(format!("{n} token ids but {} segment ids", segment_ids.len())));
    }
    if n > tables.position.nrows() {
        return Err(EncoderError::SequenceTooLong { len: n, max: tables.position.nrows() });
    }
    let d = tables.token.ncols();
    if tables.segment.ncols() != d || tables.position.ncols() != d {
        return Err(EncoderError::ShapeMismatch("embedding tables differ in width".into()));
    }
    let mut out = Array2::zeros((n, d));
    for (i, (&t, &sg)) in token_ids.iter().zip(segment_ids).enumerate() {
        if t as usize >= tables.token.nrows() {
            return Err(EncoderError::IdOutOfRange { id: t, limit: tables.token.nrows() });
        }
        if sg as usize >= tables.segment.nrows() {
            return Err(EncoderError::IdOutOfRange { id: sg, limit: tables.segment.nrows() });
        }
        let mut row = out.row_mut(i);
        row.assign(&tables.token.row(t as usize));
        row += &tables.segment.row(sg as usize);
        row += &tables.position.row(i);
    }
    Ok(out)
}

pub(crate) fn softmax_rows<T: Real>(a: &mut Array2<T>) {
    for mut row in a.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Scaled dot-product attention for one head: `alpha = softmax(Q K^T / sqrt(d_k))`,
/// `H = alpha V`.
pub fn attention_head<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array2<T>), EncoderError> {
    let dk = q.ncols();
    if dk == 0 || k.ncols() != dk || k.nrows() != v.nrows() {
        return Err(EncoderError::ShapeMismatch(format!("Q {:?}, K {:?}, V {:?}", q.dim(), k.dim(), v.dim())));
    }
    let scale = T::one() / T::c(dk as f64).sqrt();
    let mut alpha = q.dot(&k.t()) * scale;
    softmax_rows(&mut alpha);
    let h = alpha.dot(&v);
    Ok((alpha, h))
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::c(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::c(3.0 * 0.044715) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Real>(
    x: &Array2<T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> (Array2<T>, LnCache<T>) {
    let d = T::c(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + T::c(LN_EPS)).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &gamma + beta;
    (y, LnCache { xhat, rstd })
}

fn dropout_mask<T: Real>(shape: (usize, usize), p: f32, rng: &mut ChaCha8Rng) -> Array2<T> {
    let keep = 1.0 - p;
    let scale = T::c(1.0 / keep as f64);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f32>() < keep { scale } else { T::zero() })
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub input: Array2<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub attn: Vec<Array2<T>>,
    pub ctx: Array2<T>,
    pub mask1: Option<Array2<T>>,
    pub ln1: LnCache<T>,
    pub y: Array2<T>,
    pub f1: Array2<T>,
    pub g: Array2<T>,
    pub mask2: Option<Array2<T>>,
    pub ln2: LnCache<T>,
}

/// Every intermediate of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(crate) token_ids: Vec<u32>,
    pub(crate) segment_ids: Vec<u32>,
    pub(crate) mask0: Option<Array2<T>>,
    pub(crate) embed: Array2<T>,
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) output: Array2<T>,
}

impl<T: Real> ForwardCache<T> {
    /// `e_i` before dropout.
    pub fn embed_out(&self) -> &Array2<T> {
        &self.embed
    }

    /// Output of layer `layer` (0-based).
    pub fn hidden(&self, layer: usize) -> &Array2<T> {
        self.layers.get(layer + 1).map(|c| &c.input).unwrap_or(&self.output)
    }

    /// Final-layer hidden states `h^L`.
    pub fn output(&self) -> &Array2<T> {
        &self.output
    }

    pub fn attention(&self, layer: usize, head: usize) -> &Array2<T> {
        &self.layers[layer].attn[head]
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

impl<T: Real> Encoder<T> {
    pub fn embedding_tables(&self) -> EmbeddingTables<'_, T> {
        let l = self.layout();
        EmbeddingTables {
            token: l.tok_emb.mat(self.params()),
            segment: l.seg_emb.mat(self.params()),
            position: l.pos_emb.mat(self.params()),
        }
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, token_ids: &[u32], segment_ids: &[u32]) -> Result<ForwardCache<T>, EncoderError> {
        self.forward_impl(token_ids, segment_ids, None)
    }

    /// Training-mode forward pass; dropout masks are drawn from `rng`.
    pub fn forward_train(
        &self,
        token_ids: &[u32],
        segment_ids: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardCache<T>, EncoderError> {
        self.forward_impl(token_ids, segment_ids, Some(rng))
    }

    fn forward_impl(
        &self,
        token_ids: &[u32],
        segment_ids: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache<T>, EncoderError> {
        let cfg = self.config();
        let p = cfg.dropout;
        let mut mask = |shape: (usize, usize)| -> Option<Array2<T>> {
            match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(dropout_mask(shape, p, r)),
                _ => None,
            }
        };
        let params = self.params();
        let embed = embed(token_ids, segment_ids, &self.embedding_tables())?;
        let n = embed.nrows();
        let d = cfg.dim;
        let dk = cfg.head_dim();
        let scale = T::one() / T::c(dk as f64).sqrt();

        let mask0 = mask((n, d));
        let mut x = match &mask0 {
            Some(m) => &embed * m,
            None => embed.clone(),
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for s in &self.layout().layers {
            let q = x.dot(&s.wq.mat(params)) + s.bq.vec(params);
            let k = x.dot(&s.wk.mat(params)) + s.bk.vec(params);
            let v = x.dot(&s.wv.mat(params)) + s.bv.vec(params);
            let mut ctx = Array2::zeros((n, d));
            let mut attn = Vec::with_capacity(cfg.heads);
            for m in 0..cfg.heads {
                let cols = s![.., m * dk..(m + 1) * dk];
                let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut a);
                ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
                attn.push(a);
            }
            let mut o = ctx.dot(&s.wo.mat(params)) + s.bo.vec(params);
            let mask1 = mask((n, d));
            if let Some(m) = &mask1 {
                o *= m;
            }
            let r1 = &x + &o;
            let (y, ln1) = layer_norm(&r1, s.ln1_gamma.vec(params), s.ln1_beta.vec(params));
            let f1 = y.dot(&s.w1.mat(params)) + s.b1.vec(params);
            let g = f1.mapv(gelu);
            let mut f2 = g.dot(&s.w2.mat(params)) + s.b2.vec(params);
            let mask2 = mask((n, d));
            if let Some(m) = &mask2 {
                f2 *= m;
            }
            let r2 = &y + &f2;
            let (out, ln2) = layer_norm(&r2, s.ln2_gamma.vec(params), s.ln2_beta.vec(params));
            let input = std::mem::replace(&mut x, out);
            layers.push(LayerCache { input, q, k, v, attn, ctx, mask1, ln1, y, f1, g, mask2, ln2 });
        }
        Ok(ForwardCache {
            token_ids: token_ids.to_vec(),
            segment_ids: segment_ids.to_vec(),
            mask0,
            embed,
            layers,
            output: x,
        })
    }

    /// Evaluation-mode forward pass packaged for analysis.
    pub fn trace(&self, token_ids: &[u32], segment_ids: &[u32]) -> Result<ForwardTrace, EncoderError> {
        let cache = self.forward(token_ids, segment_ids)?;
        Ok(ForwardTrace::from_cache(&cache))
    }

    /// Trace of `[CLS] sentence [SEP]` with all segment ids 0.
    pub fn trace_sentence(
        &self,
        vocab: &crate::corpus::CharVocab,
        sent: &crate::corpus::SegmentedSentence,
    ) -> Result<ForwardTrace, EncoderError> {
        let ids = vocab.encode(sent);
        let segs = vec![0; ids.len()];
        self.trace(&ids, &segs)
    }
}

/// Attention and hidden states of one sequence, stored row-major in `f32`:
/// `attention` is `L x M x n x n`, `hidden` is `L x n x d` (outputs of
/// layers 1..=L), `embed_out` is `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub token_ids: Vec<u32>,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub attention: Vec<f32>,
    pub hidden: Vec<f32>,
    pub embed_out: Option<Vec<f32>>,
}

impl ForwardTrace {
    pub fn new(
        token_ids: Vec<u32>,
        layers: usize,
        heads: usize,
        dim: usize,
        attention: Vec<f32>,
        hidden: Vec<f32>,
        embed_out: Option<Vec<f32>>,
    ) -> Result<ForwardTrace, EncoderError> {
        let n = token_ids.len();
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(EncoderError::ShapeMismatch(format!("{what}: {got} values, expected {want}")))
            }
        };
        check("attention", attention.len(), layers * heads * n * n)?;
        check("hidden", hidden.len(), layers * n * dim)?;
        if let Some(e) = &embed_out {
            check("embed_out", e.len(), n * dim)?;
        }
        Ok(ForwardTrace { token_ids, layers, heads, dim, attention, hidden, embed_out })
    }

    fn from_cache<T: Real>(cache: &ForwardCache<T>) -> ForwardTrace {
        let f = |x: &T| x.to_f32().unwrap();
        let layers = cache.layers.len();
        let heads = cache.layers.first().map_or(0, |c| c.attn.len());
        let dim = cache.embed.ncols();
        let mut attention = Vec::new();
        let mut hidden = Vec::new();
        for l in 0..layers {
            for a in &cache.layers[l].attn {
                attention.extend(a.iter().map(f));
            }
            hidden.extend(cache.hidden(l).iter().map(f));
        }
        ForwardTrace {
            token_ids: cache.token_ids.clone(),
            layers,
            heads,
            dim,
            attention,
            hidden,
            embed_out: Some(cache.embed.iter().map(f).collect()),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    /// Attention matrix of `head` in `layer` (both 0-based).
    pub fn attention(&self, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        let n = self.n_tokens();
        let start = (layer * self.heads + head) * n * n;
        ArrayView2::from_shape((n, n), &self.attention[start..start + n * n]).expect("trace shape")
    }

    /// Output of `layer` (0-based).
    pub fn hidden(&self, layer: usize) -> ArrayView2<'_, f32> {
        let n = self.n_tokens();
        let start = layer * n * self.dim;
        ArrayView2::from_shape((n, self.dim), &self.hidden[start..start + n * self.dim]).expect("trace shape")
    }

    pub fn embed_out(&self) -> Option<ArrayView2<'_, f32>> {
        self.embed_out.as_ref().map(|e| ArrayView2::from_shape((self.n_tokens(), self.dim), e).expect("trace shape"))
    }

    /// Largest `|sum_j alpha[i][j] - 1|` over every row of every head.
    pub fn max_row_deviation(&self) -> f32 {
        let n = self.n_tokens().max(1);
        self.attention
            .chunks(n)
            .map(|row| (row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() as f32)
            .fold(0.0, f32::max)
    }

    /// Rows are probability vectors within `tol` and hidden states are finite.
    pub fn satisfies_invariants(&self, tol: f32) -> bool {
        self.attention.iter().all(|&a| a >= 0.0 && a.is_finite())
            && self.max_row_deviation() <= tol
            && self.hidden.iter().all(|h| h.is_finite())
    }

    pub fn same_dims(&self, other: &ForwardTrace) -> bool {
        self.layers == other.layers && self.heads == other.heads && self.dim == other.dim
    }
}
