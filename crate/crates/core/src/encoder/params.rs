use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{EncoderError, ModelConfig, Real};

/// A named tensor inside the flat parameter buffer, stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a, T>(&self, data: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a, T>(&self, data: &'a mut [T]) -> ArrayViewMut2<'a, T> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()]).expect("slot shape")
    }

    pub fn vec<'a, T>(&self, data: &'a [T]) -> ArrayView1<'a, T> {
        ArrayView1::from(&data[self.range()])
    }

    pub fn vec_mut<'a, T>(&self, data: &'a mut [T]) -> ArrayViewMut1<'a, T> {
        ArrayViewMut1::from(&mut data[self.range()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln1_gamma: Slot,
    pub ln1_beta: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
    pub ln2_gamma: Slot,
    pub ln2_beta: Slot,
}

/// Fixed parameter order: token, segment and position tables, then for
/// each layer `wq bq wk bk wv bv wo bo ln1_gamma ln1_beta w1 b1 w2 b2
/// ln2_gamma ln2_beta`, then the MLM output bias. Head `m` of `wq`/`wk`/`wv`
/// is the column block `m*d_k .. (m+1)*d_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: Slot,
    pub seg_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub mlm_bias: Slot,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> ParamLayout {
        let mut next = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { offset: next, rows, cols };
            next += rows * cols;
            s
        };
        let d = cfg.dim;
        let f = cfg.ffn_dim();
        let tok_emb = slot(cfg.vocab_size, d);
        let seg_emb = slot(2, d);
        let pos_emb = slot(cfg.max_len, d);
        let layers = (0..cfg.layers)
            .map(|_| LayerSlots {
                wq: slot(d, d),
                bq: slot(1, d),
                wk: slot(d, d),
                bk: slot(1, d),
                wv: slot(d, d),
                bv: slot(1, d),
                wo: slot(d, d),
                bo: slot(1, d),
                ln1_gamma: slot(1, d),
                ln1_beta: slot(1, d),
                w1: slot(d, f),
                b1: slot(1, f),
                w2: slot(f, d),
                b2: slot(1, d),
                ln2_gamma: slot(1, d),
                ln2_beta: slot(1, d),
            })
            .collect();
        let mlm_bias = slot(1, cfg.vocab_size);
        ParamLayout { tok_emb, seg_emb, pos_emb, layers, mlm_bias, total: next }
    }

    /// `(name, slot)` in storage order.
    pub fn entries(&self) -> Vec<(String, Slot)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb),
            ("seg_emb".to_string(), self.seg_emb),
            ("pos_emb".to_string(), self.pos_emb),
        ];
        for (l, s) in self.layers.iter().enumerate() {
            let named = [
                ("wq", s.wq),
                ("bq", s.bq),
                ("wk", s.wk),
                ("bk", s.bk),
                ("wv", s.wv),
                ("bv", s.bv),
                ("wo", s.wo),
                ("bo", s.bo),
                ("ln1_gamma", s.ln1_gamma),
                ("ln1_beta", s.ln1_beta),
                ("w1", s.w1),
                ("b1", s.b1),
                ("w2", s.w2),
                ("b2", s.b2),
                ("ln2_gamma", s.ln2_gamma),
                ("ln2_beta", s.ln2_beta),
            ];
            out.extend(named.into_iter().map(|(n, slot)| (format!("layer{}.{n}", l + 1), slot)));
        }
        out.push(("mlm_bias".to_string(), self.mlm_bias));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T: Real = f32> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
}

impl<T: Real> Encoder<T> {
    /// Weights ~ N(0, 0.02), biases 0, layer-norm gains 1; seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut fill = |slot: Slot, params: &mut [T]| {
            for p in &mut params[slot.range()] {
                *p = T::c(normal.sample(&mut rng));
            }
        };
        fill(layout.tok_emb, &mut params);
        fill(layout.seg_emb, &mut params);
        fill(layout.pos_emb, &mut params);
        for s in &layout.layers {
            for w in [s.wq, s.wk, s.wv, s.wo, s.w1, s.w2] {
                fill(w, &mut params);
            }
            for g in [s.ln1_gamma, s.ln2_gamma] {
                params[g.range()].iter_mut().for_each(|p| *p = T::one());
            }
        }
        Ok(Encoder { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self, EncoderError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(EncoderError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Encoder { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::c(p.to_f64().unwrap())).collect(),
        }
    }

    /// SHA-256 over the little-endian f64 images of the parameters.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_f64().unwrap().to_le_bytes());
        }
        hasher.finalize().iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }
}
