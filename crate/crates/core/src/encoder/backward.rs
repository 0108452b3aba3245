use ndarray::{s, Array2, ArrayView1, Axis};

use super::forward::{gelu_grad, ForwardCache, LnCache};
use super::{Encoder, Real, Slot};

/// Backward through `y = xhat * gamma + beta`; accumulates gamma/beta
/// gradients and returns the gradient w.r.t. the normalized input.
fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    gamma: ArrayView1<'_, T>,
    slots: (Slot, Slot),
    grads: &mut [T],
) -> Array2<T> {
    slots.0.vec_mut(grads).scaled_add(T::one(), &(dy * &cache.xhat).sum_axis(Axis(0)));
    slots.1.vec_mut(grads).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
    let d = T::c(dy.ncols() as f64);
    let mut dx = dy * &gamma;
    for ((mut row, xhat), &rstd) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean = row.sum() / d;
        let mean_x = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        for (v, &xh) in row.iter_mut().zip(xhat.iter()) {
            *v = rstd * (*v - mean - xh * mean_x);
        }
    }
    dx
}

impl<T: Real> Encoder<T> {
    /// Backpropagate `d_out` (gradient w.r.t. the final hidden states) through
    /// the cached forward pass, adding parameter gradients into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: Array2<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.param_count(), "gradient buffer size");
        assert_eq!(d_out.dim(), cache.output.dim(), "d_out shape");
        let cfg = self.config();
        let params = self.params();
        let dk = cfg.head_dim();
        let scale = T::one() / T::c(dk as f64).sqrt();

        let mut dx = d_out;
        for (lc, s) in cache.layers.iter().zip(&self.layout().layers).rev() {
            let dr2 = layer_norm_backward(&dx, &lc.ln2, s.ln2_gamma.vec(params), (s.ln2_gamma, s.ln2_beta), grads);
            let mut df2 = dr2.clone();
            if let Some(m) = &lc.mask2 {
                df2 *= m;
            }
            s.w2.mat_mut(grads).scaled_add(T::one(), &lc.g.t().dot(&df2));
            s.b2.vec_mut(grads).scaled_add(T::one(), &df2.sum_axis(Axis(0)));
            let mut df1 = df2.dot(&s.w2.mat(params).t());
            df1.zip_mut_with(&lc.f1, |g, &x| *g *= gelu_grad(x));
            s.w1.mat_mut(grads).scaled_add(T::one(), &lc.y.t().dot(&df1));
            s.b1.vec_mut(grads).scaled_add(T::one(), &df1.sum_axis(Axis(0)));
            let dy = dr2 + df1.dot(&s.w1.mat(params).t());

            let dr1 = layer_norm_backward(&dy, &lc.ln1, s.ln1_gamma.vec(params), (s.ln1_gamma, s.ln1_beta), grads);
            let mut d_o = dr1.clone();
            if let Some(m) = &lc.mask1 {
                d_o *= m;
            }
            s.wo.mat_mut(grads).scaled_add(T::one(), &lc.ctx.t().dot(&d_o));
            s.bo.vec_mut(grads).scaled_add(T::one(), &d_o.sum_axis(Axis(0)));
            let dctx = d_o.dot(&s.wo.mat(params).t());

            let mut dq = Array2::zeros(lc.q.dim());
            let mut dkk = Array2::zeros(lc.k.dim());
            let mut dv = Array2::zeros(lc.v.dim());
            for (m, a) in lc.attn.iter().enumerate() {
                let cols = s![.., m * dk..(m + 1) * dk];
                let dc = dctx.slice(cols);
                dv.slice_mut(cols).assign(&a.t().dot(&dc));
                let da = dc.dot(&lc.v.slice(cols).t());
                let rowdot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (da - &rowdot) * a * scale;
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dkk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let xt = lc.input.t();
            s.wq.mat_mut(grads).scaled_add(T::one(), &xt.dot(&dq));
            s.bq.vec_mut(grads).scaled_add(T::one(), &dq.sum_axis(Axis(0)));
            s.wk.mat_mut(grads).scaled_add(T::one(), &xt.dot(&dkk));
            s.bk.vec_mut(grads).scaled_add(T::one(), &dkk.sum_axis(Axis(0)));
            s.wv.mat_mut(grads).scaled_add(T::one(), &xt.dot(&dv));
            s.bv.vec_mut(grads).scaled_add(T::one(), &dv.sum_axis(Axis(0)));

            dx = dr1 + dq.dot(&s.wq.mat(params).t()) + dkk.dot(&s.wk.mat(params).t()) + dv.dot(&s.wv.mat(params).t());
        }

        if let Some(m) = &cache.mask0 {
            dx *= m;
        }
        let layout = self.layout();
        for (i, row) in dx.rows().into_iter().enumerate() {
            let t = cache.token_ids[i] as usize;
            let sg = cache.segment_ids[i] as usize;
            let mut tok = layout.tok_emb.mat_mut(grads);
            tok.row_mut(t).scaled_add(T::one(), &row);
            let mut seg = layout.seg_emb.mat_mut(grads);
            seg.row_mut(sg).scaled_add(T::one(), &row);
            let mut pos = layout.pos_emb.mat_mut(grads);
            pos.row_mut(i).scaled_add(T::one(), &row);
        }
    }
}
