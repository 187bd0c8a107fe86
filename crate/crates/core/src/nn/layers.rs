//! Transformer building blocks with hand-written backward passes.
//!
//! Each `forward` returns a cache holding exactly what the matching
//! `backward` needs; `backward` accumulates into the parameter gradients and
//! returns the gradient w.r.t. the layer input.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::ops::{attention_backward, attention_with_probs, AttentionMask};
use crate::nn::param::{ParamTensor, Parameterized};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;
use crate::seed::Rng;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T> {
    pub wq: ParamTensor<T>,
    pub wk: ParamTensor<T>,
    pub wv: ParamTensor<T>,
    pub wo: ParamTensor<T>,
    heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<Tensor<T>>,
    concat: Tensor<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: ParamTensor::uniform(format!("{prefix}.Wq"), dim, dim, dim, rng),
            wk: ParamTensor::uniform(format!("{prefix}.Wk"), dim, dim, dim, rng),
            wv: ParamTensor::uniform(format!("{prefix}.Wv"), dim, dim, dim, rng),
            wo: ParamTensor::uniform(format!("{prefix}.Wo"), dim, dim, dim, rng),
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, x: &Tensor<T>, mask: &AttentionMask) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let dim = self.wq.value.rows();
        if x.cols() != dim {
            return Err(Error::shape("multi_head_attention", format!("input width {} != {dim}", x.cols())));
        }
        if mask.shape() != (x.rows(), x.rows()) {
            return Err(Error::shape("multi_head_attention", format!("mask {:?} for {} rows", mask.shape(), x.rows())));
        }
        let q = x.matmul(&self.wq.value);
        let k = x.matmul(&self.wk.value);
        let v = x.matmul(&self.wv.value);
        let dh = dim / self.heads;
        let mut concat = Tensor::zeros(x.rows(), dim);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (out, p) = attention_with_probs(
                &q.columns(h * dh, dh),
                &k.columns(h * dh, dh),
                &v.columns(h * dh, dh),
                mask,
            )?;
            concat.set_columns(h * dh, &out);
            probs.push(p);
        }
        let y = concat.matmul(&self.wo.value);
        Ok((y, AttentionCache { x: x.clone(), q, k, v, probs, concat }))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, d_y: &Tensor<T>) -> Tensor<T> {
        let dim = self.wq.value.rows();
        let dh = dim / self.heads;
        self.wo.grad.add_assign(&cache.concat.matmul_at(d_y));
        let d_concat = d_y.matmul_bt(&self.wo.value);
        let rows = cache.x.rows();
        let mut d_q = Tensor::zeros(rows, dim);
        let mut d_k = Tensor::zeros(rows, dim);
        let mut d_v = Tensor::zeros(rows, dim);
        for h in 0..self.heads {
            let (dq, dk, dv) = attention_backward(
                &cache.q.columns(h * dh, dh),
                &cache.k.columns(h * dh, dh),
                &cache.v.columns(h * dh, dh),
                &cache.probs[h],
                &d_concat.columns(h * dh, dh),
            );
            d_q.set_columns(h * dh, &dq);
            d_k.set_columns(h * dh, &dk);
            d_v.set_columns(h * dh, &dv);
        }
        self.wq.grad.add_assign(&cache.x.matmul_at(&d_q));
        self.wk.grad.add_assign(&cache.x.matmul_at(&d_k));
        self.wv.grad.add_assign(&cache.x.matmul_at(&d_v));
        let mut d_x = d_q.matmul_bt(&self.wq.value);
        d_x.add_assign(&d_k.matmul_bt(&self.wk.value));
        d_x.add_assign(&d_v.matmul_bt(&self.wv.value));
        d_x
    }
}

impl<T: Scalar> Parameterized<T> for MultiHeadAttention<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward<T> {
    pub w1: ParamTensor<T>,
    pub b1: ParamTensor<T>,
    pub w2: ParamTensor<T>,
    pub b2: ParamTensor<T>,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(prefix: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w1: ParamTensor::uniform(format!("{prefix}.W1"), dim, hidden, dim, rng),
            b1: ParamTensor::zeros(format!("{prefix}.b1"), 1, hidden),
            w2: ParamTensor::uniform(format!("{prefix}.W2"), hidden, dim, hidden, rng),
            b2: ParamTensor::zeros(format!("{prefix}.b2"), 1, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FeedForwardCache<T>)> {
        if x.cols() != self.w1.value.rows() {
            return Err(Error::shape(
                "feed_forward",
                format!("input width {} != {}", x.cols(), self.w1.value.rows()),
            ));
        }
        let mut pre = x.matmul(&self.w1.value);
        pre.add_row_broadcast(&self.b1.value);
        let act = pre.map(|v| v.max(T::zero()));
        let mut y = act.matmul(&self.w2.value);
        y.add_row_broadcast(&self.b2.value);
        Ok((y, FeedForwardCache { x: x.clone(), pre, act }))
    }

    pub fn backward(&mut self, cache: &FeedForwardCache<T>, d_y: &Tensor<T>) -> Tensor<T> {
        self.w2.grad.add_assign(&cache.act.matmul_at(d_y));
        self.b2.grad.add_assign(&d_y.sum_rows());
        let mut d_pre = d_y.matmul_bt(&self.w2.value);
        for (d, &p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
        self.w1.grad.add_assign(&cache.x.matmul_at(&d_pre));
        self.b1.grad.add_assign(&d_pre.sum_rows());
        d_pre.matmul_bt(&self.w1.value)
    }
}

impl<T: Scalar> Parameterized<T> for FeedForward<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: ParamTensor<T>,
    pub beta: ParamTensor<T>,
    eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: ParamTensor::ones(format!("{prefix}.gamma"), 1, dim),
            beta: ParamTensor::zeros(format!("{prefix}.beta"), 1, dim),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        let n = T::of(x.cols() as f64);
        let eps = T::of(self.eps);
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            rstd.push(s);
        }
        let mut y = xhat.clone();
        let g = self.gamma.value.row(0);
        let b = self.beta.value.row(0);
        for r in 0..y.rows() {
            for ((v, &gi), &bi) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, d_y: &Tensor<T>) -> Tensor<T> {
        let cols = d_y.cols();
        let n = T::of(cols as f64);
        let mut d_x = Tensor::zeros(d_y.rows(), cols);
        for r in 0..d_y.rows() {
            let dy = d_y.row(r);
            let xh = cache.xhat.row(r);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            let mut dxh = vec![T::zero(); cols];
            for c in 0..cols {
                self.gamma.grad.data_mut()[c] += dy[c] * xh[c];
                self.beta.grad.data_mut()[c] += dy[c];
                dxh[c] = dy[c] * self.gamma.value.data()[c];
                sum_dxh += dxh[c];
                sum_dxh_xh += dxh[c] * xh[c];
            }
            let s = cache.rstd[r] / n;
            for (c, out) in d_x.row_mut(r).iter_mut().enumerate() {
                *out = s * (n * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh);
            }
        }
        d_x
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 - rate)`.
/// Returns `None` when dropout is inactive.
pub fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, rng: Option<&mut Rng>) -> Option<Tensor<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::from_vec(rows, cols, data).ok()
}

pub(crate) fn apply_mask<T: Scalar>(x: &mut Tensor<T>, mask: Option<&Tensor<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.data_mut().iter_mut().zip(m.data()) {
            *v *= k;
        }
    }
}

/// Post-norm encoder block: `norm1(x + attn(x))` then `norm2(h + ffn(h))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock<T> {
    pub attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub norm2: LayerNorm<T>,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    attn: AttentionCache<T>,
    drop1: Option<Tensor<T>>,
    norm1: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
    drop2: Option<Tensor<T>>,
    norm2: LayerNormCache<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(prefix: &str, dim: usize, heads: usize, ffn_dim: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), dim),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dim, ffn_dim, rng),
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), dim),
            dropout,
        })
    }

    /// `rng = None` runs in evaluation mode (no dropout).
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mask: &AttentionMask,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (mut a, attn) = self.attn.forward(x, mask)?;
        let drop1 = dropout_mask(a.rows(), a.cols(), self.dropout, rng.as_deref_mut());
        apply_mask(&mut a, drop1.as_ref());
        a.add_assign(x);
        let (h, norm1) = self.norm1.forward(&a);
        let (mut f, ffn) = self.ffn.forward(&h)?;
        let drop2 = dropout_mask(f.rows(), f.cols(), self.dropout, rng);
        apply_mask(&mut f, drop2.as_ref());
        f.add_assign(&h);
        let (y, norm2) = self.norm2.forward(&f);
        Ok((y, BlockCache { attn, drop1, norm1, ffn, drop2, norm2 }))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, d_y: &Tensor<T>) -> Tensor<T> {
        let d_s2 = self.norm2.backward(&cache.norm2, d_y);
        let mut d_f = d_s2.clone();
        apply_mask(&mut d_f, cache.drop2.as_ref());
        let mut d_h = self.ffn.backward(&cache.ffn, &d_f);
        d_h.add_assign(&d_s2);
        let d_s1 = self.norm1.backward(&cache.norm1, &d_h);
        let mut d_a = d_s1.clone();
        apply_mask(&mut d_a, cache.drop1.as_ref());
        let mut d_x = self.attn.backward(&cache.attn, &d_a);
        d_x.add_assign(&d_s1);
        d_x
    }
}

impl<T: Scalar> Parameterized<T> for EncoderBlock<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut v = self.attn.params();
        v.extend(self.norm1.params());
        v.extend(self.ffn.params());
        v.extend(self.norm2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut v = self.attn.params_mut();
        v.extend(self.norm1.params_mut());
        v.extend(self.ffn.params_mut());
        v.extend(self.norm2.params_mut());
        v
    }
}
