//! Stateless primitives: row softmax, masked scaled-dot attention and the
//! two losses used by the models.

use crate::error::{Error, Result};
use crate::nn::tensor::{dot, Tensor};
use crate::scalar::Scalar;

/// Bias added to disallowed attention scores before the softmax.
pub const MASK_BIAS: f64 = -1e9;

/// Which key positions each query may attend to (`[query rows, key rows]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every query sees every key.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![true; rows * cols] }
    }

    /// Query `t` sees keys `0..=t`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for t in 0..n {
            for k in 0..=t {
                allowed[t * n + k] = true;
            }
        }
        Self { rows: n, cols: n, allowed }
    }

    /// Bidirectional attention that hides keys whose `key_valid` flag is false.
    pub fn key_padding(rows: usize, key_valid: &[bool]) -> Self {
        let cols = key_valid.len();
        let mut allowed = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            allowed.extend_from_slice(key_valid);
        }
        Self { rows, cols, allowed }
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.cols + key]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

fn check_finite<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<()> {
    if let Some(pos) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(
            op,
            format!("non-finite value at row {} col {}", pos / x.cols().max(1), pos % x.cols().max(1)),
        ));
    }
    Ok(())
}

/// Max-subtracted softmax applied to each row independently.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(x, "softmax_rows")?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `softmax(q·kᵀ / sqrt(d_keys) + mask_bias) · v`
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    check_attention_shapes(q, k, v, mask)?;
    Ok(attention_with_probs(q, k, v, mask)?.0)
}

pub(crate) fn check_attention_shapes<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("query width {} != key width {}", q.cols(), k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("{} keys but {} values", k.rows(), v.rows()),
        ));
    }
    if mask.shape() != (q.rows(), k.rows()) {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("mask {:?} for {} queries x {} keys", mask.shape(), q.rows(), k.rows()),
        ));
    }
    Ok(())
}

/// Forward pass that also returns the attention weights for backprop.
pub(crate) fn attention_with_probs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let inv_sqrt = T::one() / T::of(q.cols() as f64).sqrt();
    let bias = T::of(MASK_BIAS);
    let mut scores = q.matmul_bt(k);
    for i in 0..scores.rows() {
        for (j, s) in scores.row_mut(i).iter_mut().enumerate() {
            *s *= inv_sqrt;
            if !mask.allows(i, j) {
                *s += bias;
            }
        }
    }
    let probs = softmax_rows(&scores)
        .map_err(|e| Error::numeric("scaled_dot_attention", e.to_string()))?;
    Ok((probs.matmul(v), probs))
}

/// Gradients of attention w.r.t. `(q, k, v)` given upstream `d_out`.
pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let inv_sqrt = T::one() / T::of(q.cols() as f64).sqrt();
    let d_v = probs.matmul_at(d_out);
    let d_probs = d_out.matmul_bt(v);
    let mut d_scores = Tensor::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let dp = d_probs.row(i);
        let inner = dot(p, dp);
        for (j, ds) in d_scores.row_mut(i).iter_mut().enumerate() {
            *ds = p[j] * (dp[j] - inner) * inv_sqrt;
        }
    }
    let d_q = d_scores.matmul(k);
    let d_k = d_scores.matmul_at(q);
    (d_q, d_k, d_v)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-[ln σ(pos) + ln(1 - σ(neg))]` for one position, with its derivatives
/// w.r.t. the two scores.
#[inline]
pub fn pairwise_bce<T: Scalar>(pos: T, neg: T) -> (T, T, T) {
    let loss = softplus(-pos) + softplus(neg);
    (loss, sigmoid(pos) - T::one(), sigmoid(neg))
}

/// Cross-entropy of `target` under `softmax(logits)` restricted to indices
/// `first_valid..`. Returns the loss and the softmax over the full row
/// (zero below `first_valid`).
pub fn restricted_cross_entropy<T: Scalar>(logits: &[T], first_valid: usize, target: usize) -> (T, Vec<T>) {
    debug_assert!(target >= first_valid && target < logits.len());
    let mut probs = vec![T::zero(); logits.len()];
    probs[first_valid..].copy_from_slice(&logits[first_valid..]);
    let max = logits[first_valid..].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for p in probs[first_valid..].iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in probs[first_valid..].iter_mut() {
        *p /= sum;
    }
    let loss = sum.ln() + max - logits[target];
    (loss, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_and_overflow_safe() {
        let s = softmax_rows(&t(2, 2, &[0., 0., 1000., 1000.])).unwrap();
        for v in s.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let s32 = softmax_rows(&Tensor::<f32>::from_vec(1, 2, vec![1000., 1000.]).unwrap()).unwrap();
        assert_eq!(s32.data(), &[0.5f32, 0.5]);
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        // exp(i) / (e + e^2 + e^3)
        let z: f64 = [1f64, 2., 3.].iter().map(|x| x.exp()).sum();
        let oracle: Vec<f64> = [1f64, 2., 3.].iter().map(|x| x.exp() / z).collect();
        let s = softmax_rows(&t(1, 3, &[1., 2., 3.])).unwrap();
        for (a, b) in s.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in s.data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax_rows(&t(1, 2, &[f64::NAN, 0.])).unwrap_err();
        assert!(err.to_string().contains("softmax_rows"));
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = t(3, 2, &[1., -2., 0.3, 4., -5., 6.]);
        let k = t(1, 2, &[0.7, -0.1]);
        let v = t(1, 3, &[9., 8., 7.]);
        let out = scaled_dot_attention(&q, &k, &v, &AttentionMask::full(3, 1)).unwrap();
        for r in 0..3 {
            for (a, b) in out.row(r).iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_attention_matches_hand_scalars() {
        let i2 = Tensor::<f64>::identity(2);
        let out = scaled_dot_attention(&i2, &i2, &i2, &AttentionMask::full(2, 2)).unwrap();
        let a = (1.0 / 2f64.sqrt()).exp();
        let w_self = a / (a + 1.0);
        let w_other = 1.0 / (a + 1.0);
        let expected = [w_self, w_other, w_other, w_self];
        for (x, e) in out.data().iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_rows_ignore_future_keys() {
        let q = t(3, 2, &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let k = t(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let v = t(3, 2, &[1., 2., 3., 4., 5., 6.]);
        let mask = AttentionMask::causal(3);
        let base = scaled_dot_attention(&q, &k, &v, &mask).unwrap();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2.row_mut(2).copy_from_slice(&[100., -100.]);
        v2.row_mut(2).copy_from_slice(&[-7., 99.]);
        let pert = scaled_dot_attention(&q, &k2, &v2, &mask).unwrap();
        assert_eq!(base.row(0), pert.row(0));
        assert_eq!(base.row(1), pert.row(1));
        assert_ne!(base.row(2), pert.row(2));
    }

    #[test]
    fn attention_shape_errors() {
        let a = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::<f64>::zeros(2, 4);
        assert!(scaled_dot_attention(&a, &b, &b, &AttentionMask::full(2, 2)).is_err());
        assert!(scaled_dot_attention(&a, &a, &b, &AttentionMask::full(3, 2)).is_err());
    }

    #[test]
    fn bce_hand_values() {
        let (l0, _, _) = pairwise_bce(0.0f64, 0.0);
        assert!((l0 - 2.0 * 2f64.ln()).abs() < 1e-12);
        let (l1, _, _) = pairwise_bce(1.0f64, -1.0);
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let oracle = -(s(1.0).ln() + (1.0 - s(-1.0)).ln());
        assert!((l1 - oracle).abs() < 1e-12);
        assert!((l1 - 0.6265).abs() < 1e-4);
        let (big, _, _) = pairwise_bce(80.0f64, -80.0);
        assert!(big < 1e-30);
    }

    #[test]
    fn restricted_ce_hand_value() {
        let (loss, probs) = restricted_cross_entropy(&[50.0f64, -3.0, 1.0, 2.0, 3.0], 2, 4);
        let oracle = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.4076).abs() < 1e-4);
        assert_eq!(probs[0], 0.0);
        assert_eq!(probs[1], 0.0);
    }
}
