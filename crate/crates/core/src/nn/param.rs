use rand::Rng as _;

use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;
use crate::seed::Rng;

/// A trainable tensor with its gradient and Adam moment accumulators.
#[derive(Clone, Debug)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            adam_m: Tensor::zeros(r, c),
            adam_v: Tensor::zeros(r, c),
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Tensor::filled(rows, cols, T::one()))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Self::new(name, Tensor::from_vec(rows, cols, data).expect("sized by construction"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that owns named parameters.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&ParamTensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
