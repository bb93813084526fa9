use rand::Rng;

use crate::tensor::{Real, Tensor};

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Uses the forward output; for a positive slope its sign equals the input's.
pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| g * (T::one() - o * o))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}
