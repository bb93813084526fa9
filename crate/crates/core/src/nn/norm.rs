use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Per-(sample, channel) inverse standard deviations from the forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub inv_std: Vec<T>,
}

/// Instance normalization without affine parameters or running statistics.
pub fn instance_norm<T: Real>(x: &Tensor<T>) -> (Tensor<T>, NormStats<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let denom = T::from_f64(plane as f64);
    let eps = T::from_f64(NORM_EPS);
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(n * c);
    for chunk in out.data_mut().chunks_mut(plane) {
        let mean = chunk.iter().copied().sum::<T>() / denom;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / denom;
        let inv = T::one() / (var + eps).sqrt();
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, NormStats { inv_std })
}

/// Gradient through [`instance_norm`], given its output `y`.
pub fn instance_norm_backward<T: Real>(y: &Tensor<T>, stats: &NormStats<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = y.dims4();
    let plane = h * w;
    let denom = T::from_f64(plane as f64);
    let mut dx = dy.clone();
    for ((g, yc), &inv) in dx
        .data_mut()
        .chunks_mut(plane)
        .zip(y.data().chunks(plane))
        .zip(&stats.inv_std)
    {
        let mean_g = g.iter().copied().sum::<T>() / denom;
        let mean_gy = g.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / denom;
        for (gv, &yv) in g.iter_mut().zip(yc) {
            *gv = inv * (*gv - mean_g - yv * mean_gy);
        }
    }
    dx
}
