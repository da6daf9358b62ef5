//! Xavier (Glorot) uniform initialization.

use rand::Rng;

use crate::tensor::Tensor;

/// `(fan_in, fan_out)` of a weight tensor. Convolution kernels
/// `[out, in, k, k]` multiply both fans by the receptive field `k * k`.
/// Transposed kernels `[in, out, k, k]` give the same sum, which is all the
/// bound depends on.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let rf: usize = rest.iter().product();
            (inp * rf, out * rf)
        }
    }
}

/// Half-width of the uniform range: `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples a weight tensor uniformly on `[-b, b]` with the Xavier bound.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = fans(shape);
    let b = xavier_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-b..=b)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}
