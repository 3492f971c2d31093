//! Weight initializers. Uniform draws only, so initial parameters are
//! bitwise identical across platforms for a given seed.

use rand::Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// Kaiming-uniform for a conv kernel `[cout, cin, k, k]` or linear `[out, in]`.
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Unit vector with uniform-drawn direction entries (used to seed power iteration).
pub fn unit_vector<T: Real, R: Rng + ?Sized>(len: usize, rng: &mut R) -> Tensor<T> {
    let t: Tensor<T> = Tensor::rand_uniform(&[len], -1.0, 1.0, rng);
    let n = t.norm().max(T::lit(1e-12));
    t.map(|v| v / n)
}
