//! Weight initializers. All draws go through caller-provided RNGs so model
//! construction is reproducible from a seed.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform(-limit, limit) matrix.
pub fn uniform2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    let mut a = Array2::zeros((rows, cols));
    for v in a.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
    a
}

/// Linear layer init matching the usual fan-in rule: W, b ~ U(-1/sqrt(in), 1/sqrt(in)).
/// Returns (weight `(in, out)`, bias `(1, out)`).
pub fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Array2<f64>, Array2<f64>) {
    let limit = 1.0 / (fan_in as f64).sqrt();
    let w = uniform2(rng, fan_in, fan_out, limit);
    let b = uniform2(rng, 1, fan_out, limit);
    (w, b)
}

/// Xavier/Glorot uniform for attention projections.
pub fn xavier_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform2(rng, fan_in, fan_out, limit)
}

/// Conv kernel `(out, in, k, k)` plus bias `(out)`, fan-in rule.
pub fn conv_init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize) -> (Array4<f64>, Array1<f64>) {
    let fan_in = c_in * k * k;
    let limit = 1.0 / (fan_in as f64).sqrt();
    let mut w = Array4::zeros((c_out, c_in, k, k));
    for v in w.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
    let mut b = Array1::zeros(c_out);
    for v in b.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
    (w, b)
}
