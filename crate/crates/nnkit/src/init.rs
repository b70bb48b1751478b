use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(fan_in, fan_out)` for dense `[out, in]` and convolution
/// `[a, b, k, k]` weight shapes.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [a, b, rest @ ..] => {
            let field: usize = rest.iter().product();
            (b * field, a * field)
        }
    }
}

/// Glorot-uniform draw on `[-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out))]`.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let (fan_in, fan_out) = fans(shape);
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
