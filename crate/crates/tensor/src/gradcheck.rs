//! Central finite differences, used as an independent oracle for `backward`.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> f64,
{
    let idx: Vec<usize> = (0..x.numel()).collect();
    let partial = finite_diff_at(&mut f, x, h, &idx);
    Tensor::from_fn(x.shape(), |i| T::lit(partial[i]))
}

/// Central differences restricted to the listed coordinates.
pub fn finite_diff_at<T, F>(f: &mut F, x: &Tensor<T>, h: f64, coords: &[usize]) -> Vec<f64>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> f64,
{
    let mut probe = x.clone();
    let hh = T::lit(h);
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + hh;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - hh;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Floor on the denominator of [`max_relative_error`]: below this magnitude a
/// component is compared in absolute terms. Central differences at h = 1e-5
/// carry round-off near 1e-10 on O(1) losses, so an exactly-zero gradient
/// would otherwise read as a large relative error.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}
