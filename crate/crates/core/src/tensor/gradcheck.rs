use crate::tensor::array::NDArray;

/// Central-difference gradient of a scalar function:
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&NDArray<f64>) -> f64,
    x: &NDArray<f64>,
    eps: f64,
) -> NDArray<f64> {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = NDArray::zeros(x.dims());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both are exactly zero.
pub fn relative_error(a: &NDArray<f64>, b: &NDArray<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.l2_norm().max(b.l2_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = NDArray::from_f64_slice(&[2], &[1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|v| v.data().iter().map(|a| a * a).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn linear_function_is_exact() {
        let x = NDArray::from_f64_slice(&[3], &[0.5, -1.0, 4.0]).unwrap();
        let g = finite_diff_grad(
            |v| 3.0 * v.data()[0] - 0.5 * v.data()[1] + 2.0 * v.data()[2],
            &x,
            1e-3,
        );
        for (got, want) in g.data().iter().zip([3.0, -0.5, 2.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}
