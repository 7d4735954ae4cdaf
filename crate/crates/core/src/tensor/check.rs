use super::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// Independent of the tape: `f` is only ever evaluated, never differentiated.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
///
/// The floor keeps near-zero gradient entries from dominating the ratio; it
/// makes the measure absolute below `floor` in magnitude.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g =
            finite_difference_gradient(|t| t.data()[0] * t.data()[0], &Tensor::scalar(3.0), 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_difference_gradient(|_| 4.2, &x, 1e-4);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
