//! Central finite differences, the independent oracle for every backward
//! rule in the crate.

use crate::tensor::{Result, Tensor, TensorError};

/// Gradient exemption floor: elements where both estimates are smaller
/// than this are not compared.
pub const NEGLIGIBLE_GRAD: f64 = 1e-10;

/// `|a − b| / max(|a|, |b|, 1e-12)`, or 0 when both are negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < NEGLIGIBLE_GRAD && numeric.abs() < NEGLIGIBLE_GRAD {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Largest elementwise [`relative_error`] between two equally shaped tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let indices: Vec<usize> = (0..x.len()).collect();
    let values = finite_diff_at(|t| Some(f(t)), x, h, &indices)?;
    let mut out = Tensor::zeros(x.shape());
    for (&i, v) in indices.iter().zip(values) {
        out.data_mut()[i] = v;
    }
    Ok(out)
}

/// Central differences at selected flat indices only. `f` returning `None`
/// counts as a non-finite evaluation.
pub fn finite_diff_at<F>(f: F, x: &Tensor, h: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Option<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        match (plus, minus) {
            (Some(p), Some(m)) if p.is_finite() && m.is_finite() => out.push((p - m) / (2.0 * h)),
            _ => return Err(TensorError::NonFiniteProbe { index: i }),
        }
    }
    Ok(out)
}
