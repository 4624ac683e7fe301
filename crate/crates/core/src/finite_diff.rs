//! Central finite differences, used as an independent oracle for the tape.

use crate::tensor::{Real, Tensor};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference<T: Real>(at: &Tensor<T>, h: f64, f: impl Fn(&Tensor<T>) -> T) -> Tensor<T> {
    let mut probe = at.clone();
    let mut out = Tensor::zeros(at.dims());
    for i in 0..at.numel() {
        let orig = at.data()[i];
        probe.data_mut()[i] = T::cast_from(orig.as_f64() + h);
        let plus = f(&probe).as_f64();
        probe.data_mut()[i] = T::cast_from(orig.as_f64() - h);
        let minus = f(&probe).as_f64();
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = T::cast_from((plus - minus) / (2.0 * h));
    }
    out
}

/// Largest per-coordinate relative error `|a - b| / max(|a|, |b|, floor)`,
/// where `floor = 1e-3 * max(max|a|, max|b|)` keeps coordinates that are
/// negligible relative to the gradient's scale from dominating.
pub fn max_relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.dims(), numeric.dims(), "gradient dims differ");
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .map(|v| v.as_f64().abs())
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| {
            let (a, b) = (a.as_f64(), b.as_f64());
            (a - b).abs() / a.abs().max(b.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
