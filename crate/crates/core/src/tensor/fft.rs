//! One-sided FFT magnitudes. Transforms run in `f64` through `rustfft`
//! regardless of the tensor scalar type.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::Scalar;

pub fn check_pow2(len: usize) -> Result<()> {
    if len == 0 || !len.is_power_of_two() {
        return Err(Error::Config(format!("FFT length {len} is not a power of two")));
    }
    Ok(())
}

/// Complex spectrum of a real signal; all `len` bins.
pub fn spectrum<T: Scalar>(x: &[T]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(v.as_f64(), 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Magnitudes of bins `0..=L/2`.
pub fn rfft_magnitude<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    check_pow2(x.len())?;
    let spec = spectrum(x);
    Ok(spec[..x.len() / 2 + 1].iter().map(|c| T::lit(c.norm())).collect())
}

/// Vector-Jacobian product of [`rfft_magnitude`]: given the complex spectrum
/// of the input and upstream gradients on the one-sided magnitudes, returns
/// the gradient with respect to the real input.
pub(crate) fn rfft_magnitude_vjp(spec: &[Complex64], upstream: &[f64]) -> Vec<f64> {
    let len = spec.len();
    // d|X_k|/dx_n = Re(conj(X_k) e^{-2πikn/L}) / |X_k|, so the VJP is the real
    // part of a forward DFT of the weighted conjugate spectrum.
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (k, (&g, x)) in upstream.iter().zip(spec).enumerate() {
        let mag = x.norm();
        if mag > 0.0 {
            buf[k] = x.conj() * (g / mag);
        }
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}
