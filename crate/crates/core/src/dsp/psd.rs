use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// One-sided power spectral density per channel, in units²/Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub power: Vec<Vec<f64>>,
}

/// Welch estimate: periodic Hann window, per-segment mean removal, segments
/// of `nperseg` samples advanced by `nperseg - noverlap`, density scaling.
pub fn welch<T: Scalar>(x: &[T], fs: f64, nperseg: usize, noverlap: usize) -> Result<Vec<f64>> {
    if nperseg == 0 || nperseg > x.len() {
        return Err(Error::Data(format!("PSD segment of {nperseg} samples does not fit a {}-sample signal", x.len())));
    }
    if noverlap >= nperseg {
        return Err(Error::Config("PSD overlap must be shorter than the segment".into()));
    }
    let window: Vec<f64> = (0..nperseg).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / nperseg as f64).cos()).collect();
    let scale = 1.0 / (fs * window.iter().map(|w| w * w).sum::<f64>());
    let fft = FftPlanner::new().plan_fft_forward(nperseg);
    let bins = nperseg / 2 + 1;
    let step = nperseg - noverlap;
    let mut acc = vec![0.0; bins];
    let mut count = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); nperseg];
    let mut start = 0;
    while start + nperseg <= x.len() {
        let seg = &x[start..start + nperseg];
        let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / nperseg as f64;
        for ((b, v), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new((v.as_f64() - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf) {
            *a += c.norm_sqr();
        }
        count += 1;
        start += step;
    }
    for (k, a) in acc.iter_mut().enumerate() {
        *a *= scale / count as f64;
        let edge = k == 0 || (nperseg % 2 == 0 && k == bins - 1);
        if !edge {
            *a *= 2.0;
        }
    }
    Ok(acc)
}

pub fn rfft_freqs(nperseg: usize, fs: f64) -> Vec<f64> {
    (0..nperseg / 2 + 1).map(|k| k as f64 * fs / nperseg as f64).collect()
}
