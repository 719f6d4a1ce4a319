//! EEG conditioning: zero-phase band-pass and mains notch, running-median
//! baseline removal, Welch PSD, and video frame decimation.

mod filter;
mod median;
mod psd;

pub use filter::{butter_bandpass, notch, Biquad, Sos};
pub use median::{reflect_index, running_median};
pub use psd::{rfft_freqs, welch, Psd};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Multi-channel recording; `channels[c]` holds the samples of channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording<T = f64> {
    pub sample_rate: f64,
    pub start_time: f64,
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<T>>,
}

impl<T: Scalar> EegRecording<T> {
    pub fn new(sample_rate: f64, channel_names: Vec<String>, channels: Vec<Vec<T>>) -> Result<Self> {
        let rec = Self { sample_rate, start_time: 0.0, channel_names, channels };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Data(format!("sample rate {} must be positive", self.sample_rate)));
        }
        if self.channel_names.len() != self.channels.len() {
            return Err(Error::Data("channel names and traces differ in count".into()));
        }
        let len = self.len();
        if self.channels.iter().any(|c| c.len() != len) {
            return Err(Error::Data("channels differ in length".into()));
        }
        Ok(())
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    fn map_channels(&self, f: impl Fn(&[T]) -> Vec<T>) -> Self {
        Self {
            sample_rate: self.sample_rate,
            start_time: self.start_time,
            channel_names: self.channel_names.clone(),
            channels: self.channels.iter().map(|c| f(c)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub band_order: usize,
    pub notch_hz: f64,
    pub notch_q: f64,
    pub median_window_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { band_low_hz: 1.0, band_high_hz: 50.0, band_order: 4, notch_hz: 50.0, notch_q: 30.0, median_window_s: 1.0 }
    }
}

/// Zero-phase Butterworth band-pass of the given prototype order.
pub fn bandpass<T: Scalar>(rec: &EegRecording<T>, low: f64, high: f64, order: usize) -> Result<EegRecording<T>> {
    let sos = butter_bandpass(order, low, high, rec.sample_rate)?;
    let pad = (3.0 * rec.sample_rate / low).ceil() as usize;
    Ok(rec.map_channels(|c| sos.filtfilt(c, pad)))
}

/// Zero-phase notch at `f0` (50 Hz mains by default) with quality factor `q`.
pub fn notch_filter<T: Scalar>(rec: &EegRecording<T>, f0: f64, q: f64) -> Result<EegRecording<T>> {
    let sos = notch(f0, q, rec.sample_rate)?;
    let pad = (3.0 * q * rec.sample_rate / f0).ceil() as usize;
    Ok(rec.map_channels(|c| sos.filtfilt(c, pad)))
}

pub fn notch50<T: Scalar>(rec: &EegRecording<T>) -> Result<EegRecording<T>> {
    notch_filter(rec, 50.0, 30.0)
}

/// Odd sample count closest to `window_s · fs` (rounded up when even).
pub fn median_window_samples(window_s: f64, fs: f64) -> Result<usize> {
    let mut w = (window_s * fs).round() as usize;
    if w % 2 == 0 {
        w += 1;
    }
    if window_s * fs < 3.0 || w < 3 {
        return Err(Error::Config(format!("median window of {window_s} s at {fs} Hz is under 3 samples")));
    }
    Ok(w)
}

/// Subtracts a running median of `window_s` seconds from every channel.
pub fn median_baseline<T: Scalar>(rec: &EegRecording<T>, window_s: f64) -> Result<EegRecording<T>> {
    let w = median_window_samples(window_s, rec.sample_rate)?;
    Ok(rec.map_channels(|c| {
        let m = running_median(c, w);
        c.iter().zip(m).map(|(&x, m)| x - m).collect()
    }))
}

/// Band-pass, notch, then baseline removal, as configured.
pub fn preprocess<T: Scalar>(rec: &EegRecording<T>, cfg: &PreprocessConfig) -> Result<EegRecording<T>> {
    let r = bandpass(rec, cfg.band_low_hz, cfg.band_high_hz, cfg.band_order)?;
    let r = notch_filter(&r, cfg.notch_hz, cfg.notch_q)?;
    median_baseline(&r, cfg.median_window_s)
}

/// Per-channel Welch PSD with segments of `segment_s` seconds overlapping by
/// `overlap_fraction`.
pub fn welch_psd<T: Scalar>(rec: &EegRecording<T>, segment_s: f64, overlap_fraction: f64) -> Result<Psd> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Config(format!("overlap fraction {overlap_fraction} outside [0, 1)")));
    }
    let nperseg = (segment_s * rec.sample_rate).round() as usize;
    let noverlap = (overlap_fraction * nperseg as f64).round() as usize;
    let power = rec.channels.iter().map(|c| welch(c, rec.sample_rate, nperseg, noverlap)).collect::<Result<_>>()?;
    Ok(Psd { freqs: rfft_freqs(nperseg, rec.sample_rate), power })
}

/// Keeps every fourth frame (positions 0, 4, 8, ...): 25 fps to 6.25 fps.
pub fn decimate_frames<I: Copy>(frame_indices: &[I]) -> Vec<I> {
    frame_indices.iter().step_by(4).copied().collect()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const FS: f64 = 200.0;

    fn tone(f: f64, seconds: f64) -> Vec<f64> {
        (0..(seconds * FS) as usize).map(|i| (2.0 * PI * f * i as f64 / FS).sin()).collect()
    }

    fn rec(x: Vec<f64>) -> EegRecording {
        EegRecording::new(FS, vec!["c0".into()], vec![x]).unwrap()
    }

    /// Amplitude at frequency `f` by direct DFT projection over the middle
    /// half of the signal (edges excluded).
    fn amplitude(x: &[f64], f: f64) -> f64 {
        let n = x.len();
        let (a, b) = (n / 4, 3 * n / 4);
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate().take(b).skip(a) {
            let ph = 2.0 * PI * f * i as f64 / FS;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        2.0 * (re * re + im * im).sqrt() / (b - a) as f64
    }

    fn rms(x: &[f64]) -> f64 {
        let n = x.len();
        (x[n / 4..3 * n / 4].iter().map(|v| v * v).sum::<f64>() / (n / 2) as f64).sqrt()
    }

    fn band(x: Vec<f64>) -> Vec<f64> {
        bandpass(&rec(x), 1.0, 50.0, 4).unwrap().channels.remove(0)
    }

    #[test]
    fn bandpass_examples() {
        assert!(band(vec![0.0; 2000]).iter().all(|&v| v == 0.0));
        let r = amplitude(&band(tone(10.0, 20.0)), 10.0) / amplitude(&tone(10.0, 20.0), 10.0);
        assert!((0.89..=1.12).contains(&r), "{r}");
        let drift = tone(0.2, 50.0);
        let r = amplitude(&band(drift.clone()), 0.2) / amplitude(&drift, 0.2);
        assert!(r < 0.1, "{r}");
    }

    #[test]
    fn bandpass_band_edges() {
        for (f, max_gain) in [(0.1, 0.1), (80.0, 0.1)] {
            let x = tone(f, 100.0);
            let r = amplitude(&band(x.clone()), f) / amplitude(&x, f);
            assert!(r < max_gain, "{f} Hz: {r}");
        }
        let x = tone(20.0, 20.0);
        let r = amplitude(&band(x.clone()), 20.0) / amplitude(&x, 20.0);
        assert!(20.0 * r.log10() > -1.0);
    }

    #[test]
    fn notch_examples() {
        let n = |x: Vec<f64>| notch50(&rec(x)).unwrap().channels.remove(0);
        assert!(n(vec![0.0; 1000]).iter().all(|&v| v == 0.0));
        let x = tone(50.0, 20.0);
        assert!(rms(&n(x.clone())) < 0.1 * rms(&x));
        for f in [10.0, 40.0, 60.0] {
            let x = tone(f, 20.0);
            assert!(rms(&n(x.clone())) > 0.9 * rms(&x), "{f}");
        }
        let low = EegRecording::new(90.0, vec!["c".into()], vec![vec![0.0; 100]]).unwrap();
        assert!(matches!(notch50(&low), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_band_edges_are_config_errors() {
        assert!(matches!(bandpass(&rec(vec![0.0; 100]), 60.0, 120.0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn median_baseline_examples() {
        let base = |x: Vec<f64>, w: f64| median_baseline(&rec(x), w).unwrap().channels.remove(0);
        let out = base(vec![4.2; 1000], 1.0);
        assert!(out.iter().all(|&v| v == 0.0));
        let step: Vec<f64> = (0..1000).map(|i| if i < 500 { 0.0 } else { 10.0 }).collect();
        let out = base(step, 1.0);
        assert!(out[..400].iter().chain(&out[600..]).all(|&v| v.abs() < 1e-12));
        let mut imp = vec![0.0; 50];
        imp[25] = 3.0;
        // 5 samples at 200 Hz
        let out = base(imp.clone(), 0.025);
        assert_eq!(out, imp);
        assert!(matches!(median_baseline(&rec(vec![0.0; 10]), 0.005), Err(Error::Config(_))));
    }

    #[test]
    fn median_window_is_odd() {
        assert_eq!(median_window_samples(1.0, 200.0).unwrap(), 201);
        assert_eq!(median_window_samples(0.025, 200.0).unwrap(), 5);
    }

    #[test]
    fn psd_of_recording() {
        let p = welch_psd(&rec(tone(10.0, 30.0)), 2.0, 0.5).unwrap();
        let peak = (0..p.freqs.len()).max_by(|&a, &b| p.power[0][a].total_cmp(&p.power[0][b])).unwrap();
        assert_eq!(p.freqs[peak], 10.0);
        assert!(matches!(welch_psd(&rec(vec![0.0; 100]), 2.0, 0.5), Err(Error::Data(_))));
    }

    #[test]
    fn decimation_examples() {
        assert_eq!(decimate_frames(&(0..8).collect::<Vec<u32>>()), vec![0, 4]);
        assert!(decimate_frames::<u32>(&[]).is_empty());
        assert_eq!(decimate_frames(&(0..100).collect::<Vec<u32>>()).len(), 25);
    }

    #[test]
    fn symmetric_pulse_peak_does_not_move() {
        let x: Vec<f64> = (0..2000).map(|i| (-((i as f64 - 1000.0) / 8.0).powi(2)).exp()).collect();
        let y = band(x);
        let peak = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        assert_eq!(peak, 1000);
    }

    #[test]
    fn preprocessing_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chans: Vec<Vec<f64>> = (0..3).map(|_| (0..777).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r = EegRecording::new(FS, vec!["a".into(), "b".into(), "c".into()], chans).unwrap();
        let out = preprocess(&r, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.channels.len(), 3);
        assert!(out.channels.iter().all(|c| c.len() == 777));
    }

    #[test]
    fn generic_over_single_precision() {
        let x: Vec<f32> = tone(10.0, 10.0).into_iter().map(|v| v as f32).collect();
        let r = EegRecording::new(FS, vec!["c".into()], vec![x]).unwrap();
        let y = bandpass(&r, 1.0, 50.0, 4).unwrap();
        assert!(y.channels[0].iter().all(|v| v.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn filters_are_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let run = |v: Vec<f64>| {
                let r = rec(v);
                let bp = bandpass(&r, 1.0, 50.0, 4).unwrap();
                notch50(&bp).unwrap().channels.remove(0)
            };
            let (fx, fy, fm) = (run(x), run(y), run(mix));
            for i in 0..600 {
                prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
            }
        }
    }
}
