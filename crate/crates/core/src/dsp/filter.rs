//! IIR design (Butterworth band-pass, second-order notch) and zero-phase
//! application as cascaded biquads.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::Scalar;

/// Biquad `b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }
}

/// Cascade of biquads (second-order sections).
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        self.sections.iter().map(|s| s.response(f, fs)).product()
    }

    pub fn gain(&self, f: f64, fs: f64) -> f64 {
        self.response(f, fs).norm()
    }

    /// One causal pass. States start at the steady state for a constant
    /// input equal to `x[0]`, so a DC level does not ring at the start.
    pub fn filter<T: Scalar>(&self, x: &mut [T]) {
        let Some(&first) = x.first() else { return };
        let mut level = first.as_f64();
        for s in &self.sections {
            let g = s.dc_gain();
            let z2 = (s.b[2] - s.a[1] * g) * level;
            let z1 = (s.b[1] - s.a[0] * g) * level + z2;
            let (mut z1, mut z2) = (T::lit(z1), T::lit(z2));
            let [b0, b1, b2] = s.b.map(T::lit);
            let [a1, a2] = s.a.map(T::lit);
            for v in x.iter_mut() {
                let xi = *v;
                let y = b0 * xi + z1;
                z1 = b1 * xi - a1 * y + z2;
                z2 = b2 * xi - a2 * y;
                *v = y;
            }
            level *= g;
        }
    }

    /// Forward-backward filtering over an odd-reflected extension of `pad`
    /// samples at each end. Linear in `x`, zero phase, length preserving.
    pub fn filtfilt<T: Scalar>(&self, x: &[T], pad: usize) -> Vec<T> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let two = T::lit(2.0);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| two * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| two * x[n - 1] - x[n - 1 - i]));
        self.filter(&mut ext);
        ext.reverse();
        self.filter(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Digital Butterworth band-pass of analog prototype order `order` (the
/// resulting filter has `2 order` poles), designed by pre-warped bilinear
/// transform of the analog zero/pole/gain form.
pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::Config("band-pass order must be positive".into()));
    }
    if !(low > 0.0 && low < high && high < fs / 2.0) {
        return Err(Error::Config(format!(
            "band edges {low}..{high} Hz invalid for sample rate {fs} Hz (need 0 < low < high < {})",
            fs / 2.0
        )));
    }
    let fs2 = 2.0 * fs;
    let wl = fs2 * (PI * low / fs).tan();
    let wh = fs2 * (PI * high / fs).tan();
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();
    let n = order as f64;
    let mut analog_poles = Vec::with_capacity(2 * order);
    for k in 1..=order {
        let theta = PI * (2.0 * k as f64 + n - 1.0) / (2.0 * n);
        let p = Complex64::from_polar(1.0, theta);
        let half = p * (bw / 2.0);
        let root = (half * half - w0 * w0).sqrt();
        analog_poles.push(half + root);
        analog_poles.push(half - root);
    }
    // gain bw^N over N zeros at s = 0, then the bilinear gain correction
    let mut gain = Complex64::new(bw.powi(order as i32) * fs2.powi(order as i32), 0.0);
    for p in &analog_poles {
        gain /= fs2 - p;
    }
    let digital: Vec<Complex64> = analog_poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let mut upper: Vec<Complex64> = digital.into_iter().filter(|p| p.im > 0.0).collect();
    if upper.len() != order {
        return Err(Error::Numeric("band-pass design produced real poles".into()));
    }
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|p| Biquad { b: [1.0, 0.0, -1.0], a: [-2.0 * p.re, p.norm_sqr()] })
        .collect();
    let g = gain.re;
    for c in sections[0].b.iter_mut() {
        *c *= g;
    }
    Ok(Sos { sections })
}

/// Second-order IIR notch at `f0` with quality factor `q` (-3 dB bandwidth
/// `f0 / q`).
pub fn notch(f0: f64, q: f64, fs: f64) -> Result<Sos> {
    if fs <= 2.0 * f0 {
        return Err(Error::Config(format!("notch at {f0} Hz needs a sample rate above {} Hz, got {fs}", 2.0 * f0)));
    }
    if q <= 0.0 {
        return Err(Error::Config("notch quality factor must be positive".into()));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let beta = (w0 / q / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Sos {
        sections: vec![Biquad { b: [gain, -2.0 * gain * c, gain], a: [-2.0 * gain * c, 2.0 * gain - 1.0] }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // |H| of the 4th-order 1-50 Hz band-pass at 200 Hz, from an independent
    // reference implementation of the same bilinear design.
    const REF_FREQS: [f64; 13] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 50.0, 60.0, 80.0, 99.0];
    const REF_GAIN: [f64; 13] = [
        9.3891229e-05,
        0.001505108082,
        0.059474667777,
        0.707106781187,
        0.998686485253,
        0.999999974089,
        0.999999999914,
        0.999980571891,
        0.967096050888,
        0.707106781187,
        0.261023730792,
        0.010530697254,
        5.7164e-08,
    ];

    #[test]
    fn bandpass_matches_reference_response() {
        let sos = butter_bandpass(4, 1.0, 50.0, 200.0).unwrap();
        assert_eq!(sos.sections.len(), 4);
        for (f, g) in REF_FREQS.iter().zip(REF_GAIN) {
            let got = sos.gain(*f, 200.0);
            assert!((got - g).abs() < 1e-9 + 1e-6 * g, "{f} Hz: {got} vs {g}");
        }
    }

    #[test]
    fn notch_matches_reference_coefficients() {
        let sos = notch(50.0, 30.0, 200.0).unwrap();
        let s = sos.sections[0];
        assert!((s.b[0] - 0.9744822833574399).abs() < 1e-15);
        assert!(s.b[1].abs() < 1e-15 && s.a[0].abs() < 1e-15);
        assert!((s.a[1] - 0.9489645667148798).abs() < 1e-15);
        for (f, g) in [(10.0, 0.999963806196), (40.0, 0.996768200973), (49.0, 0.768252940103)] {
            assert!((sos.gain(f, 200.0) - g).abs() < 1e-11);
        }
        assert!(sos.gain(50.0, 200.0) < 1e-12);
    }

    #[test]
    fn invalid_designs_are_config_errors() {
        assert!(matches!(butter_bandpass(4, 0.0, 50.0, 200.0), Err(Error::Config(_))));
        assert!(matches!(butter_bandpass(4, 30.0, 20.0, 200.0), Err(Error::Config(_))));
        assert!(matches!(butter_bandpass(4, 1.0, 100.0, 200.0), Err(Error::Config(_))));
        assert!(matches!(notch(50.0, 30.0, 100.0), Err(Error::Config(_))));
    }

    #[test]
    fn steady_state_start_for_constant_input() {
        let sos = Sos { sections: vec![Biquad { b: [0.2, 0.3, 0.1], a: [-0.5, 0.2] }] };
        let mut x = vec![3.0f64; 50];
        sos.filter(&mut x);
        let dc = 0.6 / 0.7 * 3.0;
        assert!(x.iter().all(|v| (v - dc).abs() < 1e-12));
    }
}
