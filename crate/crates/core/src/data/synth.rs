//! Synthetic corpus with known ground truth.
//!
//! EEG: correlated pink background, rhythmic 5-8 Hz spike-wave discharges
//! during seizures, broadband artifact bursts (over some seizures and at
//! random interictal times), mains hum, slow drift and DC offsets.
//! Video: low-variance frame features at rest, a rhythmic motion signature
//! during seizures and during benign movement bouts, decimated and averaged
//! into per-window tokens.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{window_count, SeizureEvent, Session, VideoTokens, WINDOW_S};
use crate::dsp::{decimate_frames, EegRecording};
use crate::error::{Error, Result};

pub const VIDEO_FPS: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub sessions: usize,
    pub subjects: usize,
    pub duration_s: f64,
    pub sample_rate: f64,
    pub channels: usize,
    pub seizures_per_session: f64,
    pub seizure_min_s: f64,
    pub seizure_max_s: f64,
    /// Minimum spacing between any two planned intervals, and to the ends.
    pub min_gap_s: f64,
    /// Discharge RMS as a multiple of the background RMS.
    pub ictal_amplitude: f64,
    pub discharge_min_hz: f64,
    pub discharge_max_hz: f64,
    pub ramp_s: f64,
    /// Correlation between channels of the background activity.
    pub channel_correlation: f64,
    pub artifact_seizure_fraction: f64,
    pub artifact_amplitude: f64,
    /// Scale applied to the discharge while an artifact burst covers it.
    pub artifact_discharge_gain: f64,
    pub interictal_artifacts_per_hour: f64,
    /// Fraction of interictal time filled with benign movement bouts.
    pub benign_motion_fraction: f64,
    pub line_noise_amplitude: f64,
    pub drift_amplitude: f64,
    pub drift_hz: f64,
    pub dc_offset: f64,
    pub video_t_v: usize,
    pub video_d_v: usize,
    pub motion_amplitude: f64,
    pub motion_noise: f64,
    pub rest_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            sessions: 16,
            subjects: 4,
            duration_s: 1800.0,
            sample_rate: 200.0,
            channels: 2,
            seizures_per_session: 3.0,
            seizure_min_s: 20.0,
            seizure_max_s: 45.0,
            min_gap_s: 60.0,
            ictal_amplitude: 5.0,
            discharge_min_hz: 5.0,
            discharge_max_hz: 8.0,
            ramp_s: 1.0,
            channel_correlation: 0.8,
            artifact_seizure_fraction: 0.3,
            artifact_amplitude: 5.0,
            artifact_discharge_gain: 0.0,
            interictal_artifacts_per_hour: 2.0,
            benign_motion_fraction: 0.1,
            line_noise_amplitude: 0.5,
            drift_amplitude: 2.0,
            drift_hz: 0.2,
            dc_offset: 5.0,
            video_t_v: 16,
            video_d_v: 64,
            motion_amplitude: 1.0,
            motion_noise: 0.5,
            rest_noise: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.sessions == 0 || self.subjects == 0 || self.channels == 0 {
            return cfg("sessions, subjects and channels must be positive".into());
        }
        if !(self.seizure_min_s > 0.0 && self.seizure_min_s <= self.seizure_max_s) {
            return cfg(format!("seizure duration range {}..{} is invalid", self.seizure_min_s, self.seizure_max_s));
        }
        if self.seizures_per_session > 0.0 && self.seizure_max_s + 2.0 * self.min_gap_s > self.duration_s {
            return cfg(format!(
                "seizures up to {} s with {} s margins do not fit a {} s session",
                self.seizure_max_s, self.min_gap_s, self.duration_s
            ));
        }
        if self.duration_s < WINDOW_S as f64 {
            return cfg(format!("session duration {} s is shorter than one window", self.duration_s));
        }
        if self.sample_rate <= 100.0 {
            return cfg(format!("sample rate {} Hz leaves no room for the 50 Hz notch", self.sample_rate));
        }
        if !(0.0..=1.0).contains(&self.channel_correlation)
            || !(0.0..=1.0).contains(&self.artifact_seizure_fraction)
            || !(0.0..1.0).contains(&self.benign_motion_fraction)
        {
            return cfg("correlation and fractions must lie in [0, 1]".into());
        }
        if self.seizures_per_session < 0.0 || self.interictal_artifacts_per_hour < 0.0 {
            return cfg("event rates must be nonnegative".into());
        }
        if self.video_t_v == 0 || self.video_d_v == 0 {
            return cfg("video token shape must be positive".into());
        }
        Ok(())
    }

    pub fn subject_of(&self, session: usize) -> String {
        format!("sub{:02}", session % self.subjects)
    }

    pub fn session_id(&self, session: usize) -> String {
        format!("ses{session:03}")
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

/// Where everything happens in one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLayout {
    pub seizures: Vec<SeizureEvent>,
    /// Parallel to `seizures`: whether an artifact burst covers the seizure.
    pub seizure_artifact: Vec<bool>,
    pub interictal_artifacts: Vec<SeizureEvent>,
    pub benign_bouts: Vec<SeizureEvent>,
}

impl SessionLayout {
    pub fn motion_intervals(&self) -> impl Iterator<Item = &SeizureEvent> {
        self.seizures.iter().chain(&self.benign_bouts)
    }

    pub fn artifact_intervals(&self) -> impl Iterator<Item = &SeizureEvent> {
        self.seizures
            .iter()
            .zip(&self.seizure_artifact)
            .filter(|(_, &a)| a)
            .map(|(e, _)| e)
            .chain(&self.interictal_artifacts)
    }
}

/// Draws an interval of length `len` that keeps `gap` seconds from every
/// occupied interval and from both session ends.
fn place(rng: &mut ChaCha8Rng, occupied: &[SeizureEvent], len: f64, duration: f64, gap: f64) -> Option<SeizureEvent> {
    let hi = duration - gap - len;
    if hi < gap {
        return None;
    }
    for _ in 0..500 {
        // whole-second onsets keep window labels easy to reason about
        let onset = rng.random_range(gap..=hi).floor();
        let cand = SeizureEvent { onset_s: onset, offset_s: onset + len };
        if occupied.iter().all(|o| cand.offset_s + gap <= o.onset_s || o.offset_s + gap <= cand.onset_s) {
            return Some(cand);
        }
    }
    None
}

/// Seizure intervals of one session, drawn from its own stream.
fn plan_seizures(spec: &SynthSpec, session: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SeizureEvent>> {
    let count = if spec.seizures_per_session > 0.0 {
        Poisson::new(spec.seizures_per_session).map_err(|e| Error::Config(e.to_string()))?.sample(rng) as usize
    } else {
        0
    };
    let mut seizures: Vec<SeizureEvent> = Vec::new();
    for _ in 0..count {
        let len = rng.random_range(spec.seizure_min_s..=spec.seizure_max_s).round();
        match place(rng, &seizures, len, spec.duration_s, spec.min_gap_s) {
            Some(e) => seizures.push(e),
            None => log::warn!("session {session}: no room for seizure of {len} s; dropped"),
        }
    }
    seizures.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    Ok(seizures)
}

/// Whether corpus-wide seizure number `g` carries an artifact burst. Flags
/// are spread evenly with a seeded phase, so any prefix of `n` seizures has
/// `round(fraction · n)` flags to within one.
fn artifact_flag(spec: &SynthSpec, g: usize) -> bool {
    let f = spec.artifact_seizure_fraction;
    let phase: f64 = spec.rng(u64::MAX - 1).random();
    ((g + 1) as f64 * f + phase).floor() > (g as f64 * f + phase).floor()
}

pub fn plan_layout(spec: &SynthSpec, session: usize) -> Result<SessionLayout> {
    spec.validate()?;
    let mut before = 0;
    for s in 0..session {
        before += plan_seizures(spec, s, &mut spec.rng(4 * s as u64))?.len();
    }
    let mut rng = spec.rng(4 * session as u64);
    let d = spec.duration_s;
    let gap = spec.min_gap_s;
    let seizures = plan_seizures(spec, session, &mut rng)?;
    let mut occupied = seizures.clone();
    let seizure_artifact = (0..seizures.len()).map(|k| artifact_flag(spec, before + k)).collect();

    let n_art = (spec.interictal_artifacts_per_hour * d / 3600.0).round() as usize;
    let mut interictal_artifacts = Vec::new();
    for _ in 0..n_art {
        let len = rng.random_range(spec.seizure_min_s..=spec.seizure_max_s).round();
        if let Some(e) = place(&mut rng, &occupied, len, d, gap / 2.0) {
            interictal_artifacts.push(e);
            occupied.push(e);
        }
    }
    interictal_artifacts.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));

    let interictal = d - seizures.iter().map(SeizureEvent::duration_s).sum::<f64>();
    let target = spec.benign_motion_fraction * interictal;
    let mut benign_bouts = Vec::new();
    let mut filled = 0.0;
    let mut misses = 0;
    while filled < target && misses < 20 {
        let len = rng.random_range(spec.seizure_min_s..=spec.seizure_max_s).round().min((target - filled).ceil());
        if len < 1.0 {
            break;
        }
        match place(&mut rng, &occupied, len, d, gap / 2.0) {
            Some(e) => {
                filled += len;
                benign_bouts.push(e);
                occupied.push(e);
            }
            None => misses += 1,
        }
    }
    benign_bouts.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    Ok(SessionLayout { seizures, seizure_artifact, interictal_artifacts, benign_bouts })
}

/// Voss-McCartney pink noise scaled to unit RMS.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    const ROWS: usize = 16;
    let mut rows: Vec<f64> = (0..ROWS).map(|_| StandardNormal.sample(rng)).collect();
    let mut total: f64 = rows.iter().sum();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            let k = (i.trailing_zeros() as usize).min(ROWS - 1);
            let fresh: f64 = StandardNormal.sample(rng);
            total += fresh - rows[k];
            rows[k] = fresh;
        }
        let white: f64 = StandardNormal.sample(rng);
        out.push(total + white);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Trapezoid envelope of an interval with linear ramps, at time `t`.
fn envelope(e: &SeizureEvent, t: f64, ramp: f64) -> f64 {
    if t < e.onset_s || t >= e.offset_s {
        return 0.0;
    }
    let r = ramp.max(1e-9);
    ((t - e.onset_s) / r).min((e.offset_s - t) / r).min(1.0)
}

/// Spike-and-wave shaped periodic waveform with unit RMS.
fn spike_wave(phase: f64) -> f64 {
    // harmonic amplitudes 1, 0.6, 0.35 give a sharp leading component
    // RMS of the sum is sqrt((1 + 0.36 + 0.1225) / 2)
    const RMS: f64 = 0.860_958_767_886_128_2;
    (phase.sin() + 0.6 * (2.0 * phase + 0.4).sin() + 0.35 * (3.0 * phase + 0.8).sin()) / RMS
}

fn synth_eeg(spec: &SynthSpec, layout: &SessionLayout, session: usize) -> EegRecording<f64> {
    let mut rng = spec.rng(4 * session as u64 + 1);
    let fs = spec.sample_rate;
    let n = (spec.duration_s * fs).round() as usize;
    let rho = spec.channel_correlation;
    let common = pink_noise(&mut rng, n);
    let mut channels: Vec<Vec<f64>> = (0..spec.channels)
        .map(|_| {
            let own = pink_noise(&mut rng, n);
            common.iter().zip(own).map(|(c, o)| rho.sqrt() * c + (1.0 - rho).sqrt() * o).collect()
        })
        .collect();
    let gain = |c: usize| if c == 0 { 1.0 } else { 0.8 };

    for (e, &art) in layout.seizures.iter().zip(&layout.seizure_artifact) {
        let f = rng.random_range(spec.discharge_min_hz..=spec.discharge_max_hz);
        let phase0 = rng.random_range(0.0..2.0 * PI);
        let amp = spec.ictal_amplitude * if art { spec.artifact_discharge_gain } else { 1.0 };
        let (a, b) = ((e.onset_s * fs) as usize, ((e.offset_s * fs) as usize).min(n));
        for i in a..b {
            let t = i as f64 / fs;
            let v = amp * envelope(e, t, spec.ramp_s) * spike_wave(2.0 * PI * f * t + phase0);
            for (c, ch) in channels.iter_mut().enumerate() {
                ch[i] += gain(c) * v;
            }
        }
    }
    for e in layout.artifact_intervals().copied().collect::<Vec<_>>() {
        let (a, b) = ((e.onset_s * fs) as usize, ((e.offset_s * fs) as usize).min(n));
        for i in a..b {
            let env = spec.artifact_amplitude * envelope(&e, i as f64 / fs, 0.5);
            let shared: f64 = StandardNormal.sample(&mut rng);
            for ch in channels.iter_mut() {
                let own: f64 = StandardNormal.sample(&mut rng);
                ch[i] += env * (0.5f64.sqrt() * shared + 0.5f64.sqrt() * own);
            }
        }
    }
    for ch in channels.iter_mut() {
        let line_phase = rng.random_range(0.0..2.0 * PI);
        let drift_phase = rng.random_range(0.0..2.0 * PI);
        let dc = spec.dc_offset * rng.random_range(-1.0..1.0);
        for (i, v) in ch.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *v += spec.line_noise_amplitude * (2.0 * PI * 50.0 * t + line_phase).sin()
                + spec.drift_amplitude * (2.0 * PI * spec.drift_hz * t + drift_phase).sin()
                + dc;
        }
    }
    EegRecording {
        sample_rate: fs,
        start_time: 0.0,
        channel_names: (0..spec.channels).map(|c| format!("EEG{}", c + 1)).collect(),
        channels,
    }
}

fn synth_video(spec: &SynthSpec, layout: &SessionLayout, session: usize, pattern: &[f64]) -> Result<VideoTokens> {
    let mut rng = spec.rng(4 * session as u64 + 2);
    let d_v = spec.video_d_v;
    let n_frames = (spec.duration_s * VIDEO_FPS).round() as usize;
    let motions: Vec<(SeizureEvent, f64, f64)> = layout
        .motion_intervals()
        .map(|e| (*e, rng.random_range(1.0..3.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    // every frame is drawn so the stream does not depend on decimation
    let mut frames = vec![0.0f64; n_frames * d_v];
    for f in 0..n_frames {
        let t = f as f64 / VIDEO_FPS;
        let row = &mut frames[f * d_v..(f + 1) * d_v];
        let active = motions.iter().find(|(e, _, _)| e.onset_s <= t && t < e.offset_s);
        match active {
            Some((e, fm, ph)) => {
                let energy = envelope(e, t, 1.0) * (1.0 + 0.5 * (2.0 * PI * fm * t + ph).sin());
                for (x, p) in row.iter_mut().zip(pattern) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = spec.motion_amplitude * energy * p + spec.motion_noise * energy * z + spec.rest_noise * {
                        let w: f64 = StandardNormal.sample(&mut rng);
                        w
                    };
                }
            }
            None => {
                for x in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = spec.rest_noise * z;
                }
            }
        }
    }
    let kept = decimate_frames(&(0..n_frames).collect::<Vec<_>>());
    let windows = window_count(spec.duration_s)?;
    let t_v = spec.video_t_v;
    let span = WINDOW_S as f64 / t_v as f64;
    let mut data = Vec::with_capacity(windows * t_v * d_v);
    let mut acc = vec![0.0f64; d_v];
    for w in 0..windows {
        for k in 0..t_v {
            let (lo, hi) = (w as f64 + k as f64 * span, w as f64 + (k + 1) as f64 * span);
            let first = kept.partition_point(|&f| (f as f64) / VIDEO_FPS < lo - 1e-9);
            let last = kept.partition_point(|&f| (f as f64) / VIDEO_FPS < hi - 1e-9);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &f in &kept[first..last] {
                for (a, x) in acc.iter_mut().zip(&frames[f * d_v..(f + 1) * d_v]) {
                    *a += x;
                }
            }
            let cnt = (last - first).max(1) as f64;
            data.extend(acc.iter().map(|a| (a / cnt) as f32));
        }
    }
    VideoTokens::new(t_v, d_v, data)
}

/// Unit-norm-per-dimension motion direction shared by every session.
fn motion_pattern(spec: &SynthSpec) -> Vec<f64> {
    let mut rng = spec.rng(u64::MAX);
    (0..spec.video_d_v).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Builds one session deterministically from the spec.
pub fn generate_session(spec: &SynthSpec, session: usize) -> Result<(Session, SessionLayout)> {
    let layout = plan_layout(spec, session)?;
    let recording = synth_eeg(spec, &layout, session);
    let video = synth_video(spec, &layout, session, &motion_pattern(spec))?;
    let s = Session {
        id: spec.session_id(session),
        subject: spec.subject_of(session),
        recording,
        video,
        events: layout.seizures.clone(),
        duration_s: spec.duration_s,
    };
    s.validate()?;
    Ok((s, layout))
}

pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Vec<Session>> {
    spec.validate()?;
    (0..spec.sessions).map(|i| generate_session(spec, i).map(|(s, _)| s)).collect()
}
