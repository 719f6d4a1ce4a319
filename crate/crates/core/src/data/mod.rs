//! Sessions, seizure annotations, 10 s sliding windows with conservative
//! labels, negative downsampling, train/test splits, and the synthetic
//! corpus generator.

mod synth;

pub use synth::{generate_session, generate_synthetic_corpus, plan_layout, SessionLayout, SynthSpec, VIDEO_FPS};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::EegRecording;
use crate::error::{Error, Result};

/// Window length and stride, seconds.
pub const WINDOW_S: usize = 10;
pub const STRIDE_S: usize = 1;

/// Half-open interval `[onset_s, offset_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeizureEvent {
    pub onset_s: f64,
    pub offset_s: f64,
}

impl SeizureEvent {
    pub fn new(onset_s: f64, offset_s: f64) -> Result<Self> {
        if !(offset_s > onset_s) || !onset_s.is_finite() || !offset_s.is_finite() {
            return Err(Error::Data(format!("event [{onset_s}, {offset_s}) is empty or not finite")));
        }
        Ok(Self { onset_s, offset_s })
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }

    /// True when `[start, end)` lies inside the event.
    pub fn contains(&self, start: f64, end: f64) -> bool {
        self.onset_s <= start && end <= self.offset_s
    }

    /// Nonzero intersection of the two half-open intervals.
    pub fn overlaps(&self, other: &SeizureEvent) -> bool {
        self.onset_s < other.offset_s && other.onset_s < self.offset_s
    }
}

/// Checks that events are sorted, non-overlapping and inside `[0, duration]`.
pub fn validate_events(events: &[SeizureEvent], duration_s: f64) -> Result<()> {
    for e in events {
        if !(e.offset_s > e.onset_s) {
            return Err(Error::Data(format!("event [{}, {}) is empty", e.onset_s, e.offset_s)));
        }
        if e.onset_s < 0.0 || e.offset_s > duration_s {
            return Err(Error::Data(format!(
                "event [{}, {}) outside session of {duration_s} s",
                e.onset_s, e.offset_s
            )));
        }
    }
    for w in events.windows(2) {
        if w[1].onset_s < w[0].offset_s {
            return Err(Error::Data("events overlap or are out of order".into()));
        }
    }
    Ok(())
}

/// Per-window video features: `windows` blocks of `t_v × d_v` values, block
/// `w` belonging to the window starting at second `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTokens {
    pub t_v: usize,
    pub d_v: usize,
    pub data: Vec<f32>,
}

impl VideoTokens {
    pub fn new(t_v: usize, d_v: usize, data: Vec<f32>) -> Result<Self> {
        if t_v == 0 || d_v == 0 || data.len() % (t_v * d_v) != 0 {
            return Err(Error::Data(format!("{} values do not form {t_v}x{d_v} token blocks", data.len())));
        }
        Ok(Self { t_v, d_v, data })
    }

    pub fn windows(&self) -> usize {
        self.data.len() / (self.t_v * self.d_v)
    }

    pub fn window(&self, w: usize) -> &[f32] {
        let n = self.t_v * self.d_v;
        &self.data[w * n..(w + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub subject: String,
    pub recording: EegRecording<f64>,
    pub video: VideoTokens,
    pub events: Vec<SeizureEvent>,
    pub duration_s: f64,
}

impl Session {
    pub fn validate(&self) -> Result<()> {
        self.recording.validate()?;
        validate_events(&self.events, self.duration_s)?;
        let expected = window_count(self.duration_s)?;
        if self.video.windows() != expected {
            return Err(Error::Data(format!(
                "session {}: {} video windows, expected {expected}",
                self.id,
                self.video.windows()
            )));
        }
        Ok(())
    }
}

/// Number of 10 s windows at a 1 s stride: `floor(duration) - 9`.
pub fn window_count(duration_s: f64) -> Result<usize> {
    let whole = duration_s.floor();
    if !(whole >= WINDOW_S as f64) {
        return Err(Error::Data(format!("session of {duration_s} s is shorter than one {WINDOW_S} s window")));
    }
    Ok(whole as usize - WINDOW_S + 1)
}

/// One labelled window. EEG and video slices are looked up from the owning
/// session by `session` index and `start_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowSample {
    pub session: usize,
    pub start_s: usize,
    pub label: bool,
}

/// All windows of a session with conservative labels: positive iff the
/// whole window lies inside one annotated event.
pub fn segment_windows(session: usize, duration_s: f64, events: &[SeizureEvent]) -> Result<Vec<WindowSample>> {
    let n = window_count(duration_s)?;
    Ok((0..n)
        .map(|s| {
            let (a, b) = (s as f64, (s + WINDOW_S) as f64);
            WindowSample { session, start_s: s, label: events.iter().any(|e| e.contains(a, b)) }
        })
        .collect())
}

/// Keeps every positive and at most `ratio` negatives per positive, chosen
/// uniformly without replacement. Input order is preserved.
pub fn downsample_negatives(windows: &[WindowSample], ratio: usize, rng: &mut impl Rng) -> Result<Vec<WindowSample>> {
    let pos = windows.iter().filter(|w| w.label).count();
    if pos == 0 {
        return Err(Error::Data("cannot downsample negatives without any positive window".into()));
    }
    let negatives: Vec<usize> = (0..windows.len()).filter(|&i| !windows[i].label).collect();
    let keep = (pos * ratio).min(negatives.len());
    let mut chosen: Vec<usize> = index::sample(rng, negatives.len(), keep).into_iter().map(|k| negatives[k]).collect();
    chosen.extend((0..windows.len()).filter(|&i| windows[i].label));
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| windows[i]).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SplitMode {
    RandomSession { test_sessions: usize },
    HeldOutSubject { subject: String },
}

/// Disjoint `(train, test)` session indices covering `0..subjects.len()`,
/// where `subjects[i]` is the subject of session `i`.
pub fn split_sessions(subjects: &[String], mode: &SplitMode, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = subjects.len();
    let mut test: Vec<usize> = match mode {
        SplitMode::RandomSession { test_sessions } => {
            if *test_sessions > n {
                return Err(Error::Data(format!("cannot hold out {test_sessions} of {n} sessions")));
            }
            index::sample(rng, n, *test_sessions).into_vec()
        }
        SplitMode::HeldOutSubject { subject } => {
            let t: Vec<usize> = (0..n).filter(|&i| &subjects[i] == subject).collect();
            if t.is_empty() {
                return Err(Error::Data(format!("unknown subject {subject}")));
            }
            t
        }
    };
    test.sort_unstable();
    let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
    Ok((train, test))
}

/// Per-channel robust standardisation: subtract the median, divide by the
/// MAD-based standard deviation (plain std when the MAD vanishes).
pub fn robust_scale(rec: &EegRecording<f64>) -> Result<EegRecording<f64>> {
    rec.validate()?;
    let mut out = rec.clone();
    for (name, ch) in out.channel_names.iter().zip(out.channels.iter_mut()) {
        let med = median(ch);
        let dev: Vec<f64> = ch.iter().map(|v| (v - med).abs()).collect();
        let mut scale = 1.482_602_218_505_602 * median(&dev);
        if !(scale > 1e-12) {
            scale = (ch.iter().map(|v| (v - med).powi(2)).sum::<f64>() / ch.len().max(1) as f64).sqrt();
        }
        if !(scale > 1e-12) {
            log::warn!("channel {name} is constant; leaving it centred but unscaled");
            scale = 1.0;
        }
        ch.iter_mut().for_each(|v| *v = (*v - med) / scale);
    }
    Ok(out)
}

fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut v = x.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if v.len() % 2 == 1 {
        m
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + m) / 2.0
    }
}

/// The `[start_s, start_s + 10)` slice of every channel, mirrored at both
/// ends (without repeating the edge sample) up to `padded_len` samples.
pub fn window_signal(rec: &EegRecording<f64>, start_s: usize, padded_len: usize) -> Result<Vec<Vec<f64>>> {
    let fs = rec.sample_rate;
    let a = (start_s as f64 * fs).round() as usize;
    let n = (WINDOW_S as f64 * fs).round() as usize;
    if a + n > rec.len() {
        return Err(Error::Data(format!("window at {start_s} s runs past the {} samples recorded", rec.len())));
    }
    if padded_len < n {
        return Err(Error::Config(format!("padded length {padded_len} is shorter than the {n}-sample window")));
    }
    let left = (padded_len - n) / 2;
    Ok(rec
        .channels
        .iter()
        .map(|ch| {
            let w = &ch[a..a + n];
            (0..padded_len).map(|i| w[crate::dsp::reflect_index(i as isize - left as isize, n)]).collect()
        })
        .collect())
}
