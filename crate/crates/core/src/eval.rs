//! Window probabilities to 1 s grids, event post-processing, and pooled
//! sample and event metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{SeizureEvent, WINDOW_S};
use crate::error::{Error, Result};

/// Probability of the window starting at `start_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub start_s: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondGrid {
    pub pred: Vec<bool>,
    pub truth: Vec<bool>,
    pub duration_s: f64,
}

/// Rasterizes window probabilities and annotations onto whole seconds.
/// Second `t` is predicted positive iff a window covering it reaches
/// `threshold`; it is a true seizure second iff `onset <= t < offset`.
pub fn to_second_grid(
    predictions: &[WindowPrediction],
    threshold: f64,
    events: &[SeizureEvent],
    duration_s: f64,
) -> Result<SecondGrid> {
    if !(duration_s >= 0.0) {
        return Err(Error::Data(format!("duration {duration_s} is invalid")));
    }
    let n = duration_s.floor() as usize;
    let mut pred = vec![false; n];
    let mut covered = vec![false; n];
    for p in predictions {
        if p.start_s + WINDOW_S > n {
            return Err(Error::Data(format!("window at {} s runs past the {n} s session", p.start_s)));
        }
        if !p.prob.is_finite() {
            return Err(Error::Data(format!("window at {} s has probability {}", p.start_s, p.prob)));
        }
        let hit = p.prob >= threshold;
        for t in p.start_s..p.start_s + WINDOW_S {
            covered[t] = true;
            pred[t] |= hit;
        }
    }
    if let Some(t) = covered.iter().position(|c| !c) {
        return Err(Error::Data(format!("second {t} is not covered by any window prediction")));
    }
    let truth = (0..n)
        .map(|t| {
            let t = t as f64;
            events.iter().any(|e| e.onset_s <= t && t < e.offset_s)
        })
        .collect();
    Ok(SecondGrid { pred, truth, duration_s })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    /// Runs separated by strictly less than this are merged.
    pub merge_gap_s: f64,
    /// Merged events strictly shorter than this are dropped.
    pub min_duration_s: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { merge_gap_s: 5.0, min_duration_s: 10.0 }
    }
}

/// Maximal runs of `true` as half-open second intervals.
pub fn runs(grid: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &v) in grid.iter().enumerate() {
        match (v, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, grid.len()));
    }
    out
}

/// Runs become candidate events, close neighbours merge, short ones drop.
pub fn postprocess_events(grid: &[bool], cfg: &PostprocessConfig) -> Vec<SeizureEvent> {
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (a, b) in runs(grid) {
        match merged.last_mut() {
            Some(last) if ((a - last.1) as f64) < cfg.merge_gap_s => last.1 = b,
            _ => merged.push((a, b)),
        }
    }
    merged
        .into_iter()
        .filter(|(a, b)| ((b - a) as f64) >= cfg.min_duration_s)
        .map(|(a, b)| SeizureEvent { onset_s: a as f64, offset_s: b as f64 })
        .collect()
}

/// Inverse of [`postprocess_events`] output: events back onto a grid.
pub fn events_to_grid(events: &[SeizureEvent], len: usize) -> Vec<bool> {
    (0..len)
        .map(|t| {
            let t = t as f64;
            events.iter().any(|e| e.onset_s <= t && t < e.offset_s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn add_grid(&mut self, g: &SecondGrid) {
        for (&p, &t) in g.pred.iter().zip(&g.truth) {
            match (p, t) {
                (true, true) => self.tp += 1,
                (false, false) => self.tn += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn balanced_accuracy(&self) -> Option<f64> {
        Some((self.sensitivity()? + self.specificity()?) / 2.0)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Pools per-second counts over every grid.
pub fn sample_metrics(grids: &[SecondGrid]) -> Result<Confusion> {
    if grids.is_empty() {
        return Err(Error::Data("no grids to score".into()));
    }
    let mut c = Confusion::default();
    for g in grids {
        if g.pred.len() != g.truth.len() {
            return Err(Error::Data("prediction and truth grids differ in length".into()));
        }
        c.add_grid(g);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    /// Annotated events overlapped by at least one prediction.
    pub gt_detected: u64,
    pub gt_missed: u64,
    /// Predicted events overlapping at least one annotation.
    pub pred_tp: u64,
    pub pred_fp: u64,
}

impl EventCounts {
    pub fn merge(&mut self, o: &EventCounts) {
        self.gt_detected += o.gt_detected;
        self.gt_missed += o.gt_missed;
        self.pred_tp += o.pred_tp;
        self.pred_fp += o.pred_fp;
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.gt_detected, self.gt_detected + self.gt_missed)
    }
}

/// One row of the per-event audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMatch {
    pub session: String,
    pub kind: EventKind,
    pub onset_s: f64,
    pub offset_s: f64,
    /// Number of events of the other kind it overlaps.
    pub overlaps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Truth,
    Predicted,
}

impl EventMatch {
    pub fn decision(&self) -> &'static str {
        match (self.kind, self.overlaps > 0) {
            (EventKind::Truth, true) => "detected",
            (EventKind::Truth, false) => "missed",
            (EventKind::Predicted, true) => "true_positive",
            (EventKind::Predicted, false) => "false_positive",
        }
    }
}

/// Overlap matching for one session. A prediction touching several
/// annotations detects all of them and counts once as a true positive.
pub fn match_events(session: &str, predicted: &[SeizureEvent], truth: &[SeizureEvent]) -> (EventCounts, Vec<EventMatch>) {
    let mut c = EventCounts::default();
    let mut audit = Vec::with_capacity(predicted.len() + truth.len());
    for g in truth {
        let k = predicted.iter().filter(|p| p.overlaps(g)).count();
        if k > 0 {
            c.gt_detected += 1;
        } else {
            c.gt_missed += 1;
        }
        audit.push(EventMatch { session: session.into(), kind: EventKind::Truth, onset_s: g.onset_s, offset_s: g.offset_s, overlaps: k });
    }
    for p in predicted {
        let k = truth.iter().filter(|g| g.overlaps(p)).count();
        if k > 0 {
            c.pred_tp += 1;
        } else {
            c.pred_fp += 1;
        }
        audit.push(EventMatch { session: session.into(), kind: EventKind::Predicted, onset_s: p.onset_s, offset_s: p.offset_s, overlaps: k });
    }
    (c, audit)
}

/// False alarms per hour.
pub fn event_far(counts: &EventCounts, hours: f64) -> Result<f64> {
    if !(hours > 0.0) {
        return Err(Error::Contract(format!("false alarm rate needs positive recorded hours, got {hours}")));
    }
    Ok(counts.pred_fp as f64 / hours)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sample_sensitivity: Option<f64>,
    pub sample_specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub event_sensitivity: Option<f64>,
    pub event_far_per_hour: f64,
    pub samples: Confusion,
    pub events: EventCounts,
    pub total_hours: f64,
}

impl MetricsReport {
    pub fn from_counts(samples: Confusion, events: EventCounts, total_hours: f64) -> Result<Self> {
        Ok(Self {
            sample_sensitivity: samples.sensitivity(),
            sample_specificity: samples.specificity(),
            balanced_accuracy: samples.balanced_accuracy(),
            event_sensitivity: events.sensitivity(),
            event_far_per_hour: event_far(&events, total_hours)?,
            samples,
            events,
            total_hours,
        })
    }
}

/// Everything scored for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInput<'a> {
    pub session: &'a str,
    pub predictions: &'a [WindowPrediction],
    pub truth: &'a [SeizureEvent],
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub audit: Vec<EventMatch>,
    pub predicted_events: Vec<(String, Vec<SeizureEvent>)>,
}

/// Scores a test set: raw grids feed the sample metrics, post-processed
/// events feed the event metrics, both pooled over sessions.
pub fn evaluate(inputs: &[SessionInput<'_>], threshold: f64, post: &PostprocessConfig) -> Result<Evaluation> {
    if inputs.is_empty() {
        return Err(Error::Data("no sessions to evaluate".into()));
    }
    let mut samples = Confusion::default();
    let mut events = EventCounts::default();
    let mut audit = Vec::new();
    let mut predicted_events = Vec::new();
    let mut seconds = 0.0;
    for s in inputs {
        let grid = to_second_grid(s.predictions, threshold, s.truth, s.duration_s)?;
        samples.add_grid(&grid);
        let pred = postprocess_events(&grid.pred, post);
        let (c, a) = match_events(s.session, &pred, s.truth);
        events.merge(&c);
        audit.extend(a);
        predicted_events.push((s.session.to_string(), pred));
        seconds += s.duration_s;
    }
    let metrics = MetricsReport::from_counts(samples, events, seconds / 3600.0)?;
    Ok(Evaluation { metrics, audit, predicted_events })
}

pub fn audit_csv(rows: &[EventMatch]) -> String {
    let mut s = String::from("session,kind,onset_s,offset_s,overlaps,decision\n");
    for r in rows {
        let kind = match r.kind {
            EventKind::Truth => "truth",
            EventKind::Predicted => "predicted",
        };
        let _ = writeln!(s, "{},{kind},{},{},{},{}", r.session, r.onset_s, r.offset_s, r.overlaps, r.decision());
    }
    s
}

/// Report file contents: metrics plus where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub config_fingerprint: String,
    pub threshold: f64,
    pub split: serde_json::Value,
    pub metrics: MetricsReport,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

/// Fixed-width comparison table, one row per report.
pub fn render_table(reports: &[Report]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>8} {:>11} {:>11} {:>10} {:>16}",
        "Model", "BA", "Sample Sens", "Sample Spec", "Event Sens", "Event FAR (FP/h)"
    );
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>11} {:>11} {:>10} {:>16.4}",
            r.model,
            cell(m.balanced_accuracy),
            cell(m.sample_sensitivity),
            cell(m.sample_specificity),
            cell(m.event_sensitivity),
            m.event_far_per_hour
        );
    }
    s
}
