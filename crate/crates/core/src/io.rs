//! On-disk formats: EEG and video-token binaries, annotation and manifest
//! JSON, prediction CSVs, training logs and PSD tables.
//!
//! EEG file (little-endian): magic `EVFEEG\0\0`, u32 version, f64 sample
//! rate, f64 start time, u32 channel count, u64 samples per channel, one
//! u32-length-prefixed UTF-8 name per channel, then the f32 samples channel
//! by channel.
//!
//! Video-token file: magic `EVFVTOK\0`, u32 version, u32 T_v, u32 D_v, u64
//! window count, then f32 tokens window by window, row-major.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{validate_events, SeizureEvent, Session, VideoTokens};
use crate::dsp::{EegRecording, Psd};
use crate::error::{Error, Result};
use crate::eval::WindowPrediction;
use crate::tensor::Tensor;

pub const EEG_MAGIC: &[u8; 8] = b"EVFEEG\0\0";
pub const VIDEO_MAGIC: &[u8; 8] = b"EVFVTOK\0";
pub const FORMAT_VERSION: u32 = 1;

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("{what} {}", path.display())),
        _ => Error::Io(e),
    })
}

/// Writes `bytes` next to `path` and renames into place, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::Format(format!("truncated {}", self.what)));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format(format!("bad UTF-8 in {}", self.what)))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::Format(format!("oversized {}", self.what)))?;
        Ok(self.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8).map_err(|_| Error::Format(format!("not a {} file", self.what)))? != magic {
            return Err(Error::Format(format!("not a {} file (bad magic)", self.what)));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported {} version {v}", self.what)));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("trailing bytes after {}", self.what)))
        }
    }
}

pub fn eeg_to_bytes(rec: &EegRecording<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + rec.channels.len() * rec.len() * 4);
    out.extend_from_slice(EEG_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&rec.sample_rate.to_le_bytes());
    out.extend_from_slice(&rec.start_time.to_le_bytes());
    out.extend_from_slice(&(rec.channels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
    for name in &rec.channel_names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for ch in &rec.channels {
        for &v in ch {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn eeg_from_bytes(bytes: &[u8]) -> Result<EegRecording<f64>> {
    let mut r = Reader { buf: bytes, what: "EEG" };
    r.header(EEG_MAGIC)?;
    let sample_rate = r.f64()?;
    let start_time = r.f64()?;
    let c = r.u32()? as usize;
    let n = r.u64()? as usize;
    let names = (0..c).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let channels = (0..c)
        .map(|_| Ok(r.f32s(n)?.into_iter().map(f64::from).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    r.finish()?;
    let mut rec = EegRecording::new(sample_rate, names, channels)?;
    rec.start_time = start_time;
    Ok(rec)
}

pub fn write_eeg(path: &Path, rec: &EegRecording<f64>) -> Result<()> {
    write_atomic(path, &eeg_to_bytes(rec))
}

pub fn read_eeg(path: &Path) -> Result<EegRecording<f64>> {
    eeg_from_bytes(&read_file(path, "EEG file")?)
}

/// Small fixtures: a header row of channel names, then one row of samples
/// per time step. The sample rate is not stored in the file.
pub fn eeg_from_csv(text: &str, sample_rate: f64) -> Result<EegRecording<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty EEG CSV".into()))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut channels = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(Error::Format(format!("EEG CSV row {} has {} cells, expected {}", i + 2, cells.len(), names.len())));
        }
        for (ch, cell) in channels.iter_mut().zip(cells) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("EEG CSV row {}: cannot parse {cell:?}", i + 2)))?;
            ch.push(v);
        }
    }
    EegRecording::new(sample_rate, names, channels)
}

pub fn video_to_bytes(v: &VideoTokens) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + v.data.len() * 4);
    out.extend_from_slice(VIDEO_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.t_v as u32).to_le_bytes());
    out.extend_from_slice(&(v.d_v as u32).to_le_bytes());
    out.extend_from_slice(&(v.windows() as u64).to_le_bytes());
    for &x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn video_from_bytes(bytes: &[u8]) -> Result<VideoTokens> {
    let mut r = Reader { buf: bytes, what: "video-token" };
    r.header(VIDEO_MAGIC)?;
    let t_v = r.u32()? as usize;
    let d_v = r.u32()? as usize;
    let w = r.u64()? as usize;
    let n = w.checked_mul(t_v * d_v).ok_or_else(|| Error::Format("oversized video-token file".into()))?;
    let data = r.f32s(n)?;
    r.finish()?;
    VideoTokens::new(t_v, d_v, data)
}

pub fn write_video(path: &Path, v: &VideoTokens) -> Result<()> {
    write_atomic(path, &video_to_bytes(v))
}

pub fn read_video(path: &Path) -> Result<VideoTokens> {
    video_from_bytes(&read_file(path, "video-token file")?)
}

pub fn write_annotations(path: &Path, events: &[SeizureEvent]) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(events)?.as_bytes())
}

pub fn read_annotations(path: &Path) -> Result<Vec<SeizureEvent>> {
    let bytes = read_file(path, "annotation file")?;
    let events: Vec<SeizureEvent> = serde_json::from_slice(&bytes)?;
    for e in &events {
        SeizureEvent::new(e.onset_s, e.offset_s)?;
    }
    Ok(events)
}

/// File names are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject: String,
    pub eeg: String,
    pub video: String,
    pub annotations: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Session id to subject and files, in id order.
    pub sessions: BTreeMap<String, ManifestEntry>,
    /// Content hash of the generator settings, when the corpus is synthetic.
    pub generator_fingerprint: Option<String>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes every session file, then the manifest. A failure part way leaves
/// no manifest behind.
pub fn write_corpus(dir: &Path, sessions: &[Session], generator_fingerprint: Option<String>) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path)?;
    }
    let mut entries = BTreeMap::new();
    for s in sessions {
        s.validate()?;
        let e = ManifestEntry {
            subject: s.subject.clone(),
            eeg: format!("{}.eeg", s.id),
            video: format!("{}.vtok", s.id),
            annotations: format!("{}.events.json", s.id),
        };
        write_eeg(&dir.join(&e.eeg), &s.recording)?;
        write_video(&dir.join(&e.video), &s.video)?;
        write_annotations(&dir.join(&e.annotations), &s.events)?;
        if entries.insert(s.id.clone(), e).is_some() {
            return Err(Error::Data(format!("duplicate session id {}", s.id)));
        }
    }
    let m = Manifest { sessions: entries, generator_fingerprint };
    write_atomic(&manifest_path, serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(&dir.join(MANIFEST), "corpus manifest")?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads every session listed in the manifest, in id order.
pub fn read_corpus(dir: &Path) -> Result<(Manifest, Vec<Session>)> {
    let m = read_manifest(dir)?;
    let mut out = Vec::with_capacity(m.sessions.len());
    for (id, e) in &m.sessions {
        let recording = read_eeg(&dir.join(&e.eeg))?;
        let video = read_video(&dir.join(&e.video))?;
        let events = read_annotations(&dir.join(&e.annotations))?;
        let duration_s = recording.duration_s();
        validate_events(&events, duration_s)?;
        let s = Session { id: id.clone(), subject: e.subject.clone(), recording, video, events, duration_s };
        s.validate()?;
        out.push(s);
    }
    Ok((m, out))
}

/// `session,start_s,probability`, one row per window.
pub fn predictions_csv(rows: &[(String, Vec<WindowPrediction>)]) -> String {
    let mut s = String::from("session,start_s,probability\n");
    for (session, preds) in rows {
        for p in preds {
            let _ = writeln!(s, "{session},{},{}", p.start_s, p.prob);
        }
    }
    s
}

/// Inverse of [`predictions_csv`], grouping rows by session in first-seen
/// order.
pub fn parse_predictions_csv(text: &str) -> Result<Vec<(String, Vec<WindowPrediction>)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "session,start_s,probability" => {}
        _ => return Err(Error::Format("predictions CSV lacks its header".into())),
    }
    let mut out: Vec<(String, Vec<WindowPrediction>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("predictions CSV row {}: {line:?}", i + 2));
        let mut cells = line.split(',');
        let (Some(sess), Some(start), Some(prob), None) = (cells.next(), cells.next(), cells.next(), cells.next()) else {
            return Err(bad());
        };
        let p = WindowPrediction { start_s: start.parse().map_err(|_| bad())?, prob: prob.parse().map_err(|_| bad())? };
        match out.last_mut() {
            Some((s, v)) if s == sess => v.push(p),
            _ => out.push((sess.to_string(), vec![p])),
        }
    }
    Ok(out)
}

/// Provenance stored beside a predictions CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub model: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub checkpoint_fingerprint: String,
    pub sessions: Vec<String>,
}

/// One JSON object per line.
pub fn json_lines<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// `freq_hz,<channel>...`, one row per frequency bin.
pub fn psd_csv(psd: &Psd, channel_names: &[String]) -> String {
    let mut s = String::from("freq_hz");
    for n in channel_names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (i, f) in psd.freqs.iter().enumerate() {
        let _ = write!(s, "{f}");
        for ch in &psd.power {
            let _ = write!(s, ",{}", ch[i]);
        }
        s.push('\n');
    }
    s
}

/// A matrix as CSV rows, for transport-plan dumps.
pub fn matrix_csv(t: &Tensor<f64>) -> Result<String> {
    let (r, c) = t.dims2()?;
    let mut s = String::new();
    for i in 0..r {
        let row: Vec<String> = (0..c).map(|j| t.get2(i, j).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Reads a whole file, reporting a missing one as a missing artifact.
pub fn read_artifact(path: &Path, what: &str) -> Result<String> {
    let bytes = read_file(path, what)?;
    String::from_utf8(bytes).map_err(|_| Error::Format(format!("{what} {} is not UTF-8", path.display())))
}

/// Reads exactly the file's bytes, for hashing artifacts.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}
