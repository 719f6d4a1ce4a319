//! End-to-end stages shared by the CLI and the acceptance suite: corpus,
//! preprocessing and split, encoder pre-training, supervised training of the
//! model variants, inference, scoring and checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::{
    downsample_negatives, generate_synthetic_corpus, robust_scale, segment_windows, split_sessions, window_count,
    window_signal, Session, WindowSample,
};
use crate::dsp::{preprocess, EegRecording};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation, Report, SessionInput, WindowPrediction};
use crate::fusion::{train_fusion, EegInput, FusionConfig, FusionModel, Modality, TrainReport, WindowInput};
use crate::io;
use crate::mae::{patchify, pretrain, EegMae, MaeConfig, PatchGrid, PretrainReport, DECODER_PREFIX, ENCODER_PREFIX};
use crate::tensor::nn::Ctx;
use crate::tensor::{Checkpoint, ParamStore, Tensor};

const MAE_PREFIX: &str = "mae.";

// Independent random streams derived from the experiment seed.
const STREAM_SPLIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_NEGATIVES: u64 = 3;
const STREAM_TRAIN: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The configured corpus: read from `corpus_dir`, or generated. Generated
/// EEG is rounded to f32 so it matches what a written corpus reads back as.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Vec<Session>> {
    match &cfg.corpus_dir {
        Some(dir) => Ok(io::read_corpus(dir)?.1),
        None => generate_corpus(cfg),
    }
}

pub fn generate_corpus(cfg: &ExperimentConfig) -> Result<Vec<Session>> {
    let mut sessions = generate_synthetic_corpus(&cfg.synth)?;
    for s in &mut sessions {
        for ch in &mut s.recording.channels {
            ch.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
    Ok(sessions)
}

/// SHA-256 over the serialized EEG, video and annotations of every session.
pub fn corpus_fingerprint(sessions: &[Session]) -> Result<String> {
    let mut h = Sha256::new();
    for s in sessions {
        h.update(s.id.as_bytes());
        h.update(s.subject.as_bytes());
        h.update(io::eeg_to_bytes(&s.recording));
        h.update(io::video_to_bytes(&s.video));
        h.update(serde_json::to_vec(&s.events)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Sessions with filtered, standardised EEG and a train/test split.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub sessions: Vec<Session>,
    pub scaled: Vec<EegRecording<f64>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, sessions: Vec<Session>) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::Data("corpus has no sessions".into()));
        }
        let mut scaled = Vec::with_capacity(sessions.len());
        for s in &sessions {
            s.validate()?;
            if s.recording.channels.len() != cfg.mae.channels {
                return Err(Error::Config(format!(
                    "session {} has {} channels, encoder expects {}",
                    s.id,
                    s.recording.channels.len(),
                    cfg.mae.channels
                )));
            }
            scaled.push(robust_scale(&preprocess(&s.recording, &cfg.preprocess)?)?);
        }
        let subjects: Vec<String> = sessions.iter().map(|s| s.subject.clone()).collect();
        let (train, test) = split_sessions(&subjects, &cfg.split, &mut stream_rng(cfg.seed, STREAM_SPLIT))?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!("split leaves {} train and {} test sessions", train.len(), test.len())));
        }
        Ok(Self { cfg, sessions, scaled, train, test })
    }

    pub fn session_index(&self, id: &str) -> Result<usize> {
        self.sessions
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Data(format!("session {id} is not in the corpus")))
    }

    /// Patches of the window starting at `start_s` of session `s`.
    pub fn grid(&self, s: usize, start_s: usize) -> Result<PatchGrid> {
        patchify(&window_signal(&self.scaled[s], start_s, self.cfg.mae.window_samples)?, self.cfg.mae.patch_len)
    }

    /// Video tokens `[T_v, D_v]` of the window starting at `start_s`.
    pub fn video(&self, s: usize, start_s: usize) -> Result<Tensor<f64>> {
        let v = &self.sessions[s].video;
        if start_s >= v.windows() {
            return Err(Error::Data(format!("no video tokens for window {start_s} of {}", self.sessions[s].id)));
        }
        Tensor::new(vec![v.t_v, v.d_v], v.window(start_s).iter().map(|&x| f64::from(x)).collect())
    }

    /// Every window of every training session, unlabelled.
    pub fn pretrain_windows(&self) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for &s in &self.train {
            out.extend((0..window_count(self.sessions[s].duration_s)?).map(|w| (s, w)));
        }
        Ok(out)
    }

    /// Labelled training windows with negatives downsampled once per split.
    pub fn training_windows(&self) -> Result<Vec<WindowSample>> {
        let mut all = Vec::new();
        for &s in &self.train {
            let sess = &self.sessions[s];
            all.extend(segment_windows(s, sess.duration_s, &sess.events)?);
        }
        downsample_negatives(&all, self.cfg.negative_ratio, &mut stream_rng(self.cfg.seed, STREAM_NEGATIVES))
    }

    pub fn split_json(&self) -> serde_json::Value {
        let ids = |v: &[usize]| v.iter().map(|&i| self.sessions[i].id.clone()).collect::<Vec<_>>();
        json!({
            "split": self.cfg.split,
            "seed": self.cfg.seed,
            "train": ids(&self.train),
            "test": ids(&self.test),
        })
    }
}

/// An encoder and the store holding its weights.
pub struct Encoder {
    pub model: EegMae,
    pub store: ParamStore<f64>,
}

pub struct Pretrained {
    pub encoder: Encoder,
    pub report: PretrainReport,
}

pub fn pretrain_encoder(ws: &Workspace) -> Result<Pretrained> {
    let mut rng = stream_rng(ws.cfg.seed, STREAM_PRETRAIN);
    let mut store = ParamStore::new();
    let model = EegMae::new(ws.cfg.mae.clone(), &mut store, &mut rng)?;
    let windows = ws.pretrain_windows()?;
    let report = pretrain(&model, &mut store, windows.len(), |i| ws.grid(windows[i].0, windows[i].1), &ws.cfg.pretrain, &mut rng)?;
    Ok(Pretrained { encoder: Encoder { model, store }, report })
}

pub fn pretrain_checkpoint(cfg: &ExperimentConfig, p: &Pretrained) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.fingerprint(), json!({ "kind": "mae", "mae": p.encoder.model.cfg, "seed": cfg.seed }));
    ck.add_params(&p.encoder.store);
    ck.tensors.extend(p.report.optimizer_state.iter().cloned());
    ck
}

/// Rebuilds the encoder from a pre-training checkpoint, which must have been
/// written for the configured encoder.
pub fn load_pretrained(cfg: &MaeConfig, ck: &Checkpoint) -> Result<Encoder> {
    if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("mae") {
        return Err(Error::Format("not a pre-training checkpoint".into()));
    }
    let stored: MaeConfig = serde_json::from_value(ck.metadata["mae"].clone())?;
    if &stored != cfg {
        return Err(Error::Config("pre-training checkpoint was written for a different encoder config".into()));
    }
    let mut store = ParamStore::new();
    let model = EegMae::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore_params(&mut store, "")?;
    Ok(Encoder { model, store })
}

/// Frozen-encoder tokens for each `(session, start_s)`.
pub fn encode_windows(enc: &EegMae, store: &ParamStore<f64>, ws: &Workspace, windows: &[(usize, usize)]) -> Result<Vec<Tensor<f64>>> {
    windows.iter().map(|&(s, w)| enc.encode_window(store, &ws.grid(s, w)?)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// OT weight forced to zero.
    NoOt,
    /// Randomly initialised EEG encoder trained with the classifier.
    NoPretrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub modality: Modality,
    pub ablation: Option<Ablation>,
}

impl Variant {
    pub const FUSION: Variant = Variant { modality: Modality::Fusion, ablation: None };
    pub const EEG_ONLY: Variant = Variant { modality: Modality::EegOnly, ablation: None };
    pub const VIDEO_ONLY: Variant = Variant { modality: Modality::VideoOnly, ablation: None };
    pub const NO_OT: Variant = Variant { modality: Modality::Fusion, ablation: Some(Ablation::NoOt) };
    pub const NO_PRETRAIN: Variant = Variant { modality: Modality::Fusion, ablation: Some(Ablation::NoPretrain) };

    pub fn new(modality: Modality, ablation: Option<Ablation>) -> Result<Self> {
        if ablation == Some(Ablation::NoPretrain) && !modality.uses_eeg() {
            return Err(Error::Config("no_pretrain needs an EEG stream".into()));
        }
        Ok(Self { modality, ablation })
    }

    pub fn name(&self) -> String {
        match self.ablation {
            None => self.modality.name().to_string(),
            Some(Ablation::NoOt) => format!("{}-no_ot", self.modality.name()),
            Some(Ablation::NoPretrain) => format!("{}-no_pretrain", self.modality.name()),
        }
    }

    pub fn fusion_config(&self, base: &FusionConfig) -> FusionConfig {
        let mut c = base.clone();
        if self.ablation == Some(Ablation::NoOt) {
            c.lambda_ot = 0.0;
        }
        c
    }

    /// Whether EEG enters through a frozen pre-trained encoder.
    pub fn frozen_encoder(&self) -> bool {
        self.modality.uses_eeg() && self.ablation != Some(Ablation::NoPretrain)
    }
}

/// A classifier with every parameter it uses, encoder included.
pub struct Trained {
    pub variant: Variant,
    pub model: FusionModel,
    pub store: ParamStore<f64>,
    pub report: TrainReport,
    /// Encoder checksum before and after supervised training.
    pub encoder_checksums: Option<(String, String)>,
}

fn build_model(
    mae: &MaeConfig,
    fusion: &FusionConfig,
    variant: Variant,
    d_video: usize,
    store: &mut ParamStore<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<FusionModel> {
    let encoder = if variant.modality.uses_eeg() { Some(EegMae::new(mae.clone(), store, rng)?) } else { None };
    let encoder = match variant.ablation {
        Some(Ablation::NoPretrain) => {
            store.set_trainable(DECODER_PREFIX, false);
            encoder
        }
        _ => {
            store.set_trainable(MAE_PREFIX, false);
            None
        }
    };
    FusionModel::new(variant.fusion_config(fusion), variant.modality, mae.d_model, d_video, encoder, store, rng)
}

/// Training data shared by every variant: the labelled windows and, when a
/// pre-trained encoder exists, their cached EEG tokens.
pub struct TrainingData {
    pub windows: Vec<WindowSample>,
    pub eeg_tokens: Option<Vec<Tensor<f64>>>,
}

impl TrainingData {
    pub fn new(ws: &Workspace, encoder: Option<&Encoder>) -> Result<Self> {
        let windows = ws.training_windows()?;
        let eeg_tokens = match encoder {
            Some(p) => {
                let idx: Vec<(usize, usize)> = windows.iter().map(|w| (w.session, w.start_s)).collect();
                Some(encode_windows(&p.model, &p.store, ws, &idx)?)
            }
            None => None,
        };
        Ok(Self { windows, eeg_tokens })
    }
}

pub fn train_variant(ws: &Workspace, variant: Variant, encoder: Option<&Encoder>, data: &TrainingData) -> Result<Trained> {
    let mut rng = stream_rng(ws.cfg.seed, STREAM_TRAIN);
    let mut store = ParamStore::new();
    let d_video = ws.sessions[0].video.d_v;
    let model = build_model(&ws.cfg.mae, &ws.cfg.fusion, variant, d_video, &mut store, &mut rng)?;
    let tokens = if variant.frozen_encoder() {
        let p = encoder
            .ok_or_else(|| Error::MissingArtifact(format!("pre-trained encoder checkpoint (needed by {})", variant.name())))?;
        copy_params(&p.store, &mut store, MAE_PREFIX)?;
        Some(data.eeg_tokens.as_ref().ok_or_else(|| Error::Contract("training windows were not encoded".into()))?)
    } else {
        None
    };
    let before = variant.modality.uses_eeg().then(|| store.checksum(ENCODER_PREFIX));
    let windows = &data.windows;
    let report = train_fusion(
        &model,
        &mut store,
        windows.len(),
        |i| {
            let w = windows[i];
            let eeg = match (variant.modality.uses_eeg(), tokens) {
                (false, _) => None,
                (true, Some(t)) => Some(EegInput::Encoded(t[i].clone())),
                (true, None) => Some(EegInput::Patches(ws.grid(w.session, w.start_s)?)),
            };
            let video = if variant.modality.uses_video() { Some(ws.video(w.session, w.start_s)?) } else { None };
            Ok((WindowInput { eeg, video }, w.label))
        },
        &ws.cfg.train,
        &mut rng,
    )?;
    let encoder_checksums = before.map(|b| (b, store.checksum(ENCODER_PREFIX)));
    Ok(Trained { variant, model, store, report, encoder_checksums })
}

fn copy_params(from: &ParamStore<f64>, to: &mut ParamStore<f64>, prefix: &str) -> Result<()> {
    for (_, name, t) in from.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
        to.load_values(name, t.shape(), &t.data().to_vec())?;
    }
    Ok(())
}

pub fn model_checkpoint(cfg: &ExperimentConfig, t: &Trained) -> Checkpoint {
    let mut ck = Checkpoint::new(
        cfg.fingerprint(),
        json!({
            "kind": "fusion-model",
            "variant": t.variant,
            "mae": cfg.mae,
            "fusion": t.model.cfg,
            "d_video": d_video_of(&t.model, &t.store),
            "seed": cfg.seed,
        }),
    );
    ck.add_params(&t.store);
    ck.tensors.extend(t.report.optimizer_state.iter().cloned());
    ck
}

fn d_video_of(model: &FusionModel, store: &ParamStore<f64>) -> usize {
    if !model.modality.uses_video() {
        return 0;
    }
    store.id("fusion.video_adapter.proj.w").map_or(0, |id| store.get(id).shape()[0])
}

/// A classifier restored from its checkpoint, ready for inference.
pub struct LoadedModel {
    pub variant: Variant,
    pub model: FusionModel,
    pub store: ParamStore<f64>,
    pub fingerprint: String,
}

pub fn load_model(ck: &Checkpoint) -> Result<LoadedModel> {
    let m = &ck.metadata;
    if m.get("kind").and_then(|k| k.as_str()) != Some("fusion-model") {
        return Err(Error::Format("not a classifier checkpoint".into()));
    }
    let variant: Variant = serde_json::from_value(m["variant"].clone())?;
    let mae: MaeConfig = serde_json::from_value(m["mae"].clone())?;
    let fusion: FusionConfig = serde_json::from_value(m["fusion"].clone())?;
    let d_video = m["d_video"].as_u64().ok_or_else(|| Error::Format("checkpoint lacks d_video".into()))? as usize;
    let mut store = ParamStore::new();
    let model = build_model(&mae, &fusion, variant, d_video.max(1), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore_params(&mut store, "")?;
    Ok(LoadedModel { variant, model, store, fingerprint: ck.fingerprint.clone() })
}

/// Inference-time view of a classifier.
pub struct Predictor<'a> {
    pub variant: Variant,
    pub model: &'a FusionModel,
    pub store: &'a ParamStore<f64>,
}

impl<'a> From<&'a Trained> for Predictor<'a> {
    fn from(t: &'a Trained) -> Self {
        Self { variant: t.variant, model: &t.model, store: &t.store }
    }
}

impl<'a> From<&'a LoadedModel> for Predictor<'a> {
    fn from(t: &'a LoadedModel) -> Self {
        Self { variant: t.variant, model: &t.model, store: &t.store }
    }
}

/// Frozen-encoder tokens of every window of some sessions, computed once and
/// shared by all variants that use the pre-trained encoder.
pub type TokenCache = BTreeMap<usize, Vec<Tensor<f64>>>;

pub fn encode_sessions(p: &Encoder, ws: &Workspace, sessions: &[usize]) -> Result<TokenCache> {
    let mut out = TokenCache::new();
    for &s in sessions {
        let n = window_count(ws.sessions[s].duration_s)?;
        let idx: Vec<(usize, usize)> = (0..n).map(|w| (s, w)).collect();
        out.insert(s, encode_windows(&p.model, &p.store, ws, &idx)?);
    }
    Ok(out)
}

impl Predictor<'_> {
    fn frozen_encoder(&self, ws: &Workspace) -> Result<Option<EegMae>> {
        if self.variant.frozen_encoder() {
            Ok(Some(EegMae::bind(ws.cfg.mae.clone(), self.store)?))
        } else {
            Ok(None)
        }
    }

    fn input(&self, ws: &Workspace, enc: Option<&EegMae>, cached: Option<&[Tensor<f64>]>, s: usize, w: usize) -> Result<WindowInput> {
        let eeg = if !self.variant.modality.uses_eeg() {
            None
        } else if let Some(c) = cached {
            Some(EegInput::Encoded(c[w].clone()))
        } else if let Some(enc) = enc {
            Some(EegInput::Encoded(enc.encode_window(self.store, &ws.grid(s, w)?)?))
        } else {
            Some(EegInput::Patches(ws.grid(s, w)?))
        };
        let video = if self.variant.modality.uses_video() { Some(ws.video(s, w)?) } else { None };
        Ok(WindowInput { eeg, video })
    }
}

/// One probability per 1 s-stride window of session `s`.
pub fn predict_session(ws: &Workspace, p: &Predictor<'_>, s: usize, cache: Option<&TokenCache>) -> Result<Vec<WindowPrediction>> {
    let n = window_count(ws.sessions[s].duration_s)?;
    let enc = p.frozen_encoder(ws)?;
    let cached = cache.and_then(|c| c.get(&s)).filter(|_| p.variant.frozen_encoder()).map(Vec::as_slice);
    (0..n)
        .map(|w| {
            let prob = p.model.predict(p.store, &p.input(ws, enc.as_ref(), cached, s, w)?)?;
            Ok(WindowPrediction { start_s: w, prob })
        })
        .collect()
}

/// EEG-to-video transport plans of the listed windows of session `s`, in
/// evaluation mode. Only the fusion modality has them.
pub fn transport_plans(ws: &Workspace, p: &Predictor<'_>, s: usize, windows: &[usize]) -> Result<Vec<Tensor<f64>>> {
    if p.variant.modality != Modality::Fusion {
        return Err(Error::Config(format!("{} has no transport plans", p.variant.name())));
    }
    let enc = p.frozen_encoder(ws)?;
    windows
        .iter()
        .map(|&w| {
            let mut cx = Ctx::new(p.store, false, ChaCha8Rng::seed_from_u64(0));
            let f = p.model.forward(&mut cx, &p.input(ws, enc.as_ref(), None, s, w)?)?;
            f.plan.ok_or_else(|| Error::Contract("fusion forward pass produced no plan".into()))
        })
        .collect()
}

pub fn predict_sessions(
    ws: &Workspace,
    p: &Predictor<'_>,
    sessions: &[usize],
    cache: Option<&TokenCache>,
) -> Result<Vec<(String, Vec<WindowPrediction>)>> {
    sessions.iter().map(|&s| Ok((ws.sessions[s].id.clone(), predict_session(ws, p, s, cache)?))).collect()
}

/// Scores predictions against the annotations of the sessions they name.
pub fn evaluate_predictions(
    cfg: &ExperimentConfig,
    sessions: &[Session],
    predictions: &[(String, Vec<WindowPrediction>)],
) -> Result<Evaluation> {
    let inputs = predictions
        .iter()
        .map(|(id, preds)| {
            let s = sessions
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Data(format!("predictions name unknown session {id}")))?;
            Ok(SessionInput { session: &s.id, predictions: preds, truth: &s.events, duration_s: s.duration_s })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&inputs, cfg.threshold, &cfg.postprocess)
}

pub fn make_report(cfg: &ExperimentConfig, model: &str, split: serde_json::Value, e: &Evaluation) -> Report {
    Report {
        model: model.to_string(),
        config_fingerprint: cfg.fingerprint(),
        threshold: cfg.threshold,
        split,
        metrics: e.metrics.clone(),
    }
}

/// Everything one variant produced in a comparison run.
pub struct VariantRun {
    pub trained: Trained,
    pub predictions: Vec<(String, Vec<WindowPrediction>)>,
    pub evaluation: Evaluation,
    pub report: Report,
}

pub struct ExperimentOutcome {
    pub corpus_fingerprint: String,
    pub pretrain: Option<PretrainReport>,
    pub runs: Vec<VariantRun>,
}

/// Pre-trains once, then trains and scores each variant on the same split,
/// training windows and seed.
pub fn run_experiment(cfg: &ExperimentConfig, sessions: Vec<Session>, variants: &[Variant]) -> Result<ExperimentOutcome> {
    let corpus_fingerprint = corpus_fingerprint(&sessions)?;
    let ws = Workspace::new(cfg.clone(), sessions)?;
    let pretrained = if variants.iter().any(|v| v.frozen_encoder()) { Some(pretrain_encoder(&ws)?) } else { None };
    let encoder = pretrained.as_ref().map(|p| &p.encoder);
    let data = TrainingData::new(&ws, encoder)?;
    let cache = match encoder {
        Some(e) => Some(encode_sessions(e, &ws, &ws.test)?),
        None => None,
    };
    let mut runs = Vec::with_capacity(variants.len());
    for &v in variants {
        log::info!("training {}", v.name());
        let trained = train_variant(&ws, v, encoder, &data)?;
        let predictions = predict_sessions(&ws, &Predictor::from(&trained), &ws.test, cache.as_ref())?;
        let evaluation = evaluate_predictions(cfg, &ws.sessions, &predictions)?;
        let report = make_report(cfg, &v.name(), ws.split_json(), &evaluation);
        runs.push(VariantRun { trained, predictions, evaluation, report });
    }
    Ok(ExperimentOutcome { corpus_fingerprint, pretrain: pretrained.map(|p| p.report), runs })
}

/// Artifact locations under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn mae_checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("mae.ckpt")
    }

    pub fn model_dir(&self, v: &Variant) -> PathBuf {
        self.root.join("models").join(v.name())
    }

    pub fn model_checkpoint(&self, v: &Variant) -> PathBuf {
        self.model_dir(v).join("model.ckpt")
    }

    pub fn predictions(&self, v: &Variant) -> PathBuf {
        self.root.join("predictions").join(format!("{}.csv", v.name()))
    }

    pub fn report_dir(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn psd_dir(&self) -> PathBuf {
        self.root.join("psd")
    }
}

/// Creates the parent directory of `path` if needed.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitMode, SynthSpec};
    use crate::fusion::FusionTrainConfig;
    use crate::mae::PretrainConfig;

    /// A corpus and models small enough to run every stage in seconds.
    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            synth: SynthSpec {
                sessions: 3,
                subjects: 3,
                duration_s: 240.0,
                seizures_per_session: 2.0,
                seizure_min_s: 15.0,
                seizure_max_s: 25.0,
                min_gap_s: 30.0,
                video_t_v: 8,
                video_d_v: 8,
                ..SynthSpec::default()
            },
            split: SplitMode::RandomSession { test_sessions: 1 },
            mae: MaeConfig {
                window_samples: 2048,
                patch_len: 512,
                d_model: 8,
                enc_layers: 1,
                enc_heads: 2,
                dec_layers: 1,
                dec_heads: 2,
                d_ff: 16,
                ..MaeConfig::default()
            },
            pretrain: PretrainConfig { steps: 3, batch_size: 2, eval_windows: 2, ..PretrainConfig::default() },
            fusion: FusionConfig { d_f: 8, adapter_layers: 1, fusion_layers: 1, heads: 2, ..FusionConfig::default() },
            train: FusionTrainConfig { epochs: 1, batch_size: 16, ..FusionTrainConfig::default() },
            negative_ratio: 2,
            ..ExperimentConfig::desk()
        }
    }

    #[test]
    fn variant_names() {
        assert_eq!(Variant::FUSION.name(), "fusion");
        assert_eq!(Variant::NO_OT.name(), "fusion-no_ot");
        assert_eq!(Variant::NO_PRETRAIN.name(), "fusion-no_pretrain");
        assert_eq!(Variant::VIDEO_ONLY.name(), "video-only");
        assert!(Variant::new(Modality::VideoOnly, Some(Ablation::NoPretrain)).is_err());
        assert_eq!(Variant::NO_OT.fusion_config(&FusionConfig::default()).lambda_ot, 0.0);
    }

    #[test]
    fn workspace_shapes_and_split() {
        let cfg = tiny_config();
        let ws = Workspace::new(cfg.clone(), generate_corpus(&cfg).unwrap()).unwrap();
        assert_eq!(ws.train.len() + ws.test.len(), 3);
        let g = ws.grid(0, 0).unwrap();
        assert_eq!((g.channels, g.n_patches, g.patch_len), (2, 4, 512));
        assert_eq!(ws.video(0, 230).unwrap().shape(), &[8, 8]);
        assert!(ws.video(0, 231).is_err());
        let tw = ws.training_windows().unwrap();
        let pos = tw.iter().filter(|w| w.label).count();
        assert!(pos > 0 && tw.len() - pos <= 2 * pos);
        assert!(tw.iter().all(|w| ws.train.contains(&w.session)));
    }

    #[test]
    fn trained_model_checkpoint_round_trip() {
        let cfg = tiny_config();
        let ws = Workspace::new(cfg.clone(), generate_corpus(&cfg).unwrap()).unwrap();
        let p = pretrain_encoder(&ws).unwrap();
        let ck = pretrain_checkpoint(&cfg, &p);
        let e = load_pretrained(&cfg.mae, &Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(e.store.checksum(""), p.encoder.store.checksum(""));
        let other = MaeConfig { d_ff: 32, ..cfg.mae.clone() };
        assert!(matches!(load_pretrained(&other, &ck), Err(Error::Config(_))));

        let data = TrainingData::new(&ws, Some(&e)).unwrap();
        let t = train_variant(&ws, Variant::FUSION, Some(&e), &data).unwrap();
        let (before, after) = t.encoder_checksums.clone().unwrap();
        assert_eq!(before, after);
        assert_eq!(before, p.encoder.store.checksum(ENCODER_PREFIX));

        let s = ws.test[0];
        let direct = predict_session(&ws, &Predictor::from(&t), s, None).unwrap();
        assert_eq!(direct.len(), 231);
        let cache = encode_sessions(&e, &ws, &ws.test).unwrap();
        assert_eq!(predict_session(&ws, &Predictor::from(&t), s, Some(&cache)).unwrap(), direct);
        let loaded = load_model(&Checkpoint::from_bytes(&model_checkpoint(&cfg, &t).to_bytes()).unwrap()).unwrap();
        assert_eq!(loaded.variant, Variant::FUSION);
        assert_eq!(predict_session(&ws, &Predictor::from(&loaded), s, None).unwrap(), direct);
        let plans = transport_plans(&ws, &Predictor::from(&loaded), s, &[0, 5]).unwrap();
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[0].shape(), &[8, 8]);
        assert!((plans[0].sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_variant_without_encoder_is_missing_artifact() {
        let cfg = tiny_config();
        let ws = Workspace::new(cfg.clone(), generate_corpus(&cfg).unwrap()).unwrap();
        let data = TrainingData::new(&ws, None).unwrap();
        assert!(matches!(train_variant(&ws, Variant::EEG_ONLY, None, &data), Err(Error::MissingArtifact(_))));
        assert!(train_variant(&ws, Variant::VIDEO_ONLY, None, &data).is_ok());
    }

    #[test]
    fn no_pretrain_trains_the_encoder() {
        let cfg = tiny_config();
        let ws = Workspace::new(cfg.clone(), generate_corpus(&cfg).unwrap()).unwrap();
        let data = TrainingData::new(&ws, None).unwrap();
        let t = train_variant(&ws, Variant::NO_PRETRAIN, None, &data).unwrap();
        let (before, after) = t.encoder_checksums.clone().unwrap();
        assert_ne!(before, after);
        let loaded = load_model(&model_checkpoint(&cfg, &t)).unwrap();
        let s = ws.test[0];
        assert_eq!(
            predict_session(&ws, &Predictor::from(&loaded), s, None).unwrap(),
            predict_session(&ws, &Predictor::from(&t), s, None).unwrap()
        );
    }

    #[test]
    fn short_session_is_a_data_error() {
        assert!(matches!(window_count(9.5), Err(Error::Data(_))));
    }
}
