//! Adapters into a shared width, multi-scale temporal convolutions,
//! bidirectional cross-attention, the classification head, the CE + OT
//! objective, supervised training and window inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::mae::{EegMae, PatchGrid};
use crate::ot::{cosine_cost_var, ipot_uniform, ot_loss_var, IpotConfig};
use crate::tensor::nn::{Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{AdamW, CheckpointTensor, AdamWConfig, Init, ParamId, ParamStore, Tensor, Var};

pub const FUSION_PREFIX: &str = "fusion.";

/// Which token streams the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Fusion,
    EegOnly,
    VideoOnly,
}

impl Modality {
    pub fn uses_eeg(self) -> bool {
        self != Modality::VideoOnly
    }

    pub fn uses_video(self) -> bool {
        self != Modality::EegOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Fusion => "fusion",
            Modality::EegOnly => "eeg-only",
            Modality::VideoOnly => "video-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_f: usize,
    pub adapter_layers: usize,
    pub fusion_layers: usize,
    pub kernels: Vec<usize>,
    pub heads: usize,
    /// Hidden width of every feed-forward sublayer, as a multiple of `d_f`.
    pub ff_mult: usize,
    pub dropout: f64,
    pub lambda_ot: f64,
    pub ipot: IpotConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_f: 128,
            adapter_layers: 4,
            fusion_layers: 4,
            kernels: vec![3, 5, 7],
            heads: 4,
            ff_mult: 2,
            dropout: 0.1,
            lambda_ot: 0.1,
            ipot: IpotConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.d_f == 0 || self.heads == 0 || self.d_f % self.heads != 0 {
            return cfg(format!("{} heads do not divide fusion width {}", self.heads, self.d_f));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return cfg(format!("conv kernels {:?} must be odd and nonempty", self.kernels));
        }
        if self.ff_mult == 0 {
            return cfg("feed-forward multiple must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lambda_ot >= 0.0) {
            return cfg(format!("OT weight {} must be nonnegative", self.lambda_ot));
        }
        Ok(())
    }
}

/// Linear projection followed by residual pre-norm feed-forward layers.
#[derive(Debug, Clone)]
pub struct Adapter {
    proj: Linear,
    layers: Vec<(LayerNorm, FeedForward)>,
}

impl Adapter {
    fn new(store: &mut ParamStore<f64>, rng: &mut impl Rng, name: &str, d_in: usize, cfg: &FusionConfig) -> Self {
        let d = cfg.d_f;
        Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), d_in, d),
            layers: (0..cfg.adapter_layers)
                .map(|i| {
                    (
                        LayerNorm::new(store, rng, &format!("{name}.layer{i}.ln"), d),
                        FeedForward::new(store, rng, &format!("{name}.layer{i}.ff"), d, d * cfg.ff_mult, cfg.dropout),
                    )
                })
                .collect(),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<f64>, x: Var) -> Result<Var> {
        let mut h = self.proj.forward(cx, x)?;
        for (ln, ff) in &self.layers {
            let n = ln.forward(cx, h)?;
            let f = ff.forward(cx, n)?;
            h = cx.tape.add(h, f)?;
        }
        Ok(h)
    }
}

/// Parallel depthwise temporal convolutions at several widths, GELU,
/// concatenation, projection back to `d_f` and a residual connection.
#[derive(Debug, Clone)]
pub struct MultiScaleConv {
    ln: LayerNorm,
    kernels: Vec<(ParamId, usize)>,
    proj: Linear,
}

impl MultiScaleConv {
    fn new(store: &mut ParamStore<f64>, rng: &mut impl Rng, name: &str, cfg: &FusionConfig) -> Self {
        let d = cfg.d_f;
        Self {
            ln: LayerNorm::new(store, rng, &format!("{name}.ln"), d),
            kernels: cfg
                .kernels
                .iter()
                .map(|&k| (store.add(format!("{name}.dw{k}"), &[d, k], Init::Normal(1.0 / (k as f64).sqrt()), rng), k))
                .collect(),
            proj: Linear::new(store, rng, &format!("{name}.proj"), d * cfg.kernels.len(), d),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<f64>, x: Var) -> Result<Var> {
        let t = cx.tape.value(x).dims2()?.0;
        let kmax = self.kernels.iter().map(|k| k.1).max().unwrap_or(1);
        if t < kmax {
            return Err(Error::Contract(format!("token sequence of length {t} is shorter than kernel {kmax}")));
        }
        let h = self.ln.forward(cx, x)?;
        let mut branches = Vec::with_capacity(self.kernels.len());
        for &(id, _) in &self.kernels {
            let k = cx.p(id);
            let y = cx.tape.depthwise_conv(h, k)?;
            branches.push(cx.tape.gelu(y));
        }
        let cat = if branches.len() == 1 { branches[0] } else { cx.tape.concat_cols(&branches)? };
        let y = self.proj.forward(cx, cat)?;
        cx.tape.add(x, y)
    }
}

/// Attention sublayer with pre-norm on both query and context streams.
#[derive(Debug, Clone)]
struct AttnSublayer {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
}

impl AttnSublayer {
    fn new(store: &mut ParamStore<f64>, rng: &mut impl Rng, name: &str, cfg: &FusionConfig) -> Self {
        Self {
            ln_q: LayerNorm::new(store, rng, &format!("{name}.ln_q"), cfg.d_f),
            ln_kv: LayerNorm::new(store, rng, &format!("{name}.ln_kv"), cfg.d_f),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.d_f, cfg.heads),
        }
    }

    /// Returns the update `Attn(LN(q), LN(kv))` (no residual) and the weights.
    fn update(&self, cx: &mut Ctx<f64>, q: Var, kv: Var) -> Result<(Var, Vec<Var>)> {
        let qn = self.ln_q.forward(cx, q)?;
        let kn = self.ln_kv.forward(cx, kv)?;
        self.attn.forward(cx, qn, kn)
    }
}

#[derive(Debug, Clone)]
struct FfnSublayer {
    ln: LayerNorm,
    ff: FeedForward,
}

impl FfnSublayer {
    fn new(store: &mut ParamStore<f64>, rng: &mut impl Rng, name: &str, cfg: &FusionConfig) -> Self {
        Self {
            ln: LayerNorm::new(store, rng, &format!("{name}.ln"), cfg.d_f),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), cfg.d_f, cfg.d_f * cfg.ff_mult, cfg.dropout),
        }
    }

    fn forward(&self, cx: &mut Ctx<f64>, x: Var) -> Result<Var> {
        let h = self.ln.forward(cx, x)?;
        let f = self.ff.forward(cx, h)?;
        cx.tape.add(x, f)
    }
}

/// One fusion layer. With both streams: convolutions on each, then EEG
/// attends to video and video to EEG (both from the pre-update streams),
/// then a feed-forward per stream. A single stream uses self-attention.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    eeg: Option<(MultiScaleConv, AttnSublayer, FfnSublayer)>,
    video: Option<(MultiScaleConv, AttnSublayer, FfnSublayer)>,
}

/// Attention matrices of one layer, one entry per head.
#[derive(Debug, Clone, Default)]
pub struct LayerAttention {
    pub eeg_queries: Vec<Var>,
    pub video_queries: Vec<Var>,
}

impl FusionLayer {
    fn new(store: &mut ParamStore<f64>, rng: &mut impl Rng, name: &str, cfg: &FusionConfig, modality: Modality) -> Self {
        let mut stream = |s: &str| {
            (
                MultiScaleConv::new(store, rng, &format!("{name}.{s}.conv"), cfg),
                AttnSublayer::new(store, rng, &format!("{name}.{s}.attn"), cfg),
                FfnSublayer::new(store, rng, &format!("{name}.{s}.ffn"), cfg),
            )
        };
        let eeg = modality.uses_eeg().then(|| stream("eeg"));
        let video = modality.uses_video().then(|| stream("video"));
        Self { eeg, video }
    }

    pub fn forward(&self, cx: &mut Ctx<f64>, e: Option<Var>, v: Option<Var>) -> Result<(Option<Var>, Option<Var>, LayerAttention)> {
        let mut att = LayerAttention::default();
        let e = match (&self.eeg, e) {
            (Some(s), Some(x)) => Some(s.0.forward(cx, x)?),
            _ => None,
        };
        let v = match (&self.video, v) {
            (Some(s), Some(x)) => Some(s.0.forward(cx, x)?),
            _ => None,
        };
        let (e_ctx, v_ctx) = match (e, v) {
            (Some(e), Some(v)) => (v, e),
            (Some(e), None) => (e, e),
            (None, Some(v)) => (v, v),
            (None, None) => return Err(Error::Contract("fusion layer received no token stream".into())),
        };
        let e2 = match (&self.eeg, e) {
            (Some(s), Some(x)) => {
                let (u, w) = s.1.update(cx, x, e_ctx)?;
                att.eeg_queries = w;
                let x = cx.tape.add(x, u)?;
                Some(s.2.forward(cx, x)?)
            }
            _ => None,
        };
        let v2 = match (&self.video, v) {
            (Some(s), Some(x)) => {
                let (u, w) = s.1.update(cx, x, v_ctx)?;
                att.video_queries = w;
                let x = cx.tape.add(x, u)?;
                Some(s.2.forward(cx, x)?)
            }
            _ => None,
        };
        Ok((e2, v2, att))
    }
}

/// Mean pool, Linear, GELU, dropout, Linear to two logits.
#[derive(Debug, Clone)]
pub struct Head {
    fc1: Linear,
    fc2: Linear,
    dropout: f64,
}

impl Head {
    pub fn forward(&self, cx: &mut Ctx<f64>, tokens: Var) -> Result<Var> {
        let pooled = cx.tape.mean_rows(tokens)?;
        let h = self.fc1.forward(cx, pooled)?;
        let h = cx.tape.gelu(h);
        let h = cx.dropout(h, self.dropout)?;
        self.fc2.forward(cx, h)
    }
}

/// EEG side of one window: cached frozen-encoder tokens, or raw patches when
/// the encoder is trained along with the classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum EegInput {
    Encoded(Tensor<f64>),
    Patches(PatchGrid),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowInput {
    pub eeg: Option<EegInput>,
    pub video: Option<Tensor<f64>>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// `lambda_ot · tr(CᵀT*)` on the adapted tokens, when both streams exist.
    pub ot: Option<Var>,
    pub plan: Option<Tensor<f64>>,
    pub attention: Vec<LayerAttention>,
    pub adapted_eeg: Option<Var>,
    pub adapted_video: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub modality: Modality,
    /// Present when EEG arrives as raw patches (encoder trained end to end).
    pub encoder: Option<EegMae>,
    eeg_adapter: Option<Adapter>,
    video_adapter: Option<Adapter>,
    layers: Vec<FusionLayer>,
    head: Head,
}

impl FusionModel {
    /// `d_eeg` and `d_video` are the token widths entering the adapters.
    pub fn new(
        cfg: FusionConfig,
        modality: Modality,
        d_eeg: usize,
        d_video: usize,
        encoder: Option<EegMae>,
        store: &mut ParamStore<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(enc) = &encoder {
            if enc.cfg.d_model != d_eeg {
                return Err(dim_err(format!("encoder width {} vs EEG token width {d_eeg}", enc.cfg.d_model)));
            }
        }
        let p = FUSION_PREFIX;
        let eeg_adapter = modality.uses_eeg().then(|| Adapter::new(store, rng, &format!("{p}eeg_adapter"), d_eeg, &cfg));
        let video_adapter =
            modality.uses_video().then(|| Adapter::new(store, rng, &format!("{p}video_adapter"), d_video, &cfg));
        let layers =
            (0..cfg.fusion_layers).map(|i| FusionLayer::new(store, rng, &format!("{p}layer{i}"), &cfg, modality)).collect();
        let head = Head {
            fc1: Linear::new(store, rng, &format!("{p}head.fc1"), cfg.d_f, cfg.d_f),
            fc2: Linear::new(store, rng, &format!("{p}head.fc2"), cfg.d_f, 2),
            dropout: cfg.dropout,
        };
        Ok(Self { cfg, modality, encoder, eeg_adapter, video_adapter, layers, head })
    }

    fn eeg_tokens(&self, cx: &mut Ctx<f64>, input: &EegInput) -> Result<Var> {
        match (input, &self.encoder) {
            (EegInput::Encoded(t), _) => Ok(cx.tape.constant(t.clone())),
            (EegInput::Patches(g), Some(enc)) => {
                let plan = crate::mae::MaskPlan::none(g.channels, g.n_patches);
                enc.encode(cx, g, &plan)
            }
            (EegInput::Patches(_), None) => Err(Error::Contract("raw EEG patches given to a model without an encoder".into())),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<f64>, input: &WindowInput) -> Result<Forward> {
        self.forward_with_plan(cx, input, None)
    }

    /// Like `forward`, but with the transport plan supplied instead of solved
    /// for. Since the plan carries no gradient, holding it fixed is what lets
    /// finite differences reproduce the analytic gradient.
    pub fn forward_with_plan(&self, cx: &mut Ctx<f64>, input: &WindowInput, plan: Option<&Tensor<f64>>) -> Result<Forward> {
        let e = match (&self.eeg_adapter, &input.eeg) {
            (Some(a), Some(x)) => {
                let t = self.eeg_tokens(cx, x)?;
                if cx.tape.value(t).dims2()?.0 == 0 {
                    return Err(Error::Contract("empty EEG token stream".into()));
                }
                Some(a.forward(cx, t)?)
            }
            (Some(_), None) => return Err(Error::Contract(format!("{} model needs EEG tokens", self.modality.name()))),
            (None, _) => None,
        };
        let v = match (&self.video_adapter, &input.video) {
            (Some(a), Some(x)) => {
                if x.dims2()?.0 == 0 {
                    return Err(Error::Contract("empty video token stream".into()));
                }
                let t = cx.tape.constant(x.clone());
                Some(a.forward(cx, t)?)
            }
            (Some(_), None) => return Err(Error::Contract(format!("{} model needs video tokens", self.modality.name()))),
            (None, _) => None,
        };
        let ot = match (e, v) {
            (Some(e), Some(v)) => {
                let c = cosine_cost_var(&mut cx.tape, e, v)?;
                let t = match plan {
                    Some(t) => t.clone(),
                    None => ipot_uniform(cx.tape.value(c), &self.cfg.ipot)?.plan,
                };
                let loss = ot_loss_var(&mut cx.tape, c, &t, self.cfg.lambda_ot)?;
                Some((loss, t))
            }
            _ => None,
        };
        let (ot, plan) = ot.unzip();
        let (adapted_eeg, adapted_video) = (e, v);
        let (mut e, mut v) = (e, v);
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (e2, v2, a) = l.forward(cx, e, v)?;
            e = e2;
            v = v2;
            attention.push(a);
        }
        let tokens = match (e, v) {
            (Some(e), Some(v)) => cx.tape.concat_rows(&[e, v])?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => return Err(Error::Contract("no token stream to classify".into())),
        };
        let logits = self.head.forward(cx, tokens)?;
        Ok(Forward { logits, ot, plan, attention, adapted_eeg, adapted_video })
    }

    /// Softmax probability of the seizure class, evaluation mode.
    pub fn predict(&self, store: &ParamStore<f64>, input: &WindowInput) -> Result<f64> {
        let mut cx = Ctx::new(store, false, ChaCha8Rng::seed_from_u64(0));
        let f = self.forward(&mut cx, input)?;
        let z = cx.tape.value(f.logits).data();
        let p = 1.0 / (1.0 + (z[0] - z[1]).exp());
        if !p.is_finite() {
            return Err(Error::Numeric(format!("seizure probability is {p} (logits {z:?})")));
        }
        Ok(p)
    }

    /// Cross-entropy plus OT term for one labelled window.
    pub fn loss(&self, cx: &mut Ctx<f64>, input: &WindowInput, label: bool) -> Result<LossTerms> {
        self.loss_with_plan(cx, input, label, None)
    }

    pub fn loss_with_plan(
        &self,
        cx: &mut Ctx<f64>,
        input: &WindowInput,
        label: bool,
        plan: Option<&Tensor<f64>>,
    ) -> Result<LossTerms> {
        let f = self.forward_with_plan(cx, input, plan)?;
        let ce = cx.tape.cross_entropy(f.logits, usize::from(label))?;
        let (total, ot_value) = match f.ot {
            Some(o) if self.cfg.lambda_ot != 0.0 => (cx.tape.add(ce, o)?, cx.tape.item(o)),
            _ => (ce, 0.0),
        };
        Ok(LossTerms { total, ce: cx.tape.item(ce), ot: ot_value })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: f64,
    pub ot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 1e-4, lr_min: 1e-6, weight_decay: 0.01 }
    }
}

/// One optimiser step of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub ot: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epoch_losses: Vec<f64>,
    #[serde(skip)]
    pub optimizer_state: Vec<CheckpointTensor>,
}

/// Mini-batch AdamW over `n` labelled windows produced by `sample(i)`,
/// reshuffled every epoch. Parameters not marked trainable (the frozen
/// encoder) are left untouched.
pub fn train_fusion(
    model: &FusionModel,
    store: &mut ParamStore<f64>,
    n: usize,
    sample: impl Fn(usize) -> Result<(WindowInput, bool)>,
    cfg: &FusionTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    if n == 0 {
        return Err(Error::Data("no training windows".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = per_epoch * cfg.epochs as u64;
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, lr_min: cfg.lr_min, total_steps, weight_decay: cfg.weight_decay, ..Default::default() },
        store,
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(total_steps as usize);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let seed = rng.random::<u64>();
            let mut cx = Ctx::new(&*store, true, ChaCha8Rng::seed_from_u64(seed));
            let (mut ce, mut ot) = (0.0, 0.0);
            let mut sum: Option<Var> = None;
            for &i in chunk {
                let (input, label) = sample(i)?;
                let t = model.loss(&mut cx, &input, label)?;
                ce += t.ce;
                ot += t.ot;
                sum = Some(match sum {
                    Some(s) => cx.tape.add(s, t.total)?,
                    None => t.total,
                });
            }
            let b = chunk.len() as f64;
            let total = cx.tape.scale(sum.expect("nonempty chunk"), 1.0 / b);
            let value = cx.tape.item(total);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {value} at step {} (ce {ce}, ot {ot})",
                    steps.len()
                )));
            }
            let mut tape = cx.into_tape();
            tape.backward(total)?;
            tape.accumulate_into(store);
            drop(tape);
            let lr = opt.step(store)?;
            epoch_sum += value * b;
            steps.push(StepLog { step: steps.len() as u64, lr, ce: ce / b, ot: ot / b, total: value });
        }
        let mean = epoch_sum / n as f64;
        log::info!("{} epoch {epoch}: loss {mean:.4}", model.modality.name());
        epoch_losses.push(mean);
    }
    Ok(TrainReport { steps, epoch_losses, optimizer_state: opt.export(store) })
}
