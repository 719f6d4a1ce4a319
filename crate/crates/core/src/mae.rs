//! Masked autoencoder over EEG patches: dual-domain patch embedding,
//! per-channel temporal masking, transformer encoder and decoder, and the
//! masked reconstruction objective.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::nn::{Ctx, LayerNorm, Linear, TransformerBlock};
use crate::tensor::{fft, AdamW, AdamWConfig, CheckpointTensor, Init, ParamId, ParamStore, Tape, Tensor, Var};

/// Parameter name prefixes. Everything under [`ENCODER_PREFIX`] is what the
/// fusion model reuses.
pub const ENCODER_PREFIX: &str = "mae.enc.";
pub const DECODER_PREFIX: &str = "mae.dec.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub channels: usize,
    /// Window length after padding, samples.
    pub window_samples: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub d_ff: usize,
    pub mask_ratio: f64,
    pub conv_kernel: usize,
    pub conv_channels: usize,
    pub dropout: f64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            window_samples: 2048,
            patch_len: 256,
            d_model: 128,
            enc_layers: 2,
            enc_heads: 8,
            dec_layers: 1,
            dec_heads: 8,
            d_ff: 256,
            mask_ratio: 0.75,
            conv_kernel: 7,
            conv_channels: 1,
            dropout: 0.0,
        }
    }
}

impl MaeConfig {
    /// Full-scale depth and widths, with `d_model` 256.
    pub fn full() -> Self {
        Self { d_model: 256, enc_layers: 8, dec_layers: 4, d_ff: 2048, dropout: 0.1, ..Self::default() }
    }

    pub fn n_patches(&self) -> usize {
        self.window_samples / self.patch_len.max(1)
    }

    pub fn tokens(&self) -> usize {
        self.channels * self.n_patches()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.patch_len == 0 {
            return cfg("channels and patch length must be positive".into());
        }
        fft::check_pow2(self.patch_len).map_err(|_| Error::Config(format!("patch length {} is not a power of two", self.patch_len)))?;
        if self.window_samples % self.patch_len != 0 {
            return cfg(format!("window of {} samples is not divisible into {}-sample patches", self.window_samples, self.patch_len));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return cfg(format!("model width {} must be even", self.d_model));
        }
        for (h, what) in [(self.enc_heads, "encoder"), (self.dec_heads, "decoder")] {
            if h == 0 || self.d_model % h != 0 {
                return cfg(format!("{what} heads {h} do not divide width {}", self.d_model));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return cfg(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel > self.patch_len {
            return cfg(format!("conv kernel {} must be odd and fit a patch", self.conv_kernel));
        }
        self.conv_stride().map(|_| ())
    }

    /// Stride for which the temporal convolution flattens to `d_model / 2`.
    pub fn conv_stride(&self) -> Result<usize> {
        let half = self.d_model / 2;
        if self.conv_channels == 0 || half % self.conv_channels != 0 {
            return Err(Error::Config(format!("{} conv channels do not divide {half}", self.conv_channels)));
        }
        let want = half / self.conv_channels;
        let span = self.patch_len + 2 * (self.conv_kernel / 2) - self.conv_kernel;
        (1..=self.patch_len.max(1)).find(|s| span / s + 1 == want).ok_or_else(|| {
            Error::Config(format!(
                "no stride maps a {}-sample patch to {want} positions per conv channel",
                self.patch_len
            ))
        })
    }
}

/// Patches of one window, row `c * n_patches + n` holding patch `n` of
/// channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub channels: usize,
    pub n_patches: usize,
    pub patch_len: usize,
    pub data: Vec<f64>,
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.channels * self.n_patches
    }

    pub fn patch(&self, row: usize) -> &[f64] {
        &self.data[row * self.patch_len..(row + 1) * self.patch_len]
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.rows(), self.patch_len], self.data.clone()).expect("grid shape")
    }

    /// Rows `rows` stacked into a `[len, P]` tensor.
    pub fn select(&self, rows: &[usize]) -> Tensor<f64> {
        let data = rows.iter().flat_map(|&r| self.patch(r).iter().copied()).collect();
        Tensor::new(vec![rows.len(), self.patch_len], data).expect("grid shape")
    }
}

pub fn patchify(window: &[Vec<f64>], patch_len: usize) -> Result<PatchGrid> {
    let len = window.first().map_or(0, Vec::len);
    if patch_len == 0 || len == 0 || len % patch_len != 0 {
        return Err(Error::Config(format!("window of {len} samples is not divisible into {patch_len}-sample patches")));
    }
    if window.iter().any(|c| c.len() != len) {
        return Err(dim_err("channels of a window differ in length"));
    }
    Ok(PatchGrid {
        channels: window.len(),
        n_patches: len / patch_len,
        patch_len,
        data: window.iter().flatten().copied().collect(),
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Vec<Vec<f64>> {
    grid.data.chunks(grid.n_patches * grid.patch_len).map(<[f64]>::to_vec).collect()
}

/// Which (channel, patch) positions are hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub channels: usize,
    pub n_patches: usize,
    pub masked: Vec<bool>,
}

impl MaskPlan {
    pub fn none(channels: usize, n_patches: usize) -> Self {
        Self { channels, n_patches, masked: vec![false; channels * n_patches] }
    }

    /// Every channel independently hides exactly `round(ratio * n_patches)`
    /// of its patches.
    pub fn random(channels: usize, n_patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
        }
        let k = masked_per_channel(n_patches, ratio);
        let mut masked = vec![false; channels * n_patches];
        for c in 0..channels {
            for i in index::sample(rng, n_patches, k) {
                masked[c * n_patches + i] = true;
            }
        }
        Ok(Self { channels, n_patches, masked })
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn masked_in_channel(&self, c: usize) -> usize {
        self.masked[c * self.n_patches..(c + 1) * self.n_patches].iter().filter(|&&m| m).count()
    }
}

pub fn masked_per_channel(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64).round() as usize
}

/// Model parameters are held in a [`ParamStore`]; this records their ids.
#[derive(Debug, Clone)]
pub struct EegMae {
    pub cfg: MaeConfig,
    conv: ParamId,
    conv_bias: ParamId,
    conv_stride: usize,
    freq: Linear,
    pos: ParamId,
    encoder: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    mask_token: ParamId,
    dec_pos: ParamId,
    decoder: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl EegMae {
    pub fn new(cfg: MaeConfig, store: &mut ParamStore<f64>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tokens = cfg.tokens();
        let e = ENCODER_PREFIX;
        let conv = store.add(format!("{e}embed.conv"), &[cfg.conv_channels, 1, cfg.conv_kernel], Init::LeCun, rng);
        let conv_bias = store.add(format!("{e}embed.conv_b"), &[d / 2], Init::Zeros, rng);
        let freq = Linear::new(store, rng, &format!("{e}embed.freq"), cfg.patch_len / 2 + 1, d / 2);
        let pos = store.add(format!("{e}pos"), &[tokens, d], Init::Normal(0.02), rng);
        let encoder = (0..cfg.enc_layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("{e}block{i}"), d, cfg.enc_heads, cfg.d_ff, cfg.dropout))
            .collect();
        let enc_norm = LayerNorm::new(store, rng, &format!("{e}norm"), d);
        let m = DECODER_PREFIX;
        let mask_token = store.add(format!("{m}mask_token"), &[1, d], Init::Normal(0.02), rng);
        let dec_pos = store.add(format!("{m}pos"), &[tokens, d], Init::Normal(0.02), rng);
        let decoder = (0..cfg.dec_layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("{m}block{i}"), d, cfg.dec_heads, cfg.d_ff, cfg.dropout))
            .collect();
        let dec_norm = LayerNorm::new(store, rng, &format!("{m}norm"), d);
        let head = Linear::new(store, rng, &format!("{m}head"), d, cfg.patch_len);
        Ok(Self {
            conv_stride: cfg.conv_stride()?,
            cfg,
            conv,
            conv_bias,
            freq,
            pos,
            encoder,
            enc_norm,
            mask_token,
            dec_pos,
            decoder,
            dec_norm,
            head,
        })
    }

    /// Rebinds a model to a store that already holds its parameters (for
    /// example one restored from a checkpoint).
    pub fn bind(cfg: MaeConfig, store: &ParamStore<f64>) -> Result<Self> {
        let mut probe = ParamStore::new();
        let model = Self::new(cfg, &mut probe, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (id, name, t) in probe.iter() {
            let found = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if found != id || store.get(found).shape() != t.shape() {
                return Err(Error::Format(format!("parameter {name} does not match the configured model")));
            }
        }
        Ok(model)
    }

    /// Patch tokens `[rows, D]` without positional encodings: a strided
    /// temporal convolution and a linear map of the magnitude spectrum,
    /// each `D / 2` wide.
    pub fn embed_patches(&self, cx: &mut Ctx<f64>, patches: Var) -> Result<Var> {
        let (rows, p) = cx.tape.value(patches).dims2()?;
        if p != self.cfg.patch_len {
            return Err(dim_err(format!("patch length {p}, model expects {}", self.cfg.patch_len)));
        }
        let k = cx.p(self.conv);
        let half = self.cfg.d_model / 2;
        let mut time_rows = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = cx.tape.gather_rows(&[(patches, r)])?;
            let y = cx.tape.conv1d(x, k, self.conv_stride, self.cfg.conv_kernel / 2)?;
            time_rows.push(cx.tape.reshape(y, vec![1, half])?);
        }
        let e_time = cx.tape.concat_rows(&time_rows)?;
        let cb = cx.p(self.conv_bias);
        let e_time = cx.tape.add_row(e_time, cb)?;
        let spec = cx.tape.rfft_magnitude(patches)?;
        let spec = cx.tape.scale(spec, 1.0 / (p as f64).sqrt());
        let e_freq = self.freq.forward(cx, spec)?;
        cx.tape.concat_cols(&[e_time, e_freq])
    }

    /// Embedded tokens at `positions` plus their positional encodings.
    pub fn tokens(&self, cx: &mut Ctx<f64>, grid: &PatchGrid, positions: &[usize]) -> Result<Var> {
        self.check_grid(grid)?;
        let patches = cx.tape.constant(grid.select(positions));
        let emb = self.embed_patches(cx, patches)?;
        let pos = cx.p(self.pos);
        let picks: Vec<(Var, usize)> = positions.iter().map(|&i| (pos, i)).collect();
        let pe = cx.tape.gather_rows(&picks)?;
        cx.tape.add(emb, pe)
    }

    /// Encoder stack on already embedded tokens; returns the output and the
    /// attention matrices of every layer and head.
    pub fn encode_tokens(&self, cx: &mut Ctx<f64>, tokens: Var) -> Result<(Var, Vec<Var>)> {
        if cx.tape.value(tokens).dims2()?.0 == 0 {
            return Err(Error::Contract("encoder received no visible tokens".into()));
        }
        let mut x = tokens;
        let mut weights = Vec::new();
        for b in &self.encoder {
            let (y, w) = b.forward(cx, x)?;
            x = y;
            weights.extend(w);
        }
        Ok((self.enc_norm.forward(cx, x)?, weights))
    }

    /// Encodes the visible patches of `grid` under `plan`.
    pub fn encode(&self, cx: &mut Ctx<f64>, grid: &PatchGrid, plan: &MaskPlan) -> Result<Var> {
        let visible = plan.visible();
        if visible.is_empty() {
            return Err(Error::Contract("every patch is masked".into()));
        }
        let z = self.tokens(cx, grid, &visible)?;
        Ok(self.encode_tokens(cx, z)?.0)
    }

    /// Reconstructs the masked patches, `[#masked, P]` in position order.
    pub fn decode(&self, cx: &mut Ctx<f64>, h_enc: Var, plan: &MaskPlan) -> Result<Var> {
        let visible = plan.visible();
        let masked = plan.masked_positions();
        let n_vis = cx.tape.value(h_enc).dims2()?.0;
        if n_vis != visible.len() || plan.masked.len() != self.cfg.tokens() {
            return Err(Error::Contract(format!(
                "mask plan with {} visible of {} positions does not match {n_vis} encoded tokens",
                visible.len(),
                plan.masked.len()
            )));
        }
        if masked.is_empty() {
            return Err(Error::Contract("nothing to reconstruct: no masked patches".into()));
        }
        let mt = cx.p(self.mask_token);
        let mut vis_idx = 0;
        let picks: Vec<(Var, usize)> = plan
            .masked
            .iter()
            .map(|&m| {
                if m {
                    (mt, 0)
                } else {
                    vis_idx += 1;
                    (h_enc, vis_idx - 1)
                }
            })
            .collect();
        let seq = cx.tape.gather_rows(&picks)?;
        let dp = cx.p(self.dec_pos);
        let mut x = cx.tape.add(seq, dp)?;
        for b in &self.decoder {
            x = b.forward(cx, x)?.0;
        }
        let x = self.dec_norm.forward(cx, x)?;
        let rows: Vec<(Var, usize)> = masked.iter().map(|&i| (x, i)).collect();
        let xm = cx.tape.gather_rows(&rows)?;
        self.head.forward(cx, xm)
    }

    /// Reconstruction loss of one window under one mask.
    pub fn loss(&self, cx: &mut Ctx<f64>, grid: &PatchGrid, plan: &MaskPlan) -> Result<Var> {
        let h = self.encode(cx, grid, plan)?;
        let pred = self.decode(cx, h, plan)?;
        let target = grid.select(&plan.masked_positions());
        mae_loss(&mut cx.tape, pred, target)
    }

    /// Frozen-encoder features of a whole window, `[C * N, D]`.
    pub fn encode_window(&self, store: &ParamStore<f64>, grid: &PatchGrid) -> Result<Tensor<f64>> {
        let mut cx = Ctx::new(store, false, ChaCha8Rng::seed_from_u64(0));
        let h = self.encode(&mut cx, grid, &MaskPlan::none(grid.channels, grid.n_patches))?;
        Ok(cx.tape.value(h).clone())
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if grid.channels != self.cfg.channels || grid.n_patches != self.cfg.n_patches() || grid.patch_len != self.cfg.patch_len {
            return Err(dim_err(format!(
                "patch grid {}x{}x{} does not match model {}x{}x{}",
                grid.channels,
                grid.n_patches,
                grid.patch_len,
                self.cfg.channels,
                self.cfg.n_patches(),
                self.cfg.patch_len
            )));
        }
        Ok(())
    }
}

/// Mean over masked patches of the summed squared patch error.
pub fn mae_loss(tape: &mut Tape<f64>, pred: Var, target: Tensor<f64>) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(dim_err(format!("reconstruction {:?} vs target {:?}", tape.shape(pred), target.shape())));
    }
    let m = target.shape()[0];
    if m == 0 {
        return Err(Error::Contract("reconstruction loss over an empty mask set".into()));
    }
    let t = tape.constant(target);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / m as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Windows in the fixed evaluation batch used for the loss-ratio check.
    pub eval_windows: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: 8, lr: 1e-3, lr_min: 1e-5, weight_decay: 0.05, eval_windows: 32 }
    }
}

impl PretrainConfig {
    /// Full-scale schedule: lr 1e-4, batch 512 (epochs are expressed as steps
    /// by the caller).
    pub fn full() -> Self {
        Self { steps: 100_000, batch_size: 512, lr: 1e-4, lr_min: 1e-6, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training-batch loss per step.
    pub train_losses: Vec<f64>,
    pub eval_initial: f64,
    pub eval_final: f64,
    /// Eval-batch loss of predicting all zeros, for reference.
    pub eval_zero: f64,
    pub lrs: Vec<f64>,
    /// Final AdamW moments, for the checkpoint.
    #[serde(skip)]
    pub optimizer_state: Vec<CheckpointTensor>,
}

/// Fixed windows and masks used to compare losses before and after training.
pub struct EvalBatch {
    grids: Vec<PatchGrid>,
    plans: Vec<MaskPlan>,
}

impl EvalBatch {
    pub fn new(model: &EegMae, grids: Vec<PatchGrid>, rng: &mut impl Rng) -> Result<Self> {
        let plans = grids
            .iter()
            .map(|g| MaskPlan::random(g.channels, g.n_patches, model.cfg.mask_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Self { grids, plans })
    }

    /// Loss of the all-zero reconstruction.
    pub fn zero_loss(&self) -> f64 {
        let total: f64 = self
            .grids
            .iter()
            .zip(&self.plans)
            .map(|(g, p)| {
                let m = p.masked_positions();
                m.iter().flat_map(|&r| g.patch(r)).map(|v| v * v).sum::<f64>() / m.len().max(1) as f64
            })
            .sum();
        total / self.grids.len().max(1) as f64
    }

    pub fn loss(&self, model: &EegMae, store: &ParamStore<f64>) -> Result<f64> {
        let mut total = 0.0;
        for (g, p) in self.grids.iter().zip(&self.plans) {
            let mut cx = Ctx::new(store, false, ChaCha8Rng::seed_from_u64(0));
            let l = model.loss(&mut cx, g, p)?;
            total += cx.tape.item(l);
        }
        Ok(total / self.grids.len().max(1) as f64)
    }
}

/// Masked-reconstruction training with AdamW and a cosine schedule.
/// `window(i)` yields training window `i` of `n_windows`; batches are drawn
/// uniformly with replacement from `rng`.
pub fn pretrain(
    model: &EegMae,
    store: &mut ParamStore<f64>,
    n_windows: usize,
    window: impl Fn(usize) -> Result<PatchGrid>,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainReport> {
    if n_windows == 0 {
        return Err(Error::Data("pre-training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let eval_idx: Vec<usize> = (0..cfg.eval_windows.min(n_windows)).map(|_| rng.random_range(0..n_windows)).collect();
    let eval = EvalBatch::new(model, eval_idx.iter().map(|&i| window(i)).collect::<Result<_>>()?, rng)?;
    let eval_initial = eval.loss(model, store)?;
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, lr_min: cfg.lr_min, total_steps: cfg.steps, weight_decay: cfg.weight_decay, ..Default::default() },
        store,
    );
    let mut train_losses = Vec::with_capacity(cfg.steps as usize);
    let mut lrs = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let g = window(rng.random_range(0..n_windows))?;
            let plan = MaskPlan::random(g.channels, g.n_patches, model.cfg.mask_ratio, rng)?;
            batch.push((g, plan));
        }
        let dropout_seed = rng.random::<u64>();
        let mut cx = Ctx::new(&*store, true, ChaCha8Rng::seed_from_u64(dropout_seed));
        let mut sum: Option<Var> = None;
        for (g, p) in &batch {
            let l = model.loss(&mut cx, g, p)?;
            sum = Some(match sum {
                Some(s) => cx.tape.add(s, l)?,
                None => l,
            });
        }
        let total = cx.tape.scale(sum.expect("nonempty batch"), 1.0 / batch.len() as f64);
        let value = cx.tape.item(total);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("pre-training loss became {value} at step {step}")));
        }
        let mut tape = cx.into_tape();
        tape.backward(total)?;
        tape.accumulate_into(store);
        drop(tape);
        lrs.push(opt.step(store)?);
        train_losses.push(value);
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("pretrain step {step}: loss {value:.4}");
        }
    }
    let eval_final = eval.loss(model, store)?;
    Ok(PretrainReport {
        train_losses,
        eval_initial,
        eval_final,
        eval_zero: eval.zero_loss(),
        lrs,
        optimizer_state: opt.export(store),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::check_param_grads;

    pub(crate) fn tiny_cfg() -> MaeConfig {
        MaeConfig {
            channels: 2,
            window_samples: 64,
            patch_len: 16,
            d_model: 8,
            enc_layers: 1,
            enc_heads: 2,
            dec_layers: 1,
            dec_heads: 2,
            d_ff: 16,
            mask_ratio: 0.5,
            conv_kernel: 3,
            conv_channels: 1,
            dropout: 0.0,
        }
    }

    fn random_grid(cfg: &MaeConfig, rng: &mut impl Rng) -> PatchGrid {
        let w: Vec<Vec<f64>> =
            (0..cfg.channels).map(|_| (0..cfg.window_samples).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        patchify(&w, cfg.patch_len).unwrap()
    }

    fn build(cfg: MaeConfig) -> (EegMae, ParamStore<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let m = EegMae::new(cfg, &mut store, &mut rng).unwrap();
        (m, store, rng)
    }

    #[test]
    fn patchify_examples() {
        let w = vec![vec![0.0; 2000]; 2];
        assert!(matches!(patchify(&w, 256), Err(Error::Config(_))));
        let w: Vec<Vec<f64>> = (0..2).map(|c| (0..2048).map(|i| (i * 3 + c) as f64).collect()).collect();
        let g = patchify(&w, 256).unwrap();
        assert_eq!(g.n_patches, 8);
        assert_eq!(g.patch(9)[0], (256 * 3 + 1) as f64);
        assert_eq!(unpatchify(&g), w);
    }

    #[test]
    fn default_stride_and_validation() {
        assert_eq!(MaeConfig::default().conv_stride().unwrap(), 4);
        assert!(MaeConfig::default().validate().is_ok());
        assert!(MaeConfig::full().validate().is_ok());
        assert!(MaeConfig { d_model: 127, ..Default::default() }.validate().is_err());
        assert!(MaeConfig { enc_heads: 3, ..Default::default() }.validate().is_err());
        assert!(MaeConfig { mask_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(MaeConfig { patch_len: 200, window_samples: 2000, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MaskPlan::random(2, 16, 0.75, &mut rng).unwrap();
        assert_eq!((p.masked_in_channel(0), p.masked_in_channel(1)), (12, 12));
        let p = MaskPlan::random(3, 10, 0.0, &mut rng).unwrap();
        assert_eq!(p.visible().len(), 30);
        let p = MaskPlan::random(2, 10, 0.5, &mut rng).unwrap();
        assert_eq!(p.masked_in_channel(1), 5);
        let mut all: Vec<usize> = p.visible().into_iter().chain(p.masked_positions()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert!(MaskPlan::random(2, 10, 1.0, &mut rng).is_err());
        assert!(MaskPlan::random(2, 10, -0.1, &mut rng).is_err());
        let a = MaskPlan::random(2, 8, 0.75, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = MaskPlan::random(2, 8, 0.75, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_patch_embeds_to_position_only() {
        let (m, store, _) = build(tiny_cfg());
        let grid = PatchGrid { channels: 2, n_patches: 4, patch_len: 16, data: vec![0.0; 128] };
        let mut cx = Ctx::new(&store, false, ChaCha8Rng::seed_from_u64(0));
        let z = m.tokens(&mut cx, &grid, &[0, 5]).unwrap();
        let pos = store.get(store.id("mae.enc.pos").unwrap());
        let zt = cx.tape.value(z);
        assert_eq!(zt.shape(), &[2, 8]);
        assert_eq!(zt.row(0), pos.row(0));
        assert_eq!(zt.row(1), pos.row(5));
    }

    #[test]
    fn embedding_gradient_wrt_patch() {
        let (m, store, mut rng) = build(tiny_cfg());
        let x = Tensor::new(vec![3, 16], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![3, 8], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = |x: &Tensor<f64>, grad: bool| {
            let mut cx = Ctx::new(&store, false, ChaCha8Rng::seed_from_u64(0));
            let xv = cx.tape.leaf(x.clone().with_grad(grad));
            let e = m.embed_patches(&mut cx, xv).unwrap();
            let wv = cx.tape.constant(w.clone());
            let p = cx.tape.mul(e, wv).unwrap();
            let l = cx.tape.sum(p);
            let mut tape = cx.into_tape();
            let val = tape.item(l);
            if grad {
                tape.backward(l).unwrap();
                (val, tape.grad(xv).unwrap().to_vec())
            } else {
                (val, vec![])
            }
        };
        let (_, g) = f(&x, true);
        for j in 0..x.len() {
            let mut a = x.clone();
            a.data_mut()[j] += 1e-6;
            let mut b = x.clone();
            b.data_mut()[j] -= 1e-6;
            let num = (f(&a, false).0 - f(&b, false).0) / 2e-6;
            let rel = (num - g[j]).abs() / num.abs().max(g[j].abs()).max(1e-2);
            assert!(rel < 1e-4, "element {j}: {} vs {num}", g[j]);
        }
    }

    #[test]
    fn shapes_and_contracts() {
        let (m, store, mut rng) = build(tiny_cfg());
        let g = random_grid(&m.cfg, &mut rng);
        let plan = MaskPlan::random(2, 4, 0.5, &mut rng).unwrap();
        let mut cx = Ctx::new(&store, false, ChaCha8Rng::seed_from_u64(0));
        let h = m.encode(&mut cx, &g, &plan).unwrap();
        assert_eq!(cx.tape.shape(h), &[4, 8]);
        let r = m.decode(&mut cx, h, &plan).unwrap();
        assert_eq!(cx.tape.shape(r), &[4, 16]);
        assert!(cx.tape.value(r).data().iter().all(|v| v.is_finite()));
        let other = MaskPlan::none(2, 4);
        assert!(matches!(m.decode(&mut cx, h, &other), Err(Error::Contract(_))));
        let one = cx.tape.constant(Tensor::zeros(&[1, 8]));
        let (o, ws) = m.encode_tokens(&mut cx, one).unwrap();
        assert_eq!(cx.tape.shape(o), &[1, 8]);
        assert!(cx.tape.value(o).data().iter().all(|v| v.is_finite()));
        for w in ws {
            assert!((cx.tape.value(w).sum() - 1.0).abs() < 1e-12);
        }
        let empty = cx.tape.constant(Tensor::zeros(&[0, 8]));
        assert!(matches!(m.encode_tokens(&mut cx, empty), Err(Error::Contract(_))));
        let mut full = MaskPlan::none(2, 4);
        full.masked.iter_mut().for_each(|v| *v = true);
        assert!(matches!(m.encode(&mut cx, &g, &full), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_examples() {
        let mut t = Tape::new();
        let pred = t.constant(Tensor::full(&[2, 4], 1.0));
        let l = mae_loss(&mut t, pred, Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(t.item(l), 4.0);
        let same = t.constant(Tensor::full(&[2, 4], 0.5));
        let l = mae_loss(&mut t, same, Tensor::full(&[2, 4], 0.5)).unwrap();
        assert_eq!(t.item(l), 0.0);
        let empty = t.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(mae_loss(&mut t, empty, Tensor::zeros(&[0, 4])), Err(Error::Contract(_))));
    }

    #[test]
    fn encoder_permutes_with_its_inputs() {
        let (m, store, mut rng) = build(tiny_cfg());
        let g = random_grid(&m.cfg, &mut rng);
        let mut cx = Ctx::new(&store, false, ChaCha8Rng::seed_from_u64(0));
        let a = m.tokens(&mut cx, &g, &[0, 3, 5, 6]).unwrap();
        let b = m.tokens(&mut cx, &g, &[6, 0, 5, 3]).unwrap();
        let ha = m.encode_tokens(&mut cx, a).unwrap().0;
        let hb = m.encode_tokens(&mut cx, b).unwrap().0;
        let (ta, tb) = (cx.tape.value(ha).clone(), cx.tape.value(hb).clone());
        for (i, j) in [(0, 1), (1, 3), (2, 2), (3, 0)] {
            for (x, y) in ta.row(i).iter().zip(tb.row(j)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_ignores_visible_targets() {
        let (m, store, mut rng) = build(tiny_cfg());
        let g = random_grid(&m.cfg, &mut rng);
        let plan = MaskPlan::random(2, 4, 0.5, &mut rng).unwrap();
        let run = |grid: &PatchGrid| {
            let mut cx = Ctx::new(&store, false, ChaCha8Rng::seed_from_u64(0));
            let h = m.encode(&mut cx, &g, &plan).unwrap();
            let pred = m.decode(&mut cx, h, &plan).unwrap();
            let l = mae_loss(&mut cx.tape, pred, grid.select(&plan.masked_positions())).unwrap();
            cx.tape.item(l)
        };
        let base = run(&g);
        let mut perturbed = g.clone();
        let v = plan.visible()[0];
        perturbed.data[v * 16..(v + 1) * 16].iter_mut().for_each(|x| *x += 10.0);
        assert_eq!(run(&perturbed), base);
        let mut hit = g.clone();
        let k = plan.masked_positions()[0];
        hit.data[k * 16] += 1.0;
        assert_ne!(run(&hit), base);
    }

    #[test]
    fn miniature_gradients_match_finite_differences() {
        let (m, mut store, mut rng) = build(tiny_cfg());
        let g = random_grid(&m.cfg, &mut rng);
        let plan = MaskPlan::random(2, 4, 0.5, &mut rng).unwrap();
        let r = check_param_grads(&mut store, 1e-5, 1e-6, |s| {
            let mut cx = Ctx::new(s, true, ChaCha8Rng::seed_from_u64(0));
            let l = m.loss(&mut cx, &g, &plan)?;
            Ok((cx.into_tape(), l))
        })
        .unwrap();
        assert_eq!(r.checked, store.num_values());
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn zero_lr_freezes_and_fixed_seed_repeats() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool: Vec<PatchGrid> = (0..6).map(|_| random_grid(&cfg, &mut rng)).collect();
        let run = |lr: f64| {
            let (m, mut store, _) = build(tiny_cfg());
            let pc = PretrainConfig { steps: 5, batch_size: 2, lr, lr_min: 0.0, eval_windows: 3, ..Default::default() };
            pretrain(&m, &mut store, pool.len(), |i| Ok(pool[i].clone()), &pc, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
        };
        let frozen = run(0.0);
        assert!((frozen.eval_final - frozen.eval_initial).abs() < 1e-12);
        let (a, b) = (run(1e-3), run(1e-3));
        assert_eq!(a, b);
        assert_ne!(a.eval_final, a.eval_initial);
    }

    #[test]
    fn overfits_a_single_patch_pattern() {
        let cfg = tiny_cfg();
        let w: Vec<Vec<f64>> = (0..2).map(|c| (0..64).map(|i| ((i % 16) as f64 * 0.4 + c as f64).sin()).collect()).collect();
        let grid = patchify(&w, 16).unwrap();
        let (m, mut store, _) = build(cfg);
        let pc = PretrainConfig { steps: 300, batch_size: 1, lr: 1e-2, lr_min: 1e-3, weight_decay: 0.0, eval_windows: 1 };
        let r = pretrain(&m, &mut store, 1, |_| Ok(grid.clone()), &pc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let var: f64 = {
            let mean = grid.data.iter().sum::<f64>() / 128.0;
            grid.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0
        };
        // loss sums over 16 samples per patch
        let mse = r.train_losses.last().unwrap() / 16.0;
        assert!(mse < 0.01 * var, "{mse} vs {var}");
    }

    #[test]
    fn bind_checks_the_store() {
        let (_, store, _) = build(tiny_cfg());
        assert!(EegMae::bind(tiny_cfg(), &store).is_ok());
        assert!(EegMae::bind(MaeConfig { d_ff: 32, ..tiny_cfg() }, &store).is_err());
    }

    proptest! {
        #[test]
        fn masking_partitions_positions(c in 1usize..4, n in 1usize..20, ratio in 0.0f64..0.99, seed: u64) {
            let p = MaskPlan::random(c, n, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for ch in 0..c {
                prop_assert_eq!(p.masked_in_channel(ch), masked_per_channel(n, ratio));
            }
            prop_assert_eq!(p.visible().len() + p.masked_positions().len(), c * n);
        }

        #[test]
        fn token_width_is_model_width(pow in 3u32..7, c in 1usize..3) {
            let p = 1usize << pow;
            let cfg = MaeConfig { channels: c, window_samples: 2 * p, patch_len: p, conv_kernel: 3, ..tiny_cfg() };
            let (m, store, mut rng) = build(cfg.clone());
            let g = random_grid(&cfg, &mut rng);
            let mut cx = Ctx::new(&store, false, ChaCha8Rng::seed_from_u64(0));
            let z = m.tokens(&mut cx, &g, &(0..cfg.tokens()).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(cx.tape.shape(z), &[cfg.tokens(), 8]);
        }
    }
}
