//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eegvfusion::config::ExperimentConfig;
use eegvfusion::data::{plan_layout, SeizureEvent};
use eegvfusion::dsp::{bandpass, notch_filter, EegRecording};
use eegvfusion::eval::{event_far, match_events, postprocess_events, sample_metrics, PostprocessConfig, SecondGrid};
use eegvfusion::fusion::{EegInput, FusionConfig, FusionModel, Modality, WindowInput};
use eegvfusion::io::{eeg_to_bytes, video_to_bytes, write_corpus};
use eegvfusion::mae::{mae_loss, masked_per_channel, patchify, EegMae, MaeConfig, MaskPlan, PatchGrid};
use eegvfusion::ot::{cosine_cost_var, exact_ot_oracle, ipot, ot_loss, ot_loss_var, IpotConfig};
use eegvfusion::pipeline::{generate_corpus, run_experiment, ExperimentOutcome, Variant};
use eegvfusion::tensor::nn::Ctx;
use eegvfusion::tensor::{check_param_grads, Var};
use eegvfusion::{ParamStore, Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id:>2} {name}: {} ({:.1} s)", v.detail, t.elapsed().as_secs_f64());
    v.pass
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

type OpFn = fn(&mut Tape, &[Var]) -> eegvfusion::Result<Var>;

/// Worst relative error between the tape gradient of `sum(w ⊙ op(x))` and
/// central differences, over every input element.
fn op_error(inputs: &[Tensor], op: OpFn) -> f64 {
    let forward = |xs: &[Tensor], w: Option<&Tensor>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
        let out = op(&mut tape, &vars).unwrap();
        let shape = tape.shape(out).to_vec();
        let loss = w.map(|w| {
            let c = tape.constant(w.clone());
            let p = tape.mul(out, c).unwrap();
            tape.sum(p)
        });
        (tape, vars, loss, shape)
    };
    let shape = forward(inputs, None).3;
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(99), &shape);
    let (mut tape, vars, loss, _) = forward(inputs, Some(&w));
    tape.backward(loss.unwrap()).unwrap();
    let value = |xs: &[Tensor]| {
        let (t, _, l, _) = forward(xs, Some(&w));
        t.item(l.unwrap())
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let plus = value(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let minus = value(&xs);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

fn per_op_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);
    let plan = Tensor::full(&[3, 2], 1.0 / 6.0);
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![r(&[3, 4])], |t, v| t.transpose(v[0])),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.add(v[0], v[1])),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![r(&[3, 4]), r(&[4])], |t, v| t.add_row(v[0], v[1])),
        ("scale", vec![r(&[3, 4])], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", vec![r(&[3, 4])], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        ("gelu", vec![r(&[3, 4])], |t, v| Ok(t.gelu(v[0]))),
        ("softmax", vec![r(&[3, 4])], |t, v| t.softmax(v[0])),
        ("layernorm", vec![r(&[3, 4]), r(&[4]), r(&[4])], |t, v| t.layernorm(v[0], v[1], v[2], 1e-5)),
        ("sum", vec![r(&[3, 4])], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![r(&[3, 4])], |t, v| Ok(t.mean(v[0]))),
        ("mean_rows", vec![r(&[3, 4])], |t, v| t.mean_rows(v[0])),
        ("slice_cols", vec![r(&[3, 5])], |t, v| t.slice_cols(v[0], 1, 3)),
        ("concat_cols", vec![r(&[3, 2]), r(&[3, 3])], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("gather_rows", vec![r(&[3, 4]), r(&[2, 4])], |t, v| t.gather_rows(&[(v[1], 1), (v[0], 0), (v[0], 2), (v[0], 0)])),
        ("concat_rows", vec![r(&[2, 4]), r(&[3, 4])], |t, v| t.concat_rows(&[v[0], v[1]])),
        ("reshape", vec![r(&[3, 4])], |t, v| t.reshape(v[0], vec![2, 6])),
        ("conv1d", vec![r(&[2, 16]), r(&[3, 2, 4])], |t, v| t.conv1d(v[0], v[1], 2, 1)),
        ("depthwise_conv", vec![r(&[6, 4]), r(&[4, 3])], |t, v| t.depthwise_conv(v[0], v[1])),
        ("rfft_magnitude", vec![r(&[2, 8])], |t, v| t.rfft_magnitude(v[0])),
        ("l2_normalize_rows", vec![r(&[3, 4])], |t, v| t.l2_normalize_rows(v[0])),
        ("cross_entropy", vec![r(&[1, 3])], |t, v| t.cross_entropy(v[0], 1)),
        ("dropout", vec![r(&[3, 4])], |t, v| t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(5))),
        ("cosine_cost", vec![r(&[3, 4]), r(&[2, 4])], |t, v| cosine_cost_var(t, v[0], v[1])),
    ];
    let mut out: Vec<(&str, f64)> = cases.into_iter().map(|(n, x, f)| (n, op_error(&x, f))).collect();
    // the plan is a constant of the loss
    let c = rand_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[3, 2]);
    let mut tape = Tape::new();
    let cv = tape.leaf(c.clone().with_grad(true));
    let l = ot_loss_var(&mut tape, cv, &plan, 0.1).unwrap();
    tape.backward(l).unwrap();
    let err = tape.grad(cv).unwrap().iter().zip(plan.data()).map(|(g, p)| (g - 0.1 * p).abs()).fold(0.0, f64::max);
    out.push(("ot_loss", err));
    out
}

fn tiny_mae() -> MaeConfig {
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
        mask_ratio: 0.75,
        conv_kernel: 3,
        conv_channels: 1,
        dropout: 0.1,
    }
}

fn random_grid(cfg: &MaeConfig, rng: &mut impl Rng) -> PatchGrid {
    let w: Vec<Vec<f64>> =
        (0..cfg.channels).map(|_| (0..cfg.window_samples).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    patchify(&w, cfg.patch_len).unwrap()
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = tiny_mae();
    let mut store = ParamStore::new();
    let mae = EegMae::new(cfg.clone(), &mut store, &mut rng).unwrap();
    let grid = random_grid(&cfg, &mut rng);
    let plan = MaskPlan::random(cfg.channels, cfg.n_patches(), cfg.mask_ratio, &mut rng).unwrap();
    let m = check_param_grads(&mut store, 1e-5, 1e-6, |s| {
        let mut cx = Ctx::new(s, true, ChaCha8Rng::seed_from_u64(0));
        let l = mae.loss(&mut cx, &grid, &plan)?;
        Ok((cx.into_tape(), l))
    })
    .unwrap();

    let fcfg = FusionConfig {
        d_f: 8,
        adapter_layers: 1,
        fusion_layers: 1,
        kernels: vec![3, 5, 7],
        heads: 2,
        ff_mult: 2,
        dropout: 0.1,
        lambda_ot: 0.1,
        ipot: IpotConfig::default(),
    };
    let mut fstore = ParamStore::new();
    let model = FusionModel::new(fcfg, Modality::Fusion, 6, 5, None, &mut fstore, &mut rng).unwrap();
    let input = WindowInput {
        eeg: Some(EegInput::Encoded(rand_tensor(&mut rng, &[8, 6]))),
        video: Some(rand_tensor(&mut rng, &[8, 5])),
    };
    let mut cx = Ctx::new(&fstore, true, ChaCha8Rng::seed_from_u64(0));
    let fplan = model.forward(&mut cx, &input).unwrap().plan;
    drop(cx);
    let f = check_param_grads(&mut fstore, 1e-5, 1e-6, |s| {
        let mut cx = Ctx::new(s, true, ChaCha8Rng::seed_from_u64(0));
        let l = model.loss_with_plan(&mut cx, &input, true, fplan.as_ref())?;
        Ok((cx.into_tape(), l.total))
    })
    .unwrap();

    let ops = per_op_errors();
    let (worst_op, op_err) = ops.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let elapsed = t.elapsed();
    let pass = m.max_rel_err < 1e-3 && f.max_rel_err < 1e-3 && op_err < 1e-4 && elapsed < Duration::from_secs(120);
    verdict(
        pass,
        format!(
            "MAE D=8 {} params max rel err {:.2e}; fusion D_f=8 {} params {:.2e}; {} ops worst {worst_op} {:.2e}",
            m.checked,
            m.max_rel_err,
            f.checked,
            f.max_rel_err,
            ops.len(),
            op_err
        ),
    )
}

fn ipot_vs_lp() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = IpotConfig { outer_iters: 200, ..IpotConfig::default() };
    let (mut worst_gap, mut worst_feas): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let c = Tensor::new(vec![n, m], (0..n * m).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
        let a = vec![1.0 / n as f64; n];
        let b = vec![1.0 / m as f64; m];
        let p = ipot(&c, &a, &b, &cfg).unwrap().plan;
        let exact = exact_ot_oracle(&c, &a, &b).unwrap().plan;
        let gap = (ot_loss(&p, &c, 1.0).unwrap() - ot_loss(&exact, &c, 1.0).unwrap()).abs();
        worst_gap = worst_gap.max(gap);
        for i in 0..n {
            let row: f64 = (0..m).map(|j| p.get2(i, j)).sum();
            worst_feas = worst_feas.max((row - a[i]).abs());
        }
        for j in 0..m {
            let col: f64 = (0..n).map(|i| p.get2(i, j)).sum();
            worst_feas = worst_feas.max((col - b[j]).abs());
        }
        if p.data().iter().any(|&x| x < 0.0) {
            worst_feas = f64::INFINITY;
        }
    }
    let pass = worst_gap <= 1e-3 && worst_feas <= 1e-6 && t.elapsed() < Duration::from_secs(30);
    verdict(pass, format!("50 instances, worst cost gap {worst_gap:.2e}, worst marginal error {worst_feas:.2e}"))
}

fn ot_loss_formula() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let m = rng.random_range(1..=16);
        let c = rand_tensor(&mut rng, &[n, m]);
        let p = ipot(&c.map(|x| x + 1.0), &vec![1.0 / n as f64; n], &vec![1.0 / m as f64; m], &IpotConfig::default())
            .unwrap()
            .plan;
        let lambda = rng.random_range(0.01..2.0);
        let mut expect = 0.0;
        for i in 0..n {
            for j in 0..m {
                expect += c.get2(i, j) * p.get2(i, j);
            }
        }
        expect *= lambda;
        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let l = ot_loss_var(&mut tape, cv, &p, lambda).unwrap();
        worst = worst.max((ot_loss(&p, &c, lambda).unwrap() - expect).abs()).max((tape.item(l) - expect).abs());
    }
    verdict(worst <= 1e-12, format!("100 plans, worst deviation from the double loop {worst:.2e}"))
}

/// Amplitude of the `f` Hz component over the middle half of `x`.
fn tone_amplitude(x: &[f64], f: f64, fs: f64) -> f64 {
    let (lo, hi) = (x.len() / 4, 3 * x.len() / 4);
    let (mut s, mut c) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate().take(hi).skip(lo) {
        let ph = 2.0 * std::f64::consts::PI * f * i as f64 / fs;
        s += v * ph.sin();
        c += v * ph.cos();
    }
    let n = (hi - lo) as f64;
    2.0 * ((s / n).powi(2) + (c / n).powi(2)).sqrt()
}

fn dsp_response() -> Verdict {
    let t = Instant::now();
    let fs = 200.0;
    let pre = ExperimentConfig::desk().preprocess;
    let tone = |f: f64| {
        let x = (0..(200.0 * fs) as usize).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin()).collect();
        EegRecording::new(fs, vec!["EEG1".into()], vec![x]).unwrap()
    };
    let db = |f: f64, rec: &EegRecording| 20.0 * (tone_amplitude(&rec.channels[0], f, fs)).log10();
    let mains = db(50.0, &notch_filter(&tone(50.0), pre.notch_hz, pre.notch_q).unwrap());
    let alpha = {
        let r = bandpass(&tone(10.0), pre.band_low_hz, pre.band_high_hz, pre.band_order).unwrap();
        db(10.0, &notch_filter(&r, pre.notch_hz, pre.notch_q).unwrap())
    };
    let drift = db(0.2, &bandpass(&tone(0.2), pre.band_low_hz, pre.band_high_hz, pre.band_order).unwrap());
    let pass = mains <= -20.0 && alpha.abs() <= 1.0 && drift <= -20.0 && t.elapsed() < Duration::from_secs(10);
    verdict(pass, format!("50 Hz notch {mains:.1} dB, 10 Hz chain {alpha:+.3} dB, 0.2 Hz band-pass {drift:.1} dB"))
}

fn mae_behaviour(outcome: Option<&ExperimentOutcome>) -> Verdict {
    let cfg = ExperimentConfig::desk();
    let mut notes = Vec::new();
    let mut pass = true;

    match outcome.and_then(|o| o.pretrain.as_ref()) {
        Some(r) => {
            let ratio = r.eval_final / r.eval_initial;
            pass &= ratio < 0.5;
            notes.push(format!(
                "{} steps: held-out loss {:.1} -> {:.1} (ratio {ratio:.3}, needs < 0.5; zero predictor {:.1})",
                r.train_losses.len(),
                r.eval_initial,
                r.eval_final,
                r.eval_zero
            ));
        }
        None => {
            pass = false;
            notes.push("no pre-training report".into());
        }
    }

    // the encoder never sees masked patches; the loss reads them only as targets
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mcfg = cfg.mae.clone();
    let mut store = ParamStore::new();
    let mae = EegMae::new(mcfg.clone(), &mut store, &mut rng).unwrap();
    let grid = random_grid(&mcfg, &mut rng);
    let plan = MaskPlan::random(mcfg.channels, mcfg.n_patches(), mcfg.mask_ratio, &mut rng).unwrap();
    let forward = |g: &PatchGrid| {
        let mut cx = Ctx::new(&store, false, ChaCha8Rng::seed_from_u64(0));
        let h = mae.encode(&mut cx, g, &plan).unwrap();
        let pred = mae.decode(&mut cx, h, &plan).unwrap();
        let l = mae.loss(&mut cx, g, &plan).unwrap();
        (cx.tape.value(h).clone(), cx.tape.value(pred).clone(), cx.tape.item(l))
    };
    let (h0, p0, l0) = forward(&grid);
    let mut moved = grid.clone();
    let masked = plan.masked_positions();
    for &row in &masked {
        for v in &mut moved.data[row * mcfg.patch_len..(row + 1) * mcfg.patch_len] {
            *v += rng.random_range(-3.0..3.0);
        }
    }
    let (h1, p1, l1) = forward(&moved);
    let mut manual = 0.0;
    for (k, &row) in masked.iter().enumerate() {
        for (j, &x) in moved.patch(row).iter().enumerate() {
            manual += (p0.data()[k * mcfg.patch_len + j] - x).powi(2);
        }
    }
    manual /= masked.len() as f64;
    let mut tape = Tape::new();
    let pv = tape.constant(p0.clone());
    let dl = mae_loss(&mut tape, pv, moved.select(&masked)).unwrap();
    let direct = tape.item(dl);
    let invariant = h0 == h1 && p0 == p1 && l0 != l1 && (l1 - manual).abs() <= 1e-9 * manual && (l1 - direct).abs() <= 1e-9 * manual;
    pass &= invariant;
    notes.push(format!("masked-patch perturbation: encoder/decoder outputs unchanged {}, loss follows targets {}", h0 == h1 && p0 == p1, invariant));

    let mut exact = true;
    for n in [4, 8, 12, 16, 32] {
        let k = masked_per_channel(n, 0.75);
        for _ in 0..50 {
            let p = MaskPlan::random(3, n, 0.75, &mut rng).unwrap();
            exact &= (0..3).all(|c| p.masked_in_channel(c) == k) && k * 4 == n * 3;
        }
    }
    let desk = MaskPlan::random(mcfg.channels, mcfg.n_patches(), mcfg.mask_ratio, &mut rng).unwrap();
    exact &= (0..mcfg.channels).all(|c| desk.masked_in_channel(c) * 4 == mcfg.n_patches() * 3);
    pass &= exact;
    notes.push(format!("exactly 75% masked per channel: {exact}"));
    verdict(pass, notes.join("; "))
}

fn postprocess_goldens() -> Verdict {
    let post = PostprocessConfig::default();
    let grid = |runs: &[(usize, usize)], len: usize| {
        let mut g = vec![false; len];
        for &(a, b) in runs {
            g[a..b].iter_mut().for_each(|x| *x = true);
        }
        g
    };
    let a = postprocess_events(&grid(&[(10, 20), (23, 35)], 60), &post);
    let b = postprocess_events(&grid(&[(0, 8)], 60), &post);
    let c = postprocess_events(&grid(&[(0, 6), (11, 18)], 60), &post);
    let pass = a == vec![SeizureEvent { onset_s: 10.0, offset_s: 35.0 }] && b.is_empty() && c.is_empty();
    verdict(pass, format!("[10,20)+[23,35) -> {a:?}; [0,8) -> {b:?}; [0,6)+[11,18) -> {c:?}"))
}

/// Independent event extraction: merge gaps under 5 s, drop under 10 s.
fn oracle_events(pred: &[bool]) -> Vec<(usize, usize)> {
    let mut events: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < pred.len() {
        if !pred[t] {
            t += 1;
            continue;
        }
        let s = t;
        while t < pred.len() && pred[t] {
            t += 1;
        }
        match events.last_mut() {
            Some(last) if s - last.1 < 5 => last.1 = t,
            _ => events.push((s, t)),
        }
    }
    events.retain(|e| e.1 - e.0 >= 10);
    events
}

fn metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let post = PostprocessConfig::default();
    let mut mismatches = Vec::new();
    let mut worst_identity: f64 = 0.0;
    for case in 0..100 {
        let sessions = rng.random_range(1..=4);
        let mut grids = Vec::new();
        let (mut detected, mut missed, mut tp, mut fp) = (0u64, 0u64, 0u64, 0u64);
        let (mut otp, mut ofp, mut otn, mut ofn) = (0u64, 0u64, 0u64, 0u64);
        let mut hours = 0.0;
        let mut counts = eegvfusion::eval::EventCounts::default();
        for _ in 0..sessions {
            let len = rng.random_range(20..400);
            let mut truth_events = Vec::new();
            let mut t = rng.random_range(0..30);
            while t + 5 < len {
                let d = rng.random_range(5..60).min(len - t);
                truth_events.push((t, t + d));
                t += d + rng.random_range(1..80);
            }
            let truth: Vec<bool> = (0..len).map(|s| truth_events.iter().any(|e| e.0 <= s && s < e.1)).collect();
            let flip = rng.random_range(0.02..0.4);
            let mut pred = Vec::with_capacity(len);
            let mut cur = rng.random_bool(0.3);
            for s in 0..len {
                if rng.random_bool(flip) {
                    cur = !cur;
                }
                pred.push(if rng.random_bool(0.1) { truth[s] } else { cur });
            }
            for s in 0..len {
                match (pred[s], truth[s]) {
                    (true, true) => otp += 1,
                    (true, false) => ofp += 1,
                    (false, false) => otn += 1,
                    (false, true) => ofn += 1,
                }
            }
            let oracle = oracle_events(&pred);
            let hit = |a: (usize, usize), b: (usize, usize)| (a.0..a.1).any(|s| b.0 <= s && s < b.1);
            for &g in &truth_events {
                if oracle.iter().any(|&p| hit(p, g)) {
                    detected += 1;
                } else {
                    missed += 1;
                }
            }
            for &p in &oracle {
                if truth_events.iter().any(|&g| hit(p, g)) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            let to_events =
                |v: &[(usize, usize)]| v.iter().map(|e| SeizureEvent { onset_s: e.0 as f64, offset_s: e.1 as f64 }).collect::<Vec<_>>();
            let lib_events = postprocess_events(&pred, &post);
            if lib_events != to_events(&oracle) {
                mismatches.push(format!("case {case}: events {lib_events:?} vs {oracle:?}"));
            }
            let (c, _) = match_events("s", &lib_events, &to_events(&truth_events));
            counts.merge(&c);
            hours += len as f64 / 3600.0;
            grids.push(SecondGrid { pred, truth, duration_s: len as f64 });
        }
        let conf = sample_metrics(&grids).unwrap();
        if (conf.tp, conf.fp, conf.tn, conf.fn_) != (otp, ofp, otn, ofn) {
            mismatches.push(format!("case {case}: confusion {conf:?}"));
        }
        let sens = (otp + ofn > 0).then(|| otp as f64 / (otp + ofn) as f64);
        let spec = (otn + ofp > 0).then(|| otn as f64 / (otn + ofp) as f64);
        if conf.sensitivity() != sens || conf.specificity() != spec {
            mismatches.push(format!("case {case}: sensitivity/specificity"));
        }
        if let (Some(s), Some(p), Some(ba)) = (sens, spec, conf.balanced_accuracy()) {
            worst_identity = worst_identity.max((ba - 0.5 * (s + p)).abs());
        }
        if (counts.gt_detected, counts.gt_missed, counts.pred_tp, counts.pred_fp) != (detected, missed, tp, fp) {
            mismatches.push(format!("case {case}: event counts {counts:?}"));
        }
        let far = event_far(&counts, hours).unwrap();
        if far != fp as f64 / hours {
            mismatches.push(format!("case {case}: FAR {far}"));
        }
    }
    let pass = mismatches.is_empty() && worst_identity <= 1e-12;
    let detail = if mismatches.is_empty() {
        format!("100 random grid sets match the oracle; BA identity error {worst_identity:.1e}")
    } else {
        format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
    };
    verdict(pass, detail)
}

fn run_of<'a>(o: &'a ExperimentOutcome, name: &str) -> &'a eegvfusion::eval::MetricsReport {
    &o.runs.iter().find(|r| r.report.model == name).unwrap_or_else(|| panic!("no run {name}")).report.metrics
}

fn fusion_beats_single(o: Option<&ExperimentOutcome>, elapsed: Duration) -> Verdict {
    let Some(o) = o else { return verdict(false, "experiment failed".into()) };
    let cfg = ExperimentConfig::desk();
    let (mut seizures, mut with_artifact, mut interictal, mut benign) = (0, 0, 0.0, 0.0);
    for s in 0..cfg.synth.sessions {
        let l = plan_layout(&cfg.synth, s).unwrap();
        seizures += l.seizures.len();
        with_artifact += l.seizure_artifact.iter().filter(|&&a| a).count();
        interictal += cfg.synth.duration_s - l.seizures.iter().map(|e| e.duration_s()).sum::<f64>();
        benign += l.benign_bouts.iter().map(|e| e.duration_s()).sum::<f64>();
    }
    let f = run_of(o, "fusion");
    let e = run_of(o, "eeg-only");
    let v = run_of(o, "video-only");
    let ba = f.balanced_accuracy.unwrap_or(0.0);
    let pass = f.event_sensitivity == Some(1.0)
        && f.event_far_per_hour < e.event_far_per_hour
        && f.event_far_per_hour < v.event_far_per_hour
        && ba >= 0.95
        && elapsed < Duration::from_secs(30 * 60);
    verdict(
        pass,
        format!(
            "fusion sens {:?} FAR {:.2}/h BA {ba:.4}; eeg-only FAR {:.2}/h; video-only FAR {:.2}/h; \
             {with_artifact}/{seizures} seizures under artifact, benign motion {:.1}% of interictal time; \
             experiment {:.0} s",
            f.event_sensitivity,
            f.event_far_per_hour,
            e.event_far_per_hour,
            v.event_far_per_hour,
            100.0 * benign / interictal,
            elapsed.as_secs_f64()
        ),
    )
}

fn ot_ablation(o: Option<&ExperimentOutcome>) -> Verdict {
    let Some(o) = o else { return verdict(false, "experiment failed".into()) };
    let f = run_of(o, "fusion");
    let n = run_of(o, "fusion-no_ot");
    let pass = n.event_far_per_hour >= f.event_far_per_hour && n.event_sensitivity == Some(1.0);
    verdict(
        pass,
        format!(
            "no_ot FAR {:.2}/h sens {:?}; full FAR {:.2}/h",
            n.event_far_per_hour, n.event_sensitivity, f.event_far_per_hour
        ),
    )
}

fn reduced_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.synth.sessions = 4;
    cfg.synth.subjects = 2;
    cfg.synth.duration_s = 600.0;
    cfg.synth.seizures_per_session = 2.0;
    cfg.synth.video_t_v = 8;
    cfg.synth.video_d_v = 16;
    cfg.split = eegvfusion::data::SplitMode::RandomSession { test_sessions: 1 };
    cfg.negative_ratio = 2;
    cfg.mae.d_model = 16;
    cfg.mae.enc_layers = 1;
    cfg.mae.dec_layers = 1;
    cfg.mae.enc_heads = 2;
    cfg.mae.dec_heads = 2;
    cfg.mae.d_ff = 32;
    cfg.pretrain.steps = 10;
    cfg.pretrain.batch_size = 4;
    cfg.pretrain.eval_windows = 4;
    cfg.fusion.d_f = 8;
    cfg.fusion.adapter_layers = 1;
    cfg.fusion.fusion_layers = 1;
    cfg.fusion.heads = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg
}

struct RunBytes {
    corpus: Vec<Vec<u8>>,
    files: Vec<(String, Vec<u8>)>,
    fingerprint: String,
    losses: String,
    predictions: String,
    reports: Vec<String>,
}

fn reduced_run(cfg: &ExperimentConfig) -> RunBytes {
    let sessions = generate_corpus(cfg).unwrap();
    let corpus = sessions
        .iter()
        .flat_map(|s| [eeg_to_bytes(&s.recording), video_to_bytes(&s.video), serde_json::to_vec(&s.events).unwrap()])
        .collect();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &sessions, Some(cfg.fingerprint())).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    let o = run_experiment(cfg, sessions, &[Variant::FUSION, Variant::EEG_ONLY]).unwrap();
    let pre = o.pretrain.as_ref().unwrap();
    let losses = serde_json::to_string(&(
        &pre.train_losses,
        pre.eval_initial,
        pre.eval_final,
        o.runs.iter().map(|r| (&r.trained.report.steps, &r.trained.report.epoch_losses)).collect::<Vec<_>>(),
    ))
    .unwrap();
    let predictions = serde_json::to_string(&o.runs.iter().map(|r| &r.predictions).collect::<Vec<_>>()).unwrap();
    let reports = o.runs.iter().map(|r| r.report.to_json().unwrap()).collect();
    RunBytes { corpus, files, fingerprint: o.corpus_fingerprint, losses, predictions, reports }
}

fn determinism() -> Verdict {
    let cfg = reduced_config();
    let a = reduced_run(&cfg);
    let b = reduced_run(&cfg);
    let same = [
        ("corpus", a.corpus == b.corpus && a.files == b.files && a.fingerprint == b.fingerprint),
        ("losses", a.losses == b.losses),
        ("predictions", a.predictions == b.predictions),
        ("reports", a.reports == b.reports),
    ];
    let differing: Vec<&str> = same.iter().filter(|s| !s.1).map(|s| s.0).collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("two runs byte-identical ({} corpus files, {} reports)", a.files.len(), a.reports.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut results = vec![
        run(1, "gradient checks", gradients),
        run(2, "IPOT vs exact LP", ipot_vs_lp),
        run(3, "OT loss formula", ot_loss_formula),
        run(4, "filter responses", dsp_response),
    ];
    let cfg = ExperimentConfig::desk();
    let t = Instant::now();
    let outcome = catch_unwind(|| {
        let sessions = generate_corpus(&cfg).unwrap();
        run_experiment(&cfg, sessions, &[Variant::FUSION, Variant::EEG_ONLY, Variant::VIDEO_ONLY, Variant::NO_OT]).unwrap()
    })
    .ok();
    let elapsed = t.elapsed();
    if let Some(o) = &outcome {
        let reports: Vec<_> = o.runs.iter().map(|r| r.report.clone()).collect();
        print!("{}", eegvfusion::eval::render_table(&reports));
    }
    results.push(run(5, "masked autoencoder", || mae_behaviour(outcome.as_ref())));
    results.push(run(6, "post-processing goldens", postprocess_goldens));
    results.push(run(7, "metrics oracle", metrics_oracle));
    results.push(run(8, "fusion vs single modality", || fusion_beats_single(outcome.as_ref(), elapsed)));
    results.push(run(9, "OT ablation", || ot_ablation(outcome.as_ref())));
    results.push(run(10, "determinism", determinism));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
