use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use eegvfusion::config::ExperimentConfig;
use eegvfusion::data::SplitMode;
use eegvfusion::dsp::{preprocess, welch_psd};
use eegvfusion::eval::{audit_csv, render_table};
use eegvfusion::fusion::Modality;
use eegvfusion::io::{self, PredictionMeta};
use eegvfusion::pipeline::{
    corpus_fingerprint, ensure_parent, evaluate_predictions, generate_corpus, load_model, load_pretrained,
    make_report, model_checkpoint, pretrain_checkpoint, pretrain_encoder, predict_sessions, train_variant,
    transport_plans, Ablation, Layout, Predictor, TrainingData, Variant, Workspace,
};
use eegvfusion::tensor::Checkpoint;
use eegvfusion::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "eegvfusion", version, about = "EEG/video seizure detection pipeline")]
struct Cli {
    /// TOML experiment config; keys override the named profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the experiment seed and the generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    split: Option<SplitArg>,
    /// Subject held out by `--split held-out-subject` (default: the first).
    #[arg(long, global = true)]
    subject: Option<String>,
    /// Read sessions from this corpus directory instead of `<out>/corpus`.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    RandomSession,
    HeldOutSubject,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Fusion,
    EegOnly,
    VideoOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    #[value(name = "no_ot")]
    NoOt,
    #[value(name = "no_pretrain")]
    NoPretrain,
}

#[derive(clap::Args, Clone, Copy)]
struct VariantArgs {
    #[arg(long, value_enum, default_value = "fusion")]
    modality: ModalityArg,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
}

impl VariantArgs {
    fn variant(self) -> Result<Variant> {
        let m = match self.modality {
            ModalityArg::Fusion => Modality::Fusion,
            ModalityArg::EegOnly => Modality::EegOnly,
            ModalityArg::VideoOnly => Modality::VideoOnly,
        };
        let a = self.ablation.map(|a| match a {
            AblationArg::NoOt => Ablation::NoOt,
            AblationArg::NoPretrain => Ablation::NoPretrain,
        });
        Ok(Variant::new(m, a)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into `<out>/corpus`.
    GenData,
    /// Masked-autoencoder pre-training on the training sessions.
    Pretrain,
    /// Supervised training of one classifier variant.
    Train(VariantArgs),
    /// Window probabilities for the test sessions (or the listed ones).
    Detect {
        #[command(flatten)]
        variant: VariantArgs,
        #[arg(long = "session")]
        sessions: Vec<String>,
        /// Also write every window's transport plan as CSV under this directory.
        #[arg(long)]
        dump_plans: Option<PathBuf>,
    },
    /// Score a predictions CSV against the corpus annotations.
    Eval {
        #[command(flatten)]
        variant: VariantArgs,
        /// Defaults to the predictions written by `detect` for the variant.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Report name (defaults to the variant name).
        #[arg(long)]
        name: Option<String>,
    },
    /// Welch power spectrum of a corpus session or an EEG file.
    Psd {
        #[arg(long, conflicts_with = "eeg")]
        session: Option<String>,
        /// `.eeg` binary, or CSV with `--sample-rate`.
        #[arg(long)]
        eeg: Option<PathBuf>,
        #[arg(long)]
        sample_rate: Option<f64>,
        /// Skip the filters and baseline removal.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value_t = 2.0)]
        segment_s: f64,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    layout: Layout,
    split_arg: Option<SplitArg>,
}

impl Ctx {
    fn corpus_dir(&self) -> PathBuf {
        self.cfg.corpus_dir.clone().unwrap_or_else(|| self.layout.corpus_dir())
    }

    fn workspace(&self) -> Result<Workspace> {
        let (_, sessions) = io::read_corpus(&self.corpus_dir())?;
        let mut cfg = self.cfg.clone();
        if let (Some(SplitArg::HeldOutSubject), SplitMode::HeldOutSubject { subject }) = (self.split_arg, &mut cfg.split) {
            if subject.is_empty() {
                let mut subjects: Vec<&str> = sessions.iter().map(|s| s.subject.as_str()).collect();
                subjects.sort_unstable();
                *subject = subjects.first().map(|s| s.to_string()).unwrap_or_default();
            }
        }
        Ok(Workspace::new(cfg, sessions)?)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(dir) = &cli.corpus {
        cfg.corpus_dir = Some(dir.clone());
    }
    match cli.split {
        Some(SplitArg::RandomSession) => {
            if !matches!(cfg.split, SplitMode::RandomSession { .. }) {
                cfg.split = SplitMode::RandomSession { test_sessions: 4 };
            }
        }
        Some(SplitArg::HeldOutSubject) => {
            let subject = match (&cli.subject, &cfg.split) {
                (Some(s), _) => s.clone(),
                (None, SplitMode::HeldOutSubject { subject }) => subject.clone(),
                (None, _) => String::new(),
            };
            cfg.split = SplitMode::HeldOutSubject { subject };
        }
        None => {
            if let Some(s) = &cli.subject {
                cfg.split = SplitMode::HeldOutSubject { subject: s.clone() };
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    io::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let dir = ctx.layout.corpus_dir();
    let sessions = generate_corpus(&ctx.cfg)?;
    let gen_fp = eegvfusion::config::canonical_json(&serde_json::to_value(&ctx.cfg.synth)?);
    let fp = hex_sha(gen_fp.as_bytes());
    let m = io::write_corpus(&dir, &sessions, Some(fp)).with_context(|| format!("writing corpus to {}", dir.display()))?;
    write(&ctx.layout.root.join("config.toml"), &ctx.cfg.to_toml()?)?;
    println!("wrote {} sessions to {}", m.sessions.len(), dir.display());
    println!("corpus fingerprint {}", corpus_fingerprint(&sessions)?);
    Ok(())
}

fn hex_sha(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let ws = ctx.workspace()?;
    let p = pretrain_encoder(&ws)?;
    let path = ctx.layout.mae_checkpoint();
    ensure_parent(&path)?;
    pretrain_checkpoint(&ctx.cfg, &p).save(&path)?;
    let r = &p.report;
    let log: Vec<_> = r
        .train_losses
        .iter()
        .zip(&r.lrs)
        .enumerate()
        .map(|(i, (l, lr))| json!({ "step": i, "lr": lr, "loss": l }))
        .collect();
    let dir = path.parent().expect("checkpoint has a parent");
    write(&dir.join("pretrain_log.jsonl"), &io::json_lines(&log)?)?;
    let summary = json!({
        "config_fingerprint": ctx.cfg.fingerprint(),
        "seed": ctx.cfg.seed,
        "eval_initial": r.eval_initial,
        "eval_final": r.eval_final,
        "eval_zero": r.eval_zero,
        "ratio": r.eval_final / r.eval_initial,
    });
    write(&dir.join("pretrain_report.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("pre-training loss {:.4} -> {:.4}; checkpoint {}", r.eval_initial, r.eval_final, path.display());
    Ok(())
}

fn train(ctx: &Ctx, v: Variant) -> Result<()> {
    let ws = ctx.workspace()?;
    let encoder = if v.frozen_encoder() {
        let ck = Checkpoint::load(&ctx.layout.mae_checkpoint())?;
        Some(load_pretrained(&ctx.cfg.mae, &ck)?)
    } else {
        None
    };
    let data = TrainingData::new(&ws, encoder.as_ref())?;
    let t = train_variant(&ws, v, encoder.as_ref(), &data)?;
    let path = ctx.layout.model_checkpoint(&v);
    ensure_parent(&path)?;
    model_checkpoint(&ctx.cfg, &t).save(&path)?;
    let dir = ctx.layout.model_dir(&v);
    write(&dir.join("train_log.jsonl"), &io::json_lines(&t.report.steps)?)?;
    let summary = json!({
        "variant": v.name(),
        "config_fingerprint": ctx.cfg.fingerprint(),
        "seed": ctx.cfg.seed,
        "windows": data.windows.len(),
        "epoch_losses": t.report.epoch_losses,
        "encoder_checksums": t.encoder_checksums,
        "split": ws.split_json(),
    });
    write(&dir.join("train_report.json"), &serde_json::to_string_pretty(&summary)?)?;
    let losses = &t.report.epoch_losses;
    println!(
        "{}: loss {:.4} -> {:.4} over {} epochs; checkpoint {}",
        v.name(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        losses.len(),
        path.display()
    );
    Ok(())
}

fn detect(ctx: &Ctx, v: Variant, ids: &[String], dump_plans: Option<&Path>) -> Result<()> {
    let ws = ctx.workspace()?;
    let ck = Checkpoint::load(&ctx.layout.model_checkpoint(&v))?;
    let m = load_model(&ck)?;
    let sessions = if ids.is_empty() {
        ws.test.clone()
    } else {
        ids.iter().map(|id| ws.session_index(id)).collect::<eegvfusion::Result<Vec<_>>>()?
    };
    let p = Predictor::from(&m);
    let preds = predict_sessions(&ws, &p, &sessions, None)?;
    let path = ctx.layout.predictions(&v);
    write(&path, &io::predictions_csv(&preds))?;
    let meta = PredictionMeta {
        model: v.name(),
        config_fingerprint: ctx.cfg.fingerprint(),
        seed: ctx.cfg.seed,
        checkpoint_fingerprint: m.fingerprint.clone(),
        sessions: preds.iter().map(|(id, _)| id.clone()).collect(),
    };
    write(&meta_path(&path), &serde_json::to_string_pretty(&meta)?)?;
    if let Some(dir) = dump_plans {
        for &s in &sessions {
            let n = preds.iter().find(|(id, _)| id == &ws.sessions[s].id).map_or(0, |(_, p)| p.len());
            let windows: Vec<usize> = (0..n).collect();
            for (w, plan) in transport_plans(&ws, &p, s, &windows)?.iter().enumerate() {
                write(&dir.join(&ws.sessions[s].id).join(format!("{w}.csv")), &io::matrix_csv(plan)?)?;
            }
        }
        println!("transport plans in {}", dir.display());
    }
    let rows: usize = preds.iter().map(|(_, p)| p.len()).sum();
    println!("{}: {rows} window predictions for {} sessions in {}", v.name(), preds.len(), path.display());
    Ok(())
}

fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

fn eval(ctx: &Ctx, v: Variant, predictions: Option<&Path>, name: Option<&str>) -> Result<()> {
    let path = predictions.map_or_else(|| ctx.layout.predictions(&v), Path::to_path_buf);
    let text = io::read_artifact(&path, "predictions CSV")?;
    let preds = io::parse_predictions_csv(&text)?;
    let (_, sessions) = io::read_corpus(&ctx.corpus_dir())?;
    let e = evaluate_predictions(&ctx.cfg, &sessions, &preds)?;
    let split = match std::fs::read_to_string(meta_path(&path)) {
        Ok(m) => serde_json::from_str::<serde_json::Value>(&m)?,
        Err(_) => json!({ "sessions": preds.iter().map(|(id, _)| id.clone()).collect::<Vec<_>>() }),
    };
    let name = name.map_or_else(|| v.name(), str::to_string);
    let report = make_report(&ctx.cfg, &name, split, &e);
    let dir = ctx.layout.report_dir(&name);
    write(&dir.join("report.json"), &report.to_json()?)?;
    let table = render_table(std::slice::from_ref(&report));
    write(&dir.join("report.txt"), &table)?;
    write(&dir.join("events_audit.csv"), &audit_csv(&e.audit))?;
    print!("{table}");
    println!("report in {}", dir.display());
    Ok(())
}

fn psd(ctx: &Ctx, session: Option<&str>, eeg: Option<&Path>, sample_rate: Option<f64>, raw: bool, seg: f64, ov: f64) -> Result<()> {
    let (name, rec) = match (session, eeg) {
        (Some(id), _) => {
            let (_, sessions) = io::read_corpus(&ctx.corpus_dir())?;
            let s = sessions.into_iter().find(|s| s.id == id).with_context(|| format!("session {id} is not in the corpus"))?;
            (id.to_string(), s.recording)
        }
        (None, Some(path)) => {
            let stem = path.file_stem().map_or_else(|| "eeg".into(), |s| s.to_string_lossy().into_owned());
            let rec = if path.extension().is_some_and(|e| e == "csv") {
                let Some(fs) = sample_rate else { bail!("--sample-rate is required for CSV input") };
                io::eeg_from_csv(&io::read_artifact(path, "EEG CSV")?, fs)?
            } else {
                io::read_eeg(path)?
            };
            (stem, rec)
        }
        (None, None) => bail!("psd needs --session or --eeg"),
    };
    let rec = if raw { rec } else { preprocess(&rec, &ctx.cfg.preprocess)? };
    let p = welch_psd(&rec, seg, ov)?;
    let path = ctx.layout.psd_dir().join(format!("{name}.csv"));
    write(&path, &io::psd_csv(&p, &rec.channel_names))?;
    for (ch, pow) in rec.channel_names.iter().zip(&p.power) {
        let peak = pow.iter().enumerate().skip(1).max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |x| x.0);
        println!("{ch}: peak at {} Hz", p.freqs[peak]);
    }
    println!("PSD in {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ctx = Ctx { cfg, layout: Layout::new(&cli.out), split_arg: cli.split };
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Pretrain => pretrain(&ctx),
        Command::Train(v) => train(&ctx, v.variant()?),
        Command::Detect { variant, sessions, dump_plans } => detect(&ctx, variant.variant()?, sessions, dump_plans.as_deref()),
        Command::Eval { variant, predictions, name } => eval(&ctx, variant.variant()?, predictions.as_deref(), name.as_deref()),
        Command::Psd { session, eeg, sample_rate, raw, segment_s, overlap } => {
            psd(&ctx, session.as_deref(), eeg.as_deref(), *sample_rate, *raw, *segment_s, *overlap)
        }
    }
}

fn hint(e: &anyhow::Error) -> Option<&'static str> {
    let msg = match e.downcast_ref::<Error>() {
        Some(Error::MissingArtifact(m)) => m.as_str(),
        _ => return None,
    };
    if msg.contains("manifest") {
        Some("run `eegvfusion gen-data` first, or pass --corpus")
    } else if msg.contains("mae.ckpt") || msg.contains("pre-trained") {
        Some("run `eegvfusion pretrain` first, or train with --ablation no_pretrain")
    } else if msg.contains("model.ckpt") {
        Some("run `eegvfusion train` for this variant first")
    } else if msg.contains("predictions") {
        Some("run `eegvfusion detect` for this variant first")
    } else {
        None
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(h) = hint(&e) {
                eprintln!("hint: {h}");
            }
            ExitCode::FAILURE
        }
    }
}
