//! Command-line entry point wiring all modules together.
//!
//! Every command echoes its effective configuration and the SHA-256 of
//! each artifact it wrote into `run.json` next to its outputs, so a run
//! can be checked for reproducibility by re-executing it and comparing
//! hashes. Exit codes: 0 success, 1 validation error, 2 runtime failure.

use crate::dataio::{
    load_dataset, load_recording, save_dataset, synth_generate, Condition, Dataset,
    DatasetManifest, SynthConfig, TrialMeta,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    loso_csv, metrics, parse_loso_csv, parse_tone_metrics_csv, rank_channels, render_loso_table,
    render_tone_rows, run_kfold, run_loso, tone_metrics_csv, top_k, ConfusionMatrix,
};
use crate::model::{self, gradcheck_suite, load_model, save_model, ModelConfig};
use crate::sigproc::{preprocess, PassthroughArtifactRemoval, PipelineConfig};
use crate::training::TrainConfig;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(
    name = "catnet",
    version,
    about = "Multimodal EEG-EMG tone decoding: preprocessing, training, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess a continuous recording container into trial tensors
    Preprocess(PreprocessArgs),
    /// Generate a synthetic multi-subject dataset
    Synth(SynthArgs),
    /// Train with stratified k-fold cross-validation
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset
    Eval(EvalArgs),
    /// Leave-one-subject-out training and evaluation
    Loso(LosoArgs),
    /// Rank EEG channels by aggregated attention gates
    RankChannels(RankArgs),
    /// Run the finite-difference gradient verification suite
    Gradcheck,
    /// Merge metric CSVs from earlier runs into summary tables
    Report(ReportArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input recording container directory
    #[arg(long = "in")]
    in_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Band-pass edges in Hz, e.g. 1,100
    #[arg(long, default_value = "1,100")]
    band: String,
    /// Notch center frequency in Hz
    #[arg(long, default_value_t = 50.0)]
    notch: f64,
    /// Target sample rate in Hz
    #[arg(long, default_value_t = 500.0)]
    rate: f64,
    /// Post-onset crop window in seconds, e.g. 0,1
    #[arg(long, default_value = "0,1")]
    window: String,
    /// Condition tag recorded in the output manifest
    #[arg(long, default_value = "silent")]
    condition: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    /// Trials per subject
    #[arg(long, default_value_t = 480)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    ce: usize,
    #[arg(long, default_value_t = 5)]
    cm: usize,
    /// Samples per trial before difference augmentation
    #[arg(long, default_value_t = 500)]
    t: usize,
    #[arg(long, default_value_t = 2.0)]
    snr: f64,
    /// Per-subject gain/offset shift scale
    #[arg(long, default_value_t = 0.3)]
    shift: f64,
    /// Informative EEG channel indices, comma separated
    #[arg(long)]
    informative: Option<String>,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// JSON config file ({"model": {...}, "train": {...}})
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Focal focusing exponent
    #[arg(long)]
    gamma: Option<f64>,
    /// Focal class weights, e.g. 0.2,0.3,0.2,0.3
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long = "lambda-dom")]
    lambda_dom: Option<f64>,
    /// Center-loss class weights, e.g. 0.2,0.3,0.2,0.3 (zeros disable)
    #[arg(long = "center-weights")]
    center_weights: Option<String>,
    /// Center EMA rate
    #[arg(long = "center-ema")]
    center_ema: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Global-norm gradient clip (diagnostic)
    #[arg(long)]
    clip: Option<f64>,
    /// Stop a fold once validation accuracy reaches this value
    #[arg(long = "target-val-acc")]
    target_val_acc: Option<f64>,
    #[arg(long = "no-cross-attention", default_value_t = false)]
    no_cross_attention: bool,
    #[arg(long = "no-bilstm", default_value_t = false)]
    no_bilstm: bool,
    #[arg(long = "no-fusion-eeg", default_value_t = false)]
    no_fusion_eeg: bool,
    #[arg(long = "no-fusion-emg", default_value_t = false)]
    no_fusion_emg: bool,
    #[arg(long = "no-domain-discriminator", default_value_t = false)]
    no_domain_discriminator: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LosoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of the training subjects' trials held out for early
    /// stopping
    #[arg(long = "val-frac", default_value_t = 0.15)]
    val_frac: f64,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// tone,precision,recall,f1 CSV files from eval/train runs
    #[arg(long = "tone-csv", num_args = 0..)]
    tone_csv: Vec<PathBuf>,
    /// subject,accuracy CSV files from loso runs
    #[arg(long = "loso-csv", num_args = 0..)]
    loso_csv: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputHash>,
}

#[derive(Serialize)]
pub struct OutputHash {
    pub path: String,
    pub sha256: String,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

struct RunTracker {
    command: String,
    argv: Vec<String>,
    seed: u64,
    started: f64,
    config: serde_json::Value,
    outputs: Vec<PathBuf>,
    out_dir: PathBuf,
}

impl RunTracker {
    fn new(command: &str, argv: &[String], out_dir: &Path, seed: u64) -> Self {
        RunTracker {
            command: command.into(),
            argv: argv.to_vec(),
            seed,
            started: now_unix(),
            config: serde_json::Value::Null,
            outputs: Vec::new(),
            out_dir: out_dir.to_path_buf(),
        }
    }

    fn set_config(&mut self, config: impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    fn add(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.add(path.clone());
        Ok(path)
    }

    fn finish(self) -> Result<()> {
        let mut outputs = Vec::new();
        for p in &self.outputs {
            outputs.push(OutputHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            });
        }
        let record = RunRecord {
            command: self.command,
            argv: self.argv,
            seed: self.seed,
            started_unix: self.started,
            finished_unix: now_unix(),
            config: self.config,
            outputs,
        };
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| Error::io(self.out_dir.display().to_string(), e))?;
        let path = self.out_dir.join("run.json");
        fs::write(&path, serde_json::to_vec_pretty(&record)?)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| Error::invalid(format!("{what} must be LO,HI, got `{s}`")))?;
    Ok((
        a.trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad {what} low edge `{a}`")))?,
        b.trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad {what} high edge `{b}`")))?,
    ))
}

fn parse_four(s: &str, what: &str) -> Result<[f64; 4]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::invalid(format!(
            "{what} needs four comma-separated values, got `{s}`"
        )));
    }
    let mut out = [0.0; 4];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad {what} entry `{p}`")))?;
    }
    Ok(out)
}

fn parse_indices(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad channel index `{p}`")))
        })
        .collect()
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct RunConfigFile {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct EffectiveConfig {
    model: ModelConfig,
    train: TrainConfig,
}

/// Resolve model/train configs: built-in defaults, then the config file,
/// then CLI flags.
fn resolve_configs(ov: &TrainOverrides, ds: Option<&Dataset>) -> Result<(ModelConfig, TrainConfig)> {
    let mut file_cfg = RunConfigFile::default();
    if let Some(path) = &ov.config {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        file_cfg = serde_json::from_slice(&bytes)?;
    }
    let mut mcfg = file_cfg.model;
    let mut tcfg = file_cfg.train;
    if let Some(ds) = ds {
        mcfg.dims.c_e = ds.c_e();
        mcfg.dims.c_m = ds.c_m();
        mcfg.dims.t_prime = ds.t_prime();
        mcfg.dims.n_subjects = ds.manifest.subjects.len();
        let max_id = ds.manifest.subjects.iter().max().copied().unwrap_or(0) as usize;
        if max_id != ds.manifest.subjects.len() {
            return Err(Error::invalid(
                "training expects contiguous 1-based subject ids",
            ));
        }
    }
    if let Some(v) = ov.seed {
        tcfg.seed = v;
    }
    if let Some(v) = ov.epochs {
        tcfg.epochs = v;
    }
    if let Some(v) = ov.batch {
        tcfg.batch = v;
    }
    if let Some(v) = ov.lr {
        tcfg.lr = v;
    }
    if let Some(v) = ov.folds {
        tcfg.folds = v;
    }
    if let Some(v) = ov.clip {
        tcfg.clip = Some(v);
    }
    if let Some(v) = ov.target_val_acc {
        tcfg.target_val_acc = Some(v);
    }
    if let Some(v) = ov.gamma {
        mcfg.loss.gamma = v;
    }
    if let Some(s) = &ov.alpha {
        mcfg.loss.alpha = parse_four(s, "alpha")?;
    }
    if let Some(v) = ov.lambda_dom {
        mcfg.loss.lambda_dom = v;
    }
    if let Some(s) = &ov.center_weights {
        mcfg.loss.center_weights = parse_four(s, "center weights")?;
    }
    if let Some(v) = ov.center_ema {
        mcfg.center_ema = v;
    }
    if let Some(v) = ov.dropout {
        mcfg.dropout = v;
    }
    mcfg.ablation.no_cross_attention |= ov.no_cross_attention;
    mcfg.ablation.no_bilstm |= ov.no_bilstm;
    mcfg.ablation.no_fusion_eeg |= ov.no_fusion_eeg;
    mcfg.ablation.no_fusion_emg |= ov.no_fusion_emg;
    mcfg.ablation.no_domain_discriminator |= ov.no_domain_discriminator;
    mcfg.validate()?;
    tcfg.validate()?;
    Ok((mcfg, tcfg))
}

fn history_csv(history: &[crate::training::EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
    for h in history {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6e}\n",
            h.epoch, h.train_loss, h.val_loss, h.val_acc, h.lr
        ));
    }
    s
}

fn cmd_preprocess(args: &PreprocessArgs, argv: &[String]) -> Result<()> {
    let band = parse_pair(&args.band, "band")?;
    let window = parse_pair(&args.window, "window")?;
    let condition = match args.condition.as_str() {
        "audible" => Condition::Audible,
        "silent" => Condition::Silent,
        "synthetic" => Condition::Synthetic,
        other => {
            return Err(Error::invalid(format!(
                "condition must be audible|silent|synthetic, got `{other}`"
            )))
        }
    };
    let cfg = PipelineConfig {
        target_rate_hz: args.rate,
        band,
        notch_hz: args.notch,
        crop: window,
        ..PipelineConfig::default()
    };
    let rec = load_recording(&args.in_dir)?;
    let (trials, report) = preprocess(&rec, &cfg, &PassthroughArtifactRemoval)?;
    if trials.is_empty() {
        return Err(Error::invalid("no trials survived preprocessing"));
    }
    let t_prime = trials[0].eeg.cols;
    let mut subjects: Vec<u16> = trials.iter().map(|t| t.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let manifest = DatasetManifest {
        version: crate::dataio::CONTAINER_VERSION,
        kind: "trials".into(),
        condition,
        rate_hz: args.rate,
        t_prime,
        eeg_channel_names: rec.eeg.channel_names.clone(),
        emg_channel_names: rec.emg.channel_names.clone(),
        subjects,
        endianness: "little".into(),
        trials: trials
            .iter()
            .map(|t| TrialMeta {
                offset: 0,
                tone: t.tone,
                subject: t.subject,
            })
            .collect(),
    };
    let ds = Dataset { manifest, trials };
    save_dataset(&ds, &args.out)?;

    let mut tracker = RunTracker::new("preprocess", argv, &args.out, 0);
    tracker.set_config(serde_json::json!({
        "band": band,
        "notch_hz": args.notch,
        "rate_hz": args.rate,
        "crop_window": window,
        "condition": args.condition,
        "kept": ds.trials.len(),
        "skipped": report.skipped.len(),
    }))?;
    tracker.add(args.out.join("manifest.json"));
    tracker.add(args.out.join("trials.bin"));
    tracker.finish()?;
    println!(
        "preprocessed {} trials ({} skipped) -> {}",
        ds.trials.len(),
        report.skipped.len(),
        args.out.display()
    );
    for s in &report.skipped {
        println!("  skipped onset {}: {}", s.onset, s.reason);
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs, argv: &[String]) -> Result<()> {
    let default_informative: Vec<usize> =
        SynthConfig::default().informative_eeg.into_iter().filter(|&c| c < args.ce).collect();
    let informative_eeg = match &args.informative {
        Some(s) => parse_indices(s)?,
        None if default_informative.is_empty() => vec![0],
        None => default_informative,
    };
    let informative_emg: Vec<usize> = SynthConfig::default()
        .informative_emg
        .into_iter()
        .filter(|&c| c < args.cm)
        .collect();
    let cfg = SynthConfig {
        n_subjects: args.subjects,
        trials_per_subject: args.trials,
        c_e: args.ce,
        c_m: args.cm,
        t_samples: args.t,
        snr: args.snr,
        subject_shift_scale: args.shift,
        informative_eeg,
        informative_emg: if informative_emg.is_empty() {
            vec![0]
        } else {
            informative_emg
        },
        seed: args.seed,
    };
    let ds = synth_generate(&cfg)?;
    save_dataset(&ds, &args.out)?;
    let mut tracker = RunTracker::new("synth", argv, &args.out, args.seed);
    tracker.set_config(&cfg)?;
    tracker.add(args.out.join("manifest.json"));
    tracker.add(args.out.join("trials.bin"));
    tracker.finish()?;
    println!(
        "generated {} trials ({} subjects) -> {}",
        ds.trials.len(),
        cfg.n_subjects,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let (mcfg, tcfg) = resolve_configs(&args.overrides, Some(&ds))?;
    let mut tracker = RunTracker::new("train", argv, &args.out, tcfg.seed);
    tracker.set_config(EffectiveConfig {
        model: mcfg,
        train: tcfg,
    })?;

    let outcomes = run_kfold::<f32>(&ds, &mcfg, &tcfg)?;
    let mut summary = String::from("fold,accuracy,kappa,best_epoch\n");
    for oc in &outcomes {
        let fold_dir = format!("fold_{}", oc.fold);
        tracker.write_text(&format!("{fold_dir}/history.csv"), &history_csv(&oc.fit.history))?;
        tracker.write_text(&format!("{fold_dir}/metrics.csv"), &tone_metrics_csv(&oc.report))?;
        tracker.write_text(
            &format!("{fold_dir}/report.json"),
            &serde_json::to_string_pretty(&oc.report)?,
        )?;
        let model_dir = args.out.join(&fold_dir).join("model");
        save_model(&oc.fit.params, &mcfg, &model_dir)?;
        tracker.add(model_dir.join("model.json"));
        tracker.add(model_dir.join("params.bin"));
        summary.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            oc.fold, oc.report.accuracy, oc.report.kappa, oc.fit.best_epoch
        ));
        println!(
            "fold {}: accuracy {:.2}% kappa {:.4} (best epoch {})",
            oc.fold,
            100.0 * oc.report.accuracy,
            oc.report.kappa,
            oc.fit.best_epoch
        );
    }
    let mean_acc =
        outcomes.iter().map(|o| o.report.accuracy).sum::<f64>() / outcomes.len() as f64;
    println!("mean accuracy {:.2}%", 100.0 * mean_acc);
    tracker.write_text("summary.csv", &summary)?;
    tracker.finish()?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let (params, mcfg): (model::ModelParams<f32>, _) = load_model(&args.model)?;
    let ds = load_dataset(&args.data)?;
    if ds.c_e() != mcfg.dims.c_e || ds.c_m() != mcfg.dims.c_m || ds.t_prime() != mcfg.dims.t_prime
    {
        return Err(Error::invalid(format!(
            "dataset shape ({}, {}, {}) does not match the model ({}, {}, {})",
            ds.c_e(),
            ds.c_m(),
            ds.t_prime(),
            mcfg.dims.c_e,
            mcfg.dims.c_m,
            mcfg.dims.t_prime
        )));
    }
    let trials: Vec<&crate::dataio::TrialTensor> = ds.trials.iter().collect();
    let preds = model::predict_batch(&params, &mcfg, &trials)?;
    let truth: Vec<u8> = trials.iter().map(|t| t.tone).collect();
    let cm = ConfusionMatrix::from_pairs(&truth, &preds)?;
    let report = metrics(&cm, format!("eval on {}", args.data.display()), 0)?;
    let mut tracker = RunTracker::new("eval", argv, &args.out, 0);
    tracker.set_config(mcfg)?;
    tracker.write_text("metrics.csv", &tone_metrics_csv(&report))?;
    tracker.write_text("report.json", &serde_json::to_string_pretty(&report)?)?;
    tracker.finish()?;
    println!(
        "accuracy {:.2}% kappa {:.4} over {} trials",
        100.0 * report.accuracy,
        report.kappa,
        trials.len()
    );
    Ok(())
}

fn cmd_loso(args: &LosoArgs, argv: &[String]) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let (mcfg, tcfg) = resolve_configs(&args.overrides, Some(&ds))?;
    let mut tracker = RunTracker::new("loso", argv, &args.out, tcfg.seed);
    tracker.set_config(EffectiveConfig {
        model: mcfg,
        train: tcfg,
    })?;
    let outcomes = run_loso::<f32>(&ds, &mcfg, &tcfg, args.val_frac)?;
    let rows: Vec<(u16, f64)> = outcomes
        .iter()
        .map(|o| (o.subject, o.report.accuracy))
        .collect();
    for (s, a) in &rows {
        println!("subject {s}: accuracy {:.2}%", 100.0 * a);
    }
    let mean = rows.iter().map(|(_, a)| a).sum::<f64>() / rows.len() as f64;
    println!("mean subject accuracy {:.2}%", 100.0 * mean);
    tracker.write_text("loso.csv", &loso_csv(&rows))?;
    for oc in &outcomes {
        tracker.write_text(
            &format!("subject_{}/metrics.csv", oc.subject),
            &tone_metrics_csv(&oc.report),
        )?;
    }
    tracker.finish()?;
    Ok(())
}

fn cmd_rank(args: &RankArgs, argv: &[String]) -> Result<()> {
    let (params, mcfg): (model::ModelParams<f32>, _) = load_model(&args.model)?;
    let ds = load_dataset(&args.data)?;
    let trials: Vec<&crate::dataio::TrialTensor> = ds.trials.iter().collect();
    let ranked = rank_channels(&params, &mcfg, &trials, &ds.manifest.eeg_channel_names)?;
    let selected = top_k(&ranked, args.k)?;
    let mut csv = String::from("channel,weight\n");
    for (name, w) in &ranked {
        csv.push_str(&format!("{name},{w:.6}\n"));
    }
    let mut tracker = RunTracker::new("rank-channels", argv, &args.out, 0);
    tracker.set_config(serde_json::json!({ "k": args.k }))?;
    tracker.write_text("channels.csv", &csv)?;
    tracker.write_text("topk.txt", &(selected.join("\n") + "\n"))?;
    tracker.finish()?;
    println!("top {}: {}", args.k, selected.join(", "));
    Ok(())
}

fn cmd_gradcheck() -> Result<bool> {
    let results = gradcheck_suite()?;
    println!("{:<26} {:>12} {:>10} {:>7}", "check", "max rel err", "tolerance", "status");
    let mut all_ok = true;
    for r in &results {
        let ok = r.passed();
        all_ok &= ok;
        println!(
            "{:<26} {:>12.3e} {:>10.0e} {:>7}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if ok { "pass" } else { "FAIL" }
        );
    }
    Ok(all_ok)
}

fn cmd_report(args: &ReportArgs, argv: &[String]) -> Result<()> {
    if args.tone_csv.is_empty() && args.loso_csv.is_empty() {
        return Err(Error::invalid("report needs at least one input CSV"));
    }
    let stem = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string())
    };
    let mut text = String::new();
    let mut tracker = RunTracker::new("report", argv, &args.out, 0);
    tracker.set_config(serde_json::json!({
        "tone_csv": args.tone_csv.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "loso_csv": args.loso_csv.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    }))?;

    if !args.tone_csv.is_empty() {
        let mut rows = Vec::new();
        let mut merged = String::from("run,tone,precision,recall,f1\n");
        for path in &args.tone_csv {
            let content =
                fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let parsed = parse_tone_metrics_csv(&content)?;
            for &(tone, p, r, f1) in &parsed {
                merged.push_str(&format!("{},{tone},{p:.6},{r:.6},{f1:.6}\n", stem(path)));
            }
            rows.push((stem(path), parsed));
        }
        text.push_str(&render_tone_rows(&rows));
        text.push('\n');
        tracker.write_text("tones_merged.csv", &merged)?;
    }
    if !args.loso_csv.is_empty() {
        let mut rows = Vec::new();
        let mut merged = String::from("run,subject,accuracy\n");
        for path in &args.loso_csv {
            let content =
                fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let parsed = parse_loso_csv(&content)?;
            for &(s, a) in &parsed {
                merged.push_str(&format!("{},{s},{a:.6}\n", stem(path)));
            }
            rows.push((stem(path), parsed));
        }
        text.push_str(&render_loso_table(&rows));
        tracker.write_text("loso_merged.csv", &merged)?;
    }
    print!("{text}");
    tracker.write_text("report.txt", &text)?;
    tracker.finish()?;
    Ok(())
}

/// Parse and run a command line; returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the same channel
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let run = || -> Result<bool> {
        match &cli.cmd {
            Command::Preprocess(a) => cmd_preprocess(a, &argv).map(|_| true),
            Command::Synth(a) => cmd_synth(a, &argv).map(|_| true),
            Command::Train(a) => cmd_train(a, &argv).map(|_| true),
            Command::Eval(a) => cmd_eval(a, &argv).map(|_| true),
            Command::Loso(a) => cmd_loso(a, &argv).map(|_| true),
            Command::RankChannels(a) => cmd_rank(a, &argv).map(|_| true),
            Command::Gradcheck => cmd_gradcheck(),
            Command::Report(a) => cmd_report(a, &argv).map(|_| true),
        }
    };
    match run() {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
