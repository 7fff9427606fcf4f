//! `qnn`: train, evaluate and inspect quaternion recurrent frame classifiers.
//!
//! Records for machines are single JSON objects per line on stdout, each
//! with a `record` field naming its kind. Errors are one JSON line on stderr.
//!
//! Exit codes: 0 success, 1 check or validation failure, 2 usage or config
//! error, 3 I/O, format or data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use qnn_core::checkpoint;
use qnn_core::config::{ModelConfig, StackKind};
use qnn_core::data::{generate_synthetic, label_counts, read_features, write_synthetic, SynthSpec, Utterance};
use qnn_core::qlstm::{AcousticModel, ParamBreakdown};
use qnn_core::scalar::{Precision, Scalar};
use qnn_core::selfcheck::{self, Fault};
use qnn_core::train::{evaluate, train_with, EvalResult, RunFiles};
use qnn_core::{QnnError, Result};

#[derive(Parser)]
#[command(name = "qnn", version, about = "Quaternion LSTM acoustic models: training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints to --out
    Train(TrainArgs),
    /// Evaluate a checkpoint on a feature file
    Eval(EvalArgs),
    /// Run the algebra, layer and gradient self checks
    Selfcheck(SelfcheckArgs),
    /// Write synthetic train/valid/test feature files
    Synth(SynthArgs),
    /// Print parameter counts of a configuration
    Params(ParamsArgs),
}

/// Model and training flags. Each overrides the same key of `--config`.
#[derive(Args, Default)]
struct ModelFlags {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// r2h-norm, r2h, naive-quat or identity
    #[arg(long)]
    front_end: Option<String>,
    #[arg(long)]
    r2h_size: Option<String>,
    /// tanh, hardtanh, relu or sigmoid
    #[arg(long)]
    r2h_activation: Option<String>,
    /// qlstm or lstm
    #[arg(long)]
    stack: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    /// Real width of each recurrent layer
    #[arg(long)]
    hidden: Option<String>,
    /// sum or concat
    #[arg(long)]
    merge: Option<String>,
    #[arg(long)]
    input_dim: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    /// quaternion or component
    #[arg(long)]
    dropout_granularity: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// stall or literal
    #[arg(long)]
    lr_rule: Option<String>,
    #[arg(long)]
    lr_threshold: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// f32 or f64
    #[arg(long)]
    precision: Option<String>,
}

impl ModelFlags {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        let pairs = [
            ("front_end", &self.front_end),
            ("r2h_size", &self.r2h_size),
            ("r2h_activation", &self.r2h_activation),
            ("stack", &self.stack),
            ("depth", &self.depth),
            ("hidden", &self.hidden),
            ("merge", &self.merge),
            ("input_dim", &self.input_dim),
            ("classes", &self.classes),
            ("dropout", &self.dropout),
            ("dropout_granularity", &self.dropout_granularity),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("lr_rule", &self.lr_rule),
            ("lr_threshold", &self.lr_threshold),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
            ("precision", &self.precision),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Optional test set, scored with the final and best checkpoints
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Refuse to run unless this config's digest matches the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the checkpoint's batch size
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Test hook: run against a deliberately broken product (hamilton-sign)
    #[arg(long, default_value = "none")]
    inject_fault: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    dim: usize,
    /// Number of delta-coded classes (even)
    #[arg(long, default_value_t = 2)]
    delta_classes: usize,
    #[arg(long, default_value_t = 6)]
    min_segment: usize,
    #[arg(long, default_value_t = 14)]
    max_segment: usize,
    #[arg(long, default_value_t = 4)]
    min_segments: usize,
    #[arg(long, default_value_t = 8)]
    max_segments: usize,
    /// Comma-separated class priors; uniform when omitted
    #[arg(long)]
    priors: Option<String>,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0.15)]
    slope: f64,
    #[arg(long, default_value_t = 200)]
    train_utts: usize,
    #[arg(long, default_value_t = 50)]
    valid_utts: usize,
    #[arg(long, default_value_t = 50)]
    test_utts: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// table or json
    #[arg(long, default_value = "table")]
    format: String,
}

fn emit(v: Value) {
    println!("{v}");
}

fn exit_code(e: &QnnError) -> u8 {
    match e {
        QnnError::Config(_) => 2,
        QnnError::Format { .. } | QnnError::Data { .. } | QnnError::Io(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn eval_record(which: &str, r: &EvalResult, cfg: &ModelConfig) -> Value {
    json!({
        "record": "eval",
        "which": which,
        "loss": r.loss,
        "frame_error_rate": r.frame_error_rate,
        "frames": r.frames,
        "errors": r.errors,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
    })
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.model.resolve()?;
    let train = read_features(&a.train)?;
    let valid = read_features(&a.valid)?;
    let test = a.test.as_deref().map(read_features).transpose()?;
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, &train, &valid, test.as_deref(), &a.out),
        Precision::F64 => run_train::<f64>(&cfg, &train, &valid, test.as_deref(), &a.out),
    }
}

fn run_train<T: Scalar>(
    cfg: &ModelConfig,
    train: &[Utterance],
    valid: &[Utterance],
    test: Option<&[Utterance]>,
    out: &Path,
) -> Result<ExitCode> {
    let mut model = AcousticModel::<T>::new(cfg)?;
    emit(json!({
        "record": "start",
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "params": model.num_params(),
        "train_utterances": train.len(),
        "valid_utterances": valid.len(),
    }));
    let outcome = train_with(&mut model, train, valid, Some(out), |r| {
        let mut v = serde_json::to_value(r).expect("serialisable");
        v["record"] = json!("epoch");
        v["seconds"] = json!(r.seconds);
        emit(v);
    })?;
    if let Some(test) = test {
        emit(eval_record("final", &evaluate(&model, test, cfg.batch_size)?, cfg));
        if outcome.best_epoch.is_some() {
            let best = checkpoint::load::<T>(&RunFiles { dir: out.to_path_buf() }.best())?;
            emit(eval_record("best", &evaluate(&best, test, cfg.batch_size)?, cfg));
        }
    }
    emit(json!({
        "record": "done",
        "epochs": outcome.reports.len(),
        "best_epoch": outcome.best_epoch,
        "out": out.display().to_string(),
    }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let ck = checkpoint::read(&a.checkpoint)?;
    if let Some(path) = &a.config {
        let mut requested = ModelConfig::default();
        requested.apply_file(path)?;
        if requested.digest() != ck.digest {
            return Err(QnnError::DigestMismatch {
                checkpoint: ck.digest,
                requested: requested.digest(),
            });
        }
    }
    let test = read_features(&a.test)?;
    let cfg = ck.config.clone();
    let batch = a.batch_size.unwrap_or(cfg.batch_size);
    let result = match cfg.precision {
        Precision::F32 => evaluate(&ck.into_model::<f32>()?, &test, batch)?,
        Precision::F64 => evaluate(&ck.into_model::<f64>()?, &test, batch)?,
    };
    let mut v = eval_record("checkpoint", &result, &cfg);
    v["checkpoint"] = json!(a.checkpoint.display().to_string());
    emit(v);
    Ok(ExitCode::SUCCESS)
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<ExitCode> {
    let fault: Fault = a.inject_fault.parse()?;
    let started = Instant::now();
    let report = selfcheck::run(fault, a.seed)?;
    for s in &report.suites {
        emit(json!({"record": "suite", "suite": s.suite, "passed": s.passed, "failed": s.failed}));
    }
    if let Some(f) = report.first_failure() {
        emit(json!({"record": "failure", "case": f.case, "detail": f.detail}));
        eprintln!("{}", json!({"error": "check", "message": format!("{}: {}", f.case, f.detail)}));
        return Ok(ExitCode::from(1));
    }
    emit(json!({"record": "selfcheck", "ok": true, "seconds": started.elapsed().as_secs_f64()}));
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let priors = a
        .priors
        .as_deref()
        .map(|s| {
            s.split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|_| QnnError::config(format!("bad prior '{p}'"))))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let spec = SynthSpec {
        classes: a.classes,
        dim: a.dim,
        delta_classes: a.delta_classes,
        min_segment: a.min_segment,
        max_segment: a.max_segment,
        min_segments: a.min_segments,
        max_segments: a.max_segments,
        priors,
        noise: a.noise,
        slope: a.slope,
        train_utterances: a.train_utts,
        valid_utterances: a.valid_utts,
        test_utterances: a.test_utts,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    write_synthetic(&a.out, &data)?;
    for (name, utts) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        let counts = label_counts(utts, spec.classes);
        let frames: usize = counts.iter().sum();
        let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / frames.max(1) as f64).collect();
        emit(json!({
            "record": "split",
            "split": name,
            "path": a.out.join(format!("{name}.qfea")).display().to_string(),
            "utterances": utts.len(),
            "frames": frames,
            "label_fractions": fractions,
        }));
    }
    emit(json!({"record": "synth", "classes": spec.classes, "dim": spec.dim, "priors": spec.priors(), "seed": spec.seed}));
    Ok(ExitCode::SUCCESS)
}

fn breakdown_json(b: &ParamBreakdown) -> Value {
    let mut v = serde_json::to_value(b).expect("serialisable");
    v["total"] = json!(b.total());
    v
}

fn cmd_params(a: ParamsArgs) -> Result<ExitCode> {
    let cfg = a.model.resolve()?;
    let b = ParamBreakdown::from_config(&cfg);
    let mut other_cfg = cfg.clone();
    other_cfg.stack = match cfg.stack {
        StackKind::Qlstm => StackKind::Lstm,
        StackKind::Lstm => StackKind::Qlstm,
    };
    let other = ParamBreakdown::from_config(&other_cfg);
    let (q, l) = match cfg.stack {
        StackKind::Qlstm => (b, other),
        StackKind::Lstm => (other, b),
    };
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let recurrent_ratio = ratio(l.recurrent_weights, q.recurrent_weights);
    let total_ratio = ratio(l.total(), q.total());
    match a.format.as_str() {
        "json" => emit(json!({
            "record": "params",
            "stack": cfg.stack.as_str(),
            "config_digest": cfg.digest(),
            "counts": breakdown_json(&b),
            "qlstm": breakdown_json(&q),
            "lstm": breakdown_json(&l),
            "lstm_to_qlstm_recurrent_weight_ratio": recurrent_ratio,
            "lstm_to_qlstm_total_ratio": total_ratio,
        })),
        "table" => {
            println!("{:<12} {:>14} {:>12} {:>14}", "module", "weights", "biases", "total");
            let rows = [
                ("front-end", b.front_weights, b.front_biases),
                ("recurrent", b.recurrent_weights, b.recurrent_biases),
                ("output", b.output_weights, b.output_biases),
            ];
            for (name, w, bias) in rows {
                println!("{name:<12} {w:>14} {bias:>12} {:>14}", w + bias);
            }
            println!("{:<12} {:>14} {:>12} {:>14}", "total", "", "", b.total());
            println!();
            println!("matched qlstm total  {:>14}", q.total());
            println!("matched lstm total   {:>14}", l.total());
            let fmt = |r: Option<f64>| r.map_or("n/a".to_string(), |r| format!("{r:.2}"));
            println!("lstm:qlstm recurrent weights {}", fmt(recurrent_ratio));
            println!("lstm:qlstm total             {}", fmt(total_ratio));
        }
        other => return Err(QnnError::config(format!("unknown format '{other}', expected table or json"))),
    }
    Ok(ExitCode::SUCCESS)
}
