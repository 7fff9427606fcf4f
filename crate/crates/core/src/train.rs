//! Framewise cross-entropy training with Adam, validation-driven learning
//! rate halving, evaluation and checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::config::LrRule;
use crate::data::{batch_from_indices, batch_groups, Utterance, UtteranceBatch};
use crate::error::{QnnError, Result};
use crate::params::ParamStore;
use crate::qlstm::AcousticModel;
use crate::scalar::Scalar;

/// Batches prepared ahead of the trainer.
const PREFETCH: usize = 4;

/// Checks feature width and label range of every frame.
pub fn validate_dataset(utts: &[Utterance], input_dim: usize, classes: usize) -> Result<()> {
    for u in utts {
        u.validate()?;
        if u.dim != input_dim {
            return Err(QnnError::data(&u.id, format!("feature dim {} but model expects {input_dim}", u.dim)));
        }
        if let Some(t) = u.labels.iter().position(|&l| l as usize >= classes) {
            return Err(QnnError::data(
                format!("utterance {} frame {t}", u.id),
                format!("label {} outside [0, {classes})", u.labels[t]),
            ));
        }
    }
    Ok(())
}

/// Mean negative log-softmax over the valid frames of `batch`.
pub fn frame_loss<'t, T: Scalar>(logits: Var<'t, T>, batch: &UtteranceBatch) -> Result<Var<'t, T>> {
    let classes = *logits.shape().last().unwrap_or(&0);
    let b = batch.batch_size();
    for (at, (&l, &ok)) in batch.labels.iter().zip(&batch.mask).enumerate() {
        if ok && l as usize >= classes {
            return Err(QnnError::data(
                format!("utterance {} frame {}", batch.ids[at % b], at / b),
                format!("label {l} outside [0, {classes})"),
            ));
        }
    }
    let targets: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
    logits.cross_entropy(&targets, &batch.mask)
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(QnnError::Contract("optimizer state does not match parameter store".into()));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(QnnError::Contract(format!("parameter '{}' has no gradient", p.name)));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate halving driven by validation loss.
///
/// `Stall` halves when the relative improvement `(prev − curr)/prev` falls
/// below `threshold`, never after the first epoch. `Literal` halves whenever
/// the validation loss itself is below `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub rule: LrRule,
    pub threshold: f64,
    pub factor: f64,
    pub prev_val_loss: Option<f64>,
}

impl LrSchedule {
    pub fn new(rule: LrRule, threshold: f64) -> Self {
        LrSchedule {
            rule,
            threshold,
            factor: 0.5,
            prev_val_loss: None,
        }
    }

    pub fn update(&mut self, val_loss: f64, lr: f64) -> f64 {
        let halve = match self.rule {
            LrRule::Stall => match self.prev_val_loss {
                Some(prev) if prev > 0.0 => (prev - val_loss) / prev < self.threshold,
                _ => false,
            },
            LrRule::Literal => val_loss < self.threshold,
        };
        self.prev_val_loss = Some(val_loss);
        if halve {
            lr * self.factor
        } else {
            lr
        }
    }
}

/// One line of `metrics.jsonl`. Wall-clock time is kept out of the
/// serialised record so that seeded runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Percent.
    pub val_fer: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub config_digest: String,
    pub seed: u64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    /// Mean per-frame negative log-likelihood.
    pub loss: f64,
    /// Percent of frames whose argmax is wrong.
    pub frame_error_rate: f64,
    pub frames: usize,
    pub errors: usize,
}

/// Evaluation threads: `QNN_THREADS` when set, else available cores.
pub fn eval_threads() -> Result<usize> {
    match std::env::var("QNN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(QnnError::config(format!("QNN_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

struct UttScore {
    index: usize,
    nll: Vec<f64>,
    errors: usize,
}

fn score_batch<T: Scalar>(model: &AcousticModel<T>, utts: &[Utterance], group: &[usize]) -> Result<Vec<UttScore>> {
    let batch = batch_from_indices(utts, group)?;
    let tape = Tape::no_grad();
    let logits = model.forward(&tape, &batch, None)?.value();
    let c = model.config.classes;
    let b = batch.batch_size();
    let mut out: Vec<UttScore> = group
        .iter()
        .map(|&index| UttScore {
            index,
            nll: Vec::new(),
            errors: 0,
        })
        .collect();
    for (bi, score) in out.iter_mut().enumerate() {
        for t in 0..batch.lengths[bi] {
            let row = &logits.data()[(t * b + bi) * c..(t * b + bi + 1) * c];
            let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossless()).collect();
            let (mut arg, mut max) = (0, f64::NEG_INFINITY);
            for (k, &v) in row.iter().enumerate() {
                if v > max {
                    arg = k;
                    max = v;
                }
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let target = batch.labels[t * b + bi] as usize;
            score.nll.push(lse - row[target]);
            if arg != target {
                score.errors += 1;
            }
        }
    }
    Ok(out)
}

/// Loss and frame error over `utts`, sharded across [`eval_threads`].
///
/// Frame losses are summed in utterance order, so the result does not
/// depend on batch size or thread count.
pub fn evaluate<T: Scalar>(model: &AcousticModel<T>, utts: &[Utterance], batch_size: usize) -> Result<EvalResult> {
    if utts.is_empty() {
        return Err(QnnError::data("evaluation set", "no utterances"));
    }
    validate_dataset(utts, model.config.input_dim, model.config.classes)?;
    let groups = batch_groups::<ChaCha8Rng>(utts, batch_size, None, true)?;
    let threads = eval_threads()?.min(groups.len()).max(1);
    let shards: Vec<Vec<UttScore>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let groups = &groups;
                s.spawn(move || -> Result<Vec<UttScore>> {
                    let mut acc = Vec::new();
                    for g in groups.iter().skip(k).step_by(threads) {
                        acc.extend(score_batch(model, utts, g)?);
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut slots: Vec<Option<UttScore>> = (0..utts.len()).map(|_| None).collect();
    for score in shards.into_iter().flatten() {
        let i = score.index;
        slots[i] = Some(score);
    }
    let (mut total, mut frames, mut errors) = (0.0f64, 0usize, 0usize);
    for s in slots.iter().flatten() {
        for &v in &s.nll {
            total += v;
        }
        frames += s.nll.len();
        errors += s.errors;
    }
    Ok(EvalResult {
        loss: total / frames as f64,
        frame_error_rate: 100.0 * errors as f64 / frames as f64,
        frames,
        errors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    /// Epoch with the lowest validation loss, if any epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn best(&self) -> Option<&EpochReport> {
        self.best_epoch.map(|e| &self.reports[e - 1])
    }
}

/// Files written by [`train`] inside its output directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.jsonl")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn init(&self) -> PathBuf {
        self.dir.join("init.qnn")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.qnn")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.qnn")
    }
}

/// Runs `model.config.epochs` epochs. With `out`, writes the resolved
/// config, `metrics.jsonl`, `timing.jsonl` and the `init`, `last` and
/// `best` checkpoints there.
///
/// On return `model` holds the final-epoch parameters.
pub fn train<T: Scalar>(
    model: &mut AcousticModel<T>,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(model, train_set, valid_set, out, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with<T: Scalar>(
    model: &mut AcousticModel<T>,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    validate_dataset(train_set, cfg.input_dim, cfg.classes)?;
    validate_dataset(valid_set, cfg.input_dim, cfg.classes)?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(QnnError::data("dataset", "training and validation sets must be non-empty"));
    }
    let files = out.map(|d| RunFiles { dir: d.to_path_buf() });
    let mut metrics = None;
    let mut timing = None;
    if let Some(f) = &files {
        fs::create_dir_all(&f.dir)?;
        fs::write(f.config(), cfg.canonical())?;
        checkpoint::save(&f.init(), model)?;
        metrics = Some(BufWriter::new(File::create(f.metrics())?));
        timing = Some(BufWriter::new(File::create(f.timing())?));
    }

    let digest = cfg.digest();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut schedule = LrSchedule::new(cfg.lr_rule, cfg.lr_threshold);
    let mut outcome = TrainOutcome {
        reports: Vec::new(),
        best_epoch: None,
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let groups = batch_groups(train_set, cfg.batch_size, Some(&mut shuffle_rng), true)?;
        let (tx, rx) = mpsc::sync_channel::<Result<UtteranceBatch>>(PREFETCH);
        let (mut loss_sum, mut frames) = (0.0f64, 0usize);
        std::thread::scope(|s| -> Result<()> {
            let groups = &groups;
            s.spawn(move || {
                for g in groups {
                    if tx.send(batch_from_indices(train_set, g)).is_err() {
                        break;
                    }
                }
            });
            for (index, batch) in rx.iter().enumerate() {
                let batch = batch?;
                let tape = Tape::new();
                let logits = model.forward(&tape, &batch, Some(&mut dropout_rng))?;
                let loss = frame_loss(logits, &batch)?;
                let value = loss.value().data()[0].to_f64_lossless();
                if !value.is_finite() {
                    return Err(QnnError::NonFiniteLoss {
                        epoch,
                        batch: index,
                        first_id: batch.ids[0].clone(),
                    });
                }
                tape.backward(loss, &mut model.store)?;
                adam.step(&mut model.store)?;
                model.store.zero_grad();
                loss_sum += value * batch.valid_frames() as f64;
                frames += batch.valid_frames();
            }
            Ok(())
        })?;

        let val = evaluate(model, valid_set, cfg.batch_size)?;
        if !val.loss.is_finite() {
            return Err(QnnError::NonFiniteLoss {
                epoch,
                batch: 0,
                first_id: format!("validation {}", valid_set[0].id),
            });
        }
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / frames as f64,
            val_loss: val.loss,
            val_fer: val.frame_error_rate,
            lr: adam.lr,
            config_digest: digest.clone(),
            seed: cfg.seed,
            seconds: started.elapsed().as_secs_f64(),
        };
        adam.lr = schedule.update(val.loss, adam.lr);

        let improved = outcome.best().is_none_or(|b| report.val_loss < b.val_loss);
        if let Some(f) = &files {
            checkpoint::save(&f.last(), model)?;
            if improved {
                checkpoint::save(&f.best(), model)?;
            }
            let m = metrics.as_mut().expect("opened");
            serde_json::to_writer(&mut *m, &report).map_err(|e| QnnError::Io(e.into()))?;
            m.write_all(b"\n")?;
            m.flush()?;
            let t = timing.as_mut().expect("opened");
            writeln!(t, "{{\"epoch\":{epoch},\"seconds\":{:.3}}}", report.seconds)?;
            t.flush()?;
        }
        if improved {
            outcome.best_epoch = Some(epoch);
        }
        on_epoch(&report);
        outcome.reports.push(report);
    }
    Ok(outcome)
}
