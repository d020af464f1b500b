use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{dropout_rng, lr_at, shuffle_rng, train_step, AdamState, TrainConfig};
use crate::data::CorrectionExample;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalReport};
use crate::model::checkpoint::MODEL_KIND;
use crate::model::{load_model, model_container, save_model, Codec, Container, Model, ModelManifest};
use crate::numeric::Tensor;
use crate::objective::LossBreakdown;
use crate::scalar::Scalar;
use crate::textcodec::{encode_example, Batch};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train.log.jsonl";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where checkpoints and the log go. Without it nothing is written.
    pub out_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` in `out_dir` when it exists.
    pub resume: bool,
    /// Stop once this many steps are done, leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// Updates completed, counting from 1.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub state: AdamState<T>,
    /// Records produced by this call (earlier ones stay in the log file).
    pub records: Vec<TrainLogRecord>,
    pub step: usize,
    pub total_steps: usize,
    pub best_f1: Option<f64>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn finished(&self) -> bool {
        self.step == self.total_steps
    }
}

/// Trainer state stored in the checkpoint manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    step: usize,
    best_f1: Option<f64>,
    train_config: TrainConfig,
}

fn resume_container<T: Scalar>(
    model: &Model<T>,
    state: &AdamState<T>,
    base: &ModelManifest,
    resume: &ResumeState,
) -> Result<Container> {
    let mut manifest = base.clone();
    manifest.step = resume.step as u64;
    manifest.extra = serde_json::json!({ "trainer": resume });
    let names = model.params.names();
    let mut extra = Vec::with_capacity(2 * names.len());
    for (i, name) in names.iter().enumerate() {
        extra.push((format!("adam.m.{name}"), &state.m[i]));
        extra.push((format!("adam.v.{name}"), &state.v[i]));
    }
    model_container(model, &manifest, &extra)
}

fn load_resume<T: Scalar>(
    path: &Path,
    cfg: &TrainConfig,
    base: &ModelManifest,
) -> Result<(Model<T>, AdamState<T>, ResumeState)> {
    let (model, manifest, rest) = load_model::<T>(&Container::read(path)?)?;
    if manifest.config != base.config
        || manifest.char_vocab_sha256 != base.char_vocab_sha256
        || manifest.phoneme_vocab_sha256 != base.phoneme_vocab_sha256
    {
        return Err(Error::Checkpoint(format!(
            "{} does not match the model configuration or vocabularies",
            path.display()
        )));
    }
    let resume: ResumeState = serde_json::from_value(manifest.extra["trainer"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: trainer state: {e}", path.display())))?;
    if resume.train_config != *cfg {
        return Err(Error::Config(format!(
            "{} was written with a different training configuration",
            path.display()
        )));
    }
    let mut rest: std::collections::HashMap<String, Tensor<T>> = rest.into_iter().collect();
    let mut take = |key: String| {
        rest.remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing {key}", path.display())))
    };
    let mut state = AdamState::new(model.params.tensors());
    state.step = resume.step as u64;
    for (i, name) in model.params.names().iter().enumerate() {
        state.m[i] = take(format!("adam.m.{name}"))?;
        state.v[i] = take(format!("adam.v.{name}"))?;
        if state.m[i].shape() != model.params.tensors()[i].shape()
            || state.v[i].shape() != model.params.tensors()[i].shape()
        {
            return Err(Error::Checkpoint(format!(
                "{}: optimizer moments for {name} have the wrong shape",
                path.display()
            )));
        }
    }
    Ok((model, state, resume))
}

/// Drops log lines past `step`, so a resumed run keeps steps increasing.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines() {
        let value: serde_json::Value = serde_json::from_str(line).unwrap_or_default();
        if value["step"].as_u64().is_some_and(|s| s as usize <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Trains `model` on `train` for the configured number of steps.
///
/// Each epoch visits the examples in a seeded order; dropout masks are
/// drawn from a generator keyed on the step, so a run stopped and resumed
/// from `last.ckpt` ends in exactly the state of an uninterrupted run.
/// When `dev` is given it is scored at each evaluation point and the model
/// with the best correction F1 is kept in `best.ckpt`.
pub fn run_training<T: Scalar>(
    model: Model<T>,
    train: &[CorrectionExample],
    dev: Option<&[CorrectionExample]>,
    codec: Codec<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    let max_len = model.config.max_len;
    let items = train
        .iter()
        .map(|ex| encode_example(ex, codec.chars, codec.phonemes, codec.table, true, max_len))
        .collect::<Result<Vec<_>>>()?;
    let per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * per_epoch);
    let base = ModelManifest {
        kind: MODEL_KIND.into(),
        config: model.config.clone(),
        char_vocab_sha256: codec.chars.fingerprint(),
        phoneme_vocab_sha256: codec.phonemes.fingerprint(),
        step: 0,
        extra: serde_json::Value::Null,
    };

    let mut model = model;
    let mut state = AdamState::new(model.params.tensors());
    let mut step = 0;
    let mut best_f1 = None;
    let mut log = None;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join(LOG_FILE);
        let last = dir.join(LAST_CHECKPOINT);
        if opts.resume && last.exists() {
            let (m, s, r) = load_resume(&last, cfg, &base)?;
            (model, state, step, best_f1) = (m, s, r.step, r.best_f1);
            truncate_log(&log_path, step)?;
        } else {
            std::fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
        }
        log = Some((open_log(&log_path)?, log_path));
    } else if opts.resume {
        return Err(Error::Config("resuming needs an output directory".into()));
    }

    let stop = opts.stop_after.map_or(total_steps, |s| s.min(total_steps));
    let start = Instant::now();
    let mut records = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = None;
    while step < stop {
        let epoch = step / per_epoch;
        if order_epoch != Some(epoch) {
            order = (0..items.len()).collect();
            order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
            order_epoch = Some(epoch);
        }
        let pos = step % per_epoch;
        let chosen: Vec<_> = order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(items.len())]
            .iter()
            .map(|&i| items[i].clone())
            .collect();
        let batch = Batch::collate(&chosen)?;
        let lr = lr_at(step, total_steps, cfg)?;
        let report = train_step(
            &mut model,
            &mut state,
            &batch,
            cfg,
            lr,
            &mut dropout_rng(cfg.seed, step),
        )?;
        step += 1;

        let eval_due = step == total_steps
            || if cfg.eval_every == 0 {
                step % per_epoch == 0
            } else {
                step % cfg.eval_every == 0
            };
        let mut record = TrainLogRecord {
            step,
            epoch,
            lr,
            loss: report.loss,
            grad_norm: report.grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            eval: None,
        };
        if let (true, Some(dev)) = (eval_due, dev) {
            let predictions = codec.predict_examples(&model, dev, cfg.batch_size)?;
            let report = evaluate(dev, &predictions, false)?;
            if best_f1.is_none_or(|b| report.correction.f1 > b) {
                best_f1 = Some(report.correction.f1);
                if let Some(dir) = &opts.out_dir {
                    let manifest = ModelManifest {
                        step: step as u64,
                        ..base.clone()
                    };
                    save_model(dir.join(BEST_CHECKPOINT), &model, &manifest)?;
                }
            }
            record.eval = Some(report);
        }
        if let Some((file, path)) = &mut log {
            let line = serde_json::to_string(&record).map_err(|e| Error::Encoding(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        records.push(record);

        if let Some(dir) = &opts.out_dir {
            if eval_due || step == stop {
                let resume = ResumeState {
                    step,
                    best_f1,
                    train_config: cfg.clone(),
                };
                resume_container(&model, &state, &base, &resume)?.write(dir.join(LAST_CHECKPOINT))?;
            }
        }
    }
    if let (Some(dir), true) = (&opts.out_dir, step == total_steps) {
        let manifest = ModelManifest {
            step: step as u64,
            ..base.clone()
        };
        save_model(dir.join(FINAL_CHECKPOINT), &model, &manifest)?;
    }
    Ok(TrainOutcome {
        model,
        state,
        records,
        step,
        total_steps,
        best_f1,
    })
}
