//! Epoch loop with logging, per-epoch checkpoints and resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{self, Entry, Payload};
use crate::config::{DatasetKind, ModelConfig, Settings, TrainConfig};
use crate::error::{Error, Result};
use crate::net::{cross_entropy, top_k_hits, Model};
use crate::tensor::{Module, Tensor};

use super::data::{self, Dataset, Normalizer};
use super::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamW, OptimState, Schedule};

pub const CHECKPOINT_FILE: &str = "checkpoint.clue";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,train_top1,val_loss,val_top1,val_top3,seconds";

const EPOCH_ENTRY: &str = "__epoch__";
const STEP_ENTRY: &str = "__opt_step__";
const SEED_ENTRY: &str = "__seed__";
const NORM_ENTRY: &str = "__norm__";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    pub top3: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Rate of the last update of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val: Option<EvalResult>,
    pub seconds: f64,
    /// Rate of every update in the epoch.
    pub lrs: Vec<f64>,
}

impl EpochRecord {
    pub fn csv(&self) -> String {
        let (vl, v1, v3) = self.val.map_or((f64::NAN, f64::NAN, f64::NAN), |v| (v.loss, v.top1, v.top3));
        format!(
            "{},{},{:.6e},{:.6},{:.4},{:.6},{:.4},{:.4},{:.2}",
            self.epoch, self.step, self.lr, self.train_loss, self.train_top1, vl, v1, v3, self.seconds
        )
    }
}

/// Model, optimizer and data statistics for one run.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: OptimState<f32>,
    pub norm: Normalizer,
    pub config: TrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: &TrainConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let opt = OptimState::new(&model, hyper(config));
        Ok(Trainer {
            model,
            opt,
            norm,
            config: config.clone(),
            seed,
            epoch: 0,
        })
    }

    pub fn schedule(&self, train_len: usize) -> Schedule {
        Schedule {
            base_lr: self.config.base_lr,
            min_lr: self.config.min_lr,
            warmup_epochs: self.config.warmup_epochs,
            total_epochs: self.config.epochs,
            steps_per_epoch: train_len.div_ceil(self.config.batch_size),
        }
    }

    /// One pass over `train` in the seeded order of the next epoch.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochRecord> {
        let start = Instant::now();
        let schedule = self.schedule(train.len());
        let epoch = self.epoch;
        let order = data::epoch_order(train.len(), self.seed, epoch);
        let mut rng = data::epoch_rng(self.seed, epoch);
        let (mut loss_sum, mut hits) = (0.0, 0);
        let mut lrs = Vec::with_capacity(schedule.steps_per_epoch);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let (x, y) = data::make_batch(train, idx, &self.norm, self.config.flip.then_some(&mut rng))?;
            let (logits, cache) = self.model.forward_cached(&x).map_err(|e| diagnose(e, epoch, b))?;
            let (loss, dlogits) = cross_entropy(&logits, &y).map_err(|e| diagnose(e, epoch, b))?;
            self.model.zero_grad();
            self.model.backward(&cache, &dlogits);
            let norm = clip_grad_norm(&mut self.model, self.config.grad_clip);
            if !norm.is_finite() {
                return Err(diagnose(Error::Numerical(format!("gradient norm {norm}")), epoch, b));
            }
            let lr = cosine_lr(&schedule, self.opt.step as usize + 1);
            adamw_step(&mut self.model, &mut self.opt, lr)?;
            lrs.push(lr);
            loss_sum += loss * idx.len() as f64;
            hits += top_k_hits(&logits, &y, 1);
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            step: self.opt.step,
            lr: lrs.last().copied().unwrap_or(0.0),
            train_loss: loss_sum / train.len() as f64,
            train_top1: hits as f64 / train.len() as f64,
            val: None,
            seconds: start.elapsed().as_secs_f64(),
            lrs,
        })
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut e = self.model.to_entries();
        let u64e = |name: &str, v: u64| Entry::new(name, &[1], Payload::U64(vec![v])).expect("scalar entry");
        e.push(u64e(EPOCH_ENTRY, self.epoch as u64));
        e.push(u64e(STEP_ENTRY, self.opt.step));
        e.push(u64e(SEED_ENTRY, self.seed));
        let n = self.norm;
        let stats: Vec<f32> = n.mean.iter().chain(&n.std).copied().collect();
        e.push(Entry::new(NORM_ENTRY, &[2, 3], Payload::F32(stats)).expect("norm entry"));
        let mut k = 0;
        self.model.visit(&mut |p| {
            if p.learnable {
                e.push(Entry::tensor(format!("__m__.{}", p.name), &self.opt.m[k]));
                e.push(Entry::tensor(format!("__v__.{}", p.name), &self.opt.v[k]));
                k += 1;
            }
        });
        e
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_entries())
    }

    /// Restore a run. The stored model configuration must equal `expected`
    /// when given.
    pub fn load(path: &Path, config: &TrainConfig, expected: Option<&ModelConfig>) -> Result<Self> {
        let entries = checkpoint::read(path)?;
        let model = match expected {
            Some(cfg) => Model::load_expecting(path, cfg)?,
            None => Model::from_entries(&entries)?,
        };
        let scalar = |name: &str| -> Result<u64> {
            checkpoint::find(&entries, name)?
                .as_u64()?
                .first()
                .copied()
                .ok_or_else(|| Error::Format(format!("{name} is empty")))
        };
        let norm = norm_of(&entries)?;
        let mut t = Trainer::new(model, config, norm, scalar(SEED_ENTRY)?)?;
        t.epoch = scalar(EPOCH_ENTRY)? as usize;
        t.opt.step = scalar(STEP_ENTRY)?;
        let mut names = Vec::new();
        t.model.visit(&mut |p| {
            if p.learnable {
                names.push(p.name.clone());
            }
        });
        for (k, name) in names.iter().enumerate() {
            t.opt.m[k] = checkpoint::find(&entries, &format!("__m__.{name}"))?.to_tensor()?;
            t.opt.v[k] = checkpoint::find(&entries, &format!("__v__.{name}"))?.to_tensor()?;
        }
        Ok(t)
    }
}

fn hyper(c: &TrainConfig) -> AdamW {
    AdamW {
        beta1: c.beta1,
        beta2: c.beta2,
        eps: c.eps,
        weight_decay: c.weight_decay,
    }
}

fn diagnose(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("epoch {} batch {batch}: {m}", epoch + 1)),
        other => other,
    }
}

/// Standardization statistics stored in a training checkpoint.
pub fn norm_of(entries: &[Entry]) -> Result<Normalizer> {
    let t: Tensor<f32> = checkpoint::find(entries, NORM_ENTRY)?.to_tensor()?;
    let v = t.data();
    if v.len() != 6 {
        return Err(Error::Format(format!("{NORM_ENTRY} holds {} values", v.len())));
    }
    Ok(Normalizer {
        mean: [v[0], v[1], v[2]],
        std: [v[3], v[4], v[5]],
    })
}

/// Mean loss and top-1/top-3 accuracy without augmentation.
pub fn evaluate(model: &Model<f32>, data: &Dataset, norm: &Normalizer, batch: usize) -> Result<EvalResult> {
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut h1, mut h3) = (0.0, 0, 0);
    for idx in order.chunks(batch.max(1)) {
        let (x, y) = data::make_batch(data, idx, norm, None)?;
        let (logits, _) = model.forward(&x, false)?;
        loss += cross_entropy(&logits, &y)?.0 * idx.len() as f64;
        h1 += top_k_hits(&logits, &y, 1);
        h3 += top_k_hits(&logits, &y, 3);
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        loss: loss / n,
        top1: h1 as f64 / n,
        top3: h3 as f64 / n,
        samples: data.len(),
    })
}

/// Train and validation splits named by the settings.
pub fn load_splits(settings: &Settings, seed: u64) -> Result<(Dataset, Dataset)> {
    let t = &settings.train;
    let (h, w) = settings.model.input_size;
    match t.dataset {
        DatasetKind::Synthetic => {
            if h != w {
                return Err(Error::config("input_size", "synthetic images are square"));
            }
            Ok((
                data::synth_dataset(t.synth_classes, h, t.synth_train, seed)?,
                data::synth_dataset(t.synth_classes, h, t.synth_val, seed ^ 0x5_eed0_f7a1)?,
            ))
        }
        DatasetKind::Cifar100 => {
            if (h, w) != (data::CIFAR_SIDE, data::CIFAR_SIDE) {
                return Err(Error::config("input_size", "CIFAR-100 images are 32x32"));
            }
            if t.data_dir.is_empty() {
                return Err(Error::config("data_dir", "required for cifar100"));
            }
            let dir = Path::new(&t.data_dir);
            Ok((data::load_cifar100(dir, true)?, data::load_cifar100(dir, false)?))
        }
    }
}

/// Model configuration with the head sized to the dataset.
pub fn model_for(settings: &Settings, classes: usize) -> ModelConfig {
    let mut cfg = settings.model.clone();
    cfg.num_classes = classes;
    cfg
}

/// Output files of a run.
#[derive(Clone, Debug, Default)]
pub struct RunFiles {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// Train until `config.epochs` (or the validation stop target), logging one
/// line per epoch. With `out`, writes the checkpoint after every epoch and
/// appends to the metrics CSV.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &Dataset,
    val: Option<&Dataset>,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if train.classes > trainer.model.config.num_classes {
        return Err(Error::config("num_classes", format!("dataset has {} classes", train.classes)));
    }
    let files = out.map(|dir| RunFiles {
        checkpoint: Some(dir.join(CHECKPOINT_FILE)),
        metrics: Some(dir.join(METRICS_FILE)),
    });
    let mut history = Vec::new();
    let target = trainer.config.stop_at_val;
    while trainer.epoch < trainer.config.epochs {
        let mut rec = trainer.train_epoch(train)?;
        if let Some(v) = val {
            rec.val = Some(evaluate(&trainer.model, v, &trainer.norm, trainer.config.batch_size)?);
        }
        if !rec.train_loss.is_finite() {
            return Err(Error::Numerical(format!("epoch {}: loss {}", rec.epoch, rec.train_loss)));
        }
        let top1 = rec.val.map_or(rec.train_top1, |v| v.top1);
        let _ = writeln!(
            log,
            "epoch={} step={} lr={:.4e} loss={:.5} top1={:.4}{}",
            rec.epoch,
            rec.step,
            rec.lr,
            rec.train_loss,
            top1,
            rec.val.map_or(String::new(), |v| format!(" val_loss={:.5} top3={:.4}", v.loss, v.top3)),
        );
        if let Some(f) = &files {
            let ck = f.checkpoint.as_ref().expect("set");
            trainer.save(ck)?;
            let path = f.metrics.as_ref().expect("set");
            let fresh = !path.exists();
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let mut text = String::new();
            if fresh {
                text.push_str(METRICS_HEADER);
                text.push('\n');
            }
            text.push_str(&rec.csv());
            text.push('\n');
            file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        let done = target > 0.0 && rec.val.is_some_and(|v| v.top1 >= target);
        history.push(rec);
        if done {
            break;
        }
    }
    Ok(history)
}
