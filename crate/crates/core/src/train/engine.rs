use std::fs;
use std::path::{Path, PathBuf};

use super::config::{config_hash, TrainConfig};
use super::data::{check_labels, Example};
use super::losses::{graph_losses, LossBundle};
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, OPTIMIZER_PREFIX};
use crate::model::{argmax, Crtnet, ModelConfig, Prediction};
use crate::tensor::{mix_seed, Rng, Tape, Tensor};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5e1f;
const STEP_STREAM: u64 = 0x57e9;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const METRICS_HEADER: &str =
    "epoch\tsplit\tloss_p\tloss_t\tloss_tc\tacc_yp\tacc_yt\tacc_ytc\tmean_p";

/// Running sums over a set of predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tally {
    pub n: usize,
    pub loss_p: f64,
    pub loss_t: f64,
    pub loss_tc: f64,
    pub correct_yp: usize,
    pub correct_yt: usize,
    pub correct_ytc: usize,
    pub p: f64,
}

impl Tally {
    pub fn add(&mut self, pred: &Prediction, losses: &LossBundle, label: usize) {
        self.n += 1;
        self.loss_p += losses.loss_p;
        self.loss_t += losses.loss_t;
        self.loss_tc += losses.loss_tc;
        self.correct_yp += (argmax(pred.y_p.data()) == label) as usize;
        self.correct_yt += (argmax(pred.y_t.data()) == label) as usize;
        self.correct_ytc += (argmax(pred.y_tc.data()) == label) as usize;
        self.p += pred.p;
    }

    pub fn merge(&mut self, other: &Tally) {
        self.n += other.n;
        self.loss_p += other.loss_p;
        self.loss_t += other.loss_t;
        self.loss_tc += other.loss_tc;
        self.correct_yp += other.correct_yp;
        self.correct_yt += other.correct_yt;
        self.correct_ytc += other.correct_ytc;
        self.p += other.p;
    }

    pub fn metrics(&self, epoch: usize, split: &str) -> EpochMetrics {
        let n = self.n.max(1) as f64;
        EpochMetrics {
            epoch,
            split: split.to_string(),
            loss_p: self.loss_p / n,
            loss_t: self.loss_t / n,
            loss_tc: self.loss_tc / n,
            acc_yp: self.correct_yp as f64 / n,
            acc_yt: self.correct_yt as f64 / n,
            acc_ytc: self.correct_ytc as f64 / n,
            mean_p: self.p / n,
        }
    }
}

/// One metrics-log record: means over a split at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss_p: f64,
    pub loss_t: f64,
    pub loss_tc: f64,
    pub acc_yp: f64,
    pub acc_yt: f64,
    pub acc_ytc: f64,
    pub mean_p: f64,
}

impl EpochMetrics {
    /// Tab-separated; floats in shortest round-trip form.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.split,
            self.loss_p,
            self.loss_t,
            self.loss_tc,
            self.acc_yp,
            self.acc_yt,
            self.acc_ytc,
            self.mean_p
        )
    }

    pub fn parse_log(text: &str, source_name: &str) -> Result<Vec<EpochMetrics>> {
        let err = |line: usize, detail: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == METRICS_HEADER => {}
            _ => return Err(err(1, "missing metrics header".into())),
        }
        let mut out = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(err(i + 1, format!("expected 9 fields, found {}", f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| err(i + 1, format!("bad number '{s}'")))
            };
            out.push(EpochMetrics {
                epoch: f[0]
                    .parse()
                    .map_err(|_| err(i + 1, format!("bad epoch '{}'", f[0])))?,
                split: f[1].to_string(),
                loss_p: num(f[2])?,
                loss_t: num(f[3])?,
                loss_tc: num(f[4])?,
                acc_yp: num(f[5])?,
                acc_yt: num(f[6])?,
                acc_ytc: num(f[7])?,
                mean_p: num(f[8])?,
            });
        }
        Ok(out)
    }
}

pub fn write_metrics(path: &Path, records: &[EpochMetrics]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EpochMetrics::parse_log(&text, &path.display().to_string())
}

/// Averaged gradients of one batch and the statistics gathered on the way.
pub struct BatchGradients {
    pub grads: Vec<Tensor>,
    pub tally: Tally,
}

/// Model, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Crtnet,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh model for `config.ablation` applied to `model_config`.
    pub fn new(mut model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.ablation.apply(&mut model_config);
        let model = Crtnet::new(
            model_config,
            &mut Rng::new(mix_seed(&[config.seed, INIT_STREAM])),
        )?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Crtnet, config: TrainConfig) -> Self {
        let optimizer = Optimizer::new(&config, &model.params);
        Trainer {
            model,
            optimizer,
            config,
            epoch: 0,
        }
    }

    /// Mean over the batch of the gradient of `loss_p + loss_t + loss_tc`.
    /// Each sample gets its own graph and a dropout stream forked from `rng`
    /// by its batch position; gradients are summed in batch order.
    pub fn batch_gradients(&self, batch: &[&Example], rng: &Rng) -> Result<BatchGradients> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut sum: Vec<Tensor> = self
            .model
            .params
            .tensors()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut tally = Tally::default();
        for (i, ex) in batch.iter().enumerate() {
            let input = ex.prepare(&self.model.config)?;
            let tape = Tape::new();
            let bound = self.model.bind(&tape, true);
            let mut dropout = rng.fork(i as u64);
            let graph = self
                .model
                .forward(&tape, &bound, &input, &mut dropout, true)?;
            let losses = graph_losses(&graph, ex.label)?;
            tape.backward(losses.total)?;
            for (acc, g) in sum.iter_mut().zip(bound.grads()) {
                acc.add_assign(&g);
            }
            tally.add(&graph.prediction(), &losses.values(), ex.label);
        }
        let scale = 1.0 / batch.len() as f64;
        for g in &mut sum {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        Ok(BatchGradients { grads: sum, tally })
    }

    /// One optimizer update on the batch mean of the summed losses.
    pub fn train_step(&mut self, batch: &[&Example], rng: &Rng) -> Result<EpochMetrics> {
        let BatchGradients { grads, tally } = self.batch_gradients(batch, rng)?;
        self.optimizer.update(&mut self.model.params, &grads)?;
        Ok(tally.metrics(self.epoch, "batch"))
    }

    /// Shuffles with a per-epoch stream and runs every batch once.
    pub fn run_epoch(&mut self, data: &[Example]) -> Result<EpochMetrics> {
        check_labels(data, self.model.config.num_classes)?;
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::new(mix_seed(&[self.config.seed, SHUFFLE_STREAM, epoch as u64])).shuffle(&mut order);
        let mut tally = Tally::default();
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let rng = Rng::new(mix_seed(&[
                self.config.seed,
                STEP_STREAM,
                epoch as u64,
                step as u64,
            ]));
            let BatchGradients { grads, tally: t } = self.batch_gradients(&batch, &rng)?;
            self.optimizer.update(&mut self.model.params, &grads)?;
            tally.merge(&t);
        }
        self.epoch = epoch;
        Ok(tally.metrics(epoch, "train"))
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.model.config, &self.config)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.config.extend(self.config.to_kv());
        ck.config
            .push(("train.epoch".into(), self.epoch.to_string()));
        ck.config
            .push(("train.step".into(), self.optimizer.step.to_string()));
        ck.config
            .push(("train.config_hash".into(), self.config_hash()));
        let names: Vec<String> = self
            .model
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        for (name, t) in names.iter().zip(&self.optimizer.first) {
            ck.records
                .push((format!("{OPTIMIZER_PREFIX}first.{name}"), t.clone()));
        }
        for (name, t) in names.iter().zip(&self.optimizer.second) {
            ck.records
                .push((format!("{OPTIMIZER_PREFIX}second.{name}"), t.clone()));
        }
        ck
    }

    /// Continues a run from `ck`. The model config (after the ablation) and
    /// the training settings must hash to the value stored in the
    /// checkpoint.
    pub fn resume(
        ck: &Checkpoint,
        mut model_config: ModelConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        config.ablation.apply(&mut model_config);
        let want = config_hash(&model_config, &config);
        let stored = ck
            .config_value("train.config_hash")
            .ok_or_else(|| Error::Checkpoint("not a training checkpoint".into()))?;
        if stored != want {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {stored}, requested {want}"
            )));
        }
        let model = ck.to_model(OPTIMIZER_PREFIX)?;
        let mut trainer = Trainer::from_model(model, config);
        let int = |key: &str| -> Result<u64> {
            ck.config_value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing or bad {key}")))
        };
        trainer.epoch = int("train.epoch")? as usize;
        trainer.optimizer.step = int("train.step")?;
        let slot = |kind: &str, name: &str| -> Result<Tensor> {
            let key = format!("{OPTIMIZER_PREFIX}{kind}.{name}");
            ck.records
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer record {key}")))
        };
        let names: Vec<String> = trainer
            .model
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        trainer.optimizer.first = names
            .iter()
            .map(|n| slot("first", n))
            .collect::<Result<_>>()?;
        if !trainer.optimizer.second.is_empty() {
            trainer.optimizer.second = names
                .iter()
                .map(|n| slot("second", n))
                .collect::<Result<_>>()?;
        }
        Ok(trainer)
    }
}

/// Dropout-off statistics of `model` over `data`.
pub fn measure(
    model: &Crtnet,
    data: &[Example],
    epoch: usize,
    split: &str,
) -> Result<EpochMetrics> {
    let mut tally = Tally::default();
    for ex in data {
        let pred = model.predict_prepared(&ex.prepare(&model.config)?)?;
        tally.add(&pred, &super::compute_losses(&pred, ex.label)?, ex.label);
    }
    Ok(tally.metrics(epoch, split))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-{epoch:04}.ckpt"))
}

/// Trains until `trainer.config.epochs` epochs are complete, writing
/// checkpoints and `metrics.tsv` under `out_dir`.
///
/// A fresh run saves its initial state as epoch 0. Each epoch logs a
/// `train` record and, with `held_out`, a `test` record. On resume, log
/// records past the resumed epoch are dropped.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &[Example],
    held_out: Option<&[Example]>,
    out_dir: &Path,
) -> Result<Vec<EpochMetrics>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut log = if trainer.epoch > 0 && metrics_path.exists() {
        let mut old = read_metrics(&metrics_path)?;
        old.retain(|r| r.epoch <= trainer.epoch);
        old
    } else {
        Vec::new()
    };
    if trainer.epoch == 0 {
        trainer.to_checkpoint().save(&checkpoint_path(out_dir, 0))?;
    }
    write_metrics(&metrics_path, &log)?;
    let total = trainer.config.epochs;
    while trainer.epoch < total {
        log.push(trainer.run_epoch(train)?);
        if let Some(data) = held_out {
            log.push(measure(&trainer.model, data, trainer.epoch, "test")?);
        }
        write_metrics(&metrics_path, &log)?;
        let every = trainer.config.checkpoint_every;
        if trainer.epoch == total || (every > 0 && trainer.epoch.is_multiple_of(every)) {
            trainer
                .to_checkpoint()
                .save(&checkpoint_path(out_dir, trainer.epoch))?;
        }
    }
    Ok(log)
}
