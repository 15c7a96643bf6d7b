use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalSummary};
use super::loss::{total_loss_on, LossBreakdown, LossWeights};
use super::optim::{clip_grad_norm, learning_rate, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Dropout, Model, ParamStore};
use crate::numcore::{Graph, Scalar};
use crate::synthdata::Utterance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    /// Utterances per update; gradients are averaged over the feasible ones.
    pub batch_size: usize,
    pub final_weight: f64,
    pub inter_weight: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write `last.ckpt` every this many epochs (and always after the last one).
    pub checkpoint_every: usize,
    /// Emit a step record every this many updates.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 1000,
            epochs: 30,
            batch_size: 4,
            final_weight: 0.5,
            inter_weight: 0.1,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            seed: 11,
            checkpoint_every: 1,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.final_weight < 0.0 || self.inter_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            final_weight: self.final_weight,
            inter_weight: self.inter_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Mean composite loss over the batch.
    pub loss: f64,
    pub final_loss: f64,
    /// Mean loss per conditioning head, in forward order.
    pub intermediate: Vec<f64>,
    pub grad_norm: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub median_loss: f64,
    /// Utterances skipped because a CTC target did not fit.
    pub skipped: usize,
    pub dev: Option<EvalSummary>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_dev_cer: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    epoch: usize,
    best_dev_cer: Option<f64>,
    best_epoch: Option<usize>,
    train: TrainConfig,
}

/// Owns the model and optimizer state across epochs.
pub struct Trainer<T: Scalar> {
    model: Model<T>,
    opt: Adam<T>,
    cfg: TrainConfig,
    epoch: usize,
    best_dev_cer: Option<f64>,
    best_epoch: Option<usize>,
    best_params: Option<ParamStore<T>>,
}

struct UtteranceGrad<T> {
    loss: LossBreakdown<T>,
    grads: ParamStore<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(cfg.adam, model.params());
        Ok(Self {
            model,
            opt,
            cfg,
            epoch: 0,
            best_dev_cer: None,
            best_epoch: None,
            best_params: None,
        })
    }

    /// Restores model, optimizer moments and counters. Training continues
    /// with the epoch after the saved one, under `cfg`.
    pub fn resume(ck: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state: TrainState = serde_json::from_value(ck.header.extra.clone())
            .map_err(|e| Error::format("checkpoint", format!("training state: {e}")))?;
        let mut groups = ck.groups.clone();
        let model = ck.into_model()?;
        let take = |groups: &mut std::collections::BTreeMap<String, ParamStore<T>>, name: &str| {
            let s = groups
                .remove(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing optimizer group {name}")))?;
            model.params().check_layout(&s)?;
            Ok::<_, Error>(s)
        };
        let m = take(&mut groups, "adam_m")?;
        let v = take(&mut groups, "adam_v")?;
        let opt = Adam {
            config: cfg.adam,
            m,
            v,
            step: state.step,
        };
        Ok(Self {
            model,
            opt,
            cfg,
            epoch: state.epoch,
            best_dev_cer: state.best_dev_cer,
            best_epoch: state.best_epoch,
            best_params: None,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    /// Parameters of the best dev epoch seen in this session, if any.
    pub fn best_model(&self) -> Option<Model<T>> {
        let p = self.best_params.clone()?;
        Model::from_params(self.model.config().clone(), p).ok()
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Checkpoint with optimizer moments and counters.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        self.checkpoint_of(self.model.params().clone())
    }

    fn checkpoint_of(&self, params: ParamStore<T>) -> Checkpoint<T> {
        let state = TrainState {
            step: self.opt.step,
            epoch: self.epoch,
            best_dev_cer: self.best_dev_cer,
            best_epoch: self.best_epoch,
            train: self.cfg.clone(),
        };
        let mut ck = Checkpoint::from_model(&self.model, serde_json::to_value(state).expect("state serializes"));
        ck.params = params;
        ck.groups.insert("adam_m".into(), self.opt.m.clone());
        ck.groups.insert("adam_v".into(), self.opt.v.clone());
        ck
    }

    /// Loss and parameter gradients for one utterance; `None` when a CTC
    /// target cannot fit the available length.
    fn utterance_grad(&self, u: &Utterance, dropout: &mut Dropout) -> Result<Option<UtteranceGrad<T>>> {
        let non_finite = |detail: String| Error::NonFiniteLoss {
            utterance: u.id.clone(),
            detail,
        };
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, true);
        let tr = self
            .model
            .forward_on(&mut g, &p, &u.features.cast(), dropout)
            .map_err(|e| match e {
                Error::NonFinite(d) => non_finite(d),
                other => other,
            })?;
        let (loss_id, loss) = match total_loss_on(&mut g, &tr, &u.tokens, self.cfg.loss_weights()) {
            Ok(x) => x,
            Err(Error::Infeasible { .. }) => return Ok(None),
            Err(Error::NonFinite(d)) => return Err(non_finite(d)),
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() {
            return Err(non_finite(format!(
                "total {} (final {}, T' = {}, I = {})",
                loss.total,
                loss.final_loss,
                g.value(tr.h).rows(),
                tr.segmentation.len()
            )));
        }
        let mut grads = g.backward(loss_id)?;
        let mut store = ParamStore::new();
        for (name, id) in self.model.params().names().map(|n| (n, p.get(n))) {
            let a = grads.take(id?).expect("parameter leaves are taped");
            if !a.all_finite() {
                return Err(non_finite(format!("gradient of {name}")));
            }
            store.insert(name, a);
        }
        Ok(Some(UtteranceGrad { loss, grads: store }))
    }

    /// One pass over `train` in a seed- and epoch-determined order.
    pub fn run_epoch(&mut self, train: &[Utterance], sink: &mut dyn FnMut(&TrainEvent)) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut losses = Vec::with_capacity(train.len());
        let mut skipped = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut sum: Option<ParamStore<T>> = None;
            let mut batch_loss = (0.0, 0.0, Vec::new());
            let mut used = 0usize;
            let mut batch_skipped = 0;
            for (k, &i) in batch.iter().enumerate() {
                let dseed = self.cfg.seed ^ (self.opt.step << 16) ^ k as u64;
                let mut dropout = Dropout::new(self.model.config().dropout, dseed);
                let Some(ug) = self.utterance_grad(&train[i], &mut dropout)? else {
                    batch_skipped += 1;
                    continue;
                };
                used += 1;
                let total = ug.loss.total.to_f64_lossy();
                losses.push(total);
                batch_loss.0 += total;
                batch_loss.1 += ug.loss.final_loss.to_f64_lossy();
                if batch_loss.2.is_empty() {
                    batch_loss.2 = vec![0.0; ug.loss.intermediate.len()];
                }
                for (acc, (_, l)) in batch_loss.2.iter_mut().zip(&ug.loss.intermediate) {
                    *acc += l.to_f64_lossy();
                }
                match sum.as_mut() {
                    None => sum = Some(ug.grads),
                    Some(s) => {
                        for ((_, a), (_, b)) in s.iter_mut().zip(ug.grads.iter()) {
                            a.add_assign(b);
                        }
                    }
                }
            }
            skipped += batch_skipped;
            let Some(mut grads) = sum else { continue };
            let inv = T::of(1.0 / used as f64);
            for (_, a) in grads.iter_mut() {
                a.scale_in_place(inv);
            }
            let norm = clip_grad_norm(&mut grads, self.cfg.clip_norm);
            let lr = learning_rate(self.opt.step + 1, self.cfg.peak_lr, self.cfg.warmup_steps);
            self.opt.update(self.model.params_mut(), &grads, lr);
            if self.opt.step % self.cfg.log_every == 0 {
                let n = used as f64;
                sink(&TrainEvent::Step(StepRecord {
                    step: self.opt.step,
                    epoch,
                    lr,
                    loss: batch_loss.0 / n,
                    final_loss: batch_loss.1 / n,
                    intermediate: batch_loss.2.iter().map(|l| l / n).collect(),
                    grad_norm: norm,
                    skipped: batch_skipped,
                }));
            }
        }
        self.epoch = epoch;
        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        Ok(EpochRecord {
            epoch,
            step: self.opt.step,
            mean_loss,
            median_loss: median(&mut losses),
            skipped,
            dev: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs up to `cfg.epochs`, evaluating on `dev`
    /// after each. With `out_dir`, writes `metrics.jsonl`, `best.ckpt` (lowest
    /// dev CER) and `last.ckpt`.
    pub fn train(
        &mut self,
        train: &[Utterance],
        dev: &[Utterance],
        out_dir: Option<&Path>,
        sink: &mut dyn FnMut(&TrainEvent),
    ) -> Result<TrainSummary> {
        let start = Instant::now();
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let f = File::options()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, BufWriter::new(f)))
            }
            None => None,
        };
        let write_event = |ev: &TrainEvent, log: &mut Option<(std::path::PathBuf, BufWriter<File>)>| -> Result<()> {
            if let Some((path, w)) = log {
                let line = serde_json::to_string(ev).expect("event serializes");
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
            }
            Ok(())
        };
        let mut epochs = Vec::new();
        while self.epoch < self.cfg.epochs {
            let mut pending = Vec::new();
            let mut rec = self.run_epoch(train, &mut |ev| {
                sink(ev);
                pending.push(ev.clone());
            })?;
            for ev in &pending {
                write_event(ev, &mut log)?;
            }
            if !dev.is_empty() {
                let eval_start = Instant::now();
                let report = evaluate(&self.model, dev)?;
                rec.seconds += eval_start.elapsed().as_secs_f64();
                let cer = report.summary.cer;
                if self.best_dev_cer.is_none_or(|b| cer < b) {
                    self.best_dev_cer = Some(cer);
                    self.best_epoch = Some(rec.epoch);
                    self.best_params = Some(self.model.params().clone());
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(&dir.join("best.ckpt"))?;
                    }
                }
                rec.dev = Some(report.summary);
            }
            let ev = TrainEvent::Epoch(rec.clone());
            sink(&ev);
            write_event(&ev, &mut log)?;
            if let Some(dir) = out_dir {
                if self.epoch % self.cfg.checkpoint_every == 0 || self.epoch == self.cfg.epochs {
                    self.checkpoint().save(&dir.join("last.ckpt"))?;
                }
            }
            epochs.push(rec);
        }
        Ok(TrainSummary {
            epochs,
            best_dev_cer: self.best_dev_cer,
            best_epoch: self.best_epoch,
            steps: self.opt.step,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
