use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW};
use super::schedule::lr_at;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::peft::PeftModel;
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::{evaluate, Dataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub precision: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub total_steps: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_acc: f64,
    pub best_checkpoint: String,
    pub test_acc: Option<f64>,
    pub frozen_digest_initial: String,
    pub frozen_digest_final: String,
    /// Kept out of the serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn initial_valid_acc(&self) -> f64 {
        self.epochs[0].valid_acc
    }

    pub fn final_valid_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.valid_acc)
    }

    /// `step,epoch,lr,loss,valid_acc`; `valid_acc` is filled on the last
    /// step of each epoch.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss,valid_acc\n");
        for s in &self.steps {
            let acc = self
                .epochs
                .iter()
                .find(|e| e.epoch == s.epoch && self.last_step_of(s.epoch) == Some(s.step))
                .map(|e| e.valid_acc.to_string())
                .unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", s.step, s.epoch, s.lr, s.loss, acc);
        }
        out
    }

    fn last_step_of(&self, epoch: usize) -> Option<usize> {
        self.steps
            .iter()
            .filter(|s| s.epoch == epoch)
            .map(|s| s.step)
            .max()
    }
}

/// Step-resumable training loop. Data order is a pure function of the seed
/// and the epoch, so `n` steps followed by `m` steps equal `n + m` steps.
pub struct Trainer<T> {
    pub model: PeftModel<T>,
    data: Dataset,
    cfg: TrainConfig,
    opt: AdamW<T>,
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
    order: Vec<usize>,
    order_epoch: Option<usize>,
    epoch_loss: f64,
    report: TrainReport,
    best: Vec<(String, Tensor<T>)>,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: PeftModel<T>, data: Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let steps_per_epoch = cfg.steps_per_epoch(data.train.len());
        let total_steps = steps_per_epoch * cfg.epochs;
        let initial = evaluate(&model, &data.valid, cfg.eval_batch_size)?;
        let digest = model.frozen_digest();
        let report = TrainReport {
            method: model.spec().label(),
            precision: T::DTYPE.to_string(),
            trainable_params: model.trainable_count(),
            total_params: model.total_count(),
            total_steps,
            steps: Vec::new(),
            epochs: vec![EpochRecord {
                epoch: 0,
                train_loss: None,
                valid_acc: initial,
            }],
            best_epoch: 0,
            best_valid_acc: initial,
            best_checkpoint: "epoch-0".into(),
            test_acc: None,
            frozen_digest_initial: digest.clone(),
            frozen_digest_final: digest,
            wall_clock_secs: 0.0,
        };
        let best = snapshot(&model);
        Ok(Self {
            opt: AdamW::new(cfg.adamw()),
            model,
            data,
            cfg,
            step: 0,
            steps_per_epoch,
            total_steps,
            order: Vec::new(),
            order_epoch: None,
            epoch_loss: 0.0,
            report,
            best,
            started: Instant::now(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.opt
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order_epoch != Some(epoch) {
            let mut rng = rng::stream(self.cfg.seed, &format!("{}/epoch-{epoch}", rng::SHUFFLE));
            self.order = (0..self.data.train.len()).collect();
            self.order.shuffle(&mut rng);
            self.order_epoch = Some(epoch);
        }
        &self.order
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// keep their last finite values and [`Error::Diverged`] is returned.
    pub fn step_once(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        let epoch = self.step / self.steps_per_epoch + 1;
        let within = self.step % self.steps_per_epoch;
        let bs = self.cfg.batch_size;
        let indices: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[within * bs..((within + 1) * bs).min(order.len())].to_vec()
        };
        let (batch, labels) = self.data.train.batch(&indices)?;
        let lr = lr_at(self.step, self.total_steps, &self.cfg);

        self.model.zero_grad();
        let loss = self.model.loss_and_grads(&batch, &labels)?.as_f64();
        if !loss.is_finite() {
            self.model.zero_grad();
            return Err(Error::Diverged {
                step: self.step + 1,
                detail: format!("loss is {loss}"),
            });
        }
        if let Some(max_norm) = self.cfg.grad_clip {
            let PeftModel { base, peft } = &mut self.model;
            clip_grad_norm(
                base.params.iter_mut().chain(peft.params.iter_mut()),
                max_norm,
            );
        }
        {
            let PeftModel { base, peft } = &mut self.model;
            let result = self
                .opt
                .step(base.params.iter_mut().chain(peft.params.iter_mut()), lr);
            if let Err(Error::NonFiniteGrad { param }) = result {
                self.model.zero_grad();
                return Err(Error::Diverged {
                    step: self.step + 1,
                    detail: format!("non-finite gradient in `{param}`"),
                });
            }
            result?;
        }
        self.step += 1;
        self.epoch_loss += loss;
        self.report.steps.push(StepRecord {
            step: self.step,
            epoch,
            lr,
            loss,
        });
        if within + 1 == self.steps_per_epoch {
            let acc = evaluate(&self.model, &self.data.valid, self.cfg.eval_batch_size)?;
            self.report.epochs.push(EpochRecord {
                epoch,
                train_loss: Some(self.epoch_loss / self.steps_per_epoch as f64),
                valid_acc: acc,
            });
            self.epoch_loss = 0.0;
            if acc > self.report.best_valid_acc {
                self.report.best_valid_acc = acc;
                self.report.best_epoch = epoch;
                self.report.best_checkpoint = format!("epoch-{epoch}");
                self.best = snapshot(&self.model);
            }
        }
        Ok(())
    }

    pub fn run_steps(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.step_once()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_steps(self.total_steps - self.step)
    }

    /// Restores the best-validation parameters and scores them on the test split.
    pub fn finish(mut self) -> Result<(PeftModel<T>, TrainReport)> {
        restore(&mut self.model, &self.best);
        self.report.test_acc = Some(evaluate(
            &self.model,
            &self.data.test,
            self.cfg.eval_batch_size,
        )?);
        self.report.frozen_digest_final = self.model.frozen_digest();
        self.report.wall_clock_secs = self.started.elapsed().as_secs_f64();
        Ok((self.model, self.report))
    }
}

fn snapshot<T: Scalar>(model: &PeftModel<T>) -> Vec<(String, Tensor<T>)> {
    model
        .base
        .params
        .iter()
        .chain(model.peft.params.iter())
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

fn restore<T: Scalar>(model: &mut PeftModel<T>, snap: &[(String, Tensor<T>)]) {
    for (name, value) in snap {
        let p = match model.base.params.get_mut(name) {
            Some(p) => p,
            None => model
                .peft
                .params
                .get_mut(name)
                .expect("snapshot names come from the model"),
        };
        p.value = value.clone();
    }
}
