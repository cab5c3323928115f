use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::data::{frames_to_channel_major, TrainingWindow};
use crate::error::{Error, Result};
use crate::kinematics::{mpjpe_channels, Skeleton};
use crate::losses::{loss_total, LossConfig, LossWeights};
use crate::model::{FreqMrn, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::optim::{adam_step, lr_schedule, AdamSettings, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative decay.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Frames between consecutive training windows.
    pub stride: usize,
    /// Share of sequences (taken from the end) held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamSettings::default();
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr: 0.005,
            lr_decay: 0.97,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            grad_clip: adam.grad_clip,
            stride: 1,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("batch_size and stride must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }
}

/// One line of the metrics log. MPJPE values cover the predicted future
/// frames and are computed in eval mode after the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Epochs completed.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_mpjpe: f64,
    pub val_mpjpe: Option<f64>,
    /// Train-set MPJPE of every stage output.
    pub stage_mpjpe: Vec<f64>,
}

/// Model, optimizer and generator state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: FreqMrn,
    pub optimizer: OptimizerState,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub skeleton: Skeleton,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    pub(crate) rng: ChaCha8Rng,
}

/// Stacks windows into `[B×P×H]` histories and `[B×P×(L+F)]` targets
/// (the last `L` history frames followed by the future).
pub fn batch_tensors(windows: &[&TrainingWindow], query: usize) -> Result<(Tensor, Tensor)> {
    let first = windows.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, f, p) = (first.history_frames(), first.future_frames(), 3 * first.joints());
    if query > h {
        return Err(Error::HistoryTooShort { got: h, need: query });
    }
    let mut hist = Vec::with_capacity(windows.len() * p * h);
    let mut tgt = Vec::with_capacity(windows.len() * p * (query + f));
    for w in windows {
        if w.history_frames() != h || w.future_frames() != f || 3 * w.joints() != p {
            return Err(Error::dim("batch_tensors", "windows in one batch differ in shape"));
        }
        let hc = frames_to_channel_major(&w.history)?;
        let tc = frames_to_channel_major(&w.target)?;
        hist.extend_from_slice(hc.data());
        for ch in 0..p {
            tgt.extend_from_slice(&hc.data()[ch * h + h - query..(ch + 1) * h]);
            tgt.extend_from_slice(&tc.data()[ch * f..(ch + 1) * f]);
        }
    }
    let b = windows.len();
    Ok((Tensor::new([b, p, h], hist)?, Tensor::new([b, p, query + f], tgt)?))
}

/// Last `n` frames of a `[B×P×T]` tensor.
fn tail_frames(x: &Tensor, n: usize) -> Result<Tensor> {
    let [b, p, t] = *x.shape() else {
        return Err(Error::dim(
            "tail_frames",
            format!("expected [B×P×T], got {:?}", x.shape()),
        ));
    };
    let mut out = Vec::with_capacity(b * p * n);
    for row in x.data().chunks(t) {
        out.extend_from_slice(&row[t - n..]);
    }
    Tensor::new([b, p, n], out)
}

/// Eval-mode MPJPE over the future frames of `windows`: the final
/// prediction and each stage output.
pub fn window_mpjpe(model: &FreqMrn, windows: &[TrainingWindow], batch_size: usize) -> Result<(f64, Vec<f64>)> {
    let future = model.config.future;
    let mut total = 0.0;
    let mut stages = vec![0.0; model.config.stages];
    let mut count = 0usize;
    let refs: Vec<&TrainingWindow> = windows.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (hist, target) = batch_tensors(chunk, model.config.query)?;
        let out = model.predict(&hist)?;
        let truth = tail_frames(&target, future)?;
        let frames = |pred: &Tensor| -> Result<f64> {
            let per = mpjpe_channels(&tail_frames(pred, future)?, &truth)?;
            Ok(per.iter().sum::<f64>() / per.len() as f64 * chunk.len() as f64)
        };
        total += frames(&out.prediction)?;
        for (acc, s) in stages.iter_mut().zip(&out.stages) {
            *acc += frames(s)?;
        }
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    Ok((
        total / count as f64,
        stages.into_iter().map(|s| s / count as f64).collect(),
    ))
}

impl Trainer {
    /// Fresh model and optimizer; parameters and every later random draw
    /// come from one generator seeded with `seed`.
    pub fn new(
        model: ModelConfig,
        loss: LossConfig,
        train: TrainConfig,
        skeleton: &Skeleton,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = LossWeights::for_skeleton(skeleton, model.query, model.future, &loss)?;
        let model = FreqMrn::new(model, skeleton.joint_count(), &mut rng)?;
        let optimizer = OptimizerState::new(model.params.values(), train.lr, train.adam());
        Ok(Trainer {
            model,
            optimizer,
            loss,
            train,
            weights,
            skeleton: skeleton.clone(),
            epoch: 0,
            seed,
            rng,
        })
    }

    /// One optimization step on a batch; returns the loss value.
    pub fn step(&mut self, history: &Tensor, target: &Tensor, batch_index: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.model.params.bind(&mut tape);
        let h = tape.constant(history.clone());
        let t = tape.constant(target.clone());
        let out = self.model.forward(&mut tape, &vars, h, Mode::Train, &mut self.rng)?;
        let query = self.model.config.query;
        let supervised = if self.loss.supervise_all_stages {
            out.stages.clone()
        } else {
            vec![out.prediction]
        };
        let mut loss = loss_total(&mut tape, supervised[0], t, &self.weights, &self.loss, query)?;
        for &s in &supervised[1..] {
            let term = loss_total(&mut tape, s, t, &self.weights, &self.loss, query)?;
            loss = tape.add(loss, term)?;
        }
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NanLoss {
                epoch: self.epoch,
                batch: batch_index,
            });
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .vars()
            .iter()
            .zip(self.model.params.values())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        adam_step(self.model.params.values_mut(), &grads, &mut self.optimizer)?;
        Ok(value)
    }

    /// Trains one epoch over `windows` in a freshly shuffled order, then
    /// measures train and validation MPJPE.
    pub fn train_epoch(&mut self, windows: &[TrainingWindow], val: &[TrainingWindow]) -> Result<EpochMetrics> {
        if windows.is_empty() {
            return Err(Error::Config("training set yields no windows".into()));
        }
        let lr = lr_schedule(self.epoch, self.train.lr, self.train.lr_decay);
        self.optimizer.lr = lr;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(self.train.batch_size).enumerate() {
            let batch: Vec<&TrainingWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let (history, target) = batch_tensors(&batch, self.model.config.query)?;
            loss_sum += self.step(&history, &target, bi)?;
            batches += 1;
        }
        self.epoch += 1;
        let (train_mpjpe, stage_mpjpe) = window_mpjpe(&self.model, windows, self.train.batch_size)?;
        let val_mpjpe = if val.is_empty() {
            None
        } else {
            Some(window_mpjpe(&self.model, val, self.train.batch_size)?.0)
        };
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_mpjpe,
            val_mpjpe,
            stage_mpjpe,
        };
        log::info!(
            "epoch {} lr {:.6} loss {:.4} train mpjpe {:.3}{}",
            metrics.epoch,
            lr,
            metrics.train_loss,
            train_mpjpe,
            val_mpjpe.map(|v| format!(" val mpjpe {v:.3}")).unwrap_or_default()
        );
        Ok(metrics)
    }

    /// Runs epochs until `train.epochs` have completed, handing each
    /// record to `on_epoch`.
    pub fn fit(
        &mut self,
        windows: &[TrainingWindow],
        val: &[TrainingWindow],
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut log = Vec::new();
        while self.epoch < self.train.epochs {
            let m = self.train_epoch(windows, val)?;
            on_epoch(self, &m)?;
            log.push(m);
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_windows, gen_synthetic, SequenceDataset, SynthSpec};

    fn fixture() -> (Skeleton, Vec<TrainingWindow>) {
        let sk = Skeleton::synthetic(1, 3, 100.0).unwrap();
        let seqs = (0..3)
            .map(|s| {
                gen_synthetic(
                    &sk,
                    &SynthSpec {
                        frames: 18,
                        seed: s,
                        ..SynthSpec::default()
                    },
                )
                .unwrap()
            })
            .collect();
        let ds = SequenceDataset::new(sk.clone(), seqs).unwrap();
        (sk, extract_windows(&ds, 8, 3, 2).unwrap())
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            history: 8,
            query: 3,
            future: 3,
            stages: 2,
            residual_pairs: 1,
            latent: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn batch_layout() {
        let (_, windows) = fixture();
        let refs: Vec<&TrainingWindow> = windows.iter().take(2).collect();
        let (h, t) = batch_tensors(&refs, 3).unwrap();
        assert_eq!(h.shape(), &[2, 9, 8]);
        assert_eq!(t.shape(), &[2, 9, 6]);
        let w = &windows[1];
        assert_eq!(t.get(&[1, 4, 0]), w.history.get(&[5, 1, 1]));
        assert_eq!(t.get(&[1, 4, 5]), w.target.get(&[2, 1, 1]));
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let (sk, windows) = fixture();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(tiny(), LossConfig::default(), cfg, &sk, 5).unwrap();
        let before = tr.model.params.clone();
        assert!(tr.fit(&windows, &[], |_, _| Ok(())).unwrap().is_empty());
        assert_eq!(tr.model.params, before);
    }

    #[test]
    fn replay_is_identical() {
        let (sk, windows) = fixture();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut tr = Trainer::new(tiny(), LossConfig::default(), cfg.clone(), &sk, 7).unwrap();
            tr.fit(&windows, &windows[..2], |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a[0].val_mpjpe.is_some());
        assert_eq!(a[1].stage_mpjpe.len(), 2);
        assert!((a[1].lr - 0.005 * 0.97).abs() < 1e-15);
    }

    #[test]
    fn nan_loss_names_batch() {
        let (sk, mut windows) = fixture();
        let mut tr = Trainer::new(tiny(), LossConfig::default(), TrainConfig::default(), &sk, 1).unwrap();
        windows[0].target.data_mut()[0] = f64::INFINITY;
        let refs: Vec<&TrainingWindow> = vec![&windows[0]];
        let (h, t) = batch_tensors(&refs, 3).unwrap();
        assert!(matches!(tr.step(&h, &t, 4), Err(Error::NanLoss { epoch: 0, batch: 4 })));
    }
}
