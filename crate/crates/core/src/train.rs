//! Masked cross-entropy training with momentum SGD, cosine annealing and
//! early stopping on validation mIoU.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, augment_seed, AugmentConfig, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{check_labels, confusion};
use crate::metrics::miou;
use crate::model::Model;
use crate::nn::ParamStore;
use crate::ops::{LabelMap, Mode};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Flips, quarter turns and HSV jitter on training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            max_epochs: 200,
            patience: 30,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            v.push(format!(
                "need 0 <= lr_min <= lr_max, got lr_min {} and lr_max {}",
                self.lr_min, self.lr_max
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            v.push("max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            v.push("patience must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::ConfigViolations(v)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * t / t_max)) / 2`.
pub fn cosine_lr(t_cur: usize, t_max: usize, lr_min: f64, lr_max: f64) -> f64 {
    debug_assert!(t_max >= 1 && t_cur <= t_max);
    let phase = std::f64::consts::PI * t_cur as f64 / t_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

/// Momentum SGD with weight decay folded into the gradient:
/// `g' = g + wd * theta`, `v = mu * v + g'`, `theta -= lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor4<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor4<f32>> {
        self.velocity.get(name)
    }

    /// Checks every gradient before touching any parameter.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(String, Tensor4<f32>)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = store.get(name)?;
            if p.value.shape() != g.shape() {
                return Err(Error::Format(format!("gradient for {name} has shape {}", g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let wd = if p.kind.decays() { self.weight_decay as f32 } else { 0.0 };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor4::zeros(g.shape()));
            for ((th, vi), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + (gi + wd * *th);
                *th -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_miou";

impl EpochLog {
    /// One CSV line including the newline.
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}\n", self.epoch, self.lr, self.train_loss, self.val_miou)
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&e.csv_row());
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub stopped_early: bool,
}

/// Stacks records into one batch.
pub fn collate(samples: &[SampleRecord]) -> Result<(Tensor4<f32>, LabelMap, Vec<bool>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?.image.shape();
    let mut data = Vec::with_capacity(first.numel() * samples.len());
    let mut labels = Vec::with_capacity(first.h * first.w * samples.len());
    let mut valid = Vec::with_capacity(labels.capacity());
    for s in samples {
        if s.image.shape() != first {
            return Err(Error::Dimension {
                op: "collate",
                axis: crate::error::Axis::Height,
                expected: first.h,
                actual: s.image.shape().h,
            });
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.label);
        valid.extend_from_slice(&s.valid);
    }
    let n = samples.len();
    Ok((
        Tensor4::from_vec(Shape4::new(n, first.c, first.h, first.w), data)?,
        LabelMap::new(n, first.h, first.w, labels)?,
        valid,
    ))
}

fn mix(seed: u64, a: usize, b: usize) -> u64 {
    augment_seed(seed ^ 0x5EED, a, b)
}

/// One forward/backward/update on a batch; returns the loss. A zero
/// learning rate freezes the model, running statistics included.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &[SampleRecord],
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let (x, labels, valid) = collate(batch)?;
    let (loss, grads, bn) = {
        let mut s = crate::nn::Session::new(&model.params, Mode::Train, true, dropout_seed);
        let xv = s.input(x);
        let logits = model.forward_on(&mut s, xv)?;
        let loss = s.graph.cross_entropy(logits, &labels, Some(&valid))?;
        let mut g = s.graph.backward(loss)?;
        let loss_value = s.graph.value(loss).data()[0] as f64;
        (loss_value, s.param_grads(&mut g), s.bn_stat_updates()?)
    };
    opt.step(&mut model.params, &grads, lr)?;
    if lr > 0.0 {
        model.params.assign(bn)?;
    }
    Ok(loss)
}

/// Trains in place. On return `model` holds the parameters of the epoch
/// with the best validation mIoU.
pub fn train(
    model: &mut Model,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation sets".into()));
    }
    check_labels(model, train_set)?;
    check_labels(model, val_set)?;
    let aug = if cfg.augment { AugmentConfig::default() } else { AugmentConfig::off() };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr_min, cfg.lr_max);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<SampleRecord> = chunk
                .iter()
                .map(|&i| augment(&train_set[i], &aug, augment_seed(cfg.seed, i, epoch)))
                .collect();
            losses.push(train_step(model, &mut opt, &batch, lr, mix(cfg.seed, epoch, b))?);
        }
        let val = miou(&confusion(model, val_set)?)?.mean;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_miou: val,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |b| val > b.1) {
            best = Some((epoch + 1, val, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_miou, params) = best.expect("at least one epoch runs");
    model.params = params;
    Ok(TrainOutcome {
        stopped_early: log.len() < cfg.max_epochs,
        log,
        best_epoch,
        best_val_miou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 200, 1e-5, 1e-3), 1e-3);
        assert!((cosine_lr(200, 200, 1e-5, 1e-3) - 1e-5).abs() < 1e-17);
        assert!((cosine_lr(100, 200, 1e-5, 1e-3) - 5.05e-4).abs() < 1e-16);
        let lrs: Vec<f64> = (0..=50).map(|t| cosine_lr(t, 50, 0.0, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn store(v: f32, kind: ParamKind) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("p", kind, Tensor4::full(Shape4::new(1, 1, 1, 2), v)).unwrap();
        s
    }

    fn grad(g: f32) -> Vec<(String, Tensor4<f32>)> {
        vec![("p".into(), Tensor4::full(Shape4::new(1, 1, 1, 2), g))]
    }

    #[test]
    fn sgd_hand_recursion() {
        let mut s = store(1.0, ParamKind::Weight);
        let mut opt = Sgd::new(0.0, 0.0);
        opt.step(&mut s, &grad(2.0), 0.1).unwrap();
        assert!((s.tensor("p").unwrap().data()[0] - 0.8).abs() < 1e-7);

        let mut s = store(1.0, ParamKind::Weight);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, &grad(1.0), 0.1).unwrap();
        opt.step(&mut s, &grad(1.0), 0.1).unwrap();
        assert!((opt.velocity("p").unwrap().data()[0] - 1.9).abs() < 1e-6);
        assert!((s.tensor("p").unwrap().data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-6);

        let mut s = store(3.0, ParamKind::Weight);
        Sgd::new(0.9, 0.0).step(&mut s, &grad(0.0), 0.1).unwrap();
        assert_eq!(s.tensor("p").unwrap().data()[0], 3.0);
    }

    #[test]
    fn decay_skips_norm_parameters() {
        let mut w = store(2.0, ParamKind::Weight);
        Sgd::new(0.0, 0.5).step(&mut w, &grad(0.0), 1.0).unwrap();
        assert_eq!(w.tensor("p").unwrap().data()[0], 1.0);
        let mut g = store(2.0, ParamKind::BnGamma);
        Sgd::new(0.0, 0.5).step(&mut g, &grad(0.0), 1.0).unwrap();
        assert_eq!(g.tensor("p").unwrap().data()[0], 2.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(1.0, ParamKind::Weight);
        let err = Sgd::new(0.9, 0.0).step(&mut s, &grad(f32::NAN), 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "p"));
        assert_eq!(s.tensor("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn config_checks() {
        let bad = TrainConfig {
            lr_min: 1.0,
            momentum: 1.0,
            patience: 0,
            ..TrainConfig::default()
        };
        assert_eq!(bad.violations().len(), 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"batch_size": 4}"#).unwrap();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.patience, 30);
    }

    #[test]
    fn csv_header() {
        let s = log_csv(&[EpochLog { epoch: 1, lr: 0.001, train_loss: 2.5, val_miou: 0.25 }]);
        assert_eq!(s, "epoch,lr,train_loss,val_miou\n1,0.001,2.5,0.25\n");
    }
}
