use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{l1_loss, weighted_ce_loss};
use super::nets::Differentiable;
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Constant for the first half, then linear to zero at the last epoch boundary.
    #[default]
    LinearDecayLastHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    WeightedCe,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// `(w_pos, w_neg)`; unit weights when absent.
    pub class_weights: Option<(f64, f64)>,
    pub momentum: f64,
}

impl TrainConfig {
    pub fn new(loss: LossKind) -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.01,
            lr_schedule: LrSchedule::LinearDecayLastHalf,
            batch_size: 16,
            seed: 0,
            loss,
            class_weights: None,
            momentum: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let Some((p, n)) = self.class_weights {
            if !(p >= 0.0 && n >= 0.0) {
                return Err(Error::InvalidParameter("class weights must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during epoch `e` (0-based).
    pub fn lr_at(&self, e: usize) -> f64 {
        lr_at(self.lr, self.epochs, self.lr_schedule, e)
    }
}

/// `lr` for `e < epochs/2`, then `lr·(epochs−e)/(epochs−epochs/2)`.
pub fn lr_at(lr: f64, epochs: usize, schedule: LrSchedule, e: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => lr,
        LrSchedule::LinearDecayLastHalf => {
            let half = epochs / 2;
            if e < half {
                lr
            } else {
                lr * epochs.saturating_sub(e) as f64 / (epochs - half) as f64
            }
        }
    }
}

/// Supervision for one mini-batch.
#[derive(Debug, Clone)]
pub enum Targets<T> {
    /// 1 = positive (error), 0 = negative.
    Labels(Vec<u8>),
    Dense(Tensor4<T>),
}

/// Indexable training set that materializes mini-batches on demand.
pub trait Dataset<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor4<T>, Targets<T>)>;
}

/// Dataset held entirely in memory as per-sample `[c, h, w]` arrays.
#[derive(Debug, Clone)]
pub struct InMemoryDataset<T> {
    pub item_shape: [usize; 3],
    pub inputs: Vec<Vec<T>>,
    pub labels: Option<Vec<u8>>,
    pub targets: Option<Vec<Vec<T>>>,
    pub target_shape: [usize; 3],
}

impl<T: Scalar> InMemoryDataset<T> {
    pub fn labelled(item_shape: [usize; 3], inputs: Vec<Vec<T>>, labels: Vec<u8>) -> Self {
        InMemoryDataset {
            item_shape,
            inputs,
            labels: Some(labels),
            targets: None,
            target_shape: [0; 3],
        }
    }

    pub fn paired(
        item_shape: [usize; 3],
        inputs: Vec<Vec<T>>,
        target_shape: [usize; 3],
        targets: Vec<Vec<T>>,
    ) -> Self {
        InMemoryDataset {
            item_shape,
            inputs,
            labels: None,
            targets: Some(targets),
            target_shape,
        }
    }
}

fn stack<T: Scalar>(shape: [usize; 3], items: &[&Vec<T>]) -> Result<Tensor4<T>> {
    let mut data = Vec::with_capacity(items.len() * shape.iter().product::<usize>());
    for it in items {
        data.extend_from_slice(it);
    }
    Tensor4::from_vec([items.len(), shape[0], shape[1], shape[2]], data)
}

impl<T: Scalar> Dataset<T> for InMemoryDataset<T> {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor4<T>, Targets<T>)> {
        let x = stack(
            self.item_shape,
            &indices.iter().map(|&i| &self.inputs[i]).collect::<Vec<_>>(),
        )?;
        let t = match (&self.labels, &self.targets) {
            (Some(l), _) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            (None, Some(t)) => Targets::Dense(stack(
                self.target_shape,
                &indices.iter().map(|&i| &t[i]).collect::<Vec<_>>(),
            )?),
            (None, None) => return Err(Error::InvalidParameter("dataset has no targets".into())),
        };
        Ok((x, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean mini-batch loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mini-batch momentum SGD (`v ← μv + g`, `p ← p − lr·v`) with deterministic shuffling.
pub fn train<T: Scalar, M: Differentiable<T> + ?Sized, D: Dataset<T> + ?Sized>(
    model: &mut M,
    data: &D,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_progress(model, data, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after every epoch with `(epoch, mean loss)`.
pub fn train_with_progress<T, M, D>(
    model: &mut M,
    data: &D,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport>
where
    T: Scalar,
    M: Differentiable<T> + ?Sized,
    D: Dataset<T> + ?Sized,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyClass("training set is empty".into()));
    }
    let (w_pos, w_neg) = cfg.class_weights.unwrap_or((1.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mu = T::from_f64(cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        let lr = T::from_f64(cfg.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let (x, targets) = data.batch(chunk)?;
            let out = model.forward_train(&x)?;
            let (loss, grad) = match (cfg.loss, &targets) {
                (LossKind::WeightedCe, Targets::Labels(l)) => weighted_ce_loss(&out, l, w_pos, w_neg)?,
                (LossKind::L1, Targets::Dense(t)) => l1_loss(&out, t)?,
                _ => {
                    return Err(Error::InvalidParameter(
                        "loss kind does not match dataset targets".into(),
                    ))
                }
            };
            if !loss.is_finite() || !out.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: report.steps,
                });
            }
            model.backward(&grad);
            for ((p, g), v) in model.params_and_grads().into_iter().zip(&mut velocity) {
                for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = mu * *vi + gi;
                    *pi = *pi - lr * *vi;
                }
            }
            sum += loss;
            batches += 1;
            report.steps += 1;
        }
        let mean = sum / batches as f64;
        report.epoch_losses.push(mean);
        progress(epoch, mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::layers::{Dense, Layer};
    use crate::neural::nets::{Classifier, LayerProbe};

    #[test]
    fn schedule_values() {
        let lr = 0.1;
        assert_eq!(lr_at(lr, 10, LrSchedule::LinearDecayLastHalf, 0), lr);
        assert_eq!(lr_at(lr, 10, LrSchedule::LinearDecayLastHalf, 4), lr);
        assert_eq!(lr_at(lr, 10, LrSchedule::LinearDecayLastHalf, 5), lr);
        assert!((lr_at(lr, 10, LrSchedule::LinearDecayLastHalf, 7) - 0.6 * lr).abs() < 1e-15);
        assert_eq!(lr_at(lr, 10, LrSchedule::LinearDecayLastHalf, 10), 0.0);
        assert_eq!(lr_at(lr, 10, LrSchedule::Constant, 9), lr);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(LossKind::L1);
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        c.epochs = 1;
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c.lr = 0.1;
        c.class_weights = Some((-1.0, 1.0));
        assert!(c.validate().is_err());
    }

    fn toy() -> InMemoryDataset<f32> {
        let a: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        InMemoryDataset::labelled([1, 4, 4], vec![a, b], vec![1, 0])
    }

    #[test]
    fn toy_loss_decreases_and_is_deterministic() {
        let run = || {
            let mut net = Classifier::<f32>::new(1, &[4, 4], 5).unwrap();
            let mut cfg = TrainConfig::new(LossKind::WeightedCe);
            cfg.epochs = 50;
            cfg.batch_size = 2;
            cfg.lr = 0.05;
            cfg.lr_schedule = LrSchedule::Constant;
            let r = train(&mut net, &toy(), &cfg).unwrap();
            (r, net.flat_params())
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert!(r1.epoch_losses.last().unwrap() < &r1.epoch_losses[0]);
        assert_eq!(r1.steps, 50);
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(0);
        let mut probe = LayerProbe::new(Layer::Dense(Dense::<f32>::new(16, 2, &mut rng)));
        let mut data = toy();
        data.inputs[1][3] = f32::NAN;
        let cfg = TrainConfig::new(LossKind::WeightedCe);
        let err = train(&mut probe, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn mismatched_loss_rejected() {
        let mut net = Classifier::<f32>::new(1, &[4], 1).unwrap();
        let cfg = TrainConfig::new(LossKind::L1);
        assert!(train(&mut net, &toy(), &cfg).is_err());
    }
}
