use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{backward, Gradients, Triplet, DEFAULT_MARGIN};
use super::model::ProjectionModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: DEFAULT_MARGIN,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            epochs: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParams("Adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch, weighted by batch size.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct Moments {
    m: Gradients,
    v: Gradients,
}

fn zeros_like(model: &ProjectionModel) -> Gradients {
    Gradients {
        w1: Array2::zeros(model.w1.dim()),
        b1: Array1::zeros(model.b1.dim()),
        w2: Array2::zeros(model.w2.dim()),
        b2: Array1::zeros(model.b2.dim()),
    }
}

/// Adam with bias correction over the `f32` parameters.
pub struct Adam {
    cfg: TrainConfig,
    state: Moments,
    t: i32,
}

impl Adam {
    pub fn new(model: &ProjectionModel, cfg: &TrainConfig) -> Self {
        Adam {
            cfg: *cfg,
            state: Moments {
                m: zeros_like(model),
                v: zeros_like(model),
            },
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut ProjectionModel, g: &Gradients) {
        self.t += 1;
        let TrainConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            ..
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: &mut f32, m: &mut f64, v: &mut f64, &g: &f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            if lr != 0.0 {
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = (f64::from(*p) - step) as f32;
            }
        };
        let Moments { m, v } = &mut self.state;
        Zip::from(&mut model.w1)
            .and(&mut m.w1)
            .and(&mut v.w1)
            .and(&g.w1)
            .for_each(update);
        Zip::from(&mut model.b1)
            .and(&mut m.b1)
            .and(&mut v.b1)
            .and(&g.b1)
            .for_each(update);
        Zip::from(&mut model.w2)
            .and(&mut m.w2)
            .and(&mut v.w2)
            .and(&g.w2)
            .for_each(update);
        Zip::from(&mut model.b2)
            .and(&mut m.b2)
            .and(&mut v.b2)
            .and(&g.b2)
            .for_each(update);
    }
}

/// Trains in place. Triplet order is reshuffled every epoch and dropout masks
/// are drawn from the same seeded generator, so runs are reproducible.
pub fn train(model: &mut ProjectionModel, triplets: &[Triplet], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::EmptyInput("training triplets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model, cfg);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| triplets[i].clone()));
            let masks = (model.dropout() > 0.0).then(|| model.dropout_masks(3 * batch.len(), &mut rng));
            let bg = backward(model, &batch, cfg.margin, masks.as_ref())?;
            if !bg.loss.is_finite() || bg.grads.w1.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss: bg.loss,
                });
            }
            opt.step(model, &bg.grads);
            sum += bg.loss * batch.len() as f64;
            report.steps += 1;
        }
        report.epoch_losses.push(sum / triplets.len() as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::model::ModelDims;
    use rand::Rng;

    fn dims() -> ModelDims {
        ModelDims {
            input: 8,
            hidden: 16,
            output: 8,
        }
    }

    /// Two clusters; the anchor for cluster `c` is its centre.
    fn toy(n: usize, seed: u64) -> Vec<Triplet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = |c: usize| -> Vec<f32> { (0..8).map(|j| if j % 2 == c { 1.0 } else { 0.2 }).collect() };
        let jitter = |v: &[f32], rng: &mut ChaCha8Rng| -> Vec<f32> {
            v.iter().map(|x| x + rng.random_range(-0.6f32..0.6)).collect()
        };
        (0..n)
            .map(|i| {
                let c = i % 2;
                Triplet {
                    anchor: centre(c),
                    positive: jitter(&centre(c), &mut rng),
                    negative: jitter(&centre(1 - c), &mut rng),
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut m = ProjectionModel::new_random(dims(), 0.1, 0).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 7,
            ..TrainConfig::default()
        };
        train(&mut m, &toy(40, 1), &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn loss_goes_down_and_is_reproducible() {
        let data = toy(256, 2);
        let cfg = TrainConfig {
            batch_size: 32,
            epochs: 20,
            learning_rate: 1e-2,
            margin: 0.5,
            ..TrainConfig::default()
        };
        let mut a = ProjectionModel::new_random(dims(), 0.0, 3).unwrap();
        let ra = train(&mut a, &data, &cfg).unwrap();
        assert!(
            ra.epoch_losses.last().unwrap() < &(ra.epoch_losses[0] * 0.5),
            "{:?}",
            ra.epoch_losses
        );
        assert_eq!(ra.steps, 20 * 8);
        let mut b = ProjectionModel::new_random(dims(), 0.0, 3).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut m = ProjectionModel::zeros(dims(), 0.0).unwrap();
        let mut g = zeros_like(&m);
        g.b2[0] = 3.0;
        g.b2[1] = -0.001;
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&m, &cfg);
        opt.step(&mut m, &g);
        assert!((f64::from(m.b2[0]) + 0.01).abs() < 1e-7);
        assert!((f64::from(m.b2[1]) - 0.01).abs() < 1e-6);
        assert_eq!(m.b2[2], 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut m = ProjectionModel::zeros(dims(), 0.0).unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut m, &toy(4, 0), &bad).is_err());
        assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
    }
}
