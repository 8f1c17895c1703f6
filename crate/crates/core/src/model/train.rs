//! Mini-batch training loop with a linearly decaying learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{linear_lr, LiftFormer};
use crate::binhead::{silog_loss, LossParams};
use crate::error::{Error, Result};
use crate::numcore::params::splitmix64;
use crate::numcore::Adam;
use crate::par::{self, Execution};
use crate::scenes::SceneSample;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Reshuffle the sample order every epoch.
    pub shuffle: bool,
    pub seed: u64,
    pub loss: LossParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr_start: 1e-3,
            lr_end: 1e-4,
            shuffle: true,
            seed: 0,
            loss: LossParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch loss before the update.
    pub loss: f64,
    pub lr: f64,
}

/// Runs `cfg.epochs` passes over `data`; `on_step` sees every step as it
/// finishes. Deterministic for fixed inputs regardless of `exec`.
pub fn train<F>(model: &mut LiftFormer, data: &[SceneSample], cfg: &TrainConfig, exec: Execution, mut on_step: F) -> Result<Vec<StepRecord>>
where
    F: FnMut(&StepRecord),
{
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    cfg.loss.validate()?;
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let total = cfg.total_steps(data.len());
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(epoch as u64)));
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = linear_lr(cfg.lr_start, cfg.lr_end, step, total);
            let loss = model.train_step(&mut adam, &batch, lr, &cfg.loss, exec)?;
            let rec = StepRecord { step, epoch, loss, lr };
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
    }
    Ok(records)
}

/// Mean per-sample loss (forward only).
pub fn mean_loss(model: &LiftFormer, data: &[SceneSample], lp: &LossParams, exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let losses = par::map_indexed(exec, data, |_, s| {
        let d = model.forward(&s.image)?.depth;
        silog_loss(d.data(), s.depth.data(), &s.mask, lp)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}
