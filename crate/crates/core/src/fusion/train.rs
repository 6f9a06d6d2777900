use std::collections::BTreeSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FusionError, GresModel, ModelInputs, Result};
use crate::eval::{hit_rate, Split};
use crate::numerics::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSampling {
    /// New negatives every epoch.
    #[default]
    Resample,
    /// Negatives drawn once and reused.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Users per optimizer step; each brings all its train purchases.
    pub batch_size: usize,
    pub negatives: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub negative_sampling: NegativeSampling,
    /// Skips optimizer steps.
    pub freeze: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0015,
            batch_size: 30,
            negatives: 4,
            max_epochs: 40,
            patience: 5,
            negative_sampling: NegativeSampling::Resample,
            freeze: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(FusionError::Config(format!(
                "learning_rate {} batch_size {} max_epochs {}",
                self.learning_rate, self.batch_size, self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_hr10: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_hr10\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.val_hr10));
        }
        s
    }
}

fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Samples, per positive, `k` items the user has not bought in train.
fn draw_negatives(split: &Split, train_items: &[BTreeSet<usize>], n_items: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    split
        .train
        .iter()
        .map(|p| {
            let owned = &train_items[p.user];
            if owned.len() >= n_items {
                return Vec::new();
            }
            (0..k)
                .map(|_| loop {
                    let j = rng.random_range(0..n_items);
                    if !owned.contains(&j) {
                        break j;
                    }
                })
                .collect()
        })
        .collect()
}

/// BCE with sampled negatives, Adam, and early stopping on validation
/// HR@10; the best parameters are restored at the end.
pub fn train(model: &mut GresModel, inputs: &ModelInputs, split: &Split, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (n_users, n_items) = (inputs.n_users(), inputs.n_items());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_items = vec![BTreeSet::new(); n_users];
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); n_users];
    for (k, p) in split.train.iter().enumerate() {
        train_items[p.user].insert(p.target.index);
        by_user[p.user].push(k);
    }
    let mut users: Vec<usize> = (0..n_users).filter(|&u| !by_user[u].is_empty()).collect();

    let adam = AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() };
    let mut state = AdamState::new(&model.store, adam);
    let mut negatives = draw_negatives(split, &train_items, n_items, cfg.negatives, &mut rng);
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.store.clone());
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        if epoch > 1 && cfg.negative_sampling == NegativeSampling::Resample {
            negatives = draw_negatives(split, &train_items, n_items, cfg.negatives, &mut rng);
        }
        users.shuffle(&mut rng);
        // per positive: its own loss plus its negatives' losses
        let mut sample_loss = vec![0.0; split.train.len()];
        let mut n_samples = 0usize;
        for (batch, chunk) in users.chunks(cfg.batch_size).enumerate() {
            let (mut bu, mut bi, mut by, mut owner) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &u in chunk {
                for &k in &by_user[u] {
                    bu.push(u);
                    bi.push(split.train[k].target.index);
                    by.push(1.0);
                    owner.push(k);
                    for &j in &negatives[k] {
                        bu.push(u);
                        bi.push(j);
                        by.push(0.0);
                        owner.push(k);
                    }
                }
            }
            let labels = Rc::new(by);
            let (loss, grads, logits) = model.loss_and_grads(&model.store, inputs, Rc::new(bu), Rc::new(bi), labels.clone())?;
            if !loss.is_finite() {
                return Err(FusionError::NonFiniteLoss { loss, epoch, batch });
            }
            for ((z, y), &k) in logits.iter().zip(labels.iter()).zip(&owner) {
                sample_loss[k] += bce(*z, *y);
            }
            n_samples += labels.len();
            if !cfg.freeze {
                adam_step(&mut model.store, &grads, &mut state)?;
            }
        }
        let loss = sample_loss.iter().sum::<f64>() / n_samples.max(1) as f64;
        let val_hr10 = if split.val.is_empty() {
            0.0
        } else {
            hit_rate(&model.scorer(inputs)?, &split.train, &split.val, 10)
        };
        log::info!("epoch {epoch}: loss {loss:.5} val HR@10 {val_hr10:.4}");
        history.push(EpochRecord { epoch, loss, val_hr10 });
        if val_hr10 > best.0 || split.val.is_empty() {
            best = (val_hr10, epoch, model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = best.1;
    model.store = best.2;
    Ok(TrainOutcome { history, best_epoch })
}
