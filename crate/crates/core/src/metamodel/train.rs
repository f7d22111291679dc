use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, ArchitectureSpec, Checkpoint, Network, NormStats, TrainProvenance};
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::r2_mae;
use crate::pattern::{write_atomic, Pattern};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Rate used after `lr_drop_epoch` epochs.
    pub lr_late: f64,
    pub lr_drop_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            lr: 0.01,
            lr_late: 0.001,
            lr_drop_epoch: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |f: &str, r: &str| Err(Error::config(f, r));
        if self.epochs == 0 {
            return cfg("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return cfg("batch_size", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_late >= 0.0 && self.lr_late.is_finite()) {
            return cfg("lr", "must be positive and finite");
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return cfg(name, "must lie in (0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return cfg("adam_eps", "must be positive");
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_drop_epoch {
            self.lr
        } else {
            self.lr_late
        }
    }
}

/// Losses are in standardized label units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Row-major 0/1 inputs for a list of patterns, laid end to end.
pub fn pattern_inputs<'a>(patterns: impl IntoIterator<Item = &'a Pattern>) -> Vec<f64> {
    patterns.into_iter().flat_map(|p| p.to_f64()).collect()
}

/// One training-mode pass and Adam update; returns the loss before the update.
pub fn backward_and_step(net: &mut Network, adam: &mut Adam, inputs: &[f64], labels: &[f64], lr: f64) -> Result<f64> {
    let mut grad = vec![0.0; net.n_params()];
    let (loss, stats) = net.loss_and_grad(inputs, labels, Some(&mut grad))?;
    if !loss.is_finite() {
        return Err(Error::Divergence { param: "loss".into() });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            param: net.param_name(i).to_string(),
        });
    }
    net.update_running_stats(&stats);
    adam.step(net.params_mut(), &grad, lr);
    Ok(loss)
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
}

/// Trains from `init` (or a seeded initialization) for the full schedule and
/// returns the parameters of the epoch with the lowest validation MSE.
///
/// Labels are standardized with the statistics of `train`; a fine-tuned
/// model gets fresh statistics and a fresh optimizer.
pub fn train(
    arch: &ArchitectureSpec,
    train: &[(Pattern, f64)],
    val: &[(Pattern, f64)],
    config: &TrainConfig,
    init: Option<&Checkpoint>,
    mut provenance: TrainProvenance,
) -> Result<(Checkpoint, Vec<HistoryRow>)> {
    config.validate()?;
    arch.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }
    let mut net = match init {
        Some(ck) => {
            if ck.network.arch() != arch {
                return Err(Error::Architecture(format!(
                    "initial checkpoint is `{}`, requested `{}`",
                    ck.network.arch().name,
                    arch.name
                )));
            }
            let mut ids: BTreeSet<String> = ck.provenance.train_ids.iter().cloned().collect();
            ids.extend(provenance.train_ids.drain(..));
            provenance.train_ids = ids.into_iter().collect();
            ck.network.clone()
        }
        None => Network::init(arch, config.seed ^ 0x1b873593)?,
    };
    let labels: Vec<f64> = train.iter().map(|s| s.1).collect();
    let norm = NormStats::of(&labels);
    let y: Vec<f64> = labels.iter().map(|&v| norm.normalize(v)).collect();
    let x = pattern_inputs(train.iter().map(|s| &s.0));
    let vx = pattern_inputs(val.iter().map(|s| &s.0));
    let vy: Vec<f64> = val.iter().map(|s| norm.normalize(s.1)).collect();
    let len = net.arch().input_size * net.arch().input_size;

    let mut adam = Adam::new(net.n_params(), config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Network)> = None;
    let mut bx = Vec::new();
    let mut by = Vec::new();
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            for &i in batch {
                bx.extend_from_slice(&x[i * len..(i + 1) * len]);
                by.push(y[i]);
            }
            total += backward_and_step(&mut net, &mut adam, &bx, &by, lr)? * batch.len() as f64;
        }
        let train_mse = total / train.len() as f64;
        let val_mse = mse(&net.predict(&vx, val.len())?, &vy);
        log::debug!("epoch {epoch}: train {train_mse:.4e} val {val_mse:.4e} lr {lr}");
        history.push(HistoryRow {
            epoch,
            train_mse,
            val_mse,
            lr,
        });
        if best.as_ref().map_or(true, |b| val_mse < b.0) {
            best = Some((val_mse, epoch, net.clone()));
        }
    }
    let (_, epoch, network) = best.expect("at least one epoch");
    provenance.epoch = epoch;
    provenance.seed = config.seed;
    Ok((
        Checkpoint {
            network,
            norm,
            provenance,
            optimizer: None,
        },
        history,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub r2: f64,
    pub mae: f64,
    pub predictions: Vec<f64>,
    /// Mean over test patterns of max − min prediction across the four
    /// lattice rotations.
    pub rotation_spread: f64,
}

/// `(r2, mae, predictions)` on labelled samples.
pub fn evaluate_samples(model: &Checkpoint, samples: &[(Pattern, f64)]) -> Result<(f64, f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let x = pattern_inputs(samples.iter().map(|s| &s.0));
    let pred = model.predict(&x, samples.len())?;
    let y: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (r2, mae) = r2_mae(&y, &pred)?;
    Ok((r2, mae, pred))
}

/// Scores `model` on a test manifest whose bitmaps live under `base`.
/// Fails with a leakage error when an entry is not tagged test or was
/// used to fit the model.
pub fn evaluate(model: &Checkpoint, test: &DatasetManifest, base: &Path) -> Result<Evaluation> {
    if let Some(e) = test.entries.iter().find(|e| e.split != Split::Test) {
        return Err(Error::Leakage(format!("`{}` is tagged {}", e.pattern_id, e.split)));
    }
    let seen: BTreeSet<&str> = model.provenance.train_ids.iter().map(String::as_str).collect();
    if let Some(e) = test.entries.iter().find(|e| seen.contains(e.pattern_id.as_str())) {
        return Err(Error::Leakage(format!("`{}` was used for training", e.pattern_id)));
    }
    let samples = test.load_samples(base)?;
    let (r2, mae, predictions) = evaluate_samples(model, &samples)?;

    let mut bases: Vec<&Pattern> = Vec::new();
    for (e, s) in test.entries.iter().zip(&samples) {
        if e.rotation == 0 {
            bases.push(&s.0);
        }
    }
    let rotated: Vec<Pattern> = bases.iter().flat_map(|p| (0..4).map(|k| p.rotated(k))).collect();
    let rotation_spread = if rotated.is_empty() {
        0.0
    } else {
        let pred = model.predict(&pattern_inputs(&rotated), rotated.len())?;
        let spreads: Vec<f64> = pred
            .chunks_exact(4)
            .map(|c| c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min))
            .collect();
        spreads.iter().sum::<f64>() / spreads.len() as f64
    };
    Ok(Evaluation {
        r2,
        mae,
        predictions,
        rotation_spread,
    })
}
