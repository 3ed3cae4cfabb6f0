//! Training loop: Adam, the per-batch gradient step with center EMA,
//! plateau learning-rate decay, early stopping, and ablation construction.
//!
//! Per-sample gradients are accumulated over fixed chunks and merged in
//! chunk order (see [`crate::par`]), so a fixed seed reproduces the
//! parameter trajectory bit for bit, with or without the `parallel`
//! feature.

use crate::dataio::{Dataset, TrialTensor};
use crate::error::{Error, Result};
use crate::mat::{Mat, Scalar};
use crate::model::{
    self, eval_loss_and_accuracy, leaf_model, trial_loss, AblationFlags, ModelConfig, ModelParams,
};
use crate::par;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Optimizer and loop hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub folds: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    /// Global-norm gradient clip, off by default.
    pub clip: Option<f64>,
    /// Stop as soon as validation accuracy reaches this level; used by the
    /// acceptance harness where the target is the criterion itself.
    pub target_val_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 64,
            epochs: 50,
            folds: 5,
            early_stop_patience: 10,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_lr: 1e-5,
            seed: 7,
            clip: None,
            target_val_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.min_lr < 0.0 {
            return Err(Error::invalid("learning rates must be nonnegative"));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be positive"));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) {
            return Err(Error::invalid(format!(
                "plateau factor {} must lie in (0, 1)",
                self.plateau_factor
            )));
        }
        if self.plateau_factor <= 0.0 {
            return Err(Error::invalid("plateau factor must be positive"));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment slots per tensor, in canonical order.
pub struct AdamState<F> {
    step: u64,
    slots: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let mut slots = Vec::new();
        params.for_each_tensor(|_, m| slots.push((vec![F::zero(); m.data.len()], vec![F::zero(); m.data.len()])));
        AdamState { step: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update from averaged gradients (canonical tensor order).
    pub fn update(&mut self, params: &mut ModelParams<F>, grads: &[Vec<F>], lr: f64) {
        self.step += 1;
        let b1 = F::c(BETA1);
        let b2 = F::c(BETA2);
        let eps = F::c(ADAM_EPS);
        let bc1 = F::c(1.0 - BETA1.powi(self.step as i32));
        let bc2 = F::c(1.0 - BETA2.powi(self.step as i32));
        let lr = F::c(lr);
        let one = F::one();
        let mut ti = 0;
        params.for_each_tensor_mut(|_, m| {
            let (mom, vel) = &mut self.slots[ti];
            let g = &grads[ti];
            for i in 0..m.data.len() {
                mom[i] = b1 * mom[i] + (one - b1) * g[i];
                vel[i] = b2 * vel[i] + (one - b2) * g[i] * g[i];
                let mhat = mom[i] / bc1;
                let vhat = vel[i] / bc2;
                m.data[i] = m.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            ti += 1;
        });
    }
}

/// Losses reported by one optimizer step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub focal: f64,
    pub domain: f64,
    pub center: f64,
    pub total: f64,
}

struct BatchAccum<F> {
    grads: Vec<Vec<F>>,
    focal: f64,
    domain: f64,
    center: f64,
    total: f64,
    /// fused feature and tone per sample, batch order, for the center EMA
    feats: Vec<(u8, Vec<F>)>,
}

fn zero_grads<F: Scalar>(params: &ModelParams<F>) -> Vec<Vec<F>> {
    let mut g = Vec::new();
    params.for_each_tensor(|_, m| g.push(vec![F::zero(); m.data.len()]));
    g
}

fn sample_seed(step_seed: u64, index: usize) -> u64 {
    // splitmix64 of the pair keeps per-sample dropout independent of
    // scheduling
    let mut z = step_seed ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Run forward/backward on one mini-batch and apply the Adam update plus
/// the center EMA. Returns the mean loss components.
pub fn train_step<F: Scalar>(
    params: &mut ModelParams<F>,
    adam: &mut AdamState<F>,
    mcfg: &ModelConfig,
    batch: &[&TrialTensor],
    lr: f64,
    clip: Option<f64>,
    step_seed: u64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let indexed: Vec<(usize, &TrialTensor)> = batch.iter().copied().enumerate().collect();
    let snapshot: &ModelParams<F> = params;
    let merged = par::chunk_map_reduce(
        &indexed,
        par::CHUNK,
        |chunk| -> Result<BatchAccum<F>> {
            let mut acc = BatchAccum {
                grads: zero_grads(snapshot),
                focal: 0.0,
                domain: 0.0,
                center: 0.0,
                total: 0.0,
                feats: Vec::with_capacity(chunk.len()),
            };
            for &(idx, trial) in chunk {
                let mut g = crate::autodiff::Graph::<F>::new();
                let ids = leaf_model(&mut g, snapshot);
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(step_seed, idx));
                let dropout = (mcfg.dropout > 0.0).then_some(&mut rng);
                let (out, losses) = trial_loss(&mut g, &ids, snapshot, mcfg, trial, dropout)?;
                let total = g.scalar(losses.total).to_f64_lossy();
                if !total.is_finite() {
                    return Err(non_finite_diagnostics(&g, &ids, snapshot, total));
                }
                g.backward(losses.total)?;
                acc.total += total;
                acc.focal += g.scalar(losses.focal).to_f64_lossy();
                if let Some(d) = losses.domain {
                    acc.domain += g.scalar(d).to_f64_lossy();
                }
                if let Some(c) = losses.center {
                    acc.center += g.scalar(c).to_f64_lossy();
                }
                acc.feats.push((trial.tone, g.data(out.fused).to_vec()));
                for (slot, &id) in acc.grads.iter_mut().zip(ids.flat.iter()) {
                    let grad = g.grad(id).expect("gradient after backward");
                    for (s, &v) in slot.iter_mut().zip(grad) {
                        *s += v;
                    }
                }
            }
            Ok(acc)
        },
        |a, b| {
            let mut a = a?;
            let b = b?;
            for (x, y) in a.grads.iter_mut().zip(b.grads) {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += v;
                }
            }
            a.focal += b.focal;
            a.domain += b.domain;
            a.center += b.center;
            a.total += b.total;
            a.feats.extend(b.feats);
            Ok(a)
        },
    )
    .expect("non-empty batch");
    let mut acc = merged?;

    let n = F::from_usize(batch.len()).unwrap();
    for slot in acc.grads.iter_mut() {
        for v in slot.iter_mut() {
            *v /= n;
        }
    }
    if let Some(max_norm) = clip {
        let mut sq = 0.0f64;
        for slot in &acc.grads {
            for &v in slot {
                let x = v.to_f64_lossy();
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            let scale = F::c(max_norm / norm);
            for slot in acc.grads.iter_mut() {
                for v in slot.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    adam.update(params, &acc.grads, lr);
    ema_update_centers(params, mcfg.center_ema, &acc.feats);

    let bn = batch.len() as f64;
    Ok(StepStats {
        focal: acc.focal / bn,
        domain: acc.domain / bn,
        center: acc.center / bn,
        total: acc.total / bn,
    })
}

fn non_finite_diagnostics<F: Scalar>(
    g: &crate::autodiff::Graph<F>,
    ids: &model::ModelIds,
    params: &ModelParams<F>,
    total: f64,
) -> Error {
    // layer-wise data norms as the abort diagnostic
    let mut lines = Vec::new();
    let mut ti = 0;
    params.for_each_tensor(|path, _| {
        let d = g.data(ids.flat[ti]);
        let norm: f64 = d.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        lines.push(format!("{path}: |w| = {norm:.3e}"));
        ti += 1;
    });
    Error::NonFinite {
        context: "train_step".into(),
        detail: format!("loss = {total}; {}", lines.join(", ")),
    }
}

/// EMA update of the per-class centers from the batch's fused features.
/// Classes absent from the batch keep their centers.
pub fn ema_update_centers<F: Scalar>(
    params: &mut ModelParams<F>,
    rate: f64,
    feats: &[(u8, Vec<F>)],
) {
    let k = params.centers.rows;
    let d = params.centers.cols;
    let mut sums = vec![vec![F::zero(); d]; k];
    let mut counts = vec![0usize; k];
    for (tone, f) in feats {
        let c = (*tone - 1) as usize;
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(f) {
            *s += v;
        }
    }
    let rho = F::c(rate);
    let one = F::one();
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let cn = F::from_usize(counts[c]).unwrap();
        let row = params.centers.row_mut(c);
        for (j, slot) in row.iter_mut().enumerate() {
            let mean = sums[c][j] / cn;
            *slot = (one - rho) * *slot + rho * mean;
        }
    }
}

/// ReduceLROnPlateau: halve the rate after `patience + 1` consecutive
/// epochs without improvement, floored at `min_lr`.
pub struct PlateauScheduler {
    best: f64,
    stagnant: usize,
    factor: f64,
    patience: usize,
    min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            best: f64::INFINITY,
            stagnant: 0,
            factor,
            patience,
            min_lr,
        }
    }

    /// Feed one epoch's monitored value; returns the updated rate.
    pub fn step(&mut self, value: f64, lr: f64) -> f64 {
        if value < self.best {
            self.best = value;
            self.stagnant = 0;
            lr
        } else {
            self.stagnant += 1;
            if self.stagnant > self.patience {
                self.stagnant = 0;
                (lr * self.factor).max(self.min_lr)
            } else {
                lr
            }
        }
    }
}

/// One history row per epoch.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Fit outcome: parameters from the best validation epoch plus the
/// history.
pub struct FitResult<F> {
    pub params: ModelParams<F>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn check_trials_match(cfg: &ModelConfig, trials: &[&TrialTensor]) -> Result<()> {
    let d = &cfg.dims;
    for t in trials {
        if t.eeg.shape() != (2 * d.c_e, d.t_prime) || t.emg.shape() != (2 * d.c_m, d.t_prime) {
            return Err(Error::invalid(format!(
                "trial shape {:?}/{:?} does not match the model ({:?}/{:?})",
                t.eeg.shape(),
                t.emg.shape(),
                (2 * d.c_e, d.t_prime),
                (2 * d.c_m, d.t_prime)
            )));
        }
        if t.subject as usize > d.n_subjects {
            return Err(Error::invalid(format!(
                "trial subject {} exceeds the configured subject count {}",
                t.subject, d.n_subjects
            )));
        }
    }
    Ok(())
}

/// Train on `train`, monitor `val` each epoch, and return the parameters
/// of the best validation epoch.
pub fn fit<F: Scalar>(
    train: &[&TrialTensor],
    val: &[&TrialTensor],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<FitResult<F>> {
    tcfg.validate()?;
    mcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and validation splits must be non-empty"));
    }
    check_trials_match(mcfg, train)?;
    check_trials_match(mcfg, val)?;

    let mut params: ModelParams<F> = ModelParams::init(mcfg, tcfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0x5155_4646));
    let mut scheduler =
        PlateauScheduler::new(tcfg.plateau_factor, tcfg.plateau_patience, tcfg.min_lr);
    let mut lr = tcfg.lr;
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut stagnant = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(tcfg.batch).enumerate() {
            let batch: Vec<&TrialTensor> = chunk.iter().map(|&i| train[i]).collect();
            let step_seed = tcfg
                .seed
                .wrapping_mul(0x100000001B3)
                .wrapping_add((epoch as u64) << 32)
                .wrapping_add(step as u64);
            let stats = train_step(&mut params, &mut adam, mcfg, &batch, lr, tcfg.clip, step_seed)?;
            train_loss += stats.total;
            steps += 1;
        }
        train_loss /= steps.max(1) as f64;

        let (val_loss, val_acc) = eval_loss_and_accuracy(&params, mcfg, val)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        if let Some(target) = tcfg.target_val_acc {
            if val_acc >= target {
                // keep the epoch that reached the target, even if an
                // earlier epoch had lower loss
                best_params = params.clone();
                best_epoch = epoch;
                break;
            }
        }
        if stagnant > tcfg.early_stop_patience {
            break;
        }
        lr = scheduler.step(val_loss, lr);
    }

    Ok(FitResult {
        params: best_params,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Resolve ablation flags against a base configuration.
pub fn build_ablation(base: &ModelConfig, flags: AblationFlags) -> Result<ModelConfig> {
    flags.validate()?;
    let cfg = ModelConfig {
        ablation: flags,
        ..*base
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Borrow the trials of a dataset at the given indices.
pub fn gather<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<&'a TrialTensor> {
    idx.iter().map(|&i| &ds.trials[i]).collect()
}

/// Train a linear softmax probe that predicts the subject from fixed
/// feature vectors; returns its held-out accuracy. Used to measure how
/// much subject information survives in the fused features.
pub fn subject_probe_accuracy(
    features: &[Vec<f64>],
    subjects: &[u16],
    n_subjects: usize,
    seed: u64,
) -> Result<f64> {
    if features.len() != subjects.len() || features.is_empty() {
        return Err(Error::invalid("probe needs matching, non-empty features and labels"));
    }
    let dim = features[0].len();
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let split = (features.len() * 4) / 5;
    let (train_idx, test_idx) = order.split_at(split);
    if test_idx.is_empty() {
        return Err(Error::invalid("probe test split is empty"));
    }

    let mut w = Mat::<f64>::zeros(dim, n_subjects);
    let mut b = Mat::<f64>::zeros(1, n_subjects);
    // plain gradient descent is plenty for a convex probe
    let lr = 0.5;
    for _ in 0..200 {
        let mut gw = vec![0.0; dim * n_subjects];
        let mut gb = vec![0.0; n_subjects];
        for &i in train_idx {
            let f = &features[i];
            let y = (subjects[i] - 1) as usize;
            let mut logits = vec![0.0f64; n_subjects];
            for (k, l) in logits.iter_mut().enumerate() {
                *l = b.data[k] + f.iter().zip(0..dim).map(|(&v, d)| v * w.data[d * n_subjects + k]).sum::<f64>();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for k in 0..n_subjects {
                let p = exps[k] / z;
                let delta = p - if k == y { 1.0 } else { 0.0 };
                gb[k] += delta;
                for d in 0..dim {
                    gw[d * n_subjects + k] += delta * f[d];
                }
            }
        }
        let n = train_idx.len() as f64;
        for (wd, g) in w.data.iter_mut().zip(gw) {
            *wd -= lr * g / n;
        }
        for (bd, g) in b.data.iter_mut().zip(gb) {
            *bd -= lr * g / n;
        }
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let f = &features[i];
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..n_subjects {
            let v = b.data[k]
                + f.iter()
                    .zip(0..dim)
                    .map(|(&x, d)| x * w.data[d * n_subjects + k])
                    .sum::<f64>();
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if best as u16 + 1 == subjects[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}
