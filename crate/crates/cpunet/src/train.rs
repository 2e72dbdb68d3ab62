//! SGD training loop: momentum + decoupled weight decay, cosine-annealed
//! learning rate, periodic validation, and best-checkpoint tracking.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CpError, Result};
use crate::loss::{iou_dice_metrics, mask_to_bool, threshold_mask, total_loss, LossBreakdown};
use crate::network::Network;
use crate::synth::Sample;
use crate::tensor::{ParamStore, Tape};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on the validation split every this many steps.
    pub eval_every: usize,
    /// Hard cap on optimizer steps (0 = no cap); the cosine schedule still
    /// spans the full epoch budget.
    pub max_steps: usize,
    pub val_fraction: f64,
    /// Added to logged step numbers when resuming from a checkpoint.
    pub step_offset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            momentum: 0.9,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 50,
            seed: 42,
            eval_every: 25,
            max_steps: 0,
            val_fraction: 0.2,
            step_offset: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(CpError::Config("lr0 must be >= 0 and momentum in [0,1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CpError::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CpError::Config("val_fraction must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Half-cosine decay from lr0 at step 0 to 0 at step == total.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> Result<f64> {
    if total == 0 || step > total {
        return Err(CpError::Config(format!(
            "cosine_lr: step {step} outside schedule of {total} steps"
        )));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

/// One SGD update over every parameter: g = grad + wd*v, buf = mu*buf + g,
/// v -= lr*buf. Gradients are zeroed afterwards.
pub fn sgd_step(store: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for (_, p) in store.iter_mut() {
        for i in 0..p.values.len() {
            let g = p.grad[i] + weight_decay * p.values[i];
            if !g.is_finite() {
                return Err(CpError::Numeric(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
            p.momentum[i] = momentum * p.momentum[i] + g;
            p.values[i] -= lr * p.momentum[i];
        }
    }
    store.zero_grads();
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: usize,
    pub last: Option<LossBreakdown>,
    pub best_val_dice: f64,
    pub best_val_iou: f64,
    /// Step at which the best validation Dice was reached.
    pub best_step: usize,
    pub final_train_dice: f64,
}

/// Accumulates gradients for one batch and returns the averaged loss
/// breakdown. The whole batch shares one tape so each parameter is
/// materialized once per step, not once per sample.
fn batch_grads(
    net: &Network,
    store: &mut ParamStore,
    batch: &[&Sample],
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let scale = 1.0 / batch.len() as f64;
    let mut acc = LossBreakdown {
        bce: 0.0,
        dice: 0.0,
        kl: 0.0,
        total: 0.0,
    };
    let mut tape = Tape::new();
    let mut total = None;
    for s in batch {
        let out = net.forward(&mut tape, store, &s.image, Some((&s.image, &s.mask)), rng)?;
        let (loss, bd) = total_loss(&mut tape, out.probs, &s.mask, out.kl)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
        acc.bce += scale * bd.bce;
        acc.dice += scale * bd.dice;
        acc.kl += scale * bd.kl;
        acc.total += scale * bd.total;
    }
    let scaled = tape.scale(total.expect("non-empty batch"), scale);
    tape.backward(scaled)?;
    tape.write_param_grads(store);
    Ok(acc)
}

/// Mean IoU / Dice of thresholded predictions over a sample set.
pub fn evaluate(
    net: &Network,
    store: &ParamStore,
    samples: &[Sample],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(CpError::Data("evaluate: no samples".into()));
    }
    let mut iou_sum = 0.0;
    let mut dice_sum = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, store, &s.image, None, rng)?;
        let pred = threshold_mask(tape.value(out.probs));
        let (iou, dice) = iou_dice_metrics(&pred, &mask_to_bool(&s.mask));
        iou_sum += iou;
        dice_sum += dice;
    }
    let n = samples.len() as f64;
    Ok((iou_sum / n, dice_sum / n))
}

/// Runs the full training loop. Log lines go to `log` (tab-separated,
/// `step lr bce dice kl total` plus `eval step iou dice` rows). Returns the
/// report and the best-validation-Dice parameter snapshot.
pub fn train(
    net: &Network,
    store: &mut ParamStore,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(TrainReport, ParamStore)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CpError::Data("train: empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut report = TrainReport::default();
    let mut best_snapshot = store.clone();
    report.best_val_dice = -1.0;

    let mut step = 0usize;
    'outer: for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.lr0, step, total_steps)?;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let bd = batch_grads(net, store, &batch, &mut rng)?;
            sgd_step(store, lr, cfg.momentum, cfg.weight_decay)?;
            step += 1;
            report.steps = step;
            report.last = Some(bd);
            let logged = step + cfg.step_offset;
            writeln!(
                log,
                "step\t{logged}\t{lr:.8}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                bd.bce, bd.dice, bd.kl, bd.total
            )
            .map_err(|e| CpError::Io {
                path: "train log".into(),
                source: e,
            })?;

            let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            let last = step == total_steps || (cfg.max_steps > 0 && step >= cfg.max_steps);
            if (due || last) && !val_set.is_empty() {
                let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
                let (iou, dice) = evaluate(net, store, val_set, &mut eval_rng)?;
                writeln!(log, "eval\t{logged}\t{iou:.6}\t{dice:.6}").map_err(|e| CpError::Io {
                    path: "train log".into(),
                    source: e,
                })?;
                if dice > report.best_val_dice {
                    report.best_val_dice = dice;
                    report.best_val_iou = iou;
                    report.best_step = logged;
                    best_snapshot = store.clone();
                }
            }
            if last && (cfg.max_steps > 0 && step >= cfg.max_steps) {
                break 'outer;
            }
        }
    }

    if val_set.is_empty() {
        // nothing evaluated: the final state is the best we know of
        report.best_step = step + cfg.step_offset;
        best_snapshot = store.clone();
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (_, train_dice) = evaluate(net, store, train_set, &mut eval_rng)?;
    report.final_train_dice = train_dice;
    Ok((report, best_snapshot))
}

/// Deterministic train/validation split (tail fraction goes to validation).
pub fn split_dataset(samples: Vec<Sample>, val_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n_val = ((samples.len() as f64) * val_fraction).floor() as usize;
    let n_train = samples.len() - n_val;
    let mut train = samples;
    let val = train.split_off(n_train);
    (train, val)
}
