//! Three-phase training schedule: learning-rate and loss-weight schedules,
//! early stopping, and the phase runner.

pub mod optim;
pub mod pretrain;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Phase;

pub use train::{run_phase, EpochRecord, PhaseOutcome, PhaseReport, TrainOptions};

/// Per-phase hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl PhasePlan {
    pub fn new(max_epochs: usize, lr: f64, weight_decay: f64) -> Self {
        PhasePlan {
            max_epochs,
            lr,
            weight_decay,
        }
    }

    pub fn validate(&self, phase: Phase) -> Result<()> {
        let min = if phase == Phase::P3 { 2 } else { 1 };
        if self.max_epochs < min {
            return Err(Error::Config(format!(
                "{phase} needs at least {min} epoch(s), got {}",
                self.max_epochs
            )));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "{phase} learning rate must be positive and weight decay non-negative"
            )));
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to 1 over `warmup_fraction·total_steps`, then
/// linear decay back to 0 at `total_steps`.
pub fn lr_multiplier(step: usize, total_steps: usize, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("learning-rate schedule needs at least one step".into()));
    }
    if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(Error::Config(format!(
            "warmup fraction {warmup_fraction} outside (0, 1)"
        )));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} beyond schedule end {total_steps}"
        )));
    }
    let t = total_steps as f64;
    let s = step as f64;
    let mut warm = warmup_fraction * t;
    // snap float noise so the peak lands exactly on an integral warm-up step
    if (warm - warm.round()).abs() < 1e-9 {
        warm = warm.round();
    }
    Ok(if s < warm { s / warm } else { (t - s) / (t - warm) })
}

/// `(w_asr, w_ser)` for a 1-based P3 epoch: equal weights in the first
/// epoch, ASR weight falling linearly to zero by the last.
pub fn asr_loss_weight(epoch: usize, total_epochs: usize) -> Result<(f64, f64)> {
    if total_epochs < 2 {
        return Err(Error::Config(format!(
            "loss-weight schedule needs at least 2 epochs, got {total_epochs}"
        )));
    }
    if epoch == 0 || epoch > total_epochs {
        return Err(Error::InvalidInput(format!("epoch {epoch} outside 1..={total_epochs}")));
    }
    let w_asr = 0.5 * (total_epochs - epoch) as f64 / (total_epochs - 1) as f64;
    Ok((w_asr, 1.0 - w_asr))
}

pub fn mix_losses(asr: f64, ser: f64, weights: (f64, f64)) -> f64 {
    weights.0 * asr + weights.1 * ser
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based stopping on a validation loss that should decrease.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: Option<f64>,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub epochs_seen: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
            epochs_seen: 0,
        }
    }

    /// Records one epoch's loss. Returns whether this epoch is the new best
    /// and whether training should stop.
    pub fn observe(&mut self, loss: f64) -> (bool, StopDecision) {
        self.epochs_seen += 1;
        let improved = self.best.is_none_or(|b| loss < b);
        if improved {
            self.best = Some(loss);
            self.best_epoch = self.epochs_seen;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        let decision = if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_are_exact() {
        for t in [1usize, 7, 10, 100, 1000, 12345] {
            assert_eq!(lr_multiplier(0, t, 0.1).unwrap(), 0.0);
            assert_eq!(lr_multiplier(t, t, 0.1).unwrap(), 0.0);
        }
        for t in [10usize, 100, 1000, 2000] {
            assert_eq!(lr_multiplier(t / 10, t, 0.1).unwrap(), 1.0);
        }
        assert_eq!(lr_multiplier(550, 1000, 0.1).unwrap(), 0.5);
        assert!(matches!(lr_multiplier(0, 0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_is_continuous_with_one_peak() {
        let t = 997;
        let v: Vec<f64> = (0..=t).map(|s| lr_multiplier(s, t, 0.1).unwrap()).collect();
        let peak = v.iter().cloned().fold(0.0, f64::max);
        let at = v.iter().position(|&x| x == peak).unwrap();
        assert!(v[..at].windows(2).all(|w| w[0] < w[1]));
        assert!(v[at..].windows(2).all(|w| w[0] > w[1]));
        assert!(v
            .windows(2)
            .all(|w| (w[0] - w[1]).abs() <= 1.0 / (0.1 * t as f64) + 1e-12));
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn loss_weights_follow_the_ramp() {
        assert_eq!(asr_loss_weight(1, 20).unwrap(), (0.5, 0.5));
        assert_eq!(asr_loss_weight(20, 20).unwrap(), (0.0, 1.0));
        assert_eq!(asr_loss_weight(11, 21).unwrap(), (0.25, 0.75));
        for e in 1..=9 {
            let (a, s) = asr_loss_weight(e, 9).unwrap();
            assert_eq!(a + s, 1.0);
        }
        assert!(matches!(asr_loss_weight(1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn mixing_is_a_weighted_sum() {
        assert_eq!(mix_losses(2.0, 4.0, (0.5, 0.5)), 3.0);
        assert_eq!(mix_losses(2.0, 4.0, (0.0, 1.0)), 4.0);
    }

    #[test]
    fn patience_two_stops_two_epochs_after_best() {
        let mut es = EarlyStop::new(2);
        let seq = [1.0, 0.9, 0.95, 0.97];
        let decisions: Vec<_> = seq.iter().map(|&l| es.observe(l).1).collect();
        assert_eq!(
            decisions,
            [
                StopDecision::Continue,
                StopDecision::Continue,
                StopDecision::Continue,
                StopDecision::Stop
            ]
        );
        assert_eq!(es.best_epoch, 2);
        assert_eq!(es.epochs_seen - es.best_epoch + 1, es.patience + 1);
    }
}
