//! Scheduled-sampling curriculum for the conditioning input.
//!
//! During training the recurrent layer receives, at each step, either the
//! ground-truth activities of the previous frame or the model's own
//! previous predictions. The probability of picking ground truth, `p_tf`,
//! starts at `p_max` and decays with the number of weight updates towards
//! `p_min`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    /// Slope of the decay.
    pub gamma: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Batches per epoch. Normally derived from the training split size.
    pub batches_per_epoch: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            gamma: 1.0 / 12.0,
            p_min: 0.05,
            p_max: 0.9,
            batches_per_epoch: 1,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        let ok_range = 0.0 <= self.p_min && self.p_min <= self.p_max && self.p_max <= 1.0;
        if !ok_range {
            return Err(Error::Config(format!(
                "schedule needs 0 <= p_min <= p_max <= 1, got p_min={} p_max={}",
                self.p_min, self.p_max
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("schedule gamma must be > 0, got {}", self.gamma)));
        }
        if self.batches_per_epoch == 0 {
            return Err(Error::Config("batches_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Probability of feeding ground truth after `update` weight updates.
pub fn p_tf(update: u64, params: &ScheduleParams) -> f64 {
    let beta = -(update as f64) * params.gamma / params.batches_per_epoch as f64;
    let decayed = 2.0 / (1.0 + beta.exp()) - 1.0;
    // Same as min(p_max, 1 - min(1 - p_min, decayed)) without the
    // rounding of 1 - (1 - p_min).
    params.p_min.max(1.0 - decayed).min(params.p_max)
}

/// `(update, p_tf)` for `update = 0..=n_updates`.
pub fn schedule_curve(params: &ScheduleParams, n_updates: u64) -> Vec<(u64, f64)> {
    (0..=n_updates).map(|i| (i, p_tf(i, params))).collect()
}

/// Two-column text rendering of a curve, one `update p_tf` pair per line.
pub fn format_curve(curve: &[(u64, f64)]) -> String {
    let mut out = String::with_capacity(curve.len() * 24);
    for (i, p) in curve {
        out.push_str(&format!("{i} {p}\n"));
    }
    out
}

/// 1 where `v >= threshold`, else 0.
pub fn binarize<T: Real>(values: &[T], threshold: f64) -> Vec<T> {
    let th = T::lit(threshold);
    values
        .iter()
        .map(|&v| if v >= th { T::one() } else { T::zero() })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMode {
    Scheduled,
    AlwaysTruth,
    AlwaysPred,
}

/// Chooses, row by row, between ground truth and the previous prediction.
///
/// One Bernoulli draw is made per (sequence, time step). The probability is
/// fixed for the duration of a weight update and refreshed by
/// [`ActivitySelector::advance`].
#[derive(Debug, Clone)]
pub struct ActivitySelector {
    params: ScheduleParams,
    mode: SelectorMode,
    binarize: bool,
    updates: u64,
    p_current: f64,
    rng: ChaCha8Rng,
    truth_draws: u64,
    total_draws: u64,
}

impl ActivitySelector {
    pub fn new(params: ScheduleParams, mode: SelectorMode, binarize: bool, seed: u64) -> Self {
        ActivitySelector {
            params,
            mode,
            binarize,
            updates: 0,
            p_current: p_tf(0, &params),
            rng: ChaCha8Rng::seed_from_u64(seed),
            truth_draws: 0,
            total_draws: 0,
        }
    }

    pub fn mode(&self) -> SelectorMode {
        self.mode
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Weight updates seen so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Resumes the counter, e.g. after loading a checkpoint.
    pub fn set_updates(&mut self, updates: u64) {
        self.updates = updates;
        self.p_current = p_tf(updates, &self.params);
    }

    /// Probability in effect for the current weight update.
    pub fn p_tf(&self) -> f64 {
        match self.mode {
            SelectorMode::Scheduled => self.p_current,
            SelectorMode::AlwaysTruth => 1.0,
            SelectorMode::AlwaysPred => 0.0,
        }
    }

    /// Marks one optimizer step as done.
    pub fn advance(&mut self) {
        self.updates += 1;
        self.p_current = p_tf(self.updates, &self.params);
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// `(ground-truth picks, total draws)` since construction.
    pub fn draw_counts(&self) -> (u64, u64) {
        (self.truth_draws, self.total_draws)
    }

    /// Builds `y'` for one time step from `[B × C]` truth and prediction rows.
    pub fn select<T: Real>(&mut self, y_true: &[T], y_pred: &[T], classes: usize) -> Result<Vec<T>> {
        if y_true.len() != y_pred.len() || classes == 0 || !y_true.len().is_multiple_of(classes) {
            return Err(Error::Tensor(crate::tensor::TensorError::shape(
                "select_activity",
                &[y_true.len()],
                &[y_pred.len()],
            )));
        }
        let pred = if self.binarize {
            binarize(y_pred, 0.5)
        } else {
            y_pred.to_vec()
        };
        let mut out = Vec::with_capacity(y_true.len());
        for (truth_row, pred_row) in y_true.chunks(classes).zip(pred.chunks(classes)) {
            let use_truth = match self.mode {
                SelectorMode::AlwaysTruth => true,
                SelectorMode::AlwaysPred => false,
                SelectorMode::Scheduled => self.rng.random::<f64>() < self.p_current,
            };
            self.total_draws += 1;
            if use_truth {
                self.truth_draws += 1;
                out.extend_from_slice(truth_row);
            } else {
                out.extend_from_slice(pred_row);
            }
        }
        Ok(out)
    }
}
