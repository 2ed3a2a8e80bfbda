//! Trade-off weights between the three training losses and the rate-based
//! regularizer that adapts them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_LOSSES: usize = 3;

/// Raw logits λ of the three loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaParams {
    pub logits: [f64; NUM_LOSSES],
}

impl LambdaParams {
    pub fn new(logits: [f64; NUM_LOSSES]) -> Self {
        LambdaParams { logits }
    }

    pub fn uniform() -> Self {
        Self::new([0.0; NUM_LOSSES])
    }

    pub fn random<R: Rng>(rng: &mut R, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Self::new(std::array::from_fn(|_| normal.sample(rng)))
    }

    /// `softmax(λ)`.
    pub fn weights(&self) -> [f64; NUM_LOSSES] {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.logits.map(|l| (l - max).exp());
        let z: f64 = e.iter().sum();
        e.map(|v| v / z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.iter().all(|l| l.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("loss logits are not finite: {:?}", self.logits)))
        }
    }
}

/// `sum_i softmax(λ)_i * L_i`, with the weights held constant.
pub fn total_loss(tape: &mut Tape, losses: [Var; NUM_LOSSES], lambda: &LambdaParams) -> Result<Var> {
    weighted_total(tape, losses, lambda.weights())
}

/// `sum_i w_i * L_i` for fixed weights.
pub fn weighted_total(tape: &mut Tape, losses: [Var; NUM_LOSSES], weights: [f64; NUM_LOSSES]) -> Result<Var> {
    for (i, &l) in losses.iter().enumerate() {
        if !tape.item(l).is_finite() {
            return Err(Error::Numeric(format!("loss L{} is not finite", i + 1)));
        }
    }
    let w = tape.constant(Tensor::from_vec(weights.to_vec()));
    tape.weighted_sum(w, &losses)
}

/// Exponentially smoothed history of validation losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTracker {
    beta: f64,
    smoothed: Option<[f64; NUM_LOSSES]>,
}

impl RateTracker {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(config_err!("smoothing factor must lie in [0, 1), got {beta}"));
        }
        Ok(RateTracker { beta, smoothed: None })
    }

    /// Tracker whose history is already `prev`.
    pub fn with_history(beta: f64, prev: [f64; NUM_LOSSES]) -> Result<Self> {
        let mut t = Self::new(beta)?;
        t.smoothed = Some(prev);
        Ok(t)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn history(&self) -> Option<[f64; NUM_LOSSES]> {
        self.smoothed
    }

    /// `r_i = smoothed_i / current_i`, then folds `current` into the history.
    /// The first call returns all ones.
    pub fn training_rates(&mut self, current: [f64; NUM_LOSSES]) -> Result<[f64; NUM_LOSSES]> {
        for (i, &c) in current.iter().enumerate() {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Numeric(format!(
                    "training rate of L{} undefined for loss value {c}",
                    i + 1
                )));
            }
        }
        let rates = match self.smoothed {
            None => [1.0; NUM_LOSSES],
            Some(prev) => std::array::from_fn(|i| prev[i] / current[i]),
        };
        let beta = self.beta;
        self.smoothed = Some(match self.smoothed {
            None => current,
            Some(prev) => std::array::from_fn(|i| beta * prev[i] + (1.0 - beta) * current[i]),
        });
        Ok(rates)
    }
}

/// `L_grad = sum_i λ_i (r_i - 1)` on the tape; `lambda` has shape `[3]`.
pub fn grad_regularizer(tape: &mut Tape, lambda: Var, rates: [f64; NUM_LOSSES]) -> Result<Var> {
    let shifted = Tensor::from_vec(rates.iter().map(|r| r - 1.0).collect());
    let terms = tape.mul_const(lambda, &shifted)?;
    tape.sum(terms)
}

/// `∂L_grad/∂λ = r - 1`.
pub fn grad_regularizer_gradient(rates: [f64; NUM_LOSSES]) -> [f64; NUM_LOSSES] {
    rates.map(|r| r - 1.0)
}

/// `(1, w2/w1, w3/w1)`: weights rescaled so the shape loss has weight 1.
pub fn rescale_for_retrain(weights: [f64; NUM_LOSSES]) -> Result<[f64; NUM_LOSSES]> {
    let w1 = weights[0];
    if !(w1 > 0.0 && w1.is_finite()) {
        return Err(config_err!("first loss weight must be positive, got {w1}"));
    }
    Ok([1.0, weights[1] / w1, weights[2] / w1])
}
