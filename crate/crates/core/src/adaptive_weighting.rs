//! Moving-average balancing of the imitation and contrastive objectives.
//!
//! Each loss is tracked over a sliding window of recent steps; the weight
//! of a loss is its share of the summed moving averages.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightingError {
    #[error("window size must be positive")]
    Window,
    #[error("{which} loss must be finite and non-negative, got {value}")]
    Loss { which: &'static str, value: f64 },
    #[error("no losses observed yet")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaState {
    window: usize,
    buf_il: VecDeque<f64>,
    buf_cl: VecDeque<f64>,
    count: u64,
}

/// `(w_il, w_cl)`, always summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_il: f64,
    pub w_cl: f64,
}

impl LossWeights {
    pub const EQUAL: LossWeights = LossWeights { w_il: 0.5, w_cl: 0.5 };

    fn from_il(w_il: f64) -> Self {
        Self { w_il, w_cl: 1.0 - w_il }
    }
}

fn mean(buf: &VecDeque<f64>) -> f64 {
    buf.iter().sum::<f64>() / buf.len() as f64
}

impl MaState {
    pub fn new(window: usize) -> Result<Self, WeightingError> {
        if window == 0 {
            return Err(WeightingError::Window);
        }
        Ok(Self { window, buf_il: VecDeque::with_capacity(window), buf_cl: VecDeque::with_capacity(window), count: 0 })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, l_il: f64, l_cl: f64) -> Result<(), WeightingError> {
        for (which, value) in [("imitation", l_il), ("contrastive", l_cl)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(WeightingError::Loss { which, value });
            }
        }
        for (buf, v) in [(&mut self.buf_il, l_il), (&mut self.buf_cl, l_cl)] {
            if buf.len() == self.window {
                buf.pop_front();
            }
            buf.push_back(v);
        }
        self.count += 1;
        Ok(())
    }

    /// Mean of the last `min(count, W)` imitation and contrastive losses.
    pub fn moving_averages(&self) -> Result<(f64, f64), WeightingError> {
        if self.count == 0 {
            return Err(WeightingError::Empty);
        }
        Ok((mean(&self.buf_il), mean(&self.buf_cl)))
    }

    /// `w_il = MA_il / (MA_il + MA_cl)`, `w_cl = 1 - w_il`; equal weights
    /// when both averages are zero.
    pub fn weights(&self) -> Result<LossWeights, WeightingError> {
        let (il, cl) = self.moving_averages()?;
        if il + cl == 0.0 {
            return Ok(LossWeights::EQUAL);
        }
        Ok(LossWeights::from_il(il / (il + cl)))
    }

    /// The alternative reading that gives the smaller average more weight.
    pub fn inverse_weights(&self) -> Result<LossWeights, WeightingError> {
        let (il, cl) = self.moving_averages()?;
        if il + cl == 0.0 {
            return Ok(LossWeights::EQUAL);
        }
        Ok(LossWeights::from_il(cl / (il + cl)))
    }
}

pub fn total_loss(l_cl: f64, l_il: f64, w: LossWeights) -> f64 {
    w.w_cl * l_cl + w.w_il * l_il
}
