use crate::{Error, Result};

/// Cosine annealing from `lr0` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if t > total {
        return Err(Error::invalid(format!("epoch {t} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + c))
}

/// Tracks the best validation loss and says when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// New best; keep these weights.
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, since_best: 0 }
    }

    /// Feed the validation loss of `epoch`. Non-finite losses never improve.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let better = loss.is_finite() && self.best.is_none_or(|(_, b)| loss < b);
        if better {
            self.best = Some((epoch, loss));
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.patience > 0 && self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}
