use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Hyperparameters of the momentum transition rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Momentum factor `β ∈ [0, 1)`.
    pub beta: f64,
    /// Fire threshold `π` on the relative rate.
    pub threshold: f64,
    /// Denominator floor `ε`.
    pub epsilon: f64,
    /// Window length `W`.
    pub window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            threshold: 0.04,
            epsilon: 1e-8,
            window: 100,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1)", self.beta)));
        }
        if self.window == 0 {
            return Err(Error::Config("detector window must be positive".into()));
        }
        if !(self.threshold > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(
                "detector threshold and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Momentum-based plateau detector over a stream of scalar losses.
///
/// Each loss is pushed into a FIFO window of length `W` and folded into a
/// momentum average `G` (seeded with the first loss). Once the window is
/// full, the relative gap between the window mean and `G` is compared with
/// the threshold; the detector fires when the gap drops below it and then
/// stays fired.
#[derive(Clone, Debug)]
pub struct TransitionDetector {
    cfg: DetectorConfig,
    window: VecDeque<f64>,
    momentum: Option<f64>,
    fired: bool,
    last_rate: Option<f64>,
}

impl TransitionDetector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            window: VecDeque::with_capacity(cfg.window),
            momentum: None,
            fired: false,
            last_rate: None,
        })
    }

    pub fn momentum(&self) -> Option<f64> {
        self.momentum
    }

    pub fn fired(&self) -> bool {
        self.fired
    }

    /// Relative rate from the most recent full-window evaluation.
    pub fn last_rate(&self) -> Option<f64> {
        self.last_rate
    }

    pub fn observations(&self) -> usize {
        self.window.len()
    }

    /// Feeds one loss; returns whether the detector has fired.
    pub fn step(&mut self, loss: f64) -> Result<bool> {
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::Detector(format!("invalid loss {loss}")));
        }
        if self.window.len() == self.cfg.window {
            self.window.pop_front();
        }
        self.window.push_back(loss);
        let g = match self.momentum {
            None => loss,
            Some(g) => self.cfg.beta * g + (1.0 - self.cfg.beta) * loss,
        };
        self.momentum = Some(g);
        if self.window.len() == self.cfg.window {
            let avg = self.window.iter().sum::<f64>() / self.window.len() as f64;
            let rate = (avg - g).abs() / avg.max(self.cfg.epsilon);
            self.last_rate = Some(rate);
            if rate < self.cfg.threshold {
                self.fired = true;
            }
        }
        Ok(self.fired)
    }
}
