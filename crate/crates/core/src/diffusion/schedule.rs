use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Endpoint clip applied to both coefficients before renormalizing.
pub const ENDPOINT_CLIP: f64 = 1e-4;

/// Per-step weight applied to the denoising loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossWeighting {
    /// `w ≡ 1`.
    #[default]
    Uniform,
    /// `w = max(1, exp(λ))`.
    TruncatedSnr,
}

impl FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LossWeighting::Uniform),
            "truncated_snr" => Ok(LossWeighting::TruncatedSnr),
            other => Err(Error::Config(format!(
                "unknown loss weighting `{other}` (uniform|truncated_snr)"
            ))),
        }
    }
}

impl fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossWeighting::Uniform => "uniform",
            LossWeighting::TruncatedSnr => "truncated_snr",
        })
    }
}

/// Variance-preserving cosine schedule on the grid `t = i / T`, `i = 0..=T`.
///
/// Time steps are addressed by their integer grid index throughout the
/// crate; `time(i)` recovers the continuous value.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
    weight: Vec<f64>,
    weighting: LossWeighting,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        Self::with_weighting(steps, LossWeighting::Uniform)
    }

    pub fn with_weighting(steps: usize, weighting: LossWeighting) -> Result<Self> {
        if steps < 2 || steps % 2 != 0 {
            return Err(Error::Config(format!(
                "schedule needs an even step count >= 2, got {steps}"
            )));
        }
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        for i in 0..=steps {
            let phase = FRAC_PI_2 * i as f64 / steps as f64;
            let a = phase.cos().clamp(ENDPOINT_CLIP, 1.0 - ENDPOINT_CLIP);
            let s = phase.sin().clamp(ENDPOINT_CLIP, 1.0 - ENDPOINT_CLIP);
            let norm = a.hypot(s);
            alpha.push(a / norm);
            sigma.push(s / norm);
        }
        let lambda: Vec<f64> = alpha
            .iter()
            .zip(&sigma)
            .map(|(a, s)| (a * a / (s * s)).ln())
            .collect();
        let weight = lambda
            .iter()
            .map(|&l| match weighting {
                LossWeighting::Uniform => 1.0,
                LossWeighting::TruncatedSnr => l.exp().max(1.0),
            })
            .collect();
        Ok(Self {
            steps,
            alpha,
            sigma,
            lambda,
            weight,
            weighting,
        })
    }

    /// Number of grid intervals `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn weighting(&self) -> LossWeighting {
        self.weighting
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i]
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigma[i]
    }

    pub fn lambda(&self, i: usize) -> f64 {
        self.lambda[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weight[i]
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    /// Grid index of a continuous time, or a contract error when `t` is
    /// not a grid point.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let pos = t * self.steps as f64;
        let i = pos.round();
        if !(0.0..=self.steps as f64).contains(&i) || (pos - i).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "time {t} is not on the {}-step grid",
                self.steps
            )));
        }
        Ok(i as usize)
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i > self.steps {
            return Err(Error::Contract(format!(
                "grid index {i} outside 0..={}",
                self.steps
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_or_tiny_step_counts() {
        assert!(NoiseSchedule::new(0).is_err());
        assert!(NoiseSchedule::new(1).is_err());
        assert!(NoiseSchedule::new(7).is_err());
        assert!(NoiseSchedule::new(2).is_ok());
    }

    #[test]
    fn endpoints_are_clipped() {
        let s = NoiseSchedule::new(100).unwrap();
        assert!((s.alpha(0) - 1.0).abs() < 1e-7);
        assert!((s.sigma(0) - 1e-4).abs() < 1e-7);
        assert!((s.alpha(100) - 1e-4).abs() < 1e-7);
        assert!(s.sigma(100) < 1.0);
    }

    #[test]
    fn midpoint_is_balanced() {
        let s = NoiseSchedule::new(100).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.alpha(50) - h).abs() < 1e-15);
        assert!((s.sigma(50) - h).abs() < 1e-15);
        assert!(s.lambda(50).abs() < 1e-12);
    }

    #[test]
    fn unit_energy_and_monotone() {
        for t in [2, 16, 64, 128] {
            let s = NoiseSchedule::new(t).unwrap();
            for i in 0..=t {
                let e = s.alpha(i).powi(2) + s.sigma(i).powi(2);
                assert!((e - 1.0).abs() < 1e-12);
            }
            for i in 1..=t {
                assert!(s.lambda(i) < s.lambda(i - 1));
            }
            for i in 1..t {
                assert!(s.alpha(i) < s.alpha(i - 1));
                assert!(s.sigma(i) > s.sigma(i - 1));
            }
        }
    }

    #[test]
    fn truncated_snr_weights_floor_at_one() {
        let s = NoiseSchedule::with_weighting(16, LossWeighting::TruncatedSnr).unwrap();
        for i in 0..=16 {
            assert!(s.weight(i) >= 1.0);
            assert!((s.weight(i) - s.lambda(i).exp().max(1.0)).abs() < 1e-9 * s.weight(i));
        }
        assert!(NoiseSchedule::new(16).unwrap().weight(3) == 1.0);
    }

    #[test]
    fn grid_lookup() {
        let s = NoiseSchedule::new(10).unwrap();
        assert_eq!(s.index_of(0.3).unwrap(), 3);
        assert_eq!(s.index_of(1.0).unwrap(), 10);
        assert!(s.index_of(0.35).is_err());
        assert!(s.index_of(1.1).is_err());
    }
}
