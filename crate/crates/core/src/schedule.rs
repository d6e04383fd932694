//! Diffusion variance schedule: the beta table and its derived alpha,
//! cumulative-product alpha-bar, and posterior beta-tilde tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("step count must be at least 1")]
    EmptySchedule,
    #[error("invalid beta range [{start}, {end}]: need 0 < start <= end < 1")]
    InvalidRange { start: f64, end: f64 },
    #[error("diffusion step {n} out of range 1..={max}")]
    StepOutOfRange { n: usize, max: usize },
}

/// Interpolation shape for the beta grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
    /// 4th-power interpolation in beta^(1/4) space.
    Quartic,
}

/// Precomputed tables indexed by diffusion step `n` in `1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl VarianceSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, n: usize) -> Result<usize, ScheduleError> {
        if n == 0 || n > self.len() {
            Err(ScheduleError::StepOutOfRange { n, max: self.len() })
        } else {
            Ok(n - 1)
        }
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n - 1]
    }

    /// Cumulative product with the convention `alpha_bar(0) = 1`.
    pub fn alpha_bar_prev(&self, n: usize) -> f64 {
        if n <= 1 {
            1.0
        } else {
            self.alpha_bar[n - 2]
        }
    }

    pub fn beta_tilde(&self, n: usize) -> f64 {
        self.beta_tilde[n - 1]
    }

    /// All four tables at step `n`, bounds-checked.
    pub fn lookup(&self, n: usize) -> Result<(f64, f64, f64, f64), ScheduleError> {
        let i = self.check(n)?;
        Ok((self.beta[i], self.alpha[i], self.alpha_bar[i], self.beta_tilde[i]))
    }

    /// Build the derived tables from a raw beta sequence.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, ScheduleError> {
        if beta.is_empty() {
            return Err(ScheduleError::EmptySchedule);
        }
        for &b in &beta {
            if !(b > 0.0 && b < 1.0) {
                return Err(ScheduleError::InvalidRange { start: b, end: b });
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let mut beta_tilde = Vec::with_capacity(beta.len());
        for n in 0..beta.len() {
            if n == 0 {
                beta_tilde.push(beta[0]);
            } else {
                beta_tilde.push((1.0 - alpha_bar[n - 1]) / (1.0 - alpha_bar[n]) * beta[n]);
            }
        }
        Ok(VarianceSchedule {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }
}

/// Build an N-step schedule between the given beta endpoints.
pub fn build_schedule(
    n: usize,
    beta_start: f64,
    beta_end: f64,
    shape: ScheduleShape,
) -> Result<VarianceSchedule, ScheduleError> {
    if n == 0 {
        return Err(ScheduleError::EmptySchedule);
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ScheduleError::InvalidRange {
            start: beta_start,
            end: beta_end,
        });
    }
    let betas: Vec<f64> = if n == 1 {
        vec![beta_start]
    } else {
        (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                match shape {
                    ScheduleShape::Linear => beta_start + s * (beta_end - beta_start),
                    ScheduleShape::Quartic => {
                        let a = beta_start.powf(0.25);
                        let b = beta_end.powf(0.25);
                        (a + s * (b - a)).powi(4)
                    }
                }
            })
            .collect()
    };
    VarianceSchedule::from_betas(betas)
}
