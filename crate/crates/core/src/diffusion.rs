//! DDPM mathematics: the closed-form forward (noising) process, the standard
//! posterior mean, the noise-prediction training objective, and the annealed
//! Langevin reverse sampler.
//!
//! All of it operates on standardized pose vectors; the noise term of the
//! sampler uses standard deviation sqrt(beta_tilde), i.e. variance
//! beta_tilde.

use crate::autodiff::{Tape, Var};
use crate::linalg::Mat;
use crate::rngutil;
use crate::schedule::VarianceSchedule;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("diffusion step {n} out of range 1..={max}")]
    StepOutOfRange { n: usize, max: usize },
    #[error("shape mismatch: {context} ({got:?} vs {expected:?})")]
    ShapeMismatch {
        context: &'static str,
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// Anything that predicts the noise component of a diffused pose vector,
/// conditioned on the encoder hidden state and the diffusion step.
pub trait Denoiser {
    fn predict_noise(&self, xn: &[f64], h: &[f64], n: usize) -> Vec<f64>;
}

impl<F> Denoiser for F
where
    F: Fn(&[f64], &[f64], usize) -> Vec<f64>,
{
    fn predict_noise(&self, xn: &[f64], h: &[f64], n: usize) -> Vec<f64> {
        self(xn, h, n)
    }
}

fn check_step(schedule: &VarianceSchedule, n: usize) -> Result<(), DiffusionError> {
    if n == 0 || n > schedule.len() {
        return Err(DiffusionError::StepOutOfRange {
            n,
            max: schedule.len(),
        });
    }
    Ok(())
}

/// Closed-form diffusion to step `n`:
/// `xn = sqrt(alpha_bar_n) x0 + sqrt(1 - alpha_bar_n) eps`.
pub fn forward_diffuse(
    x0: &[f64],
    n: usize,
    eps: &[f64],
    schedule: &VarianceSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_step(schedule, n)?;
    if x0.len() != eps.len() {
        return Err(DiffusionError::ShapeMismatch {
            context: "forward_diffuse x0 vs eps",
            got: (eps.len(), 1),
            expected: (x0.len(), 1),
        });
    }
    let ab = schedule.alpha_bar(n);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Standard DDPM posterior mean of `x^{n-1}` given `(xn, x0)`, with the
/// convention `alpha_bar(0) = 1` so the n = 1 case collapses to `x0`.
pub fn posterior_mean(
    x0: &[f64],
    xn: &[f64],
    n: usize,
    schedule: &VarianceSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_step(schedule, n)?;
    if x0.len() != xn.len() {
        return Err(DiffusionError::ShapeMismatch {
            context: "posterior_mean x0 vs xn",
            got: (xn.len(), 1),
            expected: (x0.len(), 1),
        });
    }
    let beta = schedule.beta(n);
    let alpha = schedule.alpha(n);
    let ab = schedule.alpha_bar(n);
    let ab_prev = schedule.alpha_bar_prev(n);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let cn = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok(x0
        .iter()
        .zip(xn)
        .map(|(x, y)| c0 * x + cn * y)
        .collect())
}

/// Noise-prediction objective for a batch of rows: the sum over rows and
/// channels of `(eps - eps_hat)^2`, where `eps_hat` is produced on the tape
/// by `denoiser` from the diffused points. `ns[b]` is the diffusion step of
/// row `b` (drawn uniform on `1..=N` by the caller).
pub fn training_loss_term<F>(
    tape: &mut Tape,
    x0: &Mat,
    ns: &[usize],
    eps: &Mat,
    schedule: &VarianceSchedule,
    denoiser: F,
) -> Result<Var, DiffusionError>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::ShapeMismatch {
            context: "training_loss_term x0 vs eps",
            got: eps.shape(),
            expected: x0.shape(),
        });
    }
    if ns.len() != x0.rows() {
        return Err(DiffusionError::ShapeMismatch {
            context: "training_loss_term step count vs batch",
            got: (ns.len(), 1),
            expected: (x0.rows(), 1),
        });
    }
    let mut xn = Mat::zeros(x0.rows(), x0.cols());
    for b in 0..x0.rows() {
        let row = forward_diffuse(x0.row(b), ns[b], eps.row(b), schedule)?;
        xn.row_mut(b).copy_from_slice(&row);
    }
    // the diffused point carries no parameters; gradients flow only through
    // the denoiser output
    let xn_var = tape.leaf(xn);
    let eps_hat = denoiser(tape, xn_var);
    let eps_var = tape.leaf(eps.clone());
    let diff = tape.sub(eps_var, eps_hat);
    Ok(tape.sum_squares(diff))
}

/// One reverse step of the annealed Langevin sampler:
/// `x^{n-1} = (xn - beta_n / sqrt(1 - alpha_bar_n) eps_hat) / sqrt(alpha_n)
///            + sqrt(beta_tilde_n) z`,
/// with the noise term dropped at n = 1.
pub fn sample_step<D: Denoiser>(
    xn: &[f64],
    h: &[f64],
    n: usize,
    z: &[f64],
    denoiser: &D,
    schedule: &VarianceSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_step(schedule, n)?;
    let eps_hat = denoiser.predict_noise(xn, h, n);
    if eps_hat.len() != xn.len() || z.len() != xn.len() {
        return Err(DiffusionError::ShapeMismatch {
            context: "sample_step vector widths",
            got: (eps_hat.len(), z.len()),
            expected: (xn.len(), xn.len()),
        });
    }
    let beta = schedule.beta(n);
    let alpha = schedule.alpha(n);
    let ab = schedule.alpha_bar(n);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let coeff = beta / (1.0 - ab).sqrt();
    let sigma = if n > 1 { schedule.beta_tilde(n).sqrt() } else { 0.0 };
    Ok(xn
        .iter()
        .zip(&eps_hat)
        .zip(z)
        .map(|((x, e), zz)| inv_sqrt_alpha * (x - coeff * e) + sigma * zz)
        .collect())
}

/// Full reverse chain: start from standard-normal noise at step N and run
/// [`sample_step`] down to the clean sample.
pub fn sample_frame<D: Denoiser, R: Rng>(
    h: &[f64],
    denoiser: &D,
    schedule: &VarianceSchedule,
    dim: usize,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError> {
    let mut x = rngutil::normal_vec(rng, dim);
    for n in (1..=schedule.len()).rev() {
        let z = if n > 1 {
            rngutil::normal_vec(rng, dim)
        } else {
            vec![0.0; dim]
        };
        x = sample_step(&x, h, n, &z, denoiser, schedule)?;
    }
    Ok(x)
}

/// The analytically optimal denoiser for unit-Gaussian data:
/// `eps*(xn, n) = sqrt(1 - alpha_bar_n) * xn`. Test oracle for the sampler.
pub struct UnitGaussianOracle<'a> {
    pub schedule: &'a VarianceSchedule,
}

impl Denoiser for UnitGaussianOracle<'_> {
    fn predict_noise(&self, xn: &[f64], _h: &[f64], n: usize) -> Vec<f64> {
        let k = (1.0 - self.schedule.alpha_bar(n)).sqrt();
        xn.iter().map(|x| k * x).collect()
    }
}
