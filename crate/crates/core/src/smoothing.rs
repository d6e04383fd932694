//! Savitzky-Golay smoothing over per-channel pose trajectories.
//!
//! Each output frame is the value at the window center of the least-squares
//! polynomial fitted to the surrounding window. Near the sequence edges the
//! window is truncated rather than padded, which keeps low-degree
//! polynomials exact everywhere.

use crate::linalg::{solve, Mat};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmoothingError {
    #[error("window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("polynomial order {order} must be smaller than window {window}")]
    OrderTooHigh { order: usize, window: usize },
}

/// Weights that reproduce the polynomial fit's value at offset 0 as a dot
/// product with the samples at the given integer offsets.
fn sg_weights(offsets: &[i64], order: usize) -> Vec<f64> {
    let n = offsets.len();
    let cols = order + 1;
    // A[i][j] = offset_i^j
    let mut a = Mat::zeros(n, cols);
    for (i, &off) in offsets.iter().enumerate() {
        let x = off as f64;
        let mut pw = 1.0;
        for j in 0..cols {
            a.row_mut(i)[j] = pw;
            pw *= x;
        }
    }
    // fitted value at 0 is e0' (A'A)^-1 A' y, so solve (A'A) c = e0
    let ata = a.transpose().matmul(&a);
    let mut e0 = vec![0.0; cols];
    e0[0] = 1.0;
    let c = solve(&ata, &e0).expect("SG normal equations are well-conditioned for small orders");
    (0..n)
        .map(|i| {
            a.row(i)
                .iter()
                .zip(&c)
                .map(|(av, cv)| av * cv)
                .sum::<f64>()
        })
        .collect()
}

/// Smooth every column of `frames`. Sequences shorter than the window are
/// returned unchanged. Length is always preserved.
pub fn sg_smooth(frames: &Mat, window: usize, order: usize) -> Result<Mat, SmoothingError> {
    if window % 2 == 0 {
        return Err(SmoothingError::EvenWindow(window));
    }
    if order >= window {
        return Err(SmoothingError::OrderTooHigh { order, window });
    }
    let t_len = frames.rows();
    if t_len < window {
        return Ok(frames.clone());
    }
    let half = (window / 2) as i64;
    let mut out = Mat::zeros(t_len, frames.cols());
    // Only 2*half+1 distinct truncated shapes occur; cache their weights.
    let mut cache: HashMap<(i64, i64), Vec<f64>> = HashMap::new();
    for t in 0..t_len {
        let lo = (t as i64 - half).max(0);
        let hi = (t as i64 + half).min(t_len as i64 - 1);
        let key = (lo - t as i64, hi - t as i64);
        let weights = cache.entry(key).or_insert_with(|| {
            let offsets: Vec<i64> = (key.0..=key.1).collect();
            sg_weights(&offsets, order)
        });
        for c in 0..frames.cols() {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += w * frames[((lo as usize) + k, c)];
            }
            out.row_mut(t)[c] = acc;
        }
    }
    Ok(out)
}
