//! Point and probabilistic forecast scores.

use serde::{Deserialize, Serialize};

use crate::diffnum::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastScores {
    pub rmse: f64,
    pub mae: f64,
    pub crps: f64,
}

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape { op, detail: format!("lengths {a} and {b} must match and be non-zero") });
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths("rmse", y.len(), yhat.len())?;
    Ok((y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths("mae", y.len(), yhat.len())?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Energy-form CRPS of one sample cloud, `mean|x − y| − ½ mean|x − x'|`.
/// The pairwise term uses the sorted-sample identity, so this is
/// `O(S log S)`.
pub fn crps_single(samples: &[f64], y: f64) -> f64 {
    let s = samples.len() as f64;
    let spread = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / s;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_{i,j}|x_i − x_j| = 2 Σ_i (2i − S + 1) x_(i)
    let pair: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - s + 1.0) * x).sum::<f64>() * 2.0;
    spread - 0.5 * pair / (s * s)
}

/// Mean CRPS over the columns of an `S x n` sample matrix.
pub fn crps_from_samples(samples: &Matrix, y: &[f64]) -> Result<f64> {
    check_lengths("crps_from_samples", samples.cols(), y.len())?;
    if samples.rows() == 0 {
        return Err(Error::Contract("CRPS needs at least one sample".into()));
    }
    Ok((0..y.len()).map(|j| crps_single(&samples.col_vec(j), y[j])).sum::<f64>() / y.len() as f64)
}

pub fn score(samples: &Matrix, point: &[f64], y: &[f64]) -> Result<ForecastScores> {
    Ok(ForecastScores { rmse: rmse(y, point)?, mae: mae(y, point)?, crps: crps_from_samples(samples, y)? })
}
