//! Placement of inducing times for dynamic layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Unnormalized weights `log(1 + t_i/t_n)`.
pub fn inducing_weights(times: &[f64]) -> Vec<f64> {
    let tn = times.last().copied().unwrap_or(1.0);
    times.iter().map(|&t| if tn > 0.0 { (t / tn).ln_1p() } else { 0.0 }).collect()
}

/// Indices in the order they were drawn, without replacement, from the
/// categorical law with weights [`inducing_weights`]. The first entry
/// follows that law exactly.
pub fn draw_inducing_times(times: &[f64], m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = times.len();
    if m > n {
        return Err(Error::Cardinality { requested: m, available: n });
    }
    if m == 0 {
        return Err(Error::Contract("at least one inducing time is required".into()));
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let w = inducing_weights(times);
    let positive = w.iter().filter(|&&v| v > 0.0).count();
    if m > positive {
        return Err(Error::Cardinality { requested: m, available: positive });
    }
    // Exponential-race keys: the largest ln(u)/w_i wins each successive draw.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<(f64, usize)> = w
        .iter()
        .enumerate()
        .map(|(i, &wi)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (if wi > 0.0 { u.ln() / wi } else { f64::NEG_INFINITY }, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(keys.into_iter().take(m).map(|(_, i)| i).collect())
}

/// Sorted inducing indices; deterministic given `seed`.
pub fn select_inducing_times(times: &[f64], m: usize, seed: u64) -> Result<Vec<usize>> {
    let mut idx = draw_inducing_times(times, m, seed)?;
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * 0.01).collect()
    }

    #[test]
    fn all_indices_when_m_equals_n() {
        assert_eq!(select_inducing_times(&grid(7), 7, 3).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn time_zero_is_never_drawn() {
        for seed in 0..50 {
            let idx = select_inducing_times(&grid(20), 10, seed).unwrap();
            assert!(!idx.contains(&0));
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn too_many_is_a_cardinality_error() {
        assert!(matches!(select_inducing_times(&grid(5), 6, 0), Err(Error::Cardinality { requested: 6, available: 5 })));
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(select_inducing_times(&grid(100), 30, 9).unwrap(), select_inducing_times(&grid(100), 30, 9).unwrap());
    }
}
