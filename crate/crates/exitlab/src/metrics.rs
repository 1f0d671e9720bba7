//! Efficiency metrics over per-token exit records.
//!
//! Layer indices are 1-based: an exit layer equal to the total layer count
//! means "no early exit" and contributes zero savings.

use crate::error::{Error, Result};

/// One generated token and the layer its forward pass stopped at.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    pub token: String,
    pub exit_layer: usize,
    pub position: usize,
}

fn mean_exit_layer(records: &[ExitRecord], l_total: usize, what: &str) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric(format!("{what} needs at least one record")));
    }
    debug_assert!(records.iter().all(|r| r.exit_layer >= 1 && r.exit_layer <= l_total));
    // integer sum is exact in f64, so ALS and avg_compute share one rounding
    let sum: u64 = records.iter().map(|r| r.exit_layer as u64).sum();
    Ok(sum as f64 / (records.len() as f64 * l_total as f64))
}

/// Average Layer Savings in percent: mean of (1 - exit_layer / L_total).
pub fn als(records: &[ExitRecord], l_total: usize) -> Result<f64> {
    Ok(100.0 * (1.0 - mean_exit_layer(records, l_total, "ALS")?))
}

/// Fraction of tokens that exited before the final layer.
pub fn exit_rate(records: &[ExitRecord], l_total: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("exit_rate needs at least one record".into()));
    }
    let early = records.iter().filter(|r| r.exit_layer < l_total).count();
    Ok(early as f64 / records.len() as f64)
}

/// Mean fraction of layers used per token; equals 1 - ALS/100.
pub fn avg_compute(records: &[ExitRecord], l_total: usize) -> Result<f64> {
    mean_exit_layer(records, l_total, "avg_compute")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(layers: &[usize]) -> Vec<ExitRecord> {
        layers
            .iter()
            .enumerate()
            .map(|(i, &l)| ExitRecord { token: "x".into(), exit_layer: l, position: i })
            .collect()
    }

    #[test]
    fn als_hand_cases() {
        assert_eq!(als(&rec(&[28, 28, 28]), 28).unwrap(), 0.0);
        assert!((als(&rec(&[14, 28]), 28).unwrap() - 25.0).abs() < 1e-12);
        assert!((als(&rec(&[14, 14, 14]), 28).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn exit_rate_cases() {
        assert_eq!(exit_rate(&rec(&[28, 28]), 28).unwrap(), 0.0);
        assert_eq!(exit_rate(&rec(&[1, 5]), 28).unwrap(), 1.0);
        assert_eq!(exit_rate(&rec(&[14, 28]), 28).unwrap(), 0.5);
    }

    #[test]
    fn avg_compute_cases() {
        assert_eq!(avg_compute(&rec(&[28, 28]), 28).unwrap(), 1.0);
        assert!((avg_compute(&rec(&[14, 28]), 28).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_records_error() {
        assert!(matches!(als(&[], 8), Err(Error::Metric(_))));
        assert!(matches!(exit_rate(&[], 8), Err(Error::Metric(_))));
        assert!(matches!(avg_compute(&[], 8), Err(Error::Metric(_))));
    }

    #[test]
    fn duality_on_fuzzed_records() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let l_total = rng.gen_range(2..40);
            let n = rng.gen_range(1..500);
            let layers: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=l_total)).collect();
            let records = rec(&layers);
            let a = als(&records, l_total).unwrap();
            let c = avg_compute(&records, l_total).unwrap();
            assert!((c + a / 100.0 - 1.0).abs() < 1e-12);
            assert!((0.0..100.0).contains(&a) || a == 0.0);
            let r = exit_rate(&records, l_total).unwrap();
            assert!((0.0..=1.0).contains(&r));
        }
    }
}
