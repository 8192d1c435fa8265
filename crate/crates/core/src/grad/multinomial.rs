use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// `ln(n!)`: exact products for n <= 20, log-gamma above.
pub fn log_factorial(n: u64) -> f64 {
    if n <= 20 {
        ((1..=n).product::<u64>() as f64).ln()
    } else {
        ln_factorial(n)
    }
}

/// Log-normaliser `ln N! - sum_k ln c_k!`.
pub fn log_multinomial_coefficient(counts: &[u32; 3]) -> f64 {
    let n: u64 = counts.iter().map(|&c| c as u64).sum();
    log_factorial(n) - counts.iter().map(|&c| log_factorial(c as u64)).sum::<f64>()
}

/// Multinomial log pmf with a support check. Zero counts contribute nothing
/// even when their log-probability is `-inf`; a positive count on a `-inf`
/// class yields `-inf`.
pub fn multinomial_log_pmf(counts: &[u32; 3], log_probs: &[f64]) -> Result<f64> {
    if log_probs.len() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 log-probabilities, got {}",
            log_probs.len()
        )));
    }
    Ok(log_pmf_unchecked(counts, log_probs))
}

pub(crate) fn log_pmf_unchecked(counts: &[u32; 3], log_probs: &[f64]) -> f64 {
    let mut acc = log_multinomial_coefficient(counts);
    for (&c, &lp) in counts.iter().zip(log_probs) {
        if c > 0 {
            if lp == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            acc += c as f64 * lp;
        }
    }
    acc
}
