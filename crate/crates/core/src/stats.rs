//! Shared statistics helpers: normal tails and paired one-sided tests.

/// One-sided upper tail of the standard normal, `P(Z >= z)`.
pub fn normal_upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Paired one-sided test that `mean(a - b) > 0` using the normal
/// approximation (valid for the sample sizes used here, n >= 100).
/// Returns the p-value for H0: `mean(a - b) <= 0`.
pub fn paired_one_sided_p(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired test needs equal lengths");
    assert!(a.len() >= 2, "paired test needs at least two pairs");
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        // all differences identical: decided by the sign of the mean
        return if mean > 0.0 { 0.0 } else { 1.0 };
    }
    let t = mean / (var / n).sqrt();
    normal_upper_tail(t)
}
