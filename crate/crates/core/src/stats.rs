//! Summary statistics and point-process goodness-of-fit helpers.
//!
//! The time-rescaling theorem maps inter-event residuals `∫ λ` of a
//! correctly specified point process to i.i.d. unit exponentials, so a
//! Kolmogorov–Smirnov test against `Exp(1)` is the standard fit diagnostic.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Two-sided Kolmogorov–Smirnov statistic of a sample against a CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let lo = (f - i as f64 / n).abs();
        let hi = ((i + 1) as f64 / n - f).abs();
        d = d.max(lo).max(hi);
    }
    d
}

/// Asymptotic KS p-value with the Stephens small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let n = n as f64;
    let t = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    // Kolmogorov tail series: 2 Σ (-1)^{k-1} exp(-2 k² t²).
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * t * t).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// KS test of a sample against the unit exponential distribution.
pub fn ks_test_exp1(sample: &[f64]) -> (f64, f64) {
    let d = ks_statistic(sample, |x| 1.0 - (-x.max(0.0)).exp());
    (d, ks_p_value(d, sample.len()))
}

/// Time-rescaled inter-event gaps of `target` events, pooled across paths.
///
/// Each path's rescaled target process is a unit-rate Poisson process on
/// `[0, Λ(T)]`. Keeping only gaps that complete inside a finite window
/// would length-bias the sample toward short gaps, so the censored
/// compensator mass at each window end is carried into the next path; by
/// memorylessness the concatenated gaps are i.i.d. `Exp(1)` under a
/// correctly specified intensity (the final censored remainder is dropped).
pub fn time_rescaled_gaps(
    paths: &[crate::catalog::Path],
    params: &crate::kernels::ModelParams,
    target: usize,
) -> Vec<f64> {
    let mut gaps = Vec::new();
    let mut carry = 0.0;
    for path in paths {
        let mut prev = 0.0;
        for ev in path.events().iter().filter(|e| e.type_idx == target) {
            gaps.push(carry + crate::kernels::compensator(path, params, target, prev, ev.t));
            carry = 0.0;
            prev = ev.t;
        }
        carry += crate::kernels::compensator(path, params, target, prev, path.horizon());
    }
    gaps
}
