//! Statistical primitives: two-sample Kolmogorov-Smirnov test, median/MAD
//! anomaly indexing, and minimum-variance window search over sorted scalars.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Result of a two-sample Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    /// Sup-norm of the ECDF difference, in [0,1].
    pub statistic: f64,
    /// Asymptotic p-value, clamped to (0,1].
    pub p_value: f64,
}

/// Contiguous slice of a sorted sequence selected by variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSelection {
    pub start_index: usize,
    pub length: usize,
    pub variance: f64,
    pub values: Vec<f64>,
}

/// Two-sample Kolmogorov-Smirnov test.
///
/// The statistic is the maximum absolute difference between the two
/// empirical CDFs, evaluated over all sample points (both one-sided sweeps).
/// The p-value uses the asymptotic series
/// `Q(lambda) = 2 * sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2)` with the
/// small-sample correction `lambda = (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) * D`,
/// `ne = |a||b|/(|a|+|b|)`. The series is truncated once a term falls below
/// 1e-12 and the result is clamped to (0,1].
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("ks_two_sample sample"));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);

    let n = xs.len();
    let m = ys.len();
    let mut i = 0;
    let mut j = 0;
    let mut ecdf_x = 0.0;
    let mut ecdf_y = 0.0;
    let mut statistic: f64 = 0.0;
    while i < n && j < m {
        let x = xs[i];
        let y = ys[j];
        let current = if x < y { x } else { y };
        // Advance each side through every sample equal to `current` so both
        // ECDFs are fully updated before the difference is taken.
        if x <= y {
            while i < n && xs[i] == current {
                i += 1;
            }
            ecdf_x = i as f64 / n as f64;
        }
        if y <= x {
            while j < m && ys[j] == current {
                j += 1;
            }
            ecdf_y = j as f64 / m as f64;
        }
        statistic = statistic.max((ecdf_x - ecdf_y).abs());
    }
    // Remaining values only shrink the gap toward (1,1); no update needed.

    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * statistic;
    let p_value = ks_series(lambda);
    Ok(KsResult { statistic, p_value })
}

/// Asymptotic KS survival function `Q(lambda)`, clamped to (0,1].
fn ks_series(lambda: f64) -> f64 {
    if lambda < 1e-6 {
        return 1.0;
    }
    let a = -2.0 * lambda * lambda;
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..100_000u64 {
        let term = sign * (a * (j * j) as f64).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Median with the midpoint rule for even sizes.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        Ok(v[n / 2])
    } else {
        Ok((v[n / 2 - 1] + v[n / 2]) / 2.0)
    }
}

/// Median absolute deviation (unscaled).
pub fn mad(values: &[f64]) -> Result<f64> {
    let med = median(values)?;
    let dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    median(&dev)
}

/// Consistency constant mapping MAD to the standard deviation of normal data.
pub const MAD_CONSISTENCY: f64 = 1.4826;

/// How many (scaled) MADs `x` lies from the median of `reference`.
///
/// When the reference MAD is zero the index degenerates: 0 if `x` equals the
/// median, positive infinity otherwise.
pub fn anomaly_index(x: f64, reference: &[f64]) -> Result<f64> {
    let med = median(reference)?;
    let m = mad(reference)?;
    let dev = (x - med).abs();
    if m == 0.0 {
        return Ok(if dev == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(dev / (MAD_CONSISTENCY * m))
}

/// Unbiased sample variance (1/(m-1)); windows of length 1 have variance 0.
pub fn sample_variance(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
    ss / (m - 1) as f64
}

/// Among all contiguous windows of `window_len` (stride 1) over an
/// ascending-sorted slice, returns the one with minimum sample variance.
/// Ties break toward the smallest start index.
pub fn min_variance_window(sorted_values: &[f64], window_len: usize) -> Result<WindowSelection> {
    if window_len == 0 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    if window_len > sorted_values.len() {
        return Err(Error::invalid(format!(
            "window length {} exceeds input length {}",
            window_len,
            sorted_values.len()
        )));
    }
    if sorted_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("values must be sorted ascending"));
    }
    let mut best_start = 0;
    let mut best_var = f64::INFINITY;
    for start in 0..=(sorted_values.len() - window_len) {
        let var = sample_variance(&sorted_values[start..start + window_len]);
        if var < best_var {
            best_var = var;
            best_start = start;
        }
    }
    Ok(WindowSelection {
        start_index: best_start,
        length: window_len,
        variance: best_var,
        values: sorted_values[best_start..best_start + window_len].to_vec(),
    })
}

/// Type-7 (linear interpolation) quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("quantile level must be in [0,1]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    // Equal bounds also sidestep inf - inf when both ends are infinite.
    if lo == hi || v[lo] == v[hi] {
        return Ok(v[lo]);
    }
    let frac = pos - lo as f64;
    Ok(v[lo] + frac * (v[hi] - v[lo]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Brute-force D: evaluate |ECDF_a - ECDF_b| at every sample point.
    fn ks_statistic_brute(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b.iter())
            .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    /// Independent evaluation of the asymptotic p-value series.
    fn ks_p_brute(d: f64, n: usize, m: usize) -> f64 {
        let ne = (n * m) as f64 / (n + m) as f64;
        let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
        if lambda < 1e-6 {
            return 1.0;
        }
        let mut total = 0.0;
        for j in 1..=100_000u64 {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
            total += term;
            if term.abs() < 1e-12 {
                break;
            }
        }
        (2.0 * total).clamp(f64::MIN_POSITIVE, 1.0)
    }

    #[test]
    fn identical_samples_give_d_zero_p_one() {
        let a = [0.3, 1.2, -0.5, 0.3];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn disjoint_supports_give_d_one() {
        let r = ks_two_sample(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.statistic, 1.0);
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(ks_two_sample(&[], &[1.0]).is_err());
        assert!(ks_two_sample(&[1.0], &[]).is_err());
    }

    #[test]
    fn ks_matches_brute_force_on_random_pairs() {
        let mut rng = crate::rng::seeded_rng(42);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let m = rng.random_range(1..40);
            // Draw from a small grid so ties across samples actually occur.
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 * 0.25).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(0..12) as f64 * 0.25).collect();
            let r = ks_two_sample(&a, &b).unwrap();
            assert_eq!(r.statistic, ks_statistic_brute(&a, &b));
            assert!((r.p_value - ks_p_brute(r.statistic, n, m)).abs() < 1e-9);
        }
    }

    #[test]
    fn median_and_mad_hand_values() {
        let v = [1.0, 2.0, 3.0, 4.0, 100.0];
        assert_eq!(median(&v).unwrap(), 3.0);
        assert_eq!(mad(&v).unwrap(), 1.0);
        assert_eq!(median(&[1.0, 2.0]).unwrap(), 1.5);
        assert_eq!(mad(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn anomaly_index_hand_values() {
        let r = [1.0, 2.0, 3.0, 4.0, 100.0];
        assert_eq!(anomaly_index(3.0, &r).unwrap(), 0.0);
        let idx = anomaly_index(100.0, &r).unwrap();
        assert!((idx - 97.0 / MAD_CONSISTENCY).abs() < 1e-12);
        // Degenerate reference: zero MAD.
        assert_eq!(anomaly_index(5.0, &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert_eq!(anomaly_index(6.0, &[5.0, 5.0, 5.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn window_picks_tight_cluster() {
        let v = [1.0, 1.1, 1.2, 5.0, 9.0, 20.0];
        let w = min_variance_window(&v, 3).unwrap();
        assert_eq!(w.start_index, 0);
        assert_eq!(w.values, vec![1.0, 1.1, 1.2]);
    }

    #[test]
    fn constant_array_ties_break_to_start() {
        let v = [2.0; 10];
        let w = min_variance_window(&v, 4).unwrap();
        assert_eq!(w.start_index, 0);
        assert_eq!(w.variance, 0.0);
    }

    #[test]
    fn window_longer_than_input_rejected() {
        assert!(min_variance_window(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 4.0);
        assert_eq!(quantile(&v, 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&v, 0.75).unwrap(), 3.25);
    }

    proptest! {
        #[test]
        fn ks_is_symmetric(a in prop::collection::vec(-50.0..50.0f64, 1..30),
                           b in prop::collection::vec(-50.0..50.0f64, 1..30)) {
            let ab = ks_two_sample(&a, &b).unwrap();
            let ba = ks_two_sample(&b, &a).unwrap();
            prop_assert_eq!(ab.statistic, ba.statistic);
            prop_assert_eq!(ab.p_value, ba.p_value);
        }

        #[test]
        fn ks_d_invariant_under_monotone_transform(
            a in prop::collection::vec(-8.0..8.0f64, 1..30),
            b in prop::collection::vec(-8.0..8.0f64, 1..30)) {
            let f = |x: f64| x.exp();
            let fa: Vec<f64> = a.iter().map(|&x| f(x)).collect();
            let fb: Vec<f64> = b.iter().map(|&x| f(x)).collect();
            let d0 = ks_two_sample(&a, &b).unwrap().statistic;
            let d1 = ks_two_sample(&fa, &fb).unwrap().statistic;
            prop_assert_eq!(d0, d1);
        }

        #[test]
        fn window_matches_exhaustive_search(
            mut v in prop::collection::vec(-100.0..100.0f64, 1..200),
            len in 1usize..40) {
            prop_assume!(len <= v.len());
            v.sort_by(f64::total_cmp);
            let got = min_variance_window(&v, len).unwrap();
            let mut best = (0usize, f64::INFINITY);
            for s in 0..=(v.len() - len) {
                let var = sample_variance(&v[s..s + len]);
                if var < best.1 {
                    best = (s, var);
                }
            }
            prop_assert_eq!(got.start_index, best.0);
            prop_assert_eq!(got.variance, best.1);
        }

        #[test]
        fn anomaly_index_shift_invariant(
            r in prop::collection::vec(-20.0..20.0f64, 2..30),
            x in -20.0..20.0f64,
            c in -5.0..5.0f64) {
            prop_assume!(mad(&r).unwrap() > 1e-6);
            let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
            let a = anomaly_index(x, &r).unwrap();
            let b = anomaly_index(x + c, &shifted).unwrap();
            prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
        }
    }
}
