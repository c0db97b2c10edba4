//! Small statistics helpers: chi-square uniformity checks and a naive DFT
//! power spectrum. Used by verification code and by the generator's
//! sanity checks.

/// Chi-square statistic of observed counts against a uniform expectation.
/// Returns (statistic, degrees of freedom).
pub fn chi_square_uniform(counts: &[u64]) -> (f64, usize) {
    assert!(!counts.is_empty());
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    (stat, counts.len() - 1)
}

/// Upper critical value of the chi-square distribution via the
/// Wilson-Hilferty cube approximation. Accurate to a fraction of a percent
/// for df >= 3, which is all we need for uniformity testing.
pub fn chi_square_critical(df: usize, alpha: f64) -> f64 {
    let z = normal_quantile(1.0 - alpha);
    let d = df as f64;
    let a = 2.0 / (9.0 * d);
    d * (1.0 - a + z * a.sqrt()).powi(3)
}

/// Standard normal quantile (Acklam's rational approximation, |err| < 1.2e-9).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// Power spectrum of a real signal by direct DFT. O(n^2); fine for the
/// segment lengths the generator tests use. Entry k covers frequency
/// k * rate / n for k in 0..n/2+1.
pub fn power_spectrum(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut power = Vec::with_capacity(n / 2 + 1);
    for k in 0..=n / 2 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &x) in signal.iter().enumerate() {
            let angle = -std::f64::consts::TAU * k as f64 * t as f64 / n as f64;
            re += x * angle.cos();
            im += x * angle.sin();
        }
        power.push(re * re + im * im);
    }
    power
}

/// Index of the dominant non-DC frequency bin.
pub fn dominant_frequency_bin(signal: &[f64]) -> usize {
    let power = power_spectrum(signal);
    let mut best = 1;
    for (k, &p) in power.iter().enumerate().skip(1) {
        if p > power[best] {
            best = k;
        }
    }
    best
}
