//! Small statistics toolkit used by estimators and verdicts.

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct KendallResult {
    pub tau: f64,
    pub z: f64,
    /// Two-sided p-value under the normal approximation.
    pub p_value: f64,
}

/// Kendall tau-b with tie-corrected variance.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> KendallResult {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let mut s: i64 = 0;
    let (mut n1, mut n2) = (0i64, 0i64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = (xs[j] - xs[i]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal) as i64;
            let dy = (ys[j] - ys[i]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal) as i64;
            s += dx * dy;
            if dx == 0 {
                n1 += 1;
            }
            if dy == 0 {
                n2 += 1;
            }
        }
    }
    let n0 = (n * n.saturating_sub(1) / 2) as i64;
    let tx = tie_groups(xs);
    let ty = tie_groups(ys);
    let nf = n as f64;
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let vt: f64 = tx.iter().map(|&t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let vu: f64 = ty.iter().map(|&u| u * (u - 1.0) * (2.0 * u + 5.0)).sum();
    let v1 = tx.iter().map(|&t| t * (t - 1.0)).sum::<f64>() * ty.iter().map(|&u| u * (u - 1.0)).sum::<f64>();
    let v2 = tx.iter().map(|&t| t * (t - 1.0) * (t - 2.0)).sum::<f64>() * ty.iter().map(|&u| u * (u - 1.0) * (u - 2.0)).sum::<f64>();
    let mut var = (v0 - vt - vu) / 18.0;
    if n > 1 {
        var += v1 / (2.0 * nf * (nf - 1.0));
    }
    if n > 2 {
        var += v2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    }
    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    let tau = if denom > 0.0 { s as f64 / denom } else { 0.0 };
    let z = if var > 0.0 { s as f64 / var.sqrt() } else { 0.0 };
    KendallResult { tau, z, p_value: 2.0 * (1.0 - normal_cdf(z.abs())) }
}

fn tie_groups(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mut groups = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i + 1;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        if j - i > 1 {
            groups.push((j - i) as f64);
        }
        i = j;
    }
    groups
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub se_intercept: f64,
    pub se_slope: f64,
    pub rms_residual: f64,
}

/// Ordinary least squares fit of `y = intercept + slope * x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let s2 = if xs.len() > 2 { ssr / (n - 2.0) } else { 0.0 };
    LinearFit {
        intercept,
        slope,
        se_intercept: (s2 * (1.0 / n + mx * mx / sxx)).sqrt(),
        se_slope: (s2 / sxx).sqrt(),
        rms_residual: (ssr / n).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-14);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-12);
    }

    #[test]
    fn kendall_perfect_and_reversed() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let r = kendall_tau(&x, &x);
        assert!((r.tau - 1.0).abs() < 1e-12);
        assert!(r.p_value < 1e-6);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((kendall_tau(&x, &y).tau + 1.0).abs() < 1e-12);
    }

    #[test]
    fn kendall_small_example() {
        // hand count: pairs concordant 8, discordant 2 over 5 points
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 3.0, 2.0, 5.0, 4.0];
        let r = kendall_tau(&x, &y);
        assert!((r.tau - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ks_identical_samples() {
        let a: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let (d, p) = ks_two_sample(&a, &a);
        assert_eq!(d, 0.0);
        assert!(p > 0.99);
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let (d, p) = ks_two_sample(&a, &b);
        assert!((d - 0.51).abs() < 1e-12);
        assert!(p < 1e-6);
    }

    #[test]
    fn wilson_contains_estimate() {
        let (lo, hi) = wilson_interval(140, 200, 1.96);
        assert!(lo < 0.7 && hi > 0.7);
        // reference values for 140/200 at z = 1.96
        assert!((lo - 0.6331).abs() < 1e-3 && (hi - 0.7592).abs() < 1e-3);
    }

    #[test]
    fn fit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let f = linear_fit(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!(f.rms_residual < 1e-12);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
