//! Small statistical toolbox: normal CDF, Kolmogorov–Smirnov distance,
//! sample summaries.

/// Standard normal CDF, accurate to ~1e-15 (Hart/West rational splits).
pub fn std_normal_cdf(x: f64) -> f64 {
    let z = x.abs();
    if z > 37.0 {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    let e = (-z * z / 2.0).exp();
    let c = if z < 7.071_067_811_865_48 {
        let mut num = 3.526_249_659_989_11e-2 * z + 0.700_383_064_443_688;
        num = num * z + 6.373_962_203_531_65;
        num = num * z + 33.912_866_078_383;
        num = num * z + 112.079_291_497_871;
        num = num * z + 221.213_596_169_931;
        num = num * z + 220.206_867_912_376;
        let mut den = 8.838_834_764_831_84e-2 * z + 1.755_667_163_182_64;
        den = den * z + 16.064_177_579_207;
        den = den * z + 86.780_732_202_946_1;
        den = den * z + 296.564_248_779_674;
        den = den * z + 637.333_633_378_831;
        den = den * z + 793.826_512_519_948;
        den = den * z + 440.413_735_824_752;
        e * num / den
    } else {
        let mut b = z + 0.65;
        b = z + 4.0 / b;
        b = z + 3.0 / b;
        b = z + 2.0 / b;
        b = z + 1.0 / b;
        e / (b * 2.506_628_274_631_000_5)
    };
    if x > 0.0 {
        1.0 - c
    } else {
        c
    }
}

/// CDF of a centered normal with variance `sigma2`.
pub fn normal_cdf(x: f64, sigma2: f64) -> f64 {
    std_normal_cdf(x / sigma2.sqrt())
}

/// Two-sided Kolmogorov–Smirnov distance of a sample to `cdf`.
///
/// Sorts a copy of the sample; `cdf` must be a proper distribution
/// function. Returns `sup_x |F_n(x) - F(x)|`.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    assert!(!sample.is_empty(), "KS statistic of an empty sample");
    let mut xs = sample.to_vec();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("NaN in KS sample"));
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs());
        d = d.max((f - i as f64 / n).abs());
    }
    d
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn se_mean(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Asymptotic standard error of the sample variance:
/// `sqrt((m4 - s^4) / n)` with `m4` the fourth central moment.
pub fn se_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let s2 = variance(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - s2 * s2).max(0.0) / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_values() {
        // Abramowitz–Stegun / high-precision references.
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((std_normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((std_normal_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-12);
        assert!((std_normal_cdf(1.96) - 0.975_002_104_851_779_7).abs() < 1e-12);
        assert!((std_normal_cdf(8.0) - (1.0 - 6.220_960_574_271_78e-16)).abs() < 1e-16);
    }

    #[test]
    fn normal_cdf_symmetry() {
        for i in 0..200 {
            let x = -10.0 + i as f64 * 0.1;
            let s = std_normal_cdf(x) + std_normal_cdf(-x);
            assert!((s - 1.0).abs() < 1e-14, "x={x} sum={s}");
        }
    }

    #[test]
    fn ks_exact_small_sample() {
        // Uniform(0,1) cdf against sample {0.1, 0.2, 0.3, 0.4}:
        // sup happens at x=0.4 where F_n jumps to 1, F=0.4 -> D=0.6.
        let d = ks_statistic(&[0.1, 0.2, 0.3, 0.4], |x| x.clamp(0.0, 1.0));
        assert!((d - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ks_of_true_normal_sample_is_small() {
        let mut r = crate::rng::CounterRng::new(11);
        let xs: Vec<f64> = (0..20_000).map(|_| r.standard_normal()).collect();
        let d = ks_statistic(&xs, std_normal_cdf);
        // 99.9% quantile of the KS null is ~1.95/sqrt(n) ≈ 0.0138.
        assert!(d < 0.015, "KS {d}");
    }

    #[test]
    fn variance_and_se() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((mean(&xs) - 3.0).abs() < 1e-15);
        assert!((variance(&xs) - 2.5).abs() < 1e-15);
        assert!(se_mean(&xs) > 0.0 && se_variance(&xs) > 0.0);
    }
}
