//! Special functions and the Student-t quantile.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_cf(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b).clamp(0.0, 1.0)
    }
}

// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// CDF of Student's t with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * inc_beta(0.5 * df, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Inverse CDF of Student's t, by bracketing then bisection on [`t_cdf`].
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::InvalidDf(df));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let upper = p.max(1.0 - p);
    let mut lo = 0.0;
    let mut hi = 1.0;
    while t_cdf(hi, df) < upper {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < upper {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    let q = 0.5 * (lo + hi);
    Ok(if p > 0.5 { q } else { -q })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (N − 1 denominator); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gamma_matches_factorials() {
        for n in 1..15u32 {
            let fact: f64 = (1..n).map(f64::from).product();
            assert_abs_diff_eq!(ln_gamma(n as f64), fact.ln(), epsilon = 1e-10);
        }
        assert_abs_diff_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-12);
    }

    #[test]
    fn t_table_two_sided_95() {
        let cases = [(1.0, 12.706), (2.0, 4.303), (10.0, 2.228)];
        for (df, want) in cases {
            assert_abs_diff_eq!(t_quantile(0.975, df).unwrap(), want, epsilon = 1e-3);
        }
    }

    #[test]
    fn normal_limit() {
        assert_abs_diff_eq!(t_quantile(0.975, 1e6).unwrap(), 1.959_964, epsilon = 1e-3);
    }

    #[test]
    fn median_is_zero_and_symmetric() {
        for df in [1.0, 3.0, 30.0] {
            assert_eq!(t_quantile(0.5, df).unwrap(), 0.0);
            let a = t_quantile(0.1, df).unwrap();
            let b = t_quantile(0.9, df).unwrap();
            assert_abs_diff_eq!(a, -b, epsilon = 1e-10);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(t_quantile(0.0, 3.0), Err(Error::InvalidProbability(_))));
        assert!(matches!(t_quantile(1.0, 3.0), Err(Error::InvalidProbability(_))));
        assert!(matches!(t_quantile(0.7, 0.0), Err(Error::InvalidDf(_))));
    }

    #[test]
    fn cauchy_closed_form() {
        // df = 1 is Cauchy: quantile = tan(pi (p - 1/2))
        for p in [0.6, 0.8, 0.95, 0.99] {
            let want = (std::f64::consts::PI * (p - 0.5)).tan();
            assert_abs_diff_eq!(t_quantile(p, 1.0).unwrap(), want, epsilon = 1e-8);
        }
    }

    #[test]
    fn sample_std_small_inputs() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert_abs_diff_eq!(sample_std(&[0.3, 0.1]), 0.141_421_356, epsilon = 1e-8);
    }
}
