//! Statistics of randomized smoothing: exact binomial confidence bounds, the
//! abstention test, the normal quantile, and certified radii.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Parameters of one PREDICT/CERTIFY invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyParams {
    /// Smoothing noise in the `[-1, 1]` input convention.
    pub sigma: f64,
    /// Samples used to select the candidate class.
    pub n0: u64,
    /// Samples used to estimate the candidate's probability.
    pub n: u64,
    /// Probability that a returned certificate is wrong.
    pub alpha_fail: f64,
    /// Significance level of the abstention test.
    pub eta: f64,
}

impl Default for CertifyParams {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            n0: 100,
            n: 100_000,
            alpha_fail: 0.001,
            eta: 0.001,
        }
    }
}

impl CertifyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.n0 == 0 || self.n == 0 {
            return Err(Error::config("n0 and n must be positive"));
        }
        if self.n0 > self.n {
            return Err(Error::config(format!(
                "n0 ({}) must not exceed n ({})",
                self.n0, self.n
            )));
        }
        for (name, v) in [("alpha_fail", self.alpha_fail), ("eta", self.eta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

fn check_counts(successes: u64, trials: u64) -> Result<()> {
    if trials == 0 {
        return Err(Error::domain("binomial trials must be positive"));
    }
    if successes > trials {
        return Err(Error::domain(format!(
            "successes ({successes}) exceed trials ({trials})"
        )));
    }
    Ok(())
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn ln_pmf(n: u64, k: u64, p: f64) -> f64 {
    let mut v = ln_choose(n, k);
    if k > 0 {
        v += k as f64 * p.ln();
    }
    if k < n {
        v += (n - k) as f64 * (-p).ln_1p();
    }
    v
}

/// `ln P(X >= k)` for `X ~ Binomial(n, p)`, summed in log space.
///
/// Terms are accumulated outward from `k` by the pmf ratio recurrence and the
/// sum stops once past the mode and the remaining terms are negligible.
fn ln_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 || p >= 1.0 {
        return 0.0;
    }
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let mode = ((n + 1) as f64 * p).floor() as u64;
    let log_odds = p.ln() - (-p).ln_1p();
    let mut log_term = ln_pmf(n, k, p);
    let mut max = log_term;
    let mut sum = 1.0;
    let mut j = k;
    while j < n {
        log_term += ((n - j) as f64).ln() - ((j + 1) as f64).ln() + log_odds;
        j += 1;
        if log_term > max {
            sum = sum * (max - log_term).exp() + 1.0;
            max = log_term;
        } else {
            sum += (log_term - max).exp();
            if j > mode && log_term < max + sum.ln() - 40.0 {
                break;
            }
        }
    }
    max + sum.ln()
}

/// `ln P(X <= k)`, by symmetry with the upper tail of `n - X`.
fn ln_lower_tail(k: u64, n: u64, p: f64) -> f64 {
    ln_upper_tail(n - k, n, 1.0 - p)
}

/// One-sided lower `(1 - alpha_fail)` Clopper–Pearson bound on a binomial
/// proportion: the `p` at which `P(X >= successes) = alpha_fail`.
pub fn clopper_pearson_lower(successes: u64, trials: u64, alpha_fail: f64) -> Result<f64> {
    check_counts(successes, trials)?;
    if !(alpha_fail > 0.0 && alpha_fail < 1.0) {
        return Err(Error::domain(format!(
            "alpha_fail must lie in (0, 1), got {alpha_fail}"
        )));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    let target = alpha_fail.ln();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ln_upper_tail(successes, trials, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Two-sided exact binomial test: twice the smaller tail at the observed
/// count, capped at 1.
pub fn binom_p_test(n_a: u64, n_total: u64, p: f64) -> Result<f64> {
    check_counts(n_a, n_total)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("p must lie in (0, 1), got {p}")));
    }
    let lower = ln_lower_tail(n_a, n_total, p).exp();
    let upper = ln_upper_tail(n_a, n_total, p).exp();
    Ok((2.0 * lower.min(upper)).min(1.0))
}

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `1 - Φ(x)` without cancellation for large `x`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// `Φ(b) - Φ(a)` for `a <= b`, evaluated on the side that avoids cancellation.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        normal_sf(a) - normal_sf(b)
    } else {
        normal_cdf(b) - normal_cdf(a)
    }
}

/// Inverse standard normal CDF Φ⁻¹(p) (Wichura's AS 241, PPND16).
pub fn gaussian_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "quantile needs p in (0, 1), got {p}"
        )));
    }
    Ok(ppnd16(p))
}

fn ppnd16(p: f64) -> f64 {
    const SPLIT1: f64 = 0.425;
    const SPLIT2: f64 = 5.0;
    const CONST1: f64 = 0.180625;
    const CONST2: f64 = 1.6;

    const A: [f64; 8] = [
        3.387_132_872_796_366_608_0,
        1.331_416_678_917_843_774_5e2,
        1.971_590_950_306_551_442_7e3,
        1.373_169_376_550_946_112_5e4,
        4.592_195_393_154_987_145_7e4,
        6.726_577_092_700_870_085_3e4,
        3.343_057_558_358_812_810_5e4,
        2.509_080_928_730_122_672_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091_125_2e1,
        6.871_870_074_920_579_083_0e2,
        5.394_196_021_424_751_107_7e3,
        2.121_379_430_158_659_586_7e4,
        3.930_789_580_009_271_061_0e4,
        2.872_908_573_572_194_267_4e4,
        5.226_495_278_852_854_561_0e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_90,
        5.769_497_221_460_691_405_50,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        2.417_807_251_774_506_117_70e-1,
        2.272_384_498_926_918_458_33e-2,
        7.745_450_142_783_414_076_40e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_40,
        6.897_673_349_851_000_045_50e-1,
        1.481_039_764_274_800_745_90e-1,
        1.519_866_656_361_645_719_66e-2,
        5.475_938_084_995_344_946_00e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_20,
        5.463_784_911_164_114_369_90,
        1.784_826_539_917_291_335_80,
        2.965_605_718_285_048_912_30e-1,
        2.653_218_952_657_612_309_30e-2,
        1.242_660_947_388_078_438_60e-3,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879_376_90e-1,
        1.369_298_809_227_358_053_10e-1,
        1.487_536_129_085_061_485_25e-2,
        7.868_691_311_456_132_591_00e-4,
        1.846_318_317_510_054_681_80e-5,
        1.421_511_758_316_445_888_70e-7,
        2.044_263_103_389_939_785_64e-15,
    ];

    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
    }

    let q = p - 0.5;
    if q.abs() <= SPLIT1 {
        let r = CONST1 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let val = if r <= SPLIT2 {
        r -= CONST2;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= SPLIT2;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Certified ℓ₂ radius `σ·Φ⁻¹(p_lower)` when `p_lower > 1/2`, else 0.
pub fn certified_radius(sigma: f64, p_lower: f64) -> f64 {
    if p_lower <= 0.5 || p_lower.is_nan() {
        0.0
    } else if p_lower >= 1.0 {
        f64::INFINITY
    } else {
        sigma * ppnd16(p_lower)
    }
}

/// Largest radius any run with `params.n` estimation samples can certify.
pub fn max_certifiable_radius(params: &CertifyParams) -> Result<f64> {
    let p = clopper_pearson_lower(params.n, params.n, params.alpha_fail)?;
    Ok(certified_radius(params.sigma, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Binomial pmf by direct products; only sensible for small n.
    fn brute_pmf(n: u64, k: u64, p: f64) -> f64 {
        let mut c = 1.0;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
    }

    fn brute_two_sided(k: u64, n: u64, p: f64) -> f64 {
        let lower: f64 = (0..=k).map(|j| brute_pmf(n, j, p)).sum();
        let upper: f64 = (k..=n).map(|j| brute_pmf(n, j, p)).sum();
        (2.0 * lower.min(upper)).min(1.0)
    }

    #[test]
    fn clopper_pearson_examples() {
        assert_eq!(clopper_pearson_lower(0, 100, 0.001).unwrap(), 0.0);
        let all = clopper_pearson_lower(100, 100, 0.001).unwrap();
        assert!((all - 0.001f64.powf(0.01)).abs() < 1e-12);
        // Regularized incomplete beta inversion, Beta(60, 41) at 0.001.
        let v = clopper_pearson_lower(60, 100, 0.001).unwrap();
        assert!((v - 0.440_984_265_221_299_3).abs() < 1e-10, "{v}");
        let v = clopper_pearson_lower(600, 1000, 0.001).unwrap();
        assert!((v - 0.551_075_473_937_052_5).abs() < 1e-10, "{v}");
        let v = clopper_pearson_lower(7, 10, 0.05).unwrap();
        assert!((v - 0.393_375_783_894_587_66).abs() < 1e-10, "{v}");
        let v = clopper_pearson_lower(80_000, 100_000, 0.001).unwrap();
        assert!((v - 0.796_066_071_192_727_4).abs() < 1e-9, "{v}");
    }

    #[test]
    fn clopper_pearson_rejects_bad_counts() {
        assert!(clopper_pearson_lower(5, 4, 0.01).is_err());
        assert!(clopper_pearson_lower(0, 0, 0.01).is_err());
        assert!(clopper_pearson_lower(1, 4, 0.0).is_err());
    }

    #[test]
    fn p_test_examples() {
        assert_eq!(binom_p_test(5, 10, 0.5).unwrap(), 1.0);
        assert!((binom_p_test(10, 10, 0.5).unwrap() - 0.001_953_125).abs() < 1e-15);
        assert!((binom_p_test(0, 10, 0.5).unwrap() - 0.001_953_125).abs() < 1e-15);
        assert_eq!(binom_p_test(1, 1, 0.5).unwrap(), 1.0);
        assert!(binom_p_test(11, 10, 0.5).is_err());
        assert!(binom_p_test(1, 10, 1.0).is_err());
    }

    #[test]
    fn p_test_matches_brute_force() {
        for n in 1..=20u64 {
            for k in 0..=n {
                for p in [0.5, 0.1, 0.73] {
                    let got = binom_p_test(k, n, p).unwrap();
                    let want = brute_two_sided(k, n, p);
                    assert!(
                        (got - want).abs() <= 1e-12 * want.max(1e-300) + 1e-300,
                        "{k}/{n} @ {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(gaussian_quantile(0.5).unwrap(), 0.0);
        assert!((gaussian_quantile(0.99).unwrap() - 2.326_347_874_040_840_8).abs() < 1e-12);
        assert!(gaussian_quantile(0.0).is_err());
        assert!(gaussian_quantile(1.0).is_err());
        for p in [2f64.powi(-40), 2f64.powi(-17), 0.02, 0.3] {
            let a = gaussian_quantile(p).unwrap();
            let b = gaussian_quantile(1.0 - p).unwrap();
            assert!((a + b).abs() < 1e-9);
        }
    }

    #[test]
    fn radius_examples() {
        assert_eq!(certified_radius(0.5, 0.5), 0.0);
        assert!((certified_radius(0.5, 0.99) - 1.163_173_937_020_420_4).abs() < 1e-12);
        assert_eq!(certified_radius(1.0, 0.3), 0.0);
        let params = CertifyParams {
            sigma: 0.25,
            n0: 10,
            n: 100,
            alpha_fail: 0.001,
            eta: 0.001,
        };
        let r = max_certifiable_radius(&params).unwrap();
        assert!((r - 0.375_118_756_030_159_1).abs() < 1e-10, "{r}");
        let single = CertifyParams {
            n0: 1,
            n: 1,
            alpha_fail: 0.5,
            ..params
        };
        assert_eq!(max_certifiable_radius(&single).unwrap(), 0.0);
    }

    #[test]
    fn max_radius_grows_with_n() {
        let mut prev = 0.0;
        for n in [10u64, 100, 1_000, 10_000, 100_000] {
            let r = max_certifiable_radius(&CertifyParams {
                n0: 1,
                n,
                ..Default::default()
            })
            .unwrap();
            assert!(r > prev && r.is_finite());
            prev = r;
        }
    }

    #[test]
    fn params_validation() {
        assert!(CertifyParams::default().validate().is_ok());
        let bad = CertifyParams {
            n0: 10,
            n: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CertifyParams {
            eta: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn cp_monotone_in_successes(n in 1u64..400, k in 0u64..400, alpha in 1e-4f64..0.2) {
            let k = k.min(n - 1);
            let a = clopper_pearson_lower(k, n, alpha).unwrap();
            let b = clopper_pearson_lower(k + 1, n, alpha).unwrap();
            prop_assert!(a <= b);
        }

        #[test]
        fn cp_nonincreasing_in_alpha(n in 1u64..400, k in 0u64..400, a1 in 1e-4f64..0.5, a2 in 1e-4f64..0.5) {
            let k = k.min(n);
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(clopper_pearson_lower(k, n, lo).unwrap() <= clopper_pearson_lower(k, n, hi).unwrap());
        }

        #[test]
        fn quantile_inverts_cdf(p in 1e-12f64..(1.0 - 1e-12)) {
            let x = gaussian_quantile(p).unwrap();
            prop_assert!((normal_cdf(x) - p).abs() <= 1e-9);
        }

        #[test]
        fn radius_monotone_and_linear(sigma in 0.01f64..4.0, p in 0.0f64..0.999_999, q in 0.0f64..0.999_999) {
            let (lo, hi) = if p < q { (p, q) } else { (q, p) };
            prop_assert!(certified_radius(sigma, lo) <= certified_radius(sigma, hi));
            let r1 = certified_radius(sigma, hi);
            let r2 = certified_radius(2.0 * sigma, hi);
            prop_assert!((r2 - 2.0 * r1).abs() <= 1e-12 * r2.max(1.0));
        }
    }
}
