//! Standard normal and Student t distribution functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use super::search::solve_root;
use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse of the standard normal CDF (Wichura's AS 241, PPND16).
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} not in (0,1)")));
    }
    Ok(ppnd16(p))
}

/// Unchecked AS 241; callers guarantee `0 < p < 1`.
// Coefficients as published.
#[allow(clippy::inconsistent_digit_grouping, clippy::excessive_precision)]
pub(crate) fn ppnd16(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((r * 2509.080_928_730_122_7 + 33_430.575_583_588_13) * r
                + 67265.770_927_008_7)
                * r
                + 45921.953_931_549_87)
                * r
                + 13_731.693_765_509_46)
                * r
                + 1971.590_950_306_551_4)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((r * 5226.495_278_852_546 + 28729.085_735_721_943) * r
                + 39307.895_800_092_71)
                * r
                + 21213.794_301_586_597)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((r * 7.745_450_142_783_414e-4 + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((r * 1.050_750_071_644_416_9e-9 + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu >= 1.0) || nu.is_nan() {
        return Err(Error::Domain(format!(
            "degrees of freedom {nu} must be >= 1"
        )));
    }
    Ok(())
}

/// CDF of Student's t with `nu` (possibly fractional) degrees of freedom.
pub fn student_t_cdf(x: f64, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    if x.is_nan() {
        return Err(Error::Domain("t cdf of NaN".into()));
    }
    Ok(t_cdf_unchecked(x, nu))
}

const LARGE_NU: f64 = 1e7;

pub(crate) fn t_cdf_unchecked(x: f64, nu: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    if x.is_infinite() {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    if nu.is_infinite() {
        return std_normal_cdf(x);
    }
    // The incomplete beta loses digits for huge nu; the first Edgeworth term
    // is exact to O(1/nu^2) there.
    if nu > LARGE_NU {
        let dens = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        return std_normal_cdf(x) - dens * (x * x * x + x) / (4.0 * nu);
    }
    let x2 = x * x;
    // P(|T| > |x|) expressed through the regularized incomplete beta function,
    // choosing the argument that keeps full precision.
    let two_tail = if x2 < nu {
        1.0 - beta_reg(0.5, 0.5 * nu, x2 / (nu + x2))
    } else {
        beta_reg(0.5 * nu, 0.5, nu / (nu + x2))
    };
    let tail = 0.5 * two_tail;
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of Student's t.
pub fn student_t_quantile(p: f64, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} not in (0,1)")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if nu == 1.0 {
        return Ok((PI * (p - 0.5)).tan());
    }
    if nu == 2.0 {
        return Ok((2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt());
    }
    if nu.is_infinite() {
        return Ok(ppnd16(p));
    }
    // Cornish-Fisher start, then a bracketed root solve on the CDF.
    let z = ppnd16(p);
    let z3 = z * z * z;
    let guess =
        z + (z3 + z) / (4.0 * nu) + (5.0 * z3 * z * z + 16.0 * z3 + 3.0 * z) / (96.0 * nu * nu);
    if nu > LARGE_NU {
        return Ok(guess);
    }
    let f = |x: f64| t_cdf_unchecked(x, nu) - p;
    let mut width = 0.1 * (1.0 + guess.abs());
    let (mut lo, mut hi) = (guess - width, guess + width);
    while f(lo) > 0.0 {
        width *= 2.0;
        lo = guess - width;
    }
    while f(hi) < 0.0 {
        width *= 2.0;
        hi = guess + width;
    }
    solve_root(f, lo, hi, 1e-15 * (1.0 + guess.abs()))
}

/// Log-density of `ln S` where `S = sqrt(W / nu)`, `W ~ chi^2_nu`.
pub(crate) fn ln_chi_scale_log_density(t: f64, nu: f64) -> f64 {
    let half = 0.5 * nu;
    std::f64::consts::LN_2 + half * (nu.ln() + 2.0 * t)
        - half * (2.0 * t).exp()
        - half * std::f64::consts::LN_2
        - ln_gamma(half)
}

/// Quantile of the chi-square distribution with `nu` degrees of freedom.
pub(crate) fn chi2_quantile(u: f64, nu: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return f64::INFINITY;
    }
    let a = 0.5 * nu;
    let cdf = |w: f64| gamma_lr(a, 0.5 * w);
    // Wilson-Hilferty start
    let z = ppnd16(u);
    let c = 2.0 / (9.0 * nu);
    let mut w = nu * (1.0 - c + z * c.sqrt()).powi(3);
    if !(w > 0.0) {
        // small-u expansion of the lower incomplete gamma
        w = (std::f64::consts::LN_2 + (u.ln() + ln_gamma(a + 1.0)) / a).exp();
    }
    let ln_norm = ln_gamma(a) + a * std::f64::consts::LN_2;
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..100 {
        let fw = cdf(w) - u;
        if fw > 0.0 {
            hi = hi.min(w);
        } else {
            lo = lo.max(w);
        }
        let dens = ((a - 1.0) * w.ln() - 0.5 * w - ln_norm).exp();
        let mut next = w - fw / dens;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * w.max(1.0)
            };
        }
        if (next - w).abs() <= 1e-14 * w.max(1e-300) {
            return next;
        }
        w = next;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_basics() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_quantile(0.975).unwrap() - 1.959964).abs() < 1e-5);
        assert!((std_normal_quantile(0.8).unwrap() - 0.841621).abs() < 1e-5);
        assert!(std_normal_quantile(0.0).is_err());
        assert!(std_normal_quantile(1.0).is_err());
        assert!(std_normal_quantile(f64::NAN).is_err());
    }

    #[test]
    fn normal_round_trip() {
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            let x = std_normal_quantile(p).unwrap();
            assert!(
                (std_normal_cdf(x) - p).abs() <= 1e-12,
                "p={p} err={}",
                std_normal_cdf(x) - p
            );
        }
        for p in [1e-12, 1e-8, 1e-5, 1.0 - 1e-9] {
            let x = std_normal_quantile(p).unwrap();
            assert!(
                (std_normal_cdf(x) - p).abs() <= 1e-12,
                "p={p} err={}",
                std_normal_cdf(x) - p
            );
        }
    }

    #[test]
    fn t_closed_forms() {
        assert!((student_t_quantile(0.95, 1.0).unwrap() - 6.313752).abs() < 1e-4);
        assert_eq!(student_t_cdf(0.0, 7.3).unwrap(), 0.5);
        assert!((student_t_quantile(0.95, 1e6).unwrap() - 1.644854).abs() <= 1e-3);
        // nu = 1 cdf is the Cauchy cdf
        for x in [-3.0_f64, -0.5, 0.2, 4.0] {
            let c = 0.5 + x.atan() / PI;
            assert!((student_t_cdf(x, 1.0).unwrap() - c).abs() < 1e-13);
        }
    }

    #[test]
    fn t_round_trip() {
        for &nu in &[1.0, 2.0, 3.0, 4.5, 7.0, 18.0, 42.0, 207.0, 5000.0] {
            for i in 1..50 {
                let p = i as f64 / 50.0;
                let x = student_t_quantile(p, nu).unwrap();
                let back = student_t_cdf(x, nu).unwrap();
                assert!((back - p).abs() < 1e-10, "nu={nu} p={p} back={back}");
            }
        }
    }

    #[test]
    fn t_invalid() {
        assert!(student_t_cdf(1.0, 0.5).is_err());
        assert!(student_t_quantile(1.2, 4.0).is_err());
        assert!(student_t_quantile(0.5, f64::NAN).is_err());
    }

    #[test]
    fn chi2_quantile_inverts() {
        for &nu in &[1.0, 2.0, 5.5, 42.0, 300.0] {
            for &u in &[1e-6, 0.01, 0.3, 0.5, 0.9, 0.999999] {
                let w = chi2_quantile(u, nu);
                assert!(
                    (gamma_lr(0.5 * nu, 0.5 * w) - u).abs() < 1e-11,
                    "nu={nu} u={u}"
                );
            }
        }
    }

    #[test]
    fn chi_scale_density_integrates_to_one() {
        for &nu in &[1.0, 3.0, 42.0, 1000.0] {
            let (lo, hi, n) = (-60.0, 4.0, 400_000);
            let h = (hi - lo) / n as f64;
            let total: f64 = (0..n)
                .map(|i| ln_chi_scale_log_density(lo + (i as f64 + 0.5) * h, nu).exp() * h)
                .sum();
            assert!((total - 1.0).abs() < 1e-6, "nu={nu} total={total}");
        }
    }
}
