use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

pub mod oracle {
    use super::*;

    pub fn pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    pub fn cdf(x: f64) -> f64 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }

    /// Composite Simpson rule with `n` (even) intervals.
    pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        if b <= a {
            return 0.0;
        }
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    const LO: f64 = -9.0;

    pub fn bvn(a: f64, b: f64, r: f64, n: usize) -> f64 {
        let s = (1.0 - r * r).sqrt();
        simpson(|x| pdf(x) * cdf((b - r * x) / s), LO, a.min(9.0), n)
    }

    /// Condition on the first coordinate and integrate the bivariate remainder.
    pub fn mvn(upper: &[f64], corr: &DMatrix<f64>, n: usize) -> f64 {
        match upper.len() {
            1 => cdf(upper[0]),
            2 => bvn(upper[0], upper[1], corr[(0, 1)], n),
            3 => {
                let (r12, r13, r23) = (corr[(0, 1)], corr[(0, 2)], corr[(1, 2)]);
                let (s2, s3) = ((1.0 - r12 * r12).sqrt(), (1.0 - r13 * r13).sqrt());
                let rc = (r23 - r12 * r13) / (s2 * s3);
                simpson(
                    |x| pdf(x) * bvn((upper[1] - r12 * x) / s2, (upper[2] - r13 * x) / s3, rc, n),
                    LO,
                    upper[0].min(9.0),
                    n,
                )
            }
            _ => unreachable!(),
        }
    }

    /// Multivariate t as a mixture over `s = sqrt(W / nu)`, integrated in `ln s`.
    pub fn mvt(upper: &[f64], corr: &DMatrix<f64>, nu: f64, n_inner: usize, n_outer: usize) -> f64 {
        let log_const = -(nu / 2.0) * std::f64::consts::LN_2 - ln_gamma(nu / 2.0);
        let density = |t: f64| {
            let w = nu * (2.0 * t).exp();
            ((nu / 2.0 - 1.0) * w.ln() - w / 2.0 + log_const).exp() * 2.0 * w
        };
        let sd = 1.0 / (2.0 * nu).sqrt();
        let (lo, hi) = ((-12.0 * sd).max(-7.0), (10.0 * sd).min(2.5));
        simpson(
            |t| {
                let s = t.exp();
                let scaled: Vec<f64> = upper.iter().map(|u| u * s).collect();
                density(t) * mvn(&scaled, corr, n_inner)
            },
            lo,
            hi,
            n_outer,
        )
    }
}

pub fn random_corr(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    loop {
        let v: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                x.iter().map(|a| a / norm).collect()
            })
            .collect();
        let c = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                1.0
            } else {
                v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum()
            }
        });
        if (0..m).all(|i| (0..m).all(|j| i == j || c[(i, j)].abs() < 0.95)) {
            return c;
        }
    }
}

pub fn equicorrelated(m: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho })
}

pub struct Case {
    pub upper: Vec<f64>,
    pub corr: DMatrix<f64>,
    pub nu: Option<f64>,
}

/// The fixed 200-case rectangle suite: M <= 3, normal and t.
pub fn suite() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let mut cases = Vec::with_capacity(200);
    for i in 0..200 {
        let m = match i % 10 {
            0 => 1,
            1..=4 => 2,
            _ => 3,
        };
        let corr = if i % 3 == 0 {
            equicorrelated(m, rng.random_range(-0.4..0.9))
        } else {
            random_corr(m, &mut rng)
        };
        let upper = (0..m).map(|_| rng.random_range(-2.0..2.8)).collect();
        let nu = if i % 2 == 0 {
            None
        } else {
            Some([3.0, 5.0, 12.0, 42.0][rng.random_range(0..4)])
        };
        cases.push(Case { upper, corr, nu });
    }
    cases
}

pub fn oracle_value(c: &Case) -> f64 {
    match c.nu {
        None => oracle::mvn(&c.upper, &c.corr, 600),
        Some(nu) => oracle::mvt(&c.upper, &c.corr, nu, 160, 160),
    }
}
