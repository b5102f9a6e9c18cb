//! Parameterized discrete input laws with exact moments, samplers, and
//! numeric power moments.
//!
//! These are the coefficient, innovation, and intercept distributions that
//! drive the autoregressions. Only the mean and variance enter the
//! estimation theory, but exact samplers and pmfs are needed for
//! simulation, transition kernels, and tail-index work.

use crate::error::{Error, Result};
use crate::rng::RngState;
use serde::{Deserialize, Serialize};

/// Discrete input distribution.
///
/// Support is a subset of N0 for every kind except `Skellam`, `PointMass`,
/// and `TwoPoint`, which may realize negative values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistSpec {
    /// Poisson with mean phi.
    Poisson { phi: f64 },
    /// Binomial(r, phi/r): r trials with success probability phi/r, mean phi.
    Binomial { r: u32, phi: f64 },
    /// NB1: negative binomial NB(r*phi, r/(r+1)); mean phi, variance phi(1+1/r).
    Nb1 { r: f64, phi: f64 },
    /// NB2: negative binomial NB(r, r/(r+phi)); mean phi, variance phi(1+phi/r).
    Nb2 { r: f64, phi: f64 },
    /// Geometric on {0,1,...} with mean phi.
    Geometric { phi: f64 },
    /// Bernoulli with mean phi.
    Bernoulli { phi: f64 },
    /// Difference of two independent Poissons with means mu1 and mu2.
    Skellam { mu1: f64, mu2: f64 },
    /// Degenerate at c.
    PointMass { c: i64 },
    /// P(X = 0) = p0, P(X = v) = 1 - p0. Test-friendly law with closed-form
    /// power moments.
    TwoPoint { p0: f64, v: i64 },
}

impl DistSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        match *self {
            DistSpec::Poisson { phi } => {
                if !(phi > 0.0) || !phi.is_finite() {
                    return bad(format!("poisson: phi must be positive, got {phi}"));
                }
            }
            DistSpec::Binomial { r, phi } => {
                if r == 0 {
                    return bad("binomial: r must be a positive integer".into());
                }
                if !(phi > 0.0) || phi > r as f64 {
                    return bad(format!("binomial: need 0 < phi <= r, got phi={phi}, r={r}"));
                }
            }
            DistSpec::Nb1 { r, phi } | DistSpec::Nb2 { r, phi } => {
                if !(r > 0.0) || !r.is_finite() {
                    return bad(format!("negative binomial: r must be positive, got {r}"));
                }
                if !(phi > 0.0) || !phi.is_finite() {
                    return bad(format!(
                        "negative binomial: phi must be positive, got {phi}"
                    ));
                }
            }
            DistSpec::Geometric { phi } => {
                if !(phi > 0.0) || !phi.is_finite() {
                    return bad(format!("geometric: phi must be positive, got {phi}"));
                }
            }
            DistSpec::Bernoulli { phi } => {
                if !(0.0..=1.0).contains(&phi) {
                    return bad(format!("bernoulli: phi must be in [0,1], got {phi}"));
                }
            }
            DistSpec::Skellam { mu1, mu2 } => {
                if !(mu1 >= 0.0) || !(mu2 >= 0.0) || !mu1.is_finite() || !mu2.is_finite() {
                    return bad(format!("skellam: need mu1, mu2 >= 0, got ({mu1}, {mu2})"));
                }
            }
            DistSpec::PointMass { .. } => {}
            DistSpec::TwoPoint { p0, .. } => {
                if !(0.0..=1.0).contains(&p0) {
                    return bad(format!("two_point: p0 must be in [0,1], got {p0}"));
                }
            }
        }
        Ok(())
    }

    /// Exact analytic mean.
    pub fn mean(&self) -> f64 {
        match *self {
            DistSpec::Poisson { phi } => phi,
            DistSpec::Binomial { phi, .. } => phi,
            DistSpec::Nb1 { phi, .. } => phi,
            DistSpec::Nb2 { phi, .. } => phi,
            DistSpec::Geometric { phi } => phi,
            DistSpec::Bernoulli { phi } => phi,
            DistSpec::Skellam { mu1, mu2 } => mu1 - mu2,
            DistSpec::PointMass { c } => c as f64,
            DistSpec::TwoPoint { p0, v } => (1.0 - p0) * v as f64,
        }
    }

    /// Exact analytic variance.
    pub fn variance(&self) -> f64 {
        match *self {
            DistSpec::Poisson { phi } => phi,
            DistSpec::Binomial { r, phi } => phi * (1.0 - phi / r as f64),
            DistSpec::Nb1 { r, phi } => phi * (1.0 + 1.0 / r),
            DistSpec::Nb2 { r, phi } => phi * (1.0 + phi / r),
            DistSpec::Geometric { phi } => phi * (1.0 + phi),
            DistSpec::Bernoulli { phi } => phi * (1.0 - phi),
            DistSpec::Skellam { mu1, mu2 } => mu1 + mu2,
            DistSpec::PointMass { .. } => 0.0,
            DistSpec::TwoPoint { p0, v } => {
                let m = (1.0 - p0) * v as f64;
                (1.0 - p0) * (v as f64).powi(2) - m * m
            }
        }
    }

    /// Whether the support is contained in {0, 1, 2, ...}.
    pub fn is_nonneg_support(&self) -> bool {
        match *self {
            DistSpec::Skellam { mu2, .. } => mu2 == 0.0,
            DistSpec::PointMass { c } => c >= 0,
            DistSpec::TwoPoint { v, .. } => v >= 0,
            _ => true,
        }
    }

    /// P(X = 0); drives the A0 / A0* / A0** checks.
    pub fn prob_zero(&self) -> f64 {
        match *self {
            DistSpec::Poisson { phi } => (-phi).exp(),
            DistSpec::Binomial { r, phi } => (1.0 - phi / r as f64).powi(r as i32),
            DistSpec::Nb1 { r, phi } => (r / (r + 1.0)).powf(r * phi),
            DistSpec::Nb2 { r, phi } => (r / (r + phi)).powf(r),
            DistSpec::Geometric { phi } => 1.0 / (1.0 + phi),
            DistSpec::Bernoulli { phi } => 1.0 - phi,
            DistSpec::Skellam { mu1, mu2 } => {
                // sum_j P(N1 = j) P(N2 = j)
                let mut p1 = (-mu1).exp();
                let mut p2 = (-mu2).exp();
                let mut acc = p1 * p2;
                for j in 1..10_000u32 {
                    p1 *= mu1 / j as f64;
                    p2 *= mu2 / j as f64;
                    let term = p1 * p2;
                    acc += term;
                    if term < 1e-18 * acc.max(1e-300) {
                        break;
                    }
                }
                acc
            }
            DistSpec::PointMass { c } => {
                if c == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            DistSpec::TwoPoint { p0, v } => {
                if v == 0 {
                    1.0
                } else {
                    p0
                }
            }
        }
    }

    /// One exact draw.
    pub fn sample(&self, rng: &mut RngState) -> i64 {
        match *self {
            DistSpec::Poisson { phi } => sample_poisson(phi, rng),
            DistSpec::Binomial { r, phi } => {
                let q = phi / r as f64;
                (0..r).filter(|_| rng.uniform() < q).count() as i64
            }
            DistSpec::Nb1 { r, phi } => {
                // NB(r*phi, r/(r+1)) as Poisson mixed over Gamma(r*phi, 1/r)
                let lambda = sample_gamma(r * phi, rng) / r;
                sample_poisson(lambda, rng)
            }
            DistSpec::Nb2 { r, phi } => {
                // NB(r, r/(r+phi)) as Poisson mixed over Gamma(r, phi/r)
                let lambda = sample_gamma(r, rng) * phi / r;
                sample_poisson(lambda, rng)
            }
            DistSpec::Geometric { phi } => {
                let q = phi / (1.0 + phi);
                let u = rng.uniform_open();
                (u.ln() / q.ln()).floor() as i64
            }
            DistSpec::Bernoulli { phi } => (rng.uniform() < phi) as i64,
            DistSpec::Skellam { mu1, mu2 } => sample_poisson(mu1, rng) - sample_poisson(mu2, rng),
            DistSpec::PointMass { c } => c,
            DistSpec::TwoPoint { p0, v } => {
                if rng.uniform() < p0 {
                    0
                } else {
                    v
                }
            }
        }
    }

    /// pmf at an integer point. Supported for all kinds; Skellam uses the
    /// Poisson-difference convolution series.
    pub fn pmf(&self, k: i64) -> f64 {
        match *self {
            DistSpec::Poisson { phi } => {
                if k < 0 {
                    0.0
                } else {
                    poisson_pmf(phi, k as u64)
                }
            }
            DistSpec::Binomial { r, phi } => {
                if k < 0 || k > r as i64 {
                    return 0.0;
                }
                let q = phi / r as f64;
                let mut p = (1.0 - q).powi(r as i32);
                for j in 0..k as u32 {
                    p *= (r - j) as f64 / (j + 1) as f64 * q / (1.0 - q);
                }
                p
            }
            DistSpec::Nb1 { r, phi } => nb_pmf(r * phi, r / (r + 1.0), k),
            DistSpec::Nb2 { r, phi } => nb_pmf(r, r / (r + phi), k),
            DistSpec::Geometric { phi } => {
                if k < 0 {
                    return 0.0;
                }
                let q = phi / (1.0 + phi);
                (1.0 - q) * q.powi(k as i32)
            }
            DistSpec::Bernoulli { phi } => match k {
                0 => 1.0 - phi,
                1 => phi,
                _ => 0.0,
            },
            DistSpec::Skellam { mu1, mu2 } => skellam_pmf(mu1, mu2, k),
            DistSpec::PointMass { c } => (k == c) as u8 as f64,
            DistSpec::TwoPoint { p0, v } => {
                if k == 0 && v == 0 {
                    1.0
                } else if k == 0 {
                    p0
                } else if k == v {
                    1.0 - p0
                } else {
                    0.0
                }
            }
        }
    }

    /// E(|X|^tau) with the convention 0^tau = 0 for tau > 0, accumulated
    /// until the remaining tail bound drops below `tol` times the sum.
    pub fn power_moment(&self, tau: f64, tol: f64) -> Result<f64> {
        assert!(tau >= 0.0, "power moment requires tau >= 0");
        match *self {
            DistSpec::Bernoulli { phi } => Ok(phi),
            DistSpec::PointMass { c } => Ok(pow_abs(c, tau)),
            DistSpec::TwoPoint { p0, v } => Ok((1.0 - p0) * pow_abs(v, tau)),
            DistSpec::Binomial { r, .. } => {
                let mut acc = 0.0;
                for k in 1..=r as i64 {
                    acc += pow_abs(k, tau) * self.pmf(k);
                }
                Ok(acc)
            }
            DistSpec::Poisson { .. }
            | DistSpec::Nb1 { .. }
            | DistSpec::Nb2 { .. }
            | DistSpec::Geometric { .. } => {
                series_power_moment(|k| self.pmf(k as i64), |k| self.pmf_ratio(k), tau, tol)
            }
            DistSpec::Skellam { mu1, mu2 } => skellam_power_moment(mu1, mu2, tau, tol),
        }
    }

    /// pmf(k+1)/pmf(k) for the series kinds; used for tail bounds.
    fn pmf_ratio(&self, k: u64) -> f64 {
        match *self {
            DistSpec::Poisson { phi } => phi / (k + 1) as f64,
            DistSpec::Nb1 { r, phi } => {
                let s = r * phi;
                (k as f64 + s) / (k + 1) as f64 * (1.0 / (r + 1.0))
            }
            DistSpec::Nb2 { r, phi } => (k as f64 + r) / (k + 1) as f64 * (phi / (r + phi)),
            DistSpec::Geometric { phi } => phi / (1.0 + phi),
            _ => unreachable!("pmf_ratio only defined for series kinds"),
        }
    }
}

fn pow_abs(k: i64, tau: f64) -> f64 {
    let a = k.unsigned_abs() as f64;
    if a == 0.0 {
        0.0
    } else {
        a.powf(tau)
    }
}

fn poisson_pmf(lambda: f64, k: u64) -> f64 {
    let mut p = (-lambda).exp();
    for j in 0..k {
        p *= lambda / (j + 1) as f64;
    }
    p
}

/// NB(s, p) pmf on {0,1,...}: Gamma(k+s)/(Gamma(s) k!) p^s (1-p)^k.
fn nb_pmf(s: f64, p: f64, k: i64) -> f64 {
    if k < 0 {
        return 0.0;
    }
    let mut v = p.powf(s);
    for j in 0..k as u64 {
        v *= (j as f64 + s) / (j + 1) as f64 * (1.0 - p);
    }
    v
}

fn skellam_pmf(mu1: f64, mu2: f64, k: i64) -> f64 {
    // P(N1 - N2 = k) = sum_j P(N1 = k + j) P(N2 = j)
    let mut acc = 0.0;
    let start = if k >= 0 { 0 } else { (-k) as u64 };
    let mut j = start;
    loop {
        let term = poisson_pmf(mu1, (k + j as i64) as u64) * poisson_pmf(mu2, j);
        acc += term;
        j += 1;
        if j > start + 10 && term < 1e-18 * acc.max(1e-300) {
            break;
        }
        if j > 100_000 {
            break;
        }
    }
    acc
}

/// Sum_{k>=1} k^tau pmf(k) with a geometric-ratio tail bound: once the
/// weighted term ratio rho_k = ratio(k) * ((k+1)/k)^tau stays below 1, the
/// remaining tail is at most term_k * rho / (1 - rho).
fn series_power_moment(
    pmf: impl Fn(u64) -> f64,
    ratio: impl Fn(u64) -> f64,
    tau: f64,
    tol: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut term = 0.0;
    for k in 1..5_000_000u64 {
        term = if k == 1 {
            pmf(1)
        } else {
            term * ratio(k - 1) * ((k as f64) / (k as f64 - 1.0)).powf(tau)
        };
        acc += term;
        if acc > 1e12 {
            return Err(Error::Diverges);
        }
        let rho = ratio(k) * ((k as f64 + 1.0) / k as f64).powf(tau);
        if rho < 0.9 {
            let tail_bound = term * rho / (1.0 - rho);
            if tail_bound < tol * acc.max(1e-300) {
                return Ok(acc);
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: 5_000_000,
        context: "power moment series did not meet tolerance".into(),
    })
}

/// E|N1 - N2|^tau by diagonal enumeration over s = n1 + n2, with the
/// Poisson(mu1 + mu2) weighted tail as the truncation bound
/// (|n1 - n2| <= n1 + n2).
fn skellam_power_moment(mu1: f64, mu2: f64, tau: f64, tol: f64) -> Result<f64> {
    if mu1 == 0.0 && mu2 == 0.0 {
        return Ok(0.0);
    }
    let total = mu1 + mu2;
    let mut acc = 0.0;
    let mut p1 = vec![(-mu1).exp()]; // Poisson(mu1) pmf table
    let mut p2 = vec![(-mu2).exp()];
    let mut pois_term = (-total).exp(); // Poisson(total) pmf at s, for the bound
    for s in 0..2_000_000u64 {
        if s > 0 {
            let j = s as usize;
            p1.push(p1[j - 1] * mu1 / s as f64);
            p2.push(p2[j - 1] * mu2 / s as f64);
            pois_term *= total / s as f64;
        }
        let su = s as usize;
        for n1 in 0..=su {
            let k = 2 * n1 as i64 - s as i64;
            if k != 0 {
                acc += pow_abs(k, tau) * p1[n1] * p2[su - n1];
            }
        }
        if acc > 1e12 {
            return Err(Error::Diverges);
        }
        let rho = total / (s as f64 + 1.0) * ((s as f64 + 1.0) / s.max(1) as f64).powf(tau);
        if rho < 0.9 {
            let tail_bound = pow_abs(s as i64 + 1, tau) * pois_term * rho / (1.0 - rho);
            if tail_bound < tol * acc.max(1e-300) {
                return Ok(acc);
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: 2_000_000,
        context: "skellam power moment did not meet tolerance".into(),
    })
}

const POISSON_INVERSION_CUTOFF: f64 = 30.0;

/// Exact Poisson draw. Sequential inversion below the cutoff; larger means
/// are split additively into sub-Poisson draws, which stays exact.
pub fn sample_poisson(lambda: f64, rng: &mut RngState) -> i64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda > POISSON_INVERSION_CUTOFF {
        let chunks = (lambda / POISSON_INVERSION_CUTOFF).ceil() as u64;
        let sub = lambda / chunks as f64;
        return (0..chunks).map(|_| poisson_inversion(sub, rng)).sum();
    }
    poisson_inversion(lambda, rng)
}

fn poisson_inversion(lambda: f64, rng: &mut RngState) -> i64 {
    let u = rng.uniform();
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut k = 0i64;
    while u >= cdf && k < 1_000_000 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

/// Marsaglia-Tsang gamma draw with unit scale.
pub fn sample_gamma(shape: f64, rng: &mut RngState) -> f64 {
    if shape < 1.0 {
        // boost: Gamma(a) = Gamma(a + 1) * U^(1/a)
        let g = sample_gamma(shape + 1.0, rng);
        return g * rng.uniform_open().powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.standard_normal();
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = rng.uniform_open();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}
