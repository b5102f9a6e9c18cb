//! Stationarity, moment, tail-index, and Lyapunov analysis.
//!
//! Mean and second-moment stationarity are read off spectral radii of the
//! expected companion matrix and its expected Kronecker square. Tail
//! exponents solve E(|Phi|^tau) = 1 by bisection on the monotone power
//! moment. The Lyapunov exponent is either -infinity by the zero-atom
//! argument or estimated from renormalized random matrix products.

use crate::distributions::DistSpec;
use crate::error::{Error, Result};
use crate::model::{validate, CompanionDraw, ModelClass, ModelSpec, Series};
use crate::numerics::{kronecker, solve, spectral_radius, Matrix};
use crate::rng::{mix_seed, RngState};

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    /// rho(E(A_t)).
    pub rho_mean: f64,
    /// rho(E(A_t (x) A_t)); None for the multiplicative class.
    pub rho_m2: Option<f64>,
    pub mean_exists: bool,
    pub second_moment_exists: Option<bool>,
    /// Stationary mean; +inf when the mean does not exist.
    pub uncond_mean: f64,
    /// Stationary variance; +inf when the second moment does not exist,
    /// None for the multiplicative class.
    pub uncond_variance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailMode {
    /// E(Phi^tau) for an N0-valued coefficient.
    Raw,
    /// E(|Phi|^tau) for a Z-valued coefficient.
    Absolute,
    /// E(|eps Phi|^tau); the multiplicative-model exponent.
    ProductWithInnovation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailReport {
    pub tau1: Option<f64>,
    pub mode: TailMode,
    pub bracket: (f64, f64),
    pub solver_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    /// Top Lyapunov exponent; -inf under the zero-atom shortcut or when a
    /// sampled matrix product vanishes exactly.
    pub gamma: f64,
    pub std_error: f64,
    pub horizon: usize,
    pub replications: usize,
}

/// Marginal moment structure computed from raw coefficient moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStructure {
    pub rho_mean: f64,
    pub rho_m2: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Expected companion matrix from coefficient means.
pub fn mean_companion(phi: &[f64]) -> Matrix {
    let p = phi.len();
    let mut a = Matrix::zeros(p, p);
    for (j, &v) in phi.iter().enumerate() {
        a.set(0, j, v);
    }
    for i in 1..p {
        a.set(i, i - 1, 1.0);
    }
    a
}

/// E(A_t (x) A_t) from the first two coefficient moments. Independence
/// across coefficients gives E(Phi_i Phi_j) = phi_i phi_j off the diagonal
/// and sigma_i^2 + phi_i^2 on it; the subdiagonal entries of A_t are
/// deterministic.
pub fn mean_companion_kron(phi: &[f64], sigma2: &[f64]) -> Matrix {
    let p = phi.len();
    // Entry description: Some(i) marks coefficient i; None is a constant.
    let entry = |i: usize, j: usize| -> (Option<usize>, f64) {
        if i == 0 {
            (Some(j), 0.0)
        } else if j == i - 1 {
            (None, 1.0)
        } else {
            (None, 0.0)
        }
    };
    let mut out = Matrix::zeros(p * p, p * p);
    for i in 0..p {
        for j in 0..p {
            let e1 = entry(i, j);
            for k in 0..p {
                for l in 0..p {
                    let e2 = entry(k, l);
                    let v = match (e1, e2) {
                        ((Some(a), _), (Some(b), _)) => {
                            if a == b {
                                sigma2[a] + phi[a] * phi[a]
                            } else {
                                phi[a] * phi[b]
                            }
                        }
                        ((Some(a), _), (None, c)) | ((None, c), (Some(a), _)) => phi[a] * c,
                        ((None, c1), (None, c2)) => c1 * c2,
                    };
                    if v != 0.0 {
                        out.set(i * p + k, j * p + l, v);
                    }
                }
            }
        }
    }
    out
}

/// Moment structure of an additive model from raw parameter values
/// (works for fitted estimates as well as exact input moments).
pub fn additive_moment_structure(
    phi: &[f64],
    sigma2_phi: &[f64],
    mu_eps: f64,
    sigma2_eps: f64,
) -> Result<MomentStructure> {
    let p = phi.len();
    let a = mean_companion(phi);
    let rho_mean = spectral_radius(&a)?;
    let kron = mean_companion_kron(phi, sigma2_phi);
    let rho_m2 = spectral_radius(&kron)?;

    let mean = if rho_mean < 1.0 {
        mu_eps / (1.0 - phi.iter().sum::<f64>())
    } else {
        f64::INFINITY
    };

    let variance = if rho_mean < 1.0 && rho_m2 < 1.0 {
        // vec(Gamma_Y) = (I - E(A(x)A))^{-1} ((E(A(x)A) - A(x)A) vec(mu mu') + vec(Gamma_Xi))
        // where vec(mu mu') has every entry mean^2 and Gamma_Xi = sigma2_eps e_1 e_1'.
        let aa = kronecker(&a, &a);
        let ones_mu2 = vec![mean * mean; p * p];
        let mut diff_term = kron.mul_vec(&ones_mu2);
        let aa_term = aa.mul_vec(&ones_mu2);
        for (d, a_t) in diff_term.iter_mut().zip(&aa_term) {
            *d -= a_t;
        }
        diff_term[0] += sigma2_eps; // vec(Gamma_Xi) = sigma2_eps e_1
        let mut system = Matrix::identity(p * p);
        for i in 0..p * p {
            for j in 0..p * p {
                system.add_at(i, j, -kron.get(i, j));
            }
        }
        let gamma_vec = solve(&system, &diff_term)?;
        gamma_vec[0]
    } else {
        f64::INFINITY
    };

    Ok(MomentStructure {
        rho_mean,
        rho_m2,
        mean,
        variance,
    })
}

/// Stationary mean of the multiplicative model (mean recursion only).
pub fn multiplicative_mean(omega: f64, phi: &[f64]) -> f64 {
    let rho = phi.iter().sum::<f64>();
    if rho < 1.0 {
        (1.0 + omega) / (1.0 - rho)
    } else {
        f64::INFINITY
    }
}

/// Build the stationarity report for a model specification.
pub fn stationarity_report(spec: &ModelSpec) -> Result<StationarityReport> {
    validate(spec)?;
    let phi: Vec<f64> = spec.coeff_dists.iter().map(|d| d.mean()).collect();
    let sigma2: Vec<f64> = spec.coeff_dists.iter().map(|d| d.variance()).collect();
    match spec.class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => {
            let ms = additive_moment_structure(
                &phi,
                &sigma2,
                spec.innov_dist.mean(),
                spec.innov_dist.variance(),
            )?;
            Ok(StationarityReport {
                rho_mean: ms.rho_mean,
                rho_m2: Some(ms.rho_m2),
                mean_exists: ms.rho_mean < 1.0,
                second_moment_exists: Some(ms.rho_m2 < 1.0),
                uncond_mean: ms.mean,
                uncond_variance: Some(ms.variance),
            })
        }
        ModelClass::Multiplicative => {
            // E(eps) = 1, so the mean companion is unchanged.
            let a = mean_companion(&phi);
            let rho_mean = spectral_radius(&a)?;
            let omega = spec
                .intercept_dist
                .as_ref()
                .map(|d| d.mean())
                .unwrap_or(0.0);
            Ok(StationarityReport {
                rho_mean,
                rho_m2: None,
                mean_exists: rho_mean < 1.0,
                second_moment_exists: None,
                uncond_mean: multiplicative_mean(omega, &phi),
                uncond_variance: None,
            })
        }
    }
}

const TAIL_BISECTION_CAP: usize = 200;
const POWER_MOMENT_TOL: f64 = 1e-12;

/// Solve E(|.|^tau) = 1 for the Kesten exponent by bisection on
/// (1e-6, bracket_hi). Returns None when the moment never reaches 1 on the
/// bracket (the Kesten condition fails) or never drops below it.
pub fn tail_index(spec: &ModelSpec, mode: TailMode, bracket_hi: f64) -> Result<TailReport> {
    validate(spec)?;
    let moment: Box<dyn Fn(f64) -> Result<f64>> = match mode {
        TailMode::Raw | TailMode::Absolute => {
            if spec.order != 1 {
                return Err(Error::NotSupported(
                    "exact tail solving requires order 1".into(),
                ));
            }
            let coeff = spec.coeff_dists[0].clone();
            Box::new(move |tau| coeff.power_moment(tau, POWER_MOMENT_TOL))
        }
        TailMode::ProductWithInnovation => {
            if spec.order != 1 {
                return Err(Error::NotSupported(
                    "exact tail solving requires order 1".into(),
                ));
            }
            let coeff = spec.coeff_dists[0].clone();
            let innov = spec.innov_dist.clone();
            Box::new(move |tau| product_power_moment(&innov, &coeff, tau))
        }
    };

    // A Diverges from the power moment means the partial sums passed 1e12,
    // which already settles the bisection question (the moment exceeds 1),
    // so it maps to a large positive value instead of aborting.
    let moment = |tau: f64| -> Result<f64> {
        match moment(tau) {
            Ok(v) => Ok(v),
            Err(Error::Diverges) => Ok(1e12),
            Err(e) => Err(e),
        }
    };

    let lo = 1e-6;
    let hi = bracket_hi;
    let f_lo = moment(lo)? - 1.0;
    let f_hi = moment(hi)? - 1.0;
    if f_hi < 0.0 || f_lo > 0.0 {
        // No upward crossing of 1 inside the bracket.
        return Ok(TailReport {
            tau1: None,
            mode,
            bracket: (lo, hi),
            solver_iterations: 0,
        });
    }
    let (mut a, mut b) = (lo, hi);
    let mut iterations = 0;
    let mut mid;
    loop {
        mid = 0.5 * (a + b);
        let fm = moment(mid)? - 1.0;
        iterations += 1;
        if fm.abs() <= 1e-8 || iterations >= TAIL_BISECTION_CAP {
            break;
        }
        if fm > 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(TailReport {
        tau1: Some(mid),
        mode,
        bracket: (lo, hi),
        solver_iterations: iterations,
    })
}

/// E(|eps Phi|^tau). Independence factorizes the expectation when both laws
/// sit on N0; otherwise the innovation support is enumerated explicitly.
fn product_power_moment(innov: &DistSpec, coeff: &DistSpec, tau: f64) -> Result<f64> {
    if innov.is_nonneg_support() && coeff.is_nonneg_support() {
        return Ok(innov.power_moment(tau, POWER_MOMENT_TOL)?
            * coeff.power_moment(tau, POWER_MOMENT_TOL)?);
    }
    let m_coeff = coeff.power_moment(tau, POWER_MOMENT_TOL)?;
    let mut acc = 0.0;
    let mut weight = 0.0;
    for k in -10_000i64..=10_000 {
        let p = innov.pmf(k);
        if p == 0.0 {
            continue;
        }
        weight += p;
        if k != 0 {
            acc += (k as f64).abs().powf(tau) * p * m_coeff;
        }
    }
    if weight < 1.0 - 1e-9 {
        return Err(Error::NumericalBreakdown(
            "innovation support truncation lost probability mass".into(),
        ));
    }
    Ok(acc)
}

/// Monte Carlo (or analytic, under the zero-atom shortcut) top Lyapunov
/// exponent of the companion products.
pub fn lyapunov_mc(
    spec: &ModelSpec,
    horizon: usize,
    reps: usize,
    seed: u64,
) -> Result<LyapunovReport> {
    validate(spec)?;
    if spec.order == 1 {
        let p_zero = match spec.class {
            ModelClass::Multiplicative => {
                let pe = spec.innov_dist.prob_zero();
                let pf = spec.coeff_dists[0].prob_zero();
                1.0 - (1.0 - pe) * (1.0 - pf)
            }
            _ => spec.coeff_dists[0].prob_zero(),
        };
        if p_zero > 0.0 {
            return Ok(LyapunovReport {
                gamma: f64::NEG_INFINITY,
                std_error: 0.0,
                horizon: 0,
                replications: 0,
            });
        }
    }
    let p = spec.order;
    let mut samples = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut rng = RngState::from_seed(mix_seed(seed, r as u64));
        let mut v = vec![1.0; p];
        let mut log_acc = 0.0;
        let mut vanished = false;
        for _ in 0..horizon {
            let CompanionDraw { a, .. } = crate::model::draw_companion(spec, &mut rng);
            v = a.mul_vec(&v);
            let s = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if s == 0.0 {
                vanished = true;
                break;
            }
            log_acc += s.ln();
            for x in v.iter_mut() {
                *x /= s;
            }
        }
        if vanished {
            return Ok(LyapunovReport {
                gamma: f64::NEG_INFINITY,
                std_error: 0.0,
                horizon,
                replications: reps,
            });
        }
        samples.push(log_acc / horizon as f64);
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / reps.max(2) as f64;
    Ok(LyapunovReport {
        gamma: mean,
        std_error: (var / reps as f64).sqrt(),
        horizon,
        replications: reps,
    })
}

/// Hill estimator on the top ceil(k_fraction * n) order statistics of |Y|.
pub fn hill_tail_estimate(series: &Series, k_fraction: f64) -> Result<f64> {
    let n = series.len();
    if n < 1000 {
        return Err(Error::TooShort {
            needed: 1000,
            got: n,
        });
    }
    assert!(
        k_fraction > 0.0 && k_fraction <= 0.1,
        "k_fraction must be in (0, 0.1]"
    );
    let mut abs: Vec<f64> = series.values.iter().map(|&v| (v as f64).abs()).collect();
    abs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (k_fraction * n as f64).ceil() as usize;
    let x_k = abs[k];
    if x_k <= 0.0 {
        return Err(Error::DegenerateTail);
    }
    let sum_log: f64 = abs[..k].iter().map(|x| (x / x_k).ln()).sum();
    if sum_log <= 0.0 {
        return Err(Error::DegenerateTail);
    }
    Ok(k as f64 / sum_log)
}
