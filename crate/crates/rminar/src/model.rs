//! Model specification, exact simulation, conditional moments, companion
//! draws, and the order-1 Markov transition kernel.
//!
//! Three classes share one recursion skeleton: the N0-valued additive
//! model, its Z-valued extension, and a multiplicative-error variant whose
//! level is 1 + intercept + coefficient terms. Coefficients are drawn
//! fresh every step, which is what separates these models from thinning
//! autoregressions.

use crate::distributions::DistSpec;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::RngState;
use serde::{Deserialize, Serialize};

/// Hard cap on simulated magnitudes; infinite-mean regimes can excurse.
const VALUE_CAP: i64 = 1 << 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelClass {
    AdditiveN0,
    AdditiveZ,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    N0,
    Z,
}

/// Full generative specification: class, order, and input laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub class: ModelClass,
    pub order: usize,
    /// Coefficient laws Phi_1, ..., Phi_p.
    pub coeff_dists: Vec<DistSpec>,
    /// Innovation law (epsilon).
    pub innov_dist: DistSpec,
    /// Intercept law (omega); multiplicative class only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept_dist: Option<DistSpec>,
}

/// Outcome of `validate`: which zero-mass conditions hold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityFlags {
    /// P(Phi_i = 0) > 0 per coefficient.
    pub coeff_zero_mass: Vec<bool>,
    /// A0 (N0), A0* (Z): every coefficient has an atom at zero.
    pub a0: bool,
    /// A0**: A0 plus P(epsilon = 0) > 0; multiplicative class only.
    pub a0_star_star: Option<bool>,
}

/// Integer-valued observations with their value domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub values: Vec<i64>,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub spec_digest: String,
}

impl Series {
    pub fn new(values: Vec<i64>) -> Self {
        let domain = if values.iter().any(|&v| v < 0) {
            Domain::Z
        } else {
            Domain::N0
        };
        Series {
            values,
            domain,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One joint draw of the vector-form step: companion matrix plus forcing.
#[derive(Debug, Clone)]
pub struct CompanionDraw {
    pub a: Matrix,
    pub forcing: Vec<f64>,
}

/// One step's raw input draws, in the fixed order coefficients, intercept,
/// innovation. Both the scalar recursion and the companion form consume
/// exactly this, which keeps the two paths replay-identical.
struct StepDraws {
    coeffs: Vec<i64>,
    intercept: i64,
    innovation: i64,
}

impl ModelSpec {
    fn draw_step(&self, rng: &mut RngState) -> StepDraws {
        let coeffs: Vec<i64> = self.coeff_dists.iter().map(|d| d.sample(rng)).collect();
        let intercept = match (&self.class, &self.intercept_dist) {
            (ModelClass::Multiplicative, Some(d)) => d.sample(rng),
            _ => 0,
        };
        let innovation = self.innov_dist.sample(rng);
        StepDraws {
            coeffs,
            intercept,
            innovation,
        }
    }

    fn scalar_step(&self, draws: &StepDraws, lags: &[i64], step: usize) -> Result<i64> {
        let mut acc: i64 = 0;
        for (phi, &lag) in draws.coeffs.iter().zip(lags) {
            let term = phi.checked_mul(lag).ok_or(Error::Overflow { step })?;
            acc = acc.checked_add(term).ok_or(Error::Overflow { step })?;
        }
        let y = match self.class {
            ModelClass::AdditiveN0 | ModelClass::AdditiveZ => acc
                .checked_add(draws.innovation)
                .ok_or(Error::Overflow { step })?,
            ModelClass::Multiplicative => {
                let level = acc
                    .checked_add(1 + draws.intercept)
                    .ok_or(Error::Overflow { step })?;
                level
                    .checked_mul(draws.innovation)
                    .ok_or(Error::Overflow { step })?
            }
        };
        if y.unsigned_abs() >= VALUE_CAP as u64 {
            return Err(Error::Overflow { step });
        }
        Ok(y)
    }

    fn digest(&self) -> String {
        // FNV-1a over the canonical JSON; stable across runs and platforms.
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Check class/domain coherence and report the zero-mass stability flags.
pub fn validate(spec: &ModelSpec) -> Result<StabilityFlags> {
    if spec.order == 0 {
        return Err(Error::InvalidSpec("order must be at least 1".into()));
    }
    if spec.coeff_dists.len() != spec.order {
        return Err(Error::InvalidSpec(format!(
            "expected {} coefficient distributions, got {}",
            spec.order,
            spec.coeff_dists.len()
        )));
    }
    for (i, d) in spec.coeff_dists.iter().enumerate() {
        d.validate()
            .map_err(|e| Error::InvalidSpec(format!("coefficient {}: {e}", i + 1)))?;
    }
    spec.innov_dist
        .validate()
        .map_err(|e| Error::InvalidSpec(format!("innovation: {e}")))?;

    match spec.class {
        ModelClass::AdditiveN0 => {
            for (i, d) in spec.coeff_dists.iter().enumerate() {
                if !d.is_nonneg_support() {
                    return Err(Error::InvalidSpec(format!(
                        "coefficient {} must have N0 support in the N0-valued class",
                        i + 1
                    )));
                }
                if d.mean() <= 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "coefficient {} must have positive mean",
                        i + 1
                    )));
                }
            }
            if !spec.innov_dist.is_nonneg_support() || spec.innov_dist.mean() <= 0.0 {
                return Err(Error::InvalidSpec(
                    "innovation must be N0-supported with positive mean".into(),
                ));
            }
            if spec.intercept_dist.is_some() {
                return Err(Error::InvalidSpec(
                    "intercept distribution only applies to the multiplicative class".into(),
                ));
            }
        }
        ModelClass::AdditiveZ => {
            if spec.intercept_dist.is_some() {
                return Err(Error::InvalidSpec(
                    "intercept distribution only applies to the multiplicative class".into(),
                ));
            }
        }
        ModelClass::Multiplicative => {
            let omega = spec.intercept_dist.as_ref().ok_or_else(|| {
                Error::InvalidSpec("multiplicative class requires an intercept distribution".into())
            })?;
            omega
                .validate()
                .map_err(|e| Error::InvalidSpec(format!("intercept: {e}")))?;
            for (i, d) in spec.coeff_dists.iter().enumerate() {
                if !d.is_nonneg_support() {
                    return Err(Error::InvalidSpec(format!(
                        "coefficient {} must have N0 support in the multiplicative class",
                        i + 1
                    )));
                }
            }
            if !omega.is_nonneg_support() {
                return Err(Error::InvalidSpec("intercept must have N0 support".into()));
            }
            if !spec.innov_dist.is_nonneg_support() {
                return Err(Error::InvalidSpec("innovation must have N0 support".into()));
            }
            if (spec.innov_dist.mean() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSpec(format!(
                    "multiplicative innovation must have mean 1, got {}",
                    spec.innov_dist.mean()
                )));
            }
        }
    }

    let coeff_zero_mass: Vec<bool> = spec
        .coeff_dists
        .iter()
        .map(|d| d.prob_zero() > 0.0)
        .collect();
    let a0 = coeff_zero_mass.iter().all(|&b| b);
    let a0_star_star = match spec.class {
        ModelClass::Multiplicative => Some(a0 && spec.innov_dist.prob_zero() > 0.0),
        _ => None,
    };
    Ok(StabilityFlags {
        coeff_zero_mass,
        a0,
        a0_star_star,
    })
}

/// Iterate the recursion from zero initial lags through `burn_in + n`
/// steps and keep the last `n` values. Deterministic given the seed.
pub fn simulate(spec: &ModelSpec, n: usize, burn_in: usize, seed: u64) -> Result<Series> {
    assert!(n >= 1, "simulate requires n >= 1");
    validate(spec)?;
    let p = spec.order;
    let mut rng = RngState::from_seed(seed);
    let mut lags = vec![0i64; p]; // lags[0] = Y_{t-1}
    let total = burn_in + n;
    let mut out = Vec::with_capacity(n);
    for step in 0..total {
        let draws = spec.draw_step(&mut rng);
        let y = spec.scalar_step(&draws, &lags, step)?;
        lags.rotate_right(1);
        lags[0] = y;
        if step >= burn_in {
            out.push(y);
        }
    }
    let domain = match spec.class {
        ModelClass::AdditiveZ => Domain::Z,
        _ => Domain::N0,
    };
    Ok(Series {
        values: out,
        domain,
        provenance: Some(Provenance {
            seed,
            spec_digest: spec.digest(),
        }),
    })
}

/// Conditional mean given the last p values (history[0] = Y_{t-1}).
///
/// theta = (mu_eps, phi_1..phi_p) for the additive classes and
/// (omega, phi_1..phi_p) for the multiplicative one.
pub fn conditional_mean(theta: &[f64], history: &[i64], class: ModelClass) -> f64 {
    let p = theta.len() - 1;
    assert!(history.len() >= p, "history shorter than order");
    let lin: f64 = (0..p).map(|i| theta[i + 1] * history[i] as f64).sum();
    match class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => theta[0] + lin,
        ModelClass::Multiplicative => 1.0 + theta[0] + lin,
    }
}

/// Conditional variance given the last p values.
///
/// Additive: lambda = (sigma2_eps, sigma2_phi_1..p).
/// Multiplicative: lambda = (sigma2_eps, sigma2_omega, sigma2_phi_1..p)
/// and theta is needed for the conditional-mean square.
pub fn conditional_variance(
    theta: &[f64],
    lambda: &[f64],
    history: &[i64],
    class: ModelClass,
) -> f64 {
    match class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => {
            let p = lambda.len() - 1;
            assert!(history.len() >= p, "history shorter than order");
            lambda[0]
                + (0..p)
                    .map(|i| lambda[i + 1] * (history[i] as f64).powi(2))
                    .sum::<f64>()
        }
        ModelClass::Multiplicative => {
            let p = lambda.len() - 2;
            assert!(history.len() >= p, "history shorter than order");
            let sigma2_eps = lambda[0];
            let delta2: f64 = lambda[1]
                + (0..p)
                    .map(|i| lambda[i + 2] * (history[i] as f64).powi(2))
                    .sum::<f64>();
            let mu = conditional_mean(theta, history, class);
            (sigma2_eps + 1.0) * delta2 + sigma2_eps * mu * mu
        }
    }
}

/// One joint draw of (A_t, forcing), consistent with a `simulate` step on
/// the same RNG stream: first entry of A * y_prev + forcing reproduces the
/// scalar recursion output for the same draws.
pub fn draw_companion(spec: &ModelSpec, rng: &mut RngState) -> CompanionDraw {
    let p = spec.order;
    let draws = spec.draw_step(rng);
    let mut a = Matrix::zeros(p, p);
    let mut forcing = vec![0.0; p];
    match spec.class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => {
            for (j, &phi) in draws.coeffs.iter().enumerate() {
                a.set(0, j, phi as f64);
            }
            forcing[0] = draws.innovation as f64;
        }
        ModelClass::Multiplicative => {
            // Top row eps * Phi_i; forcing eps * (1 + omega).
            for (j, &phi) in draws.coeffs.iter().enumerate() {
                a.set(0, j, (draws.innovation * phi) as f64);
            }
            forcing[0] = (draws.innovation * (1 + draws.intercept)) as f64;
        }
    }
    for i in 1..p {
        a.set(i, i - 1, 1.0);
    }
    CompanionDraw { a, forcing }
}

/// Transition kernel P(Y_t = j | Y_{t-1} = i) for the N0-valued order-1
/// model: a finite sum over innovation values k <= j with (j-k)/i integer.
pub fn transition_probability(spec: &ModelSpec, i: i64, j: i64, _tol: f64) -> Result<f64> {
    if spec.class != ModelClass::AdditiveN0 || spec.order != 1 {
        return Err(Error::NotSupported(
            "transition kernel is defined for the N0-valued order-1 model".into(),
        ));
    }
    if i < 0 || j < 0 {
        return Err(Error::InvalidSpec("states must be nonnegative".into()));
    }
    let eps = &spec.innov_dist;
    let phi = &spec.coeff_dists[0];
    if i == 0 {
        return Ok(eps.pmf(j));
    }
    let mut acc = 0.0;
    for k in 0..=j {
        let rem = j - k;
        if rem % i == 0 {
            acc += eps.pmf(k) * phi.pmf(rem / i);
        }
    }
    Ok(acc)
}
