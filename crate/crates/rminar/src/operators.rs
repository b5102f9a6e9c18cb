//! Random sum operator (RSO, generalized thinning) and random
//! multiplication operator (RMO), with their exact first and second
//! moments. The RMO is the production path inside the models; the RSO is
//! kept for contrast and testing.

use crate::distributions::DistSpec;
use crate::error::{Error, Result};
use crate::rng::RngState;

/// First two moments of an operator output, plus its conditional structure.
///
/// `cond_var_power` distinguishes the two operators: the RSO conditional
/// variance scales with X, the RMO with X^2.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMoments {
    pub mean: f64,
    pub variance: f64,
    pub cond_mean_coeff: f64,
    pub cond_var_coeff: f64,
    pub cond_var_power: u8,
}

/// alpha o_s X: sum of X iid draws from `summand`. Returns 0 when X = 0.
pub fn random_sum(summand: &DistSpec, x: i64, rng: &mut RngState) -> Result<i64> {
    if x < 0 {
        return Err(Error::NegativeOperand(x));
    }
    let mut acc: i64 = 0;
    for _ in 0..x {
        acc = acc
            .checked_add(summand.sample(rng))
            .ok_or(Error::Overflow { step: 0 })?;
    }
    Ok(acc)
}

/// phi (.) X: draws the multiplier once and returns Phi * X.
pub fn random_mult(multiplier: &DistSpec, x: i64, rng: &mut RngState) -> Result<i64> {
    let phi = multiplier.sample(rng);
    phi.checked_mul(x).ok_or(Error::Overflow { step: 0 })
}

/// Moments of alpha o_s X from the summand law and the operand moments.
pub fn rso_moments(summand: &DistSpec, x_mean: f64, x_var: f64, _x_second: f64) -> OperatorMoments {
    let alpha = summand.mean();
    let sigma2 = summand.variance();
    OperatorMoments {
        mean: alpha * x_mean,
        variance: sigma2 * x_mean + alpha * alpha * x_var,
        cond_mean_coeff: alpha,
        cond_var_coeff: sigma2,
        cond_var_power: 1,
    }
}

/// Moments of phi (.) X; the variance picks up E(X^2) rather than E(X).
pub fn rmo_moments(
    multiplier: &DistSpec,
    x_mean: f64,
    x_var: f64,
    x_second: f64,
) -> OperatorMoments {
    let phi = multiplier.mean();
    let sigma2 = multiplier.variance();
    OperatorMoments {
        mean: phi * x_mean,
        variance: sigma2 * x_second + phi * phi * x_var,
        cond_mean_coeff: phi,
        cond_var_coeff: sigma2,
        cond_var_power: 2,
    }
}
