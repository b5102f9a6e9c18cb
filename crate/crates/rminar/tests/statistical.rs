//! Monte Carlo property batteries for the estimator: everywhere
//! consistency, stage-two efficiency, martingale residuals, dispersion
//! tests, and mixed-distribution recovery.

use rminar::distributions::DistSpec;
use rminar::estimation::{
    dispersion_test, four_stage_wls_additive, nb2_shape_estimates, DispersionKind, FitConfig,
};
use rminar::model::{simulate, ModelClass, ModelSpec};
use rminar::rng::mix_seed;

fn poisson_additive(phis: &[f64], mu_eps: f64) -> ModelSpec {
    ModelSpec {
        class: ModelClass::AdditiveN0,
        order: phis.len(),
        coeff_dists: phis.iter().map(|&p| DistSpec::Poisson { phi: p }).collect(),
        innov_dist: DistSpec::Poisson { phi: mu_eps },
        intercept_dist: None,
    }
}

fn mae_of_theta2(spec: &ModelSpec, theta0: &[f64], n: usize, reps: u64, seed: u64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..reps {
        let s = simulate(spec, n, 500, mix_seed(seed, r)).unwrap();
        let fit = four_stage_wls_additive(&s, spec.order, &FitConfig::default()).unwrap();
        let mae: f64 = fit
            .theta2
            .iter()
            .zip(theta0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / theta0.len() as f64;
        total += mae;
        count += 1;
    }
    total / count as f64
}

#[test]
fn consistency_mae_shrinks_with_n_finite_mean() {
    let theta0 = [2.0, 0.3, 0.2];
    let spec = poisson_additive(&theta0[1..], theta0[0]);
    let m500 = mae_of_theta2(&spec, &theta0, 500, 100, 41);
    let m2000 = mae_of_theta2(&spec, &theta0, 2000, 100, 42);
    let m8000 = mae_of_theta2(&spec, &theta0, 8000, 100, 43);
    assert!(
        m500 > m2000 && m2000 > m8000,
        "MAE not monotone: {m500:.4} {m2000:.4} {m8000:.4}"
    );
}

#[test]
fn consistency_mae_shrinks_with_n_infinite_mean() {
    // sum(phi) = 1.2 > 1: everywhere consistency.
    let theta0 = [0.1, 0.5, 0.2, 0.3, 0.2];
    let spec = poisson_additive(&theta0[1..], theta0[0]);
    let m500 = mae_of_theta2(&spec, &theta0, 500, 100, 51);
    let m2000 = mae_of_theta2(&spec, &theta0, 2000, 100, 52);
    let m8000 = mae_of_theta2(&spec, &theta0, 8000, 100, 53);
    assert!(
        m500 > m2000 && m2000 > m8000,
        "MAE not monotone: {m500:.4} {m2000:.4} {m8000:.4}"
    );
}

#[test]
fn stage_two_is_no_less_efficient_than_stage_one() {
    let spec = poisson_additive(&[0.3, 0.2, 0.1, 0.1], 2.0);
    let reps = 300u64;
    let mut t1: Vec<Vec<f64>> = Vec::new();
    let mut t2: Vec<Vec<f64>> = Vec::new();
    for r in 0..reps {
        let s = simulate(&spec, 1000, 500, mix_seed(555, r)).unwrap();
        let fit = four_stage_wls_additive(&s, 4, &FitConfig::default()).unwrap();
        t1.push(fit.theta1);
        t2.push(fit.theta2);
    }
    for j in 0..5 {
        let var = |vs: &Vec<Vec<f64>>| {
            let m: f64 = vs.iter().map(|x| x[j]).sum::<f64>() / reps as f64;
            vs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / (reps - 1) as f64
        };
        let ratio = var(&t2) / var(&t1);
        assert!(ratio <= 1.1, "component {j}: var ratio {ratio:.3}");
    }
}

#[test]
fn residuals_are_centered_on_true_model_fit() {
    let spec = poisson_additive(&[0.3, 0.2], 2.0);
    let s = simulate(&spec, 20_000, 500, 606).unwrap();
    let fit = four_stage_wls_additive(&s, 2, &FitConfig::default()).unwrap();
    let n = fit.residuals_e.len() as f64;
    for (name, resid) in [("e", &fit.residuals_e), ("u", &fit.residuals_u)] {
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let se = (var / n).sqrt();
        assert!(
            mean.abs() <= 4.0 * se,
            "{name}-residual mean {mean:.5} exceeds 4 s.e. {:.5}",
            4.0 * se
        );
    }
}

#[test]
fn dispersion_test_size_under_poisson_truth() {
    // Poisson inputs: Lambda0 = theta0, so |z| <= 1.96 should hold in at
    // least 90% of replications per coordinate.
    let spec = poisson_additive(&[0.3], 2.0);
    let reps = 100u64;
    let mut within = [0usize; 2];
    for r in 0..reps {
        let s = simulate(&spec, 5000, 500, mix_seed(707, r)).unwrap();
        let fit = four_stage_wls_additive(&s, 1, &FitConfig::default()).unwrap();
        let z = dispersion_test(
            &fit.theta2,
            &fit.lambda2,
            &fit.ase_theta,
            &fit.ase_lambda,
            DispersionKind::Poisson,
        );
        for j in 0..2 {
            if z[j].abs() <= 1.96 {
                within[j] += 1;
            }
        }
    }
    for j in 0..2 {
        let frac = within[j] as f64 / reps as f64;
        assert!(frac >= 0.90, "coordinate {j}: coverage {frac}");
    }
}

#[test]
fn dispersion_test_power_under_nb2_innovation() {
    // NB2(2, 2) innovation: variance 2(1+1) = 4 against Poisson's 2, so the
    // innovation coordinate should reject in at least 80% of replications.
    let spec = ModelSpec {
        class: ModelClass::AdditiveN0,
        order: 1,
        coeff_dists: vec![DistSpec::Poisson { phi: 0.3 }],
        innov_dist: DistSpec::Nb2 { r: 2.0, phi: 2.0 },
        intercept_dist: None,
    };
    let reps = 100u64;
    let mut rejected = 0usize;
    for r in 0..reps {
        let s = simulate(&spec, 5000, 500, mix_seed(808, r)).unwrap();
        let fit = four_stage_wls_additive(&s, 1, &FitConfig::default()).unwrap();
        let z = dispersion_test(
            &fit.theta2,
            &fit.lambda2,
            &fit.ase_theta,
            &fit.ase_lambda,
            DispersionKind::Poisson,
        );
        if z[0].abs() > 1.96 {
            rejected += 1;
        }
    }
    let frac = rejected as f64 / reps as f64;
    assert!(frac >= 0.80, "power {frac}");
}

#[test]
fn mixed_distribution_inputs_recovered() {
    // Binomial innovation with Poisson, NB2, and NB1 coefficients in the
    // infinite-mean regime (sum phi = 1.1).
    let spec = ModelSpec {
        class: ModelClass::AdditiveN0,
        order: 3,
        coeff_dists: vec![
            DistSpec::Poisson { phi: 0.3 },
            DistSpec::Nb2 { r: 3.0, phi: 0.2 },
            DistSpec::Nb1 { r: 2.0, phi: 0.6 },
        ],
        innov_dist: DistSpec::Binomial { r: 5, phi: 0.5 },
        intercept_dist: None,
    };
    let theta0 = [0.5, 0.3, 0.2, 0.6];
    let lambda0 = [0.45, 0.3, 0.2133333333333333, 0.9];
    let reps = 200u64;
    let mut mean_t = [0.0; 4];
    let mut mean_l = [0.0; 4];
    for r in 0..reps {
        let s = simulate(&spec, 1000, 500, mix_seed(909, r)).unwrap();
        let fit = four_stage_wls_additive(&s, 3, &FitConfig::default()).unwrap();
        for j in 0..4 {
            mean_t[j] += fit.theta2[j] / reps as f64;
            mean_l[j] += fit.lambda2[j] / reps as f64;
        }
    }
    for j in 0..4 {
        assert!(
            (mean_t[j] - theta0[j]).abs() <= 0.05,
            "theta[{j}]: {:.4} vs {:.4}",
            mean_t[j],
            theta0[j]
        );
        assert!(
            (mean_l[j] - lambda0[j]).abs() <= 0.05,
            "lambda[{j}]: {:.4} vs {:.4}",
            mean_l[j],
            lambda0[j]
        );
    }
    // NB2 shape recovery on the aggregated coefficient-2 estimates:
    // nu = m^2 / (s^2 - m) should sit near the generating r = 3.
    let nu = nb2_shape_estimates(&[mean_t[2]], &[mean_l[2]]);
    let nu = nu[0].expect("coordinate is overdispersed on average");
    assert!((1.5..=6.0).contains(&nu), "nb2 shape {nu}");
}
