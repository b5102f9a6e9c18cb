//! Replicated simulation-estimation experiments: Mean, StD, and averaged
//! ASE per parameter over independent replications.
//!
//! Replications are split into fixed-size blocks that accumulate
//! streaming (Welford) statistics; blocks run in parallel and merge in
//! block order, so the result is bit-identical for any worker count.

use crate::error::{Error, Result};
use crate::estimation::{
    four_stage_wls_additive, four_stage_wls_multiplicative, FitConfig, FitResult, VarianceLink,
};
use crate::model::{simulate, validate, ModelClass, ModelSpec};
use crate::rng::mix_seed;
use rayon::prelude::*;
use serde::Deserialize;

const BLOCK_SIZE: u64 = 32;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub model: ModelSpec,
    pub n: usize,
    pub reps: usize,
    pub master_seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub workers: usize,
}

fn default_burn_in() -> usize {
    500
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub labels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Average of the per-replication asymptotic standard errors.
    pub ase: Vec<f64>,
    pub failures: usize,
    pub reps: usize,
    pub wall_secs: f64,
}

impl StudyResult {
    /// Equality of the statistical payload (wall time excluded).
    pub fn same_stats(&self, other: &StudyResult) -> bool {
        self.labels == other.labels
            && self.mean == other.mean
            && self.std == other.std
            && self.ase == other.ase
            && self.failures == other.failures
            && self.reps == other.reps
    }
}

#[derive(Clone)]
struct Welford {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    ase_sum: Vec<f64>,
    failures: usize,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            ase_sum: vec![0.0; dim],
            failures: 0,
        }
    }

    fn push(&mut self, values: &[f64], ases: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for j in 0..values.len() {
            let delta = values[j] - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (values[j] - self.mean[j]);
            self.ase_sum[j] += ases[j];
        }
    }

    fn merge(mut self, other: &Welford) -> Welford {
        if other.count == 0 {
            self.failures += other.failures;
            return self;
        }
        if self.count == 0 {
            let mut o = other.clone();
            o.failures += self.failures;
            return o;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
            self.mean[j] += delta * nb / n;
            self.ase_sum[j] += other.ase_sum[j];
        }
        self.count += other.count;
        self.failures += other.failures;
        self
    }
}

/// Labels and the fitted parameter/ASE vectors for one replication.
fn extract(fit: &FitResult) -> (Vec<f64>, Vec<f64>) {
    match fit.class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => {
            let mut v = fit.theta2.clone();
            v.extend_from_slice(&fit.lambda2);
            let mut a = fit.ase_theta.clone();
            a.extend_from_slice(&fit.ase_lambda);
            (v, a)
        }
        ModelClass::Multiplicative => match fit.sigma_eps2 {
            Some(s2) => {
                let mut v = fit.theta2.clone();
                v.push(s2);
                let mut a = fit.ase_theta.clone();
                a.push(fit.ase_lambda.first().copied().unwrap_or(f64::NAN));
                (v, a)
            }
            None => {
                let mut v = fit.theta2.clone();
                v.extend_from_slice(&fit.lambda2);
                let mut a = fit.ase_theta.clone();
                a.extend_from_slice(&fit.ase_lambda);
                (v, a)
            }
        },
    }
}

fn labels_for(spec: &ModelSpec, cfg: &FitConfig) -> Vec<String> {
    let p = spec.order;
    match spec.class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => {
            let mut l = vec!["mu_eps".to_string()];
            l.extend((1..=p).map(|i| format!("phi_{i}")));
            l.push("sigma2_eps".to_string());
            l.extend((1..=p).map(|i| format!("sigma2_phi_{i}")));
            l
        }
        ModelClass::Multiplicative => {
            let mut l = vec!["omega".to_string()];
            l.extend((1..=p).map(|i| format!("phi_{i}")));
            if matches!(cfg.variance_link, VarianceLink::Free) {
                l.push("sigma2_eps".to_string());
                l.push("sigma2_omega".to_string());
                l.extend((1..=p).map(|i| format!("sigma2_phi_{i}")));
            } else {
                l.push("sigma2_eps".to_string());
            }
            l
        }
    }
}

fn run_replication(cfg: &StudyConfig, rep: u64) -> Result<FitResult> {
    let seed = mix_seed(cfg.master_seed, rep);
    let series = simulate(&cfg.model, cfg.n, cfg.burn_in, seed)?;
    match cfg.model.class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => {
            four_stage_wls_additive(&series, cfg.model.order, &cfg.fit)
        }
        ModelClass::Multiplicative => {
            four_stage_wls_multiplicative(&series, cfg.model.order, &cfg.fit)
        }
    }
}

/// Run the replication study. Per-replication failures are counted, not
/// fatal; the result depends only on (master_seed, reps), never on worker
/// scheduling.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    validate(&cfg.model)?;
    if cfg.reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    if cfg.n <= 10 * (cfg.model.order + 1) {
        return Err(Error::InvalidConfig(format!(
            "n = {} too small for order {}",
            cfg.n, cfg.model.order
        )));
    }
    let labels = labels_for(&cfg.model, &cfg.fit);
    let dim = labels.len();
    let start = std::time::Instant::now();

    let n_blocks = (cfg.reps as u64).div_ceil(BLOCK_SIZE);
    let run_blocks = || -> Vec<Welford> {
        (0..n_blocks)
            .into_par_iter()
            .map(|b| {
                let lo = b * BLOCK_SIZE;
                let hi = ((b + 1) * BLOCK_SIZE).min(cfg.reps as u64);
                let mut acc = Welford::new(dim);
                for rep in lo..hi {
                    match run_replication(cfg, rep) {
                        Ok(fit) => {
                            let (v, a) = extract(&fit);
                            debug_assert_eq!(v.len(), dim);
                            acc.push(&v, &a);
                        }
                        Err(_) => acc.failures += 1,
                    }
                }
                acc
            })
            .collect()
    };
    let blocks: Vec<Welford> = if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(run_blocks)
    } else {
        run_blocks()
    };

    let merged = blocks
        .into_iter()
        .fold(Welford::new(dim), |acc, b| acc.merge(&b));
    let successes = merged.count;
    if successes == 0 {
        return Err(Error::NoConvergence {
            iterations: cfg.reps,
            context: "every replication failed".into(),
        });
    }
    let std: Vec<f64> = merged
        .m2
        .iter()
        .map(|&m2| {
            if successes > 1 {
                (m2 / (successes as f64 - 1.0)).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let ase: Vec<f64> = merged
        .ase_sum
        .iter()
        .map(|s| s / successes as f64)
        .collect();
    Ok(StudyResult {
        labels,
        mean: merged.mean,
        std,
        ase,
        failures: merged.failures,
        reps: cfg.reps,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DistSpec;

    fn poisson_spec(phis: &[f64], mu_eps: f64) -> ModelSpec {
        ModelSpec {
            class: ModelClass::AdditiveN0,
            order: phis.len(),
            coeff_dists: phis.iter().map(|&p| DistSpec::Poisson { phi: p }).collect(),
            innov_dist: DistSpec::Poisson { phi: mu_eps },
            intercept_dist: None,
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let base = StudyConfig {
            model: poisson_spec(&[0.3], 2.0),
            n: 300,
            reps: 48,
            master_seed: 7,
            burn_in: 200,
            fit: FitConfig::default(),
            workers: 1,
        };
        let single = run_study(&base).unwrap();
        let mut eight = base.clone();
        eight.workers = 8;
        let parallel = run_study(&eight).unwrap();
        assert!(
            single.same_stats(&parallel),
            "results differ across worker counts"
        );
    }

    #[test]
    fn degenerate_spec_zero_std() {
        // Deterministic inputs: every replication produces the same fit.
        let spec = ModelSpec {
            class: ModelClass::AdditiveZ,
            order: 1,
            coeff_dists: vec![DistSpec::PointMass { c: 1 }],
            innov_dist: DistSpec::PointMass { c: 1 },
            intercept_dist: None,
        };
        let cfg = StudyConfig {
            model: spec,
            n: 100,
            reps: 8,
            master_seed: 3,
            burn_in: 0,
            fit: FitConfig::default(),
            workers: 1,
        };
        let res = run_study(&cfg).unwrap();
        assert_eq!(res.failures, 0);
        for s in &res.std {
            assert!(s.abs() < 1e-12, "std {s}");
        }
    }

    #[test]
    fn std_shrinks_like_root_n() {
        let mk = |n: usize| StudyConfig {
            model: poisson_spec(&[0.3], 2.0),
            n,
            reps: 300,
            master_seed: 11,
            burn_in: 300,
            fit: FitConfig::default(),
            workers: 0,
        };
        let small = run_study(&mk(500)).unwrap();
        let large = run_study(&mk(2000)).unwrap();
        // theta2 components are indices 0..=1
        for j in 0..2 {
            let ratio = small.std[j] / large.std[j];
            assert!(
                (1.6..=2.4).contains(&ratio),
                "std ratio {ratio} for {}",
                small.labels[j]
            );
        }
    }

    #[test]
    fn labels_match_layout() {
        let cfg = StudyConfig {
            model: poisson_spec(&[0.3, 0.2], 2.0),
            n: 200,
            reps: 4,
            master_seed: 1,
            burn_in: 100,
            fit: FitConfig::default(),
            workers: 1,
        };
        let res = run_study(&cfg).unwrap();
        assert_eq!(
            res.labels,
            vec![
                "mu_eps",
                "phi_1",
                "phi_2",
                "sigma2_eps",
                "sigma2_phi_1",
                "sigma2_phi_2"
            ]
        );
        assert_eq!(res.mean.len(), res.labels.len());
    }
}
