//! ACF/PACF, Pearson residuals, order selection, and in-sample plus
//! rolling out-of-sample fit metrics.

use crate::error::{Error, Result};
use crate::estimation::{
    four_stage_wls_additive, four_stage_wls_multiplicative, FitConfig, FitResult,
};
use crate::model::{conditional_mean, conditional_variance, ModelClass, Series};
use crate::theory::{additive_moment_structure, multiplicative_mean};

const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    /// acf[k] is the lag-k autocorrelation; acf[0] = 1.
    pub acf: Vec<f64>,
    /// pacf[k] is the lag-k partial autocorrelation; pacf[0] = 1.
    pub pacf: Vec<f64>,
    /// +-1.96/sqrt(n) white-noise band.
    pub conf_band: f64,
    pub pearson_residuals: Vec<f64>,
    pub mar: f64,
    pub msr: f64,
    pub mspr: f64,
    /// Model-implied stationary mean (+inf when it does not exist).
    pub generated_mean: f64,
    /// Model-implied stationary variance; None for the multiplicative class.
    pub generated_variance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct InSampleMetrics {
    pub mar: f64,
    pub msr: f64,
    pub mspr: f64,
    pub generated_mean: f64,
    pub generated_variance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ForecastEvalRow {
    pub n_c: usize,
    pub msfe: f64,
    pub mafe: f64,
    pub mspfe: f64,
}

#[derive(Debug)]
pub struct OrderRow {
    pub p: usize,
    pub outcome: Result<InSampleMetrics>,
}

/// Biased (1/n) sample autocorrelation out to `max_lag`.
pub fn acf(series: &Series, max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    assert!(n > max_lag, "series must be longer than max_lag");
    let x: Vec<f64> = series.values.iter().map(|&v| v as f64).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(1.0);
    for k in 1..=max_lag {
        let ck: f64 = (k..n)
            .map(|t| (x[t] - mean) * (x[t - k] - mean))
            .sum::<f64>()
            / n as f64;
        out.push(ck / c0);
    }
    Ok(out)
}

/// Durbin-Levinson partial autocorrelations from the sample ACF.
pub fn pacf(series: &Series, max_lag: usize) -> Result<Vec<f64>> {
    let r = acf(series, max_lag)?;
    let mut out = vec![1.0];
    let mut coeffs: Vec<f64> = Vec::new();
    let mut pred_var = 1.0;
    for k in 1..=max_lag {
        if pred_var <= 0.0 {
            return Err(Error::NumericalBreakdown(format!(
                "prediction variance pivot {pred_var} at lag {k}"
            )));
        }
        let mut num = r[k];
        for (j, &c) in coeffs.iter().enumerate() {
            num -= c * r[k - 1 - j];
        }
        let kappa = num / pred_var;
        let mut next = Vec::with_capacity(k);
        for j in 0..k - 1 {
            next.push(coeffs[j] - kappa * coeffs[k - 2 - j]);
        }
        next.push(kappa);
        coeffs = next;
        pred_var *= 1.0 - kappa * kappa;
        out.push(kappa);
    }
    Ok(out)
}

fn fitted_moments_at(series: &Series, fit: &FitResult, t: usize) -> (f64, f64) {
    let p = fit.order;
    let history: Vec<i64> = (1..=p).map(|lag| series.values[t - lag]).collect();
    let mu = conditional_mean(&fit.theta2, &history, fit.class);
    let lambda: Vec<f64> = fit.lambda2.iter().map(|&v| v.max(0.0)).collect();
    let v = conditional_variance(&fit.theta2, &lambda, &history, fit.class);
    (mu, v)
}

/// (Y_t - mu_t) / sqrt(V_t) over t = p+1..n.
pub fn pearson_residuals(series: &Series, fit: &FitResult) -> Result<Vec<f64>> {
    let p = fit.order;
    let n = series.len();
    let mut out = Vec::with_capacity(n - p);
    for t in p..n {
        let (mu, v) = fitted_moments_at(series, fit, t);
        if v <= 0.0 {
            return Err(Error::NonpositiveVariance { index: t });
        }
        out.push((series.values[t] as f64 - mu) / v.sqrt());
    }
    Ok(out)
}

/// MAR, MSR, MSPR, and the model-generated stationary moments.
pub fn in_sample_metrics(series: &Series, fit: &FitResult) -> Result<InSampleMetrics> {
    let p = fit.order;
    let n = series.len();
    let count = (n - p) as f64;
    let mut mar = 0.0;
    let mut msr = 0.0;
    let mut mspr = 0.0;
    for t in p..n {
        let (mu, v) = fitted_moments_at(series, fit, t);
        let e = series.values[t] as f64 - mu;
        mar += e.abs();
        msr += e * e;
        mspr += e * e / v.max(VARIANCE_FLOOR);
    }
    mar /= count;
    msr /= count;
    mspr /= count;

    let (generated_mean, generated_variance) = match fit.class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => {
            let ms = additive_moment_structure(
                &fit.theta2[1..],
                &fit.lambda2[1..]
                    .iter()
                    .map(|&v| v.max(0.0))
                    .collect::<Vec<_>>(),
                fit.theta2[0],
                fit.lambda2[0].max(0.0),
            )?;
            (ms.mean, Some(ms.variance))
        }
        ModelClass::Multiplicative => (multiplicative_mean(fit.theta2[0], &fit.theta2[1..]), None),
    };
    Ok(InSampleMetrics {
        mar,
        msr,
        mspr,
        generated_mean,
        generated_variance,
    })
}

/// Full diagnostics bundle for a fitted model.
pub fn diagnostics_report(
    series: &Series,
    fit: &FitResult,
    max_lag: usize,
) -> Result<DiagnosticsReport> {
    let acf_vals = acf(series, max_lag)?;
    let pacf_vals = pacf(series, max_lag)?;
    let resid = pearson_residuals(series, fit)?;
    let metrics = in_sample_metrics(series, fit)?;
    Ok(DiagnosticsReport {
        acf: acf_vals,
        pacf: pacf_vals,
        conf_band: 1.96 / (series.len() as f64).sqrt(),
        pearson_residuals: resid,
        mar: metrics.mar,
        msr: metrics.msr,
        mspr: metrics.mspr,
        generated_mean: metrics.generated_mean,
        generated_variance: metrics.generated_variance,
    })
}

fn fit_for_class(
    series: &Series,
    class: ModelClass,
    p: usize,
    cfg: &FitConfig,
) -> Result<FitResult> {
    match class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => four_stage_wls_additive(series, p, cfg),
        ModelClass::Multiplicative => four_stage_wls_multiplicative(series, p, cfg),
    }
}

/// One fit per order p = 1..p_max; rows keep going past per-order failures.
pub fn order_selection_report(
    series: &Series,
    p_max: usize,
    class: ModelClass,
    cfg: &FitConfig,
) -> Result<Vec<OrderRow>> {
    if p_max * 10 >= series.len() {
        return Err(Error::InvalidConfig(format!(
            "p_max {p_max} too large for series of length {}",
            series.len()
        )));
    }
    let mut rows = Vec::with_capacity(p_max);
    for p in 1..=p_max {
        let outcome =
            fit_for_class(series, class, p, cfg).and_then(|fit| in_sample_metrics(series, &fit));
        rows.push(OrderRow { p, outcome });
    }
    Ok(rows)
}

/// Fit on the first n_c observations, then score one-step-ahead forecasts
/// over t = n_c+1..n using realized lags.
pub fn rolling_forecast_eval(
    series: &Series,
    class: ModelClass,
    p: usize,
    cfg: &FitConfig,
    train_sizes: &[usize],
) -> Result<Vec<ForecastEvalRow>> {
    let n = series.len();
    let mut rows = Vec::with_capacity(train_sizes.len());
    for &n_c in train_sizes {
        if n_c <= 10 * p || n_c >= n {
            return Err(Error::InvalidConfig(format!(
                "train size {n_c} must lie in (10p, n) = ({}, {n})",
                10 * p
            )));
        }
        let train = Series {
            values: series.values[..n_c].to_vec(),
            domain: series.domain,
            provenance: None,
        };
        let fit = fit_for_class(&train, class, p, cfg)?;
        let count = (n - n_c) as f64;
        let mut msfe = 0.0;
        let mut mafe = 0.0;
        let mut mspfe = 0.0;
        for t in n_c..n {
            let (mu, v) = fitted_moments_at(series, &fit, t);
            let e = series.values[t] as f64 - mu;
            msfe += e * e;
            mafe += e.abs();
            mspfe += e * e / v.max(VARIANCE_FLOOR);
        }
        rows.push(ForecastEvalRow {
            n_c,
            msfe: msfe / count,
            mafe: mafe / count,
            mspfe: mspfe / count,
        });
    }
    Ok(rows)
}
