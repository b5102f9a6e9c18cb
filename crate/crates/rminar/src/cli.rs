//! Command-line front end: CSV/JSON ingestion, subcommand dispatch, and
//! structured output documents.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
//! failure. Every numeric value in an output document is finite or an
//! explicit "inf" / "-inf" / "none" token.

use crate::diagnostics::{diagnostics_report, order_selection_report, rolling_forecast_eval};
use crate::error::{Error, Result};
use crate::estimation::{
    four_stage_wls_additive, four_stage_wls_multiplicative, FitConfig, FitResult, VarianceLink,
};
use crate::mc_study::{run_study, StudyConfig};
use crate::model::{simulate, validate, Domain, ModelClass, ModelSpec, Series};
use crate::theory::{lyapunov_mc, stationarity_report, tail_index, TailMode};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Map, Value};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "rminar",
    version,
    about = "Random-multiplication integer-valued AR models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a series from a model file and write it as CSV.
    Simulate(SimulateArgs),
    /// Stationarity, moment, tail, and Lyapunov analysis of a model file.
    Analyze(AnalyzeArgs),
    /// Fit a model to a CSV series by four-stage weighted least squares.
    Fit(FitArgs),
    /// ACF/PACF, Pearson residuals, in-sample metrics, and order selection.
    Diagnose(DiagnoseArgs),
    /// Rolling out-of-sample forecast evaluation.
    ForecastEval(ForecastEvalArgs),
    /// Replicated simulation-estimation study from a config file.
    McStudy(McStudyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Seed for the Lyapunov Monte Carlo.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 50.0)]
    bracket_hi: f64,
    #[arg(long, default_value_t = 5000)]
    horizon: usize,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    /// N0-valued additive model.
    Additive,
    /// Z-valued additive model.
    AdditiveZ,
    /// Multiplicative-error model.
    Multiplicative,
}

impl ClassArg {
    fn to_class(self) -> ModelClass {
        match self {
            ClassArg::Additive => ModelClass::AdditiveN0,
            ClassArg::AdditiveZ => ModelClass::AdditiveZ,
            ClassArg::Multiplicative => ModelClass::Multiplicative,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    series: PathBuf,
    #[arg(long, value_enum)]
    class: ClassArg,
    #[arg(long)]
    order: usize,
    /// free | poisson | geometric | proportional:<c>
    #[arg(long, default_value = "free")]
    variance_link: String,
    /// Comma-separated stage-one weight parameters.
    #[arg(long)]
    lambda_star: Option<String>,
    #[arg(long)]
    theta_star: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    series: PathBuf,
    #[arg(long, value_enum)]
    class: ClassArg,
    #[arg(long)]
    order: usize,
    #[arg(long, default_value = "free")]
    variance_link: String,
    #[arg(long, default_value_t = 20)]
    max_lag: usize,
    /// Fit every order from 1 to this bound and tabulate the metrics.
    #[arg(long)]
    order_table: Option<usize>,
    /// Write a plot-ready lag,acf,pacf CSV here.
    #[arg(long)]
    plot_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastEvalArgs {
    #[arg(long)]
    series: PathBuf,
    #[arg(long, value_enum)]
    class: ClassArg,
    #[arg(long)]
    order: usize,
    #[arg(long, default_value = "free")]
    variance_link: String,
    /// Comma-separated training sizes n_c.
    #[arg(long)]
    train_sizes: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McStudyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the worker count from the config file.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Versioned model document: {"version": 1, "model": {...}}.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    model: ModelSpec,
}

/// Versioned study document; all knobs at the top level beside "version".
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyFile {
    version: u32,
    model: ModelSpec,
    n: usize,
    reps: usize,
    master_seed: u64,
    #[serde(default)]
    burn_in: Option<usize>,
    #[serde(default)]
    fit: Option<FitConfig>,
    #[serde(default)]
    workers: Option<usize>,
}

/// Parse argv and run; returns the process exit code.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!(
                "error: code={} kind={} msg=\"{}\"",
                e.exit_code(),
                e.kind(),
                e
            );
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::ForecastEval(a) => cmd_forecast_eval(a),
        Command::McStudy(a) => cmd_mc_study(a),
    }
}

fn load_model(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    if file.version != 1 {
        return Err(Error::InvalidConfig(format!(
            "unsupported model file version {}",
            file.version
        )));
    }
    validate(&file.model)?;
    Ok(file.model)
}

/// Read a series CSV: one integer per data row, optional "y" header.
pub fn read_series_csv(path: &Path) -> Result<Series> {
    let text = std::fs::read_to_string(path)?;
    parse_series_csv(&text)
}

pub fn parse_series_csv(text: &str) -> Result<Series> {
    let mut values = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && line.eq_ignore_ascii_case("y") {
            continue;
        }
        let v: i64 = line.parse().map_err(|_| Error::ParseError {
            line: idx + 1,
            message: format!("expected an integer, got {line:?}"),
        })?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::ParseError {
            line: 1,
            message: "no observations found".into(),
        });
    }
    Ok(Series::new(values))
}

pub fn write_series_csv(series: &Series) -> String {
    let mut out = String::from("y\n");
    for v in &series.values {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

fn parse_variance_link(s: &str) -> Result<VarianceLink> {
    match s {
        "free" => Ok(VarianceLink::Free),
        "poisson" => Ok(VarianceLink::Poisson),
        "geometric" => Ok(VarianceLink::Geometric),
        other => {
            if let Some(c) = other.strip_prefix("proportional:") {
                let c: f64 = c.parse().map_err(|_| {
                    Error::InvalidConfig(format!("bad proportionality constant in {other:?}"))
                })?;
                if c <= 0.0 {
                    return Err(Error::InvalidConfig(
                        "proportionality constant must be positive".into(),
                    ));
                }
                Ok(VarianceLink::Proportional(c))
            } else {
                Err(Error::InvalidConfig(format!(
                    "unknown variance link {other:?} (expected free, poisson, geometric, or proportional:<c>)"
                )))
            }
        }
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad number {tok:?} in list")))
        })
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad count {tok:?} in list")))
        })
        .collect()
}

/// Map a float to JSON: finite numbers stay numbers, the rest become
/// explicit tokens (never NaN text).
fn num(x: f64) -> Value {
    if x.is_finite() {
        serde_json::Number::from_f64(x)
            .map(Value::Number)
            .unwrap_or_else(|| Value::String("none".into()))
    } else if x.is_infinite() && x > 0.0 {
        Value::String("inf".into())
    } else if x.is_infinite() {
        Value::String("-inf".into())
    } else {
        Value::String("none".into())
    }
}

fn opt_num(x: Option<f64>) -> Value {
    match x {
        Some(v) => num(v),
        None => Value::String("none".into()),
    }
}

fn num_vec(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| num(x)).collect())
}

fn emit(doc: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).expect("document serialization");
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    let spec = load_model(&a.model)?;
    let series = simulate(&spec, a.n, a.burn_in, a.seed)?;
    let csv = write_series_csv(&series);
    match a.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let spec = load_model(&a.model)?;
    let flags = validate(&spec)?;
    let report = stationarity_report(&spec)?;
    let phi_sum: f64 = spec.coeff_dists.iter().map(|d| d.mean()).sum();

    let tail_mode = match spec.class {
        ModelClass::AdditiveN0 => TailMode::Raw,
        ModelClass::AdditiveZ => TailMode::Absolute,
        ModelClass::Multiplicative => TailMode::ProductWithInnovation,
    };
    let tail = if spec.order == 1 {
        let t = tail_index(&spec, tail_mode, a.bracket_hi)?;
        json!({
            "mode": match tail_mode {
                TailMode::Raw => "raw",
                TailMode::Absolute => "absolute",
                TailMode::ProductWithInnovation => "product_with_innovation",
            },
            "tau1": opt_num(t.tau1),
            "bracket": [num(t.bracket.0), num(t.bracket.1)],
            "solver_iterations": t.solver_iterations,
        })
    } else {
        // No scalar moment equation beyond order 1; check tails empirically
        // with the Hill estimator on simulated data instead.
        Value::String("none".into())
    };

    let lyap = lyapunov_mc(&spec, a.horizon, a.reps, a.seed)?;

    // Fourth-moment condition reported verbatim, without gating anything.
    let fourth: Vec<Value> = spec
        .coeff_dists
        .iter()
        .map(|d| match d.power_moment(4.0, 1e-10) {
            Ok(m) => json!({"value": num(m), "lt_one": m < 1.0}),
            Err(_) => json!({"value": "none", "lt_one": Value::Null}),
        })
        .collect();

    let doc = json!({
        "sum_phi": num(phi_sum),
        "stability": {
            "a0": flags.a0,
            "coeff_zero_mass": flags.coeff_zero_mass,
            "a0_star_star": flags.a0_star_star,
        },
        "stationarity": {
            "rho_mean": num(report.rho_mean),
            "rho_m2": opt_num(report.rho_m2),
            "mean_exists": report.mean_exists,
            "second_moment_exists": report.second_moment_exists,
            "uncond_mean": num(report.uncond_mean),
            "uncond_variance": opt_num(report.uncond_variance),
        },
        "tail": tail,
        "lyapunov": {
            "gamma": num(lyap.gamma),
            "std_error": num(lyap.std_error),
            "horizon": lyap.horizon,
            "replications": lyap.replications,
        },
        "coeff_fourth_moments": fourth,
    });
    emit(&doc, a.out.as_deref())
}

fn fit_config_from(
    variance_link: &str,
    lambda_star: Option<&str>,
    theta_star: Option<&str>,
) -> Result<FitConfig> {
    let mut cfg = FitConfig {
        variance_link: parse_variance_link(variance_link)?,
        ..FitConfig::default()
    };
    if let Some(ls) = lambda_star {
        cfg.lambda_star = Some(parse_f64_list(ls)?);
    }
    if let Some(ts) = theta_star {
        cfg.theta_star = Some(parse_f64_list(ts)?);
    }
    Ok(cfg)
}

fn run_fit(series: &Series, class: ModelClass, order: usize, cfg: &FitConfig) -> Result<FitResult> {
    if class == ModelClass::AdditiveN0 && series.domain == Domain::Z {
        return Err(Error::InvalidSpec(
            "series contains negatives; use --class additive-z".into(),
        ));
    }
    match class {
        ModelClass::AdditiveN0 | ModelClass::AdditiveZ => {
            four_stage_wls_additive(series, order, cfg)
        }
        ModelClass::Multiplicative => four_stage_wls_multiplicative(series, order, cfg),
    }
}

fn fit_document(fit: &FitResult) -> Value {
    let class = match fit.class {
        ModelClass::AdditiveN0 => "additive",
        ModelClass::AdditiveZ => "additive-z",
        ModelClass::Multiplicative => "multiplicative",
    };
    json!({
        "class": class,
        "order": fit.order,
        "theta1": num_vec(&fit.theta1),
        "lambda1": num_vec(&fit.lambda1),
        "theta2": num_vec(&fit.theta2),
        "lambda2": num_vec(&fit.lambda2),
        "sigma_eps2": opt_num(fit.sigma_eps2),
        "sigma_eps2_var": opt_num(fit.sigma_eps2_var),
        "ase_theta": num_vec(&fit.ase_theta),
        "ase_lambda": num_vec(&fit.ase_lambda),
        "cascade_iterations": fit.cascade_iterations,
        "converged": fit.converged,
        "active_nonneg_constraints": fit.active_nonneg_constraints,
        "ortho_theta": num(fit.ortho_theta),
        "ortho_lambda": num(fit.ortho_lambda),
    })
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let series = read_series_csv(&a.series)?;
    let cfg = fit_config_from(
        &a.variance_link,
        a.lambda_star.as_deref(),
        a.theta_star.as_deref(),
    )?;
    let fit = run_fit(&series, a.class.to_class(), a.order, &cfg)?;
    emit(&fit_document(&fit), a.out.as_deref())
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    let series = read_series_csv(&a.series)?;
    let cfg = fit_config_from(&a.variance_link, None, None)?;
    let class = a.class.to_class();
    let fit = run_fit(&series, class, a.order, &cfg)?;
    let report = diagnostics_report(&series, &fit, a.max_lag)?;

    if let Some(path) = &a.plot_csv {
        let mut csv = String::from("lag,acf,pacf\n");
        for k in 0..=a.max_lag {
            csv.push_str(&format!("{k},{},{}\n", report.acf[k], report.pacf[k]));
        }
        std::fs::write(path, csv)?;
    }

    let order_table: Value = match a.order_table {
        Some(p_max) => {
            let rows = order_selection_report(&series, p_max, class, &cfg)?;
            Value::Array(
                rows.iter()
                    .map(|row| match &row.outcome {
                        Ok(m) => json!({
                            "p": row.p,
                            "generated_mean": num(m.generated_mean),
                            "generated_variance": opt_num(m.generated_variance),
                            "mar": num(m.mar),
                            "msr": num(m.msr),
                            "mspr": num(m.mspr),
                        }),
                        Err(e) => json!({"p": row.p, "error": e.to_string()}),
                    })
                    .collect(),
            )
        }
        None => Value::String("none".into()),
    };

    let resid_mean =
        report.pearson_residuals.iter().sum::<f64>() / report.pearson_residuals.len() as f64;
    let resid_var = report
        .pearson_residuals
        .iter()
        .map(|r| (r - resid_mean).powi(2))
        .sum::<f64>()
        / report.pearson_residuals.len() as f64;

    let mut doc = Map::new();
    doc.insert("fit".into(), fit_document(&fit));
    doc.insert(
        "diagnostics".into(),
        json!({
            "conf_band": num(report.conf_band),
            "acf": num_vec(&report.acf),
            "pacf": num_vec(&report.pacf),
            "pearson_residual_mean": num(resid_mean),
            "pearson_residual_variance": num(resid_var),
            "mar": num(report.mar),
            "msr": num(report.msr),
            "mspr": num(report.mspr),
            "generated_mean": num(report.generated_mean),
            "generated_variance": opt_num(report.generated_variance),
        }),
    );
    doc.insert("order_table".into(), order_table);
    emit(&Value::Object(doc), a.out.as_deref())
}

fn cmd_forecast_eval(a: ForecastEvalArgs) -> Result<()> {
    let series = read_series_csv(&a.series)?;
    let cfg = fit_config_from(&a.variance_link, None, None)?;
    let sizes = parse_usize_list(&a.train_sizes)?;
    let rows = rolling_forecast_eval(&series, a.class.to_class(), a.order, &cfg, &sizes)?;
    let doc = Value::Array(
        rows.iter()
            .map(|r| {
                json!({
                    "n_c": r.n_c,
                    "msfe": num(r.msfe),
                    "mafe": num(r.mafe),
                    "mspfe": num(r.mspfe),
                })
            })
            .collect(),
    );
    emit(&doc, a.out.as_deref())
}

fn cmd_mc_study(a: McStudyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let file: StudyFile = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", a.config.display())))?;
    if file.version != 1 {
        return Err(Error::InvalidConfig(format!(
            "unsupported study file version {}",
            file.version
        )));
    }
    let cfg = StudyConfig {
        model: file.model,
        n: file.n,
        reps: file.reps,
        master_seed: file.master_seed,
        burn_in: file.burn_in.unwrap_or(500),
        fit: file.fit.unwrap_or_default(),
        workers: a.workers.or(file.workers).unwrap_or(0),
    };
    let res = run_study(&cfg)?;
    let doc = json!({
        "labels": res.labels,
        "mean": num_vec(&res.mean),
        "std": num_vec(&res.std),
        "ase": num_vec(&res.ase),
        "failures": res.failures,
        "reps": res.reps,
        "wall_secs": num(res.wall_secs),
    });
    emit(&doc, a.out.as_deref())
}
