use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nerhdp::baselines::{mr_ebp, mr_fit_ml};
use nerhdp::bootstrap::{bootstrap_mspe, BootstrapConfig};
use nerhdp::config::RunConfig;
use nerhdp::data::{AreaId, WelfareTransform};
use nerhdp::diagnostics::{cv_ecdf, pearson, w_statistic, PairedArea};
use nerhdp::error::{Error, Result};
use nerhdp::fgt::{direct_fgt, FgtEstimate};
use nerhdp::fit::{fit_nerhdp, FitConfig, FitResult, TauMode};
use nerhdp::io::{self, format_sig, DirectRow, LoadedData, RunManifest};
use nerhdp::predict::{ebp_fgt, ebp_values, PredictionConfig};
use nerhdp::sim::{self, Estimator, ExperimentConfig, PopulationSpec};

/// Small area poverty estimation under a nested error regression model
/// with area-specific M-quantile parameters.
#[derive(Parser, Debug)]
#[command(name = "nerhdp", version, about)]
struct Cli {
    /// Flat `key = value` configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads. Outputs do not depend on this value.
    #[arg(long, global = true, env = "NERHDP_THREADS")]
    threads: Option<String>,
    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    out_dir: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model; writes params.csv, params.json and fit_report.json.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Fit and predict FGT indicators for every census area; writes ebp.csv.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        pred: PredictArgs,
        /// Estimator: cls or mr.
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Fit, predict and add bootstrap MSPE and CV columns to ebp.csv.
    Mspe {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        pred: PredictArgs,
        /// Bootstrap replicates.
        #[arg(long)]
        b: Option<String>,
        /// Re-estimate tau in every replicate (true or false).
        #[arg(long)]
        refit_tau: Option<String>,
    },
    /// Weighted direct estimates with variances; writes direct.csv.
    Direct {
        #[command(flatten)]
        data: DataArgs,
        /// Poverty line in welfare units.
        #[arg(long)]
        z: Option<String>,
        /// FGT orders, comma separated.
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Design-based simulation on a synthetic population; writes
    /// metrics.csv, metrics_by_area.csv and raw_estimates.csv.
    Simulate {
        #[command(flatten)]
        fit: FitArgs,
        /// heterogeneous or homogeneous.
        #[arg(long)]
        population: Option<String>,
        /// Number of samples drawn.
        #[arg(long)]
        replications: Option<String>,
        /// Within-area sampling fraction.
        #[arg(long)]
        fraction: Option<String>,
        /// Number of areas left unsampled in every replicate.
        #[arg(long)]
        oos_count: Option<String>,
        /// Comma list of cls, mr, direct.
        #[arg(long)]
        estimators: Option<String>,
        /// Estimator in the EFF denominator.
        #[arg(long)]
        baseline: Option<String>,
        /// Monte Carlo draws per unit.
        #[arg(long)]
        k: Option<String>,
        /// Master seed (required here or in the config).
        #[arg(long)]
        seed: Option<String>,
    },
    /// Compare model and direct estimates: W statistic, correlation, CV ECDF.
    Diagnose {
        /// Direct estimates CSV (from `direct`).
        #[arg(long)]
        direct: Option<String>,
        /// Model estimates CSV with mspe (from `mspe`).
        #[arg(long)]
        model: Option<String>,
        /// FGT orders, comma separated.
        #[arg(long)]
        alphas: Option<String>,
        /// CV thresholds in percent, comma separated.
        #[arg(long)]
        cv_thresholds: Option<String>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Survey CSV: area_id,weight,welfare|y,x1..xp.
    #[arg(long)]
    survey: Option<String>,
    /// Census CSV: area_id,x1..xp.
    #[arg(long)]
    census: Option<String>,
    /// Area table CSV: area_id,N,z1..zq, used for out-of-sample tau.
    #[arg(long)]
    area_aux: Option<String>,
    /// Shift c in the transform y = log(E + c).
    #[arg(long)]
    shift: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Huber tuning constant.
    #[arg(long)]
    huber_c: Option<String>,
    /// 'default', 'start:stop:step' or a comma list of taus.
    #[arg(long)]
    tau_grid: Option<String>,
    /// One tau for every area, skipping tau estimation.
    #[arg(long)]
    tau: Option<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Poverty line in welfare units.
    #[arg(long)]
    z: Option<String>,
    /// Monte Carlo draws per unit.
    #[arg(long)]
    k: Option<String>,
    /// FGT orders, comma separated.
    #[arg(long)]
    alphas: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<String>,
}

type Pairs = Vec<(&'static str, Option<String>)>;

impl DataArgs {
    fn pairs(self) -> Pairs {
        vec![
            ("survey", self.survey),
            ("census", self.census),
            ("area_aux", self.area_aux),
            ("shift", self.shift),
        ]
    }
}

impl FitArgs {
    fn pairs(self) -> Pairs {
        vec![("huber_c", self.huber_c), ("tau_grid", self.tau_grid), ("tau", self.tau)]
    }
}

impl PredictArgs {
    fn pairs(self) -> Pairs {
        vec![("z", self.z), ("k", self.k), ("alphas", self.alphas), ("seed", self.seed)]
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut flags: Pairs = vec![("threads", cli.threads), ("out_dir", cli.out_dir)];
    let name = match &cli.command {
        Command::Fit { .. } => "fit",
        Command::Predict { .. } => "predict",
        Command::Mspe { .. } => "mspe",
        Command::Direct { .. } => "direct",
        Command::Simulate { .. } => "simulate",
        Command::Diagnose { .. } => "diagnose",
    };
    match cli.command {
        Command::Fit { data, fit } => {
            flags.extend(data.pairs());
            flags.extend(fit.pairs());
        }
        Command::Predict { data, fit, pred, estimator } => {
            flags.extend(data.pairs());
            flags.extend(fit.pairs());
            flags.extend(pred.pairs());
            flags.push(("estimator", estimator));
        }
        Command::Mspe { data, fit, pred, b, refit_tau } => {
            flags.extend(data.pairs());
            flags.extend(fit.pairs());
            flags.extend(pred.pairs());
            flags.extend([("b", b), ("refit_tau", refit_tau)]);
        }
        Command::Direct { data, z, alphas } => {
            flags.extend(data.pairs());
            flags.extend([("z", z), ("alphas", alphas)]);
        }
        Command::Simulate {
            fit,
            population,
            replications,
            fraction,
            oos_count,
            estimators,
            baseline,
            k,
            seed,
        } => {
            flags.extend(fit.pairs());
            flags.extend([
                ("population", population),
                ("replications", replications),
                ("fraction", fraction),
                ("oos_count", oos_count),
                ("estimators", estimators),
                ("baseline", baseline),
                ("k", k),
                ("seed", seed),
            ]);
        }
        Command::Diagnose {
            direct,
            model,
            alphas,
            cv_thresholds,
        } => flags.extend([
            ("direct", direct),
            ("model", model),
            ("alphas", alphas),
            ("cv_thresholds", cv_thresholds),
        ]),
    }
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, &v).map_err(|e| Error::Config(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
    }
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let outputs = match name {
        "fit" => cmd_fit(&config)?,
        "predict" => cmd_predict(&config)?,
        "mspe" => cmd_mspe(&config)?,
        "direct" => cmd_direct(&config)?,
        "simulate" => cmd_simulate(&config)?,
        _ => cmd_diagnose(&config)?,
    };
    let manifest = RunManifest::new(name, config.seed, config.effective(), outputs);
    io::write_json(&config.out_dir.join("manifest.json"), &manifest)
}

fn out(config: &RunConfig, file: &str, outputs: &mut Vec<String>) -> PathBuf {
    outputs.push(file.to_string());
    config.out_dir.join(file)
}

fn transform(config: &RunConfig) -> Result<WelfareTransform> {
    WelfareTransform::new(config.shift)
}

fn load(config: &RunConfig) -> Result<LoadedData> {
    let data = io::load_datasets(
        config.require_path("survey")?,
        config.require_path("census")?,
        config.area_aux.as_deref(),
        &transform(config)?,
    )?;
    if !data.out_of_sample.is_empty() {
        let ids: Vec<String> = data.out_of_sample.iter().map(AreaId::to_string).collect();
        eprintln!(
            "note: {} census areas are out of sample: {}",
            ids.len(),
            ids.join(", ")
        );
    }
    Ok(data)
}

fn fit_config(config: &RunConfig) -> FitConfig {
    FitConfig {
        huber_c: config.huber_c,
        tau_grid: config.tau_grid.clone(),
        tau_mode: config.tau.map_or(TauMode::Estimate, TauMode::Constant),
        ..FitConfig::default()
    }
}

fn fit_and_write(config: &RunConfig, data: &LoadedData, outputs: &mut Vec<String>) -> Result<FitResult> {
    let fit = fit_nerhdp(&data.survey, &data.census, &fit_config(config))?;
    for w in fit.report.warnings() {
        eprintln!("warning: {w}");
    }
    io::write_params_csv(&out(config, "params.csv", outputs), &fit.params)?;
    io::write_json(&out(config, "params.json", outputs), &fit.params)?;
    io::write_json(&out(config, "fit_report.json", outputs), &fit.report)?;
    Ok(fit)
}

fn prediction(config: &RunConfig) -> Result<PredictionConfig> {
    let p = PredictionConfig {
        k: config.k,
        z: config.require_z()?,
        alphas: config.alphas.clone(),
        transform: transform(config)?,
        seed: config.seed.unwrap_or(0),
    };
    p.validate()?;
    Ok(p)
}

fn cmd_fit(config: &RunConfig) -> Result<Vec<String>> {
    let data = load(config)?;
    let mut outputs = Vec::new();
    fit_and_write(config, &data, &mut outputs)?;
    Ok(outputs)
}

fn cmd_predict(config: &RunConfig) -> Result<Vec<String>> {
    let data = load(config)?;
    let pred = prediction(config)?;
    let mut outputs = Vec::new();
    match config.estimator {
        Estimator::Cls => {
            let fit = fit_and_write(config, &data, &mut outputs)?;
            let est = ebp_fgt(&data.census, &fit.params, &pred)?;
            io::write_estimates_csv(&out(config, "ebp.csv", &mut outputs), &est, None)?;
        }
        Estimator::Mr => {
            let ner = mr_fit_ml(&data.survey)?;
            if !ner.converged {
                eprintln!("warning: MR likelihood maximisation did not converge");
            }
            io::write_json(&out(config, "mr_params.json", &mut outputs), &ner)?;
            let est = mr_ebp(&data.census, &ner, &data.survey, &pred)?;
            io::write_estimates_csv(&out(config, "ebp.csv", &mut outputs), &est, Some("MR"))?;
        }
        Estimator::Direct => {
            return Err(Error::Config("predict supports estimator cls or mr; use the direct command".into()))
        }
    }
    Ok(outputs)
}

fn cmd_mspe(config: &RunConfig) -> Result<Vec<String>> {
    let seed = config.require_seed()?;
    let data = load(config)?;
    let pred = prediction(config)?;
    let mut outputs = Vec::new();
    let fit = fit_and_write(config, &data, &mut outputs)?;
    let original = ebp_values(&data.census, &fit.params, &pred)?;
    let boot = BootstrapConfig {
        b: config.b,
        k: config.k,
        seed,
        refit_tau: config.refit_tau,
    };
    let result = bootstrap_mspe(
        &data.survey,
        &data.census,
        &fit.params,
        &fit_config(config),
        &original,
        &pred,
        &boot,
    )?;
    if !result.diagnostics.failures.is_empty() {
        eprintln!(
            "warning: {} of {} bootstrap replicates failed and were dropped",
            result.diagnostics.failures.len(),
            result.diagnostics.requested
        );
    }
    io::write_estimates_csv(&out(config, "ebp.csv", &mut outputs), &result.estimates, None)?;
    io::write_json(&out(config, "bootstrap_diagnostics.json", &mut outputs), &result.diagnostics)?;
    Ok(outputs)
}

fn cmd_direct(config: &RunConfig) -> Result<Vec<String>> {
    let tr = transform(config)?;
    let survey = io::read_survey(config.require_path("survey")?, &tr)?;
    let z = config.require_z()?;
    let mut rows = Vec::new();
    for area in survey.areas() {
        let pairs: Vec<(f64, f64)> = survey
            .area_records(area)
            .map(|r| (r.welfare_or_inverse(&tr), r.weight))
            .collect();
        for &alpha in &config.alphas {
            let d = direct_fgt(&pairs, z, alpha)?;
            rows.push(DirectRow {
                area_id: area.clone(),
                alpha,
                estimate: d.estimate,
                variance: d.variance,
                cv: d.cv,
            });
        }
    }
    let mut outputs = Vec::new();
    io::write_direct_csv(&out(config, "direct.csv", &mut outputs), &rows)?;
    Ok(outputs)
}

fn cmd_simulate(config: &RunConfig) -> Result<Vec<String>> {
    let seed = config.require_seed()?;
    let spec = match config.population.as_str() {
        "homogeneous" => PopulationSpec::homogeneous(seed),
        _ => PopulationSpec::heterogeneous(seed),
    };
    let population = sim::generate_population(&spec)?;
    let experiment = ExperimentConfig {
        replications: config.replications,
        fraction: config.fraction,
        out_of_sample: sim::choose_out_of_sample(&population, config.oos_count, seed),
        estimators: config.estimators.clone(),
        baseline: config.baseline,
        k: config.k,
        seed,
        fit: fit_config(config),
    };
    let result = sim::run_on_population(&population, &experiment)?;
    for f in &result.failures {
        eprintln!(
            "warning: replicate {} estimator {} failed: {}",
            f.replicate,
            f.estimator.name(),
            f.message
        );
    }
    if !result.metrics.excluded_zero_truth.is_empty() {
        eprintln!(
            "note: {} (area, alpha) pairs with zero true value excluded from metrics",
            result.metrics.excluded_zero_truth.len()
        );
    }
    let mut outputs = Vec::new();
    let m = &result.metrics;
    io::write_table(
        &out(config, "metrics.csv", &mut outputs),
        &["estimator", "alpha", "areas", "rb", "rrmspe", "eff"],
        m.summary.iter().map(|s| {
            vec![
                s.estimator.name().to_string(),
                s.alpha.to_string(),
                s.areas.to_string(),
                format_sig(s.rb, 6),
                format_sig(s.rrmspe, 6),
                s.eff.map(|e| format_sig(e, 6)).unwrap_or_default(),
            ]
        }),
    )?;
    io::write_table(
        &out(config, "metrics_by_area.csv", &mut outputs),
        &["estimator", "area_id", "alpha", "rb", "rrmspe", "replicates"],
        m.per_area.iter().map(|a| {
            vec![
                a.estimator.name().to_string(),
                a.area_id.to_string(),
                a.alpha.to_string(),
                format_sig(a.rb, 6),
                format_sig(a.rrmspe, 6),
                a.replicates.to_string(),
            ]
        }),
    )?;
    io::write_table(
        &out(config, "raw_estimates.csv", &mut outputs),
        &["replicate", "estimator", "area_id", "alpha", "estimate"],
        result.raw.iter().map(|r| {
            vec![
                r.replicate.to_string(),
                r.estimator.name().to_string(),
                r.area_id.to_string(),
                r.alpha.to_string(),
                format_sig(r.estimate, 6),
            ]
        }),
    )?;
    println!("estimator alpha      RB(%)  RRMSPE(%)   EFF");
    for s in &m.summary {
        println!(
            "{:<9} {:>5} {:>10.2} {:>10.2} {:>5}",
            s.estimator.name(),
            s.alpha,
            100.0 * s.rb,
            100.0 * s.rrmspe,
            s.eff.map(|e| format!("{e:.3}")).unwrap_or_else(|| "-".into())
        );
    }
    Ok(outputs)
}

#[derive(serde::Serialize)]
struct AlphaDiagnostics {
    alpha: u32,
    w: nerhdp::diagnostics::WStatistic,
    correlation: Option<f64>,
    model_cv: Option<nerhdp::diagnostics::CvEcdf>,
    direct_cv: Option<nerhdp::diagnostics::CvEcdf>,
}

fn by_area(rows: &[FgtEstimate], alpha: u32) -> BTreeMap<&AreaId, &FgtEstimate> {
    rows.iter().filter(|e| e.alpha == alpha).map(|e| (&e.area_id, e)).collect()
}

fn percent_cvs<'a>(rows: impl Iterator<Item = &'a FgtEstimate>) -> Vec<f64> {
    rows.filter_map(|e| e.cv).map(|c| 100.0 * c).collect()
}

fn cmd_diagnose(config: &RunConfig) -> Result<Vec<String>> {
    let direct = io::read_estimates_csv(config.require_path("direct")?)?;
    let model = io::read_estimates_csv(config.require_path("model")?)?;
    let mut report = Vec::new();
    let mut ecdf_rows = Vec::new();
    for &alpha in &config.alphas {
        let d = by_area(&direct, alpha);
        let m = by_area(&model, alpha);
        let paired: Vec<PairedArea> = d
            .iter()
            .filter_map(|(area, de)| {
                let me = m.get(area)?;
                Some(PairedArea {
                    area_id: (*area).clone(),
                    direct: de.value,
                    direct_variance: de.mspe?,
                    model: me.value,
                    model_mspe: me.mspe?,
                })
            })
            .collect();
        if paired.is_empty() {
            return Err(Error::Schema(format!(
                "no areas with direct variance and model mspe for alpha {alpha}"
            )));
        }
        let w = w_statistic(&paired)?;
        let (a, b): (Vec<f64>, Vec<f64>) = paired.iter().map(|p| (p.direct, p.model)).unzip();
        let correlation = if a.len() >= 2 { pearson(&a, &b)? } else { None };
        let ecdf = |cvs: Vec<f64>| (!cvs.is_empty()).then(|| cv_ecdf(&cvs, &config.cv_thresholds)).transpose();
        let model_cv = ecdf(percent_cvs(m.values().copied()))?;
        let direct_cv = ecdf(percent_cvs(d.values().copied()))?;
        for (source, table) in [("model", &model_cv), ("direct", &direct_cv)] {
            for (cv, frac) in table.iter().flat_map(|t| t.table.iter()) {
                ecdf_rows.push(vec![
                    source.to_string(),
                    alpha.to_string(),
                    format_sig(*cv, 6),
                    format_sig(*frac, 6),
                ]);
            }
        }
        println!(
            "alpha {alpha}: W = {:.4} on {} areas (chi-square 0.95 quantile {}), correlation {}",
            w.w,
            w.df,
            w.chi2_95.map(|q| format!("{q:.2}")).unwrap_or_else(|| "-".into()),
            correlation.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into())
        );
        if !w.excluded.is_empty() {
            eprintln!("note: alpha {alpha}: {} areas excluded for zero denominators", w.excluded.len());
        }
        report.push(AlphaDiagnostics {
            alpha,
            w,
            correlation,
            model_cv,
            direct_cv,
        });
    }
    let mut outputs = Vec::new();
    io::write_json(&out(config, "diagnostics.json", &mut outputs), &report)?;
    io::write_table(
        &out(config, "cv_ecdf.csv", &mut outputs),
        &["source", "alpha", "cv_percent", "fraction"],
        ecdf_rows,
    )?;
    Ok(outputs)
}

