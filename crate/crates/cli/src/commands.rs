//! The `fit`, `cv` and `simulate` subcommands.

use std::fs;
use std::path::Path;

use debias_core::inference::{run_pipeline, PipelineConfig, PipelineOutput, PropensityChoice};
use debias_core::model::{Dataset, PropensityEstimate, QueryPoint};
use debias_core::simgen::{run_monte_carlo, Missingness, MonteCarloConfig, SimDesign, SimGenerator, SimMetrics};
use debias_core::stats::ks_standard_normal;
use debias_core::tuning::{cv_gamma, CvConfig, GammaSelection};
use serde::{Deserialize, Serialize};

use crate::args::{DesignKind, FitArgs, Format, PipelineArgs, PropensityArg, SimulateArgs, DEFAULT_SEED};
use crate::error::CliError;
use crate::io::{emit, format_dataset, num, read_dataset, read_text, read_vector};

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed, overridden by `--seed`; replaces the seeds inside
    /// `pipeline` and `design`.
    pub seed: Option<u64>,
    pub pipeline: PipelineConfig,
    pub design: SimDesign,
    /// Simulation only: hand the pipeline the true propensities.
    pub oracle_propensity: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(DEFAULT_SEED)
    }
}

fn apply_pipeline_flags(cfg: &mut PipelineConfig, args: &PipelineArgs, seed: u64) -> Result<(), CliError> {
    cfg.seed = seed;
    if let Some(rule) = args.gamma_rule {
        cfg.gamma_rule = rule;
    }
    if let Some(level) = args.level {
        cfg.level = level;
    }
    if args.gamma.is_some() {
        cfg.gamma = args.gamma;
    }
    if let Some(points) = args.grid_points {
        cfg.cv.points = points;
        cfg.cv.grid = None;
    }
    if let Some(grid) = &args.gammas {
        let mut grid = grid.0.clone();
        grid.sort_by(f64::total_cmp);
        if grid.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::input("--gammas lists a value twice"));
        }
        cfg.cv.grid = Some(grid);
    }
    if let Some(folds) = args.folds {
        cfg.cv.folds = folds;
    }
    match &args.propensity {
        None => {}
        Some(PropensityArg::LogisticLasso) => {
            if !matches!(cfg.propensity, PropensityChoice::LogisticLasso { .. }) {
                cfg.propensity = PropensityChoice::default();
            }
        }
        Some(PropensityArg::Oracle(Some(path))) => {
            cfg.propensity = PropensityChoice::Oracle {
                probs: read_vector(path)?,
            };
        }
        Some(PropensityArg::Oracle(None)) => {
            return Err(CliError::input(
                "--propensity oracle needs a file here: use oracle:<path> with one probability per row",
            ));
        }
    }
    cfg.validate().map_err(CliError::from)
}

fn load_inputs(args: &FitArgs) -> Result<(Dataset, QueryPoint), CliError> {
    let data = read_dataset(&args.data)?;
    let values = match (&args.x, &args.query) {
        (Some(x), _) => x.0.clone(),
        (None, Some(path)) => read_vector(path)?,
        (None, None) => return Err(CliError::input("give the query point with --x or --query")),
    };
    if values.len() != data.d() {
        return Err(CliError::input(format!(
            "query point has {} coordinates but the table has {} covariates",
            values.len(),
            data.d()
        )));
    }
    let query = QueryPoint::new(values)?;
    Ok((data, query))
}

#[derive(Serialize)]
struct Source<'a> {
    data: &'a Path,
    n: usize,
    d: usize,
    n_complete: usize,
    query: &'a [f64],
}

impl<'a> Source<'a> {
    fn new(path: &'a Path, data: &Dataset, query: &'a QueryPoint) -> Self {
        Source {
            data: path,
            n: data.n(),
            d: data.d(),
            n_complete: data.n_complete(),
            query: query.as_slice(),
        }
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    command: &'static str,
    seed: u64,
    input: Source<'a>,
    config: &'a PipelineConfig,
    output: &'a PipelineOutput,
}

pub fn fit(args: &FitArgs, config: &RunConfig, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let seed = config.seed(seed);
    let mut cfg = config.pipeline.clone();
    apply_pipeline_flags(&mut cfg, &args.pipeline, seed)?;
    let (data, query) = load_inputs(args)?;
    let output = run_pipeline(&data, &query, &cfg).map_err(|f| CliError::Core(f.error))?;
    log::info!(
        "m_hat = {} at gamma = {} ({} rule)",
        output.result.m_hat,
        output.solution.gamma,
        output.gamma_rule.map_or("fixed".into(), |r| r.to_string())
    );

    let text = match args.format {
        Format::Json => {
            let report = FitReport {
                command: "fit",
                seed,
                input: Source::new(&args.data, &data, &query),
                config: &cfg,
                output: &output,
            };
            to_json(&report)
        }
        Format::Csv => {
            let r = &output.result;
            let s = &output.solution;
            let rule = output.gamma_rule.map_or("fixed".to_string(), |r| r.to_string());
            format!(
                "seed,m_hat,ci_lower,ci_upper,level,variance_hat,sigma_hat,gamma,gamma_rule,n,d,n_complete,converged,primal_feasible\n\
                 {seed},{},{},{},{},{},{},{},{rule},{},{},{},{},{}\n",
                num(r.m_hat),
                num(r.ci_lower),
                num(r.ci_upper),
                num(r.level),
                num(r.variance_hat),
                num(r.sigma_used),
                num(s.gamma),
                data.n(),
                data.d(),
                data.n_complete(),
                s.converged,
                s.primal_feasible
            )
        }
    };
    emit(out, &text)
}

#[derive(Serialize)]
struct CvReport<'a> {
    command: &'static str,
    seed: u64,
    input: Source<'a>,
    propensity: &'a PropensityEstimate,
    selection: &'a GammaSelection,
}

pub fn cv(args: &FitArgs, config: &RunConfig, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    if args.pipeline.gamma.is_some() {
        return Err(CliError::input("--gamma fixes gamma and cannot be combined with cv; use --gammas"));
    }
    let seed = config.seed(seed);
    let mut cfg = config.pipeline.clone();
    apply_pipeline_flags(&mut cfg, &args.pipeline, seed)?;
    let (data, query) = load_inputs(args)?;

    let propensity = cfg.propensity_estimator()?.fit(data.covariates(), data.observed())?;
    let cv_cfg = CvConfig {
        seed: cfg.gamma_seed(),
        ..cfg.cv.clone()
    };
    let selection = cv_gamma(data.covariates(), &propensity.pi_hat, &query, &cv_cfg)?;

    let text = match args.format {
        Format::Json => to_json(&CvReport {
            command: "cv",
            seed,
            input: Source::new(&args.data, &data, &query),
            propensity: &propensity,
            selection: &selection,
        }),
        Format::Csv => {
            let chosen = &selection.chosen;
            let mut text = String::from(
                "gamma,cv_mean,cv_se,feasible_all_folds,converged_all_folds,min_cv,one_se,min_feas\n",
            );
            for (k, &g) in selection.grid.iter().enumerate() {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    num(g),
                    num(selection.cv_mean[k]),
                    num(selection.cv_se[k]),
                    selection.feasible_all_folds[k],
                    selection.converged_all_folds[k],
                    g == chosen.min_cv,
                    g == chosen.one_se,
                    chosen.min_feas == Some(g)
                ));
            }
            text
        }
    };
    emit(out, &text)
}

fn design_from(args: &SimulateArgs, mut design: SimDesign, seed: u64) -> Result<SimDesign, CliError> {
    design.seed = seed;
    if let Some(kind) = args.design {
        design.missingness = match kind {
            DesignKind::Mcar => Missingness::Mcar { p: 0.7 },
            DesignKind::MarLogistic => Missingness::MarLogistic,
            DesignKind::MarProbitQuadratic => Missingness::MarProbitQuadratic,
        };
    }
    if let Some(p) = args.mcar_p {
        match &mut design.missingness {
            Missingness::Mcar { p: current } => *current = p,
            _ => return Err(CliError::input("--mcar-p applies only to --design mcar")),
        }
    }
    macro_rules! set {
        ($($field:ident <- $flag:ident),+) => {
            $(if let Some(v) = args.$flag { design.$field = v; })+
        };
    }
    set!(replications <- reps, n <- n, d <- d, covariance <- covariance, beta <- beta, query <- query, noise <- noise);
    design.validate()?;
    Ok(design)
}

#[derive(Serialize)]
struct Summary {
    avg_bias: f64,
    coverage: f64,
    avg_length: f64,
    n_fail: usize,
    n_ok: usize,
    mean_missing_rate: f64,
    monotone_violations: usize,
    ks_statistic: Option<f64>,
    ks_p_value: Option<f64>,
}

#[derive(Serialize)]
struct SimReport<'a> {
    command: &'static str,
    seed: u64,
    design: &'a SimDesign,
    config: &'a MonteCarloConfig,
    metrics: Summary,
}

pub fn simulate(args: &SimulateArgs, config: &RunConfig, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let seed = config.seed(seed);
    let design = design_from(args, config.design.clone(), seed)?;
    let mut mc = MonteCarloConfig {
        pipeline: config.pipeline.clone(),
        oracle_propensity: config.oracle_propensity,
    };
    match &args.pipeline.propensity {
        Some(PropensityArg::Oracle(None)) => mc.oracle_propensity = true,
        Some(PropensityArg::Oracle(Some(_))) => {
            return Err(CliError::input(
                "simulate takes --propensity oracle (the true propensities), not a file",
            ))
        }
        Some(PropensityArg::LogisticLasso) => {
            mc.oracle_propensity = false;
            mc.pipeline.propensity = PropensityChoice::default();
        }
        None => {}
    }
    let mut flags = args.pipeline.clone();
    flags.propensity = None;
    apply_pipeline_flags(&mut mc.pipeline, &flags, seed)?;
    if args.save_data.is_some_and(|rep| rep >= design.replications) {
        return Err(CliError::input(format!(
            "--save-data must name a replication below {}",
            design.replications
        )));
    }
    if args.save_data.is_some() && out.is_none() {
        return Err(CliError::input("--save-data needs --out DIR"));
    }

    let metrics = run_monte_carlo(&design, &mc)?;
    log::info!(
        "{} replications: coverage {}, {} failures",
        metrics.records.len(),
        metrics.coverage,
        metrics.n_fail
    );

    let Some(dir) = out else {
        return emit(None, &metrics_csv(&metrics));
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let write = |name: &str, text: &str| emit(Some(&dir.join(name)), text);
    write("metrics.csv", &metrics_csv(&metrics))?;
    write("records.csv", &records_csv(&metrics, seed)?)?;
    write("studentized.csv", &studentized_csv(&metrics))?;
    write("qq.csv", &qq_csv(&metrics))?;
    let ks = (!metrics.studentized.is_empty()).then(|| ks_standard_normal(&metrics.studentized));
    let report = SimReport {
        command: "simulate",
        seed,
        design: &design,
        config: &mc,
        metrics: Summary {
            avg_bias: metrics.avg_bias,
            coverage: metrics.coverage,
            avg_length: metrics.avg_length,
            n_fail: metrics.n_fail,
            n_ok: metrics.n_ok,
            mean_missing_rate: metrics.mean_missing_rate,
            monotone_violations: metrics.monotone_violations,
            ks_statistic: ks.map(|k| k.statistic),
            ks_p_value: ks.map(|k| k.p_value),
        },
    };
    write("run.json", &to_json(&report))?;

    if let Some(rep) = args.save_data {
        let sim = SimGenerator::new(&design)?.replication(rep);
        write(&format!("data-rep{rep}.csv"), &format_dataset(&sim.data))?;
        write(&format!("query-rep{rep}.csv"), &column("x", sim.query.as_slice()))?;
        write(&format!("propensity-rep{rep}.csv"), &column("pi", &sim.true_pi))?;
    }
    Ok(())
}

fn column(name: &str, values: &[f64]) -> String {
    let mut text = format!("{name}\n");
    for &v in values {
        text.push_str(&num(v));
        text.push('\n');
    }
    text
}

pub fn metrics_csv(m: &SimMetrics) -> String {
    format!(
        "avg_bias,coverage,avg_length,n_fail\n{},{},{},{}\n",
        num(m.avg_bias),
        num(m.coverage),
        num(m.avg_length),
        m.n_fail
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn records_csv(m: &SimMetrics, seed: u64) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| CliError::input(format!("writing records: {e}"));
    w.write_record([
        "seed",
        "rep",
        "m0",
        "missing_rate",
        "m_hat",
        "ci_lower",
        "ci_upper",
        "sigma_hat",
        "variance_hat",
        "gamma",
        "covered",
        "studentized",
        "converged",
        "primal_feasible",
        "one_se_fallback",
        "monotone_violations",
        "error",
    ])
    .map_err(io_err)?;
    for r in &m.records {
        w.write_record([
            seed.to_string(),
            r.rep.to_string(),
            num(r.m0),
            num(r.missing_rate),
            opt(r.m_hat),
            opt(r.ci_lower),
            opt(r.ci_upper),
            opt(r.sigma_hat),
            opt(r.variance_hat),
            opt(r.gamma),
            r.covered.map(|c| c.to_string()).unwrap_or_default(),
            opt(r.studentized),
            r.converged.to_string(),
            r.primal_feasible.to_string(),
            r.one_se_fallback.to_string(),
            r.monotone_violations.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::input(format!("writing records: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Replication index and studentized value, for successful replications.
fn studentized_csv(m: &SimMetrics) -> String {
    let mut text = String::from("rep,studentized\n");
    for r in &m.records {
        if let Some(t) = r.studentized {
            text.push_str(&format!("{},{}\n", r.rep, num(t)));
        }
    }
    text
}

fn qq_csv(m: &SimMetrics) -> String {
    let mut text = String::from("normal_quantile,sample_quantile\n");
    for (theory, sample) in m.qq() {
        text.push_str(&format!("{},{}\n", num(theory), num(sample)));
    }
    text
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    text
}
