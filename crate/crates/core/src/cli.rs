//! Command-line front end. [`run`] parses arguments, dispatches to a
//! subcommand and maps failures onto exit codes: 1 for usage errors, 2 for
//! data errors and 3 for numerical failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dgp::{DgpFamily, DgpSpec, Missingness};
use crate::error::{Error, ErrorKind, Result};
use crate::inference::{compute_residuals, group_inference, Alternative};
use crate::io::{self, PanelFile, Table};
use crate::panel::{estimate_propensity, GroupSpec, ObservedPanel};
use crate::parallel::Execution;
use crate::rank::{rank_cv, rank_threshold, RankSelection, DEFAULT_CANDIDATES};
use crate::sim::{run_mc, Estimator, McConfig, McReport, RankChoice, SIM_CANDIDATES};
use crate::solver::{solve_nuclear_norm, Lambda, SolverOptions};
use crate::tls::{penalized_fit, refit_from_estimate};
use crate::treatment::{bh_fdr, fit_arms};

#[derive(Debug, Parser)]
#[command(
    name = "lowrank-panel",
    version,
    about = "Low-rank completion and inference for panel data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Complete a panel and write the completed matrix.
    Fit(FitArgs),
    /// Confidence intervals for group averages of the completed matrix.
    Infer(InferArgs),
    /// Group average treatment effects from a panel with a treated column.
    Treat(TreatArgs),
    /// Choose the number of factors.
    SelectRank(SelectRankArgs),
    /// Run a Monte Carlo experiment on a simulation design.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Long-format panel with columns unit, time, value[, treated].
    #[arg(long)]
    #[serde(skip)]
    pub input: PathBuf,
    /// Field delimiter of the input and of CSV output.
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    pub delimiter: u8,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Report destination; standard output when omitted. Not part of the
    /// report, so the same run gives the same bytes wherever it is written.
    #[arg(long)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolverArgs {
    /// Penalty level, or `auto` for the data-driven default.
    #[arg(long, default_value = "auto", value_parser = parse_lambda)]
    pub lambda: Lambda,
    /// Relative objective change at which the solver stops.
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
}

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            lambda: self.lambda,
            rel_tol: self.tol,
            max_iters: self.max_iters,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Accepted for interface uniformity; fitting is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Completed-matrix file; defaults to `<output stem>.completed.csv`.
    #[arg(long)]
    #[serde(skip)]
    pub completed: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Group as `units=1..10,25 periods=3..8` (1-based, inclusive) or
    /// `@all`; repeatable.
    #[arg(long = "group", required = true)]
    pub groups: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = AlternativeArg::TwoSided)]
    pub alternative: AlternativeArg,
    /// Flag rejections by Benjamini-Hochberg at this false discovery rate.
    #[arg(long)]
    pub fdr: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TreatArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Number of factors for both arms.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of factors for the control arm.
    #[arg(long)]
    pub k0: Option<usize>,
    /// Number of factors for the treated arm.
    #[arg(long)]
    pub k1: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Control-arm penalty, overriding `--lambda`.
    #[arg(long, value_parser = parse_lambda)]
    pub lambda0: Option<Lambda>,
    /// Treated-arm penalty, overriding `--lambda`.
    #[arg(long, value_parser = parse_lambda)]
    pub lambda1: Option<Lambda>,
    #[arg(long = "group", required = true)]
    pub groups: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = AlternativeArg::TwoSided)]
    pub alternative: AlternativeArg,
    #[arg(long)]
    pub fdr: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternativeArg {
    TwoSided,
    Greater,
    Less,
}

impl From<AlternativeArg> for Alternative {
    fn from(a: AlternativeArg) -> Self {
        match a {
            AlternativeArg::TwoSided => Alternative::TwoSided,
            AlternativeArg::Greater => Alternative::Greater,
            AlternativeArg::Less => Alternative::Less,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethodArg {
    Cv,
    Threshold,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectRankArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value_t = RankMethodArg::Cv)]
    pub method: RankMethodArg,
    /// Comma-separated candidate ranks for cross-validation.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CANDIDATES.to_vec())]
    pub candidates: Vec<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Seed for the holdout masks; drawn and logged when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpArg {
    Factor,
    Sine,
    Poly,
    Treatment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorArg {
    Tls,
    TlsSs,
    PlainNuclear,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub dgp: DgpArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub t: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Tls)]
    pub estimator: EstimatorArg,
    /// Fixed number of factors; by default two for the factor design and
    /// cross-validated on the first replication otherwise.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = SIM_CANDIDATES.to_vec())]
    pub candidates: Vec<usize>,
    /// Base seed; drawn and logged when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    /// Common observation probability; unit-specific U[0.3, 0.7] draws
    /// when omitted.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub truncation: usize,
    #[arg(long, default_value_t = 2.0)]
    pub decay_a: f64,
    /// Target group (same syntax as `infer --group`); repeatable. Defaults
    /// to a seeded random cell plus its row and column.
    #[arg(long = "target")]
    pub targets: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Run replications on one thread.
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn parse_delimiter(s: &str) -> std::result::Result<u8, String> {
    match s {
        "\\t" | "tab" => Ok(b'\t'),
        _ if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(format!(
            "delimiter must be a single ASCII character, got `{s}`"
        )),
    }
}

fn parse_lambda(s: &str) -> std::result::Result<Lambda, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Lambda::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(Lambda::Fixed(v)),
        _ => Err(format!(
            "expected `auto` or a nonnegative number, got `{s}`"
        )),
    }
}

fn parse_index_list(list: &str, bound: usize, what: &str) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::InvalidGroup(format!("{what}: {msg}"));
    let parse_one = |s: &str| -> Result<usize> {
        let v: usize = s
            .trim()
            .parse()
            .map_err(|_| bad(format!("`{s}` is not a positive integer")))?;
        if v == 0 || v > bound {
            return Err(bad(format!("{v} outside 1..={bound}")));
        }
        Ok(v - 1)
    };
    let mut out = Vec::new();
    for item in list.split(',').filter(|s| !s.trim().is_empty()) {
        match item.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (parse_one(a)?, parse_one(b)?);
                if a > b {
                    return Err(bad(format!("empty range `{item}`")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse_one(item)?),
        }
    }
    Ok(out)
}

/// Parses `units=1..10,25 periods=3..8` (1-based, inclusive; either part
/// may be omitted to mean all) or `@all`.
pub fn parse_group(spec: &str, n: usize, t: usize) -> Result<GroupSpec> {
    let spec = spec.trim();
    if spec == "@all" {
        return GroupSpec::all(n, t);
    }
    let mut units = None;
    let mut periods = None;
    for token in spec.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::InvalidGroup(format!("expected key=list, got `{token}`")))?;
        match key {
            "units" if units.is_none() => units = Some(parse_index_list(value, n, "units")?),
            "periods" if periods.is_none() => {
                periods = Some(parse_index_list(value, t, "periods")?)
            }
            _ => return Err(Error::InvalidGroup(format!("unexpected key `{key}`"))),
        }
    }
    if units.is_none() && periods.is_none() {
        return Err(Error::InvalidGroup(format!("empty group `{spec}`")));
    }
    GroupSpec::new(
        units.unwrap_or_else(|| (0..n).collect()),
        periods.unwrap_or_else(|| (0..t).collect()),
        n,
        t,
    )
}

#[derive(Debug, Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    version: &'a str,
    input_digest: Option<&'a str>,
    seed: Option<u64>,
    config: &'a C,
    results: R,
}

fn emit<C: Serialize, R: Serialize>(
    command: &str,
    digest: Option<&str>,
    seed: Option<u64>,
    config: &C,
    results: R,
    table: Table,
    out: &OutputArgs,
    delimiter: u8,
) -> Result<()> {
    let bytes = match out.format {
        Format::Json => io::to_json(&Report {
            command,
            version: env!("CARGO_PKG_VERSION"),
            input_digest: digest,
            seed,
            config,
            results,
        })?,
        Format::Csv => table.to_csv(delimiter)?,
    };
    match &out.output {
        Some(path) => io::write_atomic(path, &bytes),
        None => {
            std::io::stdout().write_all(&bytes)?;
            Ok(())
        }
    }
}

fn fresh_seed() -> u64 {
    let seed = rand::rng().random::<u64>();
    eprintln!("seed: {seed}");
    seed
}

fn observed_input(file: &PanelFile) -> Result<&ObservedPanel> {
    file.observed().ok_or_else(|| {
        Error::InvalidOptions("input has a treated column; use the treat subcommand".into())
    })
}

fn num(x: f64) -> String {
    x.to_string()
}

#[derive(Debug, Serialize)]
struct FitResults {
    k: usize,
    lambda: f64,
    iterations: usize,
    converged: bool,
    penalized_rank: usize,
    singular_values: Vec<f64>,
    objective: f64,
}

fn completed_path(args: &FitArgs) -> Option<PathBuf> {
    args.completed.clone().or_else(|| {
        args.output.output.as_ref().map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            p.with_file_name(format!("{stem}.completed.csv"))
        })
    })
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let file = io::load_panel(&args.input.input, args.input.delimiter)?;
    let panel = observed_input(&file)?;
    let opts = args.solver.options();
    opts.validate()?;
    let prop = estimate_propensity(panel)?;
    let est = match solve_nuclear_norm(panel, &prop, &opts) {
        Err(Error::DidNotConverge { estimate }) => {
            eprintln!("warning: solver stopped at the iteration limit");
            *estimate
        }
        other => other?,
    };
    let summary = (
        est.lambda,
        est.iterations(),
        est.converged,
        est.rank(),
        est.singular_values.clone(),
    );
    let objective = *est.objective_trace.last().unwrap_or(&f64::NAN);
    let fit = refit_from_estimate(panel, est, args.k)?;

    let path = completed_path(args);
    let completed =
        io::completed_to_csv(&fit.m_hat, panel.mask(), &file.labels, args.input.delimiter)?;
    match &path {
        Some(p) => io::write_atomic(p, &completed)?,
        None => std::io::stdout().write_all(&completed)?,
    }
    let results = FitResults {
        k: args.k,
        lambda: summary.0,
        iterations: summary.1,
        converged: summary.2,
        penalized_rank: summary.3,
        singular_values: summary.4,
        objective,
    };
    let mut table = Table::new(["key", "value"]);
    table.push(["k".to_string(), results.k.to_string()]);
    table.push(["lambda".to_string(), num(results.lambda)]);
    table.push(["iterations".to_string(), results.iterations.to_string()]);
    table.push(["converged".to_string(), results.converged.to_string()]);
    table.push([
        "penalized_rank".to_string(),
        results.penalized_rank.to_string(),
    ]);
    table.push(["objective".to_string(), num(results.objective)]);
    emit(
        "fit",
        Some(&file.digest),
        args.seed,
        args,
        results,
        table,
        &args.output,
        args.input.delimiter,
    )
}

#[derive(Debug, Serialize)]
struct InferenceRow {
    group: String,
    estimate: f64,
    std_error: f64,
    t_stat: f64,
    ci_lower: f64,
    ci_upper: f64,
    p_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    control_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    treated_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rejected: Option<bool>,
}

fn flag_rejections(rows: &mut [InferenceRow], fdr: Option<f64>) -> Result<()> {
    if let Some(q) = fdr {
        let p: Vec<f64> = rows.iter().map(|r| r.p_value).collect();
        let rejected = bh_fdr(&p, q)?;
        for (i, row) in rows.iter_mut().enumerate() {
            row.rejected = Some(rejected.contains(&i));
        }
    }
    Ok(())
}

fn inference_table(rows: &[InferenceRow]) -> Table {
    let mut table = Table::new([
        "group",
        "estimate",
        "std_error",
        "t_stat",
        "ci_lower",
        "ci_upper",
        "p_value",
        "control_variance",
        "treated_variance",
        "rejected",
    ]);
    let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
    for r in rows {
        table.push([
            r.group.clone(),
            num(r.estimate),
            num(r.std_error),
            num(r.t_stat),
            num(r.ci_lower),
            num(r.ci_upper),
            num(r.p_value),
            opt(r.control_variance),
            opt(r.treated_variance),
            r.rejected.map(|b| b.to_string()).unwrap_or_default(),
        ]);
    }
    table
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let file = io::load_panel(&args.input.input, args.input.delimiter)?;
    let panel = observed_input(&file)?;
    let (n, t) = panel.shape();
    let groups = args
        .groups
        .iter()
        .map(|g| parse_group(g, n, t))
        .collect::<Result<Vec<_>>>()?;
    let opts = args.solver.options();
    opts.validate()?;
    let fit = refit_from_estimate(panel, penalized_fit(panel, &opts)?, args.k)?;
    let resid = compute_residuals(panel, &fit)?;
    let mut rows = Vec::new();
    for (label, g) in args.groups.iter().zip(&groups) {
        let r = group_inference(panel, &fit, &resid, g, args.level, args.alternative.into())?;
        rows.push(InferenceRow {
            group: label.clone(),
            estimate: r.estimate,
            std_error: r.std_error,
            t_stat: r.t_stat,
            ci_lower: r.ci_lower,
            ci_upper: r.ci_upper,
            p_value: r.p_value,
            control_variance: None,
            treated_variance: None,
            rejected: None,
        });
    }
    flag_rejections(&mut rows, args.fdr)?;
    let table = inference_table(&rows);
    emit(
        "infer",
        Some(&file.digest),
        None,
        args,
        rows,
        table,
        &args.output,
        args.input.delimiter,
    )
}

fn cmd_treat(args: &TreatArgs) -> Result<()> {
    let file = io::load_panel(&args.input.input, args.input.delimiter)?;
    let tp = file
        .treatment()
        .ok_or_else(|| Error::InvalidOptions("input has no treated column".into()))?;
    let (n, t) = tp.shape();
    let k0 = args.k0.or(args.k);
    let k1 = args.k1.or(args.k);
    let (Some(k0), Some(k1)) = (k0, k1) else {
        return Err(Error::InvalidOptions(
            "give --k or both --k0 and --k1".into(),
        ));
    };
    let groups = args
        .groups
        .iter()
        .map(|g| parse_group(g, n, t))
        .collect::<Result<Vec<_>>>()?;
    let base = args.solver.options();
    let solver = [
        SolverOptions {
            lambda: args.lambda0.unwrap_or(base.lambda),
            ..base
        },
        SolverOptions {
            lambda: args.lambda1.unwrap_or(base.lambda),
            ..base
        },
    ];
    for s in &solver {
        s.validate()?;
    }
    let arms = fit_arms(tp, [k0, k1], solver)?;
    let mut rows = Vec::new();
    for (label, g) in args.groups.iter().zip(&groups) {
        let r = arms.ate(g, args.level, args.alternative.into())?;
        rows.push(InferenceRow {
            group: label.clone(),
            estimate: r.estimate,
            std_error: r.std_error,
            t_stat: r.t_stat,
            ci_lower: r.ci_lower,
            ci_upper: r.ci_upper,
            p_value: r.p_value,
            control_variance: Some(r.arm_variances[0]),
            treated_variance: Some(r.arm_variances[1]),
            rejected: None,
        });
    }
    flag_rejections(&mut rows, args.fdr)?;
    let table = inference_table(&rows);
    emit(
        "treat",
        Some(&file.digest),
        None,
        args,
        rows,
        table,
        &args.output,
        args.input.delimiter,
    )
}

fn cmd_select_rank(args: &SelectRankArgs) -> Result<()> {
    let file = io::load_panel(&args.input.input, args.input.delimiter)?;
    let panel = observed_input(&file)?;
    let opts = args.solver.options();
    opts.validate()?;
    let (selection, seed): (RankSelection, Option<u64>) = match args.method {
        RankMethodArg::Threshold => {
            let est = penalized_fit(panel, &opts)?;
            (
                rank_threshold(&est, panel.n_units(), panel.n_periods())?,
                None,
            )
        }
        RankMethodArg::Cv => {
            let seed = args.seed.unwrap_or_else(fresh_seed);
            (rank_cv(panel, &args.candidates, &opts, seed)?, Some(seed))
        }
    };
    let mut table = Table::new(["method", "chosen_k"]);
    table.push([
        format!("{:?}", args.method).to_lowercase(),
        selection.chosen_k.to_string(),
    ]);
    emit(
        "select-rank",
        Some(&file.digest),
        seed,
        args,
        selection,
        table,
        &args.output,
        args.input.delimiter,
    )
}

fn default_targets(seed: u64, n: usize, t: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = rng.random_range(1..=n);
    let s = rng.random_range(1..=t);
    vec![
        format!("units={i} periods={s}"),
        format!("units={i}"),
        format!("periods={s}"),
    ]
}

fn mc_table(report: &McReport, labels: &[String]) -> Table {
    let mut header = vec!["rep".to_string(), "seed".into(), "frob_error".into()];
    for l in labels {
        for col in ["estimate", "truth", "standardized", "covered"] {
            header.push(format!("{l}:{col}"));
        }
    }
    let mut table = Table::new(header);
    for r in &report.records {
        let mut row = vec![r.rep.to_string(), r.seed.to_string(), num(r.frob_error)];
        for g in 0..labels.len() {
            row.push(num(r.estimates[g]));
            row.push(num(r.truths[g]));
            row.push(
                r.standardized
                    .as_ref()
                    .map(|z| num(z[g]))
                    .unwrap_or_default(),
            );
            row.push(
                r.covered
                    .as_ref()
                    .map(|c| c[g].to_string())
                    .unwrap_or_default(),
            );
        }
        table.push(row);
    }
    table
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let seed = args.seed.unwrap_or_else(fresh_seed);
    let family = match args.dgp {
        DgpArg::Factor => DgpFamily::Factor,
        DgpArg::Sine => DgpFamily::Sine,
        DgpArg::Poly => DgpFamily::Poly,
        DgpArg::Treatment => DgpFamily::Treatment,
    };
    let spec = DgpSpec {
        noise_sd: args.noise_sd,
        missing: args.p.map_or(Missingness::default(), Missingness::Uniform),
        series_truncation: args.truncation,
        decay_a: args.decay_a,
        ..DgpSpec::new(family, args.n, args.t, seed)
    };
    spec.validate()?;
    let labels = if args.targets.is_empty() {
        default_targets(seed, args.n, args.t)
    } else {
        args.targets.clone()
    };
    let targets = labels
        .iter()
        .map(|g| parse_group(g, args.n, args.t))
        .collect::<Result<Vec<_>>>()?;
    let estimator = match args.estimator {
        EstimatorArg::Tls => Estimator::Tls,
        EstimatorArg::TlsSs => Estimator::TlsSs,
        EstimatorArg::PlainNuclear => Estimator::PlainNuclear,
    };
    let config = McConfig {
        rank: args.k.map_or(RankChoice::Auto, RankChoice::Fixed),
        cv_candidates: args.candidates.clone(),
        solver: args.solver.options(),
        level: args.level,
        execution: if args.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        ..McConfig::new(spec, estimator, args.reps)
    }
    .with_targets(targets);
    let report = run_mc(&config)?;
    let table = mc_table(&report, &labels);
    #[derive(Serialize)]
    struct SimulateResults<'a> {
        targets: &'a [String],
        report: &'a McReport,
    }
    let results = SimulateResults {
        targets: &labels,
        report: &report,
    };
    emit(
        "simulate",
        None,
        Some(seed),
        args,
        results,
        table,
        &args.output,
        b',',
    )
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Treat(a) => cmd_treat(a),
        Command::SelectRank(a) => cmd_select_rank(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error ({}): {e}", e.name());
            exit_code(e.kind())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_syntax() {
        let g = parse_group("units=1..3,7 periods=2", 10, 5).unwrap();
        assert_eq!(g.units(), [0, 1, 2, 6]);
        assert_eq!(g.periods(), [1]);
        assert_eq!(parse_group("@all", 2, 3).unwrap().size(), 6);
        assert_eq!(
            parse_group("periods=5", 4, 5).unwrap().units(),
            [0, 1, 2, 3]
        );
        for bad in [
            "units=0",
            "units=11",
            "units=3..1",
            "rows=1",
            "units=1 units=2",
            "",
            "units=a",
        ] {
            assert!(
                matches!(parse_group(bad, 10, 5), Err(Error::InvalidGroup(_))),
                "{bad}"
            );
        }
        assert!(parse_group("units=1,1", 10, 5).is_err());
    }

    #[test]
    fn lambda_and_delimiter_flags() {
        assert_eq!(parse_lambda("auto"), Ok(Lambda::Auto));
        assert_eq!(parse_lambda("0.5"), Ok(Lambda::Fixed(0.5)));
        assert!(parse_lambda("-1").is_err());
        assert_eq!(parse_delimiter(";"), Ok(b';'));
        assert_eq!(parse_delimiter("tab"), Ok(b'\t'));
        assert!(parse_delimiter(",,").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["lowrank-panel", "bogus"]), 1);
        assert_eq!(run(["lowrank-panel"]), 1);
        assert_eq!(run(["lowrank-panel", "fit", "--k", "2"]), 1);
        assert_eq!(run(["lowrank-panel", "--help"]), 0);
    }

    #[test]
    fn default_targets_are_seeded() {
        assert_eq!(default_targets(3, 50, 40), default_targets(3, 50, 40));
        let t = default_targets(3, 50, 40);
        assert!(parse_group(&t[0], 50, 40).unwrap().size() == 1);
    }
}
