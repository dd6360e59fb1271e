use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use panel_ate::dgp::DgpSpec;
use panel_ate::ingest::{Metric, Span};
use panel_ate::pipeline::{
    config_from_manifest, run, write_outputs, write_simulation, DataSource, Outcome, PipelineError,
    RunConfig,
};
use panel_ate::report::{
    emit_all_figures, render_table, render_table_csv, ReportError, ResultsBundle, TableStyle,
};
use panel_ate::{Method, SolverOptions};

/// Exit codes: 0 success, 1 estimation error, 2 input/data error,
/// 3 solver convergence failure.
#[derive(Parser)]
#[command(
    name = "panel-ate",
    version,
    about = "DiD, SC and SDID estimates for block-design panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, estimate, bootstrap and write a results bundle.
    Estimate(RunArgs),
    /// Like `estimate`, and additionally write every bootstrap replicate.
    Bootstrap(RunArgs),
    /// Write a simulated panel with a known effect in the long schema.
    Simulate(SimArgs),
    /// Render the table of a results bundle.
    Report(ReportArgs),
    /// Draw trend and weight figures from a results bundle.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Metrics CSV, optionally prefixed with the metric it holds (`pushes=FILE`). Repeatable.
    #[arg(long, value_parser = DataSource::parse)]
    data: Vec<DataSource>,
    /// Population CSV (economy, population).
    #[arg(long)]
    population: Option<PathBuf>,
    /// Analyze raw counts instead of per-100k rates.
    #[arg(long)]
    no_normalize: bool,
    /// Treatment roster file.
    #[arg(long)]
    roster: Option<PathBuf>,
    /// Outcome metrics, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "pushes")]
    metric: Vec<Metric>,
    /// Languages for developers_by_language; one panel each. Repeatable or comma-separated.
    #[arg(long, value_delimiter = ',')]
    language: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "did,sc,sdid")]
    methods: Vec<Method>,
    /// Solver tolerance.
    #[arg(long, default_value_t = SolverOptions::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = SolverOptions::default().max_iter)]
    max_iter: usize,
    /// Ridge penalty on the SDID time weights.
    #[arg(long, default_value_t = 0.0)]
    lambda_ridge: f64,
    /// Bootstrap replicates; 0 disables the bootstrap.
    #[arg(long, default_value_t = panel_ate::inference::DEFAULT_REPLICATES)]
    bootstrap_reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on redrawn degenerate resamples (default 100 × replicates).
    #[arg(long)]
    max_redraws: Option<usize>,
    /// Column mapping: `long`, `innovation-graph`, `key=value,...`, or a file holding either.
    #[arg(long, default_value = "long")]
    schema: String,
    /// Periods every economy must cover, as FIRST:LAST (default: observed range).
    #[arg(long, value_parser = Span::parse)]
    span: Option<Span>,
    /// Re-run the configuration recorded in a bundle; other run flags are ignored.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 20)]
    n0: usize,
    #[arg(long, default_value_t = 20)]
    n1: usize,
    #[arg(long, default_value_t = 8)]
    t0: usize,
    #[arg(long, default_value_t = 2)]
    t1: usize,
    #[arg(long, default_value_t = 0.0)]
    effect: f64,
    #[arg(long, default_value_t = 0)]
    factors: usize,
    #[arg(long, default_value_t = 1.0)]
    factor_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 1.0)]
    unit_fe_sd: f64,
    #[arg(long, default_value_t = 1.0)]
    time_fe_sd: f64,
    /// Constant added to every outcome.
    #[arg(long, default_value_t = 100.0)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sim")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "did,sc,sdid")]
    methods: Vec<Method>,
    /// Row label for the coefficient.
    #[arg(long, default_value = "Treatment effect")]
    effect_label: String,
    /// Also write table.txt and table.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "figures")]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Pipeline(PipelineError),
    Report(ReportError),
    Input(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Pipeline(e) if e.is_convergence_failure() => 3,
            CliError::Pipeline(e) if e.is_input_error() => 2,
            CliError::Pipeline(_) => 1,
            CliError::Report(ReportError::Io { .. }) => 2,
            CliError::Report(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Pipeline(e) => write!(f, "{e}"),
            CliError::Report(e) => write!(f, "{e}"),
            CliError::Input(e) => f.write_str(e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Report(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => cmd_estimate(&args, false),
        Command::Bootstrap(args) => cmd_estimate(&args, true),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Report(args) => cmd_report(&args),
        Command::Plot(args) => cmd_plot(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = match &e {
                CliError::Pipeline(e) => std::error::Error::source(e),
                CliError::Report(e) => std::error::Error::source(e),
                CliError::Input(_) => None,
            };
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    if let Some(path) = &args.from_manifest {
        let bundle = ResultsBundle::load(path)?;
        return Ok(config_from_manifest(&bundle.manifest)?);
    }
    let roster = args
        .roster
        .clone()
        .ok_or_else(|| CliError::Input("--roster is required".into()))?;
    let schema = if Path::new(&args.schema).is_file() {
        fs::read_to_string(&args.schema)
            .map_err(|e| CliError::Input(format!("{}: {e}", args.schema)))?
    } else {
        args.schema.clone()
    };
    let mut outcomes = Vec::new();
    for &metric in &args.metric {
        if metric.has_language() {
            if args.language.is_empty() {
                return Err(CliError::Input(
                    "--metric developers_by_language needs --language".into(),
                ));
            }
            outcomes.extend(args.language.iter().map(|l| Outcome {
                metric,
                language: Some(l.clone()),
            }));
        } else {
            outcomes.push(Outcome {
                metric,
                language: None,
            });
        }
    }
    Ok(RunConfig {
        data: args.data.clone(),
        schema,
        population: args.population.clone(),
        normalize: !args.no_normalize,
        roster,
        outcomes,
        methods: args.methods.clone(),
        span: args.span.clone(),
        solver: SolverOptions {
            tol: args.tol,
            max_iter: args.max_iter,
            lambda_ridge: args.lambda_ridge,
        },
        bootstrap_reps: args.bootstrap_reps,
        seed: args.seed,
        max_redraws: args.max_redraws,
        ..RunConfig::default()
    })
}

fn cmd_estimate(args: &RunArgs, keep_replicates: bool) -> Result<(), CliError> {
    let config = run_config(args)?;
    let out = run(&config)?;
    write_outputs(&out, &args.out)?;
    if keep_replicates {
        let reps: Vec<_> = out
            .replicates
            .iter()
            .map(|(outcome, method, estimates)| {
                serde_json::json!({ "outcome": outcome, "method": method, "estimates": estimates })
            })
            .collect();
        let path = args.out.join("bootstrap.json");
        let text = serde_json::to_string_pretty(&reps).expect("serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    let table = fs::read_to_string(args.out.join("table.txt"))
        .map_err(|e| CliError::Input(e.to_string()))?;
    print!("{table}");
    Ok(())
}

fn cmd_simulate(args: &SimArgs) -> Result<(), CliError> {
    let spec = DgpSpec {
        n0: args.n0,
        n1: args.n1,
        t0: args.t0,
        t1: args.t1,
        effect: args.effect,
        n_factors: args.factors,
        factor_scale: args.factor_scale,
        noise_sd: args.noise_sd,
        unit_fe_sd: args.unit_fe_sd,
        time_fe_sd: args.time_fe_sd,
        seed: args.seed,
    };
    let files = write_simulation(&spec, args.level, &args.out)?;
    println!("data: {}", files.data.display());
    println!("population: {}", files.population.display());
    println!("roster: {}", files.roster.display());
    println!("truth: {}", files.truth.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let bundle = ResultsBundle::load(&args.bundle)?;
    let style = TableStyle {
        methods: args.methods.clone(),
        effect_label: args.effect_label.clone(),
    };
    let table = render_table(&bundle, &style)?;
    if let Some(dir) = &args.out {
        let csv = render_table_csv(&bundle, &style)?;
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        for (name, contents) in [("table.txt", &table), ("table.csv", &csv)] {
            let path = dir.join(name);
            fs::write(&path, contents)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        }
    }
    print!("{table}");
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<(), CliError> {
    let bundle = ResultsBundle::load(&args.bundle)?;
    for path in emit_all_figures(&bundle, &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}
