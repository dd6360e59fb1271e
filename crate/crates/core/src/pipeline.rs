//! End-to-end run: CSV exports → filtered, normalized panels → estimates
//! with bootstrap standard errors → [`ResultsBundle`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dgp::{generate_panel, DgpError, DgpSpec};
use crate::digest::hex_sha256;
use crate::estimator::{baseline_mean, estimate, trend_series, EstimateError};
use crate::inference::{attach_inference, bootstrap_se, BootstrapOptions, InferenceError};
use crate::ingest::{
    apply_sample_filters, build_outcome_panel, load_metrics, panel_to_records, per_100k,
    write_long_csv, FilterConfig, FilterLogEntry, IngestError, Metric, MetricRecord,
    PopulationTable, Reject, Schema, Span, TreatmentRoster,
};
use crate::panel::{sort_periods, Panel};
use crate::report::{
    BootstrapSummary, Figure, InputFile, Manifest, MethodResult, OutcomeResult, ResultsBundle,
};
use crate::weights::{Method, SolverError, SolverOptions, WeightError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{outcome}, {method}: {source}")]
    Estimate {
        outcome: String,
        method: Method,
        #[source]
        source: EstimateError,
    },
    #[error("{outcome}, {method}: {source}")]
    Inference {
        outcome: String,
        method: Method,
        #[source]
        source: InferenceError,
    },
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error(transparent)]
    Dgp(#[from] DgpError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input {path} changed since the manifest was written")]
    InputChanged { path: PathBuf },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl PipelineError {
    /// True when the failure is a weight solver that ran out of iterations.
    pub fn is_convergence_failure(&self) -> bool {
        let est = match self {
            PipelineError::Estimate { source, .. } => source,
            PipelineError::Inference {
                source: InferenceError::Replicate { source, .. },
                ..
            } => source,
            _ => return false,
        };
        matches!(
            est,
            EstimateError::Weights(WeightError::Solver(SolverError::DidNotConverge { .. }))
        )
    }

    /// True for problems with the inputs rather than the estimation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PipelineError::Ingest(_)
                | PipelineError::Config(_)
                | PipelineError::Dgp(_)
                | PipelineError::InputChanged { .. }
                | PipelineError::Io { .. }
        )
    }
}

/// A metrics file; `metric` restricts it to one outcome metric, which also
/// selects the per-metric column layout for preset schemas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSource {
    pub metric: Option<Metric>,
    pub path: PathBuf,
}

impl DataSource {
    /// Parses `PATH` or `METRIC=PATH`.
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Some((m, p)) = s.split_once('=') {
            if let Ok(metric) = m.parse::<Metric>() {
                return Ok(DataSource {
                    metric: Some(metric),
                    path: PathBuf::from(p),
                });
            }
        }
        Ok(DataSource {
            metric: None,
            path: PathBuf::from(s),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub metric: Metric,
    pub language: Option<String>,
}

impl Outcome {
    pub fn label(&self) -> String {
        self.metric.title(self.language.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Vec<DataSource>,
    /// Schema preset name or `key=value` list, see [`Schema::parse`].
    pub schema: String,
    /// Population CSV; required unless `normalize` is false.
    pub population: Option<PathBuf>,
    pub normalize: bool,
    pub roster: PathBuf,
    pub outcomes: Vec<Outcome>,
    pub methods: Vec<Method>,
    /// Periods every economy must cover; `None` uses the observed range.
    pub span: Option<Span>,
    pub filters: FilterConfig,
    pub solver: SolverOptions,
    /// Zero skips the bootstrap.
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub max_redraws: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: Vec::new(),
            schema: "long".into(),
            population: None,
            normalize: true,
            roster: PathBuf::new(),
            outcomes: vec![Outcome {
                metric: Metric::Pushes,
                language: None,
            }],
            methods: Method::ALL.to_vec(),
            span: None,
            filters: FilterConfig::default(),
            solver: SolverOptions::default(),
            bootstrap_reps: crate::inference::DEFAULT_REPLICATES,
            seed: 0,
            max_redraws: None,
        }
    }
}

/// A finished run: the bundle plus the logs it fingerprints.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub bundle: ResultsBundle,
    /// (outcome label, entry) in processing order.
    pub filter_log: Vec<(String, FilterLogEntry)>,
    /// (file, reject) in file order.
    pub rejects: Vec<(PathBuf, Reject)>,
    /// Replicate estimates per (outcome label, method), when bootstrapped.
    pub replicates: Vec<(String, Method, Vec<f64>)>,
}

/// An analysis panel ready for estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedOutcome {
    pub outcome: Outcome,
    pub panel: Panel,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|_| IngestError::FileNotFound(path.to_path_buf()).into())
}

fn fingerprint(role: &str, path: &Path) -> Result<InputFile, PipelineError> {
    Ok(InputFile {
        role: role.into(),
        path: path.to_path_buf(),
        sha256: hex_sha256(&read_bytes(path)?),
    })
}

fn filter_log_csv(log: &[(String, FilterLogEntry)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["outcome", "economy", "rule", "detail"])
        .expect("in-memory write");
    for (o, e) in log {
        w.write_record([
            o.as_str(),
            e.economy.as_str(),
            e.rule.key(),
            e.detail.as_str(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

fn rejects_csv(rejects: &[(PathBuf, Reject)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["file", "line", "reason"])
        .expect("in-memory write");
    for (p, r) in rejects {
        w.write_record([
            p.display().to_string(),
            r.line.to_string(),
            r.reason.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

impl RunOutput {
    pub fn filter_log_csv(&self) -> String {
        filter_log_csv(&self.filter_log)
    }

    pub fn rejects_csv(&self) -> String {
        rejects_csv(&self.rejects)
    }
}

fn validate(config: &RunConfig) -> Result<(), PipelineError> {
    if config.data.is_empty() {
        return Err(PipelineError::Config("no data files given".into()));
    }
    if config.outcomes.is_empty() {
        return Err(PipelineError::Config("no outcomes requested".into()));
    }
    if config.methods.is_empty() {
        return Err(PipelineError::Config("no methods requested".into()));
    }
    for o in &config.outcomes {
        if o.metric.has_language() != o.language.is_some() {
            return Err(PipelineError::Config(format!(
                "metric {} {} a language",
                o.metric,
                if o.metric.has_language() {
                    "needs"
                } else {
                    "does not take"
                }
            )));
        }
    }
    if config.bootstrap_reps == 1 {
        return Err(PipelineError::Config(
            "the bootstrap needs at least 2 replicates".into(),
        ));
    }
    Ok(())
}

/// Prepared panels with the filter log and rejects, as in [`RunOutput`].
pub type Prepared = (
    Vec<PreparedOutcome>,
    Vec<(String, FilterLogEntry)>,
    Vec<(PathBuf, Reject)>,
);

/// Loads, filters and normalizes the inputs and builds one panel per
/// requested outcome.
pub fn prepare(config: &RunConfig) -> Result<Prepared, PipelineError> {
    validate(config)?;
    let roster = TreatmentRoster::load(&config.roster)?;
    let population = match (&config.population, config.normalize) {
        (Some(p), true) => Some(PopulationTable::load(p)?),
        (None, true) => {
            return Err(
                IngestError::MissingPopulation(vec!["(no population file given)".into()]).into(),
            )
        }
        (_, false) => None,
    };

    let mut rejects = Vec::new();
    let mut loaded: Vec<(Option<Metric>, Vec<MetricRecord>)> = Vec::new();
    for source in &config.data {
        let schema = Schema::parse(&config.schema, source.metric)?;
        let out = load_metrics(&source.path, &schema)?;
        rejects.extend(out.rejects.into_iter().map(|r| (source.path.clone(), r)));
        loaded.push((source.metric, out.records));
    }

    let mut log = Vec::new();
    let mut prepared = Vec::new();
    for outcome in &config.outcomes {
        let label = outcome.label();
        let records: Vec<MetricRecord> = loaded
            .iter()
            .filter(|(m, _)| m.is_none_or(|m| m == outcome.metric))
            .flat_map(|(_, recs)| recs.iter())
            .filter(|r| r.metric == outcome.metric)
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(IngestError::NoSeries {
                metric: outcome.metric,
                language: outcome.language.clone(),
            }
            .into());
        }
        let span = match &config.span {
            Some(s) => s.clone(),
            None => observed_span(&records)?,
        };
        let (kept, filter_log) = apply_sample_filters(&records, &span, &config.filters)?;
        log.extend(filter_log.into_iter().map(|e| (label.clone(), e)));
        let kept = match &population {
            Some(pop) => per_100k(&kept, pop)?,
            None => kept,
        };
        let (panel, dropped) =
            build_outcome_panel(&kept, &roster, outcome.metric, outcome.language.as_deref())?;
        log.extend(dropped.into_iter().map(|e| (label.clone(), e)));
        prepared.push(PreparedOutcome {
            outcome: outcome.clone(),
            panel,
        });
    }
    Ok((prepared, log, rejects))
}

fn observed_span(records: &[MetricRecord]) -> Result<Span, PipelineError> {
    let labels: Vec<String> = records
        .iter()
        .map(|r| r.period.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let sorted = sort_periods(&labels).map_err(IngestError::from)?;
    Ok(Span::new(&sorted[0], &sorted[sorted.len() - 1])?)
}

/// Runs the whole pipeline described by `config`.
pub fn run(config: &RunConfig) -> Result<RunOutput, PipelineError> {
    let (prepared, filter_log, rejects) = prepare(config)?;

    let mut inputs = Vec::new();
    for d in &config.data {
        inputs.push(fingerprint("data", &d.path)?);
    }
    if let (Some(p), true) = (&config.population, config.normalize) {
        inputs.push(fingerprint("population", p)?);
    }
    inputs.push(fingerprint("roster", &config.roster)?);
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(config).expect("config serializes"),
        inputs,
        filter_log_sha256: hex_sha256(filter_log_csv(&filter_log).as_bytes()),
        rejects_sha256: hex_sha256(rejects_csv(&rejects).as_bytes()),
    };
    let manifest_sha256 = manifest.sha256();

    let boot_opts = BootstrapOptions {
        max_redraws: config.max_redraws,
        solver: config.solver,
        parallel: true,
    };
    let mut outcomes = Vec::new();
    let mut figures = Vec::new();
    let mut replicates = Vec::new();
    for p in &prepared {
        let label = p.outcome.label();
        let (y, design) = p.panel.block().map_err(IngestError::from)?;
        let controls: Vec<String> = design.row_order[..design.n0]
            .iter()
            .map(|&i| p.panel.unit_ids()[i].clone())
            .collect();
        let mut results = Vec::new();
        for &method in &config.methods {
            let mut est = estimate(&p.panel, method, &config.solver).map_err(|source| {
                PipelineError::Estimate {
                    outcome: label.clone(),
                    method,
                    source,
                }
            })?;
            debug_assert_eq!(est.baseline_mean, baseline_mean(&y, &design));
            let mut bootstrap = None;
            if config.bootstrap_reps > 0 {
                let inference_err = |source| PipelineError::Inference {
                    outcome: label.clone(),
                    method,
                    source,
                };
                let boot = bootstrap_se(
                    &p.panel,
                    method,
                    config.bootstrap_reps,
                    config.seed,
                    &boot_opts,
                )
                .map_err(inference_err)?;
                est = attach_inference(&est, &boot).map_err(inference_err)?;
                bootstrap = Some(BootstrapSummary {
                    replicates: boot.replicates,
                    redraws: boot.redraws,
                    seed: boot.seed,
                });
                replicates.push((label.clone(), method, boot.estimates));
            }
            let trend = trend_series(&y, &design, &est.weights).map_err(|source| {
                PipelineError::Estimate {
                    outcome: label.clone(),
                    method,
                    source,
                }
            })?;
            figures.push(Figure {
                outcome: label.clone(),
                method,
                period_labels: p.panel.period_ids().to_vec(),
                treatment_index: design.t0,
                control_labels: controls.clone(),
                trend,
                weights: est.weights.clone(),
            });
            results.push(MethodResult {
                estimate: est,
                bootstrap,
                manifest_sha256: manifest_sha256.clone(),
            });
        }
        outcomes.push(OutcomeResult {
            label,
            n_units: p.panel.n_units(),
            n_periods: p.panel.n_periods(),
            results,
        });
    }
    Ok(RunOutput {
        bundle: ResultsBundle {
            outcomes,
            figures,
            manifest,
        },
        filter_log,
        rejects,
        replicates,
    })
}

/// Recovers the configuration from a bundle's manifest, checking that the
/// recorded inputs are unchanged.
pub fn config_from_manifest(manifest: &Manifest) -> Result<RunConfig, PipelineError> {
    let config: RunConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| PipelineError::Config(format!("manifest config: {e}")))?;
    for input in &manifest.inputs {
        if hex_sha256(&read_bytes(&input.path)?) != input.sha256 {
            return Err(PipelineError::InputChanged {
                path: input.path.clone(),
            });
        }
    }
    Ok(config)
}

/// Writes bundle.json, table.txt, table.csv, filter_log.csv and rejects.csv
/// into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), PipelineError> {
    let io = |path: &Path, e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let style = crate::report::TableStyle {
        methods: out
            .bundle
            .outcomes
            .first()
            .map(|o| o.results.iter().map(|r| r.estimate.method).collect())
            .unwrap_or_default(),
        ..Default::default()
    };
    let table = crate::report::render_table(&out.bundle, &style)?;
    let table_csv = crate::report::render_table_csv(&out.bundle, &style)?;
    for (name, contents) in [
        ("bundle.json", out.bundle.to_json()),
        ("table.txt", table),
        ("table.csv", table_csv),
        ("filter_log.csv", out.filter_log_csv()),
        ("rejects.csv", out.rejects_csv()),
    ] {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

/// Files written by [`write_simulation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationFiles {
    pub data: PathBuf,
    pub population: PathBuf,
    pub roster: PathBuf,
    pub truth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SimulationTruth {
    spec: DgpSpec,
    level: f64,
    effect: f64,
}

/// Writes a simulated pushes panel in the long schema, with a population of
/// 100 000 per economy (so normalization is the identity), a roster and the
/// true effect. `level` is added to every outcome to keep values
/// nonnegative.
pub fn write_simulation(
    spec: &DgpSpec,
    level: f64,
    dir: &Path,
) -> Result<SimulationFiles, PipelineError> {
    let (panel, effect) = generate_panel(spec)?;
    let panel = panel.map_outcomes(|v| v + level);
    let io = |path: &Path, e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let files = SimulationFiles {
        data: dir.join("data.csv"),
        population: dir.join("population.csv"),
        roster: dir.join("roster.txt"),
        truth: dir.join("truth.json"),
    };
    write_long_csv(&files.data, &panel_to_records(&panel, Metric::Pushes, None))?;
    let mut pop = String::from("economy,population\n");
    for u in panel.unit_ids() {
        pop.push_str(&format!("{u},100000\n"));
    }
    fs::write(&files.population, pop).map_err(|e| io(&files.population, e))?;
    let roster = TreatmentRoster::new(
        panel.treated_units().into_iter().map(str::to_string),
        panel
            .treatment_start()
            .expect("generated panels are treated"),
    )
    .map_err(PipelineError::Config)?;
    fs::write(&files.roster, roster.render()).map_err(|e| io(&files.roster, e))?;
    let truth = SimulationTruth {
        spec: spec.clone(),
        level,
        effect,
    };
    let text = serde_json::to_string_pretty(&truth).expect("serializes") + "\n";
    fs::write(&files.truth, text).map_err(|e| io(&files.truth, e))?;
    Ok(files)
}
