//! Reading economy-by-quarter metric exports and turning them into panels.
//!
//! The pipeline is `load_metrics` → `apply_sample_filters` → `per_100k` →
//! `build_outcome_panel`. Every drop is logged: malformed rows go to a
//! rejects list, dropped economies to a filter log.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::panel::{quarter_label, Panel, PanelError, PeriodKey};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{path}: missing column(s) {missing:?}")]
    SchemaMismatch { path: PathBuf, missing: Vec<String> },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("{0}: no valid rows")]
    NoValidRows(PathBuf),
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("no economies left after filtering")]
    EmptyAfterFilters,
    #[error("no population for economies: {}", .0.join(", "))]
    MissingPopulation(Vec<String>),
    #[error("{path}: {message}")]
    InvalidPopulation { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    InvalidRoster { path: PathBuf, message: String },
    #[error("invalid span: {0}")]
    InvalidSpan(String),
    #[error("no records for metric {metric}{}", language.as_ref().map(|l| format!(", language {l}")).unwrap_or_default())]
    NoSeries {
        metric: Metric,
        language: Option<String>,
    },
    #[error(transparent)]
    Panel(#[from] PanelError),
}

fn csv_error(path: &Path, e: impl fmt::Display) -> IngestError {
    IngestError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pushes,
    Repositories,
    Developers,
    DevelopersByLanguage,
}

impl Metric {
    pub fn key(&self) -> &'static str {
        match self {
            Metric::Pushes => "pushes",
            Metric::Repositories => "repositories",
            Metric::Developers => "developers",
            Metric::DevelopersByLanguage => "developers_by_language",
        }
    }

    /// Human-readable outcome title for report tables.
    pub fn title(&self, language: Option<&str>) -> String {
        match (self, language) {
            (Metric::Pushes, _) => "Pushes per 100k".into(),
            (Metric::Repositories, _) => "Repositories per 100k".into(),
            (Metric::Developers, _) => "Developers per 100k".into(),
            (Metric::DevelopersByLanguage, Some(l)) => l.to_string(),
            (Metric::DevelopersByLanguage, None) => "Developers by language".into(),
        }
    }

    pub fn has_language(&self) -> bool {
        matches!(self, Metric::DevelopersByLanguage)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pushes" | "git_pushes" => Ok(Metric::Pushes),
            "repositories" | "repos" => Ok(Metric::Repositories),
            "developers" => Ok(Metric::Developers),
            "developers_by_language" | "languages" => Ok(Metric::DevelopersByLanguage),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub economy: String,
    pub period: String,
    pub metric: Metric,
    pub language: Option<String>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeriodColumns {
    Single(String),
    YearQuarter { year: String, quarter: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricSource {
    Column(String),
    Fixed(Metric),
}

/// Maps file columns onto record fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub economy: String,
    pub period: PeriodColumns,
    pub metric: MetricSource,
    pub language: Option<String>,
    pub value: String,
}

impl Schema {
    /// Long format written by `simulate`: economy, period, metric, language, value.
    pub fn long() -> Self {
        Schema {
            economy: "economy".into(),
            period: PeriodColumns::Single("period".into()),
            metric: MetricSource::Column("metric".into()),
            language: Some("language".into()),
            value: "value".into(),
        }
    }

    /// Layout of the public Innovation Graph exports for one metric.
    pub fn innovation_graph(metric: Metric) -> Self {
        let value = match metric {
            Metric::Pushes => "git_pushes",
            Metric::Repositories => "repositories",
            Metric::Developers => "developers",
            Metric::DevelopersByLanguage => "num_pushers",
        };
        Schema {
            economy: "iso2_code".into(),
            period: PeriodColumns::YearQuarter {
                year: "year".into(),
                quarter: "quarter".into(),
            },
            metric: MetricSource::Fixed(metric),
            language: metric.has_language().then(|| "language".into()),
            value: value.into(),
        }
    }

    /// Parses `long`, `innovation-graph`, or comma/newline separated
    /// `key=value` pairs. Keys: economy, period, year, quarter,
    /// metric (fixed metric name), metric_column, language, value.
    pub fn parse(spec: &str, default_metric: Option<Metric>) -> Result<Self, IngestError> {
        let trimmed = spec.trim();
        match trimmed {
            "long" => return Ok(Schema::long()),
            "innovation-graph" | "innovation_graph" | "ig" => {
                let metric = default_metric.ok_or_else(|| {
                    IngestError::InvalidSchema("innovation-graph schema needs a metric".into())
                })?;
                return Ok(Schema::innovation_graph(metric));
            }
            _ => {}
        }
        let mut kv: HashMap<String, String> = HashMap::new();
        for part in trimmed.split([',', '\n']) {
            let part = part.trim();
            if part.is_empty() || part.starts_with('#') {
                continue;
            }
            let (k, v) = part.split_once('=').ok_or_else(|| {
                IngestError::InvalidSchema(format!("expected key=value, got {part:?}"))
            })?;
            kv.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
        let take = |k: &str| kv.get(k).cloned();
        let economy = take("economy")
            .ok_or_else(|| IngestError::InvalidSchema("missing key 'economy'".into()))?;
        let value = take("value")
            .ok_or_else(|| IngestError::InvalidSchema("missing key 'value'".into()))?;
        let period = match (take("period"), take("year"), take("quarter")) {
            (Some(p), None, None) => PeriodColumns::Single(p),
            (None, Some(year), Some(quarter)) => PeriodColumns::YearQuarter { year, quarter },
            _ => {
                return Err(IngestError::InvalidSchema(
                    "give either 'period' or both 'year' and 'quarter'".into(),
                ))
            }
        };
        let metric = match (take("metric"), take("metric_column")) {
            (Some(m), None) => MetricSource::Fixed(m.parse().map_err(IngestError::InvalidSchema)?),
            (None, Some(c)) => MetricSource::Column(c),
            (None, None) => MetricSource::Fixed(default_metric.ok_or_else(|| {
                IngestError::InvalidSchema("missing key 'metric' or 'metric_column'".into())
            })?),
            (Some(_), Some(_)) => {
                return Err(IngestError::InvalidSchema(
                    "'metric' and 'metric_column' are mutually exclusive".into(),
                ))
            }
        };
        Ok(Schema {
            economy,
            period,
            metric,
            language: take("language"),
            value,
        })
    }

    fn required_columns(&self) -> Vec<&str> {
        let mut cols = vec![self.economy.as_str(), self.value.as_str()];
        match &self.period {
            PeriodColumns::Single(p) => cols.push(p),
            PeriodColumns::YearQuarter { year, quarter } => {
                cols.push(year);
                cols.push(quarter);
            }
        }
        if let MetricSource::Column(c) = &self.metric {
            cols.push(c);
        }
        if let Some(l) = &self.language {
            cols.push(l);
        }
        cols
    }
}

/// A row that failed validation; `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedMetrics {
    pub records: Vec<MetricRecord>,
    pub rejects: Vec<Reject>,
}

pub fn load_metrics(path: &Path, schema: &Schema) -> Result<LoadedMetrics, IngestError> {
    if !path.exists() {
        return Err(IngestError::FileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let missing: Vec<String> = schema
        .required_columns()
        .into_iter()
        .filter(|c| !index.contains_key(c))
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::SchemaMismatch {
            path: path.to_path_buf(),
            missing,
        });
    }

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (k, row) in reader.records().enumerate() {
        let line = k as u64 + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject {
                    line,
                    reason: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let get = |c: &str| row.get(index[c]).unwrap_or("");
        match parse_row(schema, &get) {
            Ok(rec) => records.push(rec),
            Err(reason) => rejects.push(Reject { line, reason }),
        }
    }
    if records.is_empty() {
        return Err(IngestError::NoValidRows(path.to_path_buf()));
    }
    Ok(LoadedMetrics { records, rejects })
}

fn parse_row<'a>(schema: &Schema, get: &impl Fn(&str) -> &'a str) -> Result<MetricRecord, String> {
    let economy = get(&schema.economy);
    if economy.is_empty() {
        return Err("missing economy".into());
    }
    let period = match &schema.period {
        PeriodColumns::Single(c) => get(c).to_string(),
        PeriodColumns::YearQuarter { year, quarter } => {
            let y: i32 = get(year)
                .parse()
                .map_err(|_| format!("bad year {:?}", get(year)))?;
            let q_raw = get(quarter).trim_start_matches(['Q', 'q']);
            let q: u32 = q_raw
                .parse()
                .ok()
                .filter(|q| (1..=4).contains(q))
                .ok_or_else(|| format!("bad quarter {:?}", get(quarter)))?;
            quarter_label(y, q)
        }
    };
    PeriodKey::parse(&period).map_err(|_| format!("bad period {period:?}"))?;
    let metric = match &schema.metric {
        MetricSource::Fixed(m) => *m,
        MetricSource::Column(c) => get(c).parse::<Metric>()?,
    };
    let language = schema
        .language
        .as_ref()
        .map(|c| get(c).to_string())
        .filter(|l| !l.is_empty());
    match (metric.has_language(), &language) {
        (true, None) => return Err("missing language".into()),
        (false, Some(l)) => return Err(format!("unexpected language {l:?} for metric {metric}")),
        _ => {}
    }
    let raw = get(&schema.value);
    if raw.is_empty() {
        return Err("missing value".into());
    }
    let value: f64 = raw.parse().map_err(|_| format!("bad value {raw:?}"))?;
    if !value.is_finite() {
        return Err("non-finite value".into());
    }
    if value < 0.0 {
        return Err("negative value".into());
    }
    Ok(MetricRecord {
        economy: economy.to_string(),
        period,
        metric,
        language,
        value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    /// Lacks observations for part of the span.
    IncompleteSpan,
    /// Aggregate of member economies, collinear with them.
    EuAggregate,
    /// Outlying level of activity.
    HongKong,
    /// No complete series for the selected metric or language.
    IncompleteSeries,
}

impl FilterRule {
    pub fn key(&self) -> &'static str {
        match self {
            FilterRule::IncompleteSpan => "incomplete_span",
            FilterRule::EuAggregate => "eu_aggregate",
            FilterRule::HongKong => "hong_kong",
            FilterRule::IncompleteSeries => "incomplete_series",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLogEntry {
    pub economy: String,
    pub rule: FilterRule,
    pub detail: String,
}

/// Label lists for the aggregate and outlier exclusions, matched
/// case-insensitively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub eu_labels: Vec<String>,
    pub hong_kong_labels: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            eu_labels: vec!["EU".into(), "European Union".into()],
            hong_kong_labels: vec![
                "HK".into(),
                "Hong Kong".into(),
                "Hong Kong SAR".into(),
                "Hong Kong SAR, China".into(),
            ],
        }
    }
}

/// Inclusive period range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub first: String,
    pub last: String,
}

impl Span {
    pub fn new(first: &str, last: &str) -> Result<Self, IngestError> {
        let a = PeriodKey::parse(first).map_err(|e| IngestError::InvalidSpan(e.to_string()))?;
        let b = PeriodKey::parse(last).map_err(|e| IngestError::InvalidSpan(e.to_string()))?;
        if a > b {
            return Err(IngestError::InvalidSpan(format!("{first} is after {last}")));
        }
        Ok(Span {
            first: first.to_string(),
            last: last.to_string(),
        })
    }

    /// Parses "FIRST:LAST".
    pub fn parse(s: &str) -> Result<Self, IngestError> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| IngestError::InvalidSpan(format!("expected FIRST:LAST, got {s:?}")))?;
        Span::new(a.trim(), b.trim())
    }

    fn keys(&self) -> (PeriodKey, PeriodKey) {
        (
            PeriodKey::parse(&self.first).expect("validated"),
            PeriodKey::parse(&self.last).expect("validated"),
        )
    }

    fn contains(&self, period: &str) -> bool {
        let (a, b) = self.keys();
        PeriodKey::parse(period).is_ok_and(|k| a <= k && k <= b)
    }

    /// Every quarter in the span when both ends are quarters; otherwise
    /// `None` and the data's own periods define the span.
    fn quarters(&self) -> Option<Vec<PeriodKey>> {
        let is_quarter = |s: &str| s.to_ascii_uppercase().contains('Q');
        if !is_quarter(&self.first) || !is_quarter(&self.last) {
            return None;
        }
        let (PeriodKey::Date(a), PeriodKey::Date(b)) = self.keys() else {
            return None;
        };
        use chrono::{Datelike, Months};
        let mut out = Vec::new();
        let mut d = a;
        while d <= b {
            out.push(PeriodKey::Date(d));
            d = d.checked_add_months(Months::new(3))?;
            debug_assert_eq!(d.day(), 1);
        }
        Some(out)
    }
}

fn matches_any(label: &str, list: &[String]) -> bool {
    list.iter().any(|l| l.eq_ignore_ascii_case(label.trim()))
}

fn economies_in_order(records: &[MetricRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.economy.as_str()))
        .map(|r| r.economy.clone())
        .collect()
}

/// Restricts records to `span` and drops, in order of precedence,
/// (1) economies without an observation in every period of the span,
/// (2) the EU aggregate, (3) Hong Kong. Each dropped economy appears in the
/// log exactly once, under the first rule that removed it.
pub fn apply_sample_filters(
    records: &[MetricRecord],
    span: &Span,
    config: &FilterConfig,
) -> Result<(Vec<MetricRecord>, Vec<FilterLogEntry>), IngestError> {
    let in_span: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| span.contains(&r.period))
        .collect();
    let required: BTreeSet<PeriodKey> = match span.quarters() {
        Some(q) => q.into_iter().collect(),
        None => in_span
            .iter()
            .filter_map(|r| PeriodKey::parse(&r.period).ok())
            .collect(),
    };
    let mut present: HashMap<&str, BTreeSet<PeriodKey>> = HashMap::new();
    for r in &in_span {
        if let Ok(k) = PeriodKey::parse(&r.period) {
            present.entry(r.economy.as_str()).or_default().insert(k);
        }
    }

    let mut log = Vec::new();
    let mut dropped: HashSet<String> = HashSet::new();
    for economy in economies_in_order(records) {
        let have = present
            .get(economy.as_str())
            .map_or(0, |s| s.intersection(&required).count());
        let entry = if have < required.len() {
            Some((
                FilterRule::IncompleteSpan,
                format!(
                    "observed in {have} of {} periods between {} and {}",
                    required.len(),
                    span.first,
                    span.last
                ),
            ))
        } else if matches_any(&economy, &config.eu_labels) {
            Some((
                FilterRule::EuAggregate,
                "aggregate of member economies".to_string(),
            ))
        } else if matches_any(&economy, &config.hong_kong_labels) {
            Some((FilterRule::HongKong, "excluded outlier".to_string()))
        } else {
            None
        };
        if let Some((rule, detail)) = entry {
            dropped.insert(economy.clone());
            log.push(FilterLogEntry {
                economy,
                rule,
                detail,
            });
        }
    }
    let kept: Vec<MetricRecord> = in_span
        .into_iter()
        .filter(|r| !dropped.contains(&r.economy))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(IngestError::EmptyAfterFilters);
    }
    Ok((kept, log))
}

/// Economy → population (persons).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PopulationTable {
    pub populations: BTreeMap<String, f64>,
}

impl PopulationTable {
    /// Reads a two-column CSV (economy, population) with a header row.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        if !path.exists() {
            return Err(IngestError::FileNotFound(path.to_path_buf()));
        }
        let invalid = |message: String| IngestError::InvalidPopulation {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut populations = BTreeMap::new();
        for (k, row) in reader.records().enumerate() {
            let row = row.map_err(|e| csv_error(path, e))?;
            let line = k + 2;
            if row.len() < 2 {
                return Err(invalid(format!("line {line}: expected 2 columns")));
            }
            let pop: f64 = row[1]
                .parse()
                .map_err(|_| invalid(format!("line {line}: bad population {:?}", &row[1])))?;
            if !(pop > 0.0 && pop.is_finite()) {
                return Err(invalid(format!("line {line}: population must be positive")));
            }
            populations.insert(row[0].to_string(), pop);
        }
        Ok(PopulationTable { populations })
    }

    pub fn get(&self, economy: &str) -> Option<f64> {
        self.populations.get(economy).copied()
    }
}

/// `value / population × 100 000` for every record.
pub fn per_100k(
    records: &[MetricRecord],
    pop: &PopulationTable,
) -> Result<Vec<MetricRecord>, IngestError> {
    let missing: Vec<String> = economies_in_order(records)
        .into_iter()
        .filter(|e| pop.get(e).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingPopulation(missing));
    }
    Ok(records
        .iter()
        .map(|r| MetricRecord {
            value: r.value / pop.get(&r.economy).expect("checked") * 100_000.0,
            ..r.clone()
        })
        .collect())
}

/// Treated economies and the common adoption period.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentRoster {
    pub treated_economies: BTreeSet<String>,
    pub treatment_start: String,
}

impl TreatmentRoster {
    pub fn new(treated: impl IntoIterator<Item = String>, start: &str) -> Result<Self, String> {
        let treated_economies: BTreeSet<String> = treated.into_iter().collect();
        if treated_economies.is_empty() {
            return Err("roster lists no economies".into());
        }
        PeriodKey::parse(start).map_err(|e| e.to_string())?;
        Ok(TreatmentRoster {
            treated_economies,
            treatment_start: start.to_string(),
        })
    }

    /// One economy per line plus a `treatment_start: <period>` line
    /// (`=` also accepted). Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut start = None;
        let mut treated = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line
                .strip_prefix("treatment_start")
                .map(|r| r.trim_start_matches([':', '=', ' ']).trim())
            {
                start = Some(rest.to_string());
            } else {
                treated.push(line.to_string());
            }
        }
        let start = start.ok_or("missing treatment_start line")?;
        TreatmentRoster::new(treated, &start)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text =
            fs::read_to_string(path).map_err(|_| IngestError::FileNotFound(path.to_path_buf()))?;
        TreatmentRoster::parse(&text).map_err(|message| IngestError::InvalidRoster {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn render(&self) -> String {
        let mut out = format!("treatment_start: {}\n", self.treatment_start);
        for e in &self.treated_economies {
            out.push_str(e);
            out.push('\n');
        }
        out
    }
}

/// Builds the panel for one metric (and language). Economies lacking any
/// period present in the selected series are dropped and logged, so
/// different languages can yield different unit counts.
pub fn build_outcome_panel(
    records: &[MetricRecord],
    roster: &TreatmentRoster,
    metric: Metric,
    language: Option<&str>,
) -> Result<(Panel, Vec<FilterLogEntry>), IngestError> {
    let selected: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| r.metric == metric && r.language.as_deref() == language)
        .collect();
    if selected.is_empty() {
        return Err(IngestError::NoSeries {
            metric,
            language: language.map(str::to_string),
        });
    }
    let periods: BTreeSet<&str> = selected.iter().map(|r| r.period.as_str()).collect();
    let mut by_economy: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for r in &selected {
        by_economy
            .entry(r.economy.as_str())
            .or_default()
            .insert(r.period.as_str());
    }
    let mut log = Vec::new();
    let mut keep: HashSet<&str> = HashSet::new();
    let mut seen = HashSet::new();
    for r in &selected {
        let e = r.economy.as_str();
        if !seen.insert(e) {
            continue;
        }
        let have = by_economy[e].len();
        if have == periods.len() {
            keep.insert(e);
        } else {
            log.push(FilterLogEntry {
                economy: e.to_string(),
                rule: FilterRule::IncompleteSeries,
                detail: format!(
                    "{have} of {} periods for {}",
                    periods.len(),
                    series_name(metric, language)
                ),
            });
        }
    }
    let triples: Vec<(&str, &str, f64)> = selected
        .iter()
        .filter(|r| keep.contains(r.economy.as_str()))
        .map(|r| (r.economy.as_str(), r.period.as_str(), r.value))
        .collect();
    if triples.is_empty() {
        return Err(IngestError::EmptyAfterFilters);
    }
    let mut panel = Panel::from_records(&triples)?;
    let treated: Vec<String> = panel
        .unit_ids()
        .iter()
        .filter(|u| roster.treated_economies.contains(u.as_str()))
        .cloned()
        .collect();
    panel.set_treatment(&treated, &roster.treatment_start)?;
    panel.to_block()?;
    Ok((panel, log))
}

fn series_name(metric: Metric, language: Option<&str>) -> String {
    match language {
        Some(l) => format!("{metric}/{l}"),
        None => metric.to_string(),
    }
}

/// Writes records in the long schema.
pub fn write_long_csv(path: &Path, records: &[MetricRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["economy", "period", "metric", "language", "value"])
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record([
            r.economy.as_str(),
            r.period.as_str(),
            r.metric.key(),
            r.language.as_deref().unwrap_or(""),
            &format!("{}", r.value),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| csv_error(path, e))
}

/// Long-format records for every cell of a panel.
pub fn panel_to_records(
    panel: &Panel,
    metric: Metric,
    language: Option<&str>,
) -> Vec<MetricRecord> {
    let mut out = Vec::with_capacity(panel.n_units() * panel.n_periods());
    for (i, u) in panel.unit_ids().iter().enumerate() {
        for (j, p) in panel.period_ids().iter().enumerate() {
            out.push(MetricRecord {
                economy: u.clone(),
                period: p.clone(),
                metric,
                language: language.map(str::to_string),
                value: panel.outcomes()[(i, j)],
            });
        }
    }
    out
}
