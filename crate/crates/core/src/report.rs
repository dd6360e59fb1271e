//! Results bundles, plain-text/CSV tables and SVG figures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::estimator::{AteEstimate, TrendSeries};
use crate::weights::{Method, WeightSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("bundle has no {method} estimate for outcome {outcome:?}")]
    IncompleteBundle { outcome: String, method: Method },
    #[error("bundle contains no outcomes")]
    EmptyBundle,
    #[error("{labels} labels for {weights} weights")]
    LabelMismatch { labels: usize, weights: usize },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Summary of the bootstrap run behind a standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub redraws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub estimate: AteEstimate,
    pub bootstrap: Option<BootstrapSummary>,
    /// SHA-256 of the bundle manifest this estimate was produced under.
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeResult {
    pub label: String,
    pub n_units: usize,
    pub n_periods: usize,
    pub results: Vec<MethodResult>,
}

impl OutcomeResult {
    pub fn get(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.estimate.method == method)
    }
}

/// Everything needed to draw the trend and weight figures for one
/// (outcome, method) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub outcome: String,
    pub method: Method,
    pub period_labels: Vec<String>,
    /// Index of the first treated period.
    pub treatment_index: usize,
    pub control_labels: Vec<String>,
    pub trend: TrendSeries,
    pub weights: WeightSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Run configuration and input fingerprints. `config` is the serialized
/// pipeline configuration, enough to repeat the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub filter_log_sha256: String,
    pub rejects_sha256: String,
}

impl Manifest {
    pub fn sha256(&self) -> String {
        crate::digest::hex_sha256(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub outcomes: Vec<OutcomeResult>,
    pub figures: Vec<Figure>,
    pub manifest: Manifest,
}

impl ResultsBundle {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundle serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        ResultsBundle::from_json(&text).map_err(|e| io_error(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        fs::write(path, self.to_json()).map_err(|e| io_error(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableStyle {
    pub methods: Vec<Method>,
    pub effect_label: String,
}

impl Default for TableStyle {
    fn default() -> Self {
        TableStyle {
            methods: Method::ALL.to_vec(),
            effect_label: "Treatment effect".into(),
        }
    }
}

pub const TABLE_NOTE: &str = "Bootstrap standard errors clustered by unit in parentheses. \
* p<.10, ** p<.05, *** p<.01. Baseline Mean Outcome is the mean outcome over all units \
in the pre-treatment periods.";

/// Coefficient cell: three decimals followed by stars.
pub fn format_coef(ate: f64, stars: u8) -> String {
    format!("{ate:.3}{}", "*".repeat(stars as usize))
}

pub fn format_se(se: Option<f64>) -> String {
    match se {
        Some(se) => format!("({se:.3})"),
        None => "(n/a)".into(),
    }
}

/// Four significant figures, never dropping integer digits.
pub fn format_sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = |v: f64| v.abs().log10().floor() as i32 + 1;
    let mut decimals = (4 - digits(x)).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    // Rounding can carry into a new integer digit (999.96 → 1000.0).
    let rounded: f64 = s.parse().unwrap_or(x);
    if rounded != 0.0 && digits(rounded) > digits(x) && decimals > 0 {
        decimals -= 1;
        s = format!("{x:.decimals$}");
    }
    s
}

fn panel_letter(k: usize) -> String {
    let mut k = k;
    let mut s = String::new();
    loop {
        s.insert(0, (b'A' + (k % 26) as u8) as char);
        if k < 26 {
            break;
        }
        k = k / 26 - 1;
    }
    s
}

fn check_complete(bundle: &ResultsBundle, methods: &[Method]) -> Result<(), ReportError> {
    if bundle.outcomes.is_empty() {
        return Err(ReportError::EmptyBundle);
    }
    for o in &bundle.outcomes {
        for &m in methods {
            if o.get(m).is_none() {
                return Err(ReportError::IncompleteBundle {
                    outcome: o.label.clone(),
                    method: m,
                });
            }
        }
    }
    Ok(())
}

/// Renders one panel per outcome with a column per method.
pub fn render_table(bundle: &ResultsBundle, style: &TableStyle) -> Result<String, ReportError> {
    check_complete(bundle, &style.methods)?;
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let mut headings = Vec::new();
    for (k, o) in bundle.outcomes.iter().enumerate() {
        let est: Vec<&AteEstimate> = style
            .methods
            .iter()
            .map(|&m| &o.get(m).expect("checked").estimate)
            .collect();
        headings.push((
            rows.len(),
            format!("Panel {}. {}", panel_letter(k), o.label),
        ));
        rows.push((
            style.effect_label.clone(),
            est.iter().map(|e| format_coef(e.ate, e.stars)).collect(),
        ));
        rows.push((String::new(), est.iter().map(|e| format_se(e.se)).collect()));
        rows.push((
            "Observations".into(),
            est.iter().map(|e| e.n_obs.to_string()).collect(),
        ));
        rows.push((
            "Baseline Mean Outcome".into(),
            est.iter().map(|e| format_sig4(e.baseline_mean)).collect(),
        ));
    }

    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(1);
    let col_w = rows
        .iter()
        .flat_map(|r| r.1.iter().map(String::len))
        .chain(style.methods.iter().map(|m| m.label().len()))
        .max()
        .unwrap_or(0)
        + 2;
    let total = label_w + col_w * style.methods.len();
    let rule = "-".repeat(total);

    let mut out = String::new();
    writeln!(out, "{rule}").unwrap();
    let mut header = format!("{:label_w$}", "");
    for m in &style.methods {
        write!(header, "{:>col_w$}", m.label()).unwrap();
    }
    writeln!(out, "{header}").unwrap();
    let mut next_heading = headings.iter().peekable();
    for (i, (label, cells)) in rows.iter().enumerate() {
        if let Some((_, title)) = next_heading.next_if(|(at, _)| *at == i) {
            writeln!(out, "{rule}").unwrap();
            writeln!(out, "{title}").unwrap();
        }
        let mut line = format!("{label:label_w$}");
        for c in cells {
            write!(line, "{c:>col_w$}").unwrap();
        }
        writeln!(out, "{}", line.trim_end()).unwrap();
    }
    writeln!(out, "{rule}").unwrap();
    writeln!(out, "{TABLE_NOTE}").unwrap();
    Ok(out)
}

/// Machine-readable companion of [`render_table`], at full precision.
pub fn render_table_csv(bundle: &ResultsBundle, style: &TableStyle) -> Result<String, ReportError> {
    check_complete(bundle, &style.methods)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "outcome",
        "method",
        "ate",
        "se",
        "stars",
        "observations",
        "baseline_mean",
    ];
    let to_err = |e: csv::Error| io_error(Path::new("<table>"), e);
    w.write_record(header).map_err(to_err)?;
    for o in &bundle.outcomes {
        for &m in &style.methods {
            let e = &o.get(m).expect("checked").estimate;
            w.write_record([
                o.label.clone(),
                m.label().to_string(),
                e.ate.to_string(),
                e.se.map(|s| s.to_string()).unwrap_or_default(),
                e.stars.to_string(),
                e.n_obs.to_string(),
                e.baseline_mean.to_string(),
            ])
            .map_err(to_err)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| io_error(Path::new("<table>"), e))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// Labels and positions for [`emit_trend_plot`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrendMeta {
    pub title: String,
    pub method: Method,
    pub period_labels: Vec<String>,
    pub treatment_index: usize,
}

impl From<&Figure> for TrendMeta {
    fn from(f: &Figure) -> Self {
        TrendMeta {
            title: format!("{}: {}", f.outcome, f.method),
            method: f.method,
            period_labels: f.period_labels.clone(),
            treatment_index: f.treatment_index,
        }
    }
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n\
<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

/// Maps `[lo, hi]` to the plot's vertical pixel range, padding flat ranges.
fn y_scale(lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let (lo, hi) = if hi - lo < 1e-12 * (1.0 + hi.abs()) {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    };
    move |v| MARGIN_T + (hi - v) / (hi - lo) * (HEIGHT - MARGIN_T - MARGIN_B)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn companion_csv(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes the trend SVG at `path` and the plotted values next to it as CSV.
/// Returns the CSV path.
pub fn emit_trend_plot(
    series: &TrendSeries,
    meta: &TrendMeta,
    path: &Path,
) -> Result<PathBuf, ReportError> {
    let t = series.treated_path.len();
    if series.synthetic_path.len() != t || meta.period_labels.len() != t {
        return Err(ReportError::LabelMismatch {
            labels: meta.period_labels.len(),
            weights: t,
        });
    }
    let values = series.treated_path.iter().chain(&series.synthetic_path);
    let lo = values.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.cloned().fold(f64::NEG_INFINITY, f64::max);
    let ys = y_scale(lo, hi);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let xs = |j: usize| {
        if t <= 1 {
            MARGIN_L + plot_w / 2.0
        } else {
            MARGIN_L + j as f64 / (t - 1) as f64 * plot_w
        }
    };
    let bottom = HEIGHT - MARGIN_B;

    let mut svg = svg_open(&meta.title);
    // Time-weight shading: bar height proportional to λ over each pre-period.
    if meta.method == Method::Sdid {
        let step = if t > 1 {
            plot_w / (t - 1) as f64
        } else {
            plot_w
        };
        let max_l = series.lambda_profile.iter().cloned().fold(0.0, f64::max);
        for (j, &l) in series.lambda_profile.iter().enumerate() {
            if l <= 0.0 || max_l <= 0.0 {
                continue;
            }
            let h = l / max_l * (bottom - MARGIN_T) * 0.25;
            writeln!(
                svg,
                "<rect class=\"lambda\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#999\" fill-opacity=\"0.35\"/>",
                xs(j) - step / 2.0,
                bottom - h,
                step,
                h
            )
            .unwrap();
        }
    }
    writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{bottom}\" x2=\"{}\" y2=\"{bottom}\" stroke=\"black\"/>\n\
<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{bottom}\" stroke=\"black\"/>",
        WIDTH - MARGIN_R
    )
    .unwrap();
    for (v, anchor) in [(lo, lo), (hi, hi)] {
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            MARGIN_L - 6.0,
            ys(anchor) + 4.0,
            format_sig4(v)
        )
        .unwrap();
    }
    for (j, label) in meta.period_labels.iter().enumerate() {
        writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"end\" transform=\"rotate(-45 {:.2} {})\">{}</text>",
            xs(j),
            bottom + 14.0,
            xs(j),
            bottom + 14.0,
            escape(label)
        )
        .unwrap();
    }
    if meta.treatment_index < t {
        let x = xs(meta.treatment_index);
        writeln!(
            svg,
            "<line class=\"treatment-start\" x1=\"{x:.2}\" y1=\"{MARGIN_T}\" x2=\"{x:.2}\" y2=\"{bottom}\" stroke=\"#555\" stroke-dasharray=\"2,3\"/>"
        )
        .unwrap();
    }
    let polyline = |path: &[f64]| -> String {
        path.iter()
            .enumerate()
            .map(|(j, &v)| format!("{:.2},{:.2}", xs(j), ys(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    writeln!(
        svg,
        "<polyline class=\"treated\" points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n\
<polyline class=\"synthetic\" points=\"{}\" fill=\"none\" stroke=\"#2c3e50\" stroke-width=\"2\" stroke-dasharray=\"6,4\"/>",
        polyline(&series.treated_path),
        polyline(&series.synthetic_path)
    )
    .unwrap();
    let synthetic_name = match meta.method {
        Method::Did => "Control mean",
        Method::Sc | Method::Sdid => "Synthetic control",
    };
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" fill=\"#c0392b\">Treated</text>\n<text x=\"{}\" y=\"{}\" fill=\"#2c3e50\">{synthetic_name}</text>\n</svg>",
        MARGIN_L + 10.0,
        MARGIN_T + 12.0,
        MARGIN_L + 80.0,
        MARGIN_T + 12.0
    )
    .unwrap();
    write_file(path, &svg)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| io_error(path, e);
    w.write_record(["period", "treated", "synthetic", "lambda"])
        .map_err(to_err)?;
    for j in 0..t {
        w.write_record([
            meta.period_labels[j].clone(),
            series.treated_path[j].to_string(),
            series.synthetic_path[j].to_string(),
            series
                .lambda_profile
                .get(j)
                .map(|l| l.to_string())
                .unwrap_or_default(),
        ])
        .map_err(to_err)?;
    }
    let csv_path = companion_csv(path);
    let bytes = w.into_inner().map_err(|e| io_error(path, e))?;
    write_file(&csv_path, &String::from_utf8(bytes).expect("utf-8"))?;
    Ok(csv_path)
}

/// Writes a bar chart of the unit weights, largest first, plus a CSV of
/// (unit, weight) in plotted order. Returns the CSV path.
pub fn emit_weight_plot(
    w: &WeightSet,
    unit_labels: &[String],
    path: &Path,
) -> Result<PathBuf, ReportError> {
    if unit_labels.len() != w.omega.len() {
        return Err(ReportError::LabelMismatch {
            labels: unit_labels.len(),
            weights: w.omega.len(),
        });
    }
    let mut order: Vec<usize> = (0..w.omega.len()).collect();
    // Stable: ties keep input order.
    order.sort_by(|&a, &b| w.omega[b].total_cmp(&w.omega[a]));

    let n = order.len().max(1);
    let hi = w.omega.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let ys = |v: f64| MARGIN_T + (1.0 - v / hi) * (HEIGHT - MARGIN_T - MARGIN_B);
    let bottom = HEIGHT - MARGIN_B;
    let slot = (WIDTH - MARGIN_L - MARGIN_R) / n as f64;

    let mut svg = svg_open(&format!("Unit weights: {}", w.method));
    writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{bottom}\" x2=\"{}\" y2=\"{bottom}\" stroke=\"black\"/>\n\
<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{bottom}\" stroke=\"black\"/>\n\
<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
        WIDTH - MARGIN_R,
        MARGIN_L - 6.0,
        ys(hi) + 4.0,
        format_sig4(hi)
    )
    .unwrap();
    for (k, &i) in order.iter().enumerate() {
        let x = MARGIN_L + k as f64 * slot;
        let y = ys(w.omega[i]);
        writeln!(
            svg,
            "<rect class=\"weight\" x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#2c3e50\"/>",
            x + slot * 0.1,
            slot * 0.8,
            bottom - y
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"end\" transform=\"rotate(-60 {:.2} {})\">{}</text>",
            x + slot / 2.0,
            bottom + 12.0,
            x + slot / 2.0,
            bottom + 12.0,
            escape(&unit_labels[i])
        )
        .unwrap();
    }
    if w.method == Method::Did {
        let y = ys(1.0 / n as f64);
        writeln!(
            svg,
            "<line class=\"uniform\" x1=\"{MARGIN_L}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"#c0392b\"/>",
            WIDTH - MARGIN_R
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    write_file(path, &svg)?;

    let mut cw = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| io_error(path, e);
    cw.write_record(["unit", "weight"]).map_err(to_err)?;
    for &i in &order {
        cw.write_record([unit_labels[i].clone(), w.omega[i].to_string()])
            .map_err(to_err)?;
    }
    let csv_path = companion_csv(path);
    let bytes = cw.into_inner().map_err(|e| io_error(path, e))?;
    write_file(&csv_path, &String::from_utf8(bytes).expect("utf-8"))?;
    Ok(csv_path)
}

/// File-name-safe slug of an outcome label.
pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        match c {
            '+' => s.push_str("plus"),
            '#' => s.push_str("sharp"),
            c if c.is_ascii_alphanumeric() => s.push(c.to_ascii_lowercase()),
            _ => s.push('_'),
        }
    }
    while s.contains("__") {
        s = s.replace("__", "_");
    }
    s.trim_matches('_').to_string()
}

/// Emits trend and weight figures for every entry of `bundle.figures` into
/// `dir`, returning the written SVG paths.
pub fn emit_all_figures(bundle: &ResultsBundle, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut out = Vec::new();
    for f in &bundle.figures {
        let stem = format!(
            "{}_{}",
            slug(&f.outcome),
            f.method.label().to_ascii_lowercase()
        );
        let trend = dir.join(format!("trend_{stem}.svg"));
        emit_trend_plot(&f.trend, &TrendMeta::from(f), &trend)?;
        let weights = dir.join(format!("weights_{stem}.svg"));
        emit_weight_plot(&f.weights, &f.control_labels, &weights)?;
        out.push(trend);
        out.push(weights);
    }
    Ok(out)
}
