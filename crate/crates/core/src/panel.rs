//! Balanced panel data model and the block-design view the estimators consume.
//!
//! A [`Panel`] is an N×T outcome matrix with unit and period labels plus
//! per-unit treatment metadata. [`Panel::to_block`] turns it into a
//! [`BlockDesign`]: controls first, pre-periods first.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum PanelError {
    #[error("no records supplied")]
    EmptyInput,
    #[error("duplicate cell for unit {unit:?}, period {period:?}")]
    DuplicateCell { unit: String, period: String },
    #[error("unbalanced panel: {} missing cell(s), first: {}", missing.len(), fmt_missing(missing))]
    UnbalancedPanel { missing: Vec<(String, String)> },
    #[error("cannot parse period label {0:?} (expected YYYYQn, YYYY-MM-DD or an integer index)")]
    InvalidPeriod(String),
    #[error("period labels mix calendar and integer formats")]
    MixedPeriodFormats,
    #[error("two period labels denote the same period: {0:?} and {1:?}")]
    DuplicatePeriod(String, String),
    #[error("unknown unit {0:?}")]
    UnknownUnit(String),
    #[error("unknown period {0:?}")]
    UnknownPeriod(String),
    #[error("treatment metadata has not been set")]
    MissingTreatment,
    #[error("no control units")]
    NoControls,
    #[error("no treated units")]
    NoTreated,
    #[error("no pre-treatment periods")]
    NoPrePeriods,
    #[error("no post-treatment periods")]
    NoPostPeriods,
    #[error("treated units adopt treatment at different periods (non-block adoption)")]
    StaggeredAdoption,
    #[error("non-finite outcome for unit {unit:?}, period {period:?}")]
    NonFinite { unit: String, period: String },
}

fn fmt_missing(missing: &[(String, String)]) -> String {
    missing
        .first()
        .map(|(u, p)| format!("unit {u}, period {p}"))
        .unwrap_or_default()
}

/// Sort key of a period label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PeriodKey {
    /// Quarters map to the first day of the quarter.
    Date(NaiveDate),
    Index(i64),
}

impl PeriodKey {
    /// Parses "YYYYQn" (also "YYYY-Qn"), ISO "YYYY-MM-DD", or a bare integer.
    pub fn parse(label: &str) -> Result<Self, PanelError> {
        let s = label.trim();
        let bad = || PanelError::InvalidPeriod(label.to_string());
        if let Some(pos) = s.find(['Q', 'q']) {
            let year: i32 = s[..pos].trim_end_matches('-').parse().map_err(|_| bad())?;
            let q: u32 = s[pos + 1..].parse().map_err(|_| bad())?;
            if !(1..=4).contains(&q) {
                return Err(bad());
            }
            let date = NaiveDate::from_ymd_opt(year, 3 * (q - 1) + 1, 1).ok_or_else(bad)?;
            return Ok(PeriodKey::Date(date));
        }
        if let Ok(date) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Ok(PeriodKey::Date(date));
        }
        s.parse::<i64>().map(PeriodKey::Index).map_err(|_| bad())
    }

    fn same_kind(&self, other: &Self) -> bool {
        matches!(
            (self, other),
            (PeriodKey::Date(_), PeriodKey::Date(_)) | (PeriodKey::Index(_), PeriodKey::Index(_))
        )
    }
}

/// Formats a year/quarter pair as "YYYYQn".
pub fn quarter_label(year: i32, quarter: u32) -> String {
    format!("{year}Q{quarter}")
}

/// Sorts labels chronologically by parsed value.
pub fn sort_periods(labels: &[String]) -> Result<Vec<String>, PanelError> {
    let mut keyed = labels
        .iter()
        .map(|l| PeriodKey::parse(l).map(|k| (k, l.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some((first, _)) = keyed.first() {
        if keyed.iter().any(|(k, _)| !k.same_kind(first)) {
            return Err(PanelError::MixedPeriodFormats);
        }
    }
    keyed.sort_by_key(|k| k.0);
    for w in keyed.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(PanelError::DuplicatePeriod(w[0].1.clone(), w[1].1.clone()));
        }
    }
    Ok(keyed.into_iter().map(|(_, l)| l).collect())
}

/// A balanced N×T panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    outcomes: DMatrix<f64>,
    unit_ids: Vec<String>,
    period_ids: Vec<String>,
    /// Per unit: index of the first treated period, `None` for controls.
    treatment: Option<Vec<Option<usize>>>,
}

impl Panel {
    /// Builds a panel from `(unit, period, value)` triples.
    ///
    /// Units keep their first-appearance order; periods are sorted
    /// chronologically.
    pub fn from_records<U, P>(records: &[(U, P, f64)]) -> Result<Self, PanelError>
    where
        U: AsRef<str>,
        P: AsRef<str>,
    {
        if records.is_empty() {
            return Err(PanelError::EmptyInput);
        }
        let mut unit_ids: Vec<String> = Vec::new();
        let mut unit_index: HashMap<&str, usize> = HashMap::new();
        let mut period_set: BTreeSet<&str> = BTreeSet::new();
        for (u, p, _) in records {
            let u = u.as_ref();
            if !unit_index.contains_key(u) {
                unit_index.insert(u, unit_ids.len());
                unit_ids.push(u.to_string());
            }
            period_set.insert(p.as_ref());
        }
        let labels: Vec<String> = period_set.iter().map(|s| s.to_string()).collect();
        let period_ids = sort_periods(&labels)?;
        let period_index: HashMap<&str, usize> = period_ids
            .iter()
            .enumerate()
            .map(|(i, p)| (p.as_str(), i))
            .collect();

        let (n, t) = (unit_ids.len(), period_ids.len());
        let mut outcomes = DMatrix::<f64>::zeros(n, t);
        let mut filled = vec![false; n * t];
        for (u, p, v) in records {
            let i = unit_index[u.as_ref()];
            let j = period_index[p.as_ref()];
            if filled[i * t + j] {
                return Err(PanelError::DuplicateCell {
                    unit: u.as_ref().to_string(),
                    period: p.as_ref().to_string(),
                });
            }
            if !v.is_finite() {
                return Err(PanelError::NonFinite {
                    unit: u.as_ref().to_string(),
                    period: p.as_ref().to_string(),
                });
            }
            filled[i * t + j] = true;
            outcomes[(i, j)] = *v;
        }
        let missing: Vec<(String, String)> = (0..n)
            .flat_map(|i| (0..t).map(move |j| (i, j)))
            .filter(|&(i, j)| !filled[i * t + j])
            .map(|(i, j)| (unit_ids[i].clone(), period_ids[j].clone()))
            .collect();
        if !missing.is_empty() {
            return Err(PanelError::UnbalancedPanel { missing });
        }
        Ok(Panel {
            outcomes,
            unit_ids,
            period_ids,
            treatment: None,
        })
    }

    /// Builds a panel directly from a matrix. Period labels must already be
    /// in chronological order.
    pub fn from_matrix(
        outcomes: DMatrix<f64>,
        unit_ids: Vec<String>,
        period_ids: Vec<String>,
    ) -> Result<Self, PanelError> {
        assert_eq!(outcomes.nrows(), unit_ids.len(), "row count vs unit labels");
        assert_eq!(
            outcomes.ncols(),
            period_ids.len(),
            "column count vs period labels"
        );
        if unit_ids.is_empty() || period_ids.is_empty() {
            return Err(PanelError::EmptyInput);
        }
        let sorted = sort_periods(&period_ids)?;
        if sorted != period_ids {
            return Err(PanelError::InvalidPeriod(
                "period labels are not in chronological order".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for u in &unit_ids {
            if !seen.insert(u.as_str()) {
                return Err(PanelError::DuplicateCell {
                    unit: u.clone(),
                    period: period_ids[0].clone(),
                });
            }
        }
        if let Some(idx) = outcomes.iter().position(|v| !v.is_finite()) {
            let (i, j) = (idx % outcomes.nrows(), idx / outcomes.nrows());
            return Err(PanelError::NonFinite {
                unit: unit_ids[i].clone(),
                period: period_ids[j].clone(),
            });
        }
        Ok(Panel {
            outcomes,
            unit_ids,
            period_ids,
            treatment: None,
        })
    }

    /// Marks `treated` as adopting treatment at `start`; every other unit is a control.
    pub fn set_treatment<S: AsRef<str>>(
        &mut self,
        treated: &[S],
        start: &str,
    ) -> Result<(), PanelError> {
        let start_idx = self.period_index(start)?;
        let mut starts = vec![None; self.unit_ids.len()];
        for u in treated {
            let i = self.unit_index(u.as_ref())?;
            starts[i] = Some(start_idx);
        }
        self.treatment = Some(starts);
        Ok(())
    }

    /// Same as [`Panel::set_treatment`] but consuming `self`.
    pub fn with_treatment<S: AsRef<str>>(
        mut self,
        treated: &[S],
        start: &str,
    ) -> Result<Self, PanelError> {
        self.set_treatment(treated, start)?;
        Ok(self)
    }

    /// Overrides the adoption period of a single unit. Allows constructing
    /// staggered designs, which [`Panel::to_block`] rejects.
    pub fn set_unit_treatment(
        &mut self,
        unit: &str,
        start: Option<&str>,
    ) -> Result<(), PanelError> {
        let i = self.unit_index(unit)?;
        let start = start.map(|s| self.period_index(s)).transpose()?;
        let n = self.unit_ids.len();
        self.treatment.get_or_insert_with(|| vec![None; n])[i] = start;
        Ok(())
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_ids(&self) -> &[String] {
        &self.period_ids
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.period_ids.len()
    }

    pub fn value(&self, unit: &str, period: &str) -> Option<f64> {
        let i = self.unit_ids.iter().position(|u| u == unit)?;
        let j = self.period_ids.iter().position(|p| p == period)?;
        Some(self.outcomes[(i, j)])
    }

    pub fn has_treatment(&self) -> bool {
        self.treatment.is_some()
    }

    /// Adoption period index per unit, if treatment metadata is set.
    pub fn treatment_starts(&self) -> Option<&[Option<usize>]> {
        self.treatment.as_deref()
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.treatment
            .as_ref()
            .is_some_and(|s| s.get(unit).copied().flatten().is_some())
    }

    pub fn treated_units(&self) -> Vec<&str> {
        (0..self.n_units())
            .filter(|&i| self.is_treated(i))
            .map(|i| self.unit_ids[i].as_str())
            .collect()
    }

    /// Common adoption period label, or `None` if unset, empty, or staggered.
    pub fn treatment_start(&self) -> Option<&str> {
        let starts = self.treatment.as_ref()?;
        let mut it = starts.iter().flatten();
        let first = *it.next()?;
        it.all(|&s| s == first)
            .then(|| self.period_ids[first].as_str())
    }

    /// Applies `f` cell-wise, keeping labels and treatment.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Panel {
        Panel {
            outcomes: self.outcomes.map(f),
            ..self.clone()
        }
    }

    /// Returns a panel whose row `k` is row `rows[k]` of this one. Labels of
    /// repeated rows get a `#k` suffix so they stay unique.
    pub fn select_rows(&self, rows: &[usize]) -> Panel {
        let t = self.n_periods();
        let outcomes = DMatrix::from_fn(rows.len(), t, |k, j| self.outcomes[(rows[k], j)]);
        let unit_ids = rows
            .iter()
            .enumerate()
            .map(|(k, &i)| format!("{}#{k}", self.unit_ids[i]))
            .collect();
        let treatment = self
            .treatment
            .as_ref()
            .map(|s| rows.iter().map(|&i| s[i]).collect());
        Panel {
            outcomes,
            unit_ids,
            period_ids: self.period_ids.clone(),
            treatment,
        }
    }

    fn unit_index(&self, unit: &str) -> Result<usize, PanelError> {
        self.unit_ids
            .iter()
            .position(|u| u == unit)
            .ok_or_else(|| PanelError::UnknownUnit(unit.to_string()))
    }

    fn period_index(&self, period: &str) -> Result<usize, PanelError> {
        if let Some(j) = self.period_ids.iter().position(|p| p == period) {
            return Ok(j);
        }
        // Accept equivalent spellings, e.g. "2022q4" for "2022Q4".
        let key = PeriodKey::parse(period).map_err(|_| PanelError::UnknownPeriod(period.into()))?;
        self.period_ids
            .iter()
            .position(|p| PeriodKey::parse(p).ok() == Some(key))
            .ok_or_else(|| PanelError::UnknownPeriod(period.to_string()))
    }

    /// Derives the block structure: controls first, then treated units, each
    /// group in its original relative order.
    pub fn to_block(&self) -> Result<BlockDesign, PanelError> {
        let starts = self
            .treatment
            .as_ref()
            .ok_or(PanelError::MissingTreatment)?;
        let controls: Vec<usize> = (0..starts.len()).filter(|&i| starts[i].is_none()).collect();
        let treated: Vec<usize> = (0..starts.len()).filter(|&i| starts[i].is_some()).collect();
        if treated.is_empty() {
            return Err(PanelError::NoTreated);
        }
        if controls.is_empty() {
            return Err(PanelError::NoControls);
        }
        let start = starts[treated[0]].expect("treated unit has a start");
        if treated.iter().any(|&i| starts[i] != Some(start)) {
            return Err(PanelError::StaggeredAdoption);
        }
        if start == 0 {
            return Err(PanelError::NoPrePeriods);
        }
        if start >= self.n_periods() {
            return Err(PanelError::NoPostPeriods);
        }
        let n0 = controls.len();
        let n1 = treated.len();
        let row_order = controls.into_iter().chain(treated).collect();
        Ok(BlockDesign {
            n0,
            n1,
            t0: start,
            t1: self.n_periods() - start,
            row_order,
        })
    }

    /// Block-ordered outcome matrix together with its design.
    pub fn block(&self) -> Result<(DMatrix<f64>, BlockDesign), PanelError> {
        let design = self.to_block()?;
        let y = design.reorder(&self.outcomes);
        Ok((y, design))
    }
}

/// The (n0, n1, t0, t1) block structure of a panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDesign {
    pub n0: usize,
    pub n1: usize,
    pub t0: usize,
    pub t1: usize,
    /// `row_order[k]` is the panel row placed at block row `k`.
    pub row_order: Vec<usize>,
}

impl BlockDesign {
    /// Design for a matrix already in block order.
    pub fn new(n0: usize, n1: usize, t0: usize, t1: usize) -> Self {
        BlockDesign {
            n0,
            n1,
            t0,
            t1,
            row_order: (0..n0 + n1).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n0 + self.n1
    }

    pub fn t(&self) -> usize {
        self.t0 + self.t1
    }

    pub fn reorder(&self, outcomes: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.row_order.len(), outcomes.ncols(), |k, j| {
            outcomes[(self.row_order[k], j)]
        })
    }

    pub fn control_rows(&self) -> std::ops::Range<usize> {
        0..self.n0
    }

    pub fn treated_rows(&self) -> std::ops::Range<usize> {
        self.n0..self.n()
    }

    /// Checks the design dimensions against a block-ordered matrix.
    pub fn check_matrix(&self, y: &DMatrix<f64>) -> bool {
        y.nrows() == self.n() && y.ncols() == self.t()
    }
}

/// One failed consistency check between a panel and a design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, code: &'static str, message: String) {
        self.violations.push(Violation { code, message });
    }
}

/// Checks every block invariant and reports all violations found.
pub fn validate_block(panel: &Panel, design: &BlockDesign) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (n, t) = (panel.n_units(), panel.n_periods());

    for (name, v) in [
        ("n0", design.n0),
        ("n1", design.n1),
        ("t0", design.t0),
        ("t1", design.t1),
    ] {
        if v == 0 {
            report.push("empty_block", format!("{name} must be at least 1"));
        }
    }
    if design.n0 + design.n1 != n {
        report.push(
            "unit_count",
            format!(
                "n0 + n1 = {} but the panel has {n} units",
                design.n0 + design.n1
            ),
        );
    }
    if design.t0 + design.t1 != t {
        report.push(
            "period_count",
            format!(
                "t0 + t1 = {} but the panel has {t} periods",
                design.t0 + design.t1
            ),
        );
    }

    let mut seen = vec![false; n];
    let mut is_perm = design.row_order.len() == n;
    for &r in &design.row_order {
        if r >= n || seen[r] {
            is_perm = false;
            break;
        }
        seen[r] = true;
    }
    if !is_perm {
        report.push(
            "row_order",
            format!("row_order is not a permutation of 0..{n}"),
        );
    }

    let Some(starts) = panel.treatment_starts() else {
        report.push("treatment", "panel has no treatment metadata".into());
        return report;
    };

    let treated_starts: BTreeSet<usize> = starts.iter().flatten().copied().collect();
    if treated_starts.len() > 1 {
        let labels: Vec<&str> = treated_starts
            .iter()
            .map(|&j| panel.period_ids()[j].as_str())
            .collect();
        report.push(
            "non_block_adoption",
            format!(
                "non-block adoption: treated units start at {}",
                labels.join(", ")
            ),
        );
    } else if let Some(&start) = treated_starts.iter().next() {
        if start != design.t0 {
            report.push(
                "treatment_start",
                format!(
                    "treatment starts at period index {start} but t0 = {}",
                    design.t0
                ),
            );
        }
        if start == 0 {
            report.push("pre_periods", "treatment starts at the first period".into());
        }
    }

    if is_perm {
        let mut misplaced = Vec::new();
        for (k, &r) in design.row_order.iter().enumerate() {
            let treated = starts[r].is_some();
            if treated != (k >= design.n0) {
                misplaced.push(panel.unit_ids()[r].clone());
            }
        }
        if !misplaced.is_empty() {
            report.push(
                "block_order",
                format!(
                    "units out of control/treated block: {}",
                    misplaced.join(", ")
                ),
            );
        }
        let stable = |rows: &[usize]| rows.windows(2).all(|w| w[0] < w[1]);
        let split = design.n0.min(n);
        if !stable(&design.row_order[..split]) || !stable(&design.row_order[split..]) {
            report.push(
                "unstable_order",
                "row_order does not preserve relative order within blocks".into(),
            );
        }
    }
    report
}
