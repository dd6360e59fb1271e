//! Weighted average treatment effect and the three named estimators.
//!
//! Every estimator evaluates the same contrast:
//!
//! ```text
//! ATE = mean_treated[ post_mean(Y_i) − Σ_t λ_t Y_it ]
//!     − Σ_controls ω_i [ post_mean(Y_i) − Σ_t λ_t Y_it ]
//! ```
//!
//! and differs only in how `ω` and `λ` are chosen. Intercepts from the SDID
//! weight programs never enter the contrast.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::digest::panel_digest;
use crate::panel::{BlockDesign, Panel, PanelError};
use crate::weights::{weights_for, Method, Regularizer, SolverOptions, WeightError, WeightSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimateError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("weights do not match the design: {0}")]
    DimensionMismatch(String),
}

/// Two-sided normal critical values for p < .10, .05, .01.
pub const STAR_THRESHOLDS: [f64; 3] = [1.645, 1.960, 2.576];

/// Significance stars for `ate / se`; zero when no standard error is known.
pub fn stars(ate: f64, se: Option<f64>) -> u8 {
    let Some(se) = se else { return 0 };
    if ate == 0.0 || se.is_nan() {
        return 0;
    }
    let z = (ate / se).abs();
    STAR_THRESHOLDS.iter().filter(|&&c| z >= c).count() as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub method: Method,
    pub ate: f64,
    pub se: Option<f64>,
    pub stars: u8,
    pub baseline_mean: f64,
    pub n_obs: usize,
    pub weights: WeightSet,
    pub regularizer: Option<Regularizer>,
    /// Digest of the analyzed panel; ties bootstrap results to estimates.
    pub panel_digest: String,
}

/// Treated mean path, weighted control path and the time-weight profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSeries {
    pub treated_path: Vec<f64>,
    pub synthetic_path: Vec<f64>,
    pub lambda_profile: Vec<f64>,
}

fn check(y: &DMatrix<f64>, design: &BlockDesign, w: &WeightSet) -> Result<(), EstimateError> {
    if !design.check_matrix(y) {
        return Err(EstimateError::DimensionMismatch(format!(
            "outcome matrix is {}x{}, design is {}x{}",
            y.nrows(),
            y.ncols(),
            design.n(),
            design.t()
        )));
    }
    if !w.matches(design) {
        return Err(EstimateError::DimensionMismatch(format!(
            "{} unit and {} time weights for n0 = {}, t0 = {}",
            w.omega.len(),
            w.lambda.len(),
            design.n0,
            design.t0
        )));
    }
    Ok(())
}

pub fn ate_from_weights(
    y: &DMatrix<f64>,
    design: &BlockDesign,
    w: &WeightSet,
) -> Result<f64, EstimateError> {
    check(y, design, w)?;
    let t1 = design.t1 as f64;
    // Post-period mean minus λ-weighted pre-period outcome for row i.
    let contrast = |i: usize| {
        let post = (design.t0..design.t()).map(|t| y[(i, t)]).sum::<f64>() / t1;
        let pre: f64 = w
            .lambda
            .iter()
            .enumerate()
            .map(|(t, l)| l * y[(i, t)])
            .sum();
        post - pre
    };
    let treated = design.treated_rows().map(contrast).sum::<f64>() / design.n1 as f64;
    let control: f64 = design
        .control_rows()
        .zip(&w.omega)
        .map(|(i, om)| om * contrast(i))
        .sum();
    Ok(treated - control)
}

/// Mean outcome over all units in the pre-treatment periods.
pub fn baseline_mean(y: &DMatrix<f64>, design: &BlockDesign) -> f64 {
    let pre = y.columns(0, design.t0);
    pre.sum() / (y.nrows() * design.t0) as f64
}

pub fn trend_series(
    y: &DMatrix<f64>,
    design: &BlockDesign,
    w: &WeightSet,
) -> Result<TrendSeries, EstimateError> {
    check(y, design, w)?;
    let n1 = design.n1 as f64;
    let offset = w.omega0.unwrap_or(0.0);
    let treated_path = (0..design.t())
        .map(|t| design.treated_rows().map(|i| y[(i, t)]).sum::<f64>() / n1)
        .collect();
    let synthetic_path = (0..design.t())
        .map(|t| {
            offset
                + design
                    .control_rows()
                    .zip(&w.omega)
                    .map(|(i, om)| om * y[(i, t)])
                    .sum::<f64>()
        })
        .collect();
    Ok(TrendSeries {
        treated_path,
        synthetic_path,
        lambda_profile: w.lambda.clone(),
    })
}

/// Point estimate on a block-ordered matrix. Used directly by the bootstrap.
pub fn estimate_block(
    y: &DMatrix<f64>,
    design: &BlockDesign,
    method: Method,
    opts: &SolverOptions,
) -> Result<(f64, WeightSet, Option<Regularizer>), EstimateError> {
    let (w, reg) = weights_for(method, y, design, opts)?;
    let ate = ate_from_weights(y, design, &w)?;
    Ok((ate, w, reg))
}

pub fn estimate(
    panel: &Panel,
    method: Method,
    opts: &SolverOptions,
) -> Result<AteEstimate, EstimateError> {
    let (y, design) = panel.block()?;
    let (ate, weights, regularizer) = estimate_block(&y, &design, method, opts)?;
    Ok(AteEstimate {
        method,
        ate,
        se: None,
        stars: 0,
        baseline_mean: baseline_mean(&y, &design),
        n_obs: panel.n_units() * panel.n_periods(),
        weights,
        regularizer,
        panel_digest: panel_digest(panel),
    })
}
