//! Unit and time weights for the three estimators.
//!
//! * DiD: uniform weights over controls and pre-periods.
//! * SC: simplex least squares matching the treated pre-period mean path;
//!   time weights are identically zero.
//! * SDID: intercept-augmented unit weights with ridge `ζ` plus
//!   intercept-augmented, unpenalized time weights.
//!
//! All functions take the block-ordered outcome matrix (controls first,
//! pre-periods first) and its [`BlockDesign`].

mod solver;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::panel::BlockDesign;

pub use solver::{simplex_objective, solve_simplex_ls, SimplexFit, SolverError, SolverOptions};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightError {
    #[error("at least 2 pre-treatment periods are needed to estimate the noise level, got {0}")]
    InsufficientPrePeriods(usize),
    #[error("outcome matrix is {rows}x{cols} but the design is {n}x{t}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        n: usize,
        t: usize,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Did,
    Sc,
    Sdid,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Did, Method::Sc, Method::Sdid];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Did => "DID",
            Method::Sc => "SC",
            Method::Sdid => "SDID",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "did" => Ok(Method::Did),
            "sc" => Ok(Method::Sc),
            "sdid" => Ok(Method::Sdid),
            other => Err(format!(
                "unknown method {other:?} (expected did, sc or sdid)"
            )),
        }
    }
}

/// Unit weights over controls and time weights over pre-periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub method: Method,
    pub omega: Vec<f64>,
    pub omega0: Option<f64>,
    pub lambda: Vec<f64>,
    pub lambda0: Option<f64>,
}

pub const SUM_TOL: f64 = 1e-8;
pub const FLOOR_TOL: f64 = -1e-12;

impl WeightSet {
    /// Lists every violated invariant.
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        let simplex = |name: &str, v: &[f64], out: &mut Vec<String>| {
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                out.push(format!("{name} sums to {s}"));
            }
            if let Some(x) = v.iter().find(|&&x| x < FLOOR_TOL || !x.is_finite()) {
                out.push(format!("{name} has entry {x}"));
            }
        };
        simplex("omega", &self.omega, &mut out);
        match self.method {
            Method::Sc => {
                if self.lambda.iter().any(|&l| l != 0.0) {
                    out.push("SC lambda must be all zeros".into());
                }
            }
            Method::Did | Method::Sdid => simplex("lambda", &self.lambda, &mut out),
        }
        let sdid = self.method == Method::Sdid;
        if self.omega0.is_some() != sdid || self.lambda0.is_some() != sdid {
            out.push("intercepts must be present exactly for SDID".into());
        }
        out
    }

    pub fn matches(&self, design: &BlockDesign) -> bool {
        self.omega.len() == design.n0 && self.lambda.len() == design.t0
    }
}

/// Ridge scale for the SDID unit-weight program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub zeta: f64,
    pub sigma_hat_sq: f64,
}

/// Unit-weight fit: weights, optional intercept and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitWeights {
    pub omega: Vec<f64>,
    pub omega0: Option<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeWeights {
    pub lambda: Vec<f64>,
    pub lambda0: Option<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn check_dims(y: &DMatrix<f64>, design: &BlockDesign) -> Result<(), WeightError> {
    if design.check_matrix(y) {
        Ok(())
    } else {
        Err(WeightError::DimensionMismatch {
            rows: y.nrows(),
            cols: y.ncols(),
            n: design.n(),
            t: design.t(),
        })
    }
}

pub fn did_weights(design: &BlockDesign) -> WeightSet {
    WeightSet {
        method: Method::Did,
        omega: vec![1.0 / design.n0 as f64; design.n0],
        omega0: None,
        lambda: vec![1.0 / design.t0 as f64; design.t0],
        lambda0: None,
    }
}

/// Variance of first differences of control outcomes over pre-periods,
/// with divisor `n0·(t0 − 1)`.
pub fn sigma_hat_sq(y: &DMatrix<f64>, design: &BlockDesign) -> Result<f64, WeightError> {
    check_dims(y, design)?;
    if design.t0 < 2 {
        return Err(WeightError::InsufficientPrePeriods(design.t0));
    }
    let diffs: Vec<f64> = design
        .control_rows()
        .flat_map(|i| (0..design.t0 - 1).map(move |t| y[(i, t + 1)] - y[(i, t)]))
        .collect();
    let count = diffs.len() as f64;
    let mean = solver::shifted_mean(diffs.iter());
    Ok(diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / count)
}

/// `ζ = (n1·t1)^(1/4) · σ̂`.
pub fn compute_zeta(design: &BlockDesign, sigma_hat_sq: f64) -> Regularizer {
    let scale = ((design.n1 * design.t1) as f64).powf(0.25);
    Regularizer {
        zeta: scale * sigma_hat_sq.max(0.0).sqrt(),
        sigma_hat_sq,
    }
}

/// Pre-period control block transposed (t0 × n0) and the treated mean path.
fn unit_program(y: &DMatrix<f64>, design: &BlockDesign) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(design.t0, design.n0, |t, i| y[(i, t)]);
    let n1 = design.n1 as f64;
    let b = DVector::from_fn(design.t0, |t, _| {
        design.treated_rows().map(|i| y[(i, t)]).sum::<f64>() / n1
    });
    (a, b)
}

pub fn sc_unit_weights(
    y: &DMatrix<f64>,
    design: &BlockDesign,
    opts: &SolverOptions,
) -> Result<WeightSet, WeightError> {
    let fit = sc_fit(y, design, opts)?;
    Ok(WeightSet {
        method: Method::Sc,
        omega: fit.omega,
        omega0: None,
        lambda: vec![0.0; design.t0],
        lambda0: None,
    })
}

/// SC unit-weight program with solver diagnostics.
pub fn sc_fit(
    y: &DMatrix<f64>,
    design: &BlockDesign,
    opts: &SolverOptions,
) -> Result<UnitWeights, WeightError> {
    check_dims(y, design)?;
    let (a, b) = unit_program(y, design);
    let fit = solve_simplex_ls(&a, &b, 0.0, false, opts)?;
    Ok(UnitWeights {
        omega: fit.weights,
        omega0: None,
        objective: fit.objective,
        iterations: fit.iterations,
    })
}

/// SDID unit weights: free intercept, ridge `ζ²·t0·||ω||²`.
pub fn sdid_unit_weights(
    y: &DMatrix<f64>,
    design: &BlockDesign,
    reg: &Regularizer,
    opts: &SolverOptions,
) -> Result<UnitWeights, WeightError> {
    check_dims(y, design)?;
    let (a, b) = unit_program(y, design);
    let fit = solve_simplex_ls(&a, &b, reg.zeta, true, opts)?;
    Ok(UnitWeights {
        omega: fit.weights,
        omega0: fit.intercept,
        objective: fit.objective,
        iterations: fit.iterations,
    })
}

/// SDID time weights: free intercept, regressing each control's post-period
/// mean on its pre-period outcomes.
pub fn sdid_time_weights(
    y: &DMatrix<f64>,
    design: &BlockDesign,
    opts: &SolverOptions,
) -> Result<TimeWeights, WeightError> {
    check_dims(y, design)?;
    let a = DMatrix::from_fn(design.n0, design.t0, |i, t| y[(i, t)]);
    let t1 = design.t1 as f64;
    let b = DVector::from_fn(design.n0, |i, _| {
        (design.t0..design.t()).map(|t| y[(i, t)]).sum::<f64>() / t1
    });
    let fit = solve_simplex_ls(&a, &b, opts.lambda_ridge, true, opts)?;
    Ok(TimeWeights {
        lambda: fit.weights,
        lambda0: fit.intercept,
        objective: fit.objective,
        iterations: fit.iterations,
    })
}

/// Full SDID weight set: computes `σ̂²` and `ζ` from the panel itself.
pub fn sdid_weights(
    y: &DMatrix<f64>,
    design: &BlockDesign,
    opts: &SolverOptions,
) -> Result<(WeightSet, Regularizer), WeightError> {
    let reg = compute_zeta(design, sigma_hat_sq(y, design)?);
    let unit = sdid_unit_weights(y, design, &reg, opts)?;
    let time = sdid_time_weights(y, design, opts)?;
    Ok((
        WeightSet {
            method: Method::Sdid,
            omega: unit.omega,
            omega0: unit.omega0,
            lambda: time.lambda,
            lambda0: time.lambda0,
        },
        reg,
    ))
}

/// Weights for `method`, plus the regularizer when one was computed.
pub fn weights_for(
    method: Method,
    y: &DMatrix<f64>,
    design: &BlockDesign,
    opts: &SolverOptions,
) -> Result<(WeightSet, Option<Regularizer>), WeightError> {
    match method {
        Method::Did => {
            check_dims(y, design)?;
            Ok((did_weights(design), None))
        }
        Method::Sc => Ok((sc_unit_weights(y, design, opts)?, None)),
        Method::Sdid => sdid_weights(y, design, opts).map(|(w, r)| (w, Some(r))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn did_uniform() {
        let w = did_weights(&BlockDesign::new(4, 2, 5, 1));
        assert_eq!(w.omega, vec![0.25; 4]);
        assert_eq!(w.lambda, vec![0.2; 5]);
        assert!(w.check().is_empty());
        let w = did_weights(&BlockDesign::new(1, 1, 1, 1));
        assert_eq!(w.omega, vec![1.0]);
        let w = did_weights(&BlockDesign::new(27, 120, 11, 2));
        assert!(w.omega.iter().all(|&x| x == 1.0 / 27.0));
        assert!(w.lambda.iter().all(|&x| x == 1.0 / 11.0));
    }

    #[test]
    fn sigma_hand_value() {
        // Two controls, three pre-periods, one treated unit, one post-period.
        let y = DMatrix::from_row_slice(
            3,
            4,
            &[
                0.0, 1.0, 3.0, 9.0, //
                0.0, 2.0, 2.0, 9.0, //
                5.0, 5.0, 5.0, 5.0,
            ],
        );
        let d = BlockDesign::new(2, 1, 3, 1);
        assert_eq!(sigma_hat_sq(&y, &d).unwrap(), 0.6875);
    }

    #[test]
    fn sigma_zero_cases() {
        let d = BlockDesign::new(2, 1, 3, 1);
        let flat = DMatrix::from_element(3, 4, 4.0);
        assert_eq!(sigma_hat_sq(&flat, &d).unwrap(), 0.0);
        let trend = DMatrix::from_fn(3, 4, |i, t| i as f64 + 2.5 * t as f64);
        assert!(sigma_hat_sq(&trend, &d).unwrap().abs() < 1e-24);
        let short = BlockDesign::new(2, 1, 1, 3);
        assert_eq!(
            sigma_hat_sq(&flat, &short).unwrap_err(),
            WeightError::InsufficientPrePeriods(1)
        );
    }

    #[test]
    fn zeta_values() {
        assert_eq!(compute_zeta(&BlockDesign::new(3, 2, 3, 1), 0.0).zeta, 0.0);
        assert_eq!(compute_zeta(&BlockDesign::new(3, 16, 3, 1), 4.0).zeta, 4.0);
        let r = compute_zeta(&BlockDesign::new(27, 120, 11, 2), 2.25);
        assert!((r.zeta - 240f64.powf(0.25) * 1.5).abs() < 1e-12);
    }

    #[test]
    fn sc_single_matching_control() {
        let y = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 1.0, 0.0, 4.0, 1.0, 7.0]);
        let d = BlockDesign::new(2, 1, 2, 1);
        let fit = sc_fit(&y, &d, &SolverOptions::default()).unwrap();
        assert!((fit.omega[1] - 1.0).abs() < 1e-12);
        assert!(fit.objective < 1e-20);
        let w = sc_unit_weights(&y, &d, &SolverOptions::default()).unwrap();
        assert_eq!(w.lambda, vec![0.0, 0.0]);
        assert!(w.check().is_empty());
    }

    #[test]
    fn sdid_time_single_pre_period() {
        let y = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 4.0, 2.0, 3.0, 3.0, 0.0, 0.0, 0.0]);
        let d = BlockDesign::new(2, 1, 1, 2);
        let tw = sdid_time_weights(&y, &d, &SolverOptions::default()).unwrap();
        assert_eq!(tw.lambda, vec![1.0]);
        // Post means 3 and 3; intercept = mean(3 - 1, 3 - 2) = 1.5
        assert!((tw.lambda0.unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn sdid_time_constant_controls() {
        let y = DMatrix::from_fn(4, 5, |i, _| if i < 3 { i as f64 } else { 9.0 });
        let d = BlockDesign::new(3, 1, 3, 2);
        let tw = sdid_time_weights(&y, &d, &SolverOptions::default()).unwrap();
        assert!(tw.objective < 1e-20);
        assert!(tw.lambda0.unwrap().abs() < 1e-12);
        assert!((tw.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let y = DMatrix::<f64>::zeros(3, 3);
        let d = BlockDesign::new(2, 2, 2, 1);
        assert!(matches!(
            sc_unit_weights(&y, &d, &SolverOptions::default()),
            Err(WeightError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn method_parse() {
        assert_eq!("SDiD".parse::<Method>().unwrap(), Method::Sdid);
        assert!("foo".parse::<Method>().is_err());
    }
}
