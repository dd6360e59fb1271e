//! Clustered (unit-level) bootstrap standard errors.
//!
//! Each replicate draws N units with replacement, keeping each unit's full
//! time series and treatment status, and re-runs the complete estimator on
//! the resample, weight fitting and regularization included. Resamples
//! without a treated or without a control unit are redrawn and counted.
//!
//! Replicate `b` uses its own ChaCha stream derived from `(seed, b)`, so the
//! result does not depend on how replicates are scheduled.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::panel_digest;
use crate::estimator::{estimate_block, stars, AteEstimate, EstimateError};
use crate::panel::{BlockDesign, Panel, PanelError};
use crate::weights::{Method, SolverOptions};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("degenerate design: {0}")]
    DegenerateDesign(PanelError),
    #[error("{redraws} degenerate resamples exceeded the limit of {limit}")]
    TooManyRedraws { redraws: usize, limit: usize },
    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: EstimateError,
    },
    #[error("bootstrap result does not belong to this estimate: {0}")]
    ProvenanceMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    /// Cap on discarded resamples; defaults to `100·B`.
    pub max_redraws: Option<usize>,
    pub solver: SolverOptions,
    pub parallel: bool,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            max_redraws: None,
            solver: SolverOptions::default(),
            parallel: true,
        }
    }
}

pub const DEFAULT_REPLICATES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub method: Method,
    /// Sample standard deviation (divisor B − 1) of the replicate estimates.
    pub se: f64,
    pub replicates: usize,
    pub estimates: Vec<f64>,
    pub redraws: usize,
    pub seed: u64,
    pub panel_digest: String,
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn replicate_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

pub fn bootstrap_se(
    panel: &Panel,
    method: Method,
    replicates: usize,
    seed: u64,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult, InferenceError> {
    if replicates < 2 {
        return Err(InferenceError::TooFewReplicates(replicates));
    }
    let design = panel.to_block().map_err(InferenceError::DegenerateDesign)?;
    let limit = opts.max_redraws.unwrap_or(100 * replicates);
    let treated: Vec<bool> = (0..panel.n_units()).map(|i| panel.is_treated(i)).collect();
    let y = panel.outcomes();

    let run = |b: usize| one_replicate(y, &treated, &design, method, seed, b, limit, &opts.solver);
    let outcomes: Vec<Result<(f64, usize), InferenceError>> = if opts.parallel {
        (0..replicates).into_par_iter().map(run).collect()
    } else {
        (0..replicates).map(run).collect()
    };

    let mut estimates = Vec::with_capacity(replicates);
    let mut redraws = 0;
    for r in outcomes {
        let (ate, extra) = r?;
        estimates.push(ate);
        redraws += extra;
    }
    if redraws > limit {
        return Err(InferenceError::TooManyRedraws { redraws, limit });
    }
    Ok(BootstrapResult {
        method,
        se: sample_sd(&estimates),
        replicates,
        estimates,
        redraws,
        seed,
        panel_digest: panel_digest(panel),
    })
}

#[allow(clippy::too_many_arguments)]
fn one_replicate(
    y: &DMatrix<f64>,
    treated: &[bool],
    design: &BlockDesign,
    method: Method,
    seed: u64,
    b: usize,
    limit: usize,
    solver: &SolverOptions,
) -> Result<(f64, usize), InferenceError> {
    let n = treated.len();
    let mut rng = replicate_rng(seed, b);
    let mut redraws = 0;
    let draw = loop {
        let draw: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let n1 = draw.iter().filter(|&&i| treated[i]).count();
        if n1 > 0 && n1 < n {
            break draw;
        }
        redraws += 1;
        if redraws > limit {
            return Err(InferenceError::TooManyRedraws { redraws, limit });
        }
    };
    // Controls first, each block in draw order.
    let rows: Vec<usize> = draw
        .iter()
        .filter(|&&i| !treated[i])
        .chain(draw.iter().filter(|&&i| treated[i]))
        .copied()
        .collect();
    let n0 = draw.iter().filter(|&&i| !treated[i]).count();
    let yb = DMatrix::from_fn(n, y.ncols(), |k, t| y[(rows[k], t)]);
    let db = BlockDesign::new(n0, n - n0, design.t0, design.t1);
    let (ate, _, _) =
        estimate_block(&yb, &db, method, solver).map_err(|source| InferenceError::Replicate {
            replicate: b,
            source,
        })?;
    Ok((ate, redraws))
}

/// Fills the standard error and stars of `est` from a matching bootstrap run.
pub fn attach_inference(
    est: &AteEstimate,
    boot: &BootstrapResult,
) -> Result<AteEstimate, InferenceError> {
    if est.method != boot.method {
        return Err(InferenceError::ProvenanceMismatch(format!(
            "estimate method {} vs bootstrap method {}",
            est.method, boot.method
        )));
    }
    if est.panel_digest != boot.panel_digest {
        return Err(InferenceError::ProvenanceMismatch(format!(
            "panel digest {} vs {}",
            est.panel_digest, boot.panel_digest
        )));
    }
    let mut out = est.clone();
    out.se = Some(boot.se);
    out.stars = stars(est.ate, Some(boot.se));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::estimate;

    fn panel(n0: usize, n1: usize, t0: usize, t1: usize, f: impl Fn(usize, usize) -> f64) -> Panel {
        let n = n0 + n1;
        let t = t0 + t1;
        let units: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let periods: Vec<String> = (1..=t).map(|j| j.to_string()).collect();
        let y = DMatrix::from_fn(n, t, f);
        let treated: Vec<String> = units[n0..].to_vec();
        Panel::from_matrix(y, units, periods.clone())
            .unwrap()
            .with_treatment(&treated, &periods[t0])
            .unwrap()
    }

    #[test]
    fn identical_units_give_zero_se() {
        let p = panel(4, 3, 3, 2, |_, t| t as f64 * 2.0);
        for m in Method::ALL {
            let r = bootstrap_se(&p, m, 20, 7, &BootstrapOptions::default()).unwrap();
            assert_eq!(r.estimates.len(), 20);
            assert!(r.se.abs() < 1e-9, "{m}: {}", r.se);
        }
    }

    #[test]
    fn deterministic_across_scheduling() {
        let p = panel(5, 4, 4, 2, |i, t| ((i * 31 + t * 17) % 11) as f64);
        let par = bootstrap_se(&p, Method::Sdid, 30, 42, &BootstrapOptions::default()).unwrap();
        let seq = bootstrap_se(
            &p,
            Method::Sdid,
            30,
            42,
            &BootstrapOptions {
                parallel: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(par, seq);
        let other = bootstrap_se(&p, Method::Sdid, 30, 43, &BootstrapOptions::default()).unwrap();
        assert_ne!(par.estimates, other.estimates);
    }

    #[test]
    fn noiseless_parallel_trends_did() {
        let delta = 4.0;
        let p = panel(30, 120, 5, 2, |i, t| {
            (i % 7) as f64 + 0.3 * t as f64 + if i >= 30 && t >= 5 { delta } else { 0.0 }
        });
        let r = bootstrap_se(&p, Method::Did, 50, 1, &BootstrapOptions::default()).unwrap();
        assert!(r.estimates.iter().all(|e| (e - delta).abs() < 1e-9));
        assert!(r.se < 1e-9);
    }

    #[test]
    fn redraw_limit() {
        // One treated among 2 units: half of all resamples are degenerate.
        let p = panel(1, 1, 1, 1, |i, t| (i + t) as f64);
        let r = bootstrap_se(&p, Method::Did, 50, 3, &BootstrapOptions::default()).unwrap();
        assert!(r.redraws > 0);
        let err = bootstrap_se(
            &p,
            Method::Did,
            50,
            3,
            &BootstrapOptions {
                max_redraws: Some(0),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, InferenceError::TooManyRedraws { .. }));
    }

    #[test]
    fn errors() {
        let p = panel(2, 2, 2, 1, |i, t| (i * t) as f64);
        assert_eq!(
            bootstrap_se(&p, Method::Did, 1, 0, &BootstrapOptions::default()).unwrap_err(),
            InferenceError::TooFewReplicates(1)
        );
        let mut q = p.clone();
        q.set_treatment::<&str>(&[], "3").unwrap();
        assert!(matches!(
            bootstrap_se(&q, Method::Did, 5, 0, &BootstrapOptions::default()),
            Err(InferenceError::DegenerateDesign(PanelError::NoTreated))
        ));
    }

    #[test]
    fn attach_checks_provenance() {
        let p = panel(3, 2, 3, 1, |i, t| ((i + 1) * (t + 2)) as f64);
        let est = estimate(&p, Method::Did, &SolverOptions::default()).unwrap();
        let boot = bootstrap_se(&p, Method::Did, 10, 0, &BootstrapOptions::default()).unwrap();
        let with = attach_inference(&est, &boot).unwrap();
        assert_eq!(with.se, Some(boot.se));
        let sc = bootstrap_se(&p, Method::Sc, 10, 0, &BootstrapOptions::default()).unwrap();
        assert!(matches!(
            attach_inference(&est, &sc),
            Err(InferenceError::ProvenanceMismatch(_))
        ));
        let q = p.map_outcomes(|v| v + 1.0);
        let other = bootstrap_se(&q, Method::Did, 10, 0, &BootstrapOptions::default()).unwrap();
        assert!(matches!(
            attach_inference(&est, &other),
            Err(InferenceError::ProvenanceMismatch(_))
        ));
    }

    #[test]
    fn attach_reported_pairs() {
        let p = panel(3, 2, 3, 1, |i, t| (i + t) as f64);
        let mut est = estimate(&p, Method::Did, &SolverOptions::default()).unwrap();
        let mut boot = bootstrap_se(&p, Method::Did, 5, 0, &BootstrapOptions::default()).unwrap();
        for (ate, se, expect) in [(899.268, 147.395, 3), (595.059, 437.061, 0), (0.0, 2.0, 0)] {
            est.ate = ate;
            boot.se = se;
            assert_eq!(attach_inference(&est, &boot).unwrap().stars, expect);
        }
    }
}
