//! Synthetic panels with a known effect, and brute-force reference
//! computations used to check the solver and the estimators.
//!
//! The reference computations here deliberately share no code with the
//! weights and estimator modules.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::panel::{quarter_label, BlockDesign, Panel, PanelError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DgpError {
    #[error("invalid DGP spec: {0}")]
    InvalidSpec(String),
    #[error("grid search supports at most {max} columns, got {got}")]
    TooManyColumns { got: usize, max: usize },
    #[error("grid resolution {0} does not divide 1")]
    BadResolution(f64),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Interactive fixed-effects data generating process:
///
/// `Y_it = α_i + β_t + scale·Σ_k γ_ik φ_tk + δ·1[treated, post] + ε_it`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n0: usize,
    pub n1: usize,
    pub t0: usize,
    pub t1: usize,
    pub effect: f64,
    pub n_factors: usize,
    pub factor_scale: f64,
    pub noise_sd: f64,
    pub unit_fe_sd: f64,
    pub time_fe_sd: f64,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n0: 20,
            n1: 20,
            t0: 8,
            t1: 2,
            effect: 0.0,
            n_factors: 0,
            factor_scale: 1.0,
            noise_sd: 1.0,
            unit_fe_sd: 1.0,
            time_fe_sd: 1.0,
            seed: 0,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<(), DgpError> {
        for (name, v) in [
            ("n0", self.n0),
            ("n1", self.n1),
            ("t0", self.t0),
            ("t1", self.t1),
        ] {
            if v == 0 {
                return Err(DgpError::InvalidSpec(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("unit_fe_sd", self.unit_fe_sd),
            ("time_fe_sd", self.time_fe_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DgpError::InvalidSpec(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !self.effect.is_finite() || !self.factor_scale.is_finite() {
            return Err(DgpError::InvalidSpec(
                "effect and factor_scale must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Period labels starting at 2020Q1.
pub fn quarter_labels(t: usize) -> Vec<String> {
    (0..t)
        .map(|j| quarter_label(2020 + (j / 4) as i32, (j % 4) as u32 + 1))
        .collect()
}

/// Generates the panel (controls `c000…`, then treated `t000…`) and returns
/// it with the true effect.
pub fn generate_panel(spec: &DgpSpec) -> Result<(Panel, f64), DgpError> {
    spec.validate()?;
    let (n, t) = (spec.n0 + spec.n1, spec.t0 + spec.t1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let mut draw = |sd: f64, count: usize| -> Vec<f64> {
        (0..count)
            .map(|_| sd * std_normal.sample(&mut rng))
            .collect()
    };
    let unit_fe = draw(spec.unit_fe_sd, n);
    let time_fe = draw(spec.time_fe_sd, t);
    let loadings = draw(1.0, n * spec.n_factors);
    let factors = draw(1.0, t * spec.n_factors);
    let noise = draw(spec.noise_sd, n * t);

    let y = DMatrix::from_fn(n, t, |i, j| {
        let interactive: f64 = (0..spec.n_factors)
            .map(|k| loadings[i * spec.n_factors + k] * factors[j * spec.n_factors + k])
            .sum();
        let treated_post = i >= spec.n0 && j >= spec.t0;
        unit_fe[i]
            + time_fe[j]
            + spec.factor_scale * interactive
            + if treated_post { spec.effect } else { 0.0 }
            + noise[i * t + j]
    });
    let units: Vec<String> = (0..n)
        .map(|i| {
            if i < spec.n0 {
                format!("c{i:03}")
            } else {
                format!("t{:03}", i - spec.n0)
            }
        })
        .collect();
    let periods = quarter_labels(t);
    let start = periods[spec.t0].clone();
    let treated = units[spec.n0..].to_vec();
    let panel = Panel::from_matrix(y, units, periods)?.with_treatment(&treated, &start)?;
    Ok((panel, spec.effect))
}

pub const GRID_MAX_COLUMNS: usize = 6;

/// Exhaustive search over simplex grid points with spacing `resolution`.
pub fn grid_oracle_weights(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    with_intercept: bool,
    resolution: f64,
) -> Result<(Vec<f64>, f64), DgpError> {
    grid_oracle_weights_ridge(a, b, with_intercept, resolution, 0.0)
}

/// Grid search for `||c + A w − b||² + ridge²·rows·||w||²`; the intercept,
/// when requested, is set to its closed-form optimum at each grid point.
/// Ties go to the lexicographically smallest weight vector.
pub fn grid_oracle_weights_ridge(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    with_intercept: bool,
    resolution: f64,
    ridge: f64,
) -> Result<(Vec<f64>, f64), DgpError> {
    let n = a.ncols();
    if n == 0 || a.nrows() != b.len() {
        return Err(DgpError::InvalidSpec(format!(
            "grid search needs a nonempty {}-row matrix, got {}×{n}",
            b.len(),
            a.nrows()
        )));
    }
    if n > GRID_MAX_COLUMNS {
        return Err(DgpError::TooManyColumns {
            got: n,
            max: GRID_MAX_COLUMNS,
        });
    }
    let steps = grid_steps(resolution)?;
    // With a free intercept the optimal level is the mean residual, so the
    // objective is the sum of squares of the centered problem.
    let (a, b) = if with_intercept {
        let mut a = a.clone();
        for mut col in a.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        (a, b.add_scalar(-b.mean()))
    } else {
        (a.clone(), b.clone())
    };
    let mut search = GridSearch {
        a: &a,
        b: &b,
        steps,
        penalty: ridge * ridge * a.nrows() as f64,
        counts: vec![0; n],
        best_counts: vec![0; n],
        best: f64::INFINITY,
    };
    let partial = vec![0.0; a.nrows()];
    search.descend(0, steps, &partial, 0.0);
    let w = search
        .best_counts
        .iter()
        .map(|&k| k as f64 / steps as f64)
        .collect();
    Ok((w, search.best))
}

/// Depth-first walk over integer compositions in lexicographic order,
/// carrying the partial fit `Σ k_j a_j`. Over the last two coordinates the
/// residual is affine in one integer, so each grid point costs O(rows).
struct GridSearch<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    steps: usize,
    penalty: f64,
    counts: Vec<usize>,
    best_counts: Vec<usize>,
    best: f64,
}

impl GridSearch<'_> {
    fn descend(&mut self, pos: usize, remaining: usize, partial: &[f64], sq: f64) {
        let n = self.counts.len();
        if pos + 1 == n {
            self.last_two(pos, remaining, partial, sq, 0..=0);
            return;
        }
        if pos + 2 == n {
            self.last_two(pos + 1, remaining, partial, sq, 0..=remaining);
            return;
        }
        let mut next = partial.to_vec();
        for k in 0..=remaining {
            self.counts[pos] = k;
            let kf = k as f64;
            for (r, v) in next.iter_mut().enumerate() {
                *v = partial[r] + kf * self.a[(r, pos)];
            }
            self.descend(pos + 1, remaining - k, &next, sq + kf * kf);
        }
    }

    /// Visits `counts[last-1] = k`, `counts[last] = remaining − k` for each
    /// `k` in `ks` (only `k = 0` when there is a single column).
    fn last_two(
        &mut self,
        last: usize,
        remaining: usize,
        partial: &[f64],
        sq: f64,
        ks: std::ops::RangeInclusive<usize>,
    ) {
        let s = self.steps as f64;
        let big_r = remaining as f64;
        let rows = self.a.nrows();
        // Residual at k is u + k·v.
        let mut u = Vec::with_capacity(rows);
        let mut v = Vec::with_capacity(rows);
        for (r, p) in partial.iter().enumerate() {
            u.push((p + big_r * self.a[(r, last)]) / s - self.b[r]);
            v.push(if last > 0 {
                (self.a[(r, last - 1)] - self.a[(r, last)]) / s
            } else {
                0.0
            });
        }
        let pen = self.penalty / (s * s);
        for k in ks {
            let kf = k as f64;
            let rest = big_r - kf;
            let sse: f64 = u.iter().zip(&v).map(|(u, v)| (u + kf * v).powi(2)).sum();
            let f = sse + pen * (sq + kf * kf + rest * rest);
            if f < self.best {
                self.best = f;
                if last > 0 {
                    self.counts[last - 1] = k;
                }
                self.counts[last] = remaining - k;
                self.best_counts.copy_from_slice(&self.counts);
            }
        }
    }
}

fn grid_steps(resolution: f64) -> Result<usize, DgpError> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(DgpError::BadResolution(resolution));
    }
    let k = (1.0 / resolution).round();
    if ((1.0 / resolution) - k).abs() > 1e-9 * k {
        return Err(DgpError::BadResolution(resolution));
    }
    Ok(k as usize)
}

/// Upper bound on how far the best grid point can be above the continuous
/// minimum, from a first-order bound plus the curvature of the quadratic.
pub fn grid_discretization_bound(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    with_intercept: bool,
    resolution: f64,
    ridge: f64,
) -> f64 {
    let rows = a.nrows() as f64;
    let n = a.ncols() as f64;
    let (col_norms, b_norm): (Vec<f64>, f64) = if with_intercept {
        let cols = a
            .column_iter()
            .map(|c| {
                let m = c.mean();
                c.iter().map(|x| (x - m).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let m = b.mean();
        (cols, b.iter().map(|x| (x - m).powi(2)).sum::<f64>().sqrt())
    } else {
        (a.column_iter().map(|c| c.norm()).collect(), b.norm())
    };
    let eta = ridge * ridge * rows;
    let max_col = col_norms.iter().cloned().fold(0.0, f64::max);
    let frob_sq: f64 = col_norms.iter().map(|c| c * c).sum();
    // ||∇f||_∞ ≤ 2(max_j ||a_j|| · max_w ||A w − b|| + eta) on the simplex.
    let grad = 2.0 * (max_col * (max_col + b_norm) + eta);
    // Rounding an optimum to the grid moves it by at most n·res in l1.
    let step = n * resolution;
    grad * step + (frob_sq + eta) * step * step
}

/// DiD as the four-means contrast, by direct summation.
pub fn oracle_ate_did(y: &DMatrix<f64>, design: &BlockDesign) -> f64 {
    let mean = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        let mut s = 0.0;
        let mut c = 0usize;
        for i in rows {
            for t in cols.clone() {
                s += y[(i, t)];
                c += 1;
            }
        }
        s / c as f64
    };
    let (n0, n, t0, t) = (design.n0, design.n(), design.t0, design.t());
    mean(n0..n, t0..t) - mean(n0..n, 0..t0) - mean(0..n0, t0..t) + mean(0..n0, 0..t0)
}
