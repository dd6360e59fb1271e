//! Least squares over the probability simplex.
//!
//! Minimizes `||c·1 + A·w − b||² + ridge²·rows(A)·||w||²` subject to
//! `w ≥ 0, Σw = 1`, with `c` either free or fixed at zero. A free intercept
//! is profiled out by centering the columns of `A` and `b`, after which the
//! problem is a plain simplex-constrained quadratic.
//!
//! The iteration is away-step Frank-Wolfe with exact line search from the
//! uniform point. Once the support settles, the equality-constrained
//! problem on the support is solved directly; the result is kept only if it
//! is feasible, satisfies the optimality conditions on every coordinate, and
//! does not increase the objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Solver settings shared by every weight program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative tolerance on the objective (duality gap and decrease).
    pub tol: f64,
    pub max_iter: usize,
    /// Ridge applied to the time-weight program. Zero reproduces the
    /// unregularized program.
    pub lambda_ridge: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 10_000,
            lambda_ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexFit {
    pub intercept: Option<f64>,
    pub weights: Vec<f64>,
    /// Exact objective at the returned point.
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("simplex solver did not converge after {} iterations (objective {})", best.iterations, best.objective)]
    DidNotConverge { best: Box<SimplexFit> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
}

const RECOMPUTE_EVERY: usize = 50;
const POLISH_EVERY: usize = 25;
const DECREASE_WINDOW: usize = 10;
const KKT_TOL: f64 = 1e-10;

pub fn solve_simplex_ls(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    ridge: f64,
    with_intercept: bool,
    opts: &SolverOptions,
) -> Result<SimplexFit, SolverError> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(SolverError::DimensionMismatch(format!(
            "design matrix is {m}x{n}; need at least one row and one column"
        )));
    }
    if b.len() != m {
        return Err(SolverError::DimensionMismatch(format!(
            "target has {} entries but the design matrix has {m} rows",
            b.len()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(SolverError::InvalidInput(format!(
            "ridge must be finite and >= 0, got {ridge}"
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(SolverError::InvalidInput(
            "non-finite entry in A or b".into(),
        ));
    }

    let eta = ridge * ridge * m as f64;
    let (a_c, b_c) = if with_intercept {
        let mut a_c = a.clone();
        for mut col in a_c.column_iter_mut() {
            let mean = shifted_mean(col.iter());
            col.add_scalar_mut(-mean);
        }
        let mean_b = shifted_mean(b.iter());
        (a_c, b.add_scalar(-mean_b))
    } else {
        (a.clone(), b.clone())
    };

    let problem = Problem {
        a: &a_c,
        b: &b_c,
        eta,
    };
    let (w, iterations, converged) = if n == 1 {
        (DVector::from_element(1, 1.0), 0, true)
    } else {
        problem.frank_wolfe(opts)
    };

    let fit = finish(a, b, eta, with_intercept, w, iterations);
    if converged {
        Ok(fit)
    } else {
        Err(SolverError::DidNotConverge {
            best: Box::new(fit),
        })
    }
}

/// Mean computed relative to the first value, so that a constant sequence
/// has exactly that constant as its mean and centers to exact zeros.
pub(crate) fn shifted_mean<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let mut values = values.peekable();
    let Some(&first) = values.peek().copied() else {
        return 0.0;
    };
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + (v - first), c + 1));
    first + sum / count as f64
}

/// Objective `||c·1 + A·w − b||² + eta·||w||²` evaluated on the original data.
pub fn simplex_objective(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    eta: f64,
    intercept: Option<f64>,
    w: &[f64],
) -> f64 {
    let w = DVector::from_column_slice(w);
    let mut r = a * &w - b;
    if let Some(c) = intercept {
        r.add_scalar_mut(c);
    }
    r.norm_squared() + eta * w.norm_squared()
}

fn finish(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    eta: f64,
    with_intercept: bool,
    w: DVector<f64>,
    iterations: usize,
) -> SimplexFit {
    let intercept = with_intercept.then(|| (b - a * &w).mean());
    let weights: Vec<f64> = w.iter().copied().collect();
    let objective = simplex_objective(a, b, eta, intercept, &weights);
    SimplexFit {
        intercept,
        weights,
        objective,
        iterations,
    }
}

/// Centered problem `min ||A w − b||² + eta ||w||²` over the simplex.
struct Problem<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    eta: f64,
}

impl Problem<'_> {
    fn residual(&self, w: &DVector<f64>) -> DVector<f64> {
        self.a * w - self.b
    }

    fn objective(&self, w: &DVector<f64>, r: &DVector<f64>) -> f64 {
        r.norm_squared() + self.eta * w.norm_squared()
    }

    /// Half gradient `Aᵀr + eta·w`.
    fn half_gradient(&self, w: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(r) + w * self.eta
    }

    /// Scale of gradient entries per unit of weight, used for KKT tolerances.
    fn gradient_scale(&self) -> f64 {
        let col = self
            .a
            .column_iter()
            .map(|c| c.norm_squared())
            .fold(0.0, f64::max);
        col + self.eta + self.b.norm_squared() / self.b.len() as f64
    }

    /// Returns `(weights, iterations, converged)`.
    fn frank_wolfe(&self, opts: &SolverOptions) -> (DVector<f64>, usize, bool) {
        let n = self.a.ncols();
        let mut w = DVector::from_element(n, 1.0 / n as f64);
        let mut r = self.residual(&w);
        let mut f = self.objective(&w, &r);
        let mut history: Vec<f64> = Vec::with_capacity(opts.max_iter.min(1 << 16) + 1);
        history.push(f);
        let scale = self.gradient_scale();

        for k in 0..opts.max_iter {
            if k > 0 && k % RECOMPUTE_EVERY == 0 {
                renormalize(&mut w);
                r = self.residual(&w);
                f = self.objective(&w, &r);
            }

            let g = self.half_gradient(&w, &r);
            let gw = g.dot(&w);
            let (s, g_min) = argmin(&g);
            let fw_gap = gw - g_min;

            let decreased_little = history.len() > DECREASE_WINDOW && {
                let old = history[history.len() - 1 - DECREASE_WINDOW];
                old - f <= opts.tol * old
            };
            if f <= 0.0 || 2.0 * fw_gap <= opts.tol * f || decreased_little {
                let w = self.polish(&w, f, scale).unwrap_or(w);
                return (w, k, true);
            }
            if k > 0 && k % POLISH_EVERY == 0 {
                if let Some(p) = self.polish(&w, f, scale) {
                    return (p, k, true);
                }
            }

            let (v, g_max) = argmax_on_support(&g, &w);
            let away_gap = g_max - gw;

            // Direction d and its image A·d.
            let aw = &r + self.b;
            let (d, ad, step_max, drop) = if fw_gap >= away_gap {
                let mut d = -&w;
                d[s] += 1.0;
                let ad = self.a.column(s) - &aw;
                (d, ad, 1.0, None)
            } else {
                let wv = w[v];
                let mut d = w.clone();
                d[v] -= 1.0;
                let ad = &aw - self.a.column(v);
                (d, ad, wv / (1.0 - wv), Some(v))
            };

            let slope = -g.dot(&d);
            let curvature = ad.norm_squared() + self.eta * d.norm_squared();
            if slope <= 0.0 {
                // No descent direction at working precision.
                let w = self.polish(&w, f, scale).unwrap_or(w);
                return (w, k, true);
            }
            let mut step = if curvature > 0.0 {
                slope / curvature
            } else {
                step_max
            };
            let mut dropped = false;
            if step >= step_max {
                step = step_max;
                dropped = drop.is_some();
            }

            w.axpy(step, &d, 1.0);
            r.axpy(step, &ad, 1.0);
            if dropped {
                w[v] = 0.0;
            }
            for x in w.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
            let f_new = self.objective(&w, &r);
            debug_assert!(
                f_new <= f + 1e-9 * (f.abs() + scale * 1e-6),
                "objective increased: {f} -> {f_new}"
            );
            f = f_new;
            history.push(f);
        }

        renormalize(&mut w);
        let f = self.objective(&w, &self.residual(&w));
        match self.polish(&w, f, scale) {
            Some(p) => (p, opts.max_iter, true),
            None => (w, opts.max_iter, false),
        }
    }

    /// Primal active-set refinement started from the support of `w`.
    ///
    /// Within the current face it takes the minimum-norm least-squares step
    /// (sum preserved); a step that would leave the simplex stops at the
    /// boundary and drops the blocking coordinate. At a face optimum, the
    /// inactive coordinate with the most negative reduced gradient enters.
    /// Returns the refined point only if it is optimal for the full problem
    /// and no worse than `f`.
    fn polish(&self, w: &DVector<f64>, f: f64, scale: f64) -> Option<DVector<f64>> {
        let n = w.len();
        let mut cur = w.clone();
        let mut support: Vec<usize> = (0..n).filter(|&j| cur[j] > 0.0).collect();
        let sqrt_eta = self.eta.sqrt();
        let max_rounds = 4 * n + 10;

        for _ in 0..max_rounds {
            if support.is_empty() {
                return None;
            }
            let k = support.len();
            if k == 1 {
                if !self.enter(&cur, &mut support, scale) {
                    break;
                }
                continue;
            }
            // Minimize over the face's affine hull, parametrized as
            // u + N z with u uniform on the support and N = [I; −1ᵀ]. The
            // minimum-norm z makes the target depend on the face alone, not
            // on the current iterate, which keeps ties consistent.
            let last = support[k - 1];
            let m = self.a.nrows();
            let mut lhs = DMatrix::<f64>::zeros(m + k, k - 1);
            let mut rhs = DVector::<f64>::zeros(m + k);
            let mut u = DVector::<f64>::zeros(n);
            for &j in &support {
                u[j] = 1.0 / k as f64;
            }
            let r = self.residual(&u);
            for (p, &j) in support[..k - 1].iter().enumerate() {
                for row in 0..m {
                    lhs[(row, p)] = self.a[(row, j)] - self.a[(row, last)];
                }
                lhs[(m + p, p)] = sqrt_eta;
                lhs[(m + k - 1, p)] = -sqrt_eta;
            }
            for row in 0..m {
                rhs[row] = -r[row];
            }
            for (p, &j) in support.iter().enumerate() {
                rhs[m + p] = -sqrt_eta * u[j];
            }
            let svd = lhs.svd(true, true);
            let cutoff = 1e-12 * svd.singular_values.max();
            let z = svd.solve(&rhs, cutoff).ok()?;
            if z.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let mut delta = DVector::<f64>::zeros(k);
            for p in 0..k - 1 {
                delta[p] = z[p];
                delta[k - 1] -= z[p];
            }
            for (p, &j) in support.iter().enumerate() {
                delta[p] += u[j] - cur[j];
            }
            // Largest feasible fraction of the step.
            let mut step = 1.0;
            let mut blocking = None;
            for (p, &j) in support.iter().enumerate() {
                if delta[p] < 0.0 {
                    let lim = -cur[j] / delta[p];
                    if lim < step {
                        step = lim;
                        blocking = Some(p);
                    }
                }
            }
            for (p, &j) in support.iter().enumerate() {
                cur[j] += step * delta[p];
            }
            match blocking {
                None => {
                    if !self.enter(&cur, &mut support, scale) {
                        break;
                    }
                }
                Some(p) => {
                    cur[support[p]] = 0.0;
                    support.remove(p);
                }
            }
        }
        renormalize(&mut cur);
        self.accept(cur, f, scale)
    }

    /// Adds the inactive coordinate whose gradient most undercuts the
    /// support's. Returns false when no coordinate qualifies.
    fn enter(&self, cur: &DVector<f64>, support: &mut Vec<usize>, scale: f64) -> bool {
        let r = self.residual(cur);
        let g = self.half_gradient(cur, &r);
        let level = g.dot(cur);
        let candidate = (0..cur.len())
            .filter(|j| !support.contains(j))
            .map(|j| (j, g[j]))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match candidate {
            Some((j, gj)) if gj < level - KKT_TOL * scale => {
                support.push(j);
                support.sort_unstable();
                true
            }
            _ => false,
        }
    }

    fn accept(&self, cand: DVector<f64>, f: f64, scale: f64) -> Option<DVector<f64>> {
        let r = self.residual(&cand);
        let f_cand = self.objective(&cand, &r);
        let g = self.half_gradient(&cand, &r);
        let gap = g.dot(&cand) - argmin(&g).1;
        let ok_gap = gap <= KKT_TOL * scale;
        let ok_obj = f_cand <= f + 1e-12 * (f + scale);
        (ok_gap && ok_obj).then_some(cand)
    }
}

fn argmin(g: &DVector<f64>) -> (usize, f64) {
    let mut best = (0, g[0]);
    for (j, &v) in g.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (j, v);
        }
    }
    best
}

fn argmax_on_support(g: &DVector<f64>, w: &DVector<f64>) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in g.iter().enumerate() {
        if w[j] > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.expect("simplex point has nonempty support")
}

fn renormalize(w: &mut DVector<f64>) {
    for x in w.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s = w.sum();
    if s > 0.0 {
        *w /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn single_column_is_the_simplex_point() {
        let a = DMatrix::from_row_slice(3, 1, &[1.0, 5.0, -2.0]);
        let b = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let fit = solve_simplex_ls(&a, &b, 0.3, true, &opts()).unwrap();
        assert_eq!(fit.weights, vec![1.0]);
        // c = mean(b - a) = mean(-1, -4, 4) = -1/3
        assert!((fit.intercept.unwrap() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_column_is_recovered() {
        let a = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 2.0, 0.0, 1.0, 3.0, 2.0, 5.0, -1.0, 1.0, 1.0, 0.5],
        );
        let b = a.column(1).into_owned();
        let fit = solve_simplex_ls(&a, &b, 0.0, false, &opts()).unwrap();
        assert!((fit.weights[1] - 1.0).abs() < 1e-12, "{:?}", fit.weights);
        assert!(fit.objective < 1e-20);
    }

    #[test]
    fn huge_ridge_gives_uniform() {
        let a = DMatrix::from_fn(5, 4, |i, j| ((i * 7 + j * 3) % 5) as f64);
        let b = DVector::from_fn(5, |i, _| i as f64);
        let fit = solve_simplex_ls(&a, &b, 1e6, true, &opts()).unwrap();
        for w in &fit.weights {
            assert!((w - 0.25).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let a = DMatrix::<f64>::zeros(3, 2);
        let b = DVector::<f64>::zeros(2);
        assert!(matches!(
            solve_simplex_ls(&a, &b, 0.0, false, &opts()),
            Err(SolverError::DimensionMismatch(_))
        ));
        let a = DMatrix::<f64>::zeros(0, 2);
        let b = DVector::<f64>::zeros(0);
        assert!(matches!(
            solve_simplex_ls(&a, &b, 0.0, false, &opts()),
            Err(SolverError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn reports_non_convergence_with_best_iterate() {
        // Optimum strictly inside the simplex; one iteration cannot reach it
        // and the support polish is disabled by the iteration cap.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.3, 0.4, 0.0, 1.0]);
        let b = DVector::from_vec(vec![0.9, -0.1, 0.2]);
        let o = SolverOptions {
            max_iter: 0,
            ..opts()
        };
        match solve_simplex_ls(&a, &b, 0.0, false, &o) {
            Err(SolverError::DidNotConverge { best }) => {
                assert_eq!(best.weights.len(), 3);
                assert!(best.objective.is_finite());
            }
            Ok(fit) => {
                // The polish step may solve it exactly from the start.
                assert_eq!(fit.iterations, 0);
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn constant_columns_with_intercept() {
        // Every simplex point fits exactly once the intercept is free.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 1.0, 4.0, 1.0, 4.0]);
        let b = DVector::from_vec(vec![7.0, 7.0, 7.0]);
        let fit = solve_simplex_ls(&a, &b, 0.0, true, &opts()).unwrap();
        assert!(fit.objective < 1e-20);
        assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(fit.weights.iter().all(|&w| w >= 0.0));
    }
}
