//! Small dense nonlinear least-squares solver.
//!
//! Levenberg-Marquardt trust-region iteration with Marquardt diagonal scaling
//! and Nielsen damping updates. An optional Huber loss is applied per residual
//! block (for example one 2-vector per reprojection) through iteratively
//! reweighted normal equations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LsqError {
    #[error("residuals are undefined at the starting point")]
    InfeasibleStart,
    #[error("no convergence after {iterations} iterations (cost {cost:e})")]
    NoConvergence { iterations: usize, cost: f64 },
}

/// A least-squares objective `1/2 sum_b loss(|r_b|)`.
pub trait Residuals {
    fn num_params(&self) -> usize;

    /// Residual vector at `p`. `None` marks an infeasible point, e.g. a 3D
    /// estimate that moved behind a camera; the solver rejects such steps.
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>>;

    /// Jacobian of [`Residuals::residuals`]. Defaults to central differences.
    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        numeric_jacobian(self, p)
    }

    /// Projects parameters back onto the feasible set (box bounds etc.).
    fn project(&self, _p: &mut DVector<f64>) {}
}

pub fn numeric_jacobian<R: Residuals + ?Sized>(problem: &R, p: &DVector<f64>) -> Option<DMatrix<f64>> {
    let n = p.len();
    let r0 = problem.residuals(p)?;
    let mut jac = DMatrix::zeros(r0.len(), n);
    let mut x = p.clone();
    for j in 0..n {
        let h = 1e-6 * p[j].abs().max(1.0);
        x[j] = p[j] + h;
        let rp = problem.residuals(&x)?;
        x[j] = p[j] - h;
        let rm = problem.residuals(&x)?;
        x[j] = p[j];
        jac.set_column(j, &((rp - rm) / (2.0 * h)));
    }
    Some(jac)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsqOptions {
    pub max_iterations: usize,
    /// Huber threshold on the block norm; `None` gives plain least squares.
    pub huber_delta: Option<f64>,
    /// Residuals are grouped into consecutive blocks of this size for the loss.
    pub block_size: usize,
    /// Stop when `|step| < step_tolerance * (|x| + step_tolerance)`.
    pub step_tolerance: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            huber_delta: None,
            block_size: 1,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub params: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
}

pub fn huber(norm: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if norm > d => d * (norm - 0.5 * d),
        _ => 0.5 * norm * norm,
    }
}

fn block_norms(r: &DVector<f64>, block: usize) -> impl Iterator<Item = f64> + '_ {
    r.as_slice()
        .chunks(block)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Robust cost of a residual vector under `opts`.
pub fn robust_cost(r: &DVector<f64>, opts: &LsqOptions) -> f64 {
    block_norms(r, opts.block_size.max(1))
        .map(|n| huber(n, opts.huber_delta))
        .sum()
}

fn irls_weights(r: &DVector<f64>, opts: &LsqOptions) -> DVector<f64> {
    let block = opts.block_size.max(1);
    let mut w = DVector::from_element(r.len(), 1.0);
    if let Some(delta) = opts.huber_delta {
        for (b, n) in block_norms(r, block).enumerate() {
            if n > delta {
                let wb = delta / n;
                for i in b * block..((b + 1) * block).min(r.len()) {
                    w[i] = wb;
                }
            }
        }
    }
    w
}

pub fn minimize<R: Residuals + ?Sized>(
    problem: &R,
    x0: DVector<f64>,
    opts: &LsqOptions,
) -> Result<LsqSolution, LsqError> {
    let sol = descend(problem, x0, opts)?;
    Ok(polish(problem, sol, opts))
}

/// Normal-equation pieces `(J^T W J, J^T W r)` at `x`.
fn normal_equations<R: Residuals + ?Sized>(
    problem: &R,
    x: &DVector<f64>,
    r: &DVector<f64>,
    opts: &LsqOptions,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let jac = problem.jacobian(x)?;
    let w = irls_weights(r, opts);
    let mut jw = jac.clone();
    for (i, mut row) in jw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    Some((jac.transpose() * &jw, jw.transpose() * r))
}

const POLISH_STEPS: usize = 40;

/// Undamped Gauss-Newton steps after the trust-region loop, accepted while
/// the gradient shrinks and the cost does not rise beyond rounding. Near the
/// optimum the cost is flat to machine precision along weak directions, so
/// cost comparisons alone stop short; the gradient still resolves them.
fn polish<R: Residuals + ?Sized>(problem: &R, mut sol: LsqSolution, opts: &LsqOptions) -> LsqSolution {
    let Some(mut r) = problem.residuals(&sol.params) else { return sol };
    let Some((mut h, mut g)) = normal_equations(problem, &sol.params, &r, opts) else { return sol };
    // Reweighted steps converge only linearly once a block sits on the
    // linear branch of the loss, so allow a fair number of them.
    for _ in 0..POLISH_STEPS {
        let Some(chol) = h.clone().cholesky() else { break };
        let step = chol.solve(&g);
        if step.norm() <= 1e-15 * (1.0 + sol.params.norm()) {
            break;
        }
        let mut x = &sol.params - step;
        problem.project(&mut x);
        let Some(r_new) = problem.residuals(&x) else { break };
        let cost = robust_cost(&r_new, opts);
        if cost > sol.cost * (1.0 + 1e-12) + 1e-300 {
            break;
        }
        let Some((h_new, g_new)) = normal_equations(problem, &x, &r_new, opts) else { break };
        if g_new.norm() >= g.norm() {
            break;
        }
        sol = LsqSolution { params: x, cost: cost.min(sol.cost), iterations: sol.iterations };
        (r, h, g) = (r_new, h_new, g_new);
    }
    let _ = r;
    sol
}

fn descend<R: Residuals + ?Sized>(
    problem: &R,
    x0: DVector<f64>,
    opts: &LsqOptions,
) -> Result<LsqSolution, LsqError> {
    let n = problem.num_params();
    let mut x = x0;
    problem.project(&mut x);
    let mut r = problem.residuals(&x).ok_or(LsqError::InfeasibleStart)?;
    let mut cost = robust_cost(&r, opts);
    let mut lambda: Option<f64> = None;
    let mut nu = 2.0;

    for iter in 0..opts.max_iterations {
        if cost <= 1e-300 {
            return Ok(LsqSolution { params: x, cost, iterations: iter });
        }
        let jac = problem.jacobian(&x).ok_or(LsqError::InfeasibleStart)?;
        let w = irls_weights(&r, opts);
        let mut jw = jac.clone();
        for (i, mut row) in jw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let jtwj = jac.transpose() * &jw;
        let g = jw.transpose() * &r;
        if g.amax() <= 1e-15 * (1.0 + cost) {
            return Ok(LsqSolution { params: x, cost, iterations: iter });
        }
        let max_diag = (0..n).map(|i| jtwj[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
        let lam = lambda.get_or_insert(1e-3 * max_diag);

        loop {
            let mut a = jtwj.clone();
            for i in 0..n {
                a[(i, i)] += *lam * jtwj[(i, i)].max(1e-9 * max_diag);
            }
            let Some(chol) = a.cholesky() else {
                *lam *= nu;
                nu *= 2.0;
                if *lam > 1e30 {
                    return Ok(LsqSolution { params: x, cost, iterations: iter });
                }
                continue;
            };
            let delta = chol.solve(&(-&g));
            let mut x_new = &x + &delta;
            problem.project(&mut x_new);
            let step = &x_new - &x;
            if step.norm() <= opts.step_tolerance * (x.norm() + opts.step_tolerance) {
                // Take the final tiny step only if it does not hurt.
                if let Some(r_new) = problem.residuals(&x_new) {
                    let c_new = robust_cost(&r_new, opts);
                    if c_new <= cost {
                        return Ok(LsqSolution { params: x_new, cost: c_new, iterations: iter + 1 });
                    }
                }
                return Ok(LsqSolution { params: x, cost, iterations: iter + 1 });
            }
            let candidate = problem.residuals(&x_new).map(|rn| {
                let c = robust_cost(&rn, opts);
                (rn, c)
            });
            match candidate {
                Some((r_new, c_new)) if c_new < cost => {
                    let predicted = -(step.dot(&g) + 0.5 * step.dot(&(&jtwj * &step)));
                    let rho = if predicted > 0.0 { (cost - c_new) / predicted } else { 0.5 };
                    let rel = (cost - c_new) / cost;
                    x = x_new;
                    r = r_new;
                    cost = c_new;
                    *lam *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    *lam = lam.max(1e-15);
                    nu = 2.0;
                    if rel < opts.cost_tolerance {
                        return Ok(LsqSolution { params: x, cost, iterations: iter + 1 });
                    }
                    break;
                }
                _ => {
                    *lam *= nu;
                    nu *= 2.0;
                    if *lam > 1e30 {
                        // No descent direction left at machine precision.
                        return Ok(LsqSolution { params: x, cost, iterations: iter + 1 });
                    }
                }
            }
        }
    }
    Err(LsqError::NoConvergence { iterations: opts.max_iterations, cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;
    impl Residuals for Rosenbrock {
        fn num_params(&self) -> usize {
            2
        }
        fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
            Some(DVector::from_vec(vec![10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]]))
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let sol = minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &LsqOptions::default()).unwrap();
        assert!((sol.params[0] - 1.0).abs() < 1e-6, "{:?}", sol);
        assert!((sol.params[1] - 1.0).abs() < 1e-6);
    }

    /// Line fit with one gross outlier: Huber pulls the estimate back.
    struct Line {
        xs: Vec<f64>,
        ys: Vec<f64>,
    }
    impl Residuals for Line {
        fn num_params(&self) -> usize {
            2
        }
        fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
            Some(DVector::from_iterator(
                self.xs.len(),
                self.xs.iter().zip(&self.ys).map(|(x, y)| p[0] * x + p[1] - y),
            ))
        }
    }

    #[test]
    fn huber_resists_outlier() {
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let mut ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        ys[10] += 100.0;
        let line = Line { xs, ys };
        let plain = minimize(&line, DVector::zeros(2), &LsqOptions::default()).unwrap();
        let robust = minimize(
            &line,
            DVector::zeros(2),
            &LsqOptions { huber_delta: Some(1.0), ..Default::default() },
        )
        .unwrap();
        let err = |p: &DVector<f64>| (p[0] - 2.0).abs() + (p[1] - 1.0).abs();
        assert!(err(&robust.params) < 0.2 * err(&plain.params));
    }

    #[test]
    fn huber_cost_is_continuous() {
        let d = Some(2.0);
        assert!((huber(2.0 - 1e-12, d) - huber(2.0 + 1e-12, d)).abs() < 1e-9);
        assert_eq!(huber(1.0, d), 0.5);
        assert_eq!(huber(4.0, d), 6.0);
    }

    #[test]
    fn reports_no_convergence_at_cap() {
        let opts = LsqOptions { max_iterations: 1, step_tolerance: 0.0, cost_tolerance: 0.0, ..Default::default() };
        let res = minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &opts);
        assert!(matches!(res, Err(LsqError::NoConvergence { .. })));
    }
}
