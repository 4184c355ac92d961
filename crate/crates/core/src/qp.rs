//! Small dense QP over the capped simplex
//!
//! ```text
//!     minimize     ½ πᵀQπ + cᵀπ
//!     subject to   π ≥ 0,  1ᵀπ ≤ π̄
//! ```
//!
//! solved with a primal active-set method started from the origin. `Q` only
//! needs to be positive semidefinite: on a flat reduced subspace the method
//! walks along the zero-curvature descent direction until a constraint
//! blocks it, which always happens because the feasible set is compact.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::market::MarketParams;

pub const MAX_ASSETS: usize = 64;
const KKT_TOL: f64 = 1e-7;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub cap: f64,
    /// Set when a negative curvature was replaced by zero during assembly.
    pub curvature_clamped: bool,
}

impl QpProblem {
    pub fn new(quadratic: DMatrix<f64>, linear: DVector<f64>, cap: f64) -> Result<Self> {
        let p = Self {
            quadratic,
            linear,
            cap,
            curvature_clamped: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Hamiltonian of the wealth generator at a node:
    /// `Q = x²·(v_xx)₊·Σ`, `c = x·v_x·(b − r1)`.
    pub fn hamiltonian(x: f64, v_x: f64, v_xx: f64, params: &MarketParams) -> Self {
        let clamped = v_xx < 0.0;
        let curv = v_xx.max(0.0);
        Self {
            quadratic: params.covariance() * (x * x * curv),
            linear: params.excess_drift() * (x * v_x),
            cap: params.leverage_cap(),
            curvature_clamped: clamped,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.quadratic * w)) + self.linear.dot(w)
    }

    fn validate(&self) -> Result<()> {
        let m = self.linear.len();
        if m == 0 || m > MAX_ASSETS {
            return Err(Error::InvalidInput(format!(
                "QP dimension {m} outside 1..={MAX_ASSETS}"
            )));
        }
        if self.quadratic.nrows() != m || self.quadratic.ncols() != m {
            return Err(Error::InvalidInput("QP matrix and vector sizes differ".into()));
        }
        if self.quadratic.iter().chain(self.linear.iter()).any(|v| !v.is_finite())
            || !self.cap.is_finite()
        {
            return Err(Error::InvalidInput("QP data must be finite".into()));
        }
        if self.cap < 0.0 {
            return Err(Error::InvalidInput(format!("QP cap {} is negative", self.cap)));
        }
        let scale = self.quadratic.amax();
        for i in 0..m {
            for j in 0..i {
                if (self.quadratic[(i, j)] - self.quadratic[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput("QP matrix is not symmetric".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    ClampedCurvature,
}

/// Scaled KKT residuals of a candidate point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    /// Multiplier of the leverage constraint.
    pub sum_multiplier: f64,
}

impl KktResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.max_residual() <= tol
    }

    pub fn max_residual(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub weights: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt: KktResiduals,
}

/// Computes multipliers for `w` and the residuals of the KKT system, each
/// divided by `1 + ‖c‖∞`.
pub fn kkt_residuals(problem: &QpProblem, w: &DVector<f64>) -> KktResiduals {
    let m = problem.dim();
    let cap = problem.cap;
    let g = &problem.quadratic * w + &problem.linear;
    let bound_tol = 1e-12 * (1.0 + cap);
    let total: f64 = w.sum();
    let at_bound: Vec<bool> = w.iter().map(|&v| v <= bound_tol).collect();
    let sum_active = cap - total <= bound_tol;
    let free: Vec<usize> = (0..m).filter(|&i| !at_bound[i]).collect();
    let lambda = if !sum_active {
        0.0
    } else if free.is_empty() {
        (-g.min()).max(0.0)
    } else {
        (-free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64).max(0.0)
    };
    let mut stat: f64 = 0.0;
    let mut comp: f64 = lambda * (cap - total).abs();
    for i in 0..m {
        let r = g[i] + lambda;
        if at_bound[i] {
            stat = stat.max((-r).max(0.0));
            comp = comp.max((r.max(0.0) * w[i]).abs());
        } else {
            stat = stat.max(r.abs());
        }
    }
    let primal = w.iter().fold((total - cap).max(0.0), |a, &v| a.max(-v));
    let scale = 1.0 + problem.linear.amax();
    KktResiduals {
        stationarity: stat / scale,
        primal: primal / scale,
        complementarity: comp / scale,
        sum_multiplier: lambda,
    }
}

/// Global minimizer over `{π ≥ 0, 1ᵀπ ≤ π̄}`. Among multiple optima the origin
/// is preferred whenever it is one of them.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    problem.validate()?;
    let m = problem.dim();
    let status = if problem.curvature_clamped {
        QpStatus::ClampedCurvature
    } else {
        QpStatus::Optimal
    };
    if problem.cap == 0.0 {
        let w = DVector::zeros(m);
        let kkt = kkt_residuals(problem, &w);
        return Ok(QpSolution {
            weights: w,
            objective: 0.0,
            status,
            kkt,
        });
    }

    let q = &problem.quadratic;
    let c = &problem.linear;
    let cap = problem.cap;
    let q_scale = q.amax();
    let scale = 1.0 + c.amax() + q_scale * cap;
    let mult_tol = 1e-12 * scale;
    let step_tol = 1e-14 * (1.0 + cap);
    let max_changes = 10usize.saturating_mul(1usize.checked_shl(m as u32).unwrap_or(usize::MAX));

    let mut w = DVector::<f64>::zeros(m);
    let mut at_bound = vec![true; m];
    let mut sum_active = false;
    let mut changes = 0usize;

    loop {
        if changes > max_changes {
            return Err(Error::QpConvergence { iterations: changes });
        }
        let g = q * &w + c;
        let free: Vec<usize> = (0..m).filter(|&i| !at_bound[i]).collect();
        let dir = subspace_direction(q, &g, &free, sum_active, q_scale);

        let p = match dir {
            Some(d) if d.step.iter().any(|v| v.abs() > step_tol) => d,
            _ => {
                // Stationary on the working set: inspect multipliers.
                let lambda = if sum_active {
                    -free.iter().map(|&i| g[i]).sum::<f64>() / free.len().max(1) as f64
                } else {
                    0.0
                };
                let mut worst: Option<(Option<usize>, f64)> = None;
                for i in 0..m {
                    if at_bound[i] {
                        let mu = g[i] + lambda;
                        if mu < -mult_tol && worst.is_none_or(|(_, v)| mu < v) {
                            worst = Some((Some(i), mu));
                        }
                    }
                }
                if sum_active && lambda < -mult_tol && worst.is_none_or(|(_, v)| lambda < v) {
                    worst = Some((None, lambda));
                }
                match worst {
                    None => break,
                    Some((Some(i), _)) => at_bound[i] = false,
                    Some((None, _)) => sum_active = false,
                }
                changes += 1;
                continue;
            }
        };

        // Ratio test against the inactive constraints.
        let mut alpha_max = f64::INFINITY;
        let mut blocking: Option<Option<usize>> = None;
        for &i in &free {
            let pi = p.step[i];
            if pi < 0.0 {
                let a = (w[i] / -pi).max(0.0);
                if a < alpha_max {
                    alpha_max = a;
                    blocking = Some(Some(i));
                }
            }
        }
        if !sum_active {
            let ps: f64 = p.step.iter().sum();
            if ps > 0.0 {
                let a = ((cap - w.sum()) / ps).max(0.0);
                if a < alpha_max {
                    alpha_max = a;
                    blocking = Some(None);
                }
            }
        }
        let alpha = if p.flat { alpha_max } else { alpha_max.min(1.0) };
        if !alpha.is_finite() {
            // A flat descent direction inside a compact set always hits a bound.
            return Err(Error::QpConvergence { iterations: changes });
        }
        w += &p.step * alpha;
        if p.flat || alpha_max <= 1.0 {
            match blocking {
                Some(Some(i)) => {
                    w[i] = 0.0;
                    at_bound[i] = true;
                }
                Some(None) => sum_active = true,
                None => {}
            }
            changes += 1;
        }
    }

    for v in w.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let objective = problem.objective(&w);
    let kkt = kkt_residuals(problem, &w);
    if !(kkt.stationarity <= KKT_TOL && kkt.primal <= FEAS_TOL && kkt.complementarity <= KKT_TOL)
    {
        return Err(Error::QpConvergence { iterations: changes });
    }
    Ok(QpSolution {
        weights: w,
        objective,
        status,
        kkt,
    })
}

struct Direction {
    step: DVector<f64>,
    /// Zero-curvature descent: objective is linear along it, take the full ratio step.
    flat: bool,
}

/// Minimizer direction of the equality-constrained subproblem on the free
/// variables (with `Σ p_F = 0` when the leverage constraint is active).
fn subspace_direction(
    q: &DMatrix<f64>,
    g: &DVector<f64>,
    free: &[usize],
    sum_active: bool,
    q_scale: f64,
) -> Option<Direction> {
    let m = g.len();
    let nf = free.len();
    if nf == 0 || (sum_active && nf == 1) {
        return None;
    }
    let qff = DMatrix::from_fn(nf, nf, |a, b| q[(free[a], free[b])]);
    let gf = DVector::from_fn(nf, |a, _| g[free[a]]);
    let z = if sum_active {
        sum_nullspace_basis(nf)
    } else {
        DMatrix::identity(nf, nf)
    };
    let hr = z.transpose() * &qff * &z;
    let gr = z.transpose() * &gf;
    let tol = 1e-11 * q_scale.max(f64::MIN_POSITIVE);
    if let Some(d) = certified_newton(&hr, &gr, tol) {
        return Some(scatter(&z * d, free, m, false));
    }
    let eig = SymmetricEigen::new(hr);
    let k = gr.len();
    let mut null_part = DVector::zeros(k);
    let mut newton = DVector::zeros(k);
    for j in 0..k {
        let u = eig.eigenvectors.column(j);
        let coef = u.dot(&gr);
        let lam = eig.eigenvalues[j];
        if lam <= tol {
            null_part += u * coef;
        } else {
            newton -= u * (coef / lam);
        }
    }
    let g_scale = 1.0 + gf.amax();
    let (d, flat) = if null_part.amax() > 1e-13 * g_scale {
        (-null_part, true)
    } else {
        (newton, false)
    };
    Some(scatter(z * d, free, m, flat))
}

fn scatter(pf: DVector<f64>, free: &[usize], m: usize, flat: bool) -> Direction {
    let mut step = DVector::zeros(m);
    for (a, &i) in free.iter().enumerate() {
        step[i] = pf[a];
    }
    Direction { step, flat }
}

/// Newton step `−H⁻¹g` via Cholesky, returned only when every eigenvalue of
/// `H` provably exceeds `tol` (`λ_min ≥ 1/‖L⁻¹‖²_F`), i.e. exactly when the
/// eigen-decomposition path would find no flat direction.
fn certified_newton(h: &DMatrix<f64>, g: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let chol = h.clone().cholesky()?;
    let k = g.len();
    let mut linv = DMatrix::identity(k, k);
    if !chol.l_dirty().solve_lower_triangular_mut(&mut linv) {
        return None;
    }
    let frob2 = linv.norm_squared();
    if !(frob2.is_finite() && frob2 * tol < 1.0) {
        return None;
    }
    Some(-chol.solve(g))
}

/// Orthonormal basis of `{p ∈ ℝⁿ : Σ p = 0}` from the Householder reflector
/// that maps `1/√n` onto `e₁`.
fn sum_nullspace_basis(n: usize) -> DMatrix<f64> {
    let a = 1.0 / (n as f64).sqrt();
    let mut u = DVector::from_element(n, a);
    u[0] -= 1.0;
    let norm = u.norm();
    u /= norm;
    let h = DMatrix::identity(n, n) - &u * u.transpose() * 2.0;
    h.columns(1, n - 1).into_owned()
}

/// Exhaustive search over the lattice `{π : πᵢ ∈ δℕ, 1ᵀπ ≤ π̄}`. Test oracle;
/// limited to three assets.
pub fn brute_force_qp(problem: &QpProblem, grid_step: f64) -> Result<QpSolution> {
    problem.validate()?;
    let m = problem.dim();
    if m > 3 {
        return Err(Error::Unsupported(format!(
            "lattice search over {m} assets is combinatorially infeasible"
        )));
    }
    if !(grid_step > 0.0) {
        return Err(Error::InvalidInput("grid step must be positive".into()));
    }
    let steps = ((problem.cap / grid_step) + 1e-9).floor() as usize;
    let mut best = DVector::zeros(m);
    let mut best_obj = 0.0;
    let mut cur = DVector::zeros(m);
    fn recurse(
        problem: &QpProblem,
        depth: usize,
        remaining: usize,
        delta: f64,
        cur: &mut DVector<f64>,
        best: &mut DVector<f64>,
        best_obj: &mut f64,
    ) {
        if depth == cur.len() {
            let obj = problem.objective(cur);
            if obj < *best_obj {
                *best_obj = obj;
                best.copy_from(cur);
            }
            return;
        }
        for k in 0..=remaining {
            cur[depth] = k as f64 * delta;
            recurse(problem, depth + 1, remaining - k, delta, cur, best, best_obj);
        }
        cur[depth] = 0.0;
    }
    recurse(problem, 0, steps, grid_step, &mut cur, &mut best, &mut best_obj);
    let kkt = kkt_residuals(problem, &best);
    Ok(QpSolution {
        weights: best,
        objective: best_obj,
        status: if problem.curvature_clamped {
            QpStatus::ClampedCurvature
        } else {
            QpStatus::Optimal
        },
        kkt,
    })
}
