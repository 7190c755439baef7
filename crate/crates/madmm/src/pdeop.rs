//! Discrete PDE solution operators and the inexact u-subproblem.
//!
//! # Operators
//!
//! With the assembled blocks of one level (`K`, `M_ss`, `M_sc`, `M_cc`),
//! the state and adjoint maps are
//!
//! ```text
//! state:    K y = M_sc (u + y_r)
//! adjoint:  K p = M_ss (y_d − y)
//! ```
//!
//! solved by conjugate gradients (`K` is SPD after Dirichlet
//! elimination). The reduced objective and its gradient are
//!
//! ```text
//! Ĵ(u) = ½‖y − y_d‖²_{M_ss} + (α/2)‖u‖²_{M_cc},
//! ∇Ĵ(u) = α M_cc u − M_scᵀ p          (coefficient gradient),
//! ```
//!
//! # The u-subproblem
//!
//! The augmented-Lagrangian subproblem in `u` minimizes
//! `Ĵ(u) + ⟨λ, u − z⟩_{M_cc} + (σ/2)‖u − z‖²_{M_cc}`. Its stationarity
//! condition
//!
//! ```text
//! (∗)  α M_cc u − M_scᵀ p + M_cc λ + σ M_cc (u − z) = 0
//! ```
//!
//! is equivalent, because `M_cc` is invertible and `M_scᵀ p` equals
//! `M_cc` applied to the zero-extension of `p`, to the *nodal* identity
//! `(α+σ) u + λ − σ z = E p` (`E` = extension by zero to boundary
//! nodes). Splitting control dofs into boundary and interior parts:
//!
//! * boundary nodes: `u_B = (σ z_B − λ_B)/(α+σ)` in closed form,
//! * interior nodes: `p = (α+σ) u_I + λ_I − σ z_I`, which substituted
//!   into the state/adjoint pair leaves the 2×2 block system in `(y, u_I)`
//!
//! ```text
//! [ M_ss   (α+σ)K ] [ y  ]   [ M_ss y_d − K (λ_I − σ z_I) ]
//! [  K     −M_ss  ] [ u_I] = [ M_sb u_B + M_sc y_r        ]
//! ```
//!
//! The block system is solved directly (banded LU after reverse
//! Cuthill–McKee) up to [`DEFAULT_DIRECT_CAP`] unknowns, and by restarted
//! GMRES with a PMHSS-style preconditioner above it; see
//! [`SubproblemSolver`].
//!
//! # Inexactness certificate
//!
//! After each candidate solve the error vector
//! `δ := α M_cc u − M_scᵀ p̂ + M_cc λ + σ M_cc (u − z)` is measured with
//! an *independent* state+adjoint re-solve `(ŷ, p̂)`, and the inner
//! tolerance is tightened by 10 (at most [`MAX_TIGHTENINGS`] times) until
//! `‖δ‖₂ ≤ tol_ξ`. The certificate therefore never trusts the inner
//! Krylov residual alone.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::AssembledLevel;
use crate::linalg::{
    gmres, norm2, solve_spd_warm, BandedCholesky, DirectFactor, GmresOptions, Preconditioner,
    SolveReport, SparseBuilder, SparseMatrix, DEFAULT_DIRECT_CAP,
};

/// Maximum number of ×10 inner-tolerance tightenings before the
/// subproblem reports failure.
pub const MAX_TIGHTENINGS: usize = 6;

/// Iteration budget for the CG state/adjoint solves: generous for cold
/// starts (≈ O(h⁻¹) iterations on the Laplacian), capped so a
/// pathological system fails in bounded time.
fn cg_budget(ns: usize) -> usize {
    (2 * ns + 2000).min(12_000)
}

fn check_control_len(level: &AssembledLevel, v: &[f64], what: &str) -> Result<()> {
    if v.len() != level.control_count() {
        return Err(Error::DimensionMismatch(format!(
            "{what} has length {}, level has {} control dofs",
            v.len(),
            level.control_count()
        )));
    }
    Ok(())
}

fn check_state_len(level: &AssembledLevel, v: &[f64], what: &str) -> Result<()> {
    if v.len() != level.state_count() {
        return Err(Error::DimensionMismatch(format!(
            "{what} has length {}, level has {} state dofs",
            v.len(),
            level.state_count()
        )));
    }
    Ok(())
}

/// Right-hand side of the state equation, `M_sc (u + y_r)`.
fn state_rhs(level: &AssembledLevel, u: &[f64]) -> Vec<f64> {
    let src: Vec<f64> = u.iter().zip(&level.yr).map(|(a, b)| a + b).collect();
    level.m_sc.spmv(&src)
}

/// Solves the state equation `K y = M_sc (u + y_r)` to relative
/// tolerance `tol`.
///
/// # Errors
///
/// Dimension mismatches or a breakdown of CG; running out of iterations
/// is reported through `SolveReport::converged`, not as an error.
pub fn solve_state(level: &AssembledLevel, u: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    solve_state_warm(level, u, None, tol)
}

/// [`solve_state`] with an optional initial guess.
///
/// # Errors
///
/// As [`solve_state`].
pub fn solve_state_warm(
    level: &AssembledLevel,
    u: &[f64],
    y0: Option<&[f64]>,
    tol: f64,
) -> Result<(Vec<f64>, SolveReport)> {
    check_control_len(level, u, "control vector")?;
    let rhs = state_rhs(level, u);
    let zeros;
    let x0 = match y0 {
        Some(v) => {
            check_state_len(level, v, "state initial guess")?;
            v
        }
        None => {
            zeros = vec![0.0; level.state_count()];
            &zeros
        }
    };
    solve_spd_warm(&level.k, &rhs, x0, tol, cg_budget(level.state_count()))
}

/// Solves the adjoint equation `K p = M_ss (y_d − y)` to relative
/// tolerance `tol`.
///
/// # Errors
///
/// As [`solve_state`].
pub fn solve_adjoint(level: &AssembledLevel, y: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    solve_adjoint_warm(level, y, None, tol)
}

/// [`solve_adjoint`] with an optional initial guess.
///
/// # Errors
///
/// As [`solve_state`].
pub fn solve_adjoint_warm(
    level: &AssembledLevel,
    y: &[f64],
    p0: Option<&[f64]>,
    tol: f64,
) -> Result<(Vec<f64>, SolveReport)> {
    check_state_len(level, y, "state vector")?;
    let diff: Vec<f64> = level.yd.iter().zip(y).map(|(d, yi)| d - yi).collect();
    let rhs = level.m_ss.spmv(&diff);
    let zeros;
    let x0 = match p0 {
        Some(v) => {
            check_state_len(level, v, "adjoint initial guess")?;
            v
        }
        None => {
            zeros = vec![0.0; level.state_count()];
            &zeros
        }
    };
    solve_spd_warm(&level.k, &rhs, x0, tol, cg_budget(level.state_count()))
}

/// A state/adjoint pair for a fixed control, with the solver reports.
#[derive(Debug, Clone)]
pub struct StateSolve {
    /// State `y = S_h(u + y_r)`.
    pub y: Vec<f64>,
    /// Adjoint `p = S_h*(y_d − y)`.
    pub p: Vec<f64>,
    /// CG report of the state solve.
    pub state_report: SolveReport,
    /// CG report of the adjoint solve.
    pub adjoint_report: SolveReport,
}

/// Solves state then adjoint for `u`, both to `tol`, with optional warm
/// starts.
///
/// # Errors
///
/// As [`solve_state`].
pub fn solve_state_adjoint_warm(
    level: &AssembledLevel,
    u: &[f64],
    y0: Option<&[f64]>,
    p0: Option<&[f64]>,
    tol: f64,
) -> Result<StateSolve> {
    let (y, state_report) = solve_state_warm(level, u, y0, tol)?;
    let (p, adjoint_report) = solve_adjoint_warm(level, &y, p0, tol)?;
    Ok(StateSolve {
        y,
        p,
        state_report,
        adjoint_report,
    })
}

/// Reduced objective `Ĵ(u) = ½‖y − y_d‖²_{M_ss} + (α/2)‖u‖²_{M_cc}` with
/// `y` from a state solve at tolerance `tol`.
///
/// # Errors
///
/// As [`solve_state`].
pub fn objective(level: &AssembledLevel, u: &[f64], tol: f64) -> Result<f64> {
    let (y, _) = solve_state(level, u, tol)?;
    let diff: Vec<f64> = y.iter().zip(&level.yd).map(|(yi, d)| yi - d).collect();
    let track = crate::fem::l2_inner(&level.m_ss, &diff, &diff)?;
    let reg = crate::fem::l2_inner(&level.m_cc, u, u)?;
    Ok(0.5 * track + 0.5 * level.alpha * reg)
}

/// Coefficient gradient `∇Ĵ(u) = α M_cc u − M_scᵀ p`, with the state and
/// adjoint solved at tolerance `tol/10`.
///
/// # Errors
///
/// As [`solve_state`].
pub fn gradient(level: &AssembledLevel, u: &[f64], tol: f64) -> Result<Vec<f64>> {
    let inner = tol / 10.0;
    let (y, _) = solve_state(level, u, inner)?;
    let (p, _) = solve_adjoint(level, &y, inner)?;
    Ok(gradient_from_adjoint(level, u, &p))
}

/// Assembles `α M_cc u − M_scᵀ p` from an already-computed adjoint.
#[must_use]
pub fn gradient_from_adjoint(level: &AssembledLevel, u: &[f64], p: &[f64]) -> Vec<f64> {
    let mut g = level.m_cc.spmv(u);
    for v in &mut g {
        *v *= level.alpha;
    }
    let mtp = level.m_sc.spmv_transpose(p);
    for (gi, t) in g.iter_mut().zip(&mtp) {
        *gi -= t;
    }
    g
}

/// L²-representer of the gradient, `α u − M_cc⁻¹ M_scᵀ p`, computed with
/// a CG mass solve (the mass matrix is uniformly well-conditioned).
///
/// # Errors
///
/// CG breakdown on the mass solve.
pub fn representer_gradient(level: &AssembledLevel, u: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    check_control_len(level, u, "control vector")?;
    check_state_len(level, p, "adjoint vector")?;
    let rhs = level.m_sc.spmv_transpose(p);
    let x0 = vec![0.0; rhs.len()];
    let (w, _) = solve_spd_warm(&level.m_cc, &rhs, &x0, 1e-13, cg_budget(rhs.len()))?;
    Ok(u.iter().zip(&w).map(|(ui, wi)| level.alpha * ui - wi).collect())
}

/// PMHSS-style right preconditioner for the 2×2 block system.
///
/// With `c = α+σ`, the similarity transform `S A T` with
/// `S = diag(I, −√c·I)`, `T = diag(I, c^{-1/2}·I)` turns
/// `A = [[M, cK], [K, −M]]` into `[[M, √c·K], [−√c·K, M]]` — the real
/// form of the complex operator `M − i√c·K`. Preconditioning that form
/// blockwise by `V = M + √c·K` (SPD) maps every generalized eigenvalue
/// `θ` of `(K, M)` to `(1 ± iθ′)/(1 + θ′)` with `θ′ = √c·θ > 0`, whose
/// modulus lies in `[1/√2, 1]` — a spectrum on a bounded arc away from
/// the origin, giving mesh-independent GMRES convergence.
///
/// Transported back through the similarity, the right preconditioner for
/// the *original* `A` collapses to `Q r = (V⁻¹ r₁, −V⁻¹ r₂)`.
///
/// Reference: Bai, Benzi & Chen, "Modified HSS iteration methods for a
/// class of complex symmetric linear systems", Computing 87 (2010).
struct PmhssPreconditioner<'a> {
    chol: &'a BandedCholesky,
    ns: usize,
}

impl Preconditioner for PmhssPreconditioner<'_> {
    fn apply(&self, r: &[f64], out: &mut [f64]) {
        let (r1, r2) = r.split_at(self.ns);
        let (o1, o2) = out.split_at_mut(self.ns);
        self.chol
            .solve_into(r1, o1)
            .expect("preconditioner dimensions fixed at construction");
        self.chol
            .solve_into(r2, o2)
            .expect("preconditioner dimensions fixed at construction");
        for v in o2.iter_mut() {
            *v = -*v;
        }
    }

    fn tag(&self) -> &'static str {
        "pmhss"
    }
}

enum BlockPath {
    /// Banded LU with partial pivoting on the RCM-permuted block matrix.
    Direct(DirectFactor),
    /// Restarted GMRES, right-preconditioned by the envelope Cholesky
    /// factorization of `V = M_ss + √c·K`.
    Pmhss(BandedCholesky),
}

/// Result of one inexact u-subproblem solve.
#[derive(Debug, Clone)]
pub struct SubproblemResult {
    /// Minimizer of the augmented Lagrangian in `u` (control dofs).
    pub u: Vec<f64>,
    /// High-accuracy state `ŷ` for `u` (from the certification re-solve).
    pub y: Vec<f64>,
    /// High-accuracy adjoint `p̂` for `u`.
    pub p: Vec<f64>,
    /// Certified `‖δ‖₂` of the stationarity residual.
    pub delta_norm: f64,
    /// Number of inner-tolerance tightenings that were needed.
    pub tightenings: usize,
    /// Aggregate inner-solver report: `iterations` counts all Krylov
    /// steps / factor applications across tightenings, `final_residual`
    /// is the certified `‖δ‖₂`.
    pub report: SolveReport,
}

/// Per-level u-subproblem solver with cached factorizations and warm
/// starts.
///
/// Construction assembles the block matrix once and factors either the
/// matrix itself (≤ [`DEFAULT_DIRECT_CAP`] unknowns) or the PMHSS
/// preconditioner `V = M_ss + √(α+σ)·K`. Successive [`solve`] calls
/// reuse the factorization and warm-start the Krylov iterations from the
/// previous solution, which is what makes late outer iterations cheap
/// once the iterates settle.
///
/// [`solve`]: SubproblemSolver::solve
pub struct SubproblemSolver {
    level: Arc<AssembledLevel>,
    sigma: f64,
    /// `c = α + σ`.
    c: f64,
    a_block: SparseMatrix,
    path: BlockPath,
    warm_block: Option<Vec<f64>>,
}

impl SubproblemSolver {
    /// Builds the solver for one level and penalty `σ > 0`.
    ///
    /// # Errors
    ///
    /// Nonpositive `σ`, a level without interior nodes, or factorization
    /// failure.
    pub fn new(level: Arc<AssembledLevel>, sigma: f64) -> Result<Self> {
        Self::with_direct_cap(level, sigma, DEFAULT_DIRECT_CAP)
    }

    /// As [`SubproblemSolver::new`] with an explicit direct-solver cap
    /// (used by tests to force the GMRES path on small systems).
    pub(crate) fn with_direct_cap(
        level: Arc<AssembledLevel>,
        sigma: f64,
        cap: usize,
    ) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "penalty σ = {sigma} must be positive and finite"
            )));
        }
        let ns = level.state_count();
        if ns == 0 {
            return Err(Error::invalid(
                "subproblem needs at least one interior node".to_string(),
            ));
        }
        let c = level.alpha + sigma;
        let a_block = build_block_matrix(&level, c)?;
        let path = if 2 * ns <= cap {
            BlockPath::Direct(DirectFactor::new(&a_block)?)
        } else {
            let v = build_pmhss_matrix(&level, c)?;
            BlockPath::Pmhss(BandedCholesky::new(&v)?)
        };
        Ok(SubproblemSolver {
            level,
            sigma,
            c,
            a_block,
            path,
            warm_block: None,
        })
    }

    /// The level this solver is bound to.
    #[must_use]
    pub fn level(&self) -> &Arc<AssembledLevel> {
        &self.level
    }

    /// The penalty σ the block system was assembled with.
    #[must_use]
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Inner solver in use: `"banded-lu+rcm"` or `"pmhss-gmres"`.
    #[must_use]
    pub fn method(&self) -> &'static str {
        match self.path {
            BlockPath::Direct(_) => "banded-lu+rcm",
            BlockPath::Pmhss(_) => "pmhss-gmres",
        }
    }

    /// Solves the u-subproblem for `(z, λ)` until the certified
    /// stationarity residual satisfies `‖δ‖₂ ≤ tol_xi`.
    ///
    /// # Errors
    ///
    /// Dimension mismatches, invalid `tol_xi`, inner-solver breakdowns,
    /// or failure to certify after [`MAX_TIGHTENINGS`] tightenings
    /// ([`Error::SubproblemFailure`]).
    pub fn solve(&mut self, z: &[f64], lambda: &[f64], tol_xi: f64) -> Result<SubproblemResult> {
        let level = self.level.clone();
        check_control_len(&level, z, "z")?;
        check_control_len(&level, lambda, "λ")?;
        if tol_xi <= 0.0 || !tol_xi.is_finite() {
            return Err(Error::invalid(format!(
                "certificate bound tol_xi = {tol_xi} must be positive and finite"
            )));
        }
        let n = level.control_count();
        let ns = level.state_count();
        let sigma = self.sigma;
        let c = self.c;

        // Closed-form boundary controls and the state-dof restrictions.
        let mut bnd_u = vec![0.0; n]; // u_B embedded, zero on interior
        let mut z_i = vec![0.0; ns];
        let mut lam_i = vec![0.0; ns];
        for i in 0..n {
            match level.dofs.state_of_node(i) {
                Some(s) => {
                    z_i[s] = z[i];
                    lam_i[s] = lambda[i];
                }
                None => bnd_u[i] = (sigma * z[i] - lambda[i]) / c,
            }
        }

        // rhs₁ = M_ss y_d − K (λ_I − σ z_I); rhs₂ = M_sb u_B + M_sc y_r.
        let w: Vec<f64> = lam_i
            .iter()
            .zip(&z_i)
            .map(|(l, zi)| l - sigma * zi)
            .collect();
        let kw = level.k.spmv(&w);
        let myd = level.m_ss.spmv(&level.yd);
        let src2: Vec<f64> = bnd_u.iter().zip(&level.yr).map(|(a, b)| a + b).collect();
        let rhs2 = level.m_sc.spmv(&src2);
        let mut rhs = Vec::with_capacity(2 * ns);
        rhs.extend(myd.iter().zip(&kw).map(|(a, b)| a - b));
        rhs.extend_from_slice(&rhs2);

        let mut tol = (tol_xi / 10.0).max(1e-13);
        let mut inner_total = 0usize;
        let mut x: Option<Vec<f64>> = None;
        let mut best_delta = f64::INFINITY;
        let mut last_inner_state = String::new();

        for tightening in 0..=MAX_TIGHTENINGS {
            // Candidate block solve at the current inner tolerance.
            let candidate = match &self.path {
                BlockPath::Direct(factor) => match &x {
                    None => {
                        let sol = factor.solve_refined(&self.a_block, &rhs)?;
                        inner_total += 2;
                        last_inner_state = "direct solve + 1 refinement".to_string();
                        sol
                    }
                    Some(prev) => {
                        // One more iterative-refinement pass.
                        let mut r = rhs.clone();
                        let ax = self.a_block.spmv(prev);
                        for (ri, a) in r.iter_mut().zip(&ax) {
                            *ri -= a;
                        }
                        let dx = factor.solve(&r)?;
                        inner_total += 1;
                        last_inner_state = format!("{} refinement passes", tightening + 1);
                        prev.iter().zip(&dx).map(|(a, b)| a + b).collect()
                    }
                },
                BlockPath::Pmhss(chol) => {
                    let precond = PmhssPreconditioner { chol, ns };
                    let opts = GmresOptions {
                        tol,
                        max_iter: 600,
                        restart: 60,
                    };
                    let x0 = x.as_deref().or(self.warm_block.as_deref());
                    let (sol, report) = gmres(&self.a_block, &rhs, x0, &precond, &opts)?;
                    inner_total += report.iterations;
                    last_inner_state = format!(
                        "gmres: {} iterations, residual {:.3e}, converged {}",
                        report.iterations, report.final_residual, report.converged
                    );
                    sol
                }
            };

            // Compose the full control vector.
            let mut u = bnd_u.clone();
            for s in 0..ns {
                u[level.dofs.node_of_state(s)] = candidate[ns + s];
            }

            // Independent certification re-solve. The block solution's
            // state part and the nodal identity p = (α+σ)u_I + λ_I − σz_I
            // are excellent initial guesses, so these CG solves are
            // nearly free whenever the block solve succeeded.
            let (y_hat, _) = solve_state_warm(&level, &u, Some(&candidate[..ns]), tol)?;
            let p0: Vec<f64> = (0..ns)
                .map(|s| c * candidate[ns + s] + lam_i[s] - sigma * z_i[s])
                .collect();
            let (p_hat, _) = solve_adjoint_warm(&level, &y_hat, Some(&p0), tol)?;

            // δ = α M_cc u − M_scᵀ p̂ + M_cc λ + σ M_cc (u − z).
            let t: Vec<f64> = (0..n)
                .map(|i| level.alpha * u[i] + lambda[i] + sigma * (u[i] - z[i]))
                .collect();
            let mut delta = level.m_cc.spmv(&t);
            let mtp = level.m_sc.spmv_transpose(&p_hat);
            for (d, v) in delta.iter_mut().zip(&mtp) {
                *d -= v;
            }
            let delta_norm = norm2(&delta);
            best_delta = best_delta.min(delta_norm);

            if delta_norm <= tol_xi {
                self.warm_block = Some(candidate);
                return Ok(SubproblemResult {
                    u,
                    y: y_hat,
                    p: p_hat,
                    delta_norm,
                    tightenings: tightening,
                    report: SolveReport {
                        iterations: inner_total,
                        final_residual: delta_norm,
                        converged: true,
                        method: self.method(),
                    },
                });
            }
            x = Some(candidate);
            tol = (tol / 10.0).max(1e-15);
        }

        Err(Error::SubproblemFailure {
            target: tol_xi,
            achieved: best_delta,
            tightenings: MAX_TIGHTENINGS,
            inner: last_inner_state,
        })
    }
}

/// One-shot convenience wrapper around [`SubproblemSolver`]: builds the
/// factorization, solves once, and returns the result.
///
/// # Errors
///
/// As [`SubproblemSolver::solve`].
pub fn solve_u_subproblem(
    level: &Arc<AssembledLevel>,
    z: &[f64],
    lambda: &[f64],
    sigma: f64,
    tol_xi: f64,
) -> Result<SubproblemResult> {
    SubproblemSolver::new(level.clone(), sigma)?.solve(z, lambda, tol_xi)
}

/// Assembles the 2×2 block matrix `[[M_ss, cK], [K, −M_ss]]`.
fn build_block_matrix(level: &AssembledLevel, c: f64) -> Result<SparseMatrix> {
    let ns = level.state_count();
    let nnz = 2 * (level.m_ss.nnz() + level.k.nnz());
    let mut builder = SparseBuilder::with_capacity(2 * ns, 2 * ns, nnz);
    for i in 0..ns {
        for (j, v) in level.m_ss.row(i) {
            builder.add(i, j, v);
            builder.add(ns + i, ns + j, -v);
        }
        for (j, v) in level.k.row(i) {
            builder.add(i, ns + j, c * v);
            builder.add(ns + i, j, v);
        }
    }
    builder.build()
}

/// Assembles the PMHSS preconditioner matrix `V = M_ss + √c·K` (SPD).
fn build_pmhss_matrix(level: &AssembledLevel, c: f64) -> Result<SparseMatrix> {
    let ns = level.state_count();
    let root = c.sqrt();
    let mut builder =
        SparseBuilder::with_capacity(ns, ns, level.m_ss.nnz() + level.k.nnz());
    for i in 0..ns {
        for (j, v) in level.m_ss.row(i) {
            builder.add(i, j, v);
        }
        for (j, v) in level.k.row(i) {
            builder.add(i, j, root * v);
        }
    }
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, interpolate_nodal, l2_error, l2_inner, m_norm};
    use crate::linalg::{dot, solve_direct};
    use crate::mesh::{unit_disk_mesh, unit_square_mesh, TriangleMesh};
    use crate::problems::{Domain, ProblemSpec, YdData};
    use std::f64::consts::PI;

    fn spec_with(
        domain: Domain,
        alpha: f64,
        y_d: fn(f64, f64) -> f64,
        y_r: fn(f64, f64) -> f64,
    ) -> ProblemSpec {
        ProblemSpec {
            name: "test",
            domain,
            alpha,
            bounds: (-10.0, 10.0),
            y_d: Arc::new(y_d),
            yd_data: YdData::Analytic,
            y_r: Arc::new(y_r),
            exact_u: None,
        }
    }

    fn assembled(mesh: &TriangleMesh, spec: &ProblemSpec) -> Arc<AssembledLevel> {
        Arc::new(assemble(mesh, spec).unwrap())
    }

    /// Deterministic pseudo-random vector for tests.
    fn wiggle(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).max(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s as f64 / u64::MAX as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn state_is_zero_when_u_cancels_yr() {
        let mesh = unit_square_mesh(8).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1.0, |_, _| 0.0, |_, _| 1.0);
        let level = assembled(&mesh, &spec);
        let u = vec![-1.0; level.control_count()];
        let (y, report) = solve_state(&level, &u, 1e-12).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn manufactured_poisson_solution_converges_quadratically() {
        // u + y_r = 2π² sin(πx₁) sin(πx₂) ⇒ y = sin(πx₁) sin(πx₂).
        let exact = |x: f64, y: f64| (PI * x).sin() * (PI * y).sin();
        let spec = spec_with(Domain::UnitSquare, 1.0, |_, _| 0.0, |_, _| 0.0);
        let mut errors = Vec::new();
        for n in [8usize, 16, 32] {
            let mesh = unit_square_mesh(n).unwrap();
            let level = assembled(&mesh, &spec);
            let u = interpolate_nodal(&|x, y| 2.0 * PI * PI * exact(x, y), &mesh).unwrap();
            let (y, report) = solve_state(&level, &u, 1e-12).unwrap();
            assert!(report.converged);
            let full = level.dofs.extend_from_state(&y);
            errors.push(l2_error(&full, &exact, &mesh).unwrap());
        }
        for w in errors.windows(2) {
            let eoc = (w[0] / w[1]).log2();
            assert!((1.85..=2.15).contains(&eoc), "EOC {eoc}, errors {errors:?}");
        }
    }

    #[test]
    fn state_residual_meets_requested_tolerance() {
        let mesh = unit_square_mesh(16).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1.0, |_, _| 0.0, |x, y| x - y);
        let level = assembled(&mesh, &spec);
        let u = wiggle(level.control_count(), 7);
        let tol = 1e-10;
        let (y, report) = solve_state(&level, &u, tol).unwrap();
        assert!(report.converged);
        let rhs = state_rhs(&level, &u);
        let ky = level.k.spmv(&y);
        let r: Vec<f64> = ky.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        assert!(norm2(&r) <= tol * norm2(&rhs) * 1.01);
    }

    #[test]
    fn adjoint_vanishes_when_state_matches_target() {
        let mesh = unit_square_mesh(8).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1.0, |x, y| x * y, |_, _| 0.0);
        let level = assembled(&mesh, &spec);
        let (p, report) = solve_adjoint(&level, &level.yd, 1e-12).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn solution_operator_is_self_adjoint_in_the_mass_pairing() {
        // ⟨S a, b⟩_{M_ss} = ⟨a, S* b⟩_{M_cc} with S* = M_cc⁻¹ M_scᵀ K⁻¹ M_ss.
        for (mesh, domain) in [
            (unit_square_mesh(16).unwrap(), Domain::UnitSquare),
            (unit_disk_mesh(2).unwrap(), Domain::UnitDisk),
        ] {
            let spec = spec_with(domain, 1.0, |_, _| 0.0, |_, _| 0.0);
            let level = assembled(&mesh, &spec);
            let a = wiggle(level.control_count(), 11);
            let b = wiggle(level.state_count(), 13);
            let (y, _) = solve_state(&level, &a, 1e-12).unwrap();
            let lhs = l2_inner(&level.m_ss, &y, &b).unwrap();
            // S* b via the adjoint solve and a mass solve.
            let mb = level.m_ss.spmv(&b);
            let x0 = vec![0.0; level.state_count()];
            let (w, _) =
                solve_spd_warm(&level.k, &mb, &x0, 1e-13, cg_budget(level.state_count()))
                    .unwrap();
            let msw = level.m_sc.spmv_transpose(&w);
            let x0c = vec![0.0; level.control_count()];
            let (sstar, _) =
                solve_spd_warm(&level.m_cc, &msw, &x0c, 1e-13, cg_budget(level.control_count()))
                    .unwrap();
            let rhs_pair = l2_inner(&level.m_cc, &a, &sstar).unwrap();
            let scale = lhs.abs().max(rhs_pair.abs()).max(1e-30);
            assert!(
                (lhs - rhs_pair).abs() / scale < 1e-9,
                "⟨Sa,b⟩ = {lhs}, ⟨a,S*b⟩ = {rhs_pair}"
            );
            // Same identity without the mass solve: aᵀ M_scᵀ w.
            assert!((lhs - dot(&a, &msw)).abs() / scale < 1e-9);
        }
    }

    #[test]
    fn objective_scales_exactly_in_alpha() {
        let mesh = unit_square_mesh(8).unwrap();
        let spec1 = spec_with(Domain::UnitSquare, 0.5, |x, _| x, |_, _| 0.0);
        let spec2 = ProblemSpec {
            alpha: 1.0,
            ..spec1.clone()
        };
        let l1 = assembled(&mesh, &spec1);
        let l2 = assembled(&mesh, &spec2);
        let u = wiggle(l1.control_count(), 3);
        let j1 = objective(&l1, &u, 1e-12).unwrap();
        let j2 = objective(&l2, &u, 1e-12).unwrap();
        let reg = l2_inner(&l1.m_cc, &u, &u).unwrap();
        assert!((j2 - j1 - 0.25 * reg).abs() < 1e-12);

        let zeros = vec![0.0; l1.control_count()];
        let spec0 = spec_with(Domain::UnitSquare, 1.0, |_, _| 0.0, |_, _| 0.0);
        let l0 = assembled(&mesh, &spec0);
        assert_eq!(objective(&l0, &zeros, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (mesh, domain) in [
            (unit_square_mesh(8).unwrap(), Domain::UnitSquare),
            (unit_square_mesh(16).unwrap(), Domain::UnitSquare),
            (unit_disk_mesh(1).unwrap(), Domain::UnitDisk),
        ] {
            let spec = spec_with(domain, 0.01, |x, y| x + y * y, |x, _| x);
            let level = assembled(&mesh, &spec);
            let u = wiggle(level.control_count(), 5);
            let d = wiggle(level.control_count(), 6);
            let g = gradient(&level, &u, 1e-11).unwrap();
            let gd = dot(&g, &d);
            let eps = 1e-5;
            let up: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
            let um: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a - eps * b).collect();
            let fd = (objective(&level, &up, 1e-12).unwrap()
                - objective(&level, &um, 1e-12).unwrap())
                / (2.0 * eps);
            assert!(
                (gd - fd).abs() / fd.abs().max(1e-12) < 1e-5,
                "gᵀd = {gd}, FD = {fd}"
            );
        }
    }

    #[test]
    fn gradient_is_zero_with_zero_data_and_control() {
        let mesh = unit_square_mesh(8).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1.0, |_, _| 0.0, |_, _| 0.0);
        let level = assembled(&mesh, &spec);
        let u = vec![0.0; level.control_count()];
        let g = gradient(&level, &u, 1e-12).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    fn subproblem_inputs(level: &AssembledLevel) -> (Vec<f64>, Vec<f64>) {
        let (a, b) = level.bounds;
        let z: Vec<f64> = wiggle(level.control_count(), 21)
            .iter()
            .map(|v| (0.5 * v).clamp(a, b))
            .collect();
        let lambda: Vec<f64> = wiggle(level.control_count(), 22)
            .iter()
            .map(|v| 0.1 * v)
            .collect();
        (z, lambda)
    }

    #[test]
    fn subproblem_certificate_holds_and_matches_independent_stationarity() {
        let mesh = unit_square_mesh(16).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1e-3, |x, y| {
            (PI * x).sin() * (PI * y).sin()
        }, |_, _| 0.0);
        let level = assembled(&mesh, &spec);
        let sigma = 0.1 * level.alpha;
        let (z, lambda) = subproblem_inputs(&level);
        let tol_xi = 1e-10;
        let result = solve_u_subproblem(&level, &z, &lambda, sigma, tol_xi).unwrap();
        assert!(result.delta_norm <= tol_xi, "δ = {}", result.delta_norm);

        // Independent stationarity check through the public gradient.
        let g = gradient(&level, &result.u, 1e-12).unwrap();
        let s: Vec<f64> = {
            let diff: Vec<f64> = result.u.iter().zip(&z).map(|(a, b)| a - b).collect();
            let ml = level.m_cc.spmv(&lambda);
            let md = level.m_cc.spmv(&diff);
            (0..level.control_count())
                .map(|i| g[i] + ml[i] + sigma * md[i])
                .collect()
        };
        assert!(
            norm2(&s) <= tol_xi + 1e-11,
            "independent stationarity residual {}",
            norm2(&s)
        );
    }

    #[test]
    fn subproblem_agrees_with_plain_direct_solve_of_the_block_system() {
        let mesh = unit_square_mesh(8).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1e-2, |x, _| x, |_, y| y);
        let level = assembled(&mesh, &spec);
        let sigma = 0.05;
        let c = level.alpha + sigma;
        let (z, lambda) = subproblem_inputs(&level);
        let result = solve_u_subproblem(&level, &z, &lambda, sigma, 1e-11).unwrap();

        // Rebuild the block system here and solve it densely.
        let ns = level.state_count();
        let n = level.control_count();
        let a_block = build_block_matrix(&level, c).unwrap();
        let mut bnd_u = vec![0.0; n];
        let mut z_i = vec![0.0; ns];
        let mut lam_i = vec![0.0; ns];
        for i in 0..n {
            match level.dofs.state_of_node(i) {
                Some(s) => {
                    z_i[s] = z[i];
                    lam_i[s] = lambda[i];
                }
                None => bnd_u[i] = (sigma * z[i] - lambda[i]) / c,
            }
        }
        let w: Vec<f64> = lam_i.iter().zip(&z_i).map(|(l, zi)| l - sigma * zi).collect();
        let kw = level.k.spmv(&w);
        let myd = level.m_ss.spmv(&level.yd);
        let src: Vec<f64> = bnd_u.iter().zip(&level.yr).map(|(a, b)| a + b).collect();
        let rhs2 = level.m_sc.spmv(&src);
        let mut rhs = Vec::with_capacity(2 * ns);
        rhs.extend(myd.iter().zip(&kw).map(|(a, b)| a - b));
        rhs.extend_from_slice(&rhs2);
        let x = solve_direct(&a_block, &rhs).unwrap();
        for s in 0..ns {
            let i = level.dofs.node_of_state(s);
            assert!(
                (result.u[i] - x[ns + s]).abs() < 1e-9,
                "u mismatch at node {i}"
            );
            assert!((result.y[s] - x[s]).abs() < 1e-9, "y mismatch at dof {s}");
        }
    }

    #[test]
    fn pmhss_path_matches_direct_path() {
        let mesh = unit_square_mesh(16).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1e-3, |x, y| x * y, |_, _| 0.0);
        let level = assembled(&mesh, &spec);
        let sigma = 0.1 * level.alpha;
        let (z, lambda) = subproblem_inputs(&level);
        let tol_xi = 1e-10;
        let mut direct = SubproblemSolver::new(level.clone(), sigma).unwrap();
        assert_eq!(direct.method(), "banded-lu+rcm");
        let mut krylov = SubproblemSolver::with_direct_cap(level.clone(), sigma, 8).unwrap();
        assert_eq!(krylov.method(), "pmhss-gmres");
        let rd = direct.solve(&z, &lambda, tol_xi).unwrap();
        let rk = krylov.solve(&z, &lambda, tol_xi).unwrap();
        let diff: Vec<f64> = rd.u.iter().zip(&rk.u).map(|(a, b)| a - b).collect();
        assert!(
            m_norm(&level.m_cc, &diff).unwrap() < 1e-8,
            "paths disagree by {}",
            m_norm(&level.m_cc, &diff).unwrap()
        );
        assert!(rk.delta_norm <= tol_xi);
    }

    #[test]
    fn large_sigma_pulls_u_to_z() {
        let mesh = unit_square_mesh(8).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1e-3, |x, y| x + y, |_, _| 0.0);
        let level = assembled(&mesh, &spec);
        let z: Vec<f64> = wiggle(level.control_count(), 31)
            .iter()
            .map(|v| 0.3 * v)
            .collect();
        let lambda = vec![0.0; level.control_count()];
        let mut gaps = Vec::new();
        for sigma in [1e2, 1e4, 1e6] {
            let r = solve_u_subproblem(&level, &z, &lambda, sigma, 1e-9).unwrap();
            let diff: Vec<f64> = r.u.iter().zip(&z).map(|(a, b)| a - b).collect();
            gaps.push(m_norm(&level.m_cc, &diff).unwrap());
        }
        assert!(gaps[1] < 0.05 * gaps[0], "gaps {gaps:?}");
        assert!(gaps[2] < 0.05 * gaps[1], "gaps {gaps:?}");
    }

    #[test]
    fn subproblem_solver_is_deterministic_and_reuses_warm_state() {
        let mesh = unit_square_mesh(16).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1e-3, |x, y| x - y, |_, _| 0.0);
        let level = assembled(&mesh, &spec);
        let (z, lambda) = subproblem_inputs(&level);
        let mut s1 = SubproblemSolver::with_direct_cap(level.clone(), 1e-4, 8).unwrap();
        let r1 = s1.solve(&z, &lambda, 1e-9).unwrap();
        let r2 = s1.solve(&z, &lambda, 1e-9).unwrap();
        assert!(r2.report.iterations <= r1.report.iterations);
        // A fresh solver reproduces the first run bit for bit.
        let mut s2 = SubproblemSolver::with_direct_cap(level, 1e-4, 8).unwrap();
        let r3 = s2.solve(&z, &lambda, 1e-9).unwrap();
        assert_eq!(r1.u, r3.u);
    }

    #[test]
    fn subproblem_rejects_invalid_inputs() {
        let mesh = unit_square_mesh(4).unwrap();
        let spec = spec_with(Domain::UnitSquare, 1.0, |_, _| 0.0, |_, _| 0.0);
        let level = assembled(&mesh, &spec);
        let good = vec![0.0; level.control_count()];
        assert!(solve_u_subproblem(&level, &good, &good, -1.0, 1e-8).is_err());
        assert!(solve_u_subproblem(&level, &good, &good, 1.0, 0.0).is_err());
        assert!(solve_u_subproblem(&level, &good[1..], &good, 1.0, 1e-8).is_err());

        // No interior nodes at all.
        let tiny = unit_square_mesh(1).unwrap();
        let tiny_level = assembled(&tiny, &spec);
        let tz = vec![0.0; tiny_level.control_count()];
        assert!(solve_u_subproblem(&tiny_level, &tz, &tz, 1.0, 1e-8).is_err());
    }

    #[test]
    fn representer_gradient_matches_weighted_gradient() {
        let mesh = unit_square_mesh(8).unwrap();
        let spec = spec_with(Domain::UnitSquare, 0.01, |x, y| x * y, |_, _| 0.0);
        let level = assembled(&mesh, &spec);
        let u = wiggle(level.control_count(), 9);
        let sol = solve_state_adjoint_warm(&level, &u, None, None, 1e-13).unwrap();
        let g = gradient_from_adjoint(&level, &u, &sol.p);
        let rep = representer_gradient(&level, &u, &sol.p).unwrap();
        // M_cc · rep = g by definition.
        let mrep = level.m_cc.spmv(&rep);
        let diff: Vec<f64> = mrep.iter().zip(&g).map(|(a, b)| a - b).collect();
        assert!(norm2(&diff) < 1e-10 * norm2(&g).max(1.0));
    }
}
