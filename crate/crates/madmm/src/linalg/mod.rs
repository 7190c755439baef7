//! Sparse linear algebra: CSR storage and the three solver families used by
//! the drivers.
//!
//! Everything here is deterministic: identical inputs produce bitwise
//! identical outputs within one build. No randomized pivoting, no
//! parallel reductions.
//!
//! # Solvers
//!
//! - [`solve_spd`] — conjugate gradients for symmetric positive definite
//!   systems (state/adjoint/mass solves). Monotone energy-norm error;
//!   supports warm starts via [`solve_spd_warm`].
//! - [`solve_block_nonsym`] — the public entry point for the nonsymmetric
//!   saddle-point system of the control subproblem. Dispatches to a banded
//!   direct factorization up to [`DEFAULT_DIRECT_CAP`] unknowns and to
//!   restarted GMRES with mass-lumped diagonal preconditioning above it.
//!   Callers needing a custom preconditioner or warm start use [`gmres`]
//!   directly.
//! - [`solve_direct`] / [`DirectFactor`] — reverse-Cuthill–McKee reordering
//!   plus banded LU with partial pivoting and one step of iterative
//!   refinement. Serves as the small-scale oracle and the sub-cap fallback.
//!
//! Tolerances are relative to ‖b‖₂ with an absolute floor of
//! [`ABSOLUTE_RESIDUAL_FLOOR`]; a zero right-hand side returns the zero
//! solution in zero iterations.
//!
//! # References
//!
//! - Hestenes & Stiefel (1952), "Methods of conjugate gradients for solving
//!   linear systems", J. Res. NBS 49.
//! - Saad & Schultz (1986), "GMRES: a generalized minimal residual
//!   algorithm", SIAM J. Sci. Stat. Comput. 7.
//! - Golub & Van Loan, "Matrix Computations" (4th ed.), §4.5 (band
//!   factorizations), §11.5 (Krylov methods).

mod banded;
mod cg;
mod gmres;
mod sparse;

pub use banded::{BandedCholesky, DirectFactor};
pub use cg::{solve_spd, solve_spd_warm};
pub use gmres::{gmres, GmresOptions, IdentityPreconditioner, JacobiPreconditioner, Preconditioner};
pub use sparse::{SparseBuilder, SparseMatrix};

use crate::error::{Error, Result};

/// Absolute residual floor: a solve is accepted once ‖b − Ax‖₂ falls below
/// `max(tol·‖b‖₂, ABSOLUTE_RESIDUAL_FLOOR)`.
pub const ABSOLUTE_RESIDUAL_FLOOR: f64 = 1e-14;

/// Largest dimension for which [`solve_block_nonsym`] (and the subproblem
/// machinery) uses the banded direct factorization instead of GMRES.
pub const DEFAULT_DIRECT_CAP: usize = 20_000;

/// Default GMRES restart length.
pub const DEFAULT_GMRES_RESTART: usize = 60;

/// Outcome of a linear solve.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SolveReport {
    /// Iterations performed (0 for a direct solve or a zero right-hand side).
    pub iterations: usize,
    /// True residual ‖b − Ax‖₂, recomputed from the returned solution.
    pub final_residual: f64,
    /// Whether the requested tolerance was met.
    pub converged: bool,
    /// Human-readable method tag, e.g. `"cg"`, `"gmres+jacobi"`,
    /// `"banded-lu+rcm"`.
    pub method: &'static str,
}

/// Dot product. Panics on length mismatch (callers validate shapes first).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm ‖v‖₂.
#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y ← y + alpha·x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Checks that every entry of `v` is finite.
pub(crate) fn require_finite(v: &[f64], what: &str) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} has non-finite entry at index {i}")));
    }
    Ok(())
}

/// Residual `b − A·x`, freshly computed.
pub(crate) fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut r = a.spmv(x);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    r
}

/// Solves the nonsymmetric saddle-point system `A x = b` of the control
/// subproblem.
///
/// Dispatch: dimensions up to [`DEFAULT_DIRECT_CAP`] go to the banded direct
/// factorization (method `"banded-lu+rcm"`); larger systems run restarted
/// GMRES (restart [`DEFAULT_GMRES_RESTART`]) with mass-lumped diagonal
/// (Jacobi, absolute values) preconditioning. On return,
/// `report.final_residual` is the true residual; `converged` states whether
/// `‖b − Ax‖₂ ≤ max(tol·‖b‖₂, 1e-14)` holds.
///
/// # Errors
///
/// Dimension mismatches, non-finite inputs, and singular matrices on the
/// direct path.
pub fn solve_block_nonsym(
    a: &SparseMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "block system must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() <= DEFAULT_DIRECT_CAP {
        let factor = DirectFactor::new(a)?;
        let x = factor.solve_refined(a, b)?;
        let res = norm2(&residual(a, &x, b));
        let target = (tol * norm2(b)).max(ABSOLUTE_RESIDUAL_FLOOR);
        return Ok((
            x,
            SolveReport {
                iterations: 0,
                final_residual: res,
                converged: res <= target,
                method: "banded-lu+rcm",
            },
        ));
    }
    let precond = JacobiPreconditioner::from_matrix(a)?;
    let opts = GmresOptions {
        tol,
        max_iter,
        restart: DEFAULT_GMRES_RESTART,
    };
    let (x, mut report) = gmres(a, b, None, &precond, &opts)?;
    report.method = "gmres+jacobi";
    Ok((x, report))
}

/// One-shot direct solve for small systems; the testing oracle.
///
/// Refuses dimensions above [`DEFAULT_DIRECT_CAP`] — large systems must go
/// through the Krylov entry points, which fail soft instead of exhausting
/// memory on a wide band.
///
/// # Errors
///
/// Dimension over the cap, singular matrices, non-finite input.
pub fn solve_direct(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.nrows() > DEFAULT_DIRECT_CAP {
        return Err(Error::invalid(format!(
            "solve_direct refuses dimension {} > cap {DEFAULT_DIRECT_CAP}",
            a.nrows()
        )));
    }
    let factor = DirectFactor::new(a)?;
    factor.solve_refined(a, b)
}
