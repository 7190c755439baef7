//! Dense reference solvers ("oracles") for small problems.
//!
//! Everything here deliberately avoids the crate's sparse iterative
//! machinery: systems are formed densely and factored with LU so that the
//! results are an *independent* cross-check for the ADMM drivers and the
//! inexact subproblem solver. Sizes are expected to stay in the
//! low thousands of unknowns; none of these routines is meant for
//! production meshes.
//!
//! # Contents
//!
//! * [`solve_projected_kkt`] — the box-constrained optimum by a
//!   primal-dual active-set iteration (Bergounioux–Ito–Kunisch;
//!   Hintermüller–Ito–Kunisch interpretation as semismooth Newton), each
//!   step a dense solve of the equality-constrained KKT system.
//! * [`dense_subproblem_minimizer`] — the unconstrained minimizer of the
//!   augmented Lagrangian in `u` through the condensed operator
//!   `H = (α+σ) M_cc + Nᵀ M_ss N`, `N = K⁻¹ M_sc`.
//! * [`dense_unconstrained_minimizer`] — the σ = 0, λ = 0, z = 0 special
//!   case: the minimizer of the reduced tracking objective without box
//!   constraints.
//!
//! # Optimality conditions
//!
//! Because `M_scᵀ p = M_cc E p` (`E` = zero-extension of a state vector
//! to all nodes), the first-order conditions of the box-constrained
//! problem reduce to the *nodal* projection identity
//!
//! ```text
//! u = Π_{[a,b]}(E p / α),   K y = M_sc (u + y_r),   K p = M_ss (y_d − y),
//! ```
//!
//! with multiplier `λ = E p − α u` satisfying the componentwise sign
//! conditions `λᵢ ≤ 0` where `uᵢ = a`, `λᵢ ≥ 0` where `uᵢ = b`, `λᵢ = 0`
//! otherwise. This is the same sign convention the ADMM drivers use, so
//! oracle multipliers compare directly against ADMM multipliers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::AssembledLevel;
use crate::linalg::SparseMatrix;

/// Hard cap on active-set iterations; the iteration has finite
/// termination for this problem class, so hitting the cap signals a bug
/// or degenerate data.
const MAX_ACTIVE_SET_ITERATIONS: usize = 200;

/// A KKT point of the box-constrained problem with its active sets.
#[derive(Debug, Clone)]
pub struct KktPoint {
    /// Optimal control (control dofs).
    pub u: Vec<f64>,
    /// Associated state (state dofs).
    pub y: Vec<f64>,
    /// Associated adjoint (state dofs).
    pub p: Vec<f64>,
    /// Box multiplier `λ = E p − α u` (control dofs).
    pub lambda: Vec<f64>,
    /// Nodes where the lower bound is active.
    pub active_lower: Vec<bool>,
    /// Nodes where the upper bound is active.
    pub active_upper: Vec<bool>,
    /// Active-set iterations until the sets stopped changing.
    pub iterations: usize,
}

fn dense_of(m: &SparseMatrix) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for (c, v) in m.row(r) {
            d[(r, c)] = v;
        }
    }
    d
}

fn lu_solve(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::SingularMatrix(format!("dense {what} system is singular")))
}

/// Solves the box-constrained problem by a primal-dual active-set
/// iteration with dense inner solves.
///
/// Each pass fixes `u = a` / `u = b` on the current active sets, solves
/// the equality-constrained KKT system in `(y, p, u_inactive)` densely,
/// recovers `λ = E p − α u`, and re-estimates the active sets from the
/// indicator `E p / α` (the active-set rule with weight `c = α`). The
/// iteration stops when the sets repeat; the returned point satisfies
/// feasibility and the multiplier sign conditions to rounding.
///
/// # Errors
///
/// Singular inner systems or failure of the sets to settle within
/// [`MAX_ACTIVE_SET_ITERATIONS`].
pub fn solve_projected_kkt(level: &AssembledLevel) -> Result<KktPoint> {
    let ns = level.state_count();
    let n = level.control_count();
    let (lo, hi) = level.bounds;
    let alpha = level.alpha;
    let kd = dense_of(&level.k);
    let mss = dense_of(&level.m_ss);
    let msc = dense_of(&level.m_sc);
    let msc_yr = {
        let v = level.m_sc.spmv(&level.yr);
        DVector::from_vec(v)
    };
    let mss_yd = {
        let v = level.m_ss.spmv(&level.yd);
        DVector::from_vec(v)
    };

    let size = 2 * ns + n;
    let mut active_lower = vec![false; n];
    let mut active_upper = vec![false; n];

    for iteration in 1..=MAX_ACTIVE_SET_ITERATIONS {
        let mut a = DMatrix::<f64>::zeros(size, size);
        let mut rhs = DVector::<f64>::zeros(size);
        // State rows: K y − M_sc u = M_sc y_r.
        a.view_mut((0, 0), (ns, ns)).copy_from(&kd);
        a.view_mut((0, 2 * ns), (ns, n)).copy_from(&(-&msc));
        rhs.rows_mut(0, ns).copy_from(&msc_yr);
        // Adjoint rows: M_ss y + K p = M_ss y_d.
        a.view_mut((ns, 0), (ns, ns)).copy_from(&mss);
        a.view_mut((ns, ns), (ns, ns)).copy_from(&kd);
        rhs.rows_mut(ns, ns).copy_from(&mss_yd);
        // Control rows: fixed on active sets, α u = E p on the rest.
        for i in 0..n {
            let r = 2 * ns + i;
            if active_lower[i] {
                a[(r, r)] = 1.0;
                rhs[r] = lo;
            } else if active_upper[i] {
                a[(r, r)] = 1.0;
                rhs[r] = hi;
            } else {
                a[(r, r)] = alpha;
                if let Some(s) = level.dofs.state_of_node(i) {
                    a[(r, ns + s)] = -1.0;
                }
            }
        }
        let x = lu_solve(a, rhs, "projected-KKT")?;

        let y: Vec<f64> = x.rows(0, ns).iter().copied().collect();
        let p: Vec<f64> = x.rows(ns, ns).iter().copied().collect();
        let u: Vec<f64> = x.rows(2 * ns, n).iter().copied().collect();
        // Indicator w = E p / α and multiplier λ = E p − α u.
        let mut lambda = vec![0.0; n];
        let mut next_lower = vec![false; n];
        let mut next_upper = vec![false; n];
        for i in 0..n {
            let ep = level.dofs.state_of_node(i).map_or(0.0, |s| p[s]);
            lambda[i] = ep - alpha * u[i];
            let w = ep / alpha;
            next_lower[i] = w < lo;
            next_upper[i] = w > hi;
        }
        if next_lower == active_lower && next_upper == active_upper {
            return Ok(KktPoint {
                u,
                y,
                p,
                lambda,
                active_lower,
                active_upper,
                iterations: iteration,
            });
        }
        active_lower = next_lower;
        active_upper = next_upper;
    }
    Err(Error::invalid(format!(
        "active-set iteration did not settle within {MAX_ACTIVE_SET_ITERATIONS} passes"
    )))
}

/// Dense unconstrained minimizer of the augmented Lagrangian in `u`:
/// solves `[(α+σ) M_cc + Nᵀ M_ss N] u = Nᵀ M_ss (y_d − N y_r) − M_cc λ + σ M_cc z`
/// with `N = K⁻¹ M_sc` formed explicitly.
///
/// `σ = 0` is allowed (plain reduced objective plus a linear multiplier
/// term).
///
/// # Errors
///
/// Dimension mismatches, negative `σ`, singular dense systems.
pub fn dense_subproblem_minimizer(
    level: &AssembledLevel,
    z: &[f64],
    lambda: &[f64],
    sigma: f64,
) -> Result<Vec<f64>> {
    let n = level.control_count();
    if z.len() != n || lambda.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "dense subproblem inputs: z has {}, λ has {}, level has {} control dofs",
            z.len(),
            lambda.len(),
            n
        )));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "penalty σ = {sigma} must be nonnegative and finite"
        )));
    }
    let kd = dense_of(&level.k);
    let msc = dense_of(&level.m_sc);
    let mss = dense_of(&level.m_ss);
    let mcc = dense_of(&level.m_cc);
    let k_lu = kd.lu();
    let nmat = k_lu
        .solve(&msc)
        .ok_or_else(|| Error::SingularMatrix("dense stiffness matrix is singular".to_string()))?;
    let h = (level.alpha + sigma) * &mcc + nmat.transpose() * &mss * &nmat;

    let yr = DVector::from_vec(level.yr.clone());
    let yd = DVector::from_vec(level.yd.clone());
    let zv = DVector::from_vec(z.to_vec());
    let lv = DVector::from_vec(lambda.to_vec());
    let track = &yd - &nmat * &yr;
    let rhs = nmat.transpose() * &mss * track - &mcc * lv + sigma * (&mcc * zv);
    let u = lu_solve(h, rhs, "condensed subproblem")?;
    Ok(u.iter().copied().collect())
}

/// Dense minimizer of the reduced objective without box constraints
/// (`σ = 0`, `λ = 0`, `z = 0` case of [`dense_subproblem_minimizer`]).
///
/// # Errors
///
/// As [`dense_subproblem_minimizer`].
pub fn dense_unconstrained_minimizer(level: &AssembledLevel) -> Result<Vec<f64>> {
    let n = level.control_count();
    dense_subproblem_minimizer(level, &vec![0.0; n], &vec![0.0; n], 0.0)
}
