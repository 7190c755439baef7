//! Multilevel inexact ADMM for box-constrained elliptic optimal control.
//!
//! This crate solves the tracking-type optimal control problem
//!
//! ```text
//!   minimize   1/2 ‖y − y_d‖²_{L²(Ω)} + α/2 ‖u‖²_{L²(Ω)}
//!   subject to −Δy = u + y_r in Ω,   y = 0 on ∂Ω,
//!              a ≤ u ≤ b a.e. in Ω,
//! ```
//!
//! discretized with continuous piecewise-linear (P1) finite elements on
//! nested triangulations. Splitting the control constraint off with a copy
//! variable (`u = z`) turns the reduced problem into a two-block ADMM whose
//! expensive block ­— the `u`-subproblem — is a saddle-point linear system.
//! Three drivers share that machinery:
//!
//! - **classical**: exact subproblem solves on a fixed mesh, unit multiplier
//!   step;
//! - **inexact**: subproblem solves certified only up to a summable error
//!   schedule ξ_k = c/(k+1)², fixed mesh, over-relaxed multiplier step
//!   τ = 1.618;
//! - **multilevel**: the inexact iteration additionally starts on a coarse
//!   triangulation and refines the working mesh once per iteration until the
//!   target level is reached, carrying `z` and the multiplier `λ` upward by
//!   nodal interpolation. Early iterations therefore cost almost nothing,
//!   and the fine mesh only ever sees an almost-converged iterate.
//!
//! Termination is by a relative Karush–Kuhn–Tucker residual `η < eta_tol`
//! (five components: state equation, consensus gap, adjoint equation,
//! gradient stationarity, complementarity). A squared KKT residual `R` with
//! an O(1/k) guarantee is logged for diagnostics.
//!
//! # Module map
//!
//! - [`mesh`] — triangulations of the unit square and unit disk, uniform
//!   refinement, nested hierarchies with prolongation operators;
//! - [`linalg`] — CSR sparse matrices, conjugate gradients, restarted GMRES,
//!   banded direct factorization;
//! - [`fem`] — P1 assembly (stiffness/mass), dof bookkeeping, nodal
//!   interpolation and quadrature-based L² errors;
//! - [`pdeop`] — state/adjoint solves, reduced objective and gradient, and
//!   the inexact `u`-subproblem with its error certificate;
//! - [`admm`] — the three drivers, KKT residuals, iteration logging;
//! - [`problems`] — the two benchmark problems (unit disk; unit square with
//!   a manufactured exact control) and reference solutions;
//! - [`cli`] — experiment configuration, the EOC table, CSV/JSON emission;
//! - [`oracle`] — small dense reference implementations (projected-KKT
//!   active set, dense subproblem solve) used to validate the sparse path.
//!
//! # Example
//!
//! ```
//! use madmm::admm::{run_madmm, Algorithm, SolverConfig, Termination};
//! use madmm::problems::{example2, ProblemInstance};
//!
//! // Manufactured unit-square problem; reference data on level 5 (n = 32).
//! let instance = ProblemInstance::new(example2(5).unwrap(), 3).unwrap();
//! let config = SolverConfig::new(Algorithm::Madmm);
//! let record = run_madmm(&instance, &config, 3).unwrap();
//! assert_eq!(record.termination, Termination::Tolerance);
//! ```

pub mod admm;
pub mod cli;
pub mod error;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod oracle;
pub mod pdeop;
pub mod problems;

pub use error::{Error, Result};
