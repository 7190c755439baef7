//! ADMM drivers for the box-constrained control problem.
//!
//! # The iteration
//!
//! All three drivers share one loop on the splitting `u = z`:
//!
//! ```text
//! u^{k+1} = argmin_u Ĵ(u) + ⟨λ^k, u − z^k⟩_M + (σ/2)‖u − z^k‖²_M   (inexact)
//! z^{k+1} = Π_{[a,b]}(u^{k+1} + λ^k/σ)
//! λ^{k+1} = λ^k + τσ (u^{k+1} − z^{k+1})
//! ```
//!
//! and differ only in where the iterates live and how accurately the
//! u-subproblem is solved:
//!
//! * [`run_classical`] — fixed mesh, subproblem solved essentially
//!   exactly (certificate `‖δ‖₂ ≤ 1e-12`), step `τ = 1`.
//! * [`run_inexact`] — fixed mesh, subproblem solved to the summable
//!   schedule `‖δ‖₂ ≤ ξ_{k+1} = c/(k+1)²`, step `τ = 1.618`.
//! * [`run_madmm`] — multi-level: iterations start on a coarse mesh and
//!   the active level follows [`default_level_schedule`] (one refinement
//!   per iteration until the target); on each level increase `z` and `λ`
//!   are carried up by nodal interpolation. Early iterations are cheap,
//!   and by the time the target level is reached the iterates — and all
//!   warm starts — are already close, which is where the wall-clock win
//!   over the fixed-mesh drivers comes from.
//!
//! # Termination
//!
//! The loop stops when `η = max(η₁,…,η₅) < eta_tol` (and, for the
//! multi-level driver, the active level equals the target), or at
//! `max_iter`. The η's are normalized KKT residuals evaluated with
//! *fresh* state/adjoint solves at tolerance `0.1·eta_tol`, so
//! termination is never fooled by inner-solver error; see
//! [`kkt_residuals`].
//!
//! # Diagnostics
//!
//! Each iteration also logs `R`, a squared KKT-residual functional whose
//! running minimum is expected to decay like o(1/k); acceptance checks
//! monitor `k·min_{i≤k} R` empirically.

use std::fmt;
use std::io::Write as IoWrite;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{l2_inner, AssembledLevel};
use crate::linalg::norm2;
use crate::pdeop::{self, SubproblemSolver};
use crate::problems::ProblemInstance;

/// Exclusive upper limit for the multiplier step length τ (just above
/// the golden ratio (1+√5)/2, the classical ADMM stability bound).
pub const TAU_LIMIT: f64 = 1.6181;

/// Certificate bound used for the "exact" subproblems of the classical
/// driver.
pub const CLASSICAL_SUBPROBLEM_TOL: f64 = 1e-12;

/// Default coarsest level of the multi-level schedule (capped at the
/// target level for small targets).
pub const DEFAULT_START_LEVEL: u32 = 4;

/// Which driver a configuration belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Fixed mesh, near-exact subproblems, τ = 1.
    Classical,
    /// Fixed mesh, ξ-schedule subproblems, τ = 1.618.
    Inexact,
    /// Multi-level with ξ-schedule subproblems, τ = 1.618.
    Madmm,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Classical => "classical",
            Algorithm::Inexact => "inexact",
            Algorithm::Madmm => "madmm",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classical" => Ok(Algorithm::Classical),
            "inexact" => Ok(Algorithm::Inexact),
            "madmm" => Ok(Algorithm::Madmm),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected classical, inexact, or madmm)"
            ))),
        }
    }
}

/// Driver parameters. `None` fields fall back to per-algorithm defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Driver selector.
    pub algorithm: Algorithm,
    /// Penalty σ; default `0.1·α`.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Multiplier step τ ∈ (0, [`TAU_LIMIT`]); default 1.618
    /// (classical: 1.0).
    #[serde(default)]
    pub tau: Option<f64>,
    /// Termination tolerance on η.
    pub eta_tol: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Scale `c` of the certificate schedule `ξ_{k+1} = c/(k+1)²`.
    pub xi_scale: f64,
    /// Coarsest level of the multi-level schedule; default
    /// `min(`[`DEFAULT_START_LEVEL`]`, target)`. Ignored by the
    /// fixed-mesh drivers.
    #[serde(default)]
    pub start_level: Option<u32>,
}

impl SolverConfig {
    /// Defaults: `eta_tol = 1e-6`, `max_iter = 500`, `xi_scale = 1e-3`,
    /// σ/τ/start level resolved per algorithm at run time.
    #[must_use]
    pub fn new(algorithm: Algorithm) -> Self {
        SolverConfig {
            algorithm,
            sigma: None,
            tau: None,
            eta_tol: 1e-6,
            max_iter: 500,
            xi_scale: 1e-3,
            start_level: None,
        }
    }

    /// The penalty actually used for a problem with Tikhonov weight α.
    #[must_use]
    pub fn effective_sigma(&self, alpha: f64) -> f64 {
        self.sigma.unwrap_or(0.1 * alpha)
    }

    /// The step length actually used.
    #[must_use]
    pub fn effective_tau(&self) -> f64 {
        self.tau.unwrap_or(match self.algorithm {
            Algorithm::Classical => 1.0,
            Algorithm::Inexact | Algorithm::Madmm => 1.618,
        })
    }

    /// Certificate bound for iteration `k` (0-based): `ξ_{k+1} = c/(k+1)²`,
    /// a summable schedule (Σ ξ < c·π²/6).
    #[must_use]
    pub fn xi(&self, k: usize) -> f64 {
        self.xi_scale / (((k + 1) * (k + 1)) as f64)
    }

    /// Checks the parameter ranges against a problem's α.
    ///
    /// # Errors
    ///
    /// Any parameter outside its documented range.
    pub fn validate(&self, alpha: f64) -> Result<()> {
        let sigma = self.effective_sigma(alpha);
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::invalid(format!("σ = {sigma} must be positive")));
        }
        let tau = self.effective_tau();
        if !(tau > 0.0 && tau < TAU_LIMIT) {
            return Err(Error::invalid(format!(
                "τ = {tau} must lie in (0, {TAU_LIMIT})"
            )));
        }
        if self.eta_tol <= 0.0 || !self.eta_tol.is_finite() {
            return Err(Error::invalid(format!(
                "eta_tol = {} must be positive",
                self.eta_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1".to_string()));
        }
        if self.xi_scale <= 0.0 || !self.xi_scale.is_finite() {
            return Err(Error::invalid(format!(
                "xi_scale = {} must be positive",
                self.xi_scale
            )));
        }
        Ok(())
    }
}

/// The active mesh level of the multi-level driver at iteration `k`:
/// `min(start + k, target)` — one refinement per iteration, then hold.
#[must_use]
pub fn default_level_schedule(k: usize, start_level: u32, target_level: u32) -> u32 {
    let stepped = start_level.saturating_add(k.min(u32::MAX as usize) as u32);
    stepped.min(target_level)
}

/// One ADMM iterate with its derived state and adjoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterateState {
    /// Mesh level the vectors live on.
    pub level: u32,
    /// Control iterate (control dofs).
    pub u: Vec<f64>,
    /// Splitting variable, always box-feasible (control dofs).
    pub z: Vec<f64>,
    /// Multiplier (control dofs).
    pub lambda: Vec<f64>,
    /// State for `u` (state dofs).
    pub y: Vec<f64>,
    /// Adjoint for `y` (state dofs).
    pub p: Vec<f64>,
    /// Last certified subproblem residual `‖δ‖₂`.
    pub delta_norm: f64,
}

/// Normalized KKT residuals of one iterate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualReport {
    /// State-equation residual `‖Ky − M_sc u − M_sc y_r‖/(1+‖M_sc y_r‖)`.
    pub eta1: f64,
    /// Feasibility residual `‖M_cc(u−z)‖/(1+‖u‖)`.
    pub eta2: f64,
    /// Adjoint-equation residual `‖M_ss(y−y_d) + Kp‖/(1+‖M_ss y_d‖)`.
    pub eta3: f64,
    /// Gradient residual `‖αM_cc u − M_scᵀp + M_cc λ‖/(1+‖u‖)`.
    pub eta4: f64,
    /// Complementarity residual `‖z − Π_{[a,b]}(z + M_cc λ)‖/(1+‖z‖)`.
    pub eta5: f64,
    /// `max(η₁,…,η₅)`; drives termination.
    pub eta: f64,
    /// The mass-free complementarity variant
    /// `‖z − Π_{[a,b]}(z + λ)‖/(1+‖z‖)`, logged for comparison (the
    /// mass-weighted η₅ above is the one used in `eta`).
    pub eta5_unweighted: f64,
    /// Squared KKT residual functional
    /// `R = ‖ĝ(u)+λ₋‖²_M + dist²_M(0, −λ₋+∂δ_box(z)) + ‖u−z‖²_M`
    /// with the *previous* multiplier λ₋ and the L²-representer ĝ.
    #[serde(rename = "R")]
    pub r: f64,
}

/// Projection step: `z = Π_{[a,b]}(u + λ/σ)` componentwise.
///
/// # Panics
///
/// Mismatched vector lengths (programming error).
#[must_use]
pub fn z_update(u: &[f64], lambda: &[f64], sigma: f64, bounds: (f64, f64)) -> Vec<f64> {
    assert_eq!(u.len(), lambda.len(), "z_update length mismatch");
    let (a, b) = bounds;
    u.iter()
        .zip(lambda)
        .map(|(ui, li)| (ui + li / sigma).clamp(a, b))
        .collect()
}

/// Multiplier step: `λ⁺ = λ + τσ(u − z)` componentwise.
///
/// # Panics
///
/// Mismatched vector lengths (programming error).
#[must_use]
pub fn lambda_update(lambda_prev: &[f64], u: &[f64], z: &[f64], tau: f64, sigma: f64) -> Vec<f64> {
    assert_eq!(lambda_prev.len(), u.len(), "lambda_update length mismatch");
    assert_eq!(u.len(), z.len(), "lambda_update length mismatch");
    lambda_prev
        .iter()
        .zip(u.iter().zip(z))
        .map(|(li, (ui, zi))| li + tau * sigma * (ui - zi))
        .collect()
}

/// Evaluates the η residuals and the R diagnostic for one iterate, with
/// fresh state/adjoint solves at tolerance `0.1·eta_tol` (warm-started
/// from `state.y`/`state.p` when the lengths match).
///
/// `lambda_prev` is the multiplier of the *previous* iterate, used only
/// in R's first two terms.
///
/// # Errors
///
/// Solver failures during the fresh solves.
pub fn kkt_residuals(
    level: &AssembledLevel,
    state: &IterateState,
    lambda_prev: &[f64],
    eta_tol: f64,
) -> Result<ResidualReport> {
    let (report, _, _) = kkt_residuals_fresh(level, state, lambda_prev, eta_tol)?;
    Ok(report)
}

/// As [`kkt_residuals`], additionally returning the fresh `(y, p)`.
fn kkt_residuals_fresh(
    level: &AssembledLevel,
    state: &IterateState,
    lambda_prev: &[f64],
    eta_tol: f64,
) -> Result<(ResidualReport, Vec<f64>, Vec<f64>)> {
    let ns = level.state_count();
    let tol = 0.1 * eta_tol;
    let y0 = (state.y.len() == ns).then_some(state.y.as_slice());
    let (y, _) = pdeop::solve_state_warm(level, &state.u, y0, tol)?;
    let p0 = (state.p.len() == ns).then_some(state.p.as_slice());
    let (p, _) = pdeop::solve_adjoint_warm(level, &y, p0, tol)?;

    let u = &state.u;
    let z = &state.z;
    let lambda = &state.lambda;
    let (a, b) = level.bounds;

    // η₁: state equation.
    let src: Vec<f64> = u.iter().zip(&level.yr).map(|(ui, ri)| ui + ri).collect();
    let rhs_y = level.m_sc.spmv(&src);
    let ky = level.k.spmv(&y);
    let r1: Vec<f64> = ky.iter().zip(&rhs_y).map(|(x, w)| x - w).collect();
    let myr = level.m_sc.spmv(&level.yr);
    let eta1 = norm2(&r1) / (1.0 + norm2(&myr));

    // η₂: feasibility u = z.
    let umz: Vec<f64> = u.iter().zip(z).map(|(ui, zi)| ui - zi).collect();
    let u_norm = norm2(u);
    let eta2 = norm2(&level.m_cc.spmv(&umz)) / (1.0 + u_norm);

    // η₃: adjoint equation.
    let ymyd: Vec<f64> = y.iter().zip(&level.yd).map(|(yi, di)| yi - di).collect();
    let mym = level.m_ss.spmv(&ymyd);
    let kp = level.k.spmv(&p);
    let r3: Vec<f64> = mym.iter().zip(&kp).map(|(x, w)| x + w).collect();
    let myd = level.m_ss.spmv(&level.yd);
    let eta3 = norm2(&r3) / (1.0 + norm2(&myd));

    // η₄: gradient condition.
    let mut r4 = level.m_cc.spmv(u);
    for v in &mut r4 {
        *v *= level.alpha;
    }
    let mtp = level.m_sc.spmv_transpose(&p);
    let ml = level.m_cc.spmv(lambda);
    for i in 0..r4.len() {
        r4[i] = r4[i] - mtp[i] + ml[i];
    }
    let eta4 = norm2(&r4) / (1.0 + u_norm);

    // η₅: complementarity, mass-weighted and plain variants.
    let z_norm = norm2(z);
    let proj_gap = |shift: &[f64]| -> f64 {
        let s: f64 = z
            .iter()
            .zip(shift)
            .map(|(zi, si)| {
                let d = zi - (zi + si).clamp(a, b);
                d * d
            })
            .sum();
        s.sqrt() / (1.0 + z_norm)
    };
    let eta5 = proj_gap(&ml);
    let eta5_unweighted = proj_gap(lambda);

    let eta = eta1.max(eta2).max(eta3).max(eta4).max(eta5);

    // R: with the previous multiplier and the L²-representer gradient.
    let ghat = pdeop::representer_gradient(level, u, &p)?;
    let s1: Vec<f64> = ghat.iter().zip(lambda_prev).map(|(g, l)| g + l).collect();
    let term1 = l2_inner(&level.m_cc, &s1, &s1)?;
    let dist: Vec<f64> = z
        .iter()
        .zip(lambda_prev)
        .map(|(&zi, &li)| {
            if zi <= a {
                li.max(0.0)
            } else if zi >= b {
                (-li).max(0.0)
            } else {
                li.abs()
            }
        })
        .collect();
    let term2 = l2_inner(&level.m_cc, &dist, &dist)?;
    let term3 = l2_inner(&level.m_cc, &umz, &umz)?;
    let r = term1 + term2 + term3;

    Ok((
        ResidualReport {
            eta1,
            eta2,
            eta3,
            eta4,
            eta5,
            eta,
            eta5_unweighted,
            r,
        },
        y,
        p,
    ))
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// η dropped below `eta_tol` (at the target level, for the
    /// multi-level driver).
    Tolerance,
    /// The iteration cap was reached. Partial records attached to
    /// [`Error::Aborted`] also carry this value.
    MaxIter,
}

/// One logged iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRow {
    /// 0-based iteration index.
    pub k: usize,
    /// Active mesh level.
    pub level: u32,
    /// State (interior) dofs of that level.
    pub dofs: usize,
    /// State-equation residual.
    pub eta1: f64,
    /// Feasibility residual.
    pub eta2: f64,
    /// Adjoint-equation residual.
    pub eta3: f64,
    /// Gradient residual.
    pub eta4: f64,
    /// Complementarity residual (mass-weighted).
    pub eta5: f64,
    /// `max(η₁,…,η₅)`.
    pub eta: f64,
    /// Plain complementarity variant, logged for comparison.
    pub eta5_unweighted: f64,
    /// Squared KKT residual functional (previous-multiplier form).
    #[serde(rename = "R")]
    pub r: f64,
    /// Certified subproblem residual `‖δ‖₂`.
    pub delta_norm: f64,
    /// Inner Krylov iterations / factor applications this iteration.
    pub inner_iterations: usize,
    /// Wall-clock seconds spent in this iteration (kept out of the CSV
    /// body so reruns are byte-identical).
    pub wall_time: f64,
}

/// Complete log of one driver run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    /// Driver that produced the record.
    pub algorithm: Algorithm,
    /// Problem name echo.
    pub problem: String,
    /// Target (finest) level of the run.
    pub target_level: u32,
    /// Per-iteration rows, ordered by `k`.
    pub rows: Vec<IterationRow>,
    /// Final iterate with fresh state/adjoint.
    pub final_state: IterateState,
    /// Why the run stopped.
    pub termination: Termination,
    /// Configuration echo.
    pub config: SolverConfig,
    /// Total wall-clock seconds of the run.
    pub total_wall_time: f64,
}

/// Fixed column order of the per-iteration CSV body.
pub const CSV_HEADER: &str =
    "k,level,dofs,eta1,eta2,eta3,eta4,eta5,eta,eta5_unweighted,R,delta_norm,inner_iterations";

impl RunRecord {
    /// Number of logged iterations.
    #[must_use]
    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    /// η of the last logged iteration.
    #[must_use]
    pub fn final_eta(&self) -> f64 {
        self.rows.last().map_or(f64::INFINITY, |row| row.eta)
    }

    /// Serializes the full record (rows, final state, config) as pretty
    /// JSON.
    ///
    /// # Errors
    ///
    /// Serialization failure.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a record back from [`RunRecord::to_json`] output.
    ///
    /// # Errors
    ///
    /// Malformed JSON.
    pub fn from_json(s: &str) -> Result<RunRecord> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes the per-iteration rows as CSV. Timing columns are
    /// deliberately excluded so identical runs produce byte-identical
    /// bodies; timings live in the JSON record.
    ///
    /// # Errors
    ///
    /// I/O failure on the writer.
    pub fn write_csv(&self, out: &mut dyn IoWrite) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
                row.k,
                row.level,
                row.dofs,
                row.eta1,
                row.eta2,
                row.eta3,
                row.eta4,
                row.eta5,
                row.eta,
                row.eta5_unweighted,
                row.r,
                row.delta_norm,
                row.inner_iterations,
            )?;
        }
        Ok(())
    }

    /// [`RunRecord::write_csv`] into a `String`.
    #[must_use]
    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV body is ASCII")
    }
}

enum Mode {
    Fixed(u32),
    Multi { start: u32, target: u32 },
}

/// Classical ADMM on a fixed mesh level: near-exact subproblems
/// (`‖δ‖₂ ≤` [`CLASSICAL_SUBPROBLEM_TOL`]), default step τ = 1.
///
/// # Errors
///
/// Invalid configuration (including `algorithm ≠ classical`), level out
/// of range, or a mid-run failure wrapped in [`Error::Aborted`] with the
/// partial record.
pub fn run_classical(
    instance: &ProblemInstance,
    level: u32,
    config: &SolverConfig,
) -> Result<RunRecord> {
    expect_algorithm(config, Algorithm::Classical)?;
    run_driver(instance, config, Mode::Fixed(level))
}

/// Inexact ADMM on a fixed mesh level: subproblems certified to the
/// summable schedule `ξ_{k+1} = c/(k+1)²`.
///
/// # Errors
///
/// As [`run_classical`], with `algorithm ≠ inexact` rejected.
pub fn run_inexact(
    instance: &ProblemInstance,
    level: u32,
    config: &SolverConfig,
) -> Result<RunRecord> {
    expect_algorithm(config, Algorithm::Inexact)?;
    run_driver(instance, config, Mode::Fixed(level))
}

/// Multi-level inexact ADMM: the active level follows
/// [`default_level_schedule`] from `config.start_level` (default
/// `min(`[`DEFAULT_START_LEVEL`]`, target)`) up to `target_level`; on
/// each level increase `z` and `λ` are prolonged through the instance's
/// mesh hierarchy. Terminates only once η is below tolerance *and* the
/// active level is the target.
///
/// # Errors
///
/// As [`run_classical`], plus `start_level > target_level` and hierarchy
/// mismatches.
pub fn run_madmm(
    instance: &ProblemInstance,
    config: &SolverConfig,
    target_level: u32,
) -> Result<RunRecord> {
    expect_algorithm(config, Algorithm::Madmm)?;
    let start = config
        .start_level
        .unwrap_or(DEFAULT_START_LEVEL.min(target_level));
    if start > target_level {
        return Err(Error::invalid(format!(
            "start level {start} exceeds target level {target_level}"
        )));
    }
    run_driver(
        instance,
        config,
        Mode::Multi {
            start,
            target: target_level,
        },
    )
}

fn expect_algorithm(config: &SolverConfig, expected: Algorithm) -> Result<()> {
    if config.algorithm != expected {
        return Err(Error::invalid(format!(
            "this driver runs algorithm `{expected}`, config says `{}`",
            config.algorithm
        )));
    }
    Ok(())
}

fn run_driver(instance: &ProblemInstance, config: &SolverConfig, mode: Mode) -> Result<RunRecord> {
    let spec = instance.spec();
    config.validate(spec.alpha)?;
    let sigma = config.effective_sigma(spec.alpha);
    let tau = config.effective_tau();
    let (start_level, target_level) = match mode {
        Mode::Fixed(level) => (level, level),
        Mode::Multi { start, target } => (start, target),
    };
    if target_level > instance.top_level() {
        return Err(Error::HierarchyMismatch(format!(
            "target level {target_level} exceeds the instance's top level {}",
            instance.top_level()
        )));
    }

    let mut current_level = start_level;
    let mut level = instance.assembled(current_level)?;
    let mut subproblem = SubproblemSolver::new(level.clone(), sigma)?;
    let (a, b) = level.bounds;

    // Initial iterate: u = λ = 0, z = 0 clamped into the box.
    let mut z = vec![0.0f64.clamp(a, b); level.control_count()];
    let mut lambda = vec![0.0; level.control_count()];
    let mut rows: Vec<IterationRow> = Vec::new();
    let mut last_state: Option<IterateState> = None;
    let mut termination = Termination::MaxIter;
    let t_run = Instant::now();

    let make_record = |rows: Vec<IterationRow>,
                       last_state: Option<IterateState>,
                       termination: Termination,
                       z: &[f64],
                       lambda: &[f64],
                       level_idx: u32,
                       elapsed: f64| RunRecord {
        algorithm: config.algorithm,
        problem: spec.name.to_string(),
        target_level,
        rows,
        final_state: last_state.unwrap_or_else(|| IterateState {
            level: level_idx,
            u: vec![0.0; z.len()],
            z: z.to_vec(),
            lambda: lambda.to_vec(),
            y: Vec::new(),
            p: Vec::new(),
            delta_norm: f64::NAN,
        }),
        termination,
        config: config.clone(),
        total_wall_time: elapsed,
    };

    for k in 0..config.max_iter {
        let t_iter = Instant::now();

        // Level schedule; carry z and λ up on an increase.
        let scheduled = match mode {
            Mode::Fixed(fixed) => fixed,
            Mode::Multi { start, target } => default_level_schedule(k, start, target),
        };
        if scheduled != current_level {
            let hierarchy = instance.hierarchy();
            z = hierarchy.prolong_vector(current_level as usize, scheduled as usize, &z)?;
            lambda = hierarchy.prolong_vector(current_level as usize, scheduled as usize, &lambda)?;
            current_level = scheduled;
            level = instance.assembled(current_level)?;
            subproblem = SubproblemSolver::new(level.clone(), sigma)?;
        }

        // Inexact u-subproblem with its certificate.
        let tol_xi = match config.algorithm {
            Algorithm::Classical => CLASSICAL_SUBPROBLEM_TOL,
            Algorithm::Inexact | Algorithm::Madmm => config.xi(k),
        };
        let result = match subproblem.solve(&z, &lambda, tol_xi) {
            Ok(result) => result,
            Err(reason) => {
                let record = make_record(
                    rows,
                    last_state,
                    termination,
                    &z,
                    &lambda,
                    current_level,
                    t_run.elapsed().as_secs_f64(),
                );
                return Err(Error::Aborted {
                    reason: Box::new(reason),
                    record: Box::new(record),
                });
            }
        };

        // z- and λ-updates; R needs the pre-update multiplier.
        let u = result.u;
        let lambda_prev = std::mem::take(&mut lambda);
        z = z_update(&u, &lambda_prev, sigma, (a, b));
        lambda = lambda_update(&lambda_prev, &u, &z, tau, sigma);

        let mut state = IterateState {
            level: current_level,
            u,
            z: z.clone(),
            lambda: lambda.clone(),
            y: result.y,
            p: result.p,
            delta_norm: result.delta_norm,
        };
        let (resid, y_fresh, p_fresh) =
            kkt_residuals_fresh(&level, &state, &lambda_prev, config.eta_tol)?;
        state.y = y_fresh;
        state.p = p_fresh;

        rows.push(IterationRow {
            k,
            level: current_level,
            dofs: level.state_count(),
            eta1: resid.eta1,
            eta2: resid.eta2,
            eta3: resid.eta3,
            eta4: resid.eta4,
            eta5: resid.eta5,
            eta: resid.eta,
            eta5_unweighted: resid.eta5_unweighted,
            r: resid.r,
            delta_norm: state.delta_norm,
            inner_iterations: result.report.iterations,
            wall_time: t_iter.elapsed().as_secs_f64(),
        });
        last_state = Some(state);

        if resid.eta < config.eta_tol && current_level == target_level {
            termination = Termination::Tolerance;
            break;
        }
    }

    Ok(make_record(
        rows,
        last_state,
        termination,
        &z,
        &lambda,
        current_level,
        t_run.elapsed().as_secs_f64(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::solve_projected_kkt;
    use crate::problems::{Domain, ProblemSpec, YdData};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn tiny_spec(alpha: f64, bounds: (f64, f64)) -> ProblemSpec {
        ProblemSpec {
            name: "tiny",
            domain: Domain::UnitSquare,
            alpha,
            bounds,
            y_d: Arc::new(|x, y| (PI * x).sin() * (PI * y).sin()),
            yd_data: YdData::Analytic,
            y_r: Arc::new(|_, _| 0.0),
            exact_u: None,
        }
    }

    fn tiny_instance(alpha: f64, bounds: (f64, f64), top: u32) -> ProblemInstance {
        ProblemInstance::new(tiny_spec(alpha, bounds), top).unwrap()
    }

    #[test]
    fn z_update_clamps_componentwise() {
        let z = z_update(&[0.0, 0.5, 2.0], &[0.0; 3], 1.0, (0.3, 1.0));
        assert_eq!(z, vec![0.3, 0.5, 1.0]);

        // Inactive box: the shift passes through untouched.
        let u = [0.1, -0.2];
        let l = [0.05, 0.02];
        let z = z_update(&u, &l, 0.5, (-1.0, 1.0));
        assert_eq!(z, vec![0.1 + 0.1, -0.2 + 0.04]);

        // Idempotent under λ = 0.
        let once = z_update(&[-3.0, 0.4, 9.0], &[0.0; 3], 2.0, (0.0, 1.0));
        let twice = z_update(&once, &[0.0; 3], 2.0, (0.0, 1.0));
        assert_eq!(once, twice);
    }

    #[test]
    fn lambda_update_identities() {
        let l = [1.0, -2.0, 0.5];
        let u = [0.3, 0.4, 0.5];
        // u = z leaves λ unchanged.
        assert_eq!(lambda_update(&l, &u, &u, 1.618, 0.7), l.to_vec());
        // τσ = 1 with u − z = e₁.
        let z = [u[0] - 1.0, u[1], u[2]];
        let next = lambda_update(&l, &u, &z, 2.0, 0.5);
        assert_eq!(next, vec![2.0, -2.0, 0.5]);
        // Affine in (u − z).
        let z2: Vec<f64> = u.iter().map(|v| v - 0.25).collect();
        let next2 = lambda_update(&l, &u, &z2, 1.0, 2.0);
        for i in 0..3 {
            assert!((next2[i] - (l[i] + 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn xi_schedule_is_summable_up_to_500() {
        let config = SolverConfig::new(Algorithm::Inexact);
        let mut partial = 0.0;
        for k in 0..500 {
            partial += config.xi(k);
            assert!(partial < config.xi_scale * (PI * PI / 6.0));
        }
    }

    #[test]
    fn level_schedule_steps_then_holds() {
        assert_eq!(default_level_schedule(0, 4, 7), 4);
        assert_eq!(default_level_schedule(2, 4, 7), 6);
        assert_eq!(default_level_schedule(3, 4, 7), 7);
        assert_eq!(default_level_schedule(400, 4, 7), 7);
    }

    #[test]
    fn config_defaults_and_validation() {
        let classical = SolverConfig::new(Algorithm::Classical);
        assert_eq!(classical.effective_tau(), 1.0);
        let madmm = SolverConfig::new(Algorithm::Madmm);
        assert_eq!(madmm.effective_tau(), 1.618);
        assert_eq!(madmm.effective_sigma(0.01), 0.001);
        assert!(madmm.validate(0.01).is_ok());

        let mut bad = SolverConfig::new(Algorithm::Inexact);
        bad.tau = Some(TAU_LIMIT);
        assert!(bad.validate(1.0).is_err());
        bad.tau = Some(1.6);
        bad.sigma = Some(-1.0);
        assert!(bad.validate(1.0).is_err());
        bad.sigma = None;
        bad.max_iter = 0;
        assert!(bad.validate(1.0).is_err());
    }

    #[test]
    fn residuals_vanish_at_an_oracle_kkt_point() {
        // Wide bounds: the KKT point is unconstrained and λ* = 0, so all
        // five residuals and R must vanish to solver accuracy.
        let instance = tiny_instance(1e-2, (-1e6, 1e6), 2);
        let level = instance.assembled(2).unwrap();
        let kkt = solve_projected_kkt(&level).unwrap();
        let state = IterateState {
            level: 2,
            u: kkt.u.clone(),
            z: kkt.u.clone(),
            lambda: kkt.lambda.clone(),
            y: kkt.y.clone(),
            p: kkt.p.clone(),
            delta_norm: 0.0,
        };
        let report = kkt_residuals(&level, &state, &kkt.lambda, 1e-6).unwrap();
        for (name, value) in [
            ("eta1", report.eta1),
            ("eta2", report.eta2),
            ("eta3", report.eta3),
            ("eta4", report.eta4),
            ("eta5", report.eta5),
        ] {
            assert!(value <= 1e-8, "{name} = {value}");
        }
        assert_eq!(report.eta, report.eta1.max(report.eta2).max(report.eta3).max(report.eta4).max(report.eta5));
        assert!(report.r <= 1e-12, "R = {}", report.r);
    }

    #[test]
    fn classical_stops_after_one_iteration_when_capped() {
        let instance = tiny_instance(1e-2, (-1.0, 1.0), 2);
        let mut config = SolverConfig::new(Algorithm::Classical);
        config.max_iter = 1;
        let record = run_classical(&instance, 2, &config).unwrap();
        assert_eq!(record.rows.len(), 1);
        assert_eq!(record.termination, Termination::MaxIter);
        assert_eq!(record.rows[0].k, 0);
    }

    #[test]
    fn large_sigma_forces_feasibility_quickly() {
        let instance = tiny_instance(1e-2, (-0.5, 0.5), 2);
        let mut config = SolverConfig::new(Algorithm::Classical);
        config.sigma = Some(100.0);
        config.max_iter = 5;
        let record = run_classical(&instance, 2, &config).unwrap();
        assert!(
            record.rows.last().unwrap().eta2 < config.eta_tol,
            "η₂ = {}",
            record.rows.last().unwrap().eta2
        );
    }

    #[test]
    fn classical_converges_on_a_small_problem() {
        // One-sided activity (only the upper bound bites, with a wide
        // inactive buffer) mirrors the benchmark problems' geometry; the
        // mesh must be fine enough that the mass-weighted η₅'s intrinsic
        // discretization floor sits below the tolerance.
        let instance = tiny_instance(1e-2, (-10.0, 2.5), 4);
        let config = SolverConfig::new(Algorithm::Classical);
        let record = run_classical(&instance, 4, &config).unwrap();
        assert_eq!(record.termination, Termination::Tolerance);
        assert!(record.final_eta() < config.eta_tol);
        // z stays box-feasible throughout (checked at the end).
        let (a, b) = instance.spec().bounds;
        assert!(record.final_state.z.iter().all(|&v| (a..=b).contains(&v)));
    }

    #[test]
    fn degenerate_schedule_matches_fixed_mesh_inexact() {
        let instance = tiny_instance(1e-2, (-10.0, 2.5), 4);
        let inexact = SolverConfig::new(Algorithm::Inexact);
        let fixed = run_inexact(&instance, 4, &inexact).unwrap();
        let mut multi_cfg = SolverConfig::new(Algorithm::Madmm);
        multi_cfg.start_level = Some(4);
        let multi = run_madmm(&instance, &multi_cfg, 4).unwrap();
        assert_eq!(fixed.termination, Termination::Tolerance);
        assert_eq!(fixed.rows.len(), multi.rows.len());
        let diff: f64 = fixed
            .final_state
            .u
            .iter()
            .zip(&multi.final_state.u)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10, "max |Δu| = {diff}");
    }

    #[test]
    fn tightly_certified_inexact_matches_classical() {
        let instance = tiny_instance(1e-2, (-10.0, 2.5), 2);
        let mut classical_cfg = SolverConfig::new(Algorithm::Classical);
        classical_cfg.eta_tol = 1e-8;
        classical_cfg.tau = Some(1.0);
        let mut inexact_cfg = SolverConfig::new(Algorithm::Inexact);
        inexact_cfg.eta_tol = 1e-8;
        inexact_cfg.xi_scale = 1e-12;
        inexact_cfg.tau = Some(1.0);
        let c = run_classical(&instance, 2, &classical_cfg).unwrap();
        let i = run_inexact(&instance, 2, &inexact_cfg).unwrap();
        let diff: f64 = c
            .final_state
            .u
            .iter()
            .zip(&i.final_state.u)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-8, "max |Δu| = {diff}");
    }

    #[test]
    fn madmm_climbs_levels_and_stays_feasible() {
        let instance = tiny_instance(1e-2, (-10.0, 2.5), 4);
        let mut config = SolverConfig::new(Algorithm::Madmm);
        config.start_level = Some(1);
        let record = run_madmm(&instance, &config, 4).unwrap();
        assert_eq!(record.termination, Termination::Tolerance);
        assert_eq!(record.final_state.level, 4);
        // Levels follow min(start + k, target).
        for row in &record.rows {
            assert_eq!(row.level, default_level_schedule(row.k, 1, 4));
        }
        let (a, b) = instance.spec().bounds;
        assert!(record.final_state.z.iter().all(|&v| (a..=b).contains(&v)));
        // Termination was only allowed at the target level.
        assert_eq!(record.rows.last().unwrap().level, 4);
    }

    #[test]
    fn record_round_trips_through_json_and_csv_is_deterministic() {
        let instance = tiny_instance(1e-2, (-1.0, 1.0), 2);
        let mut config = SolverConfig::new(Algorithm::Classical);
        config.max_iter = 3;
        let record = run_classical(&instance, 2, &config).unwrap();
        let json = record.to_json().unwrap();
        let back = RunRecord::from_json(&json).unwrap();
        assert_eq!(back.rows.len(), record.rows.len());
        assert_eq!(back.final_state.u, record.final_state.u);
        assert_eq!(back.config, record.config);
        assert_eq!(back.rows[1].eta, record.rows[1].eta);

        let csv = record.csv_string();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), record.rows.len() + 1);
        // A rerun produces a byte-identical body.
        let rerun = run_classical(&instance, 2, &config).unwrap();
        assert_eq!(rerun.csv_string(), csv);
    }

    #[test]
    fn drivers_reject_mismatched_algorithm_tags() {
        let instance = tiny_instance(1e-2, (-1.0, 1.0), 2);
        let config = SolverConfig::new(Algorithm::Inexact);
        assert!(run_classical(&instance, 2, &config).is_err());
        assert!(run_madmm(&instance, &config, 2).is_err());
        assert!(run_inexact(&instance, 2, &config).is_ok());
    }

    #[test]
    fn impossible_certificate_aborts_with_partial_record() {
        let instance = tiny_instance(1e-2, (-1.0, 1.0), 2);
        let mut config = SolverConfig::new(Algorithm::Inexact);
        config.xi_scale = 1e-300;
        let err = run_inexact(&instance, 2, &config).expect_err("must abort");
        match err {
            Error::Aborted { reason, record } => {
                assert!(matches!(*reason, Error::SubproblemFailure { .. }));
                assert_eq!(record.rows.len(), 0);
            }
            other => panic!("expected Aborted, got {other}"),
        }
    }

    #[test]
    fn algorithm_parses_from_strings() {
        assert_eq!("madmm".parse::<Algorithm>().unwrap(), Algorithm::Madmm);
        assert_eq!(" Classical ".parse::<Algorithm>().unwrap(), Algorithm::Classical);
        assert!("newton".parse::<Algorithm>().is_err());
    }
}
