//! P1 finite-element assembly: stiffness and mass matrices on the mixed
//! dof sets, nodal interpolation, and quadrature-based L² norms.
//!
//! # Dof sets
//!
//! The state space eliminates Dirichlet boundary nodes (`state` dofs =
//! interior nodes), while the control space keeps **all** mesh nodes
//! (`control` dofs). The rectangular coupling block `M_sc` mediates
//! between the two numberings. [`DofMap`] carries the index translations.
//!
//! # Assembled objects
//!
//! [`assemble`] produces one [`AssembledLevel`] per mesh: the
//! Dirichlet-eliminated stiffness `K`, the mass blocks `M_ss`, `M_sc`,
//! `M_cc`, and the nodal data vectors of `y_d` (state dofs) and `y_r`
//! (control dofs). Element matrices are exact closed forms; L² errors use
//! a symmetric 6-point triangle rule exact through degree 4, so measured
//! convergence orders are not polluted by quadrature error.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{SparseBuilder, SparseMatrix};
use crate::mesh::TriangleMesh;
use crate::problems::{ProblemSpec, YdData};

/// Symmetric 6-point triangle quadrature, exact for polynomials of degree
/// ≤ 4. Entries are (barycentric coordinates, weight); weights sum to 1
/// and scale by the element area.
///
/// Source: Dunavant (1985), degree-4 rule.
pub(crate) const QUAD_DEGREE4: [([f64; 3], f64); 6] = [
    (
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        0.223381589678011,
    ),
    (
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        0.223381589678011,
    ),
    (
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        0.223381589678011,
    ),
    (
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
        0.109951743655322,
    ),
    (
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        0.109951743655322,
    ),
    (
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        0.109951743655322,
    ),
];

/// Index translations between the full nodal numbering and the reduced
/// state numbering.
///
/// Control dofs are the identity over all nodes; state dofs enumerate the
/// interior nodes in increasing node order.
#[derive(Debug, Clone)]
pub struct DofMap {
    mesh: Arc<TriangleMesh>,
    state_dofs: Vec<usize>,
    node_to_state: Vec<Option<usize>>,
}

impl DofMap {
    /// Builds the map from a mesh's boundary mask.
    #[must_use]
    pub fn new(mesh: Arc<TriangleMesh>) -> Self {
        let mut state_dofs = Vec::with_capacity(mesh.interior_count());
        let mut node_to_state = vec![None; mesh.node_count()];
        for (i, slot) in node_to_state.iter_mut().enumerate() {
            if !mesh.is_boundary(i) {
                *slot = Some(state_dofs.len());
                state_dofs.push(i);
            }
        }
        DofMap {
            mesh,
            state_dofs,
            node_to_state,
        }
    }

    /// The underlying mesh.
    #[must_use]
    pub fn mesh(&self) -> &Arc<TriangleMesh> {
        &self.mesh
    }

    /// Number of state (interior) dofs.
    #[must_use]
    pub fn state_count(&self) -> usize {
        self.state_dofs.len()
    }

    /// Number of control dofs (= all nodes).
    #[must_use]
    pub fn control_count(&self) -> usize {
        self.mesh.node_count()
    }

    /// Node indices of the state dofs, in state-dof order.
    #[must_use]
    pub fn state_nodes(&self) -> &[usize] {
        &self.state_dofs
    }

    /// State dof of a node, `None` for boundary nodes.
    #[must_use]
    pub fn state_of_node(&self, node: usize) -> Option<usize> {
        self.node_to_state[node]
    }

    /// Node index of a state dof.
    #[must_use]
    pub fn node_of_state(&self, s: usize) -> usize {
        self.state_dofs[s]
    }

    /// Restricts a full nodal vector to the state dofs.
    #[must_use]
    pub fn restrict_to_state(&self, full: &[f64]) -> Vec<f64> {
        self.state_dofs.iter().map(|&i| full[i]).collect()
    }

    /// Extends a state vector to a full nodal vector, zero on the boundary.
    #[must_use]
    pub fn extend_from_state(&self, state: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.mesh.node_count()];
        for (s, &i) in self.state_dofs.iter().enumerate() {
            full[i] = state[s];
        }
        full
    }
}

/// One mesh level's assembled problem data.
#[derive(Debug, Clone)]
pub struct AssembledLevel {
    /// Dof bookkeeping (owns the mesh).
    pub dofs: DofMap,
    /// Stiffness on state dofs (Dirichlet-eliminated), symmetric positive
    /// definite.
    pub k: SparseMatrix,
    /// Mass, state × state.
    pub m_ss: SparseMatrix,
    /// Mass coupling, state × control.
    pub m_sc: SparseMatrix,
    /// Mass, control × control (all nodes), symmetric positive definite.
    pub m_cc: SparseMatrix,
    /// Desired state `y_d` on state dofs.
    pub yd: Vec<f64>,
    /// Source offset `y_r` on control dofs.
    pub yr: Vec<f64>,
    /// Tikhonov weight α.
    pub alpha: f64,
    /// Box bounds `(a, b)`.
    pub bounds: (f64, f64),
}

/// Spec-facing alias: the assembled data *is* the discrete problem.
pub type DiscreteProblem = AssembledLevel;

impl AssembledLevel {
    /// The mesh this level was assembled on.
    #[must_use]
    pub fn mesh(&self) -> &Arc<TriangleMesh> {
        self.dofs.mesh()
    }

    /// Number of state dofs.
    #[must_use]
    pub fn state_count(&self) -> usize {
        self.dofs.state_count()
    }

    /// Number of control dofs.
    #[must_use]
    pub fn control_count(&self) -> usize {
        self.dofs.control_count()
    }
}

/// Full (no boundary elimination) stiffness and mass matrices over all
/// nodes, from the closed-form P1 element matrices.
pub(crate) fn assemble_full_matrices(
    mesh: &TriangleMesh,
) -> Result<(SparseMatrix, SparseMatrix)> {
    mesh.validate()?;
    let n = mesh.node_count();
    let nt = mesh.triangle_count();
    let mut kb = SparseBuilder::with_capacity(n, n, 9 * nt);
    let mut mb = SparseBuilder::with_capacity(n, n, 9 * nt);
    for t in mesh.triangles() {
        let [a, b, c] = *t;
        let pa = mesh.nodes()[a];
        let pb = mesh.nodes()[b];
        let pc = mesh.nodes()[c];
        let area = 0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]));
        if area <= 0.0 || area.is_nan() {
            return Err(Error::InvalidMesh(format!(
                "degenerate triangle ({a}, {b}, {c}) with area {area:.3e}"
            )));
        }
        // Barycentric gradients: ∇λ_i = (b_i, c_i)/(2A) with the usual
        // cyclic edge differences.
        let bv = [pb[1] - pc[1], pc[1] - pa[1], pa[1] - pb[1]];
        let cv = [pc[0] - pb[0], pa[0] - pc[0], pb[0] - pa[0]];
        let idx = [a, b, c];
        for i in 0..3 {
            for j in 0..3 {
                let kij = (bv[i] * bv[j] + cv[i] * cv[j]) / (4.0 * area);
                let mij = area / 12.0 * if i == j { 2.0 } else { 1.0 };
                kb.add(idx[i], idx[j], kij);
                mb.add(idx[i], idx[j], mij);
            }
        }
    }
    Ok((kb.build()?, mb.build()?))
}

/// Extracts a submatrix by optional row/column index maps (`None` entries
/// drop the row/column).
fn extract(
    full: &SparseMatrix,
    row_map: &[Option<usize>],
    nrows: usize,
    col_map: &[Option<usize>],
    ncols: usize,
) -> Result<SparseMatrix> {
    let mut builder = SparseBuilder::with_capacity(nrows, ncols, full.nnz());
    for (r, slot) in row_map.iter().enumerate().take(full.nrows()) {
        let Some(rr) = *slot else { continue };
        for (c, v) in full.row(r) {
            if let Some(cc) = col_map[c] {
                builder.add(rr, cc, v);
            }
        }
    }
    builder.build()
}

/// Assembles one level: stiffness and mass blocks on the mixed dof sets
/// plus the nodal data vectors of `y_d` and `y_r`.
///
/// `y_d` and `y_r` are sampled by nodal interpolation of the spec's
/// analytic fields; a spec carrying reference data
/// ([`YdData::AnalyticPlusReference`]) additionally receives the leading
/// `node_count` entries of the reference correction (exact restriction on
/// nested refinement chains).
///
/// # Errors
///
/// Invalid meshes or specs, non-finite data samples, or a reference
/// correction shorter than the mesh's node count.
pub fn assemble(mesh: &TriangleMesh, spec: &ProblemSpec) -> Result<AssembledLevel> {
    spec.validate()?;
    let (k_full, m_full) = assemble_full_matrices(mesh)?;
    let dofs = DofMap::new(Arc::new(mesh.clone()));
    let n = dofs.control_count();
    let ns = dofs.state_count();

    let state_map: Vec<Option<usize>> = (0..n).map(|i| dofs.state_of_node(i)).collect();
    let all_map: Vec<Option<usize>> = (0..n).map(Some).collect();
    let k = extract(&k_full, &state_map, ns, &state_map, ns)?;
    let m_ss = extract(&m_full, &state_map, ns, &state_map, ns)?;
    let m_sc = extract(&m_full, &state_map, ns, &all_map, n)?;
    let m_cc = m_full;

    let mut yd_full = interpolate_nodal(spec.y_d.as_ref(), mesh)?;
    if let YdData::AnalyticPlusReference {
        values,
        reference_level,
    } = &spec.yd_data
    {
        if values.len() < n {
            return Err(Error::DimensionMismatch(format!(
                "reference correction (level {reference_level}, {} values) is shorter than \
                 this mesh's {n} nodes — not an ancestor of the reference chain",
                values.len()
            )));
        }
        for (slot, v) in yd_full.iter_mut().zip(values.iter()) {
            *slot += v;
        }
    }
    let yd = dofs.restrict_to_state(&yd_full);
    let yr = interpolate_nodal(spec.y_r.as_ref(), mesh)?;

    Ok(AssembledLevel {
        dofs,
        k,
        m_ss,
        m_sc,
        m_cc,
        yd,
        yr,
        alpha: spec.alpha,
        bounds: spec.bounds,
    })
}

/// Nodal interpolation `I_h f`: the vector of `f(xᵢ)` over all nodes.
///
/// # Errors
///
/// [`Error::InvalidFunction`] at the first node where `f` is non-finite.
pub fn interpolate_nodal(f: &dyn Fn(f64, f64) -> f64, mesh: &TriangleMesh) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(mesh.node_count());
    for (i, p) in mesh.nodes().iter().enumerate() {
        let v = f(p[0], p[1]);
        if !v.is_finite() {
            return Err(Error::InvalidFunction {
                node: i,
                x: p[0],
                y: p[1],
            });
        }
        out.push(v);
    }
    Ok(out)
}

/// L² error `‖u_h − exact‖_{L²(Ω_h)}` of a P1 function with nodal
/// coefficients `coeffs` (all nodes) against a scalar field, via the
/// degree-4 quadrature rule.
///
/// # Errors
///
/// Coefficient length mismatch.
pub fn l2_error(
    coeffs: &[f64],
    exact: &dyn Fn(f64, f64) -> f64,
    mesh: &TriangleMesh,
) -> Result<f64> {
    if coeffs.len() != mesh.node_count() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients have length {}, mesh has {} nodes",
            coeffs.len(),
            mesh.node_count()
        )));
    }
    let mut total = 0.0;
    for t in mesh.triangles() {
        let [a, b, c] = *t;
        let pa = mesh.nodes()[a];
        let pb = mesh.nodes()[b];
        let pc = mesh.nodes()[c];
        let area = 0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]));
        let mut elem = 0.0;
        for (lambda, w) in QUAD_DEGREE4 {
            let x = lambda[0] * pa[0] + lambda[1] * pb[0] + lambda[2] * pc[0];
            let y = lambda[0] * pa[1] + lambda[1] * pb[1] + lambda[2] * pc[1];
            let uh = lambda[0] * coeffs[a] + lambda[1] * coeffs[b] + lambda[2] * coeffs[c];
            let d = uh - exact(x, y);
            elem += w * d * d;
        }
        total += area * elem;
    }
    Ok(total.max(0.0).sqrt())
}

/// Discrete L² pairing `uᵀ M v`.
///
/// # Errors
///
/// Dimension mismatches.
pub fn l2_inner(m: &SparseMatrix, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != m.nrows() || v.len() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "l2_inner shapes: M is {}x{}, u has {}, v has {}",
            m.nrows(),
            m.ncols(),
            u.len(),
            v.len()
        )));
    }
    let mv = m.spmv(v);
    Ok(crate::linalg::dot(u, &mv))
}

/// Mass-weighted norm `‖v‖_M = √(vᵀ M v)`.
///
/// # Errors
///
/// Dimension mismatches.
pub fn m_norm(m: &SparseMatrix, v: &[f64]) -> Result<f64> {
    Ok(l2_inner(m, v, v)?.max(0.0).sqrt())
}
