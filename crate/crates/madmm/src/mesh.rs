//! Triangulations of the unit square and the unit disk, uniform (red)
//! refinement into nested hierarchies, and the nodal interpolation
//! (prolongation) operator between consecutive levels.
//!
//! # Structure
//!
//! - [`TriangleMesh`] — immutable conforming P1 triangulation: node
//!   coordinates, counterclockwise element connectivity, a boundary mask,
//!   and (for refined meshes) per-node provenance into the parent mesh.
//! - [`unit_square_mesh`] / [`unit_disk_mesh`] — the two built-in
//!   generators.
//! - [`refine_uniform`] — splits every triangle into four congruent
//!   children via edge midpoints; for the disk, new boundary midpoints are
//!   snapped radially onto the unit circle.
//! - [`prolongation`] — the interpolation operator as a sparse matrix:
//!   unit rows for copied nodes, two 0.5 entries for edge midpoints.
//! - [`MeshHierarchy`] — a coarse-to-fine ladder of meshes with the
//!   prolongation matrices between consecutive levels.
//!
//! # Node ordering under refinement
//!
//! Refinement copies the coarse nodes first (indices `0..n_coarse`,
//! coordinates bit-identical) and appends edge midpoints afterwards in
//! lexicographic edge order. Coarse nodal vectors are therefore exact
//! prefixes of fine ones, which makes restriction by truncation exact —
//! the property the reference-solution machinery relies on.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{SparseBuilder, SparseMatrix};

/// How boundary nodes behave under refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryGeometry {
    /// Boundary is a polygon; midpoints of boundary edges stay put.
    Polygonal,
    /// Boundary approximates the unit circle; new boundary midpoints are
    /// projected radially onto it.
    UnitCircle,
}

/// Where a node of a refined mesh comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeProvenance {
    /// Verbatim copy of the parent node with this index.
    Copied(usize),
    /// Midpoint of the parent edge `(a, b)` with `a < b` (possibly snapped
    /// to the boundary curve afterwards).
    EdgeMidpoint(usize, usize),
}

/// Link from a refined mesh back to its parent.
#[derive(Debug, Clone)]
pub struct ParentLink {
    /// Node count of the parent mesh.
    pub parent_nodes: usize,
    /// Provenance of every node, indexed like `nodes`.
    pub provenance: Vec<NodeProvenance>,
}

/// A conforming triangulation with positively oriented elements.
///
/// Immutable after construction; refinement returns a new mesh.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_mask: Vec<bool>,
    level: u32,
    geometry: BoundaryGeometry,
    parent: Option<ParentLink>,
}

impl TriangleMesh {
    /// Node coordinates.
    #[must_use]
    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    /// Element connectivity (counterclockwise triples).
    #[must_use]
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// `true` for nodes on ∂Ω_h.
    #[must_use]
    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary_mask
    }

    /// Refinement depth relative to the generating mesh.
    #[must_use]
    pub fn level(&self) -> u32 {
        self.level
    }

    /// Boundary behavior under refinement.
    #[must_use]
    pub fn geometry(&self) -> BoundaryGeometry {
        self.geometry
    }

    /// Provenance link to the parent mesh, if this mesh was refined.
    #[must_use]
    pub fn parent(&self) -> Option<&ParentLink> {
        self.parent.as_ref()
    }

    /// Number of nodes.
    #[must_use]
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of triangles.
    #[must_use]
    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Number of boundary nodes.
    #[must_use]
    pub fn boundary_count(&self) -> usize {
        self.boundary_mask.iter().filter(|&&b| b).count()
    }

    /// Number of interior nodes.
    #[must_use]
    pub fn interior_count(&self) -> usize {
        self.node_count() - self.boundary_count()
    }

    /// Whether node `i` lies on the boundary.
    #[must_use]
    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary_mask[i]
    }

    /// Mesh size `h := max_T (longest edge of T)`.
    #[must_use]
    pub fn mesh_size(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let e = self.edge_lengths(t);
                e[0].max(e[1]).max(e[2])
            })
            .fold(0.0, f64::max)
    }

    /// Total area `|Ω_h| = Σ_T |T|`.
    #[must_use]
    pub fn total_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| self.signed_area(t))
            .sum()
    }

    /// Quasi-uniformity measure: the maximum over elements of
    /// (longest edge)/(inradius). Both built-in families stay ≤ 5.
    #[must_use]
    pub fn aspect_bound(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let e = self.edge_lengths(t);
                let rho = e[0].max(e[1]).max(e[2]);
                let s = 0.5 * (e[0] + e[1] + e[2]);
                let inradius = self.signed_area(t) / s;
                rho / inradius
            })
            .fold(0.0, f64::max)
    }

    /// Signed (counterclockwise-positive) area of a triangle.
    fn signed_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = *t;
        let pa = self.nodes[a];
        let pb = self.nodes[b];
        let pc = self.nodes[c];
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    fn edge_lengths(&self, t: &[usize; 3]) -> [f64; 3] {
        let [a, b, c] = *t;
        let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        [
            d(self.nodes[a], self.nodes[b]),
            d(self.nodes[b], self.nodes[c]),
            d(self.nodes[c], self.nodes[a]),
        ]
    }

    /// Structural checks: indices in range, finite coordinates, strictly
    /// positive element areas, and edge-conformity (every edge shared by at
    /// most two triangles).
    ///
    /// # Errors
    ///
    /// [`Error::InvalidMesh`] describing the first violation found.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for (i, p) in self.nodes.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::InvalidMesh(format!("node {i} has non-finite coordinates")));
            }
        }
        if self.boundary_mask.len() != n {
            return Err(Error::InvalidMesh("boundary mask length differs from node count".into()));
        }
        let mut edge_count: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for (ti, t) in self.triangles.iter().enumerate() {
            let [a, b, c] = *t;
            if a >= n || b >= n || c >= n {
                return Err(Error::InvalidMesh(format!("triangle {ti} references a missing node")));
            }
            if a == b || b == c || a == c {
                return Err(Error::InvalidMesh(format!("triangle {ti} has repeated nodes")));
            }
            let area = self.signed_area(t);
            if area <= 0.0 || area.is_nan() {
                return Err(Error::InvalidMesh(format!(
                    "triangle {ti} has non-positive area {area:.3e} (orientation or degeneracy)"
                )));
            }
            for (u, v) in [(a, b), (b, c), (c, a)] {
                let key = (u.min(v), u.max(v));
                let cnt = edge_count.entry(key).or_insert(0);
                *cnt += 1;
                if *cnt > 2 {
                    return Err(Error::InvalidMesh(format!(
                        "edge ({}, {}) belongs to more than two triangles",
                        key.0, key.1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the mesh in a plain-text format for debugging and plotting:
    ///
    /// ```text
    /// nodes <N>
    /// <x> <y> <0|1>        (boundary flag)
    /// ...
    /// triangles <M>
    /// <a> <b> <c>
    /// ...
    /// ```
    ///
    /// # Errors
    ///
    /// I/O errors from the writer.
    pub fn write_plain(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "nodes {}", self.nodes.len())?;
        for (p, &b) in self.nodes.iter().zip(&self.boundary_mask) {
            writeln!(w, "{:.17e} {:.17e} {}", p[0], p[1], u8::from(b))?;
        }
        writeln!(w, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// Boundary mask from edge incidence: an edge lying in exactly one triangle
/// is a boundary edge, and its endpoints are boundary nodes.
fn boundary_from_edges(node_count: usize, triangles: &[[usize; 3]]) -> Vec<bool> {
    let mut edge_count: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for t in triangles {
        let [a, b, c] = *t;
        for (u, v) in [(a, b), (b, c), (c, a)] {
            *edge_count.entry((u.min(v), u.max(v))).or_insert(0) += 1;
        }
    }
    let mut mask = vec![false; node_count];
    for ((u, v), cnt) in edge_count {
        if cnt == 1 {
            mask[u] = true;
            mask[v] = true;
        }
    }
    mask
}

/// Uniform triangulation of the unit square `(0,1)²` with `n` subdivisions
/// per side: `(n+1)²` nodes in row-major order, every grid cell split along
/// the bottom-left→top-right diagonal, mesh size `h = √2/n`.
///
/// # Errors
///
/// `n = 0`.
pub fn unit_square_mesh(n: usize) -> Result<TriangleMesh> {
    if n == 0 {
        return Err(Error::invalid("unit_square_mesh needs at least 1 subdivision"));
    }
    let stride = n + 1;
    let mut nodes = Vec::with_capacity(stride * stride);
    for i in 0..stride {
        for j in 0..stride {
            nodes.push([j as f64 / n as f64, i as f64 / n as f64]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            let bl = i * stride + j;
            let br = bl + 1;
            let tl = bl + stride;
            let tr = tl + 1;
            // Fixed diagonal bl→tr; both children counterclockwise.
            triangles.push([bl, br, tr]);
            triangles.push([bl, tr, tl]);
        }
    }
    let boundary_mask = boundary_from_edges(nodes.len(), &triangles);
    let mesh = TriangleMesh {
        nodes,
        triangles,
        boundary_mask,
        level: 0,
        geometry: BoundaryGeometry::Polygonal,
        parent: None,
    };
    debug_assert!(mesh.validate().is_ok());
    Ok(mesh)
}

/// Triangulation of the unit disk: a regular hexagon fan around the origin
/// (seed: the origin plus six boundary vertices at angles `k·60°`, six
/// equilateral triangles), uniformly refined `level` times with new
/// boundary midpoints snapped radially onto the circle. Mesh size halves
/// per level: `h ≈ 2⁻ˡᵉᵛᵉˡ`.
///
/// # Errors
///
/// Propagated refinement failures (not expected for valid levels).
pub fn unit_disk_mesh(level: u32) -> Result<TriangleMesh> {
    let mut nodes = vec![[0.0, 0.0]];
    for k in 0..6u32 {
        let theta = f64::from(k) * std::f64::consts::FRAC_PI_3;
        nodes.push([theta.cos(), theta.sin()]);
    }
    let triangles: Vec<[usize; 3]> = (0..6)
        .map(|k| [0, 1 + k, 1 + (k + 1) % 6])
        .collect();
    let boundary_mask = boundary_from_edges(nodes.len(), &triangles);
    let mut mesh = TriangleMesh {
        nodes,
        triangles,
        boundary_mask,
        level: 0,
        geometry: BoundaryGeometry::UnitCircle,
        parent: None,
    };
    for _ in 0..level {
        mesh = refine_uniform(&mesh)?;
    }
    Ok(mesh)
}

/// Splits every triangle into four children via edge midpoints.
///
/// The refined mesh copies the coarse nodes verbatim as indices
/// `0..n_coarse` and appends edge midpoints in lexicographic edge order;
/// node count of the output equals nodes + edges of the input. For
/// [`BoundaryGeometry::UnitCircle`] meshes, new midpoints on boundary edges
/// are snapped radially onto the unit circle.
///
/// # Errors
///
/// Non-conforming or degenerate input ([`Error::InvalidMesh`]).
pub fn refine_uniform(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    mesh.validate()?;
    let n_coarse = mesh.node_count();

    // Midpoint index per coarse edge, assigned in sorted edge order.
    let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in &mesh.triangles {
        let [a, b, c] = *t;
        for (u, v) in [(a, b), (b, c), (c, a)] {
            edges.entry((u.min(v), u.max(v))).or_insert(0);
        }
    }
    for (rank, (_, slot)) in edges.iter_mut().enumerate() {
        *slot = n_coarse + rank;
    }

    let mut nodes = mesh.nodes.clone();
    let mut provenance: Vec<NodeProvenance> =
        (0..n_coarse).map(NodeProvenance::Copied).collect();
    nodes.reserve(edges.len());
    provenance.reserve(edges.len());
    for &(a, b) in edges.keys() {
        let pa = mesh.nodes[a];
        let pb = mesh.nodes[b];
        nodes.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        provenance.push(NodeProvenance::EdgeMidpoint(a, b));
    }

    let mut triangles = Vec::with_capacity(4 * mesh.triangle_count());
    for t in &mesh.triangles {
        let [a, b, c] = *t;
        let mab = edges[&(a.min(b), a.max(b))];
        let mbc = edges[&(b.min(c), b.max(c))];
        let mca = edges[&(c.min(a), c.max(a))];
        triangles.push([a, mab, mca]);
        triangles.push([mab, b, mbc]);
        triangles.push([mca, mbc, c]);
        triangles.push([mab, mbc, mca]);
    }

    let boundary_mask = boundary_from_edges(nodes.len(), &triangles);
    if mesh.geometry == BoundaryGeometry::UnitCircle {
        // Snap only the NEW boundary nodes; copied nodes stay bit-identical
        // so coarse vectors remain exact prefixes of fine ones.
        for i in n_coarse..nodes.len() {
            if boundary_mask[i] {
                let p = nodes[i];
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                nodes[i] = [p[0] / r, p[1] / r];
            }
        }
    }

    let fine = TriangleMesh {
        nodes,
        triangles,
        boundary_mask,
        level: mesh.level + 1,
        geometry: mesh.geometry,
        parent: Some(ParentLink {
            parent_nodes: n_coarse,
            provenance,
        }),
    };
    fine.validate()?;
    Ok(fine)
}

/// The nodal interpolation operator from `coarse` to `fine` as a sparse
/// `n_fine × n_coarse` matrix: unit rows for copied nodes, two 0.5 entries
/// for edge midpoints. `P·w` evaluates the coarse piecewise-linear function
/// with nodal values `w` at the fine nodes (up to the radial snap for disk
/// boundary midpoints, whose rows still average the edge endpoints).
///
/// # Errors
///
/// [`Error::HierarchyMismatch`] when `fine` was not produced by refining
/// `coarse` (missing parent link, node-count mismatch, or provenance
/// coordinates that do not match).
pub fn prolongation(coarse: &TriangleMesh, fine: &TriangleMesh) -> Result<SparseMatrix> {
    let link = fine.parent().ok_or_else(|| {
        Error::HierarchyMismatch("fine mesh has no parent link (not a refined mesh)".into())
    })?;
    if link.parent_nodes != coarse.node_count() {
        return Err(Error::HierarchyMismatch(format!(
            "fine mesh was refined from {} nodes, coarse mesh has {}",
            link.parent_nodes,
            coarse.node_count()
        )));
    }
    let mut builder = SparseBuilder::with_capacity(
        fine.node_count(),
        coarse.node_count(),
        2 * fine.node_count(),
    );
    for (i, prov) in link.provenance.iter().enumerate() {
        match *prov {
            NodeProvenance::Copied(ci) => {
                let pc = coarse.nodes[ci];
                let pf = fine.nodes[i];
                if pc != pf {
                    return Err(Error::HierarchyMismatch(format!(
                        "copied node {i} does not match coarse node {ci}"
                    )));
                }
                builder.add(i, ci, 1.0);
            }
            NodeProvenance::EdgeMidpoint(a, b) => {
                let pa = coarse.nodes[a];
                let pb = coarse.nodes[b];
                let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
                let pf = fine.nodes[i];
                let plain = (pf[0] - mid[0]).abs() <= 1e-12 && (pf[1] - mid[1]).abs() <= 1e-12;
                let snapped = fine.geometry == BoundaryGeometry::UnitCircle
                    && fine.is_boundary(i)
                    && ((pf[0] * pf[0] + pf[1] * pf[1]).sqrt() - 1.0).abs() <= 1e-12;
                if !plain && !snapped {
                    return Err(Error::HierarchyMismatch(format!(
                        "midpoint node {i} does not match edge ({a}, {b}) of the coarse mesh"
                    )));
                }
                builder.add(i, a, 0.5);
                builder.add(i, b, 0.5);
            }
        }
    }
    builder.build()
}

/// A nested ladder of meshes from coarsest to finest with the prolongation
/// matrices between consecutive levels.
#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    levels: Vec<TriangleMesh>,
    prolongations: Vec<SparseMatrix>,
}

impl MeshHierarchy {
    /// Refines `base` a total of `refinements` times, collecting all
    /// intermediate meshes and the interpolation operators between them.
    ///
    /// # Errors
    ///
    /// Propagated refinement/prolongation failures.
    pub fn from_base(base: TriangleMesh, refinements: usize) -> Result<Self> {
        let mut levels = vec![base];
        let mut prolongations = Vec::with_capacity(refinements);
        for _ in 0..refinements {
            let fine = refine_uniform(levels.last().expect("nonempty"))?;
            prolongations.push(prolongation(levels.last().expect("nonempty"), &fine)?);
            levels.push(fine);
        }
        Ok(MeshHierarchy {
            levels,
            prolongations,
        })
    }

    /// Number of levels (meshes).
    #[must_use]
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// The mesh at position `i` (0 = coarsest).
    #[must_use]
    pub fn level(&self, i: usize) -> &TriangleMesh {
        &self.levels[i]
    }

    /// All meshes, coarsest first.
    #[must_use]
    pub fn levels(&self) -> &[TriangleMesh] {
        &self.levels
    }

    /// Prolongation from level `i` to level `i+1`.
    #[must_use]
    pub fn prolongation(&self, i: usize) -> &SparseMatrix {
        &self.prolongations[i]
    }

    /// Interpolates a nodal vector from level `from` up to level `to` by
    /// chaining consecutive prolongations.
    ///
    /// # Errors
    ///
    /// `from > to` or a vector length mismatch.
    pub fn prolong_vector(&self, from: usize, to: usize, v: &[f64]) -> Result<Vec<f64>> {
        if from > to || to >= self.levels.len() {
            return Err(Error::HierarchyMismatch(format!(
                "cannot prolong from level {from} to level {to} in a {}-level hierarchy",
                self.levels.len()
            )));
        }
        if v.len() != self.levels[from].node_count() {
            return Err(Error::DimensionMismatch(format!(
                "vector has length {}, level {from} has {} nodes",
                v.len(),
                self.levels[from].node_count()
            )));
        }
        let mut cur = v.to_vec();
        for l in from..to {
            cur = self.prolongations[l].spmv(&cur);
        }
        Ok(cur)
    }
}
