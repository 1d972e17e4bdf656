//! Cluster-based reduced-order model for the microscale RVE problem.
//!
//! Cluster centroids become vertices of a reduced tetrahedral mesh carrying
//! six DOFs each (translation + fiber rotation). The restriction operator
//! is a polynomial-augmented radial point interpolation with guaranteed
//! linear reproduction; prolongation reuses the rigid-body blocks of the
//! deflation matrix. Cluster states are uniform: one constitutive update
//! per cluster per Newton iteration.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::clustering::{cluster_volumes, kmeans, ClusterPartition};
use crate::delaunay::delaunay_tets;
use crate::fem::{jacobi_pcg, norm};
use crate::homogenize::HomogenizedResponse;
use crate::material::{
    return_map, ElasticConstants, HardeningCurve, MaterialPointState, Voigt66,
};
use crate::mesh::Mesh;
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Cluster adjacency: two clusters are connected when some finite element
/// has nodes in both.
#[derive(Debug, Clone)]
pub struct ClusterGraph {
    pub k: usize,
    pub edges: BTreeSet<(usize, usize)>,
}

impl ClusterGraph {
    pub fn connected(&self, a: usize, b: usize) -> bool {
        a == b || self.edges.contains(&(a.min(b), a.max(b)))
    }
}

pub fn build_cluster_graph(mesh: &Mesh, partition: &ClusterPartition) -> ClusterGraph {
    let mut edges = BTreeSet::new();
    for t in &mesh.tets {
        for i in 0..4 {
            for j in (i + 1)..4 {
                let a = partition.assignment[t[i]];
                let b = partition.assignment[t[j]];
                if a != b && a != usize::MAX && b != usize::MAX {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    ClusterGraph { k: partition.k, edges }
}

/// Reduced mesh on cluster centroids; 6 DOFs per vertex.
#[derive(Debug, Clone)]
pub struct ReducedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub tets: Vec<[usize; 4]>,
    /// Tets kept by the coverage repair despite violating graph
    /// admissibility.
    pub readmitted: Vec<bool>,
}

/// Delaunay on the centroids, filtered to graph-admissible tets, then a
/// coverage repair: if a vertex loses every incident tet, dropped tets
/// incident to it are re-admitted in ascending order of violated edges.
pub fn build_reduced_mesh(centroids: &[Vector3<f64>], graph: &ClusterGraph) -> Result<ReducedMesh> {
    build_reduced_mesh_in(centroids, graph, None)
}

/// Deterministic jitter of about 2% of the mean point spacing.
fn jitter_points(points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    let vol = ext.x.max(1e-30) * ext.y.max(1e-30) * ext.z.max(1e-30);
    let spacing = (vol / points.len() as f64).cbrt();
    let amp = 0.02 * spacing;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut q = *p;
            for axis in 0..3u64 {
                let r = splitmix64(0x5eed ^ ((i as u64) << 2 | axis));
                let u = (r >> 11) as f64 / (1u64 << 53) as f64;
                q[axis as usize] += (u - 0.5) * amp;
            }
            q
        })
        .collect()
}

/// Uniform-grid point locator over a tet mesh for fast inside/outside
/// queries (tets binned by bounding box).
struct SolidLocator<'a> {
    mesh: &'a Mesh,
    lo: Vector3<f64>,
    cell: Vector3<f64>,
    dims: [usize; 3],
    bins: Vec<Vec<usize>>,
}

impl<'a> SolidLocator<'a> {
    fn new(mesh: &'a Mesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let n = ((mesh.tets.len() as f64).cbrt().ceil() as usize).clamp(1, 64);
        let dims = [n, n, n];
        let ext = hi - lo;
        let cell = Vector3::new(
            (ext.x / n as f64).max(1e-30),
            (ext.y / n as f64).max(1e-30),
            (ext.z / n as f64).max(1e-30),
        );
        let mut bins = vec![Vec::new(); n * n * n];
        for (ti, t) in mesh.tets.iter().enumerate() {
            let mut tlo = mesh.nodes[t[0]];
            let mut thi = tlo;
            for &v in &t[1..] {
                tlo = tlo.inf(&mesh.nodes[v]);
                thi = thi.sup(&mesh.nodes[v]);
            }
            let idx = |p: &Vector3<f64>, d: usize| -> usize {
                (((p[d] - lo[d]) / cell[d]).floor() as isize).clamp(0, n as isize - 1) as usize
            };
            for ix in idx(&tlo, 0)..=idx(&thi, 0) {
                for iy in idx(&tlo, 1)..=idx(&thi, 1) {
                    for iz in idx(&tlo, 2)..=idx(&thi, 2) {
                        bins[(ix * n + iy) * n + iz].push(ti);
                    }
                }
            }
        }
        SolidLocator { mesh, lo, cell, dims, bins }
    }

    /// True when `p` lies inside (or on) some tet of the mesh.
    fn contains(&self, p: &Vector3<f64>) -> bool {
        let tol = -1e-9;
        let mut cell_idx = [0usize; 3];
        for d in 0..3 {
            let i = ((p[d] - self.lo[d]) / self.cell[d]).floor() as isize;
            cell_idx[d] = i.clamp(0, self.dims[d] as isize - 1) as usize;
        }
        let bin = &self.bins[(cell_idx[0] * self.dims[1] + cell_idx[1]) * self.dims[2] + cell_idx[2]];
        for &ti in bin {
            let t = &self.mesh.tets[ti];
            let a = self.mesh.nodes[t[0]];
            let d = p - a;
            let j = Matrix3::from_columns(&[
                self.mesh.nodes[t[1]] - a,
                self.mesh.nodes[t[2]] - a,
                self.mesh.nodes[t[3]] - a,
            ]);
            let Some(inv) = j.try_inverse() else { continue };
            let b = inv * d;
            if b.x >= tol && b.y >= tol && b.z >= tol && b.x + b.y + b.z <= 1.0 - tol {
                return true;
            }
        }
        false
    }
}

/// [`build_reduced_mesh`] with an optional material test against the FE
/// solid. The graph-admissibility filter exists to stop tets from bridging
/// pores, but in bulk material it also fires on diagonal mismatches between
/// the Delaunay and the FE connectivity, and dropping those tets would
/// leave holes that break patch consistency of the reduced system. With a
/// solid mesh available, an inadmissible tet whose quadrature samples still
/// land in the solid is re-admitted (flagged). Vertex-coverage repair then
/// re-admits remaining dropped tets (fewest violated edges first) until
/// every vertex is covered.
pub fn build_reduced_mesh_in(
    centroids: &[Vector3<f64>],
    graph: &ClusterGraph,
    solid: Option<&Mesh>,
) -> Result<ReducedMesh> {
    // Triangulate a deterministically jittered copy and keep the jittered
    // coordinates as the reduced geometry. Centroids of near-regular
    // clusterings are frequently cospherical; triangulating them directly
    // yields flattened slivers whose removal leaves diagonal-mismatched
    // internal faces, and that non-conformity breaks patch consistency of
    // the reduced internal force. A small jitter costs nothing (any
    // conforming mesh reproduces affine fields exactly) and guarantees
    // well-shaped tets.
    let centroids = jitter_points(centroids);
    let centroids = centroids.as_slice();
    let all_tets = delaunay_tets(centroids)?;
    let violations: Vec<usize> = all_tets
        .iter()
        .map(|t| {
            let mut v = 0;
            for i in 0..4 {
                for j in (i + 1)..4 {
                    if !graph.connected(t[i], t[j]) {
                        v += 1;
                    }
                }
            }
            v
        })
        .collect();

    // Material test at the tet centroid.
    let locator = solid.map(SolidLocator::new);
    let in_solid: Vec<bool> = match &locator {
        Some(loc) => all_tets
            .iter()
            .map(|t| {
                let c = t.iter().map(|&v| centroids[v]).sum::<Vector3<f64>>() / 4.0;
                loc.contains(&c)
            })
            .collect(),
        None => vec![true; all_tets.len()],
    };
    let mut kept = Vec::new();
    let mut readmitted = vec![false; all_tets.len()];
    for t in 0..all_tets.len() {
        if violations[t] == 0 {
            kept.push(t);
        } else if in_solid[t] {
            kept.push(t);
            readmitted[t] = true;
        }
    }
    let mut covered = vec![false; centroids.len()];
    for &t in &kept {
        for &v in &all_tets[t] {
            covered[v] = true;
        }
    }
    let mut dropped: Vec<usize> =
        (0..all_tets.len()).filter(|&t| violations[t] > 0 && !in_solid[t]).collect();
    dropped.sort_by_key(|&t| violations[t]);
    for &t in &dropped {
        if all_tets[t].iter().any(|&v| !covered[v]) {
            kept.push(t);
            readmitted[t] = true;
            for &v in &all_tets[t] {
                covered[v] = true;
            }
        }
    }
    if covered.iter().any(|&c| !c) {
        return Err(Error::Geometry("reduced mesh leaves vertices uncovered".into()));
    }
    kept.sort_unstable();
    Ok(ReducedMesh {
        vertices: centroids.to_vec(),
        tets: kept.iter().map(|&t| all_tets[t]).collect(),
        readmitted: kept.iter().map(|&t| readmitted[t]).collect(),
    })
}

/// Per-cluster restriction weight rows mapping member nodal values to the
/// centroid value.
#[derive(Debug, Clone)]
pub struct RestrictionOperator {
    /// rows[c]: (node id, weight).
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Clusters that fell back to a least-squares linear fit.
    pub fallback: Vec<bool>,
}

/// PR-PIM weight row: cubic radial basis R(r) = r^3 augmented with the
/// four-term linear polynomial basis (centered on the member mean for
/// conditioning). Returns (weights, used_fallback).
pub fn prpim_weights(coords: &[Vector3<f64>], eval: &Vector3<f64>) -> Result<(Vec<f64>, bool)> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::Config("prpim_weights on empty cluster".into()));
    }
    if n == 1 {
        return Ok((vec![1.0], true));
    }
    let mean: Vector3<f64> = coords.iter().sum::<Vector3<f64>>() / n as f64;
    let poly = |p: &Vector3<f64>| {
        let d = p - mean;
        [1.0, d.x, d.y, d.z]
    };
    const M: usize = 4;
    if n >= M {
        let mut r_q = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                r_q[(i, j)] = (coords[i] - coords[j]).norm().powi(3);
            }
        }
        let mut z = DMatrix::zeros(n, M);
        for (i, p) in coords.iter().enumerate() {
            let row = poly(p);
            for (j, v) in row.into_iter().enumerate() {
                z[(i, j)] = v;
            }
        }
        // Explicit block inversion: S_b = (Z^T R^-1 Z)^-1 Z^T R^-1,
        // S_a = R^-1 (I - Z S_b); the weight row evaluates both at the
        // centroid.
        if let Some(r_lu) = try_lu(&r_q) {
            let r_inv_z = r_lu.solve(&z).unwrap();
            let m_small = z.transpose() * &r_inv_z;
            if let Some(m_lu) = try_lu(&m_small) {
                let s_b = m_lu.solve(&r_inv_z.transpose()).unwrap();
                let s_a = r_lu.solve(&(DMatrix::identity(n, n) - &z * &s_b)).unwrap();
                let r_eval = DVector::from_fn(n, |i, _| (coords[i] - eval).norm().powi(3));
                let z_eval = DVector::from_column_slice(&poly(eval));
                let w = s_a.transpose() * r_eval + s_b.transpose() * z_eval;
                return Ok((w.as_slice().to_vec(), false));
            }
        }
    }
    // Least-squares linear fit via pseudo-inverse: exact for constants and
    // for whatever linear variation the member geometry supports.
    let mut z = DMatrix::zeros(n, M);
    for (i, p) in coords.iter().enumerate() {
        let row = poly(p);
        for (j, v) in row.into_iter().enumerate() {
            z[(i, j)] = v;
        }
    }
    let pinv = z
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Singular(format!("restriction fallback pseudo-inverse: {e}")))?;
    let z_eval = DVector::from_column_slice(&poly(eval));
    let w = pinv.transpose() * z_eval;
    Ok((w.as_slice().to_vec(), true))
}

fn try_lu(m: &DMatrix<f64>) -> Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = m.clone().lu();
    let n = m.nrows();
    let mut max_diag: f64 = 0.0;
    let mut min_diag = f64::INFINITY;
    for i in 0..n {
        let d = lu.u()[(i, i)].abs();
        max_diag = max_diag.max(d);
        min_diag = min_diag.min(d);
    }
    if min_diag > 1e-12 * max_diag.max(1e-300) {
        Some(lu)
    } else {
        None
    }
}

/// Builds the restriction operator for all clusters at once.
pub fn build_restriction(mesh: &Mesh, partition: &ClusterPartition) -> Result<RestrictionOperator> {
    let mut rows = Vec::with_capacity(partition.k);
    let mut fallback = Vec::with_capacity(partition.k);
    for c in 0..partition.k {
        let members = &partition.members[c];
        let coords: Vec<Vector3<f64>> = members.iter().map(|&n| mesh.nodes[n]).collect();
        let (w, fb) = prpim_weights(&coords, &partition.centroids[c])?;
        rows.push(members.iter().copied().zip(w).collect());
        fallback.push(fb);
    }
    Ok(RestrictionOperator { rows, fallback })
}

/// Applies the weight rows componentwise to a 3 n_nodes field.
pub fn restrict(op: &RestrictionOperator, nodal: &[f64]) -> Vec<Vector3<f64>> {
    op.rows
        .iter()
        .map(|row| {
            let mut v = Vector3::zeros();
            for &(node, w) in row {
                for d in 0..3 {
                    v[d] += w * nodal[3 * node + d];
                }
            }
            v
        })
        .collect()
}

/// Maps reduced DOFs (6 per cluster: translation then rotation) back to FE
/// nodes: u_i = t_c + theta_c x (x_i - centroid_c).
pub fn prolongate(mesh: &Mesh, partition: &ClusterPartition, reduced: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; 3 * mesh.n_nodes()];
    for (node, &c) in partition.assignment.iter().enumerate() {
        if c == usize::MAX {
            continue;
        }
        let t = Vector3::new(reduced[6 * c], reduced[6 * c + 1], reduced[6 * c + 2]);
        let theta = Vector3::new(reduced[6 * c + 3], reduced[6 * c + 4], reduced[6 * c + 5]);
        let v = t + theta.cross(&(mesh.nodes[node] - partition.centroids[c]));
        for d in 0..3 {
            u[3 * node + d] = v[d];
        }
    }
    u
}

pub type SfrB = SMatrix<f64, 6, 24>;

/// Barycentric 4-point Gauss rule (degree 2) for tets.
const GAUSS_A: f64 = 0.585_410_196_624_968_5;
const GAUSS_B: f64 = 0.138_196_601_125_010_5;

/// Strain-displacement matrices of the fiber-rotation-enriched tet at the
/// four Gauss points, plus the element volume. DOF order per vertex:
/// [u_x, u_y, u_z, theta_x, theta_y, theta_z].
pub fn sfr_b_matrices(verts: &[Vector3<f64>; 4]) -> Result<([SfrB; 4], f64)> {
    let j = Matrix3::from_columns(&[
        verts[1] - verts[0],
        verts[2] - verts[0],
        verts[3] - verts[0],
    ]);
    let det = j.determinant();
    if det <= 0.0 {
        return Err(Error::Geometry("degenerate or inverted reduced tet".into()));
    }
    let volume = det / 6.0;
    let j_inv = j.try_inverse().unwrap();
    let mut grads = [Vector3::zeros(); 4];
    for i in 0..3 {
        grads[i + 1] = Vector3::new(j_inv[(i, 0)], j_inv[(i, 1)], j_inv[(i, 2)]);
        grads[0] -= grads[i + 1];
    }

    let mut out = [SfrB::zeros(); 4];
    for (q, b) in out.iter_mut().enumerate() {
        // Barycentric coordinates of Gauss point q.
        let mut bary = [GAUSS_B; 4];
        bary[q] = GAUSS_A;
        let xq = (0..4).map(|i| verts[i] * bary[i]).sum::<Vector3<f64>>();
        for i in 0..4 {
            let g = grads[i];
            let ni = bary[i];
            let d = xq - verts[i];
            // Translation columns: classic constant-strain blocks.
            let c = 6 * i;
            b[(0, c)] = g.x;
            b[(1, c + 1)] = g.y;
            b[(2, c + 2)] = g.z;
            b[(3, c)] = g.y;
            b[(3, c + 1)] = g.x;
            b[(4, c)] = g.z;
            b[(4, c + 2)] = g.x;
            b[(5, c + 1)] = g.z;
            b[(5, c + 2)] = g.y;
            // Rotation columns: v = N_i (e_r x d); displacement gradient
            // H_aj = dN_i/dx_j (e_r x d)_a + N_i (e_r x e_j)_a.
            for r in 0..3 {
                let e_r = Vector3::ith(r, 1.0);
                let cross_d = e_r.cross(&d);
                let mut h = Matrix3::zeros();
                for a in 0..3 {
                    for jj in 0..3 {
                        let e_j = Vector3::ith(jj, 1.0);
                        h[(a, jj)] = g[jj] * cross_d[a] + ni * e_r.cross(&e_j)[a];
                    }
                }
                let eps = (h + h.transpose()) / 2.0;
                let col = c + 3 + r;
                b[(0, col)] = eps[(0, 0)];
                b[(1, col)] = eps[(1, 1)];
                b[(2, col)] = eps[(2, 2)];
                b[(3, col)] = 2.0 * eps[(0, 1)];
                b[(4, col)] = 2.0 * eps[(0, 2)];
                b[(5, col)] = 2.0 * eps[(1, 2)];
            }
        }
    }
    Ok((out, volume))
}

/// Ke = V * sum_q (1/4) B_q^T C B_q.
pub fn sfr_element_stiffness(verts: &[Vector3<f64>; 4], c: &Voigt66) -> Result<SMatrix<f64, 24, 24>> {
    let (bs, volume) = sfr_b_matrices(verts)?;
    let mut ke = SMatrix::<f64, 24, 24>::zeros();
    for b in &bs {
        ke += b.transpose() * c * b * (volume / 4.0);
    }
    Ok(ke)
}

/// Axial vector of the skew part of a matrix.
pub fn axial(m: &Matrix3<f64>) -> Vector3<f64> {
    let w = (m - m.transpose()) / 2.0;
    Vector3::new(w[(2, 1)], w[(0, 2)], w[(1, 0)])
}

/// Options of the reduced micro solver.
#[derive(Debug, Clone)]
pub struct RomOptions {
    /// Constrain all six DOFs of boundary clusters (rotations from the
    /// skew part of F - I). When false only translations are prescribed.
    pub constrain_boundary_rotations: bool,
    /// Drilling stabilization factor: each element adds the penalty energy
    /// `stabilization * G * V/4 * sum_i |theta_i - omega(u)|^2`, tying the
    /// vertex rotations to the continuum rotation of the translation field.
    /// The enriched element carries four spurious zero-energy modes beyond
    /// the rigid ones, and the penalty removes them; it vanishes on rigid
    /// motions and on affine states (where theta equals the continuum
    /// rotation), so consistency is unaffected.
    pub stabilization: f64,
    pub tol_newton: f64,
    pub tol_cg: f64,
    pub max_newton_iters: usize,
    pub seed: u64,
}

impl Default for RomOptions {
    fn default() -> Self {
        RomOptions {
            constrain_boundary_rotations: true,
            stabilization: 0.0,
            tol_newton: 1e-3,
            tol_cg: 1e-8,
            max_newton_iters: 40,
            seed: 0,
        }
    }
}

/// Output of one reduced macro-strain increment.
#[derive(Debug, Clone)]
pub struct MicroStepOutput {
    /// Prolongated nodal displacement (3 per FE node).
    pub nodal_displacement: Vec<f64>,
    /// Per-cluster stress tensors.
    pub cluster_stress: Vec<Matrix3<f64>>,
    /// Per-cluster strain (Voigt).
    pub cluster_strain: Vec<SMatrix<f64, 6, 1>>,
    pub response: HomogenizedResponse,
    pub newton_iters: usize,
}

#[derive(Clone)]
struct ReducedElement {
    bs: [SfrB; 4],
    volume: f64,
    /// Continuum-rotation operator: `rot * q_e` is the axial vector of the
    /// skew part of the displacement gradient (from the translation DOFs).
    rot: SMatrix<f64, 3, 24>,
}

/// Serialized committed history of a reduced micro model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RomCheckpoint {
    pub states: Vec<MaterialPointState>,
    pub strains: Vec<[f64; 6]>,
    pub q: Vec<f64>,
    pub h: [[f64; 3]; 3],
}

/// Converged-but-uncommitted state of one reduced micro increment.
#[derive(Debug, Clone)]
pub struct RomTrial {
    q: Vec<f64>,
    states: Vec<MaterialPointState>,
    strains: Vec<SMatrix<f64, 6, 1>>,
    h: Matrix3<f64>,
}

/// Persistent cluster-based reduced model of one RVE. Cluster states carry
/// over between calls, so deformation-gradient paths (cyclic loading)
/// accumulate plasticity correctly.
#[derive(Clone)]
pub struct MicroRom {
    pub mesh: Mesh,
    pub partition: ClusterPartition,
    pub reduced: ReducedMesh,
    pub restriction: RestrictionOperator,
    /// Tributary FE volume per cluster (solid only).
    pub cluster_volume: Vec<f64>,
    pub boundary_clusters: Vec<bool>,
    pub x0: Vector3<f64>,
    /// Full RVE box volume, pores included.
    pub box_volume: f64,
    pub elastic: ElasticConstants,
    pub hardening: HardeningCurve,
    pub options: RomOptions,
    /// Per-cluster strain-gather blocks: `cluster_g[c]` lists `(vertex,
    /// 6x6 block)` with cluster strain `eps_c = sum block * q_vertex`
    /// (sub-point strains of the cluster's vertex slots, volume-averaged).
    cluster_g: Vec<Vec<(usize, SMatrix<f64, 6, 6>)>>,
    /// Reduced-element sub-point strain operators and volumes.
    elements: Vec<ReducedElement>,
    /// Elastic stiffness tensor in Voigt form.
    c_el: Voigt66,
    /// Drilling penalty modulus (stabilization factor times shear modulus).
    stab_coeff: f64,
    /// Elastic reduced stiffness on the free DOFs (constant).
    k_free_elastic: CsrMatrix,
    /// Elastic reduced stiffness over all 6k DOFs (constant).
    k_full_elastic: CsrMatrix,
    // Committed history.
    states: Vec<MaterialPointState>,
    committed_strain: Vec<SMatrix<f64, 6, 1>>,
    q: Vec<f64>,
    h_committed: Matrix3<f64>,
    free_index: Vec<Option<usize>>,
    n_free: usize,
}

impl MicroRom {
    pub fn new(
        mesh: Mesh,
        k: usize,
        elastic: ElasticConstants,
        hardening: HardeningCurve,
        options: RomOptions,
    ) -> Result<Self> {
        let partition = kmeans(&mesh.nodes, k, options.seed)?;
        let graph = build_cluster_graph(&mesh, &partition);
        let reduced = build_reduced_mesh_in(&partition.centroids, &graph, Some(&mesh))?;
        let restriction = build_restriction(&mesh, &partition)?;
        let cluster_volume = cluster_volumes(&mesh, &partition)?;

        let elements: Vec<ReducedElement> = reduced
            .tets
            .iter()
            .map(|t| {
                let verts = [
                    reduced.vertices[t[0]],
                    reduced.vertices[t[1]],
                    reduced.vertices[t[2]],
                    reduced.vertices[t[3]],
                ];
                let (bs, volume) = sfr_b_matrices(&verts)?;
                let j = Matrix3::from_columns(&[
                    verts[1] - verts[0],
                    verts[2] - verts[0],
                    verts[3] - verts[0],
                ]);
                let j_inv = j.try_inverse().ok_or_else(|| {
                    Error::Geometry("degenerate reduced tet".into())
                })?;
                let mut grads = [Vector3::zeros(); 4];
                for i in 0..3 {
                    grads[i + 1] = Vector3::new(j_inv[(i, 0)], j_inv[(i, 1)], j_inv[(i, 2)]);
                    grads[0] -= grads[i + 1];
                }
                // omega(u) = 1/2 curl u = 1/2 sum_i g_i x u_i.
                let mut rot = SMatrix::<f64, 3, 24>::zeros();
                for (i, g) in grads.iter().enumerate() {
                    let c = 6 * i;
                    rot[(0, c + 1)] = -0.5 * g.z;
                    rot[(0, c + 2)] = 0.5 * g.y;
                    rot[(1, c)] = 0.5 * g.z;
                    rot[(1, c + 2)] = -0.5 * g.x;
                    rot[(2, c)] = -0.5 * g.y;
                    rot[(2, c + 1)] = 0.5 * g.x;
                }
                Ok(ReducedElement { bs, volume, rot })
            })
            .collect::<Result<_>>()?;

        let mut incident_volume = vec![0.0; k];
        for (e, t) in reduced.tets.iter().enumerate() {
            for &v in t {
                incident_volume[v] += elements[e].volume;
            }
        }
        if incident_volume.iter().any(|&v| v <= 0.0) {
            return Err(Error::Geometry("reduced vertex without incident volume".into()));
        }

        // Per-cluster strain gather G_c = d eps_c / dq. The SFR strain
        // field is linear inside each tet, so the quadrature-point strain
        // operators extrapolate exactly to the tet corners; the cluster
        // strain volume-averages the corner strains of every incident tet
        // at the cluster's vertex. Sampling at the corner (instead of the
        // interior quadrature point) sees strain concentrations at their
        // full amplitude, which drives the per-cluster return map with a
        // representative rather than smoothed severity. For a uniform
        // strain state corner and quadrature strains coincide, so the
        // exact-limit behavior is unchanged.
        let mut cluster_maps: Vec<std::collections::BTreeMap<usize, SMatrix<f64, 6, 6>>> =
            vec![std::collections::BTreeMap::new(); k];
        for (e, t) in reduced.tets.iter().enumerate() {
            let el = &elements[e];
            let b_sum = el.bs[0] + el.bs[1] + el.bs[2] + el.bs[3];
            for (i, &c) in t.iter().enumerate() {
                let b_corner = (el.bs[i] - b_sum * GAUSS_B) / (GAUSS_A - GAUSS_B);
                let w = el.volume / incident_volume[c];
                for (j, &v) in t.iter().enumerate() {
                    let block = b_corner.fixed_view::<6, 6>(0, 6 * j) * w;
                    *cluster_maps[c].entry(v).or_insert_with(SMatrix::zeros) += block;
                }
            }
        }
        let cluster_g: Vec<Vec<(usize, SMatrix<f64, 6, 6>)>> =
            cluster_maps.into_iter().map(|m| m.into_iter().collect()).collect();
        let c_el = crate::material::elastic_tensor(&elastic);
        let stab_coeff = options.stabilization * elastic.e / (2.0 * (1.0 + elastic.nu));

        let boundary_nodes = box_boundary_nodes(&mesh)?;
        let mut boundary_clusters = vec![false; k];
        for &n in &boundary_nodes {
            let c = partition.assignment[n];
            if c != usize::MAX {
                boundary_clusters[c] = true;
            }
        }

        let (lo, hi) = mesh.bounding_box();
        let ext = hi - lo;
        let box_volume = ext.x * ext.y * ext.z;
        let x0 = (lo + hi) / 2.0;

        // Free-DOF numbering over the reduced system.
        let mut free_index = vec![None; 6 * k];
        let mut n_free = 0;
        for c in 0..k {
            for d in 0..6 {
                let constrained = boundary_clusters[c]
                    && (d < 3 || options.constrain_boundary_rotations);
                if !constrained {
                    free_index[6 * c + d] = Some(n_free);
                    n_free += 1;
                }
            }
        }
        // Sparsity from the cluster stencils (supersets of the element
        // stencils), filled once with the constant elastic stiffness.
        let mut free_pairs = Vec::new();
        let mut full_pairs = Vec::new();
        for g in &cluster_g {
            for &(a, _) in g {
                for &(b, _) in g {
                    for da in 0..6 {
                        for db in 0..6 {
                            full_pairs.push((6 * a + da, 6 * b + db));
                            if let (Some(fa), Some(fb)) =
                                (free_index[6 * a + da], free_index[6 * b + db])
                            {
                                free_pairs.push((fa, fb));
                            }
                        }
                    }
                }
            }
        }
        let mut k_free_elastic = CsrMatrix::from_pattern(n_free, free_pairs);
        let mut k_full_elastic = CsrMatrix::from_pattern(6 * k, full_pairs);
        for (e, t) in reduced.tets.iter().enumerate() {
            let el = &elements[e];
            let mut ke = SMatrix::<f64, 24, 24>::zeros();
            for b in &el.bs {
                ke += b.transpose() * c_el * b * (el.volume / 4.0);
            }
            let stab = stab_coeff * el.volume / 4.0;
            for i in 0..4 {
                let mut p = -el.rot;
                for r in 0..3 {
                    p[(r, 6 * i + 3 + r)] += 1.0;
                }
                ke += p.transpose() * p * stab;
            }
            for (i, &a) in t.iter().enumerate() {
                for (j, &b) in t.iter().enumerate() {
                    for da in 0..6 {
                        for db in 0..6 {
                            let v = ke[(6 * i + da, 6 * j + db)];
                            let slot = k_full_elastic.slot(6 * a + da, 6 * b + db).unwrap();
                            k_full_elastic.values[slot] += v;
                            if let (Some(fa), Some(fb)) =
                                (free_index[6 * a + da], free_index[6 * b + db])
                            {
                                let slot = k_free_elastic.slot(fa, fb).unwrap();
                                k_free_elastic.values[slot] += v;
                            }
                        }
                    }
                }
            }
        }

        Ok(MicroRom {
            states: vec![MaterialPointState::default(); k],
            committed_strain: vec![SMatrix::zeros(); k],
            q: vec![0.0; 6 * k],
            h_committed: Matrix3::zeros(),
            mesh,
            partition,
            reduced,
            restriction,
            cluster_volume,
            boundary_clusters,
            x0,
            box_volume,
            elastic,
            hardening,
            options,
            cluster_g,
            elements,
            c_el,
            stab_coeff,
            k_free_elastic,
            k_full_elastic,
            free_index,
            n_free,
        })
    }

    pub fn k(&self) -> usize {
        self.partition.k
    }

    pub fn cluster_states(&self) -> &[MaterialPointState] {
        &self.states
    }

    /// Cluster strains (volume-weighted mean of incident reduced-tet
    /// centroid strains) for the reduced DOF vector `q`.
    fn cluster_strains(&self, q: &[f64]) -> Vec<SMatrix<f64, 6, 1>> {
        let k = self.partition.k;
        let mut acc = vec![SMatrix::<f64, 6, 1>::zeros(); k];
        for c in 0..k {
            for &(v, ref block) in &self.cluster_g[c] {
                let qv = SMatrix::<f64, 6, 1>::from_column_slice(&q[6 * v..6 * v + 6]);
                acc[c] += block * qv;
            }
        }
        acc
    }

    /// One constitutive sweep: per-cluster return map against committed
    /// states, then element stress/tangent as the mean over the four vertex
    /// clusters.
    fn constitutive(
        &self,
        q: &[f64],
    ) -> Result<(Vec<MaterialPointState>, Vec<Voigt66>, Vec<SMatrix<f64, 6, 1>>)> {
        let strains = self.cluster_strains(q);
        let mut states = Vec::with_capacity(self.partition.k);
        let mut tangents = Vec::with_capacity(self.partition.k);
        for c in 0..self.partition.k {
            let d_eps =
                crate::fem::strain_tensor_from_voigt(&(strains[c] - self.committed_strain[c]));
            let (s, t) = return_map(&self.states[c], &d_eps, &self.elastic, &self.hardening)?;
            states.push(s);
            tangents.push(t);
        }
        Ok((states, tangents, strains))
    }

    /// Reduced internal force over all 6k DOFs. Each SFR sub-point sits
    /// next to one vertex; its stress expands the cluster state to first
    /// order, `sigma_p = sigma_c + C_c (eps_p - eps_c)`, so intra-cluster
    /// strain variation is carried at the consistent (not elastic)
    /// stiffness while the return map stays a per-cluster operation.
    ///
    /// When boundary rotations are left free, the rotational rows of
    /// boundary clusters get the moment of the volume-mean stress
    /// subtracted. The rotational enrichment is nonconforming against the
    /// uniform-displacement boundary condition (the mean field exerts
    /// one-sided moments on boundary vertex stars), so without this the
    /// enrichment relaxes even homogeneous states; with it the boundary
    /// rotations respond to stress fluctuations only, and an affine state
    /// remains an exact equilibrium.
    fn internal_force(
        &self,
        q: &[f64],
        strains: &[SMatrix<f64, 6, 1>],
        states: &[MaterialPointState],
        tangents: &[Voigt66],
    ) -> Vec<f64> {
        let mut f = vec![0.0; 6 * self.partition.k];
        let mut sigma_sum = SMatrix::<f64, 6, 1>::zeros();
        let mut vol_sum = 0.0;
        for (e, t) in self.reduced.tets.iter().enumerate() {
            let el = &self.elements[e];
            let mut qe = SMatrix::<f64, 24, 1>::zeros();
            for (j, &v) in t.iter().enumerate() {
                for d in 0..6 {
                    qe[6 * j + d] = q[6 * v + d];
                }
            }
            let w = el.volume / 4.0;
            let mut fe = SMatrix::<f64, 24, 1>::zeros();
            for (i, &c) in t.iter().enumerate() {
                let eps_p = el.bs[i] * qe;
                let sigma = crate::material::stress_to_voigt(&states[c].stress)
                    + tangents[c] * (eps_p - strains[c]);
                fe += el.bs[i].transpose() * (sigma * w);
                sigma_sum += sigma * w;
            }
            let stab = self.stab_coeff * w;
            let omega = el.rot * qe;
            for i in 0..4 {
                let mut m = -omega;
                for r in 0..3 {
                    m[r] += qe[6 * i + 3 + r];
                }
                let ms = m * stab;
                for r in 0..3 {
                    fe[6 * i + 3 + r] += ms[r];
                }
                fe -= el.rot.transpose() * ms;
            }
            vol_sum += el.volume;
            for (j, &v) in t.iter().enumerate() {
                for d in 0..6 {
                    f[6 * v + d] += fe[6 * j + d];
                }
            }
        }
        if !self.options.constrain_boundary_rotations {
            let sigma_mean = sigma_sum / vol_sum.max(1e-30);
            let mut g = vec![0.0; 6 * self.partition.k];
            for (e, t) in self.reduced.tets.iter().enumerate() {
                let el = &self.elements[e];
                if !t.iter().any(|&v| self.boundary_clusters[v]) {
                    continue;
                }
                let w = el.volume / 4.0;
                let mut fe = SMatrix::<f64, 24, 1>::zeros();
                for i in 0..4 {
                    fe += el.bs[i].transpose() * (sigma_mean * w);
                }
                for (j, &v) in t.iter().enumerate() {
                    for d in 0..6 {
                        g[6 * v + d] += fe[6 * j + d];
                    }
                }
            }
            for c in 0..self.partition.k {
                if self.boundary_clusters[c] {
                    for d in 3..6 {
                        f[6 * c + d] -= g[6 * c + d];
                    }
                }
            }
        }
        f
    }

    /// Jacobian of [`Self::internal_force`] on the free DOFs:
    /// `K = K_el - sum_p w_p B_p^T (C_el - C_c(p)) B_p` (the fixed-tangent
    /// part; the state-derivative terms vanish at convergence).
    fn assemble(&self, tangents: &[Voigt66]) -> CsrMatrix {
        let mut k = self.k_free_elastic.clone();
        let c_norm = self.c_el.norm();
        for (e, t) in self.reduced.tets.iter().enumerate() {
            let el = &self.elements[e];
            let w = el.volume / 4.0;
            let mut ke = SMatrix::<f64, 24, 24>::zeros();
            let mut touched = false;
            for (i, &c) in t.iter().enumerate() {
                let dc = self.c_el - tangents[c];
                if dc.norm() <= 1e-14 * c_norm {
                    continue;
                }
                ke += el.bs[i].transpose() * dc * el.bs[i] * w;
                touched = true;
            }
            if !touched {
                continue;
            }
            for (i, &a) in t.iter().enumerate() {
                for (j, &b) in t.iter().enumerate() {
                    for da in 0..6 {
                        if let Some(fa) = self.free_index[6 * a + da] {
                            for db in 0..6 {
                                if let Some(fb) = self.free_index[6 * b + db] {
                                    let slot = k.slot(fa, fb).unwrap();
                                    k.values[slot] -= ke[(6 * i + da, 6 * j + db)];
                                }
                            }
                        }
                    }
                }
            }
        }
        k
    }

    /// Advances the model to macroscopic deformation gradient `f_m` and
    /// commits the converged state.
    pub fn solve_step(&mut self, f_m: &Matrix3<f64>) -> Result<MicroStepOutput> {
        let (out, trial) = self.trial_step(f_m)?;
        self.commit(trial);
        Ok(out)
    }

    /// Solves for `f_m` from the committed state without committing; the
    /// returned trial can be committed later (FE-squared Newton needs
    /// repeated trials per increment).
    pub fn trial_step(&self, f_m: &Matrix3<f64>) -> Result<(MicroStepOutput, RomTrial)> {
        let h = f_m - Matrix3::identity();
        let dh = h - self.h_committed;
        let theta_h = axial(&h);
        let d_theta = axial(&dh);

        // Initial guess: previous solution plus the homogeneous increment;
        // boundary clusters get exact prescribed values.
        let mut q = self.q.clone();
        for c in 0..self.partition.k {
            let rel = self.reduced.vertices[c] - self.x0;
            if self.boundary_clusters[c] {
                let t = h * rel;
                for d in 0..3 {
                    q[6 * c + d] = t[d];
                }
                if self.options.constrain_boundary_rotations {
                    for d in 0..3 {
                        q[6 * c + 3 + d] = theta_h[d];
                    }
                } else {
                    for d in 0..3 {
                        q[6 * c + 3 + d] += d_theta[d];
                    }
                }
            } else {
                let dt = dh * rel;
                for d in 0..3 {
                    q[6 * c + d] += dt[d];
                    q[6 * c + 3 + d] += d_theta[d];
                }
            }
        }

        let mut newton_iters = 0;
        let mut converged = false;
        let mut final_states = Vec::new();
        let mut final_tangents = Vec::new();
        let mut final_strains = Vec::new();
        let mut rel_res = 0.0;
        for iter in 0..=self.options.max_newton_iters {
            let (states, tangents, strains) = self.constitutive(&q)?;
            let f_int = self.internal_force(&q, &strains, &states, &tangents);
            let mut res_free = 0.0;
            let mut res_fixed = 0.0;
            for (dof, slot) in self.free_index.iter().enumerate() {
                if slot.is_some() {
                    res_free += f_int[dof] * f_int[dof];
                } else {
                    res_fixed += f_int[dof] * f_int[dof];
                }
            }
            rel_res = res_free.sqrt() / res_fixed.sqrt().max(1e-12);
            if rel_res <= self.options.tol_newton || self.n_free == 0 {
                final_states = states;
                final_tangents = tangents;
                final_strains = strains;
                converged = true;
                newton_iters = iter;
                break;
            }
            if iter == self.options.max_newton_iters {
                break;
            }
            let k = self.assemble(&tangents);
            let mut rhs = vec![0.0; self.n_free];
            for (dof, slot) in self.free_index.iter().enumerate() {
                if let Some(f) = slot {
                    rhs[*f] = -f_int[dof];
                }
            }
            if norm(&rhs) > 0.0 {
                let (du, _) = jacobi_pcg(&k, &rhs, self.options.tol_cg, 20 * self.n_free.max(50))?;
                // Backtracking line search on the free residual norm.
                let res_at = |q_trial: &[f64]| -> Result<f64> {
                    let (states, tangents, strains) = self.constitutive(q_trial)?;
                    let f = self.internal_force(q_trial, &strains, &states, &tangents);
                    let mut r = 0.0;
                    for (dof, slot) in self.free_index.iter().enumerate() {
                        if slot.is_some() {
                            r += f[dof] * f[dof];
                        }
                    }
                    Ok(r.sqrt())
                };
                let res_now = res_free.sqrt();
                let mut alpha = 1.0;
                let mut trial = q.clone();
                for attempt in 0..5 {
                    for (dof, slot) in self.free_index.iter().enumerate() {
                        if let Some(f) = slot {
                            trial[dof] = q[dof] + alpha * du[*f];
                        }
                    }
                    if attempt == 4 || res_at(&trial)? < res_now {
                        break;
                    }
                    alpha *= 0.5;
                }
                q = trial;
            }
        }
        if !converged {
            return Err(Error::Convergence(format!(
                "reduced micro Newton stalled at residual {rel_res:.3e}"
            )));
        }

        // Homogenized stress from cluster tributary volumes over the full
        // box (pores carry zero stress).
        let mut s = Matrix3::zeros();
        for c in 0..self.partition.k {
            s += final_states[c].stress * self.cluster_volume[c];
        }
        s /= self.box_volume;
        s = (s + s.transpose()) / 2.0;

        let tangent = self.condensed_tangent(&final_tangents)?;

        let nodal = prolongate(&self.mesh, &self.partition, &q);
        let out = MicroStepOutput {
            nodal_displacement: nodal,
            cluster_stress: final_states.iter().map(|st| st.stress).collect(),
            cluster_strain: final_strains.clone(),
            response: HomogenizedResponse { s, c: tangent },
            newton_iters,
        };
        Ok((out, RomTrial { q, states: final_states, strains: final_strains, h }))
    }

    pub fn commit(&mut self, trial: RomTrial) {
        self.q = trial.q;
        self.states = trial.states;
        self.committed_strain = trial.strains;
        self.h_committed = trial.h;
    }

    /// Serializable committed history for run checkpointing.
    pub fn checkpoint(&self) -> RomCheckpoint {
        RomCheckpoint {
            states: self.states.clone(),
            strains: self
                .committed_strain
                .iter()
                .map(|s| [s[0], s[1], s[2], s[3], s[4], s[5]])
                .collect(),
            q: self.q.clone(),
            h: self.h_committed.into(),
        }
    }

    pub fn restore(&mut self, cp: RomCheckpoint) -> Result<()> {
        if cp.states.len() != self.partition.k || cp.q.len() != 6 * self.partition.k {
            return Err(Error::LengthMismatch { expected: self.partition.k, got: cp.states.len() });
        }
        self.states = cp.states;
        self.committed_strain =
            cp.strains.iter().map(|s| SMatrix::<f64, 6, 1>::from_column_slice(s)).collect();
        self.q = cp.q;
        self.h_committed = cp.h.into();
        Ok(())
    }

    /// Consistent macro tangent by condensing the reduced stiffness onto
    /// the prescribed boundary-cluster DOFs; only translational blocks
    /// enter the stress outer product.
    fn condensed_tangent(&self, tangents: &[Voigt66]) -> Result<Voigt66> {
        // Full (unconstrained) reduced stiffness: elastic element matrix
        // minus the sub-point softening corrections, same form as the
        // Newton matrix but over all DOFs.
        let c_norm = self.c_el.norm();
        let mut k = self.k_full_elastic.clone();
        for (e, t) in self.reduced.tets.iter().enumerate() {
            let el = &self.elements[e];
            let w = el.volume / 4.0;
            let mut ke = SMatrix::<f64, 24, 24>::zeros();
            let mut touched = false;
            for (i, &c) in t.iter().enumerate() {
                let dc = self.c_el - tangents[c];
                if dc.norm() <= 1e-14 * c_norm {
                    continue;
                }
                ke += el.bs[i].transpose() * dc * el.bs[i] * w;
                touched = true;
            }
            if !touched {
                continue;
            }
            for (i, &a) in t.iter().enumerate() {
                for (j, &b) in t.iter().enumerate() {
                    for da in 0..6 {
                        for db in 0..6 {
                            let slot = k.slot(6 * a + da, 6 * b + db).unwrap();
                            k.values[slot] -= ke[(6 * i + da, 6 * j + db)];
                        }
                    }
                }
            }
        }
        // Linearize the stress map itself: probe each macro strain
        // component, solve the constrained reduced system, and push the
        // cluster strain variations through the cluster tangents with the
        // same tributary-volume average used for the stress.
        let mut out = Voigt66::zeros();
        for v in 0..6 {
            let de = crate::homogenize::voigt_probe(v);
            let mut values = Vec::new();
            for c in 0..self.partition.k {
                if !self.boundary_clusters[c] {
                    continue;
                }
                let rel = self.reduced.vertices[c] - self.x0;
                let t = de * rel;
                for d in 0..3 {
                    values.push((6 * c + d, t[d]));
                }
                // Boundary rotations are pinned in the probe even when they
                // were free in the solve: the free-rotation residual carries
                // a mean-stress moment compensation whose linearization is a
                // dense rank-6 coupling, and omitting it while freeing the
                // rotations would let the probe relax through the
                // nonconforming enrichment. The symmetric strain probes have
                // zero affine rotation, so pinning is the consistent
                // first-order boundary motion.
                for d in 0..3 {
                    values.push((6 * c + 3 + d, 0.0));
                }
            }
            let du = crate::homogenize::constrained_solve(&k, &values, 1e-12)?;
            let deps = self.cluster_strains(&du);
            let mut ds = Matrix3::zeros();
            for c in 0..self.partition.k {
                let dsig = crate::material::stress_from_voigt(&(tangents[c] * deps[c]));
                ds += dsig * self.cluster_volume[c];
            }
            ds /= self.box_volume;
            ds = (ds + ds.transpose()) / 2.0;
            let col = crate::material::stress_to_voigt(&ds);
            for i in 0..6 {
                out[(i, v)] = col[i];
            }
        }
        Ok(out)
    }
}

/// Nodes on the RVE box surface: the "box_boundary" node set when present,
/// otherwise nodes on the bounding-box faces.
pub fn box_boundary_nodes(mesh: &Mesh) -> Result<Vec<usize>> {
    if let Some(set) = mesh.node_sets.get("box_boundary") {
        return Ok(set.clone());
    }
    let (lo, hi) = mesh.bounding_box();
    let tol = 1e-9 * (hi - lo).norm().max(1.0);
    let out: Vec<usize> = mesh
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            (0..3).any(|d| (p[d] - lo[d]).abs() < tol || (p[d] - hi[d]).abs() < tol)
        })
        .map(|(i, _)| i)
        .collect();
    if out.is_empty() {
        return Err(Error::Mesh("mesh has no box-boundary nodes".into()));
    }
    Ok(out)
}

/// Per-cluster stress broadcast to FE nodes (Von Mises), matching the FE
/// node count.
pub fn broadcast_cluster_von_mises(
    partition: &ClusterPartition,
    cluster_stress: &[Matrix3<f64>],
) -> Vec<f64> {
    partition
        .assignment
        .iter()
        .map(|&c| {
            if c == usize::MAX {
                0.0
            } else {
                crate::material::von_mises(&cluster_stress[c])
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{elastic_tensor, strain_to_voigt, HardeningMode};
    use crate::mcr::{voxel_to_tets, VoxelGrid};
    use crate::mesh::LengthUnit;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn hardening() -> HardeningCurve {
        HardeningCurve::new(
            vec![(0.0, 170.0), (0.05, 220.0), (0.2, 260.0)],
            HardeningMode::Isotropic,
        )
        .unwrap()
    }

    fn elastic() -> ElasticConstants {
        ElasticConstants { e: 6.89e4, nu: 0.35 }
    }

    #[test]
    fn slab_clusters_form_chain_graph() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(3), 3.0, LengthUnit::Micrometer).unwrap();
        // Three slabs along x by construction.
        let mut assignment = Vec::new();
        for p in &mesh.nodes {
            assignment.push((p.x - 1e-9).max(0.0).floor().min(2.0) as usize);
        }
        let mut members = vec![Vec::new(); 3];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        let centroids = members
            .iter()
            .map(|m| m.iter().map(|&i| mesh.nodes[i]).sum::<Vector3<f64>>() / m.len() as f64)
            .collect();
        let part = ClusterPartition { k: 3, assignment, members, centroids };
        let g = build_cluster_graph(&mesh, &part);
        assert!(g.edges.contains(&(0, 1)));
        assert!(g.edges.contains(&(1, 2)));
        assert!(!g.edges.contains(&(0, 2)));
    }

    #[test]
    fn single_cluster_graph_is_empty() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(2), 1.0, LengthUnit::Micrometer).unwrap();
        let part = kmeans(&mesh.nodes, 1, 0).unwrap();
        let g = build_cluster_graph(&mesh, &part);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn reduced_mesh_filter_and_repair_cover_all_vertices() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(4), 1.0, LengthUnit::Micrometer).unwrap();
        let part = kmeans(&mesh.nodes, 20, 3).unwrap();
        let g = build_cluster_graph(&mesh, &part);
        let rm = build_reduced_mesh(&part.centroids, &g).unwrap();
        let mut covered = vec![false; part.k];
        for t in &rm.tets {
            for &v in t {
                covered[v] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn prpim_reproduces_linear_fields_on_random_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..100 {
            let n = rng.gen_range(5..=50);
            let coords: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen()) * 10.0)
                .collect();
            let eval = coords.iter().sum::<Vector3<f64>>() / n as f64;
            let (w, fb) = prpim_weights(&coords, &eval).unwrap();
            assert!(!fb, "trial {trial} fell back unexpectedly");
            let a = Vector3::new(0.3, -1.2, 0.7);
            let g = Matrix3::new(1.0, 0.2, -0.5, 0.0, 2.0, 0.3, 0.4, -0.1, 1.5);
            for d in 0..3 {
                let vals: Vec<f64> = coords.iter().map(|p| a[d] + (g * p)[d]).collect();
                let interp: f64 = w.iter().zip(&vals).map(|(wi, vi)| wi * vi).sum();
                let exact = a[d] + (g * eval)[d];
                assert!(
                    (interp - exact).abs() <= 1e-10 * exact.abs().max(1.0),
                    "trial {trial}: {interp} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn prpim_matches_block_system_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10;
        let coords: Vec<Vector3<f64>> =
            (0..n).map(|_| Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen()) * 5.0).collect();
        let eval = Vector3::new(2.0, 2.5, 2.1);
        let (w, fb) = prpim_weights(&coords, &eval).unwrap();
        assert!(!fb);

        // Direct solve of the full (n+4) block system per nodal unit data.
        let mean = coords.iter().sum::<Vector3<f64>>() / n as f64;
        let poly = |p: &Vector3<f64>| {
            let d = p - mean;
            [1.0, d.x, d.y, d.z]
        };
        let m = n + 4;
        let mut big = DMatrix::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                big[(i, j)] = (coords[i] - coords[j]).norm().powi(3);
            }
            let z = poly(&coords[i]);
            for j in 0..4 {
                big[(i, n + j)] = z[j];
                big[(n + j, i)] = z[j];
            }
        }
        let lu = big.lu();
        for unit in 0..n {
            let mut rhs = DVector::zeros(m);
            rhs[unit] = 1.0;
            let sol = lu.solve(&rhs).unwrap();
            let mut val = 0.0;
            for i in 0..n {
                val += (coords[i] - eval).norm().powi(3) * sol[i];
            }
            let z = poly(&eval);
            for j in 0..4 {
                val += z[j] * sol[n + j];
            }
            assert!((val - w[unit]).abs() <= 1e-10, "weight {unit}: {val} vs {}", w[unit]);
        }
    }

    #[test]
    fn restriction_of_homogeneous_field_hits_centroids() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(3), 1.0, LengthUnit::Micrometer).unwrap();
        let part = kmeans(&mesh.nodes, 5, 2).unwrap();
        let op = build_restriction(&mesh, &part).unwrap();
        let h = Matrix3::new(0.02, 0.01, 0.0, 0.0, -0.01, 0.0, 0.0, 0.0, -0.01);
        let x0 = Vector3::new(0.5, 0.5, 0.5);
        let mut nodal = vec![0.0; 3 * mesh.n_nodes()];
        for (i, p) in mesh.nodes.iter().enumerate() {
            let u = h * (p - x0);
            for d in 0..3 {
                nodal[3 * i + d] = u[d];
            }
        }
        let restricted = restrict(&op, &nodal);
        for c in 0..part.k {
            let exact = h * (part.centroids[c] - x0);
            assert!((restricted[c] - exact).norm() < 1e-10);
        }
    }

    #[test]
    fn prolongation_rotation_pattern_and_rigid_roundtrip() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(2), 1.0, LengthUnit::Micrometer).unwrap();
        let part = kmeans(&mesh.nodes, 3, 1).unwrap();
        let op = build_restriction(&mesh, &part).unwrap();

        // Pure z-rotation of one cluster.
        let mut reduced = vec![0.0; 6 * part.k];
        reduced[5] = 0.1; // theta_z of cluster 0
        let u = prolongate(&mesh, &part, &reduced);
        for (i, p) in mesh.nodes.iter().enumerate() {
            if part.assignment[i] == 0 {
                let r = p - part.centroids[0];
                let expect = Vector3::new(0.0, 0.0, 0.1).cross(&r);
                for d in 0..3 {
                    assert!((u[3 * i + d] - expect[d]).abs() < 1e-14);
                }
            }
        }

        // Restrict-then-prolongate a global rigid translation is identity.
        let mut nodal = vec![0.0; 3 * mesh.n_nodes()];
        for i in 0..mesh.n_nodes() {
            nodal[3 * i] = 0.7;
            nodal[3 * i + 1] = -0.2;
        }
        let r = restrict(&op, &nodal);
        let mut reduced = vec![0.0; 6 * part.k];
        for c in 0..part.k {
            for d in 0..3 {
                reduced[6 * c + d] = r[c][d];
            }
        }
        let back = prolongate(&mesh, &part, &reduced);
        for (a, b) in nodal.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sfr_translation_block_equals_classic_tet() {
        let verts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.3, 0.1, 0.0),
            Vector3::new(0.2, 1.1, 0.05),
            Vector3::new(0.1, 0.2, 0.9),
        ];
        let c = elastic_tensor(&elastic());
        let ke = sfr_element_stiffness(&verts, &c).unwrap();
        // Classic tet via the FEM module.
        let mesh = Mesh::new(
            LengthUnit::Micrometer,
            verts.to_vec(),
            vec![[0, 1, 2, 3]],
            Default::default(),
        )
        .unwrap();
        let op = crate::fem::element_operator(&mesh, 0);
        let ke12 = crate::fem::element_stiffness(&op, &c);
        for i in 0..4 {
            for j in 0..4 {
                for a in 0..3 {
                    for b in 0..3 {
                        let big = ke[(6 * i + a, 6 * j + b)];
                        let small = ke12[(3 * i + a, 3 * j + b)];
                        assert!(
                            (big - small).abs() <= 1e-12 * small.abs().max(1.0),
                            "({i},{a})({j},{b}): {big} vs {small}"
                        );
                    }
                }
            }
        }
        // Symmetry.
        let asym = (ke - ke.transpose()).norm();
        assert!(asym < 1e-9 * ke.norm());
    }

    #[test]
    fn sfr_rigid_modes_have_zero_energy() {
        let verts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.1),
            Vector3::new(0.0, 1.2, 0.0),
            Vector3::new(0.3, 0.1, 1.1),
        ];
        let c = elastic_tensor(&elastic());
        let ke = sfr_element_stiffness(&verts, &c).unwrap();
        let x_ref = Vector3::new(0.4, 0.3, 0.2);
        for (t, omega) in [
            (Vector3::new(1.0, -2.0, 0.5), Vector3::zeros()),
            (Vector3::zeros(), Vector3::new(0.3, 0.1, -0.7)),
            (Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.0, 0.5, 0.0)),
        ] {
            let mut q = SMatrix::<f64, 24, 1>::zeros();
            for (i, v) in verts.iter().enumerate() {
                let u = t + omega.cross(&(v - x_ref));
                for d in 0..3 {
                    q[6 * i + d] = u[d];
                    q[6 * i + 3 + d] = omega[d];
                }
            }
            let energy = (q.transpose() * ke * q)[(0, 0)];
            assert!(energy.abs() <= 1e-10 * ke.norm(), "energy {energy}");
        }
    }

    #[test]
    fn sfr_patch_test_constant_strain() {
        let verts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let (bs, _) = sfr_b_matrices(&verts).unwrap();
        let g = Matrix3::new(0.01, 0.004, 0.0, 0.0, -0.002, 0.001, 0.0, 0.0, -0.003);
        let mut q = SMatrix::<f64, 24, 1>::zeros();
        for (i, v) in verts.iter().enumerate() {
            let u = g * v;
            for d in 0..3 {
                q[6 * i + d] = u[d];
            }
        }
        let eps = (g + g.transpose()) / 2.0;
        let expect = strain_to_voigt(&eps);
        for b in &bs {
            let got = b * q;
            for i in 0..6 {
                assert!((got[i] - expect[i]).abs() < 1e-14, "component {i}");
            }
        }
    }

    #[test]
    fn micro_rom_identity_deformation_is_stress_free() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(3), 100.0, LengthUnit::Micrometer).unwrap();
        let mut rom =
            MicroRom::new(mesh, 8, elastic(), hardening(), RomOptions::default()).unwrap();
        let out = rom.solve_step(&Matrix3::identity()).unwrap();
        assert!(out.response.s.norm() < 1e-10);
        assert!(norm(&out.nodal_displacement) < 1e-10);
    }

    #[test]
    fn solid_rve_elastic_stress_matches_material_response() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(4), 100.0, LengthUnit::Micrometer).unwrap();
        let mut rom =
            MicroRom::new(mesh, 12, elastic(), hardening(), RomOptions::default()).unwrap();
        // Small elastic deformation.
        let f = Matrix3::new(1.001, 0.0, 0.0, 0.0, 0.9995, 0.0, 0.0, 0.0, 0.9995);
        let out = rom.solve_step(&f).unwrap();
        let eps = Matrix3::new(0.001, 0.0, 0.0, 0.0, -0.0005, 0.0, 0.0, 0.0, -0.0005);
        let c = elastic_tensor(&elastic());
        let s_exact = crate::material::stress_from_voigt(&(c * strain_to_voigt(&eps)));
        let err = (out.response.s - s_exact).norm() / s_exact.norm();
        assert!(err < 1e-6, "relative stress error {err}");
        // Tangent of the homogeneous solid equals the elastic tensor.
        let terr = (out.response.c - c).norm() / c.norm();
        assert!(terr < 1e-6, "relative tangent error {terr}");
    }

    #[test]
    fn cluster_fields_are_uniform_per_cluster() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(3), 100.0, LengthUnit::Micrometer).unwrap();
        let mut rom =
            MicroRom::new(mesh, 6, elastic(), hardening(), RomOptions::default()).unwrap();
        let f = Matrix3::new(1.002, 0.0, 0.0, 0.0, 0.999, 0.0, 0.0, 0.0, 0.999);
        let out = rom.solve_step(&f).unwrap();
        let vm = broadcast_cluster_von_mises(&rom.partition, &out.cluster_stress);
        assert_eq!(vm.len(), rom.mesh.n_nodes());
        for (node, &c) in rom.partition.assignment.iter().enumerate() {
            assert_eq!(vm[node], crate::material::von_mises(&out.cluster_stress[c]));
        }
    }
}
