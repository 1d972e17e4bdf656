//! Cluster rigid-body deflation for conjugate gradients, plus the
//! incremental-assembly Newton driver built on it.
//!
//! Each node cluster contributes up to six coarse vectors: three unit
//! translations and three infinitesimal rotations about the cluster
//! centroid. Low-energy error modes of elastic bodies live almost entirely
//! in the span of these vectors, so projecting them out of the Krylov
//! iteration removes the small eigenvalues that stall plain CG.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::clustering::ClusterPartition;
use crate::fem::{dot, norm, AssemblyPlan, ElementOperator, NewtonProblem, StepResult};
use crate::material::{MaterialPointState, Voigt66};
use crate::mesh::{DofMap, Mesh};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Per-free-DOF row of the deflation basis.
#[derive(Debug, Clone, Copy)]
struct RowBlock {
    /// First coarse column of this DOF's cluster.
    col_base: usize,
    /// Spatial component (0..3) of the DOF.
    comp: usize,
    /// Node position relative to the cluster centroid.
    rel: Vector3<f64>,
    /// Whether the cluster carries rotation columns.
    with_rot: bool,
}

/// Sparse tall-skinny deflation basis W on the free-DOF system. Row i of W
/// has at most three nonzeros: the translation column of the DOF's
/// component and up to two rotation columns.
#[derive(Debug, Clone)]
pub struct DeflationBasis {
    pub n_free: usize,
    pub n_cols: usize,
    rows: Vec<Option<RowBlock>>,
}

impl DeflationBasis {
    /// Nonzero (column, coefficient) entries of row `r`.
    fn row_entries(&self, r: usize) -> [(usize, f64); 3] {
        let mut out = [(usize::MAX, 0.0); 3];
        let Some(b) = self.rows[r] else { return out };
        out[0] = (b.col_base + b.comp, 1.0);
        if b.with_rot {
            // Component `comp` of theta x rel.
            let rel = b.rel;
            let (c1, v1, c2, v2) = match b.comp {
                0 => (4, rel.z, 5, -rel.y),
                1 => (3, -rel.z, 5, rel.x),
                _ => (3, rel.y, 4, -rel.x),
            };
            out[1] = (b.col_base + c1, v1);
            out[2] = (b.col_base + c2, v2);
        }
        out
    }

    /// out = W mu.
    pub fn apply(&self, mu: &[f64], out: &mut [f64]) {
        for r in 0..self.n_free {
            let mut acc = 0.0;
            for (c, v) in self.row_entries(r) {
                if c != usize::MAX {
                    acc += v * mu[c];
                }
            }
            out[r] = acc;
        }
    }

    /// W^T v.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for r in 0..self.n_free {
            for (c, w) in self.row_entries(r) {
                if c != usize::MAX {
                    out[c] += w * v[r];
                }
            }
        }
        out
    }

    /// Coarse operator E = W^T K W, assembled from the CSR nonzeros.
    pub fn coarse_matrix(&self, k: &CsrMatrix) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_cols, self.n_cols);
        for r in 0..k.n {
            let row_w = self.row_entries(r);
            for idx in k.row_offsets[r]..k.row_offsets[r + 1] {
                let c = k.col_indices[idx];
                let v = k.values[idx];
                if v == 0.0 {
                    continue;
                }
                for (ca, wa) in row_w {
                    if ca == usize::MAX {
                        continue;
                    }
                    for (cb, wb) in self.row_entries(c) {
                        if cb != usize::MAX {
                            e[(ca, cb)] += wa * v * wb;
                        }
                    }
                }
            }
        }
        e
    }

    /// Dense copy of W, for small-system oracles.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n_free, self.n_cols);
        for r in 0..self.n_free {
            for (c, v) in self.row_entries(r) {
                if c != usize::MAX {
                    w[(r, c)] = v;
                }
            }
        }
        w
    }
}

/// Builds the deflation basis for a cluster partition. Rows of constrained
/// DOFs are removed. Clusters whose free nodes are fewer than three or
/// collinear get translation columns only, so the coarse operator stays
/// nonsingular.
pub fn build_deflation_basis(
    mesh: &Mesh,
    partition: &ClusterPartition,
    dof_map: &DofMap,
) -> Result<DeflationBasis> {
    if partition.assignment.len() != mesh.n_nodes() {
        return Err(Error::LengthMismatch { expected: mesh.n_nodes(), got: partition.assignment.len() });
    }
    // Per-cluster free nodes and degeneracy check.
    let mut col_base = vec![usize::MAX; partition.k];
    let mut with_rot = vec![false; partition.k];
    let mut next_col = 0usize;
    for c in 0..partition.k {
        let free_nodes: Vec<usize> = partition.members[c]
            .iter()
            .copied()
            .filter(|&n| (0..3).any(|d| dof_map.free_index[3 * n + d].is_some()))
            .collect();
        if free_nodes.is_empty() {
            continue;
        }
        col_base[c] = next_col;
        with_rot[c] = !collinear(&free_nodes, mesh, &partition.centroids[c]);
        next_col += if with_rot[c] { 6 } else { 3 };
    }

    let mut rows = vec![None; dof_map.n_free];
    for (node, &c) in partition.assignment.iter().enumerate() {
        if c == usize::MAX || col_base[c] == usize::MAX {
            continue;
        }
        for d in 0..3 {
            if let Some(f) = dof_map.free_index[3 * node + d] {
                rows[f] = Some(RowBlock {
                    col_base: col_base[c],
                    comp: d,
                    rel: mesh.nodes[node] - partition.centroids[c],
                    with_rot: with_rot[c],
                });
            }
        }
    }
    Ok(DeflationBasis { n_free: dof_map.n_free, n_cols: next_col, rows })
}

fn collinear(nodes: &[usize], mesh: &Mesh, centroid: &Vector3<f64>) -> bool {
    if nodes.len() < 3 {
        return true;
    }
    // Rank of the scatter matrix of relative coordinates: rotations need
    // at least two independent directions.
    let mut s = nalgebra::Matrix3::<f64>::zeros();
    let mut scale: f64 = 0.0;
    for &n in nodes {
        let r = mesh.nodes[n] - centroid;
        s += r * r.transpose();
        scale = scale.max(r.norm_squared());
    }
    if scale == 0.0 {
        return true;
    }
    let eig = s.symmetric_eigenvalues();
    let mut vals = [eig[0], eig[1], eig[2]];
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals[1] <= 1e-12 * scale
}

/// Pseudo-inverse of the coarse operator E = W^T K W. Basis columns can be
/// identically zero (a cluster whose free nodes all share a constrained
/// component), making E rank deficient; since null(E) = null(W), every
/// coarse system W^T v is still consistent and the pseudo-inverse solves it.
pub fn coarse_inverse(e: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if e.nrows() == 0 {
        return Ok(e);
    }
    let svd = e.svd(true, true);
    let eps = svd.singular_values.max() * 1e-12;
    svd.pseudo_inverse(eps)
        .map_err(|m| Error::Singular(format!("coarse deflation operator: {m}")))
}

/// Deflated Jacobi-preconditioned CG. Returns (solution, iterations). The
/// coarse pseudo-inverse is taken as an argument so Newton iterations can
/// reuse one factorization per assembled matrix.
pub fn deflated_cg(
    k: &CsrMatrix,
    rhs: &[f64],
    basis: &DeflationBasis,
    coarse: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = k.n;
    let rhs_norm = norm(rhs);
    if rhs_norm <= 1e-300 {
        return Ok((vec![0.0; n], 0));
    }
    let target = tol * rhs_norm;
    let inv_diag: Vec<f64> =
        k.diagonal().iter().map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 0.0 }).collect();

    let coarse_solve = |v: &[f64]| -> Vec<f64> {
        let mu = coarse * DVector::from_column_slice(v);
        mu.as_slice().to_vec()
    };

    // Coarse-space start: x0 = W E^-1 W^T b, which zeroes W^T r.
    let mu0 = coarse_solve(&basis.apply_transpose(rhs));
    let mut x = vec![0.0; n];
    basis.apply(&mu0, &mut x);
    let mut r = rhs.to_vec();
    let kx = k.mul_vec_alloc(&x);
    for i in 0..n {
        r[i] -= kx[i];
    }
    if norm(&r) < target {
        return Ok((x, 0));
    }

    let precondition = |r: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        // Deflate the search direction: subtract W E^-1 W^T K z.
        let kz = k.mul_vec_alloc(&z);
        let mu = coarse_solve(&basis.apply_transpose(&kz));
        let mut wz = vec![0.0; z.len()];
        basis.apply(&mu, &mut wz);
        z.iter().zip(&wz).map(|(a, b)| a - b).collect()
    };

    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut kp = vec![0.0; n];
    for iter in 1..=max_iters {
        k.mul_vec(&p, &mut kp);
        let pkp = dot(&p, &kp);
        if pkp <= 0.0 {
            return Err(Error::Singular("deflated CG hit a non-positive curvature direction".into()));
        }
        let alpha = rz / pkp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * kp[i];
        }
        if norm(&r) < target {
            return Ok((x, iter));
        }
        z = precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Convergence(format!("deflated CG exceeded {max_iters} iterations")))
}

/// Relative Frobenius change of a consistent tangent that counts as
/// "yielded" for incremental reassembly.
pub const YIELD_DETECT_TOL: f64 = 1e-12;

/// Replaces the contributions of elements whose tangent changed: subtracts
/// the old element stiffness and adds the new one in place. Returns
/// (yielded element count, touched value slots).
pub fn incremental_update(
    k: &mut CsrMatrix,
    plan: &AssemblyPlan,
    mesh: &Mesh,
    ops: &[ElementOperator],
    old_tangents: &[Voigt66],
    new_tangents: &[Voigt66],
) -> (usize, usize) {
    let mut yielded = 0;
    let mut touched = 0;
    for (e, t) in mesh.tets.iter().enumerate() {
        let diff = (new_tangents[e] - old_tangents[e]).norm();
        if diff <= YIELD_DETECT_TOL * old_tangents[e].norm() {
            continue;
        }
        yielded += 1;
        let delta = crate::fem::element_stiffness(&ops[e], &(new_tangents[e] - old_tangents[e]));
        touched += plan.scatter(k, t, &delta, 1.0);
    }
    (yielded, touched)
}

/// Outcome counters of an IDCG run, for run logs and trend checks.
#[derive(Debug, Clone, Default)]
pub struct IdcgStats {
    /// Yielded elements detected per Newton iteration.
    pub yielded_counts: Vec<usize>,
    /// CSR value slots rewritten per Newton iteration.
    pub touched_slots: Vec<usize>,
}

/// Incremental-assembly deflated CG Newton driver: the elastic stiffness is
/// assembled once, later Newton iterations only replace yielded-element
/// blocks, and each linear system is solved with cluster-deflated CG.
pub fn idcg_newton(
    problem: &NewtonProblem,
    partition: &ClusterPartition,
    tol_cg: f64,
) -> Result<(Vec<StepResult>, Vec<MaterialPointState>, IdcgStats)> {
    let dof_map = problem.dof_map()?;
    let plan = AssemblyPlan::new(problem.mesh, dof_map);
    let basis = build_deflation_basis(problem.mesh, partition, &plan.dof_map)?;
    let mut stats = IdcgStats::default();

    // Incremental state: the matrix and the tangents it was built from.
    let mut k_current: Option<CsrMatrix> = None;
    let mut k_tangents: Vec<Voigt66> = Vec::new();
    let pending: std::cell::RefCell<Vec<Voigt66>> = std::cell::RefCell::new(Vec::new());

    let n_free = plan.n_free();
    let (steps, states, _) = crate::fem::newton_solve_with(
        problem,
        &plan,
        |_k_full, rhs, _iter| {
            // `_k_full` is the freshly assembled matrix; the incremental
            // path maintains its own copy and asserts equality in tests.
            let new_tangents = pending.borrow().clone();
            let k = match k_current.as_mut() {
                None => {
                    let k = plan.assemble(problem.mesh, problem.ops, &new_tangents);
                    stats.yielded_counts.push(0);
                    stats.touched_slots.push(k.nnz());
                    k_current = Some(k);
                    k_tangents = new_tangents;
                    k_current.as_mut().unwrap()
                }
                Some(k) => {
                    let (yielded, touched) = incremental_update(
                        k,
                        &plan,
                        problem.mesh,
                        problem.ops,
                        &k_tangents,
                        &new_tangents,
                    );
                    stats.yielded_counts.push(yielded);
                    stats.touched_slots.push(touched);
                    k_tangents = new_tangents;
                    k
                }
            };
            let coarse = coarse_inverse(basis.coarse_matrix(k))?;
            deflated_cg(k, rhs, &basis, &coarse, tol_cg, 10 * n_free.max(100))
        },
        |tangents| *pending.borrow_mut() = tangents.to_vec(),
    )?;
    Ok((steps, states, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans;
    use crate::fem::{assemble_full, element_operators, jacobi_pcg};
    use crate::material::{elastic_tensor, ElasticConstants};
    use crate::mcr::{voxel_to_tets, VoxelGrid};
    use crate::mesh::LengthUnit;

    fn cube_mesh(n: usize) -> Mesh {
        voxel_to_tets(&VoxelGrid::solid(n), 1.0, LengthUnit::Millimeter).unwrap()
    }

    fn elastic() -> (ElasticConstants, Voigt66) {
        let ec = ElasticConstants { e: 6.89e4, nu: 0.33 };
        let c = elastic_tensor(&ec);
        (ec, c)
    }

    #[test]
    fn rigid_modes_annihilated_by_unconstrained_stiffness() {
        let (_, c) = elastic();
        for n in [2usize, 3, 4] {
            let mesh = cube_mesh(n);
            let ops = element_operators(&mesh);
            let tangents = vec![c; mesh.n_tets()];
            let k = assemble_full(&mesh, &ops, &tangents);
            let dof_map = DofMap::new(mesh.n_nodes(), &[]).unwrap();
            let part = kmeans(&mesh.nodes, 4.min(mesh.n_nodes()), 3).unwrap();
            let basis = build_deflation_basis(&mesh, &part, &dof_map).unwrap();
            // K W column-wise max entry.
            let mut worst: f64 = 0.0;
            let mut col = vec![0.0; basis.n_free];
            let mut mu = vec![0.0; basis.n_cols];
            for j in 0..basis.n_cols {
                mu.fill(0.0);
                mu[j] = 1.0;
                basis.apply(&mu, &mut col);
                // Rigid rotation of a single cluster is NOT globally rigid;
                // only the sum over clusters of matching columns is. Use
                // whole-body modes: skip per-cluster check here.
                let _ = &col;
            }
            // Whole-body rigid modes: one cluster covering everything.
            let whole = kmeans(&mesh.nodes, 1, 0).unwrap();
            let wb = build_deflation_basis(&mesh, &whole, &dof_map).unwrap();
            assert_eq!(wb.n_cols, 6);
            for j in 0..6 {
                let mut mu = vec![0.0; 6];
                mu[j] = 1.0;
                let mut v = vec![0.0; wb.n_free];
                wb.apply(&mu, &mut v);
                let kv = k.mul_vec_alloc(&v);
                let m = kv.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                worst = worst.max(m);
            }
            assert!(worst <= 1e-9 * k.max_abs(), "n={n}: ||K W||_max {worst} vs {}", k.max_abs());
            let _ = part;
        }
    }

    #[test]
    fn basis_operations_match_dense() {
        let mesh = cube_mesh(2);
        let part = kmeans(&mesh.nodes, 3, 1).unwrap();
        // Constrain one face to exercise row removal.
        let fixed: Vec<(usize, f64)> = mesh
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.x == 0.0)
            .flat_map(|(i, _)| (0..3).map(move |d| (3 * i + d, 0.0)))
            .collect();
        let dof_map = DofMap::new(mesh.n_nodes(), &fixed).unwrap();
        let basis = build_deflation_basis(&mesh, &part, &dof_map).unwrap();
        let dense = basis.to_dense();

        let v: Vec<f64> = (0..basis.n_free).map(|i| (i as f64 * 0.7).sin()).collect();
        let wt = basis.apply_transpose(&v);
        let wt_dense = dense.transpose() * DVector::from_column_slice(&v);
        for (a, b) in wt.iter().zip(wt_dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mu: Vec<f64> = (0..basis.n_cols).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut wmu = vec![0.0; basis.n_free];
        basis.apply(&mu, &mut wmu);
        let wmu_dense = &dense * DVector::from_column_slice(&mu);
        for (a, b) in wmu.iter().zip(wmu_dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let (_, c) = elastic();
        let ops = element_operators(&mesh);
        let tangents = vec![c; mesh.n_tets()];
        let plan = AssemblyPlan::new(&mesh, dof_map);
        let k = plan.assemble(&mesh, &ops, &tangents);
        let e = basis.coarse_matrix(&k);
        let e_dense = dense.transpose() * k.to_dense() * &dense;
        assert!((e - e_dense).norm() < 1e-9);
    }

    #[test]
    fn deflated_cg_matches_direct_solution() {
        let mesh = cube_mesh(3);
        let fixed: Vec<(usize, f64)> = mesh
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.x == 0.0)
            .flat_map(|(i, _)| (0..3).map(move |d| (3 * i + d, 0.0)))
            .collect();
        let dof_map = DofMap::new(mesh.n_nodes(), &fixed).unwrap();
        let (_, c) = elastic();
        let ops = element_operators(&mesh);
        let plan = AssemblyPlan::new(&mesh, dof_map);
        let k = plan.assemble(&mesh, &ops, &vec![c; mesh.n_tets()]);
        let part = kmeans(&mesh.nodes, 5, 2).unwrap();
        let basis = build_deflation_basis(&mesh, &part, &plan.dof_map).unwrap();
        let coarse = coarse_inverse(basis.coarse_matrix(&k)).unwrap();
        let rhs: Vec<f64> = (0..plan.n_free()).map(|i| ((i * 7 % 13) as f64 - 6.0) * 1e3).collect();
        let (x, iters) = deflated_cg(&k, &rhs, &basis, &coarse, 1e-10, 10_000).unwrap();
        let x_ref = k.to_dense().cholesky().unwrap().solve(&DVector::from_column_slice(&rhs));
        let err: f64 = x
            .iter()
            .zip(x_ref.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / x_ref.norm();
        assert!(err < 1e-8, "solution error {err}");
        assert!(iters > 0);
    }

    #[test]
    fn deflation_reduces_iteration_count() {
        let mesh = cube_mesh(4);
        let fixed: Vec<(usize, f64)> = mesh
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.x == 0.0)
            .flat_map(|(i, _)| (0..3).map(move |d| (3 * i + d, 0.0)))
            .collect();
        let dof_map = DofMap::new(mesh.n_nodes(), &fixed).unwrap();
        let (_, c) = elastic();
        let ops = element_operators(&mesh);
        let plan = AssemblyPlan::new(&mesh, dof_map);
        let k = plan.assemble(&mesh, &ops, &vec![c; mesh.n_tets()]);
        let rhs: Vec<f64> = (0..plan.n_free()).map(|i| ((i % 5) as f64 - 2.0) * 1e2).collect();
        let (_, plain_iters) = jacobi_pcg(&k, &rhs, 1e-8, 100_000).unwrap();
        let part = kmeans(&mesh.nodes, 8, 4).unwrap();
        let basis = build_deflation_basis(&mesh, &part, &plan.dof_map).unwrap();
        let coarse = coarse_inverse(basis.coarse_matrix(&k)).unwrap();
        let (_, defl_iters) = deflated_cg(&k, &rhs, &basis, &coarse, 1e-8, 100_000).unwrap();
        assert!(
            defl_iters < plain_iters,
            "deflated {defl_iters} vs plain {plain_iters}"
        );
    }

    #[test]
    fn collinear_cluster_gets_translations_only() {
        let mesh = cube_mesh(2);
        let dof_map = DofMap::new(mesh.n_nodes(), &[]).unwrap();
        // Hand-build a partition with one collinear cluster (an edge).
        let mut assignment = vec![0usize; mesh.n_nodes()];
        let mut edge = Vec::new();
        for (i, p) in mesh.nodes.iter().enumerate() {
            if p.y == 0.0 && p.z == 0.0 {
                assignment[i] = 1;
                edge.push(i);
            }
        }
        assert!(edge.len() >= 3);
        let mut members = vec![Vec::new(), Vec::new()];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        let centroids = members
            .iter()
            .map(|m| {
                let mut s = Vector3::zeros();
                for &i in m {
                    s += mesh.nodes[i];
                }
                s / m.len() as f64
            })
            .collect();
        let part = ClusterPartition { k: 2, assignment, members, centroids };
        let basis = build_deflation_basis(&mesh, &part, &dof_map).unwrap();
        assert_eq!(basis.n_cols, 6 + 3);
    }
}
