//! Element kinematics, sparse global assembly, internal forces and the
//! Newton driver shared by the direct and accelerated solvers.
//!
//! Linear 4-node tetrahedra with constant strain and one integration point
//! per element. Dirichlet constraints are handled by symmetric elimination:
//! the solved system contains only free DOFs, which keeps it SPD.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};

use crate::material::{
    return_map, stress_to_voigt, ElasticConstants, HardeningCurve,
    MaterialPointState, Voigt66,
};
use crate::mesh::{DofMap, Mesh};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

pub type BMatrix = SMatrix<f64, 6, 12>;

/// Per-element constant strain-displacement operator and volume.
#[derive(Debug, Clone)]
pub struct ElementOperator {
    pub b: BMatrix,
    pub volume: f64,
}

/// Shape-function gradients and B matrix for a linear tet.
pub fn element_operator(mesh: &Mesh, e: usize) -> ElementOperator {
    let t = &mesh.tets[e];
    let x0 = mesh.nodes[t[0]];
    let j = Matrix3::from_columns(&[
        mesh.nodes[t[1]] - x0,
        mesh.nodes[t[2]] - x0,
        mesh.nodes[t[3]] - x0,
    ]);
    let j_inv = j.try_inverse().expect("validated mesh has no degenerate elements");
    // Rows of J^-1 are the gradients of N1..N3; N0 closes partition of unity.
    let mut grads = [nalgebra::Vector3::zeros(); 4];
    for i in 0..3 {
        grads[i + 1] = nalgebra::Vector3::new(j_inv[(i, 0)], j_inv[(i, 1)], j_inv[(i, 2)]);
        grads[0] -= grads[i + 1];
    }
    let mut b = BMatrix::zeros();
    for (i, g) in grads.iter().enumerate() {
        let c = 3 * i;
        b[(0, c)] = g.x;
        b[(1, c + 1)] = g.y;
        b[(2, c + 2)] = g.z;
        b[(3, c)] = g.y;
        b[(3, c + 1)] = g.x;
        b[(4, c)] = g.z;
        b[(4, c + 2)] = g.x;
        b[(5, c + 1)] = g.z;
        b[(5, c + 2)] = g.y;
    }
    ElementOperator { b, volume: mesh.tet_volume(e) }
}

pub fn element_operators(mesh: &Mesh) -> Vec<ElementOperator> {
    (0..mesh.n_tets()).map(|e| element_operator(mesh, e)).collect()
}

/// Ke = V * B^T C B.
pub fn element_stiffness(op: &ElementOperator, c: &Voigt66) -> SMatrix<f64, 12, 12> {
    op.b.transpose() * c * op.b * op.volume
}

/// Element strain (Voigt, engineering shear) from the full displacement
/// vector.
pub fn element_strain(mesh: &Mesh, op: &ElementOperator, e: usize, u: &[f64]) -> SMatrix<f64, 6, 1> {
    let t = &mesh.tets[e];
    let mut ue = SMatrix::<f64, 12, 1>::zeros();
    for (i, &n) in t.iter().enumerate() {
        for d in 0..3 {
            ue[3 * i + d] = u[3 * n + d];
        }
    }
    op.b * ue
}

/// Full displacement gradient of element `e` (not just the symmetric
/// part); shape-function gradients are recovered from the B-matrix rows.
pub fn element_gradient(mesh: &Mesh, op: &ElementOperator, e: usize, u: &[f64]) -> Matrix3<f64> {
    let t = &mesh.tets[e];
    let mut grad = Matrix3::zeros();
    for (i, &n) in t.iter().enumerate() {
        let g = nalgebra::Vector3::new(
            op.b[(0, 3 * i)],
            op.b[(1, 3 * i + 1)],
            op.b[(2, 3 * i + 2)],
        );
        let un = nalgebra::Vector3::new(u[3 * n], u[3 * n + 1], u[3 * n + 2]);
        grad += un * g.transpose();
    }
    grad
}

/// Voigt strain vector -> symmetric tensor (engineering shear halved).
pub fn strain_tensor_from_voigt(v: &SMatrix<f64, 6, 1>) -> Matrix3<f64> {
    Matrix3::new(
        v[0],
        v[3] / 2.0,
        v[4] / 2.0,
        v[3] / 2.0,
        v[1],
        v[5] / 2.0,
        v[4] / 2.0,
        v[5] / 2.0,
        v[2],
    )
}

/// Sparsity pattern and scatter helper for the free-DOF system.
#[derive(Clone)]
pub struct AssemblyPlan {
    pub dof_map: DofMap,
    /// Free-system CSR pattern with zeroed values, cloned per assembly.
    pattern: CsrMatrix,
}

impl AssemblyPlan {
    pub fn new(mesh: &Mesh, dof_map: DofMap) -> Self {
        let mut pairs = Vec::new();
        for t in &mesh.tets {
            let dofs = element_dofs(t);
            for &di in &dofs {
                if let Some(fi) = dof_map.free_index[di] {
                    for &dj in &dofs {
                        if let Some(fj) = dof_map.free_index[dj] {
                            pairs.push((fi, fj));
                        }
                    }
                }
            }
        }
        let pattern = CsrMatrix::from_pattern(dof_map.n_free, pairs);
        AssemblyPlan { dof_map, pattern }
    }

    pub fn n_free(&self) -> usize {
        self.dof_map.n_free
    }

    pub fn empty_matrix(&self) -> CsrMatrix {
        self.pattern.clone()
    }

    /// Scatters sign * Ke into the free-system matrix. Returns the number
    /// of value slots touched.
    pub fn scatter(
        &self,
        k: &mut CsrMatrix,
        tet: &[usize; 4],
        ke: &SMatrix<f64, 12, 12>,
        sign: f64,
    ) -> usize {
        let dofs = element_dofs(tet);
        let mut touched = 0;
        for (i, &di) in dofs.iter().enumerate() {
            if let Some(fi) = self.dof_map.free_index[di] {
                for (j, &dj) in dofs.iter().enumerate() {
                    if let Some(fj) = self.dof_map.free_index[dj] {
                        let slot = k.slot(fi, fj).expect("pattern covers all element pairs");
                        k.values[slot] += sign * ke[(i, j)];
                        touched += 1;
                    }
                }
            }
        }
        touched
    }

    /// Assembles the free-system stiffness from per-element tangents.
    pub fn assemble(&self, mesh: &Mesh, ops: &[ElementOperator], tangents: &[Voigt66]) -> CsrMatrix {
        let mut k = self.empty_matrix();
        for (e, t) in mesh.tets.iter().enumerate() {
            let ke = element_stiffness(&ops[e], &tangents[e]);
            self.scatter(&mut k, t, &ke, 1.0);
        }
        k
    }
}

fn element_dofs(t: &[usize; 4]) -> [usize; 12] {
    let mut dofs = [0usize; 12];
    for (i, &n) in t.iter().enumerate() {
        for d in 0..3 {
            dofs[3 * i + d] = 3 * n + d;
        }
    }
    dofs
}

/// Full-dimension (3 n_nodes) stiffness with no constraint elimination.
/// Used by condensation and null-space diagnostics.
pub fn assemble_full(mesh: &Mesh, ops: &[ElementOperator], tangents: &[Voigt66]) -> CsrMatrix {
    let n = 3 * mesh.n_nodes();
    let mut pairs = Vec::new();
    for t in &mesh.tets {
        let dofs = element_dofs(t);
        for &di in &dofs {
            for &dj in &dofs {
                pairs.push((di, dj));
            }
        }
    }
    let mut k = CsrMatrix::from_pattern(n, pairs);
    for (e, t) in mesh.tets.iter().enumerate() {
        let ke = element_stiffness(&ops[e], &tangents[e]);
        let dofs = element_dofs(t);
        for (i, &di) in dofs.iter().enumerate() {
            for (j, &dj) in dofs.iter().enumerate() {
                let slot = k.slot(di, dj).unwrap();
                k.values[slot] += ke[(i, j)];
            }
        }
    }
    k
}

/// f_int = sum_e V_e B^T sigma_e scattered to all global DOFs.
pub fn internal_force(
    mesh: &Mesh,
    ops: &[ElementOperator],
    stresses: &[Matrix3<f64>],
) -> Vec<f64> {
    let mut f = vec![0.0; 3 * mesh.n_nodes()];
    for (e, t) in mesh.tets.iter().enumerate() {
        let fe = ops[e].b.transpose() * stress_to_voigt(&stresses[e]) * ops[e].volume;
        for (i, &n) in t.iter().enumerate() {
            for d in 0..3 {
                f[3 * n + d] += fe[3 * i + d];
            }
        }
    }
    f
}

/// Pluggable linear solver for the Newton driver.
pub trait LinearSolver {
    /// Solves K x = rhs on the free system.
    fn solve(&mut self, k: &CsrMatrix, rhs: &[f64]) -> Result<Vec<f64>>;
    /// Iteration count of the last solve (0 for direct methods).
    fn last_iterations(&self) -> usize {
        0
    }
}

/// Dense Cholesky; for small systems and oracle comparisons.
pub struct DirectSolver;

impl LinearSolver for DirectSolver {
    fn solve(&mut self, k: &CsrMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
        let dense = k.to_dense();
        let chol = dense
            .cholesky()
            .ok_or_else(|| Error::Singular("stiffness matrix is not positive definite".into()))?;
        let x = chol.solve(&DVector::from_column_slice(rhs));
        Ok(x.as_slice().to_vec())
    }
}

/// Jacobi-preconditioned conjugate gradients.
pub struct JacobiPcg {
    pub tol: f64,
    pub max_iters: usize,
    pub last_iters: usize,
}

impl JacobiPcg {
    pub fn new(tol: f64) -> Self {
        JacobiPcg { tol, max_iters: 0, last_iters: 0 }
    }
}

impl LinearSolver for JacobiPcg {
    fn solve(&mut self, k: &CsrMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
        let (x, iters) = jacobi_pcg(k, rhs, self.tol, self.effective_cap(k.n))?;
        self.last_iters = iters;
        Ok(x)
    }

    fn last_iterations(&self) -> usize {
        self.last_iters
    }
}

impl JacobiPcg {
    fn effective_cap(&self, n: usize) -> usize {
        if self.max_iters == 0 {
            10 * n
        } else {
            self.max_iters
        }
    }
}

/// Plain Jacobi-PCG; returns (solution, iterations). The residual target is
/// tol * ||rhs|| with an absolute floor.
pub fn jacobi_pcg(k: &CsrMatrix, rhs: &[f64], tol: f64, max_iters: usize) -> Result<(Vec<f64>, usize)> {
    let n = k.n;
    let diag = k.diagonal();
    let inv_diag: Vec<f64> =
        diag.iter().map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let rhs_norm = norm(rhs);
    let target = (tol * rhs_norm).max(1e-300);
    if rhs_norm <= 1e-300 {
        return Ok((x, 0));
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut kp = vec![0.0; n];
    for iter in 1..=max_iters {
        k.mul_vec(&p, &mut kp);
        let alpha = rz / dot(&p, &kp);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * kp[i];
        }
        if norm(&r) < target {
            return Ok((x, iter));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Convergence(format!("PCG exceeded {max_iters} iterations")))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Per-step outcome of a Newton solve.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Full displacement vector at convergence.
    pub displacement: Vec<f64>,
    pub newton_iters: usize,
    /// Linear-solver iterations per Newton iteration.
    pub linear_iters: Vec<usize>,
    /// Residual norm at convergence (relative).
    pub residual: f64,
    /// Reaction forces at constrained DOFs (dof -> force).
    pub reactions: Vec<(usize, f64)>,
}

/// Nonlinear problem description shared by the Newton drivers.
pub struct NewtonProblem<'a> {
    pub mesh: &'a Mesh,
    pub ops: &'a [ElementOperator],
    pub elastic: ElasticConstants,
    pub hardening: &'a HardeningCurve,
    /// Final prescribed values per constrained DOF.
    pub prescribed: Vec<(usize, f64)>,
    /// Load factors per step, e.g. [0.5, 1.0].
    pub load_factors: Vec<f64>,
    pub tol_newton: f64,
    pub max_newton_iters: usize,
}

impl<'a> NewtonProblem<'a> {
    pub fn dof_map(&self) -> Result<DofMap> {
        DofMap::new(self.mesh.n_nodes(), &self.prescribed)
    }
}

/// Evaluates constitutive response at the current displacement: per-element
/// trial state and consistent tangent relative to committed states.
pub fn constitutive_update(
    problem: &NewtonProblem,
    u: &[f64],
    committed_strain: &[SMatrix<f64, 6, 1>],
    committed_states: &[MaterialPointState],
) -> Result<(Vec<MaterialPointState>, Vec<Voigt66>)> {
    let n_el = problem.mesh.n_tets();
    let mut states = Vec::with_capacity(n_el);
    let mut tangents = Vec::with_capacity(n_el);
    for e in 0..n_el {
        let eps = element_strain(problem.mesh, &problem.ops[e], e, u);
        let d_eps = strain_tensor_from_voigt(&(eps - committed_strain[e]));
        let (state, c) = return_map(&committed_states[e], &d_eps, &problem.elastic, problem.hardening)?;
        states.push(state);
        tangents.push(c);
    }
    Ok((states, tangents))
}

/// Displacement-driven Newton solve with full reassembly each iteration and
/// a pluggable linear solver. States commit only on step convergence.
pub fn newton_solve(
    problem: &NewtonProblem,
    solver: &mut dyn LinearSolver,
) -> Result<(Vec<StepResult>, Vec<MaterialPointState>)> {
    let dof_map = problem.dof_map()?;
    let plan = AssemblyPlan::new(problem.mesh, dof_map);
    newton_solve_with(
        problem,
        &plan,
        |k, rhs, _| {
            let x = solver.solve(k, rhs)?;
            Ok((x, solver.last_iterations()))
        },
        |_| {},
    )
    .map(|(steps, states, _)| (steps, states))
}

/// Newton driver core. `solve` receives (K_free, rhs, newton_iter) and the
/// caller observes assembled tangents through `on_tangents` (used by the
/// incremental-assembly driver).
pub fn newton_solve_with<F, G>(
    problem: &NewtonProblem,
    plan: &AssemblyPlan,
    mut solve: F,
    mut on_tangents: G,
) -> Result<(Vec<StepResult>, Vec<MaterialPointState>, Vec<Voigt66>)>
where
    F: FnMut(&CsrMatrix, &[f64], usize) -> Result<(Vec<f64>, usize)>,
    G: FnMut(&[Voigt66]),
{
    let n_el = problem.mesh.n_tets();
    let mut committed_states = vec![MaterialPointState::default(); n_el];
    let mut committed_strain = vec![SMatrix::<f64, 6, 1>::zeros(); n_el];
    let mut u = vec![0.0; 3 * problem.mesh.n_nodes()];
    let mut results = Vec::new();
    let mut last_tangents = Vec::new();

    for &factor in &problem.load_factors {
        for &(dof, value) in &problem.prescribed {
            u[dof] = factor * value;
        }
        let mut linear_iters = Vec::new();
        let mut converged = false;
        let mut final_states = Vec::new();
        let mut rel_res = 0.0;
        for iter in 0..=problem.max_newton_iters {
            let (states, tangents) =
                constitutive_update(problem, &u, &committed_strain, &committed_states)?;
            let stresses: Vec<Matrix3<f64>> = states.iter().map(|s| s.stress).collect();
            let f_int = internal_force(problem.mesh, problem.ops, &stresses);
            let mut res_free = 0.0;
            let mut res_fixed = 0.0;
            for (dof, slot) in plan.dof_map.free_index.iter().enumerate() {
                if slot.is_some() {
                    res_free += f_int[dof] * f_int[dof];
                } else {
                    res_fixed += f_int[dof] * f_int[dof];
                }
            }
            let reference = res_fixed.sqrt().max(1e-12);
            rel_res = res_free.sqrt() / reference;
            if rel_res <= problem.tol_newton {
                final_states = states;
                last_tangents = tangents;
                converged = true;
                break;
            }
            if iter == problem.max_newton_iters {
                break;
            }
            on_tangents(&tangents);
            let k = plan.assemble(problem.mesh, problem.ops, &tangents);
            let mut rhs = vec![0.0; plan.n_free()];
            for (dof, slot) in plan.dof_map.free_index.iter().enumerate() {
                if let Some(f) = slot {
                    rhs[*f] = -f_int[dof];
                }
            }
            let (du, iters) = solve(&k, &rhs, iter)?;
            // Backtracking line search on the free residual norm; plastic
            // steps far past yield can otherwise oscillate.
            let res_at = |u_trial: &[f64]| -> Result<f64> {
                let (states, _) =
                    constitutive_update(problem, u_trial, &committed_strain, &committed_states)?;
                let stresses: Vec<Matrix3<f64>> = states.iter().map(|s| s.stress).collect();
                let f_int = internal_force(problem.mesh, problem.ops, &stresses);
                let mut r = 0.0;
                for (dof, slot) in plan.dof_map.free_index.iter().enumerate() {
                    if slot.is_some() {
                        r += f_int[dof] * f_int[dof];
                    }
                }
                Ok(r.sqrt())
            };
            let res_now = res_free.sqrt();
            let mut alpha = 1.0;
            let mut trial = u.clone();
            for attempt in 0..5 {
                for (dof, slot) in plan.dof_map.free_index.iter().enumerate() {
                    if let Some(f) = slot {
                        trial[dof] = u[dof] + alpha * du[*f];
                    }
                }
                if attempt == 4 || res_at(&trial)? < res_now {
                    break;
                }
                alpha *= 0.5;
            }
            u = trial;
            linear_iters.push(iters);
        }
        if !converged {
            return Err(Error::Convergence(format!(
                "Newton did not converge in {} iterations (residual {rel_res:.3e})",
                problem.max_newton_iters
            )));
        }
        // Commit states and strains.
        let stresses: Vec<Matrix3<f64>> = final_states.iter().map(|s| s.stress).collect();
        let f_int = internal_force(problem.mesh, problem.ops, &stresses);
        let reactions = plan
            .dof_map
            .constrained
            .keys()
            .map(|&dof| (dof, f_int[dof]))
            .collect();
        for e in 0..n_el {
            committed_strain[e] = element_strain(problem.mesh, &problem.ops[e], e, &u);
        }
        committed_states = final_states;
        results.push(StepResult {
            displacement: u.clone(),
            newton_iters: linear_iters.len(),
            linear_iters,
            residual: rel_res,
            reactions,
        });
    }
    Ok((results, committed_states, last_tangents))
}

/// Dense assembly oracle for tests: triple loop over elements into a dense
/// matrix on the free system.
pub fn dense_assembly_oracle(
    mesh: &Mesh,
    ops: &[ElementOperator],
    dof_map: &DofMap,
    tangents: &[Voigt66],
) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(dof_map.n_free, dof_map.n_free);
    for (e, t) in mesh.tets.iter().enumerate() {
        let ke = element_stiffness(&ops[e], &tangents[e]);
        let dofs = element_dofs(t);
        for (i, &di) in dofs.iter().enumerate() {
            if let Some(fi) = dof_map.free_index[di] {
                for (j, &dj) in dofs.iter().enumerate() {
                    if let Some(fj) = dof_map.free_index[dj] {
                        k[(fi, fj)] += ke[(i, j)];
                    }
                }
            }
        }
    }
    k
}
