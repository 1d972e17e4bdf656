//! First-order computational homogenization: uniform-displacement boundary
//! conditions, stress averaging (volume and boundary forms), Hill–Mandel
//! verification, and the consistent macro tangent by static condensation.
//!
//! The averaging volume is the full RVE box including pores: pores carry
//! zero stress, so box averaging realizes the dilution physically.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::fem::{internal_force, jacobi_pcg, AssemblyPlan, ElementOperator};
use crate::material::{
    return_map, stress_to_voigt, ElasticConstants, HardeningCurve, MaterialPointState, Voigt66,
};
use crate::mesh::{DofMap, Mesh};
use crate::rom::box_boundary_nodes;
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Homogenized stress and consistent tangent at one macro point.
#[derive(Debug, Clone)]
pub struct HomogenizedResponse {
    pub s: Matrix3<f64>,
    pub c: Voigt66,
}

/// Prescribed displacements u = (F - I)(x - x0) on the RVE box surface.
pub fn apply_uniform_bc(mesh: &Mesh, f: &Matrix3<f64>, x0: &Vector3<f64>) -> Result<Vec<(usize, f64)>> {
    if f.determinant() <= 0.0 {
        return Err(Error::Config("deformation gradient must have positive determinant".into()));
    }
    let h = f - Matrix3::identity();
    let mut out = Vec::new();
    for n in box_boundary_nodes(mesh)? {
        let u = h * (mesh.nodes[n] - x0);
        for d in 0..3 {
            out.push((3 * n + d, u[d]));
        }
    }
    Ok(out)
}

/// S = (1/V0) sum_e V_e sigma_e over solid elements; V0 is the box volume.
pub fn average_stress_volume(
    ops: &[ElementOperator],
    stresses: &[Matrix3<f64>],
    v0: f64,
) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for (op, sig) in ops.iter().zip(stresses) {
        s += sig * op.volume;
    }
    s /= v0;
    (s + s.transpose()) / 2.0
}

/// S = (1/V0) sum_i f_i (x) (x_i - x0) over boundary reactions, symmetrized.
pub fn average_stress_boundary(
    mesh: &Mesh,
    reactions: &[(usize, f64)],
    x0: &Vector3<f64>,
    v0: f64,
) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for &(dof, f) in reactions {
        let node = dof / 3;
        let comp = dof % 3;
        let rel = mesh.nodes[node] - x0;
        for b in 0..3 {
            s[(comp, b)] += f * rel[b];
        }
    }
    s /= v0;
    (s + s.transpose()) / 2.0
}

/// Volume-averaged deformation gradient over the solid phase.
pub fn kinematic_average(mesh: &Mesh, ops: &[ElementOperator], u: &[f64]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    let mut v = 0.0;
    for (e, op) in ops.iter().enumerate() {
        h += crate::fem::element_gradient(mesh, op, e, u) * op.volume;
        v += op.volume;
    }
    Matrix3::identity() + h / v
}

/// Solves K u = 0 with prescribed DOF values by elimination; returns the
/// full vector. `k` is the full (unconstrained) system.
pub fn constrained_solve(
    k: &CsrMatrix,
    prescribed: &[(usize, f64)],
    tol: f64,
) -> Result<Vec<f64>> {
    let n = k.n;
    let mut fixed = vec![None; n];
    for &(dof, v) in prescribed {
        fixed[dof] = Some(v);
    }
    let mut free_index = vec![usize::MAX; n];
    let mut free_dofs = Vec::new();
    for dof in 0..n {
        if fixed[dof].is_none() {
            free_index[dof] = free_dofs.len();
            free_dofs.push(dof);
        }
    }
    let n_free = free_dofs.len();
    if n_free == 0 {
        return Ok((0..n).map(|d| fixed[d].unwrap_or(0.0)).collect());
    }

    // rhs = -K_fp u_p via one full matvec with u_p embedded.
    let mut up = vec![0.0; n];
    for &(dof, v) in prescribed {
        up[dof] = v;
    }
    let kup = k.mul_vec_alloc(&up);
    let mut rhs = vec![0.0; n_free];
    for (f, &dof) in free_dofs.iter().enumerate() {
        rhs[f] = -kup[dof];
    }

    // Extract K_ff.
    let mut pairs = Vec::new();
    for &dof in &free_dofs {
        for idx in k.row_offsets[dof]..k.row_offsets[dof + 1] {
            let c = k.col_indices[idx];
            if free_index[c] != usize::MAX {
                pairs.push((free_index[dof], free_index[c]));
            }
        }
    }
    let mut kff = CsrMatrix::from_pattern(n_free, pairs);
    for &dof in &free_dofs {
        for idx in k.row_offsets[dof]..k.row_offsets[dof + 1] {
            let c = k.col_indices[idx];
            if free_index[c] != usize::MAX {
                let slot = kff.slot(free_index[dof], free_index[c]).unwrap();
                kff.values[slot] = k.values[idx];
            }
        }
    }
    let (uf, _) = jacobi_pcg(&kff, &rhs, tol, 50 * n_free.max(100))?;
    let mut full = up;
    for (f, &dof) in free_dofs.iter().enumerate() {
        full[dof] = uf[f];
    }
    Ok(full)
}

/// One prescribed DOF of the condensation: `comp = Some(d)` marks a
/// translational DOF (component d at relative position `rel`) that both
/// receives probe displacements and enters the stress outer product;
/// `comp = None` marks a prescribed rotational DOF held at zero.
#[derive(Debug, Clone, Copy)]
pub struct PrescribedDof {
    pub dof: usize,
    pub comp: Option<usize>,
    pub rel: Vector3<f64>,
}

/// Unit macro-strain tensor of Voigt component `v` (engineering shear).
pub fn voigt_probe(v: usize) -> Matrix3<f64> {
    let mut e = Matrix3::zeros();
    match v {
        0 => e[(0, 0)] = 1.0,
        1 => e[(1, 1)] = 1.0,
        2 => e[(2, 2)] = 1.0,
        3 => {
            e[(0, 1)] = 0.5;
            e[(1, 0)] = 0.5;
        }
        4 => {
            e[(0, 2)] = 0.5;
            e[(2, 0)] = 0.5;
        }
        _ => {
            e[(1, 2)] = 0.5;
            e[(2, 1)] = 0.5;
        }
    }
    e
}

/// Consistent macro tangent by condensing the full stiffness onto the
/// prescribed DOFs: for each of six unit strain probes, solve for the
/// interior response and average the prescribed-DOF force variation into a
/// stress variation.
pub fn condensed_tangent(
    k: &CsrMatrix,
    prescribed: &[PrescribedDof],
    v0: f64,
) -> Result<Voigt66> {
    let mut c = Voigt66::zeros();
    for v in 0..6 {
        let de = voigt_probe(v);
        let values: Vec<(usize, f64)> = prescribed
            .iter()
            .map(|p| {
                let val = match p.comp {
                    Some(d) => (de * p.rel)[d],
                    None => 0.0,
                };
                (p.dof, val)
            })
            .collect();
        let du = constrained_solve(k, &values, 1e-12)?;
        let df = k.mul_vec_alloc(&du);
        let mut ds = Matrix3::zeros();
        for p in prescribed {
            if let Some(d) = p.comp {
                for b in 0..3 {
                    ds[(d, b)] += df[p.dof] * p.rel[b];
                }
            }
        }
        ds /= v0;
        ds = (ds + ds.transpose()) / 2.0;
        let col = stress_to_voigt(&ds);
        for i in 0..6 {
            c[(i, v)] = col[i];
        }
    }
    Ok(c)
}

/// Hill–Mandel check: for each of six canonical probes dE, compare the
/// volume average of sigma : d_eps (with d_eps from the probe's admissible
/// displacement variation) against S : dE. Returns the maximum relative
/// residual.
pub fn hill_mandel_residual(
    mesh: &Mesh,
    ops: &[ElementOperator],
    stresses: &[Matrix3<f64>],
    s: &Matrix3<f64>,
    k: &CsrMatrix,
    x0: &Vector3<f64>,
    v0: f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let boundary = box_boundary_nodes(mesh)?;
    for v in 0..6 {
        let de = voigt_probe(v);
        let mut prescribed = Vec::new();
        for &n in &boundary {
            let u = de * (mesh.nodes[n] - x0);
            for d in 0..3 {
                prescribed.push((3 * n + d, u[d]));
            }
        }
        let du = constrained_solve(k, &prescribed, 1e-12)?;
        let mut lhs = 0.0;
        for (e, op) in ops.iter().enumerate() {
            let d_eps_v = crate::fem::element_strain(mesh, op, e, &du);
            let sig_v = stress_to_voigt(&stresses[e]);
            // Voigt contraction with engineering shear sums sigma : eps.
            lhs += (sig_v.transpose() * d_eps_v)[(0, 0)] * op.volume;
        }
        lhs /= v0;
        let rhs = (s.transpose() * de).trace();
        let denom = rhs.abs().max(1e-12);
        worst = worst.max((lhs - rhs).abs() / denom);
    }
    Ok(worst)
}

/// Central-difference tangent oracle: `eval` computes S(F) from the same
/// committed state each call.
pub fn fd_tangent(
    mut eval: impl FnMut(&Matrix3<f64>) -> Result<Matrix3<f64>>,
    f0: &Matrix3<f64>,
    step: f64,
) -> Result<Voigt66> {
    let mut c = Voigt66::zeros();
    for v in 0..6 {
        let de = voigt_probe(v);
        let s_plus = eval(&(f0 + de * step))?;
        let s_minus = eval(&(f0 - de * step))?;
        let col = stress_to_voigt(&((s_plus - s_minus) / (2.0 * step)));
        for i in 0..6 {
            c[(i, v)] = col[i];
        }
    }
    Ok(c)
}

/// Pointwise Von-Mises field comparison: e = (1/N) * l2-norm of the
/// difference, plus the per-point differences for histograms.
#[derive(Debug, Clone)]
pub struct FieldComparison {
    pub e: f64,
    pub diffs: Vec<f64>,
}

pub fn compare_fields(a: &[f64], b: &[f64]) -> Result<FieldComparison> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let l2 = diffs.iter().map(|d| d * d).sum::<f64>().sqrt();
    Ok(FieldComparison { e: l2 / a.len() as f64, diffs })
}

/// Output of one FE micro increment.
#[derive(Debug, Clone)]
pub struct FeStepOutput {
    pub displacement: Vec<f64>,
    pub element_stress: Vec<Matrix3<f64>>,
    pub response: HomogenizedResponse,
    pub reactions: Vec<(usize, f64)>,
    pub newton_iters: usize,
}

/// Persistent direct FE model of one RVE under uniform-displacement
/// loading; the reference ("DNS") counterpart of the reduced model.
#[derive(Clone)]
pub struct MicroFe {
    pub mesh: Mesh,
    pub ops: Vec<ElementOperator>,
    pub elastic: ElasticConstants,
    pub hardening: HardeningCurve,
    pub x0: Vector3<f64>,
    pub box_volume: f64,
    pub tol_newton: f64,
    pub tol_cg: f64,
    pub max_newton_iters: usize,
    plan: AssemblyPlan,
    boundary_dofs: Vec<usize>,
    states: Vec<MaterialPointState>,
    committed_strain: Vec<SMatrix<f64, 6, 1>>,
    u: Vec<f64>,
    last_tangents: Vec<Voigt66>,
}

impl MicroFe {
    pub fn new(mesh: Mesh, elastic: ElasticConstants, hardening: HardeningCurve) -> Result<Self> {
        let ops = crate::fem::element_operators(&mesh);
        let (lo, hi) = mesh.bounding_box();
        let ext = hi - lo;
        let box_volume = ext.x * ext.y * ext.z;
        let x0 = (lo + hi) / 2.0;
        let boundary_dofs: Vec<usize> = box_boundary_nodes(&mesh)?
            .into_iter()
            .flat_map(|n| (0..3).map(move |d| 3 * n + d))
            .collect();
        let zero: Vec<(usize, f64)> = boundary_dofs.iter().map(|&d| (d, 0.0)).collect();
        let dof_map = DofMap::new(mesh.n_nodes(), &zero)?;
        let plan = AssemblyPlan::new(&mesh, dof_map);
        let n_el = mesh.n_tets();
        Ok(MicroFe {
            states: vec![MaterialPointState::default(); n_el],
            committed_strain: vec![SMatrix::zeros(); n_el],
            u: vec![0.0; 3 * mesh.n_nodes()],
            last_tangents: Vec::new(),
            mesh,
            ops,
            elastic,
            hardening,
            x0,
            box_volume,
            tol_newton: 1e-3,
            tol_cg: 1e-8,
            max_newton_iters: 40,
            plan,
            boundary_dofs,
        })
    }

    pub fn element_states(&self) -> &[MaterialPointState] {
        &self.states
    }

    pub fn displacement(&self) -> &[f64] {
        &self.u
    }

    /// Full-system stiffness from the last converged tangents.
    pub fn full_stiffness(&self) -> CsrMatrix {
        crate::fem::assemble_full(&self.mesh, &self.ops, &self.last_tangents)
    }

    /// Advances to macroscopic deformation gradient `f_m` and commits.
    pub fn solve_step(&mut self, f_m: &Matrix3<f64>) -> Result<FeStepOutput> {
        let (out, trial) = self.trial_step(f_m)?;
        self.commit(trial);
        Ok(out)
    }

    /// Solves for `f_m` without committing history.
    pub fn trial_step(&self, f_m: &Matrix3<f64>) -> Result<(FeStepOutput, FeTrial)> {
        let h = f_m - Matrix3::identity();
        let mut u = self.u.clone();
        for &dof in &self.boundary_dofs {
            let node = dof / 3;
            let comp = dof % 3;
            u[dof] = (h * (self.mesh.nodes[node] - self.x0))[comp];
        }

        let n_el = self.mesh.n_tets();
        let mut converged = false;
        let mut newton_iters = 0;
        let mut final_states = Vec::new();
        let mut final_tangents = Vec::new();
        let mut rel_res = 0.0;
        for iter in 0..=self.max_newton_iters {
            let mut states = Vec::with_capacity(n_el);
            let mut tangents = Vec::with_capacity(n_el);
            for e in 0..n_el {
                let eps = crate::fem::element_strain(&self.mesh, &self.ops[e], e, &u);
                let d_eps =
                    crate::fem::strain_tensor_from_voigt(&(eps - self.committed_strain[e]));
                let (st, c) = return_map(&self.states[e], &d_eps, &self.elastic, &self.hardening)?;
                states.push(st);
                tangents.push(c);
            }
            let stresses: Vec<Matrix3<f64>> = states.iter().map(|s| s.stress).collect();
            let f_int = internal_force(&self.mesh, &self.ops, &stresses);
            let mut res_free = 0.0;
            let mut res_fixed = 0.0;
            for (dof, slot) in self.plan.dof_map.free_index.iter().enumerate() {
                if slot.is_some() {
                    res_free += f_int[dof] * f_int[dof];
                } else {
                    res_fixed += f_int[dof] * f_int[dof];
                }
            }
            rel_res = res_free.sqrt() / res_fixed.sqrt().max(1e-12);
            if rel_res <= self.tol_newton {
                final_states = states;
                final_tangents = tangents;
                converged = true;
                newton_iters = iter;
                break;
            }
            if iter == self.max_newton_iters {
                break;
            }
            let k = self.plan.assemble(&self.mesh, &self.ops, &tangents);
            let mut rhs = vec![0.0; self.plan.n_free()];
            for (dof, slot) in self.plan.dof_map.free_index.iter().enumerate() {
                if let Some(f) = slot {
                    rhs[*f] = -f_int[dof];
                }
            }
            let (du, _) = jacobi_pcg(&k, &rhs, self.tol_cg, 50 * self.plan.n_free().max(100))?;
            // Backtracking line search on the free residual norm.
            let res_at = |u_trial: &[f64]| -> Result<f64> {
                let mut r = 0.0;
                let mut states = Vec::with_capacity(n_el);
                for e in 0..n_el {
                    let eps = crate::fem::element_strain(&self.mesh, &self.ops[e], e, u_trial);
                    let d_eps =
                        crate::fem::strain_tensor_from_voigt(&(eps - self.committed_strain[e]));
                    let (st, _) =
                        return_map(&self.states[e], &d_eps, &self.elastic, &self.hardening)?;
                    states.push(st);
                }
                let stresses: Vec<Matrix3<f64>> = states.iter().map(|s| s.stress).collect();
                let f_int = internal_force(&self.mesh, &self.ops, &stresses);
                for (dof, slot) in self.plan.dof_map.free_index.iter().enumerate() {
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
                for (dof, slot) in self.plan.dof_map.free_index.iter().enumerate() {
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
        }
        if !converged {
            return Err(Error::Convergence(format!(
                "FE micro Newton stalled at residual {rel_res:.3e}"
            )));
        }

        let stresses: Vec<Matrix3<f64>> = final_states.iter().map(|s| s.stress).collect();
        let f_int = internal_force(&self.mesh, &self.ops, &stresses);
        let reactions: Vec<(usize, f64)> =
            self.boundary_dofs.iter().map(|&d| (d, f_int[d])).collect();
        let s = average_stress_volume(&self.ops, &stresses, self.box_volume);

        let k_full = crate::fem::assemble_full(&self.mesh, &self.ops, &final_tangents);
        let prescribed: Vec<PrescribedDof> = self
            .boundary_dofs
            .iter()
            .map(|&dof| PrescribedDof {
                dof,
                comp: Some(dof % 3),
                rel: self.mesh.nodes[dof / 3] - self.x0,
            })
            .collect();
        let c = condensed_tangent(&k_full, &prescribed, self.box_volume)?;

        let out = FeStepOutput {
            displacement: u.clone(),
            element_stress: stresses,
            response: HomogenizedResponse { s, c },
            reactions,
            newton_iters,
        };
        Ok((out, FeTrial { u, states: final_states, tangents: final_tangents }))
    }

    pub fn commit(&mut self, trial: FeTrial) {
        for e in 0..self.mesh.n_tets() {
            self.committed_strain[e] =
                crate::fem::element_strain(&self.mesh, &self.ops[e], e, &trial.u);
        }
        self.u = trial.u;
        self.states = trial.states;
        self.last_tangents = trial.tangents;
    }
}

/// Converged-but-uncommitted state of one FE micro increment.
#[derive(Debug, Clone)]
pub struct FeTrial {
    u: Vec<f64>,
    states: Vec<MaterialPointState>,
    tangents: Vec<Voigt66>,
}

/// Serialized committed history of an FE micro model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FeCheckpoint {
    pub states: Vec<MaterialPointState>,
    pub strains: Vec<[f64; 6]>,
    pub u: Vec<f64>,
}

impl MicroFe {
    pub fn checkpoint(&self) -> FeCheckpoint {
        FeCheckpoint {
            states: self.states.clone(),
            strains: self
                .committed_strain
                .iter()
                .map(|s| [s[0], s[1], s[2], s[3], s[4], s[5]])
                .collect(),
            u: self.u.clone(),
        }
    }

    pub fn restore(&mut self, cp: FeCheckpoint) -> Result<()> {
        if cp.states.len() != self.mesh.n_tets() || cp.u.len() != 3 * self.mesh.n_nodes() {
            return Err(Error::LengthMismatch { expected: self.mesh.n_tets(), got: cp.states.len() });
        }
        self.states = cp.states;
        self.committed_strain =
            cp.strains.iter().map(|s| SMatrix::<f64, 6, 1>::from_column_slice(s)).collect();
        self.u = cp.u;
        self.last_tangents.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{elastic_tensor, strain_to_voigt, HardeningMode};
    use crate::mcr::{voxel_to_tets, VoxelGrid};
    use crate::mesh::LengthUnit;

    fn elastic() -> ElasticConstants {
        ElasticConstants { e: 6.89e4, nu: 0.35 }
    }

    fn hardening() -> HardeningCurve {
        HardeningCurve::new(
            vec![(0.0, 170.0), (0.05, 220.0), (0.2, 260.0)],
            HardeningMode::Isotropic,
        )
        .unwrap()
    }

    fn porous_mesh(n: usize) -> Mesh {
        // Centered spherical pore, radius 0.28 of the box.
        let grid = VoxelGrid::from_fn(n, |c| {
            (c - Vector3::new(0.5, 0.5, 0.5)).norm() > 0.28
        });
        voxel_to_tets(&grid, 100.0, LengthUnit::Micrometer).unwrap()
    }

    #[test]
    fn uniform_stress_averages() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(3), 1.0, LengthUnit::Micrometer).unwrap();
        let ops = crate::fem::element_operators(&mesh);
        let sigma = Matrix3::new(10.0, 2.0, 0.0, 2.0, -3.0, 1.0, 0.0, 1.0, 5.0);
        let stresses = vec![sigma; mesh.n_tets()];
        let s = average_stress_volume(&ops, &stresses, 1.0);
        assert!((s - sigma).norm() < 1e-12);

        // Dilution: pores subtract volume but not stress.
        let porous = porous_mesh(8);
        let pops = crate::fem::element_operators(&porous);
        let solid_frac = porous.volume() / 1e6;
        let sp = average_stress_volume(&pops, &vec![sigma; porous.n_tets()], 1e6);
        assert!((sp - sigma * solid_frac).norm() < 1e-9);
    }

    #[test]
    fn uniform_bc_and_kinematic_average() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(4), 100.0, LengthUnit::Micrometer).unwrap();
        let ops = crate::fem::element_operators(&mesh);
        let f = Matrix3::new(1.01, 0.004, 0.0, 0.002, 0.996, 0.0, 0.0, 0.001, 0.998);
        let x0 = Vector3::new(50.0, 50.0, 50.0);
        // Homogeneous solid: the affine field solves the BVP exactly; its
        // volume-averaged deformation gradient must be F.
        let mut u = vec![0.0; 3 * mesh.n_nodes()];
        let h = f - Matrix3::identity();
        for (i, p) in mesh.nodes.iter().enumerate() {
            let v = h * (p - x0);
            for d in 0..3 {
                u[3 * i + d] = v[d];
            }
        }
        let favg = kinematic_average(&mesh, &ops, &u);
        assert!((favg - f).norm() < 1e-10);

        // Simple shear BC values.
        let gamma = 0.02;
        let fs = Matrix3::new(1.0, gamma, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let bc = apply_uniform_bc(&mesh, &fs, &x0).unwrap();
        for &(dof, v) in &bc {
            let node = dof / 3;
            if dof % 3 == 0 {
                assert!((v - gamma * (mesh.nodes[node].y - 50.0)).abs() < 1e-12);
            } else {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn volume_and_boundary_averages_agree_on_elastic_solve() {
        let mut fe = MicroFe::new(porous_mesh(5), elastic(), hardening()).unwrap();
        fe.tol_newton = 1e-8;
        fe.tol_cg = 1e-10;
        let f = Matrix3::new(1.001, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let out = fe.solve_step(&f).unwrap();
        let s_b = average_stress_boundary(&fe.mesh, &out.reactions, &fe.x0, fe.box_volume);
        let rel = (out.response.s - s_b).norm() / out.response.s.norm();
        assert!(rel < 1e-8, "volume vs boundary stress relative gap {rel}");
    }

    #[test]
    fn hill_mandel_holds_for_admissible_bc() {
        let mut fe = MicroFe::new(porous_mesh(5), elastic(), hardening()).unwrap();
        fe.tol_newton = 1e-8;
        fe.tol_cg = 1e-10;
        let f = Matrix3::new(1.0008, 0.0002, 0.0, 0.0, 0.9996, 0.0, 0.0, 0.0, 1.0);
        let out = fe.solve_step(&f).unwrap();
        let k = fe.full_stiffness();
        let r = hill_mandel_residual(
            &fe.mesh,
            &fe.ops,
            &out.element_stress,
            &out.response.s,
            &k,
            &fe.x0,
            fe.box_volume,
        )
        .unwrap();
        assert!(r <= 1e-6, "Hill-Mandel residual {r}");
    }

    #[test]
    fn homogeneous_solid_tangent_is_analytic() {
        let mesh = voxel_to_tets(&VoxelGrid::solid(3), 100.0, LengthUnit::Micrometer).unwrap();
        let mut fe = MicroFe::new(mesh, elastic(), hardening()).unwrap();
        fe.tol_newton = 1e-9;
        fe.tol_cg = 1e-12;
        let f = Matrix3::new(1.0005, 0.0, 0.0, 0.0, 0.9998, 0.0, 0.0, 0.0, 0.9999);
        let out = fe.solve_step(&f).unwrap();
        let c_exact = elastic_tensor(&elastic());
        let rel = (out.response.c - c_exact).norm() / c_exact.norm();
        assert!(rel < 1e-6, "tangent relative error {rel}");
        // Stress equals the direct material response.
        let eps = (f + f.transpose()) / 2.0 - Matrix3::identity();
        let s_exact =
            crate::material::stress_from_voigt(&(c_exact * strain_to_voigt(&eps)));
        let srel = (out.response.s - s_exact).norm() / s_exact.norm();
        assert!(srel < 1e-6, "stress relative error {srel}");
    }

    #[test]
    fn condensed_tangent_matches_fd_oracle_elastic() {
        let fe = MicroFe::new(porous_mesh(4), elastic(), hardening()).unwrap();
        let f0 = Matrix3::identity();
        let mut base = fe.clone();
        base.tol_newton = 1e-8;
        base.tol_cg = 1e-10;
        let out = base.solve_step(&f0).unwrap();
        let fd = fd_tangent(
            |f| {
                let mut m = fe.clone();
                m.tol_newton = 1e-8;
                m.tol_cg = 1e-10;
                Ok(m.solve_step(f)?.response.s)
            },
            &f0,
            1e-6,
        )
        .unwrap();
        let rel = (out.response.c - fd).norm() / fd.norm();
        assert!(rel < 1e-4, "condensed vs FD relative {rel}");
        // Porosity softens the axial stiffness.
        let c_solid = elastic_tensor(&elastic());
        assert!(out.response.c[(0, 0)] < c_solid[(0, 0)]);
    }

    #[test]
    fn field_comparison_closed_form() {
        let a = vec![1.0; 16];
        let b = vec![1.5; 16];
        let cmp = compare_fields(&a, &b).unwrap();
        // Constant difference c at N points: e = c * sqrt(N) / N.
        assert!((cmp.e - 0.5 * 4.0 / 16.0).abs() < 1e-15);
        assert!(compare_fields(&a, &b[..8]).is_err());
        let same = compare_fields(&a, &a).unwrap();
        assert_eq!(same.e, 0.0);
    }
}
