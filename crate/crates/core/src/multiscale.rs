//! Two-scale (FE-squared) orchestration: a macroscale Newton solve whose
//! constitutive law at each element is a full micro RVE solve, reduced or
//! direct. Deformation gradients travel down, homogenized stress and
//! tangent travel back up.

use std::path::PathBuf;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::clustering::kmeans;
use crate::deflation::{build_deflation_basis, deflated_cg, incremental_update};
use crate::fem::{element_gradient, element_operators, internal_force, AssemblyPlan, ElementOperator};
use crate::homogenize::{FeCheckpoint, FeStepOutput, FeTrial, HomogenizedResponse, MicroFe};
use crate::material::{
    ElasticConstants, HardeningCurve, HardeningMode, Voigt66,
};
use crate::mesh::{DofMap, Mesh};
use crate::rom::{MicroRom, MicroStepOutput, RomCheckpoint, RomTrial};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Run configuration (single JSON document; every field with a default is
/// optional in the file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub macro_mesh: Option<PathBuf>,
    #[serde(default)]
    pub rve_mesh: Option<PathBuf>,
    /// RVE pool for per-point random assignment.
    #[serde(default)]
    pub rve_pool: Vec<PathBuf>,
    pub material: MaterialConfig,
    #[serde(default = "default_k_macro")]
    pub k_macro: usize,
    #[serde(default = "default_k_micro")]
    pub k_micro: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol_cg")]
    pub tol_cg: f64,
    #[serde(default = "default_tol_newton")]
    pub tol_newton: f64,
    #[serde(default = "default_max_newton")]
    pub max_newton_iters: usize,
    /// Monotone load factors in (0, 1].
    #[serde(default = "default_load_steps")]
    pub load_steps: Vec<f64>,
    /// Macro Dirichlet program: final prescribed values per node set.
    #[serde(default)]
    pub boundary_conditions: Vec<BcSpec>,
    /// Deformation-gradient schedule for micro-only runs.
    #[serde(default)]
    pub deformation_gradients: Vec<[[f64; 3]; 3]>,
    /// Micro model kind: "rom" or "fe".
    #[serde(default = "default_micro_kind")]
    pub micro: String,
    #[serde(default = "default_true")]
    pub constrain_boundary_rotations: bool,
    /// Voxel resolution for RVE generation.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub descriptors: Option<crate::mcr::RveDescriptors>,
    /// Checkpoint file for long multiscale runs.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_k_macro() -> usize {
    16
}
fn default_k_micro() -> usize {
    64
}
fn default_tol_cg() -> f64 {
    1e-6
}
fn default_tol_newton() -> f64 {
    1e-3
}
fn default_max_newton() -> usize {
    30
}
fn default_load_steps() -> Vec<f64> {
    vec![0.5, 1.0]
}
fn default_micro_kind() -> String {
    "rom".into()
}
fn default_true() -> bool {
    true
}
fn default_resolution() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialConfig {
    pub e: f64,
    pub nu: f64,
    /// Piecewise-linear hardening points (eq. plastic strain, yield MPa).
    pub hardening: Vec<(f64, f64)>,
    /// Kinematic hardening modulus; absent = isotropic hardening.
    #[serde(default)]
    pub kinematic_modulus: Option<f64>,
}

impl MaterialConfig {
    pub fn elastic(&self) -> Result<ElasticConstants> {
        ElasticConstants::new(self.e, self.nu)
    }

    pub fn hardening_curve(&self) -> Result<HardeningCurve> {
        let mode = match self.kinematic_modulus {
            Some(h) => HardeningMode::LinearKinematic { modulus: h },
            None => HardeningMode::Isotropic,
        };
        HardeningCurve::new(self.hardening.clone(), mode)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcSpec {
    pub node_set: String,
    /// Constrained components (0 = x, 1 = y, 2 = z).
    pub components: Vec<usize>,
    /// Final prescribed value (scaled by load factor).
    pub value: f64,
}

impl RunConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tol_cg <= 0.0 || self.tol_newton <= 0.0 {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.load_steps.is_empty() {
            return Err(Error::Config("load schedule must be nonempty".into()));
        }
        if self.micro != "rom" && self.micro != "fe" {
            return Err(Error::Config(format!("unknown micro model '{}'", self.micro)));
        }
        Ok(())
    }

    /// Expands the BC program against a mesh into (dof, final value).
    pub fn macro_constraints(&self, mesh: &Mesh) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        for bc in &self.boundary_conditions {
            let set = mesh
                .node_sets
                .get(&bc.node_set)
                .ok_or_else(|| Error::Config(format!("node set '{}' not in mesh", bc.node_set)))?;
            for &n in set {
                for &c in &bc.components {
                    if c > 2 {
                        return Err(Error::Config(format!("component {c} out of range")));
                    }
                    out.push((3 * n + c, bc.value));
                }
            }
        }
        Ok(out)
    }
}

/// One macroscale integration point's micro model.
#[derive(Clone)]
pub enum MicroModel {
    Rom(MicroRom),
    Fe(MicroFe),
}

pub enum MicroTrial {
    Rom(RomTrial),
    Fe(FeTrial),
}

#[derive(Serialize, Deserialize)]
pub enum MicroCheckpoint {
    Rom(RomCheckpoint),
    Fe(FeCheckpoint),
}

impl MicroModel {
    pub fn trial(&self, f: &Matrix3<f64>) -> Result<(HomogenizedResponse, MicroTrial)> {
        match self {
            MicroModel::Rom(m) => {
                let (out, t): (MicroStepOutput, RomTrial) = m.trial_step(f)?;
                Ok((out.response, MicroTrial::Rom(t)))
            }
            MicroModel::Fe(m) => {
                let (out, t): (FeStepOutput, FeTrial) = m.trial_step(f)?;
                Ok((out.response, MicroTrial::Fe(t)))
            }
        }
    }

    pub fn commit(&mut self, trial: MicroTrial) -> Result<()> {
        match (self, trial) {
            (MicroModel::Rom(m), MicroTrial::Rom(t)) => {
                m.commit(t);
                Ok(())
            }
            (MicroModel::Fe(m), MicroTrial::Fe(t)) => {
                m.commit(t);
                Ok(())
            }
            _ => Err(Error::Config("micro trial kind mismatch".into())),
        }
    }

    pub fn checkpoint(&self) -> MicroCheckpoint {
        match self {
            MicroModel::Rom(m) => MicroCheckpoint::Rom(m.checkpoint()),
            MicroModel::Fe(m) => MicroCheckpoint::Fe(m.checkpoint()),
        }
    }

    pub fn restore(&mut self, cp: MicroCheckpoint) -> Result<()> {
        match (self, cp) {
            (MicroModel::Rom(m), MicroCheckpoint::Rom(c)) => m.restore(c),
            (MicroModel::Fe(m), MicroCheckpoint::Fe(c)) => m.restore(c),
            _ => Err(Error::Config("micro checkpoint kind mismatch".into())),
        }
    }
}

/// Outcome of one converged macro load step.
#[derive(Debug, Clone)]
pub struct MacroStep {
    pub load_factor: f64,
    pub displacement: Vec<f64>,
    pub reactions: Vec<(usize, f64)>,
    pub newton_iters: usize,
    pub linear_iters: Vec<usize>,
    pub yielded_counts: Vec<usize>,
    /// Macro element stresses (homogenized micro S).
    pub element_stress: Vec<Matrix3<f64>>,
}

/// Serialized resumable state of a multiscale run.
#[derive(Serialize, Deserialize)]
pub struct MultiscaleCheckpoint {
    pub completed_factor: f64,
    pub u: Vec<f64>,
    pub micro: Vec<MicroCheckpoint>,
}

/// Two-scale model: macro mesh + one micro model per macro element.
pub struct Multiscale {
    pub mesh: Mesh,
    pub ops: Vec<ElementOperator>,
    pub points: Vec<MicroModel>,
    pub prescribed: Vec<(usize, f64)>,
    pub tol_newton: f64,
    pub tol_cg: f64,
    pub max_newton_iters: usize,
    plan: AssemblyPlan,
    basis: crate::deflation::DeflationBasis,
    u: Vec<f64>,
    committed_factor: f64,
    k_current: Option<CsrMatrix>,
    k_tangents: Vec<Voigt66>,
}

impl Multiscale {
    pub fn new(
        mesh: Mesh,
        points: Vec<MicroModel>,
        prescribed: Vec<(usize, f64)>,
        k_macro: usize,
        seed: u64,
        tol_newton: f64,
        tol_cg: f64,
        max_newton_iters: usize,
    ) -> Result<Self> {
        if points.len() != mesh.n_tets() {
            return Err(Error::LengthMismatch { expected: mesh.n_tets(), got: points.len() });
        }
        let ops = element_operators(&mesh);
        let dof_map = DofMap::new(mesh.n_nodes(), &prescribed)?;
        let plan = AssemblyPlan::new(&mesh, dof_map);
        let partition = kmeans(&mesh.nodes, k_macro.min(mesh.n_nodes()), seed)?;
        let basis = build_deflation_basis(&mesh, &partition, &plan.dof_map)?;
        let n = 3 * mesh.n_nodes();
        Ok(Multiscale {
            mesh,
            ops,
            points,
            prescribed,
            tol_newton,
            tol_cg,
            max_newton_iters,
            plan,
            basis,
            u: vec![0.0; n],
            committed_factor: 0.0,
            k_current: None,
            k_tangents: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> MultiscaleCheckpoint {
        MultiscaleCheckpoint {
            completed_factor: self.committed_factor,
            u: self.u.clone(),
            micro: self.points.iter().map(|p| p.checkpoint()).collect(),
        }
    }

    pub fn restore(&mut self, cp: MultiscaleCheckpoint) -> Result<()> {
        if cp.micro.len() != self.points.len() {
            return Err(Error::LengthMismatch { expected: self.points.len(), got: cp.micro.len() });
        }
        self.u = cp.u;
        self.committed_factor = cp.completed_factor;
        for (p, c) in self.points.iter_mut().zip(cp.micro) {
            p.restore(c)?;
        }
        self.k_current = None;
        Ok(())
    }

    pub fn committed_factor(&self) -> f64 {
        self.committed_factor
    }

    /// Runs the load schedule; micro non-convergence bisects the offending
    /// step up to a depth limit. Returns one record per converged step
    /// (bisected sub-steps are folded into their parent's record list).
    pub fn run(&mut self, load_factors: &[f64]) -> Result<Vec<MacroStep>> {
        let mut steps = Vec::new();
        for &factor in load_factors {
            if factor <= self.committed_factor {
                continue;
            }
            self.advance(factor, 0, &mut steps)?;
        }
        Ok(steps)
    }

    fn advance(&mut self, target: f64, depth: usize, steps: &mut Vec<MacroStep>) -> Result<()> {
        match self.newton_at(target) {
            Ok(step) => {
                steps.push(step);
                Ok(())
            }
            Err(Error::Convergence(msg)) if depth < 4 => {
                let mid = 0.5 * (self.committed_factor + target);
                let _ = msg;
                self.advance(mid, depth + 1, steps)?;
                self.advance(target, depth + 1, steps)
            }
            Err(e) => Err(e),
        }
    }

    fn newton_at(&mut self, factor: f64) -> Result<MacroStep> {
        let saved_u = self.u.clone();
        for &(dof, value) in &self.prescribed {
            self.u[dof] = factor * value;
        }
        let n_el = self.mesh.n_tets();
        let mut linear_iters = Vec::new();
        let mut yielded_counts = Vec::new();

        for iter in 0..=self.max_newton_iters {
            // Micro trials at the current macro state.
            let mut trials = Vec::with_capacity(n_el);
            let mut stresses = Vec::with_capacity(n_el);
            let mut tangents = Vec::with_capacity(n_el);
            for e in 0..n_el {
                let f = Matrix3::identity() + element_gradient(&self.mesh, &self.ops[e], e, &self.u);
                let (resp, trial) = self.points[e].trial(&f)?;
                stresses.push(resp.s);
                tangents.push(resp.c);
                trials.push(trial);
            }
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
            let rel_res = res_free.sqrt() / res_fixed.sqrt().max(1e-12);
            if rel_res <= self.tol_newton {
                for (p, t) in self.points.iter_mut().zip(trials) {
                    p.commit(t)?;
                }
                self.committed_factor = factor;
                let reactions = self
                    .plan
                    .dof_map
                    .constrained
                    .keys()
                    .map(|&dof| (dof, f_int[dof]))
                    .collect();
                return Ok(MacroStep {
                    load_factor: factor,
                    displacement: self.u.clone(),
                    reactions,
                    newton_iters: linear_iters.len(),
                    linear_iters,
                    yielded_counts,
                    element_stress: stresses,
                });
            }
            if iter == self.max_newton_iters {
                break;
            }

            // Incremental stiffness maintenance + deflated CG.
            let k = match self.k_current.as_mut() {
                None => {
                    let k = self.plan.assemble(&self.mesh, &self.ops, &tangents);
                    yielded_counts.push(0);
                    self.k_current = Some(k);
                    self.k_tangents = tangents;
                    self.k_current.as_mut().unwrap()
                }
                Some(k) => {
                    let (yielded, _) = incremental_update(
                        k,
                        &self.plan,
                        &self.mesh,
                        &self.ops,
                        &self.k_tangents,
                        &tangents,
                    );
                    yielded_counts.push(yielded);
                    self.k_tangents = tangents;
                    k
                }
            };
            let coarse = crate::deflation::coarse_inverse(self.basis.coarse_matrix(k))?;
            let mut rhs = vec![0.0; self.plan.n_free()];
            for (dof, slot) in self.plan.dof_map.free_index.iter().enumerate() {
                if let Some(f) = slot {
                    rhs[*f] = -f_int[dof];
                }
            }
            let (du, cg_iters) = deflated_cg(
                k,
                &rhs,
                &self.basis,
                &coarse,
                self.tol_cg,
                20 * self.plan.n_free().max(100),
            )?;
            linear_iters.push(cg_iters);
            for (dof, slot) in self.plan.dof_map.free_index.iter().enumerate() {
                if let Some(f) = slot {
                    self.u[dof] += du[*f];
                }
            }
        }
        self.u = saved_u;
        Err(Error::Convergence(format!(
            "macro Newton did not converge at load factor {factor}"
        )))
    }
}

/// Trapezoidal work density of a stress-strain history (MPa = MJ/m^3 when
/// strain is dimensionless).
pub fn compute_toughness(history: &[(f64, f64)]) -> f64 {
    let mut w = 0.0;
    for pair in history.windows(2) {
        let (e0, s0) = pair[0];
        let (e1, s1) = pair[1];
        w += 0.5 * (s0 + s1) * (e1 - e0);
    }
    w
}

/// Formats with 9 significant digits for CSV/JSON regression stability.
pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}
