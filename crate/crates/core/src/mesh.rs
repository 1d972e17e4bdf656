//! Tetrahedral mesh representation, validation, geometric queries and JSON I/O.
//!
//! Meshes are linear 4-node tetrahedra with one integration point per
//! element. Connectivity is canonically oriented so every element has
//! positive signed volume. A mesh is immutable after construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Length unit of the node coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthUnit {
    #[serde(rename = "mm")]
    Millimeter,
    #[serde(rename = "um")]
    Micrometer,
}

/// Immutable tetrahedral mesh.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub unit: LengthUnit,
    pub nodes: Vec<Vector3<f64>>,
    pub tets: Vec<[usize; 4]>,
    pub node_sets: BTreeMap<String, Vec<usize>>,
}

/// Serialized form of the mesh JSON schema.
#[derive(Serialize, Deserialize)]
struct MeshFile {
    unit: LengthUnit,
    nodes: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
    #[serde(default)]
    node_sets: BTreeMap<String, Vec<usize>>,
}

/// Signed volume of the tetrahedron spanned by four points.
pub fn signed_volume(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

impl Mesh {
    /// Builds a validated mesh, re-orienting tets to positive volume.
    pub fn new(
        unit: LengthUnit,
        nodes: Vec<Vector3<f64>>,
        mut tets: Vec<[usize; 4]>,
        node_sets: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let n = nodes.len();
        for (e, t) in tets.iter().enumerate() {
            for &i in t {
                if i >= n {
                    return Err(Error::Mesh(format!(
                        "tet {e} references node {i} but mesh has {n} nodes"
                    )));
                }
            }
        }
        for (name, set) in &node_sets {
            for &i in set {
                if i >= n {
                    return Err(Error::Mesh(format!(
                        "node set '{name}' references node {i} but mesh has {n} nodes"
                    )));
                }
            }
        }

        // Degeneracy threshold scales with element size.
        for (e, t) in tets.iter_mut().enumerate() {
            let v = signed_volume(&nodes[t[0]], &nodes[t[1]], &nodes[t[2]], &nodes[t[3]]);
            let h = edge_scale(&nodes, t);
            if v.abs() < 1e-14 * h * h * h {
                return Err(Error::Mesh(format!("degenerate tet {e} (volume {v:.3e})")));
            }
            if v < 0.0 {
                t.swap(2, 3);
            }
        }

        let mesh = Mesh { unit, nodes, tets, node_sets };
        mesh.check_coincident_nodes()?;
        Ok(mesh)
    }

    fn check_coincident_nodes(&self) -> Result<()> {
        let (lo, hi) = self.bounding_box();
        let diag = (hi - lo).norm();
        let tol = 1e-9 * diag.max(f64::MIN_POSITIVE);
        // Hash nodes to a grid at the tolerance scale and compare neighbors.
        let cell = tol.max(1e-300);
        let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in self.nodes.iter().enumerate() {
            let key = (
                (p.x / cell).floor() as i64,
                (p.y / cell).floor() as i64,
                (p.z / cell).floor() as i64,
            );
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(cands) = grid.get(&(key.0 + dx, key.1 + dy, key.2 + dz)) {
                            for &j in cands {
                                if (self.nodes[j] - p).norm() < tol {
                                    return Err(Error::Mesh(format!(
                                        "nodes {j} and {i} coincide within tolerance"
                                    )));
                                }
                            }
                        }
                    }
                }
            }
            grid.entry(key).or_default().push(i);
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    /// Axis-aligned bounding box (lo, hi).
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.nodes {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Geometric center of the node cloud.
    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in &self.nodes {
            c += p;
        }
        c / self.nodes.len() as f64
    }

    /// Volume of element `e`.
    pub fn tet_volume(&self, e: usize) -> f64 {
        let t = &self.tets[e];
        signed_volume(&self.nodes[t[0]], &self.nodes[t[1]], &self.nodes[t[2]], &self.nodes[t[3]])
    }

    /// Total mesh volume.
    pub fn volume(&self) -> f64 {
        (0..self.tets.len()).map(|e| self.tet_volume(e)).sum()
    }

    /// Nodes lying on faces that belong to exactly one tet.
    pub fn boundary_nodes(&self) -> HashSet<usize> {
        let mut face_count: HashMap<[usize; 3], usize> = HashMap::new();
        for t in &self.tets {
            for f in tet_faces(t) {
                let mut key = f;
                key.sort_unstable();
                *face_count.entry(key).or_insert(0) += 1;
            }
        }
        let mut out = HashSet::new();
        for (face, count) in face_count {
            if count == 1 {
                out.extend(face);
            }
        }
        out
    }

    /// Loads and validates a mesh from the JSON schema.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: MeshFile = serde_json::from_str(&text)?;
        Mesh::new(
            file.unit,
            file.nodes.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            file.tets,
            file.node_sets,
        )
    }

    /// Writes the mesh in the JSON schema.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = MeshFile {
            unit: self.unit,
            nodes: self.nodes.iter().map(|p| [p.x, p.y, p.z]).collect(),
            tets: self.tets.clone(),
            node_sets: self.node_sets.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }
}

fn edge_scale(nodes: &[Vector3<f64>], t: &[usize; 4]) -> f64 {
    let mut h: f64 = 0.0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            h = h.max((nodes[t[i]] - nodes[t[j]]).norm());
        }
    }
    h
}

/// The four faces of a positively oriented tet, outward-ordered.
pub fn tet_faces(t: &[usize; 4]) -> [[usize; 3]; 4] {
    [
        [t[0], t[2], t[1]],
        [t[0], t[1], t[3]],
        [t[1], t[2], t[3]],
        [t[0], t[3], t[2]],
    ]
}

/// Maps each node to three consecutive global DOF indices with a set of
/// constrained DOFs carrying prescribed values.
#[derive(Debug, Clone, Default)]
pub struct DofMap {
    /// Prescribed value per constrained global DOF.
    pub constrained: BTreeMap<usize, f64>,
    /// Global DOF -> index into the free system (None when constrained).
    pub free_index: Vec<Option<usize>>,
    pub n_free: usize,
}

impl DofMap {
    /// Builds the map for `n_nodes` nodes given (dof, value) constraints.
    pub fn new(n_nodes: usize, constraints: &[(usize, f64)]) -> Result<Self> {
        let n_dof = 3 * n_nodes;
        let mut constrained = BTreeMap::new();
        for &(dof, value) in constraints {
            if dof >= n_dof {
                return Err(Error::Mesh(format!("constraint on dof {dof} out of range {n_dof}")));
            }
            if let Some(prev) = constrained.insert(dof, value) {
                if prev != value {
                    return Err(Error::Mesh(format!(
                        "contradictory constraints on dof {dof}: {prev} vs {value}"
                    )));
                }
            }
        }
        let mut free_index = vec![None; n_dof];
        let mut n_free = 0;
        for (dof, slot) in free_index.iter_mut().enumerate() {
            if !constrained.contains_key(&dof) {
                *slot = Some(n_free);
                n_free += 1;
            }
        }
        Ok(DofMap { constrained, free_index, n_free })
    }

    pub fn n_dof(&self) -> usize {
        self.free_index.len()
    }

    /// Full-size displacement vector with prescribed values filled in.
    pub fn full_vector(&self, free: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.n_dof()];
        for (dof, slot) in self.free_index.iter().enumerate() {
            if let Some(f) = slot {
                u[dof] = free[*f];
            }
        }
        for (&dof, &v) in &self.constrained {
            u[dof] = v;
        }
        u
    }
}
