//! Descriptor-based stochastic characterization and reconstruction of
//! periodic porous RVEs.
//!
//! Pores are prolate ellipsoids (two identical minor axes) in a periodic
//! cube. Reconstruction is hierarchical: pore count first, then simulated
//! annealing on the mean nearest-neighbor distance, then orientation and
//! aspect ratio, and finally a global size calibration against the target
//! volume fraction measured on the voxel grid.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{UnitQuaternion, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::{LengthUnit, Mesh};
use crate::{Error, Result};

/// Physical descriptors of a porous RVE.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RveDescriptors {
    /// Pore volume fraction.
    pub volume_fraction: f64,
    /// Number of pores.
    pub pore_count: usize,
    /// Major/minor semi-axis ratio.
    pub aspect_ratio: f64,
    /// Mean nearest-neighbor pore center distance under the periodic
    /// metric (micrometers). Zero for a single pore.
    pub mean_neighbor_distance: f64,
    /// RVE side length (micrometers).
    pub side_length: f64,
}

impl RveDescriptors {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.volume_fraction)
            || self.pore_count == 0
            || self.aspect_ratio < 1.0
            || self.side_length <= 0.0
        {
            return Err(Error::Config(format!("invalid descriptors {self:?}")));
        }
        Ok(())
    }
}

/// One prolate ellipsoidal pore; the major axis is local x.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pore {
    pub center: Vector3<f64>,
    /// Major semi-axis (micrometers).
    pub r_major: f64,
    /// Minor semi-axis, duplicated on both minor directions.
    pub r_minor: f64,
    pub orientation: UnitQuaternion<f64>,
}

impl Pore {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = self.orientation.inverse() * (p - self.center);
        let a = d.x / self.r_major;
        let b = d.y / self.r_minor;
        let c = d.z / self.r_minor;
        a * a + b * b + c * c <= 1.0
    }
}

/// Base pores plus the wrap-around images of boundary-crossing pores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoreSet {
    pub side_length: f64,
    pub pores: Vec<Pore>,
    pub images: Vec<Pore>,
}

impl PoreSet {
    pub fn all(&self) -> impl Iterator<Item = &Pore> {
        self.pores.iter().chain(self.images.iter())
    }

    /// Rebuilds the periodic images from the base pores: one image per
    /// nonzero shift combination of the axes the pore's bounding sphere
    /// crosses.
    pub fn rebuild_images(&mut self) {
        let l = self.side_length;
        self.images.clear();
        for pore in &self.pores {
            let r = pore.r_major;
            let mut shifts: [Vec<f64>; 3] = [vec![0.0], vec![0.0], vec![0.0]];
            for axis in 0..3 {
                let c = pore.center[axis];
                if c - r < 0.0 {
                    shifts[axis].push(l);
                }
                if c + r > l {
                    shifts[axis].push(-l);
                }
            }
            for &sx in &shifts[0] {
                for &sy in &shifts[1] {
                    for &sz in &shifts[2] {
                        if sx == 0.0 && sy == 0.0 && sz == 0.0 {
                            continue;
                        }
                        let mut img = pore.clone();
                        img.center += Vector3::new(sx, sy, sz);
                        self.images.push(img);
                    }
                }
            }
        }
    }
}

/// Periodic center-to-center distance in a cube of side `l`.
pub fn periodic_distance(a: &Vector3<f64>, b: &Vector3<f64>, l: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        let mut d = (a[i] - b[i]).abs() % l;
        d = d.min(l - d);
        s += d * d;
    }
    s.sqrt()
}

fn mean_neighbor_distance(centers: &[Vector3<f64>], l: f64) -> f64 {
    if centers.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, a) in centers.iter().enumerate() {
        let mut nearest = f64::INFINITY;
        for (j, b) in centers.iter().enumerate() {
            if i != j {
                nearest = nearest.min(periodic_distance(a, b, l));
            }
        }
        total += nearest;
    }
    total / centers.len() as f64
}

/// Solid/pore occupancy on a regular grid over the periodic cube.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    /// Voxels per axis.
    pub resolution: usize,
    /// true = solid.
    pub solid: Vec<bool>,
}

impl VoxelGrid {
    pub fn solid(resolution: usize) -> Self {
        VoxelGrid { resolution, solid: vec![true; resolution * resolution * resolution] }
    }

    /// Builds occupancy from a predicate over voxel centers in [0,1)^3
    /// (true = solid).
    pub fn from_fn(resolution: usize, f: impl Fn(Vector3<f64>) -> bool) -> Self {
        let n = resolution;
        let mut solid = vec![false; n * n * n];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let c = Vector3::new(
                        (i as f64 + 0.5) / n as f64,
                        (j as f64 + 0.5) / n as f64,
                        (k as f64 + 0.5) / n as f64,
                    );
                    solid[Self::index_of(n, i, j, k)] = f(c);
                }
            }
        }
        VoxelGrid { resolution: n, solid }
    }

    fn index_of(n: usize, i: usize, j: usize, k: usize) -> usize {
        (k * n + j) * n + i
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        Self::index_of(self.resolution, i, j, k)
    }

    pub fn solid_fraction(&self) -> f64 {
        self.solid.iter().filter(|&&s| s).count() as f64 / self.solid.len() as f64
    }

    pub fn pore_fraction(&self) -> f64 {
        1.0 - self.solid_fraction()
    }
}

/// Voxel is pore iff its center lies inside any pore under the periodic
/// minimum-image metric.
pub fn voxelize(pores: &PoreSet, resolution: usize) -> VoxelGrid {
    let l = pores.side_length;
    VoxelGrid::from_fn(resolution, |c| {
        let p = c * l;
        !pores.pores.iter().any(|pore| {
            // Minimum-image shift of the query point toward the pore center.
            let mut q = p;
            for axis in 0..3 {
                let d = q[axis] - pore.center[axis];
                if d > l / 2.0 {
                    q[axis] -= l;
                } else if d < -l / 2.0 {
                    q[axis] += l;
                }
            }
            pore.contains(&q)
        })
    })
}

/// Converts all 6-connected solid components except the largest to pore.
/// Connectivity wraps periodically.
pub fn remove_isolated_solids(grid: &VoxelGrid) -> Result<VoxelGrid> {
    let n = grid.resolution;
    let mut label = vec![usize::MAX; grid.solid.len()];
    let mut sizes = Vec::new();
    for start in 0..grid.solid.len() {
        if !grid.solid[start] || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let i = idx % n;
            let j = (idx / n) % n;
            let k = idx / (n * n);
            for (di, dj, dk) in [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                let ni = (i as i64 + di).rem_euclid(n as i64) as usize;
                let nj = (j as i64 + dj).rem_euclid(n as i64) as usize;
                let nk = (k as i64 + dk).rem_euclid(n as i64) as usize;
                let nidx = grid.index(ni, nj, nk);
                if grid.solid[nidx] && label[nidx] == usize::MAX {
                    label[nidx] = id;
                    queue.push_back(nidx);
                }
            }
        }
        sizes.push(size);
    }
    if sizes.is_empty() {
        return Err(Error::Geometry("grid contains no solid voxels".into()));
    }
    let keep = sizes.iter().enumerate().max_by_key(|&(_, &s)| s).unwrap().0;
    let mut out = grid.clone();
    for (idx, lab) in label.iter().enumerate() {
        if *lab != usize::MAX && *lab != keep {
            out.solid[idx] = false;
        }
    }
    Ok(out)
}

/// Measures descriptors of a pore set against its voxelization.
pub fn measure_descriptors(pores: &PoreSet, grid: &VoxelGrid) -> RveDescriptors {
    let centers: Vec<Vector3<f64>> = pores.pores.iter().map(|p| p.center).collect();
    let first = pores.pores.first();
    RveDescriptors {
        volume_fraction: grid.pore_fraction(),
        pore_count: pores.pores.len(),
        aspect_ratio: first.map(|p| p.r_major / p.r_minor).unwrap_or(1.0),
        mean_neighbor_distance: mean_neighbor_distance(&centers, pores.side_length),
        side_length: pores.side_length,
    }
}

const ANNEAL_TOL: f64 = 0.02;
const VF_TOL_ABS: f64 = 0.005;

/// Reconstructs a periodic pore set matching the descriptors. Deterministic
/// for a fixed (descriptors, seed, resolution).
pub fn reconstruct(desc: &RveDescriptors, seed: u64, resolution: usize) -> Result<PoreSet> {
    desc.validate()?;
    let l = desc.side_length;
    let n_p = desc.pore_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Stage 1: pore count and random centers.
    let mut centers: Vec<Vector3<f64>> =
        (0..n_p).map(|_| Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen()) * l).collect();

    // Stage 2: anneal centers toward the target neighbor distance.
    if n_p > 1 {
        let target = desc.mean_neighbor_distance;
        let obj = |c: &[Vector3<f64>]| (mean_neighbor_distance(c, l) - target).abs();
        let mut current = obj(&centers);
        let t0 = 10.0_f64;
        let mut temperature = t0;
        let max_moves = 200 * n_p;
        let mut done = false;
        for step in 0..max_moves {
            if current <= ANNEAL_TOL * target {
                done = true;
                break;
            }
            let greedy = step >= max_moves * 3 / 4;
            let amp = l / 4.0 * (temperature / t0).max(0.02);
            let pick = rng.gen_range(0..n_p);
            let old = centers[pick];
            let jitter = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ) * (2.0 * amp);
            let mut moved = old + jitter;
            for axis in 0..3 {
                moved[axis] = moved[axis].rem_euclid(l);
            }
            centers[pick] = moved;
            let trial = obj(&centers);
            let accept = if trial <= current {
                true
            } else if greedy {
                false
            } else {
                rng.gen::<f64>() < (-(trial - current) / temperature).exp()
            };
            if accept {
                current = trial;
            } else {
                centers[pick] = old;
            }
            if step % n_p == n_p - 1 {
                temperature *= 0.95;
            }
        }
        if !done && current > 0.10 * target {
            return Err(Error::Convergence(format!(
                "annealing missed neighbor-distance target: off by {current:.3} um (target {target})"
            )));
        }
    }

    // Stage 3: orientation and aspect ratio; initial size from the
    // overlap-free volume budget.
    let v_per_pore = desc.volume_fraction * l * l * l / n_p as f64;
    let r_minor0 = (3.0 * v_per_pore / (4.0 * std::f64::consts::PI * desc.aspect_ratio)).powf(1.0 / 3.0);
    let pores: Vec<Pore> = centers
        .into_iter()
        .map(|center| Pore {
            center,
            r_major: desc.aspect_ratio * r_minor0,
            r_minor: r_minor0,
            orientation: random_unit_quaternion(&mut rng),
        })
        .collect();
    let mut set = PoreSet { side_length: l, pores, images: Vec::new() };

    // Stage 4: calibrate a global size scale against the voxel-measured
    // volume fraction (overlap compensation). Monotone in the scale, so
    // bisection applies.
    let measure = |set: &PoreSet, s: f64| {
        let mut scaled = set.clone();
        for p in &mut scaled.pores {
            p.r_major *= s;
            p.r_minor *= s;
        }
        voxelize(&scaled, resolution).pore_fraction()
    };
    let mut lo = 0.5;
    let mut hi = 3.0;
    while measure(&set, hi) < desc.volume_fraction {
        hi *= 1.5;
        if hi > 20.0 {
            return Err(Error::Convergence("volume-fraction calibration bracket failed".into()));
        }
    }
    let mut scale = 1.0;
    for _ in 0..30 {
        scale = 0.5 * (lo + hi);
        let vf = measure(&set, scale);
        if (vf - desc.volume_fraction).abs() < VF_TOL_ABS / 4.0 {
            break;
        }
        if vf < desc.volume_fraction {
            lo = scale;
        } else {
            hi = scale;
        }
    }
    for p in &mut set.pores {
        p.r_major *= scale;
        p.r_minor *= scale;
    }
    for p in &set.pores {
        if p.r_major < 1.1 || p.r_minor > l / 2.0 {
            return Err(Error::Geometry(format!(
                "calibrated semi-axes out of bounds: r_a={:.2}, r_b={:.2}",
                p.r_major, p.r_minor
            )));
        }
    }
    set.rebuild_images();
    Ok(set)
}

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    // Four standard normals via Box-Muller, normalized.
    let mut g = [0.0f64; 4];
    for pair in g.chunks_mut(2) {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        pair[0] = r * (2.0 * std::f64::consts::PI * u2).cos();
        if pair.len() > 1 {
            pair[1] = r * (2.0 * std::f64::consts::PI * u2).sin();
        }
    }
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(g[0], g[1], g[2], g[3]))
}

/// Meshes the solid voxels: each voxel splits into six tets sharing the
/// main diagonal (consistent faces across neighbors). Records the RVE box
/// surface nodes as node set "box_boundary".
pub fn voxel_to_tets(grid: &VoxelGrid, side_length: f64, unit: LengthUnit) -> Result<Mesh> {
    let n = grid.resolution;
    let h = side_length / n as f64;
    let mut node_ids: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut nodes = Vec::new();
    let mut tets = Vec::new();

    // Kuhn subdivision: six tets per cube, one per permutation of the path
    // from corner (0,0,0) to (1,1,1).
    const PERMS: [[usize; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

    let corner =
        |node_ids: &mut HashMap<(usize, usize, usize), usize>, nodes: &mut Vec<Vector3<f64>>, i: usize, j: usize, k: usize| {
            *node_ids.entry((i, j, k)).or_insert_with(|| {
                nodes.push(Vector3::new(i as f64 * h, j as f64 * h, k as f64 * h));
                nodes.len() - 1
            })
        };

    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                if !grid.solid[grid.index(i, j, k)] {
                    continue;
                }
                for perm in PERMS {
                    let mut corner_pos = [i, j, k];
                    let mut ids = [0usize; 4];
                    ids[0] = corner(&mut node_ids, &mut nodes, corner_pos[0], corner_pos[1], corner_pos[2]);
                    for (step, &axis) in perm.iter().enumerate() {
                        corner_pos[axis] += 1;
                        ids[step + 1] =
                            corner(&mut node_ids, &mut nodes, corner_pos[0], corner_pos[1], corner_pos[2]);
                    }
                    tets.push(ids);
                }
            }
        }
    }

    let mut boundary = Vec::new();
    for ((i, j, k), &id) in &node_ids {
        if *i == 0 || *j == 0 || *k == 0 || *i == n || *j == n || *k == n {
            boundary.push(id);
        }
    }
    boundary.sort_unstable();
    let mut node_sets = BTreeMap::new();
    node_sets.insert("box_boundary".to_string(), boundary);
    Mesh::new(unit, nodes, tets, node_sets)
}
