//! Spatial domain decomposition by k-means over nodal coordinates.
//!
//! The same partition feeds the macroscale deflation basis and the
//! microscale reduced mesh. Clustering is applied to the solid phase only;
//! pores carry no nodes.

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::mesh::Mesh;
use crate::{Error, Result};

/// Node-to-cluster assignment with centroids.
#[derive(Debug, Clone)]
pub struct ClusterPartition {
    pub k: usize,
    /// Cluster id per point.
    pub assignment: Vec<usize>,
    /// Member point ids per cluster.
    pub members: Vec<Vec<usize>>,
    /// Arithmetic mean of member coordinates.
    pub centroids: Vec<Vector3<f64>>,
}

impl ClusterPartition {
    /// Within-cluster sum of squared distances to centroids.
    pub fn objective(&self, coords: &[Vector3<f64>]) -> f64 {
        self.assignment
            .iter()
            .enumerate()
            .map(|(i, &c)| (coords[i] - self.centroids[c]).norm_squared())
            .sum()
    }
}

const MAX_LLOYD_ITERS: usize = 300;

/// Deterministic k-means with k-means++ seeding and Lloyd iterations run to
/// an assignment fixed point. If a cluster empties it is reseeded at the
/// point farthest from its previous centroid.
pub fn kmeans(coords: &[Vector3<f64>], k: usize, seed: u64) -> Result<ClusterPartition> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::Config("kmeans on empty input".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("kmeans k={k} invalid for {n} points")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(coords, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut prev_objective = f64::INFINITY;

    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, p) in coords.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ctr) in centroids.iter().enumerate() {
                let d = (p - ctr).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }

        // Centroid update with empty-cluster repair.
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sums[c] += coords[i];
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (coords[a] - centroids[c]).norm_squared();
                        let db = (coords[b] - centroids[c]).norm_squared();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = coords[far];
                assignment[far] = c;
                changed = true;
            } else {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }

        let objective: f64 = assignment
            .iter()
            .enumerate()
            .map(|(i, &c)| (coords[i] - centroids[c]).norm_squared())
            .sum();
        debug_assert!(
            objective <= prev_objective * (1.0 + 1e-12) + 1e-12,
            "Lloyd objective must be nonincreasing: {prev_objective} -> {objective}"
        );
        prev_objective = objective;
        if !changed {
            break;
        }
    }

    let mut members = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }
    // Final exact centroids from memberships.
    for c in 0..k {
        let mut sum = Vector3::zeros();
        for &i in &members[c] {
            sum += coords[i];
        }
        centroids[c] = sum / members[c].len() as f64;
    }
    Ok(ClusterPartition { k, assignment, members, centroids })
}

fn kmeanspp_init(coords: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let n = coords.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(coords[rng.gen_range(0..n)]);
    let mut dist2: Vec<f64> = coords.iter().map(|p| (p - centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; pick any
            // unused index deterministically.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let c = coords[next];
        centroids.push(c);
        for (i, p) in coords.iter().enumerate() {
            dist2[i] = dist2[i].min((p - c).norm_squared());
        }
    }
    centroids
}

/// Restricts clustering to nodes passing the mask and re-expands the
/// assignment to full length (masked-out nodes get usize::MAX).
pub fn kmeans_masked(
    coords: &[Vector3<f64>],
    mask: &[bool],
    k: usize,
    seed: u64,
) -> Result<ClusterPartition> {
    let idx: Vec<usize> = (0..coords.len()).filter(|&i| mask[i]).collect();
    let sub: Vec<Vector3<f64>> = idx.iter().map(|&i| coords[i]).collect();
    let part = kmeans(&sub, k, seed)?;
    let mut assignment = vec![usize::MAX; coords.len()];
    let mut members = vec![Vec::new(); k];
    for (local, &global) in idx.iter().enumerate() {
        let c = part.assignment[local];
        assignment[global] = c;
        members[c].push(global);
    }
    Ok(ClusterPartition { k, assignment, members, centroids: part.centroids })
}

/// Tributary volume per cluster: each element's volume split equally among
/// its four nodes.
pub fn cluster_volumes(mesh: &Mesh, partition: &ClusterPartition) -> Result<Vec<f64>> {
    let mut volumes = vec![0.0; partition.k];
    for (e, t) in mesh.tets.iter().enumerate() {
        let share = mesh.tet_volume(e) / 4.0;
        for &n in t {
            let c = *partition
                .assignment
                .get(n)
                .ok_or_else(|| Error::Config("partition does not cover mesh nodes".into()))?;
            if c == usize::MAX {
                return Err(Error::Config(format!("node {n} not assigned to any cluster")));
            }
            volumes[c] += share;
        }
    }
    if volumes.iter().any(|&v| v == 0.0) {
        return Err(Error::Config("cluster with no tributary volume".into()));
    }
    Ok(volumes)
}
