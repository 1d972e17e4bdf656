//! Incremental 3D Delaunay tetrahedralization (Bowyer–Watson).
//!
//! Used to connect cluster centroids into a reduced mesh. Point sets coming
//! from near-regular grids are frequently cospherical, so the predicates
//! run on a deterministically jittered copy of the coordinates; the output
//! indexes the original points, and downstream geometry uses the original
//! coordinates.

use nalgebra::{Matrix4, Vector3};

use crate::{Error, Result};

/// Relative jitter amplitude applied to predicate coordinates.
const JITTER_REL: f64 = 1e-9;
/// Tets flatter than this fraction of the median tet volume are dropped.
const SLIVER_REL: f64 = 1e-7;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn jittered(points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let scale = (hi - lo).norm().max(1.0) * JITTER_REL;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut q = *p;
            for axis in 0..3 {
                let r = splitmix64((i as u64) << 2 | axis as u64);
                let u = (r >> 11) as f64 / (1u64 << 53) as f64;
                q[axis as usize] += (u - 0.5) * scale;
            }
            q
        })
        .collect()
}

fn orient(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a))
}

/// Positive when `p` lies inside the circumsphere of the positively
/// oriented tet (a, b, c, d).
fn in_sphere(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
    d: &Vector3<f64>,
    p: &Vector3<f64>,
) -> f64 {
    let row = |v: &Vector3<f64>| {
        let r = v - p;
        [r.x, r.y, r.z, r.norm_squared()]
    };
    let m = Matrix4::from_rows(&[
        row(a).into(),
        row(b).into(),
        row(c).into(),
        row(d).into(),
    ]);
    -m.determinant()
}

/// Circumcenter and squared circumradius of a tet; used by the test oracle
/// and by callers needing explicit spheres.
pub fn circumsphere(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
    d: &Vector3<f64>,
) -> Option<(Vector3<f64>, f64)> {
    let m = nalgebra::Matrix3::from_rows(&[
        (2.0 * (b - a)).transpose(),
        (2.0 * (c - a)).transpose(),
        (2.0 * (d - a)).transpose(),
    ]);
    let rhs = Vector3::new(
        b.norm_squared() - a.norm_squared(),
        c.norm_squared() - a.norm_squared(),
        d.norm_squared() - a.norm_squared(),
    );
    let center = m.lu().solve(&rhs)?;
    Some((center, (center - a).norm_squared()))
}

/// Delaunay tetrahedralization of the convex hull of `points`. Returns
/// positively oriented tets indexing into `points`. Needs at least four
/// non-coplanar points.
pub fn delaunay_tets(points: &[Vector3<f64>]) -> Result<Vec<[usize; 4]>> {
    if points.len() < 4 {
        return Err(Error::Geometry(format!(
            "delaunay needs at least 4 points, got {}",
            points.len()
        )));
    }
    let pts = jittered(points);

    // Super-tet comfortably enclosing the bounding sphere.
    let (mut lo, mut hi) = (pts[0], pts[0]);
    for p in &pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) / 2.0;
    let r = (hi - lo).norm().max(1.0) * 20.0;
    let sp = [
        center + Vector3::new(0.0, 0.0, 3.0 * r),
        center + Vector3::new(-2.0 * r, -r, -r),
        center + Vector3::new(2.0 * r, -r, -r),
        center + Vector3::new(0.0, 2.0 * r, -r),
    ];
    let n = pts.len();
    let mut verts = pts;
    verts.extend_from_slice(&sp);
    let super_ids = [n, n + 1, n + 2, n + 3];

    let mut tets: Vec<[usize; 4]> = vec![canonical(&verts, super_ids)];

    for p in 0..n {
        // Cavity: all tets whose circumsphere contains the new point.
        let mut bad = Vec::new();
        for (t, tet) in tets.iter().enumerate() {
            let s = in_sphere(
                &verts[tet[0]],
                &verts[tet[1]],
                &verts[tet[2]],
                &verts[tet[3]],
                &verts[p],
            );
            if s > 0.0 {
                bad.push(t);
            }
        }
        if bad.is_empty() {
            return Err(Error::Geometry("delaunay insertion found no containing sphere".into()));
        }
        // Boundary faces of the cavity appear exactly once.
        let mut faces: Vec<([usize; 3], bool)> = Vec::new();
        for &t in &bad {
            let tet = tets[t];
            for f in [[tet[0], tet[1], tet[2]], [tet[0], tet[1], tet[3]], [tet[0], tet[2], tet[3]], [tet[1], tet[2], tet[3]]] {
                let mut key = f;
                key.sort_unstable();
                if let Some(entry) = faces.iter_mut().find(|(k, _)| *k == key) {
                    entry.1 = false;
                } else {
                    faces.push((key, true));
                }
            }
        }
        for &t in bad.iter().rev() {
            tets.swap_remove(t);
        }
        for (f, keep) in faces {
            if keep {
                tets.push(canonical(&verts, [f[0], f[1], f[2], p]));
            }
        }
    }

    tets.retain(|t| t.iter().all(|&v| v < n));

    // Drop slivers relative to the median volume.
    let mut vols: Vec<f64> = tets
        .iter()
        .map(|t| orient(&points[t[0]], &points[t[1]], &points[t[2]], &points[t[3]]).abs() / 6.0)
        .collect();
    let mut sorted = vols.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let mut out = Vec::with_capacity(tets.len());
    for (t, tet) in tets.iter().enumerate() {
        if vols[t] > SLIVER_REL * median {
            // Re-orient against the original coordinates.
            let mut tet = *tet;
            if orient(&points[tet[0]], &points[tet[1]], &points[tet[2]], &points[tet[3]]) < 0.0 {
                tet.swap(2, 3);
            }
            out.push(tet);
        }
    }
    vols.clear();
    if out.is_empty() {
        return Err(Error::Geometry("all candidate tets degenerate (coplanar input?)".into()));
    }
    Ok(out)
}

fn canonical(verts: &[Vector3<f64>], mut tet: [usize; 4]) -> [usize; 4] {
    if orient(&verts[tet[0]], &verts[tet[1]], &verts[tet[2]], &verts[tet[3]]) < 0.0 {
        tet.swap(2, 3);
    }
    tet
}
