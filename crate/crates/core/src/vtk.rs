//! Legacy-ASCII VTK unstructured grid output for tet meshes.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::mesh::Mesh;
use crate::{Error, Result};

/// A named scalar field attached to points or cells.
pub struct ScalarField<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

/// Writes the mesh and optional scalar fields as DATASET UNSTRUCTURED_GRID
/// with CELL_TYPES 10 (linear tetrahedra).
pub fn write_vtk(
    mesh: &Mesh,
    point_fields: &[ScalarField],
    cell_fields: &[ScalarField],
    path: impl AsRef<Path>,
) -> Result<()> {
    for f in point_fields {
        if f.values.len() != mesh.n_nodes() {
            return Err(Error::LengthMismatch { expected: mesh.n_nodes(), got: f.values.len() });
        }
    }
    for f in cell_fields {
        if f.values.len() != mesh.n_tets() {
            return Err(Error::LengthMismatch { expected: mesh.n_tets(), got: f.values.len() });
        }
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "dca output")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {} double", mesh.n_nodes())?;
    for p in &mesh.nodes {
        writeln!(out, "{:.9e} {:.9e} {:.9e}", p.x, p.y, p.z)?;
    }
    writeln!(out, "CELLS {} {}", mesh.n_tets(), 5 * mesh.n_tets())?;
    for t in &mesh.tets {
        writeln!(out, "4 {} {} {} {}", t[0], t[1], t[2], t[3])?;
    }
    writeln!(out, "CELL_TYPES {}", mesh.n_tets())?;
    for _ in &mesh.tets {
        writeln!(out, "10")?;
    }
    if !point_fields.is_empty() {
        writeln!(out, "POINT_DATA {}", mesh.n_nodes())?;
        for f in point_fields {
            write_scalars(&mut out, f)?;
        }
    }
    if !cell_fields.is_empty() {
        writeln!(out, "CELL_DATA {}", mesh.n_tets())?;
        for f in cell_fields {
            write_scalars(&mut out, f)?;
        }
    }
    Ok(())
}

fn write_scalars<W: Write>(out: &mut W, f: &ScalarField) -> Result<()> {
    writeln!(out, "SCALARS {} double 1", f.name)?;
    writeln!(out, "LOOKUP_TABLE default")?;
    for v in f.values {
        writeln!(out, "{v:.9e}")?;
    }
    Ok(())
}

/// Reads back points and tet connectivity from a legacy VTK file. Intended
/// for round-trip checks, not as a general VTK parser.
pub fn read_vtk_geometry(path: impl AsRef<Path>) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 4]>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut points = Vec::new();
    let mut cells = Vec::new();
    while let Some(line) = lines.next() {
        if line.starts_with("POINTS") {
            let n: usize = line
                .split_whitespace()
                .nth(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Mesh("bad POINTS header".into()))?;
            for _ in 0..n {
                let row = lines.next().ok_or_else(|| Error::Mesh("truncated POINTS".into()))?;
                let xyz: Vec<f64> = row.split_whitespace().filter_map(|s| s.parse().ok()).collect();
                if xyz.len() != 3 {
                    return Err(Error::Mesh("bad point row".into()));
                }
                points.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
        } else if line.starts_with("CELLS") {
            let n: usize = line
                .split_whitespace()
                .nth(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Mesh("bad CELLS header".into()))?;
            for _ in 0..n {
                let row = lines.next().ok_or_else(|| Error::Mesh("truncated CELLS".into()))?;
                let ids: Vec<usize> = row.split_whitespace().filter_map(|s| s.parse().ok()).collect();
                if ids.len() != 5 || ids[0] != 4 {
                    return Err(Error::Mesh("expected linear tet cell".into()));
                }
                cells.push([ids[1], ids[2], ids[3], ids[4]]);
            }
        }
    }
    Ok((points, cells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::LengthUnit;
    use std::collections::BTreeMap;

    fn small_mesh() -> Mesh {
        // 1x1x1 voxel cube split into tets via the generator.
        let grid = crate::mcr::VoxelGrid::solid(2);
        crate::mcr::voxel_to_tets(&grid, 1.0, LengthUnit::Millimeter).unwrap()
    }

    #[test]
    fn geometry_round_trip() {
        let m = small_mesh();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vtk");
        write_vtk(&m, &[], &[], &path).unwrap();
        let (pts, cells) = read_vtk_geometry(&path).unwrap();
        assert_eq!(cells, m.tets);
        assert_eq!(pts.len(), m.n_nodes());
    }

    #[test]
    fn zero_field_parses() {
        let m = small_mesh();
        let zeros = vec![0.0; m.n_nodes()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vtk");
        write_vtk(&m, &[ScalarField { name: "z", values: &zeros }], &[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("SCALARS z double 1"));
    }

    #[test]
    fn length_mismatch_rejected() {
        let m = Mesh::new(
            LengthUnit::Millimeter,
            vec![
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::new(1.0, 0.0, 0.0),
                nalgebra::Vector3::new(0.0, 1.0, 0.0),
                nalgebra::Vector3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2, 3]],
            BTreeMap::new(),
        )
        .unwrap();
        let bad = vec![0.0; 3];
        let dir = tempfile::tempdir().unwrap();
        let err = write_vtk(&m, &[ScalarField { name: "x", values: &bad }], &[], dir.path().join("x.vtk"));
        assert!(err.is_err());
    }
}
