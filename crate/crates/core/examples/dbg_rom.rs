use nalgebra::{Matrix3, Vector3};
use dca::homogenize::MicroFe;
use dca::material::{ElasticConstants, HardeningCurve, HardeningMode};
use dca::mcr::{voxel_to_tets, VoxelGrid};
use dca::mesh::LengthUnit;
use dca::rom::{MicroRom, RomOptions};

fn main() {
    let n = 16;
    let grid = VoxelGrid::from_fn(n, |c: Vector3<f64>| {
        let dx = c.x - 0.5;
        let dy = c.y - 0.5;
        (dx * dx + dy * dy).sqrt() >= 0.25
    });
    let mesh = voxel_to_tets(&grid, 100.0, LengthUnit::Micrometer).unwrap();
    let ec = ElasticConstants::new(6.89e4, 0.35).unwrap();
    let hc = HardeningCurve::new(
        vec![(0.0, 170.0), (0.05, 220.0), (0.2, 260.0)],
        HardeningMode::Isotropic,
    ).unwrap();
    let f_target = Matrix3::new(1.02, 0.0, 0.0, 0.0, 0.99, 0.0, 0.0, 0.0, 0.99);
    // elastic-only small version of the same path
    let f_el = Matrix3::identity() + (f_target - Matrix3::identity()) * 0.05;

    let mut fe = MicroFe::new(mesh.clone(), ec, hc.clone()).unwrap();
    fe.tol_newton = 1e-6;
    let s_fe_el = fe.trial_step(&f_el).unwrap().0.response.s;
    let factors = [0.25, 0.5, 0.75, 1.0];
    let mut s_fe = Matrix3::zeros();
    for a in factors {
        let f = Matrix3::identity() + (f_target - Matrix3::identity()) * a;
        s_fe = fe.solve_step(&f).unwrap().response.s;
    }
    println!("FE: elastic s11 {:.4}, final s11 {:.4}", s_fe_el[(0,0)], s_fe[(0,0)]);

    for k in [100usize, 400, 1600] {
        let options = RomOptions { tol_newton: 1e-6, ..RomOptions::default() };
        let mut rom = MicroRom::new(mesh.clone(), k, ec, hc.clone(), options).unwrap();
        let s_el = rom.trial_step(&f_el).unwrap().0.response.s;
        let mut s_rom = Matrix3::zeros();
        for a in factors {
            let f = Matrix3::identity() + (f_target - Matrix3::identity()) * a;
            s_rom = rom.solve_step(&f).unwrap().response.s;
        }
        println!("k={k}: elastic s11 {:.4} (err {:+.3}%), final s11 {:.4} (err {:+.3}%)",
            s_el[(0,0)], 100.0*(s_el[(0,0)]-s_fe_el[(0,0)])/s_fe_el[(0,0)],
            s_rom[(0,0)], 100.0*(s_rom[(0,0)]-s_fe[(0,0)])/s_fe[(0,0)]);
    }
}
