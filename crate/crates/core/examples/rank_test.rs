use nalgebra::Vector3;
use dca::rom::sfr_element_stiffness;
use dca::material::{elastic_tensor, ElasticConstants};

fn main() {
    let ec = ElasticConstants::new(6.89e4, 0.35).unwrap();
    let c = elastic_tensor(&ec);
    let verts = [
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(1.3, 0.1, 0.2),
        Vector3::new(0.2, 1.1, -0.1),
        Vector3::new(-0.1, 0.3, 0.9),
    ];
    let k = sfr_element_stiffness(&verts, &c).unwrap();
    let eig = k.symmetric_eigenvalues();
    let mut ev: Vec<f64> = eig.iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for e in &ev[..12] { println!("{:.3e}", e); }
}
