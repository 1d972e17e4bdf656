//! J2 (Von Mises) small-strain elastoplasticity.
//!
//! Radial return mapping with piecewise-linear isotropic hardening or
//! linear kinematic (Prager) hardening, and the algorithmically consistent
//! tangent. All stress units are MPa.
//!
//! Voigt order is [11, 22, 33, 12, 13, 23] with engineering shear strain.

use nalgebra::{Matrix3, SMatrix};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Voigt66 = SMatrix<f64, 6, 6>;

/// (i, j) tensor indices for each Voigt slot.
pub const VOIGT_IDX: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

/// Isotropic elastic constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ElasticConstants {
    /// Young's modulus (MPa).
    pub e: f64,
    /// Poisson ratio.
    pub nu: f64,
}

impl ElasticConstants {
    pub fn new(e: f64, nu: f64) -> Result<Self> {
        if e <= 0.0 || nu <= -1.0 || nu >= 0.5 {
            return Err(Error::Config(format!("invalid elastic constants E={e}, nu={nu}")));
        }
        Ok(ElasticConstants { e, nu })
    }

    pub fn shear_modulus(&self) -> f64 {
        self.e / (2.0 * (1.0 + self.nu))
    }

    pub fn lame_lambda(&self) -> f64 {
        self.e * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))
    }

    pub fn bulk_modulus(&self) -> f64 {
        self.lame_lambda() + 2.0 * self.shear_modulus() / 3.0
    }
}

/// Hardening mode of the yield surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardeningMode {
    /// Yield radius follows the piecewise-linear curve.
    Isotropic,
    /// Constant yield radius, Prager back stress with the given modulus (MPa).
    LinearKinematic { modulus: f64 },
}

/// Piecewise-linear yield stress as a function of equivalent plastic strain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardeningCurve {
    /// (equivalent plastic strain, yield stress MPa) knots.
    pub points: Vec<(f64, f64)>,
    pub mode: HardeningMode,
}

impl HardeningCurve {
    pub fn new(points: Vec<(f64, f64)>, mode: HardeningMode) -> Result<Self> {
        if points.is_empty() || points[0].0 != 0.0 {
            return Err(Error::Config("hardening curve must start at zero plastic strain".into()));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("hardening strains must be strictly increasing".into()));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::Config("yield stress must be nondecreasing".into()));
            }
        }
        if points.iter().any(|&(_, s)| s <= 0.0) {
            return Err(Error::Config("yield stress must be positive".into()));
        }
        Ok(HardeningCurve { points, mode })
    }

    /// Yield stress at equivalent plastic strain `ep`; extrapolates the last
    /// segment slope beyond the final knot.
    pub fn yield_stress(&self, ep: f64) -> f64 {
        if matches!(self.mode, HardeningMode::LinearKinematic { .. }) {
            return self.points[0].1;
        }
        self.interp(ep)
    }

    /// Isotropic hardening modulus d(sigma_Y)/d(ep) at `ep`.
    pub fn hardening_modulus(&self, ep: f64) -> f64 {
        if matches!(self.mode, HardeningMode::LinearKinematic { .. }) {
            return 0.0;
        }
        let pts = &self.points;
        if pts.len() == 1 {
            return 0.0;
        }
        let mut seg = pts.len() - 2;
        for i in 0..pts.len() - 1 {
            if ep < pts[i + 1].0 {
                seg = i;
                break;
            }
        }
        (pts[seg + 1].1 - pts[seg].1) / (pts[seg + 1].0 - pts[seg].0)
    }

    pub fn kinematic_modulus(&self) -> f64 {
        match self.mode {
            HardeningMode::Isotropic => 0.0,
            HardeningMode::LinearKinematic { modulus } => modulus,
        }
    }

    fn interp(&self, ep: f64) -> f64 {
        let pts = &self.points;
        if pts.len() == 1 {
            return pts[0].1;
        }
        let last = pts.len() - 1;
        if ep >= pts[last].0 {
            let slope = (pts[last].1 - pts[last - 1].1) / (pts[last].0 - pts[last - 1].0);
            return pts[last].1 + slope * (ep - pts[last].0);
        }
        for w in pts.windows(2) {
            if ep <= w[1].0 {
                let t = (ep - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        pts[last].1
    }
}

/// State of one material point (one integration point or one cluster).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialPointState {
    /// Plastic strain tensor.
    pub plastic_strain: Matrix3<f64>,
    /// Equivalent plastic strain.
    pub eq_plastic_strain: f64,
    /// Back stress (deviatoric, MPa).
    pub back_stress: Matrix3<f64>,
    /// Cauchy stress (MPa).
    pub stress: Matrix3<f64>,
}

impl Default for MaterialPointState {
    fn default() -> Self {
        MaterialPointState {
            plastic_strain: Matrix3::zeros(),
            eq_plastic_strain: 0.0,
            back_stress: Matrix3::zeros(),
            stress: Matrix3::zeros(),
        }
    }
}

pub fn deviator(t: &Matrix3<f64>) -> Matrix3<f64> {
    t - Matrix3::identity() * (t.trace() / 3.0)
}

/// Von Mises equivalent stress sqrt(3/2 dev(s):dev(s)).
pub fn von_mises(sigma: &Matrix3<f64>) -> f64 {
    let s = deviator(sigma);
    (1.5 * s.dot(&s)).sqrt()
}

/// Isotropic elasticity tensor in Voigt form (engineering shear).
pub fn elastic_tensor(ec: &ElasticConstants) -> Voigt66 {
    let lam = ec.lame_lambda();
    let mu = ec.shear_modulus();
    let mut c = Voigt66::zeros();
    for i in 0..3 {
        for j in 0..3 {
            c[(i, j)] = lam;
        }
        c[(i, i)] += 2.0 * mu;
        c[(i + 3, i + 3)] = mu;
    }
    c
}

const MAX_RETURN_ITERS: usize = 100;

/// Radial return mapping. Applies the strain increment to the committed
/// state, returning the updated state and the consistent tangent.
pub fn return_map(
    state: &MaterialPointState,
    d_eps: &Matrix3<f64>,
    ec: &ElasticConstants,
    hc: &HardeningCurve,
) -> Result<(MaterialPointState, Voigt66)> {
    let mu = ec.shear_modulus();
    let lam = ec.lame_lambda();
    let kappa = ec.bulk_modulus();
    let h_kin = hc.kinematic_modulus();

    let sigma_trial = state.stress + Matrix3::identity() * (lam * d_eps.trace()) + d_eps * (2.0 * mu);
    let xi_trial = deviator(&sigma_trial) - state.back_stress;
    let xi_norm = xi_trial.dot(&xi_trial).sqrt();
    let sy = hc.yield_stress(state.eq_plastic_strain);
    let f_trial = xi_norm - (2.0f64 / 3.0).sqrt() * sy;

    if f_trial <= 1e-10 * sy {
        let mut next = state.clone();
        next.stress = sigma_trial;
        return Ok((next, elastic_tensor(ec)));
    }

    // Scalar solve for the plastic multiplier. g is strictly decreasing in
    // dgamma because the moduli are nonnegative, so a bisection-guarded
    // Newton always converges.
    let sq23 = (2.0f64 / 3.0).sqrt();
    let g = |dg: f64| {
        xi_norm
            - 2.0 * mu * dg
            - 2.0 / 3.0 * h_kin * dg
            - sq23 * hc.yield_stress(state.eq_plastic_strain + sq23 * dg)
    };
    let mut lo = 0.0;
    let mut hi = f_trial / (2.0 * mu);
    while g(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Convergence("plastic multiplier bracket blew up".into()));
        }
    }
    let mut dgamma = f_trial / (2.0 * mu + 2.0 / 3.0 * h_kin + 2.0 / 3.0 * hc.hardening_modulus(state.eq_plastic_strain));
    let mut converged = false;
    for _ in 0..MAX_RETURN_ITERS {
        let val = g(dgamma);
        if val.abs() <= 1e-12 * xi_norm.max(1.0) {
            converged = true;
            break;
        }
        if val > 0.0 {
            lo = dgamma;
        } else {
            hi = dgamma;
        }
        let h_iso = hc.hardening_modulus(state.eq_plastic_strain + sq23 * dgamma);
        let slope = -(2.0 * mu + 2.0 / 3.0 * h_kin + 2.0 / 3.0 * h_iso);
        let mut next = dgamma - val / slope;
        if next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        dgamma = next;
    }
    if !converged {
        return Err(Error::Convergence("radial return multiplier solve".into()));
    }

    let n = xi_trial / xi_norm;
    let mut next = state.clone();
    next.stress = sigma_trial - n * (2.0 * mu * dgamma);
    next.plastic_strain = state.plastic_strain + n * dgamma;
    next.eq_plastic_strain = state.eq_plastic_strain + sq23 * dgamma;
    next.back_stress = state.back_stress + n * (2.0 / 3.0 * h_kin * dgamma);

    // Consistent tangent (closest-point projection on the Von Mises
    // cylinder): C = kappa 1x1 + 2 mu theta I_dev - 2 mu theta_bar n x n.
    let h_iso = hc.hardening_modulus(next.eq_plastic_strain);
    let theta = 1.0 - 2.0 * mu * dgamma / xi_norm;
    let theta_bar = 1.0 / (1.0 + (h_iso + h_kin) / (3.0 * mu)) - (1.0 - theta);

    let mut c = Voigt66::zeros();
    for (vi, &(i, j)) in VOIGT_IDX.iter().enumerate() {
        for (vj, &(k, l)) in VOIGT_IDX.iter().enumerate() {
            let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
            let i_sym = 0.5 * (d(i, k) * d(j, l) + d(i, l) * d(j, k));
            let vol = d(i, j) * d(k, l);
            let val = kappa * vol + 2.0 * mu * theta * (i_sym - vol / 3.0)
                - 2.0 * mu * theta_bar * n[(i, j)] * n[(k, l)];
            c[(vi, vj)] = val;
        }
    }
    Ok((next, c))
}

/// Symmetric tensor -> Voigt strain vector with engineering shear.
pub fn strain_to_voigt(e: &Matrix3<f64>) -> SMatrix<f64, 6, 1> {
    SMatrix::<f64, 6, 1>::from_column_slice(&[
        e[(0, 0)],
        e[(1, 1)],
        e[(2, 2)],
        2.0 * e[(0, 1)],
        2.0 * e[(0, 2)],
        2.0 * e[(1, 2)],
    ])
}

/// Voigt stress vector -> symmetric tensor.
pub fn stress_from_voigt(v: &SMatrix<f64, 6, 1>) -> Matrix3<f64> {
    Matrix3::new(v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2])
}

/// Symmetric stress tensor -> Voigt vector.
pub fn stress_to_voigt(s: &Matrix3<f64>) -> SMatrix<f64, 6, 1> {
    SMatrix::<f64, 6, 1>::from_column_slice(&[
        s[(0, 0)],
        s[(1, 1)],
        s[(2, 2)],
        s[(0, 1)],
        s[(0, 2)],
        s[(1, 2)],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn a360() -> ElasticConstants {
        ElasticConstants::new(6.89e4, 0.35).unwrap()
    }

    fn flat_curve(sy: f64) -> HardeningCurve {
        HardeningCurve::new(vec![(0.0, sy)], HardeningMode::Isotropic).unwrap()
    }

    #[test]
    fn von_mises_identities() {
        let mut s = Matrix3::zeros();
        s[(0, 0)] = 150.0;
        assert_relative_eq!(von_mises(&s), 150.0, max_relative = 1e-14);

        let mut tau = Matrix3::zeros();
        tau[(0, 1)] = 40.0;
        tau[(1, 0)] = 40.0;
        assert_relative_eq!(von_mises(&tau), 40.0 * 3.0f64.sqrt(), max_relative = 1e-14);

        let p = Matrix3::identity() * 99.0;
        assert!(von_mises(&p).abs() < 1e-12);
    }

    #[test]
    fn shear_modulus_value() {
        // E = 6.89e4, nu = 0.35 -> mu = E/(2(1+nu))
        let ec = a360();
        assert_relative_eq!(ec.shear_modulus(), 6.89e4 / 2.7, max_relative = 1e-14);
        assert_relative_eq!(ec.shear_modulus(), 2.5519e4, max_relative = 1e-3);
    }

    #[test]
    fn elastic_tensor_bulk_response() {
        let ec = a360();
        let c = elastic_tensor(&ec);
        let eps = strain_to_voigt(&Matrix3::identity());
        let sig = stress_from_voigt(&(c * eps));
        let expect = 3.0 * ec.lame_lambda() + 2.0 * ec.shear_modulus();
        for i in 0..3 {
            assert_relative_eq!(sig[(i, i)], expect, max_relative = 1e-13);
        }
        assert!(sig[(0, 1)].abs() < 1e-10);
    }

    #[test]
    fn elastic_tensor_zero_poisson() {
        let ec = ElasticConstants::new(100.0, 0.0).unwrap();
        let c = elastic_tensor(&ec);
        assert_relative_eq!(c[(3, 3)], 50.0, max_relative = 1e-14);
        assert!(c[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn elastic_branch_returns_unchanged_state() {
        let ec = a360();
        let hc = flat_curve(200.0);
        let mut de = Matrix3::zeros();
        de[(0, 0)] = 1e-4;
        let (next, c) = return_map(&MaterialPointState::default(), &de, &ec, &hc).unwrap();
        assert_eq!(next.eq_plastic_strain, 0.0);
        let expected = stress_from_voigt(&(elastic_tensor(&ec) * strain_to_voigt(&de)));
        assert_relative_eq!(next.stress[(0, 0)], expected[(0, 0)], max_relative = 1e-13);
        assert_relative_eq!(c[(0, 0)], elastic_tensor(&ec)[(0, 0)], max_relative = 1e-14);
    }

    #[test]
    fn perfect_plasticity_caps_von_mises() {
        let ec = a360();
        let hc = flat_curve(200.0);
        let mut state = MaterialPointState::default();
        // Uniaxial strain driven well past yield in small increments.
        let mut de = Matrix3::zeros();
        de[(0, 0)] = 5e-4;
        for _ in 0..40 {
            let (next, _) = return_map(&state, &de, &ec, &hc).unwrap();
            state = next;
        }
        assert_relative_eq!(von_mises(&state.stress), 200.0, max_relative = 1e-6);
    }

    #[test]
    fn kinematic_bauschinger_shift() {
        // 1D closed form: reverse yielding begins at forward stress - 2 sy0.
        let ec = a360();
        let sy0 = 150.0;
        let hc = HardeningCurve::new(
            vec![(0.0, sy0)],
            HardeningMode::LinearKinematic { modulus: 5000.0 },
        )
        .unwrap();
        let mut state = MaterialPointState::default();
        let mut de = Matrix3::zeros();
        de[(0, 0)] = 2e-4;
        for _ in 0..50 {
            let (next, _) = return_map(&state, &de, &ec, &hc).unwrap();
            state = next;
        }
        let forward = von_mises(&(state.stress - state.back_stress));
        assert_relative_eq!(forward, sy0, max_relative = 1e-8);
        assert!(state.back_stress.norm() > 1.0, "kinematic hardening must shift the surface");
    }

    #[test]
    fn plastic_flow_is_isochoric() {
        let ec = a360();
        let hc = flat_curve(100.0);
        let mut state = MaterialPointState::default();
        let mut rng_seed = 12345u64;
        for _ in 0..100 {
            // Cheap xorshift to vary increments deterministically.
            rng_seed ^= rng_seed << 13;
            rng_seed ^= rng_seed >> 7;
            rng_seed ^= rng_seed << 17;
            let r = |k: u64| ((rng_seed >> (8 * k)) & 0xff) as f64 / 255.0 - 0.5;
            let mut de = Matrix3::zeros();
            de[(0, 0)] = 4e-4 * r(0);
            de[(1, 1)] = 4e-4 * r(1);
            de[(2, 2)] = 4e-4 * r(2);
            de[(0, 1)] = 4e-4 * r(3);
            de[(1, 0)] = de[(0, 1)];
            let (next, _) = return_map(&state, &de, &ec, &hc).unwrap();
            state = next;
        }
        assert!(state.plastic_strain.trace().abs() < 1e-10);
        assert!(deviator(&state.back_stress).norm() - state.back_stress.norm() < 1e-10);
    }

    #[test]
    fn consistent_tangent_matches_finite_differences() {
        let ec = a360();
        let hc = HardeningCurve::new(
            vec![(0.0, 170.0), (0.05, 220.0), (0.2, 260.0)],
            HardeningMode::Isotropic,
        )
        .unwrap();
        // Drive into the plastic regime.
        let mut state = MaterialPointState::default();
        let mut de = Matrix3::zeros();
        de[(0, 0)] = 3e-3;
        de[(1, 1)] = -1e-3;
        de[(0, 1)] = 1e-3;
        de[(1, 0)] = 1e-3;
        let (committed, _) = return_map(&state, &de, &ec, &hc).unwrap();
        state = committed;

        let probe = de * 0.3;
        let (_, c) = return_map(&state, &probe, &ec, &hc).unwrap();
        let step = 1e-7;
        for col in 0..6 {
            let (i, j) = VOIGT_IDX[col];
            let mut dplus = probe;
            let mut dminus = probe;
            let half = if i == j { step } else { step / 2.0 };
            dplus[(i, j)] += half;
            dplus[(j, i)] = dplus[(i, j)];
            dminus[(i, j)] -= half;
            dminus[(j, i)] = dminus[(i, j)];
            let (sp, _) = return_map(&state, &dplus, &ec, &hc).unwrap();
            let (sm, _) = return_map(&state, &dminus, &ec, &hc).unwrap();
            let ds = (stress_to_voigt(&sp.stress) - stress_to_voigt(&sm.stress)) / (2.0 * step);
            for row in 0..6 {
                let scale = c.norm();
                assert!(
                    (ds[row] - c[(row, col)]).abs() <= 1e-4 * scale,
                    "tangent mismatch at ({row},{col}): fd={} alg={}",
                    ds[row],
                    c[(row, col)]
                );
            }
        }
    }

    #[test]
    fn hardening_curve_validation() {
        assert!(HardeningCurve::new(vec![], HardeningMode::Isotropic).is_err());
        assert!(HardeningCurve::new(vec![(0.1, 100.0)], HardeningMode::Isotropic).is_err());
        assert!(
            HardeningCurve::new(vec![(0.0, 100.0), (0.1, 90.0)], HardeningMode::Isotropic).is_err()
        );
    }

    #[test]
    fn hardening_curve_extrapolates_last_slope() {
        let hc = HardeningCurve::new(
            vec![(0.0, 100.0), (0.1, 150.0)],
            HardeningMode::Isotropic,
        )
        .unwrap();
        assert_relative_eq!(hc.yield_stress(0.2), 200.0, max_relative = 1e-14);
        assert_relative_eq!(hc.hardening_modulus(0.05), 500.0, max_relative = 1e-14);
    }
}
