//! Residual-based a posteriori estimators and their element indicators.
//!
//! The residual of the interpolated coupled solution splits into a
//! truncation part `η_T` (far-field atomistic stress against `σ^B`), a
//! modelling part `η_M` (atomistic stress against the corrected coupled
//! stress) and a coarsening part `η_C` (face jumps of the coupled stress).

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::lattice::Crystal;
use crate::mesh::{AcMesh, MicroMesh};
use crate::model::{AcModel, AtomisticModel};
use crate::potential::EamParams;
use crate::stress::{self, CrCorrection, StressField};

/// Scale factors of the three estimators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for EstimatorConstants {
    fn default() -> Self {
        EstimatorConstants { c1: 1.0, c2: 1.0, c3: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct EstimatorReport {
    pub eta_t: f64,
    pub eta_m: f64,
    pub eta_c: f64,
    /// `η_M` with the uncorrected coupled stress.
    pub eta_m_canonical: f64,
    /// Per element; zero on atomistic-region elements.
    pub rho_t: Vec<f64>,
    /// `Σ_T ρ_T + η_T`.
    pub rho: f64,
    /// Localised squared contributions before normalisation.
    pub eta_m_elem: Vec<f64>,
    pub eta_c_elem: Vec<f64>,
}

/// `σ^B = ∂W(B)`, the stress of the far-field state.
pub fn sigma_b(crystal: &Crystal, eam: &EamParams, b: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    Ok(eam.cauchy_born(b, crystal.range_cart(), crystal.det())?.1)
}

/// `C₁ ‖σ^a − σ^B‖` over micro-triangles of `Ω_R` whose centroid lies
/// outside the ball of radius `R/2` about the defect centroid.
pub fn eta_t(crystal: &Crystal, micro: &MicroMesh, sigma_a: &StressField, sigma_b: &Matrix2<f64>, c1: f64) -> Result<f64> {
    let centre = crystal.defect_centroid();
    let half = 0.5 * micro.radius as f64;
    let area = 0.5 * crystal.det();
    let mut sum = 0.0;
    let mut any = false;
    for (t, s) in micro.cells.iter().zip(&sigma_a.sigma) {
        let v = t.vertices();
        let x = (crystal.position(v[0]) + crystal.position(v[1]) + crystal.position(v[2])) / 3.0;
        if (x - centre).norm() >= half {
            any = true;
            sum += area * (s - sigma_b).norm_squared();
        }
    }
    if !any {
        return Err(Error::InvalidConfig(format!("empty truncation annulus for R = {}", micro.radius)));
    }
    Ok(c1 * sum.sqrt())
}

/// `η_M` and its squared contributions per coupled element,
/// `Σ_{t} |t ∩ T| |σ^a(t) − σ̄^h(t)|²` with `σ̄^h(t)` the overlap average.
pub fn eta_m(mesh: &AcMesh, micro: &MicroMesh, sigma_a: &StressField, sigma_h: &StressField, c2: f64) -> Result<(f64, Vec<f64>)> {
    let ne = mesh.elements().len();
    let mut overlaps = Vec::with_capacity(ne);
    let mut avg = vec![Matrix2::<f64>::zeros(); micro.len()];
    let mut cover = vec![0.0; micro.len()];
    for e in 0..ne {
        let o = stress::micro_overlaps(mesh, micro, e)?;
        for &(i, a) in &o {
            avg[i] += sigma_h.sigma[e] * a;
            cover[i] += a;
        }
        overlaps.push(o);
    }
    let area = 0.5 * mesh.crystal().det();
    if let Some(i) = cover.iter().position(|c| (c - area).abs() > 1e-9 * area) {
        return Err(Error::Mesh(format!("micro-triangle {:?} covered to {} of {}", micro.cells[i], cover[i], area)));
    }
    let diff: Vec<f64> = avg.iter().zip(&sigma_a.sigma).map(|(s, a)| (a - s / area).norm_squared()).collect();
    let elem: Vec<f64> = overlaps.iter().map(|o| o.iter().map(|&(i, a)| a * diff[i]).sum()).collect();
    let total: f64 = diff.iter().map(|d| area * d).sum();
    Ok((c2 * total.sqrt(), elem))
}

/// `η_C` and the face terms `(h_f ‖[σ]_f‖)²`. Boundary faces and faces
/// between two atomistic-region elements carry no jump.
pub fn eta_c(mesh: &AcMesh, sigma_h: &StressField, c3: f64) -> (f64, Vec<f64>) {
    let pos = mesh.positions();
    let terms: Vec<f64> = mesh
        .faces()
        .iter()
        .map(|f| {
            if f.is_boundary() || stress::is_atomistic_face(mesh, f) {
                return 0.0;
            }
            let h = (pos[f.v[0]] - pos[f.v[1]]).norm();
            let jump = (sigma_h.sigma[f.elems[0]] - sigma_h.sigma[f.elems[1]]).norm();
            (h * jump).powi(2)
        })
        .collect();
    (c3 * terms.iter().sum::<f64>().sqrt(), terms)
}

/// Distributes `η_M` and `η_C` to elements:
/// `ρ_T = C₂² η_M(T)/η_M + C₃² η_C(T)/η_C`, then zero on the atomistic region.
pub fn localize(mesh: &AcMesh, eta_m: f64, eta_m_elem: &[f64], eta_c: f64, face_terms: &[f64], k: &EstimatorConstants) -> (Vec<f64>, Vec<f64>) {
    let ne = mesh.elements().len();
    let mut eta_c_elem = vec![0.0; ne];
    for (f, t) in mesh.faces().iter().zip(face_terms) {
        if *t != 0.0 {
            for &e in &f.elems {
                eta_c_elem[e] += 0.5 * t;
            }
        }
    }
    let rho_t = (0..ne)
        .map(|e| {
            if mesh.elements()[e].tag.is_atomistic_region() {
                return 0.0;
            }
            let m = if eta_m > 0.0 { k.c2 * k.c2 * eta_m_elem[e] / eta_m } else { 0.0 };
            let c = if eta_c > 0.0 { k.c3 * k.c3 * eta_c_elem[e] / eta_c } else { 0.0 };
            m + c
        })
        .collect();
    (rho_t, eta_c_elem)
}

/// Everything produced by one estimation pass.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub report: EstimatorReport,
    pub sigma_a: StressField,
    pub correction: CrCorrection,
    /// `I_a y_h` on the atomistic model of the domain.
    pub interpolant: Vec<Vector2<f64>>,
}

/// Nodal interpolation of a coupled field onto the lattice sites of `atoms`.
pub fn interpolate(mesh: &AcMesh, u: &[Vector2<f64>], atoms: &AtomisticModel) -> Vec<Vector2<f64>> {
    atoms.field(|p| mesh.eval(u, p))
}

/// Runs the stress correction and all three estimators for the coupled
/// solution `u`.
pub fn estimate(model: &AcModel, u: &[Vector2<f64>], k: &EstimatorConstants) -> Result<Estimate> {
    let mesh = model.mesh();
    let crystal = mesh.crystal();
    let atoms = AtomisticModel::new(crystal, model.eam(), *model.strain(), mesh.radius())?;
    let micro = MicroMesh::new(mesh.radius());
    let ua = interpolate(mesh, u, &atoms);
    let sa = stress::sigma_a(&atoms, &micro, &ua)?;
    let sh = stress::sigma_h(model, u)?;
    let corr = stress::cr_correct(mesh, &micro, &sa, &sh, &stress::correction_support(model)?)?;
    let sb = sigma_b(crystal, &model.eam(), model.strain())?;
    let et = eta_t(crystal, &micro, &sa, &sb, k.c1)?;
    let (em_canonical, _) = eta_m(mesh, &micro, &sa, &sh, k.c2)?;
    let (em, em_elem) = eta_m(mesh, &micro, &sa, &corr.sigma, k.c2)?;
    let (ec, faces) = eta_c(mesh, &corr.sigma, k.c3);
    let (rho_t, ec_elem) = localize(mesh, em, &em_elem, ec, &faces, k);
    let rho = rho_t.iter().sum::<f64>() + et;
    let report = EstimatorReport {
        eta_t: et,
        eta_m: em,
        eta_c: ec,
        eta_m_canonical: em_canonical,
        rho_t,
        rho,
        eta_m_elem: em_elem,
        eta_c_elem: ec_elem,
    };
    Ok(Estimate { report, sigma_a: sa, correction: corr, interpolant: ua })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grac::{assemble_constraints, solve_l1};
    use crate::mesh::{build_ac_mesh, MeshParams, Tag};
    use crate::model::Model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strain(c: &Crystal) -> Matrix2<f64> {
        let s = EamParams::default().ground_state_scale(c.range_cart()).unwrap();
        Matrix2::new(1.03, 0.03, 0.0, 1.03) * s
    }

    fn coupled(k: usize) -> AcMesh {
        build_ac_mesh(&Crystal::triangular(k), &MeshParams { r_ai: 4, radius: 16, grading: 1.0, macro_size: 8, reflection: true }).unwrap()
    }

    fn random_u(model: &AcModel, seed: u64, amp: f64) -> Vec<Vector2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = vec![Vector2::zeros(); model.n_nodes()];
        for &i in model.free_nodes() {
            u[i] = Vector2::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp));
        }
        u
    }

    #[test]
    fn far_field_state_has_no_truncation_error() {
        let mesh = coupled(0);
        let params = solve_l1(&assemble_constraints(&mesh).unwrap()).unwrap();
        let model = AcModel::new(&mesh, EamParams::default(), strain(mesh.crystal()), Some(&params), 0.1).unwrap();
        let est = estimate(&model, &vec![Vector2::zeros(); model.n_nodes()], &EstimatorConstants::default()).unwrap();
        assert!(est.report.eta_t < 1e-12, "{}", est.report.eta_t);
        assert!(est.report.eta_m < 1e-10 && est.report.eta_c < 1e-10, "{:?}", (est.report.eta_m, est.report.eta_c));
    }

    #[test]
    fn atomistic_mesh_has_only_truncation_error() {
        let c = Crystal::triangular(2);
        let mesh = AcMesh::atomistic(&c, 8).unwrap();
        let model = AcModel::new(&mesh, EamParams::default(), strain(&c), None, 0.0).unwrap();
        let u = random_u(&model, 1, 0.05);
        let est = estimate(&model, &u, &EstimatorConstants::default()).unwrap();
        assert!(est.report.eta_m < 1e-12 && est.report.eta_c == 0.0, "{:?}", (est.report.eta_m, est.report.eta_c));
        assert!(est.report.eta_t > 0.0);
        assert!(est.report.rho_t.iter().all(|&r| r == 0.0));
        assert_eq!(est.report.rho, est.report.eta_t);
    }

    #[test]
    fn single_face_jump() {
        let mesh = coupled(0);
        let e0 = mesh.elements().iter().position(|e| e.tag == Tag::Continuum && e.cell.side > 1).unwrap();
        let mut sigma = vec![Matrix2::zeros(); mesh.elements().len()];
        sigma[e0] = Matrix2::new(1.0, 0.0, 0.0, 0.0);
        let field = StressField { kind: stress::StressKind::Coupled, sigma };
        let (ec, terms) = eta_c(&mesh, &field, 1.0);
        // hand evaluation: every interior face of e0 carries h_f² · 1
        let pos = mesh.positions();
        let mut oracle = 0.0;
        for &f in mesh.element_faces(e0) {
            let face = &mesh.faces()[f];
            if !face.is_boundary() {
                oracle += (pos[face.v[0]] - pos[face.v[1]]).norm_squared();
            }
        }
        assert!((ec * ec - oracle).abs() < 1e-12 * oracle);
        assert_eq!(terms.iter().filter(|&&t| t != 0.0).count(), mesh.element_faces(e0).iter().filter(|&&f| !mesh.faces()[f].is_boundary()).count());
        let constant = StressField { kind: stress::StressKind::Coupled, sigma: vec![Matrix2::new(0.3, 0.1, -0.2, 0.5); mesh.elements().len()] };
        assert_eq!(eta_c(&mesh, &constant, 1.0).0, 0.0);
    }

    #[test]
    fn localisation_sums_and_correction() {
        let mesh = coupled(2);
        let params = solve_l1(&assemble_constraints(&mesh).unwrap()).unwrap();
        let model = AcModel::new(&mesh, EamParams::default(), strain(mesh.crystal()), Some(&params), 0.1).unwrap();
        for seed in 0..3 {
            let u = random_u(&model, seed, 0.02);
            let est = estimate(&model, &u, &EstimatorConstants::default()).unwrap();
            let r = &est.report;
            let sm: f64 = r.eta_m_elem.iter().sum();
            let sc: f64 = r.eta_c_elem.iter().sum();
            assert!((sm - r.eta_m * r.eta_m).abs() <= 1e-12 * sm.max(1e-300));
            assert!((sc - r.eta_c * r.eta_c).abs() <= 1e-12 * sc.max(1e-300));
            // without the atomistic zeroing the indicators rebuild η_M + η_C
            let full: f64 = (0..mesh.elements().len()).map(|e| r.eta_m_elem[e] / r.eta_m + r.eta_c_elem[e] / r.eta_c).sum();
            assert!((full - (r.eta_m + r.eta_c)).abs() <= 1e-12 * full);
            assert!(r.rho_t.iter().all(|&x| x >= 0.0));
            assert!(r.eta_m <= r.eta_m_canonical * (1.0 + 1e-12));
            let sum: f64 = r.rho_t.iter().sum();
            assert!((r.rho - sum - r.eta_t).abs() <= 1e-12 * r.rho);
        }
    }
}
