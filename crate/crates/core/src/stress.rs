//! Piecewise-constant stress tensors in the canonical weak form.
//!
//! A bond `(ℓ, ρ)` is spread over the triangles its segment crosses, with
//! weight equal to the crossed length fraction; pieces running along an
//! interior edge are split evenly between the two neighbours. For any
//! continuous P1 function `v` this gives `D_ρ v(ℓ) = Σ_T ω_ℓ^ρ(T) ∇_T v·ρ`,
//! so `Σ_T |T| σ(T):∇_T v` reproduces the first variation exactly.

use std::collections::HashMap;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::{Matrix2, Vector2};
use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::geometry;
use crate::lattice::{Crystal, LatticePoint};
use crate::mesh::{AcMesh, Cell, Face, MicroMesh, VertexKind};
use crate::model::{AcModel, AtomisticModel, BondForce, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StressKind {
    Atomistic,
    Coupled,
    Continuum,
}

/// One tensor per element of the owning mesh (micro-triangles for
/// `Atomistic`, coupled-mesh elements otherwise).
#[derive(Clone, Debug)]
pub struct StressField {
    pub kind: StressKind,
    pub sigma: Vec<Matrix2<f64>>,
}

impl StressField {
    /// Writes `tag σ11 σ12 σ21 σ22` rows.
    pub fn dump<W: std::io::Write>(&self, mut w: W, tags: impl Fn(usize) -> &'static str) -> Result<()> {
        writeln!(w, "tag s11 s12 s21 s22")?;
        for (k, s) in self.sigma.iter().enumerate() {
            writeln!(w, "{} {:.17e} {:.17e} {:.17e} {:.17e}", tags(k), s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)])?;
        }
        Ok(())
    }
}

/// Micro-triangles crossed by the bond from the origin along `offset`, with
/// exact weights summing to one.
pub fn bond_weights(offset: LatticePoint) -> Result<Vec<(Cell, Ratio<i64>)>> {
    if offset.is_zero() {
        return Err(Error::ZeroBond);
    }
    let (m0, m1) = (offset.m.min(0) - 1, offset.m.max(0) + 1);
    let (n0, n1) = (offset.n.min(0) - 1, offset.n.max(0) + 1);
    let mut out = Vec::new();
    for n in n0..=n1 {
        for m in m0..=m1 {
            for up in [true, false] {
                let c = Cell::micro(up, LatticePoint::new(m, n));
                if let Some((lo, hi, edge)) = geometry::clip_segment(&c.vertices(), LatticePoint::ZERO, offset) {
                    let w = if edge.is_some() { (hi - lo) / 2 } else { hi - lo };
                    out.push((c, w));
                }
            }
        }
    }
    Ok(out)
}

fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn translate(c: &Cell, p: LatticePoint) -> Cell {
    Cell { anchor: c.anchor + p, ..*c }
}

/// Weights of the bond `(site, site + offset)` over the elements of a
/// coupled mesh. Pieces outside the mesh are dropped and a piece along a
/// face is split evenly, on the boundary too, so that a uniform state gives
/// a uniform stress up to the boundary. Such boundary bonds join clamped
/// sites and never enter the weak form.
pub fn mesh_bond_weights(mesh: &AcMesh, site: LatticePoint, offset: LatticePoint) -> Result<Vec<(usize, f64)>> {
    let micro = bond_weights(offset)?;
    let mut cands: Vec<usize> = Vec::new();
    let mut all_micro = true;
    let mut direct = Vec::with_capacity(micro.len());
    for (c, w) in &micro {
        let t = translate(c, site);
        let es = mesh.elements_of_micro(&t);
        if es.len() == 1 && mesh.elements()[es[0]].cell.side == 1 {
            direct.push((es[0], *w));
        } else {
            all_micro &= es.is_empty();
        }
        cands.extend(es);
    }
    if all_micro {
        // every crossed micro-triangle is an element or outside the mesh
        return Ok(direct.into_iter().map(|(e, w)| (e, ratio_f64(w))).collect());
    }
    cands.sort_unstable();
    cands.dedup();
    let mut out = Vec::new();
    for e in cands {
        let tri = mesh.element_tri(e);
        if let Some((lo, hi, edge)) = geometry::clip_segment(&tri, site, offset) {
            let w = ratio_f64(hi - lo);
            out.push((e, if edge.is_some() { 0.5 * w } else { w }));
        }
    }
    Ok(out)
}

/// `σ^a` on the micro-triangulation from a list of bond variations.
pub fn sigma_a_from_bonds(crystal: &Crystal, micro: &MicroMesh, bonds: &[BondForce]) -> Result<StressField> {
    let mut table: HashMap<LatticePoint, Vec<(Cell, f64)>> = HashMap::new();
    let mut sigma = vec![Matrix2::zeros(); micro.len()];
    for b in bonds {
        if !table.contains_key(&b.offset) {
            let w = bond_weights(b.offset)?.into_iter().map(|(c, w)| (c, ratio_f64(w))).collect();
            table.insert(b.offset, w);
        }
        let fr = b.force * crystal.position(b.offset).transpose();
        for (c, w) in &table[&b.offset] {
            if let Some(i) = micro.index(&translate(c, b.site)) {
                sigma[i] += fr * *w;
            }
        }
    }
    let area = 0.5 * crystal.det();
    sigma.iter_mut().for_each(|s| *s /= area);
    Ok(StressField { kind: StressKind::Atomistic, sigma })
}

/// `σ^a(y)` for an atomistic model on the micro-triangulation of its domain.
pub fn sigma_a(model: &AtomisticModel, micro: &MicroMesh, u: &[Vector2<f64>]) -> Result<StressField> {
    sigma_a_from_bonds(model.crystal(), micro, &model.bond_forces(u)?)
}

/// `σ^h(y_h)` on the coupled mesh: bond parts weighted by `ω_ℓ` plus
/// `(ω_T/|T|)∂W` on continuum elements.
pub fn sigma_h(model: &AcModel, u: &[Vector2<f64>]) -> Result<StressField> {
    let mesh = model.mesh();
    let crystal = mesh.crystal();
    let (bonds, cont) = model.first_variation(u)?;
    let mut sigma = vec![Matrix2::zeros(); mesh.elements().len()];
    for b in &bonds {
        let fr = b.force * crystal.position(b.offset).transpose();
        for (e, w) in mesh_bond_weights(mesh, b.site, b.offset)? {
            sigma[e] += fr * w;
        }
    }
    for (e, s) in &mut sigma.iter_mut().enumerate() {
        *s /= mesh.elements()[e].area;
    }
    for (e, dw) in cont {
        sigma[e] += dw / mesh.elements()[e].area;
    }
    let kind = if mesh.interface_vertices().is_empty() && bonds.is_empty() { StressKind::Continuum } else { StressKind::Coupled };
    Ok(StressField { kind, sigma })
}

/// `Σ_T |T| σ(T):∇_T v` on a coupled mesh for a nodal `v`.
pub fn weak_form(mesh: &AcMesh, sigma: &StressField, v: &[Vector2<f64>]) -> f64 {
    let mut s = 0.0;
    for (e, el) in mesh.elements().iter().enumerate() {
        let g = mesh.shape_gradients(e);
        let mut grad = Matrix2::zeros();
        for k in 0..3 {
            grad += v[el.v[k]] * g[k].transpose();
        }
        s += el.area * sigma.sigma[e].component_mul(&grad).sum();
    }
    s
}

/// Gradient of the P1 interpolant of lattice values on a micro-triangle.
pub fn micro_gradient(crystal: &Crystal, t: &Cell, v: impl Fn(LatticePoint) -> Vector2<f64>) -> Matrix2<f64> {
    let p = t.vertices();
    let x = p.map(|q| crystal.position(q));
    let m = Matrix2::from_columns(&[x[1] - x[0], x[2] - x[0]]);
    let d = Matrix2::from_columns(&[v(p[1]) - v(p[0]), v(p[2]) - v(p[0])]);
    d * m.try_inverse().expect("non-degenerate micro-triangle")
}

/// `Σ_t |t| σ(t):∇_t v` on the micro-triangulation.
pub fn weak_form_micro(crystal: &Crystal, micro: &MicroMesh, sigma: &StressField, v: impl Fn(LatticePoint) -> Vector2<f64>) -> f64 {
    let area = 0.5 * crystal.det();
    micro
        .cells
        .iter()
        .zip(&sigma.sigma)
        .map(|(t, s)| area * s.component_mul(&micro_gradient(crystal, t, &v)).sum())
        .sum()
}

/// `max_i |Σ_T |T| σ(T)∇φ_i|` over free nodal hat functions.
pub fn is_divergence_free(mesh: &AcMesh, sigma: &StressField) -> f64 {
    let mut r = vec![Vector2::zeros(); mesh.vertices().len()];
    for (e, el) in mesh.elements().iter().enumerate() {
        let g = mesh.shape_gradients(e);
        for k in 0..3 {
            r[el.v[k]] += sigma.sigma[e] * g[k] * el.area;
        }
    }
    r.iter().zip(mesh.free()).filter(|(_, f)| **f).map(|(v, _)| v.amax()).fold(0.0, f64::max)
}

const J: Matrix2<f64> = Matrix2::new(0.0, -1.0, 1.0, 0.0);

/// `∇c J` per element for a vector Crouzeix–Raviart field with values `c`
/// at face midpoints.
pub fn cr_curl(mesh: &AcMesh, c: &[Vector2<f64>]) -> Vec<Matrix2<f64>> {
    (0..mesh.elements().len())
        .map(|e| {
            let g = mesh.shape_gradients(e);
            let f = mesh.element_faces(e);
            let mut grad = Matrix2::zeros();
            for k in 0..3 {
                // ψ_f = 1 − 2λ_k for the face opposite corner k
                grad += c[f[k]] * (g[k] * -2.0).transpose();
            }
            grad * J
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CrCorrection {
    pub sigma: StressField,
    /// Face-midpoint values of `c_h`.
    pub c: Vec<Vector2<f64>>,
    pub mismatch_before: f64,
    pub mismatch_after: f64,
    /// Diagonal shift added to the normal equations.
    pub shift: f64,
}

/// Micro-triangles overlapping element `e` as `(micro index, |t ∩ T|)`.
pub fn micro_overlaps(mesh: &AcMesh, micro: &MicroMesh, e: usize) -> Result<Vec<(usize, f64)>> {
    mesh.micro_overlaps(e)
        .into_iter()
        .map(|(t, a)| micro.index(&t).map(|i| (i, a)).ok_or_else(|| Error::Mesh(format!("micro-triangle {:?} outside the micro mesh", t))))
        .collect()
}

/// `Σ_{t} |t ∩ T| |σ^a(t) − σ(T)|²` for one element.
fn element_mismatch(overlaps: &[(usize, f64)], sigma_a: &StressField, s: &Matrix2<f64>) -> f64 {
    overlaps.iter().map(|&(i, a)| a * (sigma_a.sigma[i] - s).norm_squared()).sum()
}

/// Elements whose `σ^h` an interface site can reach: those crossed by an
/// interface bond or touching an interface vertex, together with the
/// atomistic core they enclose. Empty without an interface.
pub fn correction_support(model: &AcModel) -> Result<Vec<bool>> {
    let mesh = model.mesh();
    let kinds = mesh.kinds();
    let mut support = vec![false; mesh.elements().len()];
    if mesh.interface_vertices().is_empty() {
        return Ok(support);
    }
    let (bonds, _) = model.first_variation(&vec![Vector2::zeros(); model.n_nodes()])?;
    for b in &bonds {
        let site = mesh.vertex_index(b.site).map(|i| kinds[i]);
        if site == Some(VertexKind::Interface) {
            for (e, _) in mesh_bond_weights(mesh, b.site, b.offset)? {
                support[e] = true;
            }
        }
    }
    for (e, el) in mesh.elements().iter().enumerate() {
        if el.tag.is_atomistic_region() || el.v.iter().any(|&i| kinds[i] == VertexKind::Interface) {
            support[e] = true;
        }
    }
    Ok(support)
}

/// Stress correction: `σ^h + ∇c_h J` with `c_h` minimising the mismatch to
/// `σ^a` over every element that has a free face. Interior faces of the
/// `support` elements are the free ones.
pub fn cr_correct(mesh: &AcMesh, micro: &MicroMesh, sigma_a: &StressField, sigma_h: &StressField, support: &[bool]) -> Result<CrCorrection> {
    let faces = mesh.faces();
    let mut slot = vec![usize::MAX; faces.len()];
    let mut nfree = 0;
    for (f, face) in faces.iter().enumerate() {
        if !face.is_boundary() && face.elems.iter().any(|&e| support[e]) {
            slot[f] = nfree;
            nfree += 1;
        }
    }
    let elems: Vec<usize> = (0..mesh.elements().len())
        .filter(|&e| mesh.element_faces(e).iter().any(|&f| slot[f] != usize::MAX))
        .collect();
    let mut overlaps = Vec::with_capacity(elems.len());
    for &e in &elems {
        overlaps.push(micro_overlaps(mesh, micro, e)?);
    }
    let before: f64 = elems.iter().zip(&overlaps).map(|(&e, o)| element_mismatch(o, sigma_a, &sigma_h.sigma[e])).sum();
    let mut c = vec![Vector2::zeros(); faces.len()];
    let mut shift = 0.0;
    if nfree > 0 {
        let mut trip = Vec::new();
        let mut rhs = Mat::<f64>::zeros(nfree, 2);
        let mut diag = vec![0.0; nfree];
        for (&e, o) in elems.iter().zip(&overlaps) {
            let area = mesh.elements()[e].area;
            let g = mesh.shape_gradients(e);
            let fs = mesh.element_faces(e);
            let w: [Vector2<f64>; 3] = [0, 1, 2].map(|k| J.transpose() * (g[k] * -2.0));
            let mut target = -sigma_h.sigma[e] * area;
            for &(i, a) in o {
                target += sigma_a.sigma[i] * a;
            }
            for a in 0..3 {
                let sa = slot[fs[a]];
                if sa == usize::MAX {
                    continue;
                }
                for r in 0..2 {
                    rhs[(sa, r)] += target.row(r).transpose().dot(&w[a]);
                }
                for b in 0..3 {
                    let sb = slot[fs[b]];
                    if sb != usize::MAX && sa >= sb {
                        let v = area * w[a].dot(&w[b]);
                        trip.push(Triplet::new(sa, sb, v));
                        if sa == sb {
                            diag[sa] += v;
                        }
                    }
                }
            }
        }
        shift = 1e-12 * diag.iter().fold(0.0f64, |m, v| m.max(*v));
        for k in 0..nfree {
            trip.push(Triplet::new(k, k, shift));
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(nfree, nfree, &trip)
            .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        let llt = mat.sp_cholesky(Side::Lower).map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        llt.solve_in_place(rhs.as_mut());
        for (f, &s) in slot.iter().enumerate() {
            if s != usize::MAX {
                c[f] = Vector2::new(rhs[(s, 0)], rhs[(s, 1)]);
            }
        }
    }
    let curl = cr_curl(mesh, &c);
    let sigma: Vec<Matrix2<f64>> = sigma_h.sigma.iter().zip(&curl).map(|(s, d)| s + d).collect();
    let after: f64 = elems.iter().zip(&overlaps).map(|(&e, o)| element_mismatch(o, sigma_a, &sigma[e])).sum();
    Ok(CrCorrection { sigma: StressField { kind: sigma_h.kind, sigma }, c, mismatch_before: before, mismatch_after: after, shift })
}

/// Faces whose neighbours are both atomistic-region elements.
pub fn is_atomistic_face(mesh: &AcMesh, f: &Face) -> bool {
    !f.is_boundary() && f.elems.iter().all(|&e| mesh.elements()[e].tag.is_atomistic_region())
}
