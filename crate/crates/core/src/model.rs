//! Atomistic and GRAC energies with their gradients.
//!
//! Displacements are nodal vectors `u` (one `Vector2` per node) relative to
//! `y^B = B·x`; clamped nodes carry zero. All site energies are referenced
//! to the homogeneous bulk value `V(B·R)` so that sums over large domains
//! stay small.

use std::collections::HashMap;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::grac::{self, ReconstructionParams, SiteParams};
use crate::lattice::{Crystal, LatticePoint, NN};
use crate::mesh::{AcMesh, Cell, Sample, Tag, VertexKind};
use crate::potential::EamParams;

const NONE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyParts {
    pub atomistic: f64,
    pub interface: f64,
    pub continuum: f64,
    pub stabilization: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.atomistic + self.interface + self.continuum + self.stabilization
    }
}

/// What the solvers need from an energy.
pub trait Model {
    /// Length of nodal vectors.
    fn n_nodes(&self) -> usize;
    /// Nodes carrying unknowns, in a fixed order.
    fn free_nodes(&self) -> &[usize];
    fn energy(&self, u: &[Vector2<f64>]) -> Result<EnergyParts>;
    /// Writes the nodal gradient (all nodes, clamped ones included) into `g`.
    fn gradient(&self, u: &[Vector2<f64>], g: &mut [Vector2<f64>]) -> Result<EnergyParts>;
    /// Scalar P1 stiffness `∫∇φ_i·∇φ_j` as triplets over node indices.
    fn laplacian(&self) -> Vec<(usize, usize, f64)>;
}

/// Per-bond first variation `∂V/∂(D_ρ y(ℓ))`, already scaled by the site
/// weight. `offset` is the lattice vector of the bond.
#[derive(Clone, Copy, Debug)]
pub struct BondForce {
    pub site: LatticePoint,
    pub offset: LatticePoint,
    pub force: Vector2<f64>,
}

/// Site energy referenced to `vref`, with gradient scattered through
/// `scatter(r, dv)`.
#[inline]
fn site_term(
    eam: &EamParams,
    g: &[Vector2<f64>],
    dv: &mut [Vector2<f64>],
    vref: f64,
) -> Result<f64> {
    Ok(eam.site_gradient(g, dv)? - vref)
}

fn stiffness_of_tri(x: [Vector2<f64>; 3]) -> (f64, [Vector2<f64>; 3]) {
    let m = Matrix2::from_columns(&[x[1] - x[0], x[2] - x[0]]);
    let area = 0.5 * m.determinant().abs();
    let inv_t = m.try_inverse().expect("non-degenerate triangle").transpose();
    let g1 = inv_t.column(0).into_owned();
    let g2 = inv_t.column(1).into_owned();
    (area, [-g1 - g2, g1, g2])
}

// ------------------------------------------------------------------ atomistic

/// Pure atomistic energy on the hexagon of graph radius `radius`, clamped
/// outside. Nodes live on a square index array, so evaluation needs no
/// lookups; this is the model used for reference solutions.
#[derive(Clone, Debug)]
pub struct AtomisticModel {
    crystal: Crystal,
    eam: EamParams,
    b: Matrix2<f64>,
    radius: i64,
    half: i64,
    side: usize,
    sites: Vec<usize>,
    /// Valid range indices of sites next to a vacancy.
    masks: HashMap<usize, Vec<usize>>,
    offsets: Vec<isize>,
    bg: Vec<Vector2<f64>>,
    free: Vec<usize>,
    vref: f64,
}

impl AtomisticModel {
    pub fn new(crystal: &Crystal, eam: EamParams, b: Matrix2<f64>, radius: i64) -> Result<Self> {
        if radius < 1 {
            return Err(Error::InvalidConfig(format!("domain radius {radius} must be positive")));
        }
        let reach = crystal.reach();
        let half = radius + 2 * reach;
        let side = (2 * half + 1) as usize;
        let idx = |p: LatticePoint| ((p.n + half) as usize) * side + (p.m + half) as usize;
        let range = crystal.range();
        let offsets: Vec<isize> = range.iter().map(|r| {
            let o = r.offset();
            o.n as isize * side as isize + o.m as isize
        }).collect();
        let bg: Vec<Vector2<f64>> = crystal.range_cart().iter().map(|r| b * r).collect();
        let vref = eam.site_energy(&bg)?;
        let mut sites = Vec::new();
        let mut free = Vec::new();
        let mut masks = HashMap::new();
        let outer = radius + reach - 1;
        for n in -outer..=outer {
            for m in -outer..=outer {
                let p = LatticePoint::new(m, n);
                if p.hex_norm() > outer || crystal.is_defect(p) {
                    continue;
                }
                let i = idx(p);
                sites.push(i);
                if p.hex_norm() < radius {
                    free.push(i);
                }
                if range.iter().any(|r| crystal.is_defect(p + r.offset())) {
                    let valid = (0..range.len()).filter(|&r| !crystal.is_defect(p + range[r].offset())).collect();
                    masks.insert(i, valid);
                }
            }
        }
        Ok(AtomisticModel { crystal: crystal.clone(), eam, b, radius, half, side, sites, masks, offsets, bg, free, vref })
    }

    pub fn crystal(&self) -> &Crystal {
        &self.crystal
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn strain(&self) -> &Matrix2<f64> {
        &self.b
    }

    pub fn index(&self, p: LatticePoint) -> Option<usize> {
        let h = self.half;
        (p.m.abs() <= h && p.n.abs() <= h).then(|| ((p.n + h) as usize) * self.side + (p.m + h) as usize)
    }

    pub fn point(&self, i: usize) -> LatticePoint {
        LatticePoint::new((i % self.side) as i64 - self.half, (i / self.side) as i64 - self.half)
    }

    /// Nodal vector from point values; non-free nodes stay zero.
    pub fn field(&self, mut f: impl FnMut(LatticePoint) -> Vector2<f64>) -> Vec<Vector2<f64>> {
        let mut u = vec![Vector2::zeros(); self.n_nodes()];
        for &i in &self.free {
            u[i] = f(self.point(i));
        }
        u
    }

    /// Value of a nodal vector at a lattice point (zero off the array).
    pub fn value(&self, u: &[Vector2<f64>], p: LatticePoint) -> Vector2<f64> {
        self.index(p).map_or(Vector2::zeros(), |i| u[i])
    }

    fn bonds(&self, i: usize) -> Box<dyn Iterator<Item = usize> + '_> {
        match self.masks.get(&i) {
            Some(v) => Box::new(v.iter().copied()),
            None => Box::new(0..self.offsets.len()),
        }
    }

    fn each_site(
        &self,
        u: &[Vector2<f64>],
        mut f: impl FnMut(usize, &[usize], &[Vector2<f64>], f64),
    ) -> Result<f64> {
        let nr = self.offsets.len();
        let mut g = Vec::with_capacity(nr);
        let mut dv = vec![Vector2::zeros(); nr];
        let mut rs = Vec::with_capacity(nr);
        let mut e = 0.0;
        for &i in &self.sites {
            g.clear();
            rs.clear();
            for r in self.bonds(i) {
                let j = (i as isize + self.offsets[r]) as usize;
                g.push(self.bg[r] + u[j] - u[i]);
                rs.push(r);
            }
            let v = site_term(&self.eam, &g, &mut dv[..g.len()], self.vref)?;
            e += v;
            f(i, &rs, &dv[..g.len()], v);
        }
        Ok(e)
    }

    /// Referenced energy of every site, keyed by lattice point.
    pub fn site_energies(&self, u: &[Vector2<f64>]) -> Result<Vec<(LatticePoint, f64)>> {
        let mut out = Vec::with_capacity(self.sites.len());
        self.each_site(u, |i, _, _, v| out.push((self.point(i), v)))?;
        Ok(out)
    }

    pub fn bond_forces(&self, u: &[Vector2<f64>]) -> Result<Vec<BondForce>> {
        let range = self.crystal.range();
        let mut out = Vec::with_capacity(self.sites.len() * range.len());
        self.each_site(u, |i, rs, dv, _| {
            let p = self.point(i);
            for (&r, d) in rs.iter().zip(dv) {
                out.push(BondForce { site: p, offset: range[r].offset(), force: *d });
            }
        })?;
        Ok(out)
    }
}

impl Model for AtomisticModel {
    fn n_nodes(&self) -> usize {
        self.side * self.side
    }

    fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    fn energy(&self, u: &[Vector2<f64>]) -> Result<EnergyParts> {
        let e = self.each_site(u, |_, _, _, _| {})?;
        Ok(EnergyParts { atomistic: e, ..Default::default() })
    }

    fn gradient(&self, u: &[Vector2<f64>], grad: &mut [Vector2<f64>]) -> Result<EnergyParts> {
        grad.iter_mut().for_each(|x| *x = Vector2::zeros());
        let offsets = &self.offsets;
        let e = self.each_site(u, |i, rs, dv, _| {
            for (&r, d) in rs.iter().zip(dv) {
                let j = (i as isize + offsets[r]) as usize;
                grad[j] += d;
                grad[i] -= d;
            }
        })?;
        Ok(EnergyParts { atomistic: e, ..Default::default() })
    }

    fn laplacian(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        let r = self.radius;
        for n in -r..r {
            for m in -r..r {
                for up in [true, false] {
                    let c = Cell::micro(up, LatticePoint::new(m, n));
                    let v = c.vertices();
                    if v.iter().any(|p| p.hex_norm() > r) {
                        continue;
                    }
                    let (area, g) = stiffness_of_tri(v.map(|p| self.crystal.position(p)));
                    let ids = v.map(|p| self.index(p).unwrap());
                    for a in 0..3 {
                        for b in 0..3 {
                            out.push((ids[a], ids[b], area * g[a].dot(&g[b])));
                        }
                    }
                }
            }
        }
        out
    }
}

// -------------------------------------------------------------------- coupled

#[derive(Clone, Debug)]
struct AtomTerm {
    point: LatticePoint,
    center: usize,
    bonds: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct IfaceTerm {
    center: usize,
    omega: f64,
    params: SiteParams,
    samples: Vec<Sample>,
    bsig: Vec<Vector2<f64>>,
    /// `ℓ ± a_j` for the three independent nearest-neighbour directions.
    stab: [(Sample, Sample); 3],
}

/// The GRAC energy `Σ_{Λ^a} V_ℓ + Σ_{Λ^i} ω_ℓ V^i_ℓ + Σ_T ω_T W(∇y_h)` on a
/// coupled mesh, with the stabilisation `κ|D²_nn y|²` added to `V^i_ℓ`.
#[derive(Clone, Debug)]
pub struct AcModel<'m> {
    mesh: &'m AcMesh,
    eam: EamParams,
    b: Matrix2<f64>,
    kappa: f64,
    atoms: Vec<AtomTerm>,
    iface: Vec<IfaceTerm>,
    cont: Vec<(usize, f64)>,
    free: Vec<usize>,
    bg: Vec<Vector2<f64>>,
    vref: f64,
    wref: f64,
}

impl<'m> AcModel<'m> {
    /// `params` may be omitted only when the mesh has no interface.
    pub fn new(
        mesh: &'m AcMesh,
        eam: EamParams,
        b: Matrix2<f64>,
        params: Option<&ReconstructionParams>,
        kappa: f64,
    ) -> Result<Self> {
        let crystal = mesh.crystal();
        let range = crystal.range();
        let rcart = crystal.range_cart();
        let bg: Vec<Vector2<f64>> = rcart.iter().map(|r| b * r).collect();
        let vref = eam.site_energy(&bg)?;
        let (wref, _) = eam.cauchy_born(&b, rcart, crystal.det())?;

        let mut atoms = Vec::new();
        for p in mesh.atomistic_sites() {
            let center = mesh.vertex_index(p).unwrap_or(NONE);
            let mut bonds = Vec::with_capacity(range.len());
            for (r, rho) in range.iter().enumerate() {
                let q = p + rho.offset();
                if crystal.is_defect(q) {
                    continue;
                }
                let j = match mesh.vertex_index(q) {
                    Some(j) => j,
                    None if !mesh.in_domain(q) => NONE,
                    None => return Err(Error::StencilEscape(q)),
                };
                bonds.push((r, j));
            }
            atoms.push(AtomTerm { point: p, center, bonds });
        }

        let ifv = mesh.interface_vertices();
        let mut iface = Vec::with_capacity(ifv.len());
        if !ifv.is_empty() {
            let params = params.ok_or_else(|| Error::InvalidConfig("reconstruction parameters missing".into()))?;
            for i in ifv {
                let p = mesh.vertices()[i];
                let sp = params.site(p).ok_or(Error::UnknownSite(i))?.clone();
                let samples = sp.sigmas.iter().map(|&s| mesh.sample(p + s)).collect();
                let bsig = sp.sigmas.iter().map(|&s| b * crystal.position(s)).collect();
                let stab = [0, 1, 2].map(|j| (mesh.sample(p + NN[j]), mesh.sample(p - NN[j])));
                iface.push(IfaceTerm { center: i, omega: mesh.volumes().omega_site[i], params: sp, samples, bsig, stab });
            }
        }

        let cont = mesh
            .elements()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.tag == Tag::Continuum)
            .map(|(k, _)| (k, mesh.volumes().omega_elem[k]))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        let free = (0..mesh.vertices().len()).filter(|&i| mesh.free()[i]).collect();
        Ok(AcModel { mesh, eam, b, kappa, atoms, iface, cont, free, bg, vref, wref })
    }

    pub fn mesh(&self) -> &AcMesh {
        self.mesh
    }

    pub fn strain(&self) -> &Matrix2<f64> {
        &self.b
    }

    pub fn eam(&self) -> EamParams {
        self.eam
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    fn nodal(u: &[Vector2<f64>], j: usize) -> Vector2<f64> {
        if j == NONE {
            Vector2::zeros()
        } else {
            u[j]
        }
    }

    fn eval(&self, u: &[Vector2<f64>], grad: Option<&mut [Vector2<f64>]>, mut bonds: Option<&mut Vec<BondForce>>) -> Result<EnergyParts> {
        let mut parts = EnergyParts::default();
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = Vector2::zeros());
        }
        let range = self.mesh.crystal().range();
        let nr = range.len();
        let mut g = Vec::with_capacity(nr);
        let mut dv = vec![Vector2::zeros(); nr];

        for a in &self.atoms {
            let uc = Self::nodal(u, a.center);
            g.clear();
            for &(r, j) in &a.bonds {
                g.push(self.bg[r] + Self::nodal(u, j) - uc);
            }
            parts.atomistic += site_term(&self.eam, &g, &mut dv[..g.len()], self.vref)?;
            if let Some(gr) = grad.as_deref_mut() {
                for (&(_, j), d) in a.bonds.iter().zip(&dv) {
                    if j != NONE {
                        gr[j] += d;
                    }
                    if a.center != NONE {
                        gr[a.center] -= d;
                    }
                }
            }
            if let Some(bf) = bonds.as_deref_mut() {
                for (&(r, _), d) in a.bonds.iter().zip(&dv) {
                    bf.push(BondForce { site: a.point, offset: range[r].offset(), force: *d });
                }
            }
        }

        let mut dy = Vec::new();
        let mut gs = Vec::new();
        for t in &self.iface {
            let uc = u[t.center];
            dy.clear();
            for (s, bs) in t.samples.iter().zip(&t.bsig) {
                dy.push(bs + s.eval(u) - uc);
            }
            gs.resize(dy.len(), Vector2::zeros());
            let v = grac::interface_energy(&self.eam, &t.params, &dy, &mut gs)?;
            parts.interface += t.omega * (v - self.vref);
            if let Some(gr) = grad.as_deref_mut() {
                for (s, d) in t.samples.iter().zip(&gs) {
                    for (j, w) in s.entries() {
                        gr[j] += d * (t.omega * w);
                    }
                    gr[t.center] -= d * t.omega;
                }
            }
            if let Some(bf) = bonds.as_deref_mut() {
                for (s, d) in t.params.sigmas.iter().zip(&gs) {
                    bf.push(BondForce { site: t.params.point, offset: *s, force: d * t.omega });
                }
            }
            if self.kappa != 0.0 {
                let plus = [0, 1, 2].map(|j| t.stab[j].0.eval(u));
                let minus = [0, 1, 2].map(|j| t.stab[j].1.eval(u));
                let (e, gc, gp, gm) = grac::stabilization(uc, &plus, &minus, self.kappa);
                parts.stabilization += t.omega * e;
                if let Some(gr) = grad.as_deref_mut() {
                    gr[t.center] += gc * t.omega;
                    for j in 0..3 {
                        for (k, w) in t.stab[j].0.entries() {
                            gr[k] += gp[j] * (t.omega * w);
                        }
                        for (k, w) in t.stab[j].1.entries() {
                            gr[k] += gm[j] * (t.omega * w);
                        }
                    }
                }
                if let Some(bf) = bonds.as_deref_mut() {
                    // y(ℓ+a) − 2y(ℓ) + y(ℓ−a) = D_a y(ℓ) + D_{−a} y(ℓ)
                    for j in 0..3 {
                        bf.push(BondForce { site: t.params.point, offset: NN[j], force: gp[j] * t.omega });
                        bf.push(BondForce { site: t.params.point, offset: -NN[j], force: gm[j] * t.omega });
                    }
                }
            }
        }

        let rcart = self.mesh.crystal().range_cart();
        let det = self.mesh.crystal().det();
        for &(e, w) in &self.cont {
            let f = self.deformation_gradient(u, e);
            let (wv, dw) = self.eam.cauchy_born(&f, rcart, det)?;
            parts.continuum += w * (wv - self.wref);
            if let Some(gr) = grad.as_deref_mut() {
                let el = &self.mesh.elements()[e];
                let sg = self.mesh.shape_gradients(e);
                for k in 0..3 {
                    gr[el.v[k]] += dw * sg[k] * w;
                }
            }
        }
        Ok(parts)
    }

    /// `∇y_h` on element `e`.
    pub fn deformation_gradient(&self, u: &[Vector2<f64>], e: usize) -> Matrix2<f64> {
        let el = &self.mesh.elements()[e];
        let sg = self.mesh.shape_gradients(e);
        let mut f = self.b;
        for k in 0..3 {
            f += u[el.v[k]] * sg[k].transpose();
        }
        f
    }

    /// Bond first variations of the atomistic, interface and stabilisation
    /// parts, and `ω_T ∂W(∇y_h)` for the weighted continuum elements.
    pub fn first_variation(&self, u: &[Vector2<f64>]) -> Result<(Vec<BondForce>, Vec<(usize, Matrix2<f64>)>)> {
        let mut bonds = Vec::new();
        self.eval(u, None, Some(&mut bonds))?;
        let rcart = self.mesh.crystal().range_cart();
        let det = self.mesh.crystal().det();
        let mut cont = Vec::with_capacity(self.cont.len());
        for &(e, w) in &self.cont {
            let f = self.deformation_gradient(u, e);
            let (_, dw) = self.eam.cauchy_born(&f, rcart, det)?;
            cont.push((e, dw * w));
        }
        Ok((bonds, cont))
    }

    /// Maximum nodal force over free nodes.
    pub fn max_force(&self, u: &[Vector2<f64>]) -> Result<f64> {
        let mut g = vec![Vector2::zeros(); self.n_nodes()];
        self.gradient(u, &mut g)?;
        Ok(self.free.iter().map(|&i| g[i].amax()).fold(0.0, f64::max))
    }
}

impl Model for AcModel<'_> {
    fn n_nodes(&self) -> usize {
        self.mesh.vertices().len()
    }

    fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    fn energy(&self, u: &[Vector2<f64>]) -> Result<EnergyParts> {
        self.eval(u, None, None)
    }

    fn gradient(&self, u: &[Vector2<f64>], g: &mut [Vector2<f64>]) -> Result<EnergyParts> {
        self.eval(u, Some(g), None)
    }

    fn laplacian(&self) -> Vec<(usize, usize, f64)> {
        mesh_laplacian(self.mesh)
    }
}

/// Scalar P1 stiffness of a mesh, skipping triangles at vacancies.
pub fn mesh_laplacian(mesh: &AcMesh) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(9 * mesh.elements().len());
    for (e, el) in mesh.elements().iter().enumerate() {
        if el.v.iter().any(|&i| mesh.kinds()[i] == VertexKind::Vacancy) {
            continue;
        }
        let g = mesh.shape_gradients(e);
        for a in 0..3 {
            for b in 0..3 {
                out.push((el.v[a], el.v[b], el.area * g[a].dot(&g[b])));
            }
        }
    }
    out
}

/// Packs the free entries of a nodal vector.
pub fn to_dofs(free: &[usize], u: &[Vector2<f64>]) -> Vec<f64> {
    free.iter().flat_map(|&i| [u[i][0], u[i][1]]).collect()
}

/// Unpacks a dof vector into a nodal vector of length `n`.
pub fn from_dofs(free: &[usize], n: usize, x: &[f64]) -> Vec<Vector2<f64>> {
    let mut u = vec![Vector2::zeros(); n];
    for (k, &i) in free.iter().enumerate() {
        u[i] = Vector2::new(x[2 * k], x[2 * k + 1]);
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grac::{assemble_constraints, solve_l1};
    use crate::mesh::{build_ac_mesh, MeshParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f0(c: &Crystal) -> Matrix2<f64> {
        let s = EamParams::default().ground_state_scale(c.range_cart()).unwrap();
        Matrix2::identity() * s
    }

    fn random_field(model: &dyn Model, rng: &mut ChaCha8Rng, amp: f64) -> Vec<Vector2<f64>> {
        let mut u = vec![Vector2::zeros(); model.n_nodes()];
        for &i in model.free_nodes() {
            u[i] = Vector2::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp));
        }
        u
    }

    fn fd_check(model: &dyn Model, u: &[Vector2<f64>], rng: &mut ChaCha8Rng) {
        let mut g = vec![Vector2::zeros(); model.n_nodes()];
        model.gradient(u, &mut g).unwrap();
        let free = model.free_nodes();
        let h = 1e-6;
        for _ in 0..6 {
            let i = free[rng.random_range(0..free.len())];
            for c in 0..2 {
                let mut up = u.to_vec();
                up[i][c] += h;
                let mut um = u.to_vec();
                um[i][c] -= h;
                let fd = (model.energy(&up).unwrap().total() - model.energy(&um).unwrap().total()) / (2.0 * h);
                assert!((fd - g[i][c]).abs() <= 1e-6 * (1.0 + g[i][c].abs()), "node {i}: fd {fd} vs {}", g[i][c]);
            }
        }
    }

    #[test]
    fn atomistic_reference_state() {
        let c = Crystal::triangular(0);
        let m = AtomisticModel::new(&c, EamParams::default(), f0(&c), 6).unwrap();
        let u = vec![Vector2::zeros(); m.n_nodes()];
        let mut g = u.clone();
        let e = m.gradient(&u, &mut g).unwrap();
        assert_eq!(e.total(), 0.0);
        assert!(m.free_nodes().iter().all(|&i| g[i].amax() < 1e-12));
    }

    #[test]
    fn vacancy_formation_energy_positive() {
        let b = f0(&Crystal::triangular(0));
        for k in [1, 2] {
            let c = Crystal::triangular(k);
            let m = AtomisticModel::new(&c, EamParams::default(), b, 6).unwrap();
            let u = vec![Vector2::zeros(); m.n_nodes()];
            assert!(m.energy(&u).unwrap().total() > 0.0);
        }
    }

    #[test]
    fn atomistic_gradient_fd() {
        let c = Crystal::triangular(2);
        let m = AtomisticModel::new(&c, EamParams::default(), f0(&c) * 1.01, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_field(&m, &mut rng, 0.05);
        fd_check(&m, &u, &mut rng);
    }

    #[test]
    fn atomistic_mesh_matches_atomistic_model() {
        let c = Crystal::triangular(2);
        let b = f0(&c) * 1.02;
        let mesh = AcMesh::atomistic(&c, 6).unwrap();
        let ac = AcModel::new(&mesh, EamParams::default(), b, None, 0.1).unwrap();
        let at = AtomisticModel::new(&c, EamParams::default(), b, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ua = random_field(&at, &mut rng, 0.05);
        let uh: Vec<Vector2<f64>> = mesh.vertices().iter().map(|&p| at.value(&ua, p)).collect();
        let ea = at.energy(&ua).unwrap();
        let eh = ac.energy(&uh).unwrap();
        assert_eq!(ea.total().to_bits(), eh.total().to_bits());
        assert_eq!(eh.interface + eh.continuum + eh.stabilization, 0.0);
    }

    #[test]
    fn coupled_gradient_fd_and_patch_test() {
        let c = Crystal::triangular(0);
        let eam = EamParams::default();
        for reflection in [true, false] {
            let mesh = build_ac_mesh(&c, &MeshParams { r_ai: 4, radius: 16, grading: 1.0, macro_size: 8, reflection }).unwrap();
            let params = solve_l1(&assemble_constraints(&mesh).unwrap()).unwrap();
            let b = f0(&c) * Matrix2::new(1.02, 0.01, -0.01, 0.99);
            let model = AcModel::new(&mesh, eam, b, Some(&params), 0.1).unwrap();
            let zero = vec![Vector2::zeros(); model.n_nodes()];
            assert!(model.max_force(&zero).unwrap() < 1e-8);
            let mut rng = ChaCha8Rng::seed_from_u64(reflection as u64);
            let u = random_field(&model, &mut rng, 0.03);
            fd_check(&model, &u, &mut rng);
            let parts = model.energy(&u).unwrap();
            let sum = parts.atomistic + parts.interface + parts.continuum + parts.stabilization;
            assert!((sum - parts.total()).abs() <= 1e-12 * parts.total().abs());
        }
    }
}
