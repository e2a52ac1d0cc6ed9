//! Geometric reconstruction of interface site energies.
//!
//! Each interface site `ℓ` evaluates the site potential on a reconstructed
//! stencil `g_ρ = Σ_ς C_{ℓ;ρ,ς} D_ς y(ℓ)`. The coefficients are fixed by
//! the energy and force patch tests, and the remaining freedom is resolved
//! by an ℓ¹ or a minimum-norm ℓ² objective.
//!
//! The constraint system splits into independent blocks, one per pair
//! `{ρ, −ρ}`: energy rows for `ρ` involve only `C_{·;ρ,·}`, and force rows
//! for `ρ ∈ R⁺` involve `C_{·;ρ,·} − C_{·;−ρ,·}`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::PathBuf;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::Vector2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{BondVector, LatticePoint};
use crate::lp::{self, SparseCols};
use crate::mesh::{AcMesh, Tag, VertexKind};
use crate::potential::EamParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    L1,
    Lsq,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::L1 => "l1",
            Method::Lsq => "lsq",
        }
    }
}

/// Stencil of one interface site.
#[derive(Clone, Debug)]
pub struct SiteStencil {
    pub point: LatticePoint,
    pub omega: f64,
    pub sigmas: Vec<LatticePoint>,
}

#[derive(Clone, Debug)]
pub struct ConstraintBlock {
    /// Range indices of `ρ ∈ R⁺` and of `−ρ`.
    pub rho: usize,
    pub neg: usize,
    /// Column `j` is `C_{site; r, sigma}`: `(site, r, sigma index)`.
    pub unknowns: Vec<(usize, usize, usize)>,
    pub matrix: SparseCols,
    pub rhs: Vec<f64>,
    pub energy_rows: usize,
    /// Lattice point of each force row.
    pub force_nodes: Vec<LatticePoint>,
}

#[derive(Clone, Debug)]
pub struct ConstraintSystem {
    pub range: Vec<BondVector>,
    pub sites: Vec<SiteStencil>,
    pub blocks: Vec<ConstraintBlock>,
}

impl ConstraintSystem {
    pub fn energy_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.energy_rows).sum()
    }

    pub fn force_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.force_nodes.len()).sum()
    }

    pub fn unknowns(&self) -> usize {
        self.blocks.iter().map(|b| b.unknowns.len()).sum()
    }
}

/// Reconstruction coefficients of one interface site, `coeffs[r·nς + s]`.
#[derive(Clone, Debug)]
pub struct SiteParams {
    pub point: LatticePoint,
    pub omega: f64,
    pub sigmas: Vec<LatticePoint>,
    pub coeffs: Vec<f64>,
}

impl SiteParams {
    pub fn get(&self, r: usize, s: usize) -> f64 {
        self.coeffs[r * self.sigmas.len() + s]
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionParams {
    pub method: Method,
    pub range: Vec<BondVector>,
    pub sites: Vec<SiteParams>,
    pub objective: f64,
    pub duality_gap: f64,
    pub max_residual: f64,
}

impl ReconstructionParams {
    pub fn site(&self, p: LatticePoint) -> Option<&SiteParams> {
        self.sites.iter().find(|s| s.point == p)
    }

    pub fn all_coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        self.sites.iter().flat_map(|s| s.coeffs.iter().copied())
    }

    pub fn l1_norm(&self) -> f64 {
        self.all_coefficients().map(f64::abs).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.all_coefficients().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Writes `ell rho sigma value` rows for every nonzero coefficient.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "ell rho sigma value")?;
        for s in &self.sites {
            for (r, rho) in self.range.iter().enumerate() {
                for (k, sig) in s.sigmas.iter().enumerate() {
                    let c = s.get(r, k);
                    if c != 0.0 {
                        let o = rho.offset();
                        writeln!(w, "{},{} {},{} {},{} {:.17e}", s.point.m, s.point.n, o.m, o.n, sig.m, sig.n, c)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn positive_half(range: &[BondVector]) -> Vec<(usize, usize)> {
    let find = |p: LatticePoint| range.iter().position(|b| b.offset() == p);
    range
        .iter()
        .enumerate()
        .filter(|(_, b)| {
            let o = b.offset();
            o.n > 0 || (o.n == 0 && o.m > 0)
        })
        .map(|(r, b)| (r, find(-b.offset()).expect("point-symmetric range")))
        .collect()
}

/// Builds the patch-test constraints for the interface of `mesh`.
pub fn assemble_constraints(mesh: &AcMesh) -> Result<ConstraintSystem> {
    let crystal = mesh.crystal();
    let range: Vec<BondVector> = crystal.range().to_vec();
    let rcart = crystal.range_cart();
    let det = crystal.det();
    let kinds = mesh.kinds();
    let verts = mesh.vertices();
    let omega_site = &mesh.volumes().omega_site;
    let reflection = mesh.is_reflection();

    let mut sites = Vec::new();
    for i in mesh.interface_vertices() {
        let p = verts[i];
        let mut sigmas = Vec::new();
        for b in &range {
            let q = p + b.offset();
            if crystal.is_defect(q) {
                return Err(Error::Mesh(format!("interface site {p} touches a vacancy")));
            }
            let usable = match mesh.vertex_index(q) {
                Some(j) if reflection => matches!(kinds[j], VertexKind::Atomistic | VertexKind::Interface),
                Some(_) => true,
                None => false,
            };
            if usable {
                sigmas.push(b.offset());
            } else if !reflection {
                return Err(Error::StencilEscape(q));
            }
        }
        sites.push(SiteStencil { point: p, omega: omega_site[i], sigmas });
    }

    // the patch test lives on the defect-free lattice, so vacancies count as atoms
    let is_atom = |q: LatticePoint| {
        mesh.vertex_index(q).map_or(false, |j| matches!(kinds[j], VertexKind::Atomistic | VertexKind::Vacancy))
    };

    // continuum coefficients c^c(z; ρ) for every ρ
    let mut cc: HashMap<LatticePoint, Vec<f64>> = HashMap::new();
    let omega_elem = &mesh.volumes().omega_elem;
    for (e, el) in mesh.elements().iter().enumerate() {
        let w = omega_elem[e];
        if w == 0.0 || el.tag != Tag::Continuum {
            continue;
        }
        let g = mesh.shape_gradients(e);
        for k in 0..3 {
            let entry = cc.entry(verts[el.v[k]]).or_insert_with(|| vec![0.0; range.len()]);
            for (r, rho) in rcart.iter().enumerate() {
                entry[r] += 2.0 * w / det * g[k].dot(rho);
            }
        }
    }

    let mut candidates: BTreeSet<LatticePoint> = BTreeSet::new();
    for s in &sites {
        candidates.insert(s.point);
        for b in &range {
            candidates.insert(s.point + b.offset());
        }
        for sig in &s.sigmas {
            let smp = mesh.sample(s.point + *sig);
            for (j, _) in smp.entries() {
                candidates.insert(verts[j]);
            }
        }
    }
    for (p, v) in &cc {
        if v.iter().any(|x| x.abs() > 1e-12) {
            candidates.insert(*p);
        }
    }
    let candidates: Vec<LatticePoint> = candidates
        .into_iter()
        .filter(|&q| mesh.vertex_index(q).map_or(false, |j| mesh.free()[j]))
        .collect();

    let samples: Vec<Vec<Vec<(LatticePoint, f64)>>> = sites
        .iter()
        .map(|s| {
            s.sigmas
                .iter()
                .map(|&sig| mesh.sample(s.point + sig).entries().map(|(j, w)| (verts[j], w)).collect())
                .collect()
        })
        .collect();

    let mut blocks = Vec::new();
    for (rp, rn) in positive_half(&range) {
        let rho = range[rp].offset();
        let energy_rows = sites.len() * 4;
        // force-row entries keyed by lattice point
        let mut cols: Vec<(usize, usize, usize, Vec<(usize, f64)>, BTreeMap<LatticePoint, f64>)> = Vec::new();
        for (si, s) in sites.iter().enumerate() {
            for (which, r) in [(0usize, rp), (1, rn)] {
                let sign = if which == 0 { 1.0 } else { -1.0 };
                for (k, sig) in s.sigmas.iter().enumerate() {
                    let base = si * 4 + which * 2;
                    let energy = vec![(base, sig.m as f64), (base + 1, sig.n as f64)];
                    let mut force: BTreeMap<LatticePoint, f64> = BTreeMap::new();
                    for &(q, w) in &samples[si][k] {
                        *force.entry(q).or_insert(0.0) += sign * s.omega * w;
                    }
                    *force.entry(s.point).or_insert(0.0) -= sign * s.omega;
                    cols.push((si, r, k, energy, force));
                }
            }
        }
        let mut rows: BTreeMap<LatticePoint, f64> = BTreeMap::new();
        for &z in &candidates {
            let ca = is_atom(z - rho) as i32 as f64 - is_atom(z + rho) as i32 as f64;
            let ccv = cc.get(&z).map_or(0.0, |v| v[rp]);
            rows.insert(z, -(ca + ccv));
        }
        let mut used: BTreeSet<LatticePoint> = BTreeSet::new();
        for c in &cols {
            for (q, v) in &c.4 {
                if v.abs() > 0.0 && rows.contains_key(q) {
                    used.insert(*q);
                }
            }
        }
        let force_nodes: Vec<LatticePoint> = rows
            .iter()
            .filter(|(q, rhs)| used.contains(q) || rhs.abs() > 1e-12)
            .map(|(q, _)| *q)
            .collect();
        let row_of: HashMap<LatticePoint, usize> =
            force_nodes.iter().enumerate().map(|(i, q)| (*q, energy_rows + i)).collect();
        let mut matrix = SparseCols::new(energy_rows + force_nodes.len());
        let mut unknowns = Vec::with_capacity(cols.len());
        for (si, r, k, energy, force) in cols {
            let mut col = energy;
            for (q, v) in force {
                if v != 0.0 {
                    if let Some(&row) = row_of.get(&q) {
                        col.push((row, v));
                    }
                }
            }
            col.retain(|&(_, v)| v != 0.0);
            matrix.cols.push(col);
            unknowns.push((si, r, k));
        }
        let mut rhs = Vec::with_capacity(matrix.nrows);
        for _ in &sites {
            rhs.extend([rho.m as f64, rho.n as f64, -rho.m as f64, -rho.n as f64]);
        }
        for q in &force_nodes {
            let v = rows[q];
            rhs.push(if v.abs() > 1e-12 { v } else { 0.0 });
        }
        blocks.push(ConstraintBlock { rho: rp, neg: rn, unknowns, matrix, rhs, energy_rows, force_nodes });
    }
    Ok(ConstraintSystem { range, sites, blocks })
}

fn residual(a: &SparseCols, x: &[f64], b: &[f64]) -> f64 {
    a.mul(x).iter().zip(b).map(|(ax, b)| (ax - b).abs()).fold(0.0, f64::max)
}

/// Minimum-norm solution of a consistent system `Ax = b`.
///
/// Solves `(AAᵀ + εI) z = r` by sparse Cholesky and sets `x += Aᵀz`, with a
/// few rounds of refinement on the residual. Every update lies in the range
/// of `Aᵀ`, so the limit is the minimum-norm solution even when `A` has
/// redundant rows.
pub fn min_norm_solve(a: &SparseCols, b: &[f64]) -> Result<Vec<f64>> {
    let m = a.nrows;
    let mut x = vec![0.0; a.ncols()];
    if m == 0 {
        return Ok(x);
    }
    let mut gram: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for col in &a.cols {
        for &(i, u) in col {
            for &(k, v) in col {
                if i >= k {
                    *gram.entry((i, k)).or_insert(0.0) += u * v;
                }
            }
        }
    }
    let dmax = (0..m).map(|i| gram.get(&(i, i)).copied().unwrap_or(0.0)).fold(0.0f64, f64::max);
    let shift = 1e-12 * dmax.max(1.0);
    let mut trip: Vec<Triplet<usize, usize, f64>> = gram.into_iter().map(|((i, k), v)| Triplet::new(i, k, v)).collect();
    trip.extend((0..m).map(|i| Triplet::new(i, i, shift)));
    let g = SparseColMat::<usize, f64>::try_new_from_triplets(m, m, &trip)
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    let llt = g.sp_cholesky(Side::Lower).map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    let bscale = b.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for _ in 0..8 {
        let ax = a.mul(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
        if r.iter().all(|v| v.abs() <= 1e-14 * bscale) {
            break;
        }
        let mut z = Mat::<f64>::from_fn(m, 1, |i, _| r[i]);
        llt.solve_in_place(z.as_mut());
        let zs: Vec<f64> = (0..m).map(|i| z[(i, 0)]).collect();
        x.iter_mut().zip(a.mul_t(&zs)).for_each(|(x, d)| *x += d);
    }
    Ok(x)
}

/// Block solutions keyed by a hash of the method and the block data, held
/// in memory and optionally mirrored to a directory.
#[derive(Debug, Default)]
pub struct ParamCache {
    dir: Option<PathBuf>,
    mem: HashMap<String, Vec<f64>>,
    pub hits: usize,
    pub misses: usize,
}

impl ParamCache {
    pub fn in_memory() -> Self {
        ParamCache::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ParamCache { dir: Some(dir), ..Default::default() })
    }

    fn key(method: Method, block: &ConstraintBlock) -> String {
        let mut h = Sha256::new();
        h.update(method.name().as_bytes());
        h.update((block.matrix.nrows as u64).to_le_bytes());
        for col in &block.matrix.cols {
            h.update((col.len() as u64).to_le_bytes());
            for &(i, v) in col {
                h.update((i as u64).to_le_bytes());
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for v in &block.rhs {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn load(&mut self, key: &str, n: usize) -> Option<Vec<f64>> {
        if let Some(x) = self.mem.get(key) {
            return Some(x.clone());
        }
        let bytes = std::fs::read(self.dir.as_ref()?.join(format!("{key}.bin"))).ok()?;
        if bytes.len() != 8 * n {
            return None;
        }
        let x: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        self.mem.insert(key.to_string(), x.clone());
        Some(x)
    }

    fn store(&mut self, key: String, x: &[f64]) -> Result<()> {
        if let Some(dir) = &self.dir {
            let bytes: Vec<u8> = x.iter().flat_map(|v| v.to_le_bytes()).collect();
            let tmp = dir.join(format!("{key}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(tmp, dir.join(format!("{key}.bin")))?;
        }
        self.mem.insert(key, x.to_vec());
        Ok(())
    }
}

fn solve(sys: &ConstraintSystem, method: Method) -> Result<ReconstructionParams> {
    solve_cached(sys, method, &mut ParamCache::in_memory())
}

/// As [`solve_params`], reusing block solutions from `cache`.
pub fn solve_cached(sys: &ConstraintSystem, method: Method, cache: &mut ParamCache) -> Result<ReconstructionParams> {
    let nr = sys.range.len();
    let mut sites: Vec<SiteParams> = sys
        .sites
        .iter()
        .map(|s| SiteParams {
            point: s.point,
            omega: s.omega,
            sigmas: s.sigmas.clone(),
            coeffs: vec![0.0; nr * s.sigmas.len()],
        })
        .collect();
    let mut objective = 0.0;
    let mut gap: f64 = 0.0;
    let mut max_res: f64 = 0.0;
    for block in &sys.blocks {
        let key = ParamCache::key(method, block);
        let x = match cache.load(&key, block.matrix.ncols()) {
            Some(x) => {
                cache.hits += 1;
                x
            }
            None => {
                cache.misses += 1;
                let x = match method {
                    Method::L1 => {
                        let sol = lp::solve_l1(&block.matrix, &block.rhs)?;
                        gap = gap.max(sol.duality_gap());
                        sol.x
                    }
                    Method::Lsq => min_norm_solve(&block.matrix, &block.rhs)?,
                };
                cache.store(key, &x)?;
                x
            }
        };
        let res = residual(&block.matrix, &x, &block.rhs);
        if !(res <= 1e-9) {
            return Err(Error::Infeasible(res));
        }
        max_res = max_res.max(res);
        for (&(si, r, k), &v) in block.unknowns.iter().zip(&x) {
            let v = if v.abs() < 1e-14 { 0.0 } else { v };
            let ns = sites[si].sigmas.len();
            sites[si].coeffs[r * ns + k] = v;
            objective += match method {
                Method::L1 => v.abs(),
                Method::Lsq => v * v,
            };
        }
    }
    if method == Method::Lsq {
        objective = objective.sqrt();
    }
    Ok(ReconstructionParams { method, range: sys.range.clone(), sites, objective, duality_gap: gap, max_residual: max_res })
}

pub fn solve_l1(sys: &ConstraintSystem) -> Result<ReconstructionParams> {
    solve(sys, Method::L1)
}

pub fn solve_lsq(sys: &ConstraintSystem) -> Result<ReconstructionParams> {
    solve(sys, Method::Lsq)
}

pub fn solve_params(sys: &ConstraintSystem, method: Method) -> Result<ReconstructionParams> {
    solve(sys, method)
}

/// Interface site energy `V((Σ_ς C_{ρ,ς} D_ς y)_ρ)`; writes `∂V^i/∂(D_ς y)`
/// into `grad`.
pub fn interface_energy(
    eam: &EamParams,
    site: &SiteParams,
    dy: &[Vector2<f64>],
    grad: &mut [Vector2<f64>],
) -> Result<f64> {
    let ns = site.sigmas.len();
    if dy.len() != ns || grad.len() != ns {
        return Err(Error::Mesh(format!("interface stencil has {} entries, expected {}", dy.len(), ns)));
    }
    let nr = site.coeffs.len() / ns.max(1);
    let mut g = vec![Vector2::zeros(); nr];
    for (r, gr) in g.iter_mut().enumerate() {
        let row = &site.coeffs[r * ns..(r + 1) * ns];
        for (c, d) in row.iter().zip(dy) {
            if *c != 0.0 {
                *gr += d * *c;
            }
        }
    }
    let mut dv = vec![Vector2::zeros(); nr];
    let v = eam.site_gradient(&g, &mut dv)?;
    grad.iter_mut().for_each(|x| *x = Vector2::zeros());
    for (r, d) in dv.iter().enumerate() {
        let row = &site.coeffs[r * ns..(r + 1) * ns];
        for (c, gs) in row.iter().zip(grad.iter_mut()) {
            if *c != 0.0 {
                *gs += d * *c;
            }
        }
    }
    Ok(v)
}

/// `κ Σ_j |y(ℓ+a_j) − 2y(ℓ) + y(ℓ−a_j)|²` over three independent
/// nearest-neighbour directions. `plus[j]`, `minus[j]` are `y(ℓ ± a_j)`.
/// Returns the energy and the gradients with respect to `y(ℓ)`, `plus`, `minus`.
pub fn stabilization(
    center: Vector2<f64>,
    plus: &[Vector2<f64>; 3],
    minus: &[Vector2<f64>; 3],
    kappa: f64,
) -> (f64, Vector2<f64>, [Vector2<f64>; 3], [Vector2<f64>; 3]) {
    let mut e = 0.0;
    let mut gc = Vector2::zeros();
    let mut gp = [Vector2::zeros(); 3];
    let mut gm = [Vector2::zeros(); 3];
    for j in 0..3 {
        let s = plus[j] - center * 2.0 + minus[j];
        e += kappa * s.norm_squared();
        gp[j] = s * (2.0 * kappa);
        gm[j] = s * (2.0 * kappa);
        gc -= s * (4.0 * kappa);
    }
    (e, gc, gp, gm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Crystal;
    use crate::mesh::{build_ac_mesh, MeshParams};

    fn mesh(reflection: bool, r_ai: i64) -> AcMesh {
        let c = Crystal::triangular(0);
        build_ac_mesh(&c, &MeshParams { r_ai, radius: 24, grading: 1.0, macro_size: 8, reflection }).unwrap()
    }

    #[test]
    fn empty_interface() {
        let m = AcMesh::atomistic(&Crystal::triangular(0), 6).unwrap();
        let sys = assemble_constraints(&m).unwrap();
        assert_eq!(sys.unknowns(), 0);
        assert_eq!(sys.energy_rows(), 0);
    }

    #[test]
    fn row_audit() {
        let m = mesh(true, 6);
        let sys = assemble_constraints(&m).unwrap();
        let n_iface = m.interface_vertices().len();
        assert_eq!(sys.energy_rows(), n_iface * 2 * 18);
    }

    #[test]
    fn l1_and_lsq_feasible() {
        for reflection in [true, false] {
            let m = mesh(reflection, 5);
            let sys = assemble_constraints(&m).unwrap();
            let l1 = solve_l1(&sys).unwrap();
            let l2 = solve_lsq(&sys).unwrap();
            assert!(l1.max_residual <= 1e-9 && l2.max_residual <= 1e-9);
            assert!(l1.l1_norm() <= l2.l1_norm() + 1e-8);
            assert!(l2.l2_norm() <= l1.l2_norm() + 1e-8);
            assert!(l1.duality_gap <= 1e-8);
        }
    }

    #[test]
    fn defect_near_interface_is_feasible() {
        // vacancies two layers inside the interface used to leave spurious
        // right-hand sides in the force rows
        for k in [1, 2, 11] {
            let c = Crystal::triangular(k);
            for reflection in [true, false] {
                let m = build_ac_mesh(&c, &MeshParams { r_ai: 4, radius: 24, grading: 1.0, macro_size: 8, reflection }).unwrap();
                let sys = assemble_constraints(&m).unwrap();
                let l1 = solve_l1(&sys).unwrap();
                assert!(l1.max_residual <= 1e-9 && l1.duality_gap <= 1e-8);
            }
        }
    }

    #[test]
    fn min_norm_matches_pseudo_inverse() {
        use nalgebra::DMatrix;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // rank 4 system with 7 rows (three redundant) and 12 unknowns
        let f = DMatrix::<f64>::from_fn(7, 4, |_, _| rng.random_range(-1.0..1.0));
        let g = DMatrix::<f64>::from_fn(4, 12, |_, _| rng.random_range(-1.0..1.0));
        let dense = &f * &g;
        let b = &dense * DMatrix::<f64>::from_fn(12, 1, |_, _| rng.random_range(-1.0..1.0));
        let mut a = SparseCols::new(7);
        for j in 0..12 {
            a.cols.push((0..7).map(|i| (i, dense[(i, j)])).collect());
        }
        let x = min_norm_solve(&a, b.as_slice()).unwrap();
        let oracle = dense.clone().pseudo_inverse(1e-10).unwrap() * &b;
        for j in 0..12 {
            assert!((x[j] - oracle[j]).abs() < 1e-9, "{} {}", x[j], oracle[j]);
        }
    }
}
