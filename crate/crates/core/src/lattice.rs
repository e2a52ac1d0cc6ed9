//! Triangular Bravais lattice with vacancy-segment defects.
//!
//! Sites are addressed by integer coordinates `(m, n)`; the physical position
//! of a site is `A·(m, n)`. Neighbour lookup and all combinatorial geometry
//! work on the integer coordinates, so no floating point search is needed.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticePoint {
    pub m: i64,
    pub n: i64,
}

impl LatticePoint {
    pub const ZERO: LatticePoint = LatticePoint { m: 0, n: 0 };

    pub const fn new(m: i64, n: i64) -> Self {
        LatticePoint { m, n }
    }

    /// Graph distance to the origin on the triangular lattice.
    pub fn hex_norm(self) -> i64 {
        self.m.abs().max(self.n.abs()).max((self.m + self.n).abs())
    }

    pub fn cross(self, other: LatticePoint) -> i64 {
        self.m * other.n - self.n * other.m
    }

    pub fn is_zero(self) -> bool {
        self.m == 0 && self.n == 0
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.m, self.n)
    }
}

impl Add for LatticePoint {
    type Output = LatticePoint;
    fn add(self, o: LatticePoint) -> LatticePoint {
        LatticePoint::new(self.m + o.m, self.n + o.n)
    }
}

impl Sub for LatticePoint {
    type Output = LatticePoint;
    fn sub(self, o: LatticePoint) -> LatticePoint {
        LatticePoint::new(self.m - o.m, self.n - o.n)
    }
}

impl Neg for LatticePoint {
    type Output = LatticePoint;
    fn neg(self) -> LatticePoint {
        LatticePoint::new(-self.m, -self.n)
    }
}

impl Mul<i64> for LatticePoint {
    type Output = LatticePoint;
    fn mul(self, k: i64) -> LatticePoint {
        LatticePoint::new(self.m * k, self.n * k)
    }
}

/// Nearest-neighbour directions `a_1..a_6` in lattice coordinates, ordered by
/// clockwise rotation through π/3.
pub const NN: [LatticePoint; 6] = [
    LatticePoint::new(1, 0),
    LatticePoint::new(1, -1),
    LatticePoint::new(0, -1),
    LatticePoint::new(-1, 0),
    LatticePoint::new(-1, 1),
    LatticePoint::new(0, 1),
];

/// The triangular lattice basis `A = [[1, 1/2], [0, √3/2]]`.
pub fn triangular_basis() -> Matrix2<f64> {
    Matrix2::new(1.0, 0.5, 0.0, 3f64.sqrt() / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BondKind {
    TypeI,
    TypeII,
}

/// A lattice vector written as `α a_i + β a_{i+1}` with `α ≥ 1`, `β ≥ 0`.
///
/// Every nonzero lattice vector has exactly one such representation; the
/// half-open sector convention (`α ≥ 1`) removes the ambiguity on the rays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BondVector {
    offset: LatticePoint,
    dir: u8,
    alpha: u32,
    beta: u32,
}

impl BondVector {
    pub fn from_offset(offset: LatticePoint) -> Result<Self> {
        if offset.is_zero() {
            return Err(Error::ZeroBond);
        }
        for i in 0..6 {
            let (ai, aj) = (NN[i], NN[(i + 1) % 6]);
            let det = ai.cross(aj);
            let alpha = offset.cross(aj) / det;
            let beta = ai.cross(offset) / det;
            if alpha >= 1 && beta >= 0 {
                return Ok(BondVector {
                    offset,
                    dir: i as u8 + 1,
                    alpha: alpha as u32,
                    beta: beta as u32,
                });
            }
        }
        unreachable!("the six sectors cover every nonzero lattice vector")
    }

    /// Builds `α a_dir + β a_{dir+1}`; `dir` is 1-based.
    pub fn from_parts(dir: usize, alpha: u32, beta: u32) -> Result<Self> {
        if !(1..=6).contains(&dir) {
            return Err(Error::InvalidConfig(format!("bond direction {dir} not in 1..=6")));
        }
        let offset = NN[dir - 1] * alpha as i64 + NN[dir % 6] * beta as i64;
        Self::from_offset(offset)
    }

    pub fn offset(&self) -> LatticePoint {
        self.offset
    }

    pub fn dir(&self) -> usize {
        self.dir as usize
    }

    pub fn alpha(&self) -> u32 {
        self.alpha
    }

    pub fn beta(&self) -> u32 {
        self.beta
    }

    pub fn kind(&self) -> BondKind {
        classify_bond(self)
    }

    pub fn neg(&self) -> BondVector {
        BondVector::from_offset(-self.offset).expect("nonzero")
    }
}

pub fn classify_bond(rho: &BondVector) -> BondKind {
    if rho.beta == 0 {
        BondKind::TypeI
    } else {
        BondKind::TypeII
    }
}

#[derive(Clone, Debug)]
pub struct LatticeSpec {
    pub basis: Matrix2<f64>,
    pub cutoff: f64,
    pub defect_count: usize,
    pub radius: f64,
}

impl LatticeSpec {
    pub fn triangular(defect_count: usize, radius: f64) -> Self {
        LatticeSpec { basis: triangular_basis(), cutoff: 2.0, defect_count, radius }
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis.determinant().abs() <= 1e-12 {
            return Err(Error::InvalidConfig("lattice basis is singular".into()));
        }
        if !(self.cutoff >= 1.0) {
            return Err(Error::InvalidConfig(format!("cutoff {} must be at least 1", self.cutoff)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidConfig(format!("radius {} must be positive", self.radius)));
        }
        Ok(())
    }
}

/// Vacancy segment `Λ_k^def` on the `e_1` axis.
pub fn defect_set(k: usize) -> Vec<LatticePoint> {
    let k = k as i64;
    let (lo, hi) = if k % 2 == 0 { (-k / 2, k / 2 - 1) } else { (-(k - 1) / 2, (k - 1) / 2) };
    (lo..=hi).map(|m| LatticePoint::new(m, 0)).collect()
}

/// The infinite defected crystal: basis, cutoff, vacancies and the
/// homogeneous interaction range. Finite pieces of it are [`Lattice`]s and
/// coupled meshes.
#[derive(Clone, Debug)]
pub struct Crystal {
    basis: Matrix2<f64>,
    det: f64,
    cutoff: f64,
    defects: Vec<LatticePoint>,
    defect_lookup: HashSet<LatticePoint>,
    range: Vec<BondVector>,
    range_cart: Vec<Vector2<f64>>,
    reach: i64,
}

impl Crystal {
    pub fn new(basis: Matrix2<f64>, cutoff: f64, defect_count: usize) -> Result<Self> {
        LatticeSpec { basis, cutoff, defect_count, radius: 1.0 }.validate()?;
        let inv = basis.try_inverse().ok_or_else(|| Error::InvalidConfig("singular basis".into()))?;
        let bound = (cutoff * inv.norm()).ceil() as i64 + 1;
        let mut range = Vec::new();
        for m in -bound..=bound {
            for n in -bound..=bound {
                let p = LatticePoint::new(m, n);
                if p.is_zero() {
                    continue;
                }
                let r = (basis * Vector2::new(m as f64, n as f64)).norm();
                if r <= cutoff + 1e-12 {
                    range.push((r, BondVector::from_offset(p)?));
                }
            }
        }
        range.sort_by(|a, b| {
            let ka = ((a.0 * 1e9).round() as i64, a.1.dir, a.1.alpha);
            let kb = ((b.0 * 1e9).round() as i64, b.1.dir, b.1.alpha);
            ka.cmp(&kb)
        });
        let range: Vec<BondVector> = range.into_iter().map(|(_, b)| b).collect();
        let range_cart = range
            .iter()
            .map(|b| basis * Vector2::new(b.offset.m as f64, b.offset.n as f64))
            .collect();
        let reach = range.iter().map(|b| b.offset.hex_norm()).max().unwrap_or(0);
        let defects = defect_set(defect_count);
        Ok(Crystal {
            basis,
            det: basis.determinant().abs(),
            cutoff,
            defect_lookup: defects.iter().copied().collect(),
            defects,
            range,
            range_cart,
            reach,
        })
    }

    pub fn triangular(defect_count: usize) -> Self {
        Self::new(triangular_basis(), 2.0, defect_count).expect("valid default lattice")
    }

    pub fn basis(&self) -> &Matrix2<f64> {
        &self.basis
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn position(&self, p: LatticePoint) -> Vector2<f64> {
        self.basis * Vector2::new(p.m as f64, p.n as f64)
    }

    pub fn defects(&self) -> &[LatticePoint] {
        &self.defects
    }

    pub fn is_defect(&self, p: LatticePoint) -> bool {
        self.defect_lookup.contains(&p)
    }

    /// Homogeneous interaction range; the first six entries are `a_1..a_6`.
    pub fn range(&self) -> &[BondVector] {
        &self.range
    }

    pub fn range_cart(&self) -> &[Vector2<f64>] {
        &self.range_cart
    }

    /// Largest graph distance spanned by a bond of the range.
    pub fn reach(&self) -> i64 {
        self.reach
    }

    pub fn nn_dirs(&self) -> [Vector2<f64>; 6] {
        NN.map(|a| self.position(a))
    }

    /// Layer index of `p`: graph distance to the vacancy set, or to the
    /// origin for a defect-free crystal.
    pub fn defect_distance(&self, p: LatticePoint) -> i64 {
        if self.defects.is_empty() {
            return p.hex_norm();
        }
        self.defects.iter().map(|&d| (p - d).hex_norm()).min().unwrap()
    }

    /// Membership in the defect core, Euclidean distance at most 2 from a vacancy.
    pub fn in_core(&self, p: LatticePoint) -> bool {
        let x = self.position(p);
        self.defects.iter().any(|&d| (x - self.position(d)).norm() <= 2.0 + 1e-12)
    }

    pub fn defect_centroid(&self) -> Vector2<f64> {
        if self.defects.is_empty() {
            return Vector2::zeros();
        }
        let s: Vector2<f64> = self.defects.iter().map(|&d| self.position(d)).sum();
        s / self.defects.len() as f64
    }
}

/// A finite piece of the crystal: all sites in the hexagon of graph radius
/// `R`, vacancies removed.
#[derive(Clone, Debug)]
pub struct Lattice {
    crystal: Crystal,
    radius: f64,
    sites: Vec<LatticePoint>,
    index: HashMap<LatticePoint, usize>,
}

pub fn build_lattice(spec: &LatticeSpec) -> Result<Lattice> {
    spec.validate()?;
    let crystal = Crystal::new(spec.basis, spec.cutoff, spec.defect_count)?;
    Ok(Lattice::from_crystal(crystal, spec.radius))
}

impl Lattice {
    pub fn from_crystal(crystal: Crystal, radius: f64) -> Lattice {
        let r = radius.floor() as i64;
        let mut sites = Vec::new();
        for n in -r..=r {
            for m in -r..=r {
                let p = LatticePoint::new(m, n);
                if p.hex_norm() <= r && !crystal.is_defect(p) {
                    sites.push(p);
                }
            }
        }
        let index = sites.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Lattice { crystal, radius, sites, index }
    }

    pub fn crystal(&self) -> &Crystal {
        &self.crystal
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn sites(&self) -> &[LatticePoint] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site_index(&self, p: LatticePoint) -> Option<usize> {
        self.index.get(&p).copied()
    }

    pub fn contains(&self, p: LatticePoint) -> bool {
        self.index.contains_key(&p)
    }

    pub fn position(&self, id: usize) -> Vector2<f64> {
        self.crystal.position(self.sites[id])
    }

    pub fn defect_sites(&self) -> &[LatticePoint] {
        self.crystal.defects()
    }

    pub fn nn_dirs(&self) -> [Vector2<f64>; 6] {
        self.crystal.nn_dirs()
    }

    pub fn interaction_range(&self, id: usize) -> Result<Vec<BondVector>> {
        let p = *self.sites.get(id).ok_or(Error::UnknownSite(id))?;
        Ok(self
            .crystal
            .range()
            .iter()
            .filter(|b| self.contains(p + b.offset()))
            .copied()
            .collect())
    }

    pub fn neighborhood(&self, id: usize) -> Result<Vec<usize>> {
        let p = *self.sites.get(id).ok_or(Error::UnknownSite(id))?;
        Ok(self
            .crystal
            .range()
            .iter()
            .filter_map(|b| self.site_index(p + b.offset()))
            .collect())
    }

    /// Writes `id m n x y is_interface is_core` rows.
    pub fn dump<W: Write>(&self, mut w: W, is_interface: impl Fn(LatticePoint) -> bool) -> Result<()> {
        writeln!(w, "id m n x y is_interface is_core")?;
        for (i, &p) in self.sites.iter().enumerate() {
            let x = self.crystal.position(p);
            writeln!(
                w,
                "{} {} {} {:.17e} {:.17e} {} {}",
                i,
                p.m,
                p.n,
                x[0],
                x[1],
                is_interface(p) as u8,
                self.crystal.in_core(p) as u8
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_dirs_rotate_clockwise() {
        let c = Crystal::triangular(0);
        let dirs = c.nn_dirs();
        let (s, co) = (-(std::f64::consts::PI / 3.0)).sin_cos();
        let rot = Matrix2::new(co, -s, s, co);
        for j in 0..6 {
            assert!((rot * dirs[j] - dirs[(j + 1) % 6]).norm() < 1e-14);
            assert!((dirs[j].norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn defect_sets() {
        assert_eq!(defect_set(2), vec![LatticePoint::new(-1, 0), LatticePoint::new(0, 0)]);
        assert_eq!(defect_set(1), vec![LatticePoint::ZERO]);
        assert!(defect_set(0).is_empty());
        assert_eq!(defect_set(11).len(), 11);
        assert_eq!(defect_set(11)[0], LatticePoint::new(-5, 0));
    }

    #[test]
    fn range_sizes() {
        assert_eq!(Crystal::triangular(0).range().len(), 18);
        let c = Crystal::new(triangular_basis(), 1.0, 0).unwrap();
        assert_eq!(c.range().len(), 6);
        assert_eq!(Crystal::triangular(0).reach(), 2);
    }

    #[test]
    fn classify_examples() {
        let two_a3 = BondVector::from_parts(3, 2, 0).unwrap();
        assert_eq!(two_a3.kind(), BondKind::TypeI);
        let b = BondVector::from_offset(NN[0] + NN[1] * 2).unwrap();
        assert_eq!(b.kind(), BondKind::TypeII);
        assert_eq!((b.dir(), b.alpha(), b.beta()), (1, 1, 2));
        assert_eq!(BondVector::from_offset(NN[4]).unwrap().kind(), BondKind::TypeI);
        assert!(matches!(BondVector::from_offset(LatticePoint::ZERO), Err(Error::ZeroBond)));
    }

    #[test]
    fn vacancy_neighbour_range() {
        let lat = build_lattice(&LatticeSpec::triangular(1, 8.0)).unwrap();
        let id = lat.site_index(LatticePoint::new(1, 0)).unwrap();
        assert_eq!(lat.interaction_range(id).unwrap().len(), 17);
        let far = lat.site_index(LatticePoint::new(4, 1)).unwrap();
        assert_eq!(lat.interaction_range(far).unwrap().len(), 18);
        assert!(lat.interaction_range(usize::MAX).is_err());
    }

    #[test]
    fn hexagon_site_count() {
        // 3R(R+1)+1 sites in a hexagon of graph radius R
        let lat = build_lattice(&LatticeSpec::triangular(0, 5.0)).unwrap();
        assert_eq!(lat.len(), 91);
        let lat2 = build_lattice(&LatticeSpec::triangular(2, 5.0)).unwrap();
        assert_eq!(lat2.len(), 89);
        assert!(!lat2.contains(LatticePoint::new(-1, 0)));
    }

    #[test]
    fn singular_basis_rejected() {
        let spec = LatticeSpec { basis: Matrix2::new(1.0, 2.0, 2.0, 4.0), cutoff: 2.0, defect_count: 0, radius: 4.0 };
        assert!(build_lattice(&spec).is_err());
    }
}
