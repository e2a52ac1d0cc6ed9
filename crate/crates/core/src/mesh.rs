//! Coupled atomistic/continuum triangulation.
//!
//! The mesh is the leaf set of a forest of lattice-aligned equilateral cells
//! (side a power of two, corners on lattice sites). Leaves of side one are
//! the micro-triangles of the lattice. Refinement splits a cell into four;
//! a 2:1 balance rule plus green bisection of cells with one hanging edge
//! midpoint keep the triangulation conforming. Every mesh vertex is a
//! lattice point and refinement never moves a vertex.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{self, Tri};
use crate::lattice::{Crystal, LatticePoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub side: i64,
    pub up: bool,
    pub anchor: LatticePoint,
}

impl Cell {
    pub fn micro(up: bool, anchor: LatticePoint) -> Cell {
        Cell { side: 1, up, anchor }
    }

    /// Corners in counter-clockwise order.
    pub fn vertices(&self) -> Tri {
        let (a, s) = (self.anchor, self.side);
        if self.up {
            [a, a + LatticePoint::new(s, 0), a + LatticePoint::new(0, s)]
        } else {
            [a, a - LatticePoint::new(s, 0), a - LatticePoint::new(0, s)]
        }
    }

    /// Midpoint of the edge opposite corner `i`.
    pub fn midpoint(&self, i: usize) -> LatticePoint {
        let v = self.vertices();
        let (p, q) = (v[(i + 1) % 3], v[(i + 2) % 3]);
        LatticePoint::new((p.m + q.m) / 2, (p.n + q.n) / 2)
    }

    fn quarter_points(&self) -> [LatticePoint; 6] {
        let v = self.vertices();
        let mut out = [LatticePoint::ZERO; 6];
        for k in 0..3 {
            let (p, q) = (v[k], v[(k + 1) % 3]);
            let e = q - p;
            let step = LatticePoint::new(e.m / 4, e.n / 4);
            out[2 * k] = p + step;
            out[2 * k + 1] = p + step * 3;
        }
        out
    }

    pub fn children(&self) -> [Cell; 4] {
        let h = self.side / 2;
        let a = self.anchor;
        if self.up {
            [
                Cell { side: h, up: true, anchor: a },
                Cell { side: h, up: true, anchor: a + LatticePoint::new(h, 0) },
                Cell { side: h, up: true, anchor: a + LatticePoint::new(0, h) },
                Cell { side: h, up: false, anchor: a + LatticePoint::new(h, h) },
            ]
        } else {
            [
                Cell { side: h, up: false, anchor: a },
                Cell { side: h, up: false, anchor: a - LatticePoint::new(h, 0) },
                Cell { side: h, up: false, anchor: a - LatticePoint::new(0, h) },
                Cell { side: h, up: true, anchor: a - LatticePoint::new(h, h) },
            ]
        }
    }

    pub fn contains(&self, p: LatticePoint) -> bool {
        let q = if self.up { p - self.anchor } else { self.anchor - p };
        q.m >= 0 && q.n >= 0 && q.m + q.n <= self.side
    }

    /// The `side²` micro-triangles tiling this cell.
    pub fn micro_cells(&self) -> Vec<Cell> {
        let s = self.side;
        let a = self.anchor;
        let mut out = Vec::with_capacity((s * s) as usize);
        let sign = if self.up { 1 } else { -1 };
        for i in 0..s {
            for j in 0..s - i {
                out.push(Cell::micro(self.up, a + LatticePoint::new(i, j) * sign));
            }
        }
        for i in 1..=s {
            for j in 1..=s - i {
                out.push(Cell::micro(!self.up, a + LatticePoint::new(i, j) * sign));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Atomistic,
    Interface,
    Continuum,
}

impl Tag {
    pub fn name(&self) -> &'static str {
        match self {
            Tag::Atomistic => "atomistic",
            Tag::Interface => "interface",
            Tag::Continuum => "continuum",
        }
    }

    pub fn is_atomistic_region(&self) -> bool {
        !matches!(self, Tag::Continuum)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VertexKind {
    /// Site of `Λ^a`.
    Atomistic,
    /// Site of `Λ^i`.
    Interface,
    /// Removed site inside the atomistic region; clamped and inert.
    Vacancy,
    /// Finite element node in the continuum region.
    Continuum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    /// Atomistic sites up to layer `r_ai`, the outer `width` layers of which
    /// form the interface. `reflection` selects the reduced variant whose
    /// interface stencils only use sites of `Λ^{a,i}`.
    Coupled { r_ai: i64, reflection: bool },
    /// Whole domain atomistic, clamped halo outside.
    Atomistic,
}

#[derive(Clone, Copy, Debug)]
pub struct Element {
    pub v: [usize; 3],
    pub tag: Tag,
    pub cell: Cell,
    /// For green halves: the corner of `cell` the bisector starts from and
    /// which half (0: towards the next corner, 1: towards the previous).
    pub green: Option<(u8, u8)>,
    pub area: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Face {
    pub v: [usize; 2],
    pub elems: [usize; 2],
}

impl Face {
    pub const NONE: usize = usize::MAX;

    pub fn is_boundary(&self) -> bool {
        self.elems[1] == Face::NONE
    }
}

#[derive(Clone, Debug)]
pub struct EffectiveVolumes {
    /// Per vertex: 1 on `Λ^a` and vacancies, `ω_ℓ` on `Λ^i`, 0 elsewhere.
    pub omega_site: Vec<f64>,
    /// Per element, in area units.
    pub omega_elem: Vec<f64>,
}

/// Point evaluation functional: value at a lattice point as a combination of
/// nodal values. Points outside the domain have no entries (`u = 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub idx: [usize; 3],
    pub w: [f64; 3],
    pub len: usize,
}

impl Sample {
    pub const EMPTY: Sample = Sample { idx: [0; 3], w: [0.0; 3], len: 0 };

    pub fn node(i: usize) -> Sample {
        Sample { idx: [i, 0, 0], w: [1.0, 0.0, 0.0], len: 1 }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |k| (self.idx[k], self.w[k]))
    }

    pub fn eval(&self, u: &[Vector2<f64>]) -> Vector2<f64> {
        let mut s = Vector2::zeros();
        for k in 0..self.len {
            s += u[self.idx[k]] * self.w[k];
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct MeshParams {
    pub r_ai: i64,
    pub radius: i64,
    pub grading: f64,
    pub macro_size: i64,
    pub reflection: bool,
}

#[derive(Clone, Debug)]
pub struct AcMesh {
    crystal: Crystal,
    region: Region,
    radius: i64,
    macro_size: i64,
    grading: f64,
    leaves: BTreeSet<Cell>,
    internal: HashSet<Cell>,
    points: HashSet<LatticePoint>,
    dist_cache: HashMap<LatticePoint, i64>,

    vertices: Vec<LatticePoint>,
    positions: Vec<Vector2<f64>>,
    vertex_index: HashMap<LatticePoint, usize>,
    kinds: Vec<VertexKind>,
    free: Vec<bool>,
    elements: Vec<Element>,
    grads: Vec<[Vector2<f64>; 3]>,
    faces: Vec<Face>,
    elem_faces: Vec<[usize; 3]>,
    leaf_elems: HashMap<Cell, [usize; 2]>,
    volumes: EffectiveVolumes,
}

/// Outcome of a refinement request.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RefineReport {
    pub refined: usize,
    /// Marked continuum micro-triangles, which cannot be split further.
    pub unrefinable: Vec<usize>,
}

pub fn build_ac_mesh(crystal: &Crystal, params: &MeshParams) -> Result<AcMesh> {
    AcMesh::coupled(crystal, params)
}

impl AcMesh {
    pub fn coupled(crystal: &Crystal, p: &MeshParams) -> Result<AcMesh> {
        if p.macro_size < 1 || (p.macro_size & (p.macro_size - 1)) != 0 {
            return Err(Error::InvalidConfig(format!("macro cell size {} is not a power of two", p.macro_size)));
        }
        if p.radius <= 0 || p.radius % p.macro_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "domain radius {} must be a positive multiple of the macro cell size {}",
                p.radius, p.macro_size
            )));
        }
        if p.r_ai >= p.radius {
            return Self::atomistic(crystal, p.radius);
        }
        let width = crystal.reach();
        let core = crystal
            .defects()
            .iter()
            .flat_map(|&d| {
                let r = 3i64;
                (-r..=r).flat_map(move |i| (-r..=r).map(move |j| d + LatticePoint::new(i, j)))
            })
            .filter(|&q| crystal.in_core(q))
            .map(|q| crystal.defect_distance(q))
            .max()
            .unwrap_or(0);
        if p.r_ai - width < core.max(0) {
            return Err(Error::InvalidConfig(format!(
                "atomistic radius {} cannot hold the defect core ({} layers) plus a {}-layer interface",
                p.r_ai, core, width
            )));
        }
        let mut mesh = AcMesh::empty(crystal, Region::Coupled { r_ai: p.r_ai, reflection: p.reflection }, p);
        mesh.check_fine_region_fits()?;
        for c in mesh.macro_cells(p.radius) {
            mesh.add_root(c);
        }
        mesh.close();
        mesh.rebuild();
        Ok(mesh)
    }

    /// Fully atomistic micro-mesh of the hexagon of graph radius `radius`.
    pub fn atomistic(crystal: &Crystal, radius: i64) -> Result<AcMesh> {
        if radius < 1 {
            return Err(Error::InvalidConfig(format!("domain radius {radius} must be positive")));
        }
        let params = MeshParams { r_ai: radius, radius, grading: 0.0, macro_size: 1, reflection: true };
        let mut mesh = AcMesh::empty(crystal, Region::Atomistic, &params);
        for c in mesh.macro_cells(radius) {
            mesh.add_root(c);
        }
        mesh.rebuild();
        Ok(mesh)
    }

    fn empty(crystal: &Crystal, region: Region, p: &MeshParams) -> AcMesh {
        AcMesh {
            crystal: crystal.clone(),
            region,
            radius: p.radius,
            macro_size: p.macro_size,
            grading: p.grading,
            leaves: BTreeSet::new(),
            internal: HashSet::new(),
            points: HashSet::new(),
            dist_cache: HashMap::new(),
            vertices: Vec::new(),
            positions: Vec::new(),
            vertex_index: HashMap::new(),
            kinds: Vec::new(),
            free: Vec::new(),
            elements: Vec::new(),
            grads: Vec::new(),
            faces: Vec::new(),
            elem_faces: Vec::new(),
            leaf_elems: HashMap::new(),
            volumes: EffectiveVolumes { omega_site: Vec::new(), omega_elem: Vec::new() },
        }
    }

    fn macro_cells(&self, radius: i64) -> Vec<Cell> {
        let s = self.macro_size;
        let k = radius / s + 1;
        let mut out = Vec::new();
        for i in -k..=k {
            for j in -k..=k {
                for up in [true, false] {
                    let c = Cell { side: s, up, anchor: LatticePoint::new(i * s, j * s) };
                    if c.vertices().iter().all(|v| v.hex_norm() <= radius) {
                        out.push(c);
                    }
                }
            }
        }
        out
    }

    fn add_root(&mut self, c: Cell) {
        for v in c.vertices() {
            self.points.insert(v);
        }
        self.leaves.insert(c);
    }

    fn check_fine_region_fits(&self) -> Result<()> {
        let reach = self.fine_radius() + self.crystal.reach();
        let span = reach + self.crystal.defects().iter().map(|d| d.hex_norm()).max().unwrap_or(0);
        for m in -span..=span {
            for n in -span..=span {
                let q = LatticePoint::new(m, n);
                if self.crystal.defect_distance(q) <= reach && q.hex_norm() >= self.radius {
                    return Err(Error::InvalidConfig(format!(
                        "domain radius {} too small for atomistic radius {}",
                        self.radius,
                        self.r_ai()
                    )));
                }
            }
        }
        Ok(())
    }

    fn dist(&mut self, p: LatticePoint) -> i64 {
        if let Some(&d) = self.dist_cache.get(&p) {
            return d;
        }
        let d = self.crystal.defect_distance(p);
        self.dist_cache.insert(p, d);
        d
    }

    /// Layer radius up to which the mesh is the micro-triangulation.
    pub fn fine_radius(&self) -> i64 {
        match self.region {
            Region::Coupled { r_ai, reflection: true } => r_ai,
            Region::Coupled { r_ai, reflection: false } => r_ai + self.crystal.reach(),
            Region::Atomistic => i64::MAX / 4,
        }
    }

    fn split(&mut self, c: Cell) {
        self.leaves.remove(&c);
        self.internal.insert(c);
        for i in 0..3 {
            self.points.insert(c.midpoint(i));
        }
        for ch in c.children() {
            self.leaves.insert(ch);
        }
    }

    fn must_split(&mut self, c: &Cell) -> bool {
        if c.side == 1 {
            return false;
        }
        let hanging = (0..3).filter(|&i| self.points.contains(&c.midpoint(i))).count();
        if hanging >= 2 {
            return true;
        }
        if c.side >= 4 && c.quarter_points().iter().any(|q| self.points.contains(q)) {
            return true;
        }
        let fine = self.fine_radius();
        let corner = c.vertices().iter().map(|&v| self.dist(v)).min().unwrap();
        if corner - c.side <= fine {
            let cells = c.micro_cells();
            let hit = cells.iter().any(|t| t.vertices().iter().all(|&v| self.dist(v) <= fine));
            if hit {
                return true;
            }
        }
        self.grading > 0.0 && c.side as f64 > self.grading * (corner - fine).max(0) as f64
    }

    fn close(&mut self) {
        loop {
            let leaves: Vec<Cell> = self.leaves.iter().copied().collect();
            let mut todo = Vec::new();
            for c in &leaves {
                if self.must_split(c) {
                    todo.push(*c);
                }
            }
            if todo.is_empty() {
                break;
            }
            for c in todo {
                if self.leaves.contains(&c) {
                    self.split(c);
                }
            }
        }
    }

    fn vertex_kind(&mut self, p: LatticePoint) -> VertexKind {
        match self.region {
            Region::Atomistic => {
                if self.crystal.is_defect(p) {
                    VertexKind::Vacancy
                } else {
                    VertexKind::Atomistic
                }
            }
            Region::Coupled { r_ai, .. } => {
                let d = self.dist(p);
                if self.crystal.is_defect(p) {
                    VertexKind::Vacancy
                } else if d <= r_ai - self.crystal.reach() {
                    VertexKind::Atomistic
                } else if d <= r_ai {
                    VertexKind::Interface
                } else {
                    VertexKind::Continuum
                }
            }
        }
    }

    fn rebuild(&mut self) {
        // conforming elements from the leaf set
        let mut raw: Vec<(Tri, Cell, Option<(u8, u8)>)> = Vec::with_capacity(self.leaves.len() + 16);
        for c in &self.leaves {
            let v = c.vertices();
            let hanging = if c.side > 1 { (0..3).find(|&i| self.points.contains(&c.midpoint(i))) } else { None };
            match hanging {
                None => raw.push((v, *c, None)),
                Some(i) => {
                    let m = c.midpoint(i);
                    raw.push(([v[i], v[(i + 1) % 3], m], *c, Some((i as u8, 0))));
                    raw.push(([v[i], m, v[(i + 2) % 3]], *c, Some((i as u8, 1))));
                }
            }
        }
        let mut pts: Vec<LatticePoint> = raw.iter().flat_map(|r| r.0).collect();
        pts.sort_by_key(|p| (p.n, p.m));
        pts.dedup();
        self.vertex_index = pts.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        self.positions = pts.iter().map(|&p| self.crystal.position(p)).collect();
        self.kinds = pts.iter().map(|&p| self.vertex_kind(p)).collect();
        self.free = pts
            .iter()
            .zip(&self.kinds)
            .map(|(p, k)| p.hex_norm() < self.radius && *k != VertexKind::Vacancy)
            .collect();
        self.vertices = pts;

        let det = self.crystal.det();
        self.elements.clear();
        self.leaf_elems.clear();
        for (tri, cell, green) in raw {
            let v = tri.map(|p| self.vertex_index[&p]);
            let tag = if cell.side == 1 && tri.iter().all(|&p| self.kinds[self.vertex_index[&p]] != VertexKind::Continuum) {
                if v.iter().any(|&i| self.kinds[i] == VertexKind::Interface) {
                    Tag::Interface
                } else {
                    Tag::Atomistic
                }
            } else {
                Tag::Continuum
            };
            let area = 0.5 * geometry::twice_area(&tri) as f64 * det;
            let id = self.elements.len();
            self.leaf_elems.entry(cell).or_insert([id, Face::NONE])[if green.map_or(false, |g| g.1 == 1) { 1 } else { 0 }] = id;
            self.elements.push(Element { v, tag, cell, green, area });
        }

        self.grads = self
            .elements
            .iter()
            .map(|e| {
                let x = e.v.map(|i| self.positions[i]);
                let m = Matrix2::from_columns(&[x[1] - x[0], x[2] - x[0]]);
                let inv_t = m.try_inverse().expect("non-degenerate element").transpose();
                let g1 = inv_t.column(0).into_owned();
                let g2 = inv_t.column(1).into_owned();
                [-g1 - g2, g1, g2]
            })
            .collect();

        // faces
        let mut map: HashMap<(usize, usize), usize> = HashMap::new();
        self.faces.clear();
        self.elem_faces = vec![[0; 3]; self.elements.len()];
        for (ei, e) in self.elements.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (e.v[(k + 1) % 3], e.v[(k + 2) % 3]);
                let key = (a.min(b), a.max(b));
                let fid = *map.entry(key).or_insert_with(|| {
                    self.faces.push(Face { v: [key.0, key.1], elems: [ei, Face::NONE] });
                    self.faces.len() - 1
                });
                if self.faces[fid].elems[0] != ei {
                    self.faces[fid].elems[1] = ei;
                }
                self.elem_faces[ei][k] = fid;
            }
        }
        self.volumes = self.compute_volumes();
    }

    fn compute_volumes(&self) -> EffectiveVolumes {
        let det = self.crystal.det();
        let reflection = matches!(self.region, Region::Coupled { reflection: true, .. });
        let mut omega_site: Vec<f64> = self
            .kinds
            .iter()
            .map(|k| match k {
                VertexKind::Atomistic | VertexKind::Vacancy => 1.0,
                VertexKind::Interface if !reflection => 1.0,
                _ => 0.0,
            })
            .collect();
        if reflection {
            for e in &self.elements {
                if e.tag.is_atomistic_region() {
                    for &i in &e.v {
                        if self.kinds[i] == VertexKind::Interface {
                            omega_site[i] += e.area / 3.0 / det;
                        }
                    }
                }
            }
        }
        let omega_elem = self
            .elements
            .iter()
            .map(|e| {
                if e.tag.is_atomistic_region() {
                    0.0
                } else if reflection {
                    e.area
                } else {
                    let counted = e.v.iter().filter(|&&i| self.kinds[i] == VertexKind::Interface).count();
                    e.area * (1.0 - counted as f64 / 3.0)
                }
            })
            .collect();
        EffectiveVolumes { omega_site, omega_elem }
    }

    // ---------------------------------------------------------------- queries

    pub fn crystal(&self) -> &Crystal {
        &self.crystal
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn macro_size(&self) -> i64 {
        self.macro_size
    }

    pub fn grading(&self) -> f64 {
        self.grading
    }

    pub fn is_reflection(&self) -> bool {
        !matches!(self.region, Region::Coupled { reflection: false, .. })
    }

    /// Outer layer of `Λ^{a,i}`; the domain radius for a pure atomistic mesh.
    pub fn r_ai(&self) -> i64 {
        match self.region {
            Region::Coupled { r_ai, .. } => r_ai,
            Region::Atomistic => self.radius,
        }
    }

    pub fn vertices(&self) -> &[LatticePoint] {
        &self.vertices
    }

    pub fn positions(&self) -> &[Vector2<f64>] {
        &self.positions
    }

    pub fn vertex_index(&self, p: LatticePoint) -> Option<usize> {
        self.vertex_index.get(&p).copied()
    }

    pub fn kinds(&self) -> &[VertexKind] {
        &self.kinds
    }

    pub fn free(&self) -> &[bool] {
        &self.free
    }

    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    /// Degrees of freedom: two per free vertex.
    pub fn dof(&self) -> usize {
        2 * self.n_free()
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn shape_gradients(&self, e: usize) -> &[Vector2<f64>; 3] {
        &self.grads[e]
    }

    pub fn element_tri(&self, e: usize) -> Tri {
        self.elements[e].v.map(|i| self.vertices[i])
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Face ids of an element; entry `k` is the face opposite corner `k`.
    pub fn element_faces(&self, e: usize) -> &[usize; 3] {
        &self.elem_faces[e]
    }

    pub fn volumes(&self) -> &EffectiveVolumes {
        &self.volumes
    }

    pub fn interface_vertices(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&i| self.kinds[i] == VertexKind::Interface).collect()
    }

    /// Sites carrying a full atomistic site energy. For a pure atomistic mesh
    /// this includes the clamped halo whose stencils reach free sites.
    pub fn atomistic_sites(&self) -> Vec<LatticePoint> {
        match self.region {
            Region::Atomistic => {
                let r = self.radius + self.crystal.reach() - 1;
                let mut out = Vec::new();
                for n in -r..=r {
                    for m in -r..=r {
                        let p = LatticePoint::new(m, n);
                        if p.hex_norm() <= r && !self.crystal.is_defect(p) {
                            out.push(p);
                        }
                    }
                }
                out
            }
            Region::Coupled { .. } => self
                .vertices
                .iter()
                .zip(&self.kinds)
                .filter(|(_, k)| **k == VertexKind::Atomistic)
                .map(|(p, _)| *p)
                .collect(),
        }
    }

    pub fn domain_area(&self) -> f64 {
        // hexagon of graph radius R has 6R² unit triangles
        let r = self.radius as f64;
        6.0 * r * r * 0.5 * self.crystal.det()
    }

    pub fn in_domain(&self, p: LatticePoint) -> bool {
        p.hex_norm() <= self.radius
    }

    /// Layer distance of an element to the interface, `min_v d(v) − R_ai`.
    pub fn interface_distance(&self, e: usize) -> i64 {
        let r_ai = self.r_ai();
        self.elements[e].v.iter().map(|&i| self.crystal.defect_distance(self.vertices[i])).min().unwrap() - r_ai
    }

    fn root_of(&self, p: LatticePoint) -> Option<Cell> {
        let s = self.macro_size;
        let (i, j) = (p.m.div_euclid(s), p.n.div_euclid(s));
        for (di, dj) in [(0, 0), (-1, 0), (0, -1), (-1, -1), (1, 0), (0, 1), (1, 1)] {
            for up in [true, false] {
                let anchor = LatticePoint::new((i + di) * s, (j + dj) * s);
                let c = Cell { side: s, up, anchor };
                if c.contains(p) && (self.leaves.contains(&c) || self.internal.contains(&c)) {
                    return Some(c);
                }
            }
        }
        None
    }

    /// Element containing `p` and the barycentric weights of `p` in it.
    pub fn locate(&self, p: LatticePoint) -> Option<(usize, [f64; 3])> {
        if !self.in_domain(p) {
            return None;
        }
        let mut c = self.root_of(p)?;
        while !self.leaves.contains(&c) {
            c = *c.children().iter().find(|ch| ch.contains(p))?;
        }
        let ids = self.leaf_elems[&c];
        for &e in ids.iter().filter(|&&e| e != Face::NONE) {
            let t = self.element_tri(e);
            if geometry::contains(&t, p) {
                return Some((e, geometry::barycentric(&t, p)));
            }
        }
        None
    }

    pub fn sample(&self, p: LatticePoint) -> Sample {
        if let Some(i) = self.vertex_index(p) {
            return Sample::node(i);
        }
        match self.locate(p) {
            None => Sample::EMPTY,
            Some((e, w)) => {
                let mut s = Sample::EMPTY;
                for k in 0..3 {
                    if w[k] != 0.0 {
                        s.idx[s.len] = self.elements[e].v[k];
                        s.w[s.len] = w[k];
                        s.len += 1;
                    }
                }
                s
            }
        }
    }

    /// Evaluates a nodal field at an arbitrary lattice point (zero outside).
    pub fn eval(&self, u: &[Vector2<f64>], p: LatticePoint) -> Vector2<f64> {
        self.sample(p).eval(u)
    }

    /// Elements covering the micro-triangle `t` (two for a green leaf),
    /// empty outside the mesh.
    pub fn elements_of_micro(&self, t: &Cell) -> Vec<usize> {
        let v = t.vertices();
        let s = self.macro_size;
        let (i, j) = (v[0].m.div_euclid(s), v[0].n.div_euclid(s));
        for di in -1..=1 {
            for dj in -1..=1 {
                for up in [true, false] {
                    let mut c = Cell { side: s, up, anchor: LatticePoint::new((i + di) * s, (j + dj) * s) };
                    if !v.iter().all(|&q| c.contains(q)) || !(self.leaves.contains(&c) || self.internal.contains(&c)) {
                        continue;
                    }
                    while !self.leaves.contains(&c) {
                        match c.children().into_iter().find(|ch| v.iter().all(|&q| ch.contains(q))) {
                            Some(ch) => c = ch,
                            None => return Vec::new(),
                        }
                    }
                    return self.leaf_elems[&c].iter().copied().filter(|&e| e != Face::NONE).collect();
                }
            }
        }
        Vec::new()
    }

    /// Pairs `(element, overlap area)` for the micro-triangles of an element.
    pub fn micro_overlaps(&self, e: usize) -> Vec<(Cell, f64)> {
        let el = &self.elements[e];
        let det = self.crystal.det();
        let cells = el.cell.micro_cells();
        if el.green.is_none() {
            return cells.into_iter().map(|c| (c, 0.5 * det)).collect();
        }
        let tri = self.element_tri(e);
        cells
            .into_iter()
            .filter_map(|c| {
                let a = geometry::lattice_overlap(&c.vertices(), &tri);
                (a > 0.0).then_some((c, a * det))
            })
            .collect()
    }

    // ------------------------------------------------------------ mutations

    /// Refines the marked continuum elements (red split of the owning cell,
    /// green closure). Continuum micro-triangles are reported as
    /// unrefinable and left alone.
    pub fn bisect(&mut self, marked: &[usize]) -> Result<RefineReport> {
        let mut report = RefineReport::default();
        let mut cells = Vec::new();
        for &e in marked {
            let el = self.elements.get(e).ok_or_else(|| Error::Mesh(format!("no element {e}")))?;
            if el.tag != Tag::Continuum {
                return Err(Error::AtomisticRefinement(e));
            }
            if el.cell.side == 1 {
                report.unrefinable.push(e);
            } else {
                cells.push(el.cell);
            }
        }
        cells.sort();
        cells.dedup();
        for c in cells {
            if self.leaves.contains(&c) {
                self.split(c);
                report.refined += 1;
            }
        }
        self.close();
        self.rebuild();
        Ok(report)
    }

    /// Moves the interface outward by `layers` atom layers.
    pub fn expand_interface(&mut self, layers: i64) -> Result<()> {
        if layers <= 0 {
            return Ok(());
        }
        let Region::Coupled { r_ai, reflection } = self.region else {
            return Ok(());
        };
        let old = self.region;
        self.region = Region::Coupled { r_ai: r_ai + layers, reflection };
        if let Err(e) = self.check_fine_region_fits() {
            self.region = old;
            return Err(e);
        }
        self.close();
        self.rebuild();
        Ok(())
    }

    /// Appends one ring of macro cells, growing the radius by the macro size.
    pub fn enlarge(&mut self) {
        let new_radius = self.radius + self.macro_size;
        for c in self.macro_cells(new_radius) {
            if !c.vertices().iter().all(|v| v.hex_norm() <= self.radius) {
                self.add_root(c);
            }
        }
        self.radius = new_radius;
        if matches!(self.region, Region::Atomistic) {
            let leaves: Vec<Cell> = self.leaves.iter().copied().filter(|c| c.side > 1).collect();
            for c in leaves {
                for m in c.micro_cells() {
                    self.leaves.insert(m);
                }
                self.leaves.remove(&c);
                self.internal.insert(c);
            }
        } else {
            self.close();
        }
        self.rebuild();
    }

    // ----------------------------------------------------------------- dumps

    pub fn dump_vertices<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id m n x y free kind")?;
        for (i, p) in self.vertices.iter().enumerate() {
            let x = self.positions[i];
            writeln!(w, "{} {} {} {:.17e} {:.17e} {} {:?}", i, p.m, p.n, x[0], x[1], self.free[i] as u8, self.kinds[i])?;
        }
        Ok(())
    }

    pub fn dump_elements<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "v0 v1 v2 tag")?;
        for e in &self.elements {
            writeln!(w, "{} {} {} {}", e.v[0], e.v[1], e.v[2], e.tag.name())?;
        }
        Ok(())
    }
}

/// All micro-triangles of the hexagon of graph radius `radius`.
#[derive(Clone, Debug)]
pub struct MicroMesh {
    pub radius: i64,
    pub cells: Vec<Cell>,
    index: HashMap<Cell, usize>,
}

impl MicroMesh {
    pub fn new(radius: i64) -> MicroMesh {
        let mut cells = Vec::new();
        for n in -radius..=radius {
            for m in -radius..=radius {
                for up in [true, false] {
                    let c = Cell::micro(up, LatticePoint::new(m, n));
                    if c.vertices().iter().all(|v| v.hex_norm() <= radius) {
                        cells.push(c);
                    }
                }
            }
        }
        let index = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        MicroMesh { radius, cells, index }
    }

    pub fn index(&self, c: &Cell) -> Option<usize> {
        self.index.get(c).copied()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn divacancy_mesh(reflection: bool) -> AcMesh {
        let c = Crystal::triangular(2);
        let p = MeshParams { r_ai: 6, radius: 32, grading: 1.0, macro_size: 8, reflection };
        build_ac_mesh(&c, &p).unwrap()
    }

    #[test]
    fn micro_cells_tile() {
        for up in [true, false] {
            let c = Cell { side: 4, up, anchor: LatticePoint::new(8, -4) };
            let m = c.micro_cells();
            assert_eq!(m.len(), 16);
            for t in &m {
                assert!(t.vertices().iter().all(|&v| c.contains(v)));
            }
            let mut d = m.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 16);
        }
    }

    #[test]
    fn children_tile_parent() {
        for up in [true, false] {
            let c = Cell { side: 4, up, anchor: LatticePoint::new(0, 0) };
            let mut a: Vec<Cell> = c.children().iter().flat_map(|ch| ch.micro_cells()).collect();
            let mut b = c.micro_cells();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conforming_and_area() {
        for reflection in [true, false] {
            let m = divacancy_mesh(reflection);
            let total: f64 = m.elements().iter().map(|e| e.area).sum();
            assert!((total - m.domain_area()).abs() < 1e-10 * total);
            for f in m.faces() {
                if f.is_boundary() {
                    let (p, q) = (m.vertices()[f.v[0]], m.vertices()[f.v[1]]);
                    assert!(p.hex_norm() == m.radius() && q.hex_norm() == m.radius());
                }
            }
            // no vertex lies inside an edge of another element
            for e in 0..m.elements().len() {
                let t = m.element_tri(e);
                for k in 0..3 {
                    let (p, q) = (t[k], t[(k + 1) % 3]);
                    let d = q - p;
                    let g = gcd(d.m.abs(), d.n.abs());
                    for s in 1..g {
                        let x = p + LatticePoint::new(d.m / g * s, d.n / g * s);
                        assert!(m.vertex_index(x).is_none(), "hanging node {x:?}");
                    }
                }
            }
        }
    }

    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 { a } else { gcd(b, a % b) }
    }

    #[test]
    fn effective_volume_partition() {
        for reflection in [true, false] {
            let m = divacancy_mesh(reflection);
            let v = m.volumes();
            let det = m.crystal().det();
            let total: f64 = v.omega_site.iter().sum::<f64>() * det + v.omega_elem.iter().sum::<f64>();
            assert!((total - m.domain_area()).abs() < 1e-10 * total, "{total}");
            for (e, w) in m.elements().iter().zip(&v.omega_elem) {
                match e.tag {
                    Tag::Atomistic | Tag::Interface => assert_eq!(*w, 0.0),
                    Tag::Continuum => assert!(*w > 0.0 && *w <= e.area),
                }
            }
        }
    }

    #[test]
    fn interface_is_two_layers() {
        let m = divacancy_mesh(true);
        let layers: BTreeSet<i64> = m
            .interface_vertices()
            .iter()
            .map(|&i| m.crystal().defect_distance(m.vertices()[i]))
            .collect();
        assert_eq!(layers.into_iter().collect::<Vec<_>>(), vec![5, 6]);
    }

    #[test]
    fn locate_every_lattice_point() {
        let m = divacancy_mesh(true);
        for n in -32..=32 {
            for mm in -32..=32 {
                let p = LatticePoint::new(mm, n);
                if p.hex_norm() <= 32 {
                    let (e, w) = m.locate(p).expect("located");
                    assert!(w.iter().all(|&x| x >= 0.0));
                    assert!(geometry::contains(&m.element_tri(e), p));
                } else {
                    assert!(m.locate(p).is_none());
                }
            }
        }
    }

    #[test]
    fn pure_atomistic_mesh() {
        let m = AcMesh::atomistic(&Crystal::triangular(0), 5).unwrap();
        assert_eq!(m.elements().len(), 150);
        assert!(m.elements().iter().all(|e| e.tag == Tag::Atomistic));
        let c = Crystal::triangular(0);
        let p = MeshParams { r_ai: 8, radius: 8, grading: 1.0, macro_size: 8, reflection: true };
        assert!(build_ac_mesh(&c, &p).unwrap().elements().iter().all(|e| e.tag != Tag::Continuum));
    }

    #[test]
    fn too_small_atomistic_region() {
        let c = Crystal::triangular(2);
        let p = MeshParams { r_ai: 3, radius: 32, grading: 1.0, macro_size: 8, reflection: true };
        assert!(build_ac_mesh(&c, &p).is_err());
    }

    #[test]
    fn refine_and_enlarge() {
        let mut m = divacancy_mesh(true);
        let n0 = m.elements().len();
        let coarse: Vec<usize> = (0..n0).filter(|&e| m.elements()[e].cell.side > 1).take(5).collect();
        let rep = m.bisect(&coarse).unwrap();
        assert!(rep.refined > 0);
        assert!(m.elements().len() > n0);
        let atom = (0..m.elements().len()).find(|&e| m.elements()[e].tag == Tag::Atomistic).unwrap();
        assert!(matches!(m.bisect(&[atom]), Err(Error::AtomisticRefinement(_))));
        m.enlarge();
        assert_eq!(m.radius(), 40);
        let total: f64 = m.elements().iter().map(|e| e.area).sum();
        assert!((total - m.domain_area()).abs() < 1e-10 * total);
        m.expand_interface(2).unwrap();
        assert_eq!(m.r_ai(), 8);
    }
}
