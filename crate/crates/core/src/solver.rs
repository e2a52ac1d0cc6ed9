//! Equilibrium solvers and the empirical stability check.
//!
//! Both descent methods are preconditioned by the P1 Laplacian of the
//! model (Dirichlet rows removed), factorised once with a sparse Cholesky.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use log::debug;
use nalgebra::{DMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{from_dofs, to_dofs, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Descent {
    /// Polak–Ribière+ nonlinear conjugate gradients.
    Ncg,
    /// Preconditioned steepest descent.
    Gradient,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Stop when the largest nodal force is at most `tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub descent: Descent,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-8, max_iter: 20_000, descent: Descent::Ncg }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub energy: f64,
    pub grad_norm: f64,
    /// `(iteration, energy, max force)` per iteration.
    pub trace: Vec<(usize, f64, f64)>,
}

impl SolveReport {
    /// Writes the trace as `iter E gradnorm` rows.
    pub fn write_trace<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter E gradnorm")?;
        for (i, e, g) in &self.trace {
            writeln!(w, "{i} {e:.16e} {g:.16e}")?;
        }
        Ok(())
    }
}

/// Cholesky factor of the Dirichlet Laplacian restricted to free nodes.
pub struct Preconditioner {
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
    n: usize,
}

impl Preconditioner {
    pub fn new(model: &dyn Model) -> Result<Self> {
        let free = model.free_nodes();
        let mut slot = vec![usize::MAX; model.n_nodes()];
        for (k, &i) in free.iter().enumerate() {
            slot[i] = k;
        }
        let mut trip = Vec::new();
        for (i, j, v) in model.laplacian() {
            let (a, b) = (slot[i], slot[j]);
            if a != usize::MAX && b != usize::MAX && a >= b {
                trip.push(Triplet::new(a, b, v));
            }
        }
        let n = free.len();
        // a small shift keeps isolated free nodes (none in practice) regular
        for k in 0..n {
            trip.push(Triplet::new(k, k, 1e-10));
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        let llt = mat.sp_cholesky(Side::Lower).map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        Ok(Preconditioner { llt, n })
    }

    /// `L⁻¹ g` for a dof vector (both components).
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::zeros(self.n, 2);
        for k in 0..self.n {
            rhs[(k, 0)] = g[2 * k];
            rhs[(k, 1)] = g[2 * k + 1];
        }
        self.llt.solve_in_place(rhs.as_mut());
        let mut out = vec![0.0; 2 * self.n];
        for k in 0..self.n {
            out[2 * k] = rhs[(k, 0)];
            out[2 * k + 1] = rhs[(k, 1)];
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn amax(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Objective<'a> {
    model: &'a dyn Model,
    evals: usize,
}

impl Objective<'_> {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evals += 1;
        let free = self.model.free_nodes();
        let u = from_dofs(free, self.model.n_nodes(), x);
        let mut g = vec![Vector2::zeros(); u.len()];
        let e = self.model.gradient(&u, &mut g)?.total();
        Ok((e, to_dofs(free, &g)))
    }
}

struct Point {
    alpha: f64,
    e: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Line search for approximate Wolfe conditions: a point with
/// `|φ'(α)| ≤ σ|φ'(0)|` whose energy has not increased beyond the rounding
/// level of `φ(0)`.
fn line_search(
    obj: &mut Objective,
    x: &[f64],
    e0: f64,
    slope0: f64,
    d: &[f64],
    alpha0: f64,
) -> Result<Point> {
    const SIGMA: f64 = 0.1;
    const MAX_EVALS: usize = 60;
    let eps_e = 1e-12 * e0.abs().max(1e-8);
    let at = |obj: &mut Objective, alpha: f64| -> Result<Point> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(x, d)| x + alpha * d).collect();
        match obj.eval(&xt) {
            Ok((e, g)) => {
                let slope = dot(&g, d);
                Ok(Point { alpha, e, g, slope })
            }
            // collapsed bonds: treat as an infinitely bad point
            Err(Error::DegenerateStencil { .. }) | Err(Error::SingularDeformation(_)) => {
                Ok(Point { alpha, e: f64::INFINITY, g: vec![], slope: f64::INFINITY })
            }
            Err(e) => Err(e),
        }
    };
    let accept = |p: &Point| p.e <= e0 + eps_e && p.slope.abs() <= SIGMA * slope0.abs();
    let mut lo = (0.0, slope0);
    let mut hi: Option<(f64, f64)> = None;
    let mut alpha = alpha0;
    let mut best: Option<Point> = None;
    for _ in 0..MAX_EVALS {
        let p = at(obj, alpha)?;
        if accept(&p) {
            return Ok(p);
        }
        if p.e <= e0 + eps_e && best.as_ref().map_or(true, |b| p.e < b.e) && p.slope.is_finite() {
            best = Some(Point { alpha: p.alpha, e: p.e, g: p.g.clone(), slope: p.slope });
        }
        if !p.e.is_finite() || p.slope > 0.0 || p.e > e0 + eps_e {
            hi = Some((alpha, if p.slope.is_finite() { p.slope } else { f64::INFINITY }));
        } else {
            lo = (alpha, p.slope);
        }
        alpha = match hi {
            None => 4.0 * alpha,
            Some((ah, sh)) => {
                let (al, sl) = lo;
                // secant on φ', safeguarded towards the bracket interior
                let t = if sh.is_finite() && sh > sl { al - sl * (ah - al) / (sh - sl) } else { 0.5 * (al + ah) };
                let w = ah - al;
                t.clamp(al + 0.1 * w, ah - 0.1 * w)
            }
        };
        if let Some((ah, _)) = hi {
            if (ah - lo.0) <= 1e-14 * ah.abs().max(1e-300) {
                break;
            }
        }
    }
    best.filter(|b| b.e < e0).ok_or(Error::LineSearch(obj.evals))
}

/// Minimises `model` from `u0` until the largest free nodal force is below
/// `opts.tol`.
pub fn solve_equilibrium(
    model: &dyn Model,
    u0: &[Vector2<f64>],
    opts: &SolveOptions,
) -> Result<(Vec<Vector2<f64>>, SolveReport)> {
    let pre = Preconditioner::new(model)?;
    solve_with(model, u0, opts, &pre)
}

pub fn solve_with(
    model: &dyn Model,
    u0: &[Vector2<f64>],
    opts: &SolveOptions,
    pre: &Preconditioner,
) -> Result<(Vec<Vector2<f64>>, SolveReport)> {
    let free = model.free_nodes();
    let n = model.n_nodes();
    let mut obj = Objective { model, evals: 0 };
    let mut x = to_dofs(free, u0);
    let (mut e, mut g) = obj.eval(&x)?;
    let mut report = SolveReport::default();
    let mut z = pre.apply(&g);
    let mut d: Vec<f64> = z.iter().map(|v| -v).collect();
    let mut alpha_prev: Option<f64> = None;
    let mut restarts = 0usize;
    for it in 0..=opts.max_iter {
        let gn = amax(&g);
        report.trace.push((it, e, gn));
        if gn <= opts.tol {
            report.iterations = it;
            report.energy = e;
            report.grad_norm = gn;
            debug!("converged in {it} iterations, E = {e:.12e}");
            return Ok((from_dofs(free, n, &x), report));
        }
        if it == opts.max_iter {
            break;
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = z.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let alpha0 = match alpha_prev {
            Some(a) => a,
            None => {
                // curvature along d from one extra gradient
                let h = 1e-6 / amax(&d).max(1e-300);
                let xt: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + h * d).collect();
                let (_, gt) = obj.eval(&xt)?;
                let curv = (dot(&gt, &d) - slope) / h;
                if curv > 0.0 {
                    -slope / curv
                } else {
                    1.0
                }
            }
        };
        let p = match line_search(&mut obj, &x, e, slope, &d, alpha0) {
            Ok(p) => p,
            Err(err) => {
                // one retry along the preconditioned gradient
                restarts += 1;
                if restarts > 3 || d.iter().zip(&z).all(|(a, b)| *a == -*b) {
                    return Err(err);
                }
                d = z.iter().map(|v| -v).collect();
                alpha_prev = None;
                continue;
            }
        };
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += p.alpha * di;
        }
        let z_new = pre.apply(&p.g);
        let beta = match opts.descent {
            Descent::Gradient => 0.0,
            Descent::Ncg => {
                let num: f64 = p.g.iter().zip(z_new.iter().zip(&z)).map(|(g, (zn, zo))| g * (zn - zo)).sum();
                (num / dot(&g, &z)).max(0.0)
            }
        };
        let slope_new = dot(&p.g, &d);
        for (di, zi) in d.iter_mut().zip(&z_new) {
            *di = -zi + beta * *di;
        }
        let next_slope = dot(&p.g, &d);
        alpha_prev = Some(if next_slope < 0.0 { (p.alpha * slope_new.min(slope) / next_slope).abs().max(p.alpha * 0.1) } else { p.alpha });
        alpha_prev = alpha_prev.map(|a| a.min(p.alpha * 10.0));
        e = p.e;
        g = p.g;
        z = z_new;
    }
    let gn = amax(&g);
    Err(Error::NotConverged { iterations: opts.max_iter, residual: gn })
}

/// Result of the Lanczos stability probe.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    /// Smallest Ritz value of `δ²E` relative to `‖∇v‖²`: the empirical `c₀`.
    pub c0: f64,
    pub ritz: Vec<f64>,
}

/// Hessian–vector product by central differences of the gradient.
fn hessian_apply(model: &dyn Model, u: &[Vector2<f64>], v: &[f64]) -> Result<Vec<f64>> {
    let free = model.free_nodes();
    let n = model.n_nodes();
    let h = 1e-5 / amax(v).max(1e-300);
    let x = to_dofs(free, u);
    let mut out = Vec::new();
    for s in [1.0, -1.0] {
        let xt: Vec<f64> = x.iter().zip(v).map(|(x, v)| x + s * h * v).collect();
        let ut = from_dofs(free, n, &xt);
        let mut g = vec![Vector2::zeros(); n];
        model.gradient(&ut, &mut g)?;
        out.push(to_dofs(free, &g));
    }
    Ok(out[0].iter().zip(&out[1]).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Lanczos iteration for the smallest eigenvalue of `δ²E(u)` in the inner
/// product of the Laplacian `L`, i.e. `min ⟨δ²E v, v⟩ / ⟨Lv, v⟩`. `probes`
/// is the Krylov dimension. The start vector is `start` or a seeded random
/// vector.
pub fn stability_check(
    model: &dyn Model,
    u: &[Vector2<f64>],
    probes: usize,
    start: Option<&[f64]>,
) -> Result<StabilityReport> {
    let pre = Preconditioner::new(model)?;
    let n = 2 * model.free_nodes().len();
    let q0: Vec<f64> = match start {
        Some(s) => {
            if s.len() != n || amax(s) == 0.0 {
                return Err(Error::InvalidConfig("stability probe vector must be nonzero".into()));
            }
            s.to_vec()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    };
    let lap = model.laplacian();
    let free = model.free_nodes();
    let mut slot = vec![usize::MAX; model.n_nodes()];
    for (k, &i) in free.iter().enumerate() {
        slot[i] = k;
    }
    let l_apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for &(i, j, w) in &lap {
            let (a, b) = (slot[i], slot[j]);
            if a != usize::MAX && b != usize::MAX {
                out[2 * a] += w * v[2 * b];
                out[2 * a + 1] += w * v[2 * b + 1];
            }
        }
        out
    };
    // Lanczos for L⁻¹H, self-adjoint in the L inner product
    let lnorm = |v: &[f64]| dot(&l_apply(v), v).sqrt();
    let nq = lnorm(&q0);
    let mut qs: Vec<Vec<f64>> = vec![q0.iter().map(|v| v / nq).collect()];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let k = probes.max(1).min(n);
    for j in 0..k {
        let hq = hessian_apply(model, u, &qs[j])?;
        let mut w = pre.apply(&hq);
        let a = dot(&hq, &qs[j]);
        alpha.push(a);
        // full reorthogonalisation in the L inner product
        for q in &qs {
            let c = dot(&l_apply(q), &w);
            w.iter_mut().zip(q).for_each(|(w, q)| *w -= c * q);
        }
        let b = lnorm(&w);
        if j + 1 == k || b < 1e-12 {
            break;
        }
        beta.push(b);
        qs.push(w.iter().map(|v| v / b).collect());
    }
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let mut ritz: Vec<f64> = t.symmetric_eigenvalues().iter().copied().collect();
    ritz.sort_by(|a, b| a.total_cmp(b));
    Ok(StabilityReport { c0: ritz[0], ritz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Crystal;
    use crate::model::{AtomisticModel, EnergyParts};
    use crate::potential::EamParams;
    use nalgebra::Matrix2;

    /// `E(u) = ½ Σ λ_k |u_k|²` on a chain whose Laplacian is the identity.
    struct Diagonal {
        lambda: Vec<f64>,
        free: Vec<usize>,
    }

    impl Model for Diagonal {
        fn n_nodes(&self) -> usize {
            self.lambda.len()
        }
        fn free_nodes(&self) -> &[usize] {
            &self.free
        }
        fn energy(&self, u: &[Vector2<f64>]) -> Result<EnergyParts> {
            let e = u.iter().zip(&self.lambda).map(|(u, l)| 0.5 * l * u.norm_squared()).sum();
            Ok(EnergyParts { atomistic: e, ..Default::default() })
        }
        fn gradient(&self, u: &[Vector2<f64>], g: &mut [Vector2<f64>]) -> Result<EnergyParts> {
            for ((g, u), l) in g.iter_mut().zip(u).zip(&self.lambda) {
                *g = u * *l;
            }
            self.energy(u)
        }
        fn laplacian(&self) -> Vec<(usize, usize, f64)> {
            (0..self.lambda.len()).map(|i| (i, i, 1.0)).collect()
        }
    }

    #[test]
    fn lanczos_recovers_smallest_eigenvalue() {
        let lambda: Vec<f64> = (0..12).map(|i| 0.37 + i as f64 * 0.8).collect();
        let m = Diagonal { free: (0..12).collect(), lambda };
        let u = vec![Vector2::zeros(); 12];
        let r = stability_check(&m, &u, 24, None).unwrap();
        assert!((r.c0 - 0.37).abs() < 1e-6, "{}", r.c0);
        assert!(stability_check(&m, &u, 5, Some(&[0.0; 24])).is_err());
    }

    #[test]
    fn homogeneous_lattice_is_critical_and_stable() {
        let c = Crystal::triangular(0);
        let s = EamParams::default().ground_state_scale(c.range_cart()).unwrap();
        let m = AtomisticModel::new(&c, EamParams::default(), Matrix2::identity() * s, 6).unwrap();
        let u0 = vec![Vector2::zeros(); m.n_nodes()];
        let (u, rep) = solve_equilibrium(&m, &u0, &SolveOptions::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(u.iter().all(|v| *v == Vector2::zeros()));
        assert!(stability_check(&m, &u, 20, None).unwrap().c0 > 0.0);
    }

    #[test]
    fn descent_variants_agree() {
        let c = Crystal::triangular(2);
        let s = EamParams::default().ground_state_scale(c.range_cart()).unwrap();
        let b = Matrix2::new(1.03, 0.03, 0.0, 1.03) * s;
        let m = AtomisticModel::new(&c, EamParams::default(), b, 6).unwrap();
        let u0 = vec![Vector2::zeros(); m.n_nodes()];
        let e0 = m.energy(&u0).unwrap().total();
        let tol = SolveOptions { tol: 1e-10, ..Default::default() };
        let (ua, ra) = solve_equilibrium(&m, &u0, &tol).unwrap();
        let (ub, _) = solve_equilibrium(&m, &u0, &SolveOptions { descent: Descent::Gradient, ..tol }).unwrap();
        assert!(ra.energy < e0);
        let diff: Vec<Vector2<f64>> = ua.iter().zip(&ub).map(|(a, b)| a - b).collect();
        let lap = m.laplacian();
        let h1: f64 = lap.iter().map(|&(i, j, w)| w * diff[i].dot(&diff[j])).sum::<f64>().sqrt();
        assert!(h1 < 1e-6, "{h1}");
    }
}
