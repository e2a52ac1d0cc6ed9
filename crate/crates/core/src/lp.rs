//! Revised simplex for `min cᵀx s.t. Ax = b, x ≥ 0`.
//!
//! Two phases with artificial variables. Pricing is Devex with
//! smallest-index tie-breaking; after a run of degenerate pivots the solver
//! falls back to Bland's rule, which cannot cycle. The basis is a sparse LU
//! factorisation updated in product form and refactorised at fixed intervals.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::MatMut;

use crate::error::{Error, Result};

/// Column-compressed sparse matrix.
#[derive(Clone, Debug, Default)]
pub struct SparseCols {
    pub nrows: usize,
    pub cols: Vec<Vec<(usize, f64)>>,
}

impl SparseCols {
    pub fn new(nrows: usize) -> Self {
        SparseCols { nrows, cols: Vec::new() }
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for (col, &xj) in self.cols.iter().zip(x) {
            if xj != 0.0 {
                for &(i, a) in col {
                    y[i] += a * xj;
                }
            }
        }
        y
    }

    pub fn mul_t(&self, y: &[f64]) -> Vec<f64> {
        self.cols.iter().map(|col| col.iter().map(|&(i, a)| a * y[i]).sum()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
}

impl LpSolution {
    pub fn duality_gap(&self) -> f64 {
        (self.objective - self.dual_objective).abs() / self.objective.abs().max(1.0)
    }
}

const REFACTOR: usize = 100;
const DEGENERATE_RUN: usize = 40;
const PIVOT_TOL: f64 = 1e-7;

/// Elementary basis change: column `r` replaced, `u = B⁻¹ a_q` at the time.
struct Eta {
    r: usize,
    ur: f64,
    u: Vec<(usize, f64)>,
}

/// Simplex state. The basis is held as a sparse LU factorisation of the
/// basis at the last refactorisation followed by a product of etas.
struct Simplex<'a> {
    a: &'a SparseCols,
    /// Row-wise copy of the sign-adjusted `A`.
    rows: Vec<Vec<(usize, f64)>>,
    sign: Vec<f64>,
    b: Vec<f64>,
    m: usize,
    n: usize,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    lu: Option<Lu<usize, f64>>,
    etas: Vec<Eta>,
    xb: Vec<f64>,
    /// Clip basic values at zero (primal iterations only).
    clamp: bool,
    iterations: usize,
}

impl<'a> Simplex<'a> {
    fn column(&self, j: usize) -> Vec<(usize, f64)> {
        if j < self.n {
            self.a.cols[j].iter().map(|&(i, a)| (i, self.sign[i] * a)).collect()
        } else {
            vec![(j - self.n, 1.0)]
        }
    }

    fn lu_solve(&self, x: &mut [f64], transpose: bool) {
        if let Some(lu) = &self.lu {
            let m = x.len();
            let view = MatMut::from_column_major_slice_mut(x, m, 1);
            if transpose {
                lu.solve_transpose_in_place(view);
            } else {
                lu.solve_in_place(view);
            }
        }
    }

    /// `x ← B⁻¹ x`.
    fn ftran_vec(&self, x: &mut [f64]) {
        self.lu_solve(x, false);
        for e in &self.etas {
            let xr = x[e.r] / e.ur;
            x[e.r] = xr;
            if xr != 0.0 {
                for &(i, ui) in &e.u {
                    x[i] -= ui * xr;
                }
            }
        }
    }

    /// `vᵀ ← vᵀ B⁻¹`.
    fn btran(&self, v: &mut [f64]) {
        for e in self.etas.iter().rev() {
            let s: f64 = e.u.iter().map(|&(i, ui)| v[i] * ui).sum();
            v[e.r] = (v[e.r] - s) / e.ur;
        }
        self.lu_solve(v, true);
    }

    /// `B⁻¹ a_j`.
    fn ftran(&self, j: usize, u: &mut [f64]) {
        u.iter_mut().for_each(|v| *v = 0.0);
        for (k, c) in self.column(j) {
            u[k] += c;
        }
        self.ftran_vec(u);
    }

    /// Row `r` of `B⁻¹`.
    fn row(&self, r: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[r] = 1.0;
        self.btran(out);
    }

    fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        let mut trip = Vec::new();
        for (k, &j) in self.basis.iter().enumerate() {
            for (i, v) in self.column(j) {
                trip.push(Triplet::new(i, k, v));
            }
        }
        let bm = SparseColMat::<usize, f64>::try_new_from_triplets(m, m, &trip)
            .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        let lu = bm.sp_lu().map_err(|e| Error::LinearAlgebra(format!("singular simplex basis: {e:?}")))?;
        self.lu = Some(lu);
        self.etas.clear();
        let mut x = self.b.clone();
        self.ftran_vec(&mut x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearAlgebra("singular simplex basis".into()));
        }
        self.xb = if self.clamp { x.into_iter().map(|v| v.max(0.0)).collect() } else { x };
        Ok(())
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.basis.iter().map(|&j| cost[j]).collect();
        self.btran(&mut y);
        y
    }

    fn reduced_cost(&self, j: usize, cost: &[f64], y: &[f64]) -> f64 {
        if j < self.n {
            cost[j] - self.a.cols[j].iter().map(|&(i, a)| self.sign[i] * a * y[i]).sum::<f64>()
        } else {
            cost[j] - y[j - self.n]
        }
    }

    /// Basis change: `q` enters in row `r`, `u = B⁻¹ a_q`.
    fn pivot(&mut self, r: usize, q: usize, u: &[f64]) {
        let ur = u[r];
        let theta = self.xb[r] / ur;
        for (i, &ui) in u.iter().enumerate() {
            if i != r && ui != 0.0 {
                self.xb[i] -= theta * ui;
                if self.clamp {
                    self.xb[i] = self.xb[i].max(0.0);
                }
            }
        }
        self.xb[r] = theta;
        let entries = u.iter().enumerate().filter(|&(i, v)| i != r && *v != 0.0).map(|(i, &v)| (i, v)).collect();
        self.etas.push(Eta { r, ur, u: entries });
        self.in_basis[self.basis[r]] = false;
        self.basis[r] = q;
        self.in_basis[q] = true;
        self.iterations += 1;
    }

    /// `αᵣ = e_rᵀ B⁻¹ A` over all columns, from `row = e_rᵀ B⁻¹`. Only rows
    /// with a nonzero entry are visited; `touched` lists the columns hit.
    fn pivot_row(&self, row: &[f64], alpha: &mut [f64], seen: &mut [bool], touched: &mut Vec<usize>) {
        for &j in touched.iter() {
            alpha[j] = 0.0;
            seen[j] = false;
        }
        touched.clear();
        for (i, &ri) in row.iter().enumerate() {
            if ri == 0.0 {
                continue;
            }
            for &(j, v) in &self.rows[i] {
                if !seen[j] {
                    seen[j] = true;
                    touched.push(j);
                }
                alpha[j] += ri * v;
            }
            let j = self.n + i;
            if !seen[j] {
                seen[j] = true;
                touched.push(j);
            }
            alpha[j] += ri;
        }
    }

    /// Dual simplex passes that restore `x_B ≥ 0` on a basis whose reduced
    /// costs are nonnegative. Returns the number of pivots.
    fn dual_cleanup(&mut self, cost: &[f64], allowed: impl Fn(usize) -> bool, tol: f64, max_iter: usize) -> Result<usize> {
        let m = self.m;
        let total = self.n + m;
        let allowed: Vec<bool> = (0..total).map(allowed).collect();
        let mut row = vec![0.0; m];
        let mut alpha = vec![0.0; total];
        let mut seen = vec![false; total];
        let mut touched = Vec::new();
        let mut u = vec![0.0; m];
        let mut pivots = 0;
        loop {
            let y = self.duals(cost);
            let (r, xr) = self.xb.iter().cloned().enumerate().fold((0, 0.0), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
            if xr >= -tol {
                return Ok(pivots);
            }
            if self.iterations >= max_iter {
                return Err(Error::NotConverged { iterations: self.iterations, residual: -xr });
            }
            self.row(r, &mut row);
            self.pivot_row(&row, &mut alpha, &mut seen, &mut touched);
            let amax = touched.iter().fold(0.0f64, |acc, &j| acc.max(alpha[j].abs()));
            // Harris two-pass ratio test on the reduced costs
            let eligible: Vec<(usize, f64)> = touched
                .iter()
                .filter(|&&j| !self.in_basis[j] && allowed[j] && alpha[j] < -PIVOT_TOL * amax.max(1.0))
                .map(|&j| (j, self.reduced_cost(j, cost, &y).max(0.0)))
                .collect();
            let bound = eligible.iter().map(|&(j, d)| (d + 1e-9) / -alpha[j]).fold(f64::INFINITY, f64::min);
            let mut enter: Option<usize> = None;
            for &(j, d) in &eligible {
                if d / -alpha[j] <= bound && enter.map_or(true, |k| alpha[j].abs() > alpha[k].abs()) {
                    enter = Some(j);
                }
            }
            let Some(q) = enter else { return Err(Error::Infeasible(-xr)) };
            self.ftran(q, &mut u);
            self.pivot(r, q, &u);
            pivots += 1;
            if pivots % REFACTOR == 0 {
                self.refactor()?;
            }
        }
    }

    /// Runs the simplex method for `cost` over the columns allowed by `allowed`.
    fn optimise(&mut self, cost: &[f64], allowed: impl Fn(usize) -> bool, max_iter: usize) -> Result<()> {
        let m = self.m;
        let total = self.n + m;
        let mut u = vec![0.0; m];
        let mut degenerate = 0usize;
        let mut since_refactor = 0usize;
        let cmax = cost.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
        let opt_tol = 1e-11 * cmax;
        let allowed: Vec<bool> = (0..total).map(allowed).collect();
        let fresh_costs = |s: &Self| -> Vec<f64> {
            let y = s.duals(cost);
            (0..total).map(|j| if s.in_basis[j] { 0.0 } else { s.reduced_cost(j, cost, &y) }).collect()
        };
        let mut d = fresh_costs(self);
        // Devex reference weights
        let mut w = vec![1.0f64; total];
        let mut row = vec![0.0; m];
        let mut alpha = vec![0.0; total];
        let mut seen = vec![false; total];
        let mut touched = Vec::new();
        // columns with a tiny improving reduced cost but no usable pivot
        let mut rejected = vec![false; total];
        loop {
            if self.iterations >= max_iter {
                return Err(Error::NotConverged { iterations: self.iterations, residual: f64::NAN });
            }
            let bland = degenerate >= DEGENERATE_RUN;
            let mut enter = None;
            let mut best = 0.0;
            for j in 0..total {
                if self.in_basis[j] || rejected[j] || !allowed[j] {
                    continue;
                }
                let dj = d[j];
                if dj < -opt_tol {
                    if bland {
                        enter = Some(j);
                        break;
                    }
                    let score = -dj * dj / w[j];
                    if score < best {
                        enter = Some(j);
                        best = score;
                    }
                }
            }
            let Some(q) = enter else {
                if since_refactor > 0 {
                    // confirm optimality against a fresh factorisation
                    self.refactor()?;
                    since_refactor = 0;
                    d = fresh_costs(self);
                    rejected.iter_mut().for_each(|v| *v = false);
                    continue;
                }
                return Ok(());
            };
            let dq = d[q];
            self.ftran(q, &mut u);
            let umax = u.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let piv_tol = PIVOT_TOL * umax.max(1.0);
            // Harris two-pass ratio test: relaxed bound, then the largest pivot.
            // Under Bland's rule the bound is exact and ties go to the lowest
            // basic index, which is what rules out cycling.
            let slack = if bland { 0.0 } else { 1e-9 };
            let mut bound = f64::INFINITY;
            for i in 0..m {
                if u[i] > piv_tol {
                    bound = bound.min((self.xb[i].max(0.0) + slack) / u[i]);
                }
            }
            let bound = if bland { bound * (1.0 + 1e-12) + 1e-300 } else { bound };
            let mut leave: Option<usize> = None;
            for i in 0..m {
                if u[i] > piv_tol && self.xb[i].max(0.0) / u[i] <= bound {
                    if bland {
                        if leave.map_or(true, |l| self.basis[i] < self.basis[l]) {
                            leave = Some(i);
                        }
                        continue;
                    }
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            u[i] > u[l] * (1.0 + 1e-12)
                                || (u[i] >= u[l] * (1.0 - 1e-12) && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        leave = Some(i);
                    }
                }
            }
            let Some(r) = leave else {
                // a drifted factorisation can fake a ray; only trust a fresh one
                if since_refactor > 0 {
                    self.refactor()?;
                    since_refactor = 0;
                    d = fresh_costs(self);
                    continue;
                }
                if -dq > 1e-6 * cmax {
                    return Err(Error::Unbounded);
                }
                rejected[q] = true;
                continue;
            };
            // slightly negative basics from the relaxed ratio test count as zero
            self.xb[r] = self.xb[r].max(0.0);
            let ratio = self.xb[r] / u[r];
            if ratio * -dq <= 1e-12 * cmax {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.row(r, &mut row);
            self.pivot_row(&row, &mut alpha, &mut seen, &mut touched);
            let ur = u[r];
            let wq = w[q];
            let step = dq / ur;
            let mut wmax = 0.0f64;
            for &j in &touched {
                if self.in_basis[j] || j == q {
                    continue;
                }
                let arj = alpha[j];
                d[j] -= step * arj;
                if allowed[j] {
                    let ratio = arj / ur;
                    w[j] = w[j].max(ratio * ratio * wq);
                    wmax = wmax.max(w[j]);
                }
            }
            let leaving = self.basis[r];
            d[leaving] = -step;
            d[q] = 0.0;
            w[leaving] = (wq / (ur * ur)).max(1.0);
            if wmax > 1e6 {
                w.iter_mut().for_each(|v| *v = 1.0);
            }
            self.pivot(r, q, &u);
            rejected.iter_mut().for_each(|v| *v = false);
            since_refactor += 1;
            if since_refactor >= REFACTOR {
                self.refactor()?;
                since_refactor = 0;
                d = fresh_costs(self);
            }
        }
    }
}

/// Solves `min cᵀx s.t. Ax = b, x ≥ 0`.
pub fn solve_standard(a: &SparseCols, b: &[f64], c: &[f64]) -> Result<LpSolution> {
    let m = a.nrows;
    let n = a.ncols();
    assert_eq!(b.len(), m);
    assert_eq!(c.len(), n);
    if m == 0 {
        return Ok(LpSolution { x: vec![0.0; n], objective: 0.0, dual_objective: 0.0, iterations: 0 });
    }
    let sign: Vec<f64> = b.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    let bs: Vec<f64> = b.iter().zip(&sign).map(|(v, s)| v * s).collect();
    let mut in_basis = vec![false; n + m];
    for i in 0..m {
        in_basis[n + i] = true;
    }
    let mut rows = vec![Vec::new(); m];
    for (j, col) in a.cols.iter().enumerate() {
        for &(i, v) in col {
            rows[i].push((j, sign[i] * v));
        }
    }
    let mut s = Simplex {
        a,
        rows,
        sign,
        b: bs.clone(),
        m,
        n,
        basis: (n..n + m).collect(),
        in_basis,
        lu: None,
        etas: Vec::new(),
        clamp: true,
        xb: bs.clone(),
        iterations: 0,
    };
    let max_iter = 50 * (n + m) + 1000;

    // phase one
    let mut cost1 = vec![0.0; n + m];
    for v in cost1.iter_mut().skip(n) {
        *v = 1.0;
    }
    s.optimise(&cost1, |_| true, max_iter)?;
    s.refactor()?;
    let infeas: f64 = s.basis.iter().zip(&s.xb).filter(|(j, _)| **j >= n).map(|(_, x)| *x).sum();
    let bscale = bs.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if infeas > 1e-9 * bscale {
        return Err(Error::Infeasible(infeas));
    }
    // drive zero-level artificials out of the basis where possible
    let mut u = vec![0.0; m];
    for r in 0..m {
        if s.basis[r] < n {
            continue;
        }
        let mut row = vec![0.0; m];
        s.row(r, &mut row);
        let found = (0..n).find(|&j| {
            !s.in_basis[j] && a.cols[j].iter().map(|&(i, aij)| row[i] * s.sign[i] * aij).sum::<f64>().abs() > 1e-7
        });
        if let Some(q) = found {
            s.ftran(q, &mut u);
            s.pivot(r, q, &u);
        }
    }
    s.refactor()?;

    // phase two
    let mut cost2 = c.to_vec();
    cost2.extend(std::iter::repeat(0.0).take(m));
    let feas_tol = 1e-12 * bscale;
    // Lift the basic variables off zero by shifting b along the current
    // basis. Highly degenerate vertices otherwise stall the pivoting for
    // thousands of iterations. The dual cleanup below removes the shift.
    let mut shifted = bs.clone();
    for &j in &s.basis {
        let frac = (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        let delta = 1e-6 * bscale * (1.0 + frac as f64 / (1u64 << 24) as f64);
        for (i, v) in s.column(j) {
            shifted[i] += v * delta;
        }
    }
    s.b = shifted;
    s.refactor()?;
    s.optimise(&cost2, |j| j < n, max_iter)?;
    s.b = bs.clone();
    s.refactor()?;
    for _ in 0..10 {
        s.optimise(&cost2, |j| j < n, max_iter)?;
        s.clamp = false;
        s.refactor()?;
        let pivots = s.dual_cleanup(&cost2, |j| j < n, feas_tol, max_iter)?;
        s.clamp = true;
        if pivots == 0 {
            break;
        }
        s.refactor()?;
    }

    let mut x = vec![0.0; n];
    for (i, &j) in s.basis.iter().enumerate() {
        if j < n {
            x[j] = s.xb[i].max(0.0);
        }
    }
    let objective: f64 = x.iter().zip(c).map(|(x, c)| x * c).sum();
    let y = s.duals(&cost2);
    let dual_objective: f64 = y.iter().zip(&bs).map(|(y, b)| y * b).sum();
    Ok(LpSolution { x, objective, dual_objective, iterations: s.iterations })
}

/// `min Σ|x_j| s.t. Ax = b`, through the split `x = x⁺ − x⁻`.
pub fn solve_l1(a: &SparseCols, b: &[f64]) -> Result<LpSolution> {
    let n = a.ncols();
    let mut split = SparseCols::new(a.nrows);
    split.cols.extend(a.cols.iter().cloned());
    split.cols.extend(a.cols.iter().map(|c| c.iter().map(|&(i, v)| (i, -v)).collect()));
    let sol = solve_standard(&split, b, &vec![1.0; 2 * n])?;
    let x = (0..n).map(|j| sol.x[j] - sol.x[n + j]).collect();
    Ok(LpSolution { x, ..sol })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[&[f64]]) -> SparseCols {
        let m = rows.len();
        let n = rows[0].len();
        let mut a = SparseCols::new(m);
        for j in 0..n {
            a.cols.push((0..m).filter(|&i| rows[i][j] != 0.0).map(|i| (i, rows[i][j])).collect());
        }
        a
    }

    #[test]
    fn small_lp() {
        // min -x1 - x2 s.t. x1 + 2x2 + s1 = 4, 3x1 + x2 + s2 = 6
        let a = dense(&[&[1.0, 2.0, 1.0, 0.0], &[3.0, 1.0, 0.0, 1.0]]);
        let sol = solve_standard(&a, &[4.0, 6.0], &[-1.0, -1.0, 0.0, 0.0]).unwrap();
        assert!((sol.objective + 2.8).abs() < 1e-12);
        assert!((sol.x[0] - 1.6).abs() < 1e-12 && (sol.x[1] - 1.2).abs() < 1e-12);
        assert!(sol.duality_gap() < 1e-12);
    }

    #[test]
    fn l1_prefers_sparse() {
        // x1 + x2 + x3 = 3, x1 - x2 = 0 ... minimum ℓ¹ norm 3
        let a = dense(&[&[1.0, 1.0, 1.0]]);
        let sol = solve_l1(&a, &[3.0]).unwrap();
        assert!((sol.objective - 3.0).abs() < 1e-12);
        assert_eq!(sol.x.iter().filter(|v| v.abs() > 1e-12).count(), 1);
    }

    #[test]
    fn infeasible_and_redundant() {
        let a = dense(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(solve_standard(&a, &[1.0, 2.0], &[1.0, 1.0]), Err(Error::Infeasible(_))));
        let sol = solve_standard(&a, &[1.0, 1.0], &[1.0, 2.0]).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-12);
    }
}
