//! EAM site potential and the Cauchy–Born energy density.
//!
//! A stencil is a slice of deformed bond vectors `g_ρ`, aligned with some
//! interaction range held by the caller. Site energies see only bond
//! vectors, never absolute positions.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EamParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rho0: f64,
}

impl Default for EamParams {
    fn default() -> Self {
        EamParams::new(4.4, 3.0, 5.0)
    }
}

impl EamParams {
    /// Parameters with the embedding reference density `6·exp(−b)`.
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        EamParams { a, b, c, rho0: 6.0 * (-b).exp() }
    }

    /// Morse pair term and its first two derivatives.
    pub fn phi(&self, r: f64) -> (f64, f64, f64) {
        let e1 = (-self.a * (r - 1.0)).exp();
        let e2 = e1 * e1;
        let a = self.a;
        (e2 - 2.0 * e1, -2.0 * a * e2 + 2.0 * a * e1, 4.0 * a * a * e2 - 2.0 * a * a * e1)
    }

    /// Electron density contribution and derivatives.
    pub fn psi(&self, r: f64) -> (f64, f64, f64) {
        let e = (-self.b * r).exp();
        (e, -self.b * e, self.b * self.b * e)
    }

    /// Embedding function and derivatives.
    pub fn embed(&self, t: f64) -> (f64, f64, f64) {
        let d = t - self.rho0;
        let d2 = d * d;
        (self.c * (d2 + d2 * d2), self.c * (2.0 * d + 4.0 * d2 * d), self.c * (2.0 + 12.0 * d2))
    }

    fn lengths(g: &[Vector2<f64>]) -> Result<Vec<f64>> {
        g.iter()
            .enumerate()
            .map(|(index, v)| {
                let length = v.norm();
                if length > 1e-12 && length.is_finite() {
                    Ok(length)
                } else {
                    Err(Error::DegenerateStencil { index, length })
                }
            })
            .collect()
    }

    pub fn site_energy(&self, g: &[Vector2<f64>]) -> Result<f64> {
        let r = Self::lengths(g)?;
        let mut pair = 0.0;
        let mut t = 0.0;
        for &ri in &r {
            pair += self.phi(ri).0;
            t += self.psi(ri).0;
        }
        Ok(pair + self.embed(t).0)
    }

    /// Writes `∂V/∂g_ρ` into `out` and returns the site energy.
    pub fn site_gradient(&self, g: &[Vector2<f64>], out: &mut [Vector2<f64>]) -> Result<f64> {
        debug_assert_eq!(g.len(), out.len());
        let r = Self::lengths(g)?;
        let mut pair = 0.0;
        let mut t = 0.0;
        for &ri in &r {
            pair += self.phi(ri).0;
            t += self.psi(ri).0;
        }
        let (f, df, _) = self.embed(t);
        for ((o, gi), &ri) in out.iter_mut().zip(g).zip(&r) {
            let h = self.phi(ri).1 + df * self.psi(ri).1;
            *o = gi * (h / ri);
        }
        Ok(pair + f)
    }

    /// Exact Hessian–vector product `out = ∇²V(g)·w`.
    pub fn site_hessian_apply(
        &self,
        g: &[Vector2<f64>],
        w: &[Vector2<f64>],
        out: &mut [Vector2<f64>],
    ) -> Result<()> {
        let r = Self::lengths(g)?;
        let t: f64 = r.iter().map(|&ri| self.psi(ri).0).sum();
        let (_, df, ddf) = self.embed(t);
        let mut s = 0.0;
        for ((gi, wi), &ri) in g.iter().zip(w).zip(&r) {
            s += self.psi(ri).1 * gi.dot(wi) / ri;
        }
        for (((o, gi), wi), &ri) in out.iter_mut().zip(g).zip(w).zip(&r) {
            let (_, dphi, ddphi) = self.phi(ri);
            let (_, dpsi, ddpsi) = self.psi(ri);
            let e = gi / ri;
            let radial = ddphi + df * ddpsi;
            let tangential = (dphi + df * dpsi) / ri;
            let ew = e.dot(wi);
            *o = e * (radial * ew) + (wi - e * ew) * tangential + e * (ddf * dpsi * s);
        }
        Ok(())
    }

    /// Cauchy–Born density `W(F) = V(F·R)/det A` and its derivative.
    pub fn cauchy_born(
        &self,
        f: &Matrix2<f64>,
        range: &[Vector2<f64>],
        det_a: f64,
    ) -> Result<(f64, Matrix2<f64>)> {
        let det = f.determinant();
        if det.abs() <= 1e-12 || !det.is_finite() {
            return Err(Error::SingularDeformation(det));
        }
        let g: Vec<Vector2<f64>> = range.iter().map(|rho| f * rho).collect();
        let mut dv = vec![Vector2::zeros(); g.len()];
        let v = self.site_gradient(&g, &mut dv)?;
        let mut dw = Matrix2::zeros();
        for (d, rho) in dv.iter().zip(range) {
            dw += d * rho.transpose();
        }
        Ok((v / det_a, dw / det_a))
    }

    /// Scale `s` such that `F_0 = s·I` minimises the Cauchy–Born density.
    pub fn ground_state_scale(&self, range: &[Vector2<f64>]) -> Result<f64> {
        let slope = |s: f64| -> Result<f64> {
            let g: Vec<Vector2<f64>> = range.iter().map(|rho| rho * s).collect();
            let mut dv = vec![Vector2::zeros(); g.len()];
            self.site_gradient(&g, &mut dv)?;
            Ok(dv.iter().zip(range).map(|(d, rho)| d.dot(rho)).sum())
        };
        let (mut lo, mut hi) = (0.5, 2.0);
        if !(slope(lo)? < 0.0 && slope(hi)? > 0.0) {
            return Err(Error::InvalidConfig("no ground-state dilation in [0.5, 2]".into()));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if slope(mid)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Crystal;

    #[test]
    fn scalar_values() {
        let p = EamParams::default();
        assert_eq!(p.phi(1.0).0, -1.0);
        assert_eq!(p.embed(p.rho0).0, 0.0);
        assert!((p.psi(1.0).0 - 0.049787068367863944).abs() < 1e-15);
    }

    #[test]
    fn ground_state_is_critical() {
        let p = EamParams::default();
        let c = Crystal::triangular(0);
        let s = p.ground_state_scale(c.range_cart()).unwrap();
        let (_, dw) = p.cauchy_born(&(Matrix2::identity() * s), c.range_cart(), c.det()).unwrap();
        assert!(dw.norm() < 1e-10, "{dw}");
        assert!(s > 0.8 && s < 1.2);
    }

    #[test]
    fn degenerate_stencil() {
        let p = EamParams::default();
        let g = [Vector2::new(1.0, 0.0), Vector2::zeros()];
        assert!(matches!(p.site_energy(&g), Err(Error::DegenerateStencil { index: 1, .. })));
    }

    #[test]
    fn singular_cauchy_born() {
        let p = EamParams::default();
        let c = Crystal::triangular(0);
        assert!(p.cauchy_born(&Matrix2::new(1.0, 1.0, 1.0, 1.0), c.range_cart(), c.det()).is_err());
    }
}
