//! Triangle predicates, exact segment clipping and polygon overlap areas.
//!
//! Triangles given by lattice points are counter-clockwise in lattice
//! coordinates; since `det A > 0` they are counter-clockwise in space too,
//! and ratios of lengths and areas are the same in both coordinate systems.

use nalgebra::Vector2;
use num_rational::Ratio;

use crate::lattice::LatticePoint;

pub type Tri = [LatticePoint; 3];

pub fn orient(a: LatticePoint, b: LatticePoint, c: LatticePoint) -> i64 {
    (b - a).cross(c - a)
}

/// Twice the signed area in lattice units.
pub fn twice_area(t: &Tri) -> i64 {
    orient(t[0], t[1], t[2])
}

pub fn contains(t: &Tri, p: LatticePoint) -> bool {
    (0..3).all(|k| orient(t[k], t[(k + 1) % 3], p) >= 0)
}

/// Barycentric coordinates of `p` with respect to `t`.
pub fn barycentric(t: &Tri, p: LatticePoint) -> [f64; 3] {
    let d = twice_area(t) as f64;
    [
        orient(p, t[1], t[2]) as f64 / d,
        orient(t[0], p, t[2]) as f64 / d,
        orient(t[0], t[1], p) as f64 / d,
    ]
}

/// Portion of the segment `p + t·d`, `t ∈ [0, 1]`, inside the closed
/// triangle: `(t0, t1, edge)` with `t0 < t1`. `edge = Some(k)` when the
/// piece runs along the edge from corner `k` to corner `k + 1`.
pub fn clip_segment(t: &Tri, p: LatticePoint, d: LatticePoint) -> Option<(Ratio<i64>, Ratio<i64>, Option<usize>)> {
    let mut lo = Ratio::from_integer(0);
    let mut hi = Ratio::from_integer(1);
    let mut on_edge = None;
    for k in 0..3 {
        let e = t[(k + 1) % 3] - t[k];
        let a = e.cross(p - t[k]);
        let b = e.cross(d);
        if b == 0 {
            if a < 0 {
                return None;
            }
            if a == 0 {
                on_edge = Some(k);
            }
        } else {
            let r = Ratio::new(-a, b);
            if b > 0 {
                lo = lo.max(r);
            } else {
                hi = hi.min(r);
            }
        }
    }
    (lo < hi).then_some((lo, hi, on_edge))
}

pub fn polygon_area(pts: &[Vector2<f64>]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s
}

fn ccw(t: &[Vector2<f64>; 3]) -> [Vector2<f64>; 3] {
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    if e1[0] * e2[1] - e1[1] * e2[0] < 0.0 {
        [t[0], t[2], t[1]]
    } else {
        *t
    }
}

/// Area of the intersection of two triangles (Sutherland–Hodgman clipping of
/// `a` against the half-planes of `b`).
pub fn overlap_area(a: &[Vector2<f64>; 3], b: &[Vector2<f64>; 3]) -> f64 {
    let a = ccw(a);
    let b = ccw(b);
    let mut poly: Vec<Vector2<f64>> = a.to_vec();
    for k in 0..3 {
        if poly.is_empty() {
            break;
        }
        let (p, q) = (b[k], b[(k + 1) % 3]);
        let e = q - p;
        let side = |x: &Vector2<f64>| e[0] * (x[1] - p[1]) - e[1] * (x[0] - p[0]);
        let mut out = Vec::with_capacity(poly.len() + 2);
        for i in 0..poly.len() {
            let (s, t) = (poly[i], poly[(i + 1) % poly.len()]);
            let (fs, ft) = (side(&s), side(&t));
            if fs >= 0.0 {
                out.push(s);
            }
            if (fs >= 0.0) != (ft >= 0.0) {
                let lam = fs / (fs - ft);
                out.push(s + (t - s) * lam);
            }
        }
        poly = out;
    }
    if poly.len() < 3 {
        0.0
    } else {
        polygon_area(&poly).max(0.0)
    }
}

fn to_f64(p: LatticePoint) -> Vector2<f64> {
    Vector2::new(p.m as f64, p.n as f64)
}

/// Overlap of two lattice triangles, in lattice-area units. Nested and
/// disjoint configurations are decided exactly; only genuinely straddling
/// pairs are clipped in floating point.
pub fn lattice_overlap(a: &Tri, b: &Tri) -> f64 {
    if a.iter().all(|&p| contains(b, p)) {
        return 0.5 * twice_area(a) as f64;
    }
    if b.iter().all(|&p| contains(a, p)) {
        return 0.5 * twice_area(b) as f64;
    }
    for (s, t) in [(a, b), (b, a)] {
        for k in 0..3 {
            if t.iter().all(|&p| orient(s[k], s[(k + 1) % 3], p) <= 0) {
                return 0.0;
            }
        }
    }
    overlap_area(&a.map(to_f64), &b.map(to_f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(m: i64, n: i64) -> LatticePoint {
        LatticePoint::new(m, n)
    }

    #[test]
    fn identical_and_disjoint() {
        let t = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.3, 0.9)];
        assert!((overlap_area(&t, &t) - 0.45).abs() < 1e-15);
        let s = t.map(|p| p + Vector2::new(5.0, 0.0));
        assert_eq!(overlap_area(&t, &s), 0.0);
    }

    #[test]
    fn clipping_on_edge() {
        let t = [lp(0, 0), lp(2, 0), lp(0, 2)];
        let (lo, hi, edge) = clip_segment(&t, lp(0, 0), lp(2, 0)).unwrap();
        assert_eq!((lo, hi, edge), (Ratio::from_integer(0), Ratio::from_integer(1), Some(0)));
        let (lo, hi, edge) = clip_segment(&t, lp(-1, 1), lp(2, 0)).unwrap();
        assert_eq!((lo, hi, edge), (Ratio::new(1, 2), Ratio::from_integer(1), None));
        assert!(clip_segment(&t, lp(3, 0), lp(1, 1)).is_none());
    }

    #[test]
    fn lattice_overlap_cases() {
        let big = [lp(0, 0), lp(2, 0), lp(0, 2)];
        assert_eq!(lattice_overlap(&[lp(0, 0), lp(1, 0), lp(0, 1)], &big), 0.5);
        assert_eq!(lattice_overlap(&[lp(2, 0), lp(3, 0), lp(2, 1)], &big), 0.0);
        // green half of the big cell against a straddling micro triangle
        let half = [lp(0, 0), lp(2, 0), lp(1, 1)];
        let micro = [lp(1, 1), lp(0, 1), lp(1, 0)];
        assert!((lattice_overlap(&micro, &half) - 0.25).abs() < 1e-15);
    }
}
