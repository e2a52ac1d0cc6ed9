//! Self-checks run by `acgrac verify`: patch tests, weak-form identities,
//! gradient checks, bond-weight partition and the divergence-free lemma.

use std::time::Instant;

use nalgebra::{Matrix2, Vector2};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grac::{self, assemble_constraints, solve_l1};
use crate::lattice::{BondKind, Crystal};
use crate::mesh::{build_ac_mesh, AcMesh, MeshParams, MicroMesh};
use crate::model::{AcModel, AtomisticModel, Model};
use crate::potential::EamParams;
use crate::stress::{self, StressField, StressKind};

#[derive(Clone, Debug, serde::Serialize)]
pub struct Check {
    pub name: &'static str,
    /// Worst observed defect; the check passes when `value <= tol`.
    pub value: f64,
    pub tol: f64,
    pub samples: usize,
    pub seconds: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.tol
    }
}

fn timed(name: &'static str, tol: f64, f: impl FnOnce() -> Result<(f64, usize)>) -> Result<Check> {
    let t = Instant::now();
    let (value, samples) = f()?;
    Ok(Check { name, value, tol, samples, seconds: t.elapsed().as_secs_f64() })
}

fn f0(c: &Crystal, eam: &EamParams) -> Result<Matrix2<f64>> {
    Ok(Matrix2::identity() * eam.ground_state_scale(c.range_cart())?)
}

fn mesh(c: &Crystal, r_ai: i64) -> Result<AcMesh> {
    build_ac_mesh(c, &MeshParams { r_ai, radius: 16, grading: 1.0, macro_size: 8, reflection: true })
}

fn random_strain(f0: &Matrix2<f64>, rng: &mut ChaCha8Rng, rel: f64) -> Matrix2<f64> {
    // Frobenius norm of the perturbation stays below `rel`
    let p = Matrix2::from_fn(|_, _| rng.random_range(-0.5..0.5) * rel);
    f0 * (Matrix2::identity() + p)
}

fn random_nodal(model: &dyn Model, rng: &mut ChaCha8Rng, amp: f64) -> Vec<Vector2<f64>> {
    let mut u = vec![Vector2::zeros(); model.n_nodes()];
    for &i in model.free_nodes() {
        u[i] = Vector2::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp));
    }
    u
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Energy and force patch tests for `n` random strains within 5% of `F₀`
/// on the defect-free lattice with ℓ¹ parameters.
pub fn patch_tests(n: usize, seed: u64) -> Result<[Check; 2]> {
    let c = Crystal::triangular(0);
    let eam = EamParams::default();
    let t = Instant::now();
    let m = mesh(&c, 4)?;
    let params = solve_l1(&assemble_constraints(&m)?)?;
    let f0 = f0(&c, &eam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e_err, mut f_err) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let b = random_strain(&f0, &mut rng, 0.05);
        let g: Vec<Vector2<f64>> = c.range_cart().iter().map(|r| b * r).collect();
        let v = eam.site_energy(&g)?;
        for site in &params.sites {
            let dy: Vec<Vector2<f64>> = site.sigmas.iter().map(|s| b * c.position(*s)).collect();
            let mut gs = vec![Vector2::zeros(); dy.len()];
            let vi = grac::interface_energy(&eam, site, &dy, &mut gs)?;
            e_err = e_err.max((vi - v).abs());
        }
        let model = AcModel::new(&m, eam, b, Some(&params), 1.0)?;
        f_err = f_err.max(model.max_force(&vec![Vector2::zeros(); model.n_nodes()])?);
    }
    let s = t.elapsed().as_secs_f64();
    Ok([
        Check { name: "energy patch test", value: e_err, tol: 1e-12, samples: n, seconds: s },
        Check { name: "force patch test", value: f_err, tol: 1e-8, samples: n, seconds: s },
    ])
}

/// `⟨δE, v⟩` against `Σ|T| σ:∇v` for σᵃ and σʰ, `n` fields times `n` test
/// functions each. Returns the worst relative defects.
pub fn weak_form(n: usize, seed: u64) -> Result<[Check; 2]> {
    let c = Crystal::triangular(2);
    let eam = EamParams::default();
    let b = f0(&c, &eam)? * Matrix2::new(1.02, 0.01, 0.0, 1.01);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let atomistic = timed("weak form (atomistic stress)", 1e-10, || {
        let m = AtomisticModel::new(&c, eam, b, 7)?;
        let micro = MicroMesh::new(7);
        let mut worst = 0.0f64;
        for _ in 0..n {
            let u = m.field(|_| Vector2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)));
            let s = stress::sigma_a(&m, &micro, &u)?;
            let mut g = vec![Vector2::zeros(); m.n_nodes()];
            m.gradient(&u, &mut g)?;
            for _ in 0..n {
                let v = m.field(|_| Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
                let lhs: f64 = g.iter().zip(&v).map(|(a, b)| a.dot(b)).sum();
                let rhs = stress::weak_form_micro(&c, &micro, &s, |p| m.value(&v, p));
                worst = worst.max(rel(lhs, rhs));
            }
        }
        Ok((worst, n * n))
    })?;

    let coupled = timed("weak form (coupled stress)", 1e-10, || {
        let m = mesh(&c, 4)?;
        let params = solve_l1(&assemble_constraints(&m)?)?;
        let model = AcModel::new(&m, eam, b, Some(&params), 1.0)?;
        let mut worst = 0.0f64;
        for _ in 0..n {
            let u = random_nodal(&model, &mut rng, 0.03);
            let s = stress::sigma_h(&model, &u)?;
            let mut g = vec![Vector2::zeros(); model.n_nodes()];
            model.gradient(&u, &mut g)?;
            for _ in 0..n {
                let v = random_nodal(&model, &mut rng, 1.0);
                let lhs: f64 = g.iter().zip(&v).map(|(a, b)| a.dot(b)).sum();
                worst = worst.max(rel(lhs, stress::weak_form(&m, &s, &v)));
            }
        }
        Ok((worst, n * n))
    })?;
    Ok([atomistic, coupled])
}

/// Central differences of the site, interface, stabilisation and total
/// energies at `n` random inputs spread over the four kinds.
pub fn gradients(n: usize, seed: u64) -> Result<Check> {
    let c = Crystal::triangular(2);
    let eam = EamParams::default();
    let f0 = f0(&c, &eam)?;
    let m = mesh(&c, 4)?;
    let params = solve_l1(&assemble_constraints(&m)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    timed("gradient finite differences", 1e-6, || {
        let mut worst = 0.0f64;
        let jitter = |rng: &mut ChaCha8Rng, v: Vector2<f64>| v + Vector2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        for k in 0..n {
            match k % 4 {
                0 => {
                    let b = random_strain(&f0, &mut rng, 0.1);
                    let g: Vec<Vector2<f64>> = c.range_cart().iter().map(|r| jitter(&mut rng, b * r)).collect();
                    let mut d = vec![Vector2::zeros(); g.len()];
                    eam.site_gradient(&g, &mut d)?;
                    let (i, j) = (rng.random_range(0..g.len()), rng.random_range(0..2));
                    let (mut gp, mut gm) = (g.clone(), g.clone());
                    gp[i][j] += h;
                    gm[i][j] -= h;
                    let fd = (eam.site_energy(&gp)? - eam.site_energy(&gm)?) / (2.0 * h);
                    worst = worst.max(rel(fd, d[i][j]));
                }
                1 => {
                    let site = &params.sites[rng.random_range(0..params.sites.len())];
                    let b = random_strain(&f0, &mut rng, 0.1);
                    let dy: Vec<Vector2<f64>> = site.sigmas.iter().map(|s| jitter(&mut rng, b * c.position(*s))).collect();
                    let mut d = vec![Vector2::zeros(); dy.len()];
                    grac::interface_energy(&eam, site, &dy, &mut d)?;
                    let (i, j) = (rng.random_range(0..dy.len()), rng.random_range(0..2));
                    let (mut p, mut q) = (dy.clone(), dy.clone());
                    p[i][j] += h;
                    q[i][j] -= h;
                    let mut tmp = vec![Vector2::zeros(); dy.len()];
                    let fd = (grac::interface_energy(&eam, site, &p, &mut tmp)? - grac::interface_energy(&eam, site, &q, &mut tmp)?) / (2.0 * h);
                    worst = worst.max(rel(fd, d[i][j]));
                }
                2 => {
                    let r = |rng: &mut ChaCha8Rng| Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    let mut x: Vec<Vector2<f64>> = (0..7).map(|_| r(&mut rng)).collect();
                    let kappa = rng.random_range(0.1..2.0);
                    let energy = |x: &[Vector2<f64>]| {
                        grac::stabilization(x[0], &[x[1], x[2], x[3]], &[x[4], x[5], x[6]], kappa)
                    };
                    let (_, gc, gp, gm) = energy(&x);
                    let grads = [gc, gp[0], gp[1], gp[2], gm[0], gm[1], gm[2]];
                    let (i, j) = (rng.random_range(0..7), rng.random_range(0..2));
                    x[i][j] += h;
                    let ep = energy(&x).0;
                    x[i][j] -= 2.0 * h;
                    let em = energy(&x).0;
                    worst = worst.max(rel((ep - em) / (2.0 * h), grads[i][j]));
                }
                _ => {
                    let b = random_strain(&f0, &mut rng, 0.05);
                    let model = AcModel::new(&m, eam, b, Some(&params), 1.0)?;
                    let u = random_nodal(&model, &mut rng, 0.03);
                    let mut g = vec![Vector2::zeros(); model.n_nodes()];
                    model.gradient(&u, &mut g)?;
                    let free = model.free_nodes();
                    let (i, j) = (free[rng.random_range(0..free.len())], rng.random_range(0..2));
                    let (mut up, mut um) = (u.clone(), u.clone());
                    up[i][j] += h;
                    um[i][j] -= h;
                    let fd = (model.energy(&up)?.total() - model.energy(&um)?.total()) / (2.0 * h);
                    worst = worst.max(rel(fd, g[i][j]));
                }
            }
        }
        Ok((worst, n))
    })
}

/// Bond weights sum to one exactly and the number of crossed
/// micro-triangles matches the bond type. Counts failing directions.
pub fn bond_partition() -> Result<Check> {
    let c = Crystal::triangular(0);
    timed("bond-weight partition", 0.0, || {
        let mut failures = 0;
        for rho in c.range() {
            let w = stress::bond_weights(rho.offset())?;
            let total: Ratio<i64> = w.iter().map(|x| x.1).sum();
            let (a, b) = (rho.alpha() as i64, rho.beta() as i64);
            let count = match rho.kind() {
                BondKind::TypeI => 2 * a,
                BondKind::TypeII if a != b => 2 * (a + b - 1),
                BondKind::TypeII => 2 * a,
            };
            if total != Ratio::from_integer(1) || w.len() as i64 != count {
                failures += 1;
            }
        }
        Ok((failures as f64, c.range().len()))
    })
}

/// `σ₀ + ∇c J` is divergence free for `n` random Crouzeix–Raviart fields,
/// and the stress correction never increases the interface mismatch.
pub fn divergence_free(n: usize, seed: u64) -> Result<[Check; 2]> {
    let c = Crystal::triangular(2);
    let eam = EamParams::default();
    let m = mesh(&c, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lemma = timed("divergence-free CR fields", 1e-12, || {
        let mut worst = 0.0f64;
        for _ in 0..n {
            let s0 = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let cf: Vec<Vector2<f64>> =
                (0..m.faces().len()).map(|_| Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let sigma = stress::cr_curl(&m, &cf).iter().map(|d| s0 + d).collect();
            worst = worst.max(stress::is_divergence_free(&m, &StressField { kind: StressKind::Coupled, sigma }));
        }
        Ok((worst, n))
    })?;
    let correction = timed("correction reduces mismatch", 0.0, || {
        let params = solve_l1(&assemble_constraints(&m)?)?;
        let f0 = f0(&c, &eam)?;
        let micro = MicroMesh::new(m.radius());
        let mut worst = 0.0f64;
        let trials = 5;
        for _ in 0..trials {
            let b = random_strain(&f0, &mut rng, 0.05);
            let model = AcModel::new(&m, eam, b, Some(&params), 1.0)?;
            let u = random_nodal(&model, &mut rng, 0.02);
            let sh = stress::sigma_h(&model, &u)?;
            let am = AtomisticModel::new(&c, eam, b, m.radius())?;
            let ua = am.field(|p| m.eval(&u, p));
            let sa = stress::sigma_a(&am, &micro, &ua)?;
            let cr = stress::cr_correct(&m, &micro, &sa, &sh, &stress::correction_support(&model)?)?;
            // relative increase, zero when the mismatch does not grow
            worst = worst.max((cr.mismatch_after - cr.mismatch_before) / cr.mismatch_before.max(f64::MIN_POSITIVE) - 1e-12);
        }
        Ok((worst.max(0.0), trials))
    })?;
    Ok([lemma, correction])
}

/// The full suite with the sample counts used by the CLI.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    out.extend(patch_tests(20, seed)?);
    out.extend(weak_form(20, seed + 1)?);
    out.push(gradients(100, seed + 2)?);
    out.push(bond_partition()?);
    out.extend(divergence_free(50, seed + 3)?);
    Ok(out)
}
