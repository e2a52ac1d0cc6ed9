//! Experiment driver: configuration, reference solutions, error metrics and
//! result files for the di-vacancy and micro-crack studies.
//!
//! Configuration files are flat `key = value` lines with dotted keys; `#`
//! starts a comment. Every key has a default, and an unknown key is an
//! error naming it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::{Matrix2, Vector2};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adapt::{self, AdaptConfig, AdaptTrace, Problem, StepView};
use crate::error::{Error, Result};
use crate::estimate::EstimatorConstants;
use crate::grac::{Method, ParamCache};
use crate::lattice::Crystal;
use crate::mesh::{AcMesh, MeshParams, MicroMesh};
use crate::model::{AtomisticModel, Model};
use crate::potential::EamParams;
use crate::solver::{solve_equilibrium, Descent, SolveOptions};
use crate::stress::micro_gradient;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Divacancy,
    Microcrack,
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Divacancy => "divacancy",
            ProblemKind::Microcrack => "microcrack",
        }
    }

    pub fn defect_count(&self) -> usize {
        match self {
            ProblemKind::Divacancy => 2,
            ProblemKind::Microcrack => 11,
        }
    }
}

/// Reconstruction method and stabilisation, tagged as in the figure
/// legends: `l1`/`l2` for ℓ¹/least squares, `s1`/`s0` with/without
/// stabilisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub method: Method,
    pub stabilize: bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant { method: Method::L1, stabilize: true },
        Variant { method: Method::L1, stabilize: false },
        Variant { method: Method::Lsq, stabilize: true },
        Variant { method: Method::Lsq, stabilize: false },
    ];

    pub fn tag(&self) -> String {
        let m = match self.method {
            Method::L1 => "l1",
            Method::Lsq => "l2",
        };
        format!("{m}s{}", self.stabilize as u8)
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::InvalidValue { key: "variant".into(), value: s.into() })
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    /// Isotropic stretch (di-vacancy only).
    pub stretch: f64,
    /// Tensile stretch (micro-crack only).
    pub gamma_i: f64,
    pub gamma_ii: f64,
    pub eam: EamParams,
    pub variant: Variant,
    pub kappa: f64,
    pub mesh: MeshParams,
    pub adapt: AdaptConfig,
    pub constants: EstimatorConstants,
    pub solver: SolveOptions,
    /// Reference radius; zero picks `max(4 R₀, 4 R_max)`.
    pub r_ref: i64,
    pub reference_tol: f64,
    /// Skip the reference and report NaN errors.
    pub reference_enabled: bool,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Record wall times; off writes zeros so reruns are byte-identical.
    pub timing: bool,
    pub snapshots: bool,
    /// Krylov dimension of the final stability probe, zero to skip.
    pub stability_probes: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn defaults(problem: ProblemKind) -> Self {
        let (stretch, gamma_i) = match problem {
            ProblemKind::Divacancy => (0.03, 0.0),
            ProblemKind::Microcrack => (0.0, 0.03),
        };
        ExperimentConfig {
            problem,
            stretch,
            gamma_i,
            gamma_ii: 0.03,
            eam: EamParams::default(),
            variant: Variant::ALL[0],
            kappa: 1.0,
            mesh: MeshParams { r_ai: if problem == ProblemKind::Microcrack { 8 } else { 4 }, radius: 16, grading: 1.0, macro_size: 8, reflection: true },
            adapt: AdaptConfig { n_max: 10_000, r_max: 96, ..Default::default() },
            constants: EstimatorConstants::default(),
            solver: SolveOptions { tol: 1e-8, max_iter: 20_000, descent: Descent::Ncg },
            r_ref: 0,
            reference_tol: 1e-9,
            reference_enabled: true,
            cache_dir: PathBuf::from("cache"),
            out_dir: PathBuf::from("out"),
            timing: true,
            snapshots: true,
            stability_probes: 0,
            seed: 0,
        }
    }

    /// Parses a configuration file's text. `problem` may appear anywhere;
    /// it selects the defaults the other keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", no + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let problem = match pairs.iter().rev().find(|(k, _)| k == "problem").map(|(_, v)| v.as_str()) {
            None | Some("divacancy") => ProblemKind::Divacancy,
            Some("microcrack") => ProblemKind::Microcrack,
            Some(v) => return Err(Error::InvalidValue { key: "problem".into(), value: v.into() }),
        };
        let mut c = ExperimentConfig::defaults(problem);
        let (mut method, mut stabilize) = (c.variant.method, c.variant.stabilize);
        let mut eam = (c.eam.a, c.eam.b, c.eam.c);
        for (k, v) in &pairs {
            let bad = || Error::InvalidValue { key: k.clone(), value: v.clone() };
            let f = || v.parse::<f64>().map_err(|_| bad());
            let i = || v.parse::<i64>().map_err(|_| bad());
            let u = || v.parse::<usize>().map_err(|_| bad());
            let b = || match v.as_str() {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(bad()),
            };
            match k.as_str() {
                "problem" => {}
                "S" => c.stretch = f()?,
                "gamma_I" => c.gamma_i = f()?,
                "gamma_II" => c.gamma_ii = f()?,
                "eam.a" => eam.0 = f()?,
                "eam.b" => eam.1 = f()?,
                "eam.c" => eam.2 = f()?,
                "grac.method" => {
                    method = match v.as_str() {
                        "l1" => Method::L1,
                        "lsq" | "l2" => Method::Lsq,
                        _ => return Err(bad()),
                    }
                }
                "grac.stabilize" => stabilize = b()?,
                "grac.kappa" => c.kappa = f()?,
                "mesh.R_ai" => c.mesh.r_ai = i()?,
                "mesh.R0" => c.mesh.radius = i()?,
                "mesh.macro" => c.mesh.macro_size = i()?,
                "mesh.grading" => c.mesh.grading = f()?,
                "mesh.reflection" => c.mesh.reflection = b()?,
                "adapt.N_max" => c.adapt.n_max = u()?,
                "adapt.rho_tol" => c.adapt.rho_tol = f()?,
                "adapt.tau1" => c.adapt.tau1 = f()?,
                "adapt.tau2" => c.adapt.tau2 = f()?,
                "adapt.tau3" => c.adapt.tau3 = f()?,
                "adapt.R_max" => c.adapt.r_max = i()?,
                "adapt.K" => c.adapt.k_max = i()?,
                "adapt.theta" => c.adapt.theta = f()?,
                "adapt.max_steps" => c.adapt.max_steps = u()?,
                "estimator.C1" => c.constants.c1 = f()?,
                "estimator.C2" => c.constants.c2 = f()?,
                "estimator.C3" => c.constants.c3 = f()?,
                "solver.tol" => c.solver.tol = f()?,
                "solver.max_iter" => c.solver.max_iter = u()?,
                "reference.R_ref" => c.r_ref = i()?,
                "reference.tol" => c.reference_tol = f()?,
                "reference.enabled" => c.reference_enabled = b()?,
                "cache.dir" => c.cache_dir = PathBuf::from(v),
                "output.dir" => c.out_dir = PathBuf::from(v),
                "output.timing" => c.timing = b()?,
                "output.snapshots" => c.snapshots = b()?,
                "output.stability_probes" => c.stability_probes = u()?,
                "seed" => c.seed = v.parse::<u64>().map_err(|_| bad())?,
                _ => return Err(Error::UnknownKey(k.clone())),
            }
        }
        c.eam = EamParams::new(eam.0, eam.1, eam.2);
        c.variant = Variant { method, stabilize };
        c.adapt.validate()?;
        if c.adapt.r_max < c.mesh.radius {
            return Err(Error::InvalidValue { key: "adapt.R_max".into(), value: c.adapt.r_max.to_string() });
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut c = Self::parse(&text)?;
        // relative paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.cache_dir, &mut c.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn crystal(&self) -> Crystal {
        Crystal::triangular(self.problem.defect_count())
    }

    pub fn reference_radius(&self) -> i64 {
        if self.r_ref > 0 {
            self.r_ref
        } else {
            (4 * self.mesh.radius).max(4 * self.adapt.r_max)
        }
    }

    pub fn with_variant(&self, v: Variant) -> Self {
        ExperimentConfig { variant: v, ..self.clone() }
    }

    pub fn problem(&self) -> Result<Problem> {
        let crystal = self.crystal();
        Ok(Problem {
            strain: build_strain(self)?,
            crystal,
            eam: self.eam,
            mesh: self.mesh.clone(),
            method: self.variant.method,
            kappa: if self.variant.stabilize { self.kappa } else { 0.0 },
            constants: self.constants,
            solve: self.solver,
        })
    }
}

/// `F₀`, the isotropic ground state of the Cauchy–Born density.
pub fn ground_state(eam: &EamParams, crystal: &Crystal) -> Result<Matrix2<f64>> {
    Ok(Matrix2::identity() * eam.ground_state_scale(crystal.range_cart())?)
}

/// Applied macroscopic strain `B` for the configured problem.
pub fn build_strain(c: &ExperimentConfig) -> Result<Matrix2<f64>> {
    let f0 = ground_state(&c.eam, &c.crystal())?;
    let m = match c.problem {
        ProblemKind::Divacancy => Matrix2::new(1.0 + c.stretch, c.gamma_ii, 0.0, 1.0 + c.stretch),
        ProblemKind::Microcrack => Matrix2::new(1.0, c.gamma_ii, 0.0, 1.0 + c.gamma_i),
    };
    Ok(m * f0)
}

/// Full atomistic equilibrium on the reference domain.
#[derive(Clone, Debug)]
pub struct Reference {
    pub radius: i64,
    pub u: Vec<Vector2<f64>>,
    pub energy: f64,
}

const REF_MAGIC: &[u8; 8] = b"ACREF001";

fn reference_key(c: &ExperimentConfig, b: &Matrix2<f64>, radius: i64) -> String {
    let mut h = Sha256::new();
    h.update(REF_MAGIC);
    h.update((c.problem.defect_count() as u64).to_le_bytes());
    for v in [c.eam.a, c.eam.b, c.eam.c, c.reference_tol] {
        h.update(v.to_bits().to_le_bytes());
    }
    for v in b.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update(radius.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_reference(path: &Path, r: &Reference) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 16 * r.u.len());
    buf.extend_from_slice(REF_MAGIC);
    buf.extend_from_slice(&r.radius.to_le_bytes());
    buf.extend_from_slice(&(r.u.len() as u64).to_le_bytes());
    buf.extend_from_slice(&r.energy.to_le_bytes());
    for v in &r.u {
        buf.extend_from_slice(&v[0].to_le_bytes());
        buf.extend_from_slice(&v[1].to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_reference(path: &Path) -> Result<Reference> {
    let bytes = fs::read(path)?;
    let corrupt = || Error::InvalidConfig(format!("corrupt reference cache {}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != REF_MAGIC {
        return Err(corrupt());
    }
    let word = |k: usize| -> [u8; 8] { bytes[k..k + 8].try_into().unwrap() };
    let radius = i64::from_le_bytes(word(8));
    let n = u64::from_le_bytes(word(16)) as usize;
    let energy = f64::from_le_bytes(word(24));
    if bytes.len() != 32 + 16 * n {
        return Err(corrupt());
    }
    let u = (0..n)
        .map(|i| Vector2::new(f64::from_le_bytes(word(32 + 16 * i)), f64::from_le_bytes(word(40 + 16 * i))))
        .collect();
    Ok(Reference { radius, u, energy })
}

/// Solves (or loads from the cache) the reference problem.
pub fn reference_solution(c: &ExperimentConfig) -> Result<(AtomisticModel, Reference)> {
    let b = build_strain(c)?;
    let radius = c.reference_radius();
    let model = AtomisticModel::new(&c.crystal(), c.eam, b, radius)?;
    fs::create_dir_all(&c.cache_dir)?;
    let path = c.cache_dir.join(format!("ref-{}.bin", reference_key(c, &b, radius)));
    if path.exists() {
        let r = read_reference(&path)?;
        if r.radius == radius && r.u.len() == model.n_nodes() {
            info!("reference loaded from {}", path.display());
            return Ok((model, r));
        }
    }
    info!("solving the reference problem on R = {radius}");
    let opts = SolveOptions { tol: c.reference_tol, max_iter: 100_000, descent: Descent::Ncg };
    let (u, rep) = solve_equilibrium(&model, &vec![Vector2::zeros(); model.n_nodes()], &opts)?;
    let r = Reference { radius, u, energy: rep.energy };
    write_reference(&path, &r)?;
    Ok((model, r))
}

/// Samples a coupled displacement on the reference lattice (zero outside
/// the coupled domain).
pub fn transfer(model: &AtomisticModel, mesh: &AcMesh, u: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    model.field(|p| mesh.eval(u, p))
}

/// `‖∇(u − v)‖_{L²}` over the micro-triangles of the reference domain that
/// do not touch a vacancy.
pub fn h1_seminorm_diff(model: &AtomisticModel, u: &[Vector2<f64>], v: &[Vector2<f64>]) -> f64 {
    let crystal = model.crystal();
    let area = 0.5 * crystal.det();
    let micro = MicroMesh::new(model.radius());
    let mut s = 0.0;
    for t in &micro.cells {
        if t.vertices().iter().any(|&p| crystal.is_defect(p)) {
            continue;
        }
        let g = micro_gradient(crystal, t, |p| model.value(u, p) - model.value(v, p));
        s += area * g.norm_squared();
    }
    s.sqrt()
}

/// `(H¹ error, energy error)` of a coupled solution against the reference.
pub fn error_metrics(model: &AtomisticModel, reference: &Reference, mesh: &AcMesh, u_h: &[Vector2<f64>]) -> Result<(f64, f64)> {
    let ua = transfer(model, mesh, u_h);
    let h1 = h1_seminorm_diff(model, &ua, &reference.u);
    let e = model.energy(&ua)?.total();
    Ok((h1, (e - reference.energy).abs()))
}

#[derive(Serialize)]
struct Summary<'a> {
    problem: &'a str,
    variant: String,
    stop: &'a str,
    steps: usize,
    final_n: usize,
    final_r: i64,
    final_r_ai: i64,
    eta_t: f64,
    eta_m: f64,
    eta_c: f64,
    rho: f64,
    h1_err: f64,
    energy_err: f64,
    reference_radius: Option<i64>,
    h1_slope_tail: Option<f64>,
    param_cache_hits: usize,
    param_cache_misses: usize,
    enlargements_skipped: usize,
    stability_c0: Option<f64>,
    seconds_total: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Slope over the tail half of a trace.
pub fn tail_slope(trace: &AdaptTrace) -> Option<f64> {
    let pts: Vec<(f64, f64)> = trace.records.iter().map(|r| (r.n as f64, r.h1_err)).collect();
    loglog_slope(&pts[pts.len() / 2..])
}

pub const CSV_HEADER: &str = "step,N,R,eta_T,eta_M,eta_C,rho,h1_err,energy_err,seconds";

/// Writes the trace CSV.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &AdaptTrace, timing: bool) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in &trace.records {
        let secs = if timing { r.seconds } else { 0.0 };
        writeln!(
            w,
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step, r.n, r.r, r.eta_t, r.eta_m, r.eta_c, r.rho, r.h1_err, r.energy_err, secs
        )?;
    }
    Ok(())
}

/// Result of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutput {
    pub trace: AdaptTrace,
    pub csv: PathBuf,
    pub summary: PathBuf,
}

/// Runs the adaptive loop for the configured variant and writes
/// `trace_<tag>.csv`, `summary_<tag>.json` and the final mesh.
pub fn run_experiment(c: &ExperimentConfig) -> Result<ExperimentOutput> {
    let t0 = Instant::now();
    let tag = c.variant.tag();
    fs::create_dir_all(&c.out_dir)?;
    let reference = if c.reference_enabled { Some(reference_solution(c)?) } else { None };
    let problem = c.problem()?;
    let mut cache = ParamCache::on_disk(c.cache_dir.join("params"))?;
    let mut last: Option<(AcMesh, Vec<Vector2<f64>>)> = None;
    let mut observe = |v: &StepView| -> Result<(f64, f64)> {
        let out = match &reference {
            Some((model, r)) => error_metrics(model, r, v.model.mesh(), v.u)?,
            None => (f64::NAN, f64::NAN),
        };
        last = Some((v.model.mesh().clone(), v.u.to_vec()));
        Ok(out)
    };
    let trace = adapt::run(&problem, &c.adapt, &mut cache, &mut observe)?;
    let (mesh, u) = last.expect("at least one step");

    let stability_c0 = if c.stability_probes > 0 {
        let sys = crate::grac::assemble_constraints(&mesh);
        let params = match sys {
            Ok(sys) if !sys.sites.is_empty() => Some(crate::grac::solve_cached(&sys, c.variant.method, &mut cache)?),
            _ => None,
        };
        let model = crate::model::AcModel::new(&mesh, problem.eam, problem.strain, params.as_ref(), problem.kappa)?;
        Some(crate::solver::stability_check(&model, &u, c.stability_probes, Some(&probe_vector(c.seed, 2 * model.free_nodes().len())))?.c0)
    } else {
        None
    };

    let csv = c.out_dir.join(format!("trace_{tag}.csv"));
    write_trace_csv(BufWriter::new(fs::File::create(&csv)?), &trace, c.timing)?;
    if c.snapshots {
        mesh.dump_vertices(BufWriter::new(fs::File::create(c.out_dir.join(format!("mesh_{tag}_vertices.txt")))?))?;
        mesh.dump_elements(BufWriter::new(fs::File::create(c.out_dir.join(format!("mesh_{tag}_elements.txt")))?))?;
    }
    let fin = trace.records.last().unwrap();
    let summary = Summary {
        problem: c.problem.name(),
        variant: tag.clone(),
        stop: trace.stop.name(),
        steps: trace.records.len(),
        final_n: fin.n,
        final_r: fin.r,
        final_r_ai: fin.r_ai,
        eta_t: fin.eta_t,
        eta_m: fin.eta_m,
        eta_c: fin.eta_c,
        rho: fin.rho,
        h1_err: fin.h1_err,
        energy_err: fin.energy_err,
        reference_radius: reference.as_ref().map(|(_, r)| r.radius),
        h1_slope_tail: tail_slope(&trace),
        param_cache_hits: cache.hits,
        param_cache_misses: cache.misses,
        enlargements_skipped: trace.enlargement_skipped,
        stability_c0,
        seconds_total: if c.timing { t0.elapsed().as_secs_f64() } else { 0.0 },
    };
    let path = c.out_dir.join(format!("summary_{tag}.json"));
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    json.push('\n');
    fs::write(&path, json)?;
    Ok(ExperimentOutput { trace, csv, summary: path })
}

/// Deterministic start vector for the stability probe.
fn probe_vector(seed: u64, n: usize) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Human-readable dump of the effective configuration.
pub fn describe(c: &ExperimentConfig) -> String {
    let mut m = BTreeMap::new();
    m.insert("problem", c.problem.name().to_string());
    m.insert("variant", c.variant.tag());
    m.insert("mesh.R0", c.mesh.radius.to_string());
    m.insert("mesh.R_ai", c.mesh.r_ai.to_string());
    m.insert("adapt.N_max", c.adapt.n_max.to_string());
    m.insert("adapt.R_max", c.adapt.r_max.to_string());
    m.insert("reference.R_ref", c.reference_radius().to_string());
    let mut s = String::new();
    for (k, v) in m {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}
