//! The adaptive loop: solve, estimate, mark, refine.
//!
//! Marking is Dörfler's bulk criterion followed by the interface test: if
//! enough of the marked weight sits within `k` layers of the interface, the
//! interface moves out by `k` layers instead of refining those elements.
//! The domain grows by one ring of macro cells whenever the truncation
//! estimator dominates.

use std::time::Instant;

use log::info;
use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::estimate::{estimate, EstimatorConstants, EstimatorReport};
use crate::grac::{assemble_constraints, solve_cached, Method, ParamCache, ReconstructionParams};
use crate::lattice::Crystal;
use crate::mesh::{build_ac_mesh, AcMesh, MeshParams, Region, Tag};
use crate::model::AcModel;
use crate::potential::EamParams;
use crate::solver::{solve_equilibrium, SolveOptions};

#[derive(Clone, Debug)]
pub struct AdaptConfig {
    pub n_max: usize,
    pub rho_tol: f64,
    pub tau1: f64,
    /// Ratio stop `η_T/(η_M+η_C) ≥ τ₂`; infinite disables it.
    pub tau2: f64,
    pub tau3: f64,
    pub r_max: i64,
    /// Largest interface probe depth `K`.
    pub k_max: i64,
    pub theta: f64,
    /// Safety cap on the number of steps.
    pub max_steps: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            n_max: 20_000,
            rho_tol: 1e-3,
            tau1: 0.5,
            tau2: f64::INFINITY,
            tau3: 0.7,
            r_max: 128,
            k_max: 3,
            theta: 0.5,
            max_steps: 200,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, v: String| Err(Error::InvalidValue { key: k.into(), value: v });
        if !(self.tau1 > 0.0 && self.tau1 < 1.0) {
            return bad("adapt.tau1", self.tau1.to_string());
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("adapt.theta", self.theta.to_string());
        }
        if self.k_max < 1 {
            return bad("adapt.K", self.k_max.to_string());
        }
        if !(self.tau3 > 0.0) {
            return bad("adapt.tau3", self.tau3.to_string());
        }
        Ok(())
    }
}

/// Everything that stays fixed during a run.
#[derive(Clone, Debug)]
pub struct Problem {
    pub crystal: Crystal,
    pub eam: EamParams,
    pub strain: Matrix2<f64>,
    pub mesh: MeshParams,
    pub method: Method,
    /// Stabilisation strength, zero to disable.
    pub kappa: f64,
    pub constants: EstimatorConstants,
    pub solve: SolveOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    DofLimit,
    Tolerance,
    RadiusLimit,
    Ratio,
    /// No refinement, expansion or enlargement was possible.
    Stalled,
    StepLimit,
}

impl StopReason {
    pub fn name(&self) -> &'static str {
        match self {
            StopReason::DofLimit => "dof_limit",
            StopReason::Tolerance => "tolerance",
            StopReason::RadiusLimit => "radius_limit",
            StopReason::Ratio => "ratio",
            StopReason::Stalled => "stalled",
            StopReason::StepLimit => "step_limit",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub n: usize,
    pub r: i64,
    pub r_ai: i64,
    pub eta_t: f64,
    pub eta_m: f64,
    pub eta_c: f64,
    pub rho: f64,
    pub h1_err: f64,
    pub energy_err: f64,
    pub energy: f64,
    pub seconds: f64,
    pub marked: usize,
    pub expanded: i64,
    pub enlarged: bool,
    pub refined: usize,
}

#[derive(Clone, Debug)]
pub struct AdaptTrace {
    pub records: Vec<StepRecord>,
    pub stop: StopReason,
    pub enlargement_skipped: usize,
}

/// Current mesh, reconstruction parameters and equilibrium displacement.
#[derive(Clone, Debug)]
pub struct State {
    pub mesh: AcMesh,
    pub params: Option<ReconstructionParams>,
    pub u: Vec<Vector2<f64>>,
}

/// What the caller sees after each solve, to attach reference errors.
pub struct StepView<'a> {
    pub step: usize,
    pub model: &'a AcModel<'a>,
    pub u: &'a [Vector2<f64>],
    pub report: &'a EstimatorReport,
}

/// Minimal set of elements carrying a `theta` share of the total: the
/// shortest prefix of the indicators sorted descending (ties by id).
pub fn dorfler_mark(indicators: &[f64], theta: f64) -> Vec<usize> {
    let total: f64 = indicators.iter().sum();
    if !(total > 0.0) {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..indicators.len()).collect();
    order.sort_by(|&a, &b| indicators[b].total_cmp(&indicators[a]).then(a.cmp(&b)));
    let goal = theta * total;
    let mut acc = 0.0;
    let mut out = Vec::new();
    for e in order {
        if acc >= goal {
            break;
        }
        acc += indicators[e];
        out.push(e);
    }
    out
}

/// First `k ≤ k_max` such that the marked continuum elements within `k`
/// layers of the interface carry a `tau1` share of the marked weight.
/// Returns `k` and the marked set without those elements, or `(0, marked)`.
pub fn interface_expansion_check(marked: &[usize], indicators: &[f64], mesh: &AcMesh, tau1: f64, k_max: i64) -> (i64, Vec<usize>) {
    if !matches!(mesh.region(), Region::Coupled { .. }) {
        return (0, marked.to_vec());
    }
    let total: f64 = marked.iter().map(|&e| indicators[e]).sum();
    let near = |e: usize, k: i64| mesh.elements()[e].tag == Tag::Continuum && mesh.interface_distance(e) <= k;
    for k in 1..=k_max {
        let s: f64 = marked.iter().filter(|&&e| near(e, k)).map(|&e| indicators[e]).sum();
        if s > 0.0 && s >= tau1 * total {
            return (k, marked.iter().copied().filter(|&e| !near(e, k)).collect());
        }
    }
    (0, marked.to_vec())
}

/// Outcome of one refinement step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Refinement {
    pub refined: usize,
    pub expanded: i64,
    pub enlarged: bool,
    pub enlargement_skipped: bool,
}

impl Refinement {
    pub fn changed(&self) -> bool {
        self.refined > 0 || self.expanded > 0 || self.enlarged
    }
}

/// Bisects `marked`, moves the interface out by `expand` layers and grows
/// the domain when `η_T ≥ τ₃ρ`. The displacement is carried over by
/// interpolation; parameters are re-solved by the next [`solve_state`].
pub fn refine_step(state: &mut State, marked: &[usize], expand: i64, report: &EstimatorReport, cfg: &AdaptConfig) -> Result<Refinement> {
    let old = state.mesh.clone();
    let mesh = &mut state.mesh;
    let mut out = Refinement::default();
    let cont: Vec<usize> = marked.iter().copied().filter(|&e| mesh.elements()[e].tag == Tag::Continuum).collect();
    if !cont.is_empty() {
        out.refined = mesh.bisect(&cont)?.refined;
    }
    let can_enlarge = |m: &AcMesh| m.radius() + m.macro_size() <= cfg.r_max;
    if report.eta_t >= cfg.tau3 * report.rho {
        if can_enlarge(mesh) {
            mesh.enlarge();
            out.enlarged = true;
        } else {
            out.enlargement_skipped = true;
        }
    }
    if expand > 0 {
        out.expanded = grow_interface(mesh, expand, cfg, &mut out)?;
    }
    if !out.changed() {
        // nothing to refine: move the interface by one layer
        out.expanded = grow_interface(mesh, 1, cfg, &mut out)?;
    }
    state.u = mesh.vertices().iter().map(|&p| old.eval(&state.u, p)).collect();
    if out.expanded > 0 {
        state.params = None;
    }
    Ok(out)
}

/// Expands the interface, enlarging the domain first when the fine region
/// would not fit. Returns the number of layers added.
fn grow_interface(mesh: &mut AcMesh, layers: i64, cfg: &AdaptConfig, out: &mut Refinement) -> Result<i64> {
    loop {
        match mesh.expand_interface(layers) {
            Ok(()) => return Ok(layers),
            Err(Error::InvalidConfig(_)) | Err(Error::Mesh(_)) => {
                if mesh.radius() + mesh.macro_size() > cfg.r_max {
                    out.enlargement_skipped = true;
                    return Ok(0);
                }
                mesh.enlarge();
                out.enlarged = true;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Solves for the reconstruction parameters if missing, then for the
/// equilibrium from the current displacement.
pub fn solve_state(state: &mut State, problem: &Problem, cache: &mut ParamCache) -> Result<f64> {
    if state.params.is_none() && matches!(state.mesh.region(), Region::Coupled { .. }) {
        let sys = assemble_constraints(&state.mesh)?;
        state.params = Some(solve_cached(&sys, problem.method, cache)?);
    }
    let model = AcModel::new(&state.mesh, problem.eam, problem.strain, state.params.as_ref(), problem.kappa)?;
    let (u, rep) = solve_equilibrium(&model, &state.u, &problem.solve)?;
    state.u = u;
    Ok(rep.energy)
}

/// Runs the adaptive loop. `observe` returns `(h1_err, energy_err)` for the
/// solved state of each step (NaN when no reference is available).
pub fn run(
    problem: &Problem,
    cfg: &AdaptConfig,
    cache: &mut ParamCache,
    observe: &mut dyn FnMut(&StepView) -> Result<(f64, f64)>,
) -> Result<AdaptTrace> {
    cfg.validate()?;
    let mesh = build_ac_mesh(&problem.crystal, &problem.mesh)?;
    let u = vec![Vector2::zeros(); mesh.vertices().len()];
    let mut state = State { mesh, params: None, u };
    let mut records = Vec::new();
    let mut skipped = 0;
    let at = |step: usize| move |e: Error| Error::Step { step, source: Box::new(e) };
    for step in 0.. {
        let t0 = Instant::now();
        let energy = solve_state(&mut state, problem, cache).map_err(at(step))?;
        let (rep, h1_err, energy_err) = {
            let model = AcModel::new(&state.mesh, problem.eam, problem.strain, state.params.as_ref(), problem.kappa).map_err(at(step))?;
            let rep = estimate(&model, &state.u, &problem.constants).map_err(at(step))?.report;
            let (h1, en) = observe(&StepView { step, model: &model, u: &state.u, report: &rep }).map_err(at(step))?;
            (rep, h1, en)
        };
        let n = state.mesh.dof();
        let mut rec = StepRecord {
            step,
            n,
            r: state.mesh.radius(),
            r_ai: state.mesh.r_ai(),
            eta_t: rep.eta_t,
            eta_m: rep.eta_m,
            eta_c: rep.eta_c,
            rho: rep.rho,
            h1_err,
            energy_err,
            energy,
            seconds: 0.0,
            marked: 0,
            expanded: 0,
            enlarged: false,
            refined: 0,
        };
        info!(
            "step {step}: N = {n}, R = {}, R_ai = {}, rho = {:.3e} (T {:.3e}, M {:.3e}, C {:.3e}), h1 = {h1_err:.3e}",
            rec.r, rec.r_ai, rep.rho, rep.eta_t, rep.eta_m, rep.eta_c
        );
        let stop = if n > cfg.n_max {
            Some(StopReason::DofLimit)
        } else if rep.rho < cfg.rho_tol {
            Some(StopReason::Tolerance)
        } else if state.mesh.radius() > cfg.r_max {
            Some(StopReason::RadiusLimit)
        } else if step + 1 >= cfg.max_steps {
            Some(StopReason::StepLimit)
        } else {
            None
        };
        if let Some(stop) = stop {
            rec.seconds = t0.elapsed().as_secs_f64();
            records.push(rec);
            return Ok(AdaptTrace { records, stop, enlargement_skipped: skipped });
        }
        let marked = dorfler_mark(&rep.rho_t, cfg.theta);
        let (k, rest) = interface_expansion_check(&marked, &rep.rho_t, &state.mesh, cfg.tau1, cfg.k_max);
        let r = refine_step(&mut state, &rest, k, &rep, cfg).map_err(at(step))?;
        skipped += r.enlargement_skipped as usize;
        rec.marked = marked.len();
        rec.expanded = r.expanded;
        rec.enlarged = r.enlarged;
        rec.refined = r.refined;
        rec.seconds = t0.elapsed().as_secs_f64();
        records.push(rec);
        if !r.changed() {
            return Ok(AdaptTrace { records, stop: StopReason::Stalled, enlargement_skipped: skipped });
        }
        if rep.eta_t >= cfg.tau2 * (rep.eta_m + rep.eta_c) {
            return Ok(AdaptTrace { records, stop: StopReason::Ratio, enlargement_skipped: skipped });
        }
    }
    unreachable!()
}
