use acgrac::adapt::{AdaptTrace, StepRecord, StopReason};
use acgrac::experiment::{
    build_strain, error_metrics, ground_state, h1_seminorm_diff, loglog_slope, reference_solution, run_experiment, tail_slope,
    transfer, write_trace_csv, ExperimentConfig, ProblemKind, Variant, CSV_HEADER,
};
use acgrac::grac::{assemble_constraints, solve_cached, Method, ParamCache};
use acgrac::lattice::Crystal;
use acgrac::mesh::{build_ac_mesh, AcMesh, Cell, MeshParams};
use acgrac::model::{AtomisticModel, Model};
use acgrac::stress::micro_gradient;
use acgrac::Error;
use nalgebra::{Matrix2, Vector2};
use proptest::prelude::*;

const KEYS: &[&str] = &[
    "problem", "S", "gamma_I", "gamma_II", "eam.a", "eam.b", "eam.c", "grac.method", "grac.stabilize", "grac.kappa", "mesh.R_ai",
    "mesh.R0", "mesh.macro", "mesh.grading", "mesh.reflection", "adapt.N_max", "adapt.rho_tol", "adapt.tau1", "adapt.tau2",
    "adapt.tau3", "adapt.R_max", "adapt.K", "adapt.theta", "adapt.max_steps", "estimator.C1", "estimator.C2", "estimator.C3",
    "solver.tol", "solver.max_iter", "reference.R_ref", "reference.tol", "reference.enabled", "cache.dir", "output.dir",
    "output.timing", "output.snapshots", "output.stability_probes", "seed",
];

fn record(step: usize, n: usize, v: [f64; 8]) -> StepRecord {
    StepRecord {
        step,
        n,
        r: 16 + 8 * step as i64,
        r_ai: 4,
        eta_t: v[0],
        eta_m: v[1],
        eta_c: v[2],
        rho: v[3],
        h1_err: v[4],
        energy_err: v[5],
        energy: v[6],
        seconds: v[7],
        marked: 0,
        expanded: 0,
        enlarged: false,
        refined: 0,
    }
}

#[test]
fn strain_matrices() {
    let d = ExperimentConfig::defaults(ProblemKind::Divacancy);
    let f0 = ground_state(&d.eam, &d.crystal()).unwrap();
    assert!((build_strain(&d).unwrap() - Matrix2::new(1.03, 0.03, 0.0, 1.03) * f0).amax() < 1e-15);
    let m = ExperimentConfig::defaults(ProblemKind::Microcrack);
    assert!((build_strain(&m).unwrap() - Matrix2::new(1.0, 0.03, 0.0, 1.03) * f0).amax() < 1e-15);
    let mut z = d.clone();
    z.stretch = 0.0;
    z.gamma_ii = 0.0;
    assert_eq!(build_strain(&z).unwrap(), f0);
    assert_eq!(d.crystal().defects().len(), 2);
    assert_eq!(m.crystal().defects().len(), 11);
}

#[test]
fn variant_tags() {
    let tags: Vec<String> = Variant::ALL.iter().map(|v| v.tag()).collect();
    assert_eq!(tags, ["l1s1", "l1s0", "l2s1", "l2s0"]);
    for v in Variant::ALL {
        assert_eq!(Variant::parse(&v.tag()).unwrap(), v);
    }
    assert!(matches!(Variant::parse("l3s1"), Err(Error::InvalidValue { .. })));
    let c = ExperimentConfig::parse("grac.method = lsq\ngrac.stabilize = false\n").unwrap();
    assert_eq!(c.variant.tag(), "l2s0");
    assert_eq!(c.problem().unwrap().kappa, 0.0);
}

#[test]
fn config_parsing() {
    let c = ExperimentConfig::parse(
        "# comment\nproblem = microcrack\nadapt.theta = 0.4  # trailing\nmesh.R0 = 24\nadapt.R_max = 64\nreference.R_ref = 0\n",
    )
    .unwrap();
    assert_eq!(c.problem, ProblemKind::Microcrack);
    assert_eq!(c.adapt.theta, 0.4);
    assert_eq!(c.reference_radius(), 256);
    assert!(matches!(ExperimentConfig::parse("adapt.tau1 = 1.5"), Err(Error::InvalidValue { .. })));
    assert!(matches!(ExperimentConfig::parse("adapt.theta = x"), Err(Error::InvalidValue { .. })));
    assert!(matches!(ExperimentConfig::parse("no equals sign"), Err(Error::InvalidConfig(_))));
}

proptest! {
    #[test]
    fn unknown_keys_are_named(key in "[a-zA-Z][a-zA-Z_.]{0,12}") {
        prop_assume!(!KEYS.contains(&key.as_str()));
        match ExperimentConfig::parse(&format!("{key} = 1\n")) {
            Err(Error::UnknownKey(k)) => prop_assert_eq!(k, key),
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn real_values_round_trip(x in 0.01f64..0.99, s in -0.1f64..0.1) {
        let c = ExperimentConfig::parse(&format!("adapt.theta = {x}\nS = {s}\n")).unwrap();
        prop_assert_eq!(c.adapt.theta.to_bits(), x.to_bits());
        prop_assert_eq!(c.stretch.to_bits(), s.to_bits());
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec(prop::array::uniform8(-1e300f64..1e300), 1..12), timing in any::<bool>()) {
        let records: Vec<StepRecord> = rows.iter().enumerate().map(|(i, v)| record(i, 100 + 10 * i, v.map(f64::abs))).collect();
        let trace = AdaptTrace { records, stop: StopReason::DofLimit, enlargement_skipped: 0 };
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace, timing).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        prop_assert_eq!(lines.next().unwrap(), CSV_HEADER);
        for (line, r) in lines.zip(&trace.records) {
            let f: Vec<&str> = line.split(',').collect();
            prop_assert_eq!(f.len(), 10);
            prop_assert_eq!(f[0].parse::<usize>().unwrap(), r.step);
            prop_assert_eq!(f[1].parse::<usize>().unwrap(), r.n);
            prop_assert_eq!(f[2].parse::<i64>().unwrap(), r.r);
            let want = [r.eta_t, r.eta_m, r.eta_c, r.rho, r.h1_err, r.energy_err, if timing { r.seconds } else { 0.0 }];
            for (s, w) in f[3..].iter().zip(want) {
                prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), w.to_bits());
            }
        }
    }
}

#[test]
fn slope_fit_matches_closed_form() {
    // y = 3 x^-0.5 exactly, plus a two-point hand check
    let pts: Vec<(f64, f64)> = [100.0, 400.0, 1600.0, 6400.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(-0.5))).collect();
    assert!((loglog_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
    let two = [(10.0, 1.0), (1000.0, 0.01)];
    assert!((loglog_slope(&two).unwrap() + 1.0).abs() < 1e-12);
    assert!(loglog_slope(&[(1.0, 1.0)]).is_none());
    let records = (0..6).map(|i| record(i, 100 << i, [0.0, 0.0, 0.0, 0.0, if i < 3 { 1.0 } else { (100 << i) as f64 }, 0.0, 0.0, 0.0])).collect();
    let trace = AdaptTrace { records, stop: StopReason::DofLimit, enlargement_skipped: 0 };
    // only the tail half (h1 = N) enters the fit
    assert!((tail_slope(&trace).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn param_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = build_ac_mesh(&Crystal::triangular(0), &MeshParams { r_ai: 4, radius: 16, grading: 1.0, macro_size: 8, reflection: true }).unwrap();
    let sys = assemble_constraints(&mesh).unwrap();
    for method in [Method::L1, Method::Lsq] {
        let mut first = ParamCache::on_disk(dir.path()).unwrap();
        let a = solve_cached(&sys, method, &mut first).unwrap();
        assert!(first.misses > 0);
        let mut second = ParamCache::on_disk(dir.path()).unwrap();
        let b = solve_cached(&sys, method, &mut second).unwrap();
        assert_eq!(second.misses, 0);
        assert_eq!(second.hits, first.misses + first.hits);
        let (x, y): (Vec<u64>, Vec<u64>) = (a.all_coefficients().map(f64::to_bits).collect(), b.all_coefficients().map(f64::to_bits).collect());
        assert_eq!(x, y);
    }
}

fn small_reference(dir: &std::path::Path, tol: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(ProblemKind::Divacancy);
    c.r_ref = 12;
    c.reference_tol = tol;
    c.cache_dir = dir.to_path_buf();
    c
}

#[test]
fn reference_cache_and_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_reference(dir.path(), 1e-9);
    let (model, a) = reference_solution(&c).unwrap();
    let (_, b) = reference_solution(&c).unwrap();
    assert_eq!(a.radius, 12);
    assert_eq!(a.energy.to_bits(), b.energy.to_bits());
    assert!(a.u.iter().zip(&b.u).all(|(x, y)| x[0].to_bits() == y[0].to_bits() && x[1].to_bits() == y[1].to_bits()));
    // converged: tightening the tolerance barely moves the solution
    let (_, h) = reference_solution(&small_reference(dir.path(), 5e-10)).unwrap();
    assert!(h1_seminorm_diff(&model, &a.u, &h.u) < 1e-5);
    let mut g = vec![Vector2::zeros(); model.n_nodes()];
    model.gradient(&a.u, &mut g).unwrap();
    let fmax = model.free_nodes().iter().map(|&i| g[i].amax()).fold(0.0, f64::max);
    assert!(fmax < 1e-6, "{fmax}");
}

#[test]
fn error_metric_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_reference(dir.path(), 1e-9);
    let (model, r) = reference_solution(&c).unwrap();
    // the reference on a fully atomistic mesh has zero error
    let mesh = AcMesh::atomistic(&c.crystal(), 12).unwrap();
    let u_h: Vec<Vector2<f64>> = mesh.vertices().iter().map(|&p| model.value(&r.u, p)).collect();
    assert!(transfer(&model, &mesh, &u_h).iter().zip(&r.u).all(|(a, b)| a == b));
    let (h1, en) = error_metrics(&model, &r, &mesh, &u_h).unwrap();
    assert_eq!(h1, 0.0);
    assert!(en <= 1e-12 * r.energy.abs().max(1.0));
    // translations drop out of gradients
    let shift = Vector2::new(0.3, -1.7);
    let zero = vec![Vector2::zeros(); model.n_nodes()];
    let moved_u: Vec<_> = r.u.iter().map(|x| x + shift).collect();
    let moved_z: Vec<_> = zero.iter().map(|x| x + shift).collect();
    let (a, b) = (h1_seminorm_diff(&model, &r.u, &zero), h1_seminorm_diff(&model, &moved_u, &moved_z));
    assert!((a - b).abs() <= 1e-12 * a);
}

#[test]
fn single_triangle_gradient_by_hand() {
    // lattice coordinates are linear in x: with a1 = s(1,0), a2 = s(1/2, √3/2)
    // one has n = 2y/(√3 s) and m = x/s − y/(√3 s)
    let c = Crystal::triangular(0);
    let t = Cell::micro(true, acgrac::lattice::LatticePoint::new(0, 0));
    let s = c.position(acgrac::lattice::LatticePoint::new(1, 0))[0];
    let g = micro_gradient(&c, &t, |p| Vector2::new(c.position(p)[0], 0.0));
    assert!((g - Matrix2::new(1.0, 0.0, 0.0, 0.0)).amax() < 1e-14);
    let g = micro_gradient(&c, &t, |p| Vector2::new(0.0, p.n as f64));
    assert!((g - Matrix2::new(0.0, 0.0, 0.0, 2.0 / (3f64.sqrt() * s))).amax() < 1e-14);
    let g = micro_gradient(&c, &t, |p| Vector2::new(p.m as f64, 0.0));
    assert!((g - Matrix2::new(1.0 / s, -1.0 / (3f64.sqrt() * s), 0.0, 0.0)).amax() < 1e-14);
}

#[test]
fn homogeneous_reference_is_zero() {
    let c = Crystal::triangular(0);
    let eam = acgrac::potential::EamParams::default();
    let b = ground_state(&eam, &c).unwrap() * Matrix2::new(1.03, 0.03, 0.0, 1.03);
    let model = AtomisticModel::new(&c, eam, b, 8).unwrap();
    let zero = vec![Vector2::zeros(); model.n_nodes()];
    let mut g = vec![Vector2::zeros(); model.n_nodes()];
    model.gradient(&zero, &mut g).unwrap();
    assert!(model.free_nodes().iter().all(|&i| g[i].amax() < 1e-12));
}

fn tiny_run(dir: &std::path::Path, out: &str) -> ExperimentConfig {
    let text = format!(
        "problem = divacancy\nmesh.R0 = 16\nadapt.R_max = 16\nadapt.N_max = 700\noutput.timing = false\ncache.dir = {}\noutput.dir = {}\n",
        dir.join(format!("cache_{out}")).display(),
        dir.join(out).display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn experiment_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny_run(dir.path(), "a")).unwrap();
    let b = run_experiment(&tiny_run(dir.path(), "b")).unwrap();
    assert_eq!(a.csv.file_name().unwrap(), "trace_l1s1.csv");
    let (x, y) = (std::fs::read(&a.csv).unwrap(), std::fs::read(&b.csv).unwrap());
    assert_eq!(x, y);
    assert_eq!(std::fs::read(&a.summary).unwrap(), std::fs::read(&b.summary).unwrap());
    let text = String::from_utf8(x).unwrap();
    assert!(text.starts_with(CSV_HEADER));
    assert_eq!(text.lines().count(), a.trace.records.len() + 1);
    assert!(a.trace.records.iter().all(|r| r.h1_err.is_finite() && r.h1_err > 0.0));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&a.summary).unwrap()).unwrap();
    assert_eq!(json["variant"], "l1s1");
    assert_eq!(json["reference_radius"], 64);
    assert!(dir.path().join("a/mesh_l1s1_vertices.txt").exists());
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, problem) in [("divacancy.cfg", ProblemKind::Divacancy), ("microcrack.cfg", ProblemKind::Microcrack)] {
        let c = ExperimentConfig::load(&root.join(name)).unwrap();
        assert_eq!(c.problem, problem);
        assert_eq!(c.variant.tag(), "l1s1");
        assert!(c.cache_dir.ends_with("configs/cache"));
    }
}
