//! Scenario runners behind the command line.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Resolved, RunConfig, Scenario};
use crate::error::Result;
use crate::export;
use crate::flow::{evolve_coupled_observed, min_separation, CoupledPath, EvolveOptions};
use crate::metrics::{
    compute_c_r, compute_c_r_prime, DistanceDiagnostics, DistanceEvaluator, ResidualStats, StabilityAudit,
    StabilityReport,
};
use crate::rotation::{r9_lower_bound, realized_qv, RotationDiagnostics, RotationTracker};
use crate::verify::{run_example_negative_drift, variance_calibration};

/// Tolerance of the per-state inequality audits.
pub const AUDIT_TOL: f64 = 1e-9;
/// Tolerance of the lower QV bound.
pub const QV_BOUND_TOL: f64 = 1e-12;

/// What a run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
    pub violations: u64,
    /// The JSON report, for dumping on violations.
    pub report_json: String,
}

struct Sink {
    dir: PathBuf,
    prefix: String,
    artifacts: Vec<PathBuf>,
}

impl Sink {
    fn new(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            prefix: format!("{}_seed{}", cfg.scenario, cfg.flow.seed),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, suffix: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(format!("{}_{}", self.prefix, suffix));
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.artifacts.push(path);
        Ok(())
    }
}

/// Run a scenario, writing artifacts into `out_dir`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let r = cfg.resolve()?;
    let mut sink = Sink::new(out_dir, cfg)?;
    let echo = cfg.to_toml()?;
    sink.write("config.toml", |w| Ok(w.write_all(echo.as_bytes())?))?;
    let (summary, violations, json) = match cfg.scenario {
        Scenario::Simulate => simulate(&r, &mut sink)?,
        Scenario::DistanceAudit => distance_audit(&r, &mut sink)?,
        Scenario::StabilityAudit => stability_audit(&r, &mut sink)?,
        Scenario::Rotation => rotation(&r, &mut sink)?,
        Scenario::ExampleAnnulus => example(&r, &mut sink)?,
        Scenario::Calibrate => calibrate(&r, &mut sink)?,
    };
    Ok(RunOutcome {
        summary,
        artifacts: sink.artifacts,
        violations,
        report_json: json,
    })
}

fn finish<T: Serialize>(r: &Resolved, sink: &mut Sink, report: &T) -> Result<String> {
    let json = serde_json::to_string_pretty(report)?;
    if r.config.output.wants("json") {
        sink.write("report.json", |w| export::write_json(report, w))?;
    }
    Ok(json)
}

fn options(r: &Resolved, path: usize) -> EvolveOptions {
    let f = &r.config.flow;
    EvolveOptions::new(f.dt, f.n_steps, f.seed)
        .path(path as u64)
        .snapshots(f.snapshot_every)
}

#[derive(Serialize)]
struct SimulateReport {
    n_paths: usize,
    grid_n: usize,
    dt: f64,
    n_steps: usize,
    seed: u64,
    final_rho: Vec<f64>,
    final_rho_ext: Vec<f64>,
    mean_final_rho: f64,
    min_separation_g: f64,
    min_separation_g_tilde: f64,
}

fn simulate(r: &Resolved, sink: &mut Sink) -> Result<(String, u64, String)> {
    let f = &r.config.flow;
    let results: Vec<(CoupledPath, Vec<DistanceDiagnostics>)> = (0..f.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut diags = Vec::new();
            let mut eval = (i == 0).then(|| DistanceEvaluator::new(&r.spectrum));
            let path = evolve_coupled_observed(&r.phi, &r.psi, &r.spectrum, &r.drift, options(r, i), |_, g, gt| {
                if let Some(ev) = eval.as_mut() {
                    if let Ok(d) = ev.evaluate(g, gt, &r.drift) {
                        diags.push(d);
                    }
                }
            })?;
            Ok((path, diags))
        })
        .collect::<Result<_>>()?;
    let mut final_rho = Vec::new();
    let mut final_ext = Vec::new();
    let (mut sep_g, mut sep_gt) = (f64::INFINITY, f64::INFINITY);
    for (p, _) in &results {
        let last = p.last();
        final_rho.push(crate::metrics::l2_distance(&last.g, &last.g_tilde)?);
        final_ext.push(crate::metrics::extrinsic_distance(&last.g, &last.g_tilde)?);
        sep_g = sep_g.min(min_separation(&last.g));
        sep_gt = sep_gt.min(min_separation(&last.g_tilde));
    }
    let (path0, diags0) = &results[0];
    if r.config.output.wants("csv") {
        sink.write("snapshots.csv", |w| export::write_snapshots_csv(path0, w))?;
        sink.write("distance.csv", |w| export::write_distance_csv(diags0, w))?;
    }
    if r.config.output.wants("bin") {
        let paths: Vec<CoupledPath> = results.iter().map(|(p, _)| p.clone()).collect();
        sink.write("ensemble.bin", |w| export::write_ensemble(&paths, w))?;
    }
    let report = SimulateReport {
        n_paths: f.n_paths,
        grid_n: f.grid_n,
        dt: f.dt,
        n_steps: f.n_steps,
        seed: f.seed,
        mean_final_rho: final_rho.iter().sum::<f64>() / final_rho.len() as f64,
        final_rho,
        final_rho_ext: final_ext,
        min_separation_g: sep_g,
        min_separation_g_tilde: sep_gt,
    };
    let collided = sep_g == 0.0 || sep_gt == 0.0;
    let summary = format!(
        "simulate: {} path(s), {} steps of dt = {}, mean final rho = {:.6}, min particle separation = {:.3e}{}",
        f.n_paths,
        f.n_steps,
        f.dt,
        report.mean_final_rho,
        sep_g.min(sep_gt),
        if collided { " (collision: reduce dt)" } else { "" }
    );
    let json = finish(r, sink, &report)?;
    Ok((summary, u64::from(collided), json))
}

#[derive(Serialize, Default)]
struct BoundAudit {
    states: u64,
    boundsigma: ResidualStats,
    boundbt: ResidualStats,
    drift_gap: ResidualStats,
    sigma_sq_nonneg: ResidualStats,
    b_nonneg: ResidualStats,
    delta_identity_max_err: f64,
    tol: f64,
}

impl BoundAudit {
    fn merge(&mut self, o: &Self) {
        self.states += o.states;
        self.boundsigma.merge(&o.boundsigma);
        self.boundbt.merge(&o.boundbt);
        self.drift_gap.merge(&o.drift_gap);
        self.sigma_sq_nonneg.merge(&o.sigma_sq_nonneg);
        self.b_nonneg.merge(&o.b_nonneg);
        self.delta_identity_max_err = self.delta_identity_max_err.max(o.delta_identity_max_err);
    }

    fn violations(&self) -> u64 {
        self.boundsigma.violations
            + self.boundbt.violations
            + self.drift_gap.violations
            + self.sigma_sq_nonneg.violations
            + self.b_nonneg.violations
    }
}

fn distance_audit(r: &Resolved, sink: &mut Sink) -> Result<(String, u64, String)> {
    let f = &r.config.flow;
    let results: Vec<(BoundAudit, Vec<DistanceDiagnostics>)> = (0..f.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut audit = BoundAudit::default();
            let mut diags = Vec::new();
            let mut eval = DistanceEvaluator::new(&r.spectrum);
            let mut err = None;
            evolve_coupled_observed(&r.phi, &r.psi, &r.spectrum, &r.drift, options(r, i), |_, g, gt| {
                if err.is_some() {
                    return;
                }
                let res = eval.audit_lemma2(g, gt).and_then(|l| Ok((l, eval.evaluate(g, gt, &r.drift)?)));
                match res {
                    Ok((l, d)) => {
                        audit.states += 1;
                        audit.boundsigma.record(l.boundsigma_residual, AUDIT_TOL);
                        audit.boundbt.record(l.boundbt_residual, AUDIT_TOL);
                        match l.drift_gap {
                            Some(gap) => audit.drift_gap.record(gap, AUDIT_TOL),
                            None => audit.drift_gap.skip(),
                        }
                        audit.sigma_sq_nonneg.record(l.sigma_sq, AUDIT_TOL);
                        audit.b_nonneg.record(l.b, AUDIT_TOL);
                        audit.delta_identity_max_err = audit.delta_identity_max_err.max(l.delta_identity_max_err);
                        if i == 0 {
                            diags.push(d);
                        }
                    }
                    Err(e) => err = Some(e),
                }
            })?;
            match err {
                Some(e) => Err(e),
                None => Ok((audit, diags)),
            }
        })
        .collect::<Result<_>>()?;
    let mut total = BoundAudit {
        tol: AUDIT_TOL,
        ..Default::default()
    };
    for (a, _) in &results {
        total.merge(a);
    }
    if r.config.output.wants("csv") {
        sink.write("distance.csv", |w| export::write_distance_csv(&results[0].1, w))?;
    }
    let v = total.violations();
    let summary = format!(
        "distance-audit: {} states, violations = {v}, min residuals: boundsigma {:.3e}, boundbt {:.3e}, b - sigma^2/2 {} ({} states not in event)",
        total.states,
        total.boundsigma.min_residual.unwrap_or(f64::NAN),
        total.boundbt.min_residual.unwrap_or(f64::NAN),
        total
            .drift_gap
            .min_residual
            .map_or("n/a".to_string(), |x| format!("{x:.3e}")),
        total.drift_gap.excluded,
    );
    let json = finish(r, sink, &total)?;
    Ok((summary, v, json))
}

fn stability_audit(r: &Resolved, sink: &mut Sink) -> Result<(String, u64, String)> {
    let f = &r.config.flow;
    let results: Vec<(StabilityAudit, Vec<DistanceDiagnostics>)> = (0..f.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut audit = StabilityAudit::new(&r.spectrum, &r.drift, f.dt)?;
            let mut eval = DistanceEvaluator::new(&r.spectrum);
            let mut diags = Vec::new();
            let mut err = None;
            audit.begin_path();
            evolve_coupled_observed(&r.phi, &r.psi, &r.spectrum, &r.drift, options(r, i), |_, g, gt| {
                if err.is_some() {
                    return;
                }
                match eval.evaluate(g, gt, &r.drift) {
                    Ok(d) => {
                        audit.observe(&d);
                        if i == 0 {
                            diags.push(d);
                        }
                    }
                    Err(e) => err = Some(e),
                }
            })?;
            audit.end_path();
            match err {
                Some(e) => Err(e),
                None => Ok((audit, diags)),
            }
        })
        .collect::<Result<_>>()?;
    let mut it = results.iter();
    let (first, diags0) = it.next().expect("at least one path");
    let mut total = first.clone();
    for (a, _) in it {
        total.merge(a);
    }
    if r.config.output.wants("csv") {
        sink.write("distance.csv", |w| export::write_distance_csv(diags0, w))?;
    }
    let rep: StabilityReport = total.into_report();
    let v = rep.violations();
    let summary = format!(
        "stability-audit: c_R = {:.6}, c_R' = {:.6}, c1 = {:.4}, c2 = {:.4}; {} of {} paths stayed in the event, {} integrated checks, violations = {v}",
        rep.c_r, rep.c_r_prime, rep.c1, rep.c2, rep.integrated.paths_in_event, rep.integrated.paths, rep.integrated.checks
    );
    let json = finish(r, sink, &rep)?;
    Ok((summary, v, json))
}

#[derive(Serialize)]
struct RotationPath {
    path_index: usize,
    qv_empirical: f64,
    qv_analytic_mean: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct RotationReport {
    label: [usize; 2],
    window: usize,
    k_cut: f64,
    r9_bound: f64,
    r9_threshold: f64,
    r9: ResidualStats,
    paths: Vec<RotationPath>,
    /// `Σ realized / Σ analytic` over paths.
    pooled_ratio: f64,
}

fn rotation(r: &Resolved, sink: &mut Sink) -> Result<(String, u64, String)> {
    let f = &r.config.flow;
    let p = &r.config.params;
    let label = p.label[0] * f.grid_n + p.label[1];
    let k_cut = p.k_cut.or(r.spectrum.radius()).expect("validated");
    let bound = r9_lower_bound(&r.spectrum, k_cut);
    let threshold = PI / (2.0 * k_cut);
    let results: Vec<(RotationPath, ResidualStats, Vec<RotationDiagnostics>)> = (0..f.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut tr = RotationTracker::new(label, &r.spectrum);
            let mut rows = Vec::new();
            let mut err = None;
            evolve_coupled_observed(&r.phi, &r.psi, &r.spectrum, &r.drift, options(r, i).snapshots(0), |_, g, gt| {
                if err.is_none() {
                    match tr.observe(g, gt) {
                        Ok(d) => rows.push(d),
                        Err(e) => err = Some(e),
                    }
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            let mut stats = ResidualStats::default();
            for d in &rows {
                if d.rho_point <= threshold {
                    stats.record(d.qv_rate_analytic - bound, QV_BOUND_TOL);
                } else {
                    stats.skip();
                }
            }
            let xs: Vec<f64> = rows[..=p.window].iter().map(|d| d.x).collect();
            let emp = realized_qv(&xs, f.dt)?;
            let ana = rows[..p.window].iter().map(|d| d.qv_rate_analytic).sum::<f64>() / p.window as f64;
            let rp = RotationPath {
                path_index: i,
                qv_empirical: emp,
                qv_analytic_mean: ana,
                ratio: emp / ana,
            };
            if i != 0 {
                rows.clear();
            }
            Ok((rp, stats, rows))
        })
        .collect::<Result<_>>()?;
    let mut r9 = ResidualStats::default();
    let (mut se, mut sa) = (0.0, 0.0);
    for (rp, st, _) in &results {
        r9.merge(st);
        se += rp.qv_empirical;
        sa += rp.qv_analytic_mean;
    }
    if r.config.output.wants("csv") {
        sink.write("rotation.csv", |w| export::write_rotation_csv(&results[0].2, w))?;
    }
    let report = RotationReport {
        label: p.label,
        window: p.window,
        k_cut,
        r9_bound: bound,
        r9_threshold: threshold,
        r9,
        pooled_ratio: se / sa,
        paths: results.into_iter().map(|(rp, _, _)| rp).collect(),
    };
    let v = report.r9.violations;
    let summary = format!(
        "rotation: label {:?}, realized/analytic QV = {:.4} over {} path(s) of {} steps; lower bound {:.4e} checked on {} steps, violations = {v}",
        p.label,
        report.pooled_ratio,
        report.paths.len(),
        p.window,
        bound,
        report.r9.checked
    );
    let json = finish(r, sink, &report)?;
    Ok((summary, v, json))
}

fn example(r: &Resolved, sink: &mut Sink) -> Result<(String, u64, String)> {
    let (alpha, eps) = match r.config.initial {
        crate::config::InitialSpec::Annulus { alpha, eps } => (alpha, eps),
        _ => unreachable!("validated"),
    };
    let f = &r.config.flow;
    let rep = run_example_negative_drift(&r.spectrum, alpha, eps, f.dt, r.config.params.restarts, f.grid_n, f.seed)?;
    let summary = format!(
        "example-annulus: rho0 = {:.5}, drift = {:.5} ± {:.5}; prediction {:.5} (with nu) / {:.5} (without nu); full Ito drift {:.5}; within 15%: {}",
        rep.rho0,
        rep.estimate.drift_hat,
        rep.estimate.se_drift,
        rep.prediction_with_nu,
        rep.prediction_without_nu,
        rep.ito_drift,
        rep.within_15pct
    );
    let json = finish(r, sink, &rep)?;
    Ok((summary, 0, json))
}

fn calibrate(r: &Resolved, sink: &mut Sink) -> Result<(String, u64, String)> {
    let f = &r.config.flow;
    let rep = variance_calibration(&r.spectrum, f.n_paths, r.config.params.t, f.dt, f.seed)?;
    let summary = format!(
        "calibrate: variance rate ({:.5}, {:.5}) vs analytic ({:.5}, {:.5}), z = ({:.2}, {:.2}), isotropy z = {:.2}",
        rep.empirical[0], rep.empirical[1], rep.analytic[0], rep.analytic[1], rep.z[0], rep.z[1], rep.isotropy_z
    );
    let json = finish(r, sink, &rep)?;
    Ok((summary, 0, json))
}

/// Derived quantities of a config, printed before a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Description {
    pub n_modes: usize,
    pub generator_constant: f64,
    pub nu: f64,
    pub radius: Option<f64>,
    pub c_r: Option<f64>,
    pub c_r_prime: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub threshold_r: Option<f64>,
    pub threshold_2r: Option<f64>,
    pub threshold_sqrt2r: Option<f64>,
}

pub fn describe(cfg: &RunConfig) -> Result<Description> {
    let r = cfg.resolve()?;
    let s = &r.spectrum;
    let rad = s.radius();
    let grad = r.drift.grad_bound_constants().ok();
    Ok(Description {
        n_modes: s.len(),
        generator_constant: s.generator_constant().value,
        nu: s.nu(),
        radius: rad,
        c_r: rad.map(|x| compute_c_r(s, x)),
        c_r_prime: rad.map(|x| compute_c_r_prime(s, x)),
        c1: grad.map(|g| g.0),
        c2: grad.map(|g| g.1),
        threshold_r: rad.map(|x| PI / x),
        threshold_2r: rad.map(|x| PI / (2.0 * x)),
        threshold_sqrt2r: rad.map(|x| PI * 2f64.sqrt() / x),
    })
}

impl std::fmt::Display for Description {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        writeln!(f, "modes             {}", self.n_modes)?;
        writeln!(f, "nu                {}", self.nu)?;
        writeln!(f, "C                 {:.6}", self.generator_constant)?;
        writeln!(f, "R                 {}", opt(self.radius))?;
        writeln!(f, "c_R               {}", opt(self.c_r))?;
        writeln!(f, "c_R'              {}", opt(self.c_r_prime))?;
        writeln!(f, "c1                {}", opt(self.c1))?;
        writeln!(f, "c2                {}", opt(self.c2))?;
        writeln!(f, "pi/R              {}", opt(self.threshold_r))?;
        writeln!(f, "pi/(2R)           {}", opt(self.threshold_2r))?;
        write!(f, "pi*sqrt(2)/R      {}", opt(self.threshold_sqrt2r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_toml_str(text).unwrap()
    }

    const TWO_MODE: &str = r#"
[spectrum]
nu = 1.0
radius = 1.0
modes = [{ k = [1, 0], lambda = 1.0 }, { k = [0, 1], lambda = 1.0 }]
"#;

    #[test]
    fn describe_two_mode() {
        let d = describe(&cfg(&format!("scenario = \"simulate\"\n{TWO_MODE}"))).unwrap();
        assert_eq!(d.generator_constant, 1.0);
        assert!((d.c_r.unwrap() - 0.03206).abs() < 1e-4);
        assert!(d.c_r_prime.unwrap() < 1e-15);
        assert_eq!(d.c1, Some(0.0));
        let text = d.to_string();
        assert!(text.contains("c_R'"));
    }

    #[test]
    fn describe_eight_direction() {
        let text = r#"
scenario = "simulate"
[spectrum]
nu = 2.0
radius = 2.0
modes = [{ k = [1, 0], lambda = 1.0 }, { k = [0, 1], lambda = 1.0 }, { k = [1, 1], lambda = 1.0 }, { k = [1, -1], lambda = 1.0 }]
"#;
        let d = describe(&cfg(text)).unwrap();
        assert!((d.c_r_prime.unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn distance_audit_translation_has_no_violations() {
        let text = format!(
            "scenario = \"distance-audit\"\n{TWO_MODE}\n[flow]\ngrid_n = 8\nn_steps = 20\nn_paths = 2\n[initial]\nkind = \"translation\"\nc = [0.2, 0.1]\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let out = run(&cfg(&text), dir.path()).unwrap();
        assert_eq!(out.violations, 0, "{}", out.summary);
        let names: Vec<String> = out
            .artifacts
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"distance-audit_seed0_report.json".to_string()), "{names:?}");
        assert!(names.contains(&"distance-audit_seed0_distance.csv".to_string()));
        assert!(names.contains(&"distance-audit_seed0_config.toml".to_string()));
    }
}
