//! Distances between coupled flows and the closed-form coefficients of the
//! distance semimartingale.
//!
//! With `δg = g − g̃` (intrinsic representative per label), `ρ² = ∫|δg|²`,
//! `D_k = k·δg/2` and `S_k = k·(g + g̃)/2`, the intrinsic distance satisfies
//! away from the cutlocus
//!
//! ```text
//! dρ = ρ (σ dz + b dt + ⟨n_g, δu⟩ dt)
//! σ² = 4ν Σ λ²|k|⁴ (I_sin² + I_cos²),  I_sin = ∫ (k⊥·δg) sin S_k sin D_k / (|k|²ρ²)
//! b  = 2ν Σ λ²|k|⁴ ∫ sin² D_k / (|k|²ρ²) − σ²/2
//! ```
//!
//! All integrals over the torus are uniform means over the label grid, which
//! is the exact trapezoid rule for periodic integrands.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{DiffeoState, TWO_PI};
use crate::spectrum::{grad_envelope_integral, within, DriftField, ModeTable, Phases, Point, Spectrum};

pub use crate::spectrum::ell;

/// Component differences within this distance of `±π` raise the cutlocus flag.
pub const CUTLOCUS_MARGIN: f64 = 0.1;

/// Per-step tolerance for the deterministic drift inequalities.
pub const TOL_STEP: f64 = 1e-9;

/// Componentwise representative of `p − q` in `(−π, π]`; exact antipodes map
/// to `+π`.
pub fn pointwise_delta(p: Point, q: Point) -> Point {
    let f = |d: f64| {
        let r = d.rem_euclid(TWO_PI);
        if r > PI {
            r - TWO_PI
        } else {
            r
        }
    };
    [f(p[0] - q[0]), f(p[1] - q[1])]
}

fn norm(v: Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn deltas(g: &DiffeoState, gt: &DiffeoState) -> Result<Vec<Point>> {
    g.check_same_grid(gt)?;
    Ok(g
        .positions()
        .iter()
        .zip(gt.positions())
        .map(|(&a, &b)| pointwise_delta(a, b))
        .collect())
}

/// Intrinsic `L²` distance `(∫ |g − g̃|² dθ)^{1/2}`.
pub fn l2_distance(g: &DiffeoState, gt: &DiffeoState) -> Result<f64> {
    let d = deltas(g, gt)?;
    Ok((d.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() / d.len() as f64).sqrt())
}

/// Chordal distance `ρ_T² = 4(sin²(Δ₁/2) + sin²(Δ₂/2))` integrated over labels.
pub fn extrinsic_distance(g: &DiffeoState, gt: &DiffeoState) -> Result<f64> {
    g.check_same_grid(gt)?;
    let n = g.len() as f64;
    let acc: f64 = g
        .positions()
        .iter()
        .zip(gt.positions())
        .map(|(a, b)| {
            let s1 = ((a[0] - b[0]) / 2.0).sin();
            let s2 = ((a[1] - b[1]) / 2.0).sin();
            4.0 * (s1 * s1 + s2 * s2)
        })
        .sum();
    Ok((acc / n).sqrt())
}

/// `sup_θ |g(θ) − g̃(θ)|`, intrinsic.
pub fn sup_pointwise(g: &DiffeoState, gt: &DiffeoState) -> Result<f64> {
    Ok(deltas(g, gt)?.into_iter().map(norm).fold(0.0, f64::max))
}

/// Distance-process state at one instant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceDiagnostics {
    pub t: f64,
    pub rho: f64,
    pub rho_ext: f64,
    pub sigma_sq: f64,
    pub b: f64,
    /// `⟨n_g, δu⟩` with `δu = (u(g) − u(g̃))/ρ`.
    pub ng_dot_delta_u: f64,
    /// `‖δu‖`.
    pub delta_u_norm: f64,
    pub sup_pointwise: f64,
    pub cutlocus_flag: bool,
    /// `sup ≤ π/R`.
    pub event_r: bool,
    /// `sup ≤ π/(2R)`.
    pub event_2r: bool,
    /// `sup ≤ π√2/R`.
    pub event_sqrt2r: bool,
}

impl DistanceDiagnostics {
    /// Analytic Itô drift rate of `log ρ`: `b − σ²/2 + ⟨n_g, δu⟩`.
    pub fn log_drift(&self) -> f64 {
        self.b - 0.5 * self.sigma_sq + self.ng_dot_delta_u
    }
}

/// Residuals of the inequalities `boundsigma`, `boundbt` and `b − σ²/2 ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub rho: f64,
    pub sigma_sq: f64,
    pub b: f64,
    pub boundsigma_rhs: f64,
    pub boundbt_rhs: f64,
    /// `boundsigma_rhs − σ²`, required `≥ −tol`.
    pub boundsigma_residual: f64,
    /// `b − boundbt_rhs`, required `≥ −tol`.
    pub boundbt_residual: f64,
    /// `b − σ²/2`, only when the spectrum is band-limited and `sup ≤ π/R`.
    pub drift_gap: Option<f64>,
    /// `max |δ_k² + δ_{k⊥}² − 1|` over labels with nonzero difference.
    pub delta_identity_max_err: f64,
}

impl BoundReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.boundsigma_residual >= -tol
            && self.boundbt_residual >= -tol
            && self.drift_gap.map_or(true, |g| g >= -tol)
    }
}

#[derive(Clone, Debug, Default)]
struct ModeSums {
    i_sin: f64,
    i_cos: f64,
    sin2: f64,
    sin2_dperp2: f64,
    nk_sq: f64,
}

/// Evaluates distance coefficients for one spectrum, reusing scratch buffers.
#[derive(Clone, Debug)]
pub struct DistanceEvaluator {
    spectrum: Spectrum,
    table: ModeTable,
    ph_g: Phases,
    ph_d: Phases,
    sums: Vec<ModeSums>,
    weights: Vec<f64>,
    norms: Vec<f64>,
    units: Vec<[f64; 2]>,
    perp_units: Vec<[f64; 2]>,
}

impl DistanceEvaluator {
    pub fn new(s: &Spectrum) -> Self {
        let table = ModeTable::new(s);
        let ph_g = table.new_phases();
        let ph_d = table.new_phases();
        let modes = s.modes();
        Self {
            spectrum: s.clone(),
            ph_g,
            ph_d,
            sums: vec![ModeSums::default(); modes.len()],
            weights: modes
                .iter()
                .map(|m| {
                    let n2 = m.k.norm_sq() as f64;
                    m.lambda * m.lambda * n2 * n2
                })
                .collect(),
            norms: modes.iter().map(|m| m.k.norm()).collect(),
            units: modes.iter().map(|m| m.k.unit()).collect(),
            perp_units: modes.iter().map(|m| m.k.perp().unit()).collect(),
            table,
        }
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    /// Accumulate per-mode label means; returns `(ρ², sup, cutlocus, δ-identity error)`.
    fn accumulate(&mut self, g: &DiffeoState, gt: &DiffeoState, lemma: bool) -> Result<(f64, f64, bool, f64)> {
        g.check_same_grid(gt)?;
        for s in self.sums.iter_mut() {
            *s = ModeSums::default();
        }
        let n_lab = g.len() as f64;
        let mut rho_sq = 0.0;
        let mut sup: f64 = 0.0;
        let mut cut = false;
        let mut id_err: f64 = 0.0;
        for (&p, &q) in g.positions().iter().zip(gt.positions()) {
            let d = pointwise_delta(p, q);
            let dn2 = d[0] * d[0] + d[1] * d[1];
            rho_sq += dn2;
            sup = sup.max(dn2.sqrt());
            if d[0].abs() > PI - CUTLOCUS_MARGIN || d[1].abs() > PI - CUTLOCUS_MARGIN {
                cut = true;
            }
            if dn2 == 0.0 {
                continue;
            }
            self.table.phases(p, &mut self.ph_g);
            self.table.phases([0.5 * d[0], 0.5 * d[1]], &mut self.ph_d);
            let dn = dn2.sqrt();
            for i in 0..self.sums.len() {
                let (cg, sg) = self.ph_g.cs[i];
                let (cd, sd) = self.ph_d.cs[i];
                // S = k·g − D
                let sin_s = sg * cd - cg * sd;
                let cos_s = cg * cd + sg * sd;
                let pu = self.perp_units[i];
                let proj_perp = pu[0] * d[0] + pu[1] * d[1];
                let acc = &mut self.sums[i];
                acc.i_sin += proj_perp * sin_s * sd;
                acc.i_cos += proj_perp * cos_s * sd;
                acc.sin2 += sd * sd;
                if lemma {
                    let u = self.units[i];
                    let proj = u[0] * d[0] + u[1] * d[1];
                    let dk = proj / dn;
                    let dp = proj_perp / dn;
                    acc.sin2_dperp2 += dp * dp * sd * sd;
                    acc.nk_sq += proj * proj;
                    id_err = id_err.max((dk * dk + dp * dp - 1.0).abs());
                }
            }
        }
        for acc in self.sums.iter_mut() {
            acc.i_sin /= n_lab;
            acc.i_cos /= n_lab;
            acc.sin2 /= n_lab;
            acc.sin2_dperp2 /= n_lab;
            acc.nk_sq /= n_lab;
        }
        Ok((rho_sq / n_lab, sup, cut, id_err))
    }

    /// `(σ², b)` from accumulated sums.
    fn coefficients(&self, rho_sq: f64) -> (f64, f64) {
        let nu = self.spectrum.nu();
        let mut sigma_sq = 0.0;
        let mut b_plus = 0.0;
        for i in 0..self.sums.len() {
            let kn = self.norms[i];
            let s = &self.sums[i];
            let is = s.i_sin / (kn * rho_sq);
            let ic = s.i_cos / (kn * rho_sq);
            sigma_sq += self.weights[i] * (is * is + ic * ic);
            b_plus += self.weights[i] * s.sin2 / (kn * kn * rho_sq);
        }
        let sigma_sq = 4.0 * nu * sigma_sq;
        (sigma_sq, 2.0 * nu * b_plus - 0.5 * sigma_sq)
    }

    /// `(σ², b)` for a state pair.
    pub fn sigma_sq_and_b(&mut self, g: &DiffeoState, gt: &DiffeoState) -> Result<(f64, f64)> {
        let (rho_sq, ..) = self.accumulate(g, gt, false)?;
        if rho_sq == 0.0 {
            return Err(Error::ZeroDistance);
        }
        Ok(self.coefficients(rho_sq))
    }

    /// All distance diagnostics at time `g.time()`.
    pub fn evaluate(&mut self, g: &DiffeoState, gt: &DiffeoState, u: &DriftField) -> Result<DistanceDiagnostics> {
        let (rho_sq, sup, cut, _) = self.accumulate(g, gt, false)?;
        if rho_sq == 0.0 {
            return Err(Error::ZeroDistance);
        }
        let (sigma_sq, b) = self.coefficients(rho_sq);
        let t = g.time();
        let (ng_du, du_norm) = if u.is_zero() {
            (0.0, 0.0)
        } else {
            let mut dot = 0.0;
            let mut sq = 0.0;
            for (&p, &q) in g.positions().iter().zip(gt.positions()) {
                let d = pointwise_delta(p, q);
                let up = u.eval(t, p);
                let uq = u.eval(t, q);
                let du = [up[0] - uq[0], up[1] - uq[1]];
                dot += d[0] * du[0] + d[1] * du[1];
                sq += du[0] * du[0] + du[1] * du[1];
            }
            let n = g.len() as f64;
            (dot / n / rho_sq, (sq / n).sqrt() / rho_sq.sqrt())
        };
        let (er, e2r, es2r) = match self.spectrum.radius() {
            Some(r) => (sup <= PI / r, sup <= PI / (2.0 * r), sup <= PI * 2f64.sqrt() / r),
            None => (false, false, false),
        };
        Ok(DistanceDiagnostics {
            t,
            rho: rho_sq.sqrt(),
            rho_ext: extrinsic_distance(g, gt)?,
            sigma_sq,
            b,
            ng_dot_delta_u: ng_du,
            delta_u_norm: du_norm,
            sup_pointwise: sup,
            cutlocus_flag: cut,
            event_r: er,
            event_2r: e2r,
            event_sqrt2r: es2r,
        })
    }

    /// Residuals of the three inequalities for one state pair.
    pub fn audit_lemma2(&mut self, g: &DiffeoState, gt: &DiffeoState) -> Result<BoundReport> {
        let (rho_sq, sup, _, id_err) = self.accumulate(g, gt, true)?;
        if rho_sq == 0.0 {
            return Err(Error::ZeroDistance);
        }
        let (sigma_sq, b) = self.coefficients(rho_sq);
        let nu = self.spectrum.nu();
        let mut bs = 0.0;
        let mut bb = 0.0;
        for i in 0..self.sums.len() {
            let k2 = self.norms[i] * self.norms[i];
            let s = &self.sums[i];
            bs += self.weights[i] * s.sin2_dperp2 / (k2 * rho_sq);
            bb += self.weights[i] * (s.nk_sq / rho_sq) * (s.sin2 / (k2 * rho_sq));
        }
        let bs = 4.0 * nu * bs;
        let bb = 2.0 * nu * bb;
        let drift_gap = match self.spectrum.radius() {
            Some(r) if sup <= PI / r => Some(b - 0.5 * sigma_sq),
            _ => None,
        };
        Ok(BoundReport {
            rho: rho_sq.sqrt(),
            sigma_sq,
            b,
            boundsigma_rhs: bs,
            boundbt_rhs: bb,
            boundsigma_residual: bs - sigma_sq,
            boundbt_residual: b - bb,
            drift_gap,
            delta_identity_max_err: id_err,
        })
    }
}

/// `σ²` of the intrinsic distance process.
pub fn sigma_sq(g: &DiffeoState, gt: &DiffeoState, s: &Spectrum) -> Result<f64> {
    DistanceEvaluator::new(s).sigma_sq_and_b(g, gt).map(|v| v.0)
}

/// Drift coefficient `b` of the intrinsic distance process.
pub fn drift_b(g: &DiffeoState, gt: &DiffeoState, s: &Spectrum) -> Result<f64> {
    DistanceEvaluator::new(s).sigma_sq_and_b(g, gt).map(|v| v.1)
}

pub fn audit_lemma2(g: &DiffeoState, gt: &DiffeoState, s: &Spectrum) -> Result<BoundReport> {
    DistanceEvaluator::new(s).audit_lemma2(g, gt)
}

/// `c_R = (ν/8) ℓ²(π/√2) Σ_{|k|≤R} λ²|k|⁴`.
pub fn compute_c_r(s: &Spectrum, r: f64) -> f64 {
    s.nu() / 8.0 * ell(PI / 2f64.sqrt()).powi(2) * s.sum_lambda_sq_k4(Some(r))
}

/// `Σ_{|k|≤R} λ²|k|⁴ ((n_k·v)² − (n_{k⊥}·v)²)²` at `v = (cos φ, sin φ)`.
pub fn c_r_prime_objective(s: &Spectrum, r: f64, phi: f64) -> f64 {
    let v = [phi.cos(), phi.sin()];
    s.modes()
        .iter()
        .filter(|m| within(m.k, Some(r)))
        .map(|m| {
            let n = m.k.unit();
            let p = m.k.perp().unit();
            let a = n[0] * v[0] + n[1] * v[1];
            let b = p[0] * v[0] + p[1] * v[1];
            let n2 = m.k.norm_sq() as f64;
            m.lambda * m.lambda * n2 * n2 * (a * a - b * b).powi(2)
        })
        .sum()
}

const ANGLE_GRID: usize = 4096;

/// `c_R′ = (ν/8) inf_{|v|=1} Σ_{|k|≤R} λ²|k|⁴ ((n_k·v)² − (n_{k⊥}·v)²)²`.
///
/// The objective has period `π/2` in the angle of `v`; it is scanned on a
/// 4096-point grid and the best local minima are refined by golden section
/// to `1e-10` in angle.
pub fn compute_c_r_prime(s: &Spectrum, r: f64) -> f64 {
    let period = PI / 2.0;
    let h = period / ANGLE_GRID as f64;
    let vals: Vec<f64> = (0..ANGLE_GRID)
        .map(|i| c_r_prime_objective(s, r, i as f64 * h))
        .collect();
    let mut minima: Vec<usize> = (0..ANGLE_GRID)
        .filter(|&i| {
            let prev = vals[(i + ANGLE_GRID - 1) % ANGLE_GRID];
            let next = vals[(i + 1) % ANGLE_GRID];
            vals[i] <= prev && vals[i] <= next
        })
        .collect();
    minima.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    for &i in minima.iter().take(8) {
        let center = i as f64 * h;
        let v = golden_min(|x| c_r_prime_objective(s, r, x), center - h, center + h, 1e-10);
        best = best.min(v);
    }
    s.nu() / 8.0 * best.max(0.0)
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    fc.min(fd).min(f(0.5 * (a + b)))
}

/// Drift and diffusion of the extrinsic distance, with `ν` on every
/// quadratic-variation term.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtrinsicCoefficients {
    pub rho: f64,
    /// Itô drift rate of `ρ`.
    pub drift: f64,
    /// Variance rate of `dρ`.
    pub diffusion_sq: f64,
}

/// Itô coefficients of the extrinsic distance at the current state pair.
pub fn extrinsic_coefficients(
    g: &DiffeoState,
    gt: &DiffeoState,
    s: &Spectrum,
    u: &DriftField,
) -> Result<ExtrinsicCoefficients> {
    g.check_same_grid(gt)?;
    let rho = extrinsic_distance(g, gt)?;
    if rho == 0.0 {
        return Err(Error::ZeroDistance);
    }
    let nu = s.nu();
    let n = g.len() as f64;
    let t = g.time();
    let m = s.len();
    let mut qv_term = vec![0.0; m];
    let mut pc = vec![0.0; m];
    let mut ps = vec![0.0; m];
    let mut u_term = 0.0;
    for (&p, &q) in g.positions().iter().zip(gt.positions()) {
        let d = [p[0] - q[0], p[1] - q[1]];
        let (s1, c1) = d[0].sin_cos();
        let (s2, c2) = d[1].sin_cos();
        if !u.is_zero() {
            let up = u.eval(t, p);
            let uq = u.eval(t, q);
            u_term += s1 * (up[0] - uq[0]) + s2 * (up[1] - uq[1]);
        }
        for (i, mode) in s.modes().iter().enumerate() {
            let (k1, k2) = (mode.k.k1 as f64, mode.k.k2 as f64);
            let (sp, cp) = mode.k.dot(p).sin_cos();
            let (sq, cq) = mode.k.dot(q).sin_cos();
            let dc = cp - cq;
            let ds = sp - sq;
            qv_term[i] += (k2 * k2 * c1 + k1 * k1 * c2) * (dc * dc + ds * ds);
            let proj = k2 * s1 - k1 * s2;
            pc[i] += proj * dc;
            ps[i] += proj * ds;
        }
    }
    let mut ito = 0.0;
    let mut mart = 0.0;
    for (i, mode) in s.modes().iter().enumerate() {
        let l2 = mode.lambda * mode.lambda;
        ito += l2 * qv_term[i] / n;
        mart += l2 * ((pc[i] / n).powi(2) + (ps[i] / n).powi(2));
    }
    let rho3 = rho * rho * rho;
    Ok(ExtrinsicCoefficients {
        rho,
        drift: u_term / n / rho + nu * ito / (2.0 * rho) - nu * mart / (2.0 * rho3),
        diffusion_sq: nu * mart / (rho * rho),
    })
}

/// Min/mean summary of a residual over the steps where it applied.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResidualStats {
    pub checked: u64,
    pub excluded: u64,
    pub violations: u64,
    pub min_residual: Option<f64>,
    pub mean_residual: Option<f64>,
    #[serde(skip)]
    sum: f64,
}

impl ResidualStats {
    pub fn record(&mut self, residual: f64, tol: f64) {
        self.checked += 1;
        self.sum += residual;
        self.min_residual = Some(self.min_residual.map_or(residual, |m| m.min(residual)));
        self.mean_residual = Some(self.sum / self.checked as f64);
        if residual < -tol {
            self.violations += 1;
        }
    }

    pub fn skip(&mut self) {
        self.excluded += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.violations += other.violations;
        self.sum += other.sum;
        self.min_residual = match (self.min_residual, other.min_residual) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.mean_residual = if self.checked > 0 {
            Some(self.sum / self.checked as f64)
        } else {
            None
        };
    }
}

/// Integrated lower bound check along paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IntegratedBoundStats {
    pub paths: u64,
    pub paths_in_event: u64,
    pub checks: u64,
    pub violations: u64,
    /// `min (LHS − RHS)` over checked instants.
    pub min_slack: Option<f64>,
    /// `max(0, RHS − LHS)` over checked instants.
    pub max_violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub radius: f64,
    pub c_r: f64,
    pub c_r_prime: f64,
    pub c1: f64,
    pub c2: f64,
    pub dt: f64,
    pub tol_step: f64,
    /// Tolerance for the integrated bound: `c₁ dt + 1e-9` bounds the left
    /// Riemann sum error of `∫ c₁ e^{-c₂ s} ds`.
    pub tol_scheme: f64,
    /// `b − σ²/2 − c_R′` on steps with `sup ≤ π/(2R)`.
    pub drift_gap_vs_c_r_prime: ResidualStats,
    /// `b − c_R` on steps with `sup ≤ π√2/R`.
    pub b_vs_c_r: ResidualStats,
    pub integrated: IntegratedBoundStats,
}

impl StabilityReport {
    pub fn violations(&self) -> u64 {
        self.drift_gap_vs_c_r_prime.violations + self.b_vs_c_r.violations + self.integrated.violations
    }
}

/// Streaming audit of the drift constants and the integrated exponential
/// lower bound along coupled paths. Feed every step of a path in order
/// between [`StabilityAudit::begin_path`] and [`StabilityAudit::end_path`].
#[derive(Clone, Debug)]
pub struct StabilityAudit {
    report: StabilityReport,
    log_rho0: f64,
    prev: Option<(f64, f64)>,
    martingale: f64,
    omega: bool,
    path_slacks: Vec<f64>,
}

impl StabilityAudit {
    pub fn new(s: &Spectrum, u: &DriftField, dt: f64) -> Result<Self> {
        if !u.is_navier_stokes() {
            return Err(Error::UnsupportedDrift("stability audit needs a Navier-Stokes drift"));
        }
        let radius = s.radius().ok_or_else(|| {
            Error::InvalidParameter("stability audit needs a band-limited spectrum".into())
        })?;
        let (c1, c2) = u.grad_bound_constants()?;
        Ok(Self {
            report: StabilityReport {
                radius,
                c_r: compute_c_r(s, radius),
                c_r_prime: compute_c_r_prime(s, radius),
                c1,
                c2,
                dt,
                tol_step: TOL_STEP,
                tol_scheme: c1 * dt + TOL_STEP,
                drift_gap_vs_c_r_prime: ResidualStats::default(),
                b_vs_c_r: ResidualStats::default(),
                integrated: IntegratedBoundStats::default(),
            },
            log_rho0: 0.0,
            prev: None,
            martingale: 0.0,
            omega: true,
            path_slacks: Vec::new(),
        })
    }

    pub fn begin_path(&mut self) {
        self.prev = None;
        self.martingale = 0.0;
        self.omega = true;
        self.path_slacks.clear();
    }

    pub fn observe(&mut self, d: &DistanceDiagnostics) {
        let r = &mut self.report;
        if d.event_2r {
            r.drift_gap_vs_c_r_prime
                .record(d.b - 0.5 * d.sigma_sq - r.c_r_prime, TOL_STEP);
        } else {
            r.drift_gap_vs_c_r_prime.skip();
            self.omega = false;
        }
        if d.event_sqrt2r {
            r.b_vs_c_r.record(d.b - r.c_r, TOL_STEP);
        } else {
            r.b_vs_c_r.skip();
        }

        let log_rho = d.rho.ln();
        match self.prev {
            None => self.log_rho0 = log_rho,
            Some((prev_log, prev_drift)) => {
                // reconstructed ∫σ dz: log increment minus the analytic drift
                self.martingale += log_rho - prev_log - prev_drift * r.dt;
                let rhs = self.martingale + r.c_r_prime * d.t - grad_envelope_integral(r.c1, r.c2, d.t);
                self.path_slacks.push(log_rho - self.log_rho0 - rhs);
            }
        }
        self.prev = Some((log_rho, d.log_drift()));
    }

    pub fn end_path(&mut self) {
        let tol = self.report.tol_scheme;
        let it = &mut self.report.integrated;
        it.paths += 1;
        if !self.omega {
            return;
        }
        it.paths_in_event += 1;
        for &slack in &self.path_slacks {
            it.checks += 1;
            it.min_slack = Some(it.min_slack.map_or(slack, |m| m.min(slack)));
            it.max_violation = it.max_violation.max(-slack);
            if slack < -tol {
                it.violations += 1;
            }
        }
    }

    /// Fold another audit (same spectrum, drift and dt) into this one.
    pub fn merge(&mut self, other: &Self) {
        let r = &mut self.report;
        r.drift_gap_vs_c_r_prime.merge(&other.report.drift_gap_vs_c_r_prime);
        r.b_vs_c_r.merge(&other.report.b_vs_c_r);
        let (a, b) = (&mut r.integrated, &other.report.integrated);
        a.paths += b.paths;
        a.paths_in_event += b.paths_in_event;
        a.checks += b.checks;
        a.violations += b.violations;
        a.max_violation = a.max_violation.max(b.max_violation);
        a.min_slack = match (a.min_slack, b.min_slack) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        };
    }

    pub fn report(&self) -> &StabilityReport {
        &self.report
    }

    pub fn into_report(self) -> StabilityReport {
        self.report
    }
}

/// Audit the drift constants and the integrated bound on a stored path
/// (every step must be stored).
pub fn audit_prop4_thm2(path: &crate::flow::CoupledPath, s: &Spectrum, u: &DriftField) -> Result<StabilityReport> {
    if !path.is_dense() {
        return Err(Error::InvalidParameter("path must store every step".into()));
    }
    let mut audit = StabilityAudit::new(s, u, path.dt)?;
    let mut eval = DistanceEvaluator::new(s);
    audit.begin_path();
    for snap in &path.snapshots {
        audit.observe(&eval.evaluate(&snap.g, &snap.g_tilde, u)?);
    }
    audit.end_path();
    Ok(audit.into_report())
}
