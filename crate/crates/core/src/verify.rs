//! Independent numerical oracles: restart-ensemble regressions of the
//! distance and rotation processes, the annulus example, Navier-Stokes
//! residuals and single-particle variance calibration.
//!
//! Estimators here only look at raw increments of simulated states.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{track_particle, wrap, DiffeoState, NoiseIncrement, NoiseStream, TWO_PI};
use crate::metrics::{extrinsic_coefficients, extrinsic_distance, l2_distance, DistanceEvaluator};
use crate::rotation::{direction, drift_rate_analytic, ito_drift_correction, qv_rate_analytic, unwrap_next};
use crate::spectrum::{DriftField, ModeTable, Point, Spectrum};

/// Minimum ensemble size for [`estimate_drift_diffusion`].
pub const MIN_SAMPLES: usize = 100;

/// Drift and diffusion rates estimated from an ensemble of increments.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionEstimate {
    pub drift_hat: f64,
    pub diffusion_sq_hat: f64,
    pub se_drift: f64,
    pub se_diff: f64,
    pub n_samples: usize,
}

impl RegressionEstimate {
    /// `(drift_hat − drift) / se_drift`, or 0 when both vanish.
    pub fn drift_z(&self, drift: f64) -> f64 {
        z_score(self.drift_hat - drift, self.se_drift)
    }

    pub fn diffusion_z(&self, diffusion_sq: f64) -> f64 {
        z_score(self.diffusion_sq_hat - diffusion_sq, self.se_diff)
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

/// `drift = mean(Δ)/dt`, `diffusion² = var(Δ)/dt`, with standard errors
/// `sd/√n/dt` and `√((m₄ − var²)/n)/dt`.
pub fn estimate_drift_diffusion(increments: &[f64], dt: f64) -> Result<RegressionEstimate> {
    let n = increments.len();
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_SAMPLES,
            got: n,
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let nf = n as f64;
    let mean = increments.iter().sum::<f64>() / nf;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in increments {
        let d = (x - mean) * (x - mean);
        m2 += d;
        m4 += d * d;
    }
    let var = m2 / (nf - 1.0);
    let m4 = m4 / nf;
    let pop_var = m2 / nf;
    Ok(RegressionEstimate {
        drift_hat: mean / dt,
        diffusion_sq_hat: var / dt,
        se_drift: (var / nf).sqrt() / dt,
        se_diff: ((m4 - pop_var * pop_var).max(0.0) / nf).sqrt() / dt,
        n_samples: n,
    })
}

/// Estimates from antithetic pairs `(Δ(w), Δ(−w))`. The even half
/// `(Δ₊ + Δ₋)/2` carries the drift and the odd half `(Δ₊ − Δ₋)/2` the
/// diffusion; terms quadratic in `w` cancel from the odd half, so its
/// variance is free of the `O(drift²·dt)` bias of the plain estimator.
pub fn estimate_antithetic(pairs: &[(f64, f64)], dt: f64) -> Result<RegressionEstimate> {
    let even: Vec<f64> = pairs.iter().map(|&(p, m)| 0.5 * (p + m)).collect();
    let odd: Vec<f64> = pairs.iter().map(|&(p, m)| 0.5 * (p - m)).collect();
    let e = estimate_drift_diffusion(&even, dt)?;
    let o = estimate_drift_diffusion(&odd, dt)?;
    // the odd half has mean zero by construction
    let nf = odd.len() as f64;
    let m2 = odd.iter().map(|x| x * x).sum::<f64>() / nf;
    let m4 = odd.iter().map(|x| x.powi(4)).sum::<f64>() / nf;
    Ok(RegressionEstimate {
        drift_hat: e.drift_hat,
        diffusion_sq_hat: m2 / dt,
        se_drift: e.se_drift,
        se_diff: ((m4 - m2 * m2).max(0.0) / nf).sqrt() / dt,
        n_samples: o.n_samples,
    })
}

/// A state pair with its per-label mode phases cached, so that many
/// independent one-step evolutions can be drawn cheaply.
#[derive(Clone, Debug)]
pub struct FrozenPair {
    g: DiffeoState,
    gt: DiffeoState,
    table: ModeTable,
    dt: f64,
    cs_g: Vec<(f64, f64)>,
    cs_gt: Vec<(f64, f64)>,
    u_g: Vec<Point>,
    u_gt: Vec<Point>,
}

impl FrozenPair {
    pub fn new(g: &DiffeoState, gt: &DiffeoState, s: &Spectrum, u: &DriftField, dt: f64) -> Result<Self> {
        g.check_same_grid(gt)?;
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let table = ModeTable::new(s);
        let mut ph = table.new_phases();
        let mut cache = |st: &DiffeoState| {
            let mut out = Vec::with_capacity(st.len() * table.len());
            for &p in st.positions() {
                table.phases(p, &mut ph);
                out.extend_from_slice(&ph.cs);
            }
            out
        };
        let cs_g = cache(g);
        let cs_gt = cache(gt);
        let drift = |st: &DiffeoState| -> Vec<Point> {
            st.positions()
                .iter()
                .map(|&p| {
                    let v = u.eval(st.time(), p);
                    [v[0] * dt, v[1] * dt]
                })
                .collect()
        };
        Ok(Self {
            u_g: drift(g),
            u_gt: drift(gt),
            g: g.clone(),
            gt: gt.clone(),
            table,
            dt,
            cs_g,
            cs_gt,
        })
    }

    pub fn g(&self) -> &DiffeoState {
        &self.g
    }

    pub fn g_tilde(&self) -> &DiffeoState {
        &self.gt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_modes(&self) -> usize {
        self.table.len()
    }

    fn advance_one(&self, st: &DiffeoState, cs: &[(f64, f64)], drift: &[Point], w: &NoiseIncrement) -> DiffeoState {
        let m = self.table.len();
        let amp = self.table.amplitudes();
        let perp = self.table.perps();
        let pos = st
            .positions()
            .iter()
            .enumerate()
            .map(|(idx, &p)| {
                let mut d = drift[idx];
                for i in 0..m {
                    let (c, s) = cs[idx * m + i];
                    let a = amp[i] * (c * w.dx[i] + s * w.dy[i]);
                    d[0] += perp[i][0] * a;
                    d[1] += perp[i][1] * a;
                }
                [wrap(p[0] + d[0]), wrap(p[1] + d[1])]
            })
            .collect();
        DiffeoState::from_positions(st.grid_n(), pos, st.time() + self.dt)
            .expect("wrapped positions lie in the fundamental domain")
    }

    /// One Euler-Maruyama step of both flows with the shared increment `w`.
    pub fn advance(&self, w: &NoiseIncrement) -> (DiffeoState, DiffeoState) {
        (
            self.advance_one(&self.g, &self.cs_g, &self.u_g, w),
            self.advance_one(&self.gt, &self.cs_gt, &self.u_gt, w),
        )
    }

    /// `f(after) − f(before)` for `n` independent restarts; restart `i` uses
    /// noise stream `i` of `seed`. Order of the output is the restart index.
    pub fn increments<F>(&self, n: usize, seed: u64, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&DiffeoState, &DiffeoState) -> Result<f64> + Sync,
    {
        let f0 = f(&self.g, &self.gt)?;
        let m = self.table.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let w = NoiseStream::new(seed, i as u64).increment(0, m, self.dt);
                let (g1, gt1) = self.advance(&w);
                f(&g1, &gt1).map(|v| v - f0)
            })
            .collect()
    }
}

impl FrozenPair {
    /// `(f(w) − f₀, f(−w) − f₀)` for `n` restarts drawn as in
    /// [`FrozenPair::increments`].
    pub fn antithetic_increments<F>(&self, n: usize, seed: u64, f: F) -> Result<Vec<(f64, f64)>>
    where
        F: Fn(&DiffeoState, &DiffeoState) -> Result<f64> + Sync,
    {
        let f0 = f(&self.g, &self.gt)?;
        let m = self.table.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let w = NoiseStream::new(seed, i as u64).increment(0, m, self.dt);
                let neg = NoiseIncrement {
                    dx: w.dx.iter().map(|x| -x).collect(),
                    dy: w.dy.iter().map(|x| -x).collect(),
                };
                let (a, b) = self.advance(&w);
                let (c, d) = self.advance(&neg);
                Ok((f(&a, &b)? - f0, f(&c, &d)? - f0))
            })
            .collect()
    }
}

/// Restart regression of the intrinsic distance against its closed-form
/// drift `ρ(b + ⟨n_g, δu⟩)` and diffusion `ρ²σ²`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceRegression {
    pub rho: f64,
    pub sigma_sq: f64,
    pub b: f64,
    pub ng_dot_delta_u: f64,
    pub cutlocus_flag: bool,
    pub predicted_drift: f64,
    pub predicted_diffusion_sq: f64,
    pub estimate: RegressionEstimate,
    pub drift_z: f64,
    pub diffusion_z: f64,
    pub diffusion_rel_err: f64,
}

pub fn regress_distance(
    g: &DiffeoState,
    gt: &DiffeoState,
    s: &Spectrum,
    u: &DriftField,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<DistanceRegression> {
    let diag = DistanceEvaluator::new(s).evaluate(g, gt, u)?;
    let pair = FrozenPair::new(g, gt, s, u, dt)?;
    let inc = pair.antithetic_increments(n, seed, l2_distance)?;
    let est = estimate_antithetic(&inc, dt)?;
    let rho = diag.rho;
    let drift = rho * (diag.b + diag.ng_dot_delta_u);
    let diff = rho * rho * diag.sigma_sq;
    Ok(DistanceRegression {
        rho,
        sigma_sq: diag.sigma_sq,
        b: diag.b,
        ng_dot_delta_u: diag.ng_dot_delta_u,
        cutlocus_flag: diag.cutlocus_flag,
        predicted_drift: drift,
        predicted_diffusion_sq: diff,
        drift_z: est.drift_z(drift),
        diffusion_z: est.diffusion_z(diff),
        diffusion_rel_err: (est.diffusion_sq_hat - diff).abs() / diff.abs(),
        estimate: est,
    })
}

/// Restart regression of the rotation angle at one label.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationRegression {
    pub rho_point: f64,
    /// `(1/ρ)⟨δu, i e⟩` alone.
    pub predicted_drift: f64,
    /// Noise-induced Itô part of the drift.
    pub ito_correction: f64,
    pub predicted_qv_rate: f64,
    pub estimate: RegressionEstimate,
    /// Against `predicted_drift + ito_correction`.
    pub drift_z: f64,
    /// Against `predicted_drift` alone.
    pub drift_z_without_correction: f64,
    pub qv_z: f64,
}

pub fn regress_rotation(
    g: &DiffeoState,
    gt: &DiffeoState,
    label: usize,
    s: &Spectrum,
    u: &DriftField,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<RotationRegression> {
    let (e0, r) = direction(g, gt, label)?;
    let x0 = e0[1].atan2(e0[0]);
    let drift = drift_rate_analytic(g, gt, label, u)?;
    let qv = qv_rate_analytic(g, gt, label, s)?;
    let ito = ito_drift_correction(g, gt, label, s)?;
    let pair = FrozenPair::new(g, gt, s, u, dt)?;
    let inc = pair.antithetic_increments(n, seed, |a, b| {
        let (e, _) = direction(a, b, label)?;
        Ok(unwrap_next(x0, e[1].atan2(e[0])))
    })?;
    let est = estimate_antithetic(&inc, dt)?;
    Ok(RotationRegression {
        rho_point: r,
        predicted_drift: drift,
        ito_correction: ito,
        predicted_qv_rate: qv,
        drift_z: est.drift_z(drift + ito),
        drift_z_without_correction: est.drift_z(drift),
        qv_z: est.diffusion_z(qv),
        estimate: est,
    })
}

/// Restart regression of the extrinsic distance against its Itô coefficients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtrinsicRegression {
    pub rho_ext: f64,
    pub predicted_drift: f64,
    pub predicted_diffusion_sq: f64,
    pub estimate: RegressionEstimate,
    pub drift_z: f64,
}

pub fn regress_extrinsic(
    g: &DiffeoState,
    gt: &DiffeoState,
    s: &Spectrum,
    u: &DriftField,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<ExtrinsicRegression> {
    let c = extrinsic_coefficients(g, gt, s, u)?;
    let pair = FrozenPair::new(g, gt, s, u, dt)?;
    let inc = pair.antithetic_increments(n, seed, extrinsic_distance)?;
    let est = estimate_antithetic(&inc, dt)?;
    Ok(ExtrinsicRegression {
        rho_ext: c.rho,
        predicted_drift: c.drift,
        predicted_diffusion_sq: c.diffusion_sq,
        drift_z: est.drift_z(c.drift),
        estimate: est,
    })
}

/// `6x⁵ − 15x⁴ + 10x³`, the C² monotone ramp from 0 to 1 on `[0, 1]`.
pub fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

/// Shear `ψ(θ) = (θ₁ + π s(θ₂), θ₂)` that rotates the band `E₁` by `π` in
/// the first coordinate and is the identity outside `E₂ ⊃ E₁`.
///
/// `E₁ = {|θ₂ − π| ≤ πα}` has normalized measure `α`; `E₂` has measure
/// `α + ε`, and `s` ramps down on the collar with [`smootherstep`].
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct AnnulusDiffeo {
    pub alpha: f64,
    pub eps: f64,
}

impl AnnulusDiffeo {
    /// Shear profile `s(θ₂) ∈ [0, 1]`.
    pub fn profile(&self, theta2: f64) -> f64 {
        let d = (wrap(theta2) - PI).abs();
        let inner = PI * self.alpha;
        if d <= inner {
            1.0
        } else if self.eps == 0.0 {
            0.0
        } else {
            1.0 - smootherstep((d - inner) / (PI * self.eps))
        }
    }

    pub fn eval(&self, theta: Point) -> Point {
        [wrap(theta[0] + PI * self.profile(theta[1])), wrap(theta[1])]
    }

    pub fn in_e1(&self, theta: Point) -> bool {
        (wrap(theta[1]) - PI).abs() <= PI * self.alpha
    }

    pub fn in_e2(&self, theta: Point) -> bool {
        (wrap(theta[1]) - PI).abs() <= PI * (self.alpha + self.eps)
    }

    pub fn to_state(&self, grid_n: usize) -> DiffeoState {
        DiffeoState::from_map(grid_n, |th| self.eval(th))
    }
}

/// Smoothed annulus rotation; requires `0 < ε ≤ α/10` and `α + ε < 1`.
pub fn build_annulus(alpha: f64, eps: f64) -> Result<AnnulusDiffeo> {
    if !(alpha > 0.0 && eps > 0.0 && eps <= alpha / 10.0 && alpha + eps < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "annulus needs 0 < eps ≤ alpha/10 and alpha + eps < 1, got alpha = {alpha}, eps = {eps}"
        )));
    }
    Ok(AnnulusDiffeo { alpha, eps })
}

/// Unsmoothed variant (`ε = 0`): discontinuous at the band edges but
/// measure preserving.
pub fn build_annulus_sharp(alpha: f64) -> Result<AnnulusDiffeo> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("annulus needs 0 < alpha < 1, got {alpha}")));
    }
    Ok(AnnulusDiffeo { alpha, eps: 0.0 })
}

/// `Σ_{k₁ odd} λ_k² k₂²` over stored modes, or an error if no stored mode has odd `k₁`.
pub fn example_mode_sum(s: &Spectrum) -> Result<f64> {
    let odd: Vec<_> = s.modes().iter().filter(|m| m.k.k1 % 2 != 0).collect();
    if odd.is_empty() {
        return Err(Error::InvalidParameter("no stored mode has odd k1".into()));
    }
    Ok(odd
        .iter()
        .map(|m| m.lambda * m.lambda * (m.k.k2 as f64).powi(2))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleReport {
    pub alpha: f64,
    pub eps: f64,
    pub grid_n: usize,
    pub dt: f64,
    pub n_restarts: usize,
    pub rho0: f64,
    pub rho0_sq: f64,
    pub mode_sum: f64,
    /// `−(ρ₀/2) ν Σ_{k₁ odd} λ²k₂²`.
    pub prediction_with_nu: f64,
    /// `−(ρ₀/2) Σ_{k₁ odd} λ²k₂²`.
    pub prediction_without_nu: f64,
    /// Full Itô drift of the extrinsic distance at `(id, ψ)`.
    pub ito_drift: f64,
    pub estimate: RegressionEstimate,
    pub rel_dev_with_nu: f64,
    pub rel_dev_without_nu: f64,
    pub drift_negative: bool,
    pub within_15pct: bool,
}

/// Monte-Carlo initial drift of the extrinsic distance between `id` and the
/// smoothed annulus rotation, against the closed-form prediction.
#[allow(clippy::too_many_arguments)]
pub fn run_example_negative_drift(
    s: &Spectrum,
    alpha: f64,
    eps: f64,
    dt: f64,
    n_paths: usize,
    grid_n: usize,
    seed: u64,
) -> Result<ExampleReport> {
    let mode_sum = example_mode_sum(s)?;
    let psi = build_annulus(alpha, eps)?;
    let g = DiffeoState::identity(grid_n);
    let gt = psi.to_state(grid_n);
    let reg = regress_extrinsic(&g, &gt, s, &DriftField::Zero, dt, n_paths, seed)?;
    let rho0 = reg.rho_ext;
    let with_nu = -0.5 * rho0 * s.nu() * mode_sum;
    let without_nu = -0.5 * rho0 * mode_sum;
    let rel = |p: f64| (reg.estimate.drift_hat - p).abs() / p.abs();
    Ok(ExampleReport {
        alpha,
        eps,
        grid_n,
        dt,
        n_restarts: n_paths,
        rho0,
        rho0_sq: rho0 * rho0,
        mode_sum,
        prediction_with_nu: with_nu,
        prediction_without_nu: without_nu,
        ito_drift: reg.predicted_drift,
        rel_dev_with_nu: rel(with_nu),
        rel_dev_without_nu: rel(without_nu),
        drift_negative: reg.estimate.drift_hat < 0.0,
        within_15pct: reg.estimate.drift_hat < 0.0 && rel(with_nu) <= 0.15,
        estimate: reg.estimate,
    })
}

fn fft2(data: &mut [Complex<f64>], n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
}

fn wavenumber(j: usize, n: usize) -> f64 {
    if 2 * j < n {
        j as f64
    } else if 2 * j == n {
        0.0
    } else {
        j as f64 - n as f64
    }
}

/// Spectral `∂₁f, ∂₂f, Δf` of a periodic grid function (row index = θ₁).
pub fn spectral_derivatives(f: &[f64], n: usize) -> [Vec<f64>; 3] {
    let mut hat: Vec<Complex<f64>> = f.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft2(&mut hat, n, false);
    let scale = 1.0 / (n * n) as f64;
    let mut outs = [hat.clone(), hat.clone(), hat];
    for i in 0..n {
        let k1 = wavenumber(i, n);
        for j in 0..n {
            let k2 = wavenumber(j, n);
            let idx = i * n + j;
            let i_unit = Complex::new(0.0, 1.0);
            outs[0][idx] *= i_unit * k1 * scale;
            outs[1][idx] *= i_unit * k2 * scale;
            outs[2][idx] *= -(k1 * k1 + k2 * k2) * scale;
        }
    }
    outs.map(|mut v| {
        fft2(&mut v, n, true);
        v.into_iter().map(|c| c.re).collect()
    })
}

/// `max |∂_t u + (u·∇)u − νΔu|` over a `grid_n²` grid at time `t`.
pub fn ns_residual(u: &DriftField, nu: f64, t: f64, grid_n: usize) -> f64 {
    if u.is_zero() {
        return 0.0;
    }
    let n = grid_n;
    let pts: Vec<Point> = (0..n * n)
        .map(|idx| [TWO_PI * (idx / n) as f64 / n as f64, TWO_PI * (idx % n) as f64 / n as f64])
        .collect();
    let vals: Vec<Point> = pts.iter().map(|&p| u.eval(t, p)).collect();
    let comps: Vec<[Vec<f64>; 3]> = (0..2)
        .map(|c| spectral_derivatives(&vals.iter().map(|v| v[c]).collect::<Vec<_>>(), n))
        .collect();
    let mut worst: f64 = 0.0;
    for idx in 0..n * n {
        let v = vals[idx];
        let dt = u.time_derivative(t, pts[idx]);
        for c in 0..2 {
            let [d1, d2, lap] = &comps[c];
            let r = dt[c] + v[0] * d1[idx] + v[1] * d2[idx] - nu * lap[idx];
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// `max |½ Σ λ²ν ((A·∇)A + (B·∇)B)|` over a grid.
pub fn stratonovich_residual(s: &Spectrum, grid_n: usize) -> f64 {
    let n = grid_n;
    (0..n * n)
        .map(|idx| {
            let p = [TWO_PI * (idx / n) as f64 / n as f64, TWO_PI * (idx % n) as f64 / n as f64];
            let c = s.stratonovich_correction(p);
            c[0].abs().max(c[1].abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub n_paths: usize,
    pub t: f64,
    pub dt: f64,
    pub analytic: [f64; 2],
    pub empirical: [f64; 2],
    pub se: [f64; 2],
    pub z: [f64; 2],
    pub within_3se: bool,
    /// Analytic rates agree to round-off.
    pub isotropic_analytic: bool,
    /// `(empirical₁ − empirical₂)/√(se₁² + se₂²)`.
    pub isotropy_z: f64,
}

/// Per-component variance rate of single particles started at a fixed point,
/// driven by noise only.
pub fn variance_calibration(s: &Spectrum, n_paths: usize, t: f64, dt: f64, seed: u64) -> Result<CalibrationReport> {
    if n_paths < MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_SAMPLES,
            got: n_paths,
        });
    }
    if !(t > 0.0 && dt > 0.0) {
        return Err(Error::InvalidParameter("t and dt must be positive".into()));
    }
    let n_steps = (t / dt).round().max(1.0) as usize;
    let t_eff = n_steps as f64 * dt;
    let start = [1.0, 2.0];
    let disp: Vec<Point> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let p = track_particle(start, s, &DriftField::Zero, dt, n_steps, NoiseStream::new(seed, i as u64));
            [p[0] - start[0], p[1] - start[1]]
        })
        .collect();
    let analytic = s.single_particle_variance_rate();
    let mut empirical = [0.0; 2];
    let mut se = [0.0; 2];
    let mut z = [0.0; 2];
    for c in 0..2 {
        // the displacement has mean zero exactly; moments are about zero
        let xs: Vec<f64> = disp.iter().map(|d| d[c]).collect();
        let nf = n_paths as f64;
        let m2 = xs.iter().map(|x| x * x).sum::<f64>() / nf;
        let m4 = xs.iter().map(|x| x.powi(4)).sum::<f64>() / nf;
        empirical[c] = m2 / t_eff;
        se[c] = ((m4 - m2 * m2).max(0.0) / nf).sqrt() / t_eff;
        z[c] = z_score(empirical[c] - analytic[c], se[c]);
    }
    let scale = analytic[0].abs().max(analytic[1].abs()).max(f64::MIN_POSITIVE);
    Ok(CalibrationReport {
        n_paths,
        t: t_eff,
        dt,
        analytic,
        empirical,
        se,
        z,
        within_3se: z.iter().all(|v| v.abs() <= 3.0),
        isotropic_analytic: (analytic[0] - analytic[1]).abs() <= 1e-12 * scale,
        isotropy_z: z_score(empirical[0] - empirical[1], (se[0] * se[0] + se[1] * se[1]).sqrt()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{Mode, WaveVector};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn wv(a: i32, b: i32) -> WaveVector {
        WaveVector::new(a, b).unwrap()
    }

    fn two_mode(nu: f64) -> Spectrum {
        Spectrum::new(
            vec![Mode { k: wv(1, 0), lambda: 1.0 }, Mode { k: wv(0, 1), lambda: 1.0 }],
            nu,
            Some(1.0),
        )
        .unwrap()
    }

    #[test]
    fn constant_series_has_zero_rates() {
        let e = estimate_drift_diffusion(&[0.0; 200], 0.01).unwrap();
        assert_eq!((e.drift_hat, e.diffusion_sq_hat, e.se_drift, e.se_diff), (0.0, 0.0, 0.0, 0.0));
        assert!(matches!(
            estimate_drift_diffusion(&[0.0; 99], 0.01),
            Err(Error::InsufficientSamples { needed: 100, got: 99 })
        ));
    }

    #[test]
    fn brownian_increments_recover_unit_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dt: f64 = 0.01;
        let inc: Vec<f64> = (0..20_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.3 * dt + dt.sqrt() * z
            })
            .collect();
        let e = estimate_drift_diffusion(&inc, dt).unwrap();
        assert!(e.diffusion_z(1.0).abs() < 3.0, "{e:?}");
        assert!(e.drift_z(0.3).abs() < 3.0, "{e:?}");
        // se_diff of Gaussian increments is √(2/n)/1
        assert!((e.se_diff - (2.0f64 / 20_000.0).sqrt()).abs() < 0.1 * e.se_diff);
        let small = estimate_drift_diffusion(&inc[..5000], dt).unwrap();
        assert!(small.se_drift > 1.8 * e.se_drift && small.se_drift < 2.2 * e.se_drift);
    }

    #[test]
    fn antithetic_pairs_cancel_quadratic_terms() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let dt = 1e-3_f64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, dt.sqrt()).unwrap();
        // Δ = 0.1 w + 40 w² + 0.5 dt: the quadratic term dominates the plain variance
        let pairs: Vec<(f64, f64)> = (0..20_000)
            .map(|_| {
                let w: f64 = normal.sample(&mut rng);
                (0.1 * w + 40.0 * w * w + 0.5 * dt, -0.1 * w + 40.0 * w * w + 0.5 * dt)
            })
            .collect();
        let e = estimate_antithetic(&pairs, dt).unwrap();
        assert!(e.diffusion_z(0.01).abs() < 3.0, "{e:?}");
        assert!(e.drift_z(40.5).abs() < 3.0, "{e:?}");
        let plain: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let p = estimate_drift_diffusion(&plain, dt).unwrap();
        assert!(p.diffusion_sq_hat > 2.0 * 0.01);
    }

    #[test]
    fn frozen_pair_matches_stepper() {
        let s = Spectrum::from_shells(2.0, 0.8, |_| 1.0).unwrap();
        let u = DriftField::single_mode(wv(1, 1), 0.3, -0.2, 0.8);
        let g = DiffeoState::shear(8, 0.2, 0);
        let gt = DiffeoState::translation(8, [0.1, 0.05]);
        let dt = 1e-3;
        let pair = FrozenPair::new(&g, &gt, &s, &u, dt).unwrap();
        let w = NoiseStream::new(9, 4).increment(0, s.len(), dt);
        let (a, b) = pair.advance(&w);
        let a2 = crate::flow::step(&g, &s, &u, &w, dt);
        let b2 = crate::flow::step(&gt, &s, &u, &w, dt);
        for (p, q) in a.positions().iter().zip(a2.positions()).chain(b.positions().iter().zip(b2.positions())) {
            assert_abs_diff_eq!(p[0], q[0], epsilon = 1e-13);
            assert_abs_diff_eq!(p[1], q[1], epsilon = 1e-13);
        }
        assert_eq!(a.time(), a2.time());
    }

    #[test]
    fn translation_restart_matches_hand_drift() {
        // δ = (c, 0): σ² = 0 and b = 2νλ² sin²(c/2)/c²
        let (nu, c) = (1.0, 0.5);
        let s = two_mode(nu);
        let g = DiffeoState::identity(16);
        let gt = DiffeoState::translation(16, [-c, 0.0]);
        let r = regress_distance(&g, &gt, &s, &DriftField::Zero, 1e-3, 10_000, 17).unwrap();
        let b_hand = 2.0 * nu * (c / 2.0).sin().powi(2) / (c * c);
        assert_abs_diff_eq!(r.b, b_hand, epsilon = 1e-12);
        assert!(r.drift_z.abs() < 3.0, "{r:?}");
        assert!(r.estimate.diffusion_sq_hat < 1e-3);
    }

    #[test]
    fn rotation_regression_zero_drift() {
        let s = Spectrum::from_shells(2.0, 1.0, |_| 1.0).unwrap();
        let g = DiffeoState::identity(4);
        let gt = DiffeoState::from_map(4, |th| [th[0] + 0.03, th[1] + 0.02]);
        let r = regress_rotation(&g, &gt, 5, &s, &DriftField::Zero, 1e-4, 20_000, 3).unwrap();
        assert_eq!(r.predicted_drift, 0.0);
        assert!(r.drift_z.abs() < 3.0, "{r:?}");
        // the antithetic drift estimate resolves the Itô term
        assert!(r.drift_z_without_correction.abs() > 10.0, "{r:?}");
        assert!(r.qv_z.abs() < 3.0, "{r:?}");
    }

    #[test]
    fn rotation_regression_with_drift() {
        let s = Spectrum::from_shells(1.0, 0.2, |_| 1.0).unwrap();
        let u = DriftField::single_mode(wv(1, 0), 1.0, 0.5, 0.2);
        let g = DiffeoState::identity(4);
        let gt = DiffeoState::from_map(4, |th| [th[0] + 0.04, th[1] - 0.01]);
        let label = 6;
        let r = regress_rotation(&g, &gt, label, &s, &u, 1e-4, 40_000, 8).unwrap();
        assert!(r.predicted_drift.abs() > 0.1);
        assert!(r.drift_z.abs() < 3.0, "{r:?}");
    }

    #[test]
    fn annulus_contract() {
        let a = build_annulus(0.2, 0.02).unwrap();
        let deep = [1.0, PI + 0.1];
        assert_eq!(a.eval(deep), [wrap(1.0 + PI), PI + 0.1]);
        assert!(a.in_e1(deep));
        let outside = [2.5, 0.3];
        assert!(!a.in_e2(outside));
        assert_eq!(a.eval(outside), outside);
        for bad in [(0.2, 0.03), (0.2, 0.0), (0.95, 0.09), (-0.1, 0.001)] {
            assert!(build_annulus(bad.0, bad.1).is_err(), "{bad:?}");
        }
        // profile is monotone across the collar
        let mut prev = 1.0;
        for i in 0..=100 {
            let th2 = PI + PI * 0.2 + PI * 0.02 * i as f64 / 100.0;
            let v = a.profile(th2);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn annulus_initial_extrinsic_distance() {
        let alpha = 0.2;
        for eps in [0.02, 0.01] {
            let a = build_annulus(alpha, eps).unwrap();
            let r = extrinsic_distance(&DiffeoState::identity(512), &a.to_state(512)).unwrap();
            // collar contributes at most 4·ε
            assert!(r * r >= 4.0 * alpha - 0.01 && r * r <= 4.0 * (alpha + eps) + 0.01, "{}", r * r);
        }
    }

    #[test]
    fn sharp_annulus_preserves_volume_off_seams() {
        let a = build_annulus_sharp(0.25).unwrap();
        let n = 32;
        let st = a.to_state(n);
        assert_eq!(st.positions()[0], [0.0, 0.0]);
        // rows strictly inside or outside the band are translated rigidly
        let labels_away: Vec<usize> = (0..n * n)
            .filter(|&idx| {
                let th2 = TWO_PI * (idx % n) as f64 / n as f64;
                let e = (th2 - PI).abs();
                (e - PI * 0.25).abs() > 2.0 * TWO_PI / n as f64
            })
            .collect();
        assert!(!labels_away.is_empty());
        for idx in labels_away {
            let (i, j) = (idx / n, idx % n);
            let p = st.positions()[idx];
            let right = st.at((i + 1) % n, j);
            let up = st.at(i, (j + 1) % n);
            let d1 = crate::metrics::pointwise_delta(right, p);
            let d2 = crate::metrics::pointwise_delta(up, p);
            let det = d1[0] * d2[1] - d1[1] * d2[0];
            let h = TWO_PI / n as f64;
            assert_abs_diff_eq!(det, h * h, epsilon = 1e-12);
        }
    }

    #[test]
    fn example_mode_sums() {
        let s = Spectrum::new(vec![Mode { k: wv(1, 0), lambda: 1.0 }, Mode { k: wv(0, 1), lambda: 1.0 }], 1.0, None)
            .unwrap();
        assert_eq!(example_mode_sum(&s).unwrap(), 0.0);
        let s = Spectrum::new(vec![Mode { k: wv(1, 1), lambda: 1.0 }, Mode { k: wv(-1, 1), lambda: 1.0 }], 1.0, None)
            .unwrap();
        assert_eq!(example_mode_sum(&s).unwrap(), 2.0);
        let s = Spectrum::new(vec![Mode { k: wv(0, 2), lambda: 1.0 }, Mode { k: wv(2, 0), lambda: 1.0 }], 1.0, None)
            .unwrap();
        assert!(example_mode_sum(&s).is_err());
    }

    #[test]
    fn ns_residual_examples() {
        let u = DriftField::single_mode(wv(2, -1), 0.7, 0.4, 0.3);
        assert!(ns_residual(&u, 0.3, 0.25, 32) <= 1e-10);
        assert_eq!(ns_residual(&DriftField::Zero, 1.0, 0.0, 16), 0.0);
        let a = DriftField::single_mode(wv(1, 0), 1.0, 0.0, 0.3);
        let b = DriftField::single_mode(wv(0, 1), 0.0, 1.0, 0.3);
        let sum = DriftField::custom(move |t, p| {
            let x = a.eval(t, p);
            let y = b.eval(t, p);
            [x[0] + y[0], x[1] + y[1]]
        });
        assert!(ns_residual(&sum, 0.3, 0.1, 32) > 0.1);
    }

    #[test]
    fn spectral_derivatives_of_a_mode() {
        let n = 16;
        let f: Vec<f64> = (0..n * n)
            .map(|idx| {
                let (x, y) = (TWO_PI * (idx / n) as f64 / n as f64, TWO_PI * (idx % n) as f64 / n as f64);
                (2.0 * x - 3.0 * y).sin()
            })
            .collect();
        let [d1, d2, lap] = spectral_derivatives(&f, n);
        for idx in 0..n * n {
            let (x, y) = (TWO_PI * (idx / n) as f64 / n as f64, TWO_PI * (idx % n) as f64 / n as f64);
            let c = (2.0 * x - 3.0 * y).cos();
            assert_abs_diff_eq!(d1[idx], 2.0 * c, epsilon = 1e-12);
            assert_abs_diff_eq!(d2[idx], -3.0 * c, epsilon = 1e-12);
            assert_abs_diff_eq!(lap[idx], -13.0 * f[idx], epsilon = 1e-11);
        }
    }

    #[test]
    fn stratonovich_fields_vanish() {
        let s = Spectrum::from_shells(3.0, 1.0, |r| r.powf(-1.5)).unwrap();
        assert!(stratonovich_residual(&s, 32) < 1e-13);
    }

    #[test]
    fn calibration_two_mode() {
        let r = variance_calibration(&two_mode(1.0), 2000, 0.1, 1e-3, 4).unwrap();
        assert_eq!(r.analytic, [1.0, 1.0]);
        assert!(r.within_3se, "{r:?}");
        assert!(r.isotropic_analytic);
        let r2 = variance_calibration(&two_mode(2.0), 2000, 0.1, 1e-3, 4).unwrap();
        assert_eq!(r2.analytic, [2.0, 2.0]);
        assert!(r2.within_3se, "{r2:?}");
    }

    #[test]
    fn calibration_negative_control() {
        let s = Spectrum::new_relaxed(vec![Mode { k: wv(1, 0), lambda: 1.0 }], 1.0, None).unwrap();
        let r = variance_calibration(&s, 1000, 0.1, 1e-3, 4).unwrap();
        assert_eq!(r.analytic, [0.0, 1.0]);
        assert!(!r.isotropic_analytic);
        assert!(r.isotropy_z.abs() > 10.0);
    }
}
