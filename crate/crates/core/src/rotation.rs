//! Direction process between two particles `g_t(θ)` and `g̃_t(θ)` carried by
//! coupled flows, and the quadratic variation of its angle.
//!
//! On the flat torus `e(t) = (cos X_t, sin X_t)` with
//!
//! ```text
//! d[X,X]_t = (4/ρ²) Σ |k|² λ_k² ν (n_k·e)² sin²(k·(g̃ − g)/2) dt
//! drift(X) = (1/ρ) ⟨u(g̃) − u(g), i e⟩
//! ```
//!
//! The drift above is the Stratonovich one. The conditional mean of `ΔX`
//! also carries the Itô term `−d⟨δ·e, δ·ie⟩/ρ²`, see [`ito_drift_correction`].

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{CoupledPath, DiffeoState};
use crate::metrics::{pointwise_delta, CUTLOCUS_MARGIN};
use crate::spectrum::{DriftField, Point, Spectrum};

/// Unit direction from `g(θ)` to `g̃(θ)` and the pointwise distance.
pub fn direction(g: &DiffeoState, gt: &DiffeoState, label: usize) -> Result<(Point, f64)> {
    g.check_same_grid(gt)?;
    let d = pointwise_delta(gt.positions()[label], g.positions()[label]);
    let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if r == 0.0 {
        let n = g.grid_n();
        return Err(Error::UndefinedDirection(label / n, label % n));
    }
    Ok(([d[0] / r, d[1] / r], r))
}

/// Quadratic-variation rate of the angle at one label.
pub fn qv_rate_analytic(g: &DiffeoState, gt: &DiffeoState, label: usize, s: &Spectrum) -> Result<f64> {
    let (e, r) = direction(g, gt, label)?;
    let d = [r * e[0], r * e[1]];
    Ok(qv_rate_at(d, e, r, s))
}

fn qv_rate_at(d: Point, e: Point, r: f64, s: &Spectrum) -> f64 {
    let sum: f64 = s
        .modes()
        .iter()
        .map(|m| {
            let n = m.k.unit();
            let ne = n[0] * e[0] + n[1] * e[1];
            let sn = (0.5 * m.k.dot(d)).sin();
            m.k.norm_sq() as f64 * m.lambda * m.lambda * ne * ne * sn * sn
        })
        .sum();
    4.0 * s.nu() * sum / (r * r)
}

/// `(ν/π²) Σ_{0<|k|<K} λ_k² |k|⁴`, valid when the pointwise distance is at most `π/(2K)`.
pub fn r9_lower_bound(s: &Spectrum, k_cut: f64) -> f64 {
    s.nu() / (PI * PI)
        * s.modes()
            .iter()
            .filter(|m| (m.k.norm_sq() as f64) < k_cut * k_cut)
            .map(|m| {
                let n2 = m.k.norm_sq() as f64;
                m.lambda * m.lambda * n2 * n2
            })
            .sum::<f64>()
}

/// Drift rate of the angle, `(1/ρ)⟨u(g̃) − u(g), i e⟩`.
pub fn drift_rate_analytic(g: &DiffeoState, gt: &DiffeoState, label: usize, u: &DriftField) -> Result<f64> {
    let (e, r) = direction(g, gt, label)?;
    let t = g.time();
    let a = u.eval(t, g.positions()[label]);
    let b = u.eval(t, gt.positions()[label]);
    Ok(((b[0] - a[0]) * -e[1] + (b[1] - a[1]) * e[0]) / r)
}

/// Noise-induced drift of the angle,
/// `(4ν/ρ²) Σ λ_k² (k·e)(k·ie) sin²(k·(g̃ − g)/2)`.
///
/// Vanishes for spectra symmetric under eighth turns, but not for lattice
/// shells in general.
pub fn ito_drift_correction(g: &DiffeoState, gt: &DiffeoState, label: usize, s: &Spectrum) -> Result<f64> {
    let (e, r) = direction(g, gt, label)?;
    let d = [r * e[0], r * e[1]];
    let ie = [-e[1], e[0]];
    let sum: f64 = s
        .modes()
        .iter()
        .map(|m| {
            let sn = (0.5 * m.k.dot(d)).sin();
            m.lambda * m.lambda * m.k.dot(e) * m.k.dot(ie) * sn * sn
        })
        .sum();
    Ok(4.0 * s.nu() * sum / (r * r))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationDiagnostics {
    pub t: f64,
    pub label: (usize, usize),
    pub e: Point,
    /// Unwrapped angle.
    pub x: f64,
    pub rho_point: f64,
    pub qv_rate_analytic: f64,
    pub cutlocus_flag: bool,
}

/// Follows the angle at one label, unwrapping jumps larger than `π`.
#[derive(Clone, Debug)]
pub struct RotationTracker {
    label: usize,
    spectrum: Spectrum,
    x: Option<f64>,
}

impl RotationTracker {
    pub fn new(label: usize, s: &Spectrum) -> Self {
        Self {
            label,
            spectrum: s.clone(),
            x: None,
        }
    }

    pub fn observe(&mut self, g: &DiffeoState, gt: &DiffeoState) -> Result<RotationDiagnostics> {
        let (e, r) = direction(g, gt, self.label)?;
        let raw = e[1].atan2(e[0]);
        let x = match self.x {
            None => raw,
            Some(prev) => unwrap_next(prev, raw),
        };
        self.x = Some(x);
        let d = [r * e[0], r * e[1]];
        let n = g.grid_n();
        Ok(RotationDiagnostics {
            t: g.time(),
            label: (self.label / n, self.label % n),
            e,
            x,
            rho_point: r,
            qv_rate_analytic: qv_rate_at(d, e, r, &self.spectrum),
            cutlocus_flag: d[0].abs() > PI - CUTLOCUS_MARGIN || d[1].abs() > PI - CUTLOCUS_MARGIN,
        })
    }
}

/// Continuation of `prev` whose angle is `raw`, closest to `prev`.
pub fn unwrap_next(prev: f64, raw: f64) -> f64 {
    let mut x = raw + (prev / (2.0 * PI)).round() * 2.0 * PI;
    while x - prev > PI {
        x -= 2.0 * PI;
    }
    while x - prev < -PI {
        x += 2.0 * PI;
    }
    x
}

/// `Σ (ΔX)² / (n dt)` over consecutive samples.
pub fn realized_qv(xs: &[f64], dt: f64) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: xs.len() });
    }
    let n = xs.len() - 1;
    let sum: f64 = xs.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok(sum / (n as f64 * dt))
}

/// Minimum window accepted by [`qv_empirical`].
pub const MIN_WINDOW: usize = 30;

/// Angle series at one label over the first `window` steps of a dense path.
pub fn angle_series(path: &CoupledPath, label: usize, window: usize, s: &Spectrum) -> Result<Vec<RotationDiagnostics>> {
    if !path.is_dense() {
        return Err(Error::InvalidParameter("path must store every step".into()));
    }
    if path.snapshots.len() < window + 1 {
        return Err(Error::InsufficientSamples {
            needed: window + 1,
            got: path.snapshots.len(),
        });
    }
    let mut tr = RotationTracker::new(label, s);
    path.snapshots[..=window]
        .iter()
        .map(|snap| tr.observe(&snap.g, &snap.g_tilde))
        .collect()
}

/// Realized quadratic-variation rate of the unwrapped angle over the first
/// `window` steps.
pub fn qv_empirical(path: &CoupledPath, label: usize, window: usize, s: &Spectrum) -> Result<f64> {
    if window < MIN_WINDOW {
        return Err(Error::InsufficientSamples {
            needed: MIN_WINDOW,
            got: window,
        });
    }
    let xs: Vec<f64> = angle_series(path, label, window, s)?.iter().map(|d| d.x).collect();
    realized_qv(&xs, path.dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{evolve_coupled, label_point};
    use crate::spectrum::{Mode, WaveVector};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn wv(a: i32, b: i32) -> WaveVector {
        WaveVector::new(a, b).unwrap()
    }

    #[test]
    fn direction_examples() {
        let g = DiffeoState::identity(8);
        let gt = DiffeoState::translation(8, [0.3, 0.0]);
        let (e, r) = direction(&g, &gt, 5).unwrap();
        assert_abs_diff_eq!(e[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.3, epsilon = 1e-14);
        let gt = DiffeoState::translation(8, [0.0, -0.3]);
        let (e, _) = direction(&g, &gt, 9).unwrap();
        assert_abs_diff_eq!(e[1], -1.0, epsilon = 1e-15);
        // antipode follows the tie-break of pointwise_delta
        let gt = DiffeoState::translation(8, [PI, 0.0]);
        let (e, r) = direction(&g, &gt, 0).unwrap();
        assert_abs_diff_eq!(r, PI, epsilon = 1e-12);
        assert!(e[0].abs() > 1.0 - 1e-12);
        assert!(matches!(direction(&g, &g, 10), Err(Error::UndefinedDirection(1, 2))));
    }

    #[test]
    fn ito_correction_cancels_on_axes() {
        let s = Spectrum::from_shells(3.0, 1.0, |_| 1.0).unwrap();
        let g = DiffeoState::identity(4);
        for c in [[0.2, 0.0], [0.0, -0.1], [0.15, 0.15]] {
            let gt = DiffeoState::translation(4, c);
            assert_abs_diff_eq!(ito_drift_correction(&g, &gt, 3, &s).unwrap(), 0.0, epsilon = 1e-12);
        }
        let gt = DiffeoState::translation(4, [0.2, 0.07]);
        assert!(ito_drift_correction(&g, &gt, 3, &s).unwrap().abs() > 1e-3);
        // a single mode: only the cross term of k survives
        let one = Spectrum::new_relaxed(vec![Mode { k: wv(1, 1), lambda: 1.0 }], 2.0, None).unwrap();
        let (a, b) = (0.3, 0.1);
        let gt = DiffeoState::translation(4, [a, b]);
        let r = (a * a + b * b).sqrt();
        let (e, ie) = ([a / r, b / r], [-b / r, a / r]);
        let want = 4.0 * 2.0 * (e[0] + e[1]) * (ie[0] + ie[1]) * (0.5 * (a + b)).sin().powi(2) / (r * r);
        assert_abs_diff_eq!(ito_drift_correction(&g, &gt, 0, &one).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn qv_rate_hand_values() {
        let (nu, lambda, c) = (0.7, 1.2, 0.4);
        let g = DiffeoState::identity(8);
        let gt = DiffeoState::translation(8, [c, 0.0]);
        let s = Spectrum::new_relaxed(vec![Mode { k: wv(1, 0), lambda }], nu, None).unwrap();
        let hand = 4.0 * nu * lambda * lambda * (c / 2.0).sin().powi(2) / (c * c);
        assert_abs_diff_eq!(qv_rate_analytic(&g, &gt, 3, &s).unwrap(), hand, epsilon = 1e-13);
        let s = Spectrum::new_relaxed(vec![Mode { k: wv(0, 1), lambda }], nu, None).unwrap();
        assert_abs_diff_eq!(qv_rate_analytic(&g, &gt, 3, &s).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn r9_bound_values() {
        let s = Spectrum::from_shells(2.0, 1.5, |_| 1.0).unwrap();
        // shells strictly below K = 2: |k|=1 (2 modes) and |k|=√2 (2 modes)
        assert_abs_diff_eq!(r9_lower_bound(&s, 2.0), 1.5 / (PI * PI) * (2.0 + 8.0), epsilon = 1e-14);
        assert_eq!(r9_lower_bound(&s, 1.0), 0.0);
    }

    #[test]
    fn drift_rate_values() {
        let g = DiffeoState::identity(8);
        let gt = DiffeoState::translation(8, [0.1, 0.0]);
        assert_eq!(drift_rate_analytic(&g, &gt, 7, &DriftField::Zero).unwrap(), 0.0);
        // u = (0, θ₁): relative velocity (0, 0.1) against e = (1,0) turns at rate 1
        let u = DriftField::custom(|_, th| [0.0, th[0]]);
        let r = drift_rate_analytic(&g, &gt, 8 * 2 + 1, &u).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unwrap_is_continuous() {
        let mut x = 0.0;
        let mut prev = 0.0;
        for i in 1..2000 {
            let true_x = 0.01 * i as f64;
            let raw = true_x.sin().atan2(true_x.cos());
            x = unwrap_next(prev, raw);
            assert!((x - prev).abs() < 0.02);
            prev = x;
        }
        assert_abs_diff_eq!(x, 19.99, epsilon = 1e-9);
        assert_abs_diff_eq!(unwrap_next(3.1, -3.1), 2.0 * PI - 3.1, epsilon = 1e-12);
    }

    #[test]
    fn realized_qv_of_brownian_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, dt) = (20_000usize, 1e-3_f64);
        let mut xs = vec![0.0];
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            xs.push(xs.last().unwrap() + dt.sqrt() * z);
        }
        // realized QV of n Gaussian increments has relative sd √(2/n)
        let q = realized_qv(&xs, dt).unwrap();
        assert!((q - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "{q}");
        assert_eq!(realized_qv(&[1.0; 40], dt).unwrap(), 0.0);
        assert!(realized_qv(&[1.0], dt).is_err());
    }

    #[test]
    fn frozen_pair_has_zero_qv() {
        let s = Spectrum::from_shells(1.0, 1.0, |_| 1.0).unwrap().scaled(0.0).unwrap();
        let g = DiffeoState::identity(4);
        let gt = DiffeoState::translation(4, [0.2, 0.1]);
        let path = evolve_coupled(&g, &gt, &s, &DriftField::Zero, 1e-3, 40, 3).unwrap();
        assert_eq!(qv_empirical(&path, 5, 40, &s).unwrap(), 0.0);
        assert!(matches!(
            qv_empirical(&path, 5, 20, &s),
            Err(Error::InsufficientSamples { needed: 30, got: 20 })
        ));
        assert!(qv_empirical(&path, 5, 41, &s).is_err());
    }

    #[test]
    fn tracker_reports_label_and_flags() {
        let s = Spectrum::from_shells(1.0, 1.0, |_| 1.0).unwrap();
        let g = DiffeoState::identity(4);
        let gt = DiffeoState::translation(4, [3.1, 0.0]);
        let mut tr = RotationTracker::new(6, &s);
        let d = tr.observe(&g, &gt).unwrap();
        assert_eq!(d.label, (1, 2));
        assert!(d.cutlocus_flag);
        assert_eq!(label_point(4, 1, 2), g.positions()[6]);
    }
}
