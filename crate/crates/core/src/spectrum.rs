//! Wave vectors, divergence-free eigenfields and noise spectra on the flat
//! 2-torus `T = R/2πZ × R/2πZ`.
//!
//! The noise is built from the cosine/sine fields
//!
//! ```text
//! A_k(θ) = k⊥ cos(k·θ),   B_k(θ) = k⊥ sin(k·θ),   k⊥ = (k2, -k1)
//! ```
//!
//! which are divergence free and have vanishing self-advection because
//! `k·k⊥ = 0`. Only one of `{k, -k}` is stored (the canonical half-lattice
//! `k2 > 0`, or `k2 = 0` and `k1 > 0`); every mode sum in the crate runs over
//! the stored set.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the torus or a tangent vector, in radians.
pub type Point = [f64; 2];

/// Lattice vector `k ∈ Z² \ {0}`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WaveVector {
    pub k1: i32,
    pub k2: i32,
}

impl WaveVector {
    pub fn new(k1: i32, k2: i32) -> Result<Self> {
        if k1 == 0 && k2 == 0 {
            return Err(Error::ZeroWaveVector);
        }
        Ok(Self { k1, k2 })
    }

    /// Quarter turn `(k2, -k1)`.
    pub fn perp(self) -> Self {
        Self {
            k1: self.k2,
            k2: -self.k1,
        }
    }

    pub fn neg(self) -> Self {
        Self {
            k1: -self.k1,
            k2: -self.k2,
        }
    }

    pub fn norm_sq(self) -> i64 {
        let (a, b) = (self.k1 as i64, self.k2 as i64);
        a * a + b * b
    }

    pub fn norm(self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    pub fn as_f64(self) -> [f64; 2] {
        [self.k1 as f64, self.k2 as f64]
    }

    /// `n_k = k / |k|`.
    pub fn unit(self) -> [f64; 2] {
        let n = self.norm();
        [self.k1 as f64 / n, self.k2 as f64 / n]
    }

    pub fn dot(self, p: Point) -> f64 {
        self.k1 as f64 * p[0] + self.k2 as f64 * p[1]
    }

    pub fn is_canonical(self) -> bool {
        self.k2 > 0 || (self.k2 == 0 && self.k1 > 0)
    }

    /// Representative of `{k, -k}` on the canonical half-lattice.
    pub fn canonical(self) -> Self {
        if self.is_canonical() {
            self
        } else {
            self.neg()
        }
    }
}

impl fmt::Display for WaveVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.k1, self.k2)
    }
}

/// `perp(k)`; total on the nonzero lattice.
pub fn perp(k: WaveVector) -> WaveVector {
    k.perp()
}

/// `A_k(θ) = k⊥ cos(k·θ)`.
pub fn eval_a(k: WaveVector, theta: Point) -> Point {
    let p = k.perp().as_f64();
    let c = k.dot(theta).cos();
    [p[0] * c, p[1] * c]
}

/// `B_k(θ) = k⊥ sin(k·θ)`.
pub fn eval_b(k: WaveVector, theta: Point) -> Point {
    let p = k.perp().as_f64();
    let s = k.dot(theta).sin();
    [p[0] * s, p[1] * s]
}

/// Jacobians `∂_j A_i` and `∂_j B_i` at `θ`.
pub fn jacobians(k: WaveVector, theta: Point) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let p = k.perp().as_f64();
    let kk = k.as_f64();
    let (s, c) = k.dot(theta).sin_cos();
    let mut ja = [[0.0; 2]; 2];
    let mut jb = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            ja[i][j] = -p[i] * kk[j] * s;
            jb[i][j] = p[i] * kk[j] * c;
        }
    }
    (ja, jb)
}

fn mat_vec(m: &[[f64; 2]; 2], v: Point) -> Point {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// The four advection terms `(A·∇)A, (B·∇)B, (A·∇)B, (B·∇)A` of one mode.
pub fn self_advection_terms(k: WaveVector, theta: Point) -> [Point; 4] {
    let (ja, jb) = jacobians(k, theta);
    let a = eval_a(k, theta);
    let b = eval_b(k, theta);
    [mat_vec(&ja, a), mat_vec(&jb, b), mat_vec(&jb, a), mat_vec(&ja, b)]
}

/// One stored mode of the noise.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k: WaveVector,
    pub lambda: f64,
}

/// `C = ½ Σ λ_k²`, flagged when the spectrum carries no energy.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct GeneratorConstant {
    pub value: f64,
    pub degenerate: bool,
}

/// Noise spectrum: stored modes, viscosity `ν`, optional band limit `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    modes: Vec<Mode>,
    nu: f64,
    radius: Option<f64>,
}

const REL_EQ: f64 = 1e-12;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_EQ * a.abs().max(b.abs()).max(1.0)
}

impl Spectrum {
    /// Validated spectrum: canonical, distinct, isotropic in `|k|`, closed
    /// under the quarter turn, and band-limited by `radius` if given.
    pub fn new(modes: Vec<Mode>, nu: f64, radius: Option<f64>) -> Result<Self> {
        let s = Self::new_relaxed(modes, nu, radius)?;
        s.check_isotropy()?;
        Ok(s)
    }

    /// Like [`Spectrum::new`] but without the `λ(|k|)` and quarter-turn
    /// checks. Used for negative controls.
    pub fn new_relaxed(modes: Vec<Mode>, nu: f64, radius: Option<f64>) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::InvalidSpectrum(format!("nu must be positive, got {nu}")));
        }
        if let Some(r) = radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidSpectrum(format!("radius must be positive, got {r}")));
            }
        }
        let mut seen = HashMap::new();
        for m in &modes {
            if m.k.k1 == 0 && m.k.k2 == 0 {
                return Err(Error::ZeroWaveVector);
            }
            if !m.k.is_canonical() {
                return Err(Error::NonCanonical(m.k.k1, m.k.k2));
            }
            if !(m.lambda >= 0.0 && m.lambda.is_finite()) {
                return Err(Error::InvalidSpectrum(format!(
                    "lambda for {} must be finite and nonnegative",
                    m.k
                )));
            }
            if seen.insert(m.k, m.lambda).is_some() {
                return Err(Error::DuplicateMode(m.k.k1, m.k.k2));
            }
            if let Some(r) = radius {
                if m.lambda > 0.0 && (m.k.norm_sq() as f64) > r * r + 1e-9 {
                    return Err(Error::InvalidSpectrum(format!(
                        "mode {} lies outside the band limit R = {r}",
                        m.k
                    )));
                }
            }
        }
        Ok(Self { modes, nu, radius })
    }

    fn check_isotropy(&self) -> Result<()> {
        let mut by_shell: HashMap<i64, f64> = HashMap::new();
        let lookup: HashMap<WaveVector, f64> = self.modes.iter().map(|m| (m.k, m.lambda)).collect();
        for m in &self.modes {
            if let Some(&l) = by_shell.get(&m.k.norm_sq()) {
                if !close(l, m.lambda) {
                    return Err(Error::InvalidSpectrum(format!(
                        "lambda must depend only on |k|: shell |k|² = {} has {l} and {}",
                        m.k.norm_sq(),
                        m.lambda
                    )));
                }
            } else {
                by_shell.insert(m.k.norm_sq(), m.lambda);
            }
            if m.lambda > 0.0 {
                let partner = m.k.perp().canonical();
                match lookup.get(&partner) {
                    Some(&l) if close(l, m.lambda) => {}
                    _ => {
                        return Err(Error::InvalidSpectrum(format!(
                            "spectrum is not closed under the quarter turn: {} stored without {partner}",
                            m.k
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// All canonical `k` with `0 < |k| ≤ radius`, amplitude `profile(|k|)`.
    /// Modes with zero amplitude are dropped.
    pub fn from_shells(radius: f64, nu: f64, profile: impl Fn(f64) -> f64) -> Result<Self> {
        if !(radius >= 1.0) {
            return Err(Error::InvalidSpectrum(format!("shell radius must be ≥ 1, got {radius}")));
        }
        let r = radius.floor() as i32;
        let mut modes = Vec::new();
        for k2 in 0..=r {
            for k1 in -r..=r {
                let k = WaveVector { k1, k2 };
                if (k1 == 0 && k2 == 0) || !k.is_canonical() {
                    continue;
                }
                if (k.norm_sq() as f64) > radius * radius + 1e-9 {
                    continue;
                }
                let lambda = profile(k.norm());
                if lambda > 0.0 {
                    modes.push(Mode { k, lambda });
                }
            }
        }
        Self::new(modes, nu, Some(radius))
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn radius(&self) -> Option<f64> {
        self.radius
    }

    /// Same modes, different viscosity.
    pub fn with_nu(&self, nu: f64) -> Result<Self> {
        Self::new_relaxed(self.modes.clone(), nu, self.radius)
    }

    /// Same modes with every amplitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let modes = self
            .modes
            .iter()
            .map(|m| Mode {
                k: m.k,
                lambda: m.lambda * factor,
            })
            .collect();
        Self::new_relaxed(modes, self.nu, self.radius)
    }

    pub fn generator_constant(&self) -> GeneratorConstant {
        let value = 0.5 * self.modes.iter().map(|m| m.lambda * m.lambda).sum::<f64>();
        GeneratorConstant {
            value,
            degenerate: value == 0.0,
        }
    }

    /// Rescale all amplitudes so that `C = 1`.
    pub fn normalized(&self) -> Result<Self> {
        let c = self.generator_constant();
        if c.degenerate {
            return Err(Error::DegenerateSpectrum);
        }
        self.scaled(1.0 / c.value.sqrt())
    }

    /// `Σ λ_k² |k|⁴` over stored modes with `|k|² ≤ bound²` (all modes if `None`).
    pub fn sum_lambda_sq_k4(&self, bound: Option<f64>) -> f64 {
        self.modes
            .iter()
            .filter(|m| within(m.k, bound))
            .map(|m| {
                let n2 = m.k.norm_sq() as f64;
                m.lambda * m.lambda * n2 * n2
            })
            .sum()
    }

    /// `Σ |k|² λ_k²`, the regularity sum of the noise.
    pub fn sum_lambda_sq_k2(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| m.lambda * m.lambda * m.k.norm_sq() as f64)
            .sum()
    }

    /// Per-component variance rate `ν Σ λ_k² (k⊥)_i²` of a single particle.
    pub fn single_particle_variance_rate(&self) -> [f64; 2] {
        let mut r = [0.0; 2];
        for m in &self.modes {
            let p = m.k.perp().as_f64();
            let l2 = m.lambda * m.lambda;
            r[0] += l2 * p[0] * p[0];
            r[1] += l2 * p[1] * p[1];
        }
        [self.nu * r[0], self.nu * r[1]]
    }

    /// Noise velocity coefficient `Σ λ√ν (A_k dx_k + B_k dy_k)` at `θ`.
    pub fn noise_displacement(&self, theta: Point, dx: &[f64], dy: &[f64]) -> Point {
        let sq = self.nu.sqrt();
        let mut out = [0.0; 2];
        for (i, m) in self.modes.iter().enumerate() {
            let a = eval_a(m.k, theta);
            let b = eval_b(m.k, theta);
            let c = m.lambda * sq;
            out[0] += c * (a[0] * dx[i] + b[0] * dy[i]);
            out[1] += c * (a[1] * dx[i] + b[1] * dy[i]);
        }
        out
    }

    /// Itô-to-Stratonovich correction `½ Σ λ²ν ((A·∇)A + (B·∇)B)` at `θ`.
    pub fn stratonovich_correction(&self, theta: Point) -> Point {
        let mut out = [0.0; 2];
        for m in &self.modes {
            let t = self_advection_terms(m.k, theta);
            let c = 0.5 * m.lambda * m.lambda * self.nu;
            out[0] += c * (t[0][0] + t[1][0]);
            out[1] += c * (t[0][1] + t[1][1]);
        }
        out
    }

    pub fn to_spec(&self) -> SpectrumSpec {
        SpectrumSpec {
            nu: self.nu,
            radius: self.radius,
            normalize: false,
            modes: self
                .modes
                .iter()
                .map(|m| ModeSpec {
                    k: [m.k.k1, m.k.k2],
                    lambda: m.lambda,
                })
                .collect(),
            shell: None,
        }
    }
}

pub(crate) fn within(k: WaveVector, bound: Option<f64>) -> bool {
    match bound {
        Some(r) => (k.norm_sq() as f64) <= r * r + 1e-9,
        None => true,
    }
}

/// Serialized form of one mode: `{ k = [k1, k2], lambda = ... }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub k: [i32; 2],
    pub lambda: f64,
}

/// Shell profile `λ(|k|) = amplitude · |k|^exponent` for `|k| ≤ radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellSpec {
    pub amplitude: f64,
    #[serde(default)]
    pub exponent: f64,
}

/// Config block for a spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSpec {
    pub nu: f64,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub modes: Vec<ModeSpec>,
    #[serde(default)]
    pub shell: Option<ShellSpec>,
}

impl SpectrumSpec {
    pub fn build(&self) -> Result<Spectrum> {
        let s = match (&self.shell, self.modes.is_empty()) {
            (Some(_), false) => {
                return Err(Error::Config(
                    "spectrum: give either `modes` or `shell`, not both".into(),
                ))
            }
            (Some(shell), true) => {
                let r = self.radius.ok_or_else(|| {
                    Error::Config("spectrum: `shell` requires `radius`".into())
                })?;
                let (amp, ex) = (shell.amplitude, shell.exponent);
                Spectrum::from_shells(r, self.nu, |n| amp * n.powf(ex))?
            }
            (None, _) => {
                let modes = self
                    .modes
                    .iter()
                    .map(|m| {
                        // −k carries the same field law as k
                        WaveVector::new(m.k[0], m.k[1]).map(|k| Mode {
                            k: k.canonical(),
                            lambda: m.lambda,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Spectrum::new(modes, self.nu, self.radius)?
            }
        };
        if self.normalize {
            s.normalized()
        } else {
            Ok(s)
        }
    }
}

/// Callback signature for user-supplied drift fields.
pub type DriftFn = dyn Fn(f64, Point) -> Point + Send + Sync;

/// Deterministic drift `u(t, θ)` of the flow.
#[derive(Clone)]
pub enum DriftField {
    Zero,
    /// `u(t,θ) = e^{-ν|k|²t}(a A_k(θ) + b B_k(θ))`.
    SingleMode { k: WaveVector, a: f64, b: f64, nu: f64 },
    /// No Navier-Stokes guarantee.
    Custom(Arc<DriftFn>),
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => write!(f, "Zero"),
            Self::SingleMode { k, a, b, nu } => f
                .debug_struct("SingleMode")
                .field("k", k)
                .field("a", a)
                .field("b", b)
                .field("nu", nu)
                .finish(),
            Self::Custom(_) => write!(f, "Custom(<fn>)"),
        }
    }
}

impl DriftField {
    pub fn single_mode(k: WaveVector, a: f64, b: f64, nu: f64) -> Self {
        Self::SingleMode { k, a, b, nu }
    }

    pub fn custom(f: impl Fn(f64, Point) -> Point + Send + Sync + 'static) -> Self {
        Self::Custom(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero)
    }

    /// Whether the field is a known exact Navier-Stokes solution.
    pub fn is_navier_stokes(&self) -> bool {
        !matches!(self, Self::Custom(_))
    }

    pub fn eval(&self, t: f64, theta: Point) -> Point {
        match self {
            Self::Zero => [0.0, 0.0],
            Self::SingleMode { k, a, b, nu } => {
                let decay = (-nu * k.norm_sq() as f64 * t).exp();
                let p = k.perp().as_f64();
                let (s, c) = k.dot(theta).sin_cos();
                let w = decay * (a * c + b * s);
                [p[0] * w, p[1] * w]
            }
            Self::Custom(f) => f(t, theta),
        }
    }

    /// `∂_t u(t, θ)`; analytic except for `Custom`, which uses a fourth
    /// order central difference.
    pub fn time_derivative(&self, t: f64, theta: Point) -> Point {
        match self {
            Self::Zero => [0.0, 0.0],
            Self::SingleMode { k, nu, .. } => {
                let u = self.eval(t, theta);
                let r = -nu * k.norm_sq() as f64;
                [r * u[0], r * u[1]]
            }
            Self::Custom(f) => {
                let h = 1e-3;
                let p2 = f(t + 2.0 * h, theta);
                let p1 = f(t + h, theta);
                let m1 = f(t - h, theta);
                let m2 = f(t - 2.0 * h, theta);
                let d = |i: usize| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h);
                [d(0), d(1)]
            }
        }
    }

    /// Exact `‖u(t,·)‖` in the normalized `L²(T)` norm, where known.
    pub fn l2_norm(&self, t: f64) -> Option<f64> {
        match self {
            Self::Zero => Some(0.0),
            Self::SingleMode { k, a, b, nu } => {
                let decay = (-nu * k.norm_sq() as f64 * t).exp();
                Some(decay * k.norm() * ((a * a + b * b) / 2.0).sqrt())
            }
            Self::Custom(_) => None,
        }
    }

    /// `(c₁, c₂)` with `|∇u(t,θ)| ≤ c₁ e^{-c₂ t}`.
    pub fn grad_bound_constants(&self) -> Result<(f64, f64)> {
        match self {
            Self::Zero => Ok((0.0, 0.0)),
            Self::SingleMode { k, a, b, nu } => {
                let n2 = k.norm_sq() as f64;
                Ok((n2 * (a * a + b * b).sqrt(), nu * n2))
            }
            Self::Custom(_) => Err(Error::UnsupportedDrift("gradient bound of a custom field")),
        }
    }
}

/// `∫₀ᵗ c₁ e^{-c₂ s} ds`.
pub fn grad_envelope_integral(c1: f64, c2: f64, t: f64) -> f64 {
    if c1 == 0.0 {
        0.0
    } else if c2 == 0.0 {
        c1 * t
    } else {
        c1 / c2 * (1.0 - (-c2 * t).exp())
    }
}

/// Precomputed per-mode data for fast evaluation of `cos(k·θ), sin(k·θ)`
/// over many points via integer powers of `e^{iθ₁}` and `e^{iθ₂}`.
#[derive(Clone, Debug)]
pub struct ModeTable {
    ks: Vec<(i32, i32)>,
    perp: Vec<[f64; 2]>,
    amp: Vec<f64>,
    m1: usize,
    m2: usize,
}

impl ModeTable {
    pub fn new(s: &Spectrum) -> Self {
        let sq = s.nu().sqrt();
        let ks: Vec<(i32, i32)> = s.modes().iter().map(|m| (m.k.k1, m.k.k2)).collect();
        let m1 = ks.iter().map(|k| k.0.unsigned_abs() as usize).max().unwrap_or(0);
        let m2 = ks.iter().map(|k| k.1.unsigned_abs() as usize).max().unwrap_or(0);
        Self {
            perp: s.modes().iter().map(|m| m.k.perp().as_f64()).collect(),
            amp: s.modes().iter().map(|m| m.lambda * sq).collect(),
            ks,
            m1,
            m2,
        }
    }

    pub fn len(&self) -> usize {
        self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ks.is_empty()
    }

    /// `λ_k √ν` per mode.
    pub fn amplitudes(&self) -> &[f64] {
        &self.amp
    }

    pub fn perps(&self) -> &[[f64; 2]] {
        &self.perp
    }

    pub fn new_phases(&self) -> Phases {
        Phases {
            p1: vec![(1.0, 0.0); 2 * self.m1 + 1],
            p2: vec![(1.0, 0.0); 2 * self.m2 + 1],
            cs: vec![(1.0, 0.0); self.ks.len()],
        }
    }

    /// Fill `ph.cs[i] = (cos k_i·θ, sin k_i·θ)`.
    pub fn phases(&self, theta: Point, ph: &mut Phases) {
        fill_powers(theta[0], self.m1, &mut ph.p1);
        fill_powers(theta[1], self.m2, &mut ph.p2);
        for (out, &(k1, k2)) in ph.cs.iter_mut().zip(&self.ks) {
            let a = ph.p1[(k1 + self.m1 as i32) as usize];
            let b = ph.p2[(k2 + self.m2 as i32) as usize];
            *out = (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
        }
    }

    /// Noise displacement `Σ λ√ν k⊥ (cos dx + sin dy)` from filled phases.
    pub fn displacement(&self, ph: &Phases, dx: &[f64], dy: &[f64]) -> Point {
        let mut out = [0.0; 2];
        for i in 0..self.ks.len() {
            let (c, s) = ph.cs[i];
            let w = self.amp[i] * (c * dx[i] + s * dy[i]);
            out[0] += self.perp[i][0] * w;
            out[1] += self.perp[i][1] * w;
        }
        out
    }
}

/// Scratch buffers for [`ModeTable::phases`].
#[derive(Clone, Debug)]
pub struct Phases {
    p1: Vec<(f64, f64)>,
    p2: Vec<(f64, f64)>,
    /// `(cos k·θ, sin k·θ)` per mode, valid after [`ModeTable::phases`].
    pub cs: Vec<(f64, f64)>,
}

fn fill_powers(x: f64, m: usize, out: &mut [(f64, f64)]) {
    let (s, c) = x.sin_cos();
    out[m] = (1.0, 0.0);
    let mut cur = (1.0, 0.0);
    for j in 1..=m {
        // refresh from sin_cos every 8 powers to bound drift
        cur = if j % 8 == 0 {
            let (sj, cj) = (j as f64 * x).sin_cos();
            (cj, sj)
        } else {
            (cur.0 * c - cur.1 * s, cur.0 * s + cur.1 * c)
        };
        out[m + j] = cur;
        out[m - j] = (cur.0, -cur.1);
    }
}

/// Exact `sin(x)/x` with `ℓ(0) = 1`.
pub fn ell(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}
