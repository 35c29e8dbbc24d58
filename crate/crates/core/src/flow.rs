//! Time stepping of one or two coupled flows of diffeomorphisms driven by
//! the same spectral Brownian noise.
//!
//! A flow is discretized by its Lagrangian positions on a uniform label grid.
//! Each step is an Euler-Maruyama update
//!
//! ```text
//! θ' = θ + Σ_k λ_k √ν (A_k(θ) dx_k + B_k(θ) dy_k) + u(t, θ) dt   (mod 2π)
//! ```
//!
//! The Stratonovich correction `½ Σ λ²ν ((A·∇)A + (B·∇)B)` is identically
//! zero for these fields, so the Itô step integrates the Stratonovich
//! equation as well.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::pointwise_delta;
use crate::spectrum::{DriftField, ModeTable, Phases, Point, Spectrum};

pub const TWO_PI: f64 = 2.0 * PI;

/// Reduce an angle to `[0, 2π)`.
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(TWO_PI);
    if r >= TWO_PI {
        0.0
    } else {
        r
    }
}

/// Label `(2πi/n, 2πj/n)` of grid index `(i, j)`.
pub fn label_point(n: usize, i: usize, j: usize) -> Point {
    [TWO_PI * i as f64 / n as f64, TWO_PI * j as f64 / n as f64]
}

/// Positions of a discretized diffeomorphism on an `n × n` label grid,
/// stored row-major by label index `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffeoState {
    grid_n: usize,
    positions: Vec<Point>,
    time: f64,
}

impl DiffeoState {
    pub fn identity(n: usize) -> Self {
        Self::from_map(n, |th| th)
    }

    /// Positions `f(θ)` at every label, wrapped into `[0, 2π)`.
    pub fn from_map(n: usize, f: impl Fn(Point) -> Point) -> Self {
        assert!(n > 0, "grid must have at least one label");
        let mut positions = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let p = f(label_point(n, i, j));
                positions.push([wrap(p[0]), wrap(p[1])]);
            }
        }
        Self {
            grid_n: n,
            positions,
            time: 0.0,
        }
    }

    pub fn from_positions(n: usize, positions: Vec<Point>, time: f64) -> Result<Self> {
        if positions.len() != n * n {
            return Err(Error::InvalidParameter(format!(
                "expected {} positions for grid {n}, got {}",
                n * n,
                positions.len()
            )));
        }
        let positions = positions.into_iter().map(|p| [wrap(p[0]), wrap(p[1])]).collect();
        Ok(Self {
            grid_n: n,
            positions,
            time,
        })
    }

    /// `θ ↦ θ + c`.
    pub fn translation(n: usize, c: Point) -> Self {
        Self::from_map(n, |th| [th[0] + c[0], th[1] + c[1]])
    }

    /// Measure-preserving shear. Axis 0: `(θ₁ + a sin θ₂, θ₂)`;
    /// axis 1: `(θ₁, θ₂ + a sin θ₁)`.
    pub fn shear(n: usize, amplitude: f64, axis: usize) -> Self {
        Self::from_map(n, |th| {
            if axis == 0 {
                [th[0] + amplitude * th[1].sin(), th[1]]
            } else {
                [th[0], th[1] + amplitude * th[0].sin()]
            }
        })
    }

    /// `g ∘ τ` where `τ` shifts labels by whole grid cells.
    pub fn relabeled(&self, di: usize, dj: usize) -> Self {
        let n = self.grid_n;
        let mut positions = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                positions.push(self.at((i + di) % n, (j + dj) % n));
            }
        }
        Self {
            grid_n: n,
            positions,
            time: self.time,
        }
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn at(&self, i: usize, j: usize) -> Point {
        self.positions[i * self.grid_n + j]
    }

    pub fn label(&self, idx: usize) -> Point {
        label_point(self.grid_n, idx / self.grid_n, idx % self.grid_n)
    }

    pub(crate) fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.grid_n != other.grid_n {
            Err(Error::GridMismatch(self.grid_n, other.grid_n))
        } else {
            Ok(())
        }
    }
}

/// Brownian increments `(dx_k, dy_k)` for every stored mode, `N(0, dt)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrement {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl NoiseIncrement {
    pub fn zero(n_modes: usize) -> Self {
        Self {
            dx: vec![0.0; n_modes],
            dy: vec![0.0; n_modes],
        }
    }

    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }
}

/// Draw i.i.d. `N(0, dt)` pairs for `n_modes` modes.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, n_modes: usize, dt: f64) -> NoiseIncrement {
    let sd = dt.sqrt();
    let mut w = NoiseIncrement::zero(n_modes);
    for i in 0..n_modes {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        w.dx[i] = sd * x;
        w.dy[i] = sd * y;
    }
    w
}

/// Words of keystream reserved for each step; steps never overlap.
const WORDS_PER_STEP: u128 = 1 << 28;

/// Counter-based noise source: increment `step` of path `stream` is a pure
/// function of `(seed, stream, step)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub stream: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng_at(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        rng
    }

    pub fn increment(&self, step: u64, n_modes: usize, dt: f64) -> NoiseIncrement {
        sample_noise(&mut self.rng_at(step), n_modes, dt)
    }
}

/// Reusable Euler-Maruyama integrator for one spectrum and drift.
#[derive(Clone, Debug)]
pub struct Stepper {
    table: ModeTable,
    drift: DriftField,
    phases: Phases,
}

impl Stepper {
    pub fn new(s: &Spectrum, u: &DriftField) -> Self {
        let table = ModeTable::new(s);
        let phases = table.new_phases();
        Self {
            table,
            drift: u.clone(),
            phases,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.table.len()
    }

    pub fn table(&self) -> &ModeTable {
        &self.table
    }

    /// Displacement of a single point over one step, without wrapping.
    pub fn displacement(&mut self, t: f64, p: Point, w: &NoiseIncrement, dt: f64) -> Point {
        self.table.phases(p, &mut self.phases);
        let mut d = self.table.displacement(&self.phases, &w.dx, &w.dy);
        if !self.drift.is_zero() {
            let u = self.drift.eval(t, p);
            d[0] += u[0] * dt;
            d[1] += u[1] * dt;
        }
        d
    }

    pub fn step_in_place(&mut self, state: &mut DiffeoState, w: &NoiseIncrement, dt: f64) {
        let t = state.time;
        for idx in 0..state.positions.len() {
            let p = state.positions[idx];
            let d = self.displacement(t, p, w, dt);
            state.positions[idx] = [wrap(p[0] + d[0]), wrap(p[1] + d[1])];
        }
        state.time = t + dt;
    }
}

/// One Euler-Maruyama step of every label.
pub fn step(
    state: &DiffeoState,
    s: &Spectrum,
    u: &DriftField,
    w: &NoiseIncrement,
    dt: f64,
) -> DiffeoState {
    let mut next = state.clone();
    Stepper::new(s, u).step_in_place(&mut next, w, dt);
    next
}

/// Options for [`evolve_coupled_observed`].
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EvolveOptions {
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub path_index: u64,
    /// Keep every `snapshot_every`-th state pair (0 keeps only the endpoints).
    pub snapshot_every: usize,
}

impl EvolveOptions {
    pub fn new(dt: f64, n_steps: usize, seed: u64) -> Self {
        Self {
            dt,
            n_steps,
            seed,
            path_index: 0,
            snapshot_every: 1,
        }
    }

    pub fn path(mut self, index: u64) -> Self {
        self.path_index = index;
        self
    }

    pub fn snapshots(mut self, every: usize) -> Self {
        self.snapshot_every = every;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub g: DiffeoState,
    pub g_tilde: DiffeoState,
}

impl Snapshot {
    pub fn time(&self) -> f64 {
        self.g.time()
    }
}

/// Two flows driven by the same noise sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledPath {
    pub dt: f64,
    pub seed: u64,
    pub path_index: u64,
    pub n_steps: usize,
    pub snapshot_every: usize,
    pub snapshots: Vec<Snapshot>,
}

impl CoupledPath {
    pub fn grid_n(&self) -> usize {
        self.snapshots.first().map(|s| s.g.grid_n()).unwrap_or(0)
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("a path always holds its initial state")
    }

    /// True when every step is stored.
    pub fn is_dense(&self) -> bool {
        self.snapshot_every == 1 && self.snapshots.len() == self.n_steps + 1
    }
}

/// Evolve `(φ, ψ)` for `n_steps` shared-noise steps, keeping every step.
pub fn evolve_coupled(
    phi: &DiffeoState,
    psi: &DiffeoState,
    s: &Spectrum,
    u: &DriftField,
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<CoupledPath> {
    evolve_coupled_observed(phi, psi, s, u, EvolveOptions::new(dt, n_steps, seed), |_, _, _| {})
}

/// Evolve a coupled pair, calling `observer(step, g, g̃)` on the initial pair
/// and after every step.
pub fn evolve_coupled_observed(
    phi: &DiffeoState,
    psi: &DiffeoState,
    s: &Spectrum,
    u: &DriftField,
    opts: EvolveOptions,
    mut observer: impl FnMut(usize, &DiffeoState, &DiffeoState),
) -> Result<CoupledPath> {
    phi.check_same_grid(psi)?;
    if !(opts.dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {}", opts.dt)));
    }
    let noise = NoiseStream::new(opts.seed, opts.path_index);
    let mut stepper = Stepper::new(s, u);
    let mut g = phi.clone();
    let mut gt = psi.clone();
    let mut snapshots = vec![Snapshot {
        step: 0,
        g: g.clone(),
        g_tilde: gt.clone(),
    }];
    observer(0, &g, &gt);
    for n in 0..opts.n_steps {
        let w = noise.increment(n as u64, stepper.n_modes(), opts.dt);
        stepper.step_in_place(&mut g, &w, opts.dt);
        stepper.step_in_place(&mut gt, &w, opts.dt);
        let step = n + 1;
        observer(step, &g, &gt);
        let keep = if opts.snapshot_every == 0 {
            step == opts.n_steps
        } else {
            step % opts.snapshot_every == 0 || step == opts.n_steps
        };
        if keep {
            snapshots.push(Snapshot {
                step,
                g: g.clone(),
                g_tilde: gt.clone(),
            });
        }
    }
    Ok(CoupledPath {
        dt: opts.dt,
        seed: opts.seed,
        path_index: opts.path_index,
        n_steps: opts.n_steps,
        snapshot_every: opts.snapshot_every,
        snapshots,
    })
}

/// Track one particle without wrapping, so that `X_t − X_0` is the total
/// displacement.
pub fn track_particle(
    start: Point,
    s: &Spectrum,
    u: &DriftField,
    dt: f64,
    n_steps: usize,
    noise: NoiseStream,
) -> Point {
    let mut stepper = Stepper::new(s, u);
    let mut p = start;
    for n in 0..n_steps {
        let w = noise.increment(n as u64, stepper.n_modes(), dt);
        let d = stepper.displacement(n as f64 * dt, p, &w, dt);
        p = [p[0] + d[0], p[1] + d[1]];
    }
    p
}

/// `max |det J − 1|` over labels, with `J` the centered-difference Jacobian
/// of label ↦ position (periodic wrap).
pub fn volume_distortion(state: &DiffeoState) -> f64 {
    let n = state.grid_n;
    assert!(n >= 4, "volume_distortion needs grid_n ≥ 4");
    let h2 = 2.0 * TWO_PI / n as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d1 = pointwise_delta(state.at((i + 1) % n, j), state.at((i + n - 1) % n, j));
            let d2 = pointwise_delta(state.at(i, (j + 1) % n), state.at(i, (j + n - 1) % n));
            let det = (d1[0] * d2[1] - d1[1] * d2[0]) / (h2 * h2);
            worst = worst.max((det - 1.0).abs());
        }
    }
    worst
}

/// Smallest intrinsic distance between two distinct labels' positions.
///
/// Uses a cell list of width `2π/n`; pairs farther apart than one cell are
/// not examined, so the result is exact whenever it is below `2π/n` and is
/// reported as `2π/n` otherwise.
pub fn min_separation(state: &DiffeoState) -> f64 {
    let n = state.grid_n;
    let cell = TWO_PI / n as f64;
    let cell_of = |x: f64| ((x / cell) as usize).min(n - 1);
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); n * n];
    for (idx, p) in state.positions.iter().enumerate() {
        cells[cell_of(p[0]) * n + cell_of(p[1])].push(idx);
    }
    let mut best = cell;
    for ci in 0..n {
        for cj in 0..n {
            for &a in &cells[ci * n + cj] {
                for di in [n - 1, 0, 1] {
                    for dj in [n - 1, 0, 1] {
                        let other = &cells[((ci + di) % n) * n + (cj + dj) % n];
                        for &b in other {
                            if b <= a {
                                continue;
                            }
                            let d = pointwise_delta(state.positions[a], state.positions[b]);
                            best = best.min((d[0] * d[0] + d[1] * d[1]).sqrt());
                        }
                    }
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{Mode, WaveVector};
    use approx::assert_abs_diff_eq;

    fn wv(a: i32, b: i32) -> WaveVector {
        WaveVector::new(a, b).unwrap()
    }

    fn two_mode(nu: f64) -> Spectrum {
        Spectrum::new(
            vec![
                Mode { k: wv(1, 0), lambda: 1.0 },
                Mode { k: wv(0, 1), lambda: 1.0 },
            ],
            nu,
            Some(1.0),
        )
        .unwrap()
    }

    #[test]
    fn wrap_stays_in_range() {
        assert_eq!(wrap(-1e-18), 0.0);
        assert!(wrap(-1e-12) < TWO_PI);
        assert_abs_diff_eq!(wrap(7.0), 7.0 - TWO_PI, epsilon = 1e-15);
    }

    #[test]
    fn noise_statistics() {
        let dt = 0.01;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let w = sample_noise(&mut rng, 2, dt);
            xs.push(w.dx[0]);
            ys.push(w.dx[1]);
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * (dt / n as f64).sqrt());
        assert!((var / dt - 1.0).abs() < 0.05);
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mean) * (y - my)).sum::<f64>() / n as f64;
        // standard error of the covariance of independent N(0,dt) pairs is dt/√n
        assert!(cov.abs() < 3.0 * dt / (n as f64).sqrt());
    }

    #[test]
    fn noise_stream_is_counter_based() {
        let ns = NoiseStream::new(42, 3);
        let a = ns.increment(17, 5, 1e-3);
        let b = ns.increment(17, 5, 1e-3);
        assert_eq!(a, b);
        assert_ne!(a, ns.increment(18, 5, 1e-3));
        assert_ne!(a, NoiseStream::new(42, 4).increment(17, 5, 1e-3));
        assert_ne!(a, NoiseStream::new(43, 3).increment(17, 5, 1e-3));
    }

    #[test]
    fn zero_noise_zero_drift_is_identity() {
        let s = two_mode(1.0);
        let g = DiffeoState::shear(8, 0.3, 0);
        let next = step(&g, &s, &DriftField::Zero, &NoiseIncrement::zero(2), 0.01);
        assert_eq!(next.positions(), g.positions());
        assert_abs_diff_eq!(next.time(), 0.01);
    }

    #[test]
    fn single_mode_hand_displacement() {
        let nu = 0.49;
        let s = Spectrum::new_relaxed(vec![Mode { k: wv(1, 0), lambda: 1.0 }], nu, None).unwrap();
        let g = DiffeoState::from_positions(1, vec![[PI / 2.0, 0.0]], 0.0).unwrap();
        let w = NoiseIncrement {
            dx: vec![0.3],
            dy: vec![-0.2],
        };
        let next = step(&g, &s, &DriftField::Zero, &w, 0.01);
        let p = next.positions()[0];
        // A_k vanishes at θ₁ = π/2 and B_k = (0, -1)
        assert_abs_diff_eq!(p[0], PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], wrap(nu.sqrt() * -1.0 * -0.2), epsilon = 1e-15);
    }

    fn rk4_reference(u: &DriftField, p: Point, t_end: f64) -> Point {
        let n = 20_000;
        let h = t_end / n as f64;
        let mut x = p;
        let mut t = 0.0;
        for _ in 0..n {
            let f = |t: f64, x: Point| u.eval(t, x);
            let k1 = f(t, x);
            let k2 = f(t + h / 2.0, [x[0] + h / 2.0 * k1[0], x[1] + h / 2.0 * k1[1]]);
            let k3 = f(t + h / 2.0, [x[0] + h / 2.0 * k2[0], x[1] + h / 2.0 * k2[1]]);
            let k4 = f(t + h, [x[0] + h * k3[0], x[1] + h * k3[1]]);
            for c in 0..2 {
                x[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
            t += h;
        }
        x
    }

    #[test]
    fn deterministic_drift_converges_to_ode_reference() {
        let s = two_mode(0.5);
        let u = DriftField::single_mode(wv(1, 2), 0.8, 0.3, 0.5);
        let start = [0.4, 1.9];
        let exact = rk4_reference(&u, start, 1.0);
        let mut errs = Vec::new();
        for n in [100usize, 200, 400] {
            let dt = 1.0 / n as f64;
            let mut g = DiffeoState::from_positions(1, vec![start], 0.0).unwrap();
            let mut st = Stepper::new(&s, &u);
            for _ in 0..n {
                st.step_in_place(&mut g, &NoiseIncrement::zero(2), dt);
            }
            let d = pointwise_delta(g.positions()[0], [wrap(exact[0]), wrap(exact[1])]);
            errs.push((d[0] * d[0] + d[1] * d[1]).sqrt());
        }
        // first order: halving dt halves the error
        assert!(errs[0] < 0.1);
        assert!((errs[0] / errs[1] - 2.0).abs() < 0.2, "{errs:?}");
        assert!((errs[1] / errs[2] - 2.0).abs() < 0.2, "{errs:?}");
    }

    #[test]
    fn identical_inputs_stay_identical() {
        let s = two_mode(1.0);
        let phi = DiffeoState::shear(8, 0.2, 1);
        let path = evolve_coupled(&phi, &phi, &s, &DriftField::Zero, 1e-3, 50, 9).unwrap();
        for snap in &path.snapshots {
            assert_eq!(snap.g, snap.g_tilde);
        }
        assert!(path.is_dense());
    }

    #[test]
    fn relabel_identity_holds_exactly() {
        let s = Spectrum::from_shells(2.0, 0.8, |n| 1.0 / n).unwrap();
        let phi = DiffeoState::shear(8, 0.25, 0);
        let psi = phi.relabeled(3, 5);
        let path = evolve_coupled(&phi, &psi, &s, &DriftField::Zero, 1e-3, 40, 5).unwrap();
        for snap in &path.snapshots {
            assert_eq!(snap.g.relabeled(3, 5).positions(), snap.g_tilde.positions());
        }
    }

    #[test]
    fn coupled_evolution_is_deterministic() {
        let s = two_mode(1.0);
        let u = DriftField::single_mode(wv(1, 0), 0.5, 0.1, 1.0);
        let phi = DiffeoState::identity(6);
        let psi = DiffeoState::translation(6, [0.05, 0.0]);
        let a = evolve_coupled(&phi, &psi, &s, &u, 1e-3, 30, 77).unwrap();
        let b = evolve_coupled(&phi, &psi, &s, &u, 1e-3, 30, 77).unwrap();
        assert_eq!(a, b);
        let c = evolve_coupled(&phi, &psi, &s, &u, 1e-3, 30, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let s = two_mode(1.0);
        let err = evolve_coupled(
            &DiffeoState::identity(4),
            &DiffeoState::identity(5),
            &s,
            &DriftField::Zero,
            1e-3,
            1,
            0,
        );
        assert!(matches!(err, Err(Error::GridMismatch(4, 5))));
    }

    #[test]
    fn volume_distortion_of_simple_maps() {
        assert!(volume_distortion(&DiffeoState::identity(16)) < 1e-12);
        assert!(volume_distortion(&DiffeoState::translation(16, [1.0, 2.5])) < 1e-12);
        // a shear has unit Jacobian; the centered difference is exact for it
        assert!(volume_distortion(&DiffeoState::shear(32, 0.4, 0)) < 1e-12);
        // a compressive map is detected
        let squeeze = DiffeoState::from_map(32, |th| [th[0] + 0.3 * th[0].sin(), th[1]]);
        assert!(volume_distortion(&squeeze) > 0.2);
    }

    #[test]
    fn separation_monitor() {
        let g = DiffeoState::identity(16);
        assert_abs_diff_eq!(min_separation(&g), TWO_PI / 16.0, epsilon = 1e-12);
        let mut pos = g.positions().to_vec();
        pos[5] = [pos[4][0] + 1e-3, pos[4][1]];
        let h = DiffeoState::from_positions(16, pos, 0.0).unwrap();
        assert_abs_diff_eq!(min_separation(&h), 1e-3, epsilon = 1e-12);
    }
}
