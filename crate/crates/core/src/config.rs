//! Run configuration, read from TOML.
//!
//! ```toml
//! scenario = "distance-audit"
//!
//! [spectrum]
//! nu = 1.0
//! radius = 1.0
//! modes = [{ k = [1, 0], lambda = 1.0 }, { k = [0, 1], lambda = 1.0 }]
//!
//! [flow]
//! grid_n = 32
//! dt = 1e-3
//! n_steps = 200
//!
//! [initial]
//! kind = "translation"
//! c = [0.1, 0.0]
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::DiffeoState;
use crate::spectrum::{DriftField, Spectrum, SpectrumSpec, WaveVector};
use crate::verify::build_annulus;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Simulate,
    DistanceAudit,
    StabilityAudit,
    Rotation,
    ExampleAnnulus,
    Calibrate,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Simulate => "simulate",
            Self::DistanceAudit => "distance-audit",
            Self::StabilityAudit => "stability-audit",
            Self::Rotation => "rotation",
            Self::ExampleAnnulus => "example-annulus",
            Self::Calibrate => "calibrate",
        };
        f.write_str(s)
    }
}

fn default_grid_n() -> usize {
    64
}
fn default_dt() -> f64 {
    1e-3
}
fn default_n_steps() -> usize {
    100
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_one")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Keep every n-th state in snapshot artifacts; 0 keeps the endpoints.
    #[serde(default)]
    pub snapshot_every: usize,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            grid_n: default_grid_n(),
            dt: default_dt(),
            n_steps: default_n_steps(),
            n_paths: 1,
            seed: 0,
            snapshot_every: 0,
        }
    }
}

/// Second initial state `ψ`; the first is always the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSpec {
    Identity,
    Translation { c: [f64; 2] },
    Shear { amplitude: f64, axis: usize },
    Annulus { alpha: f64, eps: f64 },
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self::Identity
    }
}

impl InitialSpec {
    pub fn build(&self, grid_n: usize) -> Result<DiffeoState> {
        Ok(match *self {
            Self::Identity => DiffeoState::identity(grid_n),
            Self::Translation { c } => DiffeoState::translation(grid_n, c),
            Self::Shear { amplitude, axis } => {
                if axis > 1 {
                    return Err(Error::Config(format!("initial.axis: must be 0 or 1, got {axis}")));
                }
                DiffeoState::shear(grid_n, amplitude, axis)
            }
            Self::Annulus { alpha, eps } => build_annulus(alpha, eps)
                .map_err(|e| Error::Config(format!("initial: {e}")))?
                .to_state(grid_n),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftSpec {
    Zero,
    /// `e^{-ν|k|²t}(a A_k + b B_k)`; `nu` defaults to the spectrum's.
    SingleMode {
        k: [i32; 2],
        a: f64,
        b: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nu: Option<f64>,
    },
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self::Zero
    }
}

impl DriftSpec {
    pub fn build(&self, spectrum_nu: f64) -> Result<DriftField> {
        Ok(match *self {
            Self::Zero => DriftField::Zero,
            Self::SingleMode { k, a, b, nu } => {
                let k = WaveVector::new(k[0], k[1]).map_err(|e| Error::Config(format!("drift.k: {e}")))?;
                let nu = nu.unwrap_or(spectrum_nu);
                if !(nu >= 0.0 && nu.is_finite()) {
                    return Err(Error::Config(format!("drift.nu: must be nonnegative, got {nu}")));
                }
                DriftField::single_mode(k, a, b, nu)
            }
        })
    }
}

fn default_dir() -> String {
    "out".into()
}
fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: String,
    /// Any of `csv`, `json`, `bin`.
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

impl OutputSpec {
    pub fn wants(&self, fmt: &str) -> bool {
        self.formats.iter().any(|f| f == fmt)
    }
}

fn default_window() -> usize {
    500
}
fn default_restarts() -> usize {
    10_000
}
fn default_t() -> f64 {
    0.1
}

/// Scenario-specific parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Tracked label `[i, j]` for `rotation`.
    #[serde(default)]
    pub label: [usize; 2],
    /// Realized-QV window in steps for `rotation`.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Cutoff `K` of the lower QV bound; defaults to the band limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_cut: Option<f64>,
    /// Restart-ensemble size for `example-annulus`.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Horizon for `calibrate`.
    #[serde(default = "default_t")]
    pub t: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            label: [0, 0],
            window: default_window(),
            k_cut: None,
            restarts: default_restarts(),
            t: default_t(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub spectrum: SpectrumSpec,
    #[serde(default)]
    pub flow: FlowSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub drift: DriftSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub params: Params,
}

/// A validated config with its built objects.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub spectrum: Spectrum,
    pub drift: DriftField,
    pub phi: DiffeoState,
    pub psi: DiffeoState,
}

fn field(name: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// TOML with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check all fields and build the run objects.
    pub fn resolve(&self) -> Result<Resolved> {
        let f = &self.flow;
        if f.grid_n < 4 {
            return Err(field("flow.grid_n", format!("must be at least 4, got {}", f.grid_n)));
        }
        if !(f.dt > 0.0 && f.dt.is_finite()) {
            return Err(field("flow.dt", format!("must be positive, got {}", f.dt)));
        }
        if f.n_steps == 0 {
            return Err(field("flow.n_steps", "must be positive"));
        }
        if f.n_paths == 0 {
            return Err(field("flow.n_paths", "must be positive"));
        }
        for fmt in &self.output.formats {
            if !matches!(fmt.as_str(), "csv" | "json" | "bin") {
                return Err(field("output.formats", format!("unknown format {fmt:?}")));
            }
        }
        let spectrum = self.spectrum.build().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => field("spectrum", other),
        })?;
        let drift = self.drift.build(spectrum.nu())?;
        let phi = DiffeoState::identity(f.grid_n);
        let psi = self.initial.build(f.grid_n)?;
        let p = &self.params;
        match self.scenario {
            Scenario::DistanceAudit | Scenario::StabilityAudit | Scenario::Rotation => {
                if self.initial == InitialSpec::Identity {
                    return Err(field("initial", format!("scenario {} needs two distinct initial states", self.scenario)));
                }
            }
            _ => {}
        }
        match self.scenario {
            Scenario::StabilityAudit => {
                if spectrum.radius().is_none() {
                    return Err(field("spectrum.radius", "required by stability-audit"));
                }
            }
            Scenario::Rotation => {
                if p.label[0] >= f.grid_n || p.label[1] >= f.grid_n {
                    return Err(field("params.label", format!("must be below grid_n = {}", f.grid_n)));
                }
                if p.window < crate::rotation::MIN_WINDOW || p.window > f.n_steps {
                    return Err(field(
                        "params.window",
                        format!("must lie in [{}, n_steps = {}], got {}", crate::rotation::MIN_WINDOW, f.n_steps, p.window),
                    ));
                }
                if p.k_cut.is_none() && spectrum.radius().is_none() {
                    return Err(field("params.k_cut", "required when the spectrum has no radius"));
                }
            }
            Scenario::ExampleAnnulus => {
                if !matches!(self.initial, InitialSpec::Annulus { .. }) {
                    return Err(field("initial", "example-annulus needs kind = \"annulus\""));
                }
                if !self.drift.eq(&DriftSpec::Zero) {
                    return Err(field("drift", "example-annulus runs without drift"));
                }
                if p.restarts < crate::verify::MIN_SAMPLES {
                    return Err(field("params.restarts", format!("must be at least {}", crate::verify::MIN_SAMPLES)));
                }
                crate::verify::example_mode_sum(&spectrum).map_err(|e| field("spectrum", e))?;
            }
            Scenario::Calibrate => {
                if !self.drift.eq(&DriftSpec::Zero) {
                    return Err(field("drift", "calibrate runs without drift"));
                }
                if f.n_paths < crate::verify::MIN_SAMPLES {
                    return Err(field("flow.n_paths", format!("calibrate needs at least {}", crate::verify::MIN_SAMPLES)));
                }
                if !(p.t > 0.0 && p.t.is_finite()) {
                    return Err(field("params.t", "must be positive"));
                }
            }
            Scenario::Simulate | Scenario::DistanceAudit => {}
        }
        Ok(Resolved {
            config: self.clone(),
            spectrum,
            drift,
            phi,
            psi,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
scenario = "distance-audit"
[spectrum]
nu = 1.0
radius = 1.0
modes = [{ k = [1, 0], lambda = 1.0 }, { k = [0, 1], lambda = 1.0 }]
[initial]
kind = "translation"
c = [0.1, 0.0]
"#;

    #[test]
    fn defaults_are_filled() {
        let c = RunConfig::from_toml_str(BASIC).unwrap();
        assert_eq!(c.flow, FlowSpec::default());
        assert_eq!(c.flow.grid_n, 64);
        assert_eq!(c.drift, DriftSpec::Zero);
        let r = c.resolve().unwrap();
        assert_eq!(r.spectrum.len(), 2);
        // the echo parses back to the same config
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn zero_wave_vector_is_reported() {
        let text = BASIC.replace("k = [1, 0]", "k = [0, 0]");
        let err = RunConfig::from_toml_str(&text).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("wave vector must be nonzero"), "{err}");
    }

    #[test]
    fn field_level_messages() {
        let bad = BASIC.replace("[initial]", "[flow]\ndt = -1.0\n[initial]");
        let err = RunConfig::from_toml_str(&bad).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("flow.dt"), "{err}");
        let unknown = BASIC.replace("[initial]", "[flow]\ngrid = 3\n[initial]");
        let err = RunConfig::from_toml_str(&unknown).unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
        let ident = BASIC.replace("kind = \"translation\"\nc = [0.1, 0.0]", "kind = \"identity\"");
        let err = RunConfig::from_toml_str(&ident).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("initial"), "{err}");
    }

    #[test]
    fn non_canonical_modes_are_folded() {
        let text = BASIC.replace("k = [0, 1]", "k = [0, -1]");
        let r = RunConfig::from_toml_str(&text).unwrap().resolve().unwrap();
        assert_eq!(r.spectrum.modes()[1].k, WaveVector::new(0, 1).unwrap());
    }

    #[test]
    fn drift_spec_builds() {
        let d = DriftSpec::SingleMode { k: [1, 1], a: 0.5, b: 0.0, nu: None };
        assert!(matches!(d.build(0.3).unwrap(), DriftField::SingleMode { nu, .. } if nu == 0.3));
        let bad = DriftSpec::SingleMode { k: [0, 0], a: 0.5, b: 0.0, nu: None };
        assert!(bad.build(0.3).is_err());
    }
}
