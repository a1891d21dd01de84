//! Study configuration: a TOML file with one section per concern.
//!
//! ```toml
//! defect = "vacancy"
//!
//! [study]
//! radii = [4.0, 6.0, 8.0, 10.0]   # units of a0
//! reference_radius = 20.0
//! ```
//!
//! Unknown keys are rejected. Every error names the offending key and, when
//! the key appears in the source, its line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{DefectSpec, Structure};
use crate::potential::PotentialParams;
use crate::solver::SolveSettings;

/// Which energy model the run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Tapered Morse pair potential with optional embedding.
    #[default]
    ToyEam,
    /// Componentwise nearest-neighbour Laplacian on the unit cubic lattice.
    /// Linear, so only the kernel and validation commands accept it.
    ScalarLaplacian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeConfig {
    pub structure: Structure,
    /// Lattice constant. Omit to calibrate to zero hydrostatic stress.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a0: Option<f64>,
    /// Bracket searched by the calibration.
    pub a0_bracket: [f64; 2],
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig { structure: Structure::Bcc, a0: None, a0_bracket: [0.94, 1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Test radii in units of a0, strictly increasing.
    pub radii: Vec<f64>,
    /// Radius of the reference domain in units of a0.
    pub reference_radius: f64,
    /// Orders of the moment iteration to report, a subset of {0, 1, 2}.
    pub orders: Vec<usize>,
    /// Number of smallest radii left out of slope fits.
    pub fit_skip: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { radii: vec![4.0, 6.0, 8.0, 10.0], reference_radius: 20.0, orders: vec![0, 1, 2], fit_skip: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreensConfig {
    /// Nodes of the circle quadrature in the continuum kernels.
    pub quadrature: usize,
    /// Radius (units of a0) of the numeric lattice Green's function window,
    /// used by the `greens` tables and the validation decay fits.
    pub window: f64,
}

impl Default for GreensConfig {
    fn default() -> Self {
        GreensConfig { quadrature: 64, window: 14.0 }
    }
}

/// Settings that affect where and how results are written, never their values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Reference cache; defaults to `<dir>/cache`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    /// Report zero wall time so that repeated runs are byte-identical.
    pub deterministic: bool,
    /// Worker threads, 0 for one per core.
    pub threads: usize,
    /// Seed for the randomised validation checks.
    pub seed: u64,
    /// Write SVG plots next to the CSV.
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("results"), cache: None, deterministic: false, threads: 0, seed: 1, plots: true }
    }
}

impl OutputConfig {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.dir.join("cache"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub defect: DefectSpec,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub potential: PotentialParams,
    #[serde(default)]
    pub study: SweepConfig,
    #[serde(default)]
    pub solver: SolveSettings,
    #[serde(default)]
    pub greens: GreensConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl StudyConfig {
    /// Defaults for everything but the defect.
    pub fn new(defect: DefectSpec) -> Self {
        StudyConfig {
            defect,
            model: ModelKind::default(),
            lattice: LatticeConfig::default(),
            potential: PotentialParams::default(),
            study: SweepConfig::default(),
            solver: SolveSettings::default(),
            greens: GreensConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(src).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.check().map_err(|(key, msg)| match line_of(src, &key) {
            Some(line) => Error::Config(format!("key `{key}` (line {line}): {msg}")),
            None => Error::Config(format!("key `{key}`: {msg}")),
        })?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Validate a config built in code (overrides from the command line, tests).
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(key, msg)| Error::Config(format!("key `{key}`: {msg}")))
    }

    fn check(&self) -> std::result::Result<(), (String, String)> {
        let bad = |key: &str, msg: String| Err((key.to_string(), msg));
        let s = &self.study;
        if s.radii.is_empty() {
            return bad("study.radii", "at least one radius is required".into());
        }
        if s.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("study.radii", format!("radii must be positive and finite, got {:?}", s.radii));
        }
        if s.radii.windows(2).any(|w| w[1] <= w[0]) {
            return bad("study.radii", format!("radii must be strictly increasing, got {:?}", s.radii));
        }
        let r_max = s.radii[s.radii.len() - 1];
        if !(s.reference_radius >= 2.0 * r_max) {
            return bad(
                "study.reference_radius",
                format!("must be at least twice the largest test radius ({}), got {}", 2.0 * r_max, s.reference_radius),
            );
        }
        if s.orders.is_empty() || s.orders.iter().any(|&o| o > 2) {
            return bad("study.orders", format!("orders must be a non-empty subset of {{0, 1, 2}}, got {:?}", s.orders));
        }
        if s.orders.windows(2).any(|w| w[1] <= w[0]) {
            return bad("study.orders", format!("orders must be strictly increasing, got {:?}", s.orders));
        }
        if let Some(a0) = self.lattice.a0 {
            if !(a0.is_finite() && a0 > 0.0) {
                return bad("lattice.a0", format!("must be positive, got {a0}"));
            }
        }
        let [lo, hi] = self.lattice.a0_bracket;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
            return bad("lattice.a0_bracket", format!("need 0 < lower < upper, got [{lo}, {hi}]"));
        }
        if let Err(Error::Config(m)) = self.potential.validate() {
            return bad("potential", m);
        }
        if let Err(Error::Config(m)) = self.solver.validate() {
            return bad("solver", m);
        }
        if self.greens.quadrature < 8 {
            return bad("greens.quadrature", format!("need at least 8 nodes, got {}", self.greens.quadrature));
        }
        if !(self.greens.window.is_finite() && self.greens.window >= 2.0) {
            return bad("greens.window", format!("must be at least 2, got {}", self.greens.window));
        }
        Ok(())
    }

    /// SHA-256 of everything that influences computed values, i.e. the config
    /// without its `[output]` section.
    pub fn content_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config is always serialisable");
        if let Some(map) = value.as_object_mut() {
            map.remove("output");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Line of `section.key` (or of `[section]` for a bare section name) in a TOML source.
fn line_of(src: &str, path: &str) -> Option<usize> {
    let (section, key) = match path.rsplit_once('.') {
        Some((s, k)) => (Some(s), Some(k)),
        None if src.lines().any(|l| l.trim() == format!("[{path}]")) => (Some(path), None),
        None => (None, Some(path)),
    };
    let mut current: Option<String> = None;
    for (n, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            if key.is_none() && section == Some(name.trim()) {
                return Some(n + 1);
            }
            continue;
        }
        let Some(k) = key else { continue };
        if current.as_deref() != section {
            continue;
        }
        if let Some((lhs, _)) = t.split_once('=') {
            if lhs.trim() == k {
                return Some(n + 1);
            }
        }
    }
    None
}
