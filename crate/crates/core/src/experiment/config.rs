//! Run configuration (TOML or JSON) and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::FitConfig;
use crate::boundary_basis::BasisFamily;
use crate::fem::{GradingKind, MeshParams, SolverParams};
use crate::greedy::GreedyConfig;
use crate::mapping::{MappingKind, NominalRadius};

/// Validation failure tied to a dotted field path.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisBlock {
    pub kind: BasisFamily,
    pub alpha: f64,
    pub theta: f64,
    /// Wavelets: levels `0..=max_level`, i.e. `2^{max_level+1}` functions.
    pub max_level: u32,
    /// Fourier: number of functions.
    pub truncation: usize,
    pub wavelet: String,
    pub cascade_depth: u32,
}

impl Default for BasisBlock {
    fn default() -> Self {
        Self {
            kind: BasisFamily::Wavelet,
            alpha: 2.5,
            theta: 0.05,
            max_level: 7,
            truncation: 256,
            wavelet: "db4".into(),
            cascade_depth: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingBlock {
    pub kind: MappingKind,
    pub n_fourier: usize,
    pub mode_cutoff: Option<usize>,
    pub r0: NominalRadius,
}

impl Default for MappingBlock {
    fn default() -> Self {
        Self { kind: MappingKind::Mollifier, n_fourier: 4096, mode_cutoff: None, r0: NominalRadius::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FemBlock {
    pub h_boundary: f64,
    /// Defaults to origin-linear for the mollifier mapping and
    /// boundary-inverse for the harmonic mapping.
    pub grading: Option<GradingKind>,
    pub grading_strength: f64,
    pub r_floor: f64,
    pub d_floor: f64,
    pub cap: f64,
    pub vertex_budget: usize,
    pub quadrature_degree: u32,
    pub solver_tolerance: f64,
}

impl Default for FemBlock {
    fn default() -> Self {
        let mesh = MeshParams::default();
        let solver = SolverParams::default();
        Self {
            h_boundary: mesh.h_boundary,
            grading: None,
            grading_strength: mesh.grading_strength,
            r_floor: mesh.r_floor,
            d_floor: mesh.d_floor,
            cap: mesh.cap,
            vertex_budget: mesh.vertex_budget,
            quadrature_degree: solver.quadrature_degree,
            solver_tolerance: solver.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemBlock {
    pub a: f64,
    pub f: f64,
}

impl Default for ProblemBlock {
    fn default() -> Self {
        Self { a: 1.0, f: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryBlock {
    pub a_min: f64,
    pub c_a_tilde: f64,
    /// Defaults to `α − 0.1`.
    pub beta: Option<f64>,
    pub sigma_samples: usize,
    pub sigma_rings: usize,
    pub sigma_angles: usize,
}

impl Default for TheoryBlock {
    fn default() -> Self {
        Self { a_min: 1.0, c_a_tilde: 0.0, beta: None, sigma_samples: 16, sigma_rings: 16, sigma_angles: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub runlog: String,
    pub decay: String,
    pub rate: String,
    pub theory: String,
    pub manifest: String,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            runlog: "runlog.csv".into(),
            decay: "decay.csv".into(),
            rate: "rate.json".into(),
            theory: "theory.json".into(),
            manifest: "manifest.json".into(),
        }
    }
}

impl OutputBlock {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub basis: BasisBlock,
    pub mapping: MappingBlock,
    pub fem: FemBlock,
    pub problem: ProblemBlock,
    pub greedy: GreedyConfig,
    pub analysis: FitConfig,
    pub theory: TheoryBlock,
    pub output: OutputBlock,
}

impl RunConfig {
    /// Parses TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json { Self::from_json(&text)? } else { Self::from_toml(&text)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new("<toml>", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::new("<json>", e.to_string()))
    }

    pub fn grading(&self) -> GradingKind {
        self.fem.grading.unwrap_or(match self.mapping.kind {
            MappingKind::Mollifier => GradingKind::OriginLinear,
            MappingKind::Harmonic => GradingKind::BoundaryInverse,
        })
    }

    pub fn mesh_params(&self) -> MeshParams {
        MeshParams {
            h_boundary: self.fem.h_boundary,
            grading: self.grading(),
            grading_strength: self.fem.grading_strength,
            r_floor: self.fem.r_floor,
            d_floor: self.fem.d_floor,
            cap: self.fem.cap,
            vertex_budget: self.fem.vertex_budget,
        }
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams { quadrature_degree: self.fem.quadrature_degree, tolerance: self.fem.solver_tolerance }
    }

    pub fn beta(&self) -> f64 {
        self.theory.beta.unwrap_or(self.basis.alpha - 0.1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.basis;
        // α = 2 is admitted as the limiting case run in experiments.
        if !(b.alpha >= 2.0 && b.alpha.is_finite()) {
            return Err(ConfigError::new("basis.alpha", format!("alpha must exceed 2, got {}", b.alpha)));
        }
        if !(b.theta > 0.0 && b.theta < 1.0) {
            return Err(ConfigError::new("basis.theta", format!("theta must lie in (0, 1), got {}", b.theta)));
        }
        match b.kind {
            BasisFamily::Wavelet => {
                if b.max_level > 20 {
                    return Err(ConfigError::new("basis.max_level", format!("max_level must not exceed 20, got {}", b.max_level)));
                }
                if !matches!(b.wavelet.as_str(), "db4" | "db2" | "haar") {
                    return Err(ConfigError::new("basis.wavelet", format!("unknown wavelet {:?} (expected db4, db2 or haar)", b.wavelet)));
                }
                if !(8..=16).contains(&b.cascade_depth) {
                    return Err(ConfigError::new("basis.cascade_depth", format!("cascade_depth must lie in 8..=16, got {}", b.cascade_depth)));
                }
            }
            BasisFamily::Fourier => {
                if b.truncation == 0 {
                    return Err(ConfigError::new("basis.truncation", "truncation must be positive"));
                }
            }
        }

        let m = &self.mapping;
        m.r0.validate().map_err(|e| ConfigError::new("mapping.r0", e.to_string()))?;
        if m.kind == MappingKind::Harmonic {
            if !m.r0.is_circle() {
                return Err(ConfigError::new("mapping.r0", "the harmonic mapping requires a circular nominal radius"));
            }
            if !m.n_fourier.is_power_of_two() || m.n_fourier < 4096 {
                return Err(ConfigError::new("mapping.n_fourier", format!("n_fourier must be a power of two ≥ 4096, got {}", m.n_fourier)));
            }
            if let Some(c) = m.mode_cutoff {
                if c == 0 || c > m.n_fourier / 2 - 1 {
                    return Err(ConfigError::new("mapping.mode_cutoff", format!("mode_cutoff must lie in 1..={}, got {c}", m.n_fourier / 2 - 1)));
                }
            }
        }

        let fem = &self.fem;
        self.mesh_params().validate().map_err(|e| {
            let msg = e.to_string();
            let field = ["h_boundary", "grading_strength", "floors", "cap"].into_iter().find(|f| msg.contains(f)).unwrap_or("mesh");
            let field = if field == "floors" { "r_floor" } else { field };
            ConfigError::new(format!("fem.{field}"), msg)
        })?;
        if !matches!(fem.quadrature_degree, 2 | 5) {
            return Err(ConfigError::new("fem.quadrature_degree", format!("quadrature_degree must be 2 or 5, got {}", fem.quadrature_degree)));
        }
        if !(fem.solver_tolerance > 0.0 && fem.solver_tolerance < 1.0) {
            return Err(ConfigError::new("fem.solver_tolerance", format!("solver_tolerance must lie in (0, 1), got {}", fem.solver_tolerance)));
        }

        if !(self.problem.a > 0.0 && self.problem.a.is_finite()) {
            return Err(ConfigError::new("problem.a", format!("a must be positive, got {}", self.problem.a)));
        }
        if !self.problem.f.is_finite() {
            return Err(ConfigError::new("problem.f", "f must be finite"));
        }

        if self.greedy.n_target == 0 {
            return Err(ConfigError::new("greedy.n_target", "n_target must be positive"));
        }
        if !(1..=12).contains(&self.greedy.max_order) {
            return Err(ConfigError::new("greedy.max_order", format!("max_order must lie in 1..=12, got {}", self.greedy.max_order)));
        }
        if self.greedy.memory_cap_bytes == 0 {
            return Err(ConfigError::new("greedy.memory_cap_bytes", "memory_cap_bytes must be positive"));
        }

        if self.analysis.sample_count < 2 {
            return Err(ConfigError::new("analysis.sample_count", format!("sample_count must be at least 2, got {}", self.analysis.sample_count)));
        }

        let t = &self.theory;
        if !(t.a_min > 0.0) || t.a_min > self.problem.a {
            return Err(ConfigError::new("theory.a_min", format!("a_min must lie in (0, a], got {}", t.a_min)));
        }
        if !(t.c_a_tilde >= 0.0) {
            return Err(ConfigError::new("theory.c_a_tilde", format!("c_a_tilde must be non-negative, got {}", t.c_a_tilde)));
        }
        if !(self.beta() < b.alpha) {
            return Err(ConfigError::new("theory.beta", format!("beta must be below alpha = {}, got {}", b.alpha, self.beta())));
        }
        if t.sigma_samples < 3 || t.sigma_rings == 0 || t.sigma_angles == 0 {
            return Err(ConfigError::new("theory.sigma_samples", "need at least 3 sigma samples and a nonempty sampling grid"));
        }

        let o = &self.output;
        for (field, name) in [("runlog", &o.runlog), ("decay", &o.decay), ("rate", &o.rate), ("theory", &o.theory), ("manifest", &o.manifest)] {
            if name.is_empty() {
                return Err(ConfigError::new(format!("output.{field}"), "file name must not be empty"));
            }
        }
        Ok(())
    }
}
