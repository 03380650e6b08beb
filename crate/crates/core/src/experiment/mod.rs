//! Experiment pipeline: basis, mapping, FEM system, greedy growth, rate fit
//! and theory report, with reproducible file outputs.

pub mod config;
pub mod sweep;

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{ConfigError, RunConfig};

use crate::analysis::{fit_rate, rearrange, FitConfig, RateFit};
use crate::boundary_basis::{BasisError, BasisFamily, BasisKind, CascadeTable, FourierBasis, WaveletBasis};
use crate::bounds::{theory_report, wavelet_constants, BoundsError, TheoryInput, TheoryReport};
use crate::fem::{build_graded_disk_mesh, worker_count, FemError, FemSystem, Mesh, MeshStats};
use crate::greedy::{run_greedy, CoefficientEngine, GreedyError, LogEntry};
use crate::mapping::{estimate_sigma_bounds, HarmonicMapping, Mapping, MappingError, MappingKind, MollifierMapping, SigmaBounds};
use crate::multiindex::MultiIndex;
use crate::shape_calculus::{d_a, d_det, d_f, Mat2};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Greedy(#[from] GreedyError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl ExperimentError {
    /// 1 for validation failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            _ => 2,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| ExperimentError::Io { context, source }
    }
}

type Slot<T> = Arc<OnceLock<Result<Arc<T>, String>>>;

/// Cascade tables and assembled FEM systems shared between runs whose
/// configurations coincide.
#[derive(Default)]
pub struct ResourceCache {
    tables: Mutex<HashMap<(String, u32), Slot<CascadeTable>>>,
    systems: Mutex<HashMap<String, Slot<FemSystem>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ResourceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn get_or_build<K, T>(
        &self,
        map: &Mutex<HashMap<K, Slot<T>>>,
        key: K,
        build: impl FnOnce() -> Result<T, String>,
    ) -> Result<Arc<T>, String>
    where
        K: std::hash::Hash + Eq,
    {
        let slot = map.lock().expect("cache lock").entry(key).or_default().clone();
        let mut built = false;
        let out = slot
            .get_or_init(|| {
                built = true;
                build().map(Arc::new)
            })
            .clone();
        if built {
            self.misses.fetch_add(1, Ordering::Relaxed);
        } else {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        out
    }

    pub fn table(&self, name: &str, depth: u32) -> Result<Arc<CascadeTable>, ExperimentError> {
        self.get_or_build(&self.tables, (name.to_string(), depth), || CascadeTable::new(name, depth).map_err(|e| e.to_string()))
            .map_err(ExperimentError::Runtime)
    }

    pub fn system(&self, cfg: &RunConfig) -> Result<Arc<FemSystem>, ExperimentError> {
        let key = serde_json::to_string(&(cfg.mesh_params(), &cfg.mapping.r0, cfg.problem.a, cfg.solver_params())).expect("serializable");
        self.get_or_build(&self.systems, key, || {
            let mesh = build_mesh(cfg).map_err(|e| e.to_string())?;
            FemSystem::new(mesh, cfg.problem.a, &cfg.solver_params()).map_err(|e| e.to_string())
        })
        .map_err(ExperimentError::Runtime)
    }
}

pub fn build_mesh(cfg: &RunConfig) -> Result<Mesh, ExperimentError> {
    Ok(build_graded_disk_mesh(&cfg.mesh_params(), &cfg.mapping.r0)?)
}

pub fn build_basis(cfg: &RunConfig, cache: &ResourceCache) -> Result<Arc<BasisKind>, ExperimentError> {
    let b = &cfg.basis;
    let r0_min = cfg.mapping.r0.min();
    let raw = match b.kind {
        BasisFamily::Fourier => BasisKind::Fourier(FourierBasis::new(b.alpha, b.truncation, r0_min)?),
        BasisFamily::Wavelet => {
            let table = cache.table(&b.wavelet, b.cascade_depth)?;
            BasisKind::Wavelet(WaveletBasis::new(table, b.alpha, b.theta, r0_min, b.max_level)?)
        }
    };
    Ok(Arc::new(raw.rescale_to_theta(b.theta)?))
}

pub fn build_mapping(cfg: &RunConfig, basis: Arc<BasisKind>) -> Result<Mapping, ExperimentError> {
    let m = &cfg.mapping;
    Ok(match m.kind {
        MappingKind::Mollifier => Mapping::Mollifier(MollifierMapping::new(basis, m.r0.clone())?),
        MappingKind::Harmonic => Mapping::Harmonic(Arc::new(HarmonicMapping::new(basis, &m.r0, m.n_fourier, m.mode_cutoff)?)),
    })
}

/// Origin plus `rings × angles` points on concentric curves `s·r₀(θ)`,
/// `s = k/rings`, boundary included.
pub fn polar_points(cfg: &RunConfig, rings: usize, angles: usize) -> Vec<[f64; 2]> {
    let mut pts = vec![[0.0, 0.0]];
    for k in 1..=rings {
        let s = k as f64 / rings as f64;
        for i in 0..angles {
            let theta = TAU * i as f64 / angles as f64;
            let r = s * cfg.mapping.r0.eval(theta).0;
            pts.push([r * theta.cos(), r * theta.sin()]);
        }
    }
    pts
}

/// Singular value range of `D_xΦ⁻¹`; a singular sample gives `σ_min = 0`,
/// `σ_max = ∞`, which the report flags as infeasible.
pub fn sigma_bounds(cfg: &RunConfig, mapping: &Mapping) -> SigmaBounds {
    let pts = polar_points(cfg, cfg.theory.sigma_rings, cfg.theory.sigma_angles);
    match estimate_sigma_bounds(mapping, &pts, cfg.theory.sigma_samples) {
        Ok(s) => s,
        Err(_) => SigmaBounds { sigma_min: 0.0, sigma_max: f64::INFINITY, samples: 0 },
    }
}

pub fn compute_theory(cfg: &RunConfig, mapping: &Mapping) -> Result<TheoryReport, ExperimentError> {
    let basis = mapping.basis().clone();
    let wavelet = match basis.as_ref() {
        BasisKind::Wavelet(w) => Some(wavelet_constants(w.table())),
        BasisKind::Fourier(_) => None,
    };
    let r0 = &cfg.mapping.r0;
    let input = TheoryInput {
        mapping: cfg.mapping.kind,
        basis,
        theta: cfg.basis.theta,
        beta: cfg.beta(),
        r0_min: r0.min(),
        r0_max: r0.max(),
        lipschitz: r0.lipschitz(),
        a_min: cfg.theory.a_min,
        a_max: cfg.problem.a,
        c_a_tilde: cfg.theory.c_a_tilde,
        sigma: sigma_bounds(cfg, mapping),
        wavelet,
    };
    Ok(theory_report(&input)?)
}

/// Contents of the rate JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub s: Option<f64>,
    pub intercept: Option<f64>,
    pub n_range: Option<(usize, usize)>,
    pub sample_ranks: Vec<usize>,
    pub residual: Option<f64>,
    pub zero_ranks_excluded: Vec<usize>,
    pub coefficient_count: usize,
    pub config: FitConfig,
    pub error: Option<String>,
}

impl RateRecord {
    pub fn from_norms(norms: &[f64], config: &FitConfig) -> (Self, Option<RateFit<f64>>) {
        let fit = rearrange(norms).and_then(|s| fit_rate(&s, config));
        let rec = match &fit {
            Ok(f) => RateRecord {
                s: Some(f.s),
                intercept: Some(f.intercept),
                n_range: Some(f.n_range),
                sample_ranks: f.sample_ranks.clone(),
                residual: Some(f.residual),
                zero_ranks_excluded: f.zero_ranks_excluded.clone(),
                coefficient_count: norms.len(),
                config: *config,
                error: None,
            },
            Err(e) => RateRecord {
                s: None,
                intercept: None,
                n_range: None,
                sample_ranks: Vec::new(),
                residual: None,
                zero_ranks_excluded: Vec::new(),
                coefficient_count: norms.len(),
                config: *config,
                error: Some(e.to_string()),
            },
        };
        (rec, fit.ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub wall_clock_seconds: f64,
    pub mesh: MeshStats,
    pub n_dofs: usize,
    pub coefficient_count: usize,
    pub pool_size: usize,
    pub solves: usize,
    pub partial: Option<String>,
    pub fitted_rate: Option<f64>,
    pub rate_error: Option<String>,
    pub predicted_rate: Option<f64>,
    /// Iteration 1 is a largest-norm step; steps alternate afterwards.
    pub alternation_start: String,
    pub workers: usize,
    pub cache_hits: usize,
    pub files: OutputFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFiles {
    pub runlog: PathBuf,
    pub decay: PathBuf,
    pub rate: PathBuf,
    pub theory: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub rate: RateRecord,
    pub theory: Result<TheoryReport, String>,
    pub log: Vec<LogEntry>,
}

impl RunOutcome {
    pub fn is_partial(&self) -> bool {
        self.manifest.partial.is_some()
    }
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(ExperimentError::io(format!("creating {}", dir.display())))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(ExperimentError::io(format!("creating {}", tmp.display())))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(ExperimentError::io(format!("writing {}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(ExperimentError::io(format!("renaming to {}", path.display())))
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Run log with `f64` values in shortest round-trip form.
pub fn runlog_csv(log: &[LogEntry]) -> Vec<u8> {
    csv_bytes(
        &["iteration", "multiindex", "order", "v_norm", "step_kind"],
        log.iter().map(|e| vec![e.iteration.to_string(), e.multiindex.to_string(), e.order.to_string(), e.v_norm.to_string(), e.step_kind.to_string()]),
    )
}

/// `n, t_star, fitted_value`; the fit column is empty without a fit.
pub fn decay_csv(norms: &[f64], fit: Option<&RateFit<f64>>) -> Vec<u8> {
    let t_star = rearrange(norms).map(|s| s.t_star().to_vec()).unwrap_or_default();
    csv_bytes(
        &["n", "t_star", "fitted_value"],
        t_star.iter().enumerate().map(|(k, t)| {
            let fitted = fit.map(|f| f.fitted(k + 1).to_string()).unwrap_or_default();
            vec![(k + 1).to_string(), t.to_string(), fitted]
        }),
    )
}

/// Reads the `v_norm` column of a run log.
pub fn read_runlog_norms(path: &Path) -> Result<Vec<f64>, ExperimentError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ExperimentError::Runtime(format!("{}: {e}", path.display())))?;
    let col = rdr
        .headers()
        .map_err(|e| ExperimentError::Runtime(format!("{}: {e}", path.display())))?
        .iter()
        .position(|h| h == "v_norm")
        .ok_or_else(|| ExperimentError::Runtime(format!("{}: no v_norm column", path.display())))?;
    let mut norms = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ExperimentError::Runtime(format!("{}: {e}", path.display())))?;
        let v = rec
            .get(col)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| ExperimentError::Runtime(format!("{}: bad v_norm on data row {}", path.display(), k + 1)))?;
        norms.push(v);
    }
    Ok(norms)
}

pub fn rates_from_runlog(path: &Path, config: &FitConfig) -> Result<RateRecord, ExperimentError> {
    Ok(RateRecord::from_norms(&read_runlog_norms(path)?, config).0)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Full pipeline; writes the five output files. A memory-cap stop still
/// writes everything and marks the manifest partial.
pub fn run_experiment(cfg: &RunConfig, cache: &ResourceCache) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    let basis = build_basis(cfg, cache)?;
    let mapping = build_mapping(cfg, basis)?;
    let system = cache.system(cfg)?;
    let engine = CoefficientEngine::new(&system, &mapping, cfg.problem.f)?;
    let outcome = run_greedy(&cfg.greedy, &engine)?;

    let norms: Vec<f64> = outcome.log.iter().map(|e| e.v_norm).collect();
    let (rate, fit) = RateRecord::from_norms(&norms, &cfg.analysis);
    let theory = compute_theory(cfg, &mapping).map_err(|e| e.to_string());

    let o = &cfg.output;
    let files = OutputFiles { runlog: o.path(&o.runlog), decay: o.path(&o.decay), rate: o.path(&o.rate), theory: o.path(&o.theory) };
    write_atomic(&files.runlog, &runlog_csv(&outcome.log))?;
    write_atomic(&files.decay, &decay_csv(&norms, fit.as_ref()))?;
    write_atomic(&files.rate, &json_bytes(&rate))?;
    let theory_json = match &theory {
        Ok(t) => json_bytes(t),
        Err(e) => json_bytes(&serde_json::json!({ "error": e })),
    };
    write_atomic(&files.theory, &theory_json)?;

    let manifest = RunManifest {
        version: VERSION.to_string(),
        config: cfg.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        mesh: system.mesh().stats(),
        n_dofs: system.n_dofs(),
        coefficient_count: outcome.log.len(),
        pool_size: outcome.pool.len(),
        solves: outcome.solves,
        partial: outcome.partial.clone(),
        fitted_rate: rate.s,
        rate_error: rate.error.clone(),
        predicted_rate: theory.as_ref().ok().and_then(|t| t.predicted_rate),
        alternation_start: "greedy".into(),
        workers: worker_count(),
        cache_hits: cache.hits(),
        files,
    };
    write_atomic(&o.path(&o.manifest), &json_bytes(&manifest))?;
    Ok(RunOutcome { manifest, rate, theory, log: outcome.log })
}

/// Theory report alone, without FEM work.
pub fn run_bounds(cfg: &RunConfig) -> Result<TheoryReport, ExperimentError> {
    cfg.validate()?;
    let cache = ResourceCache::new();
    let basis = build_basis(cfg, &cache)?;
    let mapping = build_mapping(cfg, basis)?;
    compute_theory(cfg, &mapping)
}

/// Shape derivatives of the pulled-back data at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeDump {
    pub kappa: MultiIndex,
    pub x: [f64; 2],
    pub d_a: [[f64; 2]; 2],
    pub d_det: f64,
    pub d_f: f64,
}

pub fn derivative_dump(cfg: &RunConfig, kappa: &MultiIndex, x: [f64; 2]) -> Result<DerivativeDump, ExperimentError> {
    cfg.validate()?;
    let cache = ResourceCache::new();
    let mapping = build_mapping(cfg, build_basis(cfg, &cache)?)?;
    let dims: Vec<u32> = kappa.dims().collect();
    let jet = mapping.jet(&dims, x)?;
    let m: Mat2<f64> = d_a(kappa, &jet, cfg.problem.a);
    Ok(DerivativeDump {
        kappa: kappa.clone(),
        x,
        d_a: m.m,
        d_det: d_det(kappa, &jet),
        d_f: d_f(kappa, &jet, cfg.problem.f),
    })
}

/// `x, Φ(y;x), det D_xΦ(y;x)` on the polar grid, as CSV.
pub fn mapping_field_csv(cfg: &RunConfig, y: &[(u32, f64)], rings: usize, angles: usize) -> Result<Vec<u8>, ExperimentError> {
    cfg.validate()?;
    let cache = ResourceCache::new();
    let mapping = build_mapping(cfg, build_basis(cfg, &cache)?)?;
    let mut rows = Vec::new();
    for x in polar_points(cfg, rings, angles) {
        let (p, jac) = mapping.full_map(y, x)?;
        rows.push(vec![x[0].to_string(), x[1].to_string(), p[0].to_string(), p[1].to_string(), jac.det().to_string()]);
    }
    Ok(csv_bytes(&["x0", "x1", "phi0", "phi1", "det_jacobian"], rows.into_iter()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/file.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn runlog_round_trips_norms() {
        use crate::greedy::StepKind;
        let norms = [0.3, 1.0 / 3.0, 2.5e-17, 7.123456789012345e-5];
        let log: Vec<LogEntry> = norms
            .iter()
            .enumerate()
            .map(|(k, &v)| LogEntry { iteration: k as u64, multiindex: MultiIndex::unit(k as u32 + 1), order: 1, v_norm: v, step_kind: StepKind::Greedy })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runlog.csv");
        write_atomic(&p, &runlog_csv(&log)).unwrap();
        assert_eq!(read_runlog_norms(&p).unwrap(), norms);
    }

    #[test]
    fn cache_counts_hits() {
        let cache = ResourceCache::new();
        let a = cache.table("haar", 8).unwrap();
        let b = cache.table("haar", 8).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        assert!(cache.table("nope", 8).is_err());
    }

    #[test]
    fn rate_record_reports_short_series() {
        let (rec, fit) = RateRecord::from_norms(&[1.0, 0.5, 0.25], &FitConfig::default());
        assert!(fit.is_none() && rec.s.is_none());
        assert!(rec.error.unwrap().contains("too short"));
    }
}
