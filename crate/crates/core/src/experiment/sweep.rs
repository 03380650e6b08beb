//! Cartesian parameter sweeps over a template run configuration.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ConfigError, RunConfig};
use super::{run_experiment, write_atomic, ExperimentError, ResourceCache};
use crate::boundary_basis::BasisFamily;
use crate::fem::worker_count;
use crate::mapping::MappingKind;

/// Axis values; an empty axis keeps the template value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub h_boundary: Vec<f64>,
    pub basis: Vec<BasisFamily>,
    pub mapping: Vec<MappingKind>,
}

impl SweepGrid {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("<grid>", format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| ConfigError::new("<grid>", e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::new("<grid>", e.to_string()))
        }
    }

    /// Cells in row-major order: mapping, basis, α, ϑ, h (h fastest).
    pub fn cells(&self, template: &RunConfig) -> Vec<SweepCell> {
        fn axis<T: Clone>(v: &[T], dflt: T) -> Vec<T> {
            if v.is_empty() {
                vec![dflt]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for mapping in axis(&self.mapping, template.mapping.kind) {
            for basis in axis(&self.basis, template.basis.kind) {
                for alpha in axis(&self.alpha, template.basis.alpha) {
                    for theta in axis(&self.theta, template.basis.theta) {
                        for h in axis(&self.h_boundary, template.fem.h_boundary) {
                            let index = out.len();
                            out.push(SweepCell { index, alpha, theta, h_boundary: h, basis, mapping });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub alpha: f64,
    pub theta: f64,
    pub h_boundary: f64,
    pub basis: BasisFamily,
    pub mapping: MappingKind,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        let basis = match self.basis {
            BasisFamily::Wavelet => "wavelet",
            BasisFamily::Fourier => "fourier",
        };
        let mapping = match self.mapping {
            MappingKind::Mollifier => "mollifier",
            MappingKind::Harmonic => "harmonic",
        };
        format!("cell{:03}_{mapping}_{basis}_a{}_t{}_h{}", self.index, self.alpha, self.theta, self.h_boundary)
    }

    pub fn config(&self, template: &RunConfig, root: &Path) -> RunConfig {
        let mut cfg = template.clone();
        cfg.basis.alpha = self.alpha;
        cfg.basis.theta = self.theta;
        cfg.basis.kind = self.basis;
        cfg.mapping.kind = self.mapping;
        cfg.fem.h_boundary = self.h_boundary;
        cfg.theory.beta = template.theory.beta.filter(|&b| b < self.alpha);
        cfg.output.dir = root.join(self.dir_name());
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub alpha: f64,
    pub theta: f64,
    pub h_boundary: f64,
    pub basis: BasisFamily,
    pub mapping: MappingKind,
    pub s: Option<f64>,
    pub residual: Option<f64>,
    pub predicted_rate: Option<f64>,
    pub coefficient_count: Option<usize>,
    pub partial: bool,
    pub output_dir: PathBuf,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub cache_hits: usize,
    pub table: PathBuf,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cell", "alpha", "theta", "h_boundary", "basis", "mapping", "s", "residual", "predicted_rate", "coefficient_count", "partial", "output_dir", "error"])
        .expect("in-memory write");
    for r in rows {
        let basis = serde_json::to_value(r.basis).expect("serializable");
        let mapping = serde_json::to_value(r.mapping).expect("serializable");
        w.write_record([
            r.cell.to_string(),
            r.alpha.to_string(),
            r.theta.to_string(),
            r.h_boundary.to_string(),
            basis.as_str().unwrap_or_default().to_string(),
            mapping.as_str().unwrap_or_default().to_string(),
            opt(r.s),
            opt(r.residual),
            opt(r.predicted_rate),
            opt(r.coefficient_count),
            r.partial.to_string(),
            r.output_dir.display().to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Runs every cell, up to [`worker_count`] at a time; failures are recorded
/// in their row and do not stop the sweep. Writes `sweep.csv` under the
/// template's output directory.
pub fn run_sweep(template: &RunConfig, grid: &SweepGrid, cache: &ResourceCache) -> Result<SweepOutcome, ExperimentError> {
    let root = template.output.dir.clone();
    let cells = grid.cells(template);
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<SweepRow>> = Mutex::new(Vec::with_capacity(cells.len()));
    let workers = worker_count().min(cells.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(k) else { break };
                let cfg = cell.config(template, &root);
                let mut row = SweepRow {
                    cell: cell.index,
                    alpha: cell.alpha,
                    theta: cell.theta,
                    h_boundary: cell.h_boundary,
                    basis: cell.basis,
                    mapping: cell.mapping,
                    s: None,
                    residual: None,
                    predicted_rate: None,
                    coefficient_count: None,
                    partial: false,
                    output_dir: cfg.output.dir.clone(),
                    error: None,
                };
                match run_experiment(&cfg, cache) {
                    Ok(out) => {
                        row.s = out.rate.s;
                        row.residual = out.rate.residual;
                        row.predicted_rate = out.manifest.predicted_rate;
                        row.coefficient_count = Some(out.manifest.coefficient_count);
                        row.partial = out.is_partial();
                        row.error = out.rate.error;
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                rows.lock().expect("rows lock").push(row);
            });
        }
    });
    let mut rows = rows.into_inner().expect("rows lock");
    rows.sort_by_key(|r| r.cell);
    let table = root.join("sweep.csv");
    write_atomic(&table, &sweep_csv(&rows))?;
    Ok(SweepOutcome { rows, cache_hits: cache.hits(), table })
}
