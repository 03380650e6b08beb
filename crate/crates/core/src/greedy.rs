//! Taylor coefficients by the recursive weak formulation, grown by the
//! alternating greedy strategy.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::boundary_basis::{BasisFunction, BasisKind};
use crate::fem::{par_accumulate, FemError, FemSystem};
use crate::mapping::{HarmonicMapping, Mapping, MappingError, MollifierGeometry};
use crate::multiindex::{reduced_neighbors, IndexSet, MultiIndex, MultiIndexError};
use crate::shape_calculus::{pullback_coefficient, pullback_load, DerivativeTable, Mat2, PointJet, TableScratch};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GreedyError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    MultiIndex(#[from] MultiIndexError),
    #[error("coefficient {missing} required by {mu} is not stored")]
    MissingCoefficient { mu: String, missing: String },
    #[error("coefficient {0} is already stored")]
    AlreadyStored(String),
    #[error("non-finite norm for coefficient {0}")]
    NonFinite(String),
    #[error("invalid greedy configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreedyConfig {
    /// Number of members of Λ (including the zero index) to collect.
    pub n_target: usize,
    pub max_order: u32,
    /// Stop with partial results once stored vectors would exceed this.
    pub memory_cap_bytes: u64,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self { n_target: 1000, max_order: 7, memory_cap_bytes: 3 << 30 }
    }
}

impl GreedyConfig {
    pub fn validate(&self) -> Result<(), GreedyError> {
        if self.n_target == 0 {
            return Err(GreedyError::Config("n_target must be positive".into()));
        }
        if self.max_order == 0 || self.max_order > 12 {
            return Err(GreedyError::Config(format!("max_order must lie in 1..=12, got {}", self.max_order)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Initial,
    Greedy,
    Oldest,
}

impl std::fmt::Display for StepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepKind::Initial => "initial",
            StepKind::Greedy => "greedy",
            StepKind::Oldest => "oldest",
        })
    }
}

#[derive(Debug, Clone)]
pub struct StoredCoefficient {
    pub vector: Arc<Vec<f64>>,
    pub v_norm: f64,
    pub iteration: u64,
}

/// Computed coefficients `t_μ`, written once.
#[derive(Debug, Clone, Default)]
pub struct TaylorStore {
    entries: HashMap<MultiIndex, StoredCoefficient>,
}

impl TaylorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mu: MultiIndex, vector: Vec<f64>, v_norm: f64, iteration: u64) -> Result<(), GreedyError> {
        if self.entries.contains_key(&mu) {
            return Err(GreedyError::AlreadyStored(mu.to_string()));
        }
        self.entries.insert(mu, StoredCoefficient { vector: Arc::new(vector), v_norm, iteration });
        Ok(())
    }

    pub fn get(&self, mu: &MultiIndex) -> Option<&StoredCoefficient> {
        self.entries.get(mu)
    }

    pub fn contains(&self, mu: &MultiIndex) -> bool {
        self.entries.contains_key(mu)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

enum DirectionSource {
    Mollifier { geometry: Vec<Option<MollifierGeometry>>, basis: Arc<BasisKind> },
    Harmonic { map: Arc<HarmonicMapping>, cache: Mutex<HashMap<u32, Arc<Vec<Mat2<f64>>>>> },
}

/// Per-direction data resolved once per coefficient.
enum DirectionView<'s> {
    Mollifier { geometry: &'s [Option<MollifierGeometry>], function: BasisFunction<'s> },
    Harmonic(Arc<Vec<Mat2<f64>>>),
}

impl DirectionView<'_> {
    #[inline]
    fn jacobian(&self, q: usize) -> Mat2<f64> {
        match self {
            DirectionView::Mollifier { geometry, function } => match &geometry[q] {
                Some(g) => {
                    let (psi, dpsi) = function.pair(g.theta);
                    g.g1.scale(psi) + g.g2.scale(dpsi)
                }
                None => Mat2::zero(),
            },
            DirectionView::Harmonic(field) => field[q],
        }
    }
}

struct Term {
    /// Position of `κ = μ − ν` in the derivative table of `μ`.
    code: usize,
    mask: u64,
    weight: f64,
    vector: Arc<Vec<f64>>,
}

/// Assembles and solves the recursion for individual coefficients.
pub struct CoefficientEngine<'a> {
    system: &'a FemSystem,
    mapping: &'a Mapping,
    f_value: f64,
    source: DirectionSource,
    /// Triangles where some displacement can be nonzero.
    active: Vec<bool>,
    supports: Mutex<HashMap<u32, Arc<Vec<u32>>>>,
}

impl<'a> CoefficientEngine<'a> {
    pub fn new(system: &'a FemSystem, mapping: &'a Mapping, f_value: f64) -> Result<Self, GreedyError> {
        let nq = system.qp_per_triangle();
        let (source, active) = match mapping {
            Mapping::Mollifier(m) => {
                let geometry = system.qp_points().iter().map(|&x| m.geometry(x)).collect::<Result<Vec<_>, _>>()?;
                let active = (0..system.n_triangles()).map(|t| geometry[t * nq..(t + 1) * nq].iter().any(Option::is_some)).collect();
                (DirectionSource::Mollifier { geometry, basis: mapping.basis().clone() }, active)
            }
            Mapping::Harmonic(h) => (
                DirectionSource::Harmonic { map: h.clone(), cache: Mutex::new(HashMap::new()) },
                vec![true; system.n_triangles()],
            ),
        };
        Ok(Self {
            system,
            mapping,
            f_value,
            source,
            active,
            supports: Mutex::new(HashMap::new()),
        })
    }

    pub fn system(&self) -> &FemSystem {
        self.system
    }

    pub fn mapping(&self) -> &Mapping {
        self.mapping
    }

    /// Bytes held by cached per-direction fields.
    pub fn cache_bytes(&self) -> usize {
        match &self.source {
            DirectionSource::Mollifier { .. } => 0,
            DirectionSource::Harmonic { cache, .. } => {
                cache.lock().expect("cache lock").len() * self.system.n_qp() * std::mem::size_of::<Mat2<f64>>()
            }
        }
    }

    fn direction(&self, j: u32) -> Result<DirectionView<'_>, GreedyError> {
        let len = self.mapping.basis().len();
        if j == 0 || j as usize > len {
            return Err(MappingError::Basis(crate::boundary_basis::BasisError::IndexOutOfRange { j: j as usize, len }).into());
        }
        Ok(match &self.source {
            DirectionSource::Mollifier { geometry, basis } => DirectionView::Mollifier { geometry, function: basis.function(j as usize).map_err(MappingError::Basis)? },
            DirectionSource::Harmonic { map, cache } => {
                if let Some(f) = cache.lock().expect("cache lock").get(&j) {
                    return Ok(DirectionView::Harmonic(f.clone()));
                }
                let modes = map.modes(j as usize)?;
                let field = self
                    .system
                    .qp_points()
                    .iter()
                    .map(|&x| map.displacement_from(&modes, x).map(|d| d.jacobian))
                    .collect::<Result<Vec<_>, _>>()?;
                let field = Arc::new(field);
                cache.lock().expect("cache lock").insert(j, field.clone());
                DirectionView::Harmonic(field)
            }
        })
    }

    /// Triangles where direction `j` may be nonzero, ascending.
    fn support(&self, j: u32) -> Arc<Vec<u32>> {
        if let Some(s) = self.supports.lock().expect("support lock").get(&j) {
            return s.clone();
        }
        let candidates: Vec<u32> = match (&self.source, self.mapping.basis().angular_support(j as usize)) {
            (DirectionSource::Mollifier { .. }, Some((start, len))) => self.system.triangles_in_arc(start, len),
            _ => (0..self.system.n_triangles() as u32).collect(),
        };
        let s: Arc<Vec<u32>> = Arc::new(candidates.into_iter().filter(|&t| self.active[t as usize]).collect());
        self.supports.lock().expect("support lock").insert(j, s.clone());
        s
    }

    /// Right-hand side of the recursion for `t_μ`.
    pub fn rhs(&self, mu: &MultiIndex, store: &TaylorStore) -> Result<Vec<f64>, GreedyError> {
        let sys = self.system;
        if mu.is_zero() {
            return Ok(sys.assemble_constant_load(self.f_value));
        }
        let dirs: Vec<u32> = mu.dims().collect();
        let views = dirs.iter().map(|&j| self.direction(j)).collect::<Result<Vec<_>, _>>()?;
        let table = DerivativeTable::new(mu);
        let mut terms = Vec::new();
        for nu in mu.lower_set() {
            let stored = store.get(&nu).ok_or_else(|| GreedyError::MissingCoefficient { mu: mu.to_string(), missing: nu.to_string() })?;
            let kappa = mu.checked_sub(&nu).expect("lower set member");
            let code = table.code(&kappa).expect("κ ≤ μ");
            terms.push(Term { code, mask: table.mask(code), weight: 1.0 / kappa.factorial()? as f64, vector: stored.vector.clone() });
        }
        let load_weight = (mu.order() <= 2).then(|| mu.factorial().map(|f| self.f_value / f as f64)).transpose()?;

        let mut triangles: Vec<u32> = Vec::new();
        for &j in &dirs {
            triangles.extend(self.support(j).iter());
        }
        triangles.sort_unstable();
        triangles.dedup();

        let nq = sys.qp_per_triangle();
        let weights = sys.qp_weights();
        let a_value = sys.a_value();
        let out = par_accumulate(triangles.len(), sys.n_dofs(), |range, out| {
            let mut scratch = TableScratch::default();
            let mut values = Vec::with_capacity(table.len());
            let mut jacs = vec![Mat2::zero(); dirs.len()];
            for &t in &triangles[range] {
                let t = t as usize;
                for q in t * nq..(t + 1) * nq {
                    let mut zero = 0u64;
                    for (s, view) in views.iter().enumerate() {
                        jacs[s] = view.jacobian(q);
                        if jacs[s] == Mat2::zero() {
                            zero |= 1 << s;
                        }
                    }
                    if zero == (1u64 << dirs.len()) - 1 {
                        continue;
                    }
                    table.eval_all(&jacs, zero, a_value, &mut scratch, &mut values);
                    let grads = sys.basis_gradients(q);
                    let mut g = [0.0; 2];
                    for term in &terms {
                        if term.mask & zero != 0 {
                            continue;
                        }
                        let ag = values[term.code].apply(sys.gradient_at(&term.vector, t, &grads));
                        g[0] += term.weight * ag[0];
                        g[1] += term.weight * ag[1];
                    }
                    let w = weights[q];
                    sys.scatter_gradient(t, &grads, [-w * g[0], -w * g[1]], out);
                    if let Some(lw) = load_weight {
                        let e = mu.entries();
                        let ddet = match e.len() {
                            1 if e[0].1 == 1 => jacs[0].trace(),
                            1 => 2.0 * jacs[0].det(),
                            _ => jacs[0].trace() * jacs[1].trace() - (jacs[0] * jacs[1]).trace(),
                        };
                        sys.scatter_value(t, q, w * lw * ddet, out);
                    }
                }
            }
        });
        Ok(out)
    }

    fn each(&self, mus: &[MultiIndex], store: &TaylorStore, mut f: impl FnMut(Vec<f64>, f64)) -> Result<(), GreedyError> {
        for chunk in mus.chunks(8) {
            let rhs = chunk.iter().map(|mu| self.rhs(mu, store)).collect::<Result<Vec<_>, _>>()?;
            for (mu, (t, norm)) in chunk.iter().zip(self.system.solve_many_with_norms(&rhs)?) {
                if !norm.is_finite() {
                    return Err(GreedyError::NonFinite(mu.to_string()));
                }
                f(t, norm);
            }
        }
        Ok(())
    }

    /// `(t_μ, ‖t_μ‖_V)` for each index; every strict lower index must be stored.
    pub fn compute(&self, mus: &[MultiIndex], store: &TaylorStore) -> Result<Vec<(Vec<f64>, f64)>, GreedyError> {
        let mut out = Vec::with_capacity(mus.len());
        self.each(mus, store, |t, norm| out.push((t, norm)))?;
        Ok(out)
    }

    /// `‖t_μ‖_V` only; the vectors are dropped as soon as they are measured.
    pub fn norms(&self, mus: &[MultiIndex], store: &TaylorStore) -> Result<Vec<f64>, GreedyError> {
        let mut out = Vec::with_capacity(mus.len());
        self.each(mus, store, |_, norm| out.push(norm))?;
        Ok(out)
    }

    pub fn compute_coefficient(&self, mu: &MultiIndex, store: &TaylorStore) -> Result<(Vec<f64>, f64), GreedyError> {
        Ok(self.compute(std::slice::from_ref(mu), store)?.pop().expect("one coefficient"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub multiindex: MultiIndex,
    pub order: u32,
    pub v_norm: f64,
    pub step_kind: StepKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub multiindex: MultiIndex,
    pub v_norm: f64,
    pub stamp: u64,
}

#[derive(Debug, Clone)]
pub struct GreedyOutcome {
    /// Members of Λ in insertion order.
    pub log: Vec<LogEntry>,
    /// Pool at termination, canonical order.
    pub pool: Vec<PoolRecord>,
    pub lambda: IndexSet,
    pub store: TaylorStore,
    /// Reason for an early stop, if any.
    pub partial: Option<String>,
    pub solves: usize,
}

/// Grows Λ from `{0}`: odd steps take the largest pool norm, even steps the
/// oldest pool entry; ties go to the canonical order. Pool coefficients keep
/// only their norm; the vector is recomputed when the index enters Λ.
pub fn run_greedy(config: &GreedyConfig, engine: &CoefficientEngine<'_>) -> Result<GreedyOutcome, GreedyError> {
    config.validate()?;
    let n_dofs = engine.system().n_dofs() as u64;
    let dims = engine.mapping().basis().len() as u32;
    let mut store = TaylorStore::new();
    let mut lambda = IndexSet::new();
    let mut pool: BTreeMap<MultiIndex, (f64, u64)> = BTreeMap::new();
    let zero = MultiIndex::zero();
    let (t0, n0) = engine.compute_coefficient(&zero, &store)?;
    let mut solves = 1;
    store.insert(zero.clone(), t0, n0, 0)?;
    lambda.insert(zero.clone(), 0);
    let mut log = vec![LogEntry { iteration: 0, multiindex: zero.clone(), order: 0, v_norm: n0, step_kind: StepKind::Initial }];
    let mut fresh = vec![zero];
    let mut partial = None;
    let mut iteration = 1u64;

    while lambda.len() < config.n_target {
        // Indices become admissible only once their last missing lower
        // neighbor enters Λ, so candidates come from the newest member.
        let cap = (lambda.max_support() + 1).min(dims);
        let mut entrants = Vec::new();
        for mu in &fresh {
            for j in 1..=cap {
                let nu = mu.plus_unit(j);
                if nu.order() <= config.max_order && !pool.contains_key(&nu) && lambda.admits(&nu) {
                    entrants.push(nu);
                }
            }
        }
        let e_next = MultiIndex::unit(cap);
        if !pool.contains_key(&e_next) && lambda.admits(&e_next) && !entrants.contains(&e_next) {
            entrants.push(e_next);
        }
        entrants.sort();
        entrants.dedup();
        for (mu, norm) in entrants.iter().zip(engine.norms(&entrants, &store)?) {
            pool.insert(mu.clone(), (norm, iteration));
        }
        solves += entrants.len();
        debug_assert!(pool_matches_neighbors(&pool, &lambda, config.max_order, dims));
        if pool.is_empty() {
            partial = Some("pool exhausted before n_target".into());
            break;
        }
        let bytes = (lambda.len() as u64 + 1) * n_dofs * 8 + engine.cache_bytes() as u64;
        if bytes > config.memory_cap_bytes {
            partial = Some(format!("memory cap of {} bytes reached", config.memory_cap_bytes));
            break;
        }

        let kind = if iteration % 2 == 1 { StepKind::Greedy } else { StepKind::Oldest };
        let mut best: Option<(&MultiIndex, f64, u64)> = None;
        for (mu, &(norm, stamp)) in &pool {
            let better = match best {
                None => true,
                Some((_, bn, bs)) => match kind {
                    StepKind::Greedy => norm > bn,
                    _ => stamp < bs,
                },
            };
            if better {
                best = Some((mu, norm, stamp));
            }
        }
        let mu = best.expect("pool is nonempty").0.clone();
        pool.remove(&mu);
        let (vector, norm) = engine.compute_coefficient(&mu, &store)?;
        solves += 1;
        store.insert(mu.clone(), vector, norm, iteration)?;
        lambda.insert(mu.clone(), iteration);
        debug_assert!(lambda.is_downward_closed());
        log.push(LogEntry { iteration, order: mu.order(), multiindex: mu.clone(), v_norm: norm, step_kind: kind });
        fresh = vec![mu];
        iteration += 1;
    }

    let pool = pool.into_iter().map(|(multiindex, (v_norm, stamp))| PoolRecord { multiindex, v_norm, stamp }).collect();
    Ok(GreedyOutcome { log, pool, lambda, store, partial, solves })
}

fn pool_matches_neighbors(pool: &BTreeMap<MultiIndex, (f64, u64)>, lambda: &IndexSet, max_order: u32, dims: u32) -> bool {
    let expected: Vec<MultiIndex> = reduced_neighbors(lambda)
        .expect("Λ is downward closed")
        .into_iter()
        .filter(|mu| mu.order() <= max_order && mu.support() <= dims)
        .collect();
    expected.len() == pool.len() && expected.iter().zip(pool.keys()).all(|(a, b)| a == b)
}

/// Solution `u(y)` of the pulled-back problem on the reference mesh, by a
/// full assembly and factorization at the parameter `y`.
pub fn solve_at_parameter(system: &FemSystem, mapping: &Mapping, y: &[(u32, f64)], f_value: f64) -> Result<Vec<f64>, GreedyError> {
    let dirs: Vec<u32> = y.iter().map(|&(j, _)| j).collect();
    let mut coeff = Vec::with_capacity(system.n_qp());
    let mut load = Vec::with_capacity(system.n_qp());
    for &x in system.qp_points() {
        let jet: PointJet<f64> = mapping.jet(&dirs, x)?;
        let a = pullback_coefficient(&jet, y, system.a_value()).ok_or(MappingError::Singular { sample: 0, x0: x[0], x1: x[1] })?;
        coeff.push(a);
        load.push(pullback_load(&jet, y, f_value));
    }
    let op = system.assemble_operator(&coeff)?;
    let rhs = system.assemble_load(&load)?;
    Ok(system.solve_operator(&op, &rhs)?)
}
