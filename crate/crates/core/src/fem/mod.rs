//! P2 Lagrange finite elements on graded disk meshes.

pub mod mesh;

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

pub use mesh::{build_graded_disk_mesh, GradingKind, Mesh, MeshParams, MeshStats};

use crate::shape_calculus::Mat2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FemError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("mesh exceeds the vertex budget of {budget}")]
    VertexBudget { budget: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("stiffness matrix is not positive definite")]
    NotSpd,
    #[error("solve residual {residual:e} exceeds tolerance {tol:e}")]
    Residual { residual: f64, tol: f64 },
    #[error("unsupported quadrature degree {0} (use 2 or 5)")]
    Quadrature(u32),
}

/// Symmetric triangle rule on the reference triangle `(0,0),(1,0),(0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub degree: u32,
    pub points: Vec<[f64; 2]>,
    /// Weights summing to the reference area 1/2.
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(degree: u32) -> Result<Self, FemError> {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut orbit = |a: f64, b: f64, w: f64| {
            for p in [[b, b], [a, b], [b, a]] {
                points.push(p);
                weights.push(0.5 * w);
            }
        };
        match degree {
            2 => orbit(2.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0),
            5 => {
                orbit(0.059_715_871_789_770, 0.470_142_064_105_115, 0.132_394_152_788_506);
                orbit(0.797_426_985_353_087, 0.101_286_507_323_456, 0.125_939_180_544_827);
                points.push([1.0 / 3.0, 1.0 / 3.0]);
                weights.push(0.5 * 0.225);
            }
            d => return Err(FemError::Quadrature(d)),
        }
        Ok(Self { degree, points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// P2 shape functions at `(ξ, η)`: vertices 0..3, then edge midpoints
/// (01), (12), (20).
pub fn p2_shape(xi: f64, eta: f64) -> ([f64; 6], [[f64; 2]; 6]) {
    let l = [1.0 - xi - eta, xi, eta];
    let g = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
    let mut vals = [0.0; 6];
    let mut grads = [[0.0; 2]; 6];
    for i in 0..3 {
        vals[i] = l[i] * (2.0 * l[i] - 1.0);
        grads[i] = [(4.0 * l[i] - 1.0) * g[i][0], (4.0 * l[i] - 1.0) * g[i][1]];
    }
    for (e, (a, b)) in [(0, 1), (1, 2), (2, 0)].into_iter().enumerate() {
        vals[3 + e] = 4.0 * l[a] * l[b];
        grads[3 + e] = [4.0 * (l[a] * g[b][0] + l[b] * g[a][0]), 4.0 * (l[a] * g[b][1] + l[b] * g[a][1])];
    }
    (vals, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub quadrature_degree: u32,
    /// Relative residual tolerance checked after every solve.
    pub tolerance: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { quadrature_degree: 5, tolerance: 1e-10 }
    }
}

/// Symmetric sparse matrix in compressed rows (full pattern).
#[derive(Debug, Clone, PartialEq)]
pub struct SymCsr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SymCsr {
    fn from_triplets(n: usize, mut entries: Vec<(u32, u32, f64)>) -> Self {
        entries.sort_unstable_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(entries.len() / 4);
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len() / 4);
        let mut last = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *vals.last_mut().expect("merged entry") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r as usize + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[range.clone()].binary_search(&(c as u32)) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.vals[k] * x[self.cols[k] as usize]).sum())
            .collect()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).all(|k| {
                let c = self.cols[k] as usize;
                (self.vals[k] - self.get(c, r)).abs() <= tol * self.vals[k].abs().max(1.0)
            })
        })
    }

    fn scaled(&self, s: f64) -> Self {
        Self { vals: self.vals.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    fn to_faer_lower(&self) -> Result<SparseColMat<usize, f64>, FemError> {
        // The pattern is symmetric, so the upper part of row r is the lower
        // part of column r.
        let mut trip = Vec::with_capacity(self.nnz() / 2 + self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k] as usize;
                if c >= r {
                    trip.push(Triplet::new(c, r, self.vals[k]));
                }
            }
        }
        SparseColMat::try_new_from_triplets(self.n, self.n, &trip).map_err(|_| FemError::NotSpd)
    }
}

/// Number of worker threads: `SHAPE_TAYLOR_WORKERS` if set, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var("SHAPE_TAYLOR_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Splits `0..items` into contiguous ranges, one per worker, accumulating
/// into private buffers that are summed in worker order.
pub fn par_accumulate<F>(items: usize, out_len: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let workers = worker_count().min(items.max(1) / 256 + 1);
    if workers <= 1 {
        let mut out = vec![0.0; out_len];
        f(0..items, &mut out);
        return out;
    }
    let chunk = items.div_ceil(workers);
    let parts: Vec<Vec<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    let mut buf = vec![0.0; out_len];
                    f(w * chunk..((w + 1) * chunk).min(items), &mut buf);
                    buf
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = vec![0.0; out_len];
    for part in parts {
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    out
}

const ANGLE_BINS: usize = 1024;
const DIRICHLET: u32 = u32::MAX;

/// Mesh, P2 space, quadrature geometry and factorized stiffness for the
/// constant coefficient `a·I`.
pub struct FemSystem {
    mesh: Mesh,
    a_value: f64,
    rule: QuadratureRule,
    nodes: Vec<[f64; 2]>,
    tri_dofs: Vec<[u32; 6]>,
    n_dofs: usize,
    ref_vals: Vec<[f64; 6]>,
    ref_grads: Vec<[[f64; 2]; 6]>,
    qp_x: Vec<[f64; 2]>,
    qp_w: Vec<f64>,
    qp_jit: Vec<Mat2<f64>>,
    identity_stiffness: SymCsr,
    stiffness0: SymCsr,
    factor: Llt<usize, f64>,
    tolerance: f64,
    angle_bins: Vec<Vec<u32>>,
}

impl std::fmt::Debug for FemSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FemSystem")
            .field("triangles", &self.mesh.triangles().len())
            .field("dofs", &self.n_dofs)
            .field("a_value", &self.a_value)
            .finish_non_exhaustive()
    }
}

/// Wedge `(start, len)` of directions covered by a triangle.
fn triangle_wedge(mesh: &Mesh, t: usize) -> (f64, f64) {
    let mut angles: Vec<f64> = mesh.triangles()[t]
        .iter()
        .filter_map(|&v| {
            let p = mesh.vertices()[v as usize];
            (p != [0.0, 0.0]).then(|| p[1].atan2(p[0]).rem_euclid(TAU))
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    // The wedge is the complement of the largest gap between angles.
    let n = angles.len();
    let (mut best_gap, mut best_end) = (-1.0, 0);
    for i in 0..n {
        let gap = if i + 1 < n { angles[i + 1] - angles[i] } else { angles[0] + TAU - angles[i] };
        if gap > best_gap {
            best_gap = gap;
            best_end = i;
        }
    }
    let start = angles[(best_end + 1) % n];
    (start, TAU - best_gap)
}

fn bins_of(start: f64, len: f64) -> impl Iterator<Item = usize> {
    let width = TAU / ANGLE_BINS as f64;
    let first = (start.rem_euclid(TAU) / width).floor() as usize;
    let count = if len >= TAU { ANGLE_BINS } else { (((start.rem_euclid(TAU) + len) / width).floor() as usize + 1 - first).min(ANGLE_BINS) };
    (0..count).map(move |k| (first + k) % ANGLE_BINS)
}

impl FemSystem {
    pub fn new(mesh: Mesh, a_value: f64, solver: &SolverParams) -> Result<Self, FemError> {
        if !(a_value > 0.0 && a_value.is_finite()) {
            return Err(FemError::InvalidMesh(format!("diffusion value must be positive, got {a_value}")));
        }
        let rule = QuadratureRule::new(solver.quadrature_degree)?;
        let (ref_vals, ref_grads): (Vec<_>, Vec<_>) = rule.points.iter().map(|p| p2_shape(p[0], p[1])).unzip();

        // P2 nodes: vertices, then one node per edge.
        let nv = mesh.vertices().len();
        let mut nodes = mesh.vertices().to_vec();
        let mut node_boundary: Vec<bool> = (0..nv).map(|v| mesh.is_boundary(v)).collect();
        let mut edge_ids: HashMap<(u32, u32), u32> = HashMap::with_capacity(3 * mesh.triangles().len() / 2 + nv);
        let mut edge_count: HashMap<(u32, u32), u8> = HashMap::with_capacity(edge_ids.capacity());
        for t in mesh.triangles() {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut tri_nodes = Vec::with_capacity(mesh.triangles().len());
        let mut curved = Vec::with_capacity(mesh.triangles().len());
        for t in mesh.triangles() {
            let mut local = [t[0], t[1], t[2], 0, 0, 0];
            let mut is_curved = false;
            for (e, (a, b)) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])].into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                let on_boundary = edge_count[&key] == 1;
                let id = *edge_ids.entry(key).or_insert_with(|| {
                    let (pa, pb) = (mesh.vertices()[a as usize], mesh.vertices()[b as usize]);
                    let node = if on_boundary {
                        // Isoparametric: the midpoint sits on the true boundary.
                        let (ta, tb) = (mesh.angle(a as usize), mesh.angle(b as usize));
                        let d = (tb - ta + PI).rem_euclid(TAU) - PI;
                        let phi = ta + 0.5 * d;
                        let r = mesh.radius().eval(phi).0;
                        [r * phi.cos(), r * phi.sin()]
                    } else {
                        [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
                    };
                    nodes.push(node);
                    node_boundary.push(on_boundary);
                    (nodes.len() - 1) as u32
                });
                is_curved |= on_boundary;
                local[3 + e] = id;
            }
            tri_nodes.push(local);
            curved.push(is_curved);
        }
        let mut node_dof = vec![DIRICHLET; nodes.len()];
        let mut n_dofs = 0u32;
        for (i, &b) in node_boundary.iter().enumerate() {
            if !b {
                node_dof[i] = n_dofs;
                n_dofs += 1;
            }
        }
        let tri_dofs: Vec<[u32; 6]> = tri_nodes.iter().map(|t| t.map(|n| node_dof[n as usize])).collect();

        let nq = rule.len();
        let nt = tri_nodes.len();
        let mut qp_x = Vec::with_capacity(nt * nq);
        let mut qp_w = Vec::with_capacity(nt * nq);
        let mut qp_jit = Vec::with_capacity(nt * nq);
        for (t, tn) in tri_nodes.iter().enumerate() {
            let pts = tn.map(|n| nodes[n as usize]);
            let affine_jac = |grads: &[[f64; 2]; 6], upto: usize| {
                let mut j = Mat2::zero();
                for i in 0..upto {
                    j += Mat2::outer(pts[i], grads[i]);
                }
                j
            };
            for q in 0..nq {
                let vals = &ref_vals[q];
                let jac = if curved[t] {
                    affine_jac(&ref_grads[q], 6)
                } else {
                    let (p0, p1, p2) = (pts[0], pts[1], pts[2]);
                    Mat2::new(p1[0] - p0[0], p2[0] - p0[0], p1[1] - p0[1], p2[1] - p0[1])
                };
                let det = jac.det();
                if !(det > 0.0) {
                    return Err(FemError::InvalidMesh(format!("element {t} has non-positive Jacobian")));
                }
                let x = if curved[t] {
                    let mut x = [0.0; 2];
                    for i in 0..6 {
                        x[0] += vals[i] * pts[i][0];
                        x[1] += vals[i] * pts[i][1];
                    }
                    x
                } else {
                    let l = [1.0 - rule.points[q][0] - rule.points[q][1], rule.points[q][0], rule.points[q][1]];
                    [
                        l[0] * pts[0][0] + l[1] * pts[1][0] + l[2] * pts[2][0],
                        l[0] * pts[0][1] + l[1] * pts[1][1] + l[2] * pts[2][1],
                    ]
                };
                qp_x.push(x);
                qp_w.push(rule.weights[q] * det);
                qp_jit.push(jac.inverse().expect("positive determinant").transpose());
            }
        }

        let mut angle_bins = vec![Vec::new(); ANGLE_BINS];
        for t in 0..nt {
            let (start, len) = triangle_wedge(&mesh, t);
            for b in bins_of(start, len) {
                angle_bins[b].push(t as u32);
            }
        }

        let mut sys = Self {
            mesh,
            a_value,
            rule,
            nodes,
            tri_dofs,
            n_dofs: n_dofs as usize,
            ref_vals,
            ref_grads,
            qp_x,
            qp_w,
            qp_jit,
            identity_stiffness: SymCsr { n: 0, row_ptr: vec![0], cols: vec![], vals: vec![] },
            stiffness0: SymCsr { n: 0, row_ptr: vec![0], cols: vec![], vals: vec![] },
            factor: SparseColMat::<usize, f64>::try_new_from_triplets(1, 1, &[Triplet::new(0, 0, 1.0)])
                .expect("1x1")
                .sp_cholesky(Side::Lower)
                .expect("1x1"),
            tolerance: solver.tolerance,
            angle_bins,
        };
        sys.identity_stiffness = sys.assemble_operator_with(|_| Mat2::identity());
        sys.stiffness0 = sys.identity_stiffness.scaled(a_value);
        sys.factor = sys.stiffness0.to_faer_lower()?.sp_cholesky(Side::Lower).map_err(|_| FemError::NotSpd)?;
        Ok(sys)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn a_value(&self) -> f64 {
        self.a_value
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn n_triangles(&self) -> usize {
        self.tri_dofs.len()
    }

    pub fn qp_per_triangle(&self) -> usize {
        self.rule.len()
    }

    pub fn n_qp(&self) -> usize {
        self.qp_x.len()
    }

    pub fn qp_points(&self) -> &[[f64; 2]] {
        &self.qp_x
    }

    pub fn qp_weights(&self) -> &[f64] {
        &self.qp_w
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangle_dofs(&self, t: usize) -> &[u32; 6] {
        &self.tri_dofs[t]
    }

    pub fn identity_stiffness(&self) -> &SymCsr {
        &self.identity_stiffness
    }

    pub fn stiffness0(&self) -> &SymCsr {
        &self.stiffness0
    }

    /// Physical gradients of the six local basis functions at quadrature
    /// point `q` (global index).
    #[inline]
    pub fn basis_gradients(&self, q: usize) -> [[f64; 2]; 6] {
        let jit = self.qp_jit[q];
        let local = &self.ref_grads[q % self.rule.len()];
        local.map(|g| jit.apply(g))
    }

    #[inline]
    pub fn basis_values(&self, q: usize) -> &[f64; 6] {
        &self.ref_vals[q % self.rule.len()]
    }

    /// `∇u` at quadrature point `q` of triangle `t`.
    #[inline]
    pub fn gradient_at(&self, u: &[f64], t: usize, grads: &[[f64; 2]; 6]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (i, &d) in self.tri_dofs[t].iter().enumerate() {
            if d != DIRICHLET {
                let v = u[d as usize];
                g[0] += v * grads[i][0];
                g[1] += v * grads[i][1];
            }
        }
        g
    }

    /// Triangles whose direction wedge meets the arc `(start, len)`, in
    /// increasing order.
    pub fn triangles_in_arc(&self, start: f64, len: f64) -> Vec<u32> {
        let mut seen = vec![false; self.n_triangles()];
        let mut out = Vec::new();
        for b in bins_of(start, len) {
            for &t in &self.angle_bins[b] {
                if !std::mem::replace(&mut seen[t as usize], true) {
                    out.push(t);
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn assemble_operator_with(&self, coeff: impl Fn(usize) -> Mat2<f64>) -> SymCsr {
        let nq = self.rule.len();
        let mut trip = Vec::with_capacity(self.n_triangles() * 36);
        for t in 0..self.n_triangles() {
            let mut local = [[0.0; 6]; 6];
            for q in t * nq..(t + 1) * nq {
                let grads = self.basis_gradients(q);
                let c = coeff(q);
                let w = self.qp_w[q];
                for j in 0..6 {
                    let cg = c.apply(grads[j]);
                    for i in 0..6 {
                        local[i][j] += w * (cg[0] * grads[i][0] + cg[1] * grads[i][1]);
                    }
                }
            }
            let dofs = &self.tri_dofs[t];
            for i in 0..6 {
                for j in 0..6 {
                    if dofs[i] != DIRICHLET && dofs[j] != DIRICHLET {
                        trip.push((dofs[i], dofs[j], local[i][j]));
                    }
                }
            }
        }
        SymCsr::from_triplets(self.n_dofs, trip)
    }

    fn check_field(&self, len: usize) -> Result<(), FemError> {
        if len != self.n_qp() {
            return Err(FemError::Dimension { expected: self.n_qp(), got: len });
        }
        Ok(())
    }

    fn check_dofs(&self, len: usize) -> Result<(), FemError> {
        if len != self.n_dofs {
            return Err(FemError::Dimension { expected: self.n_dofs, got: len });
        }
        Ok(())
    }

    /// `K_pq = Σ w·(C∇φ_q)·∇φ_p` over interior dofs.
    pub fn assemble_operator(&self, field: &[Mat2<f64>]) -> Result<SymCsr, FemError> {
        self.check_field(field.len())?;
        Ok(self.assemble_operator_with(|q| field[q]))
    }

    /// `∫ (C∇u)·∇φ_p`, matrix-free.
    pub fn apply_weighted_gradient_form(&self, field: &[Mat2<f64>], u: &[f64]) -> Result<Vec<f64>, FemError> {
        self.check_field(field.len())?;
        self.check_dofs(u.len())?;
        let nq = self.rule.len();
        Ok(par_accumulate(self.n_triangles(), self.n_dofs, |range, out| {
            for t in range {
                for q in t * nq..(t + 1) * nq {
                    let grads = self.basis_gradients(q);
                    let g = self.gradient_at(u, t, &grads);
                    let cg = field[q].apply(g);
                    self.scatter_gradient(t, &grads, [self.qp_w[q] * cg[0], self.qp_w[q] * cg[1]], out);
                }
            }
        }))
    }

    /// Adds `v·∇φ_i` to the interior dofs of triangle `t`.
    #[inline]
    pub fn scatter_gradient(&self, t: usize, grads: &[[f64; 2]; 6], v: [f64; 2], out: &mut [f64]) {
        for (i, &d) in self.tri_dofs[t].iter().enumerate() {
            if d != DIRICHLET {
                out[d as usize] += v[0] * grads[i][0] + v[1] * grads[i][1];
            }
        }
    }

    /// Adds `s·φ_i` at quadrature point `q` to the interior dofs of `t`.
    #[inline]
    pub fn scatter_value(&self, t: usize, q: usize, s: f64, out: &mut [f64]) {
        let vals = self.basis_values(q);
        for (i, &d) in self.tri_dofs[t].iter().enumerate() {
            if d != DIRICHLET {
                out[d as usize] += s * vals[i];
            }
        }
    }

    /// `∫ g·φ_p` for a scalar field sampled at quadrature points.
    pub fn assemble_load(&self, field: &[f64]) -> Result<Vec<f64>, FemError> {
        self.check_field(field.len())?;
        let nq = self.rule.len();
        let mut out = vec![0.0; self.n_dofs];
        for t in 0..self.n_triangles() {
            for q in t * nq..(t + 1) * nq {
                self.scatter_value(t, q, self.qp_w[q] * field[q], &mut out);
            }
        }
        Ok(out)
    }

    pub fn assemble_constant_load(&self, f: f64) -> Vec<f64> {
        self.assemble_load(&vec![f; self.n_qp()]).expect("field length matches")
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, FemError> {
        Ok(self.solve_many(&[rhs.to_vec()])?.pop().expect("one column"))
    }

    /// Solves against the shared factorization, checking residuals.
    pub fn solve_many(&self, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, FemError> {
        Ok(self.solve_many_with_norms(rhs)?.into_iter().map(|(x, _)| x).collect())
    }

    /// [`Self::solve_many`] together with `‖x‖_V`, taken from the product
    /// `K₀x` that the residual check computes anyway.
    pub fn solve_many_with_norms(&self, rhs: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>, FemError> {
        for r in rhs {
            self.check_dofs(r.len())?;
        }
        let mut x = Mat::from_fn(self.n_dofs, rhs.len(), |i, j| rhs[j][i]);
        self.factor.solve_in_place(x.as_mut());
        let mut out = Vec::with_capacity(rhs.len());
        for (j, r) in rhs.iter().enumerate() {
            let col: Vec<f64> = x.col(j).iter().copied().collect();
            let res = self.stiffness0.matvec(&col);
            let num = res.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if num > self.tolerance * den {
                return Err(FemError::Residual { residual: num / den.max(f64::MIN_POSITIVE), tol: self.tolerance });
            }
            let energy = res.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>() / self.a_value;
            out.push((col, energy.max(0.0).sqrt()));
        }
        Ok(out)
    }

    /// Solves with an operator other than the stiffness at the nominal
    /// configuration, factorizing it afresh.
    pub fn solve_operator(&self, op: &SymCsr, rhs: &[f64]) -> Result<Vec<f64>, FemError> {
        self.check_dofs(op.dim())?;
        self.check_dofs(rhs.len())?;
        let factor = op.to_faer_lower()?.sp_cholesky(Side::Lower).map_err(|_| FemError::NotSpd)?;
        let mut x = Mat::from_fn(self.n_dofs, 1, |i, _| rhs[i]);
        factor.solve_in_place(x.as_mut());
        Ok((0..self.n_dofs).map(|i| x[(i, 0)]).collect())
    }

    /// `sqrt(uᵀ·S·u)` with `S` the coefficient-`I` stiffness.
    pub fn v_norm(&self, u: &[f64]) -> f64 {
        self.identity_stiffness.quadratic_form(u).max(0.0).sqrt()
    }

    /// `‖∇u_h − ∇u‖_{L²}` by quadrature.
    pub fn h1_seminorm_error(&self, u: &[f64], exact_grad: impl Fn([f64; 2]) -> [f64; 2]) -> f64 {
        let nq = self.rule.len();
        let mut acc = 0.0;
        for t in 0..self.n_triangles() {
            for q in t * nq..(t + 1) * nq {
                let g = self.gradient_at(u, t, &self.basis_gradients(q));
                let e = exact_grad(self.qp_x[q]);
                acc += self.qp_w[q] * ((g[0] - e[0]).powi(2) + (g[1] - e[1]).powi(2));
            }
        }
        acc.sqrt()
    }
}
