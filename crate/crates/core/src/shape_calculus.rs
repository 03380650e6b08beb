//! Exact parameter derivatives of the pulled-back coefficient at `y = 0`.
//!
//! With `N = (D_xΦ)^{-1}` and `D_xΦ(y) = I + Σ_j y_j D_j`, the coefficient is
//! `A(y) = a·N·Nᵀ·det D_xΦ` and the load `F(y) = f·det D_xΦ`, for constant
//! `a` and `f`.

use std::collections::HashMap;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::sync::{Arc, Mutex};

use crate::mapping::{Mapping, MappingError};
use crate::multiindex::{binom, MultiIndex};
use crate::scalar::Real;

/// Dense 2×2 matrix, row major.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat2<T> {
    pub m: [[T; 2]; 2],
}

impl<T: Real> Mat2<T> {
    pub fn new(a: T, b: T, c: T, d: T) -> Self {
        Self { m: [[a, b], [c, d]] }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::one())
    }

    pub fn diag(a: T, d: T) -> Self {
        Self::new(a, T::zero(), T::zero(), d)
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: [T; 2], v: [T; 2]) -> Self {
        Self::new(u[0] * v[0], u[0] * v[1], u[1] * v[0], u[1] * v[1])
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.m[0][0], self.m[1][0], self.m[0][1], self.m[1][1])
    }

    pub fn trace(&self) -> T {
        self.m[0][0] + self.m[1][1]
    }

    pub fn det(&self) -> T {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.m[0][0] * s, self.m[0][1] * s, self.m[1][0] * s, self.m[1][1] * s)
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        let inv = T::one() / det;
        Some(Self::new(self.m[1][1] * inv, -self.m[0][1] * inv, -self.m[1][0] * inv, self.m[0][0] * inv))
    }

    pub fn apply(&self, v: [T; 2]) -> [T; 2] {
        [self.m[0][0] * v[0] + self.m[0][1] * v[1], self.m[1][0] * v[0] + self.m[1][1] * v[1]]
    }

    pub fn symmetrized(&self) -> Self {
        let half = T::lit(0.5);
        let off = (self.m[0][1] + self.m[1][0]) * half;
        Self::new(self.m[0][0], off, off, self.m[1][1])
    }

    pub fn frobenius(&self) -> T {
        self.frobenius_sq().sqrt()
    }

    fn frobenius_sq(&self) -> T {
        self.m[0][0] * self.m[0][0] + self.m[0][1] * self.m[0][1] + self.m[1][0] * self.m[1][0] + self.m[1][1] * self.m[1][1]
    }

    /// Singular values `(σ_max, σ_min)`.
    pub fn singular_values(&self) -> (T, T) {
        let s = self.frobenius_sq();
        let det = self.det();
        let disc = (s * s - T::lit(4.0) * det * det).max(T::zero()).sqrt();
        let smax = ((s + disc) * T::lit(0.5)).sqrt();
        let smin = if smax > T::zero() { det.abs() / smax } else { T::zero() };
        (smax, smin)
    }

    /// Spectral norm `|M|₂,₂`.
    pub fn norm2(&self) -> T {
        self.singular_values().0
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }
}

impl<T: Real> Add for Mat2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.m[0][0] + o.m[0][0], self.m[0][1] + o.m[0][1], self.m[1][0] + o.m[1][0], self.m[1][1] + o.m[1][1])
    }
}

impl<T: Real> AddAssign for Mat2<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Mat2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.m[0][0] - o.m[0][0], self.m[0][1] - o.m[0][1], self.m[1][0] - o.m[1][0], self.m[1][1] - o.m[1][1])
    }
}

impl<T: Real> Neg for Mat2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

impl<T: Real> Mul for Mat2<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let a = &self.m;
        let b = &o.m;
        Self::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

/// Per-point data `Φ_j(x)`, `D_xΦ_j(x)` for the directions of interest.
/// Directions not stored are treated as `Φ_j ≡ 0` near the point.
#[derive(Debug, Clone, Default)]
pub struct PointJet<T> {
    pub point: [T; 2],
    entries: Vec<(u32, Mat2<T>, [T; 2])>,
}

impl<T: Real> PointJet<T> {
    pub fn new(point: [T; 2]) -> Self {
        Self { point, entries: Vec::new() }
    }

    pub fn insert(&mut self, j: u32, jacobian: Mat2<T>, value: [T; 2]) {
        match self.entries.binary_search_by_key(&j, |e| e.0) {
            Ok(pos) => self.entries[pos] = (j, jacobian, value),
            Err(pos) => self.entries.insert(pos, (j, jacobian, value)),
        }
    }

    pub fn with(mut self, j: u32, jacobian: Mat2<T>) -> Self {
        self.insert(j, jacobian, [T::zero(); 2]);
        self
    }

    pub fn jacobian(&self, j: u32) -> Mat2<T> {
        match self.entries.binary_search_by_key(&j, |e| e.0) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => Mat2::zero(),
        }
    }

    pub fn value(&self, j: u32) -> [T; 2] {
        match self.entries.binary_search_by_key(&j, |e| e.0) {
            Ok(pos) => self.entries[pos].2,
            Err(_) => [T::zero(); 2],
        }
    }

    pub fn directions(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.0)
    }
}

fn binom_t<T: Real>(mu: &MultiIndex, nu: &MultiIndex) -> T {
    T::from_u64(binom(mu, nu).expect("sub-index")).expect("binomial representable")
}

/// `∂^μ N(0)` by the labelled permutation sum
/// `(−1)^{|μ|} Σ_{σ} Π_i D_{ξ_σ(i)}`, grouped into distinct orderings of the
/// direction multiset (each occurring `μ!` times).
pub fn d_inv_permutation_sum<T: Real>(mu: &MultiIndex, jet: &PointJet<T>) -> Mat2<T> {
    let mut remaining: Vec<(u32, u32)> = mu.entries().to_vec();
    let mut acc = Mat2::zero();
    permute(&mut remaining, Mat2::identity(), jet, &mut acc);
    let weight = T::from_u64(mu.factorial().expect("order within exact range")).expect("representable");
    let sign = if mu.order() % 2 == 0 { T::one() } else { -T::one() };
    acc.scale(weight * sign)
}

fn permute<T: Real>(remaining: &mut [(u32, u32)], prefix: Mat2<T>, jet: &PointJet<T>, acc: &mut Mat2<T>) {
    if remaining.iter().all(|&(_, c)| c == 0) {
        *acc += prefix;
        return;
    }
    for k in 0..remaining.len() {
        if remaining[k].1 == 0 {
            continue;
        }
        remaining[k].1 -= 1;
        permute(remaining, prefix * jet.jacobian(remaining[k].0), jet, acc);
        remaining[k].1 += 1;
    }
}

/// `∂^μ N(0)` by the Leibniz recursion
/// `∂^{ν+e_j} N = −Σ_{ρ≤ν} binom(ν,ρ) ∂^ρN · D_j · ∂^{ν−ρ}N`.
pub fn d_inv_recursive<T: Real>(mu: &MultiIndex, jet: &PointJet<T>) -> Mat2<T> {
    let mut memo = HashMap::new();
    d_inv_memo(mu, jet, &mut memo)
}

fn d_inv_memo<T: Real>(mu: &MultiIndex, jet: &PointJet<T>, memo: &mut HashMap<MultiIndex, Mat2<T>>) -> Mat2<T> {
    if mu.is_zero() {
        return Mat2::identity();
    }
    if let Some(v) = memo.get(mu) {
        return *v;
    }
    let j = mu.dims().next().expect("nonzero index");
    let nu = mu.minus_unit(j).expect("active dimension");
    let dj = jet.jacobian(j);
    let mut acc = Mat2::zero();
    for rho in nu.sub_indices() {
        let rest = nu.checked_sub(&rho).expect("sub-index");
        let left = d_inv_memo(&rho, jet, memo);
        let right = d_inv_memo(&rest, jet, memo);
        acc += (left * dj * right).scale(binom_t::<T>(&nu, &rho));
    }
    let out = -acc;
    memo.insert(mu.clone(), out);
    out
}

/// Permutation sums up to order 5, the recursion beyond.
pub fn d_inv<T: Real>(mu: &MultiIndex, jet: &PointJet<T>) -> Mat2<T> {
    if mu.order() <= 5 {
        d_inv_permutation_sum(mu, jet)
    } else {
        d_inv_recursive(mu, jet)
    }
}

/// `∂^μ det D_xΦ(0)`; the determinant is quadratic in `y` in two dimensions.
pub fn d_det<T: Real>(mu: &MultiIndex, jet: &PointJet<T>) -> T {
    let e = mu.entries();
    match (mu.order(), e.len()) {
        (0, _) => T::one(),
        (1, _) => jet.jacobian(e[0].0).trace(),
        (2, 1) => T::lit(2.0) * jet.jacobian(e[0].0).det(),
        (2, 2) => {
            let (di, dj) = (jet.jacobian(e[0].0), jet.jacobian(e[1].0));
            di.trace() * dj.trace() - (di * dj).trace()
        }
        _ => T::zero(),
    }
}

/// `∂^μ det` by the Jacobi-formula recursion
/// `∂^{ν+e_j} det = Σ_{ρ≤ν} binom(ν,ρ) ∂^ρdet · tr(∂^{ν−ρ}N · D_j)`.
pub fn d_det_jacobi<T: Real>(mu: &MultiIndex, jet: &PointJet<T>) -> T {
    let mut memo = HashMap::new();
    let mut inv_memo = HashMap::new();
    d_det_memo(mu, jet, &mut memo, &mut inv_memo)
}

fn d_det_memo<T: Real>(
    mu: &MultiIndex,
    jet: &PointJet<T>,
    memo: &mut HashMap<MultiIndex, T>,
    inv_memo: &mut HashMap<MultiIndex, Mat2<T>>,
) -> T {
    if mu.is_zero() {
        return T::one();
    }
    if let Some(v) = memo.get(mu) {
        return *v;
    }
    let j = mu.dims().next().expect("nonzero index");
    let nu = mu.minus_unit(j).expect("active dimension");
    let dj = jet.jacobian(j);
    let mut acc = T::zero();
    for rho in nu.sub_indices() {
        let rest = nu.checked_sub(&rho).expect("sub-index");
        let det_part = d_det_memo(&rho, jet, memo, inv_memo);
        let inv_part = d_inv_memo(&rest, jet, inv_memo);
        acc += binom_t::<T>(&nu, &rho) * det_part * (inv_part * dj).trace();
    }
    memo.insert(mu.clone(), acc);
    acc
}

/// `∂^μ A(0;x)` before symmetrization.
pub fn d_a_unsymmetrized<T: Real>(mu: &MultiIndex, jet: &PointJet<T>, a_value: T) -> Mat2<T> {
    let mut inv_memo = HashMap::new();
    let mut acc = Mat2::zero();
    for nu1 in mu.sub_indices() {
        let rest1 = mu.checked_sub(&nu1).expect("sub-index");
        let c1 = binom_t::<T>(mu, &nu1);
        let n1 = d_inv_memo(&nu1, jet, &mut inv_memo);
        for nu3 in rest1.sub_indices() {
            if nu3.order() > 2 {
                continue;
            }
            let det = d_det(&nu3, jet);
            if det == T::zero() {
                continue;
            }
            let nu2 = rest1.checked_sub(&nu3).expect("sub-index");
            let c2 = binom_t::<T>(&rest1, &nu2);
            let n2 = d_inv_memo(&nu2, jet, &mut inv_memo);
            acc += (n1 * n2.transpose()).scale(c1 * c2 * det);
        }
    }
    acc.scale(a_value)
}

/// `∂^μ A(0;x)` for constant `a`, symmetrized.
pub fn d_a<T: Real>(mu: &MultiIndex, jet: &PointJet<T>, a_value: T) -> Mat2<T> {
    d_a_unsymmetrized(mu, jet, a_value).symmetrized()
}

/// `∂^μ F(0;x) = f·∂^μ det` for constant `f`.
pub fn d_f<T: Real>(mu: &MultiIndex, jet: &PointJet<T>, f_value: T) -> T {
    f_value * d_det(mu, jet)
}

/// `D_xΦ(y;x) = I + Σ y_j D_j` for the directions in `y`.
pub fn parametric_jacobian<T: Real>(jet: &PointJet<T>, y: &[(u32, T)]) -> Mat2<T> {
    y.iter().fold(Mat2::identity(), |acc, &(j, yj)| acc + jet.jacobian(j).scale(yj))
}

/// `A(y;x) = a·N·Nᵀ·det D_xΦ(y;x)`, or `None` if the Jacobian is singular.
pub fn pullback_coefficient<T: Real>(jet: &PointJet<T>, y: &[(u32, T)], a_value: T) -> Option<Mat2<T>> {
    let jac = parametric_jacobian(jet, y);
    let inv = jac.inverse()?;
    Some((inv * inv.transpose()).scale(a_value * jac.det()))
}

/// `F(y;x) = f·det D_xΦ(y;x)`.
pub fn pullback_load<T: Real>(jet: &PointJet<T>, y: &[(u32, T)], f_value: T) -> T {
    f_value * parametric_jacobian(jet, y).det()
}

#[derive(Debug, Clone, Copy)]
enum DetRule {
    One,
    Trace(usize),
    TwiceDet(usize),
    Cross(usize, usize),
}

/// Precomputed evaluation schedule for `∂^κ A(0;x)` at many points.
///
/// Sub-indices `ν ≤ κ` are encoded in mixed radix over the active
/// dimensions of `κ`; jacobians are passed in the order of `κ.dims()`.
#[derive(Debug, Clone)]
pub struct DerivativePlan {
    kappa: MultiIndex,
    box_len: usize,
    /// Codes in non-decreasing order, each with the local direction split off
    /// and the Leibniz terms `(ρ, ν−e_l−ρ, binom)`.
    inv_steps: Vec<(usize, usize, Vec<(usize, usize, f64)>)>,
    det_rules: Vec<(usize, DetRule)>,
    /// Terms `(ν1, ν2, det slot, multinomial)` of the Leibniz expansion.
    a_terms: Vec<(usize, usize, usize, f64)>,
}

/// Reusable buffers for [`DerivativePlan::eval`].
#[derive(Debug, Default, Clone)]
pub struct PlanScratch<T> {
    inv: Vec<Mat2<T>>,
    det: Vec<T>,
}

impl DerivativePlan {
    pub fn new(kappa: &MultiIndex) -> Self {
        let exps: Vec<u32> = kappa.entries().iter().map(|&(_, e)| e).collect();
        let mut strides = Vec::with_capacity(exps.len());
        let mut box_len = 1usize;
        for &e in &exps {
            strides.push(box_len);
            box_len *= e as usize + 1;
        }
        let dims: Vec<u32> = (1..=exps.len() as u32).collect();
        let decode = |code: usize| -> MultiIndex {
            MultiIndex::from_pairs(dims.iter().zip(&exps).zip(&strides).map(|((&d, &e), &s)| (d, ((code / s) % (e as usize + 1)) as u32)))
                .expect("valid local index")
        };
        let encode = |nu: &MultiIndex| -> usize { nu.entries().iter().map(|&(d, e)| e as usize * strides[d as usize - 1]).sum() };

        let local: Vec<MultiIndex> = (0..box_len).map(decode).collect();
        let mut order: Vec<usize> = (1..box_len).collect();
        order.sort_by_key(|&c| (local[c].order(), c));

        let mut inv_steps = Vec::with_capacity(order.len());
        for &code in &order {
            let nu = &local[code];
            let l = nu.dims().next().expect("nonzero");
            let base = nu.minus_unit(l).expect("active");
            let terms = base
                .sub_indices()
                .iter()
                .map(|rho| {
                    let rest = base.checked_sub(rho).expect("sub-index");
                    (encode(rho), encode(&rest), binom(&base, rho).expect("sub-index") as f64)
                })
                .collect();
            inv_steps.push((code, l as usize - 1, terms));
        }

        let mut det_rules = Vec::new();
        for (code, nu) in local.iter().enumerate() {
            let e = nu.entries();
            let rule = match (nu.order(), e.len()) {
                (0, _) => Some(DetRule::One),
                (1, _) => Some(DetRule::Trace(e[0].0 as usize - 1)),
                (2, 1) => Some(DetRule::TwiceDet(e[0].0 as usize - 1)),
                (2, 2) => Some(DetRule::Cross(e[0].0 as usize - 1, e[1].0 as usize - 1)),
                _ => None,
            };
            if let Some(rule) = rule {
                det_rules.push((code, rule));
            }
        }

        let top = decode(box_len - 1);
        let mut a_terms = Vec::new();
        for nu1 in &local {
            let rest1 = top.checked_sub(nu1).expect("sub-index");
            let c1 = binom(&top, nu1).expect("sub-index") as f64;
            for &(det_code, _) in &det_rules {
                let nu3 = &local[det_code];
                let Some(nu2) = rest1.checked_sub(nu3) else { continue };
                let c2 = binom(&rest1, &nu2).expect("sub-index") as f64;
                let slot = det_rules.iter().position(|&(c, _)| c == det_code).expect("present");
                a_terms.push((encode(nu1), encode(&nu2), slot, c1 * c2));
            }
        }

        Self { kappa: kappa.clone(), box_len, inv_steps, det_rules, a_terms }
    }

    pub fn kappa(&self) -> &MultiIndex {
        &self.kappa
    }

    /// Number of active directions, i.e. jacobians expected by [`Self::eval`].
    pub fn directions(&self) -> usize {
        self.kappa.entries().len()
    }

    /// `∂^κ A(0;x)` (symmetrized) from the jacobians of `κ`'s directions.
    pub fn eval<T: Real>(&self, jacs: &[Mat2<T>], a_value: T, scratch: &mut PlanScratch<T>) -> Mat2<T> {
        debug_assert_eq!(jacs.len(), self.directions());
        scratch.inv.clear();
        scratch.inv.resize(self.box_len, Mat2::zero());
        scratch.inv[0] = Mat2::identity();
        for (code, l, terms) in &self.inv_steps {
            let dl = jacs[*l];
            let mut acc = Mat2::zero();
            for &(rho, rest, c) in terms {
                acc += (scratch.inv[rho] * dl * scratch.inv[rest]).scale(T::lit(c));
            }
            scratch.inv[*code] = -acc;
        }
        scratch.det.clear();
        for &(_, rule) in &self.det_rules {
            let v = match rule {
                DetRule::One => T::one(),
                DetRule::Trace(l) => jacs[l].trace(),
                DetRule::TwiceDet(l) => T::lit(2.0) * jacs[l].det(),
                DetRule::Cross(i, k) => jacs[i].trace() * jacs[k].trace() - (jacs[i] * jacs[k]).trace(),
            };
            scratch.det.push(v);
        }
        let mut acc = Mat2::zero();
        for &(n1, n2, slot, c) in &self.a_terms {
            let det = scratch.det[slot];
            if det == T::zero() {
                continue;
            }
            acc += (scratch.inv[n1] * scratch.inv[n2].transpose()).scale(T::lit(c) * det);
        }
        acc.scale(a_value).symmetrized()
    }
}

/// `∂^κ A(0;x)` for every `κ ≤ μ` at once. The derivatives of `DΦ^{-1}`
/// and of `DΦ^{-1}DΦ^{-T}` are computed once per point and shared by all
/// `κ`. Entries are addressed by [`Self::code`]; jacobians are passed in the
/// order of `μ.dims()`.
#[derive(Debug, Clone)]
pub struct DerivativeTable {
    mu: MultiIndex,
    strides: Vec<usize>,
    /// Directions (bit per slot) that each code depends on.
    masks: Vec<u64>,
    inv_steps: Vec<(usize, usize, Vec<(usize, usize, f64)>)>,
    /// Per code: `(ν1, κ−ν1, binom)` for `∂^κ(DΦ^{-1}DΦ^{-T})`.
    p_terms: Vec<Vec<(usize, usize, f64)>>,
    det_rules: Vec<(usize, DetRule)>,
    /// Per code: `(det slot, κ−ν3, binom)`.
    a_terms: Vec<Vec<(usize, usize, f64)>>,
}

/// Reusable buffers for [`DerivativeTable::eval_all`].
#[derive(Debug, Default, Clone)]
pub struct TableScratch<T> {
    inv: Vec<Mat2<T>>,
    p: Vec<Mat2<T>>,
    det: Vec<T>,
}

impl DerivativeTable {
    pub fn new(mu: &MultiIndex) -> Self {
        let exps: Vec<u32> = mu.entries().iter().map(|&(_, e)| e).collect();
        assert!(exps.len() <= 64, "at most 64 directions");
        let mut strides = Vec::with_capacity(exps.len());
        let mut box_len = 1usize;
        for &e in &exps {
            strides.push(box_len);
            box_len *= e as usize + 1;
        }
        let dims: Vec<u32> = (1..=exps.len() as u32).collect();
        let decode = |code: usize| -> MultiIndex {
            MultiIndex::from_pairs(dims.iter().zip(&exps).zip(&strides).map(|((&d, &e), &s)| (d, ((code / s) % (e as usize + 1)) as u32)))
                .expect("valid local index")
        };
        let encode = |nu: &MultiIndex| -> usize { nu.entries().iter().map(|&(d, e)| e as usize * strides[d as usize - 1]).sum() };

        let local: Vec<MultiIndex> = (0..box_len).map(decode).collect();
        let masks = local.iter().map(|nu| nu.dims().fold(0u64, |m, d| m | 1 << (d - 1))).collect();
        let mut order: Vec<usize> = (1..box_len).collect();
        order.sort_by_key(|&c| (local[c].order(), c));

        let inv_steps = order
            .iter()
            .map(|&code| {
                let nu = &local[code];
                let l = nu.dims().next().expect("nonzero");
                let base = nu.minus_unit(l).expect("active");
                let terms = base
                    .sub_indices()
                    .iter()
                    .map(|rho| (encode(rho), encode(&base.checked_sub(rho).expect("sub-index")), binom(&base, rho).expect("sub-index") as f64))
                    .collect();
                (code, l as usize - 1, terms)
            })
            .collect();

        let mut det_rules = Vec::new();
        for (code, nu) in local.iter().enumerate() {
            let e = nu.entries();
            let rule = match (nu.order(), e.len()) {
                (0, _) => Some(DetRule::One),
                (1, _) => Some(DetRule::Trace(e[0].0 as usize - 1)),
                (2, 1) => Some(DetRule::TwiceDet(e[0].0 as usize - 1)),
                (2, 2) => Some(DetRule::Cross(e[0].0 as usize - 1, e[1].0 as usize - 1)),
                _ => None,
            };
            if let Some(rule) = rule {
                det_rules.push((code, rule));
            }
        }

        let mut p_terms = Vec::with_capacity(box_len);
        let mut a_terms = Vec::with_capacity(box_len);
        for kappa in &local {
            p_terms.push(
                kappa
                    .sub_indices()
                    .iter()
                    .map(|nu1| (encode(nu1), encode(&kappa.checked_sub(nu1).expect("sub-index")), binom(kappa, nu1).expect("sub-index") as f64))
                    .collect(),
            );
            a_terms.push(
                det_rules
                    .iter()
                    .enumerate()
                    .filter_map(|(slot, &(det_code, _))| {
                        let nu3 = &local[det_code];
                        let rest = kappa.checked_sub(nu3)?;
                        Some((slot, encode(&rest), binom(kappa, nu3).expect("sub-index") as f64))
                    })
                    .collect(),
            );
        }

        Self { mu: mu.clone(), strides, masks, inv_steps, p_terms, det_rules, a_terms }
    }

    pub fn mu(&self) -> &MultiIndex {
        &self.mu
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Position of `κ` in the table, `None` unless `κ ≤ μ`.
    pub fn code(&self, kappa: &MultiIndex) -> Option<usize> {
        let dims = self.mu.entries();
        let mut code = 0;
        for &(d, e) in kappa.entries() {
            let slot = dims.binary_search_by_key(&d, |&(j, _)| j).ok()?;
            if e > dims[slot].1 {
                return None;
            }
            code += e as usize * self.strides[slot];
        }
        Some(code)
    }

    /// Direction slots that the entry at `code` depends on, as a bit mask.
    pub fn mask(&self, code: usize) -> u64 {
        self.masks[code]
    }

    /// Fills `out[code]` with `∂^κ A(0;x)` (symmetrized). Slots flagged in
    /// `zero` must have vanishing jacobians; entries depending on them are
    /// set to zero without being computed.
    pub fn eval_all<T: Real>(&self, jacs: &[Mat2<T>], zero: u64, a_value: T, scratch: &mut TableScratch<T>, out: &mut Vec<Mat2<T>>) {
        debug_assert_eq!(jacs.len(), self.strides.len());
        let n = self.len();
        scratch.inv.clear();
        scratch.inv.resize(n, Mat2::zero());
        scratch.inv[0] = Mat2::identity();
        for (code, l, terms) in &self.inv_steps {
            if self.masks[*code] & zero != 0 {
                continue;
            }
            let dl = jacs[*l];
            let mut acc = Mat2::zero();
            for &(rho, rest, c) in terms {
                acc += (scratch.inv[rho] * dl * scratch.inv[rest]).scale(T::lit(c));
            }
            scratch.inv[*code] = -acc;
        }
        scratch.p.clear();
        scratch.p.resize(n, Mat2::zero());
        for (code, terms) in self.p_terms.iter().enumerate() {
            if self.masks[code] & zero != 0 {
                continue;
            }
            let mut acc = Mat2::zero();
            for &(n1, n2, c) in terms {
                acc += (scratch.inv[n1] * scratch.inv[n2].transpose()).scale(T::lit(c));
            }
            scratch.p[code] = acc;
        }
        scratch.det.clear();
        for &(_, rule) in &self.det_rules {
            scratch.det.push(match rule {
                DetRule::One => T::one(),
                DetRule::Trace(l) => jacs[l].trace(),
                DetRule::TwiceDet(l) => T::lit(2.0) * jacs[l].det(),
                DetRule::Cross(i, k) => jacs[i].trace() * jacs[k].trace() - (jacs[i] * jacs[k]).trace(),
            });
        }
        out.clear();
        out.resize(n, Mat2::zero());
        for (code, terms) in self.a_terms.iter().enumerate() {
            if self.masks[code] & zero != 0 {
                continue;
            }
            let mut acc = Mat2::zero();
            for &(slot, rest, c) in terms {
                let det = scratch.det[slot];
                if det == T::zero() {
                    continue;
                }
                acc += scratch.p[rest].scale(T::lit(c) * det);
            }
            out[code] = acc.scale(a_value).symmetrized();
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("derivative field cache would need {needed} bytes, over the budget of {budget}; lower max_order or raise the cache budget")]
    Budget { needed: usize, budget: usize },
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

/// `∂^κ A(0;·)` sampled at a fixed point set, memoized by `κ`.
#[derive(Debug)]
pub struct DerivativeFieldCache {
    points: Vec<[f64; 2]>,
    a_value: f64,
    budget_bytes: usize,
    fields: Mutex<HashMap<MultiIndex, Arc<Vec<Mat2<f64>>>>>,
}

impl DerivativeFieldCache {
    pub fn new(points: Vec<[f64; 2]>, a_value: f64, budget_bytes: usize) -> Self {
        Self { points, a_value, budget_bytes, fields: Mutex::new(HashMap::new()) }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.fields.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> usize {
        self.len() * self.field_bytes()
    }

    fn field_bytes(&self) -> usize {
        self.points.len() * std::mem::size_of::<Mat2<f64>>()
    }

    /// Concurrent callers may compute the same field twice; the first
    /// insertion wins and both results are identical.
    pub fn field(&self, kappa: &MultiIndex, mapping: &Mapping) -> Result<Arc<Vec<Mat2<f64>>>, FieldError> {
        if let Some(f) = self.fields.lock().expect("cache lock").get(kappa) {
            return Ok(f.clone());
        }
        let needed = self.bytes() + self.field_bytes();
        if needed > self.budget_bytes {
            return Err(FieldError::Budget { needed, budget: self.budget_bytes });
        }
        let plan = DerivativePlan::new(kappa);
        let dirs: Vec<u32> = kappa.dims().collect();
        let mut scratch = PlanScratch::default();
        let mut jacs = vec![Mat2::zero(); dirs.len()];
        let mut out = Vec::with_capacity(self.points.len());
        for &x in &self.points {
            for (slot, &j) in jacs.iter_mut().zip(&dirs) {
                *slot = mapping.displacement(j as usize, x)?.jacobian;
            }
            out.push(plan.eval(&jacs, self.a_value, &mut scratch));
        }
        let mut fields = self.fields.lock().expect("cache lock");
        Ok(fields.entry(kappa.clone()).or_insert_with(|| Arc::new(out)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, amp: f64) -> Mat2<f64> {
        Mat2::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp), rng.gen_range(-amp..amp), rng.gen_range(-amp..amp))
    }

    fn random_jet(rng: &mut ChaCha8Rng, dims: u32) -> PointJet<f64> {
        let mut jet = PointJet::new([0.3, 0.4]);
        for j in 1..=dims {
            jet.insert(j, random_mat(rng, 0.3), [0.0; 2]);
        }
        jet
    }

    fn all_indices(max_order: u32, dims: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        let total = (max_order as usize + 1).pow(dims as u32);
        for code in 0..total {
            let mut v = Vec::with_capacity(dims);
            let mut c = code;
            for _ in 0..dims {
                v.push((c % (max_order as usize + 1)) as u32);
                c /= max_order as usize + 1;
            }
            if v.iter().sum::<u32>() <= max_order {
                out.push(MultiIndex::from_dense(&v));
            }
        }
        out
    }

    fn idx(s: &str) -> MultiIndex {
        s.parse().unwrap()
    }

    fn close(a: Mat2<f64>, b: Mat2<f64>, tol: f64) -> bool {
        (a - b).frobenius() <= tol * (1.0 + b.frobenius())
    }

    #[test]
    fn inverse_derivative_examples() {
        let d = Mat2::new(0.2, -0.1, 0.05, 0.3);
        let jet = PointJet::new([0.0, 0.0]).with(4, d);
        assert_eq!(d_inv(&MultiIndex::zero(), &jet), Mat2::identity());
        assert!(close(d_inv(&MultiIndex::unit(4), &jet), -d, 1e-15));
        let two = MultiIndex::from_pairs([(4, 2)]).unwrap();
        assert!(close(d_inv(&two, &jet), (d * d).scale(2.0), 1e-15));
        // Second derivative of t ↦ (I + tD)^{-1} by central differences.
        let h = 1e-4;
        let inv = |t: f64| (Mat2::identity() + d.scale(t)).inverse().unwrap();
        let fd = (inv(h) - inv(0.0).scale(2.0) + inv(-h)).scale(1.0 / (h * h));
        assert!(close(d_inv(&two, &jet), fd, 1e-6));
    }

    #[test]
    fn determinant_examples() {
        let jet = PointJet::new([0.0, 0.0]).with(1, Mat2::diag(1.0, 0.0));
        assert_eq!(d_det(&MultiIndex::unit(1), &jet), 1.0);
        let jet = PointJet::new([0.0, 0.0]).with(1, Mat2::new(0.0, 1.0, 0.0, 0.0));
        assert_eq!(d_det(&MultiIndex::from_dense(&[2]), &jet), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jet = random_jet(&mut rng, 3);
        assert_eq!(d_det(&MultiIndex::from_dense(&[1, 1, 1]), &jet), 0.0);
    }

    #[test]
    fn coefficient_examples() {
        let d = Mat2::diag(1.0, 0.0);
        let jet = PointJet::new([0.0, 0.0]).with(1, d);
        assert_eq!(d_a(&MultiIndex::zero(), &jet, 2.5), Mat2::identity().scale(2.5));
        assert!(close(d_a(&MultiIndex::unit(1), &jet, 1.0), Mat2::diag(-1.0, 1.0), 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_mat(&mut rng, 0.3);
        let jet = PointJet::new([0.0, 0.0]).with(2, d);
        let expected = (-d - d.transpose() + Mat2::identity().scale(d.trace())).scale(1.7);
        assert!(close(d_a(&MultiIndex::unit(2), &jet, 1.7), expected, 1e-14));
        assert_eq!(d_f(&MultiIndex::zero(), &jet, 3.0), 3.0);
        assert!((d_f(&MultiIndex::unit(2), &jet, 3.0) - 3.0 * d.trace()).abs() < 1e-15);
        assert_eq!(d_f(&MultiIndex::from_dense(&[0, 4]), &jet, 3.0), 0.0);
    }

    #[test]
    fn permutation_sum_matches_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let jet = random_jet(&mut rng, 3);
            for mu in all_indices(5, 3) {
                let a = d_inv_permutation_sum(&mu, &jet);
                let b = d_inv_recursive(&mu, &jet);
                assert!(close(a, b, 1e-12), "{mu}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn closed_form_determinant_matches_jacobi_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let jet = random_jet(&mut rng, 3);
            for mu in all_indices(5, 3) {
                let a = d_det(&mu, &jet);
                let b = d_det_jacobi(&mu, &jet);
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{mu}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn coefficient_derivative_is_symmetric_before_symmetrization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let jet = random_jet(&mut rng, 3);
            for mu in all_indices(4, 3) {
                let m = d_a_unsymmetrized(&mu, &jet, 1.0);
                let asym = (m - m.transpose()).frobenius();
                assert!(asym <= 1e-12 * m.frobenius().max(1e-300), "{mu}: {asym}");
            }
        }
    }

    #[test]
    fn plan_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut scratch = PlanScratch::default();
        for _ in 0..3 {
            let jet = random_jet(&mut rng, 3);
            for mu in all_indices(5, 3) {
                let plan = DerivativePlan::new(&mu);
                let jacs: Vec<_> = mu.dims().map(|j| jet.jacobian(j)).collect();
                let fast = plan.eval(&jacs, 1.3, &mut scratch);
                let direct = d_a(&mu, &jet, 1.3);
                assert!(close(fast, direct, 1e-12), "{mu}");
            }
        }
        let sparse = MultiIndex::from_pairs([(7, 2), (40, 1)]).unwrap();
        let jet = PointJet::new([0.0, 0.0]).with(7, random_mat(&mut rng, 0.3)).with(40, random_mat(&mut rng, 0.3));
        let plan = DerivativePlan::new(&sparse);
        let fast = plan.eval(&[jet.jacobian(7), jet.jacobian(40)], 1.0, &mut scratch);
        assert!(close(fast, d_a(&sparse, &jet, 1.0), 1e-12));
    }

    #[test]
    fn table_matches_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut plan_scratch = PlanScratch::default();
        let mut scratch = TableScratch::default();
        let mut out = Vec::new();
        for mu in [idx("1:2,2:1,3:2"), idx("2:3"), idx("1:1,4:1,9:1,12:1"), idx("5:1")] {
            let table = DerivativeTable::new(&mu);
            let dirs: Vec<u32> = mu.dims().collect();
            let jacs: Vec<_> = dirs.iter().map(|_| random_mat(&mut rng, 0.3)).collect();
            table.eval_all(&jacs, 0, 1.7, &mut scratch, &mut out);
            assert_eq!(out.len(), mu.sub_indices().len());
            for kappa in mu.sub_indices() {
                let code = table.code(&kappa).unwrap();
                let sub: Vec<_> = kappa.dims().map(|d| jacs[dirs.binary_search(&d).unwrap()]).collect();
                let plan = DerivativePlan::new(&kappa).eval(&sub, 1.7, &mut plan_scratch);
                assert!(close(out[code], plan, 1e-12), "{mu} {kappa}");
            }
            // A vanishing direction zeroes every entry that depends on it.
            let mut zeroed = jacs.clone();
            zeroed[0] = Mat2::zero();
            let mut masked = Vec::new();
            table.eval_all(&zeroed, 1, 1.7, &mut scratch, &mut masked);
            table.eval_all(&zeroed, 0, 1.7, &mut scratch, &mut out);
            for (a, b) in masked.iter().zip(&out) {
                assert!(close(*a, *b, 1e-14));
            }
        }
        assert_eq!(DerivativeTable::new(&idx("1:2")).code(&idx("1:3")), None);
        assert_eq!(DerivativeTable::new(&idx("1:2")).code(&idx("2:1")), None);
    }

    #[test]
    fn generic_over_single_precision() {
        let jet = PointJet::<f32>::new([0.0, 0.0]).with(1, Mat2::new(0.1, 0.2, -0.1, 0.05));
        let mu = MultiIndex::from_dense(&[2]);
        let a = d_a(&mu, &jet, 1.0f32);
        let b = d_a(&mu, &PointJet::<f64>::new([0.0, 0.0]).with(1, Mat2::new(0.1, 0.2, -0.1, 0.05)), 1.0);
        for r in 0..2 {
            for c in 0..2 {
                assert!((a.m[r][c] as f64 - b.m[r][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn singular_values_of_rotation_and_scaling() {
        let m = Mat2::<f64>::new(0.0, -2.0, 0.5, 0.0);
        let (smax, smin) = m.singular_values();
        assert!((smax - 2.0).abs() < 1e-15 && (smin - 0.5).abs() < 1e-15);
        assert_eq!(Mat2::<f64>::identity().norm2(), 1.0);
    }
    /// `A(y) − a·I` for `D_xΦ = I + E` in adjugate form,
    /// `[(t + t² − det E)I − (1+t)(E+Eᵀ) + EEᵀ]/(1 + t + det E)` with
    /// `t = tr E`, which avoids cancelling against the identity.
    fn coefficient_deviation(jet: &PointJet<f64>, y: &[(u32, f64)]) -> Mat2<f64> {
        let e = y.iter().fold(Mat2::zero(), |acc, &(j, yj)| acc + jet.jacobian(j).scale(yj));
        let (t, de) = (e.trace(), e.det());
        let num = Mat2::identity().scale(t + t * t - de) - (e + e.transpose()).scale(1.0 + t) + e * e.transpose();
        num.scale(1.0 / (1.0 + t + de))
    }

    /// `Π_j δ_h^{μ_j} A / h^{|μ|}` with centered stencils at offsets
    /// `(m/2 − k)h`.
    fn central_difference(mu: &MultiIndex, jet: &PointJet<f64>, h: f64) -> Mat2<f64> {
        let dirs: Vec<(u32, u32)> = mu.entries().to_vec();
        let mut acc = Mat2::zero();
        let mut k = vec![0u32; dirs.len()];
        loop {
            let mut weight = 1.0;
            let mut y = Vec::with_capacity(dirs.len());
            for (&(j, m), &kj) in dirs.iter().zip(&k) {
                let c = (0..kj).fold(1.0, |c, i| c * (m - i) as f64 / (i + 1) as f64);
                weight *= if kj % 2 == 0 { c } else { -c };
                y.push((j, (m as f64 / 2.0 - kj as f64) * h));
            }
            acc += coefficient_deviation(jet, &y).scale(weight);
            let mut pos = 0;
            loop {
                if pos == dirs.len() {
                    return acc.scale(h.powi(-(mu.order() as i32)));
                }
                k[pos] += 1;
                if k[pos] <= dirs[pos].1 {
                    break;
                }
                k[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn coefficient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let jet = random_jet(&mut rng, 3);
            for &y in &[[0.02, -0.01, 0.03], [0.0, 0.0, 0.0]] {
                let y: Vec<(u32, f64)> = (1..=3).zip(y).collect();
                let direct = pullback_coefficient(&jet, &y, 1.0).unwrap() - Mat2::identity();
                assert!(close(coefficient_deviation(&jet, &y), direct, 1e-13));
            }
            for mu in all_indices(3, 3).into_iter().skip(1) {
                let exact = d_a(&mu, &jet, 1.0);
                let fd = central_difference(&mu, &jet, 1e-3);
                let rel = (exact - fd).frobenius() / exact.frobenius();
                assert!(rel <= 1e-5, "{mu}: {rel}");
            }
        }
    }

    #[test]
    fn field_cache_reuses_and_respects_budget() {
        use crate::boundary_basis::{BasisKind, FourierBasis};
        use crate::mapping::{MollifierMapping, NominalRadius};
        let basis = BasisKind::Fourier(FourierBasis::new(2.5, 4, 1.0).unwrap()).rescale_to_theta(0.1).unwrap();
        let map = Mapping::Mollifier(MollifierMapping::new(Arc::new(basis), NominalRadius::Circle { radius: 1.0 }).unwrap());
        let points = vec![[0.1, 0.05], [0.5, 0.2], [-0.3, 0.7], [0.0, -0.95]];
        let cache = DerivativeFieldCache::new(points.clone(), 2.0, 1 << 20);
        let zero = cache.field(&MultiIndex::zero(), &map).unwrap();
        assert!(zero.iter().all(|m| *m == Mat2::identity().scale(2.0)));
        let kappa: MultiIndex = "1:1,3:2".parse().unwrap();
        let first = cache.field(&kappa, &map).unwrap();
        let again = cache.field(&kappa, &map).unwrap();
        assert!(Arc::ptr_eq(&first, &again));
        assert_eq!(first[0], Mat2::zero());
        for (k, &x) in points.iter().enumerate() {
            let jet = map.jet(&[1, 3], x).unwrap();
            assert_eq!(first[k], DerivativePlan::new(&kappa).eval(&[jet.jacobian(1), jet.jacobian(3)], 2.0, &mut PlanScratch::default()));
        }
        assert_eq!(cache.len(), 2);

        let tight = DerivativeFieldCache::new(points, 1.0, 4 * std::mem::size_of::<Mat2<f64>>());
        tight.field(&MultiIndex::unit(1), &map).unwrap();
        assert!(matches!(tight.field(&MultiIndex::unit(2), &map), Err(FieldError::Budget { .. })));
    }

    #[test]
    fn pointwise_bound_holds() {
        use crate::boundary_basis::{BasisKind, CascadeTable, WaveletBasis};
        use crate::mapping::{MollifierMapping, NominalRadius};
        let table = Arc::new(CascadeTable::new("db4", 10).unwrap());
        let basis = BasisKind::Wavelet(WaveletBasis::new(table, 2.5, 0.1, 1.0, 3).unwrap()).rescale_to_theta(0.1).unwrap();
        let map = Mapping::Mollifier(MollifierMapping::new(Arc::new(basis), NominalRadius::Circle { radius: 1.0 }).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dirs = [1u32, 2, 3, 5];
        for _ in 0..20 {
            let (r, t) = (rng.gen_range(0.0..1.0f64).sqrt(), rng.gen_range(0.0..std::f64::consts::TAU));
            let x = [r * t.cos(), r * t.sin()];
            let jet = map.jet(&dirs, x).unwrap();
            let b: Vec<f64> = dirs.iter().map(|&j| {
                let v = jet.value(j);
                (v[0] * v[0] + v[1] * v[1]).sqrt() + std::f64::consts::SQRT_2 * jet.jacobian(j).norm2()
            }).collect();
            for mu in all_indices(4, 4).into_iter().skip(1) {
                let mu = MultiIndex::from_pairs(mu.entries().iter().map(|&(d, e)| (dirs[d as usize - 1], e))).unwrap();
                let bmu: f64 = mu.entries().iter().map(|&(j, e)| b[dirs.iter().position(|&d| d == j).unwrap()].powi(e as i32)).product();
                // C̃_a = a = 1; (|μ|+3)!/3! as a product.
                let bound = bmu * (4..=mu.order() + 3).map(f64::from).product::<f64>();
                assert!(d_a(&mu, &jet, 1.0).norm2() <= bound * (1.0 + 1e-12), "{mu} at {x:?}");
            }
        }
    }

}
