//! Finitely supported multi-indices and downward-closed index sets.
//!
//! Dimensions are 1-based. The zero index has support 0, so the reduced
//! neighbors of `{0}` are `{e_1}`.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest order for which factorials are computed exactly.
pub const MAX_EXACT_ORDER: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MultiIndexError {
    #[error("dimension indices are 1-based, got 0")]
    ZeroDimension,
    #[error("dimension {0} appears twice")]
    DuplicateDimension(u32),
    #[error("{nu} is not below {mu}")]
    NotBelow { mu: String, nu: String },
    #[error("index set is not downward closed: {missing} is missing below {member}")]
    NotDownwardClosed { member: String, missing: String },
    #[error("index set does not contain the zero index")]
    MissingZero,
    #[error("factorial of order {0} exceeds exact integer range")]
    Overflow(u32),
    #[error("cannot parse multi-index {0:?}")]
    Parse(String),
}

/// Sparse exponent vector `μ`, stored as `(j, μ_j)` pairs with `μ_j > 0`,
/// sorted by `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct MultiIndex {
    entries: Vec<(u32, u32)>,
}

impl MultiIndex {
    pub fn zero() -> Self {
        Self::default()
    }

    /// The unit index `e_j`. Panics for `j = 0`.
    pub fn unit(j: u32) -> Self {
        assert!(j >= 1, "dimension indices are 1-based");
        Self { entries: vec![(j, 1)] }
    }

    /// Builds an index from `(dimension, exponent)` pairs in any order.
    /// Zero exponents are dropped.
    pub fn from_pairs<I: IntoIterator<Item = (u32, u32)>>(pairs: I) -> Result<Self, MultiIndexError> {
        let mut entries: Vec<(u32, u32)> = Vec::new();
        for (j, e) in pairs {
            if j == 0 {
                return Err(MultiIndexError::ZeroDimension);
            }
            if e > 0 {
                entries.push((j, e));
            }
        }
        entries.sort_unstable();
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(MultiIndexError::DuplicateDimension(w[0].0));
            }
        }
        Ok(Self { entries })
    }

    /// Dense form: `exps[0]` is the exponent of dimension 1.
    pub fn from_dense(exps: &[u32]) -> Self {
        let entries = exps
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(i, &e)| (i as u32 + 1, e))
            .collect();
        Self { entries }
    }

    pub fn to_dense(&self, len: usize) -> Vec<u32> {
        let mut out = vec![0; len.max(self.support() as usize)];
        for &(j, e) in &self.entries {
            out[j as usize - 1] = e;
        }
        out
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn get(&self, j: u32) -> u32 {
        match self.entries.binary_search_by_key(&j, |&(d, _)| d) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn order(&self) -> u32 {
        self.entries.iter().map(|&(_, e)| e).sum()
    }

    /// Largest active dimension, 0 for the zero index.
    pub fn support(&self) -> u32 {
        self.entries.last().map_or(0, |&(j, _)| j)
    }

    /// Active dimensions in increasing order.
    pub fn dims(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(j, _)| j)
    }

    pub fn factorial(&self) -> Result<u64, MultiIndexError> {
        let mut acc: u64 = 1;
        for &(_, e) in &self.entries {
            acc = acc.checked_mul(factorial_u64(e)?).ok_or(MultiIndexError::Overflow(self.order()))?;
        }
        Ok(acc)
    }

    pub fn plus_unit(&self, j: u32) -> Self {
        assert!(j >= 1, "dimension indices are 1-based");
        let mut entries = self.entries.clone();
        match entries.binary_search_by_key(&j, |&(d, _)| d) {
            Ok(pos) => entries[pos].1 += 1,
            Err(pos) => entries.insert(pos, (j, 1)),
        }
        Self { entries }
    }

    pub fn minus_unit(&self, j: u32) -> Option<Self> {
        let pos = self.entries.binary_search_by_key(&j, |&(d, _)| d).ok()?;
        let mut entries = self.entries.clone();
        if entries[pos].1 == 1 {
            entries.remove(pos);
        } else {
            entries[pos].1 -= 1;
        }
        Some(Self { entries })
    }

    pub fn add(&self, other: &Self) -> Self {
        let pairs = self.entries.iter().chain(other.entries.iter());
        let mut map: Vec<(u32, u32)> = Vec::with_capacity(self.entries.len() + other.entries.len());
        for &(j, e) in pairs {
            match map.iter_mut().find(|(d, _)| *d == j) {
                Some(slot) => slot.1 += e,
                None => map.push((j, e)),
            }
        }
        map.sort_unstable();
        Self { entries: map }
    }

    /// `self − other` when `other ≤ self`.
    pub fn checked_sub(&self, other: &Self) -> Option<Self> {
        if !other.is_le(self) {
            return None;
        }
        let entries = self
            .entries
            .iter()
            .filter_map(|&(j, e)| {
                let d = e - other.get(j);
                (d > 0).then_some((j, d))
            })
            .collect();
        Some(Self { entries })
    }

    /// Componentwise `self ≤ other`.
    pub fn is_le(&self, other: &Self) -> bool {
        self.entries.iter().all(|&(j, e)| e <= other.get(j))
    }

    /// Componentwise `self ≤ other` and `self ≠ other`.
    pub fn is_lt(&self, other: &Self) -> bool {
        self != other && self.is_le(other)
    }

    /// All `ν ≤ μ` (including `μ` itself) in canonical order.
    pub fn sub_indices(&self) -> Vec<MultiIndex> {
        let dims: Vec<(u32, u32)> = self.entries.clone();
        let total: usize = dims.iter().map(|&(_, e)| e as usize + 1).product();
        let mut out = Vec::with_capacity(total);
        let mut digits = vec![0u32; dims.len()];
        for _ in 0..total {
            let entries = dims
                .iter()
                .zip(&digits)
                .filter(|(_, &d)| d > 0)
                .map(|(&(j, _), &d)| (j, d))
                .collect();
            out.push(MultiIndex { entries });
            for (k, digit) in digits.iter_mut().enumerate() {
                if *digit < dims[k].1 {
                    *digit += 1;
                    break;
                }
                *digit = 0;
            }
        }
        out.sort();
        out
    }

    /// The strict lower set `{ν : ν < μ}` in canonical order.
    pub fn lower_set(&self) -> Vec<MultiIndex> {
        let mut all = self.sub_indices();
        all.pop();
        all
    }
}

fn factorial_u64(n: u32) -> Result<u64, MultiIndexError> {
    if n > MAX_EXACT_ORDER {
        return Err(MultiIndexError::Overflow(n));
    }
    Ok((1..=n as u64).product())
}

fn binom_u64(n: u32, k: u32) -> u64 {
    let k = k.min(n - k) as u64;
    let n = n as u64;
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// `binom(μ, ν) = Π_j binom(μ_j, ν_j)`.
pub fn binom(mu: &MultiIndex, nu: &MultiIndex) -> Result<u64, MultiIndexError> {
    if !nu.is_le(mu) {
        return Err(MultiIndexError::NotBelow { mu: mu.to_string(), nu: nu.to_string() });
    }
    Ok(mu.entries.iter().map(|&(j, e)| binom_u64(e, nu.get(j))).product())
}

/// Canonical order: by `|μ|`, then lexicographically on the dense exponent
/// vector with larger exponents in earlier dimensions first (`e_1 < e_2`).
impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        match self.order().cmp(&other.order()) {
            Ordering::Equal => {}
            ord => return ord,
        }
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        loop {
            match (a.peek(), b.peek()) {
                (None, None) => return Ordering::Equal,
                (Some(_), None) => return Ordering::Less,
                (None, Some(_)) => return Ordering::Greater,
                (Some(&&(ja, ea)), Some(&&(jb, eb))) => {
                    if ja != jb {
                        // The index with the earlier active dimension has the
                        // larger exponent there.
                        return ja.cmp(&jb);
                    }
                    if ea != eb {
                        return eb.cmp(&ea);
                    }
                    a.next();
                    b.next();
                }
            }
        }
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("0");
        }
        for (k, (j, e)) in self.entries.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{j}:{e}")?;
        }
        Ok(())
    }
}

impl FromStr for MultiIndex {
    type Err = MultiIndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "0" || s.is_empty() {
            return Ok(Self::zero());
        }
        let bad = || MultiIndexError::Parse(s.to_string());
        let mut pairs = Vec::new();
        for part in s.split(',') {
            let (j, e) = part.split_once(':').ok_or_else(bad)?;
            let j: u32 = j.trim().parse().map_err(|_| bad())?;
            let e: u32 = e.trim().parse().map_err(|_| bad())?;
            if e == 0 {
                return Err(bad());
            }
            pairs.push((j, e));
        }
        Self::from_pairs(pairs)
    }
}

impl Serialize for MultiIndex {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MultiIndex {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Insertion-ordered set of multi-indices with iteration stamps.
#[derive(Debug, Clone, Default)]
pub struct IndexSet {
    members: Vec<(MultiIndex, u64)>,
    lookup: HashMap<MultiIndex, usize>,
    max_support: u32,
}

impl IndexSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Members stamped with their position.
    pub fn from_indices<I: IntoIterator<Item = MultiIndex>>(indices: I) -> Self {
        let mut set = Self::new();
        for (k, mu) in indices.into_iter().enumerate() {
            set.insert(mu, k as u64);
        }
        set
    }

    /// Returns false if `mu` was already present.
    pub fn insert(&mut self, mu: MultiIndex, stamp: u64) -> bool {
        if self.lookup.contains_key(&mu) {
            return false;
        }
        self.max_support = self.max_support.max(mu.support());
        self.lookup.insert(mu.clone(), self.members.len());
        self.members.push((mu, stamp));
        true
    }

    pub fn contains(&self, mu: &MultiIndex) -> bool {
        self.lookup.contains_key(mu)
    }

    pub fn stamp(&self, mu: &MultiIndex) -> Option<u64> {
        self.lookup.get(mu).map(|&k| self.members[k].1)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MultiIndex> {
        self.members.iter().map(|(mu, _)| mu)
    }

    pub fn members(&self) -> &[(MultiIndex, u64)] {
        &self.members
    }

    /// `max_{μ ∈ Λ} supp(μ)`.
    pub fn max_support(&self) -> u32 {
        self.max_support
    }

    pub fn is_downward_closed(&self) -> bool {
        self.first_gap().is_none()
    }

    fn first_gap(&self) -> Option<(MultiIndex, MultiIndex)> {
        if !self.members.is_empty() && !self.contains(&MultiIndex::zero()) {
            return Some((self.members[0].0.clone(), MultiIndex::zero()));
        }
        // Immediate predecessors suffice: ν < μ is reachable by unit steps.
        for (mu, _) in &self.members {
            for j in mu.dims() {
                let below = mu.minus_unit(j).expect("active dimension");
                if !self.contains(&below) {
                    return Some((mu.clone(), below));
                }
            }
        }
        None
    }

    /// Whether adding `nu` keeps the set downward closed and respects the
    /// support cap of the reduced neighborhood.
    pub fn admits(&self, nu: &MultiIndex) -> bool {
        !self.contains(nu)
            && nu.support() <= self.max_support + 1
            && nu.dims().all(|j| self.contains(&nu.minus_unit(j).expect("active dimension")))
    }
}

pub fn is_downward_closed<'a, I: IntoIterator<Item = &'a MultiIndex>>(set: I) -> bool {
    IndexSet::from_indices(set.into_iter().cloned()).is_downward_closed()
}

/// The reduced neighbors of a downward-closed `Λ` in canonical order.
pub fn reduced_neighbors(lambda: &IndexSet) -> Result<Vec<MultiIndex>, MultiIndexError> {
    if !lambda.contains(&MultiIndex::zero()) {
        return Err(MultiIndexError::MissingZero);
    }
    if let Some((member, missing)) = lambda.first_gap() {
        return Err(MultiIndexError::NotDownwardClosed {
            member: member.to_string(),
            missing: missing.to_string(),
        });
    }
    let cap = lambda.max_support() + 1;
    let mut found = HashSet::new();
    for mu in lambda.iter() {
        for j in 1..=cap {
            let nu = mu.plus_unit(j);
            if lambda.admits(&nu) {
                found.insert(nu);
            }
        }
    }
    let mut out: Vec<MultiIndex> = found.into_iter().collect();
    out.sort();
    Ok(out)
}
