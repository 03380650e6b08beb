//! Boundary expansion functions `ψ_j(θ)` for the radius
//! `r(y;θ) = r₀(θ) + Σ_j ψ_j(θ) y_j`.

mod cascade;

use std::f64::consts::TAU;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cascade::{daubechies_filter, CascadeTable};

/// Angles used for the grid maximization of `Σ_j |ψ_j|`.
pub const DEFAULT_GRID: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BasisError {
    #[error("unknown wavelet {0:?} (expected db4, db2 or haar)")]
    UnknownWavelet(String),
    #[error("cascade depth {0} outside 8..=16")]
    CascadeDepth(u32),
    #[error("basis index {j} out of range 1..={len}")]
    IndexOutOfRange { j: usize, len: usize },
    #[error("theta must lie in (0, 1), got {0}")]
    Theta(f64),
    #[error("alpha must exceed 2, got {0}")]
    Alpha(f64),
    #[error("invalid basis parameter: {0}")]
    Invalid(String),
}

/// `ψ_j` for `j` even: `(j/2)^{-α} sin(jθ/2)`; `j` odd: `((j+1)/2)^{-α} cos((j+1)θ/2)`,
/// times `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    pub alpha: f64,
    pub scale: f64,
    pub truncation: usize,
    pub r0_min: f64,
}

impl FourierBasis {
    pub fn new(alpha: f64, truncation: usize, r0_min: f64) -> Result<Self, BasisError> {
        check_alpha(alpha)?;
        if truncation == 0 {
            return Err(BasisError::Invalid("truncation must be positive".into()));
        }
        if r0_min <= 0.0 || !r0_min.is_finite() {
            return Err(BasisError::Invalid(format!("r0_min must be positive, got {r0_min}")));
        }
        Ok(Self { alpha, scale: 1.0, truncation, r0_min })
    }

    fn mode(j: usize) -> (f64, bool) {
        if j % 2 == 0 {
            ((j / 2) as f64, true)
        } else {
            (((j + 1) / 2) as f64, false)
        }
    }

    fn function(&self, j: usize) -> BasisFunction<'_> {
        let (m, is_sin) = Self::mode(j);
        BasisFunction(FunctionKind::Fourier { amp: self.scale * m.powf(-self.alpha), m, is_sin })
    }

    fn pair(&self, j: usize, theta: f64) -> (f64, f64) {
        self.function(j).pair(theta)
    }
}

/// Periodized wavelets `ψ_λ(θ) = ϑ·c_ℓ·Σ_m Ψ(2^ℓ(t+m) − k)`, `t = θ/2π`,
/// with `c_ℓ = (r₀⁻/M)(1−2^{−α})2^{−αℓ}`. Index `j = 1` is the periodized
/// scaling function (a constant at level 0); `j ≥ 2` maps level-major to
/// `j − 1 = 2^ℓ + k`.
#[derive(Debug, Clone)]
pub struct WaveletBasis {
    pub alpha: f64,
    pub theta: f64,
    pub r0_min: f64,
    pub max_level: u32,
    table: Arc<CascadeTable>,
    m_const: f64,
    correction: f64,
}

impl WaveletBasis {
    pub fn new(table: Arc<CascadeTable>, alpha: f64, theta: f64, r0_min: f64, max_level: u32) -> Result<Self, BasisError> {
        check_alpha(alpha)?;
        check_theta(theta)?;
        if r0_min <= 0.0 || !r0_min.is_finite() {
            return Err(BasisError::Invalid(format!("r0_min must be positive, got {r0_min}")));
        }
        if max_level > 20 {
            return Err(BasisError::Invalid(format!("max_level {max_level} exceeds 20")));
        }
        let m_const = shift_sum_max(&table, table.psi_samples());
        Ok(Self { alpha, theta, r0_min, max_level, table, m_const, correction: 1.0 })
    }

    pub fn table(&self) -> &Arc<CascadeTable> {
        &self.table
    }

    /// `M = sup_t Σ_k |Ψ(t − k)|` on the cascade grid.
    pub fn m_const(&self) -> f64 {
        self.m_const
    }

    /// Extra factor applied by [`BasisKind::rescale_to_theta`]; 1 for the
    /// plain construction.
    pub fn correction(&self) -> f64 {
        self.correction
    }

    pub fn len(&self) -> usize {
        1usize << (self.max_level + 1)
    }

    /// `(ℓ, k)` for `j ≥ 2`; `None` for the scaling function `j = 1`.
    pub fn level_shift(j: usize) -> Option<(u32, usize)> {
        if j < 2 {
            return None;
        }
        let n = j - 1;
        let level = usize::BITS - 1 - n.leading_zeros();
        Some((level, n - (1usize << level)))
    }

    /// Level-dependent factor `c_ℓ·correction` without `ϑ`.
    fn level_factor(&self, level: u32) -> f64 {
        self.r0_min / self.m_const * (1.0 - 2f64.powf(-self.alpha)) * 2f64.powf(-self.alpha * level as f64) * self.correction
    }

    /// Amplitude prefactor of level `ℓ` (scaling function uses level 0).
    pub fn amplitude(&self, level: u32) -> f64 {
        self.theta * self.level_factor(level)
    }

    fn function(&self, j: usize) -> BasisFunction<'_> {
        let Some((level, k)) = Self::level_shift(j) else {
            // Σ_m φ(t + m) = 1.
            return BasisFunction(FunctionKind::Constant(self.theta * self.level_factor(0)));
        };
        BasisFunction(FunctionKind::Wavelet {
            table: &self.table,
            amp: self.theta * self.level_factor(level),
            period: (1usize << level) as f64,
            k: k as f64,
        })
    }

    fn pair(&self, j: usize, theta: f64) -> (f64, f64) {
        self.function(j).pair(theta)
    }
}

/// A single `ψ_j` with its amplitude and shift resolved, for evaluation at
/// many angles.
#[derive(Debug, Clone, Copy)]
pub struct BasisFunction<'b>(FunctionKind<'b>);

#[derive(Debug, Clone, Copy)]
enum FunctionKind<'b> {
    Fourier { amp: f64, m: f64, is_sin: bool },
    Constant(f64),
    Wavelet { table: &'b CascadeTable, amp: f64, period: f64, k: f64 },
}

impl BasisFunction<'_> {
    /// `(ψ_j(θ), ψ_j'(θ))`.
    pub fn pair(&self, theta: f64) -> (f64, f64) {
        match self.0 {
            FunctionKind::Fourier { amp, m, is_sin } => {
                let (s, c) = (m * theta).sin_cos();
                if is_sin {
                    (amp * s, amp * m * c)
                } else {
                    (amp * c, -amp * m * s)
                }
            }
            FunctionKind::Constant(v) => (v, 0.0),
            FunctionKind::Wavelet { table, amp, period, k } => {
                let t = theta / TAU;
                let t = t - floor(t) as f64;
                let support = table.support() as f64;
                let x0 = period * t - k;
                let m_lo = -floor(x0 / period);
                let m_hi = floor((support - x0) / period);
                let (mut v, mut d) = (0.0, 0.0);
                for m in m_lo..=m_hi {
                    let (pv, pd) = table.psi_pair(x0 + period * m as f64);
                    v += pv;
                    d += pd;
                }
                (amp * v, amp * d * period / TAU)
            }
        }
    }
}

/// `⌊x⌋` for moderate `|x|`, without a libm call.
#[inline]
fn floor(x: f64) -> i64 {
    let i = x as i64;
    if (i as f64) > x {
        i - 1
    } else {
        i
    }
}

fn check_alpha(alpha: f64) -> Result<(), BasisError> {
    // α = 2 is admitted as the limiting case studied numerically.
    if !(alpha >= 2.0) || !alpha.is_finite() {
        return Err(BasisError::Alpha(alpha));
    }
    Ok(())
}

fn check_theta(theta: f64) -> Result<(), BasisError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(BasisError::Theta(theta));
    }
    Ok(())
}

/// `sup_t Σ_k |f(t − k)|` over the dyadic grid of `t ∈ [0, 1)`.
pub fn shift_sum_max(table: &CascadeTable, samples: &[f64]) -> f64 {
    let per = table.samples_per_unit();
    (0..per)
        .map(|i| (0..table.support()).map(|k| samples[i + k * per].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Fourier,
    Wavelet,
}

#[derive(Debug, Clone)]
pub enum BasisKind {
    Fourier(FourierBasis),
    Wavelet(WaveletBasis),
}

impl BasisKind {
    pub fn family(&self) -> BasisFamily {
        match self {
            BasisKind::Fourier(_) => BasisFamily::Fourier,
            BasisKind::Wavelet(_) => BasisFamily::Wavelet,
        }
    }

    /// Number of retained functions.
    pub fn len(&self) -> usize {
        match self {
            BasisKind::Fourier(b) => b.truncation,
            BasisKind::Wavelet(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alpha(&self) -> f64 {
        match self {
            BasisKind::Fourier(b) => b.alpha,
            BasisKind::Wavelet(b) => b.alpha,
        }
    }

    pub fn r0_min(&self) -> f64 {
        match self {
            BasisKind::Fourier(b) => b.r0_min,
            BasisKind::Wavelet(b) => b.r0_min,
        }
    }

    /// Level used by the weight sequence: wavelet level, or `⌊log₂ j⌋` for
    /// Fourier functions.
    pub fn level(&self, j: usize) -> u32 {
        match self {
            BasisKind::Fourier(_) => usize::BITS - 1 - j.max(1).leading_zeros(),
            BasisKind::Wavelet(_) => WaveletBasis::level_shift(j).map_or(0, |(l, _)| l),
        }
    }

    fn check(&self, j: usize) -> Result<(), BasisError> {
        if j == 0 || j > self.len() {
            return Err(BasisError::IndexOutOfRange { j, len: self.len() });
        }
        Ok(())
    }

    /// `(ψ_j(θ), ψ'_j(θ))`.
    pub fn eval_pair(&self, j: usize, theta: f64) -> Result<(f64, f64), BasisError> {
        self.check(j)?;
        Ok(match self {
            BasisKind::Fourier(b) => b.pair(j, theta),
            BasisKind::Wavelet(b) => b.pair(j, theta),
        })
    }

    pub fn function(&self, j: usize) -> Result<BasisFunction<'_>, BasisError> {
        self.check(j)?;
        Ok(match self {
            BasisKind::Fourier(b) => b.function(j),
            BasisKind::Wavelet(b) => b.function(j),
        })
    }

    pub fn eval_psi(&self, j: usize, theta: f64) -> Result<f64, BasisError> {
        self.eval_pair(j, theta).map(|p| p.0)
    }

    pub fn eval_dpsi(&self, j: usize, theta: f64) -> Result<f64, BasisError> {
        self.eval_pair(j, theta).map(|p| p.1)
    }

    /// Angular support `(start, length)` in radians, `None` if global.
    pub fn angular_support(&self, j: usize) -> Option<(f64, f64)> {
        match self {
            BasisKind::Fourier(_) => None,
            BasisKind::Wavelet(b) => {
                let (level, k) = WaveletBasis::level_shift(j)?;
                let period = (1usize << level) as f64;
                let len = b.table.support() as f64 / period;
                (len < 1.0).then(|| (TAU * k as f64 / period, TAU * len))
            }
        }
    }

    /// Grid maxima `(sup Σ_j |ψ_j|, sup Σ_j |ψ'_j|)` over `n` uniform angles.
    pub fn grid_sums(&self, n: usize) -> (f64, f64) {
        let mut best = (0.0f64, 0.0f64);
        for i in 0..n {
            let theta = TAU * i as f64 / n as f64;
            let (v, d) = self.abs_sums_at(theta);
            best.0 = best.0.max(v);
            best.1 = best.1.max(d);
        }
        best
    }

    /// `(Σ_j |ψ_j(θ)|, Σ_j |ψ'_j(θ)|)`.
    pub fn abs_sums_at(&self, theta: f64) -> (f64, f64) {
        match self {
            BasisKind::Fourier(b) => (1..=b.truncation).fold((0.0, 0.0), |acc, j| {
                let (v, d) = b.pair(j, theta);
                (acc.0 + v.abs(), acc.1 + d.abs())
            }),
            BasisKind::Wavelet(b) => {
                let t = (theta / TAU).rem_euclid(1.0);
                let support = b.table.support();
                let (mut sv, mut sd) = (b.pair(1, theta).0.abs(), 0.0);
                for level in 0..=b.max_level {
                    let count = 1usize << level;
                    let first = 1 + count;
                    let mut add = |k: usize| {
                        let (v, d) = b.pair(first + k, theta);
                        sv += v.abs();
                        sd += d.abs();
                    };
                    if count <= 2 * support {
                        (0..count).for_each(&mut add);
                    } else {
                        let top = (count as f64 * t).floor() as i64;
                        for i in 0..=support as i64 {
                            add((top - i).rem_euclid(count as i64) as usize);
                        }
                    }
                }
                (sv, sd)
            }
        }
    }

    /// Rescales so that the grid maximum of `Σ_j |ψ_j|` equals `ϑ·r₀⁻`.
    pub fn rescale_to_theta(&self, theta: f64) -> Result<BasisKind, BasisError> {
        check_theta(theta)?;
        Ok(match self {
            BasisKind::Fourier(b) => {
                let unit = BasisKind::Fourier(FourierBasis { scale: 1.0, ..b.clone() });
                let s = unit.grid_sums(DEFAULT_GRID).0;
                BasisKind::Fourier(FourierBasis { scale: theta * b.r0_min / s, ..b.clone() })
            }
            BasisKind::Wavelet(b) => {
                let unit = BasisKind::Wavelet(WaveletBasis { theta: 1.0, correction: 1.0, ..b.clone() });
                let s = unit.grid_sums(DEFAULT_GRID).0;
                BasisKind::Wavelet(WaveletBasis { theta, correction: b.r0_min / s, ..b.clone() })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn db4() -> Arc<CascadeTable> {
        Arc::new(CascadeTable::new("db4", 12).unwrap())
    }

    fn wavelets(alpha: f64, theta: f64, max_level: u32) -> BasisKind {
        BasisKind::Wavelet(WaveletBasis::new(db4(), alpha, theta, 1.0, max_level).unwrap())
    }

    #[test]
    fn fourier_closed_form() {
        let b = BasisKind::Fourier(FourierBasis::new(3.0, 16, 1.0).unwrap());
        for &th in &[0.0, 0.7, 2.0, 5.5] {
            assert!((b.eval_psi(2, th).unwrap() - f64::sin(th)).abs() < 1e-15);
            assert!((b.eval_dpsi(2, th).unwrap() - f64::cos(th)).abs() < 1e-15);
            assert!((b.eval_psi(3, th).unwrap() - 2f64.powf(-3.0) * (2.0 * th).cos()).abs() < 1e-15);
        }
        assert!(b.eval_psi(17, 0.0).is_err());
        assert!(b.eval_psi(0, 0.0).is_err());
    }

    #[test]
    fn fourier_decay_ratio_is_constant() {
        let b = FourierBasis::new(2.5, 64, 1.0).unwrap();
        let basis = BasisKind::Fourier(b);
        let ratios: Vec<f64> = (1..=64)
            .map(|j| {
                let max = (0..4096).map(|i| basis.eval_psi(j, TAU * i as f64 / 4096.0).unwrap().abs()).fold(0.0, f64::max);
                max / (j.div_ceil(2) as f64).powf(-2.5)
            })
            .collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-10, "{r}");
        }
    }

    #[test]
    fn index_map_is_level_major() {
        assert_eq!(WaveletBasis::level_shift(1), None);
        assert_eq!(WaveletBasis::level_shift(2), Some((0, 0)));
        assert_eq!(WaveletBasis::level_shift(3), Some((1, 0)));
        assert_eq!(WaveletBasis::level_shift(4), Some((1, 1)));
        assert_eq!(WaveletBasis::level_shift(5), Some((2, 0)));
        assert_eq!(WaveletBasis::level_shift(9), Some((3, 0)));
        assert_eq!(wavelets(3.0, 0.05, 4).len(), 32);
    }

    #[test]
    fn wavelet_support_periodicity_and_amplitude() {
        let basis = wavelets(3.0, 0.05, 6);
        let BasisKind::Wavelet(w) = &basis else { unreachable!() };
        // Level 4, shift 3: support t ∈ [3/16, 10/16].
        let j = 1 + 16 + 3;
        assert_eq!(basis.eval_psi(j, TAU * 0.1).unwrap(), 0.0);
        assert_eq!(basis.eval_psi(j, TAU * 0.7).unwrap(), 0.0);
        let (start, len) = basis.angular_support(j).unwrap();
        assert!((start - TAU * 3.0 / 16.0).abs() < 1e-12 && (len - TAU * 7.0 / 16.0).abs() < 1e-12);
        for &th in &[0.3, 1.7, 4.0] {
            let (a, b) = (basis.eval_psi(j, th).unwrap(), basis.eval_psi(j, th + TAU).unwrap());
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
        // Without wrap-around the level maximum is the prefactor times max|Ψ|.
        let max_psi = w.table().psi_samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let n = 1 << 15;
        let max = (0..n).map(|i| basis.eval_psi(j, TAU * i as f64 / n as f64).unwrap().abs()).fold(0.0, f64::max);
        let expected = 0.05 / w.m_const() * (1.0 - 2f64.powf(-3.0)) * 2f64.powf(-12.0) * max_psi;
        assert!((max - expected).abs() <= 1e-3 * expected, "{max} vs {expected}");
        for level in 0..6 {
            assert_eq!(w.amplitude(level + 1) / w.amplitude(level), 2f64.powf(-3.0));
        }
    }

    #[test]
    fn wavelet_derivative_matches_finite_differences() {
        // Ψ' is only Hölder continuous, so the error is measured against the
        // sup norm of ψ'_j rather than the local value.
        let basis = wavelets(2.5, 0.05, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let j = rng.gen_range(1..=basis.len());
            let th = rng.gen_range(0.0..TAU);
            let level = basis.level(j);
            // 1.5 cascade cells, offset from the stencil behind the table.
            let h = 1.5 * TAU / 4096.0 / (1u64 << level) as f64;
            let d = basis.eval_dpsi(j, th).unwrap();
            let fd = (basis.eval_psi(j, th + h).unwrap() - basis.eval_psi(j, th - h).unwrap()) / (2.0 * h);
            let sup = basis.dpsi_sup(j);
            worst = worst.max((fd - d).abs() / sup);
        }
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn wavelet_derivative_integrates_to_zero() {
        let basis = wavelets(3.0, 0.05, 5);
        let n = 1 << 14;
        for j in [1, 2, 3, 7, 20, 63] {
            let s: f64 = (0..n).map(|i| basis.eval_dpsi(j, TAU * i as f64 / n as f64).unwrap()).sum::<f64>() * TAU / n as f64;
            assert!(s.abs() < 1e-6, "j={j}: {s}");
        }
    }

    #[test]
    fn rescaling_hits_theta_and_is_idempotent() {
        for basis in [wavelets(3.0, 0.2, 7), BasisKind::Fourier(FourierBasis::new(3.0, 128, 1.0).unwrap())] {
            let r = basis.rescale_to_theta(0.05).unwrap();
            let total = r.grid_sums(DEFAULT_GRID).0;
            assert!((0.0495..=0.0505).contains(&total), "{total}");
            let again = r.rescale_to_theta(0.05).unwrap();
            let doubled = r.rescale_to_theta(0.1).unwrap();
            for j in [1, 2, 5, 40] {
                for &th in &[0.1, 2.2, 6.0] {
                    let a = r.eval_psi(j, th).unwrap();
                    assert!((again.eval_psi(j, th).unwrap() - a).abs() <= 1e-12 * a.abs().max(1e-300));
                    assert_eq!(doubled.eval_psi(j, th).unwrap(), 2.0 * a);
                }
            }
        }
        assert!(wavelets(3.0, 0.05, 3).rescale_to_theta(1.0).is_err());
        assert!(wavelets(3.0, 0.05, 3).rescale_to_theta(0.0).is_err());
    }

    #[test]
    fn pointwise_summability_after_rescaling() {
        let alpha = 2.5;
        let basis = wavelets(alpha, 0.05, 8).rescale_to_theta(0.05).unwrap();
        let BasisKind::Wavelet(w) = &basis else { unreachable!() };
        let m_d = shift_sum_max(w.table(), w.table().dpsi_samples());
        let bound_d = 0.05 * (m_d / w.m_const()) * (1.0 - 2f64.powf(-alpha)) / (1.0 - 2f64.powf(-(alpha - 1.0)));
        for i in 0..4096 {
            let (v, d) = basis.abs_sums_at(TAU * i as f64 / 4096.0);
            assert!(v <= 0.05 * (1.0 + 1e-3));
            assert!(d <= bound_d * (1.0 + 1e-2), "{d} vs {bound_d}");
        }
    }

    #[test]
    fn alpha_below_two_is_rejected() {
        let err = FourierBasis::new(1.5, 8, 1.0).unwrap_err();
        assert!(err.to_string().contains("alpha must exceed 2"));
        assert!(WaveletBasis::new(db4(), 1.5, 0.05, 1.0, 3).is_err());
    }

    #[test]
    fn fast_sums_match_brute_force() {
        let basis = wavelets(2.0, 0.05, 6);
        for &th in &[0.0, 0.37, 3.3, 6.1] {
            let brute = (1..=basis.len()).fold((0.0, 0.0), |acc, j| {
                let (v, d) = basis.eval_pair(j, th).unwrap();
                (acc.0 + v.abs(), acc.1 + d.abs())
            });
            let fast = basis.abs_sums_at(th);
            assert!((brute.0 - fast.0).abs() < 1e-15 && (brute.1 - fast.1).abs() < 1e-13);
        }
    }

    impl BasisKind {
        fn dpsi_sup(&self, j: usize) -> f64 {
            let n = 1 << 14;
            (0..n).map(|i| self.eval_dpsi(j, TAU * i as f64 / n as f64).unwrap().abs()).fold(0.0, f64::max)
        }
    }
}
