//! Decay-rate estimation from coefficient norms.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Norms below this are treated as exact zeros.
pub const ZERO_THRESHOLD: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("cannot rearrange an empty collection of norms")]
    Empty,
    #[error("norm at position {0} is negative or not finite")]
    InvalidNorm(usize),
    #[error("series of length {len} too short for head_skip {head_skip} (needs at least {needed})")]
    TooShort { len: usize, head_skip: usize, needed: usize },
    #[error("sample_count must be at least 2, got {0}")]
    SampleCount(usize),
    #[error("degenerate rank window: fewer than two distinct sample ranks")]
    DegenerateWindow,
    #[error("zero norm at rank {0} inside the fit window")]
    ZeroInWindow(usize),
}

/// Norms sorted non-increasingly; `t_star[0]` is rank 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DecaySeries<T> {
    t_star: Vec<T>,
}

impl<T: Real> DecaySeries<T> {
    pub fn t_star(&self) -> &[T] {
        &self.t_star
    }

    pub fn len(&self) -> usize {
        self.t_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_star.is_empty()
    }

    /// `t*_n` for 1-based `n`.
    pub fn at(&self, n: usize) -> T {
        self.t_star[n - 1]
    }

    pub fn scaled(&self, c: T) -> Self {
        Self { t_star: self.t_star.iter().map(|&v| v * c).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub head_skip: usize,
    pub sample_count: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { head_skip: 10, sample_count: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit<T> {
    pub s: T,
    pub intercept: T,
    pub n_range: (usize, usize),
    pub sample_ranks: Vec<usize>,
    pub residual: T,
    /// Ranks outside the window whose norm was below [`ZERO_THRESHOLD`].
    pub zero_ranks_excluded: Vec<usize>,
}

impl<T: Real> RateFit<T> {
    /// `exp(intercept)·n^{−s}`.
    pub fn fitted(&self, n: usize) -> T {
        (self.intercept - self.s * T::from_usize_lossy(n).ln()).exp()
    }
}

pub fn rearrange<T: Real>(norms: &[T]) -> Result<DecaySeries<T>, AnalysisError> {
    if norms.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if let Some(k) = norms.iter().position(|v| !v.is_finite() || *v < T::zero()) {
        return Err(AnalysisError::InvalidNorm(k));
    }
    let mut t_star = norms.to_vec();
    // `sort_by` is stable.
    t_star.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    Ok(DecaySeries { t_star })
}

/// Geometric ranks `round(exp(linspace(log(head_skip+1), log(N/2), count)))`,
/// deduplicated.
pub fn sample_ranks(len: usize, head_skip: usize, count: usize) -> Vec<usize> {
    let lo = ((head_skip + 1) as f64).ln();
    let hi = (len as f64 / 2.0).ln();
    let last = len / 2;
    let mut ranks: Vec<usize> = (0..count)
        .map(|i| {
            let t = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
            ((lo + (hi - lo) * t).exp().round() as usize).clamp(head_skip + 1, last)
        })
        .collect();
    ranks.dedup();
    ranks
}

pub fn fit_rate<T: Real>(series: &DecaySeries<T>, config: &FitConfig) -> Result<RateFit<T>, AnalysisError> {
    let n = series.len();
    let needed = 4 * (config.head_skip + 2);
    if n < needed {
        return Err(AnalysisError::TooShort { len: n, head_skip: config.head_skip, needed });
    }
    if config.sample_count < 2 {
        return Err(AnalysisError::SampleCount(config.sample_count));
    }
    let ranks = sample_ranks(n, config.head_skip, config.sample_count);
    if ranks.len() < 2 {
        return Err(AnalysisError::DegenerateWindow);
    }
    let zero = T::lit(ZERO_THRESHOLD);
    let last = n / 2;
    if let Some(r) = (config.head_skip + 1..=last).find(|&r| series.at(r) < zero) {
        return Err(AnalysisError::ZeroInWindow(r));
    }
    let zero_ranks_excluded: Vec<usize> = (1..=n).filter(|&r| series.at(r) < zero).collect();

    let xs: Vec<T> = ranks.iter().map(|&r| T::from_usize_lossy(r).ln()).collect();
    let ys: Vec<T> = ranks.iter().map(|&r| series.at(r).ln()).collect();
    let m = T::from_usize_lossy(xs.len());
    let mx = xs.iter().fold(T::zero(), |a, &b| a + b) / m;
    let my = ys.iter().fold(T::zero(), |a, &b| a + b) / m;
    let (mut sxy, mut sxx) = (T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sq = xs.iter().zip(&ys).fold(T::zero(), |a, (&x, &y)| {
        let e = y - (intercept + slope * x);
        a + e * e
    });
    Ok(RateFit {
        s: -slope,
        intercept,
        n_range: (ranks[0], *ranks.last().expect("nonempty")),
        sample_ranks: ranks,
        residual: (sq / m).sqrt(),
        zero_ranks_excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(n: usize, f: impl Fn(usize) -> f64) -> DecaySeries<f64> {
        rearrange(&(1..=n).map(f).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rearrange_sorts_descending() {
        assert_eq!(rearrange(&[0.5, 0.1, 0.9]).unwrap().t_star(), &[0.9, 0.5, 0.1]);
        assert_eq!(rearrange(&[3.0, 2.0, 2.0, 1.0]).unwrap().t_star(), &[3.0, 2.0, 2.0, 1.0]);
        assert_eq!(rearrange::<f64>(&[]), Err(AnalysisError::Empty));
        assert_eq!(rearrange(&[1.0, f64::NAN]), Err(AnalysisError::InvalidNorm(1)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
        let s = rearrange(&v).unwrap();
        assert_eq!(s.len(), 1000);
        assert!(s.t_star().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn exact_power_laws() {
        for head in [0, 3, 10] {
            let fit = fit_rate(&series(500, |n| (n as f64).powi(-2)), &FitConfig { head_skip: head, sample_count: 40 }).unwrap();
            assert!((fit.s - 2.0).abs() < 1e-10);
        }
        let fit = fit_rate(&series(400, |n| 3.0 * (n as f64).powf(-1.5)), &FitConfig::default()).unwrap();
        assert!((fit.s - 1.5).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.residual <= 1e-12);
    }

    #[test]
    fn staircase_rate() {
        let fit = fit_rate(&series(1000, |n| 2f64.powi(-((n as f64).log2().floor() as i32))), &FitConfig::default()).unwrap();
        assert!((fit.s - 1.0).abs() <= 0.1, "{}", fit.s);
    }

    #[test]
    fn window_and_errors() {
        let ranks = sample_ranks(1000, 10, 40);
        assert!(ranks.iter().all(|&r| r > 10 && r <= 500));
        assert!(ranks.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ranks[0], 11);
        assert_eq!(*ranks.last().unwrap(), 500);

        let short = series(40, |n| 1.0 / n as f64);
        assert!(matches!(fit_rate(&short, &FitConfig::default()), Err(AnalysisError::TooShort { .. })));
        let holes = series(100, |n| if n > 30 { 0.0 } else { 1.0 / n as f64 });
        assert_eq!(fit_rate(&holes, &FitConfig::default()), Err(AnalysisError::ZeroInWindow(31)));
        let tail = series(100, |n| if n > 90 { 0.0 } else { 1.0 / n as f64 });
        let fit = fit_rate(&tail, &FitConfig::default()).unwrap();
        assert_eq!(fit.zero_ranks_excluded, (91..=100).collect::<Vec<_>>());
        assert!((fit.s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for s0 in [0.8, 1.5, 2.5] {
            let v: Vec<f64> = (1..=1000).map(|n| 2.0 * (n as f64).powf(-s0) * (1.0 + rng.gen_range(-0.05..0.05))).collect();
            let fit = fit_rate(&rearrange(&v).unwrap(), &FitConfig::default()).unwrap();
            assert!((fit.s - s0).abs() < 0.1);
        }
    }

    #[test]
    fn generic_f32() {
        let v: Vec<f32> = (1..=200).map(|n| (n as f32).powi(-2)).collect();
        let fit = fit_rate(&rearrange(&v).unwrap(), &FitConfig::default()).unwrap();
        assert!((fit.s - 2.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn scale_invariance(c in 1e-6f64..1e6, s0 in 0.5f64..3.0, n in 100usize..600) {
            let base = series(n, |k| (k as f64).powf(-s0) * (1.0 + 0.1 * (k as f64).sin()));
            let a = fit_rate(&base, &FitConfig::default()).unwrap();
            let b = fit_rate(&base.scaled(c), &FitConfig::default()).unwrap();
            prop_assert!((a.s - b.s).abs() <= 1e-12 * a.s.abs().max(1.0));
            prop_assert!((b.intercept - a.intercept - c.ln()).abs() <= 1e-9);
        }
    }
}
