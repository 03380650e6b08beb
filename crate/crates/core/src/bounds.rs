//! Constants of the summability theory: mollifier and wavelet constants,
//! `g_A`, the weight sequence `ρ_λ`, `K_T`, feasibility and predicted rates.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::boundary_basis::{shift_sum_max, BasisFamily, BasisKind, CascadeTable};
use crate::mapping::{Mapping, MappingError, MappingKind, SigmaBounds};
use crate::multiindex::MultiIndex;
use crate::scalar::Real;

/// First zero of the Bessel function `J₀`.
pub const BESSEL_J0_FIRST_ZERO: f64 = 2.404_825_557_695_773;

/// Poincaré constant `1/j₀,₁` of the unit disk.
pub const POINCARE_UNIT_DISK: f64 = 1.0 / BESSEL_J0_FIRST_ZERO;

/// Bisection tolerance for `g_A^{-1}`.
pub const INVERSE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BoundsError {
    #[error("invalid radii: need 0 < r0_min <= r0_max and L >= 0, got ({r0_min}, {r0_max}, {lipschitz})")]
    Radii { r0_min: f64, r0_max: f64, lipschitz: f64 },
    #[error("g_A requires 0 <= K < 1, got {0}")]
    KOutOfRange(f64),
    #[error("C_a_tilde must be non-negative, got {0}")]
    NegativeConstant(f64),
    #[error("g_A^-1 needs a non-negative argument, got {0}")]
    InverseArgument(f64),
    #[error("beta must be below alpha ({alpha}), got {beta}")]
    Beta { alpha: f64, beta: f64 },
    #[error("theory input invalid: {0}")]
    Input(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierConstants<T> {
    pub chi_bar_1: T,
    pub chi_bar_2: T,
}

/// `χ̄₁ = (4/(3r⁻))·sqrt(1 + L²/r⁻² + (1 − r⁻/(4r⁺))²)`,
/// `χ̄₂ = (4/(3r⁻))·(1 − r⁻/(4r⁺))`.
pub fn mollifier_constants<T: Real>(r0_min: T, r0_max: T, lipschitz: T) -> Result<MollifierConstants<T>, BoundsError> {
    let ok = r0_min > T::zero() && r0_max >= r0_min && lipschitz >= T::zero() && r0_max.is_finite() && lipschitz.is_finite();
    if !ok {
        return Err(BoundsError::Radii {
            r0_min: r0_min.to_f64().unwrap_or(f64::NAN),
            r0_max: r0_max.to_f64().unwrap_or(f64::NAN),
            lipschitz: lipschitz.to_f64().unwrap_or(f64::NAN),
        });
    }
    let pre = T::lit(4.0) / (T::lit(3.0) * r0_min);
    let tail = T::one() - r0_min / (T::lit(4.0) * r0_max);
    let slope = lipschitz / r0_min;
    Ok(MollifierConstants { chi_bar_1: pre * (T::one() + slope * slope + tail * tail).sqrt(), chi_bar_2: pre * tail })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletConstants {
    pub m: f64,
    pub m_d: f64,
    pub m_h: f64,
    pub m_dh: f64,
}

/// Length, in units of the support, of the zero-padded window used for the
/// Hilbert transform.
const HILBERT_PADDING: usize = 32;

/// `M`, `M_d` from shifted sums of `|Ψ|`, `|Ψ'|`; `M_H`, `M_dH` from shifted
/// sums of the instantaneous amplitudes.
pub fn wavelet_constants(table: &CascadeTable) -> WaveletConstants {
    let per = table.samples_per_unit();
    let units = (HILBERT_PADDING * table.support()).next_power_of_two();
    let amplitude_sum = |samples: &[f64]| {
        let amp = analytic_amplitude(samples, units * per);
        (0..per).map(|i| (0..units).map(|k| amp[i + k * per]).sum::<f64>()).fold(0.0, f64::max)
    };
    WaveletConstants {
        m: shift_sum_max(table, table.psi_samples()),
        m_d: shift_sum_max(table, table.dpsi_samples()),
        m_h: amplitude_sum(table.psi_samples()),
        m_dh: amplitude_sum(table.dpsi_samples()),
    }
}

/// `|f + iH(f)|` of `samples` zero-padded to `len` points, via the FFT.
pub fn analytic_amplitude(samples: &[f64], len: usize) -> Vec<f64> {
    assert!(len >= samples.len());
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(len, Complex64::new(0.0, 0.0));
    planner.plan_fft_forward(len).process(&mut buf);
    let half = len / 2;
    for (k, c) in buf.iter_mut().enumerate() {
        let w = if k == 0 || (len % 2 == 0 && k == half) {
            1.0
        } else if k < half || (len % 2 == 1 && k == half) {
            2.0
        } else {
            0.0
        };
        *c *= w / len as f64;
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf.iter().map(|c| c.norm()).collect()
}

/// `g_A(K) = C̃_a((1 − K)^{−4} − 1)`.
pub fn g_a<T: Real>(c_a_tilde: T, k: T) -> Result<T, BoundsError> {
    if c_a_tilde < T::zero() {
        return Err(BoundsError::NegativeConstant(c_a_tilde.to_f64().unwrap_or(f64::NAN)));
    }
    if !(k >= T::zero() && k < T::one()) {
        return Err(BoundsError::KOutOfRange(k.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(c_a_tilde * ((T::one() - k).powi(-4) - T::one()))
}

/// `Σ_{n=1}^{terms} C̃_a·binom(n+3, 3)·Kⁿ`.
pub fn g_a_series<T: Real>(c_a_tilde: T, k: T, terms: u32) -> T {
    let mut acc = T::zero();
    let mut power = T::one();
    for n in 1..=terms {
        power = power * k;
        let b = T::from_u64(u64::from(n + 1) * u64::from(n + 2) * u64::from(n + 3) / 6).expect("representable");
        acc += c_a_tilde * b * power;
    }
    acc
}

/// `g_A^{-1}(y)` by bisection on `[0, 1)`. With `C̃_a = 0` every `K < 1`
/// satisfies `g_A(K) < y`, and the upper end of the interval is returned.
pub fn g_a_inverse<T: Real>(c_a_tilde: T, y: T) -> Result<T, BoundsError> {
    if !(y >= T::zero()) {
        return Err(BoundsError::InverseArgument(y.to_f64().unwrap_or(f64::NAN)));
    }
    let (mut lo, mut hi) = (T::zero(), T::one());
    let tol = T::lit(INVERSE_TOLERANCE);
    while hi - lo > tol {
        let mid = (lo + hi) / T::lit(2.0);
        if mid <= lo || mid >= hi {
            // Precision exhausted before reaching the tolerance.
            break;
        }
        if g_a(c_a_tilde, mid)? < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / T::lit(2.0))
}

/// `f_A(n) = C̃_a·(n+3)!/3!`.
pub fn f_a(c_a_tilde: f64, n: u32) -> f64 {
    c_a_tilde * (4..=n + 3).map(f64::from).product::<f64>()
}

/// `f_F(n) = C̃_f·n!`.
pub fn f_f(c_f_tilde: f64, n: u32) -> f64 {
    c_f_tilde * (1..=n).map(f64::from).product::<f64>()
}

/// `Σ_{ν₁+…+ν_N=μ} (μ!/Πν_i!)·Π|ν_i|!` by enumeration.
pub fn multinomial_sum_oracle(mu: &MultiIndex, n: usize) -> u64 {
    assert!(n >= 1, "need at least one part");
    let exps: Vec<u32> = mu.entries().iter().map(|&(_, e)| e).collect();
    let mu_fact: u64 = exps.iter().map(|&e| factorial(e)).product();
    // parts[i][d]: exponent of dimension d in part i.
    let mut parts = vec![vec![0u32; exps.len()]; n];
    let mut total = 0u64;
    enumerate_splits(&exps, 0, &mut parts, &mut |parts| {
        let denom: u64 = parts.iter().flatten().map(|&e| factorial(e)).product();
        let orders: u64 = parts.iter().map(|p| factorial(p.iter().sum())).product();
        total += mu_fact / denom * orders;
    });
    total
}

/// `(|μ| + N − 1)!/(N − 1)!`.
pub fn multinomial_sum_closed_form(mu: &MultiIndex, n: usize) -> u64 {
    (n as u64..n as u64 + u64::from(mu.order())).product()
}

fn factorial(n: u32) -> u64 {
    (1..=u64::from(n)).product()
}

fn enumerate_splits(exps: &[u32], dim: usize, parts: &mut Vec<Vec<u32>>, visit: &mut dyn FnMut(&[Vec<u32>])) {
    if dim == exps.len() {
        visit(parts);
        return;
    }
    compositions(exps[dim], 0, dim, exps, parts, visit);
}

fn compositions(left: u32, part: usize, dim: usize, exps: &[u32], parts: &mut Vec<Vec<u32>>, visit: &mut dyn FnMut(&[Vec<u32>])) {
    if part + 1 == parts.len() {
        parts[part][dim] = left;
        enumerate_splits(exps, dim + 1, parts, visit);
        return;
    }
    for take in 0..=left {
        parts[part][dim] = take;
        compositions(left - take, part + 1, dim, exps, parts, visit);
    }
}

/// `b_j(x) = |Φ_j(x)| + √2·|D_xΦ_j(x)|₂,₂`.
pub fn pointwise_b(mapping: &Mapping, j: usize, x: [f64; 2]) -> Result<f64, MappingError> {
    let d = mapping.displacement(j, x)?;
    Ok(d.value[0].hypot(d.value[1]) + SQRT_2 * d.jacobian.norm2())
}

/// `ρ_λ = 1 + 𝓑(1 − 2^{β−α})2^{(β−1)|λ|}/(1 − 2^{−α})`.
pub fn rho_wavelet<T: Real>(b_param: T, alpha: T, beta: T, level: u32) -> T {
    let two = T::lit(2.0);
    T::one() + b_param * (T::one() - two.powf(beta - alpha)) * two.powf((beta - T::one()) * T::from_u32(level).expect("level")) / (T::one() - two.powf(-alpha))
}

/// `(1 − 2^{−α})/(1 − 2^{−(α−1)})`, the level-sum factor of `Σ|ψ'_λ|`.
pub fn derivative_level_factor<T: Real>(alpha: T) -> T {
    let two = T::lit(2.0);
    (T::one() - two.powf(-alpha)) / (T::one() - two.powf(T::one() - alpha))
}

/// Everything the theory report needs besides the closed forms.
#[derive(Debug, Clone)]
pub struct TheoryInput {
    pub mapping: MappingKind,
    pub basis: Arc<BasisKind>,
    pub theta: f64,
    pub beta: f64,
    pub r0_min: f64,
    pub r0_max: f64,
    pub lipschitz: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub c_a_tilde: f64,
    pub sigma: SigmaBounds,
    /// Required for wavelet bases.
    pub wavelet: Option<WaveletConstants>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feasibility {
    pub b_positive: bool,
    pub k_t_below_rho: bool,
    pub g_a_below_a_min: bool,
}

impl Feasibility {
    pub fn all(&self) -> bool {
        self.b_positive && self.k_t_below_rho && self.g_a_below_a_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub mapping: MappingKind,
    pub family: BasisFamily,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    #[serde(rename = "K_T")]
    pub k_t: f64,
    #[serde(rename = "B_param")]
    pub b_param: f64,
    /// `𝓑_M` or `𝓑_H` exactly as displayed, for comparison with `b_param`.
    #[serde(rename = "B_param_displayed")]
    pub b_param_displayed: Option<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_empirical: bool,
    pub a_min: f64,
    pub a_max: f64,
    pub c_a_tilde: f64,
    pub g_a_inverse: f64,
    #[serde(rename = "g_A_at_KT")]
    pub g_a_at_kt: Option<f64>,
    #[serde(rename = "A_min_proxy")]
    pub a_min_proxy: f64,
    pub rho_a: f64,
    pub rho_f: f64,
    pub chi_bar: Option<MollifierConstants<f64>>,
    pub wavelet: Option<WaveletConstants>,
    pub feasible: Feasibility,
    /// Whether `α > 2` holds; `α = 2` is admitted for experiments only.
    pub alpha_in_hypothesis: bool,
    pub predicted_rate: Option<f64>,
    pub poincare_constant: Option<f64>,
}

impl TheoryReport {
    /// `ρ_j` for basis index `j`: the level-based `ρ_λ` for wavelets,
    /// 1 for Fourier bases.
    pub fn rho(&self, basis: &BasisKind, j: usize) -> f64 {
        match self.family {
            BasisFamily::Wavelet => rho_wavelet(self.b_param.max(0.0), self.alpha, self.beta, basis.level(j)),
            BasisFamily::Fourier => 1.0,
        }
    }
}

/// Coefficients `(c₁, c₂)` of `K_T = r⁻ϑ(c₁ + 𝓑c₂)` and the displayed
/// `𝓑` where one exists.
struct KtShape {
    c1: f64,
    c2: f64,
    displayed: Option<f64>,
}

pub fn theory_report(input: &TheoryInput) -> Result<TheoryReport, BoundsError> {
    let alpha = input.basis.alpha();
    let family = input.basis.family();
    if !(input.beta < alpha) {
        return Err(BoundsError::Beta { alpha, beta: input.beta });
    }
    if !(input.theta > 0.0 && input.theta < 1.0) {
        return Err(BoundsError::Input(format!("theta must lie in (0, 1), got {}", input.theta)));
    }
    if !(input.a_min > 0.0 && input.a_max >= input.a_min) {
        return Err(BoundsError::Input(format!("need 0 < a_min <= a_max, got ({}, {})", input.a_min, input.a_max)));
    }
    let wavelet = match family {
        BasisFamily::Wavelet => Some(input.wavelet.ok_or_else(|| BoundsError::Input("wavelet constants missing".into()))?),
        BasisFamily::Fourier => None,
    };
    let scale = input.r0_min * input.theta;
    let a_min_proxy = input.a_min * input.sigma.sigma_min.powi(4);
    let g_inv = g_a_inverse(input.c_a_tilde, a_min_proxy)?;
    let q = derivative_level_factor(alpha);

    let (chi, shape) = match input.mapping {
        MappingKind::Mollifier => {
            let chi = mollifier_constants(input.r0_min, input.r0_max, input.lipschitz)?;
            let (c1, c2, displayed) = match wavelet {
                Some(w) => {
                    let ratio = w.m_d / w.m;
                    let c2 = 1.0 + SQRT_2 * chi.chi_bar_1 + SQRT_2 * chi.chi_bar_2 * ratio;
                    let c1 = 1.0 + SQRT_2 * chi.chi_bar_1 + SQRT_2 * chi.chi_bar_2 * ratio * q;
                    (c1, c2, Some(g_inv / (c2 * scale) - 1.0))
                }
                None => {
                    let d = input.basis.grid_sums(crate::boundary_basis::DEFAULT_GRID).1 / scale;
                    let c = 1.0 + SQRT_2 * chi.chi_bar_1 + SQRT_2 * chi.chi_bar_2 * d;
                    (c, 0.0, None)
                }
            };
            (Some(chi), KtShape { c1, c2, displayed })
        }
        MappingKind::Harmonic => {
            let r0 = input.r0_min;
            let c_d = 4.0 * SQRT_2 * (1.0f64).max(1.0 / r0);
            let c_a = c_d + 1.0;
            match wavelet {
                Some(w) => {
                    let ratio = w.m_dh / w.m_h;
                    let big = 4.0 * SQRT_2 * (1.0f64).max(r0);
                    let displayed = (g_inv / input.theta - big - (big + r0) * ratio * q) / (big * (1.0 + ratio) + r0);
                    (None, KtShape { c1: c_a + c_d * ratio * q, c2: c_a + c_d * ratio, displayed: Some(displayed) })
                }
                None => {
                    let (amp, damp) = fourier_amplitude_sums(&input.basis);
                    (None, KtShape { c1: (c_a * amp + c_d * damp) / scale, c2: 0.0, displayed: None })
                }
            }
        }
    };

    // 𝓑 is chosen so that the ρ-independent part c₁ fixes the admissible
    // level: K_T = r⁻ϑ(c₁ + 𝓑c₂) < r⁻ϑc₁(1 + 𝓑) = g_A^{-1}(A_min) when c₂ < c₁.
    let b_param = g_inv / (shape.c1 * scale) - 1.0;
    let k_t = scale * (shape.c1 + b_param.max(0.0) * shape.c2);
    let rho_a = 1.0f64;
    let rho_f = 1.0f64;
    let g_at = g_a(input.c_a_tilde, k_t).ok();
    let feasible = Feasibility {
        b_positive: b_param > 0.0,
        k_t_below_rho: k_t < (rho_a * rho_f).min(rho_a),
        g_a_below_a_min: g_at.is_some_and(|g| g < a_min_proxy),
    };
    let predicted = match family {
        BasisFamily::Wavelet => alpha - 0.5,
        BasisFamily::Fourier => alpha - 1.0,
    };
    let circle = input.r0_min == input.r0_max;
    Ok(TheoryReport {
        mapping: input.mapping,
        family,
        alpha,
        beta: input.beta,
        theta: input.theta,
        k_t,
        b_param,
        b_param_displayed: shape.displayed,
        sigma_min: input.sigma.sigma_min,
        sigma_max: input.sigma.sigma_max,
        sigma_empirical: true,
        a_min: input.a_min,
        a_max: input.a_max,
        c_a_tilde: input.c_a_tilde,
        g_a_inverse: g_inv,
        g_a_at_kt: g_at,
        a_min_proxy,
        rho_a,
        rho_f,
        chi_bar: chi,
        wavelet,
        feasible,
        alpha_in_hypothesis: alpha > 2.0,
        predicted_rate: feasible.all().then_some(predicted),
        poincare_constant: circle.then_some(POINCARE_UNIT_DISK * input.r0_min),
    })
}

/// `(Σ_j A(ψ_j), Σ_j A(ψ'_j))` for a Fourier basis; the amplitude of a
/// single mode is constant in θ.
fn fourier_amplitude_sums(basis: &BasisKind) -> (f64, f64) {
    (1..=basis.len()).fold((0.0, 0.0), |acc, j| {
        let (v0, d0) = basis.eval_pair(j, 0.0).expect("valid index");
        let (v1, d1) = basis.eval_pair(j, std::f64::consts::FRAC_PI_2 / ((j + 1) / 2) as f64).expect("valid index");
        (acc.0 + v0.hypot(v1), acc.1 + d0.hypot(d1))
    })
}

/// `sup_x Σ_j ρ_j b_j(x)` over `points`.
pub fn weighted_b_sup(mapping: &Mapping, rho: &[f64], points: &[[f64; 2]]) -> Result<f64, MappingError> {
    let mut best = 0.0f64;
    for &x in points {
        let mut acc = 0.0;
        for (j, &r) in rho.iter().enumerate() {
            acc += r * pointwise_b(mapping, j + 1, x)?;
        }
        best = best.max(acc);
    }
    Ok(best)
}

/// `Σ_{|μ|≤k} ρ^{2μ}‖t_μ‖²` for `k = 0..=max_order`.
pub fn weighted_partial_sums(norms: &[(MultiIndex, f64)], rho: impl Fn(u32) -> f64, max_order: u32) -> Vec<f64> {
    let mut by_order = vec![0.0; max_order as usize + 1];
    for (mu, norm) in norms {
        if mu.order() <= max_order {
            let w: f64 = mu.entries().iter().map(|&(j, e)| rho(j).powi(2 * e as i32)).product();
            by_order[mu.order() as usize] += w * norm * norm;
        }
    }
    by_order
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}
