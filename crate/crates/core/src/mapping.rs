//! Displacement fields `Φ_j` and their Jacobians on the reference domain.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::boundary_basis::{BasisError, BasisKind};
use crate::shape_calculus::{Mat2, PointJet};

/// Slack for points produced by curved-element quadrature near the boundary.
const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MappingError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("point ({0}, {1}) lies outside the reference domain")]
    OutsideDomain(f64, f64),
    #[error("harmonic mapping requires a circular nominal radius")]
    NonCircular,
    #[error("n_fourier must be a power of two ≥ 4096, got {0}")]
    FourierSize(usize),
    #[error("mode cutoff {cutoff} exceeds n_fourier/2 − 1 = {max}")]
    ModeCutoff { cutoff: usize, max: usize },
    #[error("invalid nominal radius: {0}")]
    Radius(String),
    #[error("singular Jacobian at x = ({x0}, {x1}) for parameter sample {sample}")]
    Singular { sample: usize, x0: f64, x1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingKind {
    Mollifier,
    Harmonic,
}

/// Nominal radius `r₀(θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NominalRadius {
    Circle { radius: f64 },
    /// `mean + Σ_m cos[m−1]·cos(mθ) + sin[m−1]·sin(mθ)`.
    Trigonometric { mean: f64, cos: Vec<f64>, sin: Vec<f64> },
}

impl Default for NominalRadius {
    fn default() -> Self {
        NominalRadius::Circle { radius: 1.0 }
    }
}

impl NominalRadius {
    pub fn validate(&self) -> Result<(), MappingError> {
        match self {
            NominalRadius::Circle { radius } if !(*radius > 0.0 && radius.is_finite()) => {
                Err(MappingError::Radius(format!("radius must be positive, got {radius}")))
            }
            NominalRadius::Trigonometric { .. } if !(self.min() > 0.0) => {
                Err(MappingError::Radius("trigonometric radius must stay positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_circle(&self) -> bool {
        matches!(self, NominalRadius::Circle { .. })
    }

    /// `(r₀(θ), r₀'(θ))`.
    pub fn eval(&self, theta: f64) -> (f64, f64) {
        match self {
            NominalRadius::Circle { radius } => (*radius, 0.0),
            NominalRadius::Trigonometric { mean, cos, sin } => {
                let (mut r, mut d) = (*mean, 0.0);
                for (k, c) in cos.iter().enumerate() {
                    let m = (k + 1) as f64;
                    let (s, co) = (m * theta).sin_cos();
                    r += c * co;
                    d -= c * m * s;
                }
                for (k, b) in sin.iter().enumerate() {
                    let m = (k + 1) as f64;
                    let (s, co) = (m * theta).sin_cos();
                    r += b * s;
                    d += b * m * co;
                }
                (r, d)
            }
        }
    }

    fn grid(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = 4096;
        (0..n).map(move |i| self.eval(TAU * i as f64 / n as f64))
    }

    /// `r₀⁻`.
    pub fn min(&self) -> f64 {
        match self {
            NominalRadius::Circle { radius } => *radius,
            _ => self.grid().map(|p| p.0).fold(f64::INFINITY, f64::min),
        }
    }

    /// `r₀⁺`.
    pub fn max(&self) -> f64 {
        match self {
            NominalRadius::Circle { radius } => *radius,
            _ => self.grid().map(|p| p.0).fold(0.0, f64::max),
        }
    }

    /// Lipschitz constant `sup |r₀'|` (grid estimate).
    pub fn lipschitz(&self) -> f64 {
        match self {
            NominalRadius::Circle { .. } => 0.0,
            _ => self.grid().map(|p| p.1.abs()).fold(0.0, f64::max),
        }
    }
}

/// `Φ_j(x)` and `D_xΦ_j(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement {
    pub value: [f64; 2],
    pub jacobian: Mat2<f64>,
}

impl Displacement {
    pub fn zero() -> Self {
        Self { value: [0.0; 2], jacobian: Mat2::zero() }
    }
}

fn polar(x: [f64; 2]) -> (f64, f64) {
    let rho = x[0].hypot(x[1]);
    let theta = x[1].atan2(x[0]).rem_euclid(TAU);
    (rho, theta)
}

/// Geometric factors of the affine mollifier at one point, independent of `j`:
/// `D_xΦ_j = ψ_j(θ)·g1 + ψ'_j(θ)·g2` and `Φ_j = ψ_j(θ)·χ·x̂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifierGeometry {
    pub theta: f64,
    pub chi_xhat: [f64; 2],
    pub g1: Mat2<f64>,
    pub g2: Mat2<f64>,
}

impl MollifierGeometry {
    pub fn displacement(&self, psi: f64, dpsi: f64) -> Displacement {
        Displacement {
            value: [psi * self.chi_xhat[0], psi * self.chi_xhat[1]],
            jacobian: self.g1.scale(psi) + self.g2.scale(dpsi),
        }
    }
}

/// `Φ_j(x) = χ(x)·ψ_j(θ(x))·x/|x|` with the affine cutoff
/// `χ = (|x| − c)/(r₀(θ) − c)` beyond `c = r₀⁻/4`, zero inside.
#[derive(Debug, Clone)]
pub struct MollifierMapping {
    basis: Arc<BasisKind>,
    r0: NominalRadius,
    cutoff: f64,
}

impl MollifierMapping {
    pub fn new(basis: Arc<BasisKind>, r0: NominalRadius) -> Result<Self, MappingError> {
        r0.validate()?;
        let cutoff = r0.min() / 4.0;
        Ok(Self { basis, r0, cutoff })
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// `None` inside the cutoff disk, where every `Φ_j` vanishes.
    pub fn geometry(&self, x: [f64; 2]) -> Result<Option<MollifierGeometry>, MappingError> {
        let (rho, theta) = polar(x);
        let (r, dr) = self.r0.eval(theta);
        if rho > r * (1.0 + DOMAIN_SLACK) + DOMAIN_SLACK {
            return Err(MappingError::OutsideDomain(x[0], x[1]));
        }
        let c = self.cutoff;
        if rho <= c {
            return Ok(None);
        }
        let xhat = [x[0] / rho, x[1] / rho];
        let that = [-xhat[1], xhat[0]];
        let span = r - c;
        let chi = (rho - c) / span;
        let dchi_drho = 1.0 / span;
        let dchi_dtheta = -(rho - c) * dr / (span * span);
        let grad_chi = [
            xhat[0] * dchi_drho + that[0] * dchi_dtheta / rho,
            xhat[1] * dchi_drho + that[1] * dchi_dtheta / rho,
        ];
        let g1 = Mat2::outer(xhat, grad_chi) + Mat2::outer(that, that).scale(chi / rho);
        let g2 = Mat2::outer(xhat, that).scale(chi / rho);
        Ok(Some(MollifierGeometry { theta, chi_xhat: [chi * xhat[0], chi * xhat[1]], g1, g2 }))
    }

    pub fn displacement(&self, j: usize, x: [f64; 2]) -> Result<Displacement, MappingError> {
        let geometry = self.geometry(x)?;
        // Validate j even where the field vanishes.
        let theta = geometry.map_or(0.0, |g| g.theta);
        let (psi, dpsi) = self.basis.eval_pair(j, theta)?;
        Ok(geometry.map_or(Displacement::zero(), |g| g.displacement(psi, dpsi)))
    }
}

/// Coefficients `a_0 = c_0`, `a_n = 2c_n` of `P(z) = Σ a_n z^n`, so that
/// `Φ^κ = Re P(x/R)`.
#[derive(Debug, Clone)]
pub struct HarmonicModes {
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
}

/// Per-component harmonic extension of `(cos θ, sin θ)·ψ_j(θ)` into the disk
/// of radius `R`, by separation of variables.
pub struct HarmonicMapping {
    basis: Arc<BasisKind>,
    radius: f64,
    n_fourier: usize,
    mode_cutoff: usize,
    cache: Mutex<HashMap<usize, Arc<HarmonicModes>>>,
}

impl std::fmt::Debug for HarmonicMapping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HarmonicMapping")
            .field("radius", &self.radius)
            .field("n_fourier", &self.n_fourier)
            .field("mode_cutoff", &self.mode_cutoff)
            .finish_non_exhaustive()
    }
}

impl HarmonicMapping {
    pub fn new(
        basis: Arc<BasisKind>,
        r0: &NominalRadius,
        n_fourier: usize,
        mode_cutoff: Option<usize>,
    ) -> Result<Self, MappingError> {
        r0.validate()?;
        let NominalRadius::Circle { radius } = *r0 else {
            return Err(MappingError::NonCircular);
        };
        if !n_fourier.is_power_of_two() || n_fourier < 4096 {
            return Err(MappingError::FourierSize(n_fourier));
        }
        let max = n_fourier / 2 - 1;
        let mode_cutoff = mode_cutoff.unwrap_or(max);
        if mode_cutoff > max || mode_cutoff == 0 {
            return Err(MappingError::ModeCutoff { cutoff: mode_cutoff, max });
        }
        Ok(Self { basis, radius, n_fourier, mode_cutoff, cache: Mutex::new(HashMap::new()) })
    }

    pub fn mode_cutoff(&self) -> usize {
        self.mode_cutoff
    }

    pub fn n_fourier(&self) -> usize {
        self.n_fourier
    }

    /// Spectral coefficients of direction `j`, computed once.
    pub fn modes(&self, j: usize) -> Result<Arc<HarmonicModes>, MappingError> {
        if let Some(m) = self.cache.lock().expect("cache lock").get(&j) {
            return Ok(m.clone());
        }
        let n = self.n_fourier;
        let mut bx = Vec::with_capacity(n);
        let mut by = Vec::with_capacity(n);
        for i in 0..n {
            let theta = TAU * i as f64 / n as f64;
            let psi = self.basis.eval_psi(j, theta)?;
            let (s, c) = theta.sin_cos();
            bx.push(Complex64::new(c * psi, 0.0));
            by.push(Complex64::new(s * psi, 0.0));
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        fft.process(&mut bx);
        fft.process(&mut by);
        let scale = 1.0 / n as f64;
        let keep = |v: &[Complex64]| -> Vec<Complex64> {
            (0..=self.mode_cutoff).map(|k| v[k] * if k == 0 { scale } else { 2.0 * scale }).collect()
        };
        let modes = Arc::new(HarmonicModes { x: keep(&bx), y: keep(&by) });
        self.cache.lock().expect("cache lock").insert(j, modes.clone());
        Ok(modes)
    }

    /// Highest power needed at `|z| = r` for roundoff-level truncation.
    fn terms_needed(&self, r: f64) -> usize {
        if r <= 0.0 {
            return 1;
        }
        if r >= 1.0 {
            return self.mode_cutoff;
        }
        let n = ((1e-17f64).ln() / r.ln()).ceil() as usize + 2;
        n.clamp(1, self.mode_cutoff)
    }

    /// `(P(z), P'(z))` by Horner's rule on the truncated series.
    fn horner(coeffs: &[Complex64], z: Complex64, top: usize) -> (Complex64, Complex64) {
        let mut p = coeffs[top];
        let mut dp = Complex64::new(0.0, 0.0);
        for k in (0..top).rev() {
            dp = dp * z + p;
            p = p * z + coeffs[k];
        }
        (p, dp)
    }

    pub fn displacement(&self, j: usize, x: [f64; 2]) -> Result<Displacement, MappingError> {
        let modes = self.modes(j)?;
        self.displacement_from(&modes, x)
    }

    pub fn displacement_from(&self, modes: &HarmonicModes, x: [f64; 2]) -> Result<Displacement, MappingError> {
        let z = Complex64::new(x[0], x[1]) / self.radius;
        let r = z.norm();
        if r > 1.0 + DOMAIN_SLACK {
            return Err(MappingError::OutsideDomain(x[0], x[1]));
        }
        let top = self.terms_needed(r);
        let (px, dpx) = Self::horner(&modes.x, z, top);
        let (py, dpy) = Self::horner(&modes.y, z, top);
        let inv_r = 1.0 / self.radius;
        Ok(Displacement {
            value: [px.re, py.re],
            jacobian: Mat2::new(dpx.re * inv_r, -dpx.im * inv_r, dpy.re * inv_r, -dpy.im * inv_r),
        })
    }
}

#[derive(Debug, Clone)]
pub enum Mapping {
    Mollifier(MollifierMapping),
    Harmonic(Arc<HarmonicMapping>),
}

impl Mapping {
    pub fn kind(&self) -> MappingKind {
        match self {
            Mapping::Mollifier(_) => MappingKind::Mollifier,
            Mapping::Harmonic(_) => MappingKind::Harmonic,
        }
    }

    pub fn basis(&self) -> &Arc<BasisKind> {
        match self {
            Mapping::Mollifier(m) => &m.basis,
            Mapping::Harmonic(m) => &m.basis,
        }
    }

    pub fn displacement(&self, j: usize, x: [f64; 2]) -> Result<Displacement, MappingError> {
        match self {
            Mapping::Mollifier(m) => m.displacement(j, x),
            Mapping::Harmonic(m) => m.displacement(j, x),
        }
    }

    /// Jet with `Φ_j`, `D_xΦ_j` for each requested direction.
    pub fn jet(&self, dirs: &[u32], x: [f64; 2]) -> Result<PointJet<f64>, MappingError> {
        let mut jet = PointJet::new(x);
        for &j in dirs {
            let d = self.displacement(j as usize, x)?;
            jet.insert(j, d.jacobian, d.value);
        }
        Ok(jet)
    }

    /// `(Φ(y;x), D_xΦ(y;x))` for a finitely supported `y`.
    pub fn full_map(&self, y: &[(u32, f64)], x: [f64; 2]) -> Result<([f64; 2], Mat2<f64>), MappingError> {
        let mut point = x;
        let mut jac = Mat2::identity();
        for &(j, yj) in y {
            if yj == 0.0 {
                continue;
            }
            let d = self.displacement(j as usize, x)?;
            point[0] += yj * d.value[0];
            point[1] += yj * d.value[1];
            jac += d.jacobian.scale(yj);
        }
        Ok((point, jac))
    }
}

/// Empirical singular value range of `D_xΦ(y;x)^{-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaBounds {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub samples: usize,
}

/// Samples `y ∈ {−1,0,1}^J` (zero, all-plus, all-minus, then fixed-seed
/// random patterns up to `y_samples` in total) against every point.
pub fn estimate_sigma_bounds(mapping: &Mapping, points: &[[f64; 2]], y_samples: usize) -> Result<SigmaBounds, MappingError> {
    let dims = mapping.basis().len();
    let mut patterns: Vec<Vec<f64>> = vec![vec![0.0; dims], vec![1.0; dims], vec![-1.0; dims]];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    while patterns.len() < y_samples.max(3) {
        patterns.push((0..dims).map(|_| rng.gen_range(-1i32..=1) as f64).collect());
    }
    let mut sigma_min = f64::INFINITY;
    let mut sigma_max: f64 = 0.0;
    let mut samples = 0;
    let mut jacs = Vec::with_capacity(dims);
    for &x in points {
        jacs.clear();
        for j in 1..=dims {
            jacs.push(mapping.displacement(j, x)?.jacobian);
        }
        for (s, y) in patterns.iter().enumerate() {
            let jac = y.iter().zip(&jacs).fold(Mat2::identity(), |acc, (&yj, d)| acc + d.scale(yj));
            let (smax, smin) = jac.singular_values();
            if !(smin > 0.0) || jac.det() <= 0.0 {
                return Err(MappingError::Singular { sample: s, x0: x[0], x1: x[1] });
            }
            // Singular values of the inverse are reciprocals.
            sigma_min = sigma_min.min(1.0 / smax);
            sigma_max = sigma_max.max(1.0 / smin);
            samples += 1;
        }
    }
    Ok(SigmaBounds { sigma_min, sigma_max, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary_basis::{CascadeTable, FourierBasis, WaveletBasis};

    fn wavelet_basis(theta: f64, max_level: u32) -> Arc<BasisKind> {
        let table = Arc::new(CascadeTable::new("db4", 12).unwrap());
        let b = BasisKind::Wavelet(WaveletBasis::new(table, 3.0, theta, 1.0, max_level).unwrap());
        Arc::new(b.rescale_to_theta(theta).unwrap())
    }

    fn fourier_basis(theta: f64, n: usize) -> Arc<BasisKind> {
        let b = BasisKind::Fourier(FourierBasis::new(2.5, n, 1.0).unwrap());
        Arc::new(b.rescale_to_theta(theta).unwrap())
    }

    fn circle() -> NominalRadius {
        NominalRadius::Circle { radius: 1.0 }
    }

    fn interior_points(n: usize, seed: u64, rmin: f64, rmax: f64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let r = rng.gen_range(rmin..rmax);
                let t = rng.gen_range(0.0..TAU);
                [r * t.cos(), r * t.sin()]
            })
            .collect()
    }

    fn fd_jacobian(mapping: &Mapping, j: usize, x: [f64; 2], h: f64) -> Mat2<f64> {
        let v = |p: [f64; 2]| mapping.displacement(j, p).unwrap().value;
        let (xp, xm) = (v([x[0] + h, x[1]]), v([x[0] - h, x[1]]));
        let (yp, ym) = (v([x[0], x[1] + h]), v([x[0], x[1] - h]));
        Mat2::new(
            (xp[0] - xm[0]) / (2.0 * h),
            (yp[0] - ym[0]) / (2.0 * h),
            (xp[1] - xm[1]) / (2.0 * h),
            (yp[1] - ym[1]) / (2.0 * h),
        )
    }

    #[test]
    fn mollifier_vanishes_inside_cutoff_and_matches_boundary_data() {
        let basis = wavelet_basis(0.05, 5);
        let m = Mapping::Mollifier(MollifierMapping::new(basis.clone(), circle()).unwrap());
        let d = m.displacement(7, [1.0 / 8.0 * 0.6, 1.0 / 8.0 * 0.8]).unwrap();
        assert_eq!(d, Displacement::zero());
        for &th in &[0.1f64, 1.3, 4.4] {
            let x = [th.cos(), th.sin()];
            for j in [1, 2, 9, 40] {
                let v = m.displacement(j, x).unwrap().value;
                let psi = basis.eval_psi(j, th).unwrap();
                assert!((v[0] - psi * x[0]).abs() < 1e-8 && (v[1] - psi * x[1]).abs() < 1e-8);
            }
        }
        assert!(matches!(m.displacement(1, [1.1, 0.0]), Err(MappingError::OutsideDomain(..))));
        assert!(m.displacement(1000, [0.5, 0.0]).is_err());
    }

    #[test]
    fn mollifier_jacobian_matches_finite_differences() {
        let r0 = NominalRadius::Trigonometric { mean: 1.0, cos: vec![0.0, 0.1], sin: vec![0.05] };
        // Fourier fields are smooth: tight check. Wavelet tables are piecewise
        // linear, so the check is relative to the scale of the field.
        // Wavelet steps span about 1.5 cascade cells so the difference
        // quotient sees the same resolution as the ψ' table.
        let cell = |level: u32| 1.5 * 0.3 * TAU / 4096.0 / (1u64 << level) as f64;
        for (basis, tol, wavelet) in [(fourier_basis(0.05, 32), 1e-6, false), (wavelet_basis(0.05, 6), 2e-3, true)] {
            let m = Mapping::Mollifier(MollifierMapping::new(basis.clone(), r0.clone()).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            for _ in 0..100 {
                let j = rng.gen_range(1..=basis.len());
                let x = interior_points(1, rng.gen(), 0.3, 0.8)[0];
                let d = m.displacement(j, x).unwrap().jacobian;
                let scale = (0..512)
                    .map(|i| basis.eval_dpsi(j, TAU * i as f64 / 512.0).unwrap().abs() + basis.eval_psi(j, TAU * i as f64 / 512.0).unwrap().abs())
                    .fold(0.0, f64::max);
                let h = if wavelet { cell(basis.level(j)) } else { 1e-6 };
                let fd = fd_jacobian(&m, j, x, h);
                assert!((fd - d).frobenius() <= tol * scale, "j={j}: {fd:?} vs {d:?}");
            }
        }
    }

    #[test]
    fn harmonic_constant_bump_is_identity_map() {
        let basis = wavelet_basis(0.05, 4);
        let h = HarmonicMapping::new(basis.clone(), &circle(), 4096, None).unwrap();
        let c = basis.eval_psi(1, 0.0).unwrap();
        for x in interior_points(20, 3, 0.0, 1.0).into_iter().chain([[0.0, 0.0], [0.6, 0.8]]) {
            let d = h.displacement(1, x).unwrap();
            assert!((d.value[0] - c * x[0]).abs() < 1e-10 * c && (d.value[1] - c * x[1]).abs() < 1e-10 * c);
            assert!((d.jacobian - Mat2::identity().scale(c)).frobenius() < 1e-10 * c);
        }
    }

    #[test]
    fn harmonic_boundary_trace_and_jacobian() {
        let basis = fourier_basis(0.05, 16);
        let h = HarmonicMapping::new(basis.clone(), &circle(), 4096, None).unwrap();
        let m = Mapping::Harmonic(Arc::new(h));
        for &th in &[0.2f64, 2.5, 5.0] {
            let x = [th.cos(), th.sin()];
            let v = m.displacement(5, x).unwrap().value;
            let psi = basis.eval_psi(5, th).unwrap();
            assert!((v[0] - psi * x[0]).abs() < 1e-8 && (v[1] - psi * x[1]).abs() < 1e-8);
        }
        for x in interior_points(30, 5, 0.0, 0.9) {
            for j in [1, 4, 11] {
                let d = m.displacement(j, x).unwrap().jacobian;
                let fd = fd_jacobian(&m, j, x, 1e-5);
                assert!((fd - d).frobenius() <= 1e-7 * d.frobenius().max(1e-3), "{fd:?} vs {d:?}");
            }
        }
    }

    #[test]
    fn harmonic_fields_are_harmonic_and_localize() {
        let basis = wavelet_basis(0.05, 6);
        let h = HarmonicMapping::new(basis.clone(), &circle(), 4096, None).unwrap();
        let step = 1e-3;
        for x in interior_points(50, 8, 0.0, 0.85) {
            for j in [2, 12] {
                let v = |p: [f64; 2]| h.displacement(j, p).unwrap().value;
                let c = v(x);
                let lap: Vec<f64> = (0..2)
                    .map(|k| {
                        (v([x[0] + step, x[1]])[k] + v([x[0] - step, x[1]])[k] + v([x[0], x[1] + step])[k] + v([x[0], x[1] - step])[k]
                            - 4.0 * c[k])
                            / (step * step)
                    })
                    .collect();
                let mag = basis.eval_psi(1, 0.0).unwrap();
                assert!(lap.iter().all(|l| l.abs() <= 1e-4 * mag), "{lap:?}");
            }
        }
        let inner = interior_points(400, 9, 0.0, 0.5);
        let mut last = f64::INFINITY;
        for level in 0..=6u32 {
            let j = 1 + (1usize << level);
            let peak = inner.iter().map(|&x| {
                let v = h.displacement(j, x).unwrap().value;
                v[0].hypot(v[1])
            }).fold(0.0, f64::max);
            assert!(peak < last, "level {level}: {peak} ≥ {last}");
            last = peak;
        }
    }

    #[test]
    fn harmonic_rejects_bad_configs() {
        let basis = wavelet_basis(0.05, 3);
        let r0 = NominalRadius::Trigonometric { mean: 1.0, cos: vec![0.1], sin: vec![] };
        assert_eq!(HarmonicMapping::new(basis.clone(), &r0, 4096, None).unwrap_err(), MappingError::NonCircular);
        assert!(HarmonicMapping::new(basis.clone(), &circle(), 1000, None).is_err());
        assert!(HarmonicMapping::new(basis, &circle(), 4096, Some(2048)).is_err());
    }

    #[test]
    fn full_map_reproduces_perturbed_radius() {
        let basis = wavelet_basis(0.05, 5);
        let maps = [
            Mapping::Mollifier(MollifierMapping::new(basis.clone(), circle()).unwrap()),
            Mapping::Harmonic(Arc::new(HarmonicMapping::new(basis.clone(), &circle(), 4096, None).unwrap())),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for m in &maps {
            let (p, jac) = m.full_map(&[], [0.3, 0.1]).unwrap();
            assert_eq!(p, [0.3, 0.1]);
            assert_eq!(jac, Mat2::identity());
            for _ in 0..5 {
                let y: Vec<(u32, f64)> = (1..=basis.len() as u32).map(|j| (j, rng.gen_range(-1.0..1.0))).collect();
                let th: f64 = rng.gen_range(0.0..TAU);
                let (p, _) = m.full_map(&y, [th.cos(), th.sin()]).unwrap();
                let r: f64 = 1.0 + y.iter().map(|&(j, yj)| yj * basis.eval_psi(j as usize, th).unwrap()).sum::<f64>();
                assert!((p[0].hypot(p[1]) - r).abs() < 1e-6, "{} vs {r}", p[0].hypot(p[1]));
            }
            for x in interior_points(200, 14, 0.0, 1.0) {
                let y: Vec<(u32, f64)> = (1..=basis.len() as u32).map(|j| (j, rng.gen_range(-1.0..1.0))).collect();
                assert!(m.full_map(&y, x).unwrap().1.det() > 0.0);
            }
        }
    }

    #[test]
    fn sigma_bounds_bracket_one_and_shrink_with_theta() {
        let pts = interior_points(20, 15, 0.0, 1.0);
        let mut spreads = Vec::new();
        for theta in [0.05, 1e-4] {
            let basis = wavelet_basis(theta, 4);
            for m in [
                Mapping::Mollifier(MollifierMapping::new(basis.clone(), circle()).unwrap()),
                Mapping::Harmonic(Arc::new(HarmonicMapping::new(basis.clone(), &circle(), 4096, None).unwrap())),
            ] {
                let s = estimate_sigma_bounds(&m, &pts, 16).unwrap();
                assert!(s.sigma_min > 0.0 && s.sigma_min <= 1.0 && s.sigma_max >= 1.0);
                assert_eq!(s.samples, 20 * 16);
                spreads.push(s.sigma_max - s.sigma_min);
            }
        }
        assert!(spreads[2] < 1e-2 && spreads[3] < 1e-2, "{spreads:?}");
    }
}
