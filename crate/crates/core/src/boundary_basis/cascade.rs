//! Dyadic samples of orthogonal Daubechies scaling functions and wavelets.

use faer::prelude::*;
use faer::Mat;

use super::BasisError;

/// Published db4 low-pass taps; polished by Newton iteration on the
/// defining equations before use.
const DB4_SEED: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

/// Orthonormal low-pass filter (taps summing to √2) by name.
pub fn daubechies_filter(name: &str) -> Result<Vec<f64>, BasisError> {
    match name.to_ascii_lowercase().as_str() {
        "haar" | "db1" => Ok(vec![std::f64::consts::FRAC_1_SQRT_2; 2]),
        "db2" => {
            let s3 = 3f64.sqrt();
            let d = 4.0 * std::f64::consts::SQRT_2;
            Ok(vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d])
        }
        "db4" | "daubechies4" => Ok(polish_filter(&DB4_SEED)),
        _ => Err(BasisError::UnknownWavelet(name.to_string())),
    }
}

/// Residuals of the orthogonality and vanishing-moment conditions.
fn filter_residual(h: &[f64]) -> Vec<f64> {
    let n = h.len();
    let half = n / 2;
    let mut r = Vec::with_capacity(n);
    for m in 0..half {
        let dot: f64 = (0..n - 2 * m).map(|k| h[k] * h[k + 2 * m]).sum();
        r.push(dot - if m == 0 { 1.0 } else { 0.0 });
    }
    for p in 0..half {
        let moment: f64 = h
            .iter()
            .enumerate()
            .map(|(k, &hk)| if k % 2 == 0 { 1.0 } else { -1.0 } * (k as f64).powi(p as i32) * hk)
            .sum();
        r.push(moment);
    }
    r
}

fn polish_filter(seed: &[f64]) -> Vec<f64> {
    let n = seed.len();
    let mut h = seed.to_vec();
    for _ in 0..8 {
        let r = filter_residual(&h);
        if r.iter().all(|v| v.abs() < 1e-16) {
            break;
        }
        let half = n / 2;
        let jac = Mat::from_fn(n, n, |row, col| {
            if row < half {
                let m = row;
                let mut d = 0.0;
                if col + 2 * m < n {
                    d += h[col + 2 * m];
                }
                if col >= 2 * m {
                    d += h[col - 2 * m];
                }
                d
            } else {
                let p = (row - half) as i32;
                (if col % 2 == 0 { 1.0 } else { -1.0 }) * (col as f64).powi(p)
            }
        });
        let rhs = Mat::from_fn(n, 1, |i, _| -r[i]);
        let step = jac.partial_piv_lu().solve(&rhs);
        for (k, hk) in h.iter_mut().enumerate() {
            *hk += step[(k, 0)];
        }
    }
    h
}

/// Samples of `φ`, `Ψ` and `Ψ'` on `x_i = i·2^{-J}`, `x ∈ [0, L]`, where
/// `L + 1` is the filter length.
#[derive(Debug, Clone)]
pub struct CascadeTable {
    name: String,
    depth: u32,
    support: usize,
    filter: Vec<f64>,
    phi: Vec<f64>,
    psi: Vec<f64>,
    dpsi: Vec<f64>,
}

impl CascadeTable {
    pub fn new(name: &str, depth: u32) -> Result<Self, BasisError> {
        if !(8..=16).contains(&depth) {
            return Err(BasisError::CascadeDepth(depth));
        }
        let filter = daubechies_filter(name)?;
        let support = filter.len() - 1;
        let per_unit = 1usize << depth;
        let len = support * per_unit + 1;
        let sqrt2 = std::f64::consts::SQRT_2;

        let mut phi = vec![0.0; len];
        for (n, v) in integer_values(&filter).into_iter().enumerate() {
            phi[n * per_unit] = v;
        }
        for level in 1..=depth {
            let step = 1usize << (depth - level);
            let mut i = step;
            while i < len {
                let mut acc = 0.0;
                for (k, &hk) in filter.iter().enumerate() {
                    let idx = 2 * i as i64 - (k * per_unit) as i64;
                    if idx >= 0 && (idx as usize) < len {
                        acc += hk * phi[idx as usize];
                    }
                }
                phi[i] = sqrt2 * acc;
                i += 2 * step;
            }
        }

        let psi: Vec<f64> = (0..len)
            .map(|i| {
                let mut acc = 0.0;
                for k in 0..=support {
                    let g = if k % 2 == 0 { 1.0 } else { -1.0 } * filter[support - k];
                    let idx = 2 * i as i64 - (k * per_unit) as i64;
                    if idx >= 0 && (idx as usize) < len {
                        acc += g * phi[idx as usize];
                    }
                }
                sqrt2 * acc
            })
            .collect();

        let h = 1.0 / per_unit as f64;
        let at = |i: i64| if i >= 0 && (i as usize) < len { psi[i as usize] } else { 0.0 };
        let dpsi = (0..len as i64).map(|i| (at(i + 1) - at(i - 1)) / (2.0 * h)).collect();

        Ok(Self { name: name.to_string(), depth, support, filter, phi, psi, dpsi })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Length `L` of the support `[0, L]`.
    pub fn support(&self) -> usize {
        self.support
    }

    pub fn filter(&self) -> &[f64] {
        &self.filter
    }

    /// Grid spacing `2^{-J}`.
    pub fn spacing(&self) -> f64 {
        1.0 / (1usize << self.depth) as f64
    }

    pub fn samples_per_unit(&self) -> usize {
        1usize << self.depth
    }

    pub fn phi_samples(&self) -> &[f64] {
        &self.phi
    }

    pub fn psi_samples(&self) -> &[f64] {
        &self.psi
    }

    pub fn dpsi_samples(&self) -> &[f64] {
        &self.dpsi
    }

    /// Grid cell and offset of `x`, `None` outside the support.
    #[inline]
    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !(0.0..=self.support as f64).contains(&x) {
            return None;
        }
        let s = x * self.samples_per_unit() as f64;
        // s ≥ 0, so truncation is the floor.
        let i = (s as usize).min(self.psi.len() - 2);
        Some((i, s - i as f64))
    }

    fn interpolate(&self, table: &[f64], x: f64) -> f64 {
        match self.locate(x) {
            Some((i, t)) => table[i] * (1.0 - t) + table[i + 1] * t,
            None => 0.0,
        }
    }

    /// `(Ψ(x), Ψ'(x))`.
    #[inline]
    pub fn psi_pair(&self, x: f64) -> (f64, f64) {
        match self.locate(x) {
            Some((i, t)) => (self.psi[i] * (1.0 - t) + self.psi[i + 1] * t, self.dpsi[i] * (1.0 - t) + self.dpsi[i + 1] * t),
            None => (0.0, 0.0),
        }
    }

    pub fn psi(&self, x: f64) -> f64 {
        self.interpolate(&self.psi, x)
    }

    pub fn dpsi(&self, x: f64) -> f64 {
        self.interpolate(&self.dpsi, x)
    }

    pub fn phi(&self, x: f64) -> f64 {
        self.interpolate(&self.phi, x)
    }
}

/// `φ(0), …, φ(L)`: the eigenvector of `M_{nm} = √2 h_{2n−m}` for
/// eigenvalue 1, normalized to unit sum.
fn integer_values(filter: &[f64]) -> Vec<f64> {
    let l = filter.len() - 1;
    if l == 1 {
        // Haar: right-continuous box.
        return vec![1.0, 0.0];
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    let a = Mat::from_fn(l + 1, l + 1, |n, m| {
        if n == l {
            return 1.0;
        }
        let k = 2 * n as i64 - m as i64;
        let mval = if (0..=l as i64).contains(&k) { sqrt2 * filter[k as usize] } else { 0.0 };
        mval - if n == m { 1.0 } else { 0.0 }
    });
    let b = Mat::from_fn(l + 1, 1, |n, _| if n == l { 1.0 } else { 0.0 });
    let x = a.partial_piv_lu().solve(&b);
    (0..=l).map(|n| x[(n, 0)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn db4_filter_normalization_and_orthogonality() {
        let h = daubechies_filter("db4").unwrap();
        let sum: f64 = h.iter().sum();
        assert!((sum - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(filter_residual(&h).iter().all(|r| r.abs() < 1e-14));
        for (a, b) in h.iter().zip(DB4_SEED) {
            assert!((a - b).abs() < 1e-12);
        }
        let h2 = daubechies_filter("db2").unwrap();
        assert!(filter_residual(&h2).iter().all(|r| r.abs() < 1e-15));
    }

    #[test]
    fn unknown_names_and_depths_are_rejected() {
        assert!(matches!(CascadeTable::new("sym8", 10), Err(BasisError::UnknownWavelet(_))));
        assert!(matches!(CascadeTable::new("db4", 7), Err(BasisError::CascadeDepth(7))));
        assert!(matches!(CascadeTable::new("db4", 17), Err(BasisError::CascadeDepth(17))));
    }

    #[test]
    fn scaling_function_partition_of_unity() {
        let t = CascadeTable::new("db4", 10).unwrap();
        let per = t.samples_per_unit();
        for i in (0..per).step_by(37) {
            let s: f64 = (0..t.support()).map(|k| t.phi_samples()[i + k * per]).sum();
            assert!((s - 1.0).abs() < 1e-10, "{s}");
        }
    }

    #[test]
    fn wavelet_moments_and_shift_orthogonality() {
        let t = CascadeTable::new("db4", 12).unwrap();
        let h = t.spacing();
        let psi = t.psi_samples();
        let mean: f64 = psi.iter().sum::<f64>() * h;
        assert!(mean.abs() < 1e-6, "{mean}");
        let norm: f64 = psi.iter().map(|v| v * v).sum::<f64>() * h;
        assert!((norm - 1.0).abs() < 1e-4, "{norm}");
        let per = t.samples_per_unit();
        for shift in 1..t.support() {
            let dot: f64 = (shift * per..psi.len()).map(|i| psi[i] * psi[i - shift * per]).sum::<f64>() * h;
            assert!(dot.abs() < 1e-4, "shift {shift}: {dot}");
        }
    }

    #[test]
    fn derivative_table_matches_finite_differences() {
        let t = CascadeTable::new("db4", 12).unwrap();
        let integral: f64 = t.dpsi_samples().iter().sum::<f64>() * t.spacing();
        assert!(integral.abs() < 1e-9);
        let x = 2.3;
        let fd = (t.psi(x + 1e-3) - t.psi(x - 1e-3)) / 2e-3;
        assert!((fd - t.dpsi(x)).abs() < 1e-2 * t.dpsi(x).abs().max(1.0));
    }

    #[test]
    fn haar_table() {
        let t = CascadeTable::new("haar", 8).unwrap();
        assert!((t.psi(0.25) - 1.0).abs() < 1e-15);
        assert!((t.psi(0.75) + 1.0).abs() < 1e-15);
        assert_eq!(t.psi(1.5), 0.0);
    }
}
