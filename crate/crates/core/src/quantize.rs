//! Spectral states on T^n, torus Weyl quantization, Sobolev norms, the
//! energy functional and wave-packet initial data.
//!
//! Fourier convention: `û(k) = (2π)^{-n} ∫ u e^{-ik·x} dx`, so that
//! `‖e^{ik·x}‖_{L²} = 1` and `‖u‖²_{L²} = Σ |û(k)|²`.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{FourierScalarField, FourierVectorField, TAU};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Complex solution coefficients `û(k)` for `|k_j| ≤ N_j`.
///
/// One-dimensional states use `band = [N, 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    dim: usize,
    band: [usize; 2],
    coeffs: Vec<Complex64>,
}

impl SpectralState {
    pub fn zeros(dim: usize, band: [usize; 2]) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return invalid(format!("state dimension {dim} not supported"));
        }
        if dim == 1 && band[1] != 0 {
            return invalid("one-dimensional state with a second band");
        }
        let len = (2 * band[0] + 1) * (2 * band[1] + 1);
        Ok(Self { dim, band, coeffs: vec![ZERO; len] })
    }

    /// Square band `|k|∞ ≤ n` in dimension `dim`.
    pub fn zeros_square(dim: usize, n: usize) -> Result<Self> {
        Self::zeros(dim, if dim == 1 { [n, 0] } else { [n, n] })
    }

    pub fn from_fn(dim: usize, band: [usize; 2], mut f: impl FnMut([i64; 2]) -> Complex64) -> Result<Self> {
        let mut s = Self::zeros(dim, band)?;
        for i in 0..s.coeffs.len() {
            let k = s.mode_of(i);
            s.coeffs[i] = f(k);
        }
        Ok(s)
    }

    /// Single normalized mode `e^{ik·x}`.
    pub fn mode(dim: usize, band: [usize; 2], k: [i64; 2]) -> Result<Self> {
        let mut s = Self::zeros(dim, band)?;
        s.set(k, Complex64::new(1.0, 0.0))?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn band(&self) -> [usize; 2] {
        self.band
    }
    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }
    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
    pub(crate) fn width2(&self) -> usize {
        2 * self.band[1] + 1
    }

    #[inline]
    pub fn contains(&self, k: [i64; 2]) -> bool {
        k[0].unsigned_abs() as usize <= self.band[0] && k[1].unsigned_abs() as usize <= self.band[1]
    }

    #[inline]
    pub fn index(&self, k: [i64; 2]) -> Option<usize> {
        if !self.contains(k) {
            return None;
        }
        let a = (k[0] + self.band[0] as i64) as usize;
        let b = (k[1] + self.band[1] as i64) as usize;
        Some(a * self.width2() + b)
    }

    #[inline]
    pub fn mode_of(&self, i: usize) -> [i64; 2] {
        let w = self.width2();
        [(i / w) as i64 - self.band[0] as i64, (i % w) as i64 - self.band[1] as i64]
    }

    pub fn get(&self, k: [i64; 2]) -> Complex64 {
        self.index(k).map(|i| self.coeffs[i]).unwrap_or(ZERO)
    }

    pub fn set(&mut self, k: [i64; 2], c: Complex64) -> Result<()> {
        match self.index(k) {
            Some(i) => {
                self.coeffs[i] = c;
                Ok(())
            }
            None => Err(Error::Band(format!("mode {k:?} outside band {:?}", self.band))),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `⟨u, w⟩ = Σ û(k) conj(ŵ(k))`.
    pub fn inner(&self, other: &Self) -> Result<Complex64> {
        self.check_compatible(other)?;
        Ok(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b.conj()).sum())
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.band != other.band {
            return invalid(format!("incompatible states: bands {:?} and {:?}", self.band, other.band));
        }
        Ok(())
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        let mut o = self.clone();
        o.coeffs.iter_mut().for_each(|c| *c *= s);
        o
    }

    /// `self + s·other`
    pub fn axpy(&self, s: Complex64, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut o = self.clone();
        for (a, b) in o.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
        Ok(o)
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt())
    }

    /// Copy into a different band, returning the L² norm of dropped modes.
    pub fn rebanded(&self, band: [usize; 2]) -> Result<(Self, f64)> {
        let mut o = Self::zeros(self.dim, band)?;
        let mut tail = 0.0;
        for (i, c) in self.coeffs.iter().enumerate() {
            let k = self.mode_of(i);
            match o.index(k) {
                Some(j) => o.coeffs[j] = *c,
                None => tail += c.norm_sqr(),
            }
        }
        Ok((o, tail.sqrt()))
    }

    /// Whether `û(−k) = conj(û(k))` holds to `tol`.
    pub fn is_real(&self, tol: f64) -> bool {
        self.coeffs.iter().enumerate().all(|(i, c)| {
            let k = self.mode_of(i);
            (self.get([-k[0], -k[1]]) - c.conj()).norm() <= tol
        })
    }

    /// Point evaluation by direct summation.
    pub fn eval(&self, x: [f64; 2]) -> Complex64 {
        let mut s = ZERO;
        for (i, c) in self.coeffs.iter().enumerate() {
            if *c == ZERO {
                continue;
            }
            let k = self.mode_of(i);
            s += c * Complex64::from_polar(1.0, k[0] as f64 * x[0] + k[1] as f64 * x[1]);
        }
        s
    }

    /// Multiply by `e^{-ik·s}`, i.e. `u(x) ↦ u(x − s)`.
    pub fn translated(&self, shift: [f64; 2]) -> Self {
        let mut o = self.clone();
        for i in 0..o.coeffs.len() {
            let k = o.mode_of(i);
            o.coeffs[i] *= Complex64::from_polar(1.0, -(k[0] as f64 * shift[0] + k[1] as f64 * shift[1]));
        }
        o
    }

    pub fn to_json(&self) -> serde_json::Value {
        let c: Vec<[f64; 2]> = self.coeffs.iter().map(|c| [c.re, c.im]).collect();
        serde_json::json!({"dim": self.dim, "band": self.band, "coeffs": c})
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            dim: usize,
            band: [usize; 2],
            coeffs: Vec<[f64; 2]>,
        }
        let r: Raw = serde_json::from_value(v.clone())?;
        let mut s = Self::zeros(r.dim, r.band)?;
        if r.coeffs.len() != s.coeffs.len() {
            return invalid("state json: coefficient count does not match band");
        }
        s.coeffs = r.coeffs.into_iter().map(|[a, b]| Complex64::new(a, b)).collect();
        Ok(s)
    }
}

/// `(Σ_k (1+|k|²)^σ |û(k)|²)^{1/2}`.
pub fn sobolev_norm(u: &SpectralState, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return u.l2_norm();
    }
    let w = u.width2();
    let n0 = u.band[0] as i64;
    let n1 = u.band[1] as i64;
    let mut s = 0.0;
    for (i, c) in u.coeffs.iter().enumerate() {
        let a = (i / w) as i64 - n0;
        let b = (i % w) as i64 - n1;
        let q = (1 + a * a + b * b) as f64;
        s += q.powf(sigma) * c.norm_sqr();
    }
    s.sqrt()
}

/// Several Sobolev norms in one pass.
pub fn sobolev_norms(u: &SpectralState, sigmas: &[f64]) -> Vec<f64> {
    let w = u.width2();
    let n0 = u.band[0] as i64;
    let n1 = u.band[1] as i64;
    let mut s = vec![0.0; sigmas.len()];
    for (i, c) in u.coeffs.iter().enumerate() {
        let m = c.norm_sqr();
        if m == 0.0 {
            continue;
        }
        let a = (i / w) as i64 - n0;
        let b = (i % w) as i64 - n1;
        let lq = ((1 + a * a + b * b) as f64).ln();
        for (acc, &sg) in s.iter_mut().zip(sigmas) {
            *acc += (sg * lq).exp() * m;
        }
    }
    s.into_iter().map(f64::sqrt).collect()
}

/// 2-D FFT on an `M1 × M2` grid with the normalized Fourier convention.
pub struct GridFft {
    m: [usize; 2],
    fwd: [Arc<dyn Fft<f64>>; 2],
    inv: [Arc<dyn Fft<f64>>; 2],
}

impl std::fmt::Debug for GridFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GridFft({:?})", self.m)
    }
}

impl GridFft {
    pub fn new(m: [usize; 2]) -> Self {
        let mut p = FftPlanner::new();
        Self {
            m,
            fwd: [p.plan_fft_forward(m[0]), p.plan_fft_forward(m[1])],
            inv: [p.plan_fft_inverse(m[0]), p.plan_fft_inverse(m[1])],
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.m
    }

    /// Grid point `x_{ij}`.
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [TAU * i as f64 / self.m[0] as f64, TAU * j as f64 / self.m[1] as f64]
    }

    fn transform(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 2]) {
        let [m0, m1] = self.m;
        if m1 > 1 {
            plans[1].process(data);
        }
        if m0 > 1 {
            let mut col = vec![ZERO; m0];
            let mut scratch = vec![ZERO; plans[0].get_inplace_scratch_len()];
            for j in 0..m1 {
                for i in 0..m0 {
                    col[i] = data[i * m1 + j];
                }
                plans[0].process_with_scratch(&mut col, &mut scratch);
                for i in 0..m0 {
                    data[i * m1 + j] = col[i];
                }
            }
        }
    }

    /// Grid values `u(x_{ij})`, row-major with `j` fastest.
    pub fn to_grid(&self, u: &SpectralState) -> Result<Vec<Complex64>> {
        let [m0, m1] = self.m;
        if 2 * u.band[0] + 1 > m0 || 2 * u.band[1] + 1 > m1 {
            return Err(Error::Band(format!("grid {:?} too small for band {:?}", self.m, u.band)));
        }
        let mut g = vec![ZERO; m0 * m1];
        for (i, c) in u.coeffs.iter().enumerate() {
            let k = u.mode_of(i);
            let a = k[0].rem_euclid(m0 as i64) as usize;
            let b = k[1].rem_euclid(m1 as i64) as usize;
            g[a * m1 + b] = *c;
        }
        self.transform(&mut g, &self.inv);
        Ok(g)
    }

    /// Project grid values onto `band`; returns the state and the L² norm of
    /// the resolved modes outside `band`.
    pub fn from_grid(&self, mut g: Vec<Complex64>, dim: usize, band: [usize; 2]) -> Result<(SpectralState, f64)> {
        let [m0, m1] = self.m;
        if g.len() != m0 * m1 {
            return invalid("grid size mismatch");
        }
        self.transform(&mut g, &self.fwd);
        let scale = 1.0 / (m0 * m1) as f64;
        let mut u = SpectralState::zeros(dim, band)?;
        let mut total = 0.0;
        for c in g.iter_mut() {
            *c *= scale;
            total += c.norm_sqr();
        }
        let mut kept = 0.0;
        let h0 = (m0 as i64 - 1) / 2;
        let h1 = (m1 as i64 - 1) / 2;
        for i in 0..u.coeffs.len() {
            let k = u.mode_of(i);
            if k[0].abs() > h0 || k[1].abs() > h1 {
                continue;
            }
            let a = k[0].rem_euclid(m0 as i64) as usize;
            let b = k[1].rem_euclid(m1 as i64) as usize;
            u.coeffs[i] = g[a * m1 + b];
            kept += u.coeffs[i].norm_sqr();
        }
        Ok((u, (total - kept).max(0.0).sqrt()))
    }
}

/// Smallest 2,3,5-smooth integer `≥ n`.
pub fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Smooth radial cutoff: 1 on `[0,1]`, 0 on `[2,∞)`.
pub fn cutoff_chi(r: f64) -> f64 {
    fn psi(t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            (-1.0 / t).exp()
        }
    }
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        let t = r - 1.0;
        psi(1.0 - t) / (psi(1.0 - t) + psi(t))
    }
}

/// Symbol `a(x, ξ)` on `T^n × R^n`, band-limited in `x`.
pub trait Symbol: Send + Sync {
    fn dim(&self) -> usize;
    /// Declared order ρ: `|a| ≤ C⟨ξ⟩^ρ`.
    fn order(&self) -> f64;
    /// x-band `[K1, K2]` of the coefficients returned by [`Symbol::x_coeffs`].
    fn x_band(&self) -> [usize; 2];
    /// Writes `â_m(ξ)` for `|m_j| ≤ K_j` into `out`, row-major in `m` as in
    /// [`SpectralState`].
    fn x_coeffs(&self, xi: [f64; 2], out: &mut [Complex64]) -> Result<()>;
    /// Only the coefficients with `m_j ≡ parity_j (mod 2)` are read by the
    /// Weyl sum; implementations may leave the others untouched.
    fn x_coeffs_parity(&self, xi: [f64; 2], _parity: [usize; 2], out: &mut [Complex64]) -> Result<()> {
        self.x_coeffs(xi, out)
    }
    /// Whether `a(·, ξ)` vanishes identically (lets the Weyl sum skip work).
    fn vanishes_at(&self, _xi: [f64; 2]) -> bool {
        false
    }
    fn eval(&self, x: [f64; 2], xi: [f64; 2]) -> Result<Complex64> {
        let kb = self.x_band();
        let mut c = vec![ZERO; (2 * kb[0] + 1) * (2 * kb[1] + 1)];
        self.x_coeffs(xi, &mut c)?;
        let w = 2 * kb[1] + 1;
        let mut s = ZERO;
        for (i, v) in c.iter().enumerate() {
            let m0 = (i / w) as f64 - kb[0] as f64;
            let m1 = (i % w) as f64 - kb[1] as f64;
            s += v * Complex64::from_polar(1.0, m0 * x[0] + m1 * x[1]);
        }
        Ok(s)
    }
}

fn coeff_len(kb: [usize; 2]) -> usize {
    (2 * kb[0] + 1) * (2 * kb[1] + 1)
}

fn coeff_index(kb: [usize; 2], m: [i64; 2]) -> usize {
    (m[0] + kb[0] as i64) as usize * (2 * kb[1] + 1) + (m[1] + kb[1] as i64) as usize
}

/// `a(x, ξ) = c`.
#[derive(Clone, Debug)]
pub struct ConstantSymbol {
    pub dim: usize,
    pub value: Complex64,
}

impl Symbol for ConstantSymbol {
    fn dim(&self) -> usize {
        self.dim
    }
    fn order(&self) -> f64 {
        0.0
    }
    fn x_band(&self) -> [usize; 2] {
        [0, 0]
    }
    fn x_coeffs(&self, _xi: [f64; 2], out: &mut [Complex64]) -> Result<()> {
        out[0] = self.value;
        Ok(())
    }
}

/// `a(x, ξ) = ξ_j`.
#[derive(Clone, Debug)]
pub struct XiComponent {
    pub dim: usize,
    pub j: usize,
}

impl Symbol for XiComponent {
    fn dim(&self) -> usize {
        self.dim
    }
    fn order(&self) -> f64 {
        1.0
    }
    fn x_band(&self) -> [usize; 2] {
        [0, 0]
    }
    fn x_coeffs(&self, xi: [f64; 2], out: &mut [Complex64]) -> Result<()> {
        out[0] = Complex64::new(xi[self.j], 0.0);
        Ok(())
    }
}

/// Pure multiplication symbol `a(x)`.
#[derive(Clone, Debug)]
pub struct MultiplierSymbol {
    dim: usize,
    band: [usize; 2],
    coeffs: Vec<Complex64>,
}

impl MultiplierSymbol {
    pub fn from_scalar(dim: usize, f: &FourierScalarField) -> Self {
        let mut band = [0usize; 2];
        for (k, _) in f.modes() {
            band[0] = band[0].max(k[0].unsigned_abs() as usize);
            band[1] = band[1].max(k[1].unsigned_abs() as usize);
        }
        let mut coeffs = vec![ZERO; coeff_len(band)];
        for (k, c) in f.modes() {
            coeffs[coeff_index(band, [k[0] as i64, k[1] as i64])] += c;
        }
        Self { dim, band, coeffs }
    }

    pub fn from_state(u: &SpectralState) -> Self {
        Self { dim: u.dim(), band: u.band(), coeffs: u.coeffs().to_vec() }
    }
}

impl Symbol for MultiplierSymbol {
    fn dim(&self) -> usize {
        self.dim
    }
    fn order(&self) -> f64 {
        0.0
    }
    fn x_band(&self) -> [usize; 2] {
        self.band
    }
    fn x_coeffs(&self, _xi: [f64; 2], out: &mut [Complex64]) -> Result<()> {
        out.copy_from_slice(&self.coeffs);
        Ok(())
    }
}

/// `a(x, ξ) = i ξ·W(x)` for a frozen vector field `W`.
#[derive(Clone, Debug)]
pub struct TransportSymbol {
    dim: usize,
    band: [usize; 2],
    v: Vec<[Complex64; 2]>,
}

impl TransportSymbol {
    pub fn new(w: &FourierVectorField, t: f64) -> Self {
        let k = w.k_max();
        let band = if w.dim() == 1 { [k, 0] } else { [k, k] };
        let mut v = vec![[ZERO; 2]; coeff_len(band)];
        for (m, c) in w.spatial_coeffs(t) {
            v[coeff_index(band, [m[0] as i64, m[1] as i64])] = c;
        }
        Self { dim: w.dim(), band, v }
    }
}

impl Symbol for TransportSymbol {
    fn dim(&self) -> usize {
        self.dim
    }
    fn order(&self) -> f64 {
        1.0
    }
    fn x_band(&self) -> [usize; 2] {
        self.band
    }
    fn x_coeffs(&self, xi: [f64; 2], out: &mut [Complex64]) -> Result<()> {
        for (o, c) in out.iter_mut().zip(&self.v) {
            *o = Complex64::i() * (c[0] * xi[0] + c[1] * xi[1]);
        }
        Ok(())
    }
}

/// Closed-form symbol given by a function; x-coefficients are obtained by
/// exact sampling on a `(2K+1)`-point grid.
pub struct FnSymbol<F> {
    dim: usize,
    band: [usize; 2],
    order: f64,
    f: F,
}

impl<F> FnSymbol<F>
where
    F: Fn([f64; 2], [f64; 2]) -> Complex64 + Send + Sync,
{
    pub fn new(dim: usize, band: [usize; 2], order: f64, f: F) -> Self {
        let band = if dim == 1 { [band[0], 0] } else { band };
        Self { dim, band, order, f }
    }
}

impl<F> Symbol for FnSymbol<F>
where
    F: Fn([f64; 2], [f64; 2]) -> Complex64 + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn order(&self) -> f64 {
        self.order
    }
    fn x_band(&self) -> [usize; 2] {
        self.band
    }
    fn x_coeffs(&self, xi: [f64; 2], out: &mut [Complex64]) -> Result<()> {
        let m = [2 * self.band[0] + 1, 2 * self.band[1] + 1];
        let mut acc = vec![ZERO; out.len()];
        for i in 0..m[0] {
            for j in 0..m[1] {
                let x = [TAU * i as f64 / m[0] as f64, TAU * j as f64 / m[1] as f64];
                let v = (self.f)(x, xi);
                if !v.re.is_finite() || !v.im.is_finite() {
                    return Err(Error::Numerical(format!("symbol not evaluable at ξ = {xi:?}")));
                }
                for (idx, a) in acc.iter_mut().enumerate() {
                    let w = 2 * self.band[1] + 1;
                    let m0 = (idx / w) as f64 - self.band[0] as f64;
                    let m1 = (idx % w) as f64 - self.band[1] as f64;
                    *a += v * Complex64::from_polar(1.0, -(m0 * x[0] + m1 * x[1]));
                }
            }
        }
        let s = 1.0 / (m[0] * m[1]) as f64;
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a * s;
        }
        Ok(())
    }
    fn eval(&self, x: [f64; 2], xi: [f64; 2]) -> Result<Complex64> {
        Ok((self.f)(x, xi))
    }
}

/// Grid-backed homogeneous symbol on T² × R²:
/// `a(x, ξ) = |ξ|^ρ (1 − χ(|ξ|)) Σ_m c_m(θ) e^{im·x}` with `ξ = |ξ|(cos θ, sin θ)`,
/// where `c_m(θ)` is tabulated on a uniform θ grid and interpolated by
/// periodic cubic Lagrange interpolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AngularGridSymbol {
    band: [usize; 2],
    n_theta: usize,
    order: f64,
    cutoff: bool,
    /// `tables[t * len + idx]` = `c_m(θ_t)`
    tables: Vec<Complex64>,
}

impl AngularGridSymbol {
    /// `samples[t][i][j]` are values of the angular profile at
    /// `(x_i, x_j, θ_t)` on a uniform `M × M × n_theta` grid.
    pub fn from_samples(samples: &[Vec<f64>], m: usize, band: [usize; 2], order: f64, cutoff: bool) -> Result<(Self, f64)> {
        let n_theta = samples.len();
        if n_theta < 4 {
            return invalid("angular table needs at least 4 angles");
        }
        if 2 * band[0] + 1 > m || 2 * band[1] + 1 > m {
            return invalid("x-band exceeds the sampling grid");
        }
        let fft = GridFft::new([m, m]);
        let len = coeff_len(band);
        let mut tables = vec![ZERO; n_theta * len];
        let mut tail: f64 = 0.0;
        for (t, s) in samples.iter().enumerate() {
            if s.len() != m * m {
                return invalid("angular sample slice has the wrong size");
            }
            let g: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            let (st, tl) = fft.from_grid(g, 2, band)?;
            let norm = st.l2_norm().max(1e-300);
            tail = tail.max(tl / norm);
            tables[t * len..(t + 1) * len].copy_from_slice(st.coeffs());
        }
        Ok((Self { band, n_theta, order, cutoff, tables }, tail))
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    /// Crude bound on the θ-interpolation error from fourth differences.
    pub fn interpolation_error_estimate(&self) -> f64 {
        let len = coeff_len(self.band);
        let n = self.n_theta;
        let mut worst: f64 = 0.0;
        for idx in 0..len {
            for t in 0..n {
                let c = |o: isize| self.tables[((t as isize + o).rem_euclid(n as isize) as usize) * len + idx];
                let d4 = c(-2) - c(-1) * 4.0 + c(0) * 6.0 - c(1) * 4.0 + c(2);
                worst = worst.max(d4.norm() * 3.0 / 128.0);
            }
        }
        worst
    }

    #[inline]
    fn weights(&self, theta: f64) -> ([usize; 4], [f64; 4]) {
        let n = self.n_theta as f64;
        let s = theta.rem_euclid(TAU) / TAU * n;
        let i0 = s.floor();
        let f = s - i0;
        let i0 = i0 as isize;
        let idx = [-1isize, 0, 1, 2].map(|o| (i0 + o).rem_euclid(self.n_theta as isize) as usize);
        let w = [
            -f * (f - 1.0) * (f - 2.0) / 6.0,
            (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
            -(f + 1.0) * f * (f - 2.0) / 2.0,
            (f + 1.0) * f * (f - 1.0) / 6.0,
        ];
        (idx, w)
    }

    fn radial(&self, r: f64) -> f64 {
        let c = if self.cutoff { 1.0 - cutoff_chi(r) } else { 1.0 };
        if c == 0.0 {
            0.0
        } else {
            r.powf(self.order) * c
        }
    }
}

impl Symbol for AngularGridSymbol {
    fn dim(&self) -> usize {
        2
    }
    fn order(&self) -> f64 {
        self.order
    }
    fn x_band(&self) -> [usize; 2] {
        self.band
    }
    fn vanishes_at(&self, xi: [f64; 2]) -> bool {
        self.cutoff && xi[0] * xi[0] + xi[1] * xi[1] <= 1.0
    }
    fn x_coeffs(&self, xi: [f64; 2], out: &mut [Complex64]) -> Result<()> {
        self.x_coeffs_parity(xi, [2, 2], out)
    }
    fn x_coeffs_parity(&self, xi: [f64; 2], parity: [usize; 2], out: &mut [Complex64]) -> Result<()> {
        let r = (xi[0] * xi[0] + xi[1] * xi[1]).sqrt();
        let rad = self.radial(r);
        let len = coeff_len(self.band);
        if rad == 0.0 {
            out.iter_mut().for_each(|c| *c = ZERO);
            return Ok(());
        }
        if r == 0.0 {
            return Err(Error::Numerical("homogeneous symbol evaluated at ξ = 0".into()));
        }
        let (idx, w) = self.weights(xi[1].atan2(xi[0]));
        let wd = 2 * self.band[1] + 1;
        let b0 = self.band[0] as i64;
        let b1 = self.band[1] as i64;
        for i in 0..len {
            if parity[0] < 2 {
                let m0 = (i / wd) as i64 - b0;
                let m1 = (i % wd) as i64 - b1;
                if m0.rem_euclid(2) as usize != parity[0] || m1.rem_euclid(2) as usize != parity[1] {
                    continue;
                }
            }
            let mut s = ZERO;
            for q in 0..4 {
                s += self.tables[idx[q] * len + i] * w[q];
            }
            out[i] = s * rad;
        }
        Ok(())
    }
}

/// Result of a Weyl application: the band-limited image and the L² norm of
/// the part that fell outside the band.
#[derive(Clone, Debug)]
pub struct WeylImage {
    pub state: SpectralState,
    pub truncation: f64,
}

const WEYL_CHUNKS: usize = 16;

/// Torus Weyl rule `(Op(a)u)^(k) = Σ_{k'} â_{k−k'}((k+k')/2) û(k')`.
///
/// The sum is organized by midpoint `p = (k+k')/2`, so each `â(p)` is
/// computed once and only the `m ≡ 2p (mod 2)` coefficients are used.
pub fn weyl_apply(a: &dyn Symbol, u: &SpectralState) -> Result<WeylImage> {
    if a.dim() != u.dim() {
        return invalid("symbol and state dimensions differ");
    }
    let nb = u.band();
    let kb = a.x_band();
    let kb = if u.dim() == 1 { [kb[0], 0] } else { kb };
    let (n0, n1) = (nb[0] as i64, nb[1] as i64);
    let (k0, k1) = (kb[0] as i64, kb[1] as i64);
    let len = coeff_len(a.x_band());
    let abw = 2 * a.x_band()[1] + 1;
    let ab1 = a.x_band()[1] as i64;
    let ab0 = a.x_band()[0] as i64;
    let out_w = 2 * (nb[1] + kb[1]) + 1;
    let out_len = (2 * (nb[0] + kb[0]) + 1) * out_w;
    let rows: Vec<i64> = (-2 * n0..=2 * n0).collect();
    let ext = |k: [i64; 2]| ((k[0] + n0 + k0) as usize) * out_w + (k[1] + n1 + k1) as usize;

    // fixed partition and in-order sum: bit-identical for any thread count
    let chunk = rows.len().div_ceil(WEYL_CHUNKS).max(1);
    let parts: Vec<Vec<Complex64>> = rows
        .par_chunks(chunk)
        .map(|part| -> Result<Vec<Complex64>> {
            let mut out = vec![ZERO; out_len];
            let mut coef = vec![ZERO; len];
            for &s0 in part {
                    for s1 in -2 * n1..=2 * n1 {
                        let p = [s0 as f64 / 2.0, s1 as f64 / 2.0];
                        if a.vanishes_at(p) {
                            continue;
                        }
                        let par = [s0.rem_euclid(2) as usize, s1.rem_euclid(2) as usize];
                        a.x_coeffs_parity(p, par, &mut coef)?;
                        // m ≡ s (mod 2), |m| ≤ K, k' = (s − m)/2 in band
                        let mut m0 = -k0 + ((s0 + k0).rem_euclid(2));
                        while m0 <= k0 {
                            let kp0 = (s0 - m0) / 2;
                            if kp0.abs() <= n0 {
                                let mut m1 = -k1 + ((s1 + k1).rem_euclid(2));
                                while m1 <= k1 {
                                    let kp1 = (s1 - m1) / 2;
                                    if kp1.abs() <= n1 {
                                        let uc = u.coeffs[((kp0 + n0) as usize) * (2 * nb[1] + 1) + (kp1 + n1) as usize];
                                        if uc != ZERO {
                                            let c = coef[((m0 + ab0) as usize) * abw + (m1 + ab1) as usize];
                                            let k = [(s0 + m0) / 2, (s1 + m1) / 2];
                                            out[ext(k)] += c * uc;
                                        }
                                    }
                                    m1 += 2;
                                }
                            }
                            m0 += 2;
                        }
                    }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut full = vec![ZERO; out_len];
    for p in parts {
        for (x, y) in full.iter_mut().zip(p) {
            *x += y;
        }
    }
    let mut state = SpectralState::zeros(u.dim(), nb)?;
    let mut tail = 0.0;
    for k0i in -(n0 + k0)..=(n0 + k0) {
        for k1i in -(n1 + k1)..=(n1 + k1) {
            let c = full[ext([k0i, k1i])];
            match state.index([k0i, k1i]) {
                Some(i) => state.coeffs[i] = c,
                None => tail += c.norm_sqr(),
            }
        }
    }
    Ok(WeylImage { state, truncation: tail.sqrt() })
}

/// Dense matrix of `Op(a)` on the band of `template` (small bands only).
pub fn weyl_matrix(a: &dyn Symbol, template: &SpectralState) -> Result<Vec<Vec<Complex64>>> {
    let n = template.len();
    if n > 2000 {
        return invalid("weyl_matrix is meant for small truncations");
    }
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = SpectralState::zeros(template.dim(), template.band())?;
        e.coeffs[j] = Complex64::new(1.0, 0.0);
        cols.push(weyl_apply(a, &e)?.state.coeffs);
    }
    Ok((0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect())
}

/// Value and anti-symmetric residue of a quadratic form evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticValue {
    pub value: f64,
    /// `|Im⟨Op(a)u,u⟩| / (|⟨Op(a)u,u⟩| + ‖u‖²)`
    pub residue: f64,
}

/// `⟨Op(a)u, u⟩`, real part plus relative imaginary residue.
pub fn quadratic_form(a: &dyn Symbol, u: &SpectralState) -> Result<QuadraticValue> {
    let img = weyl_apply(a, u)?;
    let q = img.state.inner(u)?;
    let denom = q.norm() + u.l2_norm().powi(2);
    Ok(QuadraticValue { value: q.re, residue: if denom > 0.0 { q.im.abs() / denom } else { 0.0 } })
}

/// Largest admissible imaginary residue in the energy functional.
pub const ENERGY_RESIDUE_TOL: f64 = 1e-8;

/// `A = ⟨Op(−ã)u, u⟩` for a real symbol `ã`.
pub fn energy_functional(a: &dyn Symbol, u: &SpectralState) -> Result<f64> {
    let q = quadratic_form(a, u)?;
    if q.residue > ENERGY_RESIDUE_TOL {
        return Err(Error::Numerical(format!("energy functional residue {:.3e} exceeds tolerance", q.residue)));
    }
    Ok(-q.value)
}

/// `F(u₀) = ⟨Op(ã)u₀,u₀⟩ + β‖u₀‖²`; negative values certify growth.
pub fn criterion_f(u0: &SpectralState, a: &dyn Symbol, beta: f64) -> Result<f64> {
    let q = quadratic_form(a, u0)?;
    Ok(q.value + beta * u0.l2_norm().powi(2))
}

/// Band-limited bump profile χ₀ for wave packets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bump {
    /// `χ₀ ≡ 1`
    Constant,
    /// Product of periodized Gaussians `exp(−(x_j−c_j)²/(2w_j²))`.
    Gaussian { center: Vec<f64>, width: Vec<f64> },
    /// Explicit coefficients.
    Coefficients { state: SpectralState },
}

fn gaussian_coeffs(c: f64, w: f64) -> Vec<(i64, Complex64)> {
    let amp = w / (TAU).sqrt();
    let mut out = Vec::new();
    let mut k = 0i64;
    loop {
        let m = amp * (-(k * k) as f64 * w * w / 2.0).exp();
        if m < 1e-17 * amp && k > 0 {
            break;
        }
        out.push((k, Complex64::from_polar(m, -(k as f64) * c)));
        if k > 0 {
            out.push((-k, Complex64::from_polar(m, k as f64 * c)));
        }
        k += 1;
    }
    out
}

impl Bump {
    pub fn coefficients(&self, dim: usize) -> Result<Vec<([i64; 2], Complex64)>> {
        match self {
            Bump::Constant => Ok(vec![([0, 0], Complex64::new(1.0, 0.0))]),
            Bump::Gaussian { center, width } => {
                if center.len() != dim || width.len() != dim {
                    return invalid("gaussian bump: center/width length must equal the dimension");
                }
                if width.iter().any(|w| !(*w > 0.0)) {
                    return invalid("gaussian bump: widths must be positive");
                }
                let g0 = gaussian_coeffs(center[0], width[0]);
                if dim == 1 {
                    return Ok(g0.into_iter().map(|(k, c)| ([k, 0], c)).collect());
                }
                let g1 = gaussian_coeffs(center[1], width[1]);
                let mut out = Vec::with_capacity(g0.len() * g1.len());
                for (a, ca) in &g0 {
                    for (b, cb) in &g1 {
                        let c = ca * cb;
                        if c.norm() > 1e-18 {
                            out.push(([*a, *b], c));
                        }
                    }
                }
                Ok(out)
            }
            Bump::Coefficients { state } => {
                if state.dim() != dim {
                    return invalid("bump coefficients have the wrong dimension");
                }
                Ok(state
                    .coeffs()
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| **c != ZERO)
                    .map(|(i, c)| (state.mode_of(i), *c))
                    .collect())
            }
        }
    }
}

/// `ṽ_h = χ₀ e^{i ξ₀·x/h}` with `ξ₀/h` rounded to the integer lattice.
pub fn wave_packet(bump: &Bump, xi0: &[f64], packet_scale: f64, dim: usize, band: [usize; 2]) -> Result<SpectralState> {
    if xi0.len() != dim {
        return invalid("ξ₀ has the wrong dimension");
    }
    if !(packet_scale > 0.0) {
        return invalid("packet scale must be positive");
    }
    let mut shift = [0i64; 2];
    for j in 0..dim {
        shift[j] = (xi0[j] / packet_scale).round() as i64;
    }
    let mut u = SpectralState::zeros(dim, band)?;
    for (k, c) in bump.coefficients(dim)? {
        let q = [k[0] + shift[0], k[1] + shift[1]];
        match u.index(q) {
            Some(i) => u.coeffs[i] += c,
            None => {
                return Err(Error::Band(format!(
                    "wave packet mode {q:?} outside band {band:?} (shift {shift:?})"
                )))
            }
        }
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_state(seed: u64, dim: usize, band: [usize; 2]) -> SpectralState {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        SpectralState::from_fn(dim, band, |_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn single_mode_sobolev() {
        let u = SpectralState::mode(2, [5, 5], [3, 4]).unwrap();
        for s in [0.0, 0.5, 1.0, 2.0] {
            assert!((sobolev_norm(&u, s) - 26f64.powf(s / 2.0)).abs() < 1e-12);
        }
        let v = random_state(3, 2, [4, 4]);
        let l2 = v.coeffs().iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert_eq!(sobolev_norm(&v, 0.0), l2);
        let n = sobolev_norms(&v, &[0.25, 1.0]);
        assert!((n[0] - sobolev_norm(&v, 0.25)).abs() < 1e-12);
        assert!(n[1] >= n[0]);
    }

    #[test]
    fn grid_round_trip() {
        let u = random_state(1, 2, [5, 3]);
        let fft = GridFft::new([16, 9]);
        let g = fft.to_grid(&u).unwrap();
        let x = fft.point(3, 4);
        assert!((g[3 * 9 + 4] - u.eval(x)).norm() < 1e-12);
        let (w, tail) = fft.from_grid(g, 2, [5, 3]).unwrap();
        assert!(w.distance(&u).unwrap() < 1e-12 && tail < 1e-12);
    }

    #[test]
    fn xi_symbol_is_derivative() {
        let u = SpectralState::mode(2, [4, 4], [2, -3]).unwrap();
        let a = XiComponent { dim: 2, j: 1 };
        let r = weyl_apply(&a, &u).unwrap();
        assert!((r.state.get([2, -3]) - c(-3.0, 0.0)).norm() < 1e-15);
        assert_eq!(r.truncation, 0.0);
    }

    #[test]
    fn multiplier_matches_fft_product() {
        let f = FourierScalarField::cosines(&[([1, 0], 0.7), ([1, 2], -0.2), ([0, 0], 0.1)]);
        let a = MultiplierSymbol::from_scalar(2, &f);
        let u = random_state(5, 2, [6, 6]);
        let big = [8, 8];
        let (ub, _) = u.rebanded(big).unwrap();
        let r = weyl_apply(&a, &ub).unwrap();
        let fft = GridFft::new([32, 32]);
        let mut g = fft.to_grid(&ub).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                g[i * 32 + j] *= f.eval(fft.point(i, j));
            }
        }
        let (w, _) = fft.from_grid(g, 2, big).unwrap();
        assert!(w.distance(&r.state).unwrap() < 1e-12 * w.l2_norm());
    }

    #[test]
    fn transport_symbol_matches_vector_field() {
        let v = FourierVectorField::builder(2).sin(0, [1, 0], 0, 1.0).sin(1, [0, 1], 0, 1.0).build().unwrap();
        let a = TransportSymbol::new(&v, 0.0);
        let u = SpectralState::mode(2, [4, 4], [1, 0]).unwrap();
        // Op(iξ·V)u = V·∇u + ½ div V u
        let r = weyl_apply(&a, &u).unwrap().state;
        let x = [0.3, 1.1];
        let vv = v.eval(0.0, x);
        let e = Complex64::from_polar(1.0, x[0]);
        let exact = vv[0] * Complex64::i() * e + 0.5 * v.div(0.0, x) * e;
        assert!((r.eval(x) - exact).norm() < 1e-12);
    }

    #[test]
    fn hermitian_for_real_symbol() {
        let a = FnSymbol::new(2, [2, 2], 1.0, |x: [f64; 2], xi: [f64; 2]| {
            c((1.0 + xi[0] * xi[0] + xi[1] * xi[1]).sqrt() * (1.0 + 0.3 * x[0].cos() + 0.2 * (x[0] - 2.0 * x[1]).sin()), 0.0)
        });
        let t = SpectralState::zeros(2, [3, 3]).unwrap();
        let m = weyl_matrix(&a, &t).unwrap();
        for i in 0..m.len() {
            for j in 0..m.len() {
                assert!((m[i][j] - m[j][i].conj()).norm() < 1e-10);
            }
        }
        let u = random_state(9, 2, [3, 3]);
        let q = weyl_apply(&a, &u).unwrap().state.inner(&u).unwrap();
        assert!(q.im.abs() < 1e-10 * q.norm());
    }

    #[test]
    fn angular_symbol_homogeneity_and_cutoff() {
        let m = 8;
        let n_theta = 16;
        let samples: Vec<Vec<f64>> = (0..n_theta)
            .map(|t| {
                let th = TAU * t as f64 / n_theta as f64;
                (0..m * m).map(|i| 1.0 + 0.5 * th.cos() * (TAU * (i / m) as f64 / m as f64).sin()).collect()
            })
            .collect();
        let (a, tail) = AngularGridSymbol::from_samples(&samples, m, [2, 2], 0.5, true).unwrap();
        assert!(tail < 1e-12);
        let x = [0.4, 2.0];
        assert_eq!(a.eval(x, [0.6, 0.7]).unwrap(), ZERO);
        let v1 = a.eval(x, [2.0, 1.0]).unwrap();
        let v2 = a.eval(x, [6.0, 3.0]).unwrap();
        assert!((v2 - v1 * 3f64.powf(0.5)).norm() < 1e-10 * v2.norm());
        let exact = 5f64.sqrt().powf(0.5) * (1.0 + 0.5 * (2.0 / 5f64.sqrt()) * x[0].sin());
        assert!((v1.re - exact).abs() < 1e-2);
    }

    #[test]
    fn wave_packet_shift_and_overflow() {
        let u = wave_packet(&Bump::Constant, &[0.5, 0.25], 0.125, 2, [8, 8]).unwrap();
        assert_eq!(u.get([4, 2]), c(1.0, 0.0));
        assert!(wave_packet(&Bump::Constant, &[2.0, 0.0], 0.125, 2, [8, 8]).is_err());
        let g = Bump::Gaussian { center: vec![1.0, 2.0], width: vec![0.5, 0.7] };
        let w = wave_packet(&g, &[0.0, 0.0], 1.0, 2, [24, 24]).unwrap();
        let x = [1.3, 1.8];
        let exact = (-(0.3f64).powi(2) / 0.5).exp() * (-(0.2f64).powi(2) / (2.0 * 0.49)).exp();
        assert!((w.eval(x).re - exact).abs() < 1e-10);
    }

    #[test]
    fn energy_and_criterion() {
        let u = random_state(2, 2, [3, 3]);
        let zero = ConstantSymbol { dim: 2, value: ZERO };
        assert_eq!(energy_functional(&zero, &u).unwrap(), 0.0);
        let one = ConstantSymbol { dim: 2, value: c(1.0, 0.0) };
        let n2 = u.l2_norm().powi(2);
        assert!((energy_functional(&one, &u).unwrap() + n2).abs() < 1e-12);
        let f0 = criterion_f(&u, &one, 0.0).unwrap();
        let f1 = criterion_f(&u, &one, 2.0).unwrap();
        assert!((f1 - f0 - 2.0 * n2).abs() < 1e-10);
    }

    #[test]
    fn smooth_sizes() {
        assert_eq!(smooth_size(193), 200);
        assert_eq!(smooth_size(7), 8);
        assert_eq!(cutoff_chi(0.5), 1.0);
        assert_eq!(cutoff_chi(2.5), 0.0);
        assert!((cutoff_chi(1.5) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn weyl_is_linear(seed in 0u64..1000, s in -2.0f64..2.0) {
            let a = FnSymbol::new(2, [1, 1], 1.0, |x: [f64; 2], xi: [f64; 2]| c(xi[0] * x[1].cos() + 0.3, xi[1] * x[0].sin()));
            let u = random_state(seed, 2, [3, 3]);
            let w = random_state(seed + 1, 2, [3, 3]);
            let lhs = weyl_apply(&a, &u.axpy(c(s, 0.5), &w).unwrap()).unwrap().state;
            let rhs = weyl_apply(&a, &u).unwrap().state.axpy(c(s, 0.5), &weyl_apply(&a, &w).unwrap().state).unwrap();
            prop_assert!(lhs.distance(&rhs).unwrap() < 1e-12 * (1.0 + lhs.l2_norm()));
        }

        #[test]
        fn real_symbol_has_real_form(seed in 0u64..1000) {
            let a = FnSymbol::new(2, [2, 1], 0.5, |x: [f64; 2], xi: [f64; 2]| {
                c((1.0 + xi[0] * xi[0] + xi[1] * xi[1]).powf(0.25) * (2.0 + (x[0] + x[1]).cos()) + xi[0] * (2.0 * x[0]).sin(), 0.0)
            });
            let u = random_state(seed, 2, [4, 4]);
            let q = quadratic_form(&a, &u).unwrap();
            prop_assert!(q.residue < 1e-10);
        }

        #[test]
        fn sobolev_monotone(seed in 0u64..1000, s in 0.0f64..2.0, d in 0.0f64..1.0) {
            let u = random_state(seed, 2, [4, 4]);
            prop_assert!(sobolev_norm(&u, s + d) >= sobolev_norm(&u, s) * (1.0 - 1e-14));
        }
    }
}
