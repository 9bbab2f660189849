//! Band-limited vector fields on T^n (n = 1, 2), their flows, variational
//! flows and the symplectic lift to the cotangent bundle.
//!
//! Everything is stored internally as two-dimensional; a one-dimensional
//! field simply never has a `k2` component and its second coordinate is
//! ignored.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const TAU: f64 = 2.0 * PI;

/// Wrap a coordinate into `[0, 2π)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y >= TAU {
        0.0
    } else {
        y
    }
}

/// Signed representative of an angle difference in `(-π, π]`.
#[inline]
pub fn wrap_signed(d: f64) -> f64 {
    let y = wrap(d + PI) - PI;
    if y <= -PI {
        y + TAU
    } else {
        y
    }
}

/// Geodesic distance on the flat torus.
pub fn torus_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let d0 = wrap_signed(a[0] - b[0]);
    let d1 = wrap_signed(a[1] - b[1]);
    (d0 * d0 + d1 * d1).sqrt()
}

/// A point of T^n with coordinates kept in `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    dim: usize,
    x: [f64; 2],
}

impl TorusPoint {
    pub fn new(coords: &[f64]) -> Result<Self> {
        match coords.len() {
            1 => Ok(Self { dim: 1, x: [wrap(coords[0]), 0.0] }),
            2 => Ok(Self { dim: 2, x: [wrap(coords[0]), wrap(coords[1])] }),
            n => invalid(format!("torus dimension {n} not supported")),
        }
    }

    pub fn new2(x1: f64, x2: f64) -> Self {
        Self { dim: 2, x: [wrap(x1), wrap(x2)] }
    }

    pub fn new1(x1: f64) -> Self {
        Self { dim: 1, x: [wrap(x1), 0.0] }
    }

    pub(crate) fn from_raw(dim: usize, x: [f64; 2]) -> Self {
        let mut p = Self { dim, x: [wrap(x[0]), wrap(x[1])] };
        if dim == 1 {
            p.x[1] = 0.0;
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.x[..self.dim]
    }

    pub fn raw(&self) -> [f64; 2] {
        self.x
    }

    pub fn distance(&self, other: &TorusPoint) -> f64 {
        torus_distance(self.x, other.x)
    }
}

/// One Fourier mode `v e^{i(k·x + ℓωt)}` of a vector field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldMode {
    pub k: [i32; 2],
    pub l: i32,
    pub v: [Complex64; 2],
}

fn is_canonical(k: [i32; 2], l: i32) -> bool {
    (k[0], k[1], l) > (0, 0, 0)
}

/// Real vector field on T^n, optionally 2π/ω-periodic in time, stored by
/// its nonzero Fourier coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierVectorField {
    dim: usize,
    k_max: usize,
    l_max: usize,
    omega: f64,
    modes: Vec<FieldMode>,
    // one representative per conjugate pair, plus the real mean
    half: Vec<FieldMode>,
    mean: [f64; 2],
}

const REALITY_TOL: f64 = 1e-12;

impl FourierVectorField {
    /// Build from the full mode list; duplicates are summed and the
    /// reality symmetry `v_{-k,-ℓ} = conj(v_{k,ℓ})` is enforced.
    pub fn new(dim: usize, modes: Vec<FieldMode>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return invalid(format!("field dimension {dim} not supported"));
        }
        let mut map: BTreeMap<([i32; 2], i32), [Complex64; 2]> = BTreeMap::new();
        for m in modes {
            if dim == 1 && (m.k[1] != 0 || m.v[1] != Complex64::new(0.0, 0.0)) {
                return invalid("one-dimensional field with a second component");
            }
            let e = map.entry((m.k, m.l)).or_insert([Complex64::new(0.0, 0.0); 2]);
            e[0] += m.v[0];
            e[1] += m.v[1];
        }
        map.retain(|_, v| v[0].norm() + v[1].norm() > 0.0);
        let mut scale: f64 = 0.0;
        for v in map.values() {
            scale = scale.max(v[0].norm()).max(v[1].norm());
        }
        let tol = REALITY_TOL * scale.max(1.0);
        for (&(k, l), v) in &map {
            let partner = map.get(&([-k[0], -k[1]], -l));
            let ok = match partner {
                Some(w) => (0..2).all(|j| (w[j] - v[j].conj()).norm() <= tol),
                None => false,
            };
            if !ok {
                return invalid(format!("reality symmetry violated at k={k:?}, l={l}"));
            }
        }
        let mut full = Vec::with_capacity(map.len());
        let mut half = Vec::new();
        let mut mean = [0.0; 2];
        let (mut k_max, mut l_max) = (0usize, 0usize);
        for (&(k, l), &v) in &map {
            k_max = k_max.max(k[0].unsigned_abs() as usize).max(k[1].unsigned_abs() as usize);
            l_max = l_max.max(l.unsigned_abs() as usize);
            full.push(FieldMode { k, l, v });
            if k == [0, 0] && l == 0 {
                mean = [v[0].re, v[1].re];
            } else if is_canonical(k, l) {
                half.push(FieldMode { k, l, v });
            }
        }
        Ok(Self { dim, k_max, l_max, omega: 1.0, modes: full, half, mean })
    }

    pub fn builder(dim: usize) -> FieldBuilder {
        FieldBuilder { dim, modes: Vec::new() }
    }

    /// Constant field ν.
    pub fn constant(nu: &[f64]) -> Result<Self> {
        let mut b = Self::builder(nu.len());
        b = b.constant(nu);
        b.build()
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, Vec::new()).expect("zero field")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn k_max(&self) -> usize {
        self.k_max
    }
    pub fn l_max(&self) -> usize {
        self.l_max
    }
    pub fn omega(&self) -> f64 {
        self.omega
    }
    pub fn modes(&self) -> &[FieldMode] {
        &self.modes
    }
    pub fn is_autonomous(&self) -> bool {
        self.l_max == 0
    }

    /// Field value at `(t, x)`.
    #[inline]
    pub fn eval(&self, t: f64, x: [f64; 2]) -> [f64; 2] {
        let mut out = self.mean;
        for m in &self.half {
            let th = m.k[0] as f64 * x[0] + m.k[1] as f64 * x[1] + m.l as f64 * self.omega * t;
            let (s, c) = th.sin_cos();
            out[0] += 2.0 * (m.v[0].re * c - m.v[0].im * s);
            out[1] += 2.0 * (m.v[1].re * c - m.v[1].im * s);
        }
        out
    }

    /// Field value and Jacobian `J[i][j] = ∂_j V_i`.
    #[inline]
    pub fn eval_jac(&self, t: f64, x: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut v = self.mean;
        let mut j = [[0.0; 2]; 2];
        for m in &self.half {
            let k0 = m.k[0] as f64;
            let k1 = m.k[1] as f64;
            let th = k0 * x[0] + k1 * x[1] + m.l as f64 * self.omega * t;
            let (s, c) = th.sin_cos();
            for i in 0..2 {
                let re = m.v[i].re * c - m.v[i].im * s;
                let im = m.v[i].re * s + m.v[i].im * c;
                v[i] += 2.0 * re;
                j[i][0] -= 2.0 * k0 * im;
                j[i][1] -= 2.0 * k1 * im;
            }
        }
        (v, j)
    }

    /// Divergence at `(t, x)`.
    pub fn div(&self, t: f64, x: [f64; 2]) -> f64 {
        let (_, j) = self.eval_jac(t, x);
        j[0][0] + j[1][1]
    }

    /// Supremum of |V| estimated on a grid over space and one time period.
    pub fn sup_norm(&self) -> f64 {
        let n = 4 * self.k_max.max(1) + 8;
        let nt = if self.is_autonomous() { 1 } else { 4 * self.l_max + 8 };
        let mut best: f64 = 0.0;
        for it in 0..nt {
            let t = TAU * it as f64 / nt as f64;
            for i in 0..n {
                for j in 0..(if self.dim == 1 { 1 } else { n }) {
                    let x = [TAU * i as f64 / n as f64, TAU * j as f64 / n as f64];
                    let v = self.eval(t, x);
                    best = best.max((v[0] * v[0] + v[1] * v[1]).sqrt());
                }
            }
        }
        best
    }

    /// Per-component supremum, used by the time-step guard.
    pub fn sup_components(&self) -> [f64; 2] {
        // cheap upper bound: sum of coefficient moduli
        let mut s = [self.mean[0].abs(), self.mean[1].abs()];
        for m in &self.half {
            s[0] += 2.0 * m.v[0].norm();
            s[1] += 2.0 * m.v[1].norm();
        }
        s
    }

    pub fn scaled(&self, s: f64) -> Self {
        let modes = self.modes.iter().map(|m| FieldMode { k: m.k, l: m.l, v: [m.v[0] * s, m.v[1] * s] }).collect();
        Self::new(self.dim, modes).expect("scaling preserves reality")
    }

    pub fn plus(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return invalid("dimension mismatch in field sum");
        }
        let mut modes = self.modes.clone();
        modes.extend_from_slice(&other.modes);
        Self::new(self.dim, modes)
    }

    /// Coefficient of mode `(k, ℓ)` (zero if absent).
    pub fn coeff(&self, k: [i32; 2], l: i32) -> [Complex64; 2] {
        self.modes
            .iter()
            .find(|m| m.k == k && m.l == l)
            .map(|m| m.v)
            .unwrap_or([Complex64::new(0.0, 0.0); 2])
    }

    /// Spatial coefficients at a frozen time: `Σ_ℓ v_{k,ℓ} e^{iℓωt}` for each `k`.
    pub fn spatial_coeffs(&self, t: f64) -> Vec<([i32; 2], [Complex64; 2])> {
        let mut map: BTreeMap<[i32; 2], [Complex64; 2]> = BTreeMap::new();
        for m in &self.modes {
            let ph = Complex64::from_polar(1.0, m.l as f64 * self.omega * t);
            let e = map.entry(m.k).or_insert([Complex64::new(0.0, 0.0); 2]);
            e[0] += m.v[0] * ph;
            e[1] += m.v[1] * ph;
        }
        map.into_iter().collect()
    }

    /// Autonomous field obtained by freezing time.
    pub fn frozen(&self, t: f64) -> Self {
        let modes = self
            .spatial_coeffs(t)
            .into_iter()
            .map(|(k, v)| FieldMode { k, l: 0, v })
            .collect();
        Self::new(self.dim, modes).expect("freezing preserves reality")
    }

    /// JSON form `{dim, K, L, coeffs: [[k..., ℓ, re..., im...]]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let coeffs: Vec<Vec<f64>> = self
            .modes
            .iter()
            .map(|m| {
                let mut row: Vec<f64> = m.k[..self.dim].iter().map(|&k| k as f64).collect();
                row.push(m.l as f64);
                row.extend(m.v[..self.dim].iter().map(|c| c.re));
                row.extend(m.v[..self.dim].iter().map(|c| c.im));
                row
            })
            .collect();
        serde_json::json!({"dim": self.dim, "K": self.k_max, "L": self.l_max, "coeffs": coeffs})
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let dim = value
            .get("dim")
            .and_then(|d| d.as_u64())
            .ok_or_else(|| Error::Invalid("field json: missing dim".into()))? as usize;
        if dim != 1 && dim != 2 {
            return invalid(format!("field json: dim {dim}"));
        }
        let rows = value
            .get("coeffs")
            .and_then(|c| c.as_array())
            .ok_or_else(|| Error::Invalid("field json: missing coeffs".into()))?;
        let mut modes = Vec::with_capacity(rows.len());
        for row in rows {
            let r: Vec<f64> = row
                .as_array()
                .ok_or_else(|| Error::Invalid("field json: coefficient row".into()))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| Error::Invalid("field json: non-number".into())))
                .collect::<Result<_>>()?;
            if r.len() != 3 * dim + 1 {
                return invalid(format!("field json: row of length {} for dim {dim}", r.len()));
            }
            let mut k = [0i32; 2];
            for j in 0..dim {
                if r[j].fract() != 0.0 {
                    return invalid("field json: non-integer wavenumber");
                }
                k[j] = r[j] as i32;
            }
            let l = r[dim] as i32;
            let mut v = [Complex64::new(0.0, 0.0); 2];
            for j in 0..dim {
                v[j] = Complex64::new(r[dim + 1 + j], r[2 * dim + 1 + j]);
            }
            modes.push(FieldMode { k, l, v });
        }
        let f = Self::new(dim, modes)?;
        if let Some(kk) = value.get("K").and_then(|v| v.as_u64()) {
            if (kk as usize) < f.k_max {
                return invalid("field json: coefficients exceed declared K");
            }
        }
        if let Some(ll) = value.get("L").and_then(|v| v.as_u64()) {
            if (ll as usize) < f.l_max {
                return invalid("field json: coefficients exceed declared L");
            }
        }
        Ok(f)
    }
}

/// Convenience builder adding real trigonometric terms.
pub struct FieldBuilder {
    dim: usize,
    modes: Vec<FieldMode>,
}

impl FieldBuilder {
    fn push_pair(mut self, k: [i32; 2], l: i32, comp: usize, c: Complex64) -> Self {
        let mut v = [Complex64::new(0.0, 0.0); 2];
        v[comp] = c;
        if k == [0, 0] && l == 0 {
            v[comp] = Complex64::new(c.re * 2.0, 0.0);
            self.modes.push(FieldMode { k, l, v });
            return self;
        }
        self.modes.push(FieldMode { k, l, v });
        let mut w = [Complex64::new(0.0, 0.0); 2];
        w[comp] = c.conj();
        self.modes.push(FieldMode { k: [-k[0], -k[1]], l: -l, v: w });
        self
    }

    pub fn constant(mut self, nu: &[f64]) -> Self {
        let mut v = [Complex64::new(0.0, 0.0); 2];
        for (j, &c) in nu.iter().enumerate().take(2) {
            v[j] = Complex64::new(c, 0.0);
        }
        self.modes.push(FieldMode { k: [0, 0], l: 0, v });
        self
    }

    /// Adds `amp·cos(k·x + ℓt)` to component `comp`.
    pub fn cos(self, comp: usize, k: [i32; 2], l: i32, amp: f64) -> Self {
        self.push_pair(k, l, comp, Complex64::new(amp / 2.0, 0.0))
    }

    /// Adds `amp·sin(k·x + ℓt)` to component `comp`.
    pub fn sin(self, comp: usize, k: [i32; 2], l: i32, amp: f64) -> Self {
        if k == [0, 0] && l == 0 {
            return self;
        }
        self.push_pair(k, l, comp, Complex64::new(0.0, -amp / 2.0))
    }

    /// Adds the mode `v e^{i(k·x+ℓt)}` together with its conjugate.
    pub fn mode(self, k: [i32; 2], l: i32, v: [Complex64; 2]) -> Self {
        let s = self.push_pair(k, l, 0, v[0]);
        s.push_pair(k, l, 1, v[1])
    }

    pub fn build(self) -> Result<FourierVectorField> {
        FourierVectorField::new(self.dim, self.modes)
    }
}

/// Returns `V(t, x)` as a vector of length n.
pub fn evaluate_field(v: &FourierVectorField, t: f64, x: &TorusPoint) -> Vec<f64> {
    let out = v.eval(t, x.raw());
    out[..v.dim()].to_vec()
}

/// Real scalar band-limited function on T², e.g. an energy function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierScalarField {
    modes: Vec<([i32; 2], Complex64)>,
}

impl FourierScalarField {
    /// Build from `(k, c)` pairs; the conjugate partners must be present.
    pub fn new(modes: Vec<([i32; 2], Complex64)>) -> Result<Self> {
        let mut map: BTreeMap<[i32; 2], Complex64> = BTreeMap::new();
        for (k, c) in modes {
            *map.entry(k).or_insert(Complex64::new(0.0, 0.0)) += c;
        }
        map.retain(|_, c| c.norm() > 0.0);
        let scale = map.values().fold(1.0f64, |a, c| a.max(c.norm()));
        for (k, c) in &map {
            let p = map.get(&[-k[0], -k[1]]).copied().unwrap_or_default();
            if (p - c.conj()).norm() > REALITY_TOL * scale {
                return invalid(format!("scalar field not real at k={k:?}"));
            }
        }
        Ok(Self { modes: map.into_iter().collect() })
    }

    /// `Σ_j a_j cos(k_j·x)` for the given real amplitudes.
    pub fn cosines(terms: &[([i32; 2], f64)]) -> Self {
        let mut modes = Vec::new();
        for &(k, a) in terms {
            if k == [0, 0] {
                modes.push((k, Complex64::new(a, 0.0)));
            } else {
                modes.push((k, Complex64::new(a / 2.0, 0.0)));
                modes.push(([-k[0], -k[1]], Complex64::new(a / 2.0, 0.0)));
            }
        }
        Self::new(modes).expect("cosine sum is real")
    }

    pub fn modes(&self) -> &[([i32; 2], Complex64)] {
        &self.modes
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let mut s = 0.0;
        for (k, c) in &self.modes {
            let th = k[0] as f64 * x[0] + k[1] as f64 * x[1];
            let (sn, cs) = th.sin_cos();
            s += c.re * cs - c.im * sn;
        }
        s
    }

    pub fn grad(&self, x: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (k, c) in &self.modes {
            let th = k[0] as f64 * x[0] + k[1] as f64 * x[1];
            let (sn, cs) = th.sin_cos();
            let im = c.re * sn + c.im * cs;
            g[0] -= k[0] as f64 * im;
            g[1] -= k[1] as f64 * im;
        }
        g
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { modes: self.modes.iter().map(|&(k, c)| (k, c * s)).collect() }
    }
}

/// Step-size controls for trajectory integration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepControl {
    /// Classical RK4 with (at most) the given step.
    Fixed { h: f64 },
    /// Dormand–Prince 5(4) with local error tolerance.
    Adaptive { tol: f64, h_init: f64, h_min: f64 },
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::Fixed { h: 0.01 }
    }
}

#[inline]
fn axpy<const D: usize>(y: &[f64; D], a: f64, k: &[f64; D]) -> [f64; D] {
    let mut o = *y;
    for i in 0..D {
        o[i] += a * k[i];
    }
    o
}

/// One classical RK4 step.
#[inline]
pub fn rk4_step<const D: usize, F>(f: &F, t: f64, y: &[f64; D], h: f64) -> [f64; D]
where
    F: Fn(f64, &[f64; D]) -> [f64; D],
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &axpy(y, 0.5 * h, &k1));
    let k3 = f(t + 0.5 * h, &axpy(y, 0.5 * h, &k2));
    let k4 = f(t + h, &axpy(y, h, &k3));
    let mut o = *y;
    for i in 0..D {
        o[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    o
}

/// Integrate `y' = f(t, y)` from `t0` to `t1` (either direction), calling
/// `obs(t, y)` at the initial point and after every accepted step.
pub fn integrate<const D: usize, F, O>(
    f: F,
    y0: [f64; D],
    t0: f64,
    t1: f64,
    ctrl: StepControl,
    mut obs: O,
) -> Result<[f64; D]>
where
    F: Fn(f64, &[f64; D]) -> [f64; D],
    O: FnMut(f64, &[f64; D]),
{
    obs(t0, &y0);
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y0);
    }
    match ctrl {
        StepControl::Fixed { h } => {
            if !(h > 0.0) {
                return Err(Error::Integration(format!("nonpositive step {h}")));
            }
            let n = (span.abs() / h).ceil().max(1.0) as usize;
            let hh = span / n as f64;
            let mut y = y0;
            for i in 0..n {
                let t = t0 + i as f64 * hh;
                y = rk4_step(&f, t, &y, hh);
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(Error::Integration("non-finite state".into()));
                }
                obs(t + hh, &y);
            }
            Ok(y)
        }
        StepControl::Adaptive { tol, h_init, h_min } => dopri(&f, y0, t0, t1, tol, h_init, h_min, &mut obs),
    }
}

#[allow(clippy::too_many_arguments)]
fn dopri<const D: usize, F, O>(
    f: &F,
    y0: [f64; D],
    t0: f64,
    t1: f64,
    tol: f64,
    h_init: f64,
    h_min: f64,
    obs: &mut O,
) -> Result<[f64; D]>
where
    F: Fn(f64, &[f64; D]) -> [f64; D],
    O: FnMut(f64, &[f64; D]),
{
    const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B4: [f64; 7] =
        [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];
    let dir = (t1 - t0).signum();
    let mut t = t0;
    let mut y = y0;
    let mut h = h_init.abs().max(h_min);
    while (t1 - t) * dir > 0.0 {
        if h < h_min {
            return Err(Error::Integration(format!("step size underflow at t = {t}")));
        }
        let hs = dir * h.min((t1 - t).abs());
        let mut k = [[0.0; D]; 7];
        k[0] = f(t, &y);
        for s in 1..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                for i in 0..D {
                    ys[i] += hs * A[s][j] * kj[i];
                }
            }
            k[s] = f(t + C[s] * hs, &ys);
        }
        let mut y5 = y;
        let mut err: f64 = 0.0;
        for i in 0..D {
            let mut s5 = 0.0;
            let mut s4 = 0.0;
            for s in 0..7 {
                s5 += A[6][s.min(5)] * if s < 6 { k[s][i] } else { 0.0 };
                s4 += B4[s] * k[s][i];
            }
            y5[i] += hs * s5;
            let e = hs * (s5 - s4);
            let sc = tol * (1.0 + y[i].abs().max(y5[i].abs()));
            err = err.max((e / sc).abs());
        }
        if !y5.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration("non-finite state".into()));
        }
        if err <= 1.0 {
            t += hs;
            y = y5;
            obs(t, &y);
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = hs.abs() * fac;
    }
    Ok(y)
}

/// `φ^t(x)`, the time-`t` map started at time zero.
pub fn flow(v: &FourierVectorField, x: &TorusPoint, t: f64, ctrl: StepControl) -> Result<TorusPoint> {
    flow_from(v, x, 0.0, t, ctrl)
}

/// Flow from time `t0` to `t0 + t`.
pub fn flow_from(v: &FourierVectorField, x: &TorusPoint, t0: f64, t: f64, ctrl: StepControl) -> Result<TorusPoint> {
    let y = integrate(|s, y: &[f64; 2]| v.eval(s, *y), x.raw(), t0, t0 + t, ctrl, |_, _| {})?;
    Ok(TorusPoint::from_raw(x.dim(), y))
}

/// Base point together with the flow differential.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowJet {
    pub x_t: TorusPoint,
    /// `j[r][c] = ∂(φ^t)_r / ∂x_c`
    pub j: [[f64; 2]; 2],
    pub t: f64,
}

impl FlowJet {
    pub fn det(&self) -> f64 {
        if self.x_t.dim() == 1 {
            self.j[0][0]
        } else {
            self.j[0][0] * self.j[1][1] - self.j[0][1] * self.j[1][0]
        }
    }
}

/// Integrates `J' = dV(φ^t x) J` jointly with the base flow.
pub fn variational_flow(v: &FourierVectorField, x: &TorusPoint, t: f64, ctrl: StepControl) -> Result<FlowJet> {
    variational_flow_from(v, x, 0.0, t, ctrl)
}

pub fn variational_flow_from(
    v: &FourierVectorField,
    x: &TorusPoint,
    t0: f64,
    t: f64,
    ctrl: StepControl,
) -> Result<FlowJet> {
    let p = x.raw();
    let y0 = [p[0], p[1], 1.0, 0.0, 0.0, if x.dim() == 1 { 0.0 } else { 1.0 }];
    let y = integrate(
        |s, y: &[f64; 6]| {
            let (vv, a) = v.eval_jac(s, [y[0], y[1]]);
            [
                vv[0],
                vv[1],
                a[0][0] * y[2] + a[0][1] * y[4],
                a[0][0] * y[3] + a[0][1] * y[5],
                a[1][0] * y[2] + a[1][1] * y[4],
                a[1][0] * y[3] + a[1][1] * y[5],
            ]
        },
        y0,
        t0,
        t0 + t,
        ctrl,
        |_, _| {},
    )?;
    let mut j = [[y[2], y[3]], [y[4], y[5]]];
    if x.dim() == 1 {
        j[0][1] = 0.0;
        j[1] = [0.0, 0.0];
    }
    Ok(FlowJet { x_t: TorusPoint::from_raw(x.dim(), [y[0], y[1]]), j, t })
}

/// A point of the cotangent bundle T*T^n.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CotangentState {
    pub x: TorusPoint,
    xi: [f64; 2],
    unit: bool,
}

impl CotangentState {
    pub fn new(x: TorusPoint, xi: &[f64]) -> Result<Self> {
        if xi.len() != x.dim() {
            return invalid("covector dimension mismatch");
        }
        let mut c = [0.0; 2];
        c[..xi.len()].copy_from_slice(xi);
        if c[0] == 0.0 && c[1] == 0.0 {
            return invalid("zero covector");
        }
        Ok(Self { x, xi: c, unit: false })
    }

    /// Unit-covector representative on S*T^n.
    pub fn unit(x: TorusPoint, xi: &[f64]) -> Result<Self> {
        let s = Self::new(x, xi)?;
        Ok(s.normalized())
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi[..self.x.dim()]
    }
    pub fn xi_raw(&self) -> [f64; 2] {
        self.xi
    }
    pub fn is_unit(&self) -> bool {
        self.unit
    }
    pub fn norm(&self) -> f64 {
        (self.xi[0] * self.xi[0] + self.xi[1] * self.xi[1]).sqrt()
    }
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self { x: self.x, xi: [self.xi[0] / n, self.xi[1] / n], unit: true }
    }
    pub(crate) fn from_raw(x: TorusPoint, xi: [f64; 2], unit: bool) -> Self {
        Self { x, xi, unit }
    }
}

/// Right-hand side of the lifted flow in `(x, η)` with `η' = -dVᵀη`.
#[inline]
pub fn lift_rhs(v: &FourierVectorField, t: f64, y: &[f64; 4]) -> [f64; 4] {
    let (vv, a) = v.eval_jac(t, [y[0], y[1]]);
    [vv[0], vv[1], -(a[0][0] * y[2] + a[1][0] * y[3]), -(a[0][1] * y[2] + a[1][1] * y[3])]
}

/// `Φ^t(x, ξ) = (φ^t x, [dφ^t(x)]^{-T} ξ)`.
pub fn lift_flow(v: &FourierVectorField, s: &CotangentState, t: f64, ctrl: StepControl) -> Result<CotangentState> {
    lift_flow_from(v, s, 0.0, t, ctrl)
}

pub fn lift_flow_from(
    v: &FourierVectorField,
    s: &CotangentState,
    t0: f64,
    t: f64,
    ctrl: StepControl,
) -> Result<CotangentState> {
    let p = s.x.raw();
    let y = integrate(|tt, y: &[f64; 4]| lift_rhs(v, tt, y), [p[0], p[1], s.xi[0], s.xi[1]], t0, t0 + t, ctrl, |_, _| {})?;
    let mut xi = [y[2], y[3]];
    if s.x.dim() == 1 {
        xi[1] = 0.0;
    }
    Ok(CotangentState::from_raw(TorusPoint::from_raw(s.x.dim(), [y[0], y[1]]), xi, false))
}

/// Lift followed by renormalization to the unit cosphere.
pub fn projected_lift(v: &FourierVectorField, s: &CotangentState, t: f64, ctrl: StepControl) -> Result<CotangentState> {
    if !s.is_unit() {
        return invalid("projected lift needs a unit covector");
    }
    Ok(lift_flow(v, s, t, ctrl)?.normalized())
}

/// `h(x, ξ) = ξ · V(t, x)`.
pub fn hamiltonian(v: &FourierVectorField, s: &CotangentState, t: f64) -> f64 {
    let vv = v.eval(t, s.x.raw());
    s.xi[0] * vv[0] + s.xi[1] * vv[1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinsin() -> FourierVectorField {
        FourierVectorField::builder(2).sin(0, [1, 0], 0, 1.0).sin(1, [0, 1], 0, 1.0).build().unwrap()
    }

    #[test]
    fn evaluation_examples() {
        let c = FourierVectorField::constant(&[1.0, 2.0]).unwrap();
        assert_eq!(evaluate_field(&c, 3.0, &TorusPoint::new2(0.3, 4.0)), vec![1.0, 2.0]);
        let v = sinsin();
        let e = evaluate_field(&v, 1.0, &TorusPoint::new2(PI / 2.0, 0.0));
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
        let w = FourierVectorField::builder(2).cos(0, [1, 0], 2, 1.0).build().unwrap();
        let e = evaluate_field(&w, 0.0, &TorusPoint::new2(0.0, 0.0));
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
    }

    #[test]
    fn reality_is_enforced() {
        let bad = vec![FieldMode { k: [1, 0], l: 0, v: [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)] }];
        assert!(FourierVectorField::new(2, bad).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = FourierVectorField::builder(2).sin(0, [1, 0], 0, 1.0).cos(1, [1, 1], -2, 0.3).build().unwrap();
        let w = FourierVectorField::from_json(&v.to_json()).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn jacobian_matches_differences() {
        let v = FourierVectorField::builder(2)
            .sin(0, [1, 0], 0, 1.0)
            .cos(0, [1, 1], 1, 0.3)
            .sin(1, [2, -1], 0, 0.7)
            .build()
            .unwrap();
        let x = [0.4, 1.9];
        let (_, j) = v.eval_jac(0.3, x);
        let h = 1e-6;
        for c in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let (vp, vm) = (v.eval(0.3, xp), v.eval(0.3, xm));
            for r in 0..2 {
                assert!(((vp[r] - vm[r]) / (2.0 * h) - j[r][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn closed_form_scalar_flow() {
        let v = sinsin();
        let p = flow(&v, &TorusPoint::new2(0.1, 0.1), 5.0, StepControl::default()).unwrap();
        let exact = 2.0 * ((0.05f64).tan() * 5f64.exp()).atan();
        assert!((p.coords()[0] - exact).abs() < 1e-6);
        assert!((p.coords()[1] - exact).abs() < 1e-6);
        let q = flow(&v, &TorusPoint::new2(0.0, 0.0), 3.0, StepControl::default()).unwrap();
        assert_eq!(q.coords(), &[0.0, 0.0]);
    }

    #[test]
    fn adaptive_matches_fixed() {
        let v = sinsin();
        let ctrl = StepControl::Adaptive { tol: 1e-11, h_init: 0.1, h_min: 1e-12 };
        let p = flow(&v, &TorusPoint::new2(0.1, 0.1), 5.0, ctrl).unwrap();
        let exact = 2.0 * ((0.05f64).tan() * 5f64.exp()).atan();
        assert!((p.coords()[0] - exact).abs() < 1e-8);
    }

    #[test]
    fn linear_translation() {
        let v = FourierVectorField::constant(&[1.0, 2.0]).unwrap();
        let p = flow(&v, &TorusPoint::new2(0.5, 0.5), 1.5, StepControl::default()).unwrap();
        assert!(torus_distance(p.raw(), [2.0, 3.5]) < 1e-12);
        let jet = variational_flow(&v, &TorusPoint::new2(0.5, 0.5), 2.0, StepControl::default()).unwrap();
        assert_eq!(jet.j, [[1.0, 0.0], [0.0, 1.0]]);
        let s = CotangentState::new(TorusPoint::new2(0.1, 0.2), &[3.0, -1.0]).unwrap();
        let l = lift_flow(&v, &s, 4.0, StepControl::default()).unwrap();
        assert_eq!(l.xi(), &[3.0, -1.0]);
    }

    #[test]
    fn variational_at_fixed_points() {
        let v = sinsin();
        let t = 1.3;
        let jet = variational_flow(&v, &TorusPoint::new2(0.0, 0.0), t, StepControl::default()).unwrap();
        assert!((jet.j[0][0] - t.exp()).abs() < 1e-8 && (jet.j[1][1] - t.exp()).abs() < 1e-8);
        let jet = variational_flow(&v, &TorusPoint::new2(0.0, PI), t, StepControl::default()).unwrap();
        assert!((jet.j[0][0] - t.exp()).abs() < 1e-8 && (jet.j[1][1] - (-t).exp()).abs() < 1e-10);
        assert!(jet.j[0][1].abs() < 1e-15 && jet.j[1][0].abs() < 1e-15);
    }

    #[test]
    fn saddle_lift() {
        let v = sinsin();
        let t = 2.0;
        let s = CotangentState::new(TorusPoint::new2(0.0, PI), &[1.0, 0.0]).unwrap();
        let l = lift_flow(&v, &s, t, StepControl::default()).unwrap();
        assert!((l.xi()[0] - (-t).exp()).abs() < 1e-9 && l.xi()[1].abs() < 1e-15);
        let s = CotangentState::unit(TorusPoint::new2(0.0, PI), &[0.0, 1.0]).unwrap();
        let p = projected_lift(&v, &s, 5.0, StepControl::default()).unwrap();
        assert!((p.xi()[1] - 1.0).abs() < 1e-12);
        let s = CotangentState::unit(TorusPoint::new2(0.0, PI), &[1.0, 0.3]).unwrap();
        let p = projected_lift(&v, &s, 10.0, StepControl::default()).unwrap();
        assert!(p.xi()[0].abs() < 1e-7 && (p.xi()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_examples() {
        let c = FourierVectorField::constant(&[1.0, 2.0]).unwrap();
        let s = CotangentState::new(TorusPoint::new2(0.0, 0.0), &[3.0, 4.0]).unwrap();
        assert_eq!(hamiltonian(&c, &s, 0.0), 11.0);
        let s = CotangentState::new(TorusPoint::new2(0.0, 0.0), &[2.0, -1.0]).unwrap();
        assert_eq!(hamiltonian(&c, &s, 0.0), 0.0);
        let v = sinsin();
        let s = CotangentState::new(TorusPoint::new2(PI / 2.0, PI / 2.0), &[1.0, 1.0]).unwrap();
        assert!((hamiltonian(&v, &s, 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_field_gradient() {
        let e = FourierScalarField::cosines(&[([1, 0], -1.0 / 17.0), ([0, 1], -1.0 / 17.0)]);
        let x = [0.7, 2.1];
        assert!((e.eval(x) + (x[0].cos() + x[1].cos()) / 17.0).abs() < 1e-15);
        let g = e.grad(x);
        assert!((g[0] - x[0].sin() / 17.0).abs() < 1e-15);
    }

    use proptest::prelude::*;

    fn mixed() -> FourierVectorField {
        FourierVectorField::builder(2)
            .sin(0, [1, 0], 0, 1.0)
            .sin(1, [0, 1], 0, 1.0)
            .cos(0, [1, 1], 0, 0.2)
            .sin(1, [2, -1], 0, 0.15)
            .build()
            .unwrap()
    }

    fn lift4(v: &FourierVectorField, y: [f64; 4], t: f64) -> [f64; 4] {
        integrate(|tt, y: &[f64; 4]| lift_rhs(v, tt, y), y, 0.0, t, StepControl::Fixed { h: 0.005 }, |_, _| {}).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cocycle(x0 in 0.0..TAU, x1 in 0.0..TAU, t in 0.0..2.0f64, s in 0.0..2.0f64) {
            let v = mixed();
            let ctrl = StepControl::Fixed { h: 0.005 };
            let p = TorusPoint::new2(x0, x1);
            let a = flow(&v, &p, t + s, ctrl).unwrap();
            let b = flow(&v, &flow(&v, &p, t, ctrl).unwrap(), s, ctrl).unwrap();
            prop_assert!(torus_distance(a.raw(), b.raw()) < 1e-8);
        }

        #[test]
        fn chain_rule(x0 in 0.0..TAU, x1 in 0.0..TAU, t in 0.0..1.5f64, s in 0.0..1.5f64) {
            let v = mixed();
            let ctrl = StepControl::Fixed { h: 0.005 };
            let p = TorusPoint::new2(x0, x1);
            let jt = variational_flow(&v, &p, t, ctrl).unwrap();
            let js = variational_flow(&v, &jt.x_t, s, ctrl).unwrap();
            let j = variational_flow(&v, &p, t + s, ctrl).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    let prod = js.j[r][0] * jt.j[0][c] + js.j[r][1] * jt.j[1][c];
                    prop_assert!((prod - j.j[r][c]).abs() < 1e-7 * (1.0 + j.j[r][c].abs()));
                }
            }
        }

        #[test]
        fn hamiltonian_conserved(x0 in 0.0..TAU, x1 in 0.0..TAU, th in 0.0..TAU) {
            let v = mixed();
            let s = CotangentState::unit(TorusPoint::new2(x0, x1), &[th.cos(), th.sin()]).unwrap();
            let t = 3.0;
            let l = lift_flow(&v, &s, t, StepControl::default()).unwrap();
            let h0 = hamiltonian(&v, &s, 0.0);
            let h1 = hamiltonian(&v, &l, t);
            prop_assert!((h1 - h0).abs() <= 1e-8 * t * s.norm().max(l.norm()));
        }

        #[test]
        fn lift_is_homogeneous(x0 in 0.0..TAU, x1 in 0.0..TAU, th in 0.0..TAU, lam in 0.1..10.0f64) {
            let v = mixed();
            let xi = [th.cos(), th.sin()];
            let s = CotangentState::new(TorusPoint::new2(x0, x1), &xi).unwrap();
            let sl = CotangentState::new(TorusPoint::new2(x0, x1), &[lam * xi[0], lam * xi[1]]).unwrap();
            let a = lift_flow(&v, &s, 2.0, StepControl::default()).unwrap();
            let b = lift_flow(&v, &sl, 2.0, StepControl::default()).unwrap();
            for i in 0..2 {
                prop_assert!((b.xi()[i] - lam * a.xi()[i]).abs() <= 1e-12 * lam * a.norm().max(1.0));
            }
            prop_assert_eq!(a.x, b.x);
        }

        #[test]
        fn lift_is_symplectic(x0 in 0.0..TAU, x1 in 0.0..TAU, th in 0.0..TAU) {
            let v = mixed();
            let y0 = [x0, x1, th.cos(), th.sin()];
            let t = 1.0;
            let d = 1e-5;
            let mut z = [[0.0; 4]; 4];
            for c in 0..4 {
                let mut yp = y0;
                let mut ym = y0;
                yp[c] += d;
                ym[c] -= d;
                let (p, m) = (lift4(&v, yp, t), lift4(&v, ym, t));
                for r in 0..4 {
                    z[r][c] = (p[r] - m[r]) / (2.0 * d);
                }
            }
            // Ω = [[0, I], [−I, 0]] in (x, ξ)
            let omega = |a: usize, b: usize| -> f64 {
                if a + 2 == b { 1.0 } else if b + 2 == a { -1.0 } else { 0.0 }
            };
            for i in 0..4 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for a in 0..4 {
                        for b in 0..4 {
                            s += z[a][i] * omega(a, b) * z[b][j];
                        }
                    }
                    prop_assert!((s - omega(i, j)).abs() < 1e-5, "entry ({i},{j}) = {s}");
                }
            }
        }
    }
}
