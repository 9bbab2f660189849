//! Resonant normal form for `∂_t u = Op(iξ·(ν + εV(t)))u` with integer ν:
//! resonant averaging, the homological equation, the half-density
//! transformation `Φ̃(t)`, the translation `U(t)` and `Φ_ε(t) = U(t)Φ̃(t)⁻¹`.
//!
//! With `v(t) = Φ_ε(t)u(t)` the equation becomes
//! `∂_t v = Op(iεξ·⟨V⟩_ν)v + O(ε²)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{FieldMode, FourierVectorField, TAU};
use crate::quantize::{smooth_size, sobolev_norm, GridFft, SpectralState};
use crate::solver::{fit_growth_rate, solve_observed, Backend, Equation, SimulationConfig, TimeSeries, TransportOperator};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

fn dot(k: [i32; 2], nu: &[i64]) -> i64 {
    k.iter().zip(nu).map(|(a, b)| *a as i64 * b).sum()
}

fn check_nu(v: &FourierVectorField, nu: &[i64]) -> Result<()> {
    if nu.len() != v.dim() {
        return invalid("ν has the wrong dimension");
    }
    Ok(())
}

/// `⟨V⟩_ν(x) = Σ_k v_{k, k·ν} e^{ik·x}`.
pub fn resonant_average(v: &FourierVectorField, nu: &[i64]) -> Result<FourierVectorField> {
    check_nu(v, nu)?;
    let modes = v
        .modes()
        .iter()
        .filter(|m| m.l as i64 == dot(m.k, nu))
        .map(|m| FieldMode { k: m.k, l: 0, v: m.v })
        .collect();
    FourierVectorField::new(v.dim(), modes)
}

/// The resonant part `V_R(t, x) = ⟨V⟩_ν(x + νt)` as a time-periodic field.
pub fn resonant_part(v: &FourierVectorField, nu: &[i64]) -> Result<FourierVectorField> {
    check_nu(v, nu)?;
    let modes = v.modes().iter().filter(|m| m.l as i64 == dot(m.k, nu)).copied().collect();
    FourierVectorField::new(v.dim(), modes)
}

/// `(1/2π)∫₀^{2π} V(t, x − νt) dt` by the trapezoid rule on `nodes` points,
/// sampled on a spatial grid and transformed back to coefficients.
pub fn resonant_average_integral(v: &FourierVectorField, nu: &[i64], nodes: usize) -> Result<FourierVectorField> {
    check_nu(v, nu)?;
    let l1: i64 = nu.iter().map(|c| c.abs()).sum();
    let need = 2 * (v.k_max() as i64 * l1 + v.l_max() as i64) + 1;
    if (nodes as i64) < need {
        return invalid(format!("quadrature with {nodes} nodes is under-resolved; need ≥ {need}"));
    }
    let k = v.k_max();
    let dim = v.dim();
    let m = [2 * k + 1, if dim == 1 { 1 } else { 2 * k + 1 }];
    let fft = GridFft::new(m);
    let mut acc = [vec![ZERO; m[0] * m[1]], vec![ZERO; m[0] * m[1]]];
    let nuf = [nu[0] as f64, if dim == 2 { nu[1] as f64 } else { 0.0 }];
    for q in 0..nodes {
        let t = TAU * q as f64 / nodes as f64;
        for i in 0..m[0] {
            for j in 0..m[1] {
                let x = fft.point(i, j);
                let w = v.eval(t, [x[0] - nuf[0] * t, x[1] - nuf[1] * t]);
                acc[0][i * m[1] + j] += w[0];
                acc[1][i * m[1] + j] += w[1];
            }
        }
    }
    let band = if dim == 1 { [k, 0] } else { [k, k] };
    let s = 1.0 / nodes as f64;
    let c0 = fft.from_grid(acc[0].iter().map(|z| z * s).collect(), dim, band)?.0;
    let c1 = fft.from_grid(acc[1].iter().map(|z| z * s).collect(), dim, band)?.0;
    let scale = v.modes().iter().fold(0.0f64, |a, m| a.max(m.v[0].norm()).max(m.v[1].norm()));
    let floor = 1e-14 * scale.max(1e-300);
    let mut modes = Vec::new();
    for idx in 0..c0.len() {
        let kk = c0.mode_of(idx);
        let w = [c0.coeffs()[idx], c1.coeffs()[idx]];
        if w[0].norm() > floor || w[1].norm() > floor {
            let vv = [w[0], if dim == 1 { ZERO } else { w[1] }];
            modes.push(FieldMode { k: [kk[0] as i32, kk[1] as i32], l: 0, v: vv });
        }
    }
    // symmetrize rounding so the reality check sees exact conjugate pairs
    let sym: Vec<FieldMode> = modes
        .iter()
        .map(|m| {
            let p = modes.iter().find(|q| q.k == [-m.k[0], -m.k[1]]);
            match p {
                Some(p) => FieldMode { k: m.k, l: 0, v: [(m.v[0] + p.v[0].conj()) * 0.5, (m.v[1] + p.v[1].conj()) * 0.5] },
                None => *m,
            }
        })
        .collect();
    FourierVectorField::new(dim, sym)
}

/// `β_{k,ℓ} = v_{k,ℓ} / (i(ℓ − k·ν))` off resonance, zero on it.
pub fn homological_beta(v: &FourierVectorField, nu: &[i64]) -> Result<FourierVectorField> {
    check_nu(v, nu)?;
    let modes = v
        .modes()
        .iter()
        .filter_map(|m| {
            let d = m.l as i64 - dot(m.k, nu);
            if d == 0 {
                None
            } else {
                let den = Complex64::new(0.0, d as f64);
                Some(FieldMode { k: m.k, l: m.l, v: [m.v[0] / den, m.v[1] / den] })
            }
        })
        .collect();
    FourierVectorField::new(v.dim(), modes)
}

/// Largest Fourier-side defect of `V + ν·∇β − ∂_tβ = V_R`.
pub fn homological_residual(v: &FourierVectorField, nu: &[i64], beta: &FourierVectorField) -> Result<f64> {
    check_nu(v, nu)?;
    let mut keys: Vec<([i32; 2], i32)> = v.modes().iter().map(|m| (m.k, m.l)).collect();
    keys.extend(beta.modes().iter().map(|m| (m.k, m.l)));
    keys.sort();
    keys.dedup();
    let mut worst: f64 = 0.0;
    for (k, l) in keys {
        let vv = v.coeff(k, l);
        let bb = beta.coeff(k, l);
        let resonant = l as i64 == dot(k, nu);
        let i_kn = Complex64::new(0.0, dot(k, nu) as f64);
        let i_l = Complex64::new(0.0, l as f64);
        for j in 0..2 {
            let lhs = vv[j] + i_kn * bb[j] - i_l * bb[j];
            let rhs = if resonant { vv[j] } else { ZERO };
            worst = worst.max((lhs - rhs).norm());
        }
    }
    Ok(worst)
}

/// `∂_t W` as a field.
pub fn time_derivative(w: &FourierVectorField) -> FourierVectorField {
    let modes = w
        .modes()
        .iter()
        .map(|m| {
            let f = Complex64::new(0.0, m.l as f64 * w.omega());
            FieldMode { k: m.k, l: m.l, v: [m.v[0] * f, m.v[1] * f] }
        })
        .collect();
    FourierVectorField::new(w.dim(), modes).expect("derivative of a real field is real")
}

/// Grid check of `ν + εV + εν·∇β − ε∂_tβ − ν − εV_R ≡ 0`; returns the sup.
pub fn homological_grid_residual(v: &FourierVectorField, nu: &[i64], eps: f64, grid: usize) -> Result<f64> {
    let beta = homological_beta(v, nu)?;
    let dbeta = time_derivative(&beta);
    let vr = resonant_part(v, nu)?;
    let nuf = [nu[0] as f64, if v.dim() == 2 { nu[1] as f64 } else { 0.0 }];
    let mut worst: f64 = 0.0;
    let gy = if v.dim() == 1 { 1 } else { grid };
    for it in 0..grid {
        let t = TAU * it as f64 / grid as f64;
        for i in 0..grid {
            for j in 0..gy {
                let x = [TAU * i as f64 / grid as f64, TAU * j as f64 / gy as f64];
                let vv = v.eval(t, x);
                let (_, jb) = beta.eval_jac(t, x);
                let db = dbeta.eval(t, x);
                let r = vr.eval(t, x);
                for c in 0..2 {
                    let nab = jb[c][0] * nuf[0] + jb[c][1] * nuf[1];
                    let tt = nuf[c] + eps * (vv[c] + nab - db[c]);
                    worst = worst.max((tt - nuf[c] - eps * r[c]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Data of the normal-form change of variables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalFormTransform {
    pub nu: Vec<i64>,
    pub eps: f64,
    #[serde(with = "field_json")]
    pub beta: FourierVectorField,
    /// Oversampling of the composition grid relative to the band.
    pub oversample: usize,
    /// Oversampling of the interpolation grid for off-grid evaluation.
    pub interp_oversample: usize,
    /// Stencil width of the local Lagrange interpolation.
    pub stencil: usize,
    /// Lower bound on `det(I + ε∇β)` below which the transform is refused.
    pub det_floor: f64,
}

mod field_json {
    use super::FourierVectorField;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &FourierVectorField, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&f.to_json(), s)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FourierVectorField, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        FourierVectorField::from_json(&v).map_err(serde::de::Error::custom)
    }
}

/// Which way to apply `Φ̃(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Inverse,
}

/// Image of a composition operator and the L² norm of resolved modes that
/// were dropped on re-projection.
#[derive(Clone, Debug)]
pub struct Composed {
    pub state: SpectralState,
    pub tail: f64,
}

/// Local tensor Lagrange interpolation of a band-limited function from an
/// oversampled uniform grid.
struct BandInterpolator {
    m: [usize; 2],
    vals: Vec<Complex64>,
    stencil: [usize; 2],
}

impl BandInterpolator {
    fn new(u: &SpectralState, oversample: usize, stencil: usize) -> Result<Self> {
        let b = u.band();
        let m = [
            smooth_size(oversample * (2 * b[0] + 1)),
            if u.dim() == 1 { 1 } else { smooth_size(oversample * (2 * b[1] + 1)) },
        ];
        let vals = GridFft::new(m).to_grid(u)?;
        let st = [stencil.min(m[0]), if u.dim() == 1 { 1 } else { stencil.min(m[1]) }];
        Ok(Self { m, vals, stencil: st })
    }

    #[inline]
    fn weights(m: usize, p: usize, y: f64, idx: &mut [usize; 16], w: &mut [f64; 16]) {
        if p == 1 {
            idx[0] = 0;
            w[0] = 1.0;
            return;
        }
        let s = y.rem_euclid(TAU) / TAU * m as f64;
        let i0 = s.floor() as i64 - (p as i64 / 2 - 1);
        let f = s - i0 as f64;
        for j in 0..p {
            idx[j] = (i0 + j as i64).rem_euclid(m as i64) as usize;
            let mut c = 1.0;
            for q in 0..p {
                if q != j {
                    c *= (f - q as f64) / (j as f64 - q as f64);
                }
            }
            w[j] = c;
        }
    }

    fn eval(&self, y: [f64; 2]) -> Complex64 {
        let mut i0 = [0usize; 16];
        let mut w0 = [0.0; 16];
        let mut i1 = [0usize; 16];
        let mut w1 = [0.0; 16];
        Self::weights(self.m[0], self.stencil[0], y[0], &mut i0, &mut w0);
        Self::weights(self.m[1], self.stencil[1], y[1], &mut i1, &mut w1);
        let mut s = ZERO;
        for a in 0..self.stencil[0] {
            let row = i0[a] * self.m[1];
            let mut r = ZERO;
            for b in 0..self.stencil[1] {
                r += self.vals[row + i1[b]] * w1[b];
            }
            s += r * w0[a];
        }
        s
    }
}

impl NormalFormTransform {
    pub fn new(v: &FourierVectorField, nu: &[i64], eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return invalid("ε must be nonnegative");
        }
        Ok(Self {
            nu: nu.to_vec(),
            eps,
            beta: homological_beta(v, nu)?,
            oversample: 4,
            interp_oversample: 8,
            stencil: 10,
            det_floor: 0.1,
        })
    }

    fn dim(&self) -> usize {
        self.beta.dim()
    }

    fn det(&self, jb: [[f64; 2]; 2]) -> f64 {
        let e = self.eps;
        if self.dim() == 1 {
            1.0 + e * jb[0][0]
        } else {
            (1.0 + e * jb[0][0]) * (1.0 + e * jb[1][1]) - e * e * jb[0][1] * jb[1][0]
        }
    }

    fn grid(&self, band: [usize; 2]) -> [usize; 2] {
        [
            smooth_size(self.oversample * band[0].max(1) + 1),
            if self.dim() == 1 { 1 } else { smooth_size(self.oversample * band[1].max(1) + 1) },
        ]
    }

    /// Minimum of `det(I + ε∇β(t,·))` and `ε sup‖∇β‖` over a space-time grid.
    pub fn invertibility(&self, grid: usize) -> (f64, f64) {
        let mut min_det = f64::INFINITY;
        let mut lip: f64 = 0.0;
        let nt = if self.beta.is_autonomous() { 1 } else { grid };
        let gy = if self.dim() == 1 { 1 } else { grid };
        for it in 0..nt {
            let t = TAU * it as f64 / nt as f64;
            for i in 0..grid {
                for j in 0..gy {
                    let x = [TAU * i as f64 / grid as f64, TAU * j as f64 / gy as f64];
                    let (_, jb) = self.beta.eval_jac(t, x);
                    min_det = min_det.min(self.det(jb));
                    let fro = (jb[0][0].powi(2) + jb[0][1].powi(2) + jb[1][0].powi(2) + jb[1][1].powi(2)).sqrt();
                    lip = lip.max(self.eps * fro);
                }
            }
        }
        (min_det, lip)
    }

    /// Largest ε for which the transform is admissible (`det ≥ det_floor`
    /// and the inverse fixed point contracts), by bisection.
    pub fn operational_threshold(&self, grid: usize) -> f64 {
        let ok = |e: f64| {
            let t = Self { eps: e, ..self.clone() };
            let (d, l) = t.invertibility(grid);
            d > self.det_floor && l < 0.9
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while ok(hi) && hi < 1e6 {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    fn check_admissible(&self) -> Result<()> {
        let (d, l) = self.invertibility(32);
        if d <= self.det_floor {
            return Err(Error::NotInvertible(format!("min det(I+ε∇β) = {d:.3} ≤ {}", self.det_floor)));
        }
        if l >= 1.0 {
            return Err(Error::NotInvertible(format!("ε‖∇β‖ = {l:.3} ≥ 1, fixed point does not contract")));
        }
        Ok(())
    }

    /// Solve `x + εβ(t,x) = y` by fixed-point iteration.
    fn inverse_point(&self, t: f64, y: [f64; 2]) -> Result<[f64; 2]> {
        let mut x = y;
        for _ in 0..200 {
            let b = self.beta.eval(t, x);
            let nx = [y[0] - self.eps * b[0], y[1] - self.eps * b[1]];
            let d = ((nx[0] - x[0]).powi(2) + (nx[1] - x[1]).powi(2)).sqrt();
            x = nx;
            if d <= 1e-13 {
                return Ok(x);
            }
        }
        Err(Error::NotInvertible(format!("inverse iteration stalled at y = {y:?}")))
    }

    /// `Φ̃(t)u = det(I+ε∇β)^{1/2} u(x + εβ(t,x))`, or its inverse.
    pub fn apply_phi_tilde(&self, t: f64, u: &SpectralState, dir: Direction) -> Result<Composed> {
        if u.dim() != self.dim() {
            return invalid("state and transform dimensions differ");
        }
        if self.eps == 0.0 || self.beta.modes().is_empty() {
            return Ok(Composed { state: u.clone(), tail: 0.0 });
        }
        self.check_admissible()?;
        let interp = BandInterpolator::new(u, self.interp_oversample, self.stencil)?;
        let m = self.grid(u.band());
        let fft = GridFft::new(m);
        let mut g = vec![ZERO; m[0] * m[1]];
        for i in 0..m[0] {
            for j in 0..m[1] {
                let x = fft.point(i, j);
                g[i * m[1] + j] = match dir {
                    Direction::Forward => {
                        let (b, jb) = self.beta.eval_jac(t, x);
                        let d = self.det(jb);
                        interp.eval([x[0] + self.eps * b[0], x[1] + self.eps * b[1]]) * d.sqrt()
                    }
                    Direction::Inverse => {
                        let p = self.inverse_point(t, x)?;
                        let (_, jb) = self.beta.eval_jac(t, p);
                        interp.eval(p) / self.det(jb).sqrt()
                    }
                };
            }
        }
        let (state, tail) = fft.from_grid(g, u.dim(), u.band())?;
        Ok(Composed { state, tail })
    }

    fn nu_shift(&self, t: f64) -> [f64; 2] {
        [self.nu[0] as f64 * t, if self.dim() == 2 { self.nu[1] as f64 * t } else { 0.0 }]
    }

    /// `U(t)w(x) = w(x − νt)`.
    pub fn apply_u(&self, t: f64, w: &SpectralState) -> SpectralState {
        w.translated(self.nu_shift(t))
    }

    /// `Φ_ε(t) = U(t)Φ̃(t)⁻¹`.
    pub fn apply_phi_eps(&self, t: f64, v: &SpectralState) -> Result<Composed> {
        let c = self.apply_phi_tilde(t, v, Direction::Inverse)?;
        Ok(Composed { state: self.apply_u(t, &c.state), tail: c.tail })
    }

    /// `Φ_ε(t)⁻¹ = Φ̃(t)U(−t)`.
    pub fn apply_phi_eps_inverse(&self, t: f64, v: &SpectralState) -> Result<Composed> {
        let s = self.shifted_back(t, v);
        self.apply_phi_tilde(t, &s, Direction::Forward)
    }

    fn shifted_back(&self, t: f64, v: &SpectralState) -> SpectralState {
        let s = self.nu_shift(t);
        v.translated([-s[0], -s[1]])
    }

    /// `sup ‖Φ_ε(t)u‖_σ/‖u‖_σ` and the same for the inverse, over the given
    /// times and test states.
    pub fn boundedness(&self, sigma: f64, times: &[f64], states: &[SpectralState]) -> Result<f64> {
        let mut c: f64 = 1.0;
        for &t in times {
            for u in states {
                let n = sobolev_norm(u, sigma);
                if n == 0.0 {
                    continue;
                }
                c = c.max(sobolev_norm(&self.apply_phi_eps(t, u)?.state, sigma) / n);
                c = c.max(sobolev_norm(&self.apply_phi_eps_inverse(t, u)?.state, sigma) / n);
            }
        }
        Ok(c)
    }
}

/// Residual samples `r(t)` of the averaged equation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    /// Largest re-projection tail met while transforming.
    pub max_tail: f64,
}

impl ResidualSeries {
    pub fn sup(&self) -> f64 {
        self.r.iter().copied().fold(0.0, f64::max)
    }
}

/// Parameters of [`conjugation_residual`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub band: [usize; 2],
    pub t_end: f64,
    /// Times at which `r(t)` is evaluated, as `t_end·j/points`, `j = 1..=points`.
    pub points: usize,
    /// Central-difference half step.
    pub delta: f64,
    /// Solver steps per `delta`.
    pub steps_per_delta: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self { band: [64, 64], t_end: 5.0, points: 10, delta: 0.01, steps_per_delta: 4 }
    }
}

/// Solves `∂_t u = Op(iξ·(ν + εV))u`, maps `v(t) = Φ_ε(t)u(t)` and measures
/// `r(t) = ‖∂_t v − (ε⟨V⟩·∇v + (ε/2)div⟨V⟩ v)‖/‖v‖` with a central difference.
pub fn conjugation_residual(
    v: &FourierVectorField,
    nu: &[i64],
    eps: f64,
    u0: &SpectralState,
    cfg: &ResidualConfig,
) -> Result<ResidualSeries> {
    if cfg.points == 0 || !(cfg.delta > 0.0) || cfg.steps_per_delta == 0 {
        return invalid("residual config: points, delta and steps must be positive");
    }
    let dim = v.dim();
    let nf = NormalFormTransform::new(v, nu, eps)?;
    let nu_f: Vec<f64> = nu.iter().map(|&c| c as f64).collect();
    let base = FourierVectorField::constant(&nu_f)?;
    let eq = Equation::perturbed(base, v.clone());
    let per = (cfg.t_end / cfg.points as f64 / cfg.delta).round() as usize;
    if per == 0 || ((per as f64 * cfg.delta * cfg.points as f64) - cfg.t_end).abs() > 1e-9 * cfg.t_end {
        return invalid("t_end/points must be a multiple of delta");
    }
    let mut sc = SimulationConfig::new(dim, cfg.band, cfg.t_end + cfg.delta);
    sc.epsilon = eps;
    sc.sample_interval = cfg.delta;
    sc.dt = Some(cfg.delta / cfg.steps_per_delta as f64);
    sc.sigmas = vec![];
    sc.cfl_guard = f64::MAX;
    sc.nu = Some(nu.to_vec());
    let mut kept: Vec<(f64, SpectralState)> = Vec::new();
    solve_observed(&sc, u0, &eq, |t, u| {
        let j = (t / cfg.delta).round() as i64;
        let r = j.rem_euclid(per as i64);
        if j >= per as i64 - 1 && (r == per as i64 - 1 || r == 0 || r == 1) {
            kept.push((t, u.clone()));
        }
        Ok(None)
    })?;
    let avg = resonant_average(v, nu)?;
    let op = TransportOperator::new(&Equation::transport(avg), 0.0, dim, cfg.band, Backend::Auto)?;
    let mut out = ResidualSeries { t: Vec::new(), r: Vec::new(), max_tail: 0.0 };
    let find = |t: f64| kept.iter().find(|(s, _)| (s - t).abs() < 1e-9).map(|(_, u)| u);
    for j in 1..=cfg.points {
        let t = cfg.t_end * j as f64 / cfg.points as f64;
        let (Some(um), Some(u0t), Some(up)) = (find(t - cfg.delta), find(t), find(t + cfg.delta)) else {
            return Err(Error::Numerical(format!("missing solver samples around t = {t}")));
        };
        let vm = nf.apply_phi_eps(t - cfg.delta, um)?;
        let vc = nf.apply_phi_eps(t, u0t)?;
        let vp = nf.apply_phi_eps(t + cfg.delta, up)?;
        out.max_tail = out.max_tail.max(vm.tail).max(vc.tail).max(vp.tail);
        let mut l = SpectralState::zeros(dim, cfg.band)?;
        op.apply(0.0, &vc.state, &mut l)?;
        let mut diff = 0.0;
        for i in 0..l.len() {
            let dv = (vp.state.coeffs()[i] - vm.state.coeffs()[i]) / (2.0 * cfg.delta);
            diff += (dv - l.coeffs()[i] * eps).norm_sqr();
        }
        out.t.push(t);
        out.r.push(diff.sqrt() / vc.state.l2_norm());
    }
    Ok(out)
}

/// Comparison of Sobolev growth before and after the normal-form map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    /// Largest `δ ∈ (0,1]` with `‖v(t)‖_σ ≥ δe^{δσεt}‖v(0)‖_σ` on all samples (0 if none).
    pub delta_v: f64,
    /// Whether `‖u(t)‖_σ ≥ C_σ⁻²δe^{δσεt}‖u(0)‖_σ` held at every sample.
    pub transferred: bool,
    pub worst_ratio: f64,
    pub rate_u: f64,
    pub rate_v: f64,
    /// `2 log(C_σ)/T`
    pub rate_window: f64,
    pub rates_agree: bool,
}

pub fn growth_transfer_check(u: &TimeSeries, v: &TimeSeries, sigma: f64, eps: f64, c_sigma: f64) -> Result<TransferReport> {
    let tu = u.times();
    let tv = v.times();
    if tu.len() != tv.len() || tu.iter().zip(&tv).any(|(a, b)| (a - b).abs() > 1e-9) {
        return invalid("u- and v-series must share time grids");
    }
    if tu.len() < 2 {
        return invalid("need at least two samples");
    }
    if !(c_sigma >= 1.0) {
        return invalid("C_σ must be at least 1");
    }
    let cu = u.column(sigma)?;
    let cv = v.column(sigma)?;
    let holds = |d: f64| tv.iter().zip(&cv).all(|(t, n)| *n >= d * (d * sigma * eps * t).exp() * cv[0] * (1.0 - 1e-12));
    let delta_v = if holds(1.0) {
        1.0
    } else if !holds(1e-12) {
        0.0
    } else {
        let (mut lo, mut hi) = (1e-12, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if holds(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let mut worst = f64::INFINITY;
    for (t, n) in tu.iter().zip(&cu) {
        let bound = delta_v * (delta_v * sigma * eps * t).exp() * cu[0] / (c_sigma * c_sigma);
        if bound > 0.0 {
            worst = worst.min(n / bound);
        }
    }
    let t_end = tu[tu.len() - 1] - tu[0];
    let w = (tu[0], tu[tu.len() - 1]);
    let rate_u = fit_growth_rate(u, sigma, w)?.rate;
    let rate_v = fit_growth_rate(v, sigma, w)?.rate;
    let rate_window = 2.0 * c_sigma.ln() / t_end;
    Ok(TransferReport {
        delta_v,
        transferred: delta_v == 0.0 || worst >= 1.0 - 1e-9,
        worst_ratio: if worst.is_finite() { worst } else { f64::INFINITY },
        rate_u,
        rate_v,
        rate_window,
        rates_agree: (rate_u - rate_v).abs() <= rate_window + 1e-12,
    })
}
