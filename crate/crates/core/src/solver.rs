//! Spectral time integration of
//! `∂_t u = Op(iξ·(V + εP(t)))u + i Op(b₁)u + ε Op(b₂)u` on T^n,
//! with a characteristics oracle, a Duhamel–Picard reference solver,
//! growth-rate fits and the energy-functional inequality check.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::fields::{variational_flow, FourierVectorField, StepControl, TorusPoint};
use crate::quantize::{smooth_size, sobolev_norms, weyl_apply, GridFft, SpectralState, Symbol};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// How products in the transport term are evaluated. Both backends give the
/// same Galerkin truncation of the Weyl operator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Auto,
    /// Direct sparse convolution with the field's Fourier modes.
    Convolution,
    /// FFT collocation with 2/3-rule dealiasing.
    Pseudospectral,
}

/// Time stepping scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Classical RK4 on the full right-hand side.
    #[default]
    Rk4,
    /// RK4 in the frame moving with the constant part of `V + εP`, which is
    /// diagonal and propagated exactly (Lawson's integrating factor). The
    /// step size only sees the remaining field.
    IntegratingFactor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dealias {
    #[default]
    TwoThirds,
}

/// Run parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dim: usize,
    /// Band limits `N_j`; `[N, 0]` in one dimension.
    pub band: [usize; 2],
    /// Time step; `None` picks `courant / Σ_j N_j sup|W_j|`.
    pub dt: Option<f64>,
    pub t_end: f64,
    pub epsilon: f64,
    /// Frequency vector of the unperturbed translation, when relevant.
    pub nu: Option<Vec<i64>>,
    pub sigmas: Vec<f64>,
    pub dealias: Dealias,
    /// Time between recorded samples.
    pub sample_interval: f64,
    pub backend: Backend,
    /// Upper bound enforced on `dt·Σ_j N_j sup|W_j|`.
    pub cfl_guard: f64,
    /// Courant number used for the default step.
    pub courant: f64,
    #[serde(default)]
    pub integrator: Integrator,
}

impl SimulationConfig {
    pub fn new(dim: usize, band: [usize; 2], t_end: f64) -> Self {
        Self {
            dim,
            band,
            dt: None,
            t_end,
            epsilon: 0.0,
            nu: None,
            sigmas: vec![0.5, 1.0],
            dealias: Dealias::TwoThirds,
            sample_interval: t_end / 100.0,
            backend: Backend::Auto,
            cfl_guard: 0.5,
            courant: 0.1,
            integrator: Integrator::Rk4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return invalid("dimension must be 1 or 2");
        }
        if self.dim == 1 && self.band[1] != 0 {
            return invalid("one-dimensional runs use band [N, 0]");
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return invalid("t_end must be positive");
        }
        if !(self.sample_interval > 0.0) || self.sample_interval > self.t_end {
            return invalid("sample_interval must lie in (0, t_end]");
        }
        let n = self.t_end / self.sample_interval;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return invalid("t_end must be a multiple of sample_interval");
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return invalid("dt must be positive");
            }
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return invalid("epsilon must be nonnegative");
        }
        if let Some(nu) = &self.nu {
            if nu.len() != self.dim || nu.iter().all(|&c| c == 0) || nu.iter().any(|&c| c < 0) {
                return invalid("nu must be a nonzero vector of nonnegative integers");
            }
        }
        if self.sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return invalid("sigmas must be nonnegative");
        }
        if !(self.cfl_guard > 0.0) || !(self.courant > 0.0) {
            return invalid("cfl_guard and courant must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The PDE data: base field `V`, perturbation `P`, optional symbols
/// `b₁` (real, order < 1) and `b₂` (real, order 0).
#[derive(Clone, Default)]
pub struct Equation {
    pub v: Option<FourierVectorField>,
    pub p: Option<FourierVectorField>,
    pub b1: Option<Arc<dyn Symbol>>,
    pub b2: Option<Arc<dyn Symbol>>,
}

impl Equation {
    pub fn transport(v: FourierVectorField) -> Self {
        Self { v: Some(v), ..Default::default() }
    }

    pub fn perturbed(v: FourierVectorField, p: FourierVectorField) -> Self {
        Self { v: Some(v), p: Some(p), ..Default::default() }
    }

    /// Constant part of `V + εP` (autonomous mean mode) and the rest.
    pub fn split_drift(&self, dim: usize, eps: f64) -> Result<([f64; 2], FourierVectorField)> {
        let w = self.total_field(dim, eps)?;
        let c = w.coeff([0, 0], 0);
        let drift = [c[0].re, c[1].re];
        let rest: Vec<_> = w.modes().iter().filter(|m| !(m.k == [0, 0] && m.l == 0)).cloned().collect();
        Ok((drift, FourierVectorField::new(dim, rest)?))
    }

    /// The total transport field `V + εP`.
    pub fn total_field(&self, dim: usize, eps: f64) -> Result<FourierVectorField> {
        let mut w = self.v.clone().unwrap_or_else(|| FourierVectorField::zero(dim));
        if let Some(p) = &self.p {
            if eps != 0.0 {
                w = w.plus(&p.scaled(eps))?;
            }
        }
        if w.dim() != dim {
            return invalid("field dimension does not match the state");
        }
        Ok(w)
    }
}

impl std::fmt::Debug for Equation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Equation")
            .field("v", &self.v)
            .field("p", &self.p)
            .field("b1", &self.b1.is_some())
            .field("b2", &self.b2.is_some())
            .finish()
    }
}

/// `Σ_j N_j sup|W_j|` for the step-size guard.
pub fn stiffness(w: &FourierVectorField, band: [usize; 2]) -> f64 {
    let s = w.sup_components();
    band[0] as f64 * s[0] + band[1] as f64 * s[1]
}

struct ModeTerm {
    k: [i64; 2],
    l: i32,
    v: [Complex64; 2],
}

/// Precomputed right-hand side operator.
pub struct TransportOperator {
    dim: usize,
    /// Constant drift left out of [`TransportOperator::apply`] by
    /// [`TransportOperator::without_drift`].
    drift: Option<[f64; 2]>,
    band: [usize; 2],
    eps: f64,
    terms: Vec<ModeTerm>,
    autonomous: bool,
    backend: Backend,
    fft: Option<GridFft>,
    b1: Option<Arc<dyn Symbol>>,
    b2: Option<Arc<dyn Symbol>>,
}

impl TransportOperator {
    pub fn new(eq: &Equation, eps: f64, dim: usize, band: [usize; 2], backend: Backend) -> Result<Self> {
        let w = eq.total_field(dim, eps)?;
        let kb = w.k_max();
        if kb > band[0] || (dim == 2 && kb > band[1]) {
            return Err(Error::Band(format!("field band {kb} exceeds the solution band {band:?}")));
        }
        let terms: Vec<ModeTerm> = w
            .modes()
            .iter()
            .map(|m| ModeTerm { k: [m.k[0] as i64, m.k[1] as i64], l: m.l, v: m.v })
            .collect();
        let n_spatial = {
            let mut ks: Vec<[i64; 2]> = terms.iter().map(|t| t.k).collect();
            ks.sort();
            ks.dedup();
            ks.len()
        };
        let backend = match backend {
            // ~7 FFTs of the 3N grid against one sweep per spatial mode
            Backend::Auto => {
                let m = grid_for(band);
                let fft_cost = 7.0 * (m[0] * m[1]) as f64 * ((m[0] * m[1]) as f64).log2() / 4.0;
                let conv_cost = n_spatial as f64 * ((2 * band[0] + 1) * (2 * band[1] + 1)) as f64;
                if conv_cost <= fft_cost {
                    Backend::Convolution
                } else {
                    Backend::Pseudospectral
                }
            }
            b => b,
        };
        let fft = (backend == Backend::Pseudospectral).then(|| GridFft::new(grid_for(band)));
        for b in [&eq.b1, &eq.b2].into_iter().flatten() {
            if b.dim() != dim {
                return invalid("symbol dimension does not match the state");
            }
        }
        Ok(Self {
            dim,
            drift: None,
            band,
            eps,
            autonomous: w.is_autonomous(),
            terms,
            backend,
            fft,
            b1: eq.b1.clone(),
            b2: eq.b2.clone(),
        })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Drops the constant autonomous mode from the operator and returns it
    /// separately, so that `apply` only evaluates the remainder.
    pub fn without_drift(mut self) -> Self {
        let mut d = [0.0; 2];
        self.terms.retain(|m| {
            if m.k == [0, 0] && m.l == 0 {
                d[0] += m.v[0].re;
                d[1] += m.v[1].re;
                false
            } else {
                true
            }
        });
        self.drift = Some(d);
        self
    }

    pub fn drift(&self) -> Option<[f64; 2]> {
        self.drift
    }

    fn spatial(&self, t: f64) -> Vec<([i64; 2], [Complex64; 2])> {
        let mut out: Vec<([i64; 2], [Complex64; 2])> = Vec::new();
        for m in &self.terms {
            let ph = if self.autonomous { Complex64::new(1.0, 0.0) } else { Complex64::from_polar(1.0, m.l as f64 * t) };
            let v = [m.v[0] * ph, m.v[1] * ph];
            match out.iter_mut().find(|(k, _)| *k == m.k) {
                Some((_, w)) => {
                    w[0] += v[0];
                    w[1] += v[1];
                }
                None => out.push((m.k, v)),
            }
        }
        out
    }

    /// Writes the right-hand side at `(t, u)` into `out`.
    pub fn apply(&self, t: f64, u: &SpectralState, out: &mut SpectralState) -> Result<()> {
        out.coeffs_mut().iter_mut().for_each(|c| *c = ZERO);
        match self.backend {
            Backend::Pseudospectral => self.apply_fft(t, u, out)?,
            _ => self.apply_conv(t, u.coeffs(), out.coeffs_mut()),
        }
        if let Some(b1) = &self.b1 {
            let r = weyl_apply(b1.as_ref(), u)?;
            for (o, c) in out.coeffs_mut().iter_mut().zip(r.state.coeffs()) {
                *o += I * c;
            }
        }
        if let Some(b2) = &self.b2 {
            if self.eps != 0.0 {
                let r = weyl_apply(b2.as_ref(), u)?;
                for (o, c) in out.coeffs_mut().iter_mut().zip(r.state.coeffs()) {
                    *o += c * self.eps;
                }
            }
        }
        Ok(())
    }

    fn apply_conv(&self, t: f64, u: &[Complex64], out: &mut [Complex64]) {
        let (n0, n1) = (self.band[0] as i64, self.band[1] as i64);
        let w2 = (2 * n1 + 1) as usize;
        for (m, w) in self.spatial(t) {
            // coefficient i w·(k' + m/2) for k = k' + m
            let d = I * w[1];
            let lo0 = (-n0).max(-n0 - m[0]);
            let hi0 = n0.min(n0 - m[0]);
            let lo1 = (-n1).max(-n1 - m[1]);
            let hi1 = n1.min(n1 - m[1]);
            if lo1 > hi1 {
                continue;
            }
            for kp0 in lo0..=hi0 {
                let base_in = (kp0 + n0) as usize * w2;
                let base_out = (kp0 + m[0] + n0) as usize * w2;
                let mut c = I * (w[0] * (kp0 as f64 + 0.5 * m[0] as f64) + w[1] * (lo1 as f64 + 0.5 * m[1] as f64));
                let src = &u[base_in + (lo1 + n1) as usize..=base_in + (hi1 + n1) as usize];
                let dst = &mut out[base_out + (lo1 + m[1] + n1) as usize..=base_out + (hi1 + m[1] + n1) as usize];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += c * x;
                    c += d;
                }
            }
        }
    }

    fn apply_fft(&self, t: f64, u: &SpectralState, out: &mut SpectralState) -> Result<()> {
        let fft = self.fft.as_ref().expect("pseudospectral grid");
        let [m0, m1] = fft.shape();
        let spatial = self.spatial(t);
        let kb = spatial.iter().fold([0usize; 2], |a, (k, _)| {
            [a[0].max(k[0].unsigned_abs() as usize), a[1].max(k[1].unsigned_abs() as usize)]
        });
        let mut wc = [SpectralState::zeros(self.dim, kb)?, SpectralState::zeros(self.dim, kb)?];
        let mut dc = SpectralState::zeros(self.dim, kb)?;
        for (k, v) in &spatial {
            let idx = wc[0].index(*k).expect("mode in field band");
            wc[0].coeffs_mut()[idx] = v[0];
            wc[1].coeffs_mut()[idx] = v[1];
            dc.coeffs_mut()[idx] = I * (v[0] * k[0] as f64 + v[1] * k[1] as f64);
        }
        let wg0 = fft.to_grid(&wc[0])?;
        let wg1 = fft.to_grid(&wc[1])?;
        let dg = fft.to_grid(&dc)?;
        let mut g0 = u.clone();
        let mut g1 = u.clone();
        for i in 0..u.len() {
            let k = u.mode_of(i);
            g0.coeffs_mut()[i] *= I * k[0] as f64;
            g1.coeffs_mut()[i] *= I * k[1] as f64;
        }
        let ug = fft.to_grid(u)?;
        let d0 = fft.to_grid(&g0)?;
        let d1 = if self.dim == 2 { fft.to_grid(&g1)? } else { vec![ZERO; m0 * m1] };
        let prod: Vec<Complex64> = (0..m0 * m1).map(|i| wg0[i] * d0[i] + wg1[i] * d1[i] + 0.5 * dg[i] * ug[i]).collect();
        let (r, _) = fft.from_grid(prod, self.dim, self.band)?;
        for (o, c) in out.coeffs_mut().iter_mut().zip(r.coeffs()) {
            *o += c;
        }
        Ok(())
    }
}

/// Collocation grid with 2/3-rule headroom: `M_j ≥ 3N_j + 1`.
fn grid_for(band: [usize; 2]) -> [usize; 2] {
    [smooth_size(3 * band[0] + 1), if band[1] == 0 { 1 } else { smooth_size(3 * band[1] + 1) }]
}

/// Right-hand side of the transport equation at time `t`.
pub fn rhs(
    u: &SpectralState,
    t: f64,
    v: &FourierVectorField,
    eps: f64,
    p: Option<&FourierVectorField>,
    b: (Option<Arc<dyn Symbol>>, Option<Arc<dyn Symbol>>),
) -> Result<SpectralState> {
    let eq = Equation { v: Some(v.clone()), p: p.cloned(), b1: b.0, b2: b.1 };
    let op = TransportOperator::new(&eq, eps, u.dim(), u.band(), Backend::Auto)?;
    let mut out = SpectralState::zeros(u.dim(), u.band())?;
    op.apply(t, u, &mut out)?;
    Ok(out)
}

struct Rk4 {
    k: [SpectralState; 4],
    tmp: SpectralState,
    /// `e^{i(h/2)k·c}` for the last `(h, c)` seen by `step_lawson`.
    half: Option<(f64, [f64; 2], Vec<Complex64>)>,
}

impl Rk4 {
    fn new(u: &SpectralState) -> Result<Self> {
        let z = SpectralState::zeros(u.dim(), u.band())?;
        Ok(Self { k: [z.clone(), z.clone(), z.clone(), z.clone()], tmp: z, half: None })
    }

    /// Lawson RK4 for `u' = Lu + N(t)u` with `L = i k·c` diagonal and `N`
    /// given by `op`.
    fn step_lawson(&mut self, op: &TransportOperator, c: [f64; 2], t: f64, h: f64, u: &mut SpectralState) -> Result<()> {
        let fresh = matches!(&self.half, Some((hh, cc, _)) if *hh == h && *cc == c);
        if !fresh {
            let e = (0..u.len())
                .map(|i| {
                    let k = u.mode_of(i);
                    Complex64::from_polar(1.0, 0.5 * h * (k[0] as f64 * c[0] + k[1] as f64 * c[1]))
                })
                .collect();
            self.half = Some((h, c, e));
        }
        let e = &self.half.as_ref().expect("phases").2;
        let n = u.len();
        // k1 at t
        op.apply(t, u, &mut self.k[0])?;
        // k2 at t + h/2 from E(u + h/2 k1)
        for i in 0..n {
            self.tmp.coeffs_mut()[i] = e[i] * (u.coeffs()[i] + self.k[0].coeffs()[i] * (0.5 * h));
        }
        op.apply(t + 0.5 * h, &self.tmp, &mut self.k[1])?;
        // k3 from E u + h/2 k2
        for i in 0..n {
            self.tmp.coeffs_mut()[i] = e[i] * u.coeffs()[i] + self.k[1].coeffs()[i] * (0.5 * h);
        }
        op.apply(t + 0.5 * h, &self.tmp, &mut self.k[2])?;
        // k4 from E² u + h E k3
        for i in 0..n {
            self.tmp.coeffs_mut()[i] = e[i] * (e[i] * u.coeffs()[i] + self.k[2].coeffs()[i] * h);
        }
        op.apply(t + h, &self.tmp, &mut self.k[3])?;
        let h6 = h / 6.0;
        let [k1, k2, k3, k4] = &self.k;
        for i in 0..n {
            let e2 = e[i] * e[i];
            let x = &mut u.coeffs_mut()[i];
            *x = e2 * (*x + k1.coeffs()[i] * h6) + e[i] * (k2.coeffs()[i] + k3.coeffs()[i]) * (2.0 * h6) + k4.coeffs()[i] * h6;
        }
        Ok(())
    }

    /// One classical step; `forcing(t)` is added to the right-hand side.
    fn step<F>(&mut self, op: &TransportOperator, t: f64, h: f64, u: &mut SpectralState, forcing: F) -> Result<()>
    where
        F: Fn(f64, &mut SpectralState),
    {
        let stages = [0.0, 0.5, 0.5, 1.0];
        for s in 0..4 {
            let ts = t + stages[s] * h;
            if s == 0 {
                op.apply(ts, u, &mut self.k[0])?;
            } else {
                let a = stages[s] * h;
                let prev = &self.k[s - 1];
                for ((d, x), kv) in self.tmp.coeffs_mut().iter_mut().zip(u.coeffs()).zip(prev.coeffs()) {
                    *d = x + kv * a;
                }
                op.apply(ts, &self.tmp, &mut self.k[s])?;
            }
            forcing(ts, &mut self.k[s]);
        }
        let h6 = h / 6.0;
        let [k1, k2, k3, k4] = &self.k;
        for (i, x) in u.coeffs_mut().iter_mut().enumerate() {
            *x += (k1.coeffs()[i] + (k2.coeffs()[i] + k3.coeffs()[i]) * 2.0 + k4.coeffs()[i]) * h6;
        }
        Ok(())
    }
}

/// One recorded sample of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub l2: f64,
    /// `‖u‖_σ` for each tracked σ.
    pub h: Vec<f64>,
    pub a: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub sigmas: Vec<f64>,
    pub samples: Vec<Sample>,
    pub config_hash: String,
}

impl TimeSeries {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// `‖u(t)‖_σ` column; σ = 0 gives the L² column.
    pub fn column(&self, sigma: f64) -> Result<Vec<f64>> {
        if sigma == 0.0 {
            return Ok(self.samples.iter().map(|s| s.l2).collect());
        }
        let j = self
            .sigmas
            .iter()
            .position(|s| (s - sigma).abs() < 1e-12)
            .ok_or_else(|| Error::Invalid(format!("σ = {sigma} is not tracked")))?;
        Ok(self.samples.iter().map(|s| s.h[j]).collect())
    }

    /// `max_t |‖u(t)‖/‖u(0)‖ − 1|`.
    pub fn l2_drift(&self) -> f64 {
        let Some(first) = self.samples.first() else { return 0.0 };
        if first.l2 == 0.0 {
            return 0.0;
        }
        self.samples.iter().map(|s| (s.l2 / first.l2 - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Largest finite-difference slope of `log‖u‖_σ` between samples.
    pub fn max_log_slope(&self, sigma: f64) -> Result<f64> {
        let c = self.column(sigma)?;
        let t = self.times();
        let mut best = f64::NEG_INFINITY;
        for i in 1..c.len() {
            if c[i] > 0.0 && c[i - 1] > 0.0 {
                best = best.max((c[i].ln() - c[i - 1].ln()) / (t[i] - t[i - 1]));
            }
        }
        Ok(best)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Numerical("time series is not strictly increasing".into()));
            }
        }
        for s in &self.samples {
            if !s.l2.is_finite() || s.h.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite norm at t = {}", s.t)));
            }
        }
        Ok(())
    }

    /// CSV with columns `t, l2, h_sigma_<σ>…, A`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["t".to_string(), "l2".to_string()];
        head.extend(self.sigmas.iter().map(|s| format!("h_sigma_{s}")));
        head.push("A".into());
        w.write_record(&head).map_err(csv_err)?;
        for s in &self.samples {
            let mut row = vec![format!("{:.17e}", s.t), format!("{:.17e}", s.l2)];
            row.extend(s.h.iter().map(|v| format!("{v:.17e}")));
            row.push(s.a.map(|a| format!("{a:.17e}")).unwrap_or_default());
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Numerical(format!("csv: {e}"))
}

/// Output of [`solve`]. On a non-finite state the run stops early:
/// `failure` is set, `state` is the last good state and `series` ends there.
#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub series: TimeSeries,
    pub state: SpectralState,
    pub dt: f64,
    pub failure: Option<String>,
}

/// Step size actually used: the default or configured step, shrunk so that
/// the sample interval is an integer number of steps.
pub fn effective_dt(config: &SimulationConfig, eq: &Equation) -> Result<(f64, usize)> {
    config.validate()?;
    let w = match config.integrator {
        Integrator::Rk4 => eq.total_field(config.dim, config.epsilon)?,
        Integrator::IntegratingFactor => eq.split_drift(config.dim, config.epsilon)?.1,
    };
    let stiff = stiffness(&w, config.band);
    let dt = match config.dt {
        Some(dt) => dt,
        None if stiff > 0.0 => config.courant / stiff,
        None => config.sample_interval,
    };
    let per = (config.sample_interval / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let dt = config.sample_interval / per as f64;
    if dt * stiff > config.cfl_guard * (1.0 + 1e-12) {
        return invalid(format!(
            "time step {dt:.3e} violates the guard: dt·ΣN_j sup|W_j| = {:.3} > {}",
            dt * stiff,
            config.cfl_guard
        ));
    }
    Ok((dt, per))
}

/// RK4 integration over `[0, t_end]`.
pub fn solve(config: &SimulationConfig, u0: &SpectralState, eq: &Equation) -> Result<SolveOutput> {
    solve_observed(config, u0, eq, |_, _| Ok(None))
}

/// As [`solve`], with `observer(t, u)` called at every sample; its return
/// value fills the `A` column.
pub fn solve_observed<O>(config: &SimulationConfig, u0: &SpectralState, eq: &Equation, mut observer: O) -> Result<SolveOutput>
where
    O: FnMut(f64, &SpectralState) -> Result<Option<f64>>,
{
    if u0.dim() != config.dim || u0.band() != config.band {
        return invalid(format!("initial state band {:?} does not match the config band {:?}", u0.band(), config.band));
    }
    let (dt, per) = effective_dt(config, eq)?;
    let mut op = TransportOperator::new(eq, config.epsilon, config.dim, config.band, config.backend)?;
    if config.integrator == Integrator::IntegratingFactor {
        op = op.without_drift();
    }
    let n_samples = (config.t_end / config.sample_interval).round() as usize;
    let mut series = TimeSeries { sigmas: config.sigmas.clone(), samples: Vec::new(), config_hash: config.hash() };
    let mut u = u0.clone();
    let mut stepper = Rk4::new(&u)?;
    let record = |t: f64, u: &SpectralState, a: Option<f64>| -> Sample {
        let h = sobolev_norms(u, &config.sigmas);
        Sample { t, l2: u.l2_norm(), h, a }
    };
    let a0 = observer(0.0, &u)?;
    series.samples.push(record(0.0, &u, a0));
    let mut last_good = u.clone();
    for s in 1..=n_samples {
        let t0 = (s - 1) as f64 * config.sample_interval;
        for j in 0..per {
            match op.drift() {
                Some(d) => stepper.step_lawson(&op, d, t0 + j as f64 * dt, dt, &mut u)?,
                None => stepper.step(&op, t0 + j as f64 * dt, dt, &mut u, |_, _| {})?,
            }
        }
        let t = s as f64 * config.sample_interval;
        if !u.coeffs().iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            let msg = format!("non-finite state between t = {t0} and t = {t}");
            log::warn!("{msg}");
            return Ok(SolveOutput { series, state: last_good, dt, failure: Some(msg) });
        }
        let a = observer(t, &u)?;
        let sample = record(t, &u, a);
        if !sample.l2.is_finite() || sample.h.iter().any(|v| !v.is_finite()) {
            let msg = format!("norm overflow at t = {t}");
            return Ok(SolveOutput { series, state: last_good, dt, failure: Some(msg) });
        }
        series.samples.push(sample);
        last_good.coeffs_mut().copy_from_slice(u.coeffs());
    }
    Ok(SolveOutput { series, state: u, dt, failure: None })
}

/// Characteristics oracle for autonomous `V`, ε = 0, b = 0:
/// `u(t,x) = |det dφ^t(x)|^{1/2} u₀(φ^t(x))`, sampled on an `M₁ × M₂` grid
/// (row-major, second index fastest).
pub fn characteristics_solve<F>(v: &FourierVectorField, u0: F, grid: [usize; 2], t: f64, ctrl: StepControl) -> Result<Vec<Complex64>>
where
    F: Fn([f64; 2]) -> Complex64 + Sync,
{
    use rayon::prelude::*;
    if !v.is_autonomous() {
        return invalid("characteristics oracle needs an autonomous field");
    }
    let dim = v.dim();
    let m1 = if dim == 1 { 1 } else { grid[1] };
    (0..grid[0] * m1)
        .into_par_iter()
        .map(|idx| {
            let i = idx / m1;
            let j = idx % m1;
            let x = [std::f64::consts::TAU * i as f64 / grid[0] as f64, std::f64::consts::TAU * j as f64 / m1 as f64];
            let p = if dim == 1 { TorusPoint::new1(x[0]) } else { TorusPoint::new2(x[0], x[1]) };
            let jet = variational_flow(v, &p, t, ctrl)?;
            Ok(u0(jet.x_t.raw()) * jet.det().abs().sqrt())
        })
        .collect()
}

/// Result of the Duhamel–Picard iteration.
#[derive(Clone, Debug)]
pub struct PicardResult {
    pub state: SpectralState,
    pub iterations: usize,
    /// `sup_t ‖v_{n+1}(t) − v_n(t)‖_{L²}` per iteration.
    pub increments: Vec<f64>,
    pub converged: bool,
}

/// Fixed-point iteration `v_{n+1} = U₀(t,0)u₀ + ∫₀ᵗ U₀(t,τ)R₀v_n(τ)dτ` with
/// `R₀ = εOp(b₂)` and `U₀` the b₂-free propagator. Each iterate solves
/// `∂_t w = B₀w + R₀v_n(t)` with the same RK4 scheme used by [`solve`].
pub fn picard_reference(
    u0: &SpectralState,
    t_end: f64,
    eq: &Equation,
    eps: f64,
    dt: f64,
    max_iterations: usize,
) -> Result<PicardResult> {
    if !(t_end > 0.0 && t_end <= 1.0) {
        return invalid("picard reference is meant for 0 < T ≤ 1");
    }
    if u0.band()[0] > 16 || u0.band()[1] > 16 {
        return invalid("picard reference is meant for N ≤ 16");
    }
    let steps = (t_end / dt).ceil().max(1.0) as usize;
    let h = t_end / steps as f64;
    let free = Equation { b2: None, ..eq.clone() };
    let op = TransportOperator::new(&free, eps, u0.dim(), u0.band(), Backend::Convolution)?;
    let r0 = eq.b2.clone();
    // iterates stored at half steps
    let mut prev: Option<Vec<SpectralState>> = None;
    let mut increments = Vec::new();
    let mut stepper = Rk4::new(u0)?;
    for it in 0..=max_iterations {
        let forcing_src: Option<Vec<SpectralState>> = match (&prev, &r0) {
            (Some(p), Some(b)) if eps != 0.0 => {
                let mut f = Vec::with_capacity(p.len());
                for s in p {
                    f.push(weyl_apply(b.as_ref(), s)?.state.scaled(Complex64::new(eps, 0.0)));
                }
                Some(f)
            }
            _ => None,
        };
        let mut traj = Vec::with_capacity(2 * steps + 1);
        let mut u = u0.clone();
        traj.push(u.clone());
        for n in 0..steps {
            let t = n as f64 * h;
            let src = forcing_src.as_ref();
            stepper.step(&op, t, h, &mut u, |ts, k| {
                if let Some(f) = src {
                    let idx = ((ts - n as f64 * h) / (0.5 * h)).round() as usize + 2 * n;
                    for (a, b) in k.coeffs_mut().iter_mut().zip(f[idx].coeffs()) {
                        *a += b;
                    }
                }
            })?;
            traj.push(SpectralState::zeros(u.dim(), u.band())?);
            traj.push(u.clone());
        }
        // midpoints, needed by the next iterate's RK4 stages
        for n in 0..steps {
            let t = n as f64 * h;
            let mut m = traj[2 * n].clone();
            let src = forcing_src.as_ref();
            let hh = 0.5 * h;
            stepper.step(&op, t, hh, &mut m, |ts, k| {
                if let Some(f) = src {
                    // linear interpolation of the forcing inside [t, t+h/2]
                    let s = ((ts - t) / hh).clamp(0.0, 1.0);
                    let a = &f[2 * n];
                    let b = &f[2 * n + 1];
                    for ((kk, x), y) in k.coeffs_mut().iter_mut().zip(a.coeffs()).zip(b.coeffs()) {
                        *kk += x * (1.0 - s) + y * s;
                    }
                }
            })?;
            traj[2 * n + 1] = m;
        }
        if let Some(p) = &prev {
            let mut inc: f64 = 0.0;
            for (a, b) in traj.iter().zip(p).step_by(2) {
                inc = inc.max(a.distance(b)?);
            }
            increments.push(inc);
            if inc <= 1e-10 {
                return Ok(PicardResult {
                    state: traj.last().expect("nonempty").clone(),
                    iterations: it,
                    increments,
                    converged: true,
                });
            }
        } else if r0.is_none() || eps == 0.0 {
            return Ok(PicardResult { state: traj.last().expect("nonempty").clone(), iterations: 1, increments, converged: true });
        }
        prev = Some(traj);
    }
    Err(Error::Numerical(format!("picard iteration did not converge in {max_iterations} iterations")))
}

/// Least-squares fit of `log‖u‖_σ` against `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub rate: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
    pub samples: usize,
}

pub fn fit_growth_rate(series: &TimeSeries, sigma: f64, window: (f64, f64)) -> Result<GrowthFit> {
    let col = series.column(sigma)?;
    let tol = 1e-9 * window.1.abs().max(1.0);
    let pts: Vec<(f64, f64)> = series
        .samples
        .iter()
        .zip(col)
        .filter(|(s, _)| s.t >= window.0 - tol && s.t <= window.1 + tol)
        .map(|(s, c)| (s.t, c))
        .collect();
    if pts.len() < 2 || !(window.1 > window.0) {
        return invalid(format!("degenerate fit window [{}, {}]", window.0, window.1));
    }
    if pts.iter().any(|p| !(p.1 > 0.0)) {
        return Err(Error::Numerical("nonpositive norm in fit window".into()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1.ln() - my)).sum();
    if sxx == 0.0 {
        return invalid("degenerate fit window");
    }
    let rate = sxy / sxx;
    let intercept = my - rate * mt;
    let residual = (pts.iter().map(|p| (p.1.ln() - intercept - rate * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Ok(GrowthFit { rate, intercept, residual, samples: pts.len() })
}

/// Outcome of the differential and integrated energy inequalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthInequalityReport {
    pub interior_samples: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    /// `min_i (dA/dt − α̃σA + β‖u‖²)`
    pub worst_margin: f64,
    /// `A(0) − β‖u₀‖²`, i.e. `−F(u₀)` with `F` built from `−A`.
    pub initial_gap: f64,
    /// Whether `A(t) − β‖u(t)‖² ≥ e^{α̃σt}(A(0) − β‖u₀‖²)` held at every sample.
    pub integrated_holds: bool,
    pub integrated_worst: f64,
}

/// Checks `dA/dt ≥ α̃σA − β‖u‖²` by central differences at interior samples
/// and the integrated bound at all samples.
pub fn verify_growth_inequality(series: &TimeSeries, alpha_tilde: f64, sigma: f64, beta: f64) -> Result<GrowthInequalityReport> {
    let s = &series.samples;
    let a: Vec<f64> = s
        .iter()
        .map(|x| x.a.ok_or_else(|| Error::Invalid("series does not track A(t)".into())))
        .collect::<Result<_>>()?;
    let rate = alpha_tilde * sigma;
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) + s.iter().fold(0.0f64, |m, x| m.max(x.l2 * x.l2)) * beta.abs();
    let tol = 1e-12 * scale.max(1e-300);
    for i in 1..s.len().saturating_sub(1) {
        let da = (a[i + 1] - a[i - 1]) / (s[i + 1].t - s[i - 1].t);
        let margin = da - rate * a[i] + beta * s[i].l2 * s[i].l2;
        worst = worst.min(margin);
        if margin < -tol {
            violations += 1;
        }
    }
    let interior = s.len().saturating_sub(2);
    let gap0 = match s.first() {
        Some(x) => a[0] - beta * x.l2 * x.l2,
        None => 0.0,
    };
    let mut integrated_worst = f64::INFINITY;
    for (i, x) in s.iter().enumerate() {
        let lhs = a[i] - beta * x.l2 * x.l2;
        let rhs = (rate * (x.t - s[0].t)).exp() * gap0;
        let m = lhs - rhs;
        integrated_worst = integrated_worst.min(m);
    }
    Ok(GrowthInequalityReport {
        interior_samples: interior,
        violations,
        violation_fraction: if interior > 0 { violations as f64 / interior as f64 } else { 0.0 },
        worst_margin: if interior > 0 { worst } else { 0.0 },
        initial_gap: gap0,
        integrated_holds: integrated_worst >= -tol,
        integrated_worst: if s.is_empty() { 0.0 } else { integrated_worst },
    })
}

/// Upper bound on `d/dt log‖u‖_σ`: `σ·Lip(W) + ½ sup|div W| + ε sup|b₂|`
/// estimated from coefficient sums.
pub fn envelope_bound(w: &FourierVectorField, sigma: f64) -> f64 {
    let mut lip = 0.0;
    let mut div = 0.0;
    for m in w.modes() {
        let kn = ((m.k[0] as f64).powi(2) + (m.k[1] as f64).powi(2)).sqrt();
        lip += kn * (m.v[0].norm_sqr() + m.v[1].norm_sqr()).sqrt();
        div += (m.k[0] as f64 * m.v[0] + m.k[1] as f64 * m.v[1]).norm();
    }
    (sigma + 1.0) * lip + 0.5 * div
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::{sobolev_norm, ConstantSymbol};

    fn smooth_state(dim: usize, band: [usize; 2]) -> SpectralState {
        SpectralState::from_fn(dim, band, |k| {
            let r = (k[0] * k[0] + k[1] * k[1]) as f64;
            Complex64::new((-0.5 * r).exp(), 0.3 * k[0] as f64 * (-0.5 * r).exp())
        })
        .unwrap()
    }

    #[test]
    fn integrating_factor_matches_rk4() {
        let nu = FourierVectorField::constant(&[1.0, 1.0]).unwrap();
        let p = FourierVectorField::builder(2).sin(0, [1, 0], 1, 1.0).cos(1, [1, 1], -1, 0.5).build().unwrap();
        let eq = Equation::perturbed(nu, p);
        let band = [12, 12];
        let u0 = smooth_state(2, band);
        let mut cfg = SimulationConfig::new(2, band, 1.0);
        cfg.epsilon = 0.3;
        cfg.sample_interval = 0.5;
        cfg.dt = Some(1e-3);
        let a = solve(&cfg, &u0, &eq).unwrap();
        cfg.integrator = Integrator::IntegratingFactor;
        cfg.dt = None;
        let b = solve(&cfg, &u0, &eq).unwrap();
        assert!(b.dt > 5.0 * effective_dt(&SimulationConfig { integrator: Integrator::Rk4, ..cfg.clone() }, &eq).unwrap().0);
        assert!(a.state.distance(&b.state).unwrap() < 1e-7 * a.state.l2_norm());
        assert!(b.series.l2_drift() < 1e-9);
    }

    #[test]
    fn constant_multiplier_rhs() {
        let nu = FourierVectorField::constant(&[1.0, 2.0]).unwrap();
        let u = SpectralState::mode(2, [4, 4], [3, -1]).unwrap();
        let r = rhs(&u, 0.0, &nu, 0.0, None, (None, None)).unwrap();
        assert!((r.get([3, -1]) - Complex64::new(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn backends_agree() {
        let v = FourierVectorField::builder(2)
            .sin(0, [1, 0], 0, 1.0)
            .sin(1, [0, 1], 0, 1.0)
            .cos(0, [1, 1], 1, 0.3)
            .build()
            .unwrap();
        let u = smooth_state(2, [8, 6]);
        let eq = Equation::transport(v);
        let a = TransportOperator::new(&eq, 0.0, 2, [8, 6], Backend::Convolution).unwrap();
        let b = TransportOperator::new(&eq, 0.0, 2, [8, 6], Backend::Pseudospectral).unwrap();
        let mut ra = SpectralState::zeros(2, [8, 6]).unwrap();
        let mut rb = ra.clone();
        a.apply(0.7, &u, &mut ra).unwrap();
        b.apply(0.7, &u, &mut rb).unwrap();
        assert!(ra.distance(&rb).unwrap() < 1e-12 * ra.l2_norm());
    }

    #[test]
    fn field_band_overflow_is_an_error() {
        let v = FourierVectorField::builder(2).sin(0, [5, 0], 0, 1.0).build().unwrap();
        assert!(TransportOperator::new(&Equation::transport(v), 0.0, 2, [4, 4], Backend::Auto).is_err());
    }

    #[test]
    fn rhs_is_skew() {
        let v = FourierVectorField::builder(2).sin(0, [1, 0], 0, 1.0).cos(1, [1, 1], 0, 0.5).build().unwrap();
        let u = smooth_state(2, [6, 6]);
        let r = rhs(&u, 0.0, &v, 0.0, None, (None, None)).unwrap();
        assert!(r.inner(&u).unwrap().re.abs() < 1e-13);
    }

    #[test]
    fn translation_keeps_norms() {
        let nu = FourierVectorField::constant(&[1.0, 1.0]).unwrap();
        let mut cfg = SimulationConfig::new(2, [8, 8], 2.0);
        cfg.sample_interval = 0.5;
        let u0 = smooth_state(2, [8, 8]);
        let out = solve(&cfg, &u0, &Equation::transport(nu)).unwrap();
        let n0 = sobolev_norm(&u0, 1.0);
        for s in &out.series.samples {
            assert!((s.h[1] / n0 - 1.0).abs() < 1e-10);
        }
        let exact = u0.translated([-2.0, -2.0]);
        assert!(out.state.distance(&exact).unwrap() < 1e-8);
    }

    #[test]
    fn b_terms() {
        let zero = FourierVectorField::zero(2);
        let u0 = smooth_state(2, [4, 4]);
        let mut cfg = SimulationConfig::new(2, [4, 4], 1.0);
        cfg.sample_interval = 0.5;
        cfg.dt = Some(0.01);
        cfg.epsilon = 0.2;
        let eq = Equation { v: Some(zero.clone()), b1: Some(Arc::new(ConstantSymbol { dim: 2, value: Complex64::new(0.7, 0.0) })), ..Default::default() };
        let out = solve(&cfg, &u0, &eq).unwrap();
        let exact = u0.scaled(Complex64::from_polar(1.0, 0.7));
        assert!(out.state.distance(&exact).unwrap() < 1e-9);
        let eq = Equation { v: Some(zero), b2: Some(Arc::new(ConstantSymbol { dim: 2, value: Complex64::new(0.5, 0.0) })), ..Default::default() };
        let out = solve(&cfg, &u0, &eq).unwrap();
        assert!((out.state.l2_norm() / u0.l2_norm() - (0.1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn guard_rejects_large_steps() {
        let v = FourierVectorField::constant(&[1.0, 1.0]).unwrap();
        let mut cfg = SimulationConfig::new(2, [16, 16], 1.0);
        cfg.sample_interval = 0.5;
        cfg.dt = Some(0.1);
        assert!(effective_dt(&cfg, &Equation::transport(v)).is_err());
    }

    #[test]
    fn fit_exact_exponential() {
        let samples = (0..20)
            .map(|i| {
                let t = i as f64 * 0.5;
                Sample { t, l2: 1.0, h: vec![2.0 * (0.3 * t).exp()], a: None }
            })
            .collect();
        let s = TimeSeries { sigmas: vec![0.5], samples, config_hash: String::new() };
        let f = fit_growth_rate(&s, 0.5, (1.0, 8.0)).unwrap();
        assert!((f.rate - 0.3).abs() < 1e-10 && f.residual < 1e-12);
        let f = fit_growth_rate(&s, 0.0, (0.0, 9.5)).unwrap();
        assert!(f.rate.abs() < 1e-15 && f.residual == 0.0);
        assert!(fit_growth_rate(&s, 0.5, (3.0, 3.1)).is_err());
    }

    #[test]
    fn characteristics_translation() {
        let v = FourierVectorField::constant(&[1.0, 0.5]).unwrap();
        let u0 = |x: [f64; 2]| Complex64::new(x[0].cos() * (2.0 * x[1]).sin(), 0.0);
        let g = characteristics_solve(&v, u0, [8, 8], 0.7, StepControl::default()).unwrap();
        let x = [std::f64::consts::TAU * 3.0 / 8.0, std::f64::consts::TAU * 5.0 / 8.0];
        assert!((g[3 * 8 + 5] - u0([x[0] + 0.7, x[1] + 0.35])).norm() < 1e-12);
    }

    #[test]
    fn characteristics_fixed_point() {
        let v = FourierVectorField::builder(2).sin(0, [1, 0], 0, 1.0).sin(1, [0, 1], 0, 1.0).build().unwrap();
        let g = characteristics_solve(&v, |_| Complex64::new(1.0, 0.0), [4, 4], 0.8, StepControl::default()).unwrap();
        // at the source tr dV = 2, so the amplitude is e^{t}
        assert!((g[0].re - 0.8f64.exp()).abs() < 1e-8);
        // at the sink (π, π), e^{-t}
        assert!((g[2 * 4 + 2].re - (-0.8f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn inequality_on_exact_exponential() {
        let samples: Vec<Sample> = (0..11)
            .map(|i| {
                let t = i as f64 * 0.1;
                Sample { t, l2: 1.0, h: vec![], a: Some((0.5 * t).exp()) }
            })
            .collect();
        let s = TimeSeries { sigmas: vec![], samples, config_hash: String::new() };
        let r = verify_growth_inequality(&s, 0.4, 1.0, 0.0).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.integrated_holds);
        let r = verify_growth_inequality(&s, 0.6, 1.0, 0.0).unwrap();
        assert_eq!(r.violations, 9);
    }
}
