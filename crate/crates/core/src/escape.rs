//! Escape function `a = m·f_σ` on `T*T² ∖ 0` for a certified Morse-Smale
//! field with point critical elements, and its grid certification.
//!
//! Unit covectors are parametrized by an angle, `ξ = (cos θ, sin θ)`. The
//! order function `m` and the weight `f_σ` are defined through finite-time
//! averages along the lifted flow `(x, ξ) ↦ (φ^t x, [dφ^t]^{-T}ξ)`, so every
//! evaluation integrates one forward and one backward track.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{lift_rhs, rk4_step, torus_distance, wrap, FourierScalarField, FourierVectorField, TAU};
use crate::msanalysis::{stable_unstable_manifold_sample, ElementKind, Klass, MsReport, Side, Verdict};
use crate::quantize::{cutoff_chi, AngularGridSymbol};

/// Quintic smoothstep on `[0, 1]`, clamped outside.
pub fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn quantile(v: &mut [f64], q: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let i = ((v.len() - 1) as f64 * q).floor() as usize;
    Some(v[i])
}

/// Construction and certification parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscapeParams {
    /// Radius of the profile transition around the attracting and repelling sets.
    pub r_w: f64,
    /// Radius of the partition of unity for `f₁`.
    pub r_v: f64,
    /// Radius of the critical neighborhood `U`.
    pub r_u: f64,
    /// Averaging horizon of `m₁`, `m₂`.
    pub t_avg: f64,
    /// Averaging horizon `T₁` of `f₁`.
    pub t1: f64,
    pub eps_profile: f64,
    /// Track step of the lifted flow.
    pub step: f64,
    /// Finite-difference step of `X_h`.
    pub fd_step: f64,
    /// Resolution of the tabulated profile `u₀` over `(x₁, x₂, θ)`.
    pub profile_grid: [usize; 3],
    /// Resolution of the quick checks done by the builders.
    pub check_grid: [usize; 3],
    /// Spacing of separatrix samples.
    pub separatrix_spacing: f64,
    /// Allowed fraction of monotonicity failures of `m₁`, `m₂`.
    pub monotone_slack: f64,
    pub tol_m: f64,
}

impl Default for EscapeParams {
    fn default() -> Self {
        Self {
            r_w: 0.35,
            r_v: 0.6,
            r_u: 0.5,
            t_avg: 6.0,
            t1: 1.0,
            eps_profile: 1.0 / 16.0,
            step: 0.05,
            fd_step: 1e-3,
            profile_grid: [96, 96, 96],
            check_grid: [16, 16, 16],
            separatrix_spacing: 0.01,
            monotone_slack: 0.005,
            tol_m: 1e-4,
        }
    }
}

// ---------------------------------------------------------------- geometry

/// A compact subset of `S*T²` made of full fibers over points and conormal
/// directions over sampled curves, with a spatial hash for capped distances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConormalSet {
    pub fibers: Vec<[f64; 2]>,
    cap: f64,
    cells: usize,
    /// Per cell: `(x, conormal angle mod π)`.
    buckets: Vec<Vec<([f64; 2], f64)>>,
}

fn angle_mod_pi(d: f64) -> f64 {
    let h = std::f64::consts::PI;
    (d + 0.5 * h).rem_euclid(h) - 0.5 * h
}

impl ConormalSet {
    fn new(cap: f64) -> Self {
        let cells = ((TAU / cap).floor() as usize).max(1);
        Self { fibers: Vec::new(), cap, cells, buckets: vec![Vec::new(); cells * cells] }
    }

    fn cell(&self, x: [f64; 2]) -> (usize, usize) {
        let c = self.cells as f64;
        (((wrap(x[0]) / TAU * c) as usize).min(self.cells - 1), ((wrap(x[1]) / TAU * c) as usize).min(self.cells - 1))
    }

    fn push_conormal(&mut self, x: [f64; 2], angle: f64) {
        let x = [wrap(x[0]), wrap(x[1])];
        let (i, j) = self.cell(x);
        self.buckets[i * self.cells + j].push((x, angle_mod_pi(angle)));
    }

    pub fn conormal_count(&self) -> usize {
        self.buckets.iter().map(|b| b.len()).sum()
    }

    /// `min(dist((x, θ), set), cap)` in the product metric.
    pub fn distance(&self, x: [f64; 2], theta: f64) -> f64 {
        let mut best = self.cap;
        for p in &self.fibers {
            best = best.min(torus_distance(*p, x));
        }
        let (i, j) = self.cell(x);
        let n = self.cells as isize;
        let span: Vec<isize> = if n >= 3 { vec![-1, 0, 1] } else { (0..n).collect() };
        for &di in &span {
            for &dj in &span {
                let (ci, cj) = if n >= 3 {
                    ((i as isize + di).rem_euclid(n) as usize, (j as isize + dj).rem_euclid(n) as usize)
                } else {
                    (di as usize, dj as usize)
                };
                for (p, ang) in &self.buckets[ci * self.cells + cj] {
                    let dx = torus_distance(*p, x);
                    if dx >= best {
                        continue;
                    }
                    let da = angle_mod_pi(theta - ang);
                    best = best.min((dx * dx + da * da).sqrt());
                }
            }
        }
        best
    }
}

/// Repelling set `R = R^r` and attracting set `A = A^a` (point critical
/// elements only, where the strong foliations are trivial).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Geometry {
    pub repelling: ConormalSet,
    pub attracting: ConormalSet,
    pub critical: Vec<[f64; 2]>,
}

impl Geometry {
    fn critical_distance(&self, x: [f64; 2]) -> f64 {
        self.critical.iter().map(|p| torus_distance(*p, x)).fold(f64::INFINITY, f64::min)
    }
}

fn require_certified(report: &MsReport) -> Result<()> {
    if report.verdict != Verdict::CertifiedMs {
        return invalid("escape construction needs a certified Morse-Smale field");
    }
    if report.elements.iter().any(|e| e.kind == ElementKind::ClosedOrbit) {
        return invalid("closed orbits need user-supplied strong-foliation data, which is not supported");
    }
    Ok(())
}

/// Conormal sets from the critical points and separatrices of the report.
pub fn build_geometry(v: &FourierVectorField, report: &MsReport, params: &EscapeParams) -> Result<Geometry> {
    require_certified(report)?;
    let cap = 1.5 * params.r_w.max(params.r_v).max(1e-3);
    let mut rep = ConormalSet::new(cap);
    let mut att = ConormalSet::new(cap);
    let mut critical = Vec::new();
    for e in &report.elements {
        let x = e.location.raw();
        critical.push(x);
        match e.klass {
            Klass::Source => rep.fibers.push(x),
            Klass::Sink => att.fibers.push(x),
            Klass::Saddle => {
                for (side, set) in [(Side::Stable, &mut rep), (Side::Unstable, &mut att)] {
                    for b in [1i8, -1] {
                        let pts = stable_unstable_manifold_sample(v, e, side, b, 1e3, &report.params)?;
                        let mut last: Option<[f64; 2]> = None;
                        for p in pts {
                            if let Some(q) = last {
                                if torus_distance(p, q) < params.separatrix_spacing {
                                    continue;
                                }
                            }
                            let w = v.eval(0.0, p);
                            if w[0].hypot(w[1]) < 1e-10 {
                                continue;
                            }
                            set.push_conormal(p, w[1].atan2(w[0]) + 0.5 * std::f64::consts::PI);
                            last = Some(p);
                        }
                    }
                    // the saddle itself, conormal to the eigendirection
                    let (_, j) = v.eval_jac(0.0, x);
                    let (ev, vecs) = crate::msanalysis::eig2(j);
                    let vecs = vecs.expect("saddle eigenvectors are real");
                    let pick = match side {
                        Side::Stable => if ev[0].re < 0.0 { vecs[0] } else { vecs[1] },
                        Side::Unstable => if ev[0].re > 0.0 { vecs[0] } else { vecs[1] },
                    };
                    set.push_conormal(x, pick[1].atan2(pick[0]) + 0.5 * std::f64::consts::PI);
                }
            }
            _ => return invalid("non-hyperbolic element in a certified report"),
        }
    }
    Ok(Geometry { repelling: rep, attracting: att, critical })
}

/// `u₀ = S(½(1 + ρ_R − ρ_A))` with `ρ = min(d/r_w, 1)`, tabulated and
/// interpolated trilinearly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileGrid {
    pub shape: [usize; 3],
    /// Stored separately by the binary container.
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl ProfileGrid {
    pub fn build(geo: &Geometry, r_w: f64, shape: [usize; 3]) -> Self {
        let [n0, n1, n2] = shape;
        let values = (0..n0 * n1 * n2)
            .into_par_iter()
            .map(|idx| {
                let i = idx / (n1 * n2);
                let j = (idx / n2) % n1;
                let k = idx % n2;
                let x = [TAU * i as f64 / n0 as f64, TAU * j as f64 / n1 as f64];
                let th = TAU * k as f64 / n2 as f64;
                let rr = (geo.repelling.distance(x, th) / r_w).min(1.0);
                let ra = (geo.attracting.distance(x, th) / r_w).min(1.0);
                smoothstep(0.5 * (1.0 + rr - ra))
            })
            .collect();
        Self { shape, values }
    }

    pub fn eval(&self, x: [f64; 2], theta: f64) -> f64 {
        let [n0, n1, n2] = self.shape;
        let s = [wrap(x[0]) / TAU * n0 as f64, wrap(x[1]) / TAU * n1 as f64, theta.rem_euclid(TAU) / TAU * n2 as f64];
        let i = [s[0].floor(), s[1].floor(), s[2].floor()];
        let f = [s[0] - i[0], s[1] - i[1], s[2] - i[2]];
        let i0 = [i[0] as usize % n0, i[1] as usize % n1, i[2] as usize % n2];
        let i1 = [(i0[0] + 1) % n0, (i0[1] + 1) % n1, (i0[2] + 1) % n2];
        let at = |a: usize, b: usize, c: usize| self.values[(a * n1 + b) * n2 + c];
        let mut acc = 0.0;
        for (a, wa) in [(i0[0], 1.0 - f[0]), (i1[0], f[0])] {
            for (b, wb) in [(i0[1], 1.0 - f[1]), (i1[1], f[1])] {
                for (c, wc) in [(i0[2], 1.0 - f[2]), (i1[2], f[2])] {
                    acc += wa * wb * wc * at(a, b, c);
                }
            }
        }
        acc
    }
}

// ------------------------------------------------------------------ energy

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EnergyMode {
    /// Given potential, or the field's own potential when it is a gradient.
    Potential { potential: Option<FourierScalarField> },
    /// Time average over `[−T, T]` of Gaussian bumps at the critical points
    /// weighted by `1 − dim W^u`.
    Averaged { horizon: f64, width: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyRepr {
    Fourier { field: FourierScalarField },
    Averaged { centers: Vec<[f64; 2]>, levels: Vec<f64>, width: f64, horizon: f64 },
}

/// Certification of `L_V E` on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheck {
    pub grid: usize,
    pub min_lie: f64,
    /// `min L_V E` outside the `r_u`-balls of the critical points.
    pub eta_e: f64,
    pub worst_point: [f64; 2],
    pub certified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyFn {
    pub repr: EnergyRepr,
    pub scale: f64,
    /// Upper bound on `sup|E|`.
    pub sup_bound: f64,
    pub check: EnergyCheck,
}

/// Potential `F` with `∇F = V`, if `V` is a mean-free autonomous gradient.
pub fn gradient_potential(v: &FourierVectorField) -> Option<FourierScalarField> {
    if v.dim() != 2 || !v.is_autonomous() {
        return None;
    }
    let scale = v.modes().iter().fold(0.0f64, |a, m| a.max(m.v[0].norm()).max(m.v[1].norm()));
    let tol = 1e-12 * scale.max(1.0);
    let mut modes = Vec::new();
    for m in v.modes() {
        if m.k == [0, 0] {
            if m.v[0].norm() + m.v[1].norm() > tol {
                return None;
            }
            continue;
        }
        let (k0, k1) = (m.k[0] as f64, m.k[1] as f64);
        if (m.v[1] * k0 - m.v[0] * k1).norm() > tol {
            return None;
        }
        let c = if m.k[0] != 0 { m.v[0] / Complex64::new(0.0, k0) } else { m.v[1] / Complex64::new(0.0, k1) };
        modes.push((m.k, c));
    }
    FourierScalarField::new(modes).ok()
}

impl EnergyFn {
    /// `E = 0`, for inspecting the averaged profiles alone.
    pub fn zero() -> Self {
        EnergyFn {
            repr: EnergyRepr::Fourier { field: FourierScalarField::cosines(&[]) },
            scale: 0.0,
            sup_bound: 0.0,
            check: EnergyCheck { grid: 0, min_lie: 0.0, eta_e: 0.0, worst_point: [0.0; 2], certified: true },
        }
    }

    fn averaged_g(centers: &[[f64; 2]], levels: &[f64], width: f64, x: [f64; 2]) -> f64 {
        centers
            .iter()
            .zip(levels)
            .map(|(c, l)| {
                let d = torus_distance(*c, x);
                l * (-d * d / (2.0 * width * width)).exp()
            })
            .sum()
    }

    fn averaged_ends(v: &FourierVectorField, x: [f64; 2], horizon: f64) -> ([f64; 2], [f64; 2], Vec<[f64; 2]>) {
        let n = (horizon / 0.01).ceil() as usize;
        let h = horizon / n as f64;
        let fw = |_: f64, y: &[f64; 2]| v.eval(0.0, *y);
        let bw = |_: f64, y: &[f64; 2]| {
            let w = v.eval(0.0, *y);
            [-w[0], -w[1]]
        };
        let mut pts = Vec::with_capacity(2 * n + 1);
        let mut yf = x;
        let mut yb = x;
        pts.push(x);
        for i in 0..n {
            yf = rk4_step(&fw, i as f64 * h, &yf, h);
            yb = rk4_step(&bw, i as f64 * h, &yb, h);
            pts.push(yf);
            pts.push(yb);
        }
        (yf, yb, pts)
    }

    /// `E(x)`
    pub fn value(&self, v: &FourierVectorField, x: [f64; 2]) -> f64 {
        match &self.repr {
            EnergyRepr::Fourier { field } => self.scale * field.eval(x),
            EnergyRepr::Averaged { centers, levels, width, horizon } => {
                let (_, _, pts) = Self::averaged_ends(v, x, *horizon);
                let n = (pts.len() - 1) / 2;
                // trapezoid over [−T, T]: interior weight 1, ends ½
                let mut s = 0.0;
                for (i, p) in pts.iter().enumerate() {
                    let w = if i + 2 >= pts.len() { 0.5 } else { 1.0 };
                    s += w * Self::averaged_g(centers, levels, *width, *p);
                }
                self.scale * s / (2.0 * n as f64)
            }
        }
    }

    /// `L_V E(x)`
    pub fn lie(&self, v: &FourierVectorField, x: [f64; 2]) -> f64 {
        match &self.repr {
            EnergyRepr::Fourier { field } => {
                let g = field.grad(x);
                let w = v.eval(0.0, x);
                self.scale * (g[0] * w[0] + g[1] * w[1])
            }
            EnergyRepr::Averaged { centers, levels, width, horizon } => {
                let (yf, yb, _) = Self::averaged_ends(v, x, *horizon);
                let gf = Self::averaged_g(centers, levels, *width, yf);
                let gb = Self::averaged_g(centers, levels, *width, yb);
                self.scale * (gf - gb) / (2.0 * horizon)
            }
        }
    }

    fn certify(&mut self, v: &FourierVectorField, critical: &[[f64; 2]], r_u: f64, grid: usize) {
        let pts: Vec<(f64, [f64; 2], bool)> = (0..grid * grid)
            .into_par_iter()
            .map(|i| {
                let x = [TAU * (i / grid) as f64 / grid as f64, TAU * (i % grid) as f64 / grid as f64];
                let off = critical.iter().all(|c| torus_distance(*c, x) >= r_u);
                (self.lie(v, x), x, off)
            })
            .collect();
        let mut min_lie = f64::INFINITY;
        let mut eta = f64::INFINITY;
        let mut worst = [0.0; 2];
        for (l, x, off) in pts {
            if l < min_lie {
                min_lie = l;
                worst = x;
            }
            if off {
                eta = eta.min(l);
            }
        }
        let tol_e = 1e-12;
        self.check = EnergyCheck {
            grid,
            min_lie,
            eta_e: eta,
            worst_point: worst,
            certified: min_lie >= -tol_e && eta > 0.0 && self.sup_bound < 0.125,
        };
    }
}

/// Energy function nondecreasing along the flow with `sup|E| < 1/8`.
/// Fails with diagnostics when the grid certification does not pass.
pub fn build_energy(v: &FourierVectorField, report: &MsReport, mode: &EnergyMode, r_u: f64, grid: usize) -> Result<EnergyFn> {
    require_certified(report)?;
    let critical: Vec<[f64; 2]> = report.elements.iter().map(|e| e.location.raw()).collect();
    let mut e = match mode {
        EnergyMode::Potential { potential } => {
            let field = match potential {
                Some(p) => p.clone(),
                None => gradient_potential(v).ok_or_else(|| Error::Invalid("field is not a gradient; supply a potential".into()))?,
            };
            let bound: f64 = field.modes().iter().map(|(_, c)| c.norm()).sum();
            let scale = if bound < 0.125 { 1.0 } else { 0.99 * 0.125 / bound };
            EnergyFn {
                repr: EnergyRepr::Fourier { field },
                scale,
                sup_bound: bound * scale,
                check: EnergyCheck { grid: 0, min_lie: 0.0, eta_e: 0.0, worst_point: [0.0; 2], certified: false },
            }
        }
        EnergyMode::Averaged { horizon, width } => {
            if !(*horizon > 0.0) || !(*width > 0.0) {
                return invalid("averaged energy needs positive horizon and width");
            }
            let levels: Vec<f64> = report
                .elements
                .iter()
                .map(|e| match e.klass {
                    Klass::Source => -1.0,
                    Klass::Saddle => 0.0,
                    _ => 1.0,
                })
                .collect();
            let total: f64 = levels.iter().map(|l| l.abs()).sum::<f64>().max(1e-300);
            let scale = 0.99 * 0.125 / total;
            EnergyFn {
                repr: EnergyRepr::Averaged { centers: critical.clone(), levels, width: *width, horizon: *horizon },
                scale,
                sup_bound: 0.99 * 0.125,
                check: EnergyCheck { grid: 0, min_lie: 0.0, eta_e: 0.0, worst_point: [0.0; 2], certified: false },
            }
        }
    };
    e.certify(v, &critical, r_u, grid);
    if !e.check.certified {
        return Err(Error::Numerical(format!(
            "energy function not certified: min L_V E = {:.3e} at {:?}, η_E = {:.3e}, sup bound {:.4}",
            e.check.min_lie, e.check.worst_point, e.check.eta_e, e.sup_bound
        )));
    }
    Ok(e)
}

// ------------------------------------------------------- order and weight

/// `m₁` (forward average) or `m₂` (backward average) of the tabulated profile.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderProfile {
    pub forward: bool,
    pub horizon: f64,
    pub eps: f64,
    /// Fraction of check-grid points with `X_h(m_j) < −tol_m`.
    pub monotone_failures: f64,
    /// `min X_h(m_j)` off the `W` neighborhoods on the check grid.
    pub eta: f64,
}

/// Violations of the three sign items of the order function on the check grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemChecks {
    pub points: usize,
    /// `m < −½` on `W(R)∩W(R^r)`: (points in region, violations)
    pub item_i: (usize, usize),
    /// `m > ½` on `W(A)∩W(A^a)`
    pub item_ii: (usize, usize),
    /// `m > ¼` on `W(A^a)∩W(R^r)`
    pub item_iii: (usize, usize),
    pub range: (f64, f64),
    pub min_xh_m: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderFunction {
    pub energy: EnergyFn,
    pub m1: OrderProfile,
    pub m2: OrderProfile,
    pub checks: ItemChecks,
}

/// `f₁` blended from `f₁^a`, `f₁^r` and `|ξ|` with measured constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomogeneousWeight {
    pub t1: f64,
    pub r_v: f64,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub c0: f64,
    pub sigma: f64,
}

/// Everything needed to evaluate `m`, `f_σ` and `a` along tracks.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Core {
    #[serde(with = "field_json")]
    v: FourierVectorField,
    geometry: Arc<Geometry>,
    profile: Arc<ProfileGrid>,
    params: EscapeParams,
}

mod field_json {
    use crate::fields::FourierVectorField;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &FourierVectorField, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&f.to_json(), s)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FourierVectorField, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        FourierVectorField::from_json(&v).map_err(serde::de::Error::custom)
    }
}

/// All quantities at one unit covector, with `X_h` by central differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: [f64; 2],
    pub theta: f64,
    pub m1: f64,
    pub m2: f64,
    pub e: f64,
    pub m: f64,
    pub ln_f1: f64,
    pub f_sigma: f64,
    pub a: f64,
    pub xh_m1: f64,
    pub xh_m2: f64,
    pub xh_m: f64,
    pub xh_ln_f1: f64,
    pub xh_f_sigma: f64,
    pub xh_a: f64,
    pub d_r: f64,
    pub d_a: f64,
    pub d_crit: f64,
}

type Y = [f64; 4];

fn lift_step(v: &FourierVectorField, y: &Y, h: f64) -> Y {
    rk4_step(&|t, y: &Y| lift_rhs(v, t, y), 0.0, y, h)
}

fn xi_angle(y: &Y) -> f64 {
    y[3].atan2(y[2])
}

fn xi_ln(y: &Y) -> f64 {
    0.5 * (y[2] * y[2] + y[3] * y[3]).ln()
}

impl Core {
    fn u0(&self, y: &Y) -> f64 {
        self.profile.eval([y[0], y[1]], xi_angle(y))
    }

    fn weights(&self, y: &Y) -> (f64, f64) {
        let th = xi_angle(y);
        let x = [y[0], y[1]];
        let r = self.params.r_v;
        let wr = 1.0 - smoothstep(self.geometry.repelling.distance(x, th) / r);
        let wa = 1.0 - smoothstep(self.geometry.attracting.distance(x, th) / r);
        let s = wr + wa;
        if s > 1.0 {
            (wr / s, wa / s)
        } else {
            (wr, wa)
        }
    }

    fn n_steps(&self, t: f64) -> usize {
        ((t / self.params.step).round() as usize).max(1)
    }

    /// Probe at `(x, θ)`; `energy` supplies `E`, `sigma` the weight power.
    fn probe(&self, energy: &EnergyFn, x: [f64; 2], theta: f64, sigma: f64) -> Probe {
        let p = &self.params;
        let h = p.step;
        let n_t = self.n_steps(p.t_avg);
        let n_1 = self.n_steps(p.t1);
        let t_avg = n_t as f64 * h;
        let t1 = n_1 as f64 * h;
        let n = n_t.max(n_1);
        let v = &self.v;
        let y0: Y = [x[0], x[1], theta.cos(), theta.sin()];
        let back = |t, y: &Y| {
            let d = lift_rhs(v, t, y);
            [-d[0], -d[1], -d[2], -d[3]]
        };
        let mut fwd = Vec::with_capacity(n + 1);
        let mut bwd = Vec::with_capacity(n + 1);
        fwd.push(y0);
        bwd.push(y0);
        let (mut yf, mut yb) = (y0, y0);
        for _ in 0..n {
            yf = lift_step(v, &yf, h);
            yb = rk4_step(&back, 0.0, &yb, h);
            fwd.push(yf);
            bwd.push(yb);
        }
        let trap = |tr: &[Y], k: usize, g: &dyn Fn(&Y) -> f64| -> f64 {
            let mut s = 0.5 * (g(&tr[0]) + g(&tr[k]));
            for y in &tr[1..k] {
                s += g(y);
            }
            s * h
        };
        let u0 = |y: &Y| self.u0(y);
        let lnx = |y: &Y| xi_ln(y);
        let i_m1 = trap(&fwd, n_t, &u0);
        let i_m2 = trap(&bwd, n_t, &u0);
        let i_fr = trap(&fwd, n_1, &lnx);
        let i_fa = trap(&bwd, n_1, &lnx);

        let d = p.fd_step;
        let shift = |y: &Y, s: f64| lift_step(v, y, s);
        // states at s ∈ {−δ, 0, +δ} and at the window ends shifted by s
        let mut vals = [(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0); 3];
        for (slot, s) in [(0usize, -d), (1, 0.0), (2, d)] {
            let z = if s == 0.0 { y0 } else { shift(&y0, s) };
            let zt = if s == 0.0 { fwd[n_t] } else { shift(&fwd[n_t], s) };
            let zbt = if s == 0.0 { bwd[n_t] } else { shift(&bwd[n_t], s) };
            let z1 = if s == 0.0 { fwd[n_1] } else { shift(&fwd[n_1], s) };
            let zb1 = if s == 0.0 { bwd[n_1] } else { shift(&bwd[n_1], s) };
            let half = 0.5 * s;
            // forward window [s, s+T]: add [T, T+s], drop [0, s]
            let m1 = (i_m1 + half * (u0(&fwd[n_t]) + u0(&zt)) - half * (u0(&y0) + u0(&z))) / t_avg;
            // backward window [s−T, s]: add [0, s], drop [−T, −T+s]
            let m2 = (i_m2 + half * (u0(&y0) + u0(&z)) - half * (u0(&bwd[n_t]) + u0(&zbt))) / t_avg;
            let lfr = (i_fr + half * (lnx(&fwd[n_1]) + lnx(&z1)) - half * (lnx(&y0) + lnx(&z))) / t1;
            let lfa = (i_fa + half * (lnx(&y0) + lnx(&z)) - half * (lnx(&bwd[n_1]) + lnx(&zb1))) / t1;
            let (wr, wa) = self.weights(&z);
            let ln_f1 = wr * lfr + wa * lfa + (1.0 - wr - wa) * lnx(&z);
            let e = energy.value(v, [z[0], z[1]]);
            let m = e - 1.0 + 1.5 * m1 + 0.5 * m2;
            vals[slot] = (m1, m2, e, m, ln_f1, (sigma * ln_f1).exp(), 0.0);
            vals[slot].6 = m * vals[slot].5;
        }
        let fd = |f: fn(&(f64, f64, f64, f64, f64, f64, f64)) -> f64| (f(&vals[2]) - f(&vals[0])) / (2.0 * d);
        let c = vals[1];
        Probe {
            x,
            theta,
            m1: c.0,
            m2: c.1,
            e: c.2,
            m: c.3,
            ln_f1: c.4,
            f_sigma: c.5,
            a: c.6,
            xh_m1: fd(|q| q.0),
            xh_m2: fd(|q| q.1),
            xh_m: fd(|q| q.3),
            xh_ln_f1: fd(|q| q.4),
            xh_f_sigma: fd(|q| q.5),
            xh_a: fd(|q| q.6),
            d_r: self.geometry.repelling.distance(x, theta),
            d_a: self.geometry.attracting.distance(x, theta),
            d_crit: self.geometry.critical_distance(x),
        }
    }

    fn probe_grid(&self, energy: &EnergyFn, grid: [usize; 3], theta_offset: f64, sigma: f64) -> Vec<Probe> {
        let [n0, n1, n2] = grid;
        (0..n0 * n1 * n2)
            .into_par_iter()
            .map(|idx| {
                let i = idx / (n1 * n2);
                let j = (idx / n2) % n1;
                let k = idx % n2;
                let x = [TAU * i as f64 / n0 as f64, TAU * j as f64 / n1 as f64];
                let th = TAU * (k as f64 + theta_offset) / n2 as f64;
                self.probe(energy, x, th, sigma)
            })
            .collect()
    }
}

/// Builds the profile and the two averaged order functions and checks
/// their monotonicity on the check grid.
pub fn build_order_m1_m2(
    v: &FourierVectorField,
    geometry: Geometry,
    params: &EscapeParams,
) -> Result<(OrderProfile, OrderProfile, OrderCore)> {
    if !(params.eps_profile > 0.0 && params.eps_profile < 3.0 / 16.0) {
        return invalid("eps_profile must lie in (0, 3/16)");
    }
    let profile = ProfileGrid::build(&geometry, params.r_w, params.profile_grid);
    let core = Core { v: v.clone(), geometry: Arc::new(geometry), profile: Arc::new(profile), params: params.clone() };
    let probes = core.probe_grid(&EnergyFn::zero(), params.check_grid, 0.0, 0.0);
    let eps = params.eps_profile;
    let mk = |forward: bool| {
        let (val, xh): (Vec<f64>, Vec<f64>) =
            probes.iter().map(|p| if forward { (p.m1, p.xh_m1) } else { (p.m2, p.xh_m2) }).unzip();
        let fails = xh.iter().filter(|d| **d < -params.tol_m).count();
        let eta = val
            .iter()
            .zip(&xh)
            .filter(|(m, _)| **m >= eps && **m <= 1.0 - eps)
            .map(|(_, d)| *d)
            .fold(f64::INFINITY, f64::min);
        OrderProfile { forward, horizon: params.t_avg, eps, monotone_failures: fails as f64 / probes.len() as f64, eta }
    };
    let m1 = mk(true);
    let m2 = mk(false);
    for m in [&m1, &m2] {
        if m.monotone_failures > params.monotone_slack {
            return Err(Error::Numerical(format!(
                "order profile ({}) decreases along the flow at {:.2}% of check points",
                if m.forward { "m1" } else { "m2" },
                100.0 * m.monotone_failures
            )));
        }
    }
    Ok((m1, m2, OrderCore(core)))
}

/// Shared evaluation state produced by [`build_order_m1_m2`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderCore(Core);

impl OrderCore {
    pub fn probe(&self, energy: &EnergyFn, x: [f64; 2], theta: f64, sigma: f64) -> Probe {
        self.0.probe(energy, x, theta, sigma)
    }

    pub fn probe_grid(&self, energy: &EnergyFn, grid: [usize; 3], sigma: f64) -> Vec<Probe> {
        self.0.probe_grid(energy, grid, 0.0, sigma)
    }
}

/// `m = E − 1 + (3/2)m₁ + (1/2)m₂` with the sign items checked per region.
pub fn assemble_order_function(energy: EnergyFn, m1: OrderProfile, m2: OrderProfile, core: &OrderCore) -> Result<OrderFunction> {
    let probes = core.0.probe_grid(&energy, core.0.params.check_grid, 0.0, 0.0);
    let eps = m1.eps;
    let mut c = ItemChecks { points: probes.len(), range: (f64::INFINITY, f64::NEG_INFINITY), min_xh_m: f64::INFINITY, ..Default::default() };
    for p in &probes {
        c.range = (c.range.0.min(p.m), c.range.1.max(p.m));
        c.min_xh_m = c.min_xh_m.min(p.xh_m);
        if p.m1 < eps && p.m2 < eps {
            c.item_i.0 += 1;
            c.item_i.1 += (p.m >= -0.5) as usize;
        }
        if p.m1 > 1.0 - eps && p.m2 > 1.0 - eps {
            c.item_ii.0 += 1;
            c.item_ii.1 += (p.m <= 0.5) as usize;
        }
        if p.m1 > 1.0 - eps && p.m2 < eps {
            c.item_iii.0 += 1;
            c.item_iii.1 += (p.m <= 0.25) as usize;
        }
    }
    if c.range.0 < -4.0 || c.range.1 > 4.0 {
        return Err(Error::Numerical(format!("order function leaves [−4, 4]: {:?}", c.range)));
    }
    if c.item_i.1 + c.item_ii.1 + c.item_iii.1 > 0 {
        return Err(Error::Numerical(format!(
            "order function sign items violated: (i) {}/{}, (ii) {}/{}, (iii) {}/{}",
            c.item_i.1, c.item_i.0, c.item_ii.1, c.item_ii.0, c.item_iii.1, c.item_iii.0
        )));
    }
    Ok(OrderFunction { energy, m1, m2, checks: c })
}

/// Measures `γ₁`, `γ₂` and `c₀` of the blended weight on the check grid.
pub fn build_f_sigma(core: &OrderCore, order: &OrderFunction, sigma: f64, t1: f64) -> Result<HomogeneousWeight> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return invalid("σ must lie in (0, 1]");
    }
    if !(t1 > 0.0) {
        return invalid("T₁ must be positive");
    }
    let mut core = core.0.clone();
    core.params.t1 = t1;
    let probes = core.probe_grid(&order.energy, core.params.check_grid, 0.0, sigma);
    let w = measure_weight(&probes, &core.params, sigma, t1);
    if probes.iter().any(|p| !(p.f_sigma > 0.0) || !p.f_sigma.is_finite()) {
        return Err(Error::Numerical("blended weight is not positive".into()));
    }
    Ok(w)
}

fn measure_weight(probes: &[Probe], params: &EscapeParams, sigma: f64, t1: f64) -> HomogeneousWeight {
    let eps = params.eps_profile;
    let mut g1: Vec<f64> = probes
        .iter()
        .filter(|p| p.d_crit < params.r_u && p.m1 < eps && p.m2 < eps)
        .map(|p| -p.xh_ln_f1)
        .collect();
    let mut g2: Vec<f64> = probes
        .iter()
        .filter(|p| p.d_crit < params.r_u && p.m1 > 1.0 - eps && p.m2 > 1.0 - eps)
        .map(|p| p.xh_ln_f1)
        .collect();
    let mut c0: f64 = 1.0;
    for p in probes {
        c0 = c0.max(p.f_sigma).max(1.0 / p.f_sigma).max(p.xh_f_sigma.abs() / sigma);
    }
    HomogeneousWeight { t1, r_v: params.r_v, gamma1: quantile(&mut g1, 0.01), gamma2: quantile(&mut g2, 0.01), c0, sigma }
}

// ------------------------------------------------------------------ escape

/// Negative cone `{a ≤ −|ξ|^σ/(2c₀)}` on the check grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeCone {
    pub threshold: f64,
    pub fraction: f64,
    /// Sample `(x₁, x₂, θ)` points of the cone.
    pub samples: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EscapeFunction {
    core: Core,
    pub order: OrderFunction,
    pub weight: HomogeneousWeight,
    pub sigma: f64,
    /// Whether `ã = a(1 − χ(|ξ|))` is used.
    pub cutoff: bool,
    pub negative_cone: NegativeCone,
}

/// `a = m·f_σ`; fails when the negative cone is empty.
pub fn assemble_escape(core: &OrderCore, order: OrderFunction, weight: HomogeneousWeight, cutoff: bool) -> Result<EscapeFunction> {
    let mut c = core.0.clone();
    c.params.t1 = weight.t1;
    let sigma = weight.sigma;
    let probes = c.probe_grid(&order.energy, c.params.check_grid, 0.0, sigma);
    let thr = -1.0 / (2.0 * weight.c0);
    let neg: Vec<[f64; 3]> = probes.iter().filter(|p| p.a <= thr).map(|p| [p.x[0], p.x[1], p.theta]).collect();
    if neg.is_empty() {
        return Err(Error::Numerical("negative cone is empty".into()));
    }
    let cone = NegativeCone { threshold: thr, fraction: neg.len() as f64 / probes.len() as f64, samples: neg.into_iter().take(64).collect() };
    Ok(EscapeFunction { core: c, order, weight, sigma, cutoff, negative_cone: cone })
}

/// One-call construction from a certified report.
pub fn build_escape(v: &FourierVectorField, report: &MsReport, energy: &EnergyMode, sigma: f64, params: &EscapeParams) -> Result<EscapeFunction> {
    let e = build_energy(v, report, energy, params.r_u, 64)?;
    let geo = build_geometry(v, report, params)?;
    let (m1, m2, core) = build_order_m1_m2(v, geo, params)?;
    let order = assemble_order_function(e, m1, m2, &core)?;
    let w = build_f_sigma(&core, &order, sigma, params.t1)?;
    assemble_escape(&core, order, w, true)
}

impl EscapeFunction {
    pub fn params(&self) -> &EscapeParams {
        &self.core.params
    }

    pub fn field(&self) -> &FourierVectorField {
        &self.core.v
    }

    pub fn geometry(&self) -> &Geometry {
        &self.core.geometry
    }

    /// Tabulated profile, row-major over `(x₁, x₂, θ)`.
    pub fn profile(&self) -> &ProfileGrid {
        &self.core.profile
    }

    /// Restores profile values dropped by JSON serialization.
    pub fn with_profile_values(mut self, values: Vec<f64>) -> Result<Self> {
        let shape = self.core.profile.shape;
        if values.len() != shape[0] * shape[1] * shape[2] {
            return invalid(format!("profile has {} values, shape {:?} needs {}", values.len(), shape, shape[0] * shape[1] * shape[2]));
        }
        self.core.profile = Arc::new(ProfileGrid { shape, values });
        Ok(self)
    }

    /// Full probe at a unit covector.
    pub fn probe(&self, x: [f64; 2], theta: f64) -> Probe {
        self.core.probe(&self.order.energy, x, theta, self.sigma)
    }

    /// `a(x, ξ)` on the unit sphere.
    pub fn unit_value(&self, x: [f64; 2], theta: f64) -> f64 {
        self.probe(x, theta).a
    }

    /// `ã(x, ξ) = |ξ|^σ (1 − χ(|ξ|)) a(x, ξ/|ξ|)`, or `a` without cutoff.
    pub fn value(&self, x: [f64; 2], xi: [f64; 2]) -> f64 {
        let r = xi[0].hypot(xi[1]);
        let c = if self.cutoff { 1.0 - cutoff_chi(r) } else { 1.0 };
        if c == 0.0 || r == 0.0 {
            return 0.0;
        }
        c * r.powf(self.sigma) * self.unit_value(x, xi[1].atan2(xi[0]))
    }

    /// Same construction at another σ (the weight constants are re-measured).
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        let core = OrderCore(self.core.clone());
        let w = build_f_sigma(&core, &self.order, sigma, self.weight.t1)?;
        assemble_escape(&core, self.order.clone(), w, self.cutoff)
    }

    /// Angular table on an `m × m × n_theta` grid, quantized as an
    /// [`AngularGridSymbol`] with the given x-band. Returns the symbol and
    /// the relative tail dropped by the band limit.
    pub fn to_symbol(&self, band: usize, m: usize, n_theta: usize) -> Result<(AngularGridSymbol, f64)> {
        let samples: Vec<Vec<f64>> = (0..n_theta)
            .map(|t| {
                let th = TAU * t as f64 / n_theta as f64;
                (0..m * m)
                    .into_par_iter()
                    .map(|idx| {
                        let x = [TAU * (idx / m) as f64 / m as f64, TAU * (idx % m) as f64 / m as f64];
                        self.unit_value(x, th)
                    })
                    .collect()
            })
            .collect();
        AngularGridSymbol::from_samples(&samples, m, [band, band], self.sigma, self.cutoff)
    }
}

/// Grid certification of an escape function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeCertificate {
    pub sigma: f64,
    pub grid: [usize; 3],
    pub theta_offset: f64,
    pub points: usize,
    pub collar_points: usize,
    pub cone_points: usize,
    /// Fraction of off-collar points meeting their bound.
    pub pass_fraction: f64,
    pub pass_fraction_all: f64,
    pub threshold: f64,
    /// `δ` used in the check: the target, or `σ·min{η, γ₁, γ₂, ½}/(2c₀)`.
    pub delta: f64,
    /// 1% quantile of `X_h(a)/|ξ|^σ` over off-collar, off-cone points.
    pub delta_empirical: f64,
    pub eta: Option<f64>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub c0: f64,
    pub negative_cone_fraction: f64,
    pub worst: Vec<Probe>,
    pub passed: bool,
}

/// Options of [`certify_escape`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyOptions {
    pub grid: [usize; 3],
    pub theta_offset: f64,
    pub delta_target: Option<f64>,
    pub threshold: f64,
    /// Half-width of the excluded collars around region boundaries.
    pub collar: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { grid: [64, 64, 64], theta_offset: 0.0, delta_target: None, threshold: 0.99, collar: 0.05 }
    }
}

/// Checks `X_h(a) ≥ δ|ξ|^σ` off the exceptional cone and `X_h(a) ≥ −tol`,
/// `a ≥ δ|ξ|^σ` on it, at every grid point outside the boundary collars.
pub fn certify_escape(a: &EscapeFunction, opts: &CertifyOptions) -> EscapeCertificate {
    let probes = a.core.probe_grid(&a.order.energy, opts.grid, opts.theta_offset, a.sigma);
    let p = &a.core.params;
    let eps = p.eps_profile;
    let sigma = a.sigma;
    let in_collar = |q: &Probe| {
        let near = |d: f64, r: f64| (d - r).abs() < opts.collar;
        near(q.d_r, p.r_w) || near(q.d_a, p.r_w) || near(q.d_r, p.r_v) || near(q.d_a, p.r_v) || near(q.d_crit, p.r_u)
    };
    let in_cone = |q: &Probe| q.d_crit < p.r_u && q.m1 > 1.0 - eps && q.m2 < eps;
    let in_bad = |q: &Probe| {
        q.d_crit < p.r_u && ((q.m1 < eps && q.m2 < eps) || (q.m1 > 1.0 - eps && q.m2 > 1.0 - eps) || (q.m1 > 1.0 - eps && q.m2 < eps))
    };
    let w = measure_weight(&probes, p, sigma, a.weight.t1);
    let mut etas: Vec<f64> = probes.iter().filter(|q| !in_bad(q) && !in_collar(q)).map(|q| q.xh_m).collect();
    let eta = quantile(&mut etas, 0.01);
    let delta = match opts.delta_target {
        Some(d) => d,
        None => {
            let mut m: f64 = 0.5;
            for c in [eta, w.gamma1, w.gamma2].into_iter().flatten() {
                m = m.min(c);
            }
            (sigma * m / (2.0 * w.c0)).max(0.0)
        }
    };
    let tol = 1e-9;
    let ok = |q: &Probe| {
        if in_cone(q) {
            q.xh_a >= -tol && q.a >= delta
        } else {
            q.xh_a >= delta
        }
    };
    let mut collar_points = 0;
    let mut cone_points = 0;
    let mut pass = 0;
    let mut pass_all = 0;
    let mut off = 0;
    let mut xs: Vec<f64> = Vec::new();
    let mut fails: Vec<Probe> = Vec::new();
    for q in &probes {
        let good = ok(q) && delta > 0.0;
        pass_all += good as usize;
        if in_cone(q) {
            cone_points += 1;
        }
        if in_collar(q) {
            collar_points += 1;
            continue;
        }
        off += 1;
        pass += good as usize;
        if !in_cone(q) {
            xs.push(q.xh_a);
        }
        if !good {
            fails.push(*q);
        }
    }
    fails.sort_by(|x, y| x.xh_a.partial_cmp(&y.xh_a).unwrap());
    fails.truncate(20);
    let neg = probes.iter().filter(|q| q.a <= -1.0 / (2.0 * w.c0)).count();
    let delta_emp = quantile(&mut xs, 0.01).unwrap_or(f64::NEG_INFINITY);
    let pass_fraction = if off > 0 { pass as f64 / off as f64 } else { 0.0 };
    EscapeCertificate {
        sigma,
        grid: opts.grid,
        theta_offset: opts.theta_offset,
        points: probes.len(),
        collar_points,
        cone_points,
        pass_fraction,
        pass_fraction_all: pass_all as f64 / probes.len().max(1) as f64,
        threshold: opts.threshold,
        delta,
        delta_empirical: delta_emp,
        eta,
        gamma1: w.gamma1,
        gamma2: w.gamma2,
        c0: w.c0,
        negative_cone_fraction: neg as f64 / probes.len().max(1) as f64,
        worst: fails,
        passed: pass_fraction >= opts.threshold && delta > 0.0 && delta_emp > 0.0 && neg > 0,
    }
}

/// `α̃ = (δ/σ)/(4C_a)` with `C_a = sup|a|` on unit covectors, and
/// `β_σ = sup_{|ξ|≤2} (α̃σ(−ã) − X_hã)₊` sampled on a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    pub alpha_tilde: f64,
    pub beta: f64,
    pub c_a: f64,
}

pub fn growth_constants(a: &EscapeFunction, delta: f64, grid: [usize; 3], radii: usize) -> GrowthConstants {
    let probes = a.core.probe_grid(&a.order.energy, grid, 0.0, a.sigma);
    let c_a = probes.iter().fold(0.0f64, |m, q| m.max(q.a.abs())).max(1e-300);
    let alpha = (delta / a.sigma) / (4.0 * c_a);
    let mut beta: f64 = 0.0;
    for q in &probes {
        for k in 1..=radii {
            let r = 2.0 * k as f64 / radii as f64;
            let c = if a.cutoff { 1.0 - cutoff_chi(r) } else { 1.0 };
            // on the ray, ã = c(r) r^σ a and X_h ã = r^σ c(r) X_h a + a r^σ c'(r) X_h r
            let rs = r.powf(a.sigma);
            let at = c * rs * q.a;
            let dr = 1e-6;
            let c2 = if a.cutoff { 1.0 - cutoff_chi(r + dr) } else { 1.0 };
            let dc = (c2 - c) / dr;
            // X_h|ξ| along the lifted flow is −r ξ̂·dV ξ̂; bounded by r·sup|dV|
            let lip = a.core.v.sup_norm() * a.core.v.k_max().max(1) as f64;
            let xh = c * rs * q.xh_a - (q.a * rs * dc * r * lip).abs();
            beta = beta.max(alpha * a.sigma * (-at) - xh);
        }
    }
    GrowthConstants { alpha_tilde: alpha, beta: beta.max(0.0), c_a }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msanalysis::{certify_morse_smale, MsParams};
    use std::f64::consts::PI;

    fn gradient() -> FourierVectorField {
        FourierVectorField::builder(2).sin(0, [1, 0], 0, 1.0).sin(1, [0, 1], 0, 1.0).build().unwrap()
    }

    fn report() -> MsReport {
        certify_morse_smale(&gradient(), &MsParams { seed_grid: 16, omega_starts: 20, ..Default::default() }).unwrap()
    }

    fn quick() -> EscapeParams {
        EscapeParams { profile_grid: [48, 48, 48], check_grid: [8, 8, 8], ..Default::default() }
    }

    #[test]
    fn energy_potential_example() {
        let r = report();
        let own = build_energy(&gradient(), &r, &EnergyMode::Potential { potential: None }, 0.2, 32).unwrap();
        assert!((own.sup_bound - 0.99 / 8.0).abs() < 1e-12);
        let f = FourierScalarField::cosines(&[([1, 0], -1.0 / 17.0), ([0, 1], -1.0 / 17.0)]);
        let e = build_energy(&gradient(), &r, &EnergyMode::Potential { potential: Some(f) }, 0.2, 32).unwrap();
        assert_eq!(e.scale, 1.0);
        assert!((e.sup_bound - 2.0 / 17.0).abs() < 1e-12);
        let x = [0.3, 1.1];
        assert!((e.value(&gradient(), x) + (x[0].cos() + x[1].cos()) / 17.0).abs() < 1e-14);
        let l = (x[0].sin().powi(2) + x[1].sin().powi(2)) / 17.0;
        assert!((e.lie(&gradient(), x) - l).abs() < 1e-14);
        let big = FourierScalarField::cosines(&[([1, 0], -3.0), ([0, 1], -3.0)]);
        let e2 = build_energy(&gradient(), &r, &EnergyMode::Potential { potential: Some(big) }, 0.2, 32).unwrap();
        assert!(e2.sup_bound < 0.125 && e2.check.certified);
    }

    #[test]
    fn energy_averaged_certifies() {
        let e = build_energy(&gradient(), &report(), &EnergyMode::Averaged { horizon: 10.0, width: 0.6 }, 0.2, 24).unwrap();
        assert!(e.check.eta_e > 0.0 && e.sup_bound < 0.125);
    }

    #[test]
    fn non_gradient_has_no_potential() {
        let v = FourierVectorField::builder(2).sin(0, [0, 1], 0, 1.0).sin(1, [1, 0], 0, 1.0).build().unwrap();
        assert!(gradient_potential(&v).is_none());
        assert!(gradient_potential(&gradient()).is_some());
    }

    #[test]
    fn geometry_of_gradient_field() {
        let g = build_geometry(&gradient(), &report(), &quick()).unwrap();
        assert_eq!(g.repelling.fibers.len(), 1);
        assert_eq!(g.attracting.fibers.len(), 1);
        // stable line of the saddle (0, π) is x₁ = 0 with conormal ξ = (±1, 0)
        assert!(g.repelling.distance([0.0, 2.0], 0.0) < 0.01);
        assert!(g.repelling.distance([0.0, 2.0], PI) < 0.01);
        assert!(g.repelling.distance([0.0, 2.0], 0.5 * PI) > 0.3);
        assert!(g.attracting.distance([2.0, PI], 0.5 * PI) < 0.01);
        assert!(g.attracting.distance([PI, PI], 1.234) < 1e-9);
    }

    #[test]
    fn sink_attracts_profile() {
        // pure sink neighborhood: every covector over the sink has m₁ = m₂ = 1
        let g = build_geometry(&gradient(), &report(), &quick()).unwrap();
        let (m1, _, core) = build_order_m1_m2(&gradient(), g, &quick()).unwrap();
        assert!(m1.monotone_failures <= 0.005);
        let e = build_energy(&gradient(), &report(), &EnergyMode::Potential { potential: None }, 0.2, 16).unwrap();
        for th in [0.0, 1.0, 2.5] {
            let p = core.0.probe(&e, [PI, PI], th, 0.1);
            assert!(p.m1 > 0.999 && p.m2 > 0.999, "{p:?}");
            let q = core.0.probe(&e, [0.0, 0.0], th, 0.1);
            assert!(q.m1 < 1e-3 && q.m2 < 1e-3);
        }
    }

    #[test]
    fn escape_properties() {
        let a = build_escape(&gradient(), &report(), &EnergyMode::Potential { potential: None }, 0.1, &quick()).unwrap();
        assert!(a.negative_cone.fraction > 0.0);
        // homogeneity for |ξ| ≥ 2
        let x = [0.7, 2.1];
        let v2 = a.value(x, [2.0, 1.0]);
        let v6 = a.value(x, [6.0, 3.0]);
        assert!((v6 - 3f64.powf(0.1) * v2).abs() < 1e-10 * v6.abs());
        assert_eq!(a.value(x, [0.5, 0.5]), 0.0);
        // product rule
        let p = a.probe([1.0, 2.0], 0.4);
        let pr = p.xh_m * p.f_sigma + p.m * p.xh_f_sigma;
        assert!((pr - p.xh_a).abs() < 1e-5, "{pr} vs {}", p.xh_a);
        // sign structure
        let on_r = a.probe([0.0, 0.0], 0.3);
        assert!(on_r.a < 0.0);
        let on_a = a.probe([PI, PI], 0.3);
        assert!(on_a.a > 0.0);
        // X_h(f_σ) on the sink fiber matches σ·λ with λ = 1
        assert!((on_a.xh_f_sigma / on_a.f_sigma - 0.1).abs() < 1e-3, "{on_a:?}");
    }

    #[test]
    fn certificate_on_small_grid() {
        let a = build_escape(&gradient(), &report(), &EnergyMode::Potential { potential: None }, 0.1, &quick()).unwrap();
        let c = certify_escape(&a, &CertifyOptions { grid: [16, 16, 16], ..Default::default() });
        assert!(c.delta > 0.0);
        assert!(c.pass_fraction > 0.9, "{:?}", (c.pass_fraction, c.delta, c.delta_empirical, &c.worst[..3.min(c.worst.len())]));
    }

    #[test]
    fn delta_scales_with_sigma_and_grid_rotation() {
        let a = build_escape(&gradient(), &report(), &EnergyMode::Potential { potential: None }, 0.1, &quick()).unwrap();
        let opts = CertifyOptions { grid: [12, 12, 12], ..Default::default() };
        let c = certify_escape(&a, &opts);
        let half = certify_escape(&a.with_sigma(0.05).unwrap(), &opts);
        let r = half.delta / c.delta;
        assert!((r - 0.5).abs() < 0.05, "ratio {r}");
        let rot = certify_escape(&a, &CertifyOptions { theta_offset: 0.5, ..opts });
        assert!((rot.pass_fraction - c.pass_fraction).abs() <= 0.01);
    }

    #[test]
    fn longer_t1_keeps_gammas() {
        let r = report();
        let g = build_geometry(&gradient(), &r, &quick()).unwrap();
        let (m1, m2, core) = build_order_m1_m2(&gradient(), g, &quick()).unwrap();
        let e = build_energy(&gradient(), &r, &EnergyMode::Potential { potential: None }, 0.2, 16).unwrap();
        let order = assemble_order_function(e, m1, m2, &core).unwrap();
        let w1 = build_f_sigma(&core, &order, 0.1, 1.0).unwrap();
        let w2 = build_f_sigma(&core, &order, 0.1, 2.0).unwrap();
        let tol = 1e-3;
        assert!(w2.gamma1.unwrap() >= w1.gamma1.unwrap() - tol);
        assert!(w2.gamma2.unwrap() >= w1.gamma2.unwrap() - tol);
    }

    #[test]
    fn smoothstep_shape() {
        assert_eq!(smoothstep(-1.0), 0.0);
        assert_eq!(smoothstep(2.0), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
    }
}
