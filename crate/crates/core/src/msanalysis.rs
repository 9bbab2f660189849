//! Critical elements of autonomous fields on T² and a numerical Morse-Smale
//! check: hyperbolic points, hyperbolic closed orbits on user sections, no
//! saddle connections, and ω-limits of sampled orbits landing on them.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fields::{rk4_step, torus_distance, variational_flow, wrap, wrap_signed, FourierVectorField, StepControl, TorusPoint, TAU};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Point,
    ClosedOrbit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Klass {
    Source,
    Sink,
    Saddle,
    AttractingOrbit,
    RepellingOrbit,
    /// Margin below `ρ_min`.
    NonHyperbolic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalElement {
    pub kind: ElementKind,
    /// The fixed point, or a point of the orbit on its section.
    pub location: TorusPoint,
    /// Orbit samples (wrapped), empty for points.
    pub loop_points: Vec<[f64; 2]>,
    pub period: Option<f64>,
    /// Eigenvalues of `dV` or Floquet multipliers of `dφ^{T₀}`.
    pub spectrum: Vec<Complex64>,
    pub klass: Klass,
    /// `min |Re λ|` for points, `|log|μ||/T₀` of the nontrivial multiplier for orbits.
    pub margin: f64,
}

impl CriticalElement {
    pub fn is_hyperbolic(&self) -> bool {
        self.klass != Klass::NonHyperbolic
    }

    /// Poincaré–Hopf index of a point (0 for orbits or degenerate points).
    pub fn index(&self) -> i32 {
        match (self.kind, self.klass) {
            (ElementKind::Point, Klass::Source | Klass::Sink) => 1,
            (ElementKind::Point, Klass::Saddle) => -1,
            (ElementKind::Point, Klass::NonHyperbolic) => {
                let p = self.spectrum[0] * self.spectrum[1];
                if p.re > 0.0 {
                    1
                } else if p.re < 0.0 {
                    -1
                } else {
                    0
                }
            }
            _ => 0,
        }
    }

    /// Distance from `x` to the element (point, or orbit polyline).
    pub fn distance(&self, x: [f64; 2]) -> f64 {
        match self.kind {
            ElementKind::Point => torus_distance(self.location.raw(), x),
            ElementKind::ClosedOrbit => polyline_distance(&self.loop_points, x),
        }
    }
}

fn polyline_distance(pts: &[[f64; 2]], x: [f64; 2]) -> f64 {
    let n = pts.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let ab = [wrap_signed(b[0] - a[0]), wrap_signed(b[1] - a[1])];
        let ax = [wrap_signed(x[0] - a[0]), wrap_signed(x[1] - a[1])];
        let l2 = ab[0] * ab[0] + ab[1] * ab[1];
        let s = if l2 > 0.0 { ((ax[0] * ab[0] + ax[1] * ab[1]) / l2).clamp(0.0, 1.0) } else { 0.0 };
        let d = ((ax[0] - s * ab[0]).powi(2) + (ax[1] - s * ab[1]).powi(2)).sqrt();
        best = best.min(d);
    }
    best
}

/// A transversal segment `a + s·d`, `s ∈ [0, length]`, `|d| = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub start: [f64; 2],
    pub direction: [f64; 2],
    pub length: f64,
}

impl Section {
    pub fn new(start: [f64; 2], direction: [f64; 2], length: f64) -> Result<Self> {
        let n = (direction[0].powi(2) + direction[1].powi(2)).sqrt();
        if !(n > 0.0) || !(length > 0.0) || length >= std::f64::consts::PI {
            return invalid("section needs a nonzero direction and a length in (0, π)");
        }
        Ok(Self { start, direction: [direction[0] / n, direction[1] / n], length })
    }

    fn point(&self, s: f64) -> [f64; 2] {
        [self.start[0] + s * self.direction[0], self.start[1] + s * self.direction[1]]
    }

    fn normal(&self) -> [f64; 2] {
        [-self.direction[1], self.direction[0]]
    }

    fn rel(&self, x: [f64; 2]) -> [f64; 2] {
        [wrap_signed(x[0] - self.start[0]), wrap_signed(x[1] - self.start[1])]
    }

    fn height(&self, x: [f64; 2]) -> f64 {
        let r = self.rel(x);
        let n = self.normal();
        r[0] * n[0] + r[1] * n[1]
    }

    fn coord(&self, x: [f64; 2]) -> f64 {
        let r = self.rel(x);
        r[0] * self.direction[0] + r[1] * self.direction[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsParams {
    pub seed_grid: usize,
    pub newton_tol: f64,
    pub newton_maxiter: usize,
    pub rho_min: f64,
    pub miss_tol: f64,
    /// Offset along the eigenvector where separatrices start.
    pub delta: f64,
    pub t_max: f64,
    pub step: f64,
    pub omega_starts: usize,
    pub omega_time: f64,
    pub seed: u64,
    pub sections: Vec<Section>,
    pub section_seeds: usize,
    /// Above this many distinct zeros the zero set is taken as non-isolated.
    pub max_points: usize,
}

impl Default for MsParams {
    fn default() -> Self {
        Self {
            seed_grid: 64,
            newton_tol: 1e-12,
            newton_maxiter: 50,
            rho_min: 1e-3,
            miss_tol: 1e-4,
            delta: 1e-6,
            t_max: 50.0,
            step: 0.01,
            omega_starts: 200,
            omega_time: 50.0,
            seed: 0,
            sections: Vec::new(),
            section_seeds: 8,
            max_points: 256,
        }
    }
}

fn require_2d(v: &FourierVectorField) -> Result<()> {
    if v.dim() != 2 {
        return invalid("Morse-Smale analysis is implemented on T² only");
    }
    if !v.is_autonomous() {
        return invalid("Morse-Smale analysis needs an autonomous field");
    }
    Ok(())
}

/// Eigenvalues and, when real, eigenvectors of a 2×2 matrix.
pub fn eig2(j: [[f64; 2]; 2]) -> ([Complex64; 2], Option<[[f64; 2]; 2]>) {
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let disc = 0.25 * tr * tr - det;
    if disc < 0.0 {
        let im = (-disc).sqrt();
        return ([Complex64::new(0.5 * tr, im), Complex64::new(0.5 * tr, -im)], None);
    }
    let r = disc.sqrt();
    let l = [0.5 * tr + r, 0.5 * tr - r];
    let vec_for = |lam: f64| -> [f64; 2] {
        let a = [j[0][1], lam - j[0][0]];
        let b = [lam - j[1][1], j[1][0]];
        let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
        let (v, n) = if na >= nb { (a, na) } else { (b, nb) };
        if n < 1e-300 {
            [1.0, 0.0]
        } else {
            [v[0] / n, v[1] / n]
        }
    };
    let mut v0 = vec_for(l[0]);
    let mut v1 = vec_for(l[1]);
    if r == 0.0 && (v0[0] * v1[1] - v0[1] * v1[0]).abs() < 1e-12 {
        v0 = [1.0, 0.0];
        v1 = [0.0, 1.0];
    }
    ([Complex64::new(l[0], 0.0), Complex64::new(l[1], 0.0)], Some([v0, v1]))
}

/// Classify a located point by the real parts of `dV(x*)`.
pub fn classify_point(v: &FourierVectorField, x: [f64; 2], rho_min: f64) -> CriticalElement {
    let (_, j) = v.eval_jac(0.0, x);
    let (ev, _) = eig2(j);
    let margin = ev[0].re.abs().min(ev[1].re.abs());
    let klass = if margin < rho_min {
        Klass::NonHyperbolic
    } else if ev[0].re > 0.0 && ev[1].re > 0.0 {
        Klass::Source
    } else if ev[0].re < 0.0 && ev[1].re < 0.0 {
        Klass::Sink
    } else {
        Klass::Saddle
    };
    CriticalElement {
        kind: ElementKind::Point,
        location: TorusPoint::new2(x[0], x[1]),
        loop_points: Vec::new(),
        period: None,
        spectrum: ev.to_vec(),
        klass,
        margin,
    }
}

/// Classify an orbit through `x` of period `period` by its Floquet multipliers.
pub fn classify_orbit(v: &FourierVectorField, x: [f64; 2], period: f64, rho_min: f64) -> Result<CriticalElement> {
    let p = TorusPoint::new2(x[0], x[1]);
    let ctrl = StepControl::Adaptive { tol: 1e-12, h_init: 1e-3, h_min: 1e-10 };
    let jet = variational_flow(v, &p, period, ctrl)?;
    let (mu, _) = eig2(jet.j);
    let (triv, other) = if (mu[0] - 1.0).norm() <= (mu[1] - 1.0).norm() { (mu[0], mu[1]) } else { (mu[1], mu[0]) };
    let margin = if other.norm() > 0.0 { other.norm().ln().abs() / period } else { f64::INFINITY };
    let klass = if (triv - 1.0).norm() > 1e-4 || margin < rho_min {
        Klass::NonHyperbolic
    } else if other.norm() < 1.0 {
        Klass::AttractingOrbit
    } else {
        Klass::RepellingOrbit
    };
    let n = ((period / 0.01).ceil() as usize).max(16);
    let h = period / n as f64;
    let f = |_: f64, y: &[f64; 2]| v.eval(0.0, *y);
    let mut y = x;
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        pts.push([wrap(y[0]), wrap(y[1])]);
        y = rk4_step(&f, i as f64 * h, &y, h);
    }
    Ok(CriticalElement {
        kind: ElementKind::ClosedOrbit,
        location: p,
        loop_points: pts,
        period: Some(period),
        spectrum: vec![triv, other],
        klass,
        margin,
    })
}

/// Seed statistics of the Newton search.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub seeds: usize,
    pub converged: usize,
    pub dropped: usize,
}

fn newton(v: &FourierVectorField, mut x: [f64; 2], tol: f64, maxiter: usize) -> Option<[f64; 2]> {
    for _ in 0..maxiter {
        let (f, j) = v.eval_jac(0.0, x);
        if f[0].hypot(f[1]) <= tol {
            return Some([wrap(x[0]), wrap(x[1])]);
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            return None;
        }
        let mut dx = [(j[1][1] * f[0] - j[0][1] * f[1]) / det, (-j[1][0] * f[0] + j[0][0] * f[1]) / det];
        let n = dx[0].hypot(dx[1]);
        if n > 0.5 {
            dx = [dx[0] * 0.5 / n, dx[1] * 0.5 / n];
        }
        x = [x[0] - dx[0], x[1] - dx[1]];
    }
    let f = v.eval(0.0, x);
    (f[0].hypot(f[1]) <= tol).then(|| [wrap(x[0]), wrap(x[1])])
}

/// Newton from every node of a `seed_grid²` lattice, deduplicated at 10⁻⁶.
/// Fixed points are sorted lexicographically.
pub fn find_critical_points(v: &FourierVectorField, params: &MsParams) -> Result<(Vec<CriticalElement>, SeedStats)> {
    require_2d(v)?;
    let g = params.seed_grid.max(1);
    let found: Vec<Option<[f64; 2]>> = (0..g * g)
        .into_par_iter()
        .map(|i| {
            let x = [TAU * (i / g) as f64 / g as f64, TAU * (i % g) as f64 / g as f64];
            newton(v, x, params.newton_tol, params.newton_maxiter)
        })
        .collect();
    let mut stats = SeedStats { seeds: g * g, ..Default::default() };
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for x in found {
        match x {
            Some(x) => {
                stats.converged += 1;
                if !pts.iter().any(|p| torus_distance(*p, x) < 1e-6) {
                    pts.push(x);
                }
            }
            None => stats.dropped += 1,
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((pts.into_iter().map(|x| classify_point(v, x, params.rho_min)).collect(), stats))
}

/// First return to the section: `(s', T)`.
fn return_map(v: &FourierVectorField, sec: &Section, s: f64, t_max: f64, h: f64, dir: f64) -> Option<(f64, f64)> {
    let p = sec.point(s);
    let n = sec.normal();
    let vp = v.eval(0.0, p);
    let vp = [dir * vp[0], dir * vp[1]];
    let orient = (vp[0] * n[0] + vp[1] * n[1]).signum();
    if (vp[0] * n[0] + vp[1] * n[1]).abs() < 1e-10 {
        return None;
    }
    let f = |_: f64, y: &[f64; 2]| {
        let w = v.eval(0.0, *y);
        [dir * w[0], dir * w[1]]
    };
    let mut y = p;
    let mut t = 0.0;
    let mut g_prev = 0.0;
    while t < t_max {
        let y_next = rk4_step(&f, t, &y, h);
        let g_next = orient * sec.height(y_next);
        if t > 0.0 && g_prev < 0.0 && g_next >= 0.0 && g_prev > -1.0 && g_next < 1.0 {
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if orient * sec.height(rk4_step(&f, t, &y, mid)) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let tau = 0.5 * (lo + hi);
            let yc = rk4_step(&f, t, &y, tau);
            let sc = sec.coord(yc);
            if sc >= -1e-9 && sc <= sec.length + 1e-9 {
                return Some((sc, t + tau));
            }
        }
        g_prev = g_next;
        y = y_next;
        t += h;
    }
    None
}

/// Outcome of a closed-orbit search on the given sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrbitSearch {
    pub orbits: Vec<CriticalElement>,
    pub notes: Vec<String>,
}

/// Fixed points of the return maps of the sections, found by Newton from
/// `section_seeds` starts per section, with Floquet data attached.
/// Repelling orbits are found through the return map of the reversed flow.
pub fn detect_closed_orbits(v: &FourierVectorField, params: &MsParams, t_max: f64) -> Result<OrbitSearch> {
    require_2d(v)?;
    let mut out = OrbitSearch::default();
    let h = params.step.min(0.01);
    for (si, sec) in params.sections.iter().enumerate() {
        let seeds = params.section_seeds.max(1);
        let cands: Vec<Option<(f64, f64)>> = (0..seeds)
            .into_par_iter()
            .flat_map_iter(|j| [(j, 1.0), (j, -1.0)])
            .map(|(j, dir)| {
                let mut s = sec.length * (j as f64 + 0.5) / seeds as f64;
                for _ in 0..40 {
                    let (ps, t) = return_map(v, sec, s, t_max, h, dir)?;
                    let g = ps - s;
                    if g.abs() < 1e-10 {
                        return Some((s, t));
                    }
                    let ds = 1e-7;
                    let s2 = if s + ds <= sec.length { s + ds } else { s - ds };
                    let (ps2, _) = return_map(v, sec, s2, t_max, h, dir)?;
                    let dg = ((ps2 - s2) - g) / (s2 - s);
                    if dg.abs() < 1e-12 {
                        return None;
                    }
                    s = (s - g / dg).clamp(0.0, sec.length);
                }
                None
            })
            .collect();
        let mut any = false;
        for (s, t) in cands.into_iter().flatten() {
            any = true;
            let x = sec.point(s);
            if out.orbits.iter().any(|o| o.distance(x) < 1e-6) {
                continue;
            }
            out.orbits.push(classify_orbit(v, x, t, params.rho_min)?);
        }
        if !any {
            out.notes.push(format!("section {si}: no periodic return found up to T_max = {t_max}"));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Stable,
    Unstable,
}

/// Separatrix polyline (wrapped coordinates) from `x* ± δe`, traced forward
/// (unstable) or backward (stable) until `arclen` or `t_max`, or until it
/// settles on a critical point.
pub fn stable_unstable_manifold_sample(
    v: &FourierVectorField,
    saddle: &CriticalElement,
    side: Side,
    branch: i8,
    arclen: f64,
    params: &MsParams,
) -> Result<Vec<[f64; 2]>> {
    require_2d(v)?;
    if saddle.klass != Klass::Saddle {
        return invalid("manifold sampling needs a saddle");
    }
    let x0 = saddle.location.raw();
    let (_, j) = v.eval_jac(0.0, x0);
    let (ev, vecs) = eig2(j);
    let vecs = vecs.expect("saddles have real eigenvalues");
    let e = match side {
        Side::Unstable => if ev[0].re > 0.0 { vecs[0] } else { vecs[1] },
        Side::Stable => if ev[0].re < 0.0 { vecs[0] } else { vecs[1] },
    };
    let sgn = if branch < 0 { -1.0 } else { 1.0 };
    let dir = if side == Side::Unstable { 1.0 } else { -1.0 };
    let f = |_: f64, y: &[f64; 2]| {
        let w = v.eval(0.0, *y);
        [dir * w[0], dir * w[1]]
    };
    let h = params.step;
    let mut y = [x0[0] + sgn * params.delta * e[0], x0[1] + sgn * params.delta * e[1]];
    let mut pts = vec![[wrap(y[0]), wrap(y[1])]];
    let mut len = 0.0;
    let mut t = 0.0;
    while len < arclen && t < params.t_max {
        let yn = rk4_step(&f, t, &y, h);
        let step = (yn[0] - y[0]).hypot(yn[1] - y[1]);
        len += step;
        y = yn;
        t += h;
        pts.push([wrap(y[0]), wrap(y[1])]);
        if step < 1e-12 {
            break;
        }
    }
    Ok(pts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddleConnection {
    /// Indices into the element list.
    pub from: usize,
    pub to: usize,
    pub branch: i8,
    pub time: f64,
    pub closest: f64,
}

/// Result of tracing every unstable branch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSearch {
    pub connections: Vec<SaddleConnection>,
    pub warnings: Vec<String>,
    /// Branches that neither connected nor settled near an attractor by `T_max`.
    pub unresolved: usize,
}

enum BranchEnd {
    Connection(usize, f64, f64),
    Settled,
    Unresolved,
}

/// Integrate each unstable branch; report entries into a `miss_tol`-ball of
/// a saddle along its stable direction.
pub fn detect_saddle_connections(v: &FourierVectorField, elements: &[CriticalElement], params: &MsParams) -> Result<ConnectionSearch> {
    require_2d(v)?;
    let saddles: Vec<(usize, [f64; 2], [f64; 2], [f64; 2])> = elements
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ElementKind::Point && e.klass == Klass::Saddle)
        .map(|(i, e)| {
            let x = e.location.raw();
            let (_, j) = v.eval_jac(0.0, x);
            let (ev, vecs) = eig2(j);
            let vecs = vecs.expect("saddles have real eigenvalues");
            let (u, s) = if ev[0].re > 0.0 { (vecs[0], vecs[1]) } else { (vecs[1], vecs[0]) };
            (i, x, u, s)
        })
        .collect();
    let tasks: Vec<(usize, i8)> = saddles.iter().enumerate().flat_map(|(q, _)| [(q, 1i8), (q, -1i8)]).collect();
    let results: Vec<(usize, i8, BranchEnd, Vec<String>)> = tasks
        .into_par_iter()
        .map(|(q, b)| {
            let (_, x0, u, _) = saddles[q];
            let f = |_: f64, y: &[f64; 2]| v.eval(0.0, *y);
            let sg = b as f64;
            let mut y = [x0[0] + sg * params.delta * u[0], x0[1] + sg * params.delta * u[1]];
            let mut t = 0.0;
            let mut left_home = false;
            let mut near: Vec<f64> = vec![f64::INFINITY; saddles.len()];
            let mut warn = Vec::new();
            while t < params.t_max {
                y = rk4_step(&f, t, &y, params.step);
                t += params.step;
                let yw = [wrap(y[0]), wrap(y[1])];
                if !left_home && torus_distance(yw, x0) > 10.0 * params.miss_tol {
                    left_home = true;
                }
                for (r, &(_, xs, _, es)) in saddles.iter().enumerate() {
                    if r == q && !left_home {
                        continue;
                    }
                    let d = torus_distance(yw, xs);
                    near[r] = near[r].min(d);
                    if d < params.miss_tol {
                        let dv = [wrap_signed(yw[0] - xs[0]) / d, wrap_signed(yw[1] - xs[1]) / d];
                        if (dv[0] * es[0] + dv[1] * es[1]).abs() > 0.99 {
                            return (q, b, BranchEnd::Connection(r, t, d), warn);
                        }
                    }
                }
                let settled = elements.iter().any(|e| {
                    matches!(e.klass, Klass::Sink | Klass::AttractingOrbit) && e.distance(yw) < params.miss_tol
                });
                if settled {
                    for (r, d) in near.iter().enumerate() {
                        if *d < 10.0 * params.miss_tol {
                            warn.push(format!("near miss: branch {b:+} of saddle {} passed saddle {} at {d:.2e}", saddles[q].0, saddles[r].0));
                        }
                    }
                    return (q, b, BranchEnd::Settled, warn);
                }
            }
            (q, b, BranchEnd::Unresolved, warn)
        })
        .collect();
    let mut out = ConnectionSearch::default();
    for (q, b, end, w) in results {
        out.warnings.extend(w);
        match end {
            BranchEnd::Connection(r, t, d) => out.connections.push(SaddleConnection {
                from: saddles[q].0,
                to: saddles[r].0,
                branch: b,
                time: t,
                closest: d,
            }),
            BranchEnd::Settled => {}
            BranchEnd::Unresolved => out.unresolved += 1,
        }
    }
    Ok(out)
}

/// Fraction of random orbits whose endpoint after `omega_time` lies within
/// `miss_tol` of a critical element.
pub fn omega_limit_evidence(v: &FourierVectorField, elements: &[CriticalElement], params: &MsParams) -> Result<f64> {
    require_2d(v)?;
    if params.omega_starts == 0 {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let starts: Vec<[f64; 2]> = (0..params.omega_starts).map(|_| [rng.random::<f64>() * TAU, rng.random::<f64>() * TAU]).collect();
    let steps = (params.omega_time / params.step).ceil() as usize;
    let h = params.omega_time / steps as f64;
    let hits = starts
        .into_par_iter()
        .filter(|x| {
            let f = |_: f64, y: &[f64; 2]| v.eval(0.0, *y);
            let mut y = *x;
            for i in 0..steps {
                y = rk4_step(&f, i as f64 * h, &y, h);
            }
            let yw = [wrap(y[0]), wrap(y[1])];
            elements.iter().any(|e| e.distance(yw) < params.miss_tol)
        })
        .count();
    Ok(hits as f64 / params.omega_starts as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    #[serde(rename = "certified_MS")]
    CertifiedMs,
    Refuted,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsReport {
    pub elements: Vec<CriticalElement>,
    pub saddle_connections: Vec<SaddleConnection>,
    pub nonwandering_evidence: f64,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
    pub index_sum: i32,
    pub seed_stats: SeedStats,
    pub unresolved_branches: usize,
    pub warnings: Vec<String>,
    pub params: MsParams,
}

impl MsReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    /// Index of the first element matching `klass` near `x`.
    pub fn find(&self, klass: Klass, x: [f64; 2], tol: f64) -> Option<usize> {
        self.elements.iter().position(|e| e.klass == klass && e.distance(x) < tol)
    }
}

/// Runs the detectors and the ω-limit pass and assembles the verdict.
pub fn certify_morse_smale(v: &FourierVectorField, params: &MsParams) -> Result<MsReport> {
    require_2d(v)?;
    let (mut elements, seed_stats) = find_critical_points(v, params)?;
    let mut reasons = Vec::new();
    let mut warnings = Vec::new();
    let non_isolated = elements.len() > params.max_points;
    if non_isolated {
        reasons.push(format!("more than {} zeros: zero set is not isolated", params.max_points));
        elements.truncate(params.max_points);
    }
    let orbits = detect_closed_orbits(v, params, params.t_max.max(100.0))?;
    warnings.extend(orbits.notes.iter().cloned());
    elements.extend(orbits.orbits);
    let index_sum: i32 = elements.iter().map(|e| e.index()).sum();
    let conns = if non_isolated { ConnectionSearch::default() } else { detect_saddle_connections(v, &elements, params)? };
    warnings.extend(conns.warnings.iter().cloned());
    let evidence = omega_limit_evidence(v, &elements, params)?;

    let mut refuted = non_isolated;
    let mut inconclusive = false;
    let nh = elements.iter().filter(|e| !e.is_hyperbolic()).count();
    if nh > 0 {
        refuted = true;
        reasons.push(format!("{nh} non-hyperbolic critical element(s) at margin < {}", params.rho_min));
    }
    if !conns.connections.is_empty() {
        refuted = true;
        reasons.push(format!("{} saddle connection(s)", conns.connections.len()));
    }
    if elements.is_empty() {
        refuted = true;
        reasons.push("no critical elements; the nonwandering set is not a finite union of them".into());
    }
    if evidence < 1.0 {
        inconclusive = true;
        reasons.push(format!("only {:.1}% of sampled orbits reached a critical element", 100.0 * evidence));
    }
    if conns.unresolved > 0 {
        inconclusive = true;
        reasons.push(format!("{} unstable branch(es) unresolved at T_max", conns.unresolved));
    }
    if index_sum != 0 {
        inconclusive = true;
        reasons.push(format!("index sum {index_sum} ≠ 0: critical points missing"));
    }
    let verdict = if refuted {
        Verdict::Refuted
    } else if inconclusive {
        Verdict::Inconclusive
    } else {
        Verdict::CertifiedMs
    };
    Ok(MsReport {
        elements,
        saddle_connections: conns.connections,
        nonwandering_evidence: evidence,
        verdict,
        reasons,
        index_sum,
        seed_stats,
        unresolved_branches: conns.unresolved,
        warnings,
        params: params.clone(),
    })
}

/// Separatrix polylines as CSV `saddle,side,branch,x1,x2`.
pub fn separatrix_csv(v: &FourierVectorField, report: &MsReport, arclen: f64) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| crate::Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(["saddle", "side", "branch", "x1", "x2"]).map_err(io)?;
    for (i, e) in report.elements.iter().enumerate() {
        if e.klass != Klass::Saddle {
            continue;
        }
        for side in [Side::Stable, Side::Unstable] {
            for b in [1i8, -1] {
                let pts = stable_unstable_manifold_sample(v, e, side, b, arclen, &report.params)?;
                let sname = if side == Side::Stable { "stable" } else { "unstable" };
                for p in pts {
                    w.write_record([i.to_string(), sname.into(), b.to_string(), p[0].to_string(), p[1].to_string()]).map_err(io)?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn gradient() -> FourierVectorField {
        FourierVectorField::builder(2).sin(0, [1, 0], 0, 1.0).sin(1, [0, 1], 0, 1.0).build().unwrap()
    }

    fn quick() -> MsParams {
        MsParams { seed_grid: 24, omega_starts: 40, ..Default::default() }
    }

    #[test]
    fn gradient_points() {
        let (pts, stats) = find_critical_points(&gradient(), &quick()).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(stats.converged > 0);
        let kinds: Vec<Klass> = pts.iter().map(|p| p.klass).collect();
        assert_eq!(kinds, vec![Klass::Source, Klass::Saddle, Klass::Saddle, Klass::Sink]);
        assert!((pts[1].spectrum[0].re - 1.0).abs() < 1e-12 && (pts[1].spectrum[1].re + 1.0).abs() < 1e-12);
        assert_eq!(pts.iter().map(|p| p.index()).sum::<i32>(), 0);
    }

    #[test]
    fn perturbed_gradient_points() {
        let v = FourierVectorField::builder(2)
            .sin(0, [1, 0], 0, 1.0)
            .sin(0, [1, 1], 0, 0.1)
            .sin(1, [0, 1], 0, 1.0)
            .build()
            .unwrap();
        let (pts, _) = find_critical_points(&v, &quick()).unwrap();
        assert_eq!(pts.len(), 4);
        for p in &pts {
            let f = v.eval(0.0, p.location.raw());
            assert!(f[0].hypot(f[1]) < 1e-12);
            assert!(p.is_hyperbolic());
        }
    }

    #[test]
    fn constant_field_refuted() {
        let v = FourierVectorField::constant(&[1.0, 0.5]).unwrap();
        let (pts, _) = find_critical_points(&v, &quick()).unwrap();
        assert!(pts.is_empty());
        let r = certify_morse_smale(&v, &quick()).unwrap();
        assert_eq!(r.verdict, Verdict::Refuted);
        assert!(r.saddle_connections.is_empty());
    }

    #[test]
    fn rational_translation_orbit_is_not_hyperbolic() {
        let v = FourierVectorField::constant(&[1.0, 0.0]).unwrap();
        let p = MsParams { sections: vec![Section::new([0.0, 0.2], [0.0, 1.0], 1.0).unwrap()], section_seeds: 2, ..quick() };
        let o = detect_closed_orbits(&v, &p, 20.0).unwrap();
        assert_eq!(o.orbits.len(), 2);
        assert!(o.orbits.iter().all(|e| e.klass == Klass::NonHyperbolic));
        assert!((o.orbits[0].period.unwrap() - TAU).abs() < 1e-9);
    }

    #[test]
    fn gradient_has_no_orbits() {
        let p = MsParams { sections: vec![Section::new([0.3, 0.2], [0.0, 1.0], 1.0).unwrap()], ..quick() };
        let o = detect_closed_orbits(&gradient(), &p, 50.0).unwrap();
        assert!(o.orbits.is_empty());
        assert_eq!(o.notes.len(), 1);
    }

    #[test]
    fn limit_cycle_floquet() {
        // x₂ = 0 attracts with rate 1 while x₁ winds once per 2π
        let v = FourierVectorField::builder(2).constant(&[1.0, 0.0]).sin(1, [0, 1], 0, -1.0).build().unwrap();
        let p = MsParams { sections: vec![Section::new([1.0, -0.5], [0.0, 1.0], 1.0).unwrap()], ..quick() };
        let o = detect_closed_orbits(&v, &p, 50.0).unwrap();
        assert_eq!(o.orbits.len(), 1);
        let e = &o.orbits[0];
        assert_eq!(e.klass, Klass::AttractingOrbit);
        assert!((e.period.unwrap() - TAU).abs() < 1e-8);
        assert!((e.spectrum[0] - 1.0).norm() < 1e-8);
        assert!((e.spectrum[1].re - (-TAU).exp()).abs() < 1e-8);
        assert!(e.location.raw()[1].abs() < 1e-8 || (e.location.raw()[1] - TAU).abs() < 1e-8);
        let p2 = MsParams {
            sections: vec![Section::new([1.0, -0.5], [0.0, 1.0], 1.0).unwrap(), Section::new([1.0, PI - 0.5], [0.0, 1.0], 1.0).unwrap()],
            ..quick()
        };
        let r = certify_morse_smale(&v, &p2).unwrap();
        assert_eq!(r.verdict, Verdict::CertifiedMs, "{:?}", r.reasons);
        assert!(r.find(Klass::RepellingOrbit, [0.0, PI], 1e-6).is_some());
    }

    #[test]
    fn separatrices_of_product_flow() {
        let v = gradient();
        let (pts, _) = find_critical_points(&v, &quick()).unwrap();
        let s = pts.iter().find(|p| p.klass == Klass::Saddle && p.distance([0.0, PI]) < 1e-9).unwrap();
        let u = stable_unstable_manifold_sample(&v, s, Side::Unstable, 1, 2.0, &quick()).unwrap();
        assert!(u.iter().all(|p| (p[1] - PI).abs() < 1e-9));
        let st = stable_unstable_manifold_sample(&v, s, Side::Stable, 1, 2.0, &quick()).unwrap();
        assert!(st.iter().all(|p| p[0].min(TAU - p[0]) < 1e-9));
    }

    #[test]
    fn gradient_certified() {
        let r = certify_morse_smale(&gradient(), &quick()).unwrap();
        assert_eq!(r.verdict, Verdict::CertifiedMs, "{:?}", r.reasons);
        assert!(r.saddle_connections.is_empty());
        assert_eq!(r.nonwandering_evidence, 1.0);
        let csv = separatrix_csv(&gradient(), &r, 1.0).unwrap();
        assert!(csv.lines().count() > 10);
        let back: MsReport = serde_json::from_value(r.to_json()).unwrap();
        assert_eq!(back.verdict, r.verdict);
    }

    #[test]
    fn symmetric_field_has_connection() {
        let v = FourierVectorField::builder(2).sin(0, [0, 1], 0, 1.0).sin(1, [1, 0], 0, 1.0).build().unwrap();
        let r = certify_morse_smale(&v, &quick()).unwrap();
        assert_eq!(r.verdict, Verdict::Refuted);
        let a = r.find(Klass::Saddle, [0.0, 0.0], 1e-9).unwrap();
        let b = r.find(Klass::Saddle, [PI, PI], 1e-9).unwrap();
        assert!(r.saddle_connections.iter().any(|c| c.from == a && c.to == b));
    }

    #[test]
    fn finer_grid_keeps_points() {
        let v = FourierVectorField::builder(2)
            .sin(0, [1, 0], 0, 1.0)
            .cos(0, [0, 1], 0, 0.2)
            .sin(1, [0, 1], 0, 1.0)
            .build()
            .unwrap();
        let (a, _) = find_critical_points(&v, &MsParams { seed_grid: 8, ..quick() }).unwrap();
        let (b, _) = find_critical_points(&v, &MsParams { seed_grid: 32, ..quick() }).unwrap();
        for p in a.iter().filter(|p| p.is_hyperbolic()) {
            assert!(b.iter().any(|q| q.distance(p.location.raw()) < 1e-8));
        }
    }
}
