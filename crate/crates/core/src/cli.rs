//! Scenario files and the experiment runner behind the `sobolev-growth`
//! binary.
//!
//! A scenario is one TOML file. Every run writes its artifacts into a single
//! output directory together with `manifest.json`, which lists each file
//! with its SHA-256. Runs contain no timestamps, so the same scenario and
//! seed reproduce byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::escape::{build_escape, certify_escape, CertifyOptions, EnergyMode, EscapeParams};
use crate::fields::FourierVectorField;
use crate::io::{load_escape, save_escape, save_state, sidecar_path};
use crate::msanalysis::{certify_morse_smale, separatrix_csv, MsParams, MsReport, Verdict};
use crate::normalform::{
    conjugation_residual, homological_beta, homological_residual, resonant_average, resonant_average_integral,
    NormalFormTransform, ResidualConfig,
};
use crate::quantize::{wave_packet, Bump, SpectralState};
use crate::solver::{
    envelope_bound, fit_growth_rate, hex, solve, Backend, Equation, Integrator, SimulationConfig, SolveOutput,
    TimeSeries,
};

/// Experiment verbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    Simulate,
    MsCheck,
    EscapeBuild,
    EscapeCertify,
    NormalForm,
    Growth,
    Sweep,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Simulate => "simulate",
            Verb::MsCheck => "ms-check",
            Verb::EscapeBuild => "escape-build",
            Verb::EscapeCertify => "escape-certify",
            Verb::NormalForm => "normal-form",
            Verb::Growth => "growth",
            Verb::Sweep => "sweep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Sin,
    Cos,
}

/// `amp·sin(k·x + ℓt)` or `amp·cos(k·x + ℓt)` in component `comp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub comp: usize,
    pub kind: TermKind,
    pub k: [i32; 2],
    #[serde(default)]
    pub l: i32,
    pub amp: f64,
}

/// Inline coefficients, or a JSON field file relative to the scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    #[serde(default = "two")]
    pub dim: usize,
    #[serde(default)]
    pub constant: Option<Vec<f64>>,
    #[serde(default)]
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub file: Option<PathBuf>,
}

fn two() -> usize {
    2
}

impl FieldSpec {
    pub fn build(&self, base: &Path) -> Result<FourierVectorField> {
        if let Some(f) = &self.file {
            if self.constant.is_some() || !self.terms.is_empty() {
                return scenario_err("a field is given either by file or inline, not both");
            }
            let text = fs::read_to_string(base.join(f))?;
            let v = FourierVectorField::from_json(&serde_json::from_str(&text)?)?;
            if v.dim() != self.dim {
                return scenario_err(format!("field file has dimension {}, scenario says {}", v.dim(), self.dim));
            }
            return Ok(v);
        }
        let mut b = FourierVectorField::builder(self.dim);
        if let Some(c) = &self.constant {
            if c.len() != self.dim {
                return scenario_err("constant part has the wrong length");
            }
            b = b.constant(c);
        }
        for t in &self.terms {
            if t.comp >= self.dim || (self.dim == 1 && t.k[1] != 0) {
                return scenario_err(format!("term {t:?} does not fit dimension {}", self.dim));
            }
            if !t.amp.is_finite() {
                return scenario_err("term amplitude must be finite");
            }
            b = match t.kind {
                TermKind::Sin => b.sin(t.comp, t.k, t.l, t.amp),
                TermKind::Cos => b.cos(t.comp, t.k, t.l, t.amp),
            };
        }
        b.build()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub band: [usize; 2],
    pub t_end: f64,
    /// When set, runs with ε > 0 end at `horizon_over_eps / ε` instead.
    pub horizon_over_eps: Option<f64>,
    /// Defaults to `t_end / 100`.
    pub sample_interval: Option<f64>,
    pub dt: Option<f64>,
    pub courant: f64,
    pub cfl_guard: f64,
    pub backend: Backend,
    pub integrator: Integrator,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            band: [64, 64],
            t_end: 6.0,
            horizon_over_eps: None,
            sample_interval: None,
            dt: None,
            courant: 0.1,
            cfl_guard: 0.5,
            backend: Backend::Auto,
            integrator: Integrator::Rk4,
        }
    }
}

/// Wave packet `χ₀ e^{iξ₀·x/h}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSpec {
    pub bump: Bump,
    pub xi0: Vec<f64>,
    pub packet_scale: f64,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self {
            bump: Bump::Gaussian { center: vec![0.0, std::f64::consts::PI], width: vec![1.5, 0.5] },
            xi0: vec![1.0, 0.0],
            packet_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSpec {
    /// Defaults to `[2/ε, t_end]` for ε > 0 and `[t_end/3, t_end]` otherwise.
    pub window: Option<[f64; 2]>,
    /// Window `[a/ε, b/ε]` for ε > 0; takes precedence over `window`.
    pub window_over_eps: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscapeSpec {
    /// Order used by `escape-build`.
    pub sigma: f64,
    /// Orders scanned by `escape-certify`; the largest passing one is reported.
    pub sigmas: Vec<f64>,
    pub energy: EnergyMode,
    pub params: EscapeParams,
    pub certify: CertifyOptions,
    /// Certify a saved escape function instead of building one.
    pub load: Option<PathBuf>,
}

impl Default for EscapeSpec {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            sigmas: vec![0.05, 0.1, 0.2],
            energy: EnergyMode::Potential { potential: None },
            params: EscapeParams::default(),
            certify: CertifyOptions::default(),
            load: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalFormSpec {
    pub residual: ResidualConfig,
    /// Grid used for the invertibility measurements.
    pub grid: usize,
    /// Trapezoid nodes for the integral form of the average.
    pub nodes: usize,
}

impl Default for NormalFormSpec {
    fn default() -> Self {
        Self { residual: ResidualConfig::default(), grid: 64, nodes: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub epsilons: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Packet scales `h`; empty means the scenario's own.
    pub packet_scales: Vec<f64>,
}

/// Perturbs `u₀` by seeded noise of relative L² size `r` and reports the
/// largest `r` whose fitted rate stays above `min_rate_fraction` of the
/// unperturbed one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSpec {
    pub radii: Vec<f64>,
    pub min_rate_fraction: f64,
    /// Noise occupies modes with `|k|∞ ≤ noise_band`.
    pub noise_band: usize,
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        Self { radii: vec![0.01, 0.1, 0.5], min_rate_fraction: 0.5, noise_band: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub kind: Option<Verb>,
    pub field: FieldSpec,
    #[serde(default)]
    pub perturbation: Option<FieldSpec>,
    #[serde(default)]
    pub nu: Option<Vec<i64>>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub fit: FitSpec,
    #[serde(default)]
    pub ms: MsParams,
    #[serde(default)]
    pub escape: EscapeSpec,
    #[serde(default)]
    pub normal_form: NormalFormSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub robustness: Option<RobustnessSpec>,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.0]
}

fn default_sigmas() -> Vec<f64> {
    vec![0.25, 0.5]
}

fn scenario_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Scenario(msg.into()))
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Range checks beyond the schema.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return scenario_err("name must not be empty");
        }
        if self.field.dim != 1 && self.field.dim != 2 {
            return scenario_err("dim must be 1 or 2");
        }
        let all_eps = self.epsilons.iter().chain(&self.sweep.epsilons);
        for e in all_eps {
            if !(e.is_finite() && *e >= 0.0 && *e <= 1.0) {
                return scenario_err(format!("epsilon {e} outside [0, 1]"));
            }
        }
        for s in self.sigmas.iter().chain(&self.sweep.sigmas) {
            if !(s.is_finite() && *s > 0.0 && *s <= 4.0) {
                return scenario_err(format!("sigma {s} outside (0, 4]"));
            }
        }
        for s in self.escape.sigmas.iter().chain([&self.escape.sigma]) {
            if !(*s > 0.0 && *s <= 1.0) {
                return scenario_err(format!("escape sigma {s} outside (0, 1]"));
            }
        }
        for h in self.sweep.packet_scales.iter().chain([&self.initial.packet_scale]) {
            if !(h.is_finite() && *h > 0.0 && *h <= 1.0) {
                return scenario_err(format!("packet scale {h} outside (0, 1]"));
            }
        }
        let b = self.solver.band;
        if b[0] == 0 || b[0] > 1024 || b[1] > 1024 || (self.field.dim == 2 && b[1] == 0) {
            return scenario_err(format!("band {b:?} outside 1..=1024"));
        }
        if !(self.solver.t_end > 0.0 && self.solver.t_end <= 1e5) {
            return scenario_err("t_end outside (0, 1e5]");
        }
        if let Some(c) = self.solver.horizon_over_eps {
            if !(c > 0.0 && c <= 100.0) {
                return scenario_err("horizon_over_eps outside (0, 100]");
            }
        }
        if self.initial.xi0.len() != self.field.dim {
            return scenario_err("xi0 length must equal dim");
        }
        if let Some(nu) = &self.nu {
            if nu.len() != self.field.dim || nu.iter().any(|&c| c < 0) || nu.iter().all(|&c| c == 0) {
                return scenario_err("nu must be a nonzero vector of nonnegative integers of length dim");
            }
        }
        if let Some(r) = &self.robustness {
            if r.radii.iter().any(|x| !(*x > 0.0)) || !(r.min_rate_fraction > 0.0) {
                return scenario_err("robustness radii and rate fraction must be positive");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("scenario serializes")))
    }
}

/// Command-line overrides.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Directory that relative paths in the scenario refer to.
    pub base: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Single writer for one output directory; records every file it writes.
pub struct Artifacts {
    dir: PathBuf,
    entries: BTreeMap<String, ArtifactEntry>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), entries: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.path(name))?;
        let e = ArtifactEntry { file: name.to_string(), bytes: bytes.len() as u64, sha256: hex(&Sha256::digest(&bytes)) };
        self.entries.insert(name.to_string(), e);
        Ok(())
    }

    pub fn write(&mut self, name: &str, data: &[u8]) -> Result<()> {
        fs::write(self.path(name), data)?;
        self.record(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a container written by [`crate::io`] and its sidecar.
    pub fn adopt_container(&mut self, name: &str) -> Result<()> {
        self.record(name)?;
        let side = sidecar_path(Path::new(name));
        self.record(side.to_str().expect("utf-8 name"))
    }

    pub fn entries(&self) -> Vec<ArtifactEntry> {
        self.entries.values().cloned().collect()
    }
}

/// What a run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub verb: Verb,
    pub summary: serde_json::Value,
    pub warnings: Vec<String>,
    /// Set when a certification was refuted (exit code 3).
    pub refuted: Option<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    verb: &'a str,
    scenario_sha256: String,
    config_hashes: Vec<String>,
    seed: u64,
    library_version: &'static str,
    artifacts: Vec<ArtifactEntry>,
    warnings: &'a [String],
    refuted: &'a Option<String>,
    summary: &'a serde_json::Value,
}

/// Exit status for an error: 1 for scenario and I/O problems, 2 for
/// numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Scenario(_) | Error::Invalid(_) | Error::Io(_) | Error::Json(_) => 1,
        Error::Integration(_) | Error::Band(_) | Error::Numerical(_) | Error::NotInvertible(_) => 2,
    }
}

pub fn error_json(e: &Error) -> serde_json::Value {
    let kind = match e {
        Error::Scenario(_) => "scenario",
        Error::Invalid(_) => "invalid",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Integration(_) => "integration",
        Error::Band(_) => "band",
        Error::Numerical(_) => "numerical",
        Error::NotInvertible(_) => "not_invertible",
    };
    serde_json::json!({ "error": kind, "message": e.to_string(), "exit_code": exit_code(e) })
}

struct Ctx<'a> {
    sc: &'a Scenario,
    base: PathBuf,
    seed: u64,
    art: Artifacts,
    warnings: Vec<String>,
    config_hashes: Vec<String>,
}

/// Runs one verb and writes the manifest. Errors leave `error.json` behind
/// when the output directory is writable.
pub fn run(verb: Verb, sc: &Scenario, opts: &RunOptions) -> Result<RunSummary> {
    let res = run_inner(verb, sc, opts);
    if let Err(e) = &res {
        if fs::create_dir_all(&opts.out).is_ok() {
            let _ = fs::write(opts.out.join("error.json"), serde_json::to_vec_pretty(&error_json(e)).unwrap_or_default());
        }
    }
    res
}

fn run_inner(verb: Verb, sc: &Scenario, opts: &RunOptions) -> Result<RunSummary> {
    sc.validate()?;
    if let Some(k) = sc.kind {
        if k != verb {
            return scenario_err(format!("scenario is a {} experiment, not {}", k.name(), verb.name()));
        }
    }
    let mut ctx = Ctx {
        sc,
        base: opts.base.clone(),
        seed: opts.seed.unwrap_or(sc.seed),
        art: Artifacts::new(&opts.out)?,
        warnings: Vec::new(),
        config_hashes: Vec::new(),
    };
    let _ = fs::remove_file(opts.out.join("error.json"));
    let (summary, refuted) = match verb {
        Verb::Simulate => (simulate(&mut ctx)?, None),
        Verb::Growth => (growth(&mut ctx)?, None),
        Verb::MsCheck => ms_check(&mut ctx)?,
        Verb::EscapeBuild => escape_build(&mut ctx)?,
        Verb::EscapeCertify => escape_certify(&mut ctx)?,
        Verb::NormalForm => (normal_form(&mut ctx)?, None),
        Verb::Sweep => (sweep(&mut ctx)?, None),
    };
    ctx.config_hashes.sort();
    ctx.config_hashes.dedup();
    let manifest = Manifest {
        name: &sc.name,
        verb: verb.name(),
        scenario_sha256: sc.hash(),
        config_hashes: ctx.config_hashes.clone(),
        seed: ctx.seed,
        library_version: env!("CARGO_PKG_VERSION"),
        artifacts: ctx.art.entries(),
        warnings: &ctx.warnings,
        refuted: &refuted,
        summary: &summary,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(ctx.art.path("manifest.json"), text)?;
    Ok(RunSummary { verb, summary, warnings: ctx.warnings, refuted })
}

// ------------------------------------------------------------- helpers

fn eps_tag(e: f64) -> String {
    format!("eps{e}")
}

fn equation(ctx: &Ctx) -> Result<Equation> {
    let v = ctx.sc.field.build(&ctx.base)?;
    Ok(match &ctx.sc.perturbation {
        Some(p) => Equation::perturbed(v, p.build(&ctx.base)?),
        None => Equation::transport(v),
    })
}

fn horizon(sc: &Scenario, eps: f64) -> f64 {
    match sc.solver.horizon_over_eps {
        Some(c) if eps > 0.0 => c / eps,
        _ => sc.solver.t_end,
    }
}

fn config(sc: &Scenario, eps: f64, sigmas: &[f64]) -> SimulationConfig {
    let s = &sc.solver;
    let t_end = horizon(sc, eps);
    let mut c = SimulationConfig::new(sc.field.dim, if sc.field.dim == 1 { [s.band[0], 0] } else { s.band }, t_end);
    c.epsilon = eps;
    c.nu = sc.nu.clone();
    c.sigmas = sigmas.to_vec();
    c.sample_interval = s.sample_interval.unwrap_or(t_end / 100.0);
    c.dt = s.dt;
    c.courant = s.courant;
    c.cfl_guard = s.cfl_guard;
    c.backend = s.backend;
    c.integrator = s.integrator;
    c
}

fn initial(sc: &Scenario, h: f64, band: [usize; 2]) -> Result<SpectralState> {
    wave_packet(&sc.initial.bump, &sc.initial.xi0, h, sc.field.dim, band)
}

fn window(sc: &Scenario, eps: f64) -> (f64, f64) {
    let t = horizon(sc, eps);
    match (sc.fit.window_over_eps, sc.fit.window) {
        (Some(w), _) if eps > 0.0 => (w[0] / eps, w[1] / eps),
        (_, Some(w)) => (w[0], w[1]),
        _ if eps > 0.0 && 2.0 / eps < t => (2.0 / eps, t),
        _ => (t / 3.0, t),
    }
}

fn dat_series(s: &TimeSeries) -> String {
    let mut out = String::from("# t l2");
    for sg in &s.sigmas {
        let _ = write!(out, " h_sigma_{sg}");
    }
    out.push('\n');
    for x in &s.samples {
        let _ = write!(out, "{:.10e} {:.10e}", x.t, x.l2);
        for v in &x.h {
            let _ = write!(out, " {v:.10e}");
        }
        out.push('\n');
    }
    out
}

fn run_series(ctx: &mut Ctx, eps: f64, tag: &str) -> Result<SolveOutput> {
    let sc = ctx.sc;
    let eq = equation(ctx)?;
    let cfg = config(sc, eps, &sc.sigmas);
    let u0 = initial(sc, sc.initial.packet_scale, cfg.band)?;
    let out = solve(&cfg, &u0, &eq)?;
    ctx.config_hashes.push(cfg.hash());
    if let Some(f) = &out.failure {
        ctx.warnings.push(format!("{tag}: {f}"));
    }
    ctx.art.write(&format!("series_{tag}.csv"), out.series.to_csv()?.as_bytes())?;
    ctx.art.write(&format!("norms_{tag}.dat"), dat_series(&out.series).as_bytes())?;
    let name = format!("state_{tag}.bin");
    save_state(&ctx.art.path(&name), &out.state, serde_json::json!({ "epsilon": eps, "t": out.series.samples.last().map(|s| s.t) }))?;
    ctx.art.adopt_container(&name)?;
    Ok(out)
}

// --------------------------------------------------------------- verbs

fn simulate(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let sc = ctx.sc;
    let mut runs = Vec::new();
    for &eps in &sc.epsilons {
        let tag = eps_tag(eps);
        let out = run_series(ctx, eps, &tag)?;
        let w = equation(ctx)?.total_field(sc.field.dim, eps)?;
        let mut slopes = Vec::new();
        for &s in &sc.sigmas {
            slopes.push(serde_json::json!({
                "sigma": s,
                "max_log_slope": out.series.max_log_slope(s)?,
                "envelope_bound": envelope_bound(&w, s),
            }));
        }
        runs.push(serde_json::json!({
            "epsilon": eps,
            "dt": out.dt,
            "l2_drift": out.series.l2_drift(),
            "failure": out.failure,
            "samples": out.series.samples.len(),
            "slopes": slopes,
        }));
    }
    let v = serde_json::json!({ "runs": runs });
    ctx.art.write_json("simulate.json", &v)?;
    Ok(v)
}

fn noise(seed: u64, band: [usize; 2], dim: usize, nb: usize) -> Result<SpectralState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = nb as i64;
    SpectralState::from_fn(dim, band, |k| {
        if k[0].abs() <= nb && k[1].abs() <= nb {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

fn growth(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let sc = ctx.sc;
    let mut rows = Vec::new();
    let mut dat = String::from("# epsilon sigma rate fit_residual\n");
    let mut base_rates = BTreeMap::new();
    for &eps in &sc.epsilons {
        let tag = eps_tag(eps);
        let out = run_series(ctx, eps, &tag)?;
        let win = window(sc, eps);
        for &s in &sc.sigmas {
            let f = fit_growth_rate(&out.series, s, win)?;
            if !(f.rate > 0.0) {
                ctx.warnings.push(format!("{tag}, σ = {s}: fitted rate {:.3e} is not positive", f.rate));
            }
            base_rates.insert((eps.to_bits(), s.to_bits()), f.rate);
            let _ = writeln!(dat, "{eps} {s} {:.10e} {:.10e}", f.rate, f.residual);
            rows.push(serde_json::json!({
                "epsilon": eps,
                "sigma": s,
                "window": [win.0, win.1],
                "rate": f.rate,
                "intercept": f.intercept,
                "fit_residual": f.residual,
                "samples": f.samples,
                "rate_over_sigma": f.rate / s,
                "rate_over_sigma_eps": if eps > 0.0 { Some(f.rate / (s * eps)) } else { None },
                "l2_drift": out.series.l2_drift(),
            }));
        }
    }
    ctx.art.write("rates.dat", dat.as_bytes())?;
    let mut v = serde_json::json!({ "fits": rows });
    if let Some(r) = &sc.robustness {
        v["robustness"] = robustness(ctx, r, &base_rates)?;
    }
    ctx.art.write_json("growth.json", &v)?;
    Ok(v)
}

fn robustness(ctx: &mut Ctx, r: &RobustnessSpec, base: &BTreeMap<(u64, u64), f64>) -> Result<serde_json::Value> {
    let sc = ctx.sc;
    let eq = equation(ctx)?;
    let mut out = Vec::new();
    for (ei, &eps) in sc.epsilons.iter().enumerate() {
        let cfg = config(sc, eps, &sc.sigmas);
        let u0 = initial(sc, sc.initial.packet_scale, cfg.band)?;
        let nz = noise(ctx.seed.wrapping_add(ei as u64), cfg.band, sc.field.dim, r.noise_band)?;
        let scale = u0.l2_norm() / nz.l2_norm();
        let win = window(sc, eps);
        let mut largest = BTreeMap::new();
        let mut cells = Vec::new();
        for &rad in &r.radii {
            let mut u = u0.clone();
            for (a, b) in u.coeffs_mut().iter_mut().zip(nz.coeffs()) {
                *a += b * (rad * scale);
            }
            let run = solve(&cfg, &u, &eq)?;
            for &s in &sc.sigmas {
                let f = fit_growth_rate(&run.series, s, win)?;
                let b = base[&(eps.to_bits(), s.to_bits())];
                let persists = b > 0.0 && f.rate >= r.min_rate_fraction * b;
                if persists {
                    let e = largest.entry(s.to_string()).or_insert(0.0f64);
                    *e = e.max(rad);
                }
                cells.push(serde_json::json!({ "radius": rad, "sigma": s, "rate": f.rate, "persists": persists }));
            }
        }
        out.push(serde_json::json!({ "epsilon": eps, "cells": cells, "largest_persistent_radius": largest }));
    }
    Ok(serde_json::Value::Array(out))
}

fn separatrix_dat(csv_text: &str) -> String {
    // one block per branch, blank line between blocks
    let mut out = String::from("# x1 x2 (blocks: saddle, side, branch)\n");
    let mut last = String::new();
    for line in csv_text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 5 {
            continue;
        }
        let key = format!("{} {} {}", f[0], f[1], f[2]);
        if key != last {
            if !last.is_empty() {
                out.push_str("\n\n");
            }
            let _ = writeln!(out, "# {key}");
            last = key;
        }
        let _ = writeln!(out, "{} {}", f[3], f[4]);
    }
    out
}

fn ms_report(ctx: &mut Ctx) -> Result<(FourierVectorField, MsReport)> {
    let v = ctx.sc.field.build(&ctx.base)?;
    let params = MsParams { seed: ctx.seed, ..ctx.sc.ms.clone() };
    let report = certify_morse_smale(&v, &params)?;
    ctx.art.write_json("ms_report.json", &report)?;
    Ok((v, report))
}

fn ms_check(ctx: &mut Ctx) -> Result<(serde_json::Value, Option<String>)> {
    let (v, report) = ms_report(ctx)?;
    let csv_text = separatrix_csv(&v, &report, 20.0)?;
    ctx.art.write("separatrices.csv", csv_text.as_bytes())?;
    ctx.art.write("separatrices.dat", separatrix_dat(&csv_text).as_bytes())?;
    let mut crit = String::from("# x1 x2 index\n");
    for e in &report.elements {
        let x = e.location.raw();
        let _ = writeln!(crit, "{:.12} {:.12} {}", x[0], x[1], e.index());
    }
    ctx.art.write("critical.dat", crit.as_bytes())?;
    let refuted = match report.verdict {
        Verdict::Refuted => Some(format!("Morse-Smale property refuted: {}", report.reasons.join("; "))),
        Verdict::Inconclusive => {
            ctx.warnings.push(format!("inconclusive: {}", report.reasons.join("; ")));
            None
        }
        Verdict::CertifiedMs => None,
    };
    Ok((
        serde_json::json!({
            "verdict": report.verdict,
            "elements": report.elements.len(),
            "saddle_connections": report.saddle_connections.len(),
            "reasons": report.reasons,
        }),
        refuted,
    ))
}

fn certified_report(ctx: &mut Ctx) -> Result<std::result::Result<(FourierVectorField, MsReport), String>> {
    let (v, report) = ms_report(ctx)?;
    if report.verdict != Verdict::CertifiedMs {
        return Ok(Err(format!("field is not certified Morse-Smale ({:?}): {}", report.verdict, report.reasons.join("; "))));
    }
    Ok(Ok((v, report)))
}

fn escape_build(ctx: &mut Ctx) -> Result<(serde_json::Value, Option<String>)> {
    let (v, report) = match certified_report(ctx)? {
        Ok(x) => x,
        Err(msg) => return Ok((serde_json::json!({ "built": false }), Some(msg))),
    };
    let e = &ctx.sc.escape;
    let a = build_escape(&v, &report, &e.energy, e.sigma, &e.params)?;
    save_escape(&ctx.art.path("escape.bin"), &a, serde_json::json!({ "scenario": ctx.sc.name }))?;
    ctx.art.adopt_container("escape.bin")?;
    let summary = serde_json::json!({
        "built": true,
        "sigma": a.sigma,
        "energy": a.order.energy.check,
        "energy_sup_bound": a.order.energy.sup_bound,
        "order_checks": a.order.checks,
        "m1": a.order.m1,
        "m2": a.order.m2,
        "weight": a.weight,
        "negative_cone": a.negative_cone,
    });
    ctx.art.write_json("escape_build.json", &summary)?;
    Ok((summary, None))
}

fn escape_certify(ctx: &mut Ctx) -> Result<(serde_json::Value, Option<String>)> {
    let e = ctx.sc.escape.clone();
    let base = match &e.load {
        Some(p) => load_escape(&ctx.base.join(p))?,
        None => {
            let (v, report) = match certified_report(ctx)? {
                Ok(x) => x,
                Err(msg) => return Ok((serde_json::json!({ "certified": false }), Some(msg))),
            };
            let s0 = e.sigmas.first().copied().unwrap_or(e.sigma);
            build_escape(&v, &report, &e.energy, s0, &e.params)?
        }
    };
    let sigmas = if e.sigmas.is_empty() { vec![base.sigma] } else { e.sigmas.clone() };
    let mut certs = Vec::new();
    let mut dat = String::from("# sigma pass_fraction delta delta_empirical c0\n");
    let mut sigma0: Option<f64> = None;
    for &s in &sigmas {
        let a = if s == base.sigma { base.clone() } else { base.with_sigma(s)? };
        let c = certify_escape(&a, &e.certify);
        let _ = writeln!(dat, "{s} {:.6} {:.6e} {:.6e} {:.6e}", c.pass_fraction, c.delta, c.delta_empirical, c.c0);
        if c.passed {
            sigma0 = Some(sigma0.map_or(s, |m: f64| m.max(s)));
        }
        certs.push(c);
    }
    ctx.art.write_json("certificate.json", &certs)?;
    ctx.art.write("certificate.dat", dat.as_bytes())?;
    let refuted = sigma0.is_none().then(|| "escape certification failed at every σ".to_string());
    Ok((
        serde_json::json!({
            "sigmas": sigmas,
            "passed": certs.iter().map(|c| c.passed).collect::<Vec<_>>(),
            "pass_fractions": certs.iter().map(|c| c.pass_fraction).collect::<Vec<_>>(),
            "largest_certified_sigma": sigma0,
        }),
        refuted,
    ))
}

fn normal_form(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let sc = ctx.sc;
    let nu = sc.nu.clone().ok_or_else(|| Error::Scenario("normal-form needs nu".into()))?;
    let p = sc
        .perturbation
        .as_ref()
        .ok_or_else(|| Error::Scenario("normal-form needs a perturbation field".into()))?
        .build(&ctx.base)?;
    let nf = &sc.normal_form;
    let avg = resonant_average(&p, &nu)?;
    let nodes = if nf.nodes > 0 {
        nf.nodes
    } else {
        let k1: i64 = nu.iter().sum::<i64>() * p.k_max() as i64;
        (2 * (k1 as usize + p.l_max()) + 1).max(4) * 2
    };
    let avg_int = resonant_average_integral(&p, &nu, nodes)?;
    let mut eqv: f64 = 0.0;
    for m in avg.modes().iter().chain(avg_int.modes()) {
        let a = avg.coeff(m.k, m.l);
        let b = avg_int.coeff(m.k, m.l);
        eqv = eqv.max((a[0] - b[0]).norm()).max((a[1] - b[1]).norm());
    }
    let beta = homological_beta(&p, &nu)?;
    let hres = homological_residual(&p, &nu, &beta)?;
    ctx.art.write_json("averaged_field.json", &avg.to_json())?;
    ctx.art.write_json("beta.json", &beta.to_json())?;
    let nu_f: Vec<f64> = nu.iter().map(|&c| c as f64).collect();
    let band = nf.residual.band;
    let u0 = initial(sc, sc.initial.packet_scale, if sc.field.dim == 1 { [band[0], 0] } else { band })?;
    let threshold = NormalFormTransform::new(&p, &nu, 1.0)?.operational_threshold(nf.grid);
    let mut per_eps = Vec::new();
    let mut sups = Vec::new();
    for &eps in &sc.epsilons {
        if eps == 0.0 {
            continue;
        }
        let t = NormalFormTransform::new(&p, &nu, eps)?;
        let (min_det, lip) = t.invertibility(nf.grid);
        let r = conjugation_residual(&p, &nu, eps, &u0, &nf.residual)?;
        let mut csv_text = String::from("t,r\n");
        for (a, b) in r.t.iter().zip(&r.r) {
            let _ = writeln!(csv_text, "{a:.17e},{b:.17e}");
        }
        ctx.art.write(&format!("residual_{}.csv", eps_tag(eps)), csv_text.as_bytes())?;
        sups.push((eps, r.sup()));
        per_eps.push(serde_json::json!({
            "epsilon": eps,
            "min_det": min_det,
            "eps_sup_grad_beta": lip,
            "residual_sup": r.sup(),
            "max_tail": r.max_tail,
        }));
    }
    let mut order = Vec::new();
    for w in sups.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        if a.0 < b.0 {
            std::mem::swap(&mut a, &mut b);
        }
        let ((e1, r1), (e2, r2)) = (a, b);
        order.push(serde_json::json!({
            "eps": [e1, e2],
            "ratio": r1 / r2,
            "order": (r1 / r2).ln() / (e1 / e2).ln(),
        }));
    }
    let mut dat = String::from("# epsilon residual_sup\n");
    for (e, r) in &sups {
        let _ = writeln!(dat, "{e} {r:.10e}");
    }
    ctx.art.write("residual.dat", dat.as_bytes())?;
    let v = serde_json::json!({
        "nu": nu_f,
        "average_modes": avg.modes().len(),
        "average_formula_gap": eqv,
        "homological_residual": hres,
        "operational_threshold": threshold,
        "per_epsilon": per_eps,
        "order_estimates": order,
    });
    ctx.art.write_json("normal_form.json", &v)?;
    Ok(v)
}

#[derive(Clone, Debug, Serialize)]
struct SweepRow {
    epsilon: f64,
    sigma: f64,
    packet_scale: f64,
    rate: f64,
    fit_residual: f64,
    l2_drift: f64,
    flagged: bool,
    note: String,
}

fn sweep(ctx: &mut Ctx) -> Result<serde_json::Value> {
    let sc = ctx.sc;
    let eq = equation(ctx)?;
    let sw = &sc.sweep;
    let hs = if sw.packet_scales.is_empty() { vec![sc.initial.packet_scale] } else { sw.packet_scales.clone() };
    let sigmas = if sw.sigmas.is_empty() { sc.sigmas.clone() } else { sw.sigmas.clone() };
    let cells: Vec<(f64, f64)> = sw.epsilons.iter().flat_map(|&e| hs.iter().map(move |&h| (e, h))).collect();
    let results: Vec<Vec<SweepRow>> = cells
        .par_iter()
        .map(|&(eps, h)| {
            let cfg = config(sc, eps, &sigmas);
            let win = window(sc, eps);
            let run = initial(sc, h, cfg.band).and_then(|u0| solve(&cfg, &u0, &eq));
            sigmas
                .iter()
                .map(|&s| {
                    let mut row = SweepRow {
                        epsilon: eps,
                        sigma: s,
                        packet_scale: h,
                        rate: f64::NAN,
                        fit_residual: f64::NAN,
                        l2_drift: f64::NAN,
                        flagged: true,
                        note: String::new(),
                    };
                    match &run {
                        Err(e) => row.note = e.to_string(),
                        Ok(out) => {
                            row.l2_drift = out.series.l2_drift();
                            match fit_growth_rate(&out.series, s, win) {
                                Ok(f) => {
                                    row.rate = f.rate;
                                    row.fit_residual = f.residual;
                                    row.flagged = !f.rate.is_finite() || out.failure.is_some();
                                    row.note = out.failure.clone().unwrap_or_default();
                                }
                                Err(e) => row.note = e.to_string(),
                            }
                        }
                    }
                    row
                })
                .collect()
        })
        .collect();
    let rows: Vec<SweepRow> = results.into_iter().flatten().collect();
    for &(e, _) in &cells {
        ctx.config_hashes.push(config(sc, e, &sigmas).hash());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(["epsilon", "sigma", "packet_scale", "rate", "fit_residual", "l2_drift", "flagged", "note"]).map_err(csv_err)?;
    let mut dat = String::from("# epsilon sigma packet_scale rate fit_residual l2_drift flagged\n");
    let mut flagged = 0;
    for r in &rows {
        flagged += r.flagged as usize;
        w.write_record([
            r.epsilon.to_string(),
            r.sigma.to_string(),
            r.packet_scale.to_string(),
            format!("{:.17e}", r.rate),
            format!("{:.17e}", r.fit_residual),
            format!("{:.17e}", r.l2_drift),
            r.flagged.to_string(),
            r.note.clone(),
        ])
        .map_err(csv_err)?;
        let _ = writeln!(
            dat,
            "{} {} {} {:.10e} {:.10e} {:.10e} {}",
            r.epsilon, r.sigma, r.packet_scale, r.rate, r.fit_residual, r.l2_drift, r.flagged as u8
        );
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    ctx.art.write("sweep.csv", &bytes)?;
    ctx.art.write("sweep.dat", dat.as_bytes())?;
    if flagged > 0 {
        ctx.warnings.push(format!("{flagged} sweep row(s) flagged"));
    }
    // NaN is not valid JSON; flagged rows carry null rates
    let json_rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            let num = |x: f64| if x.is_finite() { serde_json::json!(x) } else { serde_json::Value::Null };
            serde_json::json!({
                "epsilon": r.epsilon, "sigma": r.sigma, "packet_scale": r.packet_scale,
                "rate": num(r.rate), "fit_residual": num(r.fit_residual), "l2_drift": num(r.l2_drift),
                "flagged": r.flagged, "note": r.note,
            })
        })
        .collect();
    let v = serde_json::json!({ "rows": json_rows, "flagged": flagged });
    ctx.art.write_json("sweep.json", &v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRADIENT: &str = r#"
name = "gradient"
sigmas = [0.5]

[field]
terms = [
  { comp = 0, kind = "sin", k = [1, 0], amp = 1.0 },
  { comp = 1, kind = "sin", k = [0, 1], amp = 1.0 },
]

[solver]
band = [24, 24]
t_end = 3.0
sample_interval = 0.1
courant = 0.5

[ms]
seed_grid = 16
omega_starts = 20
"#;

    fn opts(dir: &Path) -> RunOptions {
        RunOptions { out: dir.to_path_buf(), seed: None, base: dir.to_path_buf() }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = GRADIENT.replace("sigmas = [0.5]", "sigmas = [0.5]\nbogus = 1");
        assert!(matches!(Scenario::from_toml(&bad), Err(Error::Scenario(_))));
        let bad = GRADIENT.replace("courant = 0.5", "courant = 0.5\ncurrant = 1");
        assert!(Scenario::from_toml(&bad).is_err());
        let bad = GRADIENT.replace("sigmas = [0.5]", "sigmas = [-1.0]");
        assert!(Scenario::from_toml(&bad).is_err());
    }

    #[test]
    fn growth_is_positive_and_reproducible() {
        let sc = Scenario::from_toml(GRADIENT).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r = run(Verb::Growth, &sc, &opts(d1.path())).unwrap();
        assert!(r.summary["fits"][0]["rate"].as_f64().unwrap() > 0.0);
        run(Verb::Growth, &sc, &opts(d2.path())).unwrap();
        for f in ["series_eps0.csv", "growth.json", "manifest.json"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        // every file is referenced by the manifest
        let m: serde_json::Value = serde_json::from_slice(&fs::read(d1.path().join("manifest.json")).unwrap()).unwrap();
        let listed: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["file"].as_str().unwrap()).collect();
        for entry in fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name().into_string().unwrap();
            assert!(name == "manifest.json" || listed.contains(&name.as_str()), "orphan {name}");
        }
    }

    #[test]
    fn constant_field_is_refuted() {
        let sc = Scenario::from_toml(
            "name = \"c\"\n[field]\nconstant = [1.0, 0.5]\n[ms]\nseed_grid = 8\nomega_starts = 10\n",
        )
        .unwrap();
        let d = tempfile::tempdir().unwrap();
        let r = run(Verb::MsCheck, &sc, &opts(d.path())).unwrap();
        assert!(r.refuted.is_some());
        assert_eq!(r.summary["verdict"], "refuted");
    }

    #[test]
    fn kind_mismatch_is_a_scenario_error() {
        let sc = Scenario::from_toml(&format!("kind = \"ms-check\"\n{GRADIENT}")).unwrap();
        let d = tempfile::tempdir().unwrap();
        let e = run(Verb::Growth, &sc, &opts(d.path())).unwrap_err();
        assert_eq!(exit_code(&e), 1);
        assert!(d.path().join("error.json").exists());
    }

    #[test]
    fn sweep_orders_rates_and_isolates_failures() {
        let text = format!(
            "{GRADIENT}\n[sweep]\nepsilons = [0.0]\nsigmas = [0.25, 0.5, 1.0]\npacket_scales = [1.0, 0.001]\n"
        );
        let sc = Scenario::from_toml(&text.replace("name = \"gradient\"", "name = \"sw\"")).unwrap();
        let d = tempfile::tempdir().unwrap();
        let r = run(Verb::Sweep, &sc, &opts(d.path())).unwrap();
        let rows = r.summary["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 6);
        let good: Vec<f64> = rows.iter().filter(|r| r["packet_scale"] == 1.0).map(|r| r["rate"].as_f64().unwrap()).collect();
        assert!(good.windows(2).all(|w| w[1] > w[0]));
        // h = 0.001 puts ξ₀/h outside the band: those rows are flagged
        assert!(rows.iter().filter(|r| r["packet_scale"] == 0.001).all(|r| r["flagged"] == true));
        assert!(r.warnings.iter().any(|w| w.contains("flagged")));

        let empty = Scenario::from_toml(&format!("{GRADIENT}\n[sweep]\nepsilons = []\n")).unwrap();
        let d = tempfile::tempdir().unwrap();
        let r = run(Verb::Sweep, &empty, &opts(d.path())).unwrap();
        assert_eq!(r.summary["rows"].as_array().unwrap().len(), 0);
    }
}
