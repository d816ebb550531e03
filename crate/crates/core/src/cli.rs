//! Command-line front end: configuration, subcommands and run directories.
//!
//! Configuration is flat text, one `key = value` per line, `#` starts a
//! comment. Every run writes into its own directory, named by a timestamp
//! and the configuration hash, and leaves a `manifest.txt` whose
//! non-comment lines are the fully resolved configuration.

use crate::analysis::{
    check_rate_bound, distance_series, fit_decay_rate, k_sweep, ls_probe, NormKind, RateModel,
    SweepReference,
};
use crate::dynamics::{
    run_trajectory, run_trajectory_with, smoothed_random_initial, Checkpoint, InitialData,
    RunConfig, Scheme, StepOptions, SurfaceInit, TrajectoryRecord, CSV_HEADER,
};
use crate::energy::FieldPair;
use crate::error::{Error, Result};
use crate::mesh::{Geometry, Mesh};
use crate::nonlinearity::{validate_assumptions, Coupling, NonlinearitySpec, Potential};
use crate::steady_spectral::{
    compute_coercivity_margin, solve_stationary_newton, EquilibriumState, NewtonOptions,
};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

const COMMON_KEYS: &[&str] = &[
    "geometry",
    "K",
    "bulk_potential",
    "surface_potential",
    "coupling",
    "scheme",
    "dt",
    "dt_min",
    "dt_max",
    "T_final",
    "newton_tol",
    "max_newton_iter",
    "seed",
    "sample_every",
    "checkpoint_every",
    "init_mean",
    "init_amplitude",
    "init_smoothing",
    "init_surface",
    "steady_tol",
    "steady_max_iter",
    "max_m",
    "sweep_K",
    "sweep_reference",
    "rate_model",
    "rate_floor",
    "probe_radius",
    "scan_min",
    "scan_max",
    "scan_points",
];
const DISK_KEYS: &[&str] = &["radius", "n_r", "n_theta"];
const INTERVAL_KEYS: &[&str] = &["length", "n"];

/// Everything a subcommand needs, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub init: InitialData,
    pub steady: NewtonOptions,
    pub max_m: usize,
    pub sweep_ks: Vec<f64>,
    pub sweep_reference: SweepReference,
    pub rate_model: RateModel,
    /// Distances below this are excluded from rate fits.
    pub rate_floor: f64,
    pub probe_radius: f64,
    pub scan_range: (f64, f64),
    pub scan_points: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            init: InitialData::default(),
            steady: NewtonOptions::default(),
            max_m: 80,
            sweep_ks: vec![1e-1, 1e-2, 1e-3, 1e-4],
            sweep_reference: SweepReference::TransmissionLimit,
            rate_model: RateModel::Auto,
            rate_floor: 1e-8,
            probe_radius: 1.0,
            scan_range: (-10.0, 10.0),
            scan_points: 2001,
        }
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn fmt_call(name: &str, args: &[f64]) -> String {
    format!("{name}({})", fmt_list(args))
}

fn fmt_potential(p: &Potential) -> String {
    match p {
        Potential::DoubleWell => "double_well".into(),
        Potential::ScaledDoubleWell { scale, well } => {
            fmt_call("scaled_double_well", &[*scale, *well])
        }
        Potential::Polynomial(c) => fmt_call("polynomial", c),
        Potential::Exponential { rate } => fmt_call("exponential", &[*rate]),
    }
}

fn fmt_coupling(c: &Coupling) -> String {
    match c {
        Coupling::Affine { slope, offset } => fmt_call("affine", &[*slope, *offset]),
        Coupling::Tanh { amplitude, rate } => fmt_call("tanh", &[*amplitude, *rate]),
        Coupling::Polynomial(c) => fmt_call("polynomial", c),
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| format!("'{}' is not a number", x.trim()))
        })
        .collect()
}

/// `name` or `name(a, b, ...)`.
fn parse_call(s: &str) -> std::result::Result<(String, Vec<f64>), String> {
    match s.split_once('(') {
        None => Ok((s.trim().to_string(), Vec::new())),
        Some((name, rest)) => {
            let inner = rest
                .trim_end()
                .strip_suffix(')')
                .ok_or_else(|| format!("missing ')' in '{s}'"))?;
            Ok((name.trim().to_string(), parse_list(inner)?))
        }
    }
}

fn parse_potential(s: &str) -> std::result::Result<Potential, String> {
    let (name, a) = parse_call(s)?;
    match (name.as_str(), a.len()) {
        ("double_well", 0) => Ok(Potential::DoubleWell),
        ("scaled_double_well", 2) => Ok(Potential::ScaledDoubleWell { scale: a[0], well: a[1] }),
        ("polynomial", n) if n > 0 => Ok(Potential::Polynomial(a)),
        ("exponential", 1) => Ok(Potential::Exponential { rate: a[0] }),
        _ => Err(format!(
            "expected double_well, scaled_double_well(scale, well), polynomial(c0, ...) or exponential(rate), got '{s}'"
        )),
    }
}

fn parse_coupling(s: &str) -> std::result::Result<Coupling, String> {
    let (name, a) = parse_call(s)?;
    match (name.as_str(), a.len()) {
        ("affine", 2) => Ok(Coupling::Affine { slope: a[0], offset: a[1] }),
        ("tanh", 2) => Ok(Coupling::Tanh { amplitude: a[0], rate: a[1] }),
        ("polynomial", n) if n > 0 => Ok(Coupling::Polynomial(a)),
        _ => Err(format!(
            "expected affine(slope, offset), tanh(amplitude, rate) or polynomial(c0, ...), got '{s}'"
        )),
    }
}

fn nearest_key(key: &str) -> &'static str {
    COMMON_KEYS
        .iter()
        .chain(DISK_KEYS)
        .chain(INTERVAL_KEYS)
        .min_by_key(|k| strsim::levenshtein(key, k))
        .copied()
        .expect("key table is non-empty")
}

struct Reader {
    raw: BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Reader {
    fn get<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> T {
        match self.raw.get(key) {
            None => default,
            Some(v) => match parse(v) {
                Ok(x) => x,
                Err(e) => {
                    self.errors.push(format!("{key}: {e}"));
                    default
                }
            },
        }
    }

    fn num(&mut self, key: &str, default: f64) -> f64 {
        self.get(key, default, |v| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("expected a finite number, got '{v}'"))
        })
    }

    fn uint(&mut self, key: &str, default: usize) -> usize {
        self.get(key, default, |v| {
            v.parse::<usize>()
                .map_err(|_| format!("expected a non-negative integer, got '{v}'"))
        })
    }
}

/// Parses configuration text. Omitted keys take their defaults; all
/// problems are reported together in one `Error::Config`.
pub fn parse_config(text: &str) -> Result<Settings> {
    let mut raw = BTreeMap::new();
    let mut errors = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!(
                "line {}: expected 'key = value', got '{line}'",
                no + 1
            ));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if !COMMON_KEYS.contains(&k) && !DISK_KEYS.contains(&k) && !INTERVAL_KEYS.contains(&k) {
            errors.push(format!(
                "unknown key '{k}' (did you mean '{}'?)",
                nearest_key(k)
            ));
            continue;
        }
        if raw.insert(k.to_string(), v.to_string()).is_some() {
            errors.push(format!("key '{k}' given more than once"));
        }
    }
    let mut r = Reader { raw, errors };
    let d = Settings::default();
    let disk = r.get("geometry", true, |v| match v {
        "disk" => Ok(true),
        "interval" => Ok(false),
        _ => Err(format!("expected disk or interval, got '{v}'")),
    });
    let foreign = if disk { INTERVAL_KEYS } else { DISK_KEYS };
    for k in foreign {
        if r.raw.contains_key(*k) {
            let g = if disk { "disk" } else { "interval" };
            r.errors
                .push(format!("key '{k}' does not apply to geometry = {g}"));
        }
    }
    let geometry = if disk {
        Geometry::disk(
            r.num("radius", 1.0),
            r.uint("n_r", 64),
            r.uint("n_theta", 128),
        )
    } else {
        Geometry::interval(r.num("length", 1.0), r.uint("n", 256))
    };
    let k = r.num("K", d.run.k);
    if !(k > 0.0) {
        r.errors.push("K must be positive".into());
    }
    let bulk = r.get("bulk_potential", Potential::DoubleWell, parse_potential);
    let surface = r.get("surface_potential", Potential::DoubleWell, parse_potential);
    let coupling = r.get("coupling", d.run.spec.coupling().clone(), parse_coupling);
    let spec = NonlinearitySpec::new(bulk, surface, coupling).unwrap_or_else(|e| {
        r.errors.push(e.to_string());
        d.run.spec.clone()
    });
    let scheme = r.get("scheme", d.run.scheme, |v| {
        Scheme::parse(v).ok_or_else(|| {
            format!("expected fully_implicit or stabilized_semi_implicit, got '{v}'")
        })
    });
    let run = RunConfig {
        geometry,
        spec,
        k: if k > 0.0 { k } else { d.run.k },
        scheme,
        dt: r.num("dt", d.run.dt),
        dt_min: r.num("dt_min", d.run.dt_min),
        dt_max: r.num("dt_max", d.run.dt_max),
        t_final: r.num("T_final", d.run.t_final),
        step: StepOptions {
            newton_tol: r.num("newton_tol", d.run.step.newton_tol),
            max_newton_iter: r.uint("max_newton_iter", d.run.step.max_newton_iter),
            ..d.run.step
        },
        seed: r.get("seed", d.run.seed, |v| {
            v.parse::<u64>()
                .map_err(|_| format!("expected a non-negative integer, got '{v}'"))
        }),
        sample_every: r.uint("sample_every", d.run.sample_every),
        checkpoint_every: r.uint("checkpoint_every", d.run.checkpoint_every),
        keep_states: false,
    };
    let init = InitialData {
        seed: run.seed,
        mean: r.num("init_mean", d.init.mean),
        amplitude: r.num("init_amplitude", d.init.amplitude),
        smoothing: r.num("init_smoothing", d.init.smoothing),
        surface: r.get("init_surface", d.init.surface, |v| match v {
            "random" => Ok(SurfaceInit::Random),
            "match_trace" => Ok(SurfaceInit::MatchTrace),
            _ => Err(format!("expected random or match_trace, got '{v}'")),
        }),
    };
    let steady = NewtonOptions {
        tol: r.num("steady_tol", d.steady.tol),
        max_iter: r.uint("steady_max_iter", d.steady.max_iter),
        ..d.steady
    };
    let s = Settings {
        run,
        init,
        steady,
        max_m: r.uint("max_m", d.max_m),
        sweep_ks: r.get("sweep_K", d.sweep_ks.clone(), parse_list),
        sweep_reference: r.get("sweep_reference", d.sweep_reference, |v| match v {
            "limit" => Ok(SweepReference::TransmissionLimit),
            "smallest" => Ok(SweepReference::SmallestK),
            _ => Err(format!("expected limit or smallest, got '{v}'")),
        }),
        rate_model: r.get("rate_model", d.rate_model, |v| match v {
            "auto" => Ok(RateModel::Auto),
            "power" => Ok(RateModel::Power),
            "exponential" => Ok(RateModel::Exponential),
            _ => Err(format!("expected auto, power or exponential, got '{v}'")),
        }),
        rate_floor: r.num("rate_floor", d.rate_floor),
        probe_radius: r.num("probe_radius", d.probe_radius),
        scan_range: (
            r.num("scan_min", d.scan_range.0),
            r.num("scan_max", d.scan_range.1),
        ),
        scan_points: r.uint("scan_points", d.scan_points),
    };
    let mut errors = r.errors;
    if let Err(e) = s.run.validate() {
        errors.push(e.to_string());
    }
    if let Err(e) = Mesh::build(s.run.geometry) {
        errors.push(e.to_string());
    }
    if s.sweep_ks.iter().any(|k| !(*k > 0.0)) {
        errors.push("sweep_K: K must be positive".into());
    }
    if !(s.scan_range.0 < s.scan_range.1) {
        errors.push("scan_min must be below scan_max".into());
    }
    if errors.is_empty() {
        Ok(s)
    } else {
        Err(Error::Config(errors.join("\n")))
    }
}

impl Settings {
    /// Canonical configuration text; parsing it gives back `self`.
    pub fn echo(&self) -> String {
        let mut lines: Vec<(&str, String)> = Vec::new();
        match self.run.geometry {
            Geometry::Disk {
                radius,
                n_r,
                n_theta,
            } => {
                lines.push(("geometry", "disk".into()));
                lines.push(("radius", radius.to_string()));
                lines.push(("n_r", n_r.to_string()));
                lines.push(("n_theta", n_theta.to_string()));
            }
            Geometry::Interval { length, n } => {
                lines.push(("geometry", "interval".into()));
                lines.push(("length", length.to_string()));
                lines.push(("n", n.to_string()));
            }
        }
        let run = &self.run;
        lines.extend([
            ("K", run.k.to_string()),
            ("bulk_potential", fmt_potential(run.spec.bulk())),
            ("surface_potential", fmt_potential(run.spec.surface())),
            ("coupling", fmt_coupling(run.spec.coupling())),
            ("scheme", run.scheme.name().to_string()),
            ("dt", run.dt.to_string()),
            ("dt_min", run.dt_min.to_string()),
            ("dt_max", run.dt_max.to_string()),
            ("T_final", run.t_final.to_string()),
            ("newton_tol", run.step.newton_tol.to_string()),
            ("max_newton_iter", run.step.max_newton_iter.to_string()),
            ("seed", run.seed.to_string()),
            ("sample_every", run.sample_every.to_string()),
            ("checkpoint_every", run.checkpoint_every.to_string()),
            ("init_mean", self.init.mean.to_string()),
            ("init_amplitude", self.init.amplitude.to_string()),
            ("init_smoothing", self.init.smoothing.to_string()),
            (
                "init_surface",
                match self.init.surface {
                    SurfaceInit::Random => "random",
                    SurfaceInit::MatchTrace => "match_trace",
                }
                .into(),
            ),
            ("steady_tol", self.steady.tol.to_string()),
            ("steady_max_iter", self.steady.max_iter.to_string()),
            ("max_m", self.max_m.to_string()),
            ("sweep_K", fmt_list(&self.sweep_ks)),
            (
                "sweep_reference",
                match self.sweep_reference {
                    SweepReference::TransmissionLimit => "limit",
                    SweepReference::SmallestK => "smallest",
                }
                .into(),
            ),
            (
                "rate_model",
                match self.rate_model {
                    RateModel::Auto => "auto",
                    RateModel::Power => "power",
                    RateModel::Exponential => "exponential",
                }
                .into(),
            ),
            ("rate_floor", self.rate_floor.to_string()),
            ("probe_radius", self.probe_radius.to_string()),
            ("scan_min", self.scan_range.0.to_string()),
            ("scan_max", self.scan_range.1.to_string()),
            ("scan_points", self.scan_points.to_string()),
        ]);
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Settings::echo`].
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.echo().as_bytes())[..8])
    }

    pub fn initial_state(&self) -> Result<FieldPair> {
        let mesh = Mesh::build(self.run.geometry)?;
        smoothed_random_initial(&mesh, &self.run.spec, &self.init)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bsac",
    version,
    about = "Bulk-surface Allen-Cahn flow with Robin coupling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Parent directory of the run directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory, overriding the timestamped name.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Integrate the flow and write the trajectory table.
    Simulate {
        /// Continue from a checkpoint file of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Solve the stationary problem by Newton's method.
    Steady,
    /// Eigenvalues and the coercivity scan at the stationary state.
    Spectrum,
    /// Robin relaxation sweep over `sweep_K`.
    Ksweep,
    /// Fit the decay rate of the distance to the limit.
    Ratefit,
    /// Gradient inequality probe and rate bound check.
    Probe,
    /// Check the analytic hypotheses on the nonlinearities.
    Validate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Steady => "steady",
            Command::Spectrum => "spectrum",
            Command::Ksweep => "ksweep",
            Command::Ratefit => "ratefit",
            Command::Probe => "probe",
            Command::Validate => "validate",
        }
    }
}

/// Where a finished run left its artifacts and whether its checks passed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub passed: bool,
    pub error: Option<String>,
}

struct Manifest {
    notes: Vec<String>,
    timings: Vec<(&'static str, f64)>,
    checks: Vec<(String, bool)>,
}

impl Manifest {
    fn check(&mut self, name: &str, ok: bool) {
        self.checks.push((name.to_string(), ok));
    }

    fn timed<T>(&mut self, phase: &'static str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let v = f();
        self.timings.push((phase, t.elapsed().as_secs_f64()));
        v
    }

    fn render(
        &self,
        cmd: &str,
        settings: &Settings,
        mesh_hash: &str,
        error: Option<&str>,
    ) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# bsac run manifest");
        let _ = writeln!(s, "# version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "# subcommand = {cmd}");
        let _ = writeln!(s, "# config_hash = {}", settings.hash());
        let _ = writeln!(s, "# mesh_hash = {mesh_hash}");
        for (p, t) in &self.timings {
            let _ = writeln!(s, "# time.{p} = {t:.3} s");
        }
        for (c, ok) in &self.checks {
            let _ = writeln!(s, "# check.{c} = {}", if *ok { "pass" } else { "fail" });
        }
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        match error {
            Some(e) => {
                for (i, line) in e.lines().enumerate() {
                    let _ = writeln!(s, "# {} {line}", if i == 0 { "error =" } else { "       " });
                }
                let _ = writeln!(s, "# status = error");
            }
            None => {
                let ok = self.checks.iter().all(|c| c.1);
                let _ = writeln!(s, "# status = {}", if ok { "ok" } else { "checks failed" });
            }
        }
        s.push_str(&settings.echo());
        s
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::write(dir.join(name), text).map_err(Error::from)
}

fn load_settings(config: Option<&Path>, set: &[String]) -> Result<Settings> {
    let mut text = match config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    // later assignments of a key replace earlier ones
    let mut overrides = BTreeMap::new();
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        overrides.insert(k.trim().to_string(), v.trim().to_string());
    }
    if !overrides.is_empty() {
        text = text
            .lines()
            .filter(|l| {
                let body = l.split('#').next().unwrap_or("");
                body.split_once('=')
                    .map_or(true, |(k, _)| !overrides.contains_key(k.trim()))
            })
            .map(|l| format!("{l}\n"))
            .collect();
        for (k, v) in &overrides {
            let _ = writeln!(text, "{k} = {v}");
        }
    }
    parse_config(&text)
}

fn make_run_dir(cli: &Cli, settings: &Settings) -> Result<PathBuf> {
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap_or_default();
            let base = format!(
                "{}-{:09}-{}",
                now.as_secs(),
                now.subsec_nanos(),
                settings.hash()
            );
            let mut d = cli.out.join(&base);
            let mut i = 1;
            while d.exists() {
                d = cli.out.join(format!("{base}-{i}"));
                i += 1;
            }
            d
        }
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn energy_monotone(record: &TrajectoryRecord) -> bool {
    record.samples.windows(2).all(|w| {
        let (a, b) = (w[0].energy.total, w[1].energy.total);
        b <= a + 1e-12 * a.abs().max(1.0)
    })
}

/// Rows of an earlier trajectory table up to and including `time`.
fn table_prefix(csv: &str, time: f64) -> Result<String> {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            if line != CSV_HEADER {
                return Err(Error::Input(
                    "trajectory table has an unexpected header".into(),
                ));
            }
            continue;
        }
        let t: f64 = line
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Input(format!("bad trajectory row '{line}'")))?;
        if t <= time {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn simulate(
    settings: &Settings,
    dir: &Path,
    resume: Option<&Path>,
    m: &mut Manifest,
) -> Result<()> {
    let (cp, prefix) = match resume {
        None => (None, String::new()),
        Some(path) => {
            let cp = Checkpoint::from_text(&std::fs::read_to_string(path)?)?;
            let table = path
                .parent()
                .unwrap_or(Path::new("."))
                .join("trajectory.csv");
            let csv = std::fs::read_to_string(&table)
                .map_err(|e| Error::Input(format!("cannot read {}: {e}", table.display())))?;
            m.notes.push(format!(
                "resumed_from = {} (step {})",
                path.display(),
                cp.accepted_steps
            ));
            let prefix = table_prefix(&csv, cp.time)?;
            (Some(cp), prefix)
        }
    };
    let init = m.timed("initial_data", || settings.initial_state())?;
    let mut write_cp = |c: &Checkpoint| {
        write(
            dir,
            &format!("checkpoint_{}.txt", c.accepted_steps),
            &c.to_text(),
        )
    };
    let result = m.timed("integrate", || {
        run_trajectory_with(&settings.run, init, cp, &mut write_cp)
    });
    let (record, err) = match result {
        Ok(r) => (r, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    let mut csv = record.to_csv();
    if !prefix.is_empty() {
        csv.insert_str(CSV_HEADER.len() + 1, &prefix);
    }
    write(dir, "trajectory.csv", &csv)?;
    m.notes
        .push(format!("accepted_steps = {}", record.accepted_steps));
    m.notes
        .push(format!("rejected_steps = {}", record.rejected_steps));
    m.notes.push(format!(
        "compatibility_residual = {:e}",
        record.compatibility
    ));
    if let Some(s) = record.samples.last() {
        m.notes
            .push(format!("final_energy = {:.17e}", s.energy.total));
    }
    m.check("energy_monotone", energy_monotone(&record));
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn steady_state(settings: &Settings, mesh: &Mesh, m: &mut Manifest) -> Result<EquilibriumState> {
    let guess = m.timed("initial_data", || settings.initial_state())?;
    m.timed("newton", || {
        solve_stationary_newton(
            mesh,
            &settings.run.spec,
            settings.run.k,
            &guess,
            &settings.steady,
        )
    })
}

fn equilibrium_text(eq: &EquilibriumState) -> String {
    format!(
        "residual = {:e}\niterations = {}\nstability = {:.12e}\n",
        eq.residual, eq.iterations, eq.stability
    )
}

fn flow_and_limit(
    settings: &Settings,
    mesh: &Mesh,
    m: &mut Manifest,
) -> Result<(TrajectoryRecord, EquilibriumState)> {
    let init = m.timed("initial_data", || settings.initial_state())?;
    let cfg = RunConfig {
        keep_states: true,
        checkpoint_every: 0,
        ..settings.run.clone()
    };
    let record = m
        .timed("integrate", || run_trajectory(&cfg, init))
        .map_err(|f| f.error)?;
    let eq = m.timed("newton", || {
        solve_stationary_newton(
            mesh,
            &cfg.spec,
            cfg.k,
            &record.final_state,
            &settings.steady,
        )
    })?;
    Ok((record, eq))
}

fn dispatch(cmd: &Command, settings: &Settings, dir: &Path, m: &mut Manifest) -> Result<()> {
    let mesh = Mesh::build(settings.run.geometry)?;
    let run = &settings.run;
    match cmd {
        Command::Simulate { resume } => simulate(settings, dir, resume.as_deref(), m),
        Command::Steady => {
            let eq = steady_state(settings, &mesh, m)?;
            write(dir, "steady.txt", &equilibrium_text(&eq))?;
            m.check("residual", eq.residual < settings.steady.tol);
            Ok(())
        }
        Command::Spectrum => {
            let eq = steady_state(settings, &mesh, m)?;
            let report = m.timed("eigen", || {
                compute_coercivity_margin(&mesh, &run.spec, run.k, &eq, settings.max_m)
            })?;
            write(
                dir,
                "spectrum.txt",
                &format!("{}{}", equilibrium_text(&eq), report.to_text()),
            )?;
            m.check(
                "coercivity_margin",
                report.m.is_some() && report.margin > 0.0,
            );
            Ok(())
        }
        Command::Ksweep => {
            let init = m.timed("initial_data", || settings.initial_state())?;
            let table = m.timed("sweep", || {
                k_sweep(run, &settings.sweep_ks, &init, settings.sweep_reference)
            })?;
            write(dir, "sweep.csv", &table.to_csv())?;
            for line in table.summary().lines() {
                m.notes.push(line.to_string());
            }
            m.check("gap_monotone", table.gap_monotone());
            Ok(())
        }
        Command::Ratefit => {
            let (record, eq) = flow_and_limit(settings, &mesh, m)?;
            let series: Vec<(f64, f64)> = distance_series(&mesh, &record, &eq.state, NormKind::W)?
                .into_iter()
                .filter(|p| p.1 >= settings.rate_floor)
                .collect();
            let fit = fit_decay_rate(&series, settings.rate_model)?;
            write(
                dir,
                "ratefit.txt",
                &format!(
                    "model = {:?}\nexponent = {:.12e}\nprefactor = {:.12e}\nr_squared = {:.12}\nwindow = [{}, {}]\n",
                    fit.model, fit.exponent, fit.prefactor, fit.r_squared, fit.window.0, fit.window.1
                ),
            )?;
            m.check("decaying", fit.exponent < 0.0);
            Ok(())
        }
        Command::Probe => {
            let (record, eq) = flow_and_limit(settings, &mesh, m)?;
            let probe = ls_probe(&mesh, &run.spec, run.k, &record, &eq, settings.probe_radius)?;
            let theta = probe.theta.min(0.45);
            let series = distance_series(&mesh, &record, &eq.state, NormKind::W)?;
            let start = probe.entry_time.ok_or_else(|| {
                Error::InsufficientData("trajectory never settles inside the probe radius".into())
            })?;
            let bound = check_rate_bound(&series, theta, start, settings.rate_floor)?;
            let mut text = format!(
                "slope = {:.12}\ntheta = {:.12}\ntheta_used = {theta}\nconstant = {:.12e}\nconstant_min = {:.12e}\n\
                 r_squared = {:.12}\ndecades = {:.3}\nvalid = {}\nbound_exponent = {:.12}\nbound_prefactor = {:.12e}\n\
                 bound_worst_ratio = {:.12}\ntail_start = {start}\nbound_checked = {}\nbound_majorized = {}\n# energy_gap dual_norm\n",
                probe.slope,
                probe.theta,
                probe.constant,
                probe.constant_min,
                probe.r_squared,
                probe.decades,
                probe.valid,
                bound.exponent,
                bound.prefactor,
                bound.worst_ratio,
                bound.checked,
                bound.majorized
            );
            for (g, d) in &probe.samples {
                let _ = writeln!(text, "{g:.17e} {d:.17e}");
            }
            write(dir, "probe.txt", &text)?;
            m.check("probe_valid", probe.valid);
            m.check("probe_pointwise", probe.holds_pointwise());
            m.check("rate_bound", bound.majorized);
            Ok(())
        }
        Command::Validate => {
            let report = m.timed("validate", || {
                validate_assumptions(&run.spec, settings.scan_range, settings.scan_points)
            });
            write(dir, "assumptions.txt", &report.to_text())?;
            m.check("assumptions", report.accepted);
            Ok(())
        }
    }
}

/// Parses settings, runs the subcommand in a fresh run directory and
/// writes the manifest. Configuration errors are returned before any
/// directory is created.
pub fn execute(cli: &Cli) -> Result<RunOutcome> {
    let config = match (&cli.config, &cli.command) {
        (Some(c), _) => Some(c.clone()),
        (None, Command::Simulate { resume: Some(p) }) => {
            Some(p.parent().unwrap_or(Path::new(".")).join("manifest.txt"))
        }
        _ => None,
    };
    let settings = load_settings(config.as_deref(), &cli.set)?;
    let dir = make_run_dir(cli, &settings)?;
    let mut manifest = Manifest {
        notes: Vec::new(),
        timings: Vec::new(),
        checks: Vec::new(),
    };
    let mesh_hash = Mesh::build(settings.run.geometry)?.hash();
    let result = dispatch(&cli.command, &settings, &dir, &mut manifest);
    let error = result.err().map(|e| e.to_string());
    write(
        &dir,
        "manifest.txt",
        &manifest.render(cli.command.name(), &settings, &mesh_hash, error.as_deref()),
    )?;
    let passed = error.is_none() && manifest.checks.iter().all(|c| c.1);
    Ok(RunOutcome { dir, passed, error })
}

/// Binary entry point; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(o) => {
            println!("{}", o.dir.display());
            if let Some(e) = &o.error {
                eprintln!("error: {e}");
            }
            if o.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let s = parse_config("").unwrap();
        assert_eq!(s, Settings::default());
        assert_eq!(s.run.geometry, Geometry::disk(1.0, 64, 128));
        assert_eq!(s.run.t_final, 50.0);
    }

    #[test]
    fn interval_defaults() {
        let s = parse_config("geometry = interval\n").unwrap();
        assert_eq!(s.run.geometry, Geometry::interval(1.0, 256));
        let e = parse_config("geometry = interval\nn_r = 8\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("n_r"), "{e}");
    }

    #[test]
    fn negative_k_rejected() {
        let e = parse_config("K = -1").unwrap_err().to_string();
        assert!(e.contains("K must be positive"), "{e}");
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = parse_config("T_finl = 3\n").unwrap_err().to_string();
        assert!(e.contains("'T_finl'") && e.contains("'T_final'"), "{e}");
    }

    #[test]
    fn errors_collected_together() {
        let e = parse_config("dt = abc\nseed = -3\nbulk_potential = quartic\nK = 0\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("dt: expected a finite number"), "{e}");
        assert!(e.contains("seed: expected a non-negative integer"), "{e}");
        assert!(e.contains("bulk_potential"), "{e}");
        assert!(e.contains("K must be positive"), "{e}");
        assert_eq!(e.matches('\n').count(), 3);
    }

    #[test]
    fn echo_round_trips() {
        let text = "# comment\nK = 0.001 # trailing\nn_r = 8\nn_theta = 16\n\
                    bulk_potential = scaled_double_well(0.1, 1)\ncoupling = tanh(0.5, 2)\n\
                    surface_potential = polynomial(0, 0.3, 0, 0.25)\nscheme = semi_implicit\n\
                    dt = 0.003\ninit_surface = match_trace\nsweep_K = 0.5, 0.25\nrate_model = power\n";
        let s = parse_config(text).unwrap();
        assert_eq!(s.run.k, 0.001);
        assert_eq!(s.run.scheme, Scheme::StabilizedSemiImplicit);
        let again = parse_config(&s.echo()).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.echo(), s.echo());
        assert_eq!(again.hash(), s.hash());
    }

    #[test]
    fn malformed_lines_reported() {
        let e = parse_config("just words\nK = 1\nK = 2\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(e.contains("more than once"), "{e}");
    }

    #[test]
    fn table_prefix_keeps_rows_up_to_time() {
        let csv = format!("{CSV_HEADER}\n0e0,1\n5e-1,2\n1e0,3\n");
        assert_eq!(table_prefix(&csv, 0.5).unwrap(), "0e0,1\n5e-1,2\n");
        assert!(table_prefix("time\n", 0.5).is_err());
    }
}
