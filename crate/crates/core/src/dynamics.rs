//! Time integration of the coupled gradient flow.
//!
//! Two schemes are provided. The fully implicit one is backward Euler solved
//! by Newton's method with the linearised operator as Jacobian; the
//! stabilised semi-implicit one treats the diffusion and the quadratic Robin
//! coupling implicitly and the potentials explicitly with a shift. In both,
//! a step whose energy rises is rejected and retried with half the step.
//!
//! [`solve_transmission_limit`] integrates the `K → 0` limit for affine
//! coupling, where the surface unknown is slaved to the bulk trace.

use crate::energy::{compute_energy, compute_gradient, EnergyReport, FieldPair};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, CsrMatrix, ProfileLdlt, TripletBuilder};
use crate::mesh::{Geometry, Mesh, NormalDerivativeMethod};
use crate::nonlinearity::{Coupling, NonlinearitySpec};
use crate::operators::{
    assemble_bulk_laplacian, assemble_linearized, bulk_dirichlet_matrix, check_k,
    surface_dirichlet_matrix, trace_row, DualVector, Norms,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    FullyImplicit,
    StabilizedSemiImplicit,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::FullyImplicit => "fully_implicit",
            Scheme::StabilizedSemiImplicit => "stabilized_semi_implicit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fully_implicit" | "implicit" => Some(Scheme::FullyImplicit),
            "stabilized_semi_implicit" | "semi_implicit" => Some(Scheme::StabilizedSemiImplicit),
            _ => None,
        }
    }
}

/// Per-step solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    /// Bound on the max-norm of the strong-form residual.
    pub newton_tol: f64,
    pub max_newton_iter: usize,
    /// Reject steps that raise the energy.
    pub reject_energy_increase: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            max_newton_iter: 30,
            reject_energy_increase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: Geometry,
    pub spec: NonlinearitySpec,
    pub k: f64,
    pub scheme: Scheme,
    pub dt: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub t_final: f64,
    pub step: StepOptions,
    pub seed: u64,
    /// Record a sample every this many accepted steps.
    pub sample_every: usize,
    /// Emit a checkpoint every this many accepted steps (0 disables).
    pub checkpoint_every: usize,
    /// Keep the state of every recorded sample.
    pub keep_states: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::disk(1.0, 64, 128),
            spec: NonlinearitySpec::double_well_affine(1.0, 0.0),
            k: 1.0,
            scheme: Scheme::FullyImplicit,
            dt: 0.01,
            dt_min: 1e-8,
            dt_max: 1.0,
            t_final: 50.0,
            step: StepOptions::default(),
            seed: 0,
            sample_every: 1,
            checkpoint_every: 50,
            keep_states: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k)?;
        if !(self.dt_min > 0.0
            && self.dt_min <= self.dt
            && self.dt <= self.dt_max
            && self.dt_max.is_finite())
        {
            return Err(Error::Config(format!(
                "time steps must satisfy 0 < dt_min <= dt <= dt_max (got {}, {}, {})",
                self.dt_min, self.dt, self.dt_max
            )));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config("T_final must be non-negative".into()));
        }
        if !(self.step.newton_tol > 0.0) || self.step.max_newton_iter == 0 {
            return Err(Error::Config(
                "Newton tolerance and iteration cap must be positive".into(),
            ));
        }
        if self.sample_every == 0 {
            return Err(Error::Config("sample_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub accepted: bool,
    pub newton_iterations: usize,
    pub residual: f64,
    pub energy_before: f64,
    pub energy_after: f64,
    /// Bulk and surface shifts of the semi-implicit scheme.
    pub stabilization: Option<(f64, f64)>,
}

/// One row of the trajectory table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub energy: EnergyReport,
    /// `‖δu/Δt‖_{L²(Ω)}`; at the first row, `‖W⁻¹ ∂_u E‖` instead.
    pub bulk_rate: f64,
    /// `‖δφ/Δt‖_{L²(Γ)}`; at the first row, `‖W_Γ⁻¹ ∂_φ E‖` instead.
    pub surface_rate: f64,
    /// `‖M(u, φ)‖_{V'}`.
    pub dual_norm: f64,
    pub dt: f64,
}

pub const CSV_HEADER: &str = "time,bulk_dirichlet,bulk_potential,surface_dirichlet,surface_potential,robin_penalty,total,bulk_rate,surface_rate,dual_norm,dt";

impl Sample {
    pub fn csv_row(&self) -> String {
        let e = &self.energy;
        format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.time,
            e.bulk_dirichlet,
            e.bulk_potential,
            e.surface_dirichlet,
            e.surface_potential,
            e.robin_penalty,
            e.total,
            self.bulk_rate,
            self.surface_rate,
            self.dual_norm,
            self.dt
        )
    }
}

/// Controller state needed to resume a run bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub time: f64,
    pub dt: f64,
    pub streak: usize,
    pub state: FieldPair,
}

fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_hex_f64(s: &str) -> Result<f64> {
    u64::from_str_radix(s.trim(), 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Input(format!("bad hex float '{s}'")))
}

impl Checkpoint {
    /// Plain text with every float written as its IEEE bit pattern.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# checkpoint\n");
        s.push_str(&format!("accepted_steps {}\n", self.accepted_steps));
        s.push_str(&format!("rejected_steps {}\n", self.rejected_steps));
        s.push_str(&format!("time {}\n", hex_f64(self.time)));
        s.push_str(&format!("dt {}\n", hex_f64(self.dt)));
        s.push_str(&format!("streak {}\n", self.streak));
        s.push_str(&format!("bulk {}\n", self.state.bulk.len()));
        for v in &self.state.bulk {
            s.push_str(&hex_f64(*v));
            s.push('\n');
        }
        s.push_str(&format!("surface {}\n", self.state.surface.len()));
        for v in &self.state.surface {
            s.push_str(&hex_f64(*v));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let accepted_steps = header(&mut lines, "accepted_steps")?.parse().map_err(bad)?;
        let rejected_steps = header(&mut lines, "rejected_steps")?.parse().map_err(bad)?;
        let time = parse_hex_f64(header(&mut lines, "time")?)?;
        let dt = parse_hex_f64(header(&mut lines, "dt")?)?;
        let streak = header(&mut lines, "streak")?.parse().map_err(bad)?;
        let nb: usize = header(&mut lines, "bulk")?.parse().map_err(bad)?;
        let bulk = values(&mut lines, nb)?;
        let ns: usize = header(&mut lines, "surface")?.parse().map_err(bad)?;
        let surface = values(&mut lines, ns)?;
        Ok(Self {
            accepted_steps,
            rejected_steps,
            time,
            dt,
            streak,
            state: FieldPair { bulk, surface },
        })
    }
}

fn bad(e: std::num::ParseIntError) -> Error {
    Error::Input(format!("bad integer in checkpoint: {e}"))
}

fn header<'a>(lines: &mut impl Iterator<Item = &'a str>, name: &str) -> Result<&'a str> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Input(format!("checkpoint ends before '{name}'")))?;
    match line.split_once(' ') {
        Some((key, val)) if key == name => Ok(val.trim()),
        _ => Err(Error::Input(format!(
            "checkpoint expected '{name}', found '{line}'"
        ))),
    }
}

fn values<'a>(lines: &mut impl Iterator<Item = &'a str>, n: usize) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| {
            lines
                .next()
                .ok_or_else(|| Error::Input("checkpoint truncated".into()))
                .and_then(parse_hex_f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub samples: Vec<Sample>,
    /// States at the sample times when `keep_states` is set.
    pub states: Vec<(f64, FieldPair)>,
    pub final_state: FieldPair,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// `‖K ∂_ν u₀ + u₀ - h(φ₀)‖_{L²(Γ)}` with the one-sided normal derivative.
    pub compatibility: f64,
    pub last_checkpoint: Option<Checkpoint>,
}

impl TrajectoryRecord {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.time).collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.energy.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for row in &self.samples {
            s.push_str(&row.csv_row());
            s.push('\n');
        }
        s
    }
}

/// A run that stopped early, with everything recorded up to that point.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: TrajectoryRecord,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} ({} samples recorded)",
            self.error,
            self.partial.samples.len()
        )
    }
}

impl std::error::Error for RunFailure {}

/// Backward-Euler gradient flow `G (x - x_n)/Δt + ∇E(x) = 0`.
trait ImplicitFlow {
    fn energy(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn hessian(&self, x: &[f64]) -> Result<CsrMatrix>;
    fn metric(&self) -> &CsrMatrix;
    /// Lumped weights used to express residuals in strong form.
    fn lumped(&self) -> &[f64];
}

struct NewtonOutcome {
    x: Vec<f64>,
    iterations: usize,
    residual: f64,
}

fn newton_step(
    flow: &dyn ImplicitFlow,
    x_old: &[f64],
    dt: f64,
    opts: &StepOptions,
) -> Result<NewtonOutcome> {
    let metric = flow.metric();
    let lumped = flow.lumped();
    let mut x = x_old.to_vec();
    let mut factor: Option<ProfileLdlt> = None;
    let mut prev = f64::INFINITY;
    let mut first = None;
    for it in 0..=opts.max_newton_iter {
        let diff: Vec<f64> = x.iter().zip(x_old).map(|(a, b)| (a - b) / dt).collect();
        let mut r = metric.mul_vec(&diff);
        for (ri, gi) in r.iter_mut().zip(flow.gradient(&x)?) {
            *ri += gi;
        }
        let res = r
            .iter()
            .zip(lumped)
            .fold(0.0f64, |m, (v, w)| m.max((v / w).abs()));
        if !res.is_finite() || res > 1e6 * first.unwrap_or(res).max(1.0) {
            return Err(Error::Numerical {
                message: "Newton iteration diverged".into(),
                residual: res,
            });
        }
        first.get_or_insert(res);
        if res < opts.newton_tol {
            return Ok(NewtonOutcome {
                x,
                iterations: it,
                residual: res,
            });
        }
        if it == opts.max_newton_iter {
            return Err(Error::Numerical {
                message: "Newton iteration did not converge".into(),
                residual: res,
            });
        }
        if factor.is_none() || res > 0.25 * prev {
            let jac = flow.hessian(&x)?.add_scaled(metric, 1.0 / dt);
            factor = Some(ProfileLdlt::factor_spd(&jac)?);
        }
        prev = res;
        let delta = factor.as_ref().expect("factored").solve(&r);
        let scale = 1.0 + max_abs(&x);
        for (xi, di) in x.iter_mut().zip(&delta) {
            *xi -= di;
        }
        if max_abs(&delta) < 1e-15 * scale {
            // the update is below round-off: the residual floor is reached
            return Ok(NewtonOutcome {
                x,
                iterations: it + 1,
                residual: res,
            });
        }
    }
    unreachable!()
}

struct RobinFlow<'a> {
    mesh: &'a Mesh,
    spec: &'a NonlinearitySpec,
    k: f64,
    metric: CsrMatrix,
    lumped: Vec<f64>,
}

impl<'a> RobinFlow<'a> {
    fn new(mesh: &'a Mesh, spec: &'a NonlinearitySpec, k: f64) -> Self {
        let mut lumped = mesh.bulk_weights().to_vec();
        lumped.extend_from_slice(mesh.surface_weights());
        Self {
            mesh,
            spec,
            k,
            metric: CsrMatrix::from_diagonal(&lumped),
            lumped,
        }
    }
}

impl ImplicitFlow for RobinFlow<'_> {
    fn energy(&self, x: &[f64]) -> Result<f64> {
        Ok(compute_energy(
            self.mesh,
            self.spec,
            &FieldPair::from_joint(self.mesh, x),
            self.k,
        )?
        .total)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(compute_gradient(
            self.mesh,
            self.spec,
            &FieldPair::from_joint(self.mesh, x),
            self.k,
        )?
        .to_joint())
    }
    fn hessian(&self, x: &[f64]) -> Result<CsrMatrix> {
        Ok(assemble_linearized(
            self.mesh,
            self.spec,
            &FieldPair::from_joint(self.mesh, x),
            self.k,
        )?
        .operator
        .matrix)
    }
    fn metric(&self) -> &CsrMatrix {
        &self.metric
    }
    fn lumped(&self) -> &[f64] {
        &self.lumped
    }
}

/// Largest `|g|` over `[lo, hi]` on a fine sampling including the ends.
fn sup_abs_on(lo: f64, hi: f64, g: impl Fn(f64) -> f64) -> f64 {
    let n = 64;
    (0..=n)
        .map(|i| g(lo + (hi - lo) * i as f64 / n as f64).abs())
        .fold(0.0, f64::max)
}

fn field_range(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        })
}

/// Reusable stepping machinery for one `(mesh, spec, K, scheme)`.
pub struct Stepper<'a> {
    mesh: &'a Mesh,
    spec: &'a NonlinearitySpec,
    k: f64,
    scheme: Scheme,
    opts: StepOptions,
    flow: RobinFlow<'a>,
    /// Implicit part of the semi-implicit scheme.
    semi_linear: Option<CsrMatrix>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        mesh: &'a Mesh,
        spec: &'a NonlinearitySpec,
        k: f64,
        scheme: Scheme,
        opts: StepOptions,
    ) -> Result<Self> {
        check_k(k)?;
        let semi_linear = match scheme {
            Scheme::FullyImplicit => None,
            Scheme::StabilizedSemiImplicit => {
                let bulk = assemble_bulk_laplacian(mesh, k)?.matrix;
                let surf = surface_dirichlet_matrix(mesh);
                Some(match spec.coupling().affine_parameters() {
                    // the whole Robin quadratic is constant: keep it implicit
                    Some((alpha, _)) => {
                        let ws = mesh.surface_weights();
                        let diag: Vec<f64> = ws.iter().map(|w| w * alpha * alpha / k).collect();
                        let mut coupling = Vec::new();
                        for (j, w) in ws.iter().enumerate() {
                            for (c, a) in trace_row(mesh, j) {
                                coupling.push((c, j, -w * alpha * a / k));
                            }
                        }
                        CsrMatrix::block(&bulk, &surf.add_diagonal(&diag), &coupling)
                    }
                    None => CsrMatrix::block(&bulk, &surf, &[]),
                })
            }
        };
        Ok(Self {
            mesh,
            spec,
            k,
            scheme,
            opts,
            flow: RobinFlow::new(mesh, spec, k),
            semi_linear,
        })
    }

    /// Shifts `(S_Ω, S_Γ)` for the semi-implicit scheme at `state`.
    pub fn stabilization(&self, state: &FieldPair) -> (f64, f64) {
        let (lo, hi) = field_range(&state.bulk);
        let s_bulk = sup_abs_on(lo, hi, |s| self.spec.f_prime(s));
        let (lo, hi) = field_range(&state.surface);
        let mut s_surf = sup_abs_on(lo, hi, |s| self.spec.f_surface_prime(s));
        if self.spec.coupling().affine_parameters().is_none() {
            let robin = (0..self.mesh.n_surface())
                .map(|j| {
                    let phi = state.surface[j];
                    let hp = self.spec.h_prime(phi);
                    let gap = self.mesh.trace_at(&state.bulk, j) - self.spec.h(phi);
                    (hp * hp - self.spec.h_second(phi) * gap).abs()
                })
                .fold(0.0, f64::max);
            s_surf += robin / self.k;
        }
        (s_bulk, s_surf)
    }

    pub fn step(&self, state: &FieldPair, dt: f64) -> Result<(FieldPair, StepDiagnostics)> {
        if !(dt > 0.0) {
            return Err(Error::Config("time step must be positive".into()));
        }
        state.check(self.mesh)?;
        let x_old = state.to_joint();
        let energy_before = self.flow.energy(&x_old)?;
        let (x_new, iterations, residual, stabilization) = match &self.semi_linear {
            None => {
                let out = newton_step(&self.flow, &x_old, dt, &self.opts)?;
                (out.x, out.iterations, out.residual, None)
            }
            Some(lin) => {
                let (sb, ss) = self.stabilization(state);
                let nb = self.mesh.n_bulk();
                let diag: Vec<f64> = self
                    .flow
                    .lumped
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * (1.0 / dt + if i < nb { sb } else { ss }))
                    .collect();
                let sys = lin.add_diagonal(&diag);
                let fac = ProfileLdlt::factor_spd(&sys)?;
                let g = self.flow.gradient(&x_old)?;
                let delta = fac.solve(&g);
                let x: Vec<f64> = x_old.iter().zip(&delta).map(|(a, d)| a - d).collect();
                (x, 1, 0.0, Some((sb, ss)))
            }
        };
        let energy_after = self.flow.energy(&x_new)?;
        let accepted = !self.opts.reject_energy_increase
            || energy_after <= energy_before + 1e-12 * energy_before.abs().max(1.0);
        Ok((
            FieldPair::from_joint(self.mesh, &x_new),
            StepDiagnostics {
                accepted,
                newton_iterations: iterations,
                residual,
                energy_before,
                energy_after,
                stabilization,
            },
        ))
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
}

/// One step of the chosen scheme. Newton failure or a non-positive Jacobian
/// is returned as an error; an energy increase yields `accepted = false`.
pub fn advance_step(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    state: &FieldPair,
    k: f64,
    dt: f64,
    scheme: Scheme,
    opts: &StepOptions,
) -> Result<(FieldPair, StepDiagnostics)> {
    Stepper::new(mesh, spec, k, scheme, *opts)?.step(state, dt)
}

/// Adaptive step controller shared by the Robin flow and the limit flow.
struct Controller<'c> {
    dt_min: f64,
    dt_max: f64,
    t_final: f64,
    sample_every: usize,
    checkpoint_every: usize,
    keep_states: bool,
    on_checkpoint: &'c mut dyn FnMut(&Checkpoint) -> Result<()>,
}

impl Controller<'_> {
    fn run(
        &mut self,
        start: Checkpoint,
        record: &mut TrajectoryRecord,
        step: &mut dyn FnMut(&FieldPair, f64) -> Result<(FieldPair, StepDiagnostics)>,
        sample: &mut dyn FnMut(&FieldPair, Option<(&FieldPair, f64)>, f64) -> Result<Sample>,
    ) -> Result<()> {
        let Checkpoint {
            mut accepted_steps,
            mut rejected_steps,
            mut time,
            mut dt,
            mut streak,
            mut state,
        } = start;
        let tiny = 1e-13 * self.t_final.max(1.0);
        let mut result = Ok(());
        while self.t_final - time > tiny {
            let h = dt.min(self.t_final - time);
            let outcome = step(&state, h);
            match outcome {
                Ok((next, diag)) if diag.accepted => {
                    let prev = std::mem::replace(&mut state, next);
                    time += h;
                    accepted_steps += 1;
                    streak += 1;
                    if streak >= 5 {
                        dt = (dt * 1.2).min(self.dt_max);
                        streak = 0;
                    }
                    let last = self.t_final - time <= tiny;
                    if accepted_steps % self.sample_every == 0 || last {
                        let row = sample(&state, Some((&prev, h)), time)?;
                        record.samples.push(row);
                        if self.keep_states {
                            record.states.push((time, state.clone()));
                        }
                    }
                    if self.checkpoint_every > 0 && accepted_steps % self.checkpoint_every == 0 {
                        let cp = Checkpoint {
                            accepted_steps,
                            rejected_steps,
                            time,
                            dt,
                            streak,
                            state: state.clone(),
                        };
                        (self.on_checkpoint)(&cp)?;
                        record.last_checkpoint = Some(cp);
                    }
                }
                Ok(_) | Err(Error::Numerical { .. }) | Err(Error::NotPositiveDefinite { .. }) => {
                    rejected_steps += 1;
                    streak = 0;
                    dt *= 0.5;
                    if dt < self.dt_min {
                        let reason = match outcome {
                            Err(e) => format!("time step fell below dt_min after failure: {e}"),
                            Ok(_) => {
                                "time step fell below dt_min after energy increase".to_string()
                            }
                        };
                        result = Err(Error::Aborted { time, reason });
                        break;
                    }
                }
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        record.final_state = state;
        record.accepted_steps = accepted_steps;
        record.rejected_steps = rejected_steps;
        result
    }
}

fn robin_sample(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    k: f64,
    norms: &Norms,
    state: &FieldPair,
    prev: Option<(&FieldPair, f64)>,
    time: f64,
) -> Result<Sample> {
    let energy = compute_energy(mesh, spec, state, k)?;
    let g = compute_gradient(mesh, spec, state, k)?;
    let (bulk_rate, surface_rate, dt) = match prev {
        Some((p, h)) => {
            let (a, b) = norms.h_parts_sq(&state.sub(p).scale(1.0 / h));
            (a.sqrt(), b.sqrt(), h)
        }
        None => {
            let strong = FieldPair {
                bulk: g
                    .bulk
                    .iter()
                    .zip(mesh.bulk_weights())
                    .map(|(v, w)| v / w)
                    .collect(),
                surface: g
                    .surface
                    .iter()
                    .zip(mesh.surface_weights())
                    .map(|(v, w)| v / w)
                    .collect(),
            };
            let (a, b) = norms.h_parts_sq(&strong);
            (a.sqrt(), b.sqrt(), 0.0)
        }
    };
    Ok(Sample {
        time,
        energy,
        bulk_rate,
        surface_rate,
        dual_norm: norms.dual_norm(&g)?,
        dt,
    })
}

/// `‖K ∂_ν u + u - h(φ)‖_{L²(Γ)}` with the one-sided normal derivative.
pub fn compatibility_residual(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    state: &FieldPair,
    k: f64,
) -> Result<f64> {
    let dn = mesh.normal_derivative(
        spec,
        &state.bulk,
        &state.surface,
        k,
        NormalDerivativeMethod::OneSided,
    )?;
    let tr = mesh.boundary_trace(&state.bulk)?;
    Ok(mesh
        .surface_weights()
        .iter()
        .enumerate()
        .map(|(j, w)| w * (k * dn[j] + tr[j] - spec.h(state.surface[j])).powi(2))
        .sum::<f64>()
        .sqrt())
}

fn empty_record(initial: &FieldPair) -> TrajectoryRecord {
    TrajectoryRecord {
        samples: Vec::new(),
        states: Vec::new(),
        final_state: initial.clone(),
        accepted_steps: 0,
        rejected_steps: 0,
        compatibility: 0.0,
        last_checkpoint: None,
    }
}

/// Integrates from `initial` to `T_final`. On abort the partial record is
/// returned inside the error.
pub fn run_trajectory(
    config: &RunConfig,
    initial: FieldPair,
) -> std::result::Result<TrajectoryRecord, RunFailure> {
    run_trajectory_with(config, initial, None, &mut |_| Ok(()))
}

/// As [`run_trajectory`], optionally resuming from a checkpoint and passing
/// every new checkpoint to `on_checkpoint`. When resuming, the record holds
/// only the samples after the checkpoint.
pub fn run_trajectory_with(
    config: &RunConfig,
    initial: FieldPair,
    resume: Option<Checkpoint>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> std::result::Result<TrajectoryRecord, RunFailure> {
    let mut record = empty_record(&initial);
    let fail = |error, partial| RunFailure { error, partial };
    if let Err(e) = config.validate() {
        return Err(fail(e, record));
    }
    let mesh = match Mesh::build(config.geometry) {
        Ok(m) => m,
        Err(e) => return Err(fail(e, record)),
    };
    let setup = (|| -> Result<(Stepper, Norms, f64)> {
        initial.check(&mesh)?;
        let stepper = Stepper::new(&mesh, &config.spec, config.k, config.scheme, config.step)?;
        let norms = Norms::new(&mesh)?;
        let compat = compatibility_residual(&mesh, &config.spec, &initial, config.k)?;
        Ok((stepper, norms, compat))
    })();
    let (stepper, norms, compat) = match setup {
        Ok(v) => v,
        Err(e) => return Err(fail(e, record)),
    };
    record.compatibility = compat;
    let mut sample = |s: &FieldPair, prev: Option<(&FieldPair, f64)>, t: f64| {
        robin_sample(&mesh, &config.spec, config.k, &norms, s, prev, t)
    };
    let start = match resume {
        Some(cp) => cp,
        None => {
            match sample(&initial, None, 0.0) {
                Ok(row) => record.samples.push(row),
                Err(e) => return Err(fail(e, record)),
            }
            if config.keep_states {
                record.states.push((0.0, initial.clone()));
            }
            Checkpoint {
                accepted_steps: 0,
                rejected_steps: 0,
                time: 0.0,
                dt: config.dt,
                streak: 0,
                state: initial,
            }
        }
    };
    if let Err(e) = start.state.check(&mesh) {
        return Err(fail(e, record));
    }
    let mut controller = Controller {
        dt_min: config.dt_min,
        dt_max: config.dt_max,
        t_final: config.t_final,
        sample_every: config.sample_every,
        checkpoint_every: config.checkpoint_every,
        keep_states: config.keep_states,
        on_checkpoint,
    };
    let mut step = |s: &FieldPair, h: f64| stepper.step(s, h);
    match controller.run(start, &mut record, &mut step, &mut sample) {
        Ok(()) => Ok(record),
        Err(e) => Err(fail(e, record)),
    }
}

/// How the surface component of random initial data is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceInit {
    /// Independent smoothed noise.
    Random,
    /// `φ` with `h(φ)` equal to the bulk trace (affine `h`), else `φ = u|_Γ`.
    MatchTrace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialData {
    pub seed: u64,
    pub mean: f64,
    /// Max-norm of the fluctuation around the mean.
    pub amplitude: f64,
    /// Diffusion time of the low-pass filter.
    pub smoothing: f64,
    pub surface: SurfaceInit,
}

impl Default for InitialData {
    fn default() -> Self {
        Self {
            seed: 0,
            mean: 0.0,
            amplitude: 0.5,
            smoothing: 0.01,
            surface: SurfaceInit::Random,
        }
    }
}

fn smooth(stiff: &CsrMatrix, weights: &[f64], field: &mut Vec<f64>, tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Ok(());
    }
    let sys = stiff.scaled(tau).add_diagonal(weights);
    let fac = ProfileLdlt::factor_spd(&sys)?;
    for _ in 0..2 {
        let rhs: Vec<f64> = field.iter().zip(weights).map(|(v, w)| v * w).collect();
        *field = fac.solve(&rhs);
    }
    Ok(())
}

fn normalize(field: &mut [f64], weights: &[f64], mean: f64, amplitude: f64) {
    let total: f64 = weights.iter().sum();
    let avg = field.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let spread = field.iter().fold(0.0f64, |m, v| m.max((v - avg).abs()));
    let s = if spread > 0.0 {
        amplitude / spread
    } else {
        0.0
    };
    for v in field.iter_mut() {
        *v = mean + s * (*v - avg);
    }
}

/// Low-pass filtered uniform noise, shifted to the requested mean and
/// scaled to the requested amplitude. Deterministic in the seed.
pub fn smoothed_random_initial(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    init: &InitialData,
) -> Result<FieldPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let mut bulk: Vec<f64> = (0..mesh.n_bulk())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let mut surface: Vec<f64> = (0..mesh.n_surface())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    smooth(
        &bulk_dirichlet_matrix(mesh),
        mesh.bulk_weights(),
        &mut bulk,
        init.smoothing,
    )?;
    normalize(&mut bulk, mesh.bulk_weights(), init.mean, init.amplitude);
    match init.surface {
        SurfaceInit::Random => {
            smooth(
                &surface_dirichlet_matrix(mesh),
                mesh.surface_weights(),
                &mut surface,
                init.smoothing,
            )?;
            normalize(
                &mut surface,
                mesh.surface_weights(),
                init.mean,
                init.amplitude,
            );
        }
        SurfaceInit::MatchTrace => {
            let tr = mesh.boundary_trace(&bulk)?;
            surface = match spec.coupling().affine_parameters() {
                Some((a, b)) if a != 0.0 => tr.iter().map(|t| (t - b) / a).collect(),
                _ => tr,
            };
        }
    }
    Ok(FieldPair { bulk, surface })
}

/// Limit flow with `u|_Γ = α φ + η` imposed by elimination of `φ`.
struct LimitFlow<'a> {
    mesh: &'a Mesh,
    spec: &'a NonlinearitySpec,
    alpha: f64,
    eta: f64,
    bulk_stiff: CsrMatrix,
    surface_stiff: CsrMatrix,
    metric: CsrMatrix,
}

impl<'a> LimitFlow<'a> {
    fn new(mesh: &'a Mesh, spec: &'a NonlinearitySpec, alpha: f64, eta: f64) -> Self {
        let mut b = TripletBuilder::new(mesh.n_bulk());
        for (i, &w) in mesh.bulk_weights().iter().enumerate() {
            b.add(i, i, w);
        }
        for (j, &w) in mesh.surface_weights().iter().enumerate() {
            b.add_outer(&trace_row(mesh, j), w / (alpha * alpha));
        }
        Self {
            mesh,
            spec,
            alpha,
            eta,
            bulk_stiff: bulk_dirichlet_matrix(mesh),
            surface_stiff: surface_dirichlet_matrix(mesh),
            metric: b.build(),
        }
    }

    fn surface_of(&self, u: &[f64]) -> Vec<f64> {
        (0..self.mesh.n_surface())
            .map(|j| (self.mesh.trace_at(u, j) - self.eta) / self.alpha)
            .collect()
    }

    fn fields(&self, u: &[f64]) -> FieldPair {
        FieldPair {
            bulk: u.to_vec(),
            surface: self.surface_of(u),
        }
    }

    fn report(&self, u: &[f64]) -> Result<EnergyReport> {
        let mut e = compute_energy(self.mesh, self.spec, &self.fields(u), 1.0)?;
        e.total -= e.robin_penalty;
        e.robin_penalty = 0.0;
        Ok(e)
    }
}

impl ImplicitFlow for LimitFlow<'_> {
    fn energy(&self, u: &[f64]) -> Result<f64> {
        Ok(self.report(u)?.total)
    }

    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        let phi = self.surface_of(u);
        let mut g = self.bulk_stiff.mul_vec(u);
        for ((gi, w), &v) in g.iter_mut().zip(self.mesh.bulk_weights()).zip(u) {
            *gi += w * self.spec.f(v);
        }
        let gs = self.surface_stiff.mul_vec(&phi);
        for (j, &w) in self.mesh.surface_weights().iter().enumerate() {
            let s = (gs[j] + w * self.spec.f_surface(phi[j])) / self.alpha;
            for (c, a) in trace_row(self.mesh, j) {
                g[c] += s * a;
            }
        }
        Ok(g)
    }

    fn hessian(&self, u: &[f64]) -> Result<CsrMatrix> {
        let phi = self.surface_of(u);
        let mut b = TripletBuilder::new(self.mesh.n_bulk());
        for e in self.mesh.bulk_edges() {
            b.add_link(e.a, e.b, e.coeff);
        }
        for (i, (&w, &v)) in self.mesh.bulk_weights().iter().zip(u).enumerate() {
            b.add(i, i, w * self.spec.f_prime(v));
        }
        let ia = 1.0 / self.alpha;
        for e in self.mesh.surface_edges() {
            let ta = trace_row(self.mesh, e.a);
            let tb = trace_row(self.mesh, e.b);
            let diff = [
                (ta[0].0, ia * ta[0].1),
                (ta[1].0, ia * ta[1].1),
                (tb[0].0, -ia * tb[0].1),
                (tb[1].0, -ia * tb[1].1),
            ];
            b.add_outer(&diff, e.coeff);
        }
        for (j, &w) in self.mesh.surface_weights().iter().enumerate() {
            b.add_outer(
                &trace_row(self.mesh, j),
                w * self.spec.f_surface_prime(phi[j]) * ia * ia,
            );
        }
        Ok(b.build())
    }

    fn metric(&self) -> &CsrMatrix {
        &self.metric
    }

    fn lumped(&self) -> &[f64] {
        self.mesh.bulk_weights()
    }
}

/// Time-step policy of the limit solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPolicy {
    pub dt: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub step: StepOptions,
    pub sample_every: usize,
    pub keep_states: bool,
}

impl StepPolicy {
    /// Constant step `dt`.
    pub fn fixed(dt: f64) -> Self {
        Self {
            dt,
            dt_min: dt,
            dt_max: dt,
            step: StepOptions::default(),
            sample_every: 1,
            keep_states: true,
        }
    }
}

/// Integrates the limit system `u|_Γ = α φ + η`, surface equation with the
/// flux `α ∂_ν u`. The surface component of `initial` is discarded and
/// recomputed from the bulk trace, and the same holds at every step.
pub fn solve_transmission_limit(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    initial: &FieldPair,
    t_final: f64,
    policy: &StepPolicy,
) -> std::result::Result<TrajectoryRecord, RunFailure> {
    let mut record = empty_record(initial);
    let fail = |error, partial| RunFailure { error, partial };
    let (alpha, eta) = match spec.coupling() {
        Coupling::Affine { slope, offset } if *slope != 0.0 => (*slope, *offset),
        Coupling::Affine { .. } => {
            return Err(fail(
                Error::Config("transmission limit needs a nonzero slope".into()),
                record,
            ))
        }
        _ => {
            return Err(fail(
                Error::Config("transmission limit is only defined for affine coupling".into()),
                record,
            ))
        }
    };
    if let Err(e) = initial.check(mesh) {
        return Err(fail(e, record));
    }
    let flow = LimitFlow::new(mesh, spec, alpha, eta);
    let norms = match Norms::new(mesh) {
        Ok(n) => n,
        Err(e) => return Err(fail(e, record)),
    };
    let opts = policy.step;
    let mut sample = |s: &FieldPair, prev: Option<(&FieldPair, f64)>, t: f64| -> Result<Sample> {
        let energy = flow.report(&s.bulk)?;
        let g = flow.gradient(&s.bulk)?;
        let (bulk_rate, surface_rate, dt) = match prev {
            Some((p, h)) => {
                let (a, b) = norms.h_parts_sq(&s.sub(p).scale(1.0 / h));
                (a.sqrt(), b.sqrt(), h)
            }
            None => (f64::NAN, f64::NAN, 0.0),
        };
        let dual = DualVector {
            bulk: g,
            surface: vec![0.0; mesh.n_surface()],
        };
        Ok(Sample {
            time: t,
            energy,
            bulk_rate,
            surface_rate,
            dual_norm: norms.dual_norm(&dual)?,
            dt,
        })
    };
    let start_state = flow.fields(&initial.bulk);
    match sample(&start_state, None, 0.0) {
        Ok(row) => record.samples.push(row),
        Err(e) => return Err(fail(e, record)),
    }
    if policy.keep_states {
        record.states.push((0.0, start_state.clone()));
    }
    let mut step = |s: &FieldPair, h: f64| -> Result<(FieldPair, StepDiagnostics)> {
        let before = flow.energy(&s.bulk)?;
        let out = newton_step(&flow, &s.bulk, h, &opts)?;
        let after = flow.energy(&out.x)?;
        Ok((
            flow.fields(&out.x),
            StepDiagnostics {
                accepted: !opts.reject_energy_increase
                    || after <= before + 1e-12 * before.abs().max(1.0),
                newton_iterations: out.iterations,
                residual: out.residual,
                energy_before: before,
                energy_after: after,
                stabilization: None,
            },
        ))
    };
    let mut sink = |_: &Checkpoint| Ok(());
    let mut controller = Controller {
        dt_min: policy.dt_min,
        dt_max: policy.dt_max,
        t_final,
        sample_every: policy.sample_every.max(1),
        checkpoint_every: 0,
        keep_states: policy.keep_states,
        on_checkpoint: &mut sink,
    };
    let start = Checkpoint {
        accepted_steps: 0,
        rejected_steps: 0,
        time: 0.0,
        dt: policy.dt,
        streak: 0,
        state: start_state,
    };
    match controller.run(start, &mut record, &mut step, &mut sample) {
        Ok(()) => Ok(record),
        Err(e) => Err(fail(e, record)),
    }
}
