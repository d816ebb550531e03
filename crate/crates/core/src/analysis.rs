//! Post-processing of trajectories: decay-rate fits, the gradient
//! inequality probe, the Robin relaxation sweep and the limit-set check.

use crate::dynamics::{
    run_trajectory, solve_transmission_limit, RunConfig, StepPolicy, TrajectoryRecord,
};
use crate::energy::{compute_energy, compute_gradient, FieldPair};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::nonlinearity::NonlinearitySpec;
use crate::operators::Norms;
use crate::steady_spectral::EquilibriumState;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateModel {
    /// `v ≈ C (1 + t)^a`.
    Power,
    /// `v ≈ C e^{a t}`.
    Exponential,
    /// Whichever of the two fits better.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub model: RateModel,
    /// `a` in the model formula.
    pub exponent: f64,
    pub prefactor: f64,
    /// Coefficient of determination in log coordinates, clamped to `[0, 1]`.
    pub r_squared: f64,
    pub window: (f64, f64),
}

/// Ordinary least squares `y ≈ b + a x`; returns `(a, b, R²)`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let r2 = if syy > 0.0 {
        let sse: f64 = x.iter().zip(y).map(|(u, v)| (v - b - a * u).powi(2)).sum();
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    (a, b, r2)
}

pub fn fit_decay_rate(series: &[(f64, f64)], model: RateModel) -> Result<RateFit> {
    if series.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs at least 10 samples, got {}",
            series.len()
        )));
    }
    if let Some((t, v)) = series.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Input(format!(
            "non-positive value {v} at t = {t} in fit window"
        )));
    }
    let logs: Vec<f64> = series.iter().map(|(_, v)| v.ln()).collect();
    let window = (series[0].0, series[series.len() - 1].0);
    let fit = |m: RateModel| {
        let x: Vec<f64> = series
            .iter()
            .map(|(t, _)| {
                if m == RateModel::Power {
                    (1.0 + t).ln()
                } else {
                    *t
                }
            })
            .collect();
        let (a, b, r2) = linear_regression(&x, &logs);
        RateFit {
            model: m,
            exponent: a,
            prefactor: b.exp(),
            r_squared: r2,
            window,
        }
    };
    Ok(match model {
        RateModel::Auto => {
            let p = fit(RateModel::Power);
            let e = fit(RateModel::Exponential);
            if e.r_squared >= p.r_squared {
                e
            } else {
                p
            }
        }
        m => fit(m),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    H,
    V,
    W,
}

/// Distance of every stored state to `target` in the chosen norm.
pub fn distance_series(
    mesh: &Mesh,
    record: &TrajectoryRecord,
    target: &FieldPair,
    norm: NormKind,
) -> Result<Vec<(f64, f64)>> {
    let norms = Norms::new(mesh)?;
    record
        .states
        .iter()
        .map(|(t, s)| {
            s.check(mesh)?;
            let d = s.sub(target);
            let v = match norm {
                NormKind::H => norms.h_norm(&d),
                NormKind::V => norms.v_norm(&d),
                NormKind::W => norms.w_norm(&d),
            };
            Ok((*t, v))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsProbeResult {
    /// `(|E - E_*|, ‖M‖_{V'})` for the in-window samples.
    pub samples: Vec<(f64, f64)>,
    /// Log-log slope, an estimate of `1 - θ`.
    pub slope: f64,
    pub theta: f64,
    /// `c` in `‖M‖ ≈ c |E - E_*|^{slope}`.
    pub constant: f64,
    /// Smallest `‖M‖ / |E - E_*|^{slope}` over the samples.
    pub constant_min: f64,
    pub r_squared: f64,
    pub radius: f64,
    /// First stored time from which every later state lies within `radius`.
    pub entry_time: Option<f64>,
    pub decades: f64,
    /// At least two decades of `|E - E_*|` and a slope in `(0, 1]`.
    pub valid: bool,
}

impl LsProbeResult {
    /// `‖M‖ ≥ c |E - E_*|^{1-θ}` on the samples with `c` half the fitted one.
    pub fn holds_pointwise(&self) -> bool {
        self.constant_min >= 0.5 * self.constant
    }
}

/// Regresses `log ‖M‖_{V'}` on `log |E - E_*|` over the stored states
/// within `radius` (V norm) of the equilibrium. Samples at the round-off
/// floor of the energy gap are skipped.
pub fn ls_probe(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    k: f64,
    trajectory: &TrajectoryRecord,
    equilibrium: &EquilibriumState,
    radius: f64,
) -> Result<LsProbeResult> {
    let norms = Norms::new(mesh)?;
    let e_star = compute_energy(mesh, spec, &equilibrium.state, k)?.total;
    let floor = 1e-12 * e_star.abs().max(1.0);
    let mut samples = Vec::new();
    let mut entry_time = None;
    for (t, s) in &trajectory.states {
        if norms.v_norm(&s.sub(&equilibrium.state)) >= radius {
            entry_time = None;
            continue;
        }
        entry_time.get_or_insert(*t);
        let gap = compute_energy(mesh, spec, s, k)?.total - e_star;
        let m = norms.dual_norm(&compute_gradient(mesh, spec, s, k)?)?;
        if gap > floor && m > 0.0 {
            samples.push((gap, m));
        }
    }
    if samples.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "gradient inequality probe needs 10 samples above the energy floor inside the window, got {}",
            samples.len()
        )));
    }
    let x: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let (slope, icpt, r2) = linear_regression(&x, &y);
    let constant = icpt.exp();
    let constant_min = samples
        .iter()
        .map(|(g, m)| m / g.powf(slope))
        .fold(f64::INFINITY, f64::min);
    let (lo, hi) = samples.iter().fold((f64::INFINITY, 0.0f64), |(a, b), s| {
        (a.min(s.0), b.max(s.0))
    });
    let decades = (hi / lo).log10();
    Ok(LsProbeResult {
        samples,
        slope,
        theta: 1.0 - slope,
        constant,
        constant_min,
        r_squared: r2,
        radius,
        entry_time,
        decades,
        valid: decades >= 2.0 && slope > 0.0 && slope <= 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBoundCheck {
    pub theta: f64,
    /// `-θ / (1 - 2θ)`.
    pub exponent: f64,
    pub prefactor: f64,
    /// Largest `d(t) / (C (1+t)^{exponent})` over the checked samples.
    pub worst_ratio: f64,
    pub checked: usize,
    pub majorized: bool,
}

/// Checks `d(t) ≤ C (1+t)^{-θ/(1-2θ)}` on the samples from `t_start` on,
/// with `C` fixed by the first such sample. Samples with `d` below `floor`
/// are ignored. Requires `0 < θ < ½`.
pub fn check_rate_bound(
    series: &[(f64, f64)],
    theta: f64,
    t_start: f64,
    floor: f64,
) -> Result<RateBoundCheck> {
    if !(theta > 0.0 && theta < 0.5) {
        return Err(Error::Input(format!(
            "rate bound needs 0 < θ < 1/2, got {theta}"
        )));
    }
    let exponent = -theta / (1.0 - 2.0 * theta);
    let tail: Vec<(f64, f64)> = series
        .iter()
        .cloned()
        .filter(|&(t, d)| t >= t_start && d >= floor)
        .collect();
    let (t0, d0) = *tail
        .first()
        .ok_or_else(|| Error::InsufficientData("no samples above the floor in the tail".into()))?;
    let prefactor = d0 / (1.0 + t0).powf(exponent);
    let worst_ratio = tail
        .iter()
        .map(|&(t, d)| d / (prefactor * (1.0 + t).powf(exponent)))
        .fold(0.0, f64::max);
    Ok(RateBoundCheck {
        theta,
        exponent,
        prefactor,
        worst_ratio,
        checked: tail.len(),
        majorized: worst_ratio <= 1.0 + 1e-12,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepReference {
    TransmissionLimit,
    SmallestK,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub k: f64,
    /// `max_t ‖u_K - u‖_{L²(Ω)} + ‖φ_K - φ‖_{L²(Γ)}`.
    pub gap: f64,
    /// `max_t ‖u_K|_Γ - h(φ_K)‖_{L²(Γ)}`.
    pub mismatch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub reference: SweepReference,
    pub rows: Vec<SweepRow>,
    /// Log-log slope of the gap against `K` (rows with positive gap).
    pub gap_slope: f64,
    pub mismatch_slope: f64,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("K,gap,mismatch\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.17e},{:.17e},{:.17e}\n",
                r.k, r.gap, r.mismatch
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "reference = {:?}\ngap_slope = {}\nmismatch_slope = {}\n",
            self.reference, self.gap_slope, self.mismatch_slope
        )
    }

    /// Gap non-increasing as `K` decreases.
    pub fn gap_monotone(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.k.total_cmp(&b.k));
        rows.windows(2).all(|w| w[0].gap <= w[1].gap)
    }
}

fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .cloned()
        .filter(|p| p.0 > 0.0 && p.1 > 0.0)
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    linear_regression(&x, &y).0
}

fn same_grid(a: &[(f64, FieldPair)], b: &[(f64, FieldPair)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0)
}

/// Runs the Robin flow for every `K` on a shared fixed time grid (in
/// parallel) and measures the distance to the reference solution.
pub fn k_sweep(
    base: &RunConfig,
    ks: &[f64],
    initial: &FieldPair,
    reference: SweepReference,
) -> Result<SweepTable> {
    if ks.is_empty() {
        return Err(Error::Config("K sweep needs at least one K".into()));
    }
    if base.dt_min != base.dt_max || base.dt != base.dt_max {
        return Err(Error::Config(
            "K sweep needs a fixed time step (dt = dt_min = dt_max)".into(),
        ));
    }
    let mesh = Mesh::build(base.geometry)?;
    let norms = Norms::new(&mesh)?;
    let runs: Vec<Result<TrajectoryRecord>> = ks
        .par_iter()
        .map(|&k| {
            let cfg = RunConfig {
                k,
                keep_states: true,
                checkpoint_every: 0,
                sample_every: 1,
                ..base.clone()
            };
            run_trajectory(&cfg, initial.clone()).map_err(|f| f.error)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let reference_states = match reference {
        SweepReference::TransmissionLimit => {
            let policy = StepPolicy {
                step: base.step,
                ..StepPolicy::fixed(base.dt)
            };
            solve_transmission_limit(&mesh, &base.spec, initial, base.t_final, &policy)
                .map_err(|f| f.error)?
                .states
        }
        SweepReference::SmallestK => {
            let i = (0..ks.len())
                .min_by(|&a, &b| ks[a].total_cmp(&ks[b]))
                .expect("non-empty");
            runs[i].states.clone()
        }
    };
    let mut rows = Vec::with_capacity(ks.len());
    for (&k, run) in ks.iter().zip(&runs) {
        if !same_grid(&run.states, &reference_states) {
            return Err(Error::Config(format!(
                "time grid of the K = {k} run differs from the reference"
            )));
        }
        let mut gap = 0.0f64;
        let mut mismatch = 0.0f64;
        for ((_, s), (_, r)) in run.states.iter().zip(&reference_states) {
            let (a, b) = norms.h_parts_sq(&s.sub(r));
            gap = gap.max(a.sqrt() + b.sqrt());
            let tr = mesh.boundary_trace(&s.bulk)?;
            let mm: f64 = mesh
                .surface_weights()
                .iter()
                .zip(tr.iter().zip(&s.surface))
                .map(|(w, (t, p))| w * (t - base.spec.h(*p)).powi(2))
                .sum();
            mismatch = mismatch.max(mm.sqrt());
        }
        rows.push(SweepRow { k, gap, mismatch });
    }
    let gap_slope = loglog_slope(&rows.iter().map(|r| (r.k, r.gap)).collect::<Vec<_>>());
    let mismatch_slope = loglog_slope(&rows.iter().map(|r| (r.k, r.mismatch)).collect::<Vec<_>>());
    Ok(SweepTable {
        reference,
        rows,
        gap_slope,
        mismatch_slope,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub times: Vec<f64>,
    pub h_distances: Vec<Vec<f64>>,
    pub v_distances: Vec<Vec<f64>>,
    /// `‖(δu/Δt, δφ/Δt)‖_H` at the last recorded sample.
    pub tail_rate: f64,
    pub threshold: f64,
    pub singleton_consistent: bool,
}

/// Pairwise snapshot distances and the verdict: consecutive distances and
/// distances to the last snapshot must both be non-increasing, and the
/// tail time-derivative norm must fall below `threshold`.
pub fn convergence_diagnostic(
    mesh: &Mesh,
    trajectory: &TrajectoryRecord,
    snapshot_times: &[f64],
    threshold: f64,
) -> Result<ConvergenceReport> {
    if snapshot_times.len() < 3 {
        return Err(Error::Input(
            "convergence check needs at least three snapshots".into(),
        ));
    }
    let norms = Norms::new(mesh)?;
    let snaps = snapshot_times
        .iter()
        .map(|&t| {
            trajectory
                .states
                .iter()
                .find(|(s, _)| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
                .map(|(_, x)| x)
                .ok_or_else(|| Error::Input(format!("no stored state at t = {t}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = snaps.len();
    let mut h = vec![vec![0.0; n]; n];
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d = snaps[i].sub(snaps[j]);
            h[i][j] = norms.h_norm(&d);
            v[i][j] = norms.v_norm(&d);
        }
    }
    let slack = 1e-14;
    let consecutive_ok = (0..n - 2).all(|i| h[i + 1][i + 2] <= h[i][i + 1] + slack);
    let to_last_ok = (0..n - 1).all(|i| i + 1 == n - 1 || h[i + 1][n - 1] <= h[i][n - 1] + slack);
    let tail_rate = trajectory
        .samples
        .last()
        .map(|s| s.bulk_rate.hypot(s.surface_rate))
        .unwrap_or(f64::INFINITY);
    Ok(ConvergenceReport {
        times: snapshot_times.to_vec(),
        h_distances: h,
        v_distances: v,
        tail_rate,
        threshold,
        singleton_consistent: consecutive_ok && to_last_ok && tail_rate < threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{smoothed_random_initial, InitialData, Sample, SurfaceInit};
    use crate::energy::EnergyReport;
    use crate::mesh::Geometry;
    use crate::steady_spectral::{solve_stationary_newton, NewtonOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_synthetic_power_and_exponential_laws() {
        let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.2).collect();
        let p: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| (t, 3.0 * (1.0 + t).powf(-2.0)))
            .collect();
        let fp = fit_decay_rate(&p, RateModel::Auto).unwrap();
        assert_eq!(fp.model, RateModel::Power);
        assert!((fp.exponent + 2.0).abs() < 1e-3);
        assert!((fp.prefactor - 3.0).abs() < 1e-9);
        let e: Vec<(f64, f64)> = ts.iter().map(|&t| (t, (-3.0 * t).exp())).collect();
        let fe = fit_decay_rate(&e, RateModel::Auto).unwrap();
        assert_eq!(fe.model, RateModel::Exponential);
        assert!((fe.exponent + 3.0).abs() < 1e-3);
    }

    #[test]
    fn noisy_fit_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e: Vec<(f64, f64)> = (0..100)
            .map(|i| {
                let t = i as f64 * 0.05;
                (
                    t,
                    (-3.0 * t).exp() * (1.0 + 0.01 * rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let f = fit_decay_rate(&e, RateModel::Exponential).unwrap();
        assert!((f.exponent + 3.0).abs() < 5e-2);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let short: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 1.0)).collect();
        assert!(matches!(
            fit_decay_rate(&short, RateModel::Power),
            Err(Error::InsufficientData(_))
        ));
        let mut bad: Vec<(f64, f64)> = (0..12).map(|i| (i as f64, 1.0)).collect();
        bad[4].1 = 0.0;
        assert!(matches!(
            fit_decay_rate(&bad, RateModel::Power),
            Err(Error::Input(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn noiseless_exponents_recovered(a in -4.0f64..-0.1, c in 0.1f64..10.0) {
            let pw: Vec<(f64, f64)> = (0..30).map(|i| { let t = i as f64 * 0.3; (t, c * (1.0 + t).powf(a)) }).collect();
            let f = fit_decay_rate(&pw, RateModel::Power).unwrap();
            prop_assert!((f.exponent - a).abs() < 1e-3);
            prop_assert!((0.0..=1.0).contains(&f.r_squared));
            let ex: Vec<(f64, f64)> = (0..30).map(|i| { let t = i as f64 * 0.1; (t, c * (a * t).exp()) }).collect();
            let f = fit_decay_rate(&ex, RateModel::Exponential).unwrap();
            prop_assert!((f.exponent - a).abs() < 1e-3);
        }
    }

    #[test]
    fn rate_bound_majorizes_exponential_decay() {
        let s: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, (-2.0 * t).exp())
            })
            .collect();
        let c = check_rate_bound(&s, 0.45, 2.0, 1e-8).unwrap();
        assert!(c.majorized);
        assert!((c.exponent + 4.5).abs() < 1e-12);
        // a slower power law breaks the bound
        let slow: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, (1.0 + t).powf(-1.0))
            })
            .collect();
        assert!(!check_rate_bound(&slow, 0.45, 2.0, 1e-8).unwrap().majorized);
        assert!(check_rate_bound(&s, 0.5, 1.0, 1e-8).is_err());
    }

    fn fake_record(states: Vec<(f64, FieldPair)>, tail: f64) -> TrajectoryRecord {
        let zero = EnergyReport {
            bulk_dirichlet: 0.0,
            bulk_potential: 0.0,
            surface_dirichlet: 0.0,
            surface_potential: 0.0,
            robin_penalty: 0.0,
            total: 0.0,
        };
        TrajectoryRecord {
            samples: vec![Sample {
                time: states.last().unwrap().0,
                energy: zero,
                bulk_rate: tail,
                surface_rate: 0.0,
                dual_norm: 0.0,
                dt: 0.1,
            }],
            final_state: states.last().unwrap().1.clone(),
            states,
            accepted_steps: 0,
            rejected_steps: 0,
            compatibility: 0.0,
            last_checkpoint: None,
        }
    }

    #[test]
    fn constant_and_periodic_trajectories() {
        let m = Mesh::build(Geometry::disk(1.0, 4, 8)).unwrap();
        let c = FieldPair::constant(&m, 0.5, 0.5);
        let rec = fake_record((0..4).map(|i| (i as f64, c.clone())).collect(), 0.0);
        let r = convergence_diagnostic(&m, &rec, &[0.0, 1.0, 2.0, 3.0], 1e-8).unwrap();
        assert!(r.singleton_consistent);
        assert!(r.h_distances.iter().flatten().all(|&d| d == 0.0));
        let per: Vec<(f64, FieldPair)> = (0..4)
            .map(|i| {
                let s = (i as f64 * std::f64::consts::PI / 2.0).sin();
                (i as f64, FieldPair::constant(&m, s, s))
            })
            .collect();
        let rec = fake_record(per, 1.0);
        let r = convergence_diagnostic(&m, &rec, &[0.0, 1.0, 2.0, 3.0], 1e-8).unwrap();
        assert!(!r.singleton_consistent);
        assert!(convergence_diagnostic(&m, &rec, &[0.0, 5.0, 2.0], 1e-8).is_err());
        assert!(convergence_diagnostic(&m, &rec, &[0.0, 1.0], 1e-8).is_err());
    }

    #[test]
    fn probe_on_equilibrium_is_insufficient() {
        let m = Mesh::build(Geometry::disk(1.0, 4, 8)).unwrap();
        let spec = NonlinearitySpec::double_well_affine(1.0, 0.0);
        let eq = solve_stationary_newton(
            &m,
            &spec,
            1.0,
            &FieldPair::constant(&m, 1.0, 1.0),
            &NewtonOptions::default(),
        )
        .unwrap();
        let rec = fake_record((0..20).map(|i| (i as f64, eq.state.clone())).collect(), 0.0);
        assert!(matches!(
            ls_probe(&m, &spec, 1.0, &rec, &eq, 1.0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn probe_slope_near_one_half_for_nondegenerate_minimum() {
        let cfg = RunConfig {
            geometry: Geometry::disk(1.0, 8, 16),
            t_final: 12.0,
            dt: 0.05,
            dt_max: 0.05,
            keep_states: true,
            checkpoint_every: 0,
            ..RunConfig::default()
        };
        let m = Mesh::build(cfg.geometry).unwrap();
        let init = smoothed_random_initial(
            &m,
            &cfg.spec,
            &InitialData {
                mean: 0.8,
                amplitude: 0.1,
                surface: SurfaceInit::MatchTrace,
                ..InitialData::default()
            },
        )
        .unwrap();
        let rec = run_trajectory(&cfg, init).unwrap();
        let eq = solve_stationary_newton(
            &m,
            &cfg.spec,
            1.0,
            &rec.final_state,
            &NewtonOptions::default(),
        )
        .unwrap();
        let probe = ls_probe(&m, &cfg.spec, 1.0, &rec, &eq, 1.0).unwrap();
        assert!(probe.valid, "{probe:?}");
        assert!((probe.slope - 0.5).abs() < 0.05, "{}", probe.slope);
        assert!(probe.holds_pointwise());
        let d = distance_series(&m, &rec, &eq.state, NormKind::W).unwrap();
        let tail: Vec<(f64, f64)> = d.into_iter().filter(|p| p.1 > 1e-8).collect();
        let fit = fit_decay_rate(&tail, RateModel::Auto).unwrap();
        assert_eq!(fit.model, RateModel::Exponential);
    }

    #[test]
    fn sweep_duplicates_and_grid_checks() {
        let base = RunConfig {
            geometry: Geometry::disk(1.0, 6, 12),
            t_final: 0.2,
            dt: 0.05,
            dt_min: 0.05,
            dt_max: 0.05,
            checkpoint_every: 0,
            ..RunConfig::default()
        };
        let m = Mesh::build(base.geometry).unwrap();
        let init = smoothed_random_initial(
            &m,
            &base.spec,
            &InitialData {
                surface: SurfaceInit::MatchTrace,
                ..InitialData::default()
            },
        )
        .unwrap();
        let t = k_sweep(
            &base,
            &[0.1, 0.01, 0.1],
            &init,
            SweepReference::TransmissionLimit,
        )
        .unwrap();
        assert_eq!(t.rows[0], t.rows[2]);
        assert!(t.rows[1].gap < t.rows[0].gap);
        assert!(t.to_csv().lines().count() == 4);
        let s = k_sweep(&base, &[0.1, 0.01], &init, SweepReference::SmallestK).unwrap();
        assert_eq!(s.rows[1].gap, 0.0);
        let adaptive = RunConfig {
            dt_max: 0.1,
            ..base.clone()
        };
        assert!(matches!(
            k_sweep(&adaptive, &[0.1], &init, SweepReference::SmallestK),
            Err(Error::Config(_))
        ));
    }
}
