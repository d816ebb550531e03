//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use bsac::analysis::{
    check_rate_bound, distance_series, k_sweep, ls_probe, NormKind, SweepReference,
};
use bsac::dynamics::{
    run_trajectory, smoothed_random_initial, InitialData, RunConfig, SurfaceInit,
};
use bsac::operators::{
    assemble_linearized, assemble_surface_shifted_pair, assemble_wentzell_robin_pair, Norms,
};
use bsac::steady_spectral::{
    coercivity_constant, compute_coercivity_margin, eigen_solve, mass_gram,
    solve_stationary_newton, EigenOptions, NewtonOptions,
};
use bsac::{
    compute_energy, compute_gradient, energy_identity_residual, Coupling, FieldPair, Geometry, Mesh,
};
use bsac::{NonlinearitySpec, Potential};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn energy_monotonicity() -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut steps = 0;
    for seed in 0..5 {
        let cfg = RunConfig {
            seed,
            t_final: 0.5,
            checkpoint_every: 0,
            ..RunConfig::default()
        };
        let mesh = Mesh::build(cfg.geometry).unwrap();
        let init = smoothed_random_initial(
            &mesh,
            &cfg.spec,
            &InitialData {
                seed,
                ..InitialData::default()
            },
        )
        .unwrap();
        let rec = run_trajectory(&cfg, init).map_err(|f| f.to_string())?;
        for w in rec.samples.windows(2) {
            let (a, b) = (w[0].energy.total, w[1].energy.total);
            let excess = (b - a) / a.abs().max(1.0);
            worst = worst.max(excess);
            ensure(
                excess <= 1e-12,
                format!(
                    "seed {seed}: energy rose by {excess:e} at t = {}",
                    w[1].time
                ),
            )?;
        }
        steps += rec.accepted_steps;
    }
    Ok(format!(
        "{steps} accepted steps, largest relative change {worst:.3e}"
    ))
}

fn energy_identity() -> Outcome {
    let geometry = Geometry::disk(1.0, 32, 64);
    let mesh = Mesh::build(geometry).unwrap();
    let spec = NonlinearitySpec::double_well_affine(1.0, 0.0);
    let noise = smoothed_random_initial(
        &mesh,
        &spec,
        &InitialData {
            mean: 0.8,
            amplitude: 0.1,
            ..InitialData::default()
        },
    )
    .unwrap();
    // start from a point on the trajectory, past the initial layer
    let settle = RunConfig {
        geometry,
        dt: 1e-3,
        dt_min: 1e-3,
        dt_max: 1e-3,
        t_final: 0.2,
        checkpoint_every: 0,
        ..RunConfig::default()
    };
    let init = run_trajectory(&settle, noise)
        .map_err(|f| f.to_string())?
        .final_state;
    let mut maxima = Vec::new();
    for i in 0..4 {
        let dt = 0.02 / 2f64.powi(i);
        let cfg = RunConfig {
            geometry,
            dt,
            dt_min: dt,
            dt_max: dt,
            t_final: 0.4,
            keep_states: true,
            checkpoint_every: 0,
            ..RunConfig::default()
        };
        let rec = run_trajectory(&cfg, init.clone()).map_err(|f| f.to_string())?;
        let r =
            energy_identity_residual(&rec.states, &mesh, &spec, 1.0).map_err(|e| e.to_string())?;
        let top = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ensure(top <= 0.0, format!("dt = {dt}: positive residual {top:e}"))?;
        maxima.push(r.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let ratios: Vec<f64> = maxima.windows(2).map(|w| w[0] / w[1]).collect();
    ensure(
        ratios.iter().all(|r| (1.7..=2.3).contains(r)),
        format!("reduction ratios {ratios:?} (max |R_n| {maxima:?})"),
    )?;
    Ok(format!("ratios {:.3?}", ratios))
}

fn gradient_consistency() -> Outcome {
    let mesh = Mesh::build(Geometry::disk(1.0, 16, 32)).unwrap();
    let spec = NonlinearitySpec::new(
        Potential::DoubleWell,
        Potential::ScaledDoubleWell {
            scale: 0.5,
            well: 0.7,
        },
        Coupling::Tanh {
            amplitude: 1.2,
            rate: 0.8,
        },
    )
    .unwrap();
    let k = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let x = FieldPair::new(random(mesh.n_bulk()), random(mesh.n_surface()));
    let g = compute_gradient(&mesh, &spec, &x, k).unwrap();
    let lin = assemble_linearized(&mesh, &spec, &x, k).unwrap();
    let eps = 1e-5;
    let (mut worst_g, mut worst_j) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let d = FieldPair::new(random(mesh.n_bulk()), random(mesh.n_surface()));
        let plus = x.axpy(eps, &d);
        let minus = x.axpy(-eps, &d);
        let e = |s: &FieldPair| compute_energy(&mesh, &spec, s, k).unwrap().total;
        let fd = (e(&plus) - e(&minus)) / (2.0 * eps);
        let an = g.pair(&d);
        worst_g = worst_g.max((fd - an).abs() / an.abs());
        let gp = compute_gradient(&mesh, &spec, &plus, k).unwrap().to_joint();
        let gm = compute_gradient(&mesh, &spec, &minus, k)
            .unwrap()
            .to_joint();
        let jd = lin.operator.matrix.mul_vec(&d.to_joint());
        let num: f64 = gp
            .iter()
            .zip(&gm)
            .zip(&jd)
            .map(|((p, m), j)| ((p - m) / (2.0 * eps) - j).powi(2))
            .sum();
        let den: f64 = jd.iter().map(|v| v * v).sum();
        worst_j = worst_j.max((num / den).sqrt());
    }
    ensure(
        worst_g < 1e-6 && worst_j < 1e-6,
        format!("gradient {worst_g:e}, Jacobian {worst_j:e}"),
    )?;
    Ok(format!(
        "gradient rel. error {worst_g:.2e}, Jacobian rel. error {worst_j:.2e}"
    ))
}

/// `J_m(x)` by its power series.
fn bessel_j(m: i32, x: f64) -> f64 {
    if m < 0 {
        return if m % 2 == 0 {
            bessel_j(-m, x)
        } else {
            -bessel_j(-m, x)
        };
    }
    let mut term = (x / 2.0).powi(m) / (1..=m).map(f64::from).product::<f64>();
    let mut sum = term;
    for s in 1..200 {
        term *= -(x * x / 4.0) / (s as f64 * (s + m) as f64);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

/// Sorted roots of `g` on `(0, hi)` by sign changes and bisection.
fn roots(g: impl Fn(f64) -> f64, hi: f64) -> Vec<f64> {
    let n = 20_000;
    let mut out = Vec::new();
    let mut a = 1e-9;
    for i in 1..=n {
        let b = hi * i as f64 / n as f64;
        if g(a) * g(b) < 0.0 {
            let (mut lo, mut up) = (a, b);
            for _ in 0..200 {
                let mid = 0.5 * (lo + up);
                if g(lo) * g(mid) <= 0.0 {
                    up = mid
                } else {
                    lo = mid
                }
            }
            out.push(0.5 * (lo + up));
        }
        a = b;
    }
    out
}

fn spectral_oracles() -> Outcome {
    let opts = EigenOptions::default();
    // circle: 1 + k², k = 0, ±1, ±2, ±3, ±4
    let circle: Vec<f64> = [0, 1, 1, 2, 2, 3, 3, 4, 4]
        .iter()
        .map(|k: &i32| 1.0 + (k * k) as f64)
        .collect();
    let mut errs = Vec::new();
    for n_theta in [64, 128] {
        let mesh = Mesh::build(Geometry::disk(1.0, 4, n_theta)).unwrap();
        let (s, m) = assemble_surface_shifted_pair(&mesh);
        let p = eigen_solve((&s, &m), circle.len(), &opts).map_err(|e| e.to_string())?;
        errs.push(
            p.values
                .iter()
                .zip(&circle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    let ratio = errs[0] / errs[1];
    ensure(
        (3.5..=4.5).contains(&ratio),
        format!("circle error ratio {ratio}"),
    )?;

    let k = 1.0;
    let count = 4;
    // interval (0, 1): cos(κ(x-½)) and sin(κ(x-½)) modes
    let mut want: Vec<f64> = roots(
        |x| -x * (x / 2.0).sin() + (1.0 - x * x) * (x / 2.0).cos() / k,
        20.0,
    )
    .into_iter()
    .chain(roots(
        |x| x * (x / 2.0).cos() + (1.0 - x * x) * (x / 2.0).sin() / k,
        20.0,
    ))
    .map(|x| x * x)
    .collect();
    want.sort_by(f64::total_cmp);
    let mesh = Mesh::build(Geometry::interval(1.0, 256)).unwrap();
    let (s, m) = assemble_wentzell_robin_pair(&mesh, k).unwrap();
    let p = eigen_solve((&s, &m), count, &opts).map_err(|e| e.to_string())?;
    let interval_err = p
        .values
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs() / b)
        .fold(0.0, f64::max);
    ensure(
        interval_err < 1e-4,
        format!(
            "interval relative error {interval_err:e}: {:?} vs {:?}",
            p.values,
            &want[..count]
        ),
    )?;

    // disk: J_m(κ r) cos(mθ), κ J_m'(κ) + (1 - κ²) J_m(κ) / K = 0
    let mut disk_want = Vec::new();
    for mm in 0..8 {
        let dj = |x: f64| 0.5 * (bessel_j(mm - 1, x) - bessel_j(mm + 1, x));
        for r in roots(|x| x * dj(x) + (1.0 - x * x) * bessel_j(mm, x) / k, 6.0) {
            disk_want.push(r * r);
            if mm > 0 {
                disk_want.push(r * r);
            }
        }
    }
    disk_want.sort_by(f64::total_cmp);
    let mesh = Mesh::build(Geometry::disk(1.0, 128, 256)).unwrap();
    let (s, m) = assemble_wentzell_robin_pair(&mesh, k).unwrap();
    let p = eigen_solve((&s, &m), count, &opts).map_err(|e| e.to_string())?;
    let disk_err = p
        .values
        .iter()
        .zip(&disk_want)
        .map(|(a, b)| (a - b).abs() / b)
        .fold(0.0, f64::max);
    ensure(
        disk_err < 1e-4,
        format!(
            "disk relative error {disk_err:e}: {:?} vs {:?}",
            p.values,
            &disk_want[..count]
        ),
    )?;

    let gram = mass_gram(&m.matrix, &p.vectors);
    let mut gram_err = 0.0f64;
    for (i, row) in gram.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            gram_err = gram_err.max((v - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    ensure(
        gram_err < 1e-8,
        format!("Gram matrix off identity by {gram_err:e}"),
    )?;
    Ok(format!(
        "circle ratio {ratio:.3}, interval err {interval_err:.1e}, disk err {disk_err:.1e}, Gram err {gram_err:.1e}"
    ))
}

fn coercivity() -> Outcome {
    let mesh = Mesh::build(Geometry::disk(1.0, 64, 128)).unwrap();
    let spec = NonlinearitySpec::double_well_affine(1.0, 0.0);
    let eq = solve_stationary_newton(
        &mesh,
        &spec,
        1.0,
        &FieldPair::constant(&mesh, 1.0, 1.0),
        &NewtonOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let c = coercivity_constant(&mesh, &spec, 1.0, &eq.state).unwrap();
    ensure(c == 3.5, format!("c_* = {c}"))?;
    let r = compute_coercivity_margin(&mesh, &spec, 1.0, &eq, 80).map_err(|e| e.to_string())?;
    let m =
        r.m.ok_or_else(|| format!("no m up to 80, margin {}", r.margin))?;
    let low = r.lambdas[m - 1].min(r.mus[m - 1]);
    ensure(
        r.c_star == 3.5 && low > 28.0 && r.margin > 0.0,
        format!("m = {m}, min = {low}, margin {}", r.margin),
    )?;
    Ok(format!(
        "c_* = {}, m = {m}, min(λ_m, μ_m) = {low:.4}, margin {:.4}",
        r.c_star, r.margin
    ))
}

fn stationary_consistency() -> Outcome {
    let cfg = RunConfig {
        seed: 1,
        t_final: 200.0,
        checkpoint_every: 0,
        ..RunConfig::default()
    };
    let mesh = Mesh::build(cfg.geometry).unwrap();
    let init = smoothed_random_initial(
        &mesh,
        &cfg.spec,
        &InitialData {
            seed: 1,
            ..InitialData::default()
        },
    )
    .unwrap();
    let rec = run_trajectory(&cfg, init).map_err(|f| f.to_string())?;
    let eq = solve_stationary_newton(
        &mesh,
        &cfg.spec,
        cfg.k,
        &rec.final_state,
        &NewtonOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let norms = Norms::new(&mesh).unwrap();
    let dist = norms.h_norm(&rec.final_state.sub(&eq.state));
    let last = rec.samples.last().unwrap();
    let tail = last.bulk_rate.hypot(last.surface_rate);
    ensure(
        dist < 1e-6 && eq.residual < 1e-10 && tail < 1e-8,
        format!(
            "distance {dist:e}, residual {:e}, tail rate {tail:e}",
            eq.residual
        ),
    )?;
    Ok(format!(
        "distance {dist:.2e}, Newton residual {:.2e}, tail rate {tail:.2e}",
        eq.residual
    ))
}

fn relaxation_rate() -> Outcome {
    let base = RunConfig {
        geometry: Geometry::disk(1.0, 32, 64),
        t_final: 1.0,
        dt: 0.01,
        dt_min: 0.01,
        dt_max: 0.01,
        checkpoint_every: 0,
        ..RunConfig::default()
    };
    let mesh = Mesh::build(base.geometry).unwrap();
    let init = smoothed_random_initial(
        &mesh,
        &base.spec,
        &InitialData {
            surface: SurfaceInit::MatchTrace,
            ..InitialData::default()
        },
    )
    .unwrap();
    let t = k_sweep(
        &base,
        &[1e-1, 1e-2, 1e-3, 1e-4],
        &init,
        SweepReference::TransmissionLimit,
    )
    .map_err(|e| e.to_string())?;
    let detail = format!(
        "gap slope {:.3}, mismatch slope {:.3}, gaps {:?}",
        t.gap_slope,
        t.mismatch_slope,
        t.rows
            .iter()
            .map(|r| format!("{:.2e}", r.gap))
            .collect::<Vec<_>>()
    );
    ensure(
        t.gap_monotone() && t.gap_slope >= 0.45 && (0.8..=1.2).contains(&t.mismatch_slope),
        detail.clone(),
    )?;
    Ok(detail)
}

fn rate_bound() -> Outcome {
    let cfg = RunConfig {
        t_final: 20.0,
        keep_states: true,
        checkpoint_every: 0,
        ..RunConfig::default()
    };
    let mesh = Mesh::build(cfg.geometry).unwrap();
    let init = smoothed_random_initial(&mesh, &cfg.spec, &InitialData::default()).unwrap();
    let rec = run_trajectory(&cfg, init).map_err(|f| f.to_string())?;
    let eq = solve_stationary_newton(
        &mesh,
        &cfg.spec,
        cfg.k,
        &rec.final_state,
        &NewtonOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let probe = ls_probe(&mesh, &cfg.spec, cfg.k, &rec, &eq, 1.0).map_err(|e| e.to_string())?;
    ensure(
        probe.valid && (0.4..=0.8).contains(&probe.slope),
        format!(
            "probe slope {}, decades {}, valid {}",
            probe.slope, probe.decades, probe.valid
        ),
    )?;
    let theta = probe.theta.min(0.45);
    let series = distance_series(&mesh, &rec, &eq.state, NormKind::W).unwrap();
    let start = probe
        .entry_time
        .ok_or("trajectory never settles inside the probe radius")?;
    let b = check_rate_bound(&series, theta, start, 1e-8).map_err(|e| e.to_string())?;
    ensure(
        b.majorized,
        format!("worst ratio {} with θ = {theta}", b.worst_ratio),
    )?;
    Ok(format!(
        "probe slope {:.3} over {:.1} decades, θ = {theta:.3}, {} samples from t = {start:.2} under the bound (worst ratio {:.2e})",
        probe.slope, probe.decades, b.checked, b.worst_ratio
    ))
}

fn bsac(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bsac"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!(
            "bsac {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn determinism_and_resume() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("run.conf");
    std::fs::write(
        &cfg,
        "n_r = 16\nn_theta = 32\nT_final = 2\ncheckpoint_every = 10\nseed = 3\ncoupling = tanh(1, 1)\n",
    )
    .unwrap();
    let first = tmp.path().join("first");
    let again = tmp.path().join("again");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    bsac(&["simulate", "--config", &s(&cfg), "--run-dir", &s(&first)])?;
    bsac(&[
        "simulate",
        "--config",
        &s(&first.join("manifest.txt")),
        "--run-dir",
        &s(&again),
    ])?;
    let table = read(&first.join("trajectory.csv"))?;
    ensure(
        table == read(&again.join("trajectory.csv"))?,
        "re-run from manifest differs".into(),
    )?;
    let mut checkpoints: Vec<_> = std::fs::read_dir(&first)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("checkpoint_")
        })
        .collect();
    checkpoints.sort();
    ensure(!checkpoints.is_empty(), "no checkpoints written".into())?;
    for (i, cp) in checkpoints.iter().enumerate() {
        let dir = tmp.path().join(format!("resume{i}"));
        bsac(&["simulate", "--resume", &s(cp), "--run-dir", &s(&dir)])?;
        ensure(
            table == read(&dir.join("trajectory.csv"))?,
            format!("resume from {} differs", cp.display()),
        )?;
    }
    Ok(format!(
        "re-run and {} resumes bitwise identical",
        checkpoints.len()
    ))
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        (
            "1 energy monotonicity",
            Duration::from_secs(120),
            energy_monotonicity,
        ),
        (
            "2 energy identity",
            Duration::from_secs(120),
            energy_identity,
        ),
        (
            "3 gradient consistency",
            Duration::from_secs(30),
            gradient_consistency,
        ),
        (
            "4 spectral oracles",
            Duration::from_secs(120),
            spectral_oracles,
        ),
        (
            "5 coercivity constants",
            Duration::from_secs(600),
            coercivity,
        ),
        (
            "6 stationary/flow consistency",
            Duration::from_secs(300),
            stationary_consistency,
        ),
        (
            "7 Robin relaxation rate",
            Duration::from_secs(600),
            relaxation_rate,
        ),
        ("8 rate bound", Duration::from_secs(300), rate_bound),
        (
            "9 determinism and resume",
            Duration::from_secs(600),
            determinism_and_resume,
        ),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = t.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > budget => Err(format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
            o => o,
        };
        match outcome {
            Ok(d) => println!("PASS {name}: {d} [{elapsed:.1?}]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d} [{elapsed:.1?}]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
