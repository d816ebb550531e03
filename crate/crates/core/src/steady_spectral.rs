//! Stationary states, generalised eigenproblems and coercivity constants.

use crate::energy::{compute_gradient, FieldPair};
use crate::error::{Error, Result};
use crate::linalg::{dot, max_abs, CsrMatrix, ProfileLdlt};
use crate::mesh::Mesh;
use crate::nonlinearity::NonlinearitySpec;
use crate::operators::{
    assemble_linearized, assemble_surface_shifted_pair, assemble_wentzell_robin_pair, check_k,
    DiscreteOperator, Norms,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Settings of the block shift-invert iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Shift `σ`; `S - σM` must be positive definite, so the iteration
    /// converges to the eigenvalues closest to `σ` from above.
    pub shift: f64,
    /// Bound on `‖S y - λ M y‖ / ‖y‖` for every returned pair.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            shift: 0.0,
            tol: 1e-8,
            max_iter: 1000,
            seed: 0,
        }
    }
}

/// Ascending eigenpairs, eigenvectors orthonormal in the mass inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

fn residual_norm(stiff: &CsrMatrix, mass: &CsrMatrix, lambda: f64, y: &[f64]) -> f64 {
    let sy = stiff.mul_vec(y);
    let my = mass.mul_vec(y);
    let r: f64 = sy
        .iter()
        .zip(&my)
        .map(|(a, b)| (a - lambda * b).powi(2))
        .sum();
    r.sqrt() / dot(y, y).sqrt()
}

/// M-orthonormalises the columns in place (modified Gram-Schmidt, two
/// passes). Columns that collapse are replaced by fresh random vectors.
fn m_orthonormalize(mass: &CsrMatrix, cols: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    for i in 0..cols.len() {
        for attempt in 0..3 {
            for _ in 0..2 {
                for j in 0..i {
                    let mj = mass.mul_vec(&cols[j]);
                    let c = dot(&cols[i], &mj);
                    let (head, tail) = cols.split_at_mut(i);
                    for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                        *a -= c * b;
                    }
                }
            }
            let n = mass.quad_form(&cols[i], &cols[i]).sqrt();
            if n > 1e-12 * (1.0 + max_abs(&cols[i])) || attempt == 2 {
                let inv = 1.0 / n;
                cols[i].iter_mut().for_each(|v| *v *= inv);
                break;
            }
            for v in cols[i].iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
}

/// Smallest `count` eigenpairs of `S y = λ M y` by block inverse iteration
/// on `S - σM` with Rayleigh-Ritz on a guarded subspace.
pub fn eigen_solve_matrices(
    stiff: &CsrMatrix,
    mass: &CsrMatrix,
    count: usize,
    opts: &EigenOptions,
) -> Result<EigenPairs> {
    let n = stiff.dim();
    if mass.dim() != n {
        return Err(Error::Shape {
            what: "mass matrix",
            expected: n,
            actual: mass.dim(),
        });
    }
    if count == 0 || count > n {
        return Err(Error::Input(format!(
            "cannot compute {count} eigenpairs of a {n}x{n} pencil"
        )));
    }
    let p = (count + (count / 2).max(10)).min(n);
    let shifted = stiff.add_scaled(mass, -opts.shift);
    let fac = ProfileLdlt::factor_spd(&shifted)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut last = Vec::new();
    for it in 1..=opts.max_iter {
        let mut y: Vec<Vec<f64>> = x.iter().map(|v| fac.solve(&mass.mul_vec(v))).collect();
        m_orthonormalize(mass, &mut y, &mut rng);
        let sy: Vec<Vec<f64>> = y.iter().map(|v| stiff.mul_vec(v)).collect();
        let small = DMatrix::from_fn(p, p, |i, j| 0.5 * (dot(&y[i], &sy[j]) + dot(&y[j], &sy[i])));
        let eig = SymmetricEigen::new(small);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        x = order
            .iter()
            .map(|&c| {
                let mut v = vec![0.0; n];
                for (k, yk) in y.iter().enumerate() {
                    let coef = eig.eigenvectors[(k, c)];
                    for (a, b) in v.iter_mut().zip(yk) {
                        *a += coef * b;
                    }
                }
                v
            })
            .collect();
        let values: Vec<f64> = order
            .iter()
            .take(count)
            .map(|&c| eig.eigenvalues[c])
            .collect();
        let residuals: Vec<f64> = (0..count)
            .map(|i| residual_norm(stiff, mass, values[i], &x[i]))
            .collect();
        if residuals.iter().all(|&r| r < opts.tol) {
            return Ok(EigenPairs {
                values,
                vectors: x.into_iter().take(count).collect(),
                residuals,
                iterations: it,
            });
        }
        last = residuals;
    }
    Err(Error::Numerical {
        message: format!("eigen iteration did not converge; residuals {last:?}"),
        residual: last.iter().cloned().fold(0.0, f64::max),
    })
}

/// [`eigen_solve_matrices`] on an assembled `(stiffness, mass)` pair.
pub fn eigen_solve(
    pair: (&DiscreteOperator, &DiscreteOperator),
    count: usize,
    opts: &EigenOptions,
) -> Result<EigenPairs> {
    eigen_solve_matrices(&pair.0.matrix, &pair.1.matrix, count, opts)
}

/// Gram matrix of the eigenvectors in the mass inner product.
pub fn mass_gram(mass: &CsrMatrix, vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mv: Vec<Vec<f64>> = vectors.iter().map(|v| mass.mul_vec(v)).collect();
    vectors
        .iter()
        .map(|a| mv.iter().map(|b| dot(a, b)).collect())
        .collect()
}

/// Converged stationary state.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumState {
    pub state: FieldPair,
    /// `‖M(u, φ)‖_{V'}`.
    pub residual: f64,
    pub iterations: usize,
    /// Smallest eigenvalue of the linearised operator against the lumped mass.
    pub stability: f64,
    pub stability_mode: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            max_halvings: 30,
        }
    }
}

/// Smallest eigenpair of the linearised operator at `state` against the
/// diagonal quadrature mass.
pub fn linearized_bottom(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    state: &FieldPair,
    k: f64,
) -> Result<(f64, Vec<f64>)> {
    let lin = assemble_linearized(mesh, spec, state, k)?;
    // reaction terms outside the positive semidefinite Robin block
    let mut bound = lin.bulk_reaction.iter().fold(0.0f64, |m, r| m.max(-r));
    for (j, r) in lin.surface_reaction.iter().enumerate() {
        let hp = spec.h_prime(state.surface[j]);
        bound = bound.max(-(r - hp * hp / k));
    }
    let mass = CsrMatrix::from_diagonal(&lin.operator.mass);
    let opts = EigenOptions {
        shift: -(bound + 1.0),
        ..EigenOptions::default()
    };
    let pairs = eigen_solve_matrices(&lin.operator.matrix, &mass, 1, &opts)?;
    Ok((pairs.values[0], pairs.vectors[0].clone()))
}

/// Damped Newton on `M(u, φ) = 0`: each step is halved until the dual
/// norm of the residual decreases.
pub fn solve_stationary_newton(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    k: f64,
    guess: &FieldPair,
    opts: &NewtonOptions,
) -> Result<EquilibriumState> {
    check_k(k)?;
    guess.check(mesh)?;
    if !(opts.tol > 0.0) {
        return Err(Error::Config("Newton tolerance must be positive".into()));
    }
    let norms = Norms::new(mesh)?;
    let residual_of = |x: &FieldPair| -> Result<(Vec<f64>, f64)> {
        let g = compute_gradient(mesh, spec, x, k)?;
        let r = norms.dual_norm(&g)?;
        Ok((g.to_joint(), r))
    };
    let mut x = guess.clone();
    let (mut g, mut res) = residual_of(&x)?;
    let mut iterations = 0;
    while res >= opts.tol {
        if iterations == opts.max_iter {
            return Err(Error::Numerical {
                message: format!("stationary Newton stopped after {iterations} iterations"),
                residual: res,
            });
        }
        iterations += 1;
        let jac = assemble_linearized(mesh, spec, &x, k)?.operator.matrix;
        let delta = ProfileLdlt::factor(&jac)?.solve(&g);
        let dir = FieldPair::from_joint(mesh, &delta);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = x.axpy(-step, &dir);
            let (gt, rt) = residual_of(&trial)?;
            if rt < res {
                accepted = Some((trial, gt, rt));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((xt, gt, rt)) => {
                x = xt;
                g = gt;
                res = rt;
            }
            None => {
                return Err(Error::Numerical {
                    message: "line search found no decrease of the residual".into(),
                    residual: res,
                })
            }
        }
    }
    let (stability, stability_mode) = linearized_bottom(mesh, spec, &x, k)?;
    Ok(EquilibriumState {
        state: x,
        residual: res,
        iterations,
        stability,
        stability_mode,
    })
}

/// Spectra of both eigenproblems and the coercivity scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub k: f64,
    pub lambdas: Vec<f64>,
    pub lambda_fields: Vec<Vec<f64>>,
    pub mus: Vec<f64>,
    pub mu_fields: Vec<Vec<f64>>,
    pub c_star: f64,
    /// Smallest index (1-based) with `θ_m > 8 c_*`.
    pub m: Option<usize>,
    pub theta_m: f64,
    /// `θ_m - 8 c_*` at the reported `m`, or at the last scanned index.
    pub margin: f64,
}

impl SpectralReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("K = {}\n", self.k));
        s.push_str(&format!("c_star = {}\n", self.c_star));
        match self.m {
            Some(m) => s.push_str(&format!("m = {m}\n")),
            None => s.push_str("m = none\n"),
        }
        s.push_str(&format!("theta_m = {}\n", self.theta_m));
        s.push_str(&format!("margin = {}\n", self.margin));
        s.push_str("# index lambda mu\n");
        for i in 0..self.lambdas.len().max(self.mus.len()) {
            let fmt = |v: Option<&f64>| v.map_or("-".to_string(), |x| format!("{x:.12e}"));
            s.push_str(&format!(
                "{} {} {}\n",
                i + 1,
                fmt(self.lambdas.get(i)),
                fmt(self.mus.get(i))
            ));
        }
        s
    }
}

/// `max(sup_Ω |f'(u)|, ½ + K⁻¹ sup_Γ |h'(φ)|² + sup_Γ |f_Γ'(φ)| + K⁻¹ sup_Γ |h''(φ)(h(φ) - u)|)`
/// evaluated nodewise.
pub fn coercivity_constant(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    k: f64,
    state: &FieldPair,
) -> Result<f64> {
    check_k(k)?;
    state.check(mesh)?;
    let bulk = state
        .bulk
        .iter()
        .map(|&u| spec.f_prime(u).abs())
        .fold(0.0, f64::max);
    let tr = mesh.boundary_trace(&state.bulk)?;
    let (mut hp, mut fs, mut curv) = (0.0f64, 0.0f64, 0.0f64);
    for (j, &phi) in state.surface.iter().enumerate() {
        hp = hp.max(spec.h_prime(phi).powi(2));
        fs = fs.max(spec.f_surface_prime(phi).abs());
        curv = curv.max((spec.h_second(phi) * (spec.h(phi) - tr[j])).abs());
    }
    Ok(bulk.max(0.5 + hp / k + fs + curv / k))
}

/// Computes `max_m` eigenpairs of both problems and scans for the smallest
/// `m` with `min(1, K⁻¹) min(λ_m, μ_m) > 8 c_*`. A failed scan is reported
/// through `m = None` and a non-positive margin.
pub fn compute_coercivity_margin(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    k: f64,
    equilibrium: &EquilibriumState,
    max_m: usize,
) -> Result<SpectralReport> {
    let c_star = coercivity_constant(mesh, spec, k, &equilibrium.state)?;
    let (ws, wm) = assemble_wentzell_robin_pair(mesh, k)?;
    let lam = eigen_solve(
        (&ws, &wm),
        max_m.min(mesh.n_bulk()),
        &EigenOptions::default(),
    )?;
    let (ss, sm) = assemble_surface_shifted_pair(mesh);
    let mu = eigen_solve(
        (&ss, &sm),
        max_m.min(mesh.n_surface()),
        &EigenOptions::default(),
    )?;
    let scale = 1.0f64.min(1.0 / k);
    let scan = lam.values.len().min(mu.values.len());
    let mut m = None;
    let mut theta_m = 0.0;
    for i in 0..scan {
        theta_m = scale * lam.values[i].min(mu.values[i]);
        if theta_m > 8.0 * c_star {
            m = Some(i + 1);
            break;
        }
    }
    Ok(SpectralReport {
        k,
        lambdas: lam.values,
        lambda_fields: lam.vectors,
        mus: mu.values,
        mu_fields: mu.vectors,
        c_star,
        m,
        theta_m,
        margin: theta_m - 8.0 * c_star,
    })
}
