//! Discrete energy, its first variation and the energy-dissipation residual.
//!
//! The Dirichlet parts are sums over the mesh edges with the same
//! coefficients as the assembled Laplacians, and the Robin penalty uses the
//! extrapolated boundary trace, so [`compute_gradient`] is the exact
//! derivative of [`compute_energy`].

use crate::error::{check_len, Error, Result};
use crate::mesh::{Edge, Mesh};
use crate::nonlinearity::NonlinearitySpec;
use crate::operators::{check_k, trace_row, DualVector};

/// State `(u, φ)`: bulk nodal values followed by surface nodal values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    pub bulk: Vec<f64>,
    pub surface: Vec<f64>,
}

impl FieldPair {
    pub fn new(bulk: Vec<f64>, surface: Vec<f64>) -> Self {
        Self { bulk, surface }
    }

    pub fn constant(mesh: &Mesh, u: f64, phi: f64) -> Self {
        Self {
            bulk: vec![u; mesh.n_bulk()],
            surface: vec![phi; mesh.n_surface()],
        }
    }

    pub fn zeros(mesh: &Mesh) -> Self {
        Self::constant(mesh, 0.0, 0.0)
    }

    /// Lengths match the mesh and every entry is finite.
    pub fn check(&self, mesh: &Mesh) -> Result<()> {
        check_len("bulk field", mesh.n_bulk(), self.bulk.len())?;
        check_len("surface field", mesh.n_surface(), self.surface.len())?;
        if self.bulk.iter().chain(&self.surface).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Input("state contains non-finite values".into()))
        }
    }

    pub fn to_joint(&self) -> Vec<f64> {
        let mut v = self.bulk.clone();
        v.extend_from_slice(&self.surface);
        v
    }

    pub fn from_joint(mesh: &Mesh, v: &[f64]) -> Self {
        let nb = mesh.n_bulk();
        Self {
            bulk: v[..nb].to_vec(),
            surface: v[nb..].to_vec(),
        }
    }

    /// `self + s · other`.
    pub fn axpy(&self, s: f64, other: &FieldPair) -> FieldPair {
        let comb = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + s * y).collect();
        FieldPair {
            bulk: comb(&self.bulk, &other.bulk),
            surface: comb(&self.surface, &other.surface),
        }
    }

    pub fn sub(&self, other: &FieldPair) -> FieldPair {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, s: f64) -> FieldPair {
        FieldPair {
            bulk: self.bulk.iter().map(|v| v * s).collect(),
            surface: self.surface.iter().map(|v| v * s).collect(),
        }
    }

    /// Smallest and largest entry over both components.
    pub fn range(&self) -> (f64, f64) {
        self.bulk
            .iter()
            .chain(&self.surface)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// The five parts of the energy and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub bulk_dirichlet: f64,
    pub bulk_potential: f64,
    pub surface_dirichlet: f64,
    pub surface_potential: f64,
    pub robin_penalty: f64,
    pub total: f64,
}

impl EnergyReport {
    pub fn parts(&self) -> [f64; 5] {
        [
            self.bulk_dirichlet,
            self.bulk_potential,
            self.surface_dirichlet,
            self.surface_potential,
            self.robin_penalty,
        ]
    }
}

fn edge_energy(edges: &[Edge], x: &[f64]) -> f64 {
    0.5 * edges
        .iter()
        .map(|e| e.coeff * (x[e.a] - x[e.b]).powi(2))
        .sum::<f64>()
}

fn edge_gradient(edges: &[Edge], x: &[f64], out: &mut [f64]) {
    for e in edges {
        let d = e.coeff * (x[e.a] - x[e.b]);
        out[e.a] += d;
        out[e.b] -= d;
    }
}

pub fn compute_energy(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    state: &FieldPair,
    k: f64,
) -> Result<EnergyReport> {
    check_k(k)?;
    check_len("bulk field", mesh.n_bulk(), state.bulk.len())?;
    check_len("surface field", mesh.n_surface(), state.surface.len())?;
    let bulk_dirichlet = edge_energy(mesh.bulk_edges(), &state.bulk);
    let surface_dirichlet = edge_energy(mesh.surface_edges(), &state.surface);
    let bulk_potential = mesh
        .bulk_weights()
        .iter()
        .zip(&state.bulk)
        .map(|(w, &u)| w * spec.bulk().value(u))
        .sum();
    let mut surface_potential = 0.0;
    let mut robin_penalty = 0.0;
    for (j, &w) in mesh.surface_weights().iter().enumerate() {
        let phi = state.surface[j];
        surface_potential += w * spec.surface().value(phi);
        let gap = mesh.trace_at(&state.bulk, j) - spec.h(phi);
        robin_penalty += w * gap * gap;
    }
    robin_penalty /= 2.0 * k;
    Ok(EnergyReport {
        bulk_dirichlet,
        bulk_potential,
        surface_dirichlet,
        surface_potential,
        robin_penalty,
        total: bulk_dirichlet
            + bulk_potential
            + surface_dirichlet
            + surface_potential
            + robin_penalty,
    })
}

/// First variation of the energy as a coefficient vector: its dot product
/// with a direction `(w, ξ)` is the directional derivative.
pub fn compute_gradient(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    state: &FieldPair,
    k: f64,
) -> Result<DualVector> {
    check_k(k)?;
    check_len("bulk field", mesh.n_bulk(), state.bulk.len())?;
    check_len("surface field", mesh.n_surface(), state.surface.len())?;
    let mut g = DualVector::zeros(mesh);
    edge_gradient(mesh.bulk_edges(), &state.bulk, &mut g.bulk);
    edge_gradient(mesh.surface_edges(), &state.surface, &mut g.surface);
    for ((gi, w), &u) in g.bulk.iter_mut().zip(mesh.bulk_weights()).zip(&state.bulk) {
        *gi += w * spec.f(u);
    }
    for (j, &w) in mesh.surface_weights().iter().enumerate() {
        let phi = state.surface[j];
        let gap = mesh.trace_at(&state.bulk, j) - spec.h(phi);
        let s = w * gap / k;
        for (c, a) in trace_row(mesh, j) {
            g.bulk[c] += s * a;
        }
        g.surface[j] += w * spec.f_surface(phi) - s * spec.h_prime(phi);
    }
    Ok(g)
}

/// Residual of the discrete energy identity on each interval of the window:
/// `(E_{n+1} - E_n)/Δt + ‖δu/Δt‖²_{L²(Ω)} + ‖δφ/Δt‖²_{L²(Γ)}`.
pub fn energy_identity_residual(
    window: &[(f64, FieldPair)],
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    k: f64,
) -> Result<Vec<f64>> {
    if window.len() < 2 {
        return Err(Error::Input(
            "energy identity needs at least two samples".into(),
        ));
    }
    if window.windows(2).any(|p| !(p[1].0 > p[0].0)) {
        return Err(Error::Input(
            "sample times must be strictly increasing".into(),
        ));
    }
    let energies = window
        .iter()
        .map(|(_, s)| compute_energy(mesh, spec, s, k).map(|e| e.total))
        .collect::<Result<Vec<_>>>()?;
    Ok(window
        .windows(2)
        .zip(energies.windows(2))
        .map(|(p, e)| {
            let dt = p[1].0 - p[0].0;
            let rate = |w: &[f64], a: &[f64], b: &[f64]| -> f64 {
                w.iter()
                    .zip(a.iter().zip(b))
                    .map(|(w, (x, y))| w * ((x - y) / dt).powi(2))
                    .sum()
            };
            (e[1] - e[0]) / dt
                + rate(mesh.bulk_weights(), &p[1].1.bulk, &p[0].1.bulk)
                + rate(mesh.surface_weights(), &p[1].1.surface, &p[0].1.surface)
        })
        .collect())
}
