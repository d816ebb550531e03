//! Assembled linear operators.
//!
//! Every operator here is the Hessian of a quadratic piece of the discrete
//! energy, so each one is symmetric by construction and shares its stencil
//! with [`crate::energy`]. Joint operators act on `(bulk, surface)` vectors
//! with the bulk block first.

use crate::energy::FieldPair;
use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, weighted_norm_sq, CsrMatrix, ProfileLdlt, TripletBuilder};
use crate::mesh::{Mesh, TRACE_WEIGHTS};
use crate::nonlinearity::NonlinearitySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// `-Δ` with the Robin closure `K⁻¹ ⟨u|_Γ, ·⟩_Γ` (bulk block only).
    BulkLaplacianRobin,
    /// `-Δ_Γ` on the boundary.
    SurfaceLaplacian,
    /// `⟨∇w,∇p⟩ + K⁻¹⟨w,p⟩_Γ`.
    WentzellRobinStiffness,
    /// `⟨w,p⟩ + K⁻¹⟨w,p⟩_Γ`.
    WentzellRobinMass,
    /// `-Δ_Γ + I`.
    SurfaceShifted,
    SurfaceMass,
    /// Linearisation of the energy gradient at a state (joint space).
    Linearized,
    /// Gram matrix of the `H¹(Ω) × H¹(Γ)` inner product (joint space).
    VGram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMeta {
    pub kind: OperatorKind,
    pub k: Option<f64>,
    pub geometry_hash: String,
}

/// Symmetric sparse operator with its diagonal quadrature-weight companion.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub matrix: CsrMatrix,
    pub mass: Vec<f64>,
    pub meta: OperatorMeta,
}

impl DiscreteOperator {
    fn new(
        matrix: CsrMatrix,
        mass: Vec<f64>,
        kind: OperatorKind,
        k: Option<f64>,
        mesh: &Mesh,
    ) -> Self {
        Self {
            matrix,
            mass,
            meta: OperatorMeta {
                kind,
                k,
                geometry_hash: mesh.hash(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Strong-form action `mass⁻¹ · A x`.
    pub fn action(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .mul_vec(x)
            .into_iter()
            .zip(&self.mass)
            .map(|(v, w)| v / w)
            .collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.matrix.max_asymmetry()
    }

    /// Header line plus `row col value` triplets.
    pub fn dump(&self) -> String {
        format!(
            "# {:?} K={:?} geometry={} dim={}\n{}",
            self.meta.kind,
            self.meta.k,
            self.meta.geometry_hash,
            self.dim(),
            self.matrix.to_triplet_text()
        )
    }
}

/// Coefficient representation of a linear functional on the joint space:
/// pairing with a field is the plain dot product of nodal values.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector {
    pub bulk: Vec<f64>,
    pub surface: Vec<f64>,
}

impl DualVector {
    pub fn zeros(mesh: &Mesh) -> Self {
        Self {
            bulk: vec![0.0; mesh.n_bulk()],
            surface: vec![0.0; mesh.n_surface()],
        }
    }

    pub fn pair(&self, field: &FieldPair) -> f64 {
        dot(&self.bulk, &field.bulk) + dot(&self.surface, &field.surface)
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
}

pub(crate) fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::Config("K must be positive".into()))
    }
}

pub(crate) fn trace_row(mesh: &Mesh, j: usize) -> [(usize, f64); 2] {
    let (o, i) = mesh.boundary_map()[j];
    [(o, TRACE_WEIGHTS.0), (i, TRACE_WEIGHTS.1)]
}

fn add_bulk_dirichlet(mesh: &Mesh, b: &mut TripletBuilder) {
    for e in mesh.bulk_edges() {
        b.add_link(e.a, e.b, e.coeff);
    }
}

fn add_boundary_penalty(mesh: &Mesh, b: &mut TripletBuilder, scale: f64) {
    for (j, w) in mesh.surface_weights().iter().enumerate() {
        b.add_outer(&trace_row(mesh, j), scale * w);
    }
}

/// Bulk Dirichlet stiffness (no boundary term).
pub fn bulk_dirichlet_matrix(mesh: &Mesh) -> CsrMatrix {
    let mut b = TripletBuilder::new(mesh.n_bulk());
    add_bulk_dirichlet(mesh, &mut b);
    b.build()
}

/// Surface Dirichlet stiffness; the zero matrix on the interval.
pub fn surface_dirichlet_matrix(mesh: &Mesh) -> CsrMatrix {
    let mut b = TripletBuilder::new(mesh.n_surface());
    for e in mesh.surface_edges() {
        b.add_link(e.a, e.b, e.coeff);
    }
    // keep the diagonal pattern present even for the interval
    for i in 0..mesh.n_surface() {
        b.add(i, i, 0.0);
    }
    b.build()
}

/// Bulk `-Δ` with Robin closure. Acting on `u` it returns the bulk block
/// `S u + K⁻¹ Tᵀ W_Γ T u`; the caller supplies `-K⁻¹ Tᵀ W_Γ h(φ)` as a source.
pub fn assemble_bulk_laplacian(mesh: &Mesh, k: f64) -> Result<DiscreteOperator> {
    check_k(k)?;
    let mut b = TripletBuilder::new(mesh.n_bulk());
    add_bulk_dirichlet(mesh, &mut b);
    add_boundary_penalty(mesh, &mut b, 1.0 / k);
    Ok(DiscreteOperator::new(
        b.build(),
        mesh.bulk_weights().to_vec(),
        OperatorKind::BulkLaplacianRobin,
        Some(k),
        mesh,
    ))
}

pub fn assemble_surface_laplacian(mesh: &Mesh) -> DiscreteOperator {
    DiscreteOperator::new(
        surface_dirichlet_matrix(mesh),
        mesh.surface_weights().to_vec(),
        OperatorKind::SurfaceLaplacian,
        None,
        mesh,
    )
}

/// Generalised pair for `-Δw = λw` in Ω, `∂_ν w + K⁻¹ w = λ K⁻¹ w` on Γ.
pub fn assemble_wentzell_robin_pair(
    mesh: &Mesh,
    k: f64,
) -> Result<(DiscreteOperator, DiscreteOperator)> {
    check_k(k)?;
    let mut stiff = assemble_bulk_laplacian(mesh, k)?;
    stiff.meta.kind = OperatorKind::WentzellRobinStiffness;
    let mut b = TripletBuilder::new(mesh.n_bulk());
    for (i, &w) in mesh.bulk_weights().iter().enumerate() {
        b.add(i, i, w);
    }
    add_boundary_penalty(mesh, &mut b, 1.0 / k);
    let mass = DiscreteOperator::new(
        b.build(),
        mesh.bulk_weights().to_vec(),
        OperatorKind::WentzellRobinMass,
        Some(k),
        mesh,
    );
    Ok((stiff, mass))
}

/// Generalised pair for `A_Γ = -Δ_Γ + I` against the surface mass.
pub fn assemble_surface_shifted_pair(mesh: &Mesh) -> (DiscreteOperator, DiscreteOperator) {
    let w = mesh.surface_weights();
    let stiff = DiscreteOperator::new(
        surface_dirichlet_matrix(mesh).add_diagonal(w),
        w.to_vec(),
        OperatorKind::SurfaceShifted,
        None,
        mesh,
    );
    let mass = DiscreteOperator::new(
        CsrMatrix::from_diagonal(w),
        w.to_vec(),
        OperatorKind::SurfaceMass,
        None,
        mesh,
    );
    (stiff, mass)
}

/// The linearised operator together with its pointwise reaction
/// coefficients (per unit quadrature weight).
#[derive(Debug, Clone)]
pub struct Linearized {
    pub operator: DiscreteOperator,
    /// `f'(u)` at each bulk node.
    pub bulk_reaction: Vec<f64>,
    /// `f_Γ'(φ) + K⁻¹ h'(φ)² + K⁻¹ h''(φ)(h(φ) - u|_Γ)` at each surface node.
    pub surface_reaction: Vec<f64>,
}

/// Hessian of the discrete energy at `state`; the quadratic form is the
/// discrete counterpart of `⟨L g, k⟩` with the reaction terms `f'`, `f_Γ'`,
/// the coupled Robin term `K⁻¹ (g₁ - h' g₂)(k₁ - h' k₂)` and the curvature
/// term `K⁻¹ h''(h(φ) - u) g₂ k₂`.
pub fn assemble_linearized(
    mesh: &Mesh,
    spec: &NonlinearitySpec,
    state: &FieldPair,
    k: f64,
) -> Result<Linearized> {
    check_k(k)?;
    state.check(mesh)?;
    let nb = mesh.n_bulk();
    let mut b = TripletBuilder::new(mesh.n_total());
    add_bulk_dirichlet(mesh, &mut b);
    let bulk_reaction: Vec<f64> = state.bulk.iter().map(|&u| spec.f_prime(u)).collect();
    for (i, (&w, &r)) in mesh.bulk_weights().iter().zip(&bulk_reaction).enumerate() {
        b.add(i, i, w * r);
    }
    for e in mesh.surface_edges() {
        b.add_link(nb + e.a, nb + e.b, e.coeff);
    }
    let mut surface_reaction = Vec::with_capacity(mesh.n_surface());
    for (j, &w) in mesh.surface_weights().iter().enumerate() {
        let phi = state.surface[j];
        let hp = spec.h_prime(phi);
        let mismatch = mesh.trace_at(&state.bulk, j) - spec.h(phi);
        let robin = (hp * hp - spec.h_second(phi) * mismatch) / k;
        let reaction = spec.f_surface_prime(phi) + robin;
        surface_reaction.push(reaction);
        b.add(nb + j, nb + j, w * reaction);
        let t = trace_row(mesh, j);
        b.add_outer(&t, w / k);
        for &(c, a) in &t {
            b.add(c, nb + j, -w * hp * a / k);
            b.add(nb + j, c, -w * hp * a / k);
        }
    }
    let mut mass = mesh.bulk_weights().to_vec();
    mass.extend_from_slice(mesh.surface_weights());
    Ok(Linearized {
        operator: DiscreteOperator::new(b.build(), mass, OperatorKind::Linearized, Some(k), mesh),
        bulk_reaction,
        surface_reaction,
    })
}

/// Gram matrix of `(·,·)_V = (·,·)_{H¹(Ω)} + (·,·)_{H¹(Γ)}` on the joint
/// space, Neumann closure for the bulk block.
pub fn assemble_v_gram(mesh: &Mesh) -> DiscreteOperator {
    let bulk = bulk_dirichlet_matrix(mesh).add_diagonal(mesh.bulk_weights());
    let surf = surface_dirichlet_matrix(mesh).add_diagonal(mesh.surface_weights());
    let mut mass = mesh.bulk_weights().to_vec();
    mass.extend_from_slice(mesh.surface_weights());
    DiscreteOperator::new(
        CsrMatrix::block(&bulk, &surf, &[]),
        mass,
        OperatorKind::VGram,
        None,
        mesh,
    )
}

/// Norms on the joint space. Holds the factorised `V` Gram matrix so the
/// dual norm `‖·‖_{V'}` costs one back-substitution.
#[derive(Debug, Clone)]
pub struct Norms {
    gram: DiscreteOperator,
    factor: ProfileLdlt,
    bulk_stiff: CsrMatrix,
    surface_stiff: CsrMatrix,
    nb: usize,
}

impl Norms {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let gram = assemble_v_gram(mesh);
        let factor = ProfileLdlt::factor_spd(&gram.matrix)?;
        Ok(Self {
            gram,
            factor,
            bulk_stiff: bulk_dirichlet_matrix(mesh),
            surface_stiff: surface_dirichlet_matrix(mesh),
            nb: mesh.n_bulk(),
        })
    }

    pub fn gram(&self) -> &DiscreteOperator {
        &self.gram
    }

    /// `(‖u‖²_{L²(Ω)}, ‖φ‖²_{L²(Γ)})`.
    pub fn h_parts_sq(&self, x: &FieldPair) -> (f64, f64) {
        let (wb, ws) = self.gram.mass.split_at(self.nb);
        (
            weighted_norm_sq(wb, &x.bulk),
            weighted_norm_sq(ws, &x.surface),
        )
    }

    pub fn h_norm(&self, x: &FieldPair) -> f64 {
        let (a, b) = self.h_parts_sq(x);
        (a + b).sqrt()
    }

    pub fn v_norm(&self, x: &FieldPair) -> f64 {
        let j = x.to_joint();
        self.gram.matrix.quad_form(&j, &j).max(0.0).sqrt()
    }

    /// Graph norm `‖x‖_V² + ‖Δ_h x‖_H²` of the discrete Laplacians, the
    /// discrete stand-in for the `H² × H²` norm.
    pub fn w_norm(&self, x: &FieldPair) -> f64 {
        let (wb, ws) = self.gram.mass.split_at(self.nb);
        let lb: Vec<f64> = self
            .bulk_stiff
            .mul_vec(&x.bulk)
            .iter()
            .zip(wb)
            .map(|(v, w)| v / w)
            .collect();
        let ls: Vec<f64> = self
            .surface_stiff
            .mul_vec(&x.surface)
            .iter()
            .zip(ws)
            .map(|(v, w)| v / w)
            .collect();
        let v = self.v_norm(x);
        (v * v + weighted_norm_sq(wb, &lb) + weighted_norm_sq(ws, &ls)).sqrt()
    }

    /// Riesz representative `r` with `(r, k)_V = ⟨g, k⟩` for all `k`.
    pub fn riesz(&self, g: &DualVector) -> Result<Vec<f64>> {
        let rhs = g.to_joint();
        check_len("functional", self.factor.dim(), rhs.len())?;
        let r = self.factor.solve(&rhs);
        let res = self.gram.matrix.mul_vec(&r);
        let scale = rhs
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let err = res
            .iter()
            .zip(&rhs)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale;
        if err > 1e-8 {
            return Err(Error::Numerical {
                message: "Riesz solve did not reach the residual target".into(),
                residual: err,
            });
        }
        Ok(r)
    }

    pub fn dual_norm(&self, g: &DualVector) -> Result<f64> {
        let r = self.riesz(g)?;
        Ok(dot(&g.to_joint(), &r).max(0.0).sqrt())
    }
}

/// `‖functional‖_{V'}` through the discrete Riesz problem.
pub fn riesz_dual_norm(mesh: &Mesh, functional: &DualVector) -> Result<f64> {
    Norms::new(mesh)?.dual_norm(functional)
}
