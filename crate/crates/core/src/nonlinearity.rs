//! Analytic nonlinearities of the bulk-surface system.
//!
//! A [`NonlinearitySpec`] bundles the bulk potential `F` (with `f = F'`),
//! the surface potential `F_Γ` (with `f_Γ = F_Γ'`) and the Robin coupling
//! function `h`. All families are closed-form, so every derivative used by
//! the solvers is evaluated exactly.
//!
//! The structural hypotheses placed on these functions (bounded `h'`, `h''`,
//! polynomial growth of `f''`, `f_Γ''`, `h'''`, linear coercivity of the
//! potentials and semiconvexity `f' ≥ -c_4`) are checked on a sampling grid
//! by [`validate_assumptions`].

use crate::error::{Error, Result};

/// Bulk or surface potential family. Values are `F`; derivatives are
/// `f = F'`, `f'` and `f''`.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    /// `F(s) = (1 - s²)² / 4`.
    DoubleWell,
    /// `F(s) = scale · (s² - well²)² / 4`.
    ScaledDoubleWell { scale: f64, well: f64 },
    /// `F(s) = Σ c_k s^k`, coefficients in ascending powers.
    Polynomial(Vec<f64>),
    /// `F(s) = exp(rate · s)`. Violates the linear lower bound; kept as a
    /// counterexample for the assumption checks.
    Exponential { rate: f64 },
}

/// Coupling function `h` entering the Robin relation `K ∂_ν u + u = h(φ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// `h(s) = slope · s + offset`.
    Affine { slope: f64, offset: f64 },
    /// `h(s) = amplitude · tanh(rate · s)`.
    Tanh { amplitude: f64, rate: f64 },
    /// `h(s) = Σ c_k s^k`, coefficients in ascending powers.
    Polynomial(Vec<f64>),
}

fn poly_derivative(coeffs: &[f64], order: usize, s: f64) -> f64 {
    let mut acc = 0.0;
    for k in (order..coeffs.len()).rev() {
        let mut factor = 1.0;
        for j in 0..order {
            factor *= (k - j) as f64;
        }
        acc = acc * s + factor * coeffs[k];
    }
    acc
}

fn poly_degree(coeffs: &[f64]) -> usize {
    coeffs.iter().rposition(|&c| c != 0.0).unwrap_or(0)
}

impl Potential {
    /// `order = 0` gives `F`, 1 gives `f`, 2 gives `f'`, 3 gives `f''`.
    pub fn derivative(&self, order: usize, s: f64) -> f64 {
        match self {
            Potential::DoubleWell => match order {
                0 => 0.25 * (1.0 - s * s) * (1.0 - s * s),
                1 => s * s * s - s,
                2 => 3.0 * s * s - 1.0,
                3 => 6.0 * s,
                4 => 6.0,
                _ => 0.0,
            },
            Potential::ScaledDoubleWell { scale, well } => {
                let w2 = well * well;
                match order {
                    0 => 0.25 * scale * (s * s - w2) * (s * s - w2),
                    1 => scale * s * (s * s - w2),
                    2 => scale * (3.0 * s * s - w2),
                    3 => 6.0 * scale * s,
                    4 => 6.0 * scale,
                    _ => 0.0,
                }
            }
            Potential::Polynomial(c) => poly_derivative(c, order, s),
            Potential::Exponential { rate } => rate.powi(order as i32) * (rate * s).exp(),
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        self.derivative(0, s)
    }

    /// Exponent `p` with `|f''(s)| ≤ c (1 + |s|^p)`; `None` for
    /// super-polynomial growth.
    pub fn second_derivative_growth(&self) -> Option<f64> {
        match self {
            Potential::DoubleWell => Some(1.0),
            Potential::ScaledDoubleWell { scale, .. } => {
                Some(if *scale == 0.0 { 0.0 } else { 1.0 })
            }
            Potential::Polynomial(c) => Some(poly_degree(c).saturating_sub(3) as f64),
            Potential::Exponential { rate } => {
                if *rate == 0.0 {
                    Some(0.0)
                } else {
                    None
                }
            }
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        let finite = match self {
            Potential::DoubleWell => true,
            Potential::ScaledDoubleWell { scale, well } => scale.is_finite() && well.is_finite(),
            Potential::Polynomial(c) => !c.is_empty() && c.iter().all(|x| x.is_finite()),
            Potential::Exponential { rate } => rate.is_finite(),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{what} potential has non-finite or empty parameters"
            )))
        }
    }
}

impl Coupling {
    /// `order = 0` gives `h`, 1 gives `h'`, 2 gives `h''`, 3 gives `h'''`.
    pub fn derivative(&self, order: usize, s: f64) -> f64 {
        match self {
            Coupling::Affine { slope, offset } => match order {
                0 => slope * s + offset,
                1 => *slope,
                _ => 0.0,
            },
            Coupling::Tanh { amplitude, rate } => {
                let t = (rate * s).tanh();
                let sech2 = 1.0 - t * t;
                match order {
                    0 => amplitude * t,
                    1 => amplitude * rate * sech2,
                    2 => -2.0 * amplitude * rate * rate * t * sech2,
                    3 => -2.0 * amplitude * rate.powi(3) * sech2 * (1.0 - 3.0 * t * t),
                    _ => unimplemented!("tanh coupling derivatives above third order"),
                }
            }
            Coupling::Polynomial(c) => poly_derivative(c, order, s),
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        self.derivative(0, s)
    }

    /// Closed-form `sup_R |h^{(order)}|` for `order ∈ {1, 2}`, or `None`
    /// when the derivative is unbounded.
    pub fn derivative_bound(&self, order: usize) -> Option<f64> {
        match self {
            Coupling::Affine { slope, .. } => Some(if order == 1 { slope.abs() } else { 0.0 }),
            Coupling::Tanh { amplitude, rate } => {
                let a = amplitude.abs();
                let b = rate.abs();
                match order {
                    1 => Some(a * b),
                    // max of 2 t (1 - t²) at t = 1/√3
                    2 => Some(a * b * b * 4.0 / (3.0 * 3f64.sqrt())),
                    3 => Some(2.0 * a * b.powi(3)),
                    _ => None,
                }
            }
            Coupling::Polynomial(c) => {
                let d = poly_degree(c);
                if d <= order {
                    Some(if d == order {
                        let mut f = 1.0;
                        for j in 1..=order {
                            f *= j as f64;
                        }
                        (f * c[d]).abs()
                    } else {
                        0.0
                    })
                } else {
                    None
                }
            }
        }
    }

    /// Exponent `q` with `|h'''(s)| ≤ c (1 + |s|^q)`.
    pub fn third_derivative_growth(&self) -> f64 {
        match self {
            Coupling::Affine { .. } | Coupling::Tanh { .. } => 0.0,
            Coupling::Polynomial(c) => poly_degree(c).saturating_sub(3) as f64,
        }
    }

    pub fn affine_parameters(&self) -> Option<(f64, f64)> {
        match self {
            Coupling::Affine { slope, offset } => Some((*slope, *offset)),
            Coupling::Polynomial(c) if poly_degree(c) <= 1 => {
                Some((c.get(1).copied().unwrap_or(0.0), c[0]))
            }
            _ => None,
        }
    }

    fn check(&self) -> Result<()> {
        let finite = match self {
            Coupling::Affine { slope, offset } => slope.is_finite() && offset.is_finite(),
            Coupling::Tanh { amplitude, rate } => amplitude.is_finite() && rate.is_finite(),
            Coupling::Polynomial(c) => !c.is_empty() && c.iter().all(|x| x.is_finite()),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Config(
                "coupling has non-finite or empty parameters".into(),
            ))
        }
    }
}

/// Which function of the spec to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// `F`
    BulkPotential,
    /// `f`
    Bulk,
    /// `f'`
    BulkPrime,
    /// `f''`
    BulkSecond,
    /// `F_Γ`
    SurfacePotential,
    /// `f_Γ`
    Surface,
    /// `f_Γ'`
    SurfacePrime,
    /// `h`
    Coupling,
    /// `h'`
    CouplingPrime,
    /// `h''`
    CouplingSecond,
}

/// Nonlinearities of the system. Construction checks that every parameter
/// is finite; the analytic hypotheses are checked separately by
/// [`validate_assumptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearitySpec {
    bulk: Potential,
    surface: Potential,
    coupling: Coupling,
}

impl NonlinearitySpec {
    pub fn new(bulk: Potential, surface: Potential, coupling: Coupling) -> Result<Self> {
        bulk.check("bulk")?;
        surface.check("surface")?;
        coupling.check()?;
        Ok(Self {
            bulk,
            surface,
            coupling,
        })
    }

    /// Double-well bulk and surface potentials with `h(s) = slope·s + offset`.
    pub fn double_well_affine(slope: f64, offset: f64) -> Self {
        Self::new(
            Potential::DoubleWell,
            Potential::DoubleWell,
            Coupling::Affine { slope, offset },
        )
        .expect("finite parameters")
    }

    pub fn bulk(&self) -> &Potential {
        &self.bulk
    }

    pub fn surface(&self) -> &Potential {
        &self.surface
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    #[inline]
    pub fn f(&self, s: f64) -> f64 {
        self.bulk.derivative(1, s)
    }
    #[inline]
    pub fn f_prime(&self, s: f64) -> f64 {
        self.bulk.derivative(2, s)
    }
    #[inline]
    pub fn f_surface(&self, s: f64) -> f64 {
        self.surface.derivative(1, s)
    }
    #[inline]
    pub fn f_surface_prime(&self, s: f64) -> f64 {
        self.surface.derivative(2, s)
    }
    #[inline]
    pub fn h(&self, s: f64) -> f64 {
        self.coupling.derivative(0, s)
    }
    #[inline]
    pub fn h_prime(&self, s: f64) -> f64 {
        self.coupling.derivative(1, s)
    }
    #[inline]
    pub fn h_second(&self, s: f64) -> f64 {
        self.coupling.derivative(2, s)
    }

    pub fn eval(&self, which: Selector, s: f64) -> f64 {
        match which {
            Selector::BulkPotential => self.bulk.derivative(0, s),
            Selector::Bulk => self.bulk.derivative(1, s),
            Selector::BulkPrime => self.bulk.derivative(2, s),
            Selector::BulkSecond => self.bulk.derivative(3, s),
            Selector::SurfacePotential => self.surface.derivative(0, s),
            Selector::Surface => self.surface.derivative(1, s),
            Selector::SurfacePrime => self.surface.derivative(2, s),
            Selector::Coupling => self.coupling.derivative(0, s),
            Selector::CouplingPrime => self.coupling.derivative(1, s),
            Selector::CouplingSecond => self.coupling.derivative(2, s),
        }
    }
}

/// Free-function form of [`NonlinearitySpec::eval`].
pub fn eval_nonlinearity(spec: &NonlinearitySpec, which: Selector, s: f64) -> f64 {
    spec.eval(which, s)
}

/// One clause of the analytic hypotheses with its sampled witness.
#[derive(Debug, Clone)]
pub struct ClauseCheck {
    pub clause: &'static str,
    pub passed: bool,
    pub witness: String,
}

/// Constants realised on the scan grid.
#[derive(Debug, Clone, Copy, Default)]
pub struct AssumptionConstants {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub p: f64,
    pub q: f64,
    /// Growth exponent of `h'''`; stored separately from `q`.
    pub q_coupling: f64,
    pub h_prime_bound: f64,
    pub h_second_bound: f64,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub accepted: bool,
    pub clauses: Vec<ClauseCheck>,
    pub constants: AssumptionConstants,
    pub scan_range: (f64, f64),
    pub scan_points: usize,
}

impl ValidationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "accepted = {}\nscan_range = [{}, {}]\nscan_points = {}\n",
            self.accepted, self.scan_range.0, self.scan_range.1, self.scan_points
        ));
        let c = &self.constants;
        out.push_str(&format!(
            "c0 = {}\nc1 = {}\nc2 = {}\nc3 = {}\nc4 = {}\np = {}\nq = {}\nq_coupling = {}\nsup_h_prime = {}\nsup_h_second = {}\n",
            c.c0, c.c1, c.c2, c.c3, c.c4, c.p, c.q, c.q_coupling, c.h_prime_bound, c.h_second_bound
        ));
        for cl in &self.clauses {
            out.push_str(&format!(
                "[{}] {}: {}\n",
                if cl.passed { "pass" } else { "FAIL" },
                cl.clause,
                cl.witness
            ));
        }
        out
    }
}

struct PotentialScan {
    c0: f64,
    p: Option<f64>,
    c1: f64,
    c2: f64,
    c4: f64,
    min_fprime_at_end: bool,
    max_fd_error: f64,
}

fn scan_potential(pot: &Potential, grid: &[f64], c3: f64) -> PotentialScan {
    let p = pot.second_derivative_growth();
    let mut c0: f64 = 0.0;
    if let Some(p) = p {
        for &s in grid {
            c0 = c0.max(pot.derivative(3, s).abs() / (1.0 + s.abs().powf(p)));
        }
    }

    // Linear lower bound F(s) ≥ c1 |s| - c2 beyond |s| = c3: the secant slope
    // of F in |s| between c3 and the scan end must be positive on both sides.
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    let slope_right = if hi > c3 {
        (pot.value(hi) - pot.value(c3)) / (hi - c3)
    } else {
        f64::INFINITY
    };
    let slope_left = if lo < -c3 {
        (pot.value(lo) - pot.value(-c3)) / (-lo - c3)
    } else {
        f64::INFINITY
    };
    let c1 = slope_right.min(slope_left);
    let mut c2 = f64::NEG_INFINITY;
    for &s in grid.iter().filter(|s| s.abs() > c3) {
        c2 = c2.max(c1 * s.abs() - pot.value(s));
    }

    let (mut min_fp, mut argmin) = (f64::INFINITY, 0);
    for (i, &s) in grid.iter().enumerate() {
        let v = pot.derivative(2, s);
        if v < min_fp {
            min_fp = v;
            argmin = i;
        }
    }
    let min_fprime_at_end = argmin == 0 || argmin == grid.len() - 1;
    if !min_fprime_at_end {
        // golden-section refinement between the neighbouring samples
        let g = |s: f64| pot.derivative(2, s);
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (grid[argmin - 1], grid[argmin + 1]);
        for _ in 0..100 {
            let (x1, x2) = (b - r * (b - a), a + r * (b - a));
            if g(x1) < g(x2) {
                b = x2
            } else {
                a = x1
            }
        }
        min_fp = min_fp.min(g(0.5 * (a + b)));
    }

    let step = 1e-5;
    let mut max_fd_error: f64 = 0.0;
    for &s in grid.iter().filter(|s| s.abs() <= 10.0) {
        let fd = (pot.value(s + step) - pot.value(s - step)) / (2.0 * step);
        let f = pot.derivative(1, s);
        max_fd_error = max_fd_error.max((fd - f).abs() / f.abs().max(1.0));
    }

    PotentialScan {
        c0,
        p,
        c1,
        c2: c2.max(0.0),
        c4: (-min_fp).max(0.0),
        min_fprime_at_end,
        max_fd_error,
    }
}

/// Sampled check of the analytic hypotheses on `scan_range` with
/// `scan_points` equispaced samples. Failures are reported, never raised.
pub fn validate_assumptions(
    spec: &NonlinearitySpec,
    scan_range: (f64, f64),
    scan_points: usize,
) -> ValidationReport {
    let n = scan_points.max(1000);
    let (a, b) = scan_range;
    let grid: Vec<f64> = (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect();
    let c3 = 0.5 * a.abs().min(b.abs());
    let mut clauses = Vec::new();

    // Coupling: h', h'' bounded by stored finite bounds, h''' polynomial growth.
    let h = spec.coupling();
    let mut h_bounds = [0.0; 2];
    for (slot, order) in [(0usize, 1usize), (1, 2)] {
        let sampled = grid
            .iter()
            .map(|&s| h.derivative(order, s).abs())
            .fold(0.0, f64::max);
        let name = if order == 1 {
            "h' bounded"
        } else {
            "h'' bounded"
        };
        match h.derivative_bound(order) {
            Some(bound) => {
                h_bounds[slot] = bound;
                clauses.push(ClauseCheck {
                    clause: name,
                    passed: sampled <= bound * (1.0 + 1e-12) + 1e-300,
                    witness: format!("sampled sup = {sampled:e}, stored bound = {bound:e}"),
                });
            }
            None => {
                h_bounds[slot] = f64::INFINITY;
                clauses.push(ClauseCheck {
                    clause: name,
                    passed: false,
                    witness: format!("unbounded family; sampled sup on grid = {sampled:e}"),
                });
            }
        }
    }
    let q_h = h.third_derivative_growth();
    let c_h3 = grid
        .iter()
        .map(|&s| h.derivative(3, s).abs() / (1.0 + s.abs().powf(q_h)))
        .fold(0.0, f64::max);
    clauses.push(ClauseCheck {
        clause: "h''' polynomial growth",
        passed: c_h3.is_finite(),
        witness: format!("|h'''| <= {c_h3:e} (1 + |s|^{q_h})"),
    });

    let bulk = scan_potential(spec.bulk(), &grid, c3);
    let surf = scan_potential(spec.surface(), &grid, c3);

    let growth_clause = |name: &'static str, scan: &PotentialScan, limit: Option<f64>| {
        let passed = match (scan.p, limit) {
            (Some(p), Some(lim)) => p < lim && scan.c0.is_finite(),
            (Some(_), None) => scan.c0.is_finite(),
            (None, _) => false,
        };
        ClauseCheck {
            clause: name,
            passed,
            witness: match scan.p {
                Some(p) => format!("|f''| <= {:e} (1 + |s|^{p})", scan.c0),
                None => "super-polynomial growth of the second derivative".into(),
            },
        }
    };
    clauses.push(growth_clause("f'' growth, p in [0,3)", &bulk, Some(3.0)));
    clauses.push(growth_clause("f_G'' growth, q in [0,inf)", &surf, None));

    for (name, scan) in [
        ("F >= c1|s| - c2 for |s| > c3", &bulk),
        ("F_G >= c1|s| - c2 for |s| > c3", &surf),
    ] {
        clauses.push(ClauseCheck {
            clause: name,
            passed: scan.c1 > 0.0,
            witness: format!("c1 = {:e}, c2 = {:e}, c3 = {c3}", scan.c1, scan.c2),
        });
    }
    for (name, scan) in [("f' >= -c4", &bulk), ("f_G' >= -c4", &surf)] {
        clauses.push(ClauseCheck {
            clause: name,
            passed: !scan.min_fprime_at_end,
            witness: if scan.min_fprime_at_end {
                format!(
                    "minimum {:e} attained at the scan boundary (unbounded below)",
                    -scan.c4
                )
            } else {
                format!("c4 = {:e}", scan.c4)
            },
        });
    }
    for (name, scan) in [("F' = f", &bulk), ("F_G' = f_G", &surf)] {
        clauses.push(ClauseCheck {
            clause: name,
            passed: scan.max_fd_error < 1e-8,
            witness: format!(
                "max relative central-difference error {:e}",
                scan.max_fd_error
            ),
        });
    }

    let constants = AssumptionConstants {
        c0: bulk.c0.max(surf.c0),
        c1: bulk.c1.min(surf.c1),
        c2: bulk.c2.max(surf.c2),
        c3,
        c4: bulk.c4.max(surf.c4),
        p: bulk.p.unwrap_or(f64::INFINITY),
        q: surf.p.unwrap_or(f64::INFINITY),
        q_coupling: q_h,
        h_prime_bound: h_bounds[0],
        h_second_bound: h_bounds[1],
    };
    ValidationReport {
        accepted: clauses.iter().all(|c| c.passed),
        clauses,
        constants,
        scan_range,
        scan_points: n,
    }
}
