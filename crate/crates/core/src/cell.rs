//! Exterior Neumann problem and the rescaled periodic cell problem.
//!
//! Both are posed as `(½I + K*)φ = −N^k` on `∂T` with the free-space or the
//! periodic adjoint double-layer operator; the fields are single layers
//! `w⁰_k = S[φ⁰_k]` and `χ̃_k = S_p^η[φ_k]` on the rescaled torus `(1/η)T²`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{HoleShape, Point};
use crate::green::{GreenEta, TorusGreen};
use crate::layer::{
    assemble_free, assemble_periodic, neumann_series_inverse, BoundaryDensity, FieldEvaluator, NystromOperator,
    OperatorKind, PotentialKind, SingleLayerTrace,
};
use crate::linalg::DenseSolver;
use crate::volume::{cell_exterior, hole_interior};

/// Free-space operators and the factorized `½I + K*` of one shape.
pub struct FreeOperators {
    pub s: NystromOperator,
    pub kstar: NystromOperator,
    pub solver: DenseSolver,
}

impl FreeOperators {
    pub fn new(shape: &HoleShape) -> Result<Self> {
        let s = assemble_free(shape, OperatorKind::S)?;
        let kstar = assemble_free(shape, OperatorKind::Kstar)?;
        let solver = DenseSolver::new(&kstar.shifted(0.5))?;
        Ok(FreeOperators { s, kstar, solver })
    }
}

fn neumann_rhs(shape: &HoleShape, k: usize) -> Vec<f64> {
    shape.normal_component(k).into_iter().map(|v| -v).collect()
}

fn residual(op: &NystromOperator, phi: &[f64], rhs: &[f64]) -> f64 {
    op.apply(phi)
        .iter()
        .zip(phi)
        .zip(rhs)
        .map(|((a, p), r)| (a + 0.5 * p - r).abs())
        .fold(0.0, f64::max)
}

fn require_planar(shape: &HoleShape) -> Result<()> {
    if shape.dim != 2 || shape.components.is_empty() {
        return Err(Error::Unsupported("boundary-integral solves need a two-dimensional curve shape".into()));
    }
    Ok(())
}

pub struct ExteriorSolution {
    pub shape: HoleShape,
    /// `φ⁰_k` for `k = 0, 1`.
    pub densities: Vec<BoundaryDensity>,
    pub residual: f64,
    pub ops: FreeOperators,
}

impl ExteriorSolution {
    /// `w⁰_k` at the boundary nodes.
    pub fn boundary_values(&self, k: usize) -> Vec<f64> {
        self.ops.s.apply(&self.densities[k].values)
    }

    /// Exterior trace of `w⁰_k` and its gradient.
    pub fn trace(&self, k: usize) -> SingleLayerTrace {
        SingleLayerTrace::new(&self.shape, &self.ops.s, &self.ops.kstar, &self.densities[k].values, 1.0)
    }

    /// `w⁰_k` off the boundary.
    pub fn evaluator(&self, k: usize) -> Result<FieldEvaluator<'_, 'static>> {
        FieldEvaluator::new(&self.shape, self.densities[k].values.clone(), PotentialKind::S)
    }
}

/// Solves `(½I + K*)φ⁰_k = −N^k` for both directions.
pub fn solve_exterior(shape: &HoleShape) -> Result<ExteriorSolution> {
    require_planar(shape)?;
    let ops = FreeOperators::new(shape)?;
    let mut densities = Vec::new();
    let mut res = 0.0_f64;
    for k in 0..2 {
        let rhs = neumann_rhs(shape, k);
        let phi = ops.solver.solve(&rhs)?;
        res = res.max(residual(&ops.kstar, &phi, &rhs));
        densities.push(BoundaryDensity::new(phi));
    }
    Ok(ExteriorSolution { shape: shape.clone(), densities, residual: res, ops })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellMethod {
    Direct,
    /// Neumann series truncated after `L` correction terms.
    Series(usize),
}

impl std::fmt::Display for CellMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellMethod::Direct => write!(f, "direct"),
            CellMethod::Series(l) => write!(f, "series:{l}"),
        }
    }
}

impl std::str::FromStr for CellMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "direct" => Ok(CellMethod::Direct),
            t => match t.strip_prefix("series:").or_else(|| t.strip_prefix("series")) {
                Some(l) if !l.is_empty() => l
                    .parse()
                    .map(CellMethod::Series)
                    .map_err(|_| Error::Invalid(format!("bad series length in method {s:?}"))),
                Some(_) => Ok(CellMethod::Series(3)),
                None => Err(Error::Invalid(format!("unknown cell method {s:?}; use direct or series:L"))),
            },
        }
    }
}

pub struct CellSolution {
    pub eta: f64,
    /// `φ_{k,η}` for `k = 0, 1`.
    pub densities: Vec<BoundaryDensity>,
    pub method: CellMethod,
    pub shape: HoleShape,
    /// `‖(½I + K*_p)φ + N^k‖_∞`, maximized over directions.
    pub residual: f64,
    pub green: TorusGreen,
    pub sp: NystromOperator,
    pub kstarp: NystromOperator,
}

impl CellSolution {
    pub fn green_eta(&self) -> GreenEta<'_> {
        GreenEta::new(&self.green, self.eta).expect("eta validated at solve time")
    }

    /// `χ̃_k` at the boundary nodes.
    pub fn chi_tilde_boundary(&self, k: usize) -> Vec<f64> {
        self.sp.apply(&self.densities[k].values)
    }

    /// Exterior trace of `χ̃_k`; its normal part should equal `−N^k`.
    pub fn trace(&self, k: usize) -> SingleLayerTrace {
        SingleLayerTrace::new(&self.shape, &self.sp, &self.kstarp, &self.densities[k].values, 1.0)
    }

    /// `χ̃_k(z)` on the rescaled torus, defined inside the hole by the same single layer.
    pub fn chi_tilde(&self, k: usize) -> Result<FieldEvaluator<'_, '_>> {
        FieldEvaluator::new(&self.shape, self.densities[k].values.clone(), PotentialKind::Sp(self.green_eta()))
    }

    /// `∫_{∂T} N^i χ̃_j` for all `i, j`.
    pub fn boundary_moments(&self) -> [[f64; 2]; 2] {
        let mut m = [[0.0; 2]; 2];
        for j in 0..2 {
            let chi = self.chi_tilde_boundary(j);
            for (i, row) in m.iter_mut().enumerate() {
                let f: Vec<f64> = self.shape.normal_component(i).iter().zip(&chi).map(|(a, b)| a * b).collect();
                row[j] = self.shape.integrate(&f);
            }
        }
        m
    }
}

/// `χ_{k,η}(y) = η χ̃_k(y/η)` on the unit torus.
pub struct ScaledChi<'a> {
    eta: f64,
    inner: FieldEvaluator<'a, 'a>,
}

impl<'a> ScaledChi<'a> {
    pub fn new(sol: &'a CellSolution, k: usize) -> Result<Self> {
        Ok(ScaledChi { eta: sol.eta, inner: sol.chi_tilde(k)? })
    }

    pub fn value(&self, y: Point) -> Result<f64> {
        Ok(self.eta * self.inner.value([y[0] / self.eta, y[1] / self.eta])?)
    }

    /// `∇χ_{k,η}(y) = ∇χ̃_k(y/η)`.
    pub fn value_and_gradient(&self, y: Point) -> Result<(f64, Point)> {
        let (v, g) = self.inner.value_and_gradient([y[0] / self.eta, y[1] / self.eta])?;
        Ok((self.eta * v, g))
    }
}

/// Solves the cell problem building its own operators.
pub fn solve_cell(shape: &HoleShape, eta: f64, method: CellMethod) -> Result<CellSolution> {
    require_planar(shape)?;
    let green = TorusGreen::new(2)?;
    GreenEta::new(&green, eta)?;
    let free = match method {
        CellMethod::Direct => None,
        CellMethod::Series(_) => Some(FreeOperators::new(shape)?),
    };
    solve_cell_with(shape, free.as_ref(), &green, eta, method)
}

/// Cell solve reusing the free-space factorization for the series method.
pub fn solve_cell_with(
    shape: &HoleShape,
    free: Option<&FreeOperators>,
    green: &TorusGreen,
    eta: f64,
    method: CellMethod,
) -> Result<CellSolution> {
    require_planar(shape)?;
    let ge = GreenEta::new(green, eta)?;
    let sp = assemble_periodic(shape, &ge, OperatorKind::SpEta)?;
    let kstarp = assemble_periodic(shape, &ge, OperatorKind::KstarpEta)?;
    let rhs: Vec<Vec<f64>> = (0..2).map(|k| neumann_rhs(shape, k)).collect();
    let densities: Vec<Vec<f64>> = match method {
        CellMethod::Direct => {
            let solver = DenseSolver::new(&kstarp.shifted(0.5))?;
            rhs.iter().map(|b| solver.solve(b)).collect::<Result<_>>()?
        }
        CellMethod::Series(terms) => {
            let owned;
            let free = match free {
                Some(f) => f,
                None => {
                    owned = FreeOperators::new(shape)?;
                    &owned
                }
            };
            let r2 = assemble_periodic(shape, &ge, OperatorKind::R2)?;
            rhs.iter()
                .map(|b| Ok(neumann_series_inverse(&free.solver, &r2, eta, b, terms)?.last().to_vec()))
                .collect::<Result<_>>()?
        }
    };
    let res = densities.iter().zip(&rhs).map(|(p, b)| residual(&kstarp, p, b)).fold(0.0, f64::max);
    Ok(CellSolution {
        eta,
        densities: densities.into_iter().map(BoundaryDensity::new).collect(),
        method,
        shape: shape.clone(),
        residual: res,
        green: green.clone(),
        sp,
        kstarp,
    })
}

/// Norms of one corrector direction.
#[derive(Clone, Debug, Serialize)]
pub struct ChiNorms {
    pub k: usize,
    /// Sampled `sup |χ_{k,η}|` over `T² ∖ ηT`.
    pub sup_chi: f64,
    /// Sampled `sup |∇χ_{k,η}|`.
    pub sup_grad_chi: f64,
    /// `‖χ_{k,η}‖_{L²(T²)}` with the single-layer extension inside the hole.
    pub l2_chi_torus: f64,
    /// `‖∇χ_{k,η}‖_{L²(T²)}`.
    pub l2_grad_chi_torus: f64,
    /// `‖∇χ̃_k‖_{L²((1/η)T² ∖ T)}`.
    pub l2_grad_chi_tilde: f64,
    /// Mean of `χ̃_k` over the rescaled torus.
    pub mean_chi_tilde: f64,
    /// `∫_{cell∖T} |∇χ̃_k|²`.
    pub energy_volume: f64,
    /// `∫_{∂T} N^k χ̃_k`.
    pub energy_boundary: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChiDiagnostics {
    pub eta: f64,
    pub sup_chi: f64,
    pub sup_grad_chi: f64,
    pub l2_chi_torus: f64,
    pub l2_grad_chi_torus: f64,
    pub directions: Vec<ChiNorms>,
}

/// Points per axis of the exterior sampling grid on `T²`.
pub const SUP_GRID: usize = 64;

/// Offset of the near-boundary sampling ring, in node spacings.
const SUP_OFFSET: f64 = 3.0;

pub fn chi_diagnostics(sol: &CellSolution) -> Result<ChiDiagnostics> {
    let eta = sol.eta;
    let shape = &sol.shape;
    let exterior = cell_exterior(shape, 1.0 / eta)?;
    let interior = hole_interior(shape);
    let mut directions = Vec::new();
    for k in 0..2 {
        let ev = sol.chi_tilde(k)?;
        let trace = sol.trace(k);
        let mut sup_v = 0.0_f64;
        let mut sup_g = 0.0_f64;
        for i in 0..shape.n_total() {
            sup_v = sup_v.max(eta * trace.value[i].abs());
            let g = trace.gradient(shape, i);
            sup_g = sup_g.max(g[0].hypot(g[1]));
        }
        for curve in &shape.components {
            let d = SUP_OFFSET * curve.spacing();
            for (p, n) in curve.points.iter().zip(&curve.normals) {
                let (v, g) = ev.value_and_gradient([p[0] + d * n[0], p[1] + d * n[1]])?;
                sup_v = sup_v.max(eta * v.abs());
                sup_g = sup_g.max(g[0].hypot(g[1]));
            }
        }
        let h = 1.0 / SUP_GRID as f64;
        for a in 0..SUP_GRID {
            for b in 0..SUP_GRID {
                let z = [(-0.5 + (a as f64 + 0.5) * h) / eta, (-0.5 + (b as f64 + 0.5) * h) / eta];
                if shape.contains(z) {
                    continue;
                }
                match ev.value_and_gradient(z) {
                    Ok((v, g)) => {
                        sup_v = sup_v.max(eta * v.abs());
                        sup_g = sup_g.max(g[0].hypot(g[1]));
                    }
                    Err(Error::NearBoundary { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let field = |x: Point| -> Result<[f64; 3]> {
            let (v, g) = ev.value_and_gradient(x)?;
            Ok([v * v, g[0] * g[0] + g[1] * g[1], v])
        };
        let [ov2, og2, ov] = exterior.integrate(field)?;
        let [iv2, ig2, iv] = interior.integrate(field)?;
        let cell_area = 1.0 / (eta * eta);
        let nk: Vec<f64> = shape.normal_component(k).iter().zip(&trace.value).map(|(a, b)| a * b).collect();
        directions.push(ChiNorms {
            k,
            sup_chi: sup_v,
            sup_grad_chi: sup_g,
            // ‖χ‖_{L²(T²)} = η²‖χ̃‖_{L²(cell)}, ‖∇χ‖ = η‖∇χ̃‖
            l2_chi_torus: eta * eta * (ov2 + iv2).sqrt(),
            l2_grad_chi_torus: eta * (og2 + ig2).sqrt(),
            l2_grad_chi_tilde: og2.sqrt(),
            mean_chi_tilde: (ov + iv) / cell_area,
            energy_volume: og2,
            energy_boundary: shape.integrate(&nk),
        });
    }
    let max = |f: fn(&ChiNorms) -> f64| directions.iter().map(f).fold(0.0, f64::max);
    Ok(ChiDiagnostics {
        eta,
        sup_chi: max(|d| d.sup_chi),
        sup_grad_chi: max(|d| d.sup_grad_chi),
        l2_chi_torus: max(|d| d.l2_chi_torus),
        l2_grad_chi_torus: max(|d| d.l2_grad_chi_torus),
        directions,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpansionGap {
    pub eta: f64,
    /// `sup_{∂T} |χ̃_k − w⁰_k − η²(Q₁ − S(½I+K*)⁻¹Q₂)φ⁰_k|` over both directions.
    pub corrected: f64,
    /// `sup_{∂T} |χ̃_k − w⁰_k|`.
    pub leading: f64,
}

pub fn chi_expansion_gap(shape: &HoleShape, eta: f64) -> Result<ExpansionGap> {
    if !(eta > 0.0) {
        return Err(Error::Domain("η must be positive".into()));
    }
    let ext = solve_exterior(shape)?;
    let cell = solve_cell(shape, eta, CellMethod::Direct)?;
    chi_expansion_gap_from(&ext, &cell)
}

/// Gap between matching exterior and cell solutions.
pub fn chi_expansion_gap_from(ext: &ExteriorSolution, cell: &CellSolution) -> Result<ExpansionGap> {
    if ext.shape.n_total() != cell.shape.n_total() {
        return Err(Error::Invalid("exterior and cell solutions use different resolutions".into()));
    }
    let shape = &ext.shape;
    let eta = cell.eta;
    let q1 = assemble_free(shape, OperatorKind::Q1)?;
    let q2 = assemble_free(shape, OperatorKind::Q2)?;
    let (mut corrected, mut leading) = (0.0_f64, 0.0_f64);
    for k in 0..2 {
        let phi0 = &ext.densities[k].values;
        let w0 = ext.boundary_values(k);
        let chi = cell.chi_tilde_boundary(k);
        let a = q1.apply(phi0);
        let b = ext.ops.s.apply(&ext.ops.solver.solve(&q2.apply(phi0))?);
        for i in 0..chi.len() {
            let lead = chi[i] - w0[i];
            leading = leading.max(lead.abs());
            corrected = corrected.max((lead - eta * eta * (a[i] - b[i])).abs());
        }
    }
    Ok(ExpansionGap { eta, corrected, leading })
}
