//! Effective tensor `Ā(η)` and the dilute polarization tensor `M`.
//!
//! `ā_ij = δ_ij − η²/(1 − η²|T|) ∫_{∂T} N^i χ̃_j` and `M_ik = ∫_{∂T} N^i w⁰_k`.

use rayon::prelude::*;
use serde::Serialize;

use crate::cell::{solve_cell_with, CellMethod, CellSolution, ExteriorSolution, FreeOperators};
use crate::error::{Error, Result};
use crate::fit::loglog_slope;
use crate::geometry::HoleShape;
use crate::green::TorusGreen;
use crate::volume::{cell_exterior, free_exterior};

pub type Matrix2 = [[f64; 2]; 2];

#[derive(Clone, Debug, Serialize)]
pub struct EffectiveTensor {
    pub eta: f64,
    pub matrix: Matrix2,
    pub shape_id: String,
    /// Boundary nodes per component.
    pub n_nodes: Vec<usize>,
    pub method: String,
}

impl EffectiveTensor {
    pub fn symmetry_defect(&self) -> f64 {
        (self.matrix[0][1] - self.matrix[1][0]).abs()
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        eigenvalues_sym(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// `‖Ā − I‖_max`.
    pub fn distance_to_identity(&self) -> f64 {
        max_abs_diff(&self.matrix, &IDENTITY)
    }
}

pub const IDENTITY: Matrix2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn max_abs_diff(a: &Matrix2, b: &Matrix2) -> f64 {
    (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (a[i][j] - b[i][j]).abs())
        .fold(0.0, f64::max)
}

pub fn eigenvalues_sym(m: &Matrix2) -> [f64; 2] {
    let off = 0.5 * (m[0][1] + m[1][0]);
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let half = 0.5 * (m[0][0] - m[1][1]);
    let r = half.hypot(off);
    [mean - r, mean + r]
}

#[derive(Clone, Debug, Serialize)]
pub struct PolarizationTensor {
    pub dim: usize,
    /// Row-major `d × d`.
    pub matrix: Vec<Vec<f64>>,
}

impl PolarizationTensor {
    pub fn as_matrix2(&self) -> Option<Matrix2> {
        (self.dim == 2).then(|| [[self.matrix[0][0], self.matrix[0][1]], [self.matrix[1][0], self.matrix[1][1]]])
    }

    pub fn symmetry_defect(&self) -> f64 {
        let mut d = 0.0_f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                d = d.max((self.matrix[i][j] - self.matrix[j][i]).abs());
            }
        }
        d
    }
}

/// `M_ik = ∫_{∂T} N^i w⁰_k ds` by boundary quadrature.
pub fn polarization(ext: &ExteriorSolution) -> PolarizationTensor {
    let shape = &ext.shape;
    let mut m = vec![vec![0.0; 2]; 2];
    for k in 0..2 {
        let w = ext.boundary_values(k);
        for (i, row) in m.iter_mut().enumerate() {
            let f: Vec<f64> = shape.normal_component(i).iter().zip(&w).map(|(a, b)| a * b).collect();
            row[k] = shape.integrate(&f);
        }
    }
    PolarizationTensor { dim: 2, matrix: m }
}

/// Closed form `|∂B₁| a^d / (d(d−1)) I = (|T|/2) I` for the analytic sphere.
pub fn sphere_polarization(shape: &HoleShape) -> Result<PolarizationTensor> {
    let a = shape
        .sphere_radius()
        .ok_or_else(|| Error::Unsupported("closed-form polarization needs the analytic sphere shape".into()))?;
    let d = 3.0;
    let value = 4.0 * std::f64::consts::PI * a.powi(3) / (d * (d - 1.0));
    let matrix = (0..3).map(|i| (0..3).map(|j| if i == j { value } else { 0.0 }).collect()).collect();
    Ok(PolarizationTensor { dim: 3, matrix })
}

/// Leading-order `I − η³M` for the analytic sphere; the three-dimensional cell problem is not solved.
pub fn sphere_effective_leading(shape: &HoleShape, eta: f64) -> Result<Vec<Vec<f64>>> {
    let m = sphere_polarization(shape)?;
    let e3 = eta.powi(3);
    Ok((0..3)
        .map(|i| (0..3).map(|j| (if i == j { 1.0 } else { 0.0 }) - e3 * m.matrix[i][j]).collect())
        .collect())
}

/// `∫_{|x|<radius, x∉T} ∇w⁰_i · ∇w⁰_j` by volume quadrature.
pub fn polarization_volume(ext: &ExteriorSolution, radius: f64) -> Result<Matrix2> {
    let rule = free_exterior(&ext.shape, radius)?;
    let e0 = ext.evaluator(0)?;
    let e1 = ext.evaluator(1)?;
    let [a, b, c] = rule.integrate(|x| {
        let g0 = e0.gradient(x)?;
        let g1 = e1.gradient(x)?;
        Ok([g0[0] * g0[0] + g0[1] * g0[1], g0[0] * g1[0] + g0[1] * g1[1], g1[0] * g1[0] + g1[1] * g1[1]])
    })?;
    Ok([[a, b], [b, c]])
}

fn check_fraction(sol: &CellSolution) -> Result<f64> {
    let frac = sol.eta * sol.eta * sol.shape.area;
    if frac >= 1.0 {
        return Err(Error::Geometry(format!("hole fraction η²|T| = {frac} is not below 1")));
    }
    Ok(frac)
}

/// Boundary form of the effective tensor.
pub fn effective(sol: &CellSolution) -> Result<EffectiveTensor> {
    let frac = check_fraction(sol)?;
    let moments = sol.boundary_moments();
    let c = sol.eta * sol.eta / (1.0 - frac);
    let mut matrix = IDENTITY;
    for i in 0..2 {
        for j in 0..2 {
            matrix[i][j] -= c * moments[i][j];
        }
    }
    Ok(EffectiveTensor {
        eta: sol.eta,
        matrix,
        shape_id: sol.shape.label(),
        n_nodes: sol.shape.components.iter().map(|c| c.n_nodes()).collect(),
        method: sol.method.to_string(),
    })
}

/// Volume form `δ_ij + η²/(1 − η²|T|) ∫_{cell∖T} ∂_i χ̃_j`, a cross-check of [`effective`].
pub fn effective_volume(sol: &CellSolution) -> Result<Matrix2> {
    let frac = check_fraction(sol)?;
    let rule = cell_exterior(&sol.shape, 1.0 / sol.eta)?;
    let e0 = sol.chi_tilde(0)?;
    let e1 = sol.chi_tilde(1)?;
    let [a, b, c, d] = rule.integrate(|x| {
        let g0 = e0.gradient(x)?;
        let g1 = e1.gradient(x)?;
        Ok([g0[0], g1[0], g0[1], g1[1]])
    })?;
    let s = sol.eta * sol.eta / (1.0 - frac);
    Ok([[1.0 + s * a, s * b], [s * c, 1.0 + s * d]])
}

/// Shared operators for sweeps over `η` on one shape.
pub struct TensorSweep {
    pub shape: HoleShape,
    pub green: TorusGreen,
    pub method: CellMethod,
    free: Option<FreeOperators>,
}

impl TensorSweep {
    pub fn new(shape: &HoleShape, method: CellMethod) -> Result<Self> {
        let free = match method {
            CellMethod::Series(_) => Some(FreeOperators::new(shape)?),
            CellMethod::Direct => None,
        };
        Ok(TensorSweep { shape: shape.clone(), green: TorusGreen::new(2)?, method, free })
    }

    pub fn solve(&self, eta: f64) -> Result<CellSolution> {
        solve_cell_with(&self.shape, self.free.as_ref(), &self.green, eta, self.method)
    }

    pub fn tensor(&self, eta: f64) -> Result<EffectiveTensor> {
        effective(&self.solve(eta)?)
    }

    /// Tensors for every entry, in input order.
    pub fn tensors(&self, etas: &[f64]) -> Result<Vec<EffectiveTensor>> {
        etas.par_iter().map(|&e| self.tensor(e)).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiluteRow {
    pub eta: f64,
    pub tensor: Matrix2,
    /// `‖Ā(η) − (I − η²M)‖_max`.
    pub residual: f64,
    /// `(δ_ij − ā_ij)/η²`, which tends to `M`.
    pub normalized: Matrix2,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiluteReport {
    pub polarization: Matrix2,
    pub rows: Vec<DiluteRow>,
    pub slope: f64,
}

pub fn dilute_residual(shape: &HoleShape, etas: &[f64]) -> Result<DiluteReport> {
    if etas.len() < 2 {
        return Err(Error::Fit("need ≥ 2 points for slope".into()));
    }
    let ext = crate::cell::solve_exterior(shape)?;
    let m = polarization(&ext).as_matrix2().expect("planar shape");
    let sweep = TensorSweep::new(shape, CellMethod::Direct)?;
    let tensors = sweep.tensors(etas)?;
    let rows: Vec<DiluteRow> = tensors
        .iter()
        .map(|t| {
            let e2 = t.eta * t.eta;
            let mut lead = IDENTITY;
            let mut normalized = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    lead[i][j] -= e2 * m[i][j];
                    normalized[i][j] = (IDENTITY[i][j] - t.matrix[i][j]) / e2;
                }
            }
            DiluteRow { eta: t.eta, tensor: t.matrix, residual: max_abs_diff(&t.matrix, &lead), normalized }
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.residual).collect();
    let slope = loglog_slope(&x, &y)?;
    Ok(DiluteReport { polarization: m, rows, slope })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinuityScan {
    pub tensors: Vec<EffectiveTensor>,
    /// Largest `‖Ā(η_{i+1}) − Ā(η_i)‖_max` between neighbors.
    pub max_jump: f64,
    pub all_positive_definite: bool,
    /// Diagonal entries non-increasing along the grid (reported, not required).
    pub monotone_decreasing: bool,
}

pub fn continuity_scan(shape: &HoleShape, etas: &[f64]) -> Result<ContinuityScan> {
    if let Some(bad) = etas.iter().find(|&&e| !(e > 0.0 && e <= 0.9)) {
        return Err(Error::Domain(format!("continuity grid entry {bad} outside (0, 0.9]")));
    }
    let mut sorted = etas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tensors = TensorSweep::new(shape, CellMethod::Direct)?.tensors(&sorted)?;
    let max_jump = tensors
        .windows(2)
        .map(|w| max_abs_diff(&w[1].matrix, &w[0].matrix))
        .fold(0.0, f64::max);
    let all_positive_definite = tensors.iter().all(|t| t.min_eigenvalue() > 0.0);
    let monotone_decreasing = tensors
        .windows(2)
        .all(|w| w[1].matrix[0][0] <= w[0].matrix[0][0] && w[1].matrix[1][1] <= w[0].matrix[1][1]);
    Ok(ContinuityScan { tensors, max_jump, all_positive_definite, monotone_decreasing })
}

/// `‖Ā(η) − I‖_max`, zero at `η = 0`.
pub fn homogenized_gap_bound(shape: &HoleShape, eta: f64) -> Result<f64> {
    if eta == 0.0 {
        return Ok(0.0);
    }
    let sol = crate::cell::solve_cell(shape, eta, CellMethod::Direct)?;
    Ok(effective(&sol)?.distance_to_identity())
}
