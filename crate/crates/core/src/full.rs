//! Mixed problem on a perforated disk: Dirichlet data on the outer circle,
//! zero flux on the interior holes, solved by a coupled second-kind system
//!
//! ```text
//! u^ε = u_p + D_Ω[ψ] + Σ_k S_k[φ_k],   −Δu_p = f,
//! ```
//!
//! together with the homogenized solution, the first-order corrector and
//! sampled discrepancy norms.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::cell::{solve_cell, CellMethod, CellSolution};
use crate::error::{Error, Result};
use crate::fit::{loglog_slope, spread};
use crate::geometry::{dot, norm, sub, ClosedCurve, CurveKind, HoleShape, Point};
use crate::layer::{assemble_free, FieldEvaluator, OperatorKind, PotentialKind, GUARD_FACTOR};
use crate::linalg::{assemble, DenseSolver};
use crate::poly::{Poly2, PolyGradient};
use crate::tensor::{effective, EffectiveTensor};
use crate::trig;
use crate::volume::{perforated_disk, VolumeRule};

pub const DEFAULT_OUTER_NODES: usize = 1024;

/// Background grid points per period in the sampled norms.
pub const POINTS_PER_PERIOD: usize = 16;

/// Radius of the per-hole sampling disks, in units of `ε`.
const LOCAL_RADIUS: f64 = 0.45;

/// Radius where the per-hole rules start blending into the background, in units of `ε`.
const BLEND_RADIUS: f64 = 0.2;

/// Width of the excluded boundary annulus, in units of `εη`.
pub const BOUNDARY_MARGIN: f64 = 2.0;

/// Radius of the disks excluded around dropped boundary-cell centers, in units of `εη`.
pub const BOUNDARY_CELL_RADIUS: f64 = 4.0;

/// Off-node residual tolerance reported by [`FullSolution::residuals_ok`].
pub const RESIDUAL_TOL: f64 = 1e-7;

/// Lattice centers `εk` with `|εk| + 2εη < R`.
pub fn interior_centers(outer_radius: f64, epsilon: f64, eta: f64) -> Vec<Point> {
    let m = (outer_radius / epsilon).ceil() as i64;
    let mut out = Vec::new();
    for i in -m..=m {
        for j in -m..=m {
            let c = [epsilon * i as f64, epsilon * j as f64];
            if norm(c) + 2.0 * epsilon * eta < outer_radius {
                out.push(c);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct PerforatedDiskProblem {
    pub outer_radius: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub shape: HoleShape,
    pub f: Poly2,
    pub g: Poly2,
    pub hole_centers: Vec<Point>,
    pub outer_nodes: usize,
    pub warnings: Vec<String>,
}

/// Smallest even outer node count keeping `3h ≤ εη` on the outer circle.
fn required_outer_nodes(outer_radius: f64, epsilon: f64, eta: f64) -> usize {
    let n = (2.0 * PI * outer_radius * GUARD_FACTOR / (epsilon * eta)).ceil() as usize;
    n + n % 2
}

/// Domain skeleton with zero data; see [`PerforatedDiskProblem::with_data`].
pub fn build_domain(outer_radius: f64, epsilon: f64, eta: f64, shape: &HoleShape) -> Result<PerforatedDiskProblem> {
    if !(outer_radius > 0.0 && outer_radius.is_finite()) {
        return Err(Error::Domain(format!("outer radius must be positive, got {outer_radius}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Domain(format!("eta must be in (0,1], got {eta}")));
    }
    if shape.dim != 2 {
        return Err(Error::Unsupported("the perforated-disk solver is two-dimensional".into()));
    }
    let hole_centers = interior_centers(outer_radius, epsilon, eta);
    let mut warnings = Vec::new();
    if hole_centers.is_empty() {
        warnings.push("no interior holes retained; solving the unperforated problem".to_string());
    }
    let mut problem = PerforatedDiskProblem {
        outer_radius,
        epsilon,
        eta,
        shape: shape.clone(),
        f: Poly2::zero(),
        g: Poly2::zero(),
        hole_centers,
        outer_nodes: DEFAULT_OUTER_NODES,
        warnings,
    };
    problem.set_outer_nodes(DEFAULT_OUTER_NODES);
    Ok(problem)
}

impl PerforatedDiskProblem {
    pub fn with_data(mut self, f: Poly2, g: Poly2) -> Self {
        self.f = f;
        self.g = g;
        self
    }

    /// Requested outer node count, raised if the holes come closer than the guard allows.
    pub fn with_outer_nodes(mut self, n: usize) -> Self {
        self.set_outer_nodes(n);
        self
    }

    fn set_outer_nodes(&mut self, n: usize) {
        let mut n = n.max(16);
        n += n % 2;
        if !self.hole_centers.is_empty() {
            let need = required_outer_nodes(self.outer_radius, self.epsilon, self.eta);
            if need > n {
                self.warnings.retain(|w| !w.starts_with("outer nodes raised"));
                self.warnings.push(format!("outer nodes raised from {n} to {need} for the evaluation guard"));
                n = need;
            }
        }
        self.outer_nodes = n;
    }

    pub fn n_holes(&self) -> usize {
        self.hole_centers.len()
    }

    pub fn unknowns(&self) -> usize {
        self.outer_nodes + self.n_holes() * self.shape.n_total()
    }

    pub fn outer_curve(&self) -> ClosedCurve {
        ClosedCurve::from_kind(CurveKind::Circle { center: [0.0, 0.0], radius: self.outer_radius }, self.outer_nodes)
            .expect("outer node count is even and at least 16")
    }

    /// Physical hole `εk + εηT`.
    pub fn hole(&self, k: usize) -> HoleShape {
        let scale = self.epsilon * self.eta;
        let c = self.hole_centers[k];
        HoleShape::new_unchecked(self.shape.components.iter().map(|curve| curve.transformed(scale, c)).collect())
    }

    /// Same problem with every node count multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> PerforatedDiskProblem {
        let mut p = self.clone();
        p.shape = HoleShape::new_unchecked(self.shape.components.iter().map(|c| c.refined(factor)).collect());
        p.outer_nodes = self.outer_nodes * factor;
        p
    }

    /// Width of the boundary annulus left out of the sampled norms; capped at
    /// `R/10` without holes, where `2εη ≥ R` would leave nothing to sample.
    pub fn excluded_annulus(&self) -> f64 {
        let w = BOUNDARY_MARGIN * self.epsilon * self.eta;
        if self.hole_centers.is_empty() {
            w.min(0.1 * self.outer_radius)
        } else {
            w
        }
    }

    /// Lattice points of the dropped boundary cells, `|εk| − 2εη < R ≤ |εk| + 2εη`.
    pub fn boundary_cell_centers(&self) -> Vec<Point> {
        let (eps, r) = (self.epsilon, self.outer_radius);
        let m = (r / eps).ceil() as i64 + 1;
        let band = 2.0 * eps * self.eta;
        let mut out = Vec::new();
        for i in -m..=m {
            for j in -m..=m {
                let c = [eps * i as f64, eps * j as f64];
                let d = norm(c);
                if d + band >= r && d - band < r {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Double layer on a closed curve with plain trapezoidal quadrature.
#[derive(Clone, Debug)]
pub struct DiskLayer {
    pub curve: ClosedCurve,
    pub density: Vec<f64>,
    center: Point,
    rmin: f64,
    rmax: f64,
}

type Hessian = [[f64; 2]; 2];

impl DiskLayer {
    pub fn new(curve: ClosedCurve, density: Vec<f64>) -> Self {
        let center = curve.kind().center();
        let d: Vec<f64> = curve.points.iter().map(|p| norm(sub(*p, center))).collect();
        let rmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let rmax = d.iter().cloned().fold(0.0, f64::max);
        DiskLayer { curve, density, center, rmin, rmax }
    }

    fn check_guard(&self, x: Point) -> Result<()> {
        let h = self.curve.spacing();
        let rc = norm(sub(x, self.center));
        if (rc - self.rmax).max(self.rmin - rc) >= GUARD_FACTOR * h {
            return Ok(());
        }
        let d = self.curve.points.iter().map(|p| norm(sub(*p, x))).fold(f64::INFINITY, f64::min);
        if d < GUARD_FACTOR * h {
            return Err(Error::NearBoundary { distance: d, guard: GUARD_FACTOR * h });
        }
        Ok(())
    }

    /// Value, gradient and (if asked) Hessian of `D[ψ](x)`.
    pub fn eval(&self, x: Point, with_hessian: bool) -> Result<(f64, Point, Hessian)> {
        self.check_guard(x)?;
        let (mut v, mut g, mut h) = (0.0, [0.0, 0.0], [[0.0; 2]; 2]);
        let c = self.curve.points.iter().zip(&self.curve.normals).zip(self.curve.weights.iter().zip(&self.density));
        for ((y, ny), (w, psi)) in c {
            let wp = w * psi / (2.0 * PI);
            let r = sub(x, *y);
            let r2 = dot(r, r);
            let nr = dot(*ny, r);
            let inv = 1.0 / r2;
            v -= wp * nr * inv;
            g[0] -= wp * (ny[0] - 2.0 * nr * r[0] * inv) * inv;
            g[1] -= wp * (ny[1] - 2.0 * nr * r[1] * inv) * inv;
            if with_hessian {
                let inv2 = inv * inv;
                for a in 0..2 {
                    for b in a..2 {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        let k = -2.0 * ny[a] * r[b] - 2.0 * ny[b] * r[a] - 2.0 * nr * delta + 8.0 * nr * r[a] * r[b] * inv;
                        h[a][b] -= wp * k * inv2;
                    }
                }
            }
        }
        h[1][0] = h[0][1];
        Ok((v, g, h))
    }
}

/// Kernel of `∂_{N_x} D[·](x)` for a source node `(y, N_y, w)`.
#[inline]
fn double_layer_normal(x: Point, nx: Point, y: Point, ny: Point, w: f64) -> f64 {
    let r = sub(x, y);
    let r2 = dot(r, r);
    let nr = dot(ny, r);
    -w / (2.0 * PI * r2) * (dot(ny, nx) - 2.0 * nr * dot(nx, r) / r2)
}

/// Kernel of `K[·](x) = D[·](x)` off the curve.
#[inline]
fn double_layer_value(x: Point, y: Point, ny: Point, w: f64) -> f64 {
    let r = sub(x, y);
    -dot(ny, r) / (2.0 * PI * dot(r, r)) * w
}

#[inline]
fn single_layer_value(x: Point, y: Point, w: f64) -> f64 {
    let r = sub(x, y);
    0.25 * dot(r, r).ln() / PI * w
}

/// Kernel of `N_x·∇S[·](x)`.
#[inline]
fn single_layer_normal(x: Point, nx: Point, y: Point, w: f64) -> f64 {
    let r = sub(x, y);
    dot(nx, r) / (2.0 * PI * dot(r, r)) * w
}

/// Dense solution of the perforated problem.
#[derive(Debug)]
pub struct FullSolution {
    pub problem: PerforatedDiskProblem,
    pub outer: DiskLayer,
    pub holes: Vec<HoleShape>,
    /// Single-layer densities, one vector per hole.
    pub phi: Vec<Vec<f64>>,
    /// Particular solution with `−Δu_p = f`.
    pub particular: Poly2,
    particular_grad: PolyGradient,
    /// Max Dirichlet residual at outer parameter midpoints.
    pub dirichlet_residual: f64,
    /// Max Neumann residual at hole parameter midpoints.
    pub neumann_residual: f64,
    pub condition: f64,
}

pub fn solve_full(problem: &PerforatedDiskProblem) -> Result<FullSolution> {
    let outer = problem.outer_curve();
    let holes: Vec<HoleShape> = (0..problem.n_holes()).map(|k| problem.hole(k)).collect();
    let n_out = outer.n_nodes();
    let m = problem.shape.n_total();
    let n = n_out + holes.len() * m;
    let particular = problem.f.particular_solution();
    let pg = particular.gradient();

    let outer_shape = HoleShape::new_unchecked(vec![outer.clone()]);
    let k_outer = assemble_free(&outer_shape, OperatorKind::K)?;
    let kstar_hole = match holes.first() {
        Some(h) => Some(assemble_free(h, OperatorKind::Kstar)?),
        None => None,
    };
    // flattened hole nodes: (point, normal, weight)
    let hole_nodes: Vec<(Point, Point, f64)> = holes
        .iter()
        .flat_map(|h| h.points().zip(h.normals()).zip(h.weights()).map(|((p, q), w)| (*p, *q, *w)).collect::<Vec<_>>())
        .collect();

    let matrix = assemble(n, n, |i, row| {
        if i < n_out {
            let x = outer.points[i];
            for j in 0..n_out {
                row[j] = k_outer.matrix[(i, j)];
            }
            row[i] += 0.5;
            for (j, (y, _, w)) in hole_nodes.iter().enumerate() {
                row[n_out + j] = single_layer_value(x, *y, *w);
            }
        } else {
            let (k, l) = ((i - n_out) / m, (i - n_out) % m);
            let (x, nx, _) = hole_nodes[i - n_out];
            for j in 0..n_out {
                row[j] = double_layer_normal(x, nx, outer.points[j], outer.normals[j], outer.weights[j]);
            }
            for (j, (y, _, w)) in hole_nodes.iter().enumerate() {
                if j / m != k {
                    row[n_out + j] = single_layer_normal(x, nx, *y, *w);
                }
            }
            let ks = kstar_hole.as_ref().expect("hole rows exist only with holes");
            for j in 0..m {
                row[n_out + k * m + j] = ks.matrix[(l, j)];
            }
            row[n_out + k * m + l] += 0.5;
        }
    });
    let mut rhs = vec![0.0; n];
    for i in 0..n_out {
        let x = outer.points[i];
        rhs[i] = problem.g.eval(x) - particular.eval(x);
    }
    for (j, (x, nx, _)) in hole_nodes.iter().enumerate() {
        rhs[n_out + j] = -dot(*nx, pg.grad(*x));
    }
    let solver = DenseSolver::new(&matrix)?;
    drop(matrix);
    let sol = solver.solve(&rhs)?;
    let psi = sol[..n_out].to_vec();
    let phi: Vec<Vec<f64>> = (0..holes.len()).map(|k| sol[n_out + k * m..n_out + (k + 1) * m].to_vec()).collect();

    let mut out = FullSolution {
        problem: problem.clone(),
        outer: DiskLayer::new(outer, psi),
        holes,
        phi,
        particular,
        particular_grad: pg,
        dirichlet_residual: 0.0,
        neumann_residual: 0.0,
        condition: solver.condition,
    };
    let (d, nres) = out.off_node_residuals();
    out.dirichlet_residual = d;
    out.neumann_residual = nres;
    Ok(out)
}

impl FullSolution {
    pub fn residuals_ok(&self) -> bool {
        self.dirichlet_residual <= RESIDUAL_TOL && self.neumann_residual <= RESIDUAL_TOL
    }

    pub fn unknowns(&self) -> usize {
        self.outer.density.len() + self.phi.iter().map(Vec::len).sum::<usize>()
    }

    fn hole_sources(&self) -> impl Iterator<Item = (Point, f64)> + '_ {
        self.holes.iter().zip(&self.phi).flat_map(|(h, phi)| {
            h.points().zip(h.weights()).zip(phi).map(|((p, w), f)| (*p, w * f))
        })
    }

    /// Boundary conditions checked at the parameter midpoints, where no
    /// collocation took place.
    fn off_node_residuals(&self) -> (f64, f64) {
        let outer = &self.outer.curve;
        let n_out = outer.n_nodes();
        let psi_mid = trig::midpoints(&self.outer.density);
        let sources: Vec<(Point, f64)> = self.hole_sources().collect();
        let dirichlet = (0..n_out)
            .into_par_iter()
            .map(|i| {
                let (x, _, _, _) = outer.frame_at(outer.params[i] + PI / n_out as f64);
                let mut v = 0.5 * psi_mid[i];
                for j in 0..n_out {
                    v += double_layer_value(x, outer.points[j], outer.normals[j], outer.weights[j] * self.outer.density[j]);
                }
                for (y, c) in &sources {
                    v += single_layer_value(x, *y, *c);
                }
                (v + self.particular.eval(x) - self.problem.g.eval(x)).abs()
            })
            .reduce(|| 0.0, f64::max);
        let neumann = (0..self.holes.len())
            .into_par_iter()
            .map(|k| {
                let hole = &self.holes[k];
                let mut worst: f64 = 0.0;
                for (c, curve) in hole.components.iter().enumerate() {
                    let nc = curve.n_nodes();
                    let phi_mid = trig::midpoints(&self.phi[k][hole.range(c)]);
                    for i in 0..nc {
                        let (x, _, nx, _) = curve.frame_at(curve.params[i] + PI / nc as f64);
                        let mut v = 0.5 * phi_mid[i] + dot(nx, self.particular_grad.grad(x));
                        for j in 0..n_out {
                            v += double_layer_normal(x, nx, outer.points[j], outer.normals[j], outer.weights[j] * self.outer.density[j]);
                        }
                        for (y, c) in &sources {
                            v += single_layer_normal(x, nx, *y, *c);
                        }
                        worst = worst.max(v.abs());
                    }
                }
                worst
            })
            .reduce(|| 0.0, f64::max);
        (dirichlet, neumann)
    }

    /// Evaluator of `u^ε` and `∇u^ε` off the boundaries.
    pub fn field(&self) -> Result<FullField<'_>> {
        let holes = self
            .holes
            .iter()
            .zip(&self.phi)
            .map(|(h, phi)| FieldEvaluator::new(h, phi.clone(), PotentialKind::S))
            .collect::<Result<_>>()?;
        Ok(FullField { sol: self, holes })
    }
}

pub struct FullField<'a> {
    sol: &'a FullSolution,
    holes: Vec<FieldEvaluator<'a, 'static>>,
}

impl FullField<'_> {
    pub fn value_and_gradient(&self, x: Point) -> Result<(f64, Point)> {
        if norm(x) >= self.sol.problem.outer_radius {
            return Err(Error::Domain(format!("point {x:?} lies outside the disk")));
        }
        let (mut v, mut g, _) = self.sol.outer.eval(x, false)?;
        v += self.sol.particular.eval(x);
        let pg = self.sol.particular_grad.grad(x);
        g = [g[0] + pg[0], g[1] + pg[1]];
        for h in &self.holes {
            let (hv, hg) = h.value_and_gradient(x)?;
            v += hv;
            g = [g[0] + hg[0], g[1] + hg[1]];
        }
        Ok((v, g))
    }

    pub fn value(&self, x: Point) -> Result<f64> {
        Ok(self.value_and_gradient(x)?.0)
    }
}

/// Solution of `−ā Δū = f` in the disk with `ū = g` on its boundary.
#[derive(Clone, Debug)]
pub struct HomogenizedSolution {
    pub a_bar: f64,
    pub eta: f64,
    pub shape_id: String,
    pub layer: DiskLayer,
    /// Particular solution of `−Δp = f/ā`.
    pub particular: Poly2,
    particular_grad: PolyGradient,
}

/// Largest off-isotropy accepted for a tensor passed to [`solve_homogenized`].
pub const ISOTROPY_TOL: f64 = 1e-8;

pub fn solve_homogenized(problem: &PerforatedDiskProblem, tensor: Option<&EffectiveTensor>) -> Result<HomogenizedSolution> {
    let a_bar = match tensor {
        None => 1.0,
        Some(t) => {
            let m = t.matrix;
            let off = m[0][1].abs().max(m[1][0].abs()).max((m[0][0] - m[1][1]).abs());
            if off > ISOTROPY_TOL * m[0][0].abs() {
                return Err(Error::Unsupported(format!(
                    "homogenized solve needs an isotropic tensor, off-isotropy {off:.3e}"
                )));
            }
            0.5 * (m[0][0] + m[1][1])
        }
    };
    solve_homogenized_scalar(problem, a_bar)
}

pub fn solve_homogenized_scalar(problem: &PerforatedDiskProblem, a_bar: f64) -> Result<HomogenizedSolution> {
    if !(a_bar > 0.0 && a_bar.is_finite()) {
        return Err(Error::Domain(format!("homogenized coefficient must be positive, got {a_bar}")));
    }
    let outer = problem.outer_curve();
    let shape = HoleShape::new_unchecked(vec![outer.clone()]);
    let k = assemble_free(&shape, OperatorKind::K)?;
    let solver = DenseSolver::new(&k.shifted(0.5))?;
    let particular = problem.f.scaled(1.0 / a_bar).particular_solution();
    let rhs: Vec<f64> = outer.points.iter().map(|&x| problem.g.eval(x) - particular.eval(x)).collect();
    let psi = solver.solve(&rhs)?;
    Ok(HomogenizedSolution {
        a_bar,
        eta: problem.eta,
        shape_id: problem.shape.label(),
        layer: DiskLayer::new(outer, psi),
        particular_grad: particular.gradient(),
        particular,
    })
}

impl HomogenizedSolution {
    pub fn value_gradient_hessian(&self, x: Point) -> Result<(f64, Point, Hessian)> {
        let (v, g, h) = self.layer.eval(x, true)?;
        let pg = self.particular_grad.grad(x);
        let ph = self.particular_grad.hessian(x);
        Ok((
            v + self.particular.eval(x),
            [g[0] + pg[0], g[1] + pg[1]],
            [[h[0][0] + ph[0][0], h[0][1] + ph[0][1]], [h[1][0] + ph[1][0], h[1][1] + ph[1][1]]],
        ))
    }

    pub fn value_and_gradient(&self, x: Point) -> Result<(f64, Point)> {
        let (v, g, _) = self.layer.eval(x, false)?;
        let pg = self.particular_grad.grad(x);
        Ok((v + self.particular.eval(x), [g[0] + pg[0], g[1] + pg[1]]))
    }

    pub fn value(&self, x: Point) -> Result<f64> {
        Ok(self.value_and_gradient(x)?.0)
    }
}

/// `ε Σ_l χ_{l,η}(x/ε) ∂_l ū(x)` with `χ_{l,η}(y) = η χ̃_l(y/η)`.
pub struct Corrector<'a> {
    epsilon: f64,
    eta: f64,
    chi: Vec<FieldEvaluator<'a, 'a>>,
    hom: &'a HomogenizedSolution,
    shift: f64,
}

pub fn corrector_field<'a>(cell: &'a CellSolution, hom: &'a HomogenizedSolution, epsilon: f64) -> Result<Corrector<'a>> {
    if (cell.eta - hom.eta).abs() > 1e-12 * hom.eta {
        return Err(Error::Invalid(format!("cell solution at eta {} but problem at eta {}", cell.eta, hom.eta)));
    }
    if cell.shape.label() != hom.shape_id {
        return Err(Error::Invalid(format!("cell shape {} differs from problem shape {}", cell.shape.label(), hom.shape_id)));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let chi = (0..2).map(|k| cell.chi_tilde(k)).collect::<Result<_>>()?;
    Ok(Corrector { epsilon, eta: cell.eta, chi, hom, shift: 0.0 })
}

impl Corrector<'_> {
    /// Same corrector with `χ_{l,η}` shifted by the constant `c`.
    pub fn with_shift(mut self, c: f64) -> Self {
        self.shift = c;
        self
    }

    pub fn value_and_gradient(&self, x: Point) -> Result<(f64, Point)> {
        let (_, du, hu) = self.hom.value_gradient_hessian(x)?;
        self.combine(x, du, hu)
    }

    fn combine(&self, x: Point, du: Point, hu: Hessian) -> Result<(f64, Point)> {
        let s = self.epsilon * self.eta;
        let z = [x[0] / s, x[1] / s];
        let (mut v, mut g) = (0.0, [0.0, 0.0]);
        for l in 0..2 {
            let (c, cg) = self.chi[l].value_and_gradient(z)?;
            let chi = self.eta * c + self.shift;
            v += self.epsilon * chi * du[l];
            g[0] += cg[0] * du[l] + self.epsilon * chi * hu[l][0];
            g[1] += cg[1] * du[l] + self.epsilon * chi * hu[l][1];
        }
        Ok((v, g))
    }
}

/// `L²` norms of a field and of its gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct H1Parts {
    pub l2: f64,
    pub grad_l2: f64,
}

impl H1Parts {
    pub fn h1(&self) -> f64 {
        self.l2.hypot(self.grad_l2)
    }
}

/// Sampled norms over the perforated disk minus the boundary annulus.
#[derive(Clone, Debug, Serialize)]
pub struct Discrepancy {
    /// `u^ε − ū − corrector`.
    pub zeta: H1Parts,
    /// `u^ε − ū`.
    pub without_corrector: H1Parts,
    /// `u^ε − u` with `u` the solution for `Ā = I`.
    pub to_unperforated: Option<H1Parts>,
    /// `ū − u`.
    pub homogenized_gap: Option<H1Parts>,
    pub corrector: Option<H1Parts>,
    pub points: usize,
}

/// Quadrature over `{|x| < R − 2εη}` minus the holes and minus the disks of
/// radius `4εη` around the centers of the dropped boundary cells.
pub fn sampling_rule(problem: &PerforatedDiskProblem, points_per_period: usize) -> Result<VolumeRule> {
    let radius = problem.outer_radius - problem.excluded_annulus();
    if radius <= 0.0 || points_per_period == 0 {
        return Err(Error::Domain("sampling region is empty".into()));
    }
    let eps = problem.epsilon;
    let curves: Vec<ClosedCurve> = (0..problem.n_holes()).flat_map(|k| problem.hole(k).components).collect();
    // without holes the background spacing follows the disk size, not ε
    let spacing = if curves.is_empty() {
        problem.outer_radius.min(eps) / points_per_period as f64
    } else {
        eps / points_per_period as f64
    };
    let mut rule = perforated_disk(&curves, radius, BLEND_RADIUS * eps, LOCAL_RADIUS * eps, spacing)?;
    if !curves.is_empty() {
        // the periodic corrector keeps the dipoles of dropped holes, so their cells are left out
        let cut = BOUNDARY_CELL_RADIUS * eps * problem.eta;
        let dropped: Vec<Point> = problem
            .boundary_cell_centers()
            .into_iter()
            .filter(|c| norm(*c) - cut < radius)
            .collect();
        let inner = radius - 2.0 * cut - 2.0 * problem.excluded_annulus();
        let keep: Vec<bool> = rule
            .points
            .iter()
            .map(|x| norm(*x) < inner || dropped.iter().all(|c| norm(sub(*x, *c)) >= cut))
            .collect();
        let mut filtered = VolumeRule::default();
        for ((x, w), k) in rule.points.iter().zip(&rule.weights).zip(keep) {
            if k {
                filtered.push(*x, *w);
            }
        }
        rule = filtered;
    }
    if rule.is_empty() {
        return Err(Error::Domain("sampling region is empty".into()));
    }
    Ok(rule)
}

pub fn discrepancy_norms(
    full: &FullSolution,
    hom: &HomogenizedSolution,
    base: Option<&HomogenizedSolution>,
    corrector: Option<&Corrector>,
    rule: &VolumeRule,
) -> Result<Discrepancy> {
    let field = full.field()?;
    let sq = |v: f64, g: Point| [v * v, g[0] * g[0] + g[1] * g[1]];
    let m = rule.integrate(|x| {
        let (ue, ge) = field.value_and_gradient(x)?;
        let (ub, gb, hb) = hom.value_gradient_hessian(x)?;
        let d = (ue - ub, [ge[0] - gb[0], ge[1] - gb[1]]);
        let (cv, cg) = match corrector {
            Some(c) => c.combine(x, gb, hb)?,
            None => (0.0, [0.0, 0.0]),
        };
        let z = sq(d.0 - cv, [d.1[0] - cg[0], d.1[1] - cg[1]]);
        let p = sq(d.0, d.1);
        let c = sq(cv, cg);
        let (u, gu) = match base {
            Some(b) => b.value_and_gradient(x)?,
            None => (0.0, [0.0, 0.0]),
        };
        let up = sq(ue - u, [ge[0] - gu[0], ge[1] - gu[1]]);
        let hg = sq(ub - u, [gb[0] - gu[0], gb[1] - gu[1]]);
        Ok([z[0], z[1], p[0], p[1], up[0], up[1], hg[0], hg[1], c[0], c[1]])
    })?;
    let parts = |i: usize| H1Parts { l2: m[i].max(0.0).sqrt(), grad_l2: m[i + 1].max(0.0).sqrt() };
    Ok(Discrepancy {
        zeta: parts(0),
        without_corrector: parts(2),
        to_unperforated: base.map(|_| parts(4)),
        homogenized_gap: base.map(|_| parts(6)),
        corrector: corrector.map(|_| parts(8)),
        points: rule.len(),
    })
}

/// `(‖ζ^ε‖, ‖u^ε − ū‖)` in the sampled `H¹` surrogate.
pub fn h1_discrepancy(
    full: &FullSolution,
    hom: &HomogenizedSolution,
    corrector: Option<&Corrector>,
    points_per_period: usize,
) -> Result<(f64, f64)> {
    let rule = sampling_rule(&full.problem, points_per_period)?;
    let d = discrepancy_norms(full, hom, None, corrector, &rule)?;
    Ok((d.zeta.h1(), d.without_corrector.h1()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeTag {
    Saturated,
    DiluteCritical,
    Crossover,
}

impl std::fmt::Display for RegimeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegimeTag::Saturated => "saturated",
            RegimeTag::DiluteCritical => "dilute-critical",
            RegimeTag::Crossover => "crossover",
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Regime {
    pub sigma: f64,
    pub kappa: f64,
    /// `η^{d−2}/σ²`.
    pub rho: f64,
    pub tag: RegimeTag,
    /// Rate bound for the saturated branch, `η^{d−1}`.
    pub bound_saturated: f64,
    /// Rate bound for the dilute branch.
    pub bound_dilute: f64,
}

impl Regime {
    /// Bound of the classified branch; crossover rows use the saturated one.
    pub fn bound(&self) -> f64 {
        match self.tag {
            RegimeTag::DiluteCritical => self.bound_dilute,
            _ => self.bound_saturated,
        }
    }
}

pub fn regime_classify(epsilon: f64, eta: f64, dim: usize) -> Result<Regime> {
    if dim < 2 {
        return Err(Error::Invalid(format!("dimension must be at least 2, got {dim}")));
    }
    if !(epsilon > 0.0) || !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Domain(format!("need epsilon > 0 and eta in (0,1], got {epsilon}, {eta}")));
    }
    let d = dim as f64;
    let log = eta.ln().abs();
    let (sigma, second, bound_dilute) = if dim == 2 {
        (epsilon * log.sqrt(), (epsilon * eta * log).sqrt(), epsilon.sqrt() * eta * log.sqrt())
    } else {
        (epsilon * eta.powf(-(d - 2.0) / 2.0), (epsilon * eta).sqrt(), epsilon.sqrt() * eta.powf(d / 2.0))
    };
    let kappa = (eta.powf(d - 1.0) / epsilon).sqrt().max(second);
    let rho = eta.powf(d - 2.0) / (sigma * sigma);
    let tag = if rho >= 10.0 {
        RegimeTag::Saturated
    } else if rho <= 0.1 {
        RegimeTag::DiluteCritical
    } else {
        RegimeTag::Crossover
    };
    Ok(Regime { sigma, kappa, rho, tag, bound_saturated: eta.powf(d - 1.0), bound_dilute })
}

#[derive(Clone, Debug)]
pub struct RateConfig {
    pub outer_radius: f64,
    /// Hole shape; its node counts are used for both the cell and the full problem.
    pub shape: HoleShape,
    pub f: Poly2,
    pub g: Poly2,
    pub pairs: Vec<(f64, f64)>,
    pub outer_nodes: usize,
    pub points_per_period: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateRow {
    pub epsilon: f64,
    pub eta: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub rho: f64,
    pub tag: RegimeTag,
    pub a_bar: f64,
    pub holes: usize,
    pub unknowns: usize,
    pub outer_nodes: usize,
    pub zeta_h1: f64,
    /// `‖u^ε − ū‖`.
    pub plain_h1: f64,
    /// `‖u^ε − u‖`.
    pub unperforated_h1: f64,
    /// `‖∇(ū − u)‖`.
    pub hom_gap_grad: f64,
    pub corrector_l2: f64,
    pub bound: f64,
    /// Dilute-branch bound, reported for crossover rows.
    pub bound_alt: Option<f64>,
    pub ratio: f64,
    /// `ratio` over the ratio of the coarsest row.
    pub normalized_ratio: f64,
    pub excluded_annulus: f64,
    /// Radius of the disks left out around dropped boundary-cell centers.
    pub excluded_cell_radius: f64,
    pub dirichlet_residual: f64,
    pub neumann_residual: f64,
    pub sample_points: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Max/min of `ratio` over the rows of each regime.
    pub spreads: BTreeMap<String, f64>,
    /// Log-log slopes in `η` over rows sharing the first row's `ε`.
    pub slope_zeta: Option<f64>,
    pub slope_unperforated: Option<f64>,
}

/// One row of the sweep.
pub fn rate_row(config: &RateConfig, epsilon: f64, eta: f64) -> Result<RateRow> {
    let regime = regime_classify(epsilon, eta, 2)?;
    let problem = build_domain(config.outer_radius, epsilon, eta, &config.shape)?
        .with_data(config.f.clone(), config.g.clone())
        .with_outer_nodes(config.outer_nodes);
    let cell = solve_cell(&config.shape, eta, CellMethod::Direct)?;
    let tensor = effective(&cell)?;
    let full = solve_full(&problem)?;
    let hom = solve_homogenized(&problem, Some(&tensor))?;
    let base = solve_homogenized(&problem, None)?;
    let corr = corrector_field(&cell, &hom, epsilon)?;
    let rule = sampling_rule(&problem, config.points_per_period)?;
    let d = discrepancy_norms(&full, &hom, Some(&base), Some(&corr), &rule)?;
    let zeta_h1 = d.zeta.h1();
    let bound = regime.bound();
    Ok(RateRow {
        epsilon,
        eta,
        sigma: regime.sigma,
        kappa: regime.kappa,
        rho: regime.rho,
        tag: regime.tag,
        a_bar: hom.a_bar,
        holes: problem.n_holes(),
        unknowns: full.unknowns(),
        outer_nodes: problem.outer_nodes,
        zeta_h1,
        plain_h1: d.without_corrector.h1(),
        unperforated_h1: d.to_unperforated.map_or(f64::NAN, |p| p.h1()),
        hom_gap_grad: d.homogenized_gap.map_or(f64::NAN, |p| p.grad_l2),
        corrector_l2: d.corrector.map_or(f64::NAN, |p| p.l2),
        bound,
        bound_alt: (regime.tag == RegimeTag::Crossover).then_some(regime.bound_dilute),
        ratio: zeta_h1 / bound,
        normalized_ratio: f64::NAN,
        excluded_annulus: problem.excluded_annulus(),
        excluded_cell_radius: BOUNDARY_CELL_RADIUS * epsilon * eta,
        dirichlet_residual: full.dirichlet_residual,
        neumann_residual: full.neumann_residual,
        sample_points: d.points,
    })
}

pub fn rate_sweep(config: &RateConfig) -> Result<RateReport> {
    if config.pairs.is_empty() {
        return Err(Error::Invalid("empty sweep".into()));
    }
    if !config.shape.is_square_symmetric() {
        return Err(Error::Unsupported(
            "rate sweeps need a square-symmetric shape so that the homogenized tensor is isotropic".into(),
        ));
    }
    let mut rows: Vec<RateRow> =
        config.pairs.par_iter().map(|&(e, h)| rate_row(config, e, h)).collect::<Result<_>>()?;
    let coarsest = rows
        .iter()
        .max_by(|a, b| a.eta.total_cmp(&b.eta).then(a.epsilon.total_cmp(&b.epsilon)))
        .map(|r| r.ratio)
        .expect("nonempty sweep");
    for r in &mut rows {
        r.normalized_ratio = r.ratio / coarsest;
    }
    let mut by_tag: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_tag.entry(r.tag.to_string()).or_default().push(r.ratio);
    }
    let spreads = by_tag.into_iter().map(|(k, v)| (k, spread(&v))).collect();
    let eps0 = rows[0].epsilon;
    let same: Vec<&RateRow> = rows.iter().filter(|r| r.epsilon == eps0).collect();
    let etas: Vec<f64> = same.iter().map(|r| r.eta).collect();
    let slope = |ys: Vec<f64>| loglog_slope(&etas, &ys).ok();
    let slope_zeta = slope(same.iter().map(|r| r.zeta_h1).collect());
    let slope_unperforated = slope(same.iter().map(|r| r.unperforated_h1).collect());
    Ok(RateReport { rows, spreads, slope_zeta, slope_unperforated })
}
