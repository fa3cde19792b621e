//! Nyström discretization of single- and double-layer operators on a hole,
//! free-space and `η`-periodic, plus off-boundary potential evaluation.
//!
//! Conventions in two dimensions, with `Γ(x) = (1/2π) log|x|`:
//!
//! ```text
//! S[φ](x)  = ∫ Γ(x − y) φ(y) ds_y
//! D[φ](x)  = ∫ ∂_{N_y} Γ(y − x) φ(y) ds_y
//! K[φ](x)  = ∫ N_y·(y − x) / (2π|x − y|²) φ(y) ds_y
//! K*[φ](x) = ∫ N_x·(x − y) / (2π|x − y|²) φ(y) ds_y
//! ```
//!
//! Traces on the side the normal points to (`+`, outside the hole):
//! `∂S/∂N|± = ±½ + K*` and `D|± = ∓½ + K`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sub, ClosedCurve, HoleShape, Point};
use crate::green::GreenEta;
use crate::linalg::{assemble, matvec, DenseSolver};
use crate::trig;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Minimum target distance in units of the local node spacing for plain quadrature.
pub const GUARD_FACTOR: f64 = 3.0;

/// Largest upsampling factor used to honor the guard near the boundary.
pub const MAX_UPSAMPLE: usize = 256;

/// Distance in units of the refined spacing aimed for when upsampling.
const UPSAMPLE_TARGET: f64 = 6.0;

/// Samples on the circle used to expand the smooth periodic correction.
const SMOOTH_SAMPLES: usize = 512;

/// Largest ratio of the evaluation radius to the convergence radius of that expansion.
const SMOOTH_RATIO_MAX: f64 = 0.85;

/// Largest `η` accepted by the Neumann-series solver.
pub const NEUMANN_ETA_MAX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    S,
    /// Exterior boundary trace of the double layer, `−½I + K`.
    D,
    K,
    Kstar,
    SpEta,
    KstarpEta,
    KpEta,
    /// `S^η_p − S`.
    R1,
    /// `(K^{*,η}_p − K*)/η`.
    R2,
    /// Kernel `−|x − y|²/(2d)`.
    Q1,
    /// Kernel `−N_x·(x − y)/d`.
    Q2,
}

/// A scalar field on the flattened quadrature nodes of a hole.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryDensity {
    pub values: Vec<f64>,
}

impl BoundaryDensity {
    pub fn new(values: Vec<f64>) -> Self {
        BoundaryDensity { values }
    }

    pub fn integral(&self, shape: &HoleShape) -> f64 {
        shape.integrate(&self.values)
    }

    /// `∫φ / |∂T|`.
    pub fn mean(&self, shape: &HoleShape) -> f64 {
        self.integral(shape) / shape.perimeter()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct NystromOperator {
    pub matrix: Mat<f64>,
    pub kind: OperatorKind,
    pub eta: Option<f64>,
}

impl NystromOperator {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        matvec(&self.matrix, v)
    }

    pub fn max_abs_diff(&self, other: &NystromOperator) -> f64 {
        let mut m = 0.0_f64;
        for j in 0..self.n() {
            for (a, b) in self.matrix.col_as_slice(j).iter().zip(other.matrix.col_as_slice(j)) {
                m = m.max((a - b).abs());
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.n())
            .flat_map(|j| self.matrix.col_as_slice(j).iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `½I + self` (or `−½I + self` for negative `shift` sign).
    pub fn shifted(&self, shift: f64) -> Mat<f64> {
        let mut m = self.matrix.clone();
        for i in 0..self.n() {
            m[(i, i)] += shift;
        }
        m
    }

    /// Debug dump of the matrix as CSV rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.n()).map(|j| format!("{:.16e}", self.matrix[(i, j)])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

struct Nodes<'a> {
    points: Vec<&'a Point>,
    normals: Vec<&'a Point>,
    weights: Vec<f64>,
    curvature: Vec<f64>,
}

fn nodes(shape: &HoleShape) -> Nodes<'_> {
    Nodes {
        points: shape.points().collect(),
        normals: shape.normals().collect(),
        weights: shape.weights().cloned().collect(),
        curvature: shape.components.iter().flat_map(|c| c.curvature.iter().cloned()).collect(),
    }
}

fn require_curves(shape: &HoleShape) -> Result<()> {
    if shape.dim != 2 || shape.components.is_empty() {
        return Err(Error::Unsupported("boundary operators need a two-dimensional curve shape".into()));
    }
    Ok(())
}

/// Kress weights `R_m` for `∫ log(4 sin²((t − s)/2)) f(s) ds` on `n` nodes.
pub fn kress_weights(n: usize) -> Vec<f64> {
    let half = n / 2;
    (0..n)
        .map(|m| {
            let mut s = 0.0;
            for p in 1..half {
                s += (2.0 * PI * (p * m) as f64 / n as f64).cos() / p as f64;
            }
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            -4.0 * PI / n as f64 * s - 4.0 * PI / (n * n) as f64 * sign
        })
        .collect()
}

/// Single-layer block of one curve onto itself with the log-splitting rule.
fn single_layer_self(curve: &ClosedCurve, kress: &[f64], i: usize, out: &mut [f64]) {
    let n = curve.n_nodes();
    let ti = curve.params[i];
    let xi = curve.points[i];
    for j in 0..n {
        let m = (i + n - j) % n;
        let smooth = if i == j {
            curve.speeds[i].ln()
        } else {
            let half_gap = 0.5 * (ti - curve.params[j]);
            norm(sub(xi, curve.points[j])).ln() - 0.5 * (4.0 * half_gap.sin().powi(2)).ln()
        };
        out[j] = (0.5 * kress[m] / (2.0 * PI) + smooth / n as f64) * curve.speeds[j];
    }
}

/// Free-space operator matrix on the hole boundary.
pub fn assemble_free(shape: &HoleShape, kind: OperatorKind) -> Result<NystromOperator> {
    require_curves(shape)?;
    let nd = nodes(shape);
    let n = shape.n_total();
    let kress: Vec<Vec<f64>> = shape.components.iter().map(|c| kress_weights(c.n_nodes())).collect();
    let matrix = match kind {
        OperatorKind::S => assemble(n, n, |i, row| {
            let (ci, li) = shape.locate(i);
            for (c, curve) in shape.components.iter().enumerate() {
                let r = shape.range(c);
                if c == ci {
                    single_layer_self(curve, &kress[c], li, &mut row[r]);
                } else {
                    for j in r {
                        row[j] = norm(sub(*nd.points[i], *nd.points[j])).ln() / (2.0 * PI) * nd.weights[j];
                    }
                }
            }
        }),
        OperatorKind::K | OperatorKind::Kstar | OperatorKind::D => assemble(n, n, |i, row| {
            for j in 0..n {
                row[j] = if i == j {
                    nd.curvature[i] / (4.0 * PI) * nd.weights[i]
                } else {
                    let r = sub(*nd.points[i], *nd.points[j]);
                    let r2 = dot(r, r);
                    let kernel = if kind == OperatorKind::Kstar {
                        dot(*nd.normals[i], r)
                    } else {
                        -dot(*nd.normals[j], r)
                    };
                    kernel / (2.0 * PI * r2) * nd.weights[j]
                };
            }
            if kind == OperatorKind::D {
                row[i] -= 0.5;
            }
        }),
        OperatorKind::Q1 => assemble(n, n, |i, row| {
            for j in 0..n {
                let r = sub(*nd.points[i], *nd.points[j]);
                row[j] = -dot(r, r) / 4.0 * nd.weights[j];
            }
        }),
        OperatorKind::Q2 => assemble(n, n, |i, row| {
            for j in 0..n {
                let r = sub(*nd.points[i], *nd.points[j]);
                row[j] = -dot(*nd.normals[i], r) / 2.0 * nd.weights[j];
            }
        }),
        other => {
            return Err(Error::Invalid(format!("{other:?} is a periodic operator; use assemble_periodic")));
        }
    };
    Ok(NystromOperator { matrix, kind, eta: None })
}

/// Smooth periodic correction `G^η − Γ` (or its normal derivatives) on the nodes.
fn periodic_correction(shape: &HoleShape, green: &GreenEta, kind: OperatorKind) -> Mat<f64> {
    let nd = nodes(shape);
    let n = shape.n_total();
    let log_term = green.eta.ln() / (2.0 * PI);
    assemble(n, n, |i, row| {
        let xi = *nd.points[i];
        for j in 0..n {
            let r = sub(xi, *nd.points[j]);
            let w = nd.weights[j];
            row[j] = match kind {
                OperatorKind::SpEta | OperatorKind::R1 => {
                    (log_term + green.base.smooth_part2([green.eta * r[0], green.eta * r[1]])) * w
                }
                OperatorKind::KstarpEta | OperatorKind::R2 => dot(*nd.normals[i], green.grad_perturbation2(r)) * w,
                OperatorKind::KpEta => -dot(*nd.normals[j], green.grad_perturbation2(r)) * w,
                _ => unreachable!(),
            };
        }
    })
}

/// `η`-periodic operator matrix: free-space part plus smooth lattice correction.
pub fn assemble_periodic(shape: &HoleShape, green: &GreenEta, kind: OperatorKind) -> Result<NystromOperator> {
    require_curves(shape)?;
    if !(green.eta > 0.0 && green.eta <= 1.0) {
        return Err(Error::Domain("eta must be in (0,1]".into()));
    }
    let mut correction = periodic_correction(shape, green, kind);
    let matrix = match kind {
        OperatorKind::SpEta => &assemble_free(shape, OperatorKind::S)?.matrix + &correction,
        OperatorKind::KstarpEta => &assemble_free(shape, OperatorKind::Kstar)?.matrix + &correction,
        OperatorKind::KpEta => &assemble_free(shape, OperatorKind::K)?.matrix + &correction,
        OperatorKind::R1 => correction,
        OperatorKind::R2 => {
            let scale = 1.0 / green.eta;
            for j in 0..correction.ncols() {
                correction.col_as_slice_mut(j).iter_mut().for_each(|v| *v *= scale);
            }
            correction
        }
        other => return Err(Error::Invalid(format!("{other:?} is not a periodic operator"))),
    };
    Ok(NystromOperator { matrix, kind, eta: Some(green.eta) })
}

/// Factorized `±½I + op`.
pub fn factor_shifted(op: &NystromOperator, shift: f64) -> Result<DenseSolver> {
    DenseSolver::new(&op.shifted(shift))
}

/// Partial sums of the Neumann series for `(½I + K* + ηR₂)⁻¹`.
#[derive(Clone, Debug)]
pub struct NeumannSeries {
    /// `partial_sums[L]` holds the truncation after terms `0..=L`.
    pub partial_sums: Vec<Vec<f64>>,
    pub term_norms: Vec<f64>,
}

impl NeumannSeries {
    pub fn last(&self) -> &[f64] {
        self.partial_sums.last().unwrap()
    }
}

/// `Σ_{ℓ=0}^{L} (−η)^ℓ R₃^ℓ (½I + K*)⁻¹ rhs` with `R₃ = (½I + K*)⁻¹ R₂`.
///
/// `free` factors `½I + K*`; `r2` is the scaled correction `(K*_p − K*)/η`.
pub fn neumann_series_inverse(
    free: &DenseSolver,
    r2: &NystromOperator,
    eta: f64,
    rhs: &[f64],
    terms: usize,
) -> Result<NeumannSeries> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Domain("eta must be in (0,1]".into()));
    }
    if eta > NEUMANN_ETA_MAX {
        return Err(Error::Divergence(format!("eta = {eta} exceeds the accepted bound {NEUMANN_ETA_MAX}")));
    }
    let mut term = free.solve(rhs)?;
    let mut sum = term.clone();
    let sup = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut out = NeumannSeries { partial_sums: vec![sum.clone()], term_norms: vec![sup(&term)] };
    for l in 1..=terms {
        let mut next = free.solve(&r2.apply(&term))?;
        next.iter_mut().for_each(|v| *v *= -eta);
        let norm_next = sup(&next);
        let norm_prev = out.term_norms[l - 1];
        if norm_next > norm_prev && norm_next > 1e-14 * out.term_norms[0] {
            return Err(Error::Divergence(format!(
                "term {l} grew from {norm_prev:.3e} to {norm_next:.3e} at eta = {eta}"
            )));
        }
        sum.iter_mut().zip(&next).for_each(|(s, t)| *s += t);
        out.partial_sums.push(sum.clone());
        out.term_norms.push(norm_next);
        term = next;
    }
    Ok(out)
}

/// Potentials supported by off-boundary evaluation.
#[derive(Clone, Copy, Debug)]
pub enum PotentialKind<'g> {
    S,
    D,
    Sp(GreenEta<'g>),
    Dp(GreenEta<'g>),
}

impl PotentialKind<'_> {
    fn green(&self) -> Option<&GreenEta<'_>> {
        match self {
            PotentialKind::Sp(g) | PotentialKind::Dp(g) => Some(g),
            _ => None,
        }
    }

    fn is_single(&self) -> bool {
        matches!(self, PotentialKind::S | PotentialKind::Sp(_))
    }
}

/// Free-space kernel contribution of one source node: value and gradient in `x`.
#[inline]
fn free_kernel(single: bool, x: Point, y: Point, ny: Point, w: f64) -> (f64, Point) {
    let r = sub(x, y);
    let r2 = dot(r, r);
    if single {
        let v = 0.5 * r2.ln() / (2.0 * PI) * w;
        let c = w / (2.0 * PI * r2);
        (v, [c * r[0], c * r[1]])
    } else {
        let nr = dot(ny, r);
        let v = -nr / (2.0 * PI * r2) * w;
        let c = -w / (2.0 * PI * r2);
        let g = [c * (ny[0] - 2.0 * nr * r[0] / r2), c * (ny[1] - 2.0 * nr * r[1] / r2)];
        (v, g)
    }
}

/// Plain-quadrature potential with the near-boundary guard.
pub fn eval_potential(shape: &HoleShape, density: &[f64], kind: PotentialKind, x: Point) -> Result<f64> {
    Ok(eval_value_gradient(shape, density, kind, x)?.0)
}

pub fn eval_grad_potential(shape: &HoleShape, density: &[f64], kind: PotentialKind, x: Point) -> Result<Point> {
    Ok(eval_value_gradient(shape, density, kind, x)?.1)
}

fn eval_value_gradient(shape: &HoleShape, density: &[f64], kind: PotentialKind, x: Point) -> Result<(f64, Point)> {
    require_curves(shape)?;
    if density.len() != shape.n_total() {
        return Err(Error::Invalid(format!("density has {} values, expected {}", density.len(), shape.n_total())));
    }
    let x = wrap_target(kind, x);
    for c in &shape.components {
        let (d, h) = distance_to(c, x);
        if d < GUARD_FACTOR * h {
            return Err(Error::NearBoundary { distance: d, guard: GUARD_FACTOR * h });
        }
    }
    let (mut v, mut g) = (0.0, [0.0, 0.0]);
    for (c, curve) in shape.components.iter().enumerate() {
        let (cv, cg) = curve_sum(curve, &density[shape.range(c)], kind.is_single(), x);
        v += cv;
        g = [g[0] + cg[0], g[1] + cg[1]];
    }
    let (pv, pg) = periodic_sum(shape, density, kind, x);
    Ok((v + pv, [g[0] + pg[0], g[1] + pg[1]]))
}

/// Periodic targets are reduced to the fundamental cell of `(1/η)T²`.
fn wrap_target(kind: PotentialKind, x: Point) -> Point {
    match kind.green() {
        Some(g) => {
            let l = 1.0 / g.eta;
            [x[0] - l * (x[0] / l).round(), x[1] - l * (x[1] / l).round()]
        }
        None => x,
    }
}

fn distance_to(curve: &ClosedCurve, x: Point) -> (f64, f64) {
    let d = curve.points.iter().map(|p| norm(sub(*p, x))).fold(f64::INFINITY, f64::min);
    (d, curve.spacing())
}

fn curve_sum(curve: &ClosedCurve, density: &[f64], single: bool, x: Point) -> (f64, Point) {
    let (mut v, mut g) = (0.0, [0.0, 0.0]);
    for j in 0..curve.n_nodes() {
        let (kv, kg) = free_kernel(single, x, curve.points[j], curve.normals[j], curve.weights[j] * density[j]);
        v += kv;
        g[0] += kg[0];
        g[1] += kg[1];
    }
    (v, g)
}

fn periodic_sum(shape: &HoleShape, density: &[f64], kind: PotentialKind, x: Point) -> (f64, Point) {
    let Some(green) = kind.green() else {
        return (0.0, [0.0, 0.0]);
    };
    let (mut v, mut g) = (0.0, [0.0, 0.0]);
    for ((y, ny), (w, phi)) in shape.points().zip(shape.normals()).zip(shape.weights().zip(density)) {
        let r = sub(x, *y);
        let wphi = w * phi;
        if kind.is_single() {
            let (pv, gr) = green.perturbation_and_grad2(r);
            v += pv * wphi;
            g[0] += gr[0] * wphi;
            g[1] += gr[1] * wphi;
        } else {
            // ∂_{N_y} of (G^η − Γ)(y − x) = −N_y·∇(G^η − Γ)(x − y)
            let gr = green.grad_perturbation2(r);
            v -= dot(*ny, gr) * wphi;
            let h = hessian_r(green, r);
            g[0] -= (h[0][0] * ny[0] + h[0][1] * ny[1]) * wphi;
            g[1] -= (h[1][0] * ny[0] + h[1][1] * ny[1]) * wphi;
        }
    }
    (v, g)
}

/// Hessian of `(G^η − Γ)` by central differences of its analytic gradient.
fn hessian_r(green: &GreenEta, r: Point) -> [[f64; 2]; 2] {
    let h = 1e-5 / green.eta;
    let gp0 = green.grad_perturbation2([r[0] + h, r[1]]);
    let gm0 = green.grad_perturbation2([r[0] - h, r[1]]);
    let gp1 = green.grad_perturbation2([r[0], r[1] + h]);
    let gm1 = green.grad_perturbation2([r[0], r[1] - h]);
    [
        [(gp0[0] - gm0[0]) / (2.0 * h), (gp1[0] - gm1[0]) / (2.0 * h)],
        [(gp0[1] - gm0[1]) / (2.0 * h), (gp1[1] - gm1[1]) / (2.0 * h)],
    ]
}

/// Taylor expansion of the smooth part `Σ_j c_j (G^η − Γ)(z − y_j)` of a
/// periodic single layer with `c_j = w_j φ_j`.
///
/// With `x = ηz`, `u_j = ηy_j` and `H = R + |·|²/4`, which is harmonic in the
/// unit disk, the sum is `(log η/2π)Σc − Σ c_j|x − u_j|²/4 + Re f(x)` where
/// `f(ζ) = Σ_m b_m (ζ/ρ)^m` is obtained from samples of `Σ c_j H(x − u_j)` on
/// the circle `|x| = ρ`. It converges on the whole wrapped cell once the hole
/// is small enough.
struct SmoothExpansion {
    eta: f64,
    rho: f64,
    sum_c: f64,
    sum_cu: Point,
    sum_cu2: f64,
    coeffs: Vec<Complex<f64>>,
}

impl SmoothExpansion {
    fn new(shape: &HoleShape, density: &[f64], green: &GreenEta) -> Option<Self> {
        let eta = green.eta;
        let reach = shape.points().map(|p| norm(*p)).fold(0.0, f64::max) * eta;
        let r_eval = 0.5 * 2f64.sqrt() * (1.0 + 1e-9);
        let radius = 1.0 - reach;
        if r_eval > SMOOTH_RATIO_MAX * radius {
            return None;
        }
        let rho = 0.5 * (r_eval + radius);
        let sources: Vec<(Point, f64)> = shape
            .points()
            .zip(shape.weights().zip(density))
            .map(|(y, (w, phi))| ([eta * y[0], eta * y[1]], w * phi))
            .collect();
        let h = |x: Point| -> f64 {
            sources
                .iter()
                .map(|(u, c)| {
                    let d = sub(x, *u);
                    c * (green.base.smooth_part2(d) + 0.25 * dot(d, d))
                })
                .sum()
        };
        let n = SMOOTH_SAMPLES;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|m| {
                let t = 2.0 * PI * m as f64 / n as f64;
                Complex::new(h([rho * t.cos(), rho * t.sin()]), 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mut coeffs: Vec<Complex<f64>> = (0..n / 2)
            .map(|m| if m == 0 { buf[0] / n as f64 } else { buf[m] * (2.0 / n as f64) })
            .collect();
        // the coefficient of e^{imθ} in Re f is b_m/2, so b_m = 2X_m/N; keep the terms that matter on the cell
        let scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let q = r_eval / rho;
        let last = coeffs
            .iter()
            .enumerate()
            .rev()
            .find(|(m, c)| c.norm() * q.powi(*m as i32) > 1e-17 * scale)
            .map_or(0, |(m, _)| m);
        coeffs.truncate(last + 1);
        let sum_c = sources.iter().map(|(_, c)| c).sum();
        let sum_cu = sources.iter().fold([0.0, 0.0], |a, (u, c)| [a[0] + c * u[0], a[1] + c * u[1]]);
        let sum_cu2 = sources.iter().map(|(u, c)| c * dot(*u, *u)).sum();
        Some(SmoothExpansion { eta, rho, sum_c, sum_cu, sum_cu2, coeffs })
    }

    /// Value and `z`-gradient at a wrapped target `z`.
    fn eval(&self, z: Point) -> (f64, Point) {
        let eta = self.eta;
        let x = [eta * z[0], eta * z[1]];
        let zeta = Complex::new(x[0], x[1]) / self.rho;
        let (mut f, mut df) = (Complex::new(0.0, 0.0), Complex::new(0.0, 0.0));
        for c in self.coeffs.iter().rev() {
            df = df * zeta + f;
            f = f * zeta + c;
        }
        df /= self.rho;
        let quad = -0.25 * (self.sum_c * dot(x, x) - 2.0 * dot(x, self.sum_cu) + self.sum_cu2);
        let gq = [-0.5 * (self.sum_c * x[0] - self.sum_cu[0]), -0.5 * (self.sum_c * x[1] - self.sum_cu[1])];
        let value = eta.ln() / (2.0 * PI) * self.sum_c + quad + f.re;
        (value, [eta * (gq[0] + df.re), eta * (gq[1] - df.im)])
    }
}

/// Off-boundary evaluator that honors the guard by trigonometric upsampling
/// of the geometry and density near the boundary.
pub struct FieldEvaluator<'s, 'g> {
    shape: &'s HoleShape,
    density: Vec<f64>,
    kind: PotentialKind<'g>,
    /// `levels[c][l]` caches component `c` at `2^l` times the base resolution.
    levels: Vec<Vec<OnceLock<(ClosedCurve, Vec<f64>)>>>,
    /// Per component: center, smallest and largest node distance from it.
    bounds: Vec<(Point, f64, f64)>,
    smooth: OnceLock<Option<SmoothExpansion>>,
}

impl<'s, 'g> FieldEvaluator<'s, 'g> {
    pub fn new(shape: &'s HoleShape, density: Vec<f64>, kind: PotentialKind<'g>) -> Result<Self> {
        require_curves(shape)?;
        if density.len() != shape.n_total() {
            return Err(Error::Invalid(format!("density has {} values, expected {}", density.len(), shape.n_total())));
        }
        let depth = MAX_UPSAMPLE.trailing_zeros() as usize + 1;
        let levels = shape
            .components
            .iter()
            .map(|_| (0..depth).map(|_| OnceLock::new()).collect())
            .collect();
        let bounds = shape
            .components
            .iter()
            .map(|c| {
                let center = c.kind().center();
                let d = c.points.iter().map(|p| norm(sub(*p, center)));
                (center, d.clone().fold(f64::INFINITY, f64::min), d.fold(0.0, f64::max))
            })
            .collect();
        Ok(FieldEvaluator { shape, density, kind, levels, bounds, smooth: OnceLock::new() })
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn shape(&self) -> &HoleShape {
        self.shape
    }

    fn level(&self, c: usize, l: usize) -> &(ClosedCurve, Vec<f64>) {
        self.levels[c][l].get_or_init(|| {
            let curve = &self.shape.components[c];
            let factor = 1 << l;
            let dens = &self.density[self.shape.range(c)];
            (curve.refined(factor), trig::upsample(dens, factor))
        })
    }

    pub fn value(&self, x: Point) -> Result<f64> {
        Ok(self.value_and_gradient(x)?.0)
    }

    pub fn gradient(&self, x: Point) -> Result<Point> {
        Ok(self.value_and_gradient(x)?.1)
    }

    pub fn value_and_gradient(&self, x: Point) -> Result<(f64, Point)> {
        let x = wrap_target(self.kind, x);
        let (mut v, mut g) = (0.0, [0.0, 0.0]);
        for (c, curve) in self.shape.components.iter().enumerate() {
            let (center, rmin, rmax) = self.bounds[c];
            let rc = norm(sub(x, center));
            let h0 = curve.spacing();
            // annulus bound on the node distance avoids the full scan for far targets
            let far = (rc - rmax).max(rmin - rc) >= GUARD_FACTOR * h0;
            let d0 = if far { f64::INFINITY } else { distance_to(curve, x).0 };
            let mut l = 0;
            if d0 < GUARD_FACTOR * h0 {
                // distance measured on the finest nodes, then the coarsest adequate level
                let fine = self.level(c, self.levels[c].len() - 1);
                let (d, hf) = distance_to(&fine.0, x);
                if d < GUARD_FACTOR * hf {
                    return Err(Error::NearBoundary { distance: d, guard: GUARD_FACTOR * hf });
                }
                while UPSAMPLE_TARGET * h0 / (1 << l) as f64 > d && (1 << l) < MAX_UPSAMPLE {
                    l += 1;
                }
            }
            let (cv, cg) = if l == 0 {
                curve_sum(curve, &self.density[self.shape.range(c)], self.kind.is_single(), x)
            } else {
                let (fc, fd) = self.level(c, l);
                curve_sum(fc, fd, self.kind.is_single(), x)
            };
            v += cv;
            g = [g[0] + cg[0], g[1] + cg[1]];
        }
        let (pv, pg) = match (self.kind, self.smooth_expansion()) {
            (PotentialKind::Sp(_), Some(e)) => e.eval(x),
            _ => periodic_sum(self.shape, &self.density, self.kind, x),
        };
        Ok((v + pv, [g[0] + pg[0], g[1] + pg[1]]))
    }

    fn smooth_expansion(&self) -> Option<&SmoothExpansion> {
        self.smooth
            .get_or_init(|| match self.kind {
                PotentialKind::Sp(g) => SmoothExpansion::new(self.shape, &self.density, &g),
                _ => None,
            })
            .as_ref()
    }

    /// Same evaluation without the smooth-part expansion, for cross-checks.
    pub fn value_and_gradient_direct(&self, x: Point) -> Result<(f64, Point)> {
        let (v, g) = self.value_and_gradient(x)?;
        let x = wrap_target(self.kind, x);
        match (self.kind, self.smooth_expansion()) {
            (PotentialKind::Sp(_), Some(e)) => {
                let (ev, eg) = e.eval(x);
                let (pv, pg) = periodic_sum(self.shape, &self.density, self.kind, x);
                Ok((v - ev + pv, [g[0] - eg[0] + pg[0], g[1] - eg[1] + pg[1]]))
            }
            _ => Ok((v, g)),
        }
    }
}

/// Boundary trace of a single-layer potential and its gradient from outside:
/// value `Sφ`, normal derivative `(½I + K*)φ`, tangential derivative by spectral
/// differentiation of the trace.
pub struct SingleLayerTrace {
    pub value: Vec<f64>,
    pub normal: Vec<f64>,
    pub tangential: Vec<f64>,
}

impl SingleLayerTrace {
    /// `s_op` and `kstar_op` must be assembled on `shape`; `side` is +1 outside, −1 inside.
    pub fn new(shape: &HoleShape, s_op: &NystromOperator, kstar_op: &NystromOperator, density: &[f64], side: f64) -> Self {
        let value = s_op.apply(density);
        let mut normal = kstar_op.apply(density);
        normal.iter_mut().zip(density).for_each(|(v, p)| *v += 0.5 * side * p);
        let mut tangential = Vec::with_capacity(value.len());
        for (c, curve) in shape.components.iter().enumerate() {
            let dv = trig::derivative(&value[shape.range(c)]);
            tangential.extend(dv.iter().zip(&curve.speeds).map(|(d, s)| d / s));
        }
        SingleLayerTrace { value, normal, tangential }
    }

    /// Gradient at node `i` expressed in Cartesian components.
    pub fn gradient(&self, shape: &HoleShape, i: usize) -> Point {
        let (c, l) = shape.locate(i);
        let curve = &shape.components[c];
        let n = curve.normals[l];
        let t = curve.tangents[l];
        [self.normal[i] * n[0] + self.tangential[i] * t[0], self.normal[i] * n[1] + self.tangential[i] * t[1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_circle;

    fn circle(n: usize) -> HoleShape {
        HoleShape::new(vec![make_circle(0.25, [0.0, 0.0], n).unwrap()]).unwrap()
    }

    #[test]
    fn gauss_identity_on_circle() {
        let shape = circle(64);
        let k = assemble_free(&shape, OperatorKind::K).unwrap();
        for v in k.apply(&vec![1.0; 64]) {
            assert!((v - 0.5).abs() < 1e-10);
        }
        let d = assemble_free(&shape, OperatorKind::D).unwrap();
        for v in d.apply(&vec![1.0; 64]) {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn single_layer_of_constant_on_circle() {
        // S[1] = a log a on a circle of radius a
        let shape = circle(64);
        let s = assemble_free(&shape, OperatorKind::S).unwrap();
        let a: f64 = 0.25;
        for v in s.apply(&vec![1.0; 64]) {
            assert!((v - a * a.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_expansion_matches_direct_sum() {
        use crate::green::TorusGreen;
        let shape = HoleShape::new(vec![crate::geometry::make_ellipse(0.25, 0.15, [0.03, 0.0], 0.4, 64).unwrap()]).unwrap();
        let dens: Vec<f64> = shape.components[0].params.iter().map(|t| t.cos() + 0.2 * (3.0 * t).sin()).collect();
        let g = TorusGreen::new(2).unwrap();
        for eta in [0.4, 0.1, 0.02] {
            let ge = GreenEta::new(&g, eta).unwrap();
            let ev = FieldEvaluator::new(&shape, dens.clone(), PotentialKind::Sp(ge)).unwrap();
            assert!(ev.smooth_expansion().is_some());
            let l = 0.5 / eta;
            for z in [[0.4, 0.3], [l * 0.99, -l * 0.98], [-l * 0.3, l * 0.999], [1.3, -0.2]] {
                let (a, ga) = ev.value_and_gradient(z).unwrap();
                let (b, gb) = ev.value_and_gradient_direct(z).unwrap();
                assert!((a - b).abs() < 1e-12, "eta {eta} z {z:?}: {a} vs {b}");
                assert!((ga[0] - gb[0]).abs() < 1e-12 && (ga[1] - gb[1]).abs() < 1e-12, "{ga:?} vs {gb:?}");
            }
        }
        let ge = GreenEta::new(&g, 0.9).unwrap();
        let ev = FieldEvaluator::new(&shape, dens, PotentialKind::Sp(ge)).unwrap();
        assert!(ev.smooth_expansion().is_none());
    }

    #[test]
    fn guard_rejects_near_points() {
        let shape = circle(64);
        let dens = vec![1.0; 64];
        let err = eval_potential(&shape, &dens, PotentialKind::D, [0.251, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NearBoundary { .. }));
        let ev = FieldEvaluator::new(&shape, dens, PotentialKind::D).unwrap();
        assert!((ev.value([0.253, 0.0]).unwrap()).abs() < 1e-10);
        assert!((ev.value([0.247, 0.01]).unwrap() - 1.0).abs() < 1e-10);
        assert!(matches!(ev.value([0.2501, 0.0]), Err(Error::NearBoundary { .. })));
    }
}
